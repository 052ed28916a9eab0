#pragma once

// Error-accumulation laboratory: the analytic per-step bound for a perturbed
// (quantized) directional evaluator, perturbed-evaluator construction, and the
// empirical scaling-law fits that check the bound's predictions.
//
// Theory being exercised: over one solver step from lambda_s to
// lambda_t = lambda_s + h, a uniformly delta-bounded evaluator deviation
// produces a state deviation bounded by
//
//   delta * exp(-lambda_s) * sum_{n=0}^{k-1} h^{n+1}/(n+1)!        (order k)
//
// whose terms decay with exact ratio h/(n+1) and whose k -> infinity limit is
// delta * exp(-lambda_s) * (e^h - 1). The exact value of each underlying
// integral involves the lower incomplete gamma function gamma(n+1, h), which
// for integer n has the closed form n! * (1 - e^{-x} sum_{m<=n} x^m/m!) —
// evaluated here through the equivalent all-positive tail series
// n! e^{-x} sum_{m>n} x^m/m! because the closed form as written cancels
// catastrophically for small x.

#include "saq/rng.hpp"
#include "saq/samplers.hpp"
#include "saq/schedule.hpp"
#include "saq/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <vector>

namespace saq {

// gamma(n+1, x) = integral_0^x e^{-u} u^n du for integer n >= 0.
inline double lower_incomplete_gamma(int n, double x) {
    if (n < 0) throw std::invalid_argument("lower_incomplete_gamma: n must be >= 0");
    if (!(x >= 0.0)) throw std::invalid_argument("lower_incomplete_gamma: x must be >= 0");
    if (x == 0.0) return 0.0;
    double factorial = 1.0;
    for (int m = 2; m <= n; ++m) factorial *= m;
    if (x > 500.0) return factorial; // gamma(n+1, x) -> Gamma(n+1) far past the peak
    // tail series: n! e^{-x} sum_{m=n+1}^inf x^m / m!
    double term = 1.0;
    for (int m = 1; m <= n + 1; ++m) term *= x / m; // x^{n+1}/(n+1)!
    double sum = 0.0;
    // the series peaks near m = x, so allow enough terms to pass the peak
    const int limit = n + 1 + 1200;
    for (int m = n + 1; m < limit; ++m) {
        sum += term;
        term *= x / (m + 1);
        if (term < sum * 1e-18) break;
    }
    return factorial * std::exp(-x) * sum;
}

// Leading-order approximation x^{n+1}/(n+1), valid for small x.
inline double gamma_small_x_approx(int n, double x) {
    if (n < 0) throw std::invalid_argument("gamma_small_x_approx: n must be >= 0");
    double lead = 1.0;
    for (int m = 0; m <= n; ++m) lead *= x;
    return lead / static_cast<double>(n + 1);
}

// ---------------------------------------------------------------------------
// Analytic per-step bound
// ---------------------------------------------------------------------------

struct BoundParams {
    double delta = 0.0;    // uniform evaluator deviation
    int order_k = 1;       // solver order (number of expansion terms)
    double lambda_s = 0.0; // step start (log-SNR)
    double lambda_t = 0.0; // step end, > lambda_s
};

struct BoundResult {
    std::vector<double> terms; // terms[n] = delta e^{-lambda_s} h^{n+1}/(n+1)!
    double total = 0.0;
    double limit = 0.0; // k -> infinity value delta e^{-lambda_s} (e^h - 1)
};

inline BoundResult quant_error_bound(const BoundParams& p) {
    if (p.order_k < 1) throw std::invalid_argument("quant_error_bound: order_k must be >= 1");
    if (!(p.lambda_t > p.lambda_s))
        throw std::invalid_argument("quant_error_bound: lambda_t must exceed lambda_s");
    if (!(p.delta >= 0.0)) throw std::invalid_argument("quant_error_bound: delta must be >= 0");
    const double h = p.lambda_t - p.lambda_s;
    const double front = p.delta * std::exp(-p.lambda_s);
    BoundResult r;
    double term = front * h; // n = 0: h^1/1!
    for (int n = 0; n < p.order_k; ++n) {
        r.terms.push_back(term);
        r.total += term;
        term *= h / static_cast<double>(n + 2); // a_{n+1} = a_n * h/(n+2)
    }
    r.limit = front * std::expm1(h);
    return r;
}

// Exact value of the n-th expansion integral
//   integral_{lambda_s}^{lambda_t} e^{-lambda} (lambda - lambda_s)^n / n! dlambda
//     = e^{-lambda_s} gamma(n+1, h) / n!
// (each bound term h^{n+1}/(n+1)! is its upper estimate).
inline double exact_expansion_integral(int n, double lambda_s, double lambda_t) {
    const double h = lambda_t - lambda_s;
    double factorial = 1.0;
    for (int m = 2; m <= n; ++m) factorial *= m;
    return std::exp(-lambda_s) * lower_incomplete_gamma(n, h) / factorial;
}

// ---------------------------------------------------------------------------
// Perturbed evaluators: eps(x, t) + delta * u with u drawn per call, per
// coordinate, uniform in [-1, 1]. The unit stream depends only on the seed,
// never on delta, so sweeps over delta see identical noise patterns.
// ---------------------------------------------------------------------------

inline DirectionalEvaluator perturbed_evaluator(DirectionalEvaluator base, double delta,
                                                std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [base = std::move(base), delta, rng](const Tensor& x, double t) {
        Tensor eps = base(x, t);
        for (double& v : eps.data) v += delta * rng->uniform(-1.0, 1.0);
        return eps;
    };
}

// ---------------------------------------------------------------------------
// Scaling-law fits
// ---------------------------------------------------------------------------

struct FitResult {
    double slope = 0.0;
    double intercept = 0.0;
    double ci95 = 0.0; // 1.96 * standard error of the slope
};

inline FitResult fit_log_log(const std::vector<double>& xs, const std::vector<double>& ys) {
    const std::size_t m = xs.size();
    if (m < 2 || ys.size() != m) throw std::invalid_argument("fit_log_log: need >= 2 points");
    std::vector<double> lx(m), ly(m);
    for (std::size_t i = 0; i < m; ++i) {
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < m; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= m;
    my /= m;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < m; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    FitResult f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (m > 2) {
        double ss = 0;
        for (std::size_t i = 0; i < m; ++i) {
            const double r = ly[i] - (f.intercept + f.slope * lx[i]);
            ss += r * r;
        }
        f.ci95 = 1.96 * std::sqrt(ss / (static_cast<double>(m - 2) * sxx));
    }
    return f;
}

// RMS of the per-chain euclidean deviation between two [n, d] tensors.
inline double endpoint_deviation(const Tensor& a, const Tensor& b) {
    return std::sqrt(mean_squared_deviation(a, b) * static_cast<double>(a.cols()));
}

struct SweepPoint {
    double value = 0.0; // delta or h
    double dev_dpm1 = 0.0;
    double dev_dpm2 = 0.0;
};

struct StepBoundRecord {
    std::size_t step = 0;
    double lambda_s = 0.0;
    double lambda_t = 0.0;
    double directional_dev = 0.0; // measured ||eps_hat - eps|| (RMS per chain)
    double state_dev = 0.0;       // one-step state deviation it induced
    double bound = 0.0;           // analytic per-step bound at this delta
};

struct CrossoverRecord {
    double delta = 0.0;
    double h_cross = 0.0; // largest grid h with disc < quant; 0 if never
    std::vector<double> h_values;
    std::vector<double> disc_errors;
    std::vector<double> quant_errors;
};

struct ScalingLawConfig {
    std::vector<double> deltas = {1e-3, 3e-3, 1e-2, 3e-2};
    std::size_t grid_steps = 20;  // full-trajectory grid for the delta sweep
    std::size_t chains = 64;      // chains per full-trajectory run
    std::vector<double> h_values = {0.05, 0.1, 0.2, 0.4};
    double h_delta = 1e-2;        // fixed delta for the h sweep
    double anchor_t = 0.5;        // single-step sweep anchor time
    std::size_t probes = 16;      // anchor states for the h sweep
    // The perturbation deviation of a full solve shrinks like delta*sqrt(h)
    // (independent per-call noise accumulates as a random walk) while the
    // order-1 discretization error shrinks like h, so the crossover sits at
    // h* ~ delta^2 and the grid list must reach fine resolutions before the
    // larger deltas cross.
    std::vector<std::size_t> crossover_steps = {10, 20, 40, 80, 160, 320, 640, 1280};
    int bound_order_terms = 4;
    std::uint64_t seed = 0;
};

struct ErrorReport {
    ScalingLawConfig config;
    std::vector<SweepPoint> delta_sweep;
    FitResult delta_fit_dpm1, delta_fit_dpm2;
    std::vector<SweepPoint> h_sweep;
    FitResult h_fit_dpm1, h_fit_dpm2;
    std::vector<StepBoundRecord> step_records_dpm1, step_records_dpm2;
    std::vector<double> c_per_delta_dpm1, c_per_delta_dpm2;
    double c_fit_dpm1 = 0.0, c_fit_dpm2 = 0.0;
    bool c_stable_dpm1 = false, c_stable_dpm2 = false;
    std::vector<CrossoverRecord> crossover;
};

namespace detail {

inline Tensor normal_batch(Rng& rng, std::size_t n, std::size_t d) {
    Tensor x({n, d});
    for (double& v : x.data) v = rng.normal();
    return x;
}

inline Tensor one_step(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                       SamplerKind kind, const Tensor& x, double tp, double tn) {
    if (kind == SamplerKind::Dpm2) return dpm2_step(eval, sched, x, tp, tn).x_next;
    return dpm1_step(eval, sched, x, tp, tn).x_next;
}

} // namespace detail

// Full scaling-law study against a base evaluator. Everything below is
// deterministic in cfg.seed; sub-seeds are derived per component so the delta
// sweep reuses one unit-noise stream across delta values.
inline ErrorReport fit_scaling_laws(const NoiseSchedule& sched,
                                    const DirectionalEvaluator& base,
                                    const ScalingLawConfig& cfg, std::size_t dim = 2) {
    if (cfg.deltas.size() < 2 || cfg.h_values.size() < 2)
        throw std::invalid_argument("fit_scaling_laws: need >= 2 sweep points");
    ErrorReport rep;
    rep.config = cfg;

    TimeGrid grid = TimeGrid::uniform_lambda(sched, cfg.grid_steps);
    Rng init_rng(derive_subseed(cfg.seed, "errlab-init", 0));
    Tensor xT = detail::normal_batch(init_rng, cfg.chains, dim);

    SampleOptions o1, o2;
    o1.kind = SamplerKind::Dpm1;
    o2.kind = SamplerKind::Dpm2;
    o1.record_evals = o2.record_evals = false;
    Trajectory base1 = sample(base, sched, grid, xT, o1);
    Trajectory base2 = sample(base, sched, grid, xT, o2);

    // ---- delta sweep: full trajectories at a fixed grid --------------------
    const std::uint64_t pseed = derive_subseed(cfg.seed, "errlab-perturb", 0);
    std::vector<double> d1, d2;
    for (double delta : cfg.deltas) {
        Trajectory p1 =
            sample(perturbed_evaluator(base, delta, pseed), sched, grid, xT, o1);
        Trajectory p2 =
            sample(perturbed_evaluator(base, delta, pseed), sched, grid, xT, o2);
        SweepPoint pt;
        pt.value = delta;
        pt.dev_dpm1 = endpoint_deviation(p1.endpoint(), base1.endpoint());
        pt.dev_dpm2 = endpoint_deviation(p2.endpoint(), base2.endpoint());
        rep.delta_sweep.push_back(pt);
        d1.push_back(pt.dev_dpm1);
        d2.push_back(pt.dev_dpm2);
    }
    rep.delta_fit_dpm1 = fit_log_log(cfg.deltas, d1);
    rep.delta_fit_dpm2 = fit_log_log(cfg.deltas, d2);

    // ---- h sweep: single steps from a fixed anchor -------------------------
    Rng anchor_rng(derive_subseed(cfg.seed, "errlab-anchor", 0));
    Tensor anchors = detail::normal_batch(anchor_rng, cfg.probes, dim);
    const double lam_anchor = sched.lambda_of_t(cfg.anchor_t);
    const std::uint64_t hseed = derive_subseed(cfg.seed, "errlab-hperturb", 0);
    std::vector<double> h1, h2;
    for (double h : cfg.h_values) {
        const double t_next = sched.t_of_lambda(lam_anchor + h);
        SweepPoint pt;
        pt.value = h;
        for (SamplerKind kind : {SamplerKind::Dpm1, SamplerKind::Dpm2}) {
            DirectionalEvaluator pe = perturbed_evaluator(base, cfg.h_delta, hseed);
            Tensor y_base = detail::one_step(base, sched, kind, anchors, cfg.anchor_t, t_next);
            Tensor y_pert = detail::one_step(pe, sched, kind, anchors, cfg.anchor_t, t_next);
            const double dev = endpoint_deviation(y_pert, y_base);
            if (kind == SamplerKind::Dpm1)
                pt.dev_dpm1 = dev;
            else
                pt.dev_dpm2 = dev;
        }
        rep.h_sweep.push_back(pt);
        h1.push_back(pt.dev_dpm1);
        h2.push_back(pt.dev_dpm2);
    }
    rep.h_fit_dpm1 = fit_log_log(cfg.h_values, h1);
    rep.h_fit_dpm2 = fit_log_log(cfg.h_values, h2);

    // ---- per-step bound dominance over the fitted grid ---------------------
    for (SamplerKind kind : {SamplerKind::Dpm1, SamplerKind::Dpm2}) {
        const Trajectory& base_traj = (kind == SamplerKind::Dpm1) ? base1 : base2;
        const int k_terms = (kind == SamplerKind::Dpm1) ? 1 : 2;
        auto& recs = (kind == SamplerKind::Dpm1) ? rep.step_records_dpm1 : rep.step_records_dpm2;
        auto& cs = (kind == SamplerKind::Dpm1) ? rep.c_per_delta_dpm1 : rep.c_per_delta_dpm2;
        // step records are kept for the delta closest to the h-sweep's delta
        double ref_delta = cfg.deltas.front();
        for (double delta : cfg.deltas)
            if (std::abs(delta - cfg.h_delta) < std::abs(ref_delta - cfg.h_delta))
                ref_delta = delta;
        for (double delta : cfg.deltas) {
            DirectionalEvaluator pe = perturbed_evaluator(base, delta, pseed);
            double cmax = 0.0;
            for (std::size_t i = 0; i + 1 < grid.times.size(); ++i) {
                const Tensor& xi = base_traj.states[i];
                const double tp = grid.times[i], tn = grid.times[i + 1];
                Tensor eb = base(xi, tp);
                Tensor ep = pe(xi, tp);
                Tensor yb = detail::one_step(base, sched, kind, xi, tp, tn);
                Tensor yp = detail::one_step(pe, sched, kind, xi, tp, tn);
                StepBoundRecord rec;
                rec.step = i;
                rec.lambda_s = grid.lambdas[i];
                rec.lambda_t = grid.lambdas[i + 1];
                rec.directional_dev = endpoint_deviation(ep, eb);
                rec.state_dev = endpoint_deviation(yp, yb);
                BoundParams bp;
                bp.delta = delta * std::sqrt(static_cast<double>(dim)); // per-chain 2-norm scale
                bp.order_k = std::max(k_terms, cfg.bound_order_terms);
                bp.lambda_s = rec.lambda_s;
                bp.lambda_t = rec.lambda_t;
                rec.bound = quant_error_bound(bp).total;
                cmax = std::max(cmax, rec.state_dev / rec.bound);
                if (delta == ref_delta) recs.push_back(rec);
            }
            cs.push_back(cmax);
        }
        double cmin_all = 1e300, cmax_all = 0.0;
        for (double c : cs) {
            cmin_all = std::min(cmin_all, c);
            cmax_all = std::max(cmax_all, c);
        }
        if (kind == SamplerKind::Dpm1) {
            rep.c_fit_dpm1 = cmax_all;
            rep.c_stable_dpm1 = cmax_all <= 2.0 * cmin_all;
        } else {
            rep.c_fit_dpm2 = cmax_all;
            rep.c_stable_dpm2 = cmax_all <= 2.0 * cmin_all;
        }
    }

    // ---- discretization/quantization crossover -----------------------------
    // Reference endpoint: order-2 solve at 4x the finest grid.
    const std::size_t ref_steps = 4 * cfg.crossover_steps.back();
    TimeGrid ref_grid = TimeGrid::uniform_lambda(sched, ref_steps);
    Trajectory ref = sample(base, sched, ref_grid, xT, o2);
    const double lam_span = sched.lambda_max() - sched.lambda_min();
    // Baseline solves and discretization errors do not depend on delta.
    std::vector<Trajectory> base_runs;
    std::vector<double> cross_h, cross_disc;
    for (std::size_t steps : cfg.crossover_steps) {
        TimeGrid g = TimeGrid::uniform_lambda(sched, steps);
        base_runs.push_back(sample(base, sched, g, xT, o1));
        cross_h.push_back(lam_span / static_cast<double>(steps));
        cross_disc.push_back(endpoint_deviation(base_runs.back().endpoint(), ref.endpoint()));
    }
    for (double delta : cfg.deltas) {
        CrossoverRecord cr;
        cr.delta = delta;
        cr.h_values = cross_h;
        cr.disc_errors = cross_disc;
        for (std::size_t i = 0; i < cfg.crossover_steps.size(); ++i) {
            TimeGrid g = TimeGrid::uniform_lambda(sched, cfg.crossover_steps[i]);
            Trajectory p = sample(perturbed_evaluator(base, delta, pseed), sched, g, xT, o1);
            cr.quant_errors.push_back(endpoint_deviation(p.endpoint(), base_runs[i].endpoint()));
        }
        // walk from the largest h down: crossover is the largest h where the
        // discretization error already sits below the quantization error
        for (std::size_t i = 0; i < cr.h_values.size(); ++i) {
            if (cr.disc_errors[i] < cr.quant_errors[i]) {
                cr.h_cross = cr.h_values[i];
                break;
            }
        }
        rep.crossover.push_back(cr);
    }
    return rep;
}

// One-seed order-sensitivity measurement: endpoint deviation of perturbed vs
// unperturbed runs for both solver orders on the same grid.
struct SensitivityResult {
    double dev_dpm1 = 0.0;
    double dev_dpm2 = 0.0;
};

inline SensitivityResult sensitivity_comparison(const NoiseSchedule& sched,
                                                const DirectionalEvaluator& base,
                                                std::size_t steps, double delta,
                                                std::uint64_t seed, std::size_t chains = 64,
                                                std::size_t dim = 2) {
    TimeGrid grid = TimeGrid::uniform_lambda(sched, steps);
    Rng rng(derive_subseed(seed, "sensitivity-init", 0));
    Tensor xT = detail::normal_batch(rng, chains, dim);
    const std::uint64_t pseed = derive_subseed(seed, "sensitivity-perturb", 0);
    SensitivityResult out;
    for (SamplerKind kind : {SamplerKind::Dpm1, SamplerKind::Dpm2}) {
        SampleOptions opt;
        opt.kind = kind;
        opt.record_evals = false;
        Trajectory b = sample(base, sched, grid, xT, opt);
        Trajectory p = sample(perturbed_evaluator(base, delta, pseed), sched, grid, xT, opt);
        const double dev = endpoint_deviation(p.endpoint(), b.endpoint());
        if (kind == SamplerKind::Dpm1)
            out.dev_dpm1 = dev;
        else
            out.dev_dpm2 = dev;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Midpoint (explicit RK2) vs second-order Taylor on the simplified flow
// dx/dlambda = eps(x, lambda): both are O(h^3)-accurate single steps, and
// their difference contracts at O(h^3) as h -> 0. Jacobian-vector products in
// the Taylor step use central differences with a fixed probe step.
// ---------------------------------------------------------------------------

struct MidpointTaylorResult {
    Tensor rk2;
    Tensor taylor2;
    double discrepancy = 0.0; // RMS per-chain 2-norm difference
};

inline MidpointTaylorResult midpoint_vs_taylor(const DirectionalEvaluator& eval,
                                               const NoiseSchedule& sched, const Tensor& x,
                                               double lambda0, double h, double fd_step = 1e-5) {
    auto eval_lam = [&](const Tensor& xx, double lam) {
        return eval(xx, sched.t_of_lambda(lam));
    };
    MidpointTaylorResult r;
    Tensor k1 = eval_lam(x, lambda0);

    // midpoint rule
    Tensor xm = x;
    axpy(0.5 * h, k1, xm);
    Tensor k2 = eval_lam(xm, lambda0 + 0.5 * h);
    r.rk2 = x;
    axpy(h, k2, r.rk2);

    // taylor-2: x + h eps + h^2/2 (d eps/d lambda + (d eps/dx) eps)
    Tensor ep = eval_lam(x, lambda0 + fd_step);
    Tensor em = eval_lam(x, lambda0 - fd_step);
    Tensor dlam = ep;
    dlam -= em;
    dlam *= 1.0 / (2.0 * fd_step);

    Tensor xp = x, xq = x;
    axpy(fd_step, k1, xp);
    axpy(-fd_step, k1, xq);
    Tensor jp = eval_lam(xp, lambda0);
    Tensor jq = eval_lam(xq, lambda0);
    Tensor jvp = jp;
    jvp -= jq;
    jvp *= 1.0 / (2.0 * fd_step);

    r.taylor2 = x;
    axpy(h, k1, r.taylor2);
    axpy(0.5 * h * h, dlam, r.taylor2);
    axpy(0.5 * h * h, jvp, r.taylor2);

    r.discrepancy = endpoint_deviation(r.rk2, r.taylor2);
    return r;
}

} // namespace saq
