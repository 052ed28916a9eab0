#pragma once

// Deterministic ODE samplers over the VP schedule, parametrized by a
// directional evaluator eps(x, t) so full-precision, quantized, analytic, and
// perturbed predictors all run through identical stepping code.
//
// All steppers advance a whole batch of chains at once ([n, d] states) and
// return every evaluator output they produced, so the driver records exactly
// one evaluation per call site — important for perturbed evaluators whose
// noise stream position must be reproducible.
//
// Conventions: grids run from t = T down to t = t_min; lambda(t) increases
// along the trajectory, so step sizes h_i = lambda_{i+1} - lambda_i are
// positive.

#include "saq/mixture.hpp"
#include "saq/net.hpp"
#include "saq/schedule.hpp"
#include "saq/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <deque>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace saq {

using DirectionalEvaluator = std::function<Tensor(const Tensor& x, double t)>;

inline DirectionalEvaluator make_analytic_evaluator(ToyDistribution dist, NoiseSchedule sched) {
    dist.validate();
    return [dist = std::move(dist), sched](const Tensor& x, double t) {
        return analytic_epsilon(dist, sched, x, t);
    };
}

inline DirectionalEvaluator make_net_evaluator(Parameters params, LoRAAdapter adapter) {
    return [params = std::move(params), adapter = std::move(adapter)](const Tensor& x, double t) {
        return forward(params, &adapter, x, t);
    };
}

inline DirectionalEvaluator make_net_evaluator(Parameters params) {
    return [params = std::move(params)](const Tensor& x, double t) {
        return forward(params, nullptr, x, t);
    };
}

// ---------------------------------------------------------------------------
// Time grids
// ---------------------------------------------------------------------------

struct TimeGrid {
    std::vector<double> times;   // descending, times[0] = t_start
    std::vector<double> lambdas; // matching lambda values, ascending

    std::size_t steps() const { return times.empty() ? 0 : times.size() - 1; }

    void validate() const {
        if (times.size() < 2) throw std::invalid_argument("TimeGrid: need at least one step");
        if (times.size() != lambdas.size())
            throw std::invalid_argument("TimeGrid: times/lambdas length mismatch");
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (!(times[i] < times[i - 1]))
                throw std::invalid_argument("TimeGrid: times must strictly decrease");
            if (!(lambdas[i] > lambdas[i - 1]))
                throw std::invalid_argument("TimeGrid: lambdas must strictly increase");
        }
    }

    // Equal spacing in lambda between t_start and t_end (the half-logSNR
    // spacing used throughout the experiments).
    static TimeGrid uniform_lambda(const NoiseSchedule& sched, std::size_t steps,
                                   double t_start = -1.0, double t_end = -1.0) {
        sched.validate();
        if (steps == 0) throw std::invalid_argument("TimeGrid: steps must be > 0");
        if (t_start < 0.0) t_start = sched.final_time;
        if (t_end < 0.0) t_end = sched.t_min;
        if (!(t_end < t_start))
            throw std::invalid_argument("TimeGrid: t_end must be below t_start");
        const double l0 = sched.lambda_of_t(t_start);
        const double l1 = sched.lambda_of_t(t_end);
        TimeGrid g;
        g.times.resize(steps + 1);
        g.lambdas.resize(steps + 1);
        for (std::size_t i = 0; i <= steps; ++i) {
            const double frac = static_cast<double>(i) / static_cast<double>(steps);
            g.lambdas[i] = l0 + (l1 - l0) * frac;
            g.times[i] = (i == 0)       ? t_start
                         : (i == steps) ? t_end
                                        : sched.t_of_lambda(g.lambdas[i]);
        }
        g.validate();
        return g;
    }

    static TimeGrid uniform_time(const NoiseSchedule& sched, std::size_t steps,
                                 double t_start = -1.0, double t_end = -1.0) {
        sched.validate();
        if (steps == 0) throw std::invalid_argument("TimeGrid: steps must be > 0");
        if (t_start < 0.0) t_start = sched.final_time;
        if (t_end < 0.0) t_end = sched.t_min;
        if (!(t_end < t_start))
            throw std::invalid_argument("TimeGrid: t_end must be below t_start");
        TimeGrid g;
        g.times.resize(steps + 1);
        g.lambdas.resize(steps + 1);
        for (std::size_t i = 0; i <= steps; ++i) {
            const double frac = static_cast<double>(i) / static_cast<double>(steps);
            g.times[i] = t_start + (t_end - t_start) * frac;
            g.lambdas[i] = sched.lambda_of_t(g.times[i]);
        }
        g.validate();
        return g;
    }
};

// ---------------------------------------------------------------------------
// Single steps. Each returns the evaluations it consumed.
// ---------------------------------------------------------------------------

struct Dpm1Result {
    Tensor x_next;
    Tensor eps; // evaluated at (x, t_prev)
};

inline Dpm1Result dpm1_step(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                            const Tensor& x, double t_prev, double t_next) {
    const double lp = sched.lambda_of_t(t_prev), ln = sched.lambda_of_t(t_next);
    const double h = ln - lp;
    const double ap = sched.alpha(t_prev), an = sched.alpha(t_next);
    const double sn = sched.sigma(t_next);
    Dpm1Result r;
    r.eps = eval(x, t_prev);
    r.x_next = Tensor(x.shape);
    const double ratio = an / ap;
    const double coef = -sn * std::expm1(h);
    for (std::size_t i = 0; i < x.size(); ++i)
        r.x_next.data[i] = ratio * x.data[i] + coef * r.eps.data[i];
    return r;
}

struct DdimResult {
    Tensor x_next;
    Tensor eps;
};

inline DdimResult ddim_step(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                            const Tensor& x, double t_prev, double t_next) {
    const double ap = sched.alpha(t_prev), an = sched.alpha(t_next);
    const double sp = sched.sigma(t_prev), sn = sched.sigma(t_next);
    DdimResult r;
    r.eps = eval(x, t_prev);
    r.x_next = Tensor(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0hat = (x.data[i] - sp * r.eps.data[i]) / ap;
        r.x_next.data[i] = an * x0hat + sn * r.eps.data[i];
    }
    return r;
}

struct Dpm2Result {
    Tensor x_next;
    double s = 0.0;   // intermediate time
    Tensor u;         // intermediate state
    Tensor eps_first; // evaluated at (x, t_prev)
    Tensor eps_mid;   // evaluated at (u, s)
};

inline Dpm2Result dpm2_step(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                            const Tensor& x, double t_prev, double t_next) {
    const double lp = sched.lambda_of_t(t_prev), ln = sched.lambda_of_t(t_next);
    const double h = ln - lp;
    Dpm2Result r;
    r.s = sched.t_of_lambda(0.5 * (lp + ln));
    const double ap = sched.alpha(t_prev), as = sched.alpha(r.s), an = sched.alpha(t_next);
    const double ss = sched.sigma(r.s), sn = sched.sigma(t_next);

    r.eps_first = eval(x, t_prev);
    r.u = Tensor(x.shape);
    const double ratio_half = as / ap;
    const double coef_half = -ss * std::expm1(0.5 * h);
    for (std::size_t i = 0; i < x.size(); ++i)
        r.u.data[i] = ratio_half * x.data[i] + coef_half * r.eps_first.data[i];

    r.eps_mid = eval(r.u, r.s);
    r.x_next = Tensor(x.shape);
    const double ratio = an / ap;
    const double coef = -sn * std::expm1(h);
    for (std::size_t i = 0; i < x.size(); ++i)
        r.x_next.data[i] = ratio * x.data[i] + coef * r.eps_mid.data[i];
    return r;
}

struct PlmsResult {
    Tensor x_next;
    Tensor eps;       // raw evaluation at (x, t_prev); append to history
    Tensor direction; // the Adams-Bashforth blend actually applied
    int order = 1;
};

// Linear-multistep transfer: the DDIM map applied to a blended direction.
// history holds raw evaluations from previous steps, most recent first.
inline PlmsResult plms_step(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                            const Tensor& x, const std::deque<Tensor>& history, double t_prev,
                            double t_next, int max_order = 4) {
    if (max_order < 1 || max_order > 4)
        throw std::invalid_argument("plms_step: max_order must be in [1, 4]");
    PlmsResult r;
    r.eps = eval(x, t_prev);
    r.order = std::min<int>(max_order, 1 + static_cast<int>(history.size()));

    r.direction = Tensor(r.eps.shape);
    switch (r.order) {
        case 1:
            r.direction = r.eps;
            break;
        case 2:
            for (std::size_t i = 0; i < r.eps.size(); ++i)
                r.direction.data[i] =
                    (3.0 * r.eps.data[i] - history[0].data[i]) / 2.0;
            break;
        case 3:
            for (std::size_t i = 0; i < r.eps.size(); ++i)
                r.direction.data[i] = (23.0 * r.eps.data[i] - 16.0 * history[0].data[i] +
                                       5.0 * history[1].data[i]) /
                                      12.0;
            break;
        default:
            for (std::size_t i = 0; i < r.eps.size(); ++i)
                r.direction.data[i] = (55.0 * r.eps.data[i] - 59.0 * history[0].data[i] +
                                       37.0 * history[1].data[i] - 9.0 * history[2].data[i]) /
                                      24.0;
            break;
    }

    const double ap = sched.alpha(t_prev), an = sched.alpha(t_next);
    const double sp = sched.sigma(t_prev), sn = sched.sigma(t_next);
    // (an^2 - ap^2) / (ap * (sn*ap + sp*an)) equals the DDIM epsilon
    // coefficient sn - an*sp/ap; written this way it avoids the sigma
    // cancellation near t = 0.
    const double coef = -(an * an - ap * ap) / (ap * (sn * ap + sp * an));
    const double ratio = an / ap;
    r.x_next = Tensor(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i)
        r.x_next.data[i] = ratio * x.data[i] + coef * r.direction.data[i];
    return r;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

enum class SamplerKind { Ddim, Dpm1, Dpm2, Plms };

inline const char* sampler_name(SamplerKind k) {
    switch (k) {
        case SamplerKind::Ddim: return "ddim";
        case SamplerKind::Dpm1: return "dpm1";
        case SamplerKind::Dpm2: return "dpm2";
        case SamplerKind::Plms: return "plms";
    }
    return "?";
}

struct StepRecord {
    double t_prev = 0.0;
    double t_next = 0.0;
    Tensor eps; // evaluation at (states[i], t_prev)
    int order = 1;
    bool has_intermediate = false;
    double s = 0.0; // order-2 intermediate time
    Tensor u;       // order-2 intermediate state
    Tensor eps_mid; // evaluation at (u, s)
};

struct Trajectory {
    SamplerKind kind = SamplerKind::Dpm1;
    std::size_t chains = 0;
    std::size_t dim = 0;
    std::vector<double> times;  // grid times covered (truncated on divergence)
    std::vector<Tensor> states; // states[i] at times[i]
    std::vector<StepRecord> steps;
    bool diverged = false;
    std::size_t diverged_step = 0;

    const Tensor& endpoint() const {
        if (states.empty()) throw std::logic_error("Trajectory: empty");
        return states.back();
    }
};

struct SampleOptions {
    SamplerKind kind = SamplerKind::Dpm2;
    int plms_max_order = 4;
    double divergence_threshold = 1e6;
    bool record_evals = true; // false drops eval tensors to save memory
};

inline bool state_ok(const Tensor& x, double threshold) {
    for (double v : x.data)
        if (!std::isfinite(v) || std::abs(v) > threshold) return false;
    return true;
}

inline Trajectory sample(const DirectionalEvaluator& eval, const NoiseSchedule& sched,
                         const TimeGrid& grid, const Tensor& x_init,
                         const SampleOptions& opt = {}) {
    grid.validate();
    if (x_init.rank() != 2)
        throw std::invalid_argument("sample: x_init must be [chains, dim]");

    Trajectory traj;
    traj.kind = opt.kind;
    traj.chains = x_init.rows();
    traj.dim = x_init.cols();
    traj.times.push_back(grid.times[0]);
    traj.states.push_back(x_init);

    if (!state_ok(x_init, opt.divergence_threshold)) {
        traj.diverged = true;
        traj.diverged_step = 0;
        return traj;
    }

    std::deque<Tensor> history; // PLMS raw-eval history, most recent first
    Tensor cur = x_init;
    for (std::size_t i = 0; i + 1 < grid.times.size(); ++i) {
        const double tp = grid.times[i], tn = grid.times[i + 1];
        StepRecord rec;
        rec.t_prev = tp;
        rec.t_next = tn;
        Tensor next;
        switch (opt.kind) {
            case SamplerKind::Dpm1: {
                Dpm1Result r = dpm1_step(eval, sched, cur, tp, tn);
                next = std::move(r.x_next);
                if (opt.record_evals) rec.eps = std::move(r.eps);
                break;
            }
            case SamplerKind::Ddim: {
                DdimResult r = ddim_step(eval, sched, cur, tp, tn);
                next = std::move(r.x_next);
                if (opt.record_evals) rec.eps = std::move(r.eps);
                break;
            }
            case SamplerKind::Dpm2: {
                Dpm2Result r = dpm2_step(eval, sched, cur, tp, tn);
                next = std::move(r.x_next);
                rec.has_intermediate = true;
                rec.s = r.s;
                rec.order = 2;
                if (opt.record_evals) {
                    rec.eps = std::move(r.eps_first);
                    rec.u = std::move(r.u);
                    rec.eps_mid = std::move(r.eps_mid);
                }
                break;
            }
            case SamplerKind::Plms: {
                PlmsResult r = plms_step(eval, sched, cur, history, tp, tn, opt.plms_max_order);
                next = std::move(r.x_next);
                rec.order = r.order;
                history.push_front(r.eps);
                // at most max_order - 1 past evaluations are ever blended in
                while (history.size() + 1 > static_cast<std::size_t>(opt.plms_max_order))
                    history.pop_back();
                if (opt.record_evals) rec.eps = std::move(r.eps);
                break;
            }
        }
        traj.steps.push_back(std::move(rec));
        if (!state_ok(next, opt.divergence_threshold)) {
            traj.diverged = true;
            traj.diverged_step = i;
            return traj;
        }
        traj.times.push_back(tn);
        traj.states.push_back(std::move(next));
        cur = traj.states.back();
    }
    return traj;
}

// ---------------------------------------------------------------------------
// CSV dump: one row per recorded state, plus one per order-2 intermediate.
// ---------------------------------------------------------------------------

// Plot-ready dump: one row per recorded state with columns
// (chain_id, step, t, s_or_empty, x[0..d), kind, flags). The s column carries
// the intermediate evaluation time of the order-2 step that produced the
// state, empty for the initial state and for samplers without intermediates;
// flags is empty on clean rows and "diverged" on the last state of a
// truncated chain. Intermediate states u_i stay in the in-memory Trajectory.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    os << "chain_id,step,t,s";
    for (std::size_t j = 0; j < traj.dim; ++j) os << ",x" << j;
    os << ",kind,flags\n";
    const char* kind = sampler_name(traj.kind);
    char buf[64];
    for (std::size_t c = 0; c < traj.chains; ++c) {
        for (std::size_t i = 0; i < traj.states.size(); ++i) {
            os << c << ',' << i << ',';
            std::snprintf(buf, sizeof buf, "%.17g", traj.times[i]);
            os << buf << ',';
            if (i > 0 && i - 1 < traj.steps.size() && traj.steps[i - 1].has_intermediate) {
                std::snprintf(buf, sizeof buf, "%.17g", traj.steps[i - 1].s);
                os << buf;
            }
            for (std::size_t j = 0; j < traj.dim; ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", traj.states[i].at(c, j));
                os << ',' << buf;
            }
            os << ',' << kind << ',';
            if (traj.diverged && i + 1 == traj.states.size()) os << "diverged";
            os << '\n';
        }
    }
}

// Exact endpoint transport for a single isotropic Gaussian data distribution:
// with v(t) = alpha^2 c^2 + sigma^2, the probability-flow map from t_from to
// t_to is the affine x -> alpha_to mu + sqrt(v_to / v_from) (x - alpha_from mu).
// Used as the convergence oracle in tests and the error lab.
inline Tensor gaussian_transport(const ToyDistribution& dist, const NoiseSchedule& sched,
                                 const Tensor& x, double t_from, double t_to) {
    dist.validate();
    if (dist.components() != 1)
        throw std::invalid_argument("gaussian_transport: single-component distributions only");
    const double c = dist.stddevs[0];
    const double af = sched.alpha(t_from), at = sched.alpha(t_to);
    const double vf = af * af * c * c + sched.sigma2(t_from);
    const double vt = at * at * c * c + sched.sigma2(t_to);
    const double scale = std::sqrt(vt / vf);
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double mu = dist.means[0][j];
            out.at(i, j) = at * mu + scale * (x.at(i, j) - af * mu);
        }
    return out;
}

} // namespace saq
