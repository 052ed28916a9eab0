// Sampler suite.
//
// Oracles: (a) the exact affine transport map for single-Gaussian data,
// cross-validated here against a 2000-step reference solve before it is used
// to measure convergence orders; (b) the algebraic DDIM == DPM-1 identity;
// (c) call-counting evaluators for the bookkeeping invariants.

#include <catch2/catch_amalgamated.hpp>

#include "saq/samplers.hpp"

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

using namespace saq;

namespace {

const NoiseSchedule kSched{};

ToyDistribution offset_gaussian() {
    return ToyDistribution::single_gaussian({1.5, -0.5}, 0.3);
}

Tensor terminal_batch(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n, 2});
    for (double& v : x.data) v = rng.normal();
    return x;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// least-squares slope of y against x
double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace

TEST_CASE("uniform-lambda grids are equally spaced in lambda") {
    TimeGrid g = TimeGrid::uniform_lambda(kSched, 16);
    REQUIRE(g.steps() == 16);
    REQUIRE(g.times.front() == kSched.final_time);
    REQUIRE(g.times.back() == kSched.t_min);
    const double h = (g.lambdas.back() - g.lambdas.front()) / 16.0;
    for (std::size_t i = 1; i < g.lambdas.size(); ++i)
        REQUIRE(g.lambdas[i] - g.lambdas[i - 1] == Catch::Approx(h).epsilon(1e-10));
    for (std::size_t i = 1; i < g.times.size(); ++i) REQUIRE(g.times[i] < g.times[i - 1]);
    // each interior time is consistent with its lambda
    for (std::size_t i = 1; i + 1 < g.times.size(); ++i)
        REQUIRE(kSched.lambda_of_t(g.times[i]) == Catch::Approx(g.lambdas[i]).margin(1e-9));
}

TEST_CASE("uniform-time grids are equally spaced in t") {
    TimeGrid g = TimeGrid::uniform_time(kSched, 10);
    const double dt = (g.times.back() - g.times.front()) / 10.0;
    for (std::size_t i = 1; i < g.times.size(); ++i)
        REQUIRE(g.times[i] - g.times[i - 1] == Catch::Approx(dt).epsilon(1e-10));
}

TEST_CASE("grid construction rejects bad arguments") {
    REQUIRE_THROWS_AS(TimeGrid::uniform_lambda(kSched, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(TimeGrid::uniform_lambda(kSched, 4, 0.2, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(TimeGrid::uniform_time(kSched, 0), std::invalid_argument);
}

TEST_CASE("transport oracle agrees with a high-resolution reference solve") {
    // Validates the closed-form affine transport before the convergence tests
    // lean on it: a 2000-step order-2 solve must land on it to ~1e-6.
    ToyDistribution dist = offset_gaussian();
    DirectionalEvaluator eval = make_analytic_evaluator(dist, kSched);
    Tensor xT = terminal_batch(8, 42);
    TimeGrid fine = TimeGrid::uniform_lambda(kSched, 2000);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm2;
    opt.record_evals = false;
    Trajectory traj = sample(eval, kSched, fine, xT, opt);
    REQUIRE_FALSE(traj.diverged);
    Tensor exact = gaussian_transport(dist, kSched, xT, kSched.final_time, kSched.t_min);
    REQUIRE(max_abs_diff(traj.endpoint(), exact) < 1e-6);
}

TEST_CASE("convergence orders match the solver orders") {
    ToyDistribution dist = offset_gaussian();
    DirectionalEvaluator eval = make_analytic_evaluator(dist, kSched);
    Tensor xT = terminal_batch(64, 7);
    Tensor exact = gaussian_transport(dist, kSched, xT, kSched.final_time, kSched.t_min);

    for (auto [kind, lo, hi] : {std::tuple{SamplerKind::Dpm1, 0.8, 1.2},
                                std::tuple{SamplerKind::Dpm2, 1.7, 2.3}}) {
        std::vector<double> log_h, log_e;
        for (std::size_t steps : {10u, 20u, 40u, 80u}) {
            TimeGrid grid = TimeGrid::uniform_lambda(kSched, steps);
            SampleOptions opt;
            opt.kind = kind;
            opt.record_evals = false;
            Trajectory traj = sample(eval, kSched, grid, xT, opt);
            REQUIRE_FALSE(traj.diverged);
            const double err =
                std::sqrt(mean_squared_deviation(traj.endpoint(), exact));
            log_h.push_back(std::log(1.0 / static_cast<double>(steps)));
            log_e.push_back(std::log(err));
        }
        const double slope = fit_slope(log_h, log_e);
        INFO("sampler " << sampler_name(kind) << " slope " << slope);
        REQUIRE(slope >= lo);
        REQUIRE(slope <= hi);
    }
}

TEST_CASE("ddim and dpm1 agree across evaluators and grids") {
    Rng rng(314);
    NetConfig ncfg;
    ncfg.hidden_widths = {16, 16};
    ncfg.time_embed_dim = 8;
    Parameters params = init_parameters(ncfg, rng);

    std::vector<DirectionalEvaluator> evals;
    evals.push_back(make_analytic_evaluator(offset_gaussian(), kSched));
    evals.push_back(make_analytic_evaluator(ToyDistribution::ring(8, 4.0, 0.3), kSched));
    evals.push_back(make_net_evaluator(params));

    std::vector<TimeGrid> grids;
    grids.push_back(TimeGrid::uniform_lambda(kSched, 20));
    grids.push_back(TimeGrid::uniform_time(kSched, 20));
    grids.push_back(TimeGrid::uniform_lambda(kSched, 50));

    Tensor xT = terminal_batch(16, 99);
    for (const auto& eval : evals)
        for (const auto& grid : grids) {
            SampleOptions a, b;
            a.kind = SamplerKind::Ddim;
            b.kind = SamplerKind::Dpm1;
            a.record_evals = b.record_evals = false;
            Trajectory ta = sample(eval, kSched, grid, xT, a);
            Trajectory tb = sample(eval, kSched, grid, xT, b);
            REQUIRE_FALSE(ta.diverged);
            REQUIRE_FALSE(tb.diverged);
            for (std::size_t i = 0; i < ta.states.size(); ++i)
                REQUIRE(max_abs_diff(ta.states[i], tb.states[i]) < 1e-10);
        }
}

TEST_CASE("plms order 1 equals ddim") {
    DirectionalEvaluator eval = make_analytic_evaluator(offset_gaussian(), kSched);
    Tensor xT = terminal_batch(8, 5);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 25);
    SampleOptions a, b;
    a.kind = SamplerKind::Plms;
    a.plms_max_order = 1;
    b.kind = SamplerKind::Ddim;
    Trajectory ta = sample(eval, kSched, grid, xT, a);
    Trajectory tb = sample(eval, kSched, grid, xT, b);
    for (std::size_t i = 0; i < ta.states.size(); ++i)
        REQUIRE(max_abs_diff(ta.states[i], tb.states[i]) < 1e-10);
}

TEST_CASE("plms warm-up uses ascending orders and one eval per step") {
    auto counter = std::make_shared<int>(0);
    DirectionalEvaluator base = make_analytic_evaluator(offset_gaussian(), kSched);
    DirectionalEvaluator counting = [base, counter](const Tensor& x, double t) {
        ++*counter;
        return base(x, t);
    };
    Tensor xT = terminal_batch(4, 21);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 10);
    SampleOptions opt;
    opt.kind = SamplerKind::Plms;
    opt.plms_max_order = 4;
    Trajectory traj = sample(counting, kSched, grid, xT, opt);
    REQUIRE(*counter == 10);
    REQUIRE(traj.steps.size() == 10);
    REQUIRE(traj.steps[0].order == 1);
    REQUIRE(traj.steps[1].order == 2);
    REQUIRE(traj.steps[2].order == 3);
    for (std::size_t i = 3; i < traj.steps.size(); ++i) REQUIRE(traj.steps[i].order == 4);

    // and PLMS-4 converges at higher order than first order on this problem
    ToyDistribution dist = offset_gaussian();
    Tensor exact = gaussian_transport(dist, kSched, xT, kSched.final_time, kSched.t_min);
    std::vector<double> log_h, log_e;
    for (std::size_t steps : {20u, 40u, 80u, 160u}) {
        TimeGrid g = TimeGrid::uniform_lambda(kSched, steps);
        Trajectory t = sample(base, kSched, g, xT, opt);
        log_h.push_back(std::log(1.0 / static_cast<double>(steps)));
        log_e.push_back(std::log(std::sqrt(mean_squared_deviation(t.endpoint(), exact))));
    }
    REQUIRE(fit_slope(log_h, log_e) > 1.5);
}

TEST_CASE("dpm2 records intermediates and calls the evaluator twice per step") {
    auto counter = std::make_shared<int>(0);
    DirectionalEvaluator base = make_analytic_evaluator(offset_gaussian(), kSched);
    DirectionalEvaluator counting = [base, counter](const Tensor& x, double t) {
        ++*counter;
        return base(x, t);
    };
    Tensor xT = terminal_batch(4, 3);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 12);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm2;
    Trajectory traj = sample(counting, kSched, grid, xT, opt);
    REQUIRE(*counter == 24);
    REQUIRE(traj.steps.size() == 12);
    for (const auto& st : traj.steps) {
        REQUIRE(st.has_intermediate);
        REQUIRE(st.s < st.t_prev);
        REQUIRE(st.s > st.t_next);
        // intermediate sits at the lambda midpoint
        const double mid = 0.5 * (kSched.lambda_of_t(st.t_prev) + kSched.lambda_of_t(st.t_next));
        REQUIRE(kSched.lambda_of_t(st.s) == Catch::Approx(mid).margin(1e-9));
        REQUIRE(st.u.rows() == 4);
        REQUIRE(st.eps.rows() == 4);
        REQUIRE(st.eps_mid.rows() == 4);
    }
}

TEST_CASE("sampling is bitwise deterministic") {
    Rng rng(1234);
    NetConfig ncfg;
    ncfg.hidden_widths = {16};
    ncfg.time_embed_dim = 8;
    Parameters params = init_parameters(ncfg, rng);
    DirectionalEvaluator eval = make_net_evaluator(params);
    Tensor xT = terminal_batch(8, 77);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 15);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm2;
    Trajectory a = sample(eval, kSched, grid, xT, opt);
    Trajectory b = sample(eval, kSched, grid, xT, opt);
    REQUIRE(a.states.size() == b.states.size());
    for (std::size_t i = 0; i < a.states.size(); ++i)
        REQUIRE(a.states[i].data == b.states[i].data);
}

TEST_CASE("divergence is flagged with the step index and truncates the record") {
    DirectionalEvaluator bomb = [](const Tensor& x, double) {
        Tensor out(x.shape);
        out.fill(1e9);
        return out;
    };
    Tensor xT = terminal_batch(2, 1);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 8);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm1;
    Trajectory traj = sample(bomb, kSched, grid, xT, opt);
    REQUIRE(traj.diverged);
    REQUIRE(traj.diverged_step == 0);
    REQUIRE(traj.states.size() == 1); // only the initial state is kept
    REQUIRE(traj.times.size() == 1);
}

TEST_CASE("ring-mixture endpoints land near the modes") {
    ToyDistribution ring = ToyDistribution::ring(8, 4.0, 0.3);
    DirectionalEvaluator eval = make_analytic_evaluator(ring, kSched);
    Tensor xT = terminal_batch(64, 11);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 40);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm2;
    opt.record_evals = false;
    Trajectory traj = sample(eval, kSched, grid, xT, opt);
    const Tensor& end = traj.endpoint();
    double worst = 0.0;
    for (std::size_t i = 0; i < end.rows(); ++i) {
        double best = 1e9;
        for (const auto& mu : ring.means)
            best = std::min(best, std::hypot(end.at(i, 0) - mu[0], end.at(i, 1) - mu[1]));
        worst = std::max(worst, best);
    }
    REQUIRE(worst < 1.2); // within ~4 stddev of some mode
}

TEST_CASE("trajectory csv has the documented layout") {
    DirectionalEvaluator eval = make_analytic_evaluator(offset_gaussian(), kSched);
    Tensor xT = terminal_batch(3, 8);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 5);
    SampleOptions opt;
    opt.kind = SamplerKind::Dpm2;
    Trajectory traj = sample(eval, kSched, grid, xT, opt);
    std::stringstream ss;
    write_trajectory_csv(ss, traj);

    std::vector<std::string> lines;
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    REQUIRE(lines[0] == "chain_id,step,t,s,x0,x1,kind,flags");
    // 3 chains x 6 recorded states + header
    REQUIRE(lines.size() == 1 + 3 * 6);
    // every row names the sampler and ends with an empty flags field
    for (std::size_t i = 1; i < lines.size(); ++i) {
        REQUIRE(lines[i].find(",dpm2,") != std::string::npos);
        REQUIRE(lines[i].back() == ',');
    }
    // the s column is empty exactly on the initial state of each chain
    std::size_t with_s = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::size_t first = lines[i].find(',');
        std::size_t second = lines[i].find(',', first + 1);
        std::size_t third = lines[i].find(',', second + 1);
        std::size_t fourth = lines[i].find(',', third + 1);
        if (fourth - third > 1) ++with_s;
    }
    REQUIRE(with_s == 3 * 5);
}

TEST_CASE("sample rejects malformed initial states") {
    DirectionalEvaluator eval = make_analytic_evaluator(offset_gaussian(), kSched);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 5);
    Tensor bad({4});
    REQUIRE_THROWS_AS(sample(eval, kSched, grid, bad, SampleOptions{}), std::invalid_argument);
}
