// SA-quant suite: fake-quantized forward identities, straight-through
// gradients, dual-order calibration, SA-PTQ reconstruction, and SA-QLoRA
// training.
//
// Oracles: the weight path is checked bitwise against quant.hpp's
// quantize/dequantize applied to the raw weights ahead of a plain forward;
// the activation path against a hand-rolled two-layer forward that calls
// fake_quant explicitly; smooth gradients (adapter, soft-rounding logits)
// against central finite differences; straight-through scalar gradients
// against the closed-form case tables on crafted clamp configurations.

#include <catch2/catch_amalgamated.hpp>

#include "saq/metrics.hpp"
#include "saq/mixture.hpp"
#include "saq/saquant.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

using namespace saq;

namespace {

const NoiseSchedule kSched{};

NetConfig small_config() {
    NetConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden_widths = {16, 16};
    cfg.time_embed_dim = 8;
    return cfg;
}

Parameters small_net(std::uint64_t seed) {
    Rng rng(seed);
    return init_parameters(small_config(), rng);
}

// Random batch of states and times in the sampler's working range.
std::pair<Tensor, std::vector<double>> probe_batch(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n, 2});
    for (double& v : x.data) v = rng.normal();
    std::vector<double> t(n);
    for (double& v : t) v = rng.uniform(0.05, 1.0);
    return {std::move(x), std::move(t)};
}

QuantSpec spec_of_weight(const WeightQuant& wq) {
    QuantSpec s;
    s.scale = wq.scale();
    s.zero_point = static_cast<std::int64_t>(wq.zero);
    s.bit_width = wq.bits;
    return s;
}

QuantSpec spec_of_act(const ActQuant& aq) {
    QuantSpec s;
    s.scale = aq.scale();
    s.zero_point = static_cast<std::int64_t>(aq.zero);
    s.bit_width = aq.bits;
    return s;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(std::abs(got) + std::abs(want), 1e-8);
}

} // namespace

TEST_CASE("disabled quantization reproduces the base network bitwise") {
    Parameters p = small_net(101);
    auto [x, t] = probe_batch(7, 202);
    const Tensor ref = forward(p, nullptr, x, t);

    QuantPolicy off;
    off.quantize_weights = false;
    off.quantize_acts = false;
    QuantModel qm = make_quant_model(p, off);
    REQUIRE(bitwise_equal(quant_forward(qm, x, t), ref));

    // master switches off, per-layer flags on
    QuantPolicy on;
    QuantModel qm2 = make_quant_model(p, on);
    qm2.weights_quantized = false;
    qm2.acts_quantized = false;
    REQUIRE(bitwise_equal(quant_forward(qm2, x, t), ref));

    // through the cached path and the evaluator wrapper as well
    QuantCache cache;
    REQUIRE(bitwise_equal(quant_forward_cached(qm, x, t, &cache, true), ref));
    DirectionalEvaluator ev = make_quant_evaluator(qm);
    const Tensor ref_scalar = forward(p, nullptr, x, 0.37);
    REQUIRE(bitwise_equal(ev(x, 0.37), ref_scalar));

    // a freshly attached adapter has B = 0 and is an exact no-op
    attach_adapter(qm, 4, 777);
    Tensor with_adapter = quant_forward(qm, x, t);
    for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE(with_adapter.data[i] == ref.data[i]);
}

TEST_CASE("weight fake-quant equals the reference quantizer bitwise") {
    Parameters p = small_net(303);
    auto [x, t] = probe_batch(9, 404);

    for (int bits : {8, 4}) {
        QuantPolicy pol;
        pol.weight_bits = bits;
        pol.edge_bits = bits; // make every layer carry the same width here
        pol.quantize_acts = false;
        QuantModel qm = make_quant_model(p, pol);

        // Reference: fake-quantize each weight tensor with quant.hpp, then run
        // the plain full-precision forward on the dequantized weights.
        Parameters ref = p;
        for (std::size_t l = 0; l < ref.layers.size(); ++l)
            ref.layers[l].weight =
                dequantize(quantize(p.layers[l].weight, spec_of_weight(qm.weights[l])));
        REQUIRE(bitwise_equal(quant_forward(qm, x, t), forward(ref, nullptr, x, t)));
    }

    SECTION("4-bit deviates more than 8-bit") {
        const Tensor fp = forward(p, nullptr, x, t);
        QuantPolicy p8;
        p8.quantize_acts = false;
        QuantPolicy p4 = p8;
        p4.weight_bits = 4;
        p4.edge_bits = 4;
        const double d8 = mean_squared_deviation(quant_forward(make_quant_model(p, p8), x, t), fp);
        const double d4 = mean_squared_deviation(quant_forward(make_quant_model(p, p4), x, t), fp);
        REQUIRE(d8 > 0.0);
        REQUIRE(d4 > 10.0 * d8);
    }
}

TEST_CASE("b=8 weight-only deviation sits under the first-order Jacobian bound") {
    Parameters p = small_net(505);
    QuantPolicy pol;
    pol.quantize_acts = false;
    QuantModel qm = make_quant_model(p, pol);

    auto [xs, ts] = probe_batch(5, 606);
    for (std::size_t i = 0; i < xs.rows(); ++i) {
        Tensor x({1, 2});
        x.at(0, 0) = xs.at(i, 0);
        x.at(0, 1) = xs.at(i, 1);
        const std::vector<double> t1{ts[i]};

        // Sum over layers of ||J_l||_F * (s_l / 2) * sqrt(#w_l), with the
        // Jacobian taken row by row via reverse mode on the base net.
        ForwardCache fc;
        Tensor fp = forward_cached(p, nullptr, x, t1, &fc);
        std::vector<double> frob2(p.layers.size(), 0.0);
        for (std::size_t k = 0; k < 2; ++k) {
            Tensor up({1, 2});
            up.at(0, k) = 1.0;
            GradientBundle g = backward_from_cache(p, nullptr, fc, up);
            for (std::size_t l = 0; l < p.layers.size(); ++l)
                for (double v : g.layers[l].weight.data) frob2[l] += v * v;
        }
        double bound = 0.0;
        for (std::size_t l = 0; l < p.layers.size(); ++l)
            bound += std::sqrt(frob2[l]) * 0.5 * qm.weights[l].scale() *
                     std::sqrt(static_cast<double>(p.layers[l].weight.size()));

        Tensor q = quant_forward(qm, x, ts[i]);
        double dev2 = 0.0;
        for (std::size_t j = 0; j < 2; ++j)
            dev2 += (q.at(0, j) - fp.at(0, j)) * (q.at(0, j) - fp.at(0, j));
        const double dev = std::sqrt(dev2);
        REQUIRE(dev > 0.0);
        REQUIRE(dev <= 10.0 * bound);
    }
}

TEST_CASE("activation fake-quant equals a hand-rolled reference") {
    NetConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden_widths = {8};
    cfg.time_embed_dim = 8;
    Rng rng(707);
    Parameters p = init_parameters(cfg, rng);

    QuantPolicy pol;
    pol.quantize_weights = false;
    QuantModel qm = make_quant_model(p, pol);
    auto [x, t] = probe_batch(6, 808);
    REQUIRE_THROWS_WITH(quant_forward(qm, x, t),
                        Catch::Matchers::ContainsSubstring("layer 0"));
    fit_act_specs(qm, x, t);

    // Hand-rolled: embed, first linear, SiLU, explicit fake-quant, last linear.
    const std::size_t n = x.rows();
    Tensor h0({n, cfg.input_dim + cfg.time_embed_dim});
    for (std::size_t i = 0; i < n; ++i) {
        h0.at(i, 0) = x.at(i, 0);
        h0.at(i, 1) = x.at(i, 1);
        time_embedding(t[i], cfg.time_embed_dim, cfg.time_scale,
                       &h0.data[i * h0.cols() + cfg.input_dim]);
    }
    Tensor z0({n, 8});
    detail::matmul_nt(h0, p.layers[0].weight, z0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 8; ++j) z0.at(i, j) += p.layers[0].bias[j];
    Tensor a0(z0.shape);
    for (std::size_t i = 0; i < z0.size(); ++i) a0.data[i] = silu(z0.data[i]);
    Tensor aq = fake_quant(a0, spec_of_act(qm.acts[0]));
    Tensor ref({n, 2});
    detail::matmul_nt(aq, p.layers[1].weight, ref);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 2; ++j) ref.at(i, j) += p.layers[1].bias[j];

    REQUIRE(bitwise_equal(quant_forward(qm, x, t), ref));
}

TEST_CASE("soft rounding: range, hardening, and tie behavior") {
    // Crafted scale/zero so codes include exact .5 ties and both clamp ends.
    WeightQuant wq;
    wq.bits = 4; // qmax = 15
    wq.log_scale = std::log(0.25);
    wq.zero = 7.0;
    wq.enabled = true;
    const double s = 0.25;
    Tensor w({1, 9});
    w.data = {s * (2.5 - 7.0),  s * (3.5 - 7.0),  s * (-2.5 - 7.0), s * (20.0 - 7.0),
              s * (0.62 - 7.0), s * (11.38 - 7.0), s * (7.0 - 7.0),  s * (15.0 - 7.0),
              s * (0.0 - 7.0)};

    QuantSpec spec;
    spec.scale = s;
    spec.zero_point = 7;
    spec.bit_width = 4;
    const Tensor ref = fake_quant(w, spec);

    EffectiveWeight nearest = effective_weight(w, wq, false);
    REQUIRE(bitwise_equal(nearest.value, ref));

    init_soft_rounding(wq, w);
    REQUIRE(wq.rounding == WeightRounding::Soft);
    for (double a : wq.alpha.data) {
        const double h = rectified_h(a);
        REQUIRE(h >= 0.0);
        REQUIRE(h <= 1.0);
        REQUIRE((h == Catch::Approx(0.01) || h == Catch::Approx(0.99)));
    }
    harden_rounding(wq);
    REQUIRE(wq.rounding == WeightRounding::Hard);
    for (double h : wq.hard_offset.data) REQUIRE((h == 0.0 || h == 1.0));
    EffectiveWeight hard = effective_weight(w, wq, false);
    REQUIRE(bitwise_equal(hard.value, ref));

    // soft-to-hard formula consistency, recomputed by hand
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double cu = std::floor(w.data[i] / s) + wq.hard_offset.data[i] + wq.zero;
        const double c = std::clamp(cu, 0.0, 15.0);
        REQUIRE(hard.value.data[i] == s * (c - wq.zero));
    }
}

TEST_CASE("straight-through partials match the closed-form case tables") {
    // s = 0.5, z = 2, bits = 3 (qmax = 7); one element per clamp case.
    const double s = 0.5;
    WeightQuant wq;
    wq.enabled = true;
    wq.bits = 3;
    wq.log_scale = std::log(s);
    wq.zero = 2.0;

    Tensor w({1, 3});
    w.data = {0.6 * s, -5.0 * s, 9.0 * s}; // in-range, clamp-low, clamp-high
    EffectiveWeight ew = effective_weight(w, wq, true);
    REQUIRE(ew.value.data[0] == s * (1.0 + 2.0 - 2.0));
    REQUIRE(ew.d_scale.data[0] == Catch::Approx(1.0 - 0.6)); // (f + h) - u
    REQUIRE(ew.d_zero.data[0] == 0.0);
    REQUIRE(ew.value.data[1] == s * (0.0 - 2.0));
    REQUIRE(ew.d_scale.data[1] == -2.0); // -z
    REQUIRE(ew.d_zero.data[1] == -s);
    REQUIRE(ew.value.data[2] == s * (7.0 - 2.0));
    REQUIRE(ew.d_scale.data[2] == 7.0 - 2.0); // qmax - z
    REQUIRE(ew.d_zero.data[2] == -s);

    ActQuant aq;
    aq.enabled = true;
    aq.fitted = true;
    aq.bits = 3;
    aq.log_scale = std::log(s);
    aq.zero = 2.0;
    Tensor xa({1, 3});
    xa.data = {0.3, -5.0, 9.0};
    Tensor dx, ds, dz;
    Tensor out = act_fake_quant(xa, aq, &dx, &ds, &dz);
    REQUIRE(out.data[0] == s * (3.0 - 2.0)); // rhe(0.6 + 2) = 3
    REQUIRE(dx.data[0] == 1.0);
    REQUIRE(ds.data[0] == Catch::Approx((3.0 - 2.0) - 0.3 / s));
    REQUIRE(dz.data[0] == 0.0);
    REQUIRE(out.data[1] == s * (0.0 - 2.0)); // rhe(-10 + 2) = -8, clamps low
    REQUIRE(dx.data[1] == 0.0);
    REQUIRE(ds.data[1] == -2.0);
    REQUIRE(dz.data[1] == -s);
    REQUIRE(out.data[2] == s * (7.0 - 2.0)); // rhe(18 + 2) = 20, clamps high
    REQUIRE(dx.data[2] == 0.0);
    REQUIRE(ds.data[2] == 7.0 - 2.0);
    REQUIRE(dz.data[2] == -s);
}

TEST_CASE("finite differences confirm the smooth gradient paths") {
    // Soft-rounded weights, activations disabled (their rounding is not
    // differentiable), adapter with nonzero B so dA is live.
    Parameters p = small_net(909);
    QuantPolicy pol;
    pol.quantize_acts = false;
    QuantModel qm = make_quant_model(p, pol);
    for (std::size_t l = 0; l < qm.weights.size(); ++l)
        init_soft_rounding(qm.weights[l], p.layers[l].weight);
    attach_adapter(qm, 3, 111);
    Rng brng(222);
    for (auto& lo : qm.adapter->layers)
        for (double& v : lo.up.data) v = 0.1 * brng.normal();

    auto [x, t] = probe_batch(4, 333);
    Rng trng(444);
    Tensor tgt({4, 2});
    for (double& v : tgt.data) v = trng.normal();

    auto loss_of = [&]() {
        Tensor pred = quant_forward(qm, x, t);
        double acc = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = pred.data[i] - tgt.data[i];
            acc += 0.5 * d * d;
        }
        return acc;
    };

    QuantCache cache;
    Tensor pred = quant_forward_cached(qm, x, t, &cache, true);
    Tensor up(pred.shape);
    for (std::size_t i = 0; i < pred.size(); ++i) up.data[i] = pred.data[i] - tgt.data[i];
    QuantGradients g = quant_backward(qm, cache, up);

    const double eps = 1e-6;
    auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + eps;
        const double lp = loss_of();
        *slot = keep - eps;
        const double lm = loss_of();
        *slot = keep;
        const double fd = (lp - lm) / (2.0 * eps);
        REQUIRE(rel_err(analytic, fd) < 1e-4);
    };

    for (std::size_t l = 0; l < qm.weights.size(); ++l) {
        // adapter entries
        fd_check(&qm.adapter->layers[l].down.data[1], g.lora[l].down.data[1]);
        fd_check(&qm.adapter->layers[l].up.data[0], g.lora[l].up.data[0]);

        // soft-rounding logits at strictly interior codes only: near a clamp
        // boundary the finite-difference probe would cross the kink
        const Tensor& wt = p.layers[l].weight;
        const WeightQuant& wq = qm.weights[l];
        std::size_t checked = 0;
        for (std::size_t i = 0; i < wt.size() && checked < 4; ++i) {
            const double cu = std::floor(wt.data[i] / wq.scale()) +
                              rectified_h(wq.alpha.data[i]) + wq.zero;
            if (cu < 0.25 || cu > wq.qmax() - 0.25) continue;
            fd_check(&qm.weights[l].alpha.data[i], g.weight_alpha[l].data[i]);
            ++checked;
        }
        REQUIRE(checked == 4);
    }
}

TEST_CASE("dual-order calibration pairs are well-formed") {
    DirectionalEvaluator fp = make_analytic_evaluator(ToyDistribution::ring(), kSched);
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 10);
    const std::vector<std::uint64_t> seeds{1, 2, 3};

    CalibrationSet calib = collect_dual_trajectories(fp, kSched, grid, seeds);
    REQUIRE(calib.skipped_seeds == 0);
    REQUIRE(calib.pairs.size() == seeds.size() * 10);

    for (const CalibrationPair& p : calib.pairs) {
        REQUIRE(p.t_next < p.s_mid);
        REQUIRE(p.s_mid < p.t_first);
        REQUIRE(p.cond_tag == 0);
        // lambda-midpoint rule
        const double lam_mid =
            0.5 * (kSched.lambda_of_t(p.t_first) + kSched.lambda_of_t(p.t_next));
        REQUIRE(kSched.lambda_of_t(p.s_mid) == Catch::Approx(lam_mid).margin(1e-9));
    }

    // both trajectories started from the same x_T, reproducible from the seed
    Rng rng(seeds[0]);
    REQUIRE(calib.pairs[0].t_first == kSched.final_time);
    REQUIRE(calib.pairs[0].x_first.at(0, 0) == rng.normal());
    REQUIRE(calib.pairs[0].x_first.at(0, 1) == rng.normal());

    SECTION("diverged seeds are skipped and counted") {
        DirectionalEvaluator bad = [](const Tensor& x, double) {
            Tensor out(x.shape);
            for (double& v : out.data) v = 1e12;
            return out;
        };
        CalibrationSet none = collect_dual_trajectories(bad, kSched, grid, seeds);
        REQUIRE(none.pairs.empty());
        REQUIRE(none.skipped_seeds == seeds.size());
    }

    SECTION("degenerate pairs collapse onto the first-order records") {
        CalibrationSet deg = degenerate_pairs(calib);
        REQUIRE(deg.pairs.size() == calib.pairs.size());
        for (std::size_t i = 0; i < deg.pairs.size(); ++i) {
            REQUIRE(deg.pairs[i].s_mid == deg.pairs[i].t_first);
            REQUIRE(bitwise_equal(deg.pairs[i].u_mid, deg.pairs[i].x_first));
        }
    }
}

TEST_CASE("sa-ptq reconstruction: preconditions, no-ops, and hardening") {
    Parameters p = small_net(1212);
    DirectionalEvaluator fp = [&p](const Tensor& x, double t) {
        return forward(p, nullptr, x, t);
    };
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 6);
    CalibrationSet calib = collect_dual_trajectories(fp, kSched, grid, {11, 12});
    REQUIRE(calib.pairs.size() == 12);

    QuantPolicy pol;
    pol.weight_bits = 4;
    QuantModel qm = make_quant_model(p, pol);
    fit_act_specs(qm, calib);

    SECTION("sequential precondition") {
        REQUIRE_THROWS_AS(sa_ptq_reconstruct(qm, 1, calib), std::invalid_argument);
    }

    SECTION("fully disabled model yields exactly zero loss on degenerate pairs") {
        QuantPolicy off;
        off.quantize_weights = false;
        off.quantize_acts = false;
        QuantModel plain = make_quant_model(p, off);
        LayerReconstruction r = naive_ptq_reconstruct(plain, 0, calib);
        REQUIRE(r.loss_before == 0.0);
        REQUIRE(r.loss_after == 0.0);
    }

    SECTION("zero iterations equals plain nearest quantization bitwise") {
        QuantModel zi = qm;
        PtqOptions opt;
        opt.iterations = 0;
        ptq_pipeline(zi, calib, opt);
        for (const WeightQuant& wq : zi.weights) {
            REQUIRE(wq.rounding == WeightRounding::Hard);
            for (double h : wq.hard_offset.data) REQUIRE((h == 0.0 || h == 1.0));
        }
        auto [x, t] = probe_batch(8, 1414);
        REQUIRE(bitwise_equal(quant_forward(zi, x, t), quant_forward(qm, x, t)));
    }

    SECTION("a short real run hardens every layer and lowers the total loss") {
        QuantModel run = qm;
        PtqOptions opt;
        opt.iterations = 200;
        std::vector<LayerReconstruction> recs = ptq_pipeline(run, calib, opt);
        REQUIRE(recs.size() == 3);
        double before = 0.0, after = 0.0;
        for (const LayerReconstruction& r : recs) {
            before += r.loss_before;
            after += r.loss_after;
        }
        REQUIRE(after < before);
        for (const WeightQuant& wq : run.weights)
            REQUIRE(wq.rounding == WeightRounding::Hard);
        // loss is NaN-free and the act specs remain fitted
        for (const ActQuant& aq : run.acts) REQUIRE(aq.fitted);
    }

    SECTION("pairing direction is irrelevant on degenerate pairs") {
        CalibrationSet deg = degenerate_pairs(calib);
        QuantModel a = qm, b = qm;
        PtqOptions oa;
        oa.iterations = 60;
        oa.pairing = PairingDirection::CaseStudy;
        PtqOptions ob = oa;
        ob.pairing = PairingDirection::EquationLiteral;
        sa_ptq_reconstruct(a, 0, deg, oa);
        sa_ptq_reconstruct(b, 0, deg, ob);
        auto [x, t] = probe_batch(5, 1515);
        REQUIRE(bitwise_equal(quant_forward(a, x, t), quant_forward(b, x, t)));
    }
}

TEST_CASE("naive b=8 reconstruction halves per-layer output error") {
    Parameters p = small_net(1616);
    DirectionalEvaluator fp = [&p](const Tensor& x, double t) {
        return forward(p, nullptr, x, t);
    };
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 16);
    std::vector<std::uint64_t> seeds(16);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = 4000 + i;
    CalibrationSet calib = collect_dual_trajectories(fp, kSched, grid, seeds);
    REQUIRE(calib.pairs.size() == 256);

    QuantPolicy pol;
    pol.quantize_acts = false; // isolate the weight-rounding reconstruction
    QuantModel qm = make_quant_model(p, pol);
    // Each layer measured independently against the unreconstructed state:
    // prefix layers hardened at plain nearest rounding, this layer optimized.
    for (std::size_t l = 0; l < 3; ++l) {
        QuantModel m = qm;
        for (std::size_t k = 0; k < l; ++k) {
            init_soft_rounding(m.weights[k], p.layers[k].weight);
            harden_rounding(m.weights[k]);
        }
        LayerReconstruction r = naive_ptq_reconstruct(m, l, calib);
        INFO("layer " << l << ": before " << r.loss_before << " after " << r.loss_after);
        REQUIRE(r.loss_before > 0.0);
        REQUIRE(r.loss_after <= 0.5 * r.loss_before);
    }
}

TEST_CASE("sa-qlora training: identities, logging, and divergence") {
    Parameters p = small_net(1717);
    DirectionalEvaluator fp = [&p](const Tensor& x, double t) {
        return forward(p, nullptr, x, t);
    };

    QuantPolicy pol;
    pol.weight_bits = 4;
    QuantModel qm = make_quant_model(p, pol);
    // C.1 initialization: activation ranges from a full-precision first-order
    // trajectory
    {
        Rng rng(818);
        Tensor xT({4, 2});
        for (double& v : xT.data) v = rng.normal();
        SampleOptions o1;
        o1.kind = SamplerKind::Dpm1;
        TimeGrid g = TimeGrid::uniform_lambda(kSched, 20);
        fit_act_specs(qm, sample(fp, kSched, g, xT, o1));
    }
    std::vector<std::string> warn = attach_adapter(qm, 64, 919);
    REQUIRE_FALSE(warn.empty()); // rank 64 exceeds every layer width here
    REQUIRE_THAT(warn[0], Catch::Matchers::ContainsSubstring("clamped"));

    SECTION("zero training leaves the model bitwise untouched") {
        SAQLoRAConfig cfg;
        cfg.steps = {6, 4};
        cfg.epochs = 0;
        cfg.rank = 64;
        SAQLoRAResult res = sa_qlora_train(qm, fp, kSched, cfg, 2020);
        REQUIRE(res.log.empty());
        REQUIRE_FALSE(res.warnings.empty()); // clamped rank reported here too
        auto [x, t] = probe_batch(6, 2121);
        REQUIRE(bitwise_equal(quant_forward(res.model, x, t), quant_forward(qm, x, t)));
    }

    SECTION("a short run logs a consistent loss decomposition and improves") {
        SAQLoRAConfig cfg;
        cfg.steps = {8};
        cfg.epochs = 30;
        cfg.rank = 8;
        cfg.sample_seeds = 2;
        SAQLoRAResult res = sa_qlora_train(qm, fp, kSched, cfg, 2222);
        // 2 seeds x 8 steps = 16 pairs -> 4 minibatches of 4 per epoch
        REQUIRE(res.log.size() == 30 * 4);
        for (const QLoRAStepLog& s : res.log) {
            REQUIRE(std::abs(s.total - (cfg.w_cos * s.cos_term + cfg.w_mota * s.mota_term)) <
                    1e-12);
            REQUIRE(s.cycle == 0);
        }
        // the trained model is closer to full precision than the initialization
        TimeGrid g = TimeGrid::uniform_lambda(kSched, 8);
        CalibrationSet probe = collect_dual_trajectories(fp, kSched, g, {31, 32});
        REQUIRE(empirical_delta(res.model, probe) < empirical_delta(qm, probe));
    }

    SECTION("mixstep cycles regenerate pairs per step count") {
        SAQLoRAConfig cfg;
        cfg.steps = {6, 4};
        cfg.epochs = 1;
        cfg.rank = 8;
        cfg.sample_seeds = 1;
        SAQLoRAResult res = sa_qlora_train(qm, fp, kSched, cfg, 2323);
        // cycle 0: 6 pairs -> 2 minibatches; cycle 1: 4 pairs -> 1 minibatch
        REQUIRE(res.log.size() == 3);
        REQUIRE(res.log[0].cycle == 0);
        REQUIRE(res.log[2].cycle == 1);
    }

    SECTION("the plain baseline ignores the pairing direction") {
        SAQLoRAConfig ca;
        ca.steps = {5};
        ca.epochs = 2;
        ca.rank = 4;
        ca.sample_seeds = 1;
        ca.plain = true;
        ca.w_cos = 0.0;
        SAQLoRAConfig cb = ca;
        cb.pairing = PairingDirection::EquationLiteral;
        SAQLoRAResult ra = sa_qlora_train(qm, fp, kSched, ca, 2424);
        SAQLoRAResult rb = sa_qlora_train(qm, fp, kSched, cb, 2424);
        auto [x, t] = probe_batch(5, 2525);
        REQUIRE(bitwise_equal(quant_forward(ra.model, x, t), quant_forward(rb.model, x, t)));
    }

    SECTION("an absurd learning rate raises DivergenceError") {
        SAQLoRAConfig cfg;
        cfg.steps = {5};
        cfg.epochs = 4;
        cfg.rank = 4;
        cfg.sample_seeds = 1;
        cfg.lr = 1e8;
        REQUIRE_THROWS_AS(sa_qlora_train(qm, fp, kSched, cfg, 2626), DivergenceError);
    }

    SECTION("config validation") {
        SAQLoRAConfig bad;
        bad.steps = {50, 50};
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        bad.steps = {50, 100};
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        bad.steps = {};
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = SAQLoRAConfig{};
        bad.batch = 0;
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        REQUIRE_NOTHROW(SAQLoRAConfig{}.validate());
        REQUIRE_THROWS_AS(sa_qlora_train(make_quant_model(p, pol), fp, kSched,
                                         SAQLoRAConfig{}, 1),
                          std::invalid_argument); // no adapter attached
    }
}

TEST_CASE("cosine loss identities") {
    Tensor a({3, 2});
    a.at(0, 0) = 1.0;
    a.at(0, 1) = 2.0;
    a.at(1, 0) = 1.0;
    a.at(1, 1) = 0.0;
    a.at(2, 0) = 3.0;
    a.at(2, 1) = -1.0;
    Tensor b = a;
    b.at(1, 0) = -1.0; // opposite of a's row 1
    b.at(2, 0) = 1.0;  // orthogonal to a's row 2
    b.at(2, 1) = 3.0;
    REQUIRE(cosine_loss(a, b, 0) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(cosine_loss(a, b, 1) == Catch::Approx(2.0));
    REQUIRE(cosine_loss(a, b, 2) == Catch::Approx(1.0));
}

TEST_CASE("empirical delta tracks bit width") {
    Parameters p = small_net(2727);
    DirectionalEvaluator fp = [&p](const Tensor& x, double t) {
        return forward(p, nullptr, x, t);
    };
    TimeGrid grid = TimeGrid::uniform_lambda(kSched, 8);
    CalibrationSet calib = collect_dual_trajectories(fp, kSched, grid, {41, 42});

    QuantPolicy p8;
    p8.quantize_acts = false;
    QuantPolicy p4 = p8;
    p4.weight_bits = 4;
    p4.edge_bits = 4;
    QuantModel q8 = make_quant_model(p, p8);
    QuantModel q4 = make_quant_model(p, p4);
    const double d8 = empirical_delta(q8, calib);
    const double d4 = empirical_delta(q4, calib);
    REQUIRE(d8 > 0.0);
    REQUIRE(d4 > d8);
}
