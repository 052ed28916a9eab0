#pragma once

// Sampling-aware quantization of the noise predictor: fake-quantized model
// wrapping, dual-order trajectory calibration, SA-PTQ module reconstruction
// with AdaRound-style soft rounding, and SA-QLoRA training under the
// L_COS + L_MOTA objective with the mixstep progressive schedule.
//
// Quantization arithmetic conventions, fixed across every code path so the
// identity tests can demand bitwise equality:
//   weights:     W_eff = s * (clamp(floor(W/s) + h + z, 0, 2^b - 1) - z)
//                with h the per-element rounding offset: the nearest-round bit
//                (Nearest), the rectified sigmoid h(alpha) (Soft), or a frozen
//                {0,1} mask (Hard). With integer z and nearest offsets this is
//                bit-identical to quant.hpp's fake_quant.
//   activations: A = s * (clamp(round_half_even(x/s + z), 0, 2^b - 1) - z)
//                applied after each hidden SiLU; z sits inside the round so a
//                continuously trained zero point shifts the grid coherently.
// Scales are log-parameterized (s = exp(log_scale)) and zero points are kept
// as doubles: integer-valued right after min-max calibration, continuous once
// QLoRA training moves them. Gradients through rounding and clamping use
// straight-through estimation; soft-rounding offsets are genuinely smooth in
// alpha, so that path is finite-difference checkable.

#include "saq/errors.hpp"
#include "saq/net.hpp"
#include "saq/quant.hpp"
#include "saq/rng.hpp"
#include "saq/samplers.hpp"
#include "saq/schedule.hpp"
#include "saq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace saq {

// ---------------------------------------------------------------------------
// Quantization parameter blocks
// ---------------------------------------------------------------------------

enum class WeightRounding { Nearest, Soft, Hard };

struct WeightQuant {
    bool enabled = false;
    WeightRounding rounding = WeightRounding::Nearest;
    int bits = 8;
    double log_scale = 0.0; // s = exp(log_scale)
    double zero = 0.0;      // code-space zero point
    Tensor alpha;           // soft-rounding logits, weight shape (Soft mode)
    Tensor hard_offset;     // frozen offsets in {0, 1}, weight shape (Hard mode)

    double scale() const { return std::exp(log_scale); }
    double qmax() const { return static_cast<double>((std::int64_t{1} << bits) - 1); }
};

struct ActQuant {
    bool enabled = false;
    bool fitted = false; // set by fit_act_specs; forward rejects unfitted specs
    int bits = 8;
    double log_scale = 0.0;
    double zero = 0.0;

    double scale() const { return std::exp(log_scale); }
    double qmax() const { return static_cast<double>((std::int64_t{1} << bits) - 1); }
};

struct QuantModel {
    Parameters base;
    std::vector<WeightQuant> weights; // one per linear layer
    std::vector<ActQuant> acts;       // one per hidden activation site (num_layers - 1)
    std::optional<LoRAAdapter> adapter;
    bool weights_quantized = false; // master switches; per-layer `enabled` refines
    bool acts_quantized = false;

    void validate() const {
        base.config.validate();
        const std::size_t L = base.config.num_layers();
        if (base.layers.size() != L)
            throw std::invalid_argument("QuantModel: base layer count mismatch");
        if (weights.size() != L) throw std::invalid_argument("QuantModel: weight spec count");
        if (acts.size() + 1 != L) throw std::invalid_argument("QuantModel: act spec count");
        for (std::size_t l = 0; l < L; ++l) {
            const WeightQuant& wq = weights[l];
            if (!wq.enabled) continue;
            if (wq.bits < 2 || wq.bits > 8)
                throw std::invalid_argument("QuantModel: weight bits out of [2, 8]");
            if (wq.rounding == WeightRounding::Soft &&
                wq.alpha.shape != base.layers[l].weight.shape)
                throw std::invalid_argument("QuantModel: alpha shape mismatch");
            if (wq.rounding == WeightRounding::Hard &&
                wq.hard_offset.shape != base.layers[l].weight.shape)
                throw std::invalid_argument("QuantModel: hard offset shape mismatch");
        }
        for (const ActQuant& aq : acts)
            if (aq.enabled && (aq.bits < 2 || aq.bits > 8))
                throw std::invalid_argument("QuantModel: act bits out of [2, 8]");
    }
};

inline bool layer_weight_quantized(const QuantModel& qm, std::size_t l) {
    return qm.weights_quantized && qm.weights[l].enabled;
}

inline bool site_act_quantized(const QuantModel& qm, std::size_t site) {
    return qm.acts_quantized && qm.acts[site].enabled;
}

// ---------------------------------------------------------------------------
// AdaRound soft rounding: h(alpha) = clamp(1.2 sigmoid(alpha) - 0.1, 0, 1),
// the standard rectified-sigmoid relaxation. Initialization places h just
// inside the interval at the nearest-round value (0.01 from the corner):
// exactly at the corner both the task gradient and the regularizer gradient
// vanish and alpha would be frozen, while hardening the interior init still
// reproduces nearest rounding bit-for-bit.
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double rectified_h(double alpha) {
    return std::clamp(1.2 * sigmoid(alpha) - 0.1, 0.0, 1.0);
}

inline double rectified_h_grad(double alpha) {
    const double s = sigmoid(alpha);
    const double raw = 1.2 * s - 0.1;
    return (raw > 0.0 && raw < 1.0) ? 1.2 * s * (1.0 - s) : 0.0;
}

inline constexpr double kSoftRoundMargin = 0.01; // interior offset of the init

inline double alpha_for_h(double h) {
    const double u = (h + 0.1) / 1.2; // inverse of the rectified sigmoid
    return std::log(u / (1.0 - u));
}

// Switch a layer to Soft mode with h at the interior nearest-round init.
inline void init_soft_rounding(WeightQuant& wq, const Tensor& w) {
    const double s = wq.scale();
    wq.alpha = Tensor(w.shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double u = w.data[i] / s;
        const double r = round_half_even(u) - std::floor(u); // 0 or 1
        wq.alpha.data[i] = alpha_for_h(r == 1.0 ? 1.0 - kSoftRoundMargin : kSoftRoundMargin);
    }
    wq.hard_offset = Tensor();
    wq.rounding = WeightRounding::Soft;
}

// Collapse soft offsets to {0, 1} and freeze them.
inline void harden_rounding(WeightQuant& wq) {
    if (wq.rounding != WeightRounding::Soft)
        throw std::logic_error("harden_rounding: layer is not in soft mode");
    wq.hard_offset = Tensor(wq.alpha.shape);
    for (std::size_t i = 0; i < wq.alpha.size(); ++i)
        wq.hard_offset.data[i] = rectified_h(wq.alpha.data[i]) >= 0.5 ? 1.0 : 0.0;
    wq.alpha = Tensor();
    wq.rounding = WeightRounding::Hard;
}

// ---------------------------------------------------------------------------
// Effective (fake-quantized) weights with straight-through partials
// ---------------------------------------------------------------------------

struct EffectiveWeight {
    Tensor value;   // W_eff
    Tensor d_scale; // dW_eff/ds per element (STE through floor)
    Tensor d_zero;  // dW_eff/dz per element
    Tensor d_alpha; // dW_eff/dalpha per element (Soft mode only)
};

inline EffectiveWeight effective_weight(const Tensor& w, const WeightQuant& wq,
                                        bool with_grads) {
    const double s = wq.scale(), z = wq.zero, qmax = wq.qmax();
    const bool soft = wq.rounding == WeightRounding::Soft;
    EffectiveWeight ew;
    ew.value = Tensor(w.shape);
    if (with_grads) {
        ew.d_scale = Tensor(w.shape);
        ew.d_zero = Tensor(w.shape);
        if (soft) ew.d_alpha = Tensor(w.shape);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double u = w.data[i] / s;
        const double f = std::floor(u);
        double h = 0.0, dh_dalpha = 0.0;
        switch (wq.rounding) {
            case WeightRounding::Nearest: h = round_half_even(u) - f; break;
            case WeightRounding::Soft:
                h = rectified_h(wq.alpha.data[i]);
                dh_dalpha = rectified_h_grad(wq.alpha.data[i]);
                break;
            case WeightRounding::Hard: h = wq.hard_offset.data[i]; break;
        }
        const double cu = f + h + z;
        double c = cu, dds = 0.0, ddz = 0.0, ddh = 0.0;
        if (cu < 0.0) {
            c = 0.0;
            dds = -z;
            ddz = -s;
        } else if (cu > qmax) {
            c = qmax;
            dds = qmax - z;
            ddz = -s;
        } else {
            dds = (f + h) - u; // (rounded - exact) code, the LSQ form
            ddh = s;
        }
        ew.value.data[i] = s * (c - z);
        if (with_grads) {
            ew.d_scale.data[i] = dds;
            ew.d_zero.data[i] = ddz;
            if (soft) ew.d_alpha.data[i] = ddh * dh_dalpha;
        }
    }
    return ew;
}

// Fake-quantize an activation matrix; optionally fill straight-through
// partials (dx: pass-through mask; ds, dz: per-element parameter partials).
inline Tensor act_fake_quant(const Tensor& x, const ActQuant& aq, Tensor* dx, Tensor* ds,
                             Tensor* dz) {
    const double s = aq.scale(), z = aq.zero, qmax = aq.qmax();
    Tensor out(x.shape);
    if (dx) *dx = Tensor(x.shape);
    if (ds) *ds = Tensor(x.shape);
    if (dz) *dz = Tensor(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = round_half_even(x.data[i] / s + z);
        double c = r, ddx = 1.0, dds = 0.0, ddz = 0.0;
        if (r < 0.0) {
            c = 0.0;
            ddx = 0.0;
            dds = -z;
            ddz = -s;
        } else if (r > qmax) {
            c = qmax;
            ddx = 0.0;
            dds = qmax - z;
            ddz = -s;
        } else {
            dds = (c - z) - x.data[i] / s;
        }
        out.data[i] = s * (c - z);
        if (dx) dx->data[i] = ddx;
        if (ds) ds->data[i] = dds;
        if (dz) dz->data[i] = ddz;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fake-quantized forward / backward. Mirrors net.hpp's forward structure and
// helper kernels exactly, so with all quantization disabled and no adapter the
// arithmetic is identical operation for operation.
// ---------------------------------------------------------------------------

struct QuantCache {
    Tensor h0;
    std::vector<Tensor> inputs;  // input matrix per layer (inputs[0] == h0)
    std::vector<Tensor> z;       // linear outputs (incl. LoRA term)
    std::vector<Tensor> act_pre; // silu(z) per hidden layer, before act quant
    std::vector<Tensor> lora_mid;
    std::vector<EffectiveWeight> weff;      // filled for quantized layers
    std::vector<Tensor> act_dx, act_ds, act_dz; // per site, filled when quantized
    Tensor out;
};

inline Tensor quant_forward_cached(const QuantModel& qm, const Tensor& x,
                                   const std::vector<double>& times, QuantCache* cache,
                                   bool with_grads = false) {
    qm.validate();
    const LoRAAdapter* adapter = qm.adapter ? &*qm.adapter : nullptr;
    check_forward_args(qm.base, adapter, x, times);
    const NetConfig& cfg = qm.base.config;
    const std::size_t n = x.rows(), L = cfg.num_layers();

    Tensor h0({n, cfg.input_dim + cfg.time_embed_dim});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.input_dim; ++j) h0.at(i, j) = x.at(i, j);
        time_embedding(times[i], cfg.time_embed_dim, cfg.time_scale,
                       &h0.data[i * h0.cols() + cfg.input_dim]);
    }

    if (cache) {
        cache->inputs.assign(L, Tensor());
        cache->z.assign(L, Tensor());
        cache->act_pre.assign(L, Tensor());
        cache->lora_mid.assign(L, Tensor());
        cache->weff.assign(L, EffectiveWeight());
        cache->act_dx.assign(L > 0 ? L - 1 : 0, Tensor());
        cache->act_ds.assign(L > 0 ? L - 1 : 0, Tensor());
        cache->act_dz.assign(L > 0 ? L - 1 : 0, Tensor());
    }

    Tensor cur = h0;
    Tensor out;
    for (std::size_t l = 0; l < L; ++l) {
        const LayerParams& lay = qm.base.layers[l];
        EffectiveWeight ew;
        const Tensor* wptr = &lay.weight;
        if (layer_weight_quantized(qm, l)) {
            ew = effective_weight(lay.weight, qm.weights[l], with_grads);
            wptr = &ew.value;
        }

        Tensor z({n, cfg.layer_out(l)});
        detail::matmul_nt(cur, *wptr, z);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) z.at(i, j) += lay.bias[j];

        if (adapter && adapter->layers[l].rank() > 0) {
            const LoRALayer& lo = adapter->layers[l];
            Tensor mid({n, lo.rank()});
            detail::matmul_nt(cur, lo.down, mid);
            Tensor lora_out({n, cfg.layer_out(l)});
            detail::matmul_nt(mid, lo.up, lora_out);
            const double g = adapter->layer_scaling(l);
            for (std::size_t i = 0; i < z.size(); ++i) z.data[i] += g * lora_out.data[i];
            if (cache) cache->lora_mid[l] = std::move(mid);
        }

        if (cache) {
            cache->inputs[l] = std::move(cur);
            cache->weff[l] = std::move(ew);
        }

        if (l + 1 < L) {
            Tensor act(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) act.data[i] = silu(z.data[i]);
            Tensor next;
            if (site_act_quantized(qm, l)) {
                const ActQuant& aq = qm.acts[l];
                if (!aq.fitted)
                    throw std::invalid_argument(
                        "quant_forward: activation spec after layer " + std::to_string(l) +
                        " is not fitted");
                next = act_fake_quant(act, aq, cache && with_grads ? &cache->act_dx[l] : nullptr,
                                      cache && with_grads ? &cache->act_ds[l] : nullptr,
                                      cache && with_grads ? &cache->act_dz[l] : nullptr);
            } else {
                next = act;
            }
            if (cache) {
                cache->z[l] = std::move(z);
                cache->act_pre[l] = std::move(act);
            }
            cur = std::move(next);
        } else {
            out = z;
            if (cache) cache->z[l] = std::move(z);
        }
    }
    if (cache) {
        cache->h0 = h0;
        cache->out = out;
    }
    return out;
}

inline Tensor quant_forward(const QuantModel& qm, const Tensor& x,
                            const std::vector<double>& times) {
    return quant_forward_cached(qm, x, times, nullptr, false);
}

inline Tensor quant_forward(const QuantModel& qm, const Tensor& x, double t) {
    return quant_forward_cached(qm, x, std::vector<double>(x.rows(), t), nullptr, false);
}

inline DirectionalEvaluator make_quant_evaluator(QuantModel qm) {
    return [qm = std::move(qm)](const Tensor& x, double t) { return quant_forward(qm, x, t); };
}

struct QuantGradients {
    std::vector<LoRALayer> lora;          // dA, dB per layer (adapter present)
    std::vector<double> weight_log_scale; // per layer, 0 where not quantized
    std::vector<double> weight_zero;
    std::vector<Tensor> weight_alpha;     // per layer, filled in Soft mode
    std::vector<double> act_log_scale;    // per site
    std::vector<double> act_zero;
};

// Reverse pass over a with_grads=true cache. Produces gradients for the LoRA
// adapter, the weight quantization scalars (log s, z), soft-rounding alpha,
// and the activation quantization scalars; base weights and biases are
// treated as frozen (no quantization procedure trains them).
inline QuantGradients quant_backward(const QuantModel& qm, const QuantCache& cache,
                                     const Tensor& upstream) {
    const NetConfig& cfg = qm.base.config;
    const LoRAAdapter* adapter = qm.adapter ? &*qm.adapter : nullptr;
    const std::size_t n = cache.h0.rows(), L = cfg.num_layers();
    if (upstream.rank() != 2 || upstream.rows() != n || upstream.cols() != cfg.input_dim)
        throw std::invalid_argument("quant_backward: upstream must match the output shape");

    QuantGradients g;
    g.weight_log_scale.assign(L, 0.0);
    g.weight_zero.assign(L, 0.0);
    g.weight_alpha.resize(L);
    g.act_log_scale.assign(L > 0 ? L - 1 : 0, 0.0);
    g.act_zero.assign(L > 0 ? L - 1 : 0, 0.0);
    if (adapter) g.lora.resize(L);

    Tensor dz = upstream;
    for (std::size_t l = L; l-- > 0;) {
        const Tensor& input = cache.inputs[l];
        const bool wq_on = layer_weight_quantized(qm, l);
        const Tensor& weff = wq_on ? cache.weff[l].value : qm.base.layers[l].weight;

        Tensor dmid;
        if (adapter && adapter->layers[l].rank() > 0) {
            const LoRALayer& lo = adapter->layers[l];
            const double gam = adapter->layer_scaling(l);
            const Tensor& mid = cache.lora_mid[l];
            g.lora[l].up = Tensor(lo.up.shape);
            detail::matmul_tn(dz, mid, g.lora[l].up);
            g.lora[l].up *= gam;
            dmid = Tensor({n, lo.rank()});
            detail::matmul_nn_acc(dz, lo.up, dmid);
            g.lora[l].down = Tensor(lo.down.shape);
            detail::matmul_tn(dmid, input, g.lora[l].down);
            g.lora[l].down *= gam;
        } else if (adapter) {
            g.lora[l].down = Tensor(adapter->layers[l].down.shape);
            g.lora[l].up = Tensor(adapter->layers[l].up.shape);
        }

        if (wq_on) {
            const EffectiveWeight& ew = cache.weff[l];
            if (ew.d_scale.size() == 0)
                throw std::logic_error("quant_backward: cache built without with_grads");
            Tensor dweff(weff.shape);
            detail::matmul_tn(dz, input, dweff);
            double ds_acc = 0.0, dz_acc = 0.0;
            for (std::size_t i = 0; i < dweff.size(); ++i) {
                ds_acc += dweff.data[i] * ew.d_scale.data[i];
                dz_acc += dweff.data[i] * ew.d_zero.data[i];
            }
            g.weight_log_scale[l] = ds_acc * qm.weights[l].scale(); // chain s = e^{log s}
            g.weight_zero[l] = dz_acc;
            if (qm.weights[l].rounding == WeightRounding::Soft) {
                g.weight_alpha[l] = Tensor(dweff.shape);
                for (std::size_t i = 0; i < dweff.size(); ++i)
                    g.weight_alpha[l].data[i] = dweff.data[i] * ew.d_alpha.data[i];
            }
        }

        if (l == 0) break;

        Tensor dinput({n, input.cols()});
        detail::matmul_nn_acc(dz, weff, dinput);
        if (dmid.size() > 0) {
            Tensor dinput_lora({n, input.cols()});
            detail::matmul_nn_acc(dmid, adapter->layers[l].down, dinput_lora);
            axpy(adapter->layer_scaling(l), dinput_lora, dinput);
        }

        const std::size_t site = l - 1;
        Tensor dact = std::move(dinput);
        if (site_act_quantized(qm, site)) {
            if (cache.act_dx[site].size() == 0)
                throw std::logic_error("quant_backward: cache built without with_grads");
            double ds_acc = 0.0, dz_acc = 0.0;
            for (std::size_t i = 0; i < dact.size(); ++i) {
                ds_acc += dact.data[i] * cache.act_ds[site].data[i];
                dz_acc += dact.data[i] * cache.act_dz[site].data[i];
                dact.data[i] *= cache.act_dx[site].data[i];
            }
            g.act_log_scale[site] = ds_acc * qm.acts[site].scale();
            g.act_zero[site] = dz_acc;
        }

        const Tensor& zprev = cache.z[l - 1];
        Tensor next(dact.shape);
        for (std::size_t i = 0; i < dact.size(); ++i)
            next.data[i] = dact.data[i] * silu_grad(zprev.data[i]);
        dz = std::move(next);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Model construction and calibration
// ---------------------------------------------------------------------------

struct QuantPolicy {
    int weight_bits = 8;
    int act_bits = 8;
    int edge_bits = 8; // first and last layers stay at this width
    bool quantize_weights = true;
    bool quantize_acts = true;
};

// Build a quantized wrapper: weight specs are min-max fitted immediately
// (nearest rounding); activation specs are enabled but unfitted until
// fit_act_specs provides ranges.
inline QuantModel make_quant_model(const Parameters& base, const QuantPolicy& pol) {
    base.config.validate();
    const std::size_t L = base.config.num_layers();
    QuantModel qm;
    qm.base = base;
    qm.weights.resize(L);
    qm.acts.resize(L - 1);
    qm.weights_quantized = pol.quantize_weights;
    qm.acts_quantized = pol.quantize_acts;
    for (std::size_t l = 0; l < L; ++l) {
        WeightQuant& wq = qm.weights[l];
        wq.enabled = pol.quantize_weights;
        wq.bits = (l == 0 || l + 1 == L) ? pol.edge_bits : pol.weight_bits;
        if (wq.enabled) {
            QuantSpec spec = fit_qparams_minmax(base.layers[l].weight, wq.bits);
            wq.log_scale = std::log(spec.scale);
            wq.zero = static_cast<double>(spec.zero_point);
        }
    }
    for (ActQuant& aq : qm.acts) {
        aq.enabled = pol.quantize_acts;
        aq.bits = pol.act_bits;
    }
    return qm;
}

// Min-max fit the activation specs from the base net's post-SiLU outputs on
// the given probe inputs.
inline void fit_act_specs(QuantModel& qm, const Tensor& xs, const std::vector<double>& times) {
    ForwardCache fc;
    forward_cached(qm.base, nullptr, xs, times, &fc);
    for (std::size_t site = 0; site + 1 < qm.base.config.num_layers(); ++site) {
        ActQuant& aq = qm.acts[site];
        if (!aq.enabled) continue;
        QuantSpec spec = fit_qparams_minmax(fc.h[site], aq.bits);
        aq.log_scale = std::log(spec.scale);
        aq.zero = static_cast<double>(spec.zero_point);
        aq.fitted = true;
    }
}

// Attach a freshly initialized adapter (B = 0: exact no-op until trained).
// Returns a warning per layer whose rank had to be clamped to the layer width.
inline std::vector<std::string> attach_adapter(QuantModel& qm, std::size_t rank,
                                               std::uint64_t seed, double scale_c = 1.0) {
    Rng rng(seed);
    qm.adapter = make_lora(qm.base.config, rank, rng, scale_c);
    std::vector<std::string> warnings;
    for (std::size_t l = 0; l < qm.adapter->layers.size(); ++l) {
        const std::size_t r = qm.adapter->layers[l].rank();
        if (r < rank)
            warnings.push_back("adapter rank clamped to " + std::to_string(r) + " at layer " +
                               std::to_string(l));
    }
    return warnings;
}

// ---------------------------------------------------------------------------
// Dual-order trajectory sampling (calibration data)
// ---------------------------------------------------------------------------

struct CalibrationPair {
    Tensor x_first; // [1, d] first-order trajectory state at t_first
    double t_first; // interval left edge t_{i-1}
    Tensor u_mid;   // [1, d] order-2 intermediate state
    double s_mid;   // lambda-midpoint time, t_next < s_mid < t_first
    double t_next;  // interval right edge t_i
    std::uint32_t cond_tag = 0; // reserved for conditional sampling; always 0
};

struct CalibrationSet {
    std::vector<CalibrationPair> pairs;
    std::size_t skipped_seeds = 0; // diverged seeds, skipped and counted
};

// For each seed: draw x_T ~ N(0, I), run DPM-1 recording states, run DPM-2
// from the same x_T recording intermediates, and pair per interval. Diverged
// seeds contribute nothing beyond the skip counter.
inline CalibrationSet collect_dual_trajectories(const DirectionalEvaluator& fp,
                                                const NoiseSchedule& sched, const TimeGrid& grid,
                                                const std::vector<std::uint64_t>& seeds,
                                                std::size_t dim = 2) {
    grid.validate();
    CalibrationSet out;
    for (std::uint64_t seed : seeds) {
        Rng rng(seed);
        Tensor xT({1, dim});
        for (double& v : xT.data) v = rng.normal();

        SampleOptions o1;
        o1.kind = SamplerKind::Dpm1;
        o1.record_evals = false;
        SampleOptions o2;
        o2.kind = SamplerKind::Dpm2;
        o2.record_evals = true;

        Trajectory first = sample(fp, sched, grid, xT, o1);
        Trajectory second = sample(fp, sched, grid, xT, o2);
        if (first.diverged || second.diverged) {
            ++out.skipped_seeds;
            continue;
        }
        for (std::size_t i = 0; i + 1 < grid.times.size(); ++i) {
            CalibrationPair p;
            p.x_first = first.states[i];
            p.t_first = first.times[i];
            p.u_mid = second.steps[i].u;
            p.s_mid = second.steps[i].s;
            p.t_next = grid.times[i + 1];
            out.pairs.push_back(std::move(p));
        }
    }
    return out;
}

// MOTA pairing direction. The equations subscript the quantized branch at the
// intermediate points, while the DPM-Solver case study aligns the quantized
// first-order evaluation with the full-precision intermediate one; the case
// study is the default because only first-order points exist at quantized
// inference time.
enum class PairingDirection { CaseStudy, EquationLiteral };

struct PairView {
    const Tensor* src_x; // consumed by the quantized branch
    double src_t;
    const Tensor* tgt_x; // consumed by the full-precision branch
    double tgt_t;
};

inline PairView pair_view(const CalibrationPair& p, PairingDirection dir) {
    if (dir == PairingDirection::CaseStudy) return {&p.x_first, p.t_first, &p.u_mid, p.s_mid};
    return {&p.u_mid, p.s_mid, &p.x_first, p.t_first};
}

// Collapse every pair onto its first-order record (both branches see the same
// inputs) — the naive same-point baseline, and the degenerate case in which
// MOTA reduces to plain reconstruction.
inline CalibrationSet degenerate_pairs(const CalibrationSet& calib) {
    CalibrationSet out;
    out.skipped_seeds = calib.skipped_seeds;
    out.pairs.reserve(calib.pairs.size());
    for (const CalibrationPair& p : calib.pairs) {
        CalibrationPair q = p;
        q.u_mid = p.x_first;
        q.s_mid = p.t_first;
        out.pairs.push_back(std::move(q));
    }
    return out;
}

namespace detail {

// Stack pair records into (rows, times) matrices for batched evaluation.
inline std::pair<Tensor, std::vector<double>> stack_sources(const CalibrationSet& calib,
                                                            PairingDirection dir) {
    const std::size_t P = calib.pairs.size();
    const std::size_t d = P > 0 ? calib.pairs[0].x_first.cols() : 0;
    Tensor xs({P, d});
    std::vector<double> ts(P);
    for (std::size_t i = 0; i < P; ++i) {
        PairView v = pair_view(calib.pairs[i], dir);
        for (std::size_t j = 0; j < d; ++j) xs.at(i, j) = v.src_x->at(0, j);
        ts[i] = v.src_t;
    }
    return {std::move(xs), std::move(ts)};
}

inline std::pair<Tensor, std::vector<double>> stack_targets(const CalibrationSet& calib,
                                                            PairingDirection dir) {
    const std::size_t P = calib.pairs.size();
    const std::size_t d = P > 0 ? calib.pairs[0].x_first.cols() : 0;
    Tensor xs({P, d});
    std::vector<double> ts(P);
    for (std::size_t i = 0; i < P; ++i) {
        PairView v = pair_view(calib.pairs[i], dir);
        for (std::size_t j = 0; j < d; ++j) xs.at(i, j) = v.tgt_x->at(0, j);
        ts[i] = v.tgt_t;
    }
    return {std::move(xs), std::move(ts)};
}

// Union of all pair records, for activation-range fitting.
inline std::pair<Tensor, std::vector<double>> stack_all_records(const CalibrationSet& calib) {
    const std::size_t P = calib.pairs.size();
    const std::size_t d = P > 0 ? calib.pairs[0].x_first.cols() : 0;
    Tensor xs({2 * P, d});
    std::vector<double> ts(2 * P);
    for (std::size_t i = 0; i < P; ++i) {
        const CalibrationPair& p = calib.pairs[i];
        for (std::size_t j = 0; j < d; ++j) {
            xs.at(2 * i, j) = p.x_first.at(0, j);
            xs.at(2 * i + 1, j) = p.u_mid.at(0, j);
        }
        ts[2 * i] = p.t_first;
        ts[2 * i + 1] = p.s_mid;
    }
    return {std::move(xs), std::move(ts)};
}

} // namespace detail

// Fit activation specs over the union of calibration records (SA-PTQ entry).
inline void fit_act_specs(QuantModel& qm, const CalibrationSet& calib) {
    if (calib.pairs.empty())
        throw std::invalid_argument("fit_act_specs: empty calibration set");
    auto [xs, ts] = detail::stack_all_records(calib);
    fit_act_specs(qm, xs, ts);
}

// Fit activation specs from a recorded full-precision trajectory (the
// SA-QLoRA initialization path: quantization parameters come from the
// first-order trajectory).
inline void fit_act_specs(QuantModel& qm, const Trajectory& traj) {
    if (traj.states.empty()) throw std::invalid_argument("fit_act_specs: empty trajectory");
    const std::size_t rows = traj.states.size() * traj.chains;
    Tensor xs({rows, traj.dim});
    std::vector<double> ts(rows);
    std::size_t r = 0;
    for (std::size_t i = 0; i < traj.states.size(); ++i)
        for (std::size_t c = 0; c < traj.chains; ++c, ++r) {
            for (std::size_t j = 0; j < traj.dim; ++j) xs.at(r, j) = traj.states[i].at(c, j);
            ts[r] = traj.times[i];
        }
    fit_act_specs(qm, xs, ts);
}

// Empirical per-evaluation quantization residue over the calibration records:
// sup-norm of (quantized - full-precision) outputs, the error lab's delta.
inline double empirical_delta(const QuantModel& qm, const CalibrationSet& calib) {
    if (calib.pairs.empty()) throw std::invalid_argument("empirical_delta: empty calibration set");
    auto [xs, ts] = detail::stack_all_records(calib);
    Tensor fp = forward(qm.base, nullptr, xs, ts);
    Tensor q = quant_forward(qm, xs, ts);
    double worst = 0.0;
    for (std::size_t i = 0; i < fp.size(); ++i)
        worst = std::max(worst, std::abs(fp.data[i] - q.data[i]));
    return worst;
}

// ---------------------------------------------------------------------------
// SA-PTQ: sequential per-module reconstruction with soft rounding
// ---------------------------------------------------------------------------

struct PtqOptions {
    // Default sized for the toy net: the task gradient needs a few hundred
    // warmup iterations to pull the rounding logits out of their corner
    // initialization before the annealed regularizer re-binarizes them;
    // 2000 sits comfortably past the measured convergence plateau.
    int iterations = 2000;
    double lr = 1e-2;            // Adam over the soft-rounding alphas
    double act_lr = 1e-3;        // Adam over the site's act spec (scale, zero);
                                 // range parameters need a much smaller step than
                                 // rounding logits or they walk off the calibrated
                                 // range and clip off-manifold activations
    double reg_weight = 0.01;    // rounding regularizer weight
    double beta_start = 20.0;    // annealed |2h-1|^beta exponent
    double beta_end = 2.0;
    double warmup_frac = 0.2;    // fraction of iterations without the regularizer
    PairingDirection pairing = PairingDirection::CaseStudy;
};

struct LayerReconstruction {
    std::size_t layer = 0;
    double loss_before = 0.0; // module-output MSE with plain nearest rounding
    double loss_after = 0.0;  // module-output MSE after optimization + hardening
};

// Reconstruct one module (= one linear layer plus its activation site, when
// present): optimize the layer's soft-rounding offsets, and the site's
// activation quantization parameters via straight-through gradients, to
// minimize the MOTA reconstruction loss. The full-precision branch consumes
// the target-side records and the quantized branch the source-side records of
// each pair (direction per opt.pairing); layers before `layer` must already
// be hardened.
inline LayerReconstruction sa_ptq_reconstruct(QuantModel& qm, std::size_t layer,
                                              const CalibrationSet& calib,
                                              const PtqOptions& opt = {}) {
    qm.validate();
    const NetConfig& cfg = qm.base.config;
    const std::size_t L = cfg.num_layers();
    if (layer >= L) throw std::invalid_argument("sa_ptq_reconstruct: layer out of range");
    for (std::size_t l = 0; l < layer; ++l)
        if (layer_weight_quantized(qm, l) && qm.weights[l].rounding != WeightRounding::Hard)
            throw std::invalid_argument("sa_ptq_reconstruct: layer " + std::to_string(l) +
                                        " has not been reconstructed yet");
    if (calib.pairs.empty())
        throw std::invalid_argument("sa_ptq_reconstruct: empty calibration set");
    if (opt.iterations < 0) throw std::invalid_argument("sa_ptq_reconstruct: iterations < 0");

    const bool hidden = layer + 1 < L;
    const std::size_t site = layer; // activation site fed by this layer
    const bool train_w = layer_weight_quantized(qm, layer);
    const bool train_act = hidden && site_act_quantized(qm, site);

    // Full-precision module output on the target records.
    auto [tgt_x, tgt_t] = detail::stack_targets(calib, opt.pairing);
    ForwardCache fp_cache;
    forward_cached(qm.base, nullptr, tgt_x, tgt_t, &fp_cache);
    const Tensor target = hidden ? fp_cache.h[layer] : fp_cache.z[L - 1];

    // Quantized-prefix input to this layer on the source records. Layers at
    // and beyond `layer` run in their current state, but only the prefix
    // output feeds the reconstruction.
    auto [src_x, src_t] = detail::stack_sources(calib, opt.pairing);
    QuantCache pre_cache;
    quant_forward_cached(qm, src_x, src_t, &pre_cache, false);
    const Tensor src_in = pre_cache.inputs[layer];

    const LayerParams& lay = qm.base.layers[layer];
    WeightQuant& wq = qm.weights[layer];
    ActQuant* aq = train_act ? &qm.acts[site] : nullptr;
    const std::size_t n = src_in.rows();

    // Module output and (optionally) gradients for the current parameters.
    Tensor z({n, cfg.layer_out(layer)}), act, out;
    Tensor act_dx, act_ds, act_dz;
    auto module_out = [&](const Tensor& weights_eff, bool with_act_grads) {
        detail::matmul_nt(src_in, weights_eff, z);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) z.at(i, j) += lay.bias[j];
        if (qm.adapter && qm.adapter->layers[layer].rank() > 0) {
            const LoRALayer& lo = qm.adapter->layers[layer];
            Tensor mid({n, lo.rank()});
            detail::matmul_nt(src_in, lo.down, mid);
            Tensor lora_out({n, z.cols()});
            detail::matmul_nt(mid, lo.up, lora_out);
            const double g = qm.adapter->layer_scaling(layer);
            for (std::size_t i = 0; i < z.size(); ++i) z.data[i] += g * lora_out.data[i];
        }
        if (!hidden) {
            out = z;
            return;
        }
        act = Tensor(z.shape);
        for (std::size_t i = 0; i < z.size(); ++i) act.data[i] = silu(z.data[i]);
        if (site_act_quantized(qm, site)) {
            out = act_fake_quant(act, qm.acts[site], with_act_grads ? &act_dx : nullptr,
                                 with_act_grads ? &act_ds : nullptr,
                                 with_act_grads ? &act_dz : nullptr);
        } else {
            out = act;
        }
    };
    auto reconstruction_mse = [&]() { return mean_squared_deviation(out, target); };

    LayerReconstruction res;
    res.layer = layer;
    {
        if (train_w) {
            EffectiveWeight ew = effective_weight(lay.weight, wq, false);
            module_out(ew.value, false);
        } else {
            module_out(lay.weight, false);
        }
        res.loss_before = reconstruction_mse();
    }
    if (!train_w && !train_act) { // nothing trainable: a measured no-op
        res.loss_after = res.loss_before;
        return res;
    }

    if (train_w) init_soft_rounding(wq, lay.weight);

    std::vector<double*> slots;
    if (train_w)
        for (double& a : wq.alpha.data) slots.push_back(&a);
    std::vector<double*> act_slots;
    if (train_act) {
        act_slots.push_back(&aq->log_scale);
        act_slots.push_back(&aq->zero);
    }
    AdamConfig acfg;
    acfg.lr = opt.lr;
    AdamOptimizer adam(acfg, slots.size());
    std::vector<double> grads(slots.size());
    AdamConfig act_cfg;
    act_cfg.lr = opt.act_lr;
    AdamOptimizer act_adam(act_cfg, act_slots.size());
    std::vector<double> act_grads(act_slots.size());
    // Trust region around the calibrated range: fine-tuning may sharpen the
    // fit, but a range that walks far off its minmax calibration clips
    // off-distribution activations and destabilizes the sampled trajectory.
    const double logs0 = train_act ? aq->log_scale : 0.0;
    const double zero0 = train_act ? aq->zero : 0.0;
    constexpr double kLogScaleTrust = 0.693147180559945; // ln 2
    constexpr double kZeroTrust = 4.0;

    const double numel = static_cast<double>(target.size());
    for (int it = 0; it < opt.iterations; ++it) {
        EffectiveWeight ew;
        if (train_w) {
            ew = effective_weight(lay.weight, wq, true);
            module_out(ew.value, true);
        } else {
            module_out(lay.weight, true);
        }

        double loss = reconstruction_mse();
        const double progress = static_cast<double>(it) / std::max(1, opt.iterations);
        const bool reg_on = train_w && progress >= opt.warmup_frac;
        double beta = 0.0;
        if (reg_on) {
            const double ramp = (progress - opt.warmup_frac) / (1.0 - opt.warmup_frac);
            beta = opt.beta_start + (opt.beta_end - opt.beta_start) * ramp;
            double reg = 0.0;
            for (double a : wq.alpha.data)
                reg += 1.0 - std::pow(std::abs(2.0 * rectified_h(a) - 1.0), beta);
            loss += opt.reg_weight * reg;
        }
        if (!std::isfinite(loss))
            throw DivergenceError("sa_ptq_reconstruct: non-finite loss at layer " +
                                      std::to_string(layer),
                                  static_cast<std::size_t>(it));

        // dL/d(module out)
        Tensor dout(out.shape);
        for (std::size_t i = 0; i < out.size(); ++i)
            dout.data[i] = 2.0 * (out.data[i] - target.data[i]) / numel;

        double d_act_logs = 0.0, d_act_zero = 0.0;
        Tensor dz_local;
        if (hidden) {
            Tensor dact = dout;
            if (site_act_quantized(qm, site)) {
                for (std::size_t i = 0; i < dact.size(); ++i) {
                    d_act_logs += dout.data[i] * act_ds.data[i];
                    d_act_zero += dout.data[i] * act_dz.data[i];
                    dact.data[i] = dout.data[i] * act_dx.data[i];
                }
                d_act_logs *= qm.acts[site].scale();
            }
            dz_local = Tensor(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i)
                dz_local.data[i] = dact.data[i] * silu_grad(z.data[i]);
        } else {
            dz_local = dout;
        }

        if (train_w) {
            Tensor dweff(lay.weight.shape);
            detail::matmul_tn(dz_local, src_in, dweff);
            for (std::size_t i = 0; i < dweff.size(); ++i) {
                double da = dweff.data[i] * ew.d_alpha.data[i];
                if (reg_on) {
                    const double h = rectified_h(wq.alpha.data[i]);
                    const double m = 2.0 * h - 1.0;
                    if (m != 0.0)
                        da += opt.reg_weight * (-beta * std::pow(std::abs(m), beta - 1.0) *
                                                (m > 0.0 ? 2.0 : -2.0)) *
                              rectified_h_grad(wq.alpha.data[i]);
                }
                grads[i] = da;
            }
            adam.step(slots, grads);
        }
        if (train_act) {
            act_grads[0] = d_act_logs;
            act_grads[1] = d_act_zero;
            act_adam.step(act_slots, act_grads);
            aq->log_scale =
                std::clamp(aq->log_scale, logs0 - kLogScaleTrust, logs0 + kLogScaleTrust);
            aq->zero = std::clamp(aq->zero, zero0 - kZeroTrust, zero0 + kZeroTrust);
        }
    }

    if (train_w) harden_rounding(wq);
    {
        if (train_w) {
            EffectiveWeight ew = effective_weight(lay.weight, wq, false);
            module_out(ew.value, false);
        } else {
            module_out(lay.weight, false);
        }
        res.loss_after = reconstruction_mse();
    }
    return res;
}

// Same-point baseline: both branches consume the first-order records. Shares
// the reconstruction code path via the degenerate pairing.
inline LayerReconstruction naive_ptq_reconstruct(QuantModel& qm, std::size_t layer,
                                                 const CalibrationSet& calib,
                                                 const PtqOptions& opt = {}) {
    return sa_ptq_reconstruct(qm, layer, degenerate_pairs(calib), opt);
}

// Sequential whole-net reconstruction, first module to last. Layers with
// nothing trainable contribute a measured no-op record.
inline std::vector<LayerReconstruction> ptq_pipeline(QuantModel& qm, const CalibrationSet& calib,
                                                     const PtqOptions& opt = {},
                                                     bool naive = false) {
    std::vector<LayerReconstruction> out;
    for (std::size_t l = 0; l < qm.base.config.num_layers(); ++l)
        out.push_back(naive ? naive_ptq_reconstruct(qm, l, calib, opt)
                            : sa_ptq_reconstruct(qm, l, calib, opt));
    return out;
}

// ---------------------------------------------------------------------------
// SA-QLoRA: adapter + quantization-parameter training under L_COS + L_MOTA
// with the mixstep progressive schedule
// ---------------------------------------------------------------------------

struct SAQLoRAConfig {
    std::vector<std::size_t> steps = {100, 50, 20}; // mixstep schedule
    std::size_t batch = 4;
    std::size_t rank = 32;    // requested adapter rank (clamped at layer width)
    std::size_t epochs = 40;  // per mixstep cycle (paper uses 160 at LDM scale)
    double w_cos = 1.0;
    double w_mota = 1.0;
    double lr = 1e-3;
    std::size_t sample_seeds = 2; // dual-order trajectory seeds per cycle
    PairingDirection pairing = PairingDirection::CaseStudy;
    bool plain = false; // Eq.-19 baseline: same-point pairs (set w_cos = 0 for it)
    double divergence_threshold = 1e6;

    void validate() const {
        if (steps.empty()) throw std::invalid_argument("SAQLoRAConfig: empty steps list");
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (steps[i] == 0) throw std::invalid_argument("SAQLoRAConfig: zero step count");
            if (i > 0 && steps[i] >= steps[i - 1])
                throw std::invalid_argument("SAQLoRAConfig: steps must strictly decrease");
        }
        if (batch == 0) throw std::invalid_argument("SAQLoRAConfig: batch must be > 0");
        if (rank == 0) throw std::invalid_argument("SAQLoRAConfig: rank must be > 0");
        if (sample_seeds == 0) throw std::invalid_argument("SAQLoRAConfig: sample_seeds == 0");
        if (!(lr > 0.0)) throw std::invalid_argument("SAQLoRAConfig: lr must be positive");
        if (!(w_cos >= 0.0) || !(w_mota >= 0.0))
            throw std::invalid_argument("SAQLoRAConfig: loss weights must be >= 0");
    }
};

// L_COS of one aligned row pair: 1 - <a, b> / (|a| |b|).
inline double cosine_loss(const Tensor& a, const Tensor& b, std::size_t row) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        dot += a.at(row, j) * b.at(row, j);
        na += a.at(row, j) * a.at(row, j);
        nb += b.at(row, j) * b.at(row, j);
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom < 1e-30) return 1.0; // degenerate direction: maximally uninformative
    return 1.0 - dot / denom;
}

struct QLoRAStepLog {
    std::size_t cycle = 0;
    std::size_t epoch = 0;
    double total = 0.0;
    double cos_term = 0.0;  // unweighted L_COS
    double mota_term = 0.0; // unweighted L_MOTA
};

struct SAQLoRAResult {
    QuantModel model;
    std::vector<QLoRAStepLog> log; // one entry per minibatch
    std::vector<std::string> warnings;
};

// Train the adapter and the quantization parameters (log-scales, zero points
// for weights and activations) under w_cos * L_COS + w_mota * L_MOTA. For
// each entry of cfg.steps the dual-order pairs are regenerated on that grid
// and `epochs` passes run over them in minibatches. Requires an attached
// adapter and fitted activation specs (when activations are quantized).
inline SAQLoRAResult sa_qlora_train(const QuantModel& qm0, const DirectionalEvaluator& fp_eval,
                                    const NoiseSchedule& sched, const SAQLoRAConfig& cfg,
                                    std::uint64_t seed) {
    cfg.validate();
    qm0.validate();
    if (!qm0.adapter) throw std::invalid_argument("sa_qlora_train: model has no adapter");

    SAQLoRAResult res;
    res.model = qm0;
    QuantModel& qm = res.model;
    const NetConfig& netcfg = qm.base.config;
    const std::size_t L = netcfg.num_layers();
    const std::size_t d = netcfg.input_dim;

    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t r = qm.adapter->layers[l].rank();
        if (r < cfg.rank)
            res.warnings.push_back("adapter rank is " + std::to_string(r) + " at layer " +
                                   std::to_string(l) + ", below the requested " +
                                   std::to_string(cfg.rank));
    }

    // Fixed slot order: per-layer adapter tensors, then weight quantization
    // scalars, then activation quantization scalars.
    std::vector<double*> slots;
    for (std::size_t l = 0; l < L; ++l) {
        for (double& v : qm.adapter->layers[l].down.data) slots.push_back(&v);
        for (double& v : qm.adapter->layers[l].up.data) slots.push_back(&v);
    }
    for (std::size_t l = 0; l < L; ++l)
        if (layer_weight_quantized(qm, l)) {
            slots.push_back(&qm.weights[l].log_scale);
            slots.push_back(&qm.weights[l].zero);
        }
    for (std::size_t sgl = 0; sgl + 1 < L; ++sgl)
        if (site_act_quantized(qm, sgl)) {
            slots.push_back(&qm.acts[sgl].log_scale);
            slots.push_back(&qm.acts[sgl].zero);
        }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer adam(acfg, slots.size());
    std::vector<double> grads(slots.size());

    auto collect = [&](const QuantGradients& g) {
        std::size_t k = 0;
        for (std::size_t l = 0; l < L; ++l) {
            for (double v : g.lora[l].down.data) grads[k++] = v;
            for (double v : g.lora[l].up.data) grads[k++] = v;
        }
        for (std::size_t l = 0; l < L; ++l)
            if (layer_weight_quantized(qm, l)) {
                grads[k++] = g.weight_log_scale[l];
                grads[k++] = g.weight_zero[l];
            }
        for (std::size_t sgl = 0; sgl + 1 < L; ++sgl)
            if (site_act_quantized(qm, sgl)) {
                grads[k++] = g.act_log_scale[sgl];
                grads[k++] = g.act_zero[sgl];
            }
        if (k != grads.size()) throw std::logic_error("sa_qlora_train: slot count drifted");
    };

    for (std::size_t cyc = 0; cyc < cfg.steps.size(); ++cyc) {
        TimeGrid grid = TimeGrid::uniform_lambda(sched, cfg.steps[cyc]);
        std::vector<std::uint64_t> pair_seeds(cfg.sample_seeds);
        for (std::size_t j = 0; j < cfg.sample_seeds; ++j)
            pair_seeds[j] = derive_subseed(seed, "qlora-pairs", cyc * 1024 + j);
        CalibrationSet calib = collect_dual_trajectories(fp_eval, sched, grid, pair_seeds, d);
        if (cfg.plain) calib = degenerate_pairs(calib);
        const std::size_t P = calib.pairs.size();
        if (P == 0) {
            res.warnings.push_back("cycle " + std::to_string(cyc) +
                                   ": every trajectory seed diverged, cycle skipped");
            continue;
        }

        // Targets are constant across epochs: evaluate the full-precision
        // branch once per pair.
        Tensor targets({P, d});
        for (std::size_t i = 0; i < P; ++i) {
            PairView v = pair_view(calib.pairs[i], cfg.pairing);
            Tensor t = fp_eval(*v.tgt_x, v.tgt_t);
            for (std::size_t j = 0; j < d; ++j) targets.at(i, j) = t.at(0, j);
        }

        Rng shuffle_rng(derive_subseed(seed, "qlora-shuffle", cyc));
        std::vector<std::size_t> order(P);
        for (std::size_t i = 0; i < P; ++i) order[i] = i;

        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            for (std::size_t i = P; i > 1; --i) {
                const std::size_t j =
                    static_cast<std::size_t>(shuffle_rng.uniform01() * static_cast<double>(i));
                std::swap(order[i - 1], order[std::min(j, i - 1)]);
            }
            for (std::size_t b0 = 0; b0 < P; b0 += cfg.batch) {
                const std::size_t B = std::min(cfg.batch, P - b0);
                Tensor srcs({B, d}), tgt({B, d});
                std::vector<double> src_t(B);
                for (std::size_t bi = 0; bi < B; ++bi) {
                    const std::size_t pi = order[b0 + bi];
                    PairView v = pair_view(calib.pairs[pi], cfg.pairing);
                    for (std::size_t j = 0; j < d; ++j) {
                        srcs.at(bi, j) = v.src_x->at(0, j);
                        tgt.at(bi, j) = targets.at(pi, j);
                    }
                    src_t[bi] = v.src_t;
                }

                QuantCache cache;
                Tensor pred = quant_forward_cached(qm, srcs, src_t, &cache, true);

                double mota = mean_squared_deviation(pred, tgt);
                double cosv = 0.0;
                for (std::size_t bi = 0; bi < B; ++bi) cosv += cosine_loss(tgt, pred, bi);
                cosv /= static_cast<double>(B);
                const double total = cfg.w_cos * cosv + cfg.w_mota * mota;
                if (!std::isfinite(total) || pred.abs_max() > cfg.divergence_threshold)
                    throw DivergenceError("sa_qlora_train: diverged in cycle " +
                                              std::to_string(cyc),
                                          cyc * cfg.epochs + epoch);

                Tensor upstream({B, d});
                const double inv_md = 1.0 / static_cast<double>(B * d);
                for (std::size_t bi = 0; bi < B; ++bi) {
                    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dot += tgt.at(bi, j) * pred.at(bi, j);
                        na2 += tgt.at(bi, j) * tgt.at(bi, j);
                        nb2 += pred.at(bi, j) * pred.at(bi, j);
                    }
                    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                    const double denom = na * nb;
                    for (std::size_t j = 0; j < d; ++j) {
                        double gv = cfg.w_mota * 2.0 * (pred.at(bi, j) - tgt.at(bi, j)) * inv_md;
                        if (cfg.w_cos > 0.0 && denom >= 1e-30) {
                            const double dcos = tgt.at(bi, j) / denom -
                                                dot * pred.at(bi, j) / (denom * nb2);
                            gv += cfg.w_cos * (-dcos) / static_cast<double>(B);
                        }
                        upstream.at(bi, j) = gv;
                    }
                }

                QuantGradients g = quant_backward(qm, cache, upstream);
                collect(g);
                adam.step(slots, grads);
                res.log.push_back({cyc, epoch, total, cosv, mota});
            }
        }
    }
    return res;
}

} // namespace saq
