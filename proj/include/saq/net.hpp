#pragma once

// Small MLP noise predictor with hand-written reverse-mode gradients and an
// optional LoRA adapter on every weight matrix.
//
// Architecture: the input x (dim d) is concatenated with a sinusoidal
// embedding of t, then passed through Linear -> SiLU -> ... -> Linear. The
// last layer has no activation and maps back to dim d. A LoRA adapter
// contributes gamma_l * B_l A_l alongside each weight matrix, with
// gamma_l = c / r_l; B is zero-initialized so a fresh adapter is an exact
// no-op (bitwise: the contribution is skipped, not multiplied out).
//
// Backprop is done layer-by-layer against cached activations rather than with
// a general tape — the architecture is fixed, so the explicit form is both
// faster and easier to audit. Gradient checks in the test suite compare every
// path against central finite differences.

#include "saq/errors.hpp"
#include "saq/mixture.hpp"
#include "saq/rng.hpp"
#include "saq/schedule.hpp"
#include "saq/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace saq {

struct NetConfig {
    std::size_t input_dim = 2;
    std::vector<std::size_t> hidden_widths = {64, 64};
    std::size_t time_embed_dim = 16; // even
    double time_scale = 1.0;         // embedding sees t / time_scale

    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("NetConfig: input_dim must be > 0");
        if (hidden_widths.empty())
            throw std::invalid_argument("NetConfig: need at least one hidden layer");
        for (std::size_t w : hidden_widths)
            if (w == 0) throw std::invalid_argument("NetConfig: zero hidden width");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw std::invalid_argument("NetConfig: time_embed_dim must be even and >= 2");
        if (!(time_scale > 0.0))
            throw std::invalid_argument("NetConfig: time_scale must be positive");
    }

    std::size_t num_layers() const { return hidden_widths.size() + 1; }

    std::size_t layer_in(std::size_t l) const {
        return l == 0 ? input_dim + time_embed_dim : hidden_widths[l - 1];
    }

    std::size_t layer_out(std::size_t l) const {
        return l == num_layers() - 1 ? input_dim : hidden_widths[l];
    }
};

struct LayerParams {
    Tensor weight; // [out, in]
    Tensor bias;   // [out]
};

struct Parameters {
    NetConfig config;
    std::vector<LayerParams> layers;
};

struct LoRALayer {
    Tensor down; // A: [r, in]
    Tensor up;   // B: [out, r]
    std::size_t rank() const { return down.rank() == 2 ? down.shape[0] : 0; }
};

struct LoRAAdapter {
    double scale_c = 1.0;
    std::vector<LoRALayer> layers;

    double layer_scaling(std::size_t l) const {
        const std::size_t r = layers[l].rank();
        return r == 0 ? 0.0 : scale_c / static_cast<double>(r);
    }
};

struct GradientBundle {
    std::vector<LayerParams> layers; // dW, db per layer
    std::vector<LoRALayer> lora;     // dA, dB per layer (empty if no adapter)
    Tensor input;                    // gradient w.r.t. x, [n, input_dim]
};

// ---------------------------------------------------------------------------
// Time embedding: [sin(w_j u), cos(w_j u)] for u = t / time_scale and
// frequencies w_j geometrically spaced from 1 to 1e4 over time_embed_dim / 2
// slots.
// ---------------------------------------------------------------------------
inline void time_embedding(double t, std::size_t embed_dim, double time_scale, double* out) {
    const std::size_t half = embed_dim / 2;
    const double u = t / time_scale;
    for (std::size_t j = 0; j < half; ++j) {
        const double expo =
            half == 1 ? 0.0 : 4.0 * static_cast<double>(j) / static_cast<double>(half - 1);
        const double w = std::pow(10.0, expo);
        out[2 * j] = std::sin(w * u);
        out[2 * j + 1] = std::cos(w * u);
    }
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline double silu_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

namespace detail {

// Y [n, m] = X [n, k] * W^T, W stored [m, k]
inline void matmul_nt(const Tensor& x, const Tensor& w, Tensor& y) {
    const std::size_t n = x.rows(), k = x.cols(), m = w.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += x.at(i, p) * w.at(j, p);
            y.at(i, j) = acc;
        }
}

// Y [n, m] += X [n, k] * W, W stored [k, m]
inline void matmul_nn_acc(const Tensor& x, const Tensor& w, Tensor& y) {
    const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x.at(i, p);
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) y.at(i, j) += xv * w.at(p, j);
        }
}

// Y [k, m] = X^T * Z for X [n, k], Z [n, m]
inline void matmul_tn(const Tensor& x, const Tensor& z, Tensor& y) {
    const std::size_t n = x.rows(), k = x.cols(), m = z.cols();
    y.fill(0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x.at(i, p);
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) y.at(p, j) += xv * z.at(i, j);
        }
}

} // namespace detail

inline Parameters init_parameters(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    p.layers.resize(cfg.num_layers());
    for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
        const std::size_t in = cfg.layer_in(l), out = cfg.layer_out(l);
        p.layers[l].weight = Tensor({out, in});
        p.layers[l].bias = Tensor({out});
        const double std = std::sqrt(2.0 / static_cast<double>(in));
        for (double& v : p.layers[l].weight.data) v = std * rng.normal();
    }
    return p;
}

// Zero-initialized up-projection makes a fresh adapter an exact no-op. The
// requested rank is capped at each layer's width.
inline LoRAAdapter make_lora(const NetConfig& cfg, std::size_t rank, Rng& rng,
                             double scale_c = 1.0) {
    cfg.validate();
    LoRAAdapter a;
    a.scale_c = scale_c;
    a.layers.resize(cfg.num_layers());
    for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
        const std::size_t in = cfg.layer_in(l), out = cfg.layer_out(l);
        const std::size_t r = std::min(rank, std::min(in, out));
        a.layers[l].down = Tensor({r, in});
        a.layers[l].up = Tensor({out, r});
        const double std = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : a.layers[l].down.data) v = std * rng.normal();
        // up stays zero
    }
    return a;
}

struct ForwardCache {
    Tensor h0;                    // [n, input_dim + embed]
    std::vector<Tensor> z;        // pre-activations per layer
    std::vector<Tensor> h;        // post-activations per hidden layer
    std::vector<Tensor> lora_mid; // h_{l-1} * A_l^T per layer (empty without adapter)
};

inline void check_forward_args(const Parameters& params, const LoRAAdapter* adapter,
                               const Tensor& x, const std::vector<double>& times) {
    params.config.validate();
    if (params.layers.size() != params.config.num_layers())
        throw std::invalid_argument("forward: parameter/layer count mismatch");
    if (x.rank() != 2 || x.cols() != params.config.input_dim)
        throw std::invalid_argument("forward: x must be [n, input_dim]");
    if (times.size() != x.rows())
        throw std::invalid_argument("forward: one time per row required");
    if (adapter && adapter->layers.size() != params.config.num_layers())
        throw std::invalid_argument("forward: adapter layer count mismatch");
}

inline Tensor forward_cached(const Parameters& params, const LoRAAdapter* adapter,
                             const Tensor& x, const std::vector<double>& times,
                             ForwardCache* cache) {
    check_forward_args(params, adapter, x, times);
    const NetConfig& cfg = params.config;
    const std::size_t n = x.rows(), L = cfg.num_layers();

    Tensor h0({n, cfg.input_dim + cfg.time_embed_dim});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.input_dim; ++j) h0.at(i, j) = x.at(i, j);
        time_embedding(times[i], cfg.time_embed_dim, cfg.time_scale,
                       &h0.data[i * h0.cols() + cfg.input_dim]);
    }

    if (cache) {
        cache->z.assign(L, Tensor());
        cache->h.assign(L, Tensor());
        cache->lora_mid.assign(L, Tensor());
    }

    Tensor cur = h0;
    Tensor out;
    for (std::size_t l = 0; l < L; ++l) {
        const LayerParams& lay = params.layers[l];
        Tensor z({n, cfg.layer_out(l)});
        detail::matmul_nt(cur, lay.weight, z);
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

        if (l + 1 < L) {
            Tensor act(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) act.data[i] = silu(z.data[i]);
            if (cache) {
                cache->z[l] = std::move(z);
                cache->h[l] = act;
            }
            cur = std::move(act);
        } else {
            out = z;
            if (cache) cache->z[l] = std::move(z);
        }
    }
    if (cache) cache->h0 = std::move(h0);
    return out;
}

inline Tensor forward(const Parameters& params, const LoRAAdapter* adapter, const Tensor& x,
                      const std::vector<double>& times) {
    return forward_cached(params, adapter, x, times, nullptr);
}

inline Tensor forward(const Parameters& params, const LoRAAdapter* adapter, const Tensor& x,
                      double t) {
    return forward_cached(params, adapter, x, std::vector<double>(x.rows(), t), nullptr);
}

inline GradientBundle backward_from_cache(const Parameters& params, const LoRAAdapter* adapter,
                                          const ForwardCache& cache, const Tensor& upstream) {
    const NetConfig& cfg = params.config;
    const std::size_t n = cache.h0.rows(), L = cfg.num_layers();
    if (upstream.rank() != 2 || upstream.rows() != n || upstream.cols() != cfg.input_dim)
        throw std::invalid_argument("backward: upstream must match the output shape");

    GradientBundle g;
    g.layers.resize(L);
    if (adapter) g.lora.resize(L);

    Tensor dz = upstream; // dL/dz for the layer being processed
    for (std::size_t l = L; l-- > 0;) {
        const Tensor& input = (l == 0) ? cache.h0 : cache.h[l - 1];
        const LayerParams& lay = params.layers[l];

        g.layers[l].weight = Tensor({lay.weight.shape[0], lay.weight.shape[1]});
        detail::matmul_tn(dz, input, g.layers[l].weight); // dW = dz^T * input
        g.layers[l].bias = Tensor({lay.bias.shape[0]});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dz.cols(); ++j) g.layers[l].bias[j] += dz.at(i, j);

        Tensor dinput({n, input.cols()});
        detail::matmul_nn_acc(dz, lay.weight, dinput); // dz * W

        if (adapter && adapter->layers[l].rank() > 0) {
            const LoRALayer& lo = adapter->layers[l];
            const double gam = adapter->layer_scaling(l);
            const Tensor& mid = cache.lora_mid[l];

            g.lora[l].up = Tensor(lo.up.shape);
            detail::matmul_tn(dz, mid, g.lora[l].up); // dB = dz^T * mid
            g.lora[l].up *= gam;

            Tensor dmid({n, lo.rank()});
            detail::matmul_nn_acc(dz, lo.up, dmid); // dz * B

            g.lora[l].down = Tensor(lo.down.shape);
            detail::matmul_tn(dmid, input, g.lora[l].down); // dA = dmid^T * input
            g.lora[l].down *= gam;

            Tensor dinput_lora({n, input.cols()});
            detail::matmul_nn_acc(dmid, lo.down, dinput_lora); // dmid * A
            axpy(gam, dinput_lora, dinput);
        } else if (adapter) {
            g.lora[l].down = Tensor(adapter->layers[l].down.shape);
            g.lora[l].up = Tensor(adapter->layers[l].up.shape);
        }

        if (l == 0) {
            g.input = Tensor({n, cfg.input_dim});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < cfg.input_dim; ++j)
                    g.input.at(i, j) = dinput.at(i, j);
        } else {
            const Tensor& zprev = cache.z[l - 1];
            Tensor next(dinput.shape);
            for (std::size_t i = 0; i < dinput.size(); ++i)
                next.data[i] = dinput.data[i] * silu_grad(zprev.data[i]);
            dz = std::move(next);
        }
    }
    return g;
}

inline GradientBundle backward(const Parameters& params, const LoRAAdapter* adapter,
                               const Tensor& x, const std::vector<double>& times,
                               const Tensor& upstream) {
    ForwardCache cache;
    forward_cached(params, adapter, x, times, &cache);
    return backward_from_cache(params, adapter, cache, upstream);
}

inline GradientBundle backward(const Parameters& params, const LoRAAdapter* adapter,
                               const Tensor& x, double t, const Tensor& upstream) {
    return backward(params, adapter, x, std::vector<double>(x.rows(), t), upstream);
}

// ---------------------------------------------------------------------------
// Adam over an explicit flat list of parameter slots. The slot order is fixed
// by the caller and never changes between steps, which keeps runs bitwise
// reproducible.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamOptimizer {
  public:
    AdamOptimizer(const AdamConfig& cfg, std::size_t total_params)
        : cfg_(cfg), m_(total_params, 0.0), v_(total_params, 0.0) {}

    void step(const std::vector<double*>& params, const std::vector<double>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw std::invalid_argument("AdamOptimizer: slot count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < m_.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            *params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

  private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Denoiser training on the toy task. Per step the draw order is: the x0
// batch, then one time per row, then the noise tensor row-major — fixed as
// part of the reproducibility contract.
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t steps = 4000;
    std::size_t batch_size = 128;
    AdamConfig adam;
    std::uint64_t seed = 0;
};

struct TrainResult {
    Parameters params;
    double final_loss = 0.0;          // mean over the last window
    std::vector<double> loss_history; // one entry per step
};

inline std::vector<double*> parameter_slots(Parameters& p) {
    std::vector<double*> slots;
    for (auto& lay : p.layers) {
        for (double& v : lay.weight.data) slots.push_back(&v);
        for (double& v : lay.bias.data) slots.push_back(&v);
    }
    return slots;
}

inline void collect_gradient(const GradientBundle& g, std::vector<double>& out) {
    out.clear();
    for (const auto& lay : g.layers) {
        for (double v : lay.weight.data) out.push_back(v);
        for (double v : lay.bias.data) out.push_back(v);
    }
}

inline TrainResult train_denoiser(const NetConfig& ncfg, const ToyDistribution& dist,
                                  const NoiseSchedule& sched, const TrainConfig& tcfg) {
    ncfg.validate();
    dist.validate();
    sched.validate();
    if (ncfg.input_dim != dist.dim())
        throw std::invalid_argument("train_denoiser: net input_dim must match data dim");
    if (tcfg.steps == 0 || tcfg.batch_size == 0)
        throw std::invalid_argument("train_denoiser: steps and batch_size must be > 0");

    Rng rng(tcfg.seed);
    TrainResult result;
    result.params = init_parameters(ncfg, rng);
    Parameters& params = result.params;

    std::vector<double*> slots = parameter_slots(params);
    AdamOptimizer adam(tcfg.adam, slots.size());
    std::vector<double> grads;
    grads.reserve(slots.size());

    const std::size_t n = tcfg.batch_size, d = ncfg.input_dim;
    for (std::size_t step = 0; step < tcfg.steps; ++step) {
        Tensor x0 = dist.sample(rng, n);
        std::vector<double> times(n);
        for (double& t : times) t = rng.uniform(sched.t_min, sched.final_time);
        Tensor noise({n, d});
        for (double& v : noise.data) v = rng.normal();

        Tensor xt({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            const double a = sched.alpha(times[i]), s = sched.sigma(times[i]);
            for (std::size_t j = 0; j < d; ++j)
                xt.at(i, j) = a * x0.at(i, j) + s * noise.at(i, j);
        }

        ForwardCache cache;
        Tensor pred = forward_cached(params, nullptr, xt, times, &cache);

        double loss = 0.0;
        Tensor upstream({n, d});
        const double inv = 1.0 / static_cast<double>(n * d);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double diff = pred.data[i] - noise.data[i];
            loss += diff * diff * inv;
            upstream.data[i] = 2.0 * diff * inv;
        }
        if (!std::isfinite(loss))
            throw DivergenceError("train_denoiser: non-finite loss", step);

        GradientBundle g = backward_from_cache(params, nullptr, cache, upstream);
        collect_gradient(g, grads);
        adam.step(slots, grads);
        result.loss_history.push_back(loss);
    }

    const std::size_t window = std::min<std::size_t>(100, result.loss_history.size());
    double acc = 0.0;
    for (std::size_t i = result.loss_history.size() - window; i < result.loss_history.size(); ++i)
        acc += result.loss_history[i];
    result.final_loss = acc / static_cast<double>(window);
    return result;
}

} // namespace saq
