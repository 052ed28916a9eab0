#pragma once

// Toy data distributions: isotropic Gaussian mixtures in low dimension with a
// closed-form posterior noise predictor. For component k with weight w_k,
// mean mu_k, stddev c_k, the noised marginal at time t is a mixture of
// N(alpha*mu_k, (alpha^2 c_k^2 + sigma^2) I); the ideal noise prediction is
//
//   eps*(x, t) = sigma_t * sum_k r_k(x) * (x - alpha*mu_k) / v_k,
//   v_k = alpha^2 c_k^2 + sigma^2,
//
// with softmax responsibilities r_k computed via log-sum-exp. This is the
// exact conditional expectation E[eps | x_t = x] (equivalently -sigma * score).

#include "saq/rng.hpp"
#include "saq/schedule.hpp"
#include "saq/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace saq {

struct ToyDistribution {
    std::vector<double> weights;             // sums to 1
    std::vector<std::vector<double>> means;  // k rows of length dim
    std::vector<double> stddevs;             // per-component isotropic stddev

    std::size_t components() const { return weights.size(); }
    std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }

    void validate() const {
        if (weights.empty() || means.size() != weights.size() ||
            stddevs.size() != weights.size())
            throw std::invalid_argument("ToyDistribution: inconsistent component counts");
        const std::size_t d = dim();
        if (d == 0) throw std::invalid_argument("ToyDistribution: zero-dimensional means");
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw std::invalid_argument("ToyDistribution: negative weight");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw std::invalid_argument("ToyDistribution: weights must sum to 1");
        for (const auto& m : means)
            if (m.size() != d)
                throw std::invalid_argument("ToyDistribution: ragged means");
        for (double c : stddevs)
            if (!(c > 0.0))
                throw std::invalid_argument("ToyDistribution: stddevs must be positive");
    }

    // K equal-weight components on a circle of the given radius.
    static ToyDistribution ring(std::size_t k = 8, double radius = 4.0, double stddev = 0.3) {
        ToyDistribution d;
        d.weights.assign(k, 1.0 / static_cast<double>(k));
        d.stddevs.assign(k, stddev);
        d.means.resize(k);
        for (std::size_t i = 0; i < k; ++i) {
            const double ang = 2.0 * 3.14159265358979323846 * static_cast<double>(i) /
                               static_cast<double>(k);
            d.means[i] = {radius * std::cos(ang), radius * std::sin(ang)};
        }
        d.validate();
        return d;
    }

    static ToyDistribution single_gaussian(std::vector<double> mean, double stddev) {
        ToyDistribution d;
        d.weights = {1.0};
        d.means = {std::move(mean)};
        d.stddevs = {stddev};
        d.validate();
        return d;
    }

    // n draws, row-major [n, dim]. Per row: one categorical draw, then dim
    // normals, in that order — the consumption pattern is part of the
    // reproducibility contract.
    Tensor sample(Rng& rng, std::size_t n) const {
        validate();
        const std::size_t d = dim();
        std::vector<double> cumulative(components());
        double acc = 0.0;
        for (std::size_t k = 0; k < components(); ++k) {
            acc += weights[k];
            cumulative[k] = acc;
        }
        Tensor out({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = rng.categorical(cumulative.data(), components());
            for (std::size_t j = 0; j < d; ++j)
                out.at(i, j) = means[k][j] + stddevs[k] * rng.normal();
        }
        return out;
    }
};

// Exact noise prediction for a batch x of shape [n, dim] at shared time t.
inline Tensor analytic_epsilon(const ToyDistribution& dist, const NoiseSchedule& sched,
                               const Tensor& x, double t) {
    dist.validate();
    const std::size_t d = dist.dim();
    if (x.cols() != d)
        throw std::invalid_argument("analytic_epsilon: x dim mismatch");
    if (!(t > 0.0) || t > sched.final_time)
        throw std::invalid_argument("analytic_epsilon: t must lie in (0, T]");
    const double a = sched.alpha(t);
    const double s2 = sched.sigma2(t);
    const double s = std::sqrt(s2);
    const std::size_t kc = dist.components();

    std::vector<double> v(kc), logw(kc);
    for (std::size_t k = 0; k < kc; ++k) {
        v[k] = a * a * dist.stddevs[k] * dist.stddevs[k] + s2;
        logw[k] = std::log(dist.weights[k] > 0.0 ? dist.weights[k] : 1e-300);
    }

    Tensor eps(x.shape);
    std::vector<double> logp(kc);
    const std::size_t n = x.rows();
    for (std::size_t i = 0; i < n; ++i) {
        double maxlog = -1e300;
        for (std::size_t k = 0; k < kc; ++k) {
            double q = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = x.at(i, j) - a * dist.means[k][j];
                q += diff * diff;
            }
            logp[k] = logw[k] - 0.5 * static_cast<double>(d) * std::log(v[k]) -
                      0.5 * q / v[k];
            maxlog = std::max(maxlog, logp[k]);
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < kc; ++k) {
            logp[k] = std::exp(logp[k] - maxlog);
            norm += logp[k];
        }
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < kc; ++k)
                acc += (logp[k] / norm) * (x.at(i, j) - a * dist.means[k][j]) / v[k];
            eps.at(i, j) = s * acc;
        }
    }
    return eps;
}

} // namespace saq
