#pragma once

// Variance-preserving noise schedule with a linear beta(t):
//
//   beta(t)  = beta_min + (beta_max - beta_min) * t / T
//   B(t)     = integral_0^t beta = beta_min*t + (beta_max - beta_min)*t^2/(2T)
//   alpha(t) = exp(-B(t)/2)           sigma(t) = sqrt(1 - alpha^2)
//   lambda(t) = log(alpha/sigma)      (strictly decreasing in t)
//
// sigma^2 is computed as -expm1(-B) so tiny times stay accurate, and the
// inverse t(lambda) is a fixed-iteration bisection on [t_min, T] so it is
// bit-deterministic.

#include "saq/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace saq {

struct NoiseSchedule {
    double beta_min = 0.1;
    double beta_max = 20.0;
    double final_time = 1.0; // T
    double t_min = 1e-4;     // floor: grids never go below this

    void validate() const {
        if (!(beta_min > 0.0) || !(beta_max > beta_min))
            throw std::invalid_argument("NoiseSchedule: need 0 < beta_min < beta_max");
        if (!(final_time > 0.0) || !(t_min > 0.0) || !(t_min < final_time))
            throw std::invalid_argument("NoiseSchedule: need 0 < t_min < T");
    }

    double beta(double t) const { return beta_min + (beta_max - beta_min) * t / final_time; }

    double beta_integral(double t) const {
        return beta_min * t + 0.5 * (beta_max - beta_min) * t * t / final_time;
    }

    double alpha(double t) const { return std::exp(-0.5 * beta_integral(t)); }

    double sigma2(double t) const { return -std::expm1(-beta_integral(t)); }

    double sigma(double t) const { return std::sqrt(sigma2(t)); }

    double lambda_of_t(double t) const {
        if (!(t > 0.0) || t > final_time)
            throw std::invalid_argument("lambda_of_t: t must lie in (0, T], got " +
                                        std::to_string(t));
        return -0.5 * beta_integral(t) - 0.5 * std::log(sigma2(t));
    }

    double lambda_min() const { return lambda_of_t(final_time); }
    double lambda_max() const { return lambda_of_t(t_min); }

    // Inverse of lambda_of_t on [t_min, T]. Fixed 80-iteration bisection:
    // deterministic, and 80 halvings of [t_min, T] pin t far below double ulp.
    double t_of_lambda(double lam) const {
        const double lo_lam = lambda_min();
        const double hi_lam = lambda_max();
        const double slack = 1e-9 * (1.0 + std::abs(hi_lam) + std::abs(lo_lam));
        if (lam < lo_lam - slack || lam > hi_lam + slack)
            throw std::invalid_argument("t_of_lambda: lambda outside [lambda(T), lambda(t_min)]");
        if (lam <= lo_lam) return final_time;
        if (lam >= hi_lam) return t_min;
        double lo = t_min, hi = final_time; // lambda(lo) > lam > lambda(hi)
        for (int i = 0; i < 80; ++i) {
            const double mid = 0.5 * (lo + hi);
            if (lambda_of_t(mid) > lam)
                lo = mid;
            else
                hi = mid;
        }
        return 0.5 * (lo + hi);
    }
};

// x_t = alpha(t) * x0 + sigma(t) * noise, rowwise over a batch.
inline Tensor forward_sample(const NoiseSchedule& sched, const Tensor& x0, double t,
                             const Tensor& noise) {
    if (!x0.same_shape(noise))
        throw std::invalid_argument("forward_sample: x0/noise shape mismatch");
    const double a = sched.alpha(t);
    const double s = sched.sigma(t);
    Tensor out(x0.shape);
    for (std::size_t i = 0; i < x0.size(); ++i)
        out.data[i] = a * x0.data[i] + s * noise.data[i];
    return out;
}

} // namespace saq
