#pragma once

// Sample-quality metrics for the experiment harness: the energy-distance
// two-sample statistic (the desk-scale stand-in for FID-family metrics) and
// per-step trajectory mean-squared deviation. The endpoint MSE shares
// mean_squared_deviation with the error lab so cross-module comparisons agree
// to the last bit.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "saq/samplers.hpp"
#include "saq/tensor.hpp"

namespace saq {

// V-statistic form over all ordered pairs, self-pairs included:
//   E = 2 E||x - y|| - E||x - x'|| - E||y - y'||.
// Non-negative, zero iff the two empirical distributions coincide.
inline double energy_distance(const Tensor& x, const Tensor& y) {
    if (x.shape.size() != 2 || y.shape.size() != 2)
        throw std::invalid_argument("energy_distance: rank-2 sample sets required");
    if (x.rows() == 0 || y.rows() == 0)
        throw std::invalid_argument("energy_distance: empty sample set");
    if (x.cols() != y.cols())
        throw std::invalid_argument("energy_distance: dimension mismatch");
    const std::size_t d = x.cols();
    auto pair_dist = [d](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double diff = a.at(i, k) - b.at(j, k);
            s += diff * diff;
        }
        return std::sqrt(s);
    };
    auto mean_all_pairs = [&](const Tensor& a, const Tensor& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < b.rows(); ++j) s += pair_dist(a, i, b, j);
        return s / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
    };
    return 2.0 * mean_all_pairs(x, y) - mean_all_pairs(x, x) - mean_all_pairs(y, y);
}

struct TrajectoryMse {
    std::vector<double> per_step;  // mean over chains and coordinates of (a - b)^2
    double endpoint = 0.0;         // last per_step entry
};

// Per-step mean-squared deviation between two trajectories on the same grid.
// Convention: each value is the mean over all chain/coordinate elements, so
// two runs offset by a constant c at every state give c^2 at every step.
inline TrajectoryMse trajectory_mse(const Trajectory& fp, const Trajectory& q) {
    if (fp.times.size() != q.times.size())
        throw std::invalid_argument("trajectory_mse: grids differ in length");
    for (std::size_t i = 0; i < fp.times.size(); ++i)
        if (fp.times[i] != q.times[i])
            throw std::invalid_argument("trajectory_mse: grids differ");
    if (fp.chains != q.chains || fp.dim != q.dim)
        throw std::invalid_argument("trajectory_mse: shape mismatch");
    TrajectoryMse out;
    for (std::size_t i = 0; i < fp.states.size(); ++i)
        out.per_step.push_back(mean_squared_deviation(fp.states[i], q.states[i]));
    if (!out.per_step.empty()) out.endpoint = out.per_step.back();
    return out;
}

}  // namespace saq
