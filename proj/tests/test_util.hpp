#pragma once

#include "nsf/core.hpp"

#include <Eigen/Geometry>

#include <random>

namespace nsf::testing {

inline Mat3 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q.toRotationMatrix();
}

// F = R1 diag(s) R2 with singular values in [lo, hi].
inline Mat3 random_deformation(std::mt19937_64& rng, double lo = 0.6, double hi = 1.5) {
    std::uniform_real_distribution<double> u(lo, hi);
    const Vec3 s(u(rng), u(rng), u(rng));
    return random_rotation(rng) * s.asDiagonal() * random_rotation(rng);
}

inline double max_abs(const Mat3& m) { return m.cwiseAbs().maxCoeff(); }

inline Mat3 deviator(const Mat3& m) { return m - (m.trace() / 3.0) * Mat3::Identity(); }

}  // namespace nsf::testing
