#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index = std::size_t;

// Error hierarchy. Each subsystem throws the most specific type; callers that
// only care about failure catch nsf::Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class InvertedElementError : public NumericError {
public:
    using NumericError::NumericError;
};

class LogDomainError : public NumericError {
public:
    using NumericError::NumericError;
};

class OutOfDomainError : public Error {
public:
    OutOfDomainError(const std::string& what, Index particle)
        : Error(what + " (particle " + std::to_string(particle) + ")"), particle_(particle) {}
    Index particle() const noexcept { return particle_; }

private:
    Index particle_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ArchitectureError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

class ModelCorruptionError : public NumericError {
public:
    using NumericError::NumericError;
};

class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class DependencyError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Mat3& m) { return m.allFinite(); }

// Symmetric tensors travel as 6 components in Voigt order (xx, yy, zz, yz, xz, xy).
inline Eigen::Matrix<double, 6, 1> to_voigt(const Mat3& s) {
    Eigen::Matrix<double, 6, 1> v;
    v << s(0, 0), s(1, 1), s(2, 2), s(1, 2), s(0, 2), s(0, 1);
    return v;
}

template <class Derived>
inline Mat3 from_voigt(const Eigen::MatrixBase<Derived>& v) {
    Mat3 s;
    s << v(0), v(5), v(4),
         v(5), v(1), v(3),
         v(4), v(3), v(2);
    return s;
}

}  // namespace nsf
