#pragma once

// Finite-strain hyperelastic stress evaluation and elastoplastic return maps.
//
// All functions are pure and operate on value types. Stresses are Kirchhoff
// stresses tau = P F^T. Log-strain models work in the principal frame of the
// rotation-safe SVD F = U diag(sigma) V^T.

#include "nsf/core.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace nsf::constitutive {

inline constexpr int kDim = 3;

struct ElasticParams {
    double youngs_modulus = 0.0;
    double poisson_ratio = 0.0;
    double shear_modulus = 0.0;
    double lame_modulus = 0.0;
    double bulk_modulus = 0.0;
};

inline ElasticParams lame_from_E_nu(double E, double nu) {
    if (!(E > 0.0) || !std::isfinite(E)) throw ParameterError("Young's modulus must be positive");
    if (!(nu >= 0.0 && nu < 0.5)) throw ParameterError("Poisson ratio must lie in [0, 0.5)");
    ElasticParams p;
    p.youngs_modulus = E;
    p.poisson_ratio = nu;
    p.shear_modulus = E / (2.0 * (1.0 + nu));
    p.lame_modulus = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    p.bulk_modulus = E / (3.0 * (1.0 - 2.0 * nu));
    return p;
}

enum class PlasticModel { none, drucker_prager, von_mises, herschel_bulkley };

struct PlasticParams {
    PlasticModel model = PlasticModel::none;
    double friction_angle = 0.0;  // radians
    double yield_stress = 0.0;    // tau_Y (von Mises) or sigma_Y (Herschel-Bulkley)
    double hardening = 0.0;       // xi
    double softening = 0.0;       // theta
    double viscosity = 0.0;       // eta
};

inline void validate(const PlasticParams& pp) {
    if (pp.model == PlasticModel::drucker_prager &&
        !(pp.friction_angle > 0.0 && pp.friction_angle < std::numbers::pi / 2))
        throw ParameterError("friction angle must lie in (0, pi/2)");
    if (!(pp.yield_stress >= 0.0)) throw ParameterError("yield stress must be non-negative");
    if (!(pp.viscosity >= 0.0)) throw ParameterError("viscosity must be non-negative");
}

struct SvdTriple {
    Mat3 U;
    Vec3 sigma;  // descending magnitude; last entry carries the reflection sign
    Mat3 V;

    Mat3 reconstruct() const { return U * sigma.asDiagonal() * V.transpose(); }
};

// Rotation-safe SVD: det(U) = det(V) = +1, reflections folded into sigma(2).
inline SvdTriple svd3(const Mat3& M) {
    if (!M.allFinite()) throw NumericError("svd3: non-finite matrix entry");
    Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    SvdTriple out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
    if (out.U.determinant() < 0.0) {
        out.U.col(2) *= -1.0;
        out.sigma(2) *= -1.0;
    }
    if (out.V.determinant() < 0.0) {
        out.V.col(2) *= -1.0;
        out.sigma(2) *= -1.0;
    }
    return out;
}

namespace detail {

inline Mat3 fixed_corotated(const Mat3& F, const SvdTriple& svd, double mu, double lambda) {
    const Mat3 R = svd.U * svd.V.transpose();
    const double J = svd.sigma.prod();
    Mat3 tau = 2.0 * mu * (F - R) * F.transpose();
    tau.diagonal().array() += lambda * (J - 1.0) * J;
    return 0.5 * (tau + tau.transpose());
}

// Kirchhoff stress of the Hencky (log-strain StVK) model from principal log strains.
inline Mat3 hencky(const Mat3& U, const Vec3& eps, double mu, double lambda) {
    const Vec3 principal = 2.0 * mu * eps + Vec3::Constant(lambda * eps.sum());
    const Mat3 tau = U * principal.asDiagonal() * U.transpose();
    return 0.5 * (tau + tau.transpose());
}

inline Vec3 deviatoric(const Vec3& v) { return v - Vec3::Constant(v.sum() / kDim); }

inline double drucker_prager_alpha(double friction_angle) {
    const double s = std::sin(friction_angle);
    return std::sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s);
}

enum class DruckerPragerCase { expansion, elastic, projected };

struct PrincipalReturn {
    Vec3 eps;
    double plastic_multiplier = 0.0;  // delta gamma actually applied (0 when elastic)
    bool changed = false;
};

inline DruckerPragerCase drucker_prager_principal(Vec3& eps, double mu, double lambda, double alpha) {
    const double tr = eps.sum();
    if (tr > 0.0) {
        eps.setZero();
        return DruckerPragerCase::expansion;
    }
    const Vec3 dev = deviatoric(eps);
    const double dev_norm = dev.norm();
    const double dgamma = dev_norm + alpha * (kDim * lambda + 2.0 * mu) * tr / (2.0 * mu);
    if (dgamma <= 0.0 || dev_norm == 0.0) return DruckerPragerCase::elastic;
    eps -= dgamma * dev / dev_norm;
    return DruckerPragerCase::projected;
}

inline PrincipalReturn von_mises_principal(const Vec3& eps, double mu, double yield_stress) {
    PrincipalReturn r{eps};
    const Vec3 dev = deviatoric(eps);
    const double dev_norm = dev.norm();
    const double dgamma = dev_norm - yield_stress / (2.0 * mu);
    if (dgamma <= 0.0 || dev_norm == 0.0) return r;
    r.eps = eps - dgamma * dev / dev_norm;
    r.plastic_multiplier = dgamma;
    r.changed = true;
    return r;
}

// Solves prod(d_i + c) = 1 for the unique c with all factors positive.
inline double unit_determinant_shift(const Vec3& d, double c0) {
    double c = std::max(c0, -d.minCoeff() + 1e-12);
    for (int it = 0; it < 100; ++it) {
        const Vec3 f = d + Vec3::Constant(c);
        const double value = f.prod() - 1.0;
        const double slope = f(1) * f(2) + f(0) * f(2) + f(0) * f(1);
        const double next = c - value / slope;
        if (std::abs(next - c) <= 1e-16 * std::abs(c)) return next;
        c = next;
    }
    return c;
}

}  // namespace detail

inline void require_positive_det(const Mat3& F, const char* who) {
    if (!F.allFinite()) throw NumericError(std::string(who) + ": non-finite deformation gradient");
    if (!(F.determinant() > 0.0))
        throw InvertedElementError(std::string(who) + ": det(F) <= 0 (inverted element)");
}

inline Mat3 kirchhoff_fixed_corotated(const Mat3& F_E, const ElasticParams& p) {
    require_positive_det(F_E, "kirchhoff_fixed_corotated");
    return detail::fixed_corotated(F_E, svd3(F_E), p.shear_modulus, p.lame_modulus);
}

inline Mat3 kirchhoff_stvk(const Mat3& F_E, const ElasticParams& p) {
    const SvdTriple svd = svd3(F_E);
    if (!(svd.sigma.minCoeff() > 0.0)) throw LogDomainError("kirchhoff_stvk: non-positive singular value");
    return detail::hencky(svd.U, svd.sigma.array().log().matrix(), p.shear_modulus, p.lame_modulus);
}

inline Mat3 return_map_drucker_prager(const Mat3& F_trial, const ElasticParams& ep, const PlasticParams& pp) {
    require_positive_det(F_trial, "return_map_drucker_prager");
    const SvdTriple svd = svd3(F_trial);
    Vec3 eps = svd.sigma.array().log().matrix();
    const auto which = detail::drucker_prager_principal(eps, ep.shear_modulus, ep.lame_modulus,
                                                        detail::drucker_prager_alpha(pp.friction_angle));
    if (which == detail::DruckerPragerCase::elastic) return F_trial;
    return svd.U * eps.array().exp().matrix().asDiagonal() * svd.V.transpose();
}

struct VonMisesResult {
    Mat3 F_E;
    double plastic_multiplier = 0.0;
};

inline VonMisesResult return_map_von_mises(const Mat3& F_trial, const ElasticParams& ep, const PlasticParams& pp) {
    require_positive_det(F_trial, "return_map_von_mises");
    if (!(ep.shear_modulus > 0.0)) return {F_trial, 0.0};
    const SvdTriple svd = svd3(F_trial);
    const auto r = detail::von_mises_principal(svd.sigma.array().log().matrix(), ep.shear_modulus, pp.yield_stress);
    if (!r.changed) return {F_trial, 0.0};
    return {svd.U * r.eps.array().exp().matrix().asDiagonal() * svd.V.transpose(), r.plastic_multiplier};
}

struct YieldUpdate {
    double yield_stress = 0.0;
    bool damaged = false;
};

// Hardening grows the yield stress with plastic flow; softening shrinks it by
// the norm of the strain removed by the projection. Reaching zero under
// softening marks the particle damaged: the caller zeroes its Lame parameters.
inline YieldUpdate update_yield(double yield_stress, double plastic_multiplier, double excess_strain_norm,
                                const ElasticParams& ep, const PlasticParams& pp) {
    YieldUpdate out{yield_stress, false};
    if (pp.hardening != 0.0) out.yield_stress += 2.0 * ep.shear_modulus * pp.hardening * plastic_multiplier;
    if (pp.softening != 0.0) {
        out.yield_stress -= pp.softening * excess_strain_norm;
        if (out.yield_stress <= 0.0) {
            out.yield_stress = 0.0;
            out.damaged = true;
        }
    }
    return out;
}

struct HerschelBulkleyResult {
    Mat3 F_E;
    Mat3 tau;
};

namespace detail {

inline Mat3 herschel_bulkley_stress(const Mat3& U, double J, const Vec3& bbar_dev, double mu, double kappa) {
    Mat3 tau = mu * (U * bbar_dev.asDiagonal() * U.transpose());
    tau = 0.5 * (tau + tau.transpose());
    tau.diagonal().array() += 0.5 * kappa * (J * J - 1.0);
    return tau;
}

// Viscoplastic relaxation of the deviatoric part of the isochoric left
// Cauchy-Green tensor. The projected state keeps J and det(bbar) = 1.
inline HerschelBulkleyResult herschel_bulkley(const Mat3& F_trial, const SvdTriple& svd, double mu, double kappa,
                                              double yield_stress, double viscosity, double dt) {
    const double J = svd.sigma.prod();
    const double jscale = std::cbrt(J * J);
    const Vec3 bbar = svd.sigma.array().square().matrix() / jscale;
    const Vec3 dev = deviatoric(bbar);
    const double s_trial = mu * dev.norm();
    const double threshold = std::sqrt(2.0 / 3.0) * yield_stress;
    if (s_trial <= threshold) return {F_trial, herschel_bulkley_stress(svd.U, J, dev, mu, kappa)};

    const double relax = 1.0 + viscosity / (2.0 * mu * dt);
    const double s = s_trial - (s_trial - threshold) / relax;
    const Vec3 dev_new = dev * (s / s_trial);
    const double shift = unit_determinant_shift(dev_new, bbar.sum() / kDim);
    const Vec3 sigma_new = ((dev_new.array() + shift) * jscale).sqrt().matrix();
    return {svd.U * sigma_new.asDiagonal() * svd.V.transpose(), herschel_bulkley_stress(svd.U, J, dev_new, mu, kappa)};
}

}  // namespace detail

inline HerschelBulkleyResult return_map_herschel_bulkley(const Mat3& F_trial, const ElasticParams& ep,
                                                         const PlasticParams& pp, double dt) {
    require_positive_det(F_trial, "return_map_herschel_bulkley");
    if (!(dt > 0.0)) throw ParameterError("return_map_herschel_bulkley: dt must be positive");
    return detail::herschel_bulkley(F_trial, svd3(F_trial), ep.shear_modulus, ep.bulk_modulus, pp.yield_stress,
                                    pp.viscosity, dt);
}

// ---------------------------------------------------------------------------
// Per-particle update used by the simulator.

enum class ElasticModel { fixed_corotated, stvk_hencky, neo_hookean_volumetric };

struct Material {
    ElasticModel elastic = ElasticModel::fixed_corotated;
    PlasticParams plastic;
    double poisson_ratio = 0.3;
};

inline constexpr double kMinSingularValue = 1e-4;

struct ParticleUpdate {
    Mat3 F_E;
    Mat3 tau;
    double yield_stress = 0.0;
    bool damaged = false;
    bool inverted = false;
};

// Maps F_trial to the new elastic deformation gradient and Kirchhoff stress.
// mu and lambda are the particle's current Lame parameters (zero when damaged).
// Log-strain models clamp singular values to kMinSingularValue; fixed
// corotated proceeds through inversion.
inline ParticleUpdate update_particle(const Material& mat, double mu, double lambda, const Mat3& F_trial,
                                      double yield_stress, bool damaged, double dt) {
    ParticleUpdate out{F_trial, Mat3::Zero(), yield_stress, damaged, false};
    SvdTriple svd = svd3(F_trial);
    out.inverted = !(svd.sigma(2) > 0.0);
    if (damaged) return out;

    bool clamped = false;
    const auto clamp_sigma = [&] {
        for (int k = 0; k < kDim; ++k) {
            if (!(svd.sigma(k) >= kMinSingularValue)) {
                svd.sigma(k) = kMinSingularValue;
                clamped = true;
            }
        }
    };

    switch (mat.plastic.model) {
    case PlasticModel::none:
        break;
    case PlasticModel::drucker_prager: {
        clamp_sigma();
        Vec3 eps = svd.sigma.array().log().matrix();
        const auto which = detail::drucker_prager_principal(eps, mu, lambda,
                                                            detail::drucker_prager_alpha(mat.plastic.friction_angle));
        if (which != detail::DruckerPragerCase::elastic || clamped) {
            svd.sigma = eps.array().exp().matrix();
            out.F_E = svd.reconstruct();
        }
        break;
    }
    case PlasticModel::von_mises: {
        clamp_sigma();
        const Vec3 eps = svd.sigma.array().log().matrix();
        const auto r = mu > 0.0 ? detail::von_mises_principal(eps, mu, yield_stress) : detail::PrincipalReturn{eps};
        if (r.changed || clamped) {
            svd.sigma = r.eps.array().exp().matrix();
            out.F_E = svd.reconstruct();
        }
        ElasticParams ep;
        ep.shear_modulus = mu;
        ep.lame_modulus = lambda;
        const auto y = update_yield(yield_stress, r.plastic_multiplier, r.plastic_multiplier, ep, mat.plastic);
        out.yield_stress = y.yield_stress;
        out.damaged = y.damaged;
        break;
    }
    case PlasticModel::herschel_bulkley: {
        clamp_sigma();
        if (clamped) out.F_E = svd.reconstruct();
        const double kappa = lambda + 2.0 * mu / 3.0;
        const auto hb = detail::herschel_bulkley(out.F_E, svd, mu, kappa, mat.plastic.yield_stress,
                                                 mat.plastic.viscosity, dt);
        out.F_E = hb.F_E;
        out.tau = hb.tau;
        return out;
    }
    }

    if (out.damaged) {
        out.tau.setZero();
        return out;
    }
    switch (mat.elastic) {
    case ElasticModel::fixed_corotated:
        out.tau = detail::fixed_corotated(out.F_E, mat.plastic.model == PlasticModel::none ? svd : svd3(out.F_E), mu,
                                          lambda);
        break;
    case ElasticModel::stvk_hencky: {
        if (mat.plastic.model == PlasticModel::none) clamp_sigma();
        out.tau = detail::hencky(svd.U, svd.sigma.array().log().matrix(), mu, lambda);
        break;
    }
    case ElasticModel::neo_hookean_volumetric: {
        const double kappa = lambda + 2.0 * mu / 3.0;
        const SvdTriple s = svd3(out.F_E);
        const double J = s.sigma.prod();
        const Vec3 bbar = s.sigma.array().square().matrix() / std::cbrt(J * J);
        out.tau = detail::herschel_bulkley_stress(s.U, J, detail::deviatoric(bbar), mu, kappa);
        break;
    }
    }
    return out;
}

}  // namespace nsf::constitutive
