#pragma once

// Explicit material point method with quadratic B-spline transfers.
//
// One step is P2G -> grid forces -> grid update (with boundary projection) ->
// G2P. Every phase accepts an optional particle subset (and node subset) so the
// reduced runtime can advance only the particles it needs; restricted to a
// subset that is closed under grid adjacency the arithmetic is identical to the
// full-order step.

#include "nsf/constitutive.hpp"
#include "nsf/core.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace nsf::mpm {

using constitutive::Material;

struct ParticleSystem {
    std::vector<Vec3> X;  // reference positions
    std::vector<Vec3> x;
    std::vector<Vec3> v;
    std::vector<double> mass;
    std::vector<double> volume0;
    std::vector<Mat3> F_E;
    std::vector<Mat3> C;
    std::vector<Mat3> tau;
    std::vector<double> yield_stress;
    std::vector<std::uint8_t> damaged;
    std::vector<double> mu;  // per-particle Lame parameters
    std::vector<double> lambda;
    double time = 0.0;

    Index size() const noexcept { return x.size(); }

    void add(const Vec3& pos, double m, double vol, double shear, double lame, double yield = 0.0) {
        X.push_back(pos);
        x.push_back(pos);
        v.push_back(Vec3::Zero());
        mass.push_back(m);
        volume0.push_back(vol);
        F_E.push_back(Mat3::Identity());
        C.push_back(Mat3::Zero());
        tau.push_back(Mat3::Zero());
        yield_stress.push_back(yield);
        damaged.push_back(0);
        mu.push_back(shear);
        lambda.push_back(lame);
    }

    double total_mass() const {
        double m = 0.0;
        for (double mp : mass) m += mp;
        return m;
    }
};

enum class BoundaryKind { sticky, slip };

// Solid half-space {y : (y - point(t)) . normal < 0}; the normal points into
// the free region. The plane translates with `velocity` until `active_until`,
// after which the boundary is removed.
struct HalfSpaceBoundary {
    BoundaryKind kind = BoundaryKind::sticky;
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitY();
    Vec3 velocity = Vec3::Zero();
    double active_until = std::numeric_limits<double>::infinity();

    Vec3 point_at(double t) const { return point + velocity * t; }
};

// Nodes inside the (translating) box get the prescribed velocity.
struct DirichletBox {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
    double active_until = std::numeric_limits<double>::infinity();
};

struct Grid {
    Vec3 origin = Vec3::Zero();
    double dx = 1.0;
    std::array<int, 3> dims{0, 0, 0};
    double mass_epsilon = 0.0;
    std::vector<HalfSpaceBoundary> boundaries;
    std::vector<DirichletBox> dirichlet;

    std::vector<double> mass;
    std::vector<Vec3> momentum;
    std::vector<Vec3> velocity;
    std::vector<Vec3> force;

    Grid() = default;
    Grid(const Vec3& o, double spacing, std::array<int, 3> d) : origin(o), dx(spacing), dims(d) {
        if (!(spacing > 0.0)) throw ParameterError("grid spacing must be positive");
        if (d[0] < 4 || d[1] < 4 || d[2] < 4) throw ParameterError("grid needs at least 4 nodes per axis");
        allocate();
    }

    void allocate() {
        const Index n = node_count();
        mass.assign(n, 0.0);
        momentum.assign(n, Vec3::Zero());
        velocity.assign(n, Vec3::Zero());
        force.assign(n, Vec3::Zero());
    }

    Index node_count() const { return Index(dims[0]) * dims[1] * dims[2]; }
    Index index(int i, int j, int k) const { return (Index(i) * dims[1] + j) * dims[2] + k; }
    std::array<int, 3> coords(Index n) const {
        const int k = int(n % dims[2]);
        const int j = int((n / dims[2]) % dims[1]);
        const int i = int(n / (Index(dims[1]) * dims[2]));
        return {i, j, k};
    }
    Vec3 node_position(Index n) const {
        const auto c = coords(n);
        return origin + dx * Vec3(c[0], c[1], c[2]);
    }
    Vec3 upper() const { return origin + dx * Vec3(dims[0] - 1, dims[1] - 1, dims[2] - 1); }

    // Nodes whose mass is at or below this threshold are inactive.
    void set_mass_epsilon(double total_mass) { mass_epsilon = 1e-12 * total_mass / double(node_count()); }
};

enum class TransferScheme { pic, apic };

struct SimConfig {
    double dt = 1e-3;
    Vec3 gravity = Vec3::Zero();
    TransferScheme transfer = TransferScheme::apic;
    Material material;
};

// APIC inertia-tensor factor for quadratic splines: C = (4/dx^2) sum w v (x_i - x_p)^T.
inline constexpr int kSplineDegree = 2;
inline double affine_scale(double dx) { return 12.0 / (dx * dx * (kSplineDegree + 1)); }

// ---------------------------------------------------------------------------
// Quadratic B-spline stencil.

struct StencilEntry {
    Index node;
    double weight;
    Vec3 grad;
    Vec3 position;  // node position
};

struct Stencil {
    std::array<int, 3> base{};
    double w[3][3]{};
    double dw[3][3]{};

    template <class F>
    void for_each(const Grid& g, F&& f) const {
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
                const double wab = w[0][a] * w[1][b];
                const Index row = g.index(base[0] + a, base[1] + b, base[2]);
                for (int c = 0; c < 3; ++c) {
                    const double weight = wab * w[2][c];
                    const Vec3 grad(dw[0][a] * w[1][b] * w[2][c], w[0][a] * dw[1][b] * w[2][c], wab * dw[2][c]);
                    const Vec3 pos = g.origin + g.dx * Vec3(base[0] + a, base[1] + b, base[2] + c);
                    f(StencilEntry{row + Index(c), weight, grad, pos});
                }
            }
        }
    }

    template <class F>
    void for_each_node(const Grid& g, F&& f) const {
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                for (int c = 0; c < 3; ++c) f(g.index(base[0] + a, base[1] + b, base[2] + c));
    }

    std::array<StencilEntry, 27> entries(const Grid& g) const {
        std::array<StencilEntry, 27> out{};
        int n = 0;
        for_each(g, [&](const StencilEntry& e) { out[n++] = e; });
        return out;
    }
};

inline Stencil bspline_weights(const Vec3& x, const Grid& g, Index particle = 0) {
    Stencil s;
    const double inv_dx = 1.0 / g.dx;
    for (int d = 0; d < 3; ++d) {
        const double u = (x(d) - g.origin(d)) * inv_dx;
        if (!(u >= 1.5 && u <= double(g.dims[d] - 1) - 1.5))
            throw OutOfDomainError("particle outside the grid safe region", particle);
        const int base = int(std::floor(u - 0.5));
        const double f = u - base;
        s.base[d] = base;
        s.w[d][0] = 0.5 * (1.5 - f) * (1.5 - f);
        s.w[d][1] = 0.75 - (f - 1.0) * (f - 1.0);
        s.w[d][2] = 0.5 * (f - 0.5) * (f - 0.5);
        s.dw[d][0] = (f - 1.5) * inv_dx;
        s.dw[d][1] = -2.0 * (f - 1.0) * inv_dx;
        s.dw[d][2] = (f - 0.5) * inv_dx;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Particle / node subsets.

// Either every particle (empty `subset`, `all` = true) or the listed indices.
struct ParticleRange {
    std::span<const Index> subset;
    Index count = 0;
    bool all = true;

    static ParticleRange everything(Index n) { return {{}, n, true}; }
    static ParticleRange only(std::span<const Index> s) { return {s, s.size(), false}; }

    template <class F>
    void for_each(F&& f) const {
        if (all) {
            for (Index p = 0; p < count; ++p) f(p);
        } else {
            for (Index p : subset) f(p);
        }
    }
};

// Sorted, unique list of nodes in the stencils of the given particles.
inline std::vector<Index> touched_nodes(std::span<const Vec3> positions, const ParticleRange& particles,
                                        const Grid& g) {
    std::vector<Index> nodes;
    nodes.reserve(particles.count * 8);
    particles.for_each([&](Index p) {
        bspline_weights(positions[p], g, p).for_each_node(g, [&](Index n) { nodes.push_back(n); });
    });
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    return nodes;
}

template <class F>
inline void for_each_node(const Grid& g, std::span<const Index> nodes, bool all, F&& f) {
    if (all) {
        for (Index n = 0; n < g.node_count(); ++n) f(n);
    } else {
        for (Index n : nodes) f(n);
    }
}

inline void clear(Grid& g) {
    std::fill(g.mass.begin(), g.mass.end(), 0.0);
    std::fill(g.momentum.begin(), g.momentum.end(), Vec3::Zero());
    std::fill(g.velocity.begin(), g.velocity.end(), Vec3::Zero());
    std::fill(g.force.begin(), g.force.end(), Vec3::Zero());
}

inline void clear(Grid& g, std::span<const Index> nodes) {
    for (Index n : nodes) {
        g.mass[n] = 0.0;
        g.momentum[n].setZero();
        g.velocity[n].setZero();
        g.force[n].setZero();
    }
}

// ---------------------------------------------------------------------------
// Transfers.

inline void p2g_accumulate(const ParticleSystem& ps, Grid& g, const SimConfig& cfg, const ParticleRange& particles) {
    const bool apic = cfg.transfer == TransferScheme::apic;
    particles.for_each([&](Index p) {
        const Stencil s = bspline_weights(ps.x[p], g, p);
        const Vec3 xp = ps.x[p];
        const Vec3 vp = ps.v[p];
        const double mp = ps.mass[p];
        s.for_each(g, [&](const StencilEntry& e) {
            const double wm = e.weight * mp;
            g.mass[e.node] += wm;
            if (apic) {
                g.momentum[e.node] += wm * (vp + ps.C[p] * (e.position - xp));
            } else {
                g.momentum[e.node] += wm * vp;
            }
        });
    });
}

inline void normalize_velocities(Grid& g, std::span<const Index> nodes, bool all) {
    for_each_node(g, nodes, all, [&](Index n) {
        g.velocity[n] = g.mass[n] > g.mass_epsilon ? Vec3(g.momentum[n] / g.mass[n]) : Vec3::Zero();
    });
}

// Mass and momentum to the grid; node velocities on active nodes. The grid must be cleared.
inline void p2g(const ParticleSystem& ps, Grid& g, const SimConfig& cfg) {
    p2g_accumulate(ps, g, cfg, ParticleRange::everything(ps.size()));
    normalize_velocities(g, {}, true);
}

inline void p2g(const ParticleSystem& ps, Grid& g, const SimConfig& cfg, std::span<const Index> particles,
                std::span<const Index> nodes) {
    p2g_accumulate(ps, g, cfg, ParticleRange::only(particles));
    normalize_velocities(g, nodes, false);
}

// f_i = -sum_p tau_p grad w_ip V0_p
inline void grid_forces(const ParticleSystem& ps, Grid& g, const ParticleRange& particles) {
    particles.for_each([&](Index p) {
        const Stencil s = bspline_weights(ps.x[p], g, p);
        const Mat3 stress = ps.tau[p] * ps.volume0[p];
        s.for_each(g, [&](const StencilEntry& e) { g.force[e.node] -= stress * e.grad; });
    });
}

inline void grid_forces(const ParticleSystem& ps, Grid& g) {
    grid_forces(ps, g, ParticleRange::everything(ps.size()));
}

inline void apply_boundaries(const Grid& g, Index n, Vec3& vel, double time) {
    const Vec3 xi = g.node_position(n);
    for (const auto& b : g.boundaries) {
        if (time > b.active_until) continue;
        const double phi = (xi - b.point_at(time)).dot(b.normal);
        if (phi >= 0.0) continue;
        if (b.kind == BoundaryKind::sticky) {
            vel = b.velocity;
        } else {
            const Vec3 rel = vel - b.velocity;
            const double vn = rel.dot(b.normal);
            if (vn < 0.0) vel = b.velocity + rel - vn * b.normal;
        }
    }
    for (const auto& box : g.dirichlet) {
        if (time > box.active_until) continue;
        const Vec3 shift = box.velocity * time;
        const Vec3 lo = box.lo + shift;
        const Vec3 hi = box.hi + shift;
        if ((xi.array() >= lo.array()).all() && (xi.array() <= hi.array()).all()) vel = box.velocity;
    }
}

// v_i^{n+1} = v_i + dt f_i / m_i + dt g, then boundary projection.
inline void grid_update(Grid& g, const SimConfig& cfg, double time, std::span<const Index> nodes, bool all) {
    const bool has_bc = !g.boundaries.empty() || !g.dirichlet.empty();
    for_each_node(g, nodes, all, [&](Index n) {
        if (!(g.mass[n] > g.mass_epsilon)) return;
        Vec3 vel = g.velocity[n] + (cfg.dt / g.mass[n]) * g.force[n] + cfg.dt * cfg.gravity;
        if (has_bc) apply_boundaries(g, n, vel, time);
        g.velocity[n] = vel;
    });
}

inline void grid_update(Grid& g, const SimConfig& cfg, double time) { grid_update(g, cfg, time, {}, true); }

enum class G2PMode {
    full,       // velocity, position, affine, deformation gradient, return map, stress
    kinematic,  // velocity, position, affine only
};

struct StepStats {
    Index inverted = 0;
    double max_speed = 0.0;
    bool cfl_warning = false;
};

inline StepStats g2p(const Grid& g, ParticleSystem& ps, const SimConfig& cfg, const ParticleRange& particles,
                     G2PMode mode = G2PMode::full) {
    StepStats stats;
    const double cscale = affine_scale(g.dx);
    particles.for_each([&](Index p) {
        const Stencil s = bspline_weights(ps.x[p], g, p);
        const Vec3 xp = ps.x[p];
        Vec3 vp = Vec3::Zero();
        Mat3 B = Mat3::Zero();
        Mat3 gradv = Mat3::Zero();
        s.for_each(g, [&](const StencilEntry& e) {
            const Vec3& vi = g.velocity[e.node];
            vp += e.weight * vi;
            B += (e.weight * vi) * (e.position - xp).transpose();
            gradv += vi * e.grad.transpose();
        });
        ps.v[p] = vp;
        ps.x[p] = xp + cfg.dt * vp;
        ps.C[p] = cfg.transfer == TransferScheme::apic ? Mat3(cscale * B) : Mat3::Zero();
        stats.max_speed = std::max(stats.max_speed, vp.norm());
        if (mode == G2PMode::kinematic) return;

        const Mat3 F_trial = (Mat3::Identity() + cfg.dt * gradv) * ps.F_E[p];
        const auto up = constitutive::update_particle(cfg.material, ps.mu[p], ps.lambda[p], F_trial,
                                                      ps.yield_stress[p], ps.damaged[p] != 0, cfg.dt);
        ps.F_E[p] = up.F_E;
        ps.tau[p] = up.tau;
        ps.yield_stress[p] = up.yield_stress;
        if (up.damaged && !ps.damaged[p]) {
            ps.damaged[p] = 1;
            ps.mu[p] = 0.0;
            ps.lambda[p] = 0.0;
        }
        if (up.inverted) ++stats.inverted;
    });
    stats.cfl_warning = cfg.dt * stats.max_speed >= g.dx;
    return stats;
}

// Counts full-order and reduced MPM steps taken in this process.
inline std::atomic<std::uint64_t>& solver_step_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline StepStats step(ParticleSystem& ps, Grid& g, const SimConfig& cfg) {
    const auto all = ParticleRange::everything(ps.size());
    clear(g);
    p2g(ps, g, cfg);
    grid_forces(ps, g, all);
    grid_update(g, cfg, ps.time);
    const StepStats stats = g2p(g, ps, cfg, all);
    ps.time += cfg.dt;
    ++solver_step_counter();
    return stats;
}

// Evaluates tau from the current F_E without plastic projection (initial state).
inline void refresh_stress(ParticleSystem& ps, const SimConfig& cfg) {
    using constitutive::PlasticModel;
    auto mat = cfg.material;
    if (mat.plastic.model == PlasticModel::herschel_bulkley) {
        mat.plastic.yield_stress = std::numeric_limits<double>::infinity();
    } else {
        mat.plastic.model = PlasticModel::none;
    }
    for (Index p = 0; p < ps.size(); ++p) {
        const auto up = constitutive::update_particle(mat, ps.mu[p], ps.lambda[p], ps.F_E[p], ps.yield_stress[p],
                                                      ps.damaged[p] != 0, cfg.dt);
        ps.tau[p] = up.tau;
    }
}

// ---------------------------------------------------------------------------
// Diagnostics.

inline Vec3 total_momentum(const ParticleSystem& ps) {
    Vec3 m = Vec3::Zero();
    for (Index p = 0; p < ps.size(); ++p) m += ps.mass[p] * ps.v[p];
    return m;
}

inline Vec3 grid_momentum(const Grid& g) {
    Vec3 m = Vec3::Zero();
    for (Index n = 0; n < g.node_count(); ++n) m += g.momentum[n];
    return m;
}

// Angular momentum about the origin. With APIC the affine term contributes
// m_p (dx^2/4) * axial(C_p - C_p^T).
inline Vec3 total_angular_momentum(const ParticleSystem& ps, double dx, bool include_affine) {
    Vec3 L = Vec3::Zero();
    const double d = dx * dx / 4.0;
    for (Index p = 0; p < ps.size(); ++p) {
        L += ps.x[p].cross(ps.mass[p] * ps.v[p]);
        if (include_affine) {
            const Mat3& C = ps.C[p];
            L += ps.mass[p] * d * Vec3(C(2, 1) - C(1, 2), C(0, 2) - C(2, 0), C(1, 0) - C(0, 1));
        }
    }
    return L;
}

inline double kinetic_energy(const ParticleSystem& ps) {
    double e = 0.0;
    for (Index p = 0; p < ps.size(); ++p) e += 0.5 * ps.mass[p] * ps.v[p].squaredNorm();
    return e;
}

}  // namespace nsf::mpm
