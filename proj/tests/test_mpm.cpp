#include "nsf/mpm.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace nsf;
using namespace nsf::mpm;

namespace {

Grid unit_grid(double dx = 0.05) {
    const int n = int(std::lround(1.0 / dx)) + 1;
    Grid g(Vec3::Zero(), dx, {n, n, n});
    return g;
}

ParticleSystem random_particles(std::mt19937_64& rng, int count, bool with_affine) {
    std::uniform_real_distribution<double> pos(0.25, 0.75), vel(-1.0, 1.0), mass(0.5, 2.0);
    ParticleSystem ps;
    for (int p = 0; p < count; ++p) {
        ps.add(Vec3(pos(rng), pos(rng), pos(rng)), mass(rng), 1e-4, 1.0, 1.0);
        ps.v.back() = Vec3(vel(rng), vel(rng), vel(rng));
        if (with_affine) {
            Mat3 C;
            for (int i = 0; i < 9; ++i) C.data()[i] = vel(rng);
            ps.C.back() = C;
        }
    }
    return ps;
}

SimConfig elastic_config(double dt = 1e-3) {
    SimConfig cfg;
    cfg.dt = dt;
    cfg.material.elastic = constitutive::ElasticModel::fixed_corotated;
    return cfg;
}

}  // namespace

TEST(BSpline, NodeAndMidpointFactors) {
    const Grid g = unit_grid(0.1);
    const Stencil at_node = bspline_weights(Vec3(0.5, 0.5, 0.5), g);
    for (int d = 0; d < 3; ++d) {
        EXPECT_NEAR(at_node.w[d][0], 0.125, 1e-15);
        EXPECT_NEAR(at_node.w[d][1], 0.75, 1e-15);
        EXPECT_NEAR(at_node.w[d][2], 0.125, 1e-15);
    }
    const Stencil mid = bspline_weights(Vec3(0.55, 0.55, 0.55), g);
    for (int d = 0; d < 3; ++d) {
        EXPECT_NEAR(mid.w[d][0], 0.5, 1e-12);
        EXPECT_NEAR(mid.w[d][1], 0.5, 1e-12);
        EXPECT_NEAR(mid.w[d][2], 0.0, 1e-12);
    }
}

TEST(BSpline, PartitionOfUnityAndZeroGradientSum) {
    const Grid g = unit_grid();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.08, 0.92);
    for (int t = 0; t < 1000; ++t) {
        const Stencil s = bspline_weights(Vec3(u(rng), u(rng), u(rng)), g);
        double wsum = 0.0;
        Vec3 gsum = Vec3::Zero();
        s.for_each(g, [&](const StencilEntry& e) {
            wsum += e.weight;
            gsum += e.grad;
        });
        EXPECT_NEAR(wsum, 1.0, 1e-12);
        EXPECT_LT(gsum.cwiseAbs().maxCoeff() * g.dx, 1e-12);
    }
}

TEST(BSpline, GradientMatchesFiniteDifferences) {
    const Grid g = unit_grid();
    const Vec3 x(0.4321, 0.5678, 0.3141);
    const auto base = bspline_weights(x, g).entries(g);
    const double h = 1e-7;
    for (int d = 0; d < 3; ++d) {
        Vec3 xp = x, xm = x;
        xp(d) += h;
        xm(d) -= h;
        const auto ep = bspline_weights(xp, g).entries(g);
        const auto em = bspline_weights(xm, g).entries(g);
        for (int k = 0; k < 27; ++k) {
            ASSERT_EQ(ep[k].node, base[k].node);
            EXPECT_NEAR((ep[k].weight - em[k].weight) / (2 * h), base[k].grad(d), 1e-6);
        }
    }
}

TEST(BSpline, OutsideSafeRegionReportsParticle) {
    const Grid g = unit_grid();
    try {
        bspline_weights(Vec3(0.01, 0.5, 0.5), g, 42);
        FAIL() << "expected OutOfDomainError";
    } catch (const OutOfDomainError& e) {
        EXPECT_EQ(e.particle(), 42u);
    }
}

TEST(P2G, SingleParticleAtNodePic) {
    Grid g = unit_grid(0.1);
    g.set_mass_epsilon(2.0);
    ParticleSystem ps;
    ps.add(Vec3(0.5, 0.5, 0.5), 2.0, 1e-3, 1.0, 1.0);
    ps.v[0] = Vec3(1.0, -2.0, 0.5);
    SimConfig cfg = elastic_config();
    cfg.transfer = TransferScheme::pic;
    p2g(ps, g, cfg);
    const Index center = g.index(5, 5, 5);
    EXPECT_NEAR(g.mass[center], 2.0 * 0.421875, 1e-15);
    EXPECT_LT((g.momentum[center] - 0.421875 * 2.0 * ps.v[0]).norm(), 1e-14);
    double total = 0.0;
    for (double m : g.mass) total += m;
    EXPECT_NEAR(total, 2.0, 1e-14);
}

TEST(P2G, ApicWithZeroAffineEqualsPicBitwise) {
    std::mt19937_64 rng(8);
    const ParticleSystem ps = random_particles(rng, 50, false);
    Grid a = unit_grid(), b = unit_grid();
    SimConfig pic = elastic_config(), apic = elastic_config();
    pic.transfer = TransferScheme::pic;
    p2g(ps, a, pic);
    p2g(ps, b, apic);
    EXPECT_EQ(a.mass, b.mass);
    for (Index n = 0; n < a.node_count(); ++n) ASSERT_EQ(a.momentum[n], b.momentum[n]);
}

TEST(P2G, ConservesMassAndMomentum) {
    std::mt19937_64 rng(10);
    for (auto scheme : {TransferScheme::pic, TransferScheme::apic}) {
        const ParticleSystem ps = random_particles(rng, 100, true);
        Grid g = unit_grid();
        SimConfig cfg = elastic_config();
        cfg.transfer = scheme;
        p2g(ps, g, cfg);
        double mass = 0.0;
        for (double m : g.mass) mass += m;
        EXPECT_NEAR(mass, ps.total_mass(), 1e-12 * ps.total_mass());
        const Vec3 pm = total_momentum(ps);
        EXPECT_LT((grid_momentum(g) - pm).norm(), 1e-12 * pm.norm());
    }
}

TEST(GridForces, ZeroStressGivesZeroForce) {
    std::mt19937_64 rng(12);
    const ParticleSystem ps = random_particles(rng, 20, false);
    Grid g = unit_grid();
    grid_forces(ps, g);
    for (const auto& f : g.force) EXPECT_EQ(f.norm(), 0.0);
}

TEST(GridForces, UniformPressureSingleParticle) {
    Grid g = unit_grid();
    ParticleSystem ps;
    ps.add(Vec3(0.512, 0.47, 0.533), 1.0, 2e-3, 1.0, 1.0);
    const double pressure = 3.0;
    ps.tau[0] = -pressure * Mat3::Identity();
    grid_forces(ps, g);
    Vec3 sum = Vec3::Zero();
    for (const auto& e : bspline_weights(ps.x[0], g).entries(g)) {
        EXPECT_LT((g.force[e.node] - pressure * 2e-3 * e.grad).norm(), 1e-14);
        sum += g.force[e.node];
    }
    EXPECT_LT(sum.norm(), 1e-10);
}

TEST(GridForces, ClosedSystemNetForceVanishes) {
    std::mt19937_64 rng(13);
    ParticleSystem ps = random_particles(rng, 200, false);
    for (auto& t : ps.tau) {
        const Mat3 F = nsf::testing::random_deformation(rng);
        t = F + F.transpose();
    }
    Grid g = unit_grid();
    grid_forces(ps, g);
    Vec3 sum = Vec3::Zero();
    double scale = 0.0;
    for (const auto& f : g.force) {
        sum += f;
        scale += f.norm();
    }
    EXPECT_LT(sum.norm(), 1e-10 * scale);
}

TEST(GridUpdate, GravityAndNoForces) {
    std::mt19937_64 rng(14);
    ParticleSystem ps = random_particles(rng, 30, false);
    Grid g = unit_grid();
    g.set_mass_epsilon(ps.total_mass());
    SimConfig cfg = elastic_config();
    p2g(ps, g, cfg);
    const auto before = g.velocity;
    grid_update(g, cfg, 0.0);
    for (Index n = 0; n < g.node_count(); ++n) EXPECT_EQ(g.velocity[n], before[n]);

    cfg.gravity = Vec3(0, -10, 0);
    grid_update(g, cfg, 0.0);
    for (Index n = 0; n < g.node_count(); ++n) {
        if (g.mass[n] <= g.mass_epsilon) continue;
        EXPECT_NEAR(g.velocity[n].y(), before[n].y() - 0.01, 1e-14);
        EXPECT_EQ(g.velocity[n].x(), before[n].x());
    }
}

TEST(GridUpdate, StickyAndSlipBoundaries) {
    Grid g = unit_grid(0.1);
    const Index n = g.index(5, 1, 5);  // y = 0.1, below a floor at 0.15
    g.mass[n] = 1.0;
    g.velocity[n] = Vec3(0.3, -2.0, 0.1);
    SimConfig cfg = elastic_config();
    Grid sticky = g;
    sticky.boundaries.push_back({BoundaryKind::sticky, Vec3(0, 0.15, 0), Vec3::UnitY()});
    grid_update(sticky, cfg, 0.0);
    EXPECT_EQ(sticky.velocity[n], Vec3::Zero());

    Grid slip = g;
    slip.boundaries.push_back({BoundaryKind::slip, Vec3(0, 0.15, 0), Vec3::UnitY()});
    grid_update(slip, cfg, 0.0);
    EXPECT_EQ(slip.velocity[n], Vec3(0.3, 0.0, 0.1));

    // Separating velocity is left alone by the slip condition.
    Grid lift = g;
    lift.velocity[n] = Vec3(0.3, 2.0, 0.1);
    lift.boundaries.push_back({BoundaryKind::slip, Vec3(0, 0.15, 0), Vec3::UnitY()});
    grid_update(lift, cfg, 0.0);
    EXPECT_EQ(lift.velocity[n], Vec3(0.3, 2.0, 0.1));
}

TEST(G2P, UniformFieldGivesUniformVelocityAndNoAffine) {
    Grid g = unit_grid();
    const Vec3 vstar(0.3, -0.2, 0.7);
    std::fill(g.velocity.begin(), g.velocity.end(), vstar);
    std::mt19937_64 rng(15);
    ParticleSystem ps = random_particles(rng, 50, true);
    g2p(g, ps, elastic_config(), ParticleRange::everything(ps.size()), G2PMode::kinematic);
    for (Index p = 0; p < ps.size(); ++p) {
        EXPECT_LT((ps.v[p] - vstar).norm(), 1e-14);
        EXPECT_LT(ps.C[p].norm(), 1e-10);
    }
}

TEST(G2P, ReproducesAffineFields) {
    Grid g = unit_grid();
    Mat3 A;
    A << 0.1, -0.4, 0.2, 0.3, 0.05, -0.6, 0.7, 0.2, -0.1;
    for (Index n = 0; n < g.node_count(); ++n) g.velocity[n] = A * g.node_position(n);
    std::mt19937_64 rng(16);
    ParticleSystem ps = random_particles(rng, 100, false);
    const auto x0 = ps.x;
    g2p(g, ps, elastic_config(), ParticleRange::everything(ps.size()), G2PMode::kinematic);
    for (Index p = 0; p < ps.size(); ++p) {
        EXPECT_LT(nsf::testing::max_abs(ps.C[p] - A), 1e-10);
        EXPECT_LT((ps.v[p] - A * x0[p]).norm(), 1e-12);
    }
}

TEST(G2P, StaticGridLeavesStateUnchanged) {
    Grid g = unit_grid();
    std::mt19937_64 rng(17);
    ParticleSystem ps = random_particles(rng, 40, false);
    const SimConfig cfg = elastic_config();
    for (auto& F : ps.F_E) F = nsf::testing::random_deformation(rng, 0.9, 1.1);
    refresh_stress(ps, cfg);
    const ParticleSystem before = ps;
    g2p(g, ps, cfg, ParticleRange::everything(ps.size()));
    EXPECT_EQ(ps.x, before.x);
    EXPECT_EQ(ps.F_E, before.F_E);
    for (Index p = 0; p < ps.size(); ++p) EXPECT_LT(nsf::testing::max_abs(ps.tau[p] - before.tau[p]), 1e-14);
}

TEST(Step, ZeroGravityZeroStressIsInvariant) {
    ParticleSystem ps;
    for (int i = 0; i < 4; ++i) ps.add(Vec3(0.4 + 0.02 * i, 0.5, 0.5), 1.0, 1e-4, 0.0, 0.0);
    Grid g = unit_grid();
    g.set_mass_epsilon(ps.total_mass());
    const auto before = ps.x;
    for (int s = 0; s < 10; ++s) step(ps, g, elastic_config());
    EXPECT_EQ(ps.x, before);
}

TEST(Step, FreeFallMatchesSymplecticEuler) {
    ParticleSystem ps;
    ps.add(Vec3(0.5, 0.8, 0.5), 1.0, 1e-4, 0.0, 0.0);
    Grid g = unit_grid();
    g.set_mass_epsilon(ps.total_mass());
    SimConfig cfg = elastic_config(1e-3);
    cfg.gravity = Vec3(0, -10, 0);
    for (int s = 0; s < 100; ++s) step(ps, g, cfg);
    EXPECT_NEAR(ps.v[0].y(), -1.0, 1e-10);
    // y_100 = y_0 - dt^2 g sum_{k=1}^{100} k
    EXPECT_NEAR(ps.x[0].y(), 0.8 - 1e-6 * 10.0 * 5050.0, 1e-10);
    EXPECT_NEAR(ps.x[0].x(), 0.5, 1e-12);
}

TEST(Step, ElasticCubeSettlesOnStickyFloor) {
    Grid g = unit_grid(0.05);
    g.boundaries.push_back({BoundaryKind::sticky, Vec3(0, 0.2, 0), Vec3::UnitY()});
    const auto ep = constitutive::lame_from_E_nu(50.0, 0.3);
    ParticleSystem ps;
    const double h = 0.025;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int k = 0; k < 8; ++k)
                ps.add(Vec3(0.4 + h * (i + 0.5), 0.22 + h * (j + 0.5), 0.4 + h * (k + 0.5)), h * h * h,
                       h * h * h, ep.shear_modulus, ep.lame_modulus);
    for (auto& v : ps.v) v = Vec3(0, -1.0, 0);
    g.set_mass_epsilon(ps.total_mass());
    SimConfig cfg = elastic_config(1e-3);
    cfg.gravity = Vec3(0, -9.8, 0);
    const double e0 = kinetic_energy(ps);
    for (int s = 0; s < 3000; ++s) step(ps, g, cfg);
    EXPECT_LT(kinetic_energy(ps), 0.01 * e0);
}

TEST(Step, AngularMomentumApicVsPic) {
    auto make = [](TransferScheme scheme) {
        ParticleSystem ps;
        const Vec3 omega(0.3, -1.0, 0.6);
        const Vec3 center(0.5, 0.5, 0.5);
        const double h = 0.025;
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j)
                for (int k = 0; k < 6; ++k) {
                    const Vec3 x = center + h * Vec3(i - 2.5, j - 2.5, k - 2.5);
                    ps.add(x, 1e-3, 1e-5, 0.0, 0.0);
                    ps.v.back() = omega.cross(x - center);
                    if (scheme == TransferScheme::apic) {
                        Mat3 W;
                        W << 0, -omega.z(), omega.y(), omega.z(), 0, -omega.x(), -omega.y(), omega.x(), 0;
                        ps.C.back() = W;
                    }
                }
        return ps;
    };
    double dissipation[2];
    for (auto scheme : {TransferScheme::apic, TransferScheme::pic}) {
        ParticleSystem ps = make(scheme);
        Grid g = unit_grid(0.05);
        g.set_mass_epsilon(ps.total_mass());
        SimConfig cfg = elastic_config(1e-3);
        cfg.transfer = scheme;
        const bool affine = scheme == TransferScheme::apic;
        const Vec3 L0 = total_angular_momentum(ps, g.dx, affine);
        step(ps, g, cfg);
        const Vec3 L1 = total_angular_momentum(ps, g.dx, affine);
        dissipation[affine ? 0 : 1] = (L0 - L1).norm() / L0.norm();
    }
    EXPECT_LT(dissipation[0], 1e-8);
    EXPECT_GE(dissipation[1], dissipation[0]);
}

TEST(Step, SerialRunsAreBitwiseDeterministic) {
    auto run = [] {
        std::mt19937_64 rng(99);
        ParticleSystem ps = random_particles(rng, 64, true);
        const auto ep = constitutive::lame_from_E_nu(5.0, 0.3);
        for (Index p = 0; p < ps.size(); ++p) {
            ps.mu[p] = ep.shear_modulus;
            ps.lambda[p] = ep.lame_modulus;
        }
        Grid g = unit_grid();
        g.set_mass_epsilon(ps.total_mass());
        SimConfig cfg = elastic_config(1e-3);
        cfg.gravity = Vec3(0, -9.8, 0);
        for (int s = 0; s < 20; ++s) step(ps, g, cfg);
        return ps;
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.v, b.v);
    EXPECT_EQ(a.F_E, b.F_E);
    EXPECT_EQ(a.tau, b.tau);
}
