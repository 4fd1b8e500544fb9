#include "nsf/metrics.hpp"
#include "nsf/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

using namespace nsf;
using namespace nsf::metrics;

namespace {

PositionFrames random_frames(std::mt19937_64& rng, std::size_t frames, std::size_t particles) {
    std::normal_distribution<double> n(0.0, 1.0);
    PositionFrames f(frames, std::vector<Vec3>(particles));
    for (auto& fr : f)
        for (auto& x : fr) x = Vec3(n(rng), n(rng), n(rng));
    return f;
}

PositionFrames scaled(PositionFrames f, double c) {
    for (auto& fr : f)
        for (auto& x : fr) x *= c;
    return f;
}

Trajectory translating_block(int frames, const Vec3& velocity, int side = 4, double spacing = 0.05) {
    Trajectory t;
    t.dt = 0.01;
    t.dx = spacing;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j)
            for (int k = 0; k < side; ++k) t.X.push_back(Vec3(0.3, 0.3, 0.3) + spacing * Vec3(i, j, k));
    for (int n = 0; n < frames; ++n) {
        Frame f;
        for (const auto& X : t.X) {
            f.x.push_back(X + n * t.dt * velocity);
            f.tau.push_back(Mat3::Zero());
            f.C.push_back(Mat3::Zero());
        }
        t.frames.push_back(std::move(f));
    }
    return t;
}

rom::NeuralFields random_fields(const std::vector<Vec3>& X, int r, bool with_stress) {
    FieldModel g = FieldModel::create(FieldKind::deformation, r, 2, 16, false, 7);
    g.position = neural::fit_normalization(gather_positions(X));
    g.output = g.position;
    g.output.std *= 0.1;
    std::shared_ptr<FieldModel> h, l;
    if (with_stress) {
        h = std::make_shared<FieldModel>(FieldModel::create(FieldKind::stress, r, 5, 36, false, 8));
        l = std::make_shared<FieldModel>(FieldModel::create(FieldKind::affine, r, 5, 36, false, 9));
        h->position = l->position = g.position;
        h->output.std *= 1e-3;
        l->output.std *= 1e-3;
    }
    return rom::NeuralFields(X, std::move(g), h, l);
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(RelativeError, IdenticalIsZero) {
    std::mt19937_64 rng(1);
    const auto a = random_frames(rng, 5, 30);
    EXPECT_EQ(relative_error(a, a).total, 0.0);
}

TEST(RelativeError, UniformScaling) {
    std::mt19937_64 rng(2);
    const auto truth = random_frames(rng, 7, 40);
    EXPECT_NEAR(relative_error(scaled(truth, 1.01), truth).total, 0.01, 1e-12);
    for (double e : relative_error(scaled(truth, 1.01), truth).per_frame) EXPECT_NEAR(e, 0.01, 1e-12);
}

TEST(RelativeError, SingleParticleDirectFormula) {
    const PositionFrames truth{{Vec3(1, 0, 0)}}, pred{{Vec3::Zero()}};
    EXPECT_DOUBLE_EQ(relative_error(pred, truth).total, 1.0);
}

TEST(RelativeError, ScaleConsistentAndNotSymmetric) {
    std::mt19937_64 rng(3);
    const auto a = random_frames(rng, 4, 25);
    const auto b = random_frames(rng, 4, 25);
    const double d = relative_error(a, b).total;
    EXPECT_NEAR(relative_error(scaled(a, 3.7), scaled(b, 3.7)).total, d, 1e-14);
    const auto big = scaled(b, 2.0);
    EXPECT_GT(std::abs(relative_error(a, big).total - relative_error(big, a).total), 1e-3);
}

TEST(RelativeError, Errors) {
    const PositionFrames one{{Vec3(1, 0, 0)}}, two{{Vec3(1, 0, 0), Vec3(0, 1, 0)}}, zero{{Vec3::Zero()}};
    EXPECT_THROW(relative_error(one, two), ShapeError);
    EXPECT_THROW(relative_error(one, PositionFrames{}), ShapeError);
    EXPECT_THROW(relative_error(one, zero), UndefinedMetricError);
    EXPECT_THROW(relative_error(zero, zero), UndefinedMetricError);
}

TEST(RelativeError, TrajectoriesSkipTheInitialFrame) {
    Trajectory truth = translating_block(3, Vec3(1, 0, 0));
    Trajectory pred = truth;
    for (auto& x : pred.frames[0].x) x *= 5.0;  // frame 0 does not count
    for (std::size_t n = 1; n < 3; ++n)
        for (auto& x : pred.frames[n].x) x *= 1.02;
    EXPECT_NEAR(relative_error(pred, truth).total, 0.02, 1e-12);
}

TEST(ReductionRatio, Examples) {
    EXPECT_EQ(reduction_ratio(200000, 6), 1e5);
    EXPECT_EQ(reduction_ratio(72000, 6), 3.6e4);
    EXPECT_EQ(reduction_ratio(4096, 4), 3072.0);
    EXPECT_EQ(reduction_ratio(5, 15), 1.0);
    EXPECT_DOUBLE_EQ(reduction_ratio(1000, 7), 3000.0 / 7.0);
    EXPECT_THROW(reduction_ratio(10, 0), ParameterError);
}

TEST(StressError, Examples) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<Mat3>> zero(3, std::vector<Mat3>(10, Mat3::Zero())), truth = zero;
    for (auto& fr : truth)
        for (auto& t : fr) {
            Mat3 a;
            for (int i = 0; i < 9; ++i) a.data()[i] = n(rng);
            t = a + a.transpose();
        }
    EXPECT_EQ(stress_error(zero, zero).total, 0.0);
    EXPECT_EQ(stress_error(truth, truth).total, 0.0);
    auto off = truth;
    for (auto& fr : off)
        for (auto& t : fr) t *= 1.01;
    EXPECT_NEAR(stress_error(off, truth).total, 0.01, 1e-12);
    EXPECT_THROW(stress_error(truth, zero), UndefinedMetricError);
}

// ---------------------------------------------------------------------------

TEST(Upsample, TrainingPointsMatchStandardDecoding) {
    std::vector<Vec3> X;
    for (int i = 0; i < 50; ++i) X.push_back(Vec3(0.3 + 0.004 * i, 0.5, 0.4 + 0.002 * i));
    const auto f = random_fields(X, 3, false);
    const std::vector<Vector> latents{Vector::Zero(3), Vector::Constant(3, 0.4)};
    const auto up = upsample(f, latents, X, X);
    EXPECT_FALSE(up.extrapolation_warning());
    for (std::size_t n = 0; n < latents.size(); ++n) {
        const auto ref = rom::decode_frame(f, latents[n]);
        for (std::size_t p = 0; p < X.size(); ++p) EXPECT_EQ((up.frames[n][p] - ref[p]).norm(), 0.0);
    }
}

TEST(Upsample, DenseQueriesNeverStepTheSolverAndWarnOutsideTheBox) {
    std::vector<Vec3> X;
    for (int i = 0; i < 200; ++i) X.push_back(Vec3(0.3 + 0.001 * i, 0.5 - 0.001 * i, 0.4));
    const auto f = random_fields(X, 2, false);
    const auto Xq = dense_reference(X, 1e-3, 100, 3);
    EXPECT_EQ(Xq.size(), 100 * X.size());
    const auto before = mpm::solver_step_counter().load();
    const auto up = upsample(f, {Vector::Zero(2)}, X, Xq);
    EXPECT_EQ(mpm::solver_step_counter().load(), before);
    EXPECT_TRUE(up.extrapolation_warning());  // jitter leaves the degenerate z-extent of the box
    const auto inside = upsample(f, {Vector::Zero(2)}, X, {Vec3(0.35, 0.45, 0.4)});
    EXPECT_FALSE(inside.extrapolation_warning());
}

TEST(Upsample, MidpointOnRigidTranslationIsMidway) {
    const Trajectory t = translating_block(20, Vec3(1.0, 0.5, -0.25), 6, 0.03);
    training::TrainConfig cfg;
    cfg.latent_dim = 3;
    cfg.beta_g = 4;
    cfg.max_batch_frames = 4;
    cfg.deformation_epochs = 400;
    const auto res = training::train_deformation({t}, cfg);
    const rom::NeuralFields f(t.X, res.g);
    std::vector<Vec3> mid;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < t.X.size(); ++a)
        for (std::size_t b = a + 1; b < t.X.size(); ++b)
            if (std::abs((t.X[a] - t.X[b]).norm() - 0.03) < 1e-12) {
                pairs.emplace_back(a, b);
                mid.push_back(0.5 * (t.X[a] + t.X[b]));
            }
    ASSERT_FALSE(pairs.empty());
    const auto up = upsample(f, res.latents[0], t.X, mid);
    EXPECT_FALSE(up.extrapolation_warning());
    double worst = 0.0;
    for (std::size_t n = 0; n < up.frames.size(); ++n) {
        const auto ref = rom::decode_frame(f, res.latents[0][n]);
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const Vec3 want = 0.5 * (ref[pairs[i].first] + ref[pairs[i].second]);
            worst = std::max(worst, (up.frames[n][i] - want).norm());
        }
    }
    EXPECT_LT(worst, 1e-3);
}

// ---------------------------------------------------------------------------

TEST(Memory, AnalyticEstimates) {
    EXPECT_EQ(full_order_bytes(0, 0), 0u);
    EXPECT_EQ(full_order_bytes(10, 0), 10u * (41 * 8 + 1));
    EXPECT_EQ(full_order_bytes(0, 5), 5u * 80);
    EXPECT_LT(reduced_bytes(1000, 100, 0, 500, 4), full_order_bytes(1000, 0));
}

TEST(Report, KeyValuesAndText) {
    EvalReport r;
    r.delta = 0.0125;
    r.gamma = 3072;
    r.particles = 4096;
    r.latent_dim = 4;
    r.samples = 20;
    r.mean_integration_particles = 409.6;
    r.per_frame = {0.01, 0.02};
    const std::string kv = r.key_values();
    EXPECT_NE(kv.find("delta=0.0125\n"), std::string::npos);
    EXPECT_NE(kv.find("integration_ratio=0.1"), std::string::npos);
    EXPECT_NE(kv.find("per_frame_delta=0.01,0.02\n"), std::string::npos);
    for (const auto& [k, v] : r.entries()) EXPECT_EQ(k.find('='), std::string::npos);
    EXPECT_NE(r.text().find("1.2500 %"), std::string::npos);
}

TEST(Benchmark, FullSampleSetCostsAtLeastTheFullStepAndCategoriesAddUp) {
    scenes::SceneConfig c;
    c.dx = 0.05;
    c.cells = 4;
    c.dt = 1e-3;
    const auto scene = scenes::build_scene(c, 60.0);
    const auto f = random_fields(scene.particles.X, 4, true);
    const auto S = f.all();
    const auto x0 = rom::decode_frame(f, Vector::Zero(4));
    const auto boot = rom::bootstrap(f, S, x0, std::vector<Vec3>(x0.size(), Vec3::Zero()), c.dt, Vector::Zero(4));
    rom::RolloutConfig rc;
    BenchmarkConfig bc;
    bc.trials = 10;
    bc.steps = 5;
    const auto t = benchmark(f, scene, S, boot, rc, bc);
    EXPECT_GE(t.reduced, t.full);
    EXPECT_EQ(t.mean_integration_particles, double(S.size()));
    for (double v : {t.breakdown.mpm, t.breakdown.inference, t.breakdown.inversion, t.breakdown.integration_set})
        EXPECT_GT(v, 0.0);
    EXPECT_NEAR(t.breakdown.step_total(), t.reduced, 0.02 * t.reduced);

    EvalReport r;
    r.particles = scene.particles.size();
    record_times(r, t, bc);
    EXPECT_EQ(r.trials, 10);
    EXPECT_DOUBLE_EQ(r.integration_ratio(), 1.0);
    EXPECT_NEAR(r.full_seconds_per_100, t.full * 20.0, 1e-12);
}
