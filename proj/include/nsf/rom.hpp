#pragma once

// Latent-space dynamics. Each step:
//   1. infer (x, v, tau, C) on the integration particles N from x̂_n, x̂_{n-1}
//   2. advance one MPM step on N; only the sample particles S are gathered back
//   3. invert the deformation field on S to obtain x̂_{n+1}
// With exact fields, step 2 reproduces the full-order positions of S because
// N contains every particle that shares a grid node with S.

#include "nsf/dataset.hpp"
#include "nsf/fields.hpp"
#include "nsf/mpm.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace nsf::rom {

using neural::Matrix;
using neural::Vector;

// ---------------------------------------------------------------------------
// Field sets

// The three fields as seen by the runtime. Index lists select particles.
class FieldSet {
public:
    virtual ~FieldSet() = default;

    virtual int latent_dim() const = 0;
    virtual Index particle_count() const = 0;

    // 3 x n current positions.
    virtual Matrix positions(std::span<const Index> idx, const Vector& z) const = 0;

    // d positions / d z as (3n x r), rows ordered (particle, component); also returns positions.
    virtual Matrix position_jacobian(std::span<const Index> idx, const Vector& z, Matrix& value) const = 0;

    virtual void stresses(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const = 0;
    virtual void affines(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const = 0;

    // Backward difference (g(z) - g(z_prev)) / dt.
    virtual Matrix velocities(std::span<const Index> idx, const Vector& z, const Vector& z_prev, double dt) const {
        return (positions(idx, z) - positions(idx, z_prev)) / dt;
    }

    // All particles (for integration-set construction and decoding frames).
    std::vector<Index> all() const {
        std::vector<Index> idx(particle_count());
        for (Index p = 0; p < idx.size(); ++p) idx[p] = p;
        return idx;
    }
};

// Trained g, h, l networks. The stress and affine fields are optional for
// position-only use (decoding, inversion, upsampling).
class NeuralFields : public FieldSet {
public:
    NeuralFields(std::vector<Vec3> X, FieldModel g, std::shared_ptr<const FieldModel> h = nullptr,
                 std::shared_ptr<const FieldModel> l = nullptr, double mu = 0.0)
        : X_(std::move(X)), g_(std::move(g)), h_(std::move(h)), l_(std::move(l)), mu_(mu) {
        if (g_.kind != FieldKind::deformation) throw ParameterError("rom: g must be a deformation field");
        if (h_ && (h_->kind != FieldKind::stress || h_->latent_dim != g_.latent_dim))
            throw ParameterError("rom: h must be a stress field with the same latent dimension");
        if (l_ && (l_->kind != FieldKind::affine || l_->latent_dim != g_.latent_dim))
            throw ParameterError("rom: l must be an affine field with the same latent dimension");
    }

    int latent_dim() const override { return g_.latent_dim; }
    Index particle_count() const override { return X_.size(); }
    const FieldModel& deformation() const { return g_; }

    Matrix positions(std::span<const Index> idx, const Vector& z) const override {
        return g_.predict(gather(idx), z, mu_);
    }

    Matrix position_jacobian(std::span<const Index> idx, const Vector& z, Matrix& value) const override {
        return g_.latent_jacobian(gather(idx), z, mu_, &value);
    }

    void stresses(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const override {
        out.resize(idx.size());
        if (!h_) {
            std::fill(out.begin(), out.end(), Mat3::Zero());
            return;
        }
        const Matrix y = h_->predict(gather(idx), z, mu_);
        for (Index i = 0; i < idx.size(); ++i) out[i] = stress_from_output(y, Eigen::Index(i));
    }

    void affines(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const override {
        out.resize(idx.size());
        if (!l_) {
            std::fill(out.begin(), out.end(), Mat3::Zero());
            return;
        }
        const Matrix y = l_->predict(gather(idx), z, mu_);
        for (Index i = 0; i < idx.size(); ++i) out[i] = affine_from_output(y, Eigen::Index(i));
    }

    // Positions at arbitrary reference points (upsampling).
    Matrix positions_at(const Matrix& Xq, const Vector& z) const { return g_.predict(Xq, z, mu_); }

private:
    Matrix gather(std::span<const Index> idx) const {
        Matrix out(3, Eigen::Index(idx.size()));
        for (Index i = 0; i < idx.size(); ++i) {
            if (idx[i] >= X_.size()) throw ShapeError("rom: particle index out of range");
            out.col(Eigen::Index(i)) = X_[idx[i]];
        }
        return out;
    }

    std::vector<Vec3> X_;
    FieldModel g_;
    std::shared_ptr<const FieldModel> h_;
    std::shared_ptr<const FieldModel> l_;
    double mu_;
};

// Exact stored full-order data standing in for the networks. The latent is
// the (fractional) frame index; integer latents return stored values
// bitwise, fractional ones interpolate positions linearly between frames.
class OracleFields : public FieldSet {
public:
    explicit OracleFields(const Trajectory& t) : t_(t) {
        if (t_.frames.empty()) throw ParameterError("rom: oracle trajectory has no frames");
    }

    int latent_dim() const override { return 1; }
    Index particle_count() const override { return t_.particle_count(); }

    static Vector latent(double frame) { return Vector::Constant(1, frame); }

    Matrix positions(std::span<const Index> idx, const Vector& z) const override {
        const auto [n, a] = locate(z);
        Matrix out(3, Eigen::Index(idx.size()));
        for (Index i = 0; i < idx.size(); ++i) {
            const Vec3& x0 = t_.frames[n].x[idx[i]];
            out.col(Eigen::Index(i)) = a == 0.0 ? x0 : Vec3(x0 + a * (t_.frames[n + 1].x[idx[i]] - x0));
        }
        return out;
    }

    Matrix position_jacobian(std::span<const Index> idx, const Vector& z, Matrix& value) const override {
        value = positions(idx, z);
        const std::size_t last = t_.frames.size() - 1;
        const auto [n, a] = locate(z);
        (void)a;
        const std::size_t lo = last == 0 ? 0 : std::min(n, last - 1);
        const std::size_t hi = last == 0 ? 0 : lo + 1;
        Matrix J(3 * Eigen::Index(idx.size()), 1);
        for (Index i = 0; i < idx.size(); ++i)
            J.block<3, 1>(3 * Eigen::Index(i), 0) = t_.frames[hi].x[idx[i]] - t_.frames[lo].x[idx[i]];
        return J;
    }

    void stresses(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const override {
        const auto& f = t_.frames[nearest(z)];
        out.resize(idx.size());
        for (Index i = 0; i < idx.size(); ++i) out[i] = f.tau[idx[i]];
    }

    void affines(std::span<const Index> idx, const Vector& z, std::vector<Mat3>& out) const override {
        const auto& f = t_.frames[nearest(z)];
        out.resize(idx.size());
        for (Index i = 0; i < idx.size(); ++i) out[i] = f.C[idx[i]];
    }

    // Stored full-order velocities when available.
    Matrix velocities(std::span<const Index> idx, const Vector& z, const Vector& z_prev, double dt) const override {
        const auto& f = t_.frames[nearest(z)];
        if (f.v.size() != t_.particle_count()) return FieldSet::velocities(idx, z, z_prev, dt);
        Matrix out(3, Eigen::Index(idx.size()));
        for (Index i = 0; i < idx.size(); ++i) out.col(Eigen::Index(i)) = f.v[idx[i]];
        return out;
    }

private:
    std::pair<std::size_t, double> locate(const Vector& z) const {
        if (z.size() != 1 || !std::isfinite(z(0))) throw ShapeError("rom: oracle latent must be a finite scalar");
        const double last = double(t_.frames.size() - 1);
        const double s = std::clamp(z(0), 0.0, last);
        const double fl = std::floor(s);
        if (fl >= last) return {std::size_t(last), 0.0};
        return {std::size_t(fl), s - fl};
    }

    std::size_t nearest(const Vector& z) const {
        const auto [n, a] = locate(z);
        return a < 0.5 ? n : n + 1;
    }

    const Trajectory& t_;
};

// ---------------------------------------------------------------------------
// Sample particles

inline Index min_sample_count(int latent_dim) { return Index((latent_dim + 2) / 3); }

// `count` distinct indices drawn uniformly, sorted.
inline std::vector<Index> select_sample_particles(Index particle_count, Index count, int latent_dim,
                                                  std::uint64_t seed) {
    if (count > particle_count) throw ParameterError("rom: more sample particles requested than particles");
    if (count < min_sample_count(latent_dim))
        throw ParameterError("rom: sample count below ceil(r/3); the inversion would be ill-posed");
    std::vector<Index> all(particle_count);
    for (Index p = 0; p < particle_count; ++p) all[p] = p;
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < count; ++i) {
        std::uniform_int_distribution<Index> pick(i, particle_count - 1);
        std::swap(all[i], all[pick(rng)]);
    }
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

// A user mask over reference positions with the number of samples to draw inside it.
struct SampleRegion {
    std::function<bool(const Vec3&)> contains;
    Index count = 0;
};

// Region-weighted selection: each region contributes its count from particles
// inside its mask, without repeating a particle already chosen.
inline std::vector<Index> select_sample_particles(const std::vector<Vec3>& X, const std::vector<SampleRegion>& regions,
                                                  int latent_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::uint8_t> taken(X.size(), 0);
    std::vector<Index> out;
    for (const auto& region : regions) {
        std::vector<Index> pool;
        for (Index p = 0; p < X.size(); ++p)
            if (!taken[p] && region.contains(X[p])) pool.push_back(p);
        if (region.count > pool.size()) throw ParameterError("rom: sample region holds fewer particles than requested");
        for (Index i = 0; i < region.count; ++i) {
            std::uniform_int_distribution<Index> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
            taken[pool[i]] = 1;
            out.push_back(pool[i]);
        }
    }
    if (out.size() < min_sample_count(latent_dim))
        throw ParameterError("rom: sample count below ceil(r/3); the inversion would be ill-posed");
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Integration set

struct IntegrationSet {
    std::vector<Index> nodes;      // I: stencil nodes of the decoded sample positions
    std::vector<Index> particles;  // N: particles whose stencil meets I (sorted, contains S)
};

// From decoded positions of every particle. A particle belongs to N when any
// node of its quadratic stencil lies in I; this is a superset of the
// nonzero-weight condition and keeps the step exact.
inline IntegrationSet integration_set_from_positions(std::span<const Index> samples, const Matrix& all_positions,
                                                     const mpm::Grid& g) {
    IntegrationSet set;
    std::vector<Vec3> sample_pos(samples.size());
    for (Index i = 0; i < samples.size(); ++i) sample_pos[i] = all_positions.col(Eigen::Index(samples[i]));
    set.nodes = mpm::touched_nodes(sample_pos, mpm::ParticleRange::everything(sample_pos.size()), g);
    std::vector<std::uint8_t> in_I(g.node_count(), 0);
    for (Index n : set.nodes) in_I[n] = 1;
    for (Index p = 0; p < Index(all_positions.cols()); ++p) {
        const Vec3 x = all_positions.col(Eigen::Index(p));
        const mpm::Stencil s = mpm::bspline_weights(x, g, p);
        bool hit = false;
        s.for_each_node(g, [&](Index n) { hit = hit || in_I[n]; });
        if (hit) set.particles.push_back(p);
    }
    return set;
}

inline IntegrationSet build_integration_set(std::span<const Index> samples, const Vector& z, const FieldSet& fields,
                                            const mpm::Grid& g) {
    const auto all = fields.all();
    return integration_set_from_positions(samples, fields.positions(all, z), g);
}

// ---------------------------------------------------------------------------
// State inference and the reduced step

struct InferredStates {
    Matrix x;  // 3 x |N|
    Matrix v;
    std::vector<Mat3> tau;
    std::vector<Mat3> C;
};

inline InferredStates infer_states(const Vector& z, const Vector& z_prev, std::span<const Index> particles,
                                   const FieldSet& fields, double dt) {
    InferredStates s;
    s.x = fields.positions(particles, z);
    s.v = fields.velocities(particles, z, z_prev, dt);
    fields.stresses(particles, z, s.tau);
    fields.affines(particles, z, s.C);
    if (!s.x.allFinite() || !s.v.allFinite()) throw ModelCorruptionError("rom: non-finite inferred state");
    for (Index i = 0; i < s.tau.size(); ++i)
        if (!s.tau[i].allFinite() || !s.C[i].allFinite()) throw ModelCorruptionError("rom: non-finite inferred state");
    return s;
}

// Advances the integration particles one step on `g` and returns the new
// positions of `samples` (3 x |S|). `ps` supplies mass and volume and is used
// as scratch for the states of N; `time` drives moving boundaries.
inline Matrix reduced_step(const InferredStates& states, std::span<const Index> samples, const IntegrationSet& set,
                           mpm::ParticleSystem& ps, mpm::Grid& g, const mpm::SimConfig& cfg, double time) {
    const auto& N = set.particles;
    for (Index i = 0; i < N.size(); ++i) {
        const Index p = N[i];
        ps.x[p] = states.x.col(Eigen::Index(i));
        ps.v[p] = states.v.col(Eigen::Index(i));
        ps.tau[p] = states.tau[i];
        ps.C[p] = states.C[i];
    }
    const auto touched = mpm::touched_nodes(ps.x, mpm::ParticleRange::only(N), g);
    mpm::clear(g, touched);
    mpm::p2g(ps, g, cfg, N, set.nodes);
    mpm::grid_forces(ps, g, mpm::ParticleRange::only(N));
    mpm::grid_update(g, cfg, time, set.nodes, false);
    mpm::g2p(g, ps, cfg, mpm::ParticleRange::only(samples), mpm::G2PMode::kinematic);
    ++mpm::solver_step_counter();
    Matrix out(3, Eigen::Index(samples.size()));
    for (Index i = 0; i < samples.size(); ++i) out.col(Eigen::Index(i)) = ps.x[samples[i]];
    return out;
}

// ---------------------------------------------------------------------------
// Network inversion:  argmin_z  sum_{p in S} || g(X_p, z) - x_p ||^2

struct InversionConfig {
    int max_iterations = 5;
    double tolerance = 1e-10;       // on ||g(z) - x|| / ||x||
    double step_tolerance = 1e-12;  // stop when ||dz|| <= step_tolerance * (1 + ||z||)
    double tikhonov = 1e-12;        // floor on the diagonal of the normal matrix
    bool damping = false;           // halve rejected steps (at most 10 times)
    bool linearized = false;        // one undamped linearized solve

    void validate() const {
        if (max_iterations < 1) throw ParameterError("rom: inversion needs at least one iteration");
    }
};

struct InversionResult {
    Vector z;
    double residual = 0.0;  // normalized residual at z
    int iterations = 0;
    bool converged = false;
    bool ill_conditioned = false;
    std::vector<double> history;  // normalized residual before each iteration, then final
};

inline InversionResult invert_deformation(const FieldSet& fields, std::span<const Index> samples,
                                          const Matrix& targets, const Vector& z_init, InversionConfig cfg = {}) {
    cfg.validate();
    const int r = fields.latent_dim();
    if (samples.size() < min_sample_count(r))
        throw ParameterError("rom: inversion refuses |S| < ceil(r/3)");
    if (targets.rows() != 3 || Index(targets.cols()) != samples.size())
        throw ShapeError("rom: inversion targets must be 3 x |S|");
    if (z_init.size() != r) throw ShapeError("rom: initial latent dimension mismatch");
    if (cfg.linearized) {
        cfg.max_iterations = 1;
        cfg.damping = false;
    }
    const double scale = std::max(targets.norm(), std::numeric_limits<double>::min());
    const Eigen::Map<const Vector> t(targets.data(), targets.size());

    InversionResult res;
    Vector z = z_init;
    Matrix value;
    Matrix J = fields.position_jacobian(samples, z, value);
    Vector resid = Eigen::Map<const Vector>(value.data(), value.size()) - t;
    double rnorm = resid.norm() / scale;
    res.z = z;
    res.residual = rnorm;
    res.history.push_back(rnorm);

    for (int it = 0; it < cfg.max_iterations; ++it) {
        if (rnorm < cfg.tolerance) {
            res.converged = true;
            break;
        }
        Matrix A = J.transpose() * J;
        A.diagonal() = A.diagonal().cwiseMax(cfg.tikhonov);
        const Eigen::LDLT<Matrix> ldlt(A);
        if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-12) res.ill_conditioned = true;
        const Vector dz = -ldlt.solve(J.transpose() * resid);
        if (!dz.allFinite()) {
            res.ill_conditioned = true;
            break;
        }
        ++res.iterations;

        double step = 1.0;
        Vector z_new = z + dz;
        Matrix J_new = fields.position_jacobian(samples, z_new, value);
        Vector resid_new = Eigen::Map<const Vector>(value.data(), value.size()) - t;
        double rnew = resid_new.norm() / scale;
        if (cfg.damping) {
            for (int h = 0; h < 10 && !(rnew <= rnorm); ++h) {
                step *= 0.5;
                z_new = z + step * dz;
                J_new = fields.position_jacobian(samples, z_new, value);
                resid_new = Eigen::Map<const Vector>(value.data(), value.size()) - t;
                rnew = resid_new.norm() / scale;
            }
            if (!(rnew <= rnorm)) break;  // no descent along the Gauss-Newton direction
        }
        z = z_new;
        J = std::move(J_new);
        resid = std::move(resid_new);
        rnorm = rnew;
        res.history.push_back(rnorm);
        if (rnorm < res.residual || !std::isfinite(res.residual)) {
            res.z = z;
            res.residual = rnorm;
        }
        if (rnorm < cfg.tolerance || (step * dz).norm() <= cfg.step_tolerance * (1.0 + z.norm())) {
            res.converged = true;
            break;
        }
    }
    if (cfg.linearized) res.converged = true;
    return res;
}

// ---------------------------------------------------------------------------
// Bootstrap and rollout

struct Bootstrap {
    Vector z0;
    Vector z_prev;
    InversionResult first;
    InversionResult second;
};

// x̂_0 fits the initial positions; x̂_{-1} fits x0 - dt v0 so the backward
// difference reproduces the initial velocity on S.
inline Bootstrap bootstrap(const FieldSet& fields, std::span<const Index> samples, const std::vector<Vec3>& x0,
                           const std::vector<Vec3>& v0, double dt, const Vector& z_guess,
                           const InversionConfig& cfg = {}) {
    Matrix t0(3, Eigen::Index(samples.size())), t1(3, Eigen::Index(samples.size()));
    for (Index i = 0; i < samples.size(); ++i) {
        t0.col(Eigen::Index(i)) = x0[samples[i]];
        t1.col(Eigen::Index(i)) = x0[samples[i]] - dt * v0[samples[i]];
    }
    InversionConfig c = cfg;
    c.max_iterations = std::max(c.max_iterations, 20);
    c.damping = true;
    Bootstrap b;
    b.first = invert_deformation(fields, samples, t0, z_guess, c);
    b.z0 = b.first.z;
    b.second = invert_deformation(fields, samples, t1, b.z0, c);
    b.z_prev = b.second.z;
    return b;
}

struct StepRecord {
    Index integration_particles = 0;
    Index nodes = 0;
    int iterations = 0;
    double residual = 0.0;
    bool converged = false;
    bool ill_conditioned = false;
};

struct RolloutTimes {
    double inference = 0.0;
    double integration_set = 0.0;
    double mpm = 0.0;
    double inversion = 0.0;
    double decode = 0.0;  // full-frame decoding for output, not part of the step
    double loop = 0.0;    // wall-clock of the step loop without decoding

    double step_total() const { return inference + integration_set + mpm + inversion; }
};

struct RolloutConfig {
    Index steps = 0;
    double dt_multiplier = 1.0;
    InversionConfig inversion;
    bool decode_frames = true;
    // Optional sample-set changes: from step `first` on, use `samples`.
    std::vector<std::pair<Index, std::vector<Index>>> sample_schedule;
};

struct RolloutResult {
    std::vector<Vector> latents;             // x̂_0 .. x̂_steps
    std::vector<std::vector<Vec3>> frames;   // decoded positions of all particles per latent (when requested)
    std::vector<StepRecord> records;
    RolloutTimes times;
    double dt = 0.0;
};

inline std::vector<Vec3> decode_frame(const FieldSet& fields, const Vector& z) {
    const Matrix x = fields.positions(fields.all(), z);
    std::vector<Vec3> out(Index(x.cols()));
    for (Eigen::Index p = 0; p < x.cols(); ++p) out[Index(p)] = x.col(p);
    return out;
}

// `ps` carries mass and initial volume of every particle (its kinematic
// arrays are overwritten); `cfg.dt` is the training time step.
inline RolloutResult rollout(const FieldSet& fields, mpm::ParticleSystem ps, mpm::Grid g, const mpm::SimConfig& cfg,
                             std::vector<Index> samples, const Bootstrap& boot, const RolloutConfig& rc) {
    using clock = std::chrono::steady_clock;
    auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    if (!(rc.dt_multiplier > 0.0)) throw ParameterError("rom: dt multiplier must be positive");
    if (ps.size() != fields.particle_count()) throw ShapeError("rom: particle system does not match fields");
    mpm::SimConfig step_cfg = cfg;
    step_cfg.dt = cfg.dt * rc.dt_multiplier;

    RolloutResult out;
    out.dt = step_cfg.dt;
    Vector z = boot.z0, z_prev = boot.z_prev;
    out.latents.push_back(z);
    const auto all = fields.all();
    if (rc.decode_frames) {
        const auto t0 = clock::now();
        out.frames.push_back(decode_frame(fields, z));
        out.times.decode += seconds(t0, clock::now());
    }
    std::size_t schedule_pos = 0;
    const auto loop_start = clock::now();
    const double decode_before = out.times.decode;
    for (Index n = 0; n < rc.steps; ++n) {
        while (schedule_pos < rc.sample_schedule.size() && rc.sample_schedule[schedule_pos].first <= n)
            samples = rc.sample_schedule[schedule_pos++].second;
        const double time = double(n) * step_cfg.dt;

        auto t0 = clock::now();
        const IntegrationSet set = integration_set_from_positions(samples, fields.positions(all, z), g);
        auto t1 = clock::now();
        const InferredStates states = infer_states(z, z_prev, set.particles, fields, step_cfg.dt);
        auto t2 = clock::now();
        const Matrix targets = reduced_step(states, samples, set, ps, g, step_cfg, time);
        auto t3 = clock::now();
        const InversionResult inv = invert_deformation(fields, samples, targets, z, rc.inversion);
        auto t4 = clock::now();
        out.times.integration_set += seconds(t0, t1);
        out.times.inference += seconds(t1, t2);
        out.times.mpm += seconds(t2, t3);
        out.times.inversion += seconds(t3, t4);

        out.records.push_back({set.particles.size(), set.nodes.size(), inv.iterations, inv.residual, inv.converged,
                               inv.ill_conditioned});
        z_prev = z;
        z = inv.z;
        out.latents.push_back(z);
        if (rc.decode_frames) {
            const auto t5 = clock::now();
            out.frames.push_back(decode_frame(fields, z));
            out.times.decode += seconds(t5, clock::now());
        }
    }
    out.times.loop = seconds(loop_start, clock::now()) - (out.times.decode - decode_before);
    return out;
}

}  // namespace nsf::rom
