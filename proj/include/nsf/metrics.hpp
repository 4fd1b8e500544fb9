#pragma once

// Evaluation: relative deformation error, reduction ratio, stress error,
// resolution upsampling and the full-versus-reduced runtime benchmark.

#include "nsf/rom.hpp"
#include "nsf/scenes.hpp"

#include <chrono>
#include <charconv>
#include <sstream>
#include <string>
#include <vector>

namespace nsf::metrics {

using neural::Matrix;
using neural::Vector;
using PositionFrames = std::vector<std::vector<Vec3>>;

struct ErrorSeries {
    double total = 0.0;              // sqrt(sum |pred - truth|^2 / sum |truth|^2) over all frames
    std::vector<double> per_frame;   // the same ratio frame by frame (NaN for an all-zero truth frame)
};

namespace detail {

template <class Diff, class Ref>
ErrorSeries relative(std::size_t frames, std::size_t count, Diff&& diff2, Ref&& ref2, bool zero_over_zero_is_zero) {
    ErrorSeries s;
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < frames; ++n) {
        double fn = 0.0, fd = 0.0;
        for (std::size_t p = 0; p < count; ++p) {
            fn += diff2(n, p);
            fd += ref2(n, p);
        }
        num += fn;
        den += fd;
        s.per_frame.push_back(fd > 0.0 ? std::sqrt(fn / fd) : std::numeric_limits<double>::quiet_NaN());
    }
    if (!std::isfinite(num) || !std::isfinite(den)) throw NumericError("metrics: non-finite error sums");
    if (den == 0.0) {
        if (zero_over_zero_is_zero && num == 0.0) return s.total = 0.0, s;
        throw UndefinedMetricError("metrics: relative error undefined for an all-zero reference");
    }
    s.total = std::sqrt(num / den);
    return s;
}

inline void check_shapes(const PositionFrames& a, const PositionFrames& b) {
    if (a.size() != b.size()) throw ShapeError("metrics: frame counts differ");
    for (std::size_t n = 0; n < a.size(); ++n)
        if (a[n].size() != b[n].size()) throw ShapeError("metrics: particle counts differ");
    if (a.empty()) throw ShapeError("metrics: no frames");
}

}  // namespace detail

// Total relative deformation error over the given frames; the denominator is the truth.
inline ErrorSeries relative_error(const PositionFrames& pred, const PositionFrames& truth) {
    detail::check_shapes(pred, truth);
    return detail::relative(
        truth.size(), truth.front().size(), [&](std::size_t n, std::size_t p) { return (pred[n][p] - truth[n][p]).squaredNorm(); },
        [&](std::size_t n, std::size_t p) { return truth[n][p].squaredNorm(); }, false);
}

// Frames 1..N of two trajectories (frame 0 is the shared initial state).
inline ErrorSeries relative_error(const Trajectory& pred, const Trajectory& truth) {
    if (pred.frame_count() != truth.frame_count()) throw ShapeError("metrics: frame counts differ");
    if (pred.particle_count() != truth.particle_count()) throw ShapeError("metrics: particle counts differ");
    const std::size_t first = truth.frame_count() > 1 ? 1 : 0;
    PositionFrames a, b;
    for (std::size_t n = first; n < truth.frame_count(); ++n) {
        a.push_back(pred.frames[n].x);
        b.push_back(truth.frames[n].x);
    }
    return relative_error(a, b);
}

// Same structure on the six independent stress components; zero over zero is zero.
inline ErrorSeries stress_error(const std::vector<std::vector<Mat3>>& pred, const std::vector<std::vector<Mat3>>& truth) {
    if (pred.size() != truth.size() || truth.empty()) throw ShapeError("metrics: frame counts differ");
    for (std::size_t n = 0; n < truth.size(); ++n)
        if (pred[n].size() != truth[n].size()) throw ShapeError("metrics: particle counts differ");
    return detail::relative(
        truth.size(), truth.front().size(),
        [&](std::size_t n, std::size_t p) { return (to_voigt(pred[n][p]) - to_voigt(truth[n][p])).squaredNorm(); },
        [&](std::size_t n, std::size_t p) { return to_voigt(truth[n][p]).squaredNorm(); }, true);
}

// gamma = 3|P| / r
inline double reduction_ratio(Index particles, int latent_dim) {
    if (latent_dim <= 0) throw ParameterError("metrics: latent dimension must be positive");
    const Index full = 3 * particles;
    if (full % Index(latent_dim) == 0) return double(full / Index(latent_dim));
    return double(full) / double(latent_dim);
}

// ---------------------------------------------------------------------------
// Upsampling

struct Upsampled {
    PositionFrames frames;
    Index outside_reference_box = 0;  // query points beyond the training bounding box
    bool extrapolation_warning() const { return outside_reference_box > 0; }
};

// Decodes g at arbitrary reference points for every latent; no simulation.
inline Upsampled upsample(const rom::NeuralFields& fields, const std::vector<Vector>& latents,
                          const std::vector<Vec3>& X_train, const std::vector<Vec3>& X_query) {
    Upsampled out;
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (const auto& x : X_train) {
        lo = lo.cwiseMin(x);
        hi = hi.cwiseMax(x);
    }
    for (const auto& q : X_query)
        if ((q.array() < lo.array()).any() || (q.array() > hi.array()).any()) ++out.outside_reference_box;
    const Matrix Xq = gather_positions(X_query);
    for (const auto& z : latents) {
        const Matrix x = fields.positions_at(Xq, z);
        std::vector<Vec3> f(X_query.size());
        for (std::size_t q = 0; q < f.size(); ++q) f[q] = x.col(Eigen::Index(q));
        out.frames.push_back(std::move(f));
    }
    return out;
}

// `factor` seeded query points per training particle, uniform in the cube
// of side `spacing` around it.
inline std::vector<Vec3> dense_reference(const std::vector<Vec3>& X, double spacing, int factor, std::uint64_t seed) {
    if (factor < 1 || !(spacing > 0.0)) throw ParameterError("metrics: invalid refinement");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.5 * spacing, 0.5 * spacing);
    std::vector<Vec3> out;
    out.reserve(X.size() * factor);
    for (const auto& x : X)
        for (int k = 0; k < factor; ++k) out.push_back(x + Vec3(u(rng), u(rng), u(rng)));
    return out;
}

// ---------------------------------------------------------------------------
// Memory accounting (bytes of live state)

inline std::size_t full_order_bytes(Index particles, Index nodes) {
    // X x v (3 doubles each), mass, volume, F_E C tau (9 each), yield, mu, lambda, damaged flag
    const std::size_t per_particle = (3 * 3 + 2 + 3 * 9 + 3) * sizeof(double) + 1;
    const std::size_t per_node = (1 + 3 * 3) * sizeof(double);
    return particles * per_particle + nodes * per_node;
}

inline std::size_t reduced_bytes(Index particles, Index integration_particles, Index nodes, std::size_t parameters,
                                 int latent_dim) {
    // reference positions and the decoded positions used to rebuild N
    const std::size_t decoded = particles * 6 * sizeof(double);
    // inferred (x, v, tau, C) plus mass and volume on N
    const std::size_t states = integration_particles * (3 + 3 + 9 + 9 + 2) * sizeof(double);
    const std::size_t per_node = (1 + 3 * 3) * sizeof(double);
    return parameters * sizeof(double) + decoded + states + nodes * per_node + 2 * latent_dim * sizeof(double);
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
    double delta = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> per_frame;
    double gamma = 0.0;
    Index particles = 0;
    int latent_dim = 0;
    Index samples = 0;
    double mean_integration_particles = 0.0;
    int trials = 0;
    Index steps = 0;
    double full_seconds_per_100 = 0.0;
    double reduced_seconds_per_100 = 0.0;
    rom::RolloutTimes reduced_breakdown;  // seconds per 100 steps
    double reduced_total_per_100 = 0.0;   // measured around the step loop
    std::size_t full_memory_bytes = 0;
    std::size_t reduced_memory_bytes = 0;

    double integration_ratio() const { return particles ? mean_integration_particles / double(particles) : 0.0; }
    double mpm_time_ratio() const {
        return full_seconds_per_100 > 0.0 ? reduced_breakdown.mpm / full_seconds_per_100 : 0.0;
    }

    std::vector<std::pair<std::string, std::string>> entries() const {
        auto f = [](double v) {
            char buf[64];
            const auto res = std::to_chars(buf, buf + sizeof buf, v);
            return std::string(buf, res.ptr);
        };
        std::vector<std::pair<std::string, std::string>> e{
            {"delta", f(delta)},
            {"gamma", f(gamma)},
            {"particles", std::to_string(particles)},
            {"latent_dim", std::to_string(latent_dim)},
            {"samples", std::to_string(samples)},
            {"mean_integration_particles", f(mean_integration_particles)},
            {"integration_ratio", f(integration_ratio())},
            {"trials", std::to_string(trials)},
            {"steps", std::to_string(steps)},
            {"full_seconds_per_100", f(full_seconds_per_100)},
            {"reduced_seconds_per_100", f(reduced_seconds_per_100)},
            {"reduced_mpm_per_100", f(reduced_breakdown.mpm)},
            {"reduced_inference_per_100", f(reduced_breakdown.inference)},
            {"reduced_inversion_per_100", f(reduced_breakdown.inversion)},
            {"reduced_integration_set_per_100", f(reduced_breakdown.integration_set)},
            {"mpm_time_ratio", f(mpm_time_ratio())},
            {"full_memory_bytes", std::to_string(full_memory_bytes)},
            {"reduced_memory_bytes", std::to_string(reduced_memory_bytes)},
        };
        std::string series;
        for (std::size_t n = 0; n < per_frame.size(); ++n) series += (n ? "," : "") + f(per_frame[n]);
        e.emplace_back("per_frame_delta", series);
        return e;
    }

    std::string key_values() const {
        std::string out;
        for (const auto& [k, v] : entries()) out += k + "=" + v + "\n";
        return out;
    }

    std::string text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(4);
        os << "relative deformation error  delta = " << 100.0 * delta << " %\n";
        os << "reduction ratio             gamma = " << gamma << "  (|P| = " << particles << ", r = " << latent_dim
           << ")\n";
        os << "sample particles            |S| = " << samples << "\n";
        os << "integration particles       mean |N| = " << mean_integration_particles << "  ("
           << 100.0 * integration_ratio() << " % of |P|)\n";
        if (trials > 0) {
            os << "runtime per 100 steps, mean of " << trials << " trials\n";
            os << "  full order                " << full_seconds_per_100 << " s\n";
            os << "  reduced                   " << reduced_seconds_per_100 << " s\n";
            os << "    mpm stepping            " << reduced_breakdown.mpm << " s  ("
               << 100.0 * mpm_time_ratio() << " % of full order)\n";
            os << "    network inference       " << reduced_breakdown.inference << " s\n";
            os << "    inversion               " << reduced_breakdown.inversion << " s\n";
            os << "    integration set         " << reduced_breakdown.integration_set << " s\n";
        }
        os << "memory estimate             full " << full_memory_bytes / 1048576.0 << " MiB, reduced "
           << reduced_memory_bytes / 1048576.0 << " MiB\n";
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Benchmark

struct BenchmarkConfig {
    int trials = 10;
    Index steps = 100;
};

struct BenchmarkTimes {
    double full = 0.0;
    double reduced = 0.0;  // step loop
    rom::RolloutTimes breakdown;
    double mean_integration_particles = 0.0;
};

// Mean wall-clock of `steps` full-order steps and of a reduced rollout of
// the same length (without frame decoding), over `trials` repetitions.
// Timers exclude all I/O.
inline BenchmarkTimes benchmark(const rom::FieldSet& fields, const scenes::Scene& scene,
                                const std::vector<Index>& samples, const rom::Bootstrap& boot,
                                rom::RolloutConfig rc, const BenchmarkConfig& bc) {
    using clock = std::chrono::steady_clock;
    if (bc.trials < 1 || bc.steps < 1) throw ParameterError("bench: need at least one trial and one step");
    rc.steps = bc.steps;
    rc.decode_frames = false;
    BenchmarkTimes t;
    for (int trial = 0; trial < bc.trials; ++trial) {
        auto ps = scene.particles;
        auto g = scene.grid;
        const auto t0 = clock::now();
        for (Index n = 0; n < bc.steps; ++n) mpm::step(ps, g, scene.sim);
        t.full += std::chrono::duration<double>(clock::now() - t0).count();

        const auto out = rom::rollout(fields, scene.particles, scene.grid, scene.sim, samples, boot, rc);
        t.reduced += out.times.loop;
        t.breakdown.inference += out.times.inference;
        t.breakdown.integration_set += out.times.integration_set;
        t.breakdown.mpm += out.times.mpm;
        t.breakdown.inversion += out.times.inversion;
        double mean_n = 0.0;
        for (const auto& r : out.records) mean_n += double(r.integration_particles);
        t.mean_integration_particles += mean_n / double(out.records.size());
    }
    const double k = 1.0 / bc.trials;
    t.full *= k;
    t.reduced *= k;
    t.breakdown.inference *= k;
    t.breakdown.integration_set *= k;
    t.breakdown.mpm *= k;
    t.breakdown.inversion *= k;
    t.mean_integration_particles *= k;
    return t;
}

// Fills the runtime fields of a report (per 100 steps) from benchmark times.
inline void record_times(EvalReport& r, const BenchmarkTimes& t, const BenchmarkConfig& bc) {
    const double per100 = 100.0 / double(bc.steps);
    r.trials = bc.trials;
    r.steps = bc.steps;
    r.full_seconds_per_100 = t.full * per100;
    r.reduced_seconds_per_100 = t.reduced * per100;
    r.reduced_total_per_100 = r.reduced_seconds_per_100;
    r.reduced_breakdown.inference = t.breakdown.inference * per100;
    r.reduced_breakdown.integration_set = t.breakdown.integration_set * per100;
    r.reduced_breakdown.mpm = t.breakdown.mpm * per100;
    r.reduced_breakdown.inversion = t.breakdown.inversion * per100;
    r.mean_integration_particles = t.mean_integration_particles;
}

}  // namespace nsf::metrics
