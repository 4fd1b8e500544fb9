#pragma once

// Training loops for the deformation field g with its encoder e, and for the
// stress (h) and affine (l) fields on frozen latents.
//
// A batch is k whole frames; every particle of every frame in the batch
// contributes to the gradient. Losses are mean squared errors in normalized
// units, averaged over samples (particle-frame pairs).

#include "nsf/dataset.hpp"
#include "nsf/fields.hpp"
#include "nsf/neural.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace nsf::training {

using neural::Matrix;
using neural::Vector;

struct TrainConfig {
    int latent_dim = 4;
    int hidden_layers = 5;
    // Hidden width is beta * d_base with d_base = 3, 6, 9 for g, h, l.
    int beta_g = 8;
    int beta_h = 6;
    int beta_l = 4;
    std::vector<double> learning_rates{1e-3, 5e-4, 2e-4, 1e-4, 5e-5};
    int deformation_epochs = 300;  // per learning rate
    int field_epochs = 600;        // per learning rate, h and l
    double epoch_scale = 1.0;      // desk-scale factor applied to both epoch counts
    int max_batch_frames = 32;
    std::size_t memory_budget_bytes = std::size_t(1) << 30;
    bool condition_stress_on_mu = false;
    std::uint64_t seed = 1;
    neural::AdamConfig adam;
    std::function<void(const std::string&)> log;

    int epochs(int base) const { return std::max(1, int(std::lround(base * epoch_scale))); }

    void validate() const {
        if (latent_dim <= 0) throw ParameterError("train: latent_dim must be positive");
        if (learning_rates.empty()) throw ParameterError("train: empty learning-rate schedule");
        for (double lr : learning_rates)
            if (!(lr > 0.0)) throw ParameterError("train: learning rates must be positive");
        if (!(epoch_scale > 0.0)) throw ParameterError("train: epoch_scale must be positive");
        if (max_batch_frames < 1 || max_batch_frames > 32) throw ParameterError("train: batch frames must be in [1, 32]");
        if (beta_g <= 0 || beta_h <= 0 || beta_l <= 0) throw ParameterError("train: beta must be positive");
    }
};

struct TrainReport {
    std::vector<double> stage_losses;  // mean loss of the last epoch of each learning-rate stage
    double final_loss = 0.0;
    std::size_t steps = 0;
    int batch_frames = 0;
};

// Latents per trajectory, per frame.
using LatentTable = std::vector<std::vector<Vector>>;

struct DeformationTraining {
    FieldModel g;
    EncoderModel e;
    LatentTable latents;
    TrainReport report;
};

namespace detail {

struct FrameRef {
    std::size_t trajectory;
    std::size_t frame;
};

inline std::vector<FrameRef> all_frames(const std::vector<Trajectory>& data) {
    std::vector<FrameRef> refs;
    for (std::size_t t = 0; t < data.size(); ++t)
        for (std::size_t f = 0; f < data[t].frames.size(); ++f) refs.push_back({t, f});
    return refs;
}

inline Index check_data(const std::vector<Trajectory>& data) {
    if (data.empty()) throw ParameterError("train: empty dataset");
    const Index np = data.front().particle_count();
    if (np == 0) throw ParameterError("train: trajectories have no particles");
    for (const auto& t : data) {
        if (t.particle_count() != np) throw ShapeError("train: trajectories differ in particle count");
        if (t.frames.empty()) throw ParameterError("train: trajectory without frames");
        if (t.X != data.front().X) throw ShapeError("train: trajectories differ in reference configuration");
        for (const auto& f : t.frames) {
            if (f.x.size() != np || f.tau.size() != np || f.C.size() != np)
                throw ShapeError("train: frame particle count mismatch");
            for (Index p = 0; p < np; ++p)
                if (!f.x[p].allFinite() || !f.tau[p].allFinite() || !f.C[p].allFinite())
                    throw NumericError("train: non-finite value in dataset");
        }
    }
    return np;
}

// Largest k <= max_batch_frames whose activations fit in the memory budget.
inline int batch_frames(const TrainConfig& cfg, const neural::Mlp& mlp, Index particles, std::size_t frames) {
    std::size_t per_sample = std::size_t(mlp.spec().input_dim) + 2 * std::size_t(mlp.spec().output_dim);
    per_sample += 3 * std::size_t(mlp.spec().hidden_layers) * std::size_t(mlp.spec().hidden_width);
    const std::size_t per_frame = per_sample * particles * sizeof(double);
    const std::size_t fit = std::max<std::size_t>(1, cfg.memory_budget_bytes / std::max<std::size_t>(1, per_frame));
    return int(std::min<std::size_t>({std::size_t(cfg.max_batch_frames), fit, frames}));
}

inline void shuffle(std::vector<FrameRef>& refs, std::mt19937_64& rng) {
    for (std::size_t i = refs.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(refs[i - 1], refs[pick(rng)]);
    }
}

inline void check_loss(double loss, const char* field, std::size_t stage, int epoch, std::size_t batch) {
    if (std::isfinite(loss)) return;
    std::ostringstream msg;
    msg << "train " << field << ": loss diverged at stage " << stage << ", epoch " << epoch << ", batch " << batch;
    throw DivergenceError(msg.str());
}

inline void log(const TrainConfig& cfg, const std::string& s) {
    if (cfg.log) cfg.log(s);
}

}  // namespace detail

// Joint training of g and e:  min sum ||g(X_p, e(x^n)) - x_p^n||^2.
inline DeformationTraining train_deformation(const std::vector<Trajectory>& data, const TrainConfig& cfg) {
    cfg.validate();
    const Index np = detail::check_data(data);
    const int r = cfg.latent_dim;
    const auto& X = data.front().X;

    DeformationTraining out;
    out.g = FieldModel::create(FieldKind::deformation, r, cfg.hidden_layers, 3 * cfg.beta_g, false, cfg.seed);
    out.e.encoder = neural::Encoder({Index(np), r});
    out.e.theta = out.e.encoder.xavier(cfg.seed + 1);

    // Statistics: X over the reference configuration, positions over all frames.
    const Matrix Xm = gather_positions(X);
    out.g.position = neural::fit_normalization(Xm);
    neural::NormalizationBuilder pos(3);
    for (const auto& t : data)
        for (const auto& f : t.frames)
            for (const auto& x : f.x) pos.add(x);
    out.g.output = pos.finish();
    out.e.frame = out.g.output;

    auto refs = detail::all_frames(data);
    std::vector<std::vector<Matrix>> frames(data.size());
    for (std::size_t t = 0; t < data.size(); ++t)
        for (const auto& f : data[t].frames) frames[t].push_back(out.e.frame.normalize(gather_positions(f.x)));
    const Matrix Xn = out.g.position.normalize(Xm);

    const int k = detail::batch_frames(cfg, out.g.mlp, np, refs.size());
    out.report.batch_frames = k;
    const Eigen::Index P = Eigen::Index(np);
    neural::AdamState adam_g(out.g.mlp.parameter_count());
    neural::AdamState adam_e(out.e.encoder.parameter_count());
    neural::Params grad_g(out.g.mlp.parameter_count());
    neural::Params grad_e(out.e.encoder.parameter_count());
    std::vector<neural::Encoder::Cache> ecache(k);
    neural::Mlp::Cache mcache;
    std::mt19937_64 rng(cfg.seed + 2);
    const int epochs = cfg.epochs(cfg.deformation_epochs);

    for (std::size_t stage = 0; stage < cfg.learning_rates.size(); ++stage) {
        const double lr = cfg.learning_rates[stage];
        double epoch_loss = 0.0;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            detail::shuffle(refs, rng);
            double loss_sum = 0.0;
            std::size_t batch = 0;
            for (std::size_t start = 0; start < refs.size(); start += std::size_t(k), ++batch) {
                const int kb = int(std::min<std::size_t>(std::size_t(k), refs.size() - start));
                Matrix in(3 + r, kb * P);
                Matrix target(3, kb * P);
                for (int b = 0; b < kb; ++b) {
                    const auto& ref = refs[start + b];
                    const Matrix& fn = frames[ref.trajectory][ref.frame];
                    const Vector z = out.e.encoder.forward(out.e.theta, fn, &ecache[b]);
                    in.block(0, b * P, 3, P) = Xn;
                    in.block(3, b * P, r, P) = z.replicate(1, P);
                    target.middleCols(b * P, P) = fn;
                }
                const Matrix y = out.g.mlp.forward(out.g.theta, in, &mcache);
                Matrix resid = y - target;
                out.g.mask_constant_outputs(resid);
                const double n = double(kb * P);
                const double loss = resid.squaredNorm() / n;
                detail::check_loss(loss, "g", stage, epoch, batch);
                loss_sum += loss * kb;

                std::fill(grad_g.begin(), grad_g.end(), 0.0);
                std::fill(grad_e.begin(), grad_e.end(), 0.0);
                const Matrix din = out.g.mlp.backward(out.g.theta, mcache, (2.0 / n) * resid, grad_g, true);
                for (int b = 0; b < kb; ++b) {
                    const Vector dz = din.block(3, b * P, r, P).rowwise().sum();
                    out.e.encoder.backward(out.e.theta, ecache[b], dz, grad_e);
                }
                neural::adam_step(out.g.theta, grad_g, adam_g, lr, cfg.adam);
                neural::adam_step(out.e.theta, grad_e, adam_e, lr, cfg.adam);
                ++out.report.steps;
            }
            epoch_loss = loss_sum / double(refs.size());
        }
        out.report.stage_losses.push_back(epoch_loss);
        detail::log(cfg, "g stage " + std::to_string(stage) + " lr " + std::to_string(lr) + " loss " +
                             std::to_string(epoch_loss));
    }
    out.report.final_loss = out.report.stage_losses.back();

    out.latents.resize(data.size());
    for (std::size_t t = 0; t < data.size(); ++t)
        for (const auto& fn : frames[t]) out.latents[t].push_back(out.e.encoder.forward(out.e.theta, fn));
    return out;
}

namespace detail {

// Raw regression targets of one frame as a d x |P| matrix.
inline void field_targets(FieldKind kind, const Frame& f, Matrix& out) {
    const Index np = f.x.size();
    out.resize(field_output_dim(kind), Eigen::Index(np));
    for (Index p = 0; p < np; ++p) {
        const auto col = Eigen::Index(p);
        if (kind == FieldKind::stress) {
            out.col(col) = to_voigt(f.tau[p]);
        } else {
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) out(3 * i + j, col) = f.C[p](i, j);
        }
    }
}

inline FieldModel train_field(FieldKind kind, const std::vector<Trajectory>& data, const LatentTable& latents,
                              const TrainConfig& cfg, TrainReport* report) {
    cfg.validate();
    const Index np = check_data(data);
    if (latents.size() != data.size()) throw ShapeError("train: latent table does not match dataset");
    for (std::size_t t = 0; t < data.size(); ++t) {
        if (latents[t].size() != data[t].frames.size()) throw ShapeError("train: latent table does not match dataset");
        for (const auto& z : latents[t])
            if (z.size() != cfg.latent_dim) throw ShapeError("train: latent dimension mismatch");
    }
    const int r = cfg.latent_dim;
    const int d = field_output_dim(kind);
    const bool use_mu = kind == FieldKind::stress && cfg.condition_stress_on_mu;
    const int width = (kind == FieldKind::stress ? cfg.beta_h : cfg.beta_l) * d;
    const std::uint64_t seed = cfg.seed + (kind == FieldKind::stress ? 10 : 20);
    FieldModel f = FieldModel::create(kind, r, cfg.hidden_layers, width, use_mu, seed);

    const Matrix Xm = gather_positions(data.front().X);
    f.position = neural::fit_normalization(Xm);
    neural::NormalizationBuilder zs(r), ys(d), ms(1);
    Matrix targets_raw;
    for (std::size_t t = 0; t < data.size(); ++t) {
        for (std::size_t n = 0; n < data[t].frames.size(); ++n) {
            zs.add(latents[t][n]);
            field_targets(kind, data[t].frames[n], targets_raw);
            for (Index p = 0; p < np; ++p) ys.add(targets_raw.col(Eigen::Index(p)));
        }
        ms.add(Vector::Constant(1, data[t].mu));
    }
    f.latent = zs.finish();
    f.output = ys.finish();
    if (use_mu) f.parameter = ms.finish();

    auto refs = all_frames(data);
    const int k = batch_frames(cfg, f.mlp, np, refs.size());
    const Eigen::Index P = Eigen::Index(np);
    TrainReport rep;
    rep.batch_frames = k;
    neural::AdamState adam(f.mlp.parameter_count());
    neural::Params grad(f.mlp.parameter_count());
    neural::Mlp::Cache cache;
    std::mt19937_64 rng(seed + 2);
    const int epochs = cfg.epochs(cfg.field_epochs);

    for (std::size_t stage = 0; stage < cfg.learning_rates.size(); ++stage) {
        const double lr = cfg.learning_rates[stage];
        double epoch_loss = 0.0;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            shuffle(refs, rng);
            double loss_sum = 0.0;
            std::size_t batch = 0;
            for (std::size_t start = 0; start < refs.size(); start += std::size_t(k), ++batch) {
                const int kb = int(std::min<std::size_t>(std::size_t(k), refs.size() - start));
                Matrix in(f.input_dim(), kb * P);
                Matrix target(d, kb * P);
                for (int b = 0; b < kb; ++b) {
                    const auto& ref = refs[start + b];
                    const auto& traj = data[ref.trajectory];
                    in.middleCols(b * P, P) = f.inputs(Xm, latents[ref.trajectory][ref.frame], traj.mu);
                    field_targets(kind, traj.frames[ref.frame], targets_raw);
                    target.middleCols(b * P, P) = f.output.normalize(targets_raw);
                }
                const Matrix y = f.mlp.forward(f.theta, in, &cache);
                Matrix resid = y - target;
                f.mask_constant_outputs(resid);
                const double n = double(kb * P);
                const double loss = resid.squaredNorm() / n;
                check_loss(loss, kind == FieldKind::stress ? "h" : "l", stage, epoch, batch);
                loss_sum += loss * kb;
                std::fill(grad.begin(), grad.end(), 0.0);
                f.mlp.backward(f.theta, cache, (2.0 / n) * resid, grad, false);
                neural::adam_step(f.theta, grad, adam, lr, cfg.adam);
                ++rep.steps;
            }
            epoch_loss = loss_sum / double(refs.size());
        }
        rep.stage_losses.push_back(epoch_loss);
        log(cfg, std::string(1, char(kind)) + " stage " + std::to_string(stage) + " lr " + std::to_string(lr) +
                     " loss " + std::to_string(epoch_loss));
    }
    rep.final_loss = rep.stage_losses.back();
    if (report) *report = rep;
    return f;
}

}  // namespace detail

// min sum ||h(X_p, x̂_n) - tau_p^n||^2 over 6 stress components.
inline FieldModel train_stress(const std::vector<Trajectory>& data, const LatentTable& latents, const TrainConfig& cfg,
                               TrainReport* report = nullptr) {
    return detail::train_field(FieldKind::stress, data, latents, cfg, report);
}

// min sum ||l(X_p, x̂_n) - C_p^n||^2 over 9 affine components.
inline FieldModel train_affine(const std::vector<Trajectory>& data, const LatentTable& latents, const TrainConfig& cfg,
                               TrainReport* report = nullptr) {
    return detail::train_field(FieldKind::affine, data, latents, cfg, report);
}

}  // namespace nsf::training
