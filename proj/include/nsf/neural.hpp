#pragma once

// Neural-field building blocks: dense and 1D-convolution layers with manual
// reverse-mode gradients, ELU, Xavier initialization, the coordinate MLP
// decoder, the convolutional frame encoder, Adam, and data normalization.
//
// Activations are column-major matrices with one sample per column
// (dense layers) or one channel per row (convolutions). Parameters of a
// network live in one flat vector; each layer owns a contiguous slice
// [offset, offset + size).

#include "nsf/core.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

namespace nsf::neural {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
// Aligned storage keeps Eigen's vectorized kernels on the same code path for
// every allocation, which serial bitwise reproducibility depends on.
using Params = std::vector<double, Eigen::aligned_allocator<double>>;

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_derivative(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

// Branch-free so Eigen vectorizes the exponential: max(z, 0) + exp(min(z, 0)) - 1.
inline Matrix elu(const Matrix& z) {
    return (z.array().max(0.0) + (z.array().min(0.0).exp() - 1.0)).matrix();
}

// dL/dz given dL/da and the activation a = elu(z), using elu'(z) = min(1, a + 1).
inline Matrix elu_backward(const Matrix& a, const Matrix& upstream) {
    return upstream.cwiseProduct((a.array() + 1.0).min(1.0).matrix());
}

// ---------------------------------------------------------------------------

struct DenseLayer {
    int in = 0;
    int out = 0;
    Index offset = 0;

    Index size() const { return Index(in) * out + out; }
    int fan_in() const { return in; }
    int fan_out() const { return out; }

    Eigen::Map<const Matrix> weights(const double* theta) const { return {theta + offset, out, in}; }
    Eigen::Map<const Vector> bias(const double* theta) const { return {theta + offset + Index(in) * out, out}; }

    Matrix forward(const double* theta, const Matrix& x) const {
        Matrix y = weights(theta) * x;
        y.colwise() += bias(theta);
        return y;
    }

    // Accumulates parameter gradients into `grad` (skipped when null) and returns dL/dx.
    Matrix backward(const double* theta, const Matrix& x, const Matrix& dy, double* grad, bool need_input) const {
        if (grad) {
            Eigen::Map<Matrix> gW(grad + offset, out, in);
            Eigen::Map<Vector> gb(grad + offset + Index(in) * out, out);
            gW.noalias() += dy * x.transpose();
            gb += dy.rowwise().sum();
        }
        if (!need_input) return {};
        return weights(theta).transpose() * dy;
    }
};

// Valid 1D convolution over a (channels x length) signal.
struct Conv1dLayer {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 0;
    Index in_length = 0;
    Index out_length = 0;
    Index offset = 0;

    static Index output_length(Index length, int kernel, int stride) {
        return (length - Index(kernel)) / Index(stride) + 1;
    }

    Index weight_count() const { return Index(out_channels) * in_channels * kernel; }
    Index size() const { return weight_count() + out_channels; }
    int fan_in() const { return in_channels * kernel; }
    int fan_out() const { return out_channels * kernel; }

    // Weight (o, c, k) lives at offset + (o * in_channels + c) * kernel + k.
    double w(const double* theta, int o, int c, int k) const {
        return theta[offset + (Index(o) * in_channels + c) * kernel + k];
    }

    Matrix forward(const double* theta, const Matrix& x) const {
        if (x.rows() != in_channels || Index(x.cols()) != in_length) throw ShapeError("conv1d: input shape mismatch");
        Matrix y(out_channels, Eigen::Index(out_length));
        const double* b = theta + offset + weight_count();
        for (int o = 0; o < out_channels; ++o) {
            for (Index t = 0; t < out_length; ++t) {
                double acc = b[o];
                const Index start = t * stride;
                for (int c = 0; c < in_channels; ++c)
                    for (int k = 0; k < kernel; ++k) acc += w(theta, o, c, k) * x(c, Eigen::Index(start + k));
                y(o, Eigen::Index(t)) = acc;
            }
        }
        return y;
    }

    Matrix backward(const double* theta, const Matrix& x, const Matrix& dy, double* grad, bool need_input) const {
        Matrix dx;
        if (need_input) dx = Matrix::Zero(in_channels, Eigen::Index(in_length));
        double* gb = grad + offset + weight_count();
        for (int o = 0; o < out_channels; ++o) {
            for (Index t = 0; t < out_length; ++t) {
                const double g = dy(o, Eigen::Index(t));
                gb[o] += g;
                const Index start = t * stride;
                for (int c = 0; c < in_channels; ++c) {
                    double* gw = grad + offset + (Index(o) * in_channels + c) * kernel;
                    for (int k = 0; k < kernel; ++k) {
                        gw[k] += g * x(c, Eigen::Index(start + k));
                        if (need_input) dx(c, Eigen::Index(start + k)) += g * w(theta, o, c, k);
                    }
                }
            }
        }
        return dx;
    }
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)); biases zero.
template <class Layer>
void xavier_init(const Layer& layer, std::span<double> theta, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / double(layer.fan_in() + layer.fan_out()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Index n_weights = 0;
    if constexpr (std::is_same_v<Layer, DenseLayer>) {
        n_weights = Index(layer.in) * layer.out;
    } else {
        n_weights = layer.weight_count();
    }
    for (Index i = 0; i < n_weights; ++i) theta[layer.offset + i] = dist(rng);
    for (Index i = n_weights; i < layer.size(); ++i) theta[layer.offset + i] = 0.0;
}

// ---------------------------------------------------------------------------
// Coordinate MLP: input -> [hidden (ELU)] x hidden_layers -> output (linear).

struct MlpSpec {
    int input_dim = 0;
    int output_dim = 0;
    int hidden_layers = 5;
    int hidden_width = 0;
};

class Mlp {
public:
    struct Cache {
        std::vector<Matrix> inputs;  // input to each dense layer (activation of the previous one)
    };

    Mlp() = default;
    explicit Mlp(const MlpSpec& spec) : spec_(spec) {
        if (spec.input_dim <= 0 || spec.output_dim <= 0 || spec.hidden_layers < 0 ||
            (spec.hidden_layers > 0 && spec.hidden_width <= 0))
            throw ArchitectureError("mlp: widths must be positive");
        int prev = spec.input_dim;
        Index offset = 0;
        for (int l = 0; l < spec.hidden_layers; ++l) {
            layers_.push_back({prev, spec.hidden_width, offset});
            offset += layers_.back().size();
            prev = spec.hidden_width;
        }
        layers_.push_back({prev, spec.output_dim, offset});
        offset += layers_.back().size();
        parameter_count_ = offset;
    }

    const MlpSpec& spec() const { return spec_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    Index parameter_count() const { return parameter_count_; }

    // (offset, size) of every layer in parameter order.
    std::vector<std::pair<Index, Index>> layout() const {
        std::vector<std::pair<Index, Index>> out;
        for (const auto& l : layers_) out.emplace_back(l.offset, l.size());
        return out;
    }

    Params xavier(std::uint64_t seed) const {
        Params theta(parameter_count_, 0.0);
        std::mt19937_64 rng(seed);
        for (const auto& l : layers_) xavier_init(l, theta, rng);
        return theta;
    }

    Matrix forward(std::span<const double> theta, const Matrix& input, Cache* cache = nullptr) const {
        check(theta, input);
        if (cache) cache->inputs.clear();
        Matrix a = input;
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
            Matrix next = elu(layers_[l].forward(theta.data(), a));
            if (cache) cache->inputs.push_back(std::move(a));
            a = std::move(next);
        }
        Matrix y = layers_.back().forward(theta.data(), a);
        if (cache) cache->inputs.push_back(std::move(a));
        return y;
    }

    // Reverse pass over a cached forward. Parameter gradients accumulate into
    // `grad` (pass an empty span to skip them); the return value is dL/dinput
    // when `need_input`.
    Matrix backward(std::span<const double> theta, const Cache& cache, const Matrix& upstream, std::span<double> grad,
                    bool need_input = true) const {
        if (!grad.empty() && grad.size() != parameter_count_) throw ShapeError("mlp: gradient buffer size mismatch");
        double* g = grad.empty() ? nullptr : grad.data();
        Matrix d = layers_.back().backward(theta.data(), cache.inputs.back(), upstream, g, need_input || layers_.size() > 1);
        for (std::size_t l = layers_.size() - 1; l-- > 0;) {
            d = elu_backward(cache.inputs[l + 1], d);
            d = layers_[l].backward(theta.data(), cache.inputs[l], d, g, need_input || l > 0);
        }
        return d;
    }

private:
    void check(std::span<const double> theta, const Matrix& input) const {
        if (theta.size() != parameter_count_) throw ShapeError("mlp: parameter vector size mismatch");
        if (input.rows() != spec_.input_dim) throw ShapeError("mlp: input dimension mismatch");
    }

    MlpSpec spec_;
    std::vector<DenseLayer> layers_;
    Index parameter_count_ = 0;
};

// ---------------------------------------------------------------------------
// Frame encoder: (3 x |P|) positions -> conv stack (kernel 6, stride 4,
// 3 channels, ELU) until length <= 12 -> flatten -> dense 32 (ELU) -> dense r.

struct EncoderSpec {
    Index sequence_length = 0;
    int latent_dim = 0;
    int channels = 3;
    int kernel = 6;
    int stride = 4;
    int conv_channels = 3;
    Index max_length = 12;
    int dense_width = 32;
};

inline std::vector<Index> encoder_lengths(Index length, int kernel = 6, int stride = 4, Index max_length = 12) {
    if (length < Index(kernel)) throw ArchitectureError("encoder: sequence shorter than one convolution window");
    std::vector<Index> lengths{length};
    do {
        lengths.push_back(Conv1dLayer::output_length(lengths.back(), kernel, stride));
    } while (lengths.back() > max_length && lengths.back() >= Index(kernel));
    return lengths;
}

class Encoder {
public:
    struct Cache {
        std::vector<Matrix> signals;  // frame, then the activation after each convolution
        Matrix flat;
        Matrix hidden;
    };

    Encoder() = default;
    explicit Encoder(const EncoderSpec& spec) : spec_(spec) {
        if (spec.latent_dim <= 0) throw ArchitectureError("encoder: latent dimension must be positive");
        const auto lengths = encoder_lengths(spec.sequence_length, spec.kernel, spec.stride, spec.max_length);
        Index offset = 0;
        int ch = spec.channels;
        for (std::size_t i = 0; i + 1 < lengths.size(); ++i) {
            Conv1dLayer c{ch, spec.conv_channels, spec.kernel, spec.stride, lengths[i], lengths[i + 1], offset};
            offset += c.size();
            convs_.push_back(c);
            ch = spec.conv_channels;
        }
        flat_size_ = int(Index(ch) * lengths.back());
        dense1_ = {flat_size_, spec.dense_width, offset};
        offset += dense1_.size();
        dense2_ = {spec.dense_width, spec.latent_dim, offset};
        offset += dense2_.size();
        parameter_count_ = offset;
    }

    const EncoderSpec& spec() const { return spec_; }
    const std::vector<Conv1dLayer>& convs() const { return convs_; }
    int flat_size() const { return flat_size_; }
    Index parameter_count() const { return parameter_count_; }

    std::vector<std::pair<Index, Index>> layout() const {
        std::vector<std::pair<Index, Index>> out;
        for (const auto& c : convs_) out.emplace_back(c.offset, c.size());
        out.emplace_back(dense1_.offset, dense1_.size());
        out.emplace_back(dense2_.offset, dense2_.size());
        return out;
    }

    Params xavier(std::uint64_t seed) const {
        Params theta(parameter_count_, 0.0);
        std::mt19937_64 rng(seed);
        for (const auto& c : convs_) xavier_init(c, theta, rng);
        xavier_init(dense1_, theta, rng);
        xavier_init(dense2_, theta, rng);
        return theta;
    }

    Vector forward(std::span<const double> theta, const Matrix& frame, Cache* cache = nullptr) const {
        if (theta.size() != parameter_count_) throw ShapeError("encoder: parameter vector size mismatch");
        if (frame.rows() != spec_.channels || Index(frame.cols()) != spec_.sequence_length)
            throw ShapeError("encoder: frame shape mismatch");
        Matrix a = frame;
        if (cache) cache->signals.clear();
        for (const auto& c : convs_) {
            Matrix next = elu(c.forward(theta.data(), a));
            if (cache) cache->signals.push_back(std::move(a));
            a = std::move(next);
        }
        // Flatten channel-major: row c, column t -> c * length + t.
        Matrix flat(flat_size_, 1);
        for (Eigen::Index c = 0; c < a.rows(); ++c)
            for (Eigen::Index t = 0; t < a.cols(); ++t) flat(c * a.cols() + t, 0) = a(c, t);
        Matrix h = elu(dense1_.forward(theta.data(), flat));
        Matrix z = dense2_.forward(theta.data(), h);
        if (cache) {
            cache->signals.push_back(std::move(a));
            cache->flat = std::move(flat);
            cache->hidden = std::move(h);
        }
        return z.col(0);
    }

    // Accumulates parameter gradients for upstream dL/dz; returns dL/dframe when requested.
    Matrix backward(std::span<const double> theta, const Cache& cache, const Vector& dz, std::span<double> grad,
                    bool need_input = false) const {
        if (grad.size() != parameter_count_) throw ShapeError("encoder: gradient buffer size mismatch");
        Matrix d = dense2_.backward(theta.data(), cache.hidden, dz, grad.data(), true);
        d = elu_backward(cache.hidden, d);
        d = dense1_.backward(theta.data(), cache.flat, d, grad.data(), true);
        const Eigen::Index len = cache.signals.back().cols();
        const Eigen::Index ch = cache.signals.back().rows();
        Matrix da(ch, len);
        for (Eigen::Index c = 0; c < ch; ++c)
            for (Eigen::Index t = 0; t < len; ++t) da(c, t) = d(c * len + t, 0);
        for (std::size_t i = convs_.size(); i-- > 0;) {
            const Matrix dzc = elu_backward(cache.signals[i + 1], da);
            da = convs_[i].backward(theta.data(), cache.signals[i], dzc, grad.data(), need_input || i > 0);
        }
        return da;
    }

private:
    EncoderSpec spec_;
    std::vector<Conv1dLayer> convs_;
    DenseLayer dense1_;
    DenseLayer dense2_;
    int flat_size_ = 0;
    Index parameter_count_ = 0;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;

    explicit AdamState(Index n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (grad.size() != theta.size() || state.m.size() != theta.size()) throw ShapeError("adam: size mismatch");
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (Index i = 0; i < theta.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Per-component affine normalization to zero mean and unit variance.

struct Normalization {
    Vector mean;
    Vector std;
    std::vector<std::uint8_t> clamped;  // component had zero variance; std forced to 1

    static Normalization identity(int dim) {
        return {Vector::Zero(dim), Vector::Ones(dim), std::vector<std::uint8_t>(dim, 0)};
    }
    int dim() const { return int(mean.size()); }
    bool any_clamped() const {
        for (auto c : clamped)
            if (c) return true;
        return false;
    }

    Matrix normalize(const Matrix& data) const {
        return (data.colwise() - mean).array().colwise() / std.array();
    }
    Matrix denormalize(const Matrix& data) const {
        return (data.array().colwise() * std.array()).matrix().colwise() + mean;
    }
};

// Streaming accumulator so statistics can be gathered without materializing a dataset copy.
class NormalizationBuilder {
public:
    explicit NormalizationBuilder(int dim) : sum_(Vector::Zero(dim)), sumsq_(Vector::Zero(dim)) {}

    template <class Derived>
    void add(const Eigen::MatrixBase<Derived>& sample) {
        sum_ += sample;
        sumsq_ += sample.cwiseAbs2();
        ++count_;
    }

    Normalization finish() const {
        if (count_ == 0) throw ParameterError("normalization: empty dataset");
        const int dim = int(sum_.size());
        Normalization n{Vector(dim), Vector(dim), std::vector<std::uint8_t>(dim, 0)};
        for (int c = 0; c < dim; ++c) {
            const double mean = sum_(c) / double(count_);
            const double var = std::max(0.0, sumsq_(c) / double(count_) - mean * mean);
            n.mean(c) = mean;
            const double sd = std::sqrt(var);
            if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
                n.std(c) = 1.0;
                n.clamped[c] = 1;
            } else {
                n.std(c) = sd;
            }
        }
        return n;
    }

private:
    Vector sum_;
    Vector sumsq_;
    std::uint64_t count_ = 0;
};

// Two-pass statistics over samples stored as columns.
inline Normalization fit_normalization(const Matrix& data) {
    if (data.cols() == 0) throw ParameterError("normalization: empty dataset");
    const int dim = int(data.rows());
    Normalization n{data.rowwise().mean(), Vector(dim), std::vector<std::uint8_t>(dim, 0)};
    for (int c = 0; c < dim; ++c) {
        const double var = (data.row(c).array() - n.mean(c)).square().mean();
        const double sd = std::sqrt(var);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(n.mean(c))))) {
            n.std(c) = 1.0;
            n.clamped[c] = 1;
        } else {
            n.std(c) = sd;
        }
    }
    return n;
}

}  // namespace nsf::neural
