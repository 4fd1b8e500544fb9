#pragma once

// Trained neural fields g (deformation), h (stress), l (affine) and the frame
// encoder e, with their normalization statistics and the NSF1 checkpoint format.
//
// A field maps (X, x̂ [, mu]) to a physical quantity. Inputs are normalized
// before the MLP and outputs de-normalized after it, so callers work in
// physical units throughout.

#include "nsf/binary.hpp"
#include "nsf/core.hpp"
#include "nsf/neural.hpp"

#include <istream>
#include <ostream>
#include <vector>

namespace nsf {

enum class FieldKind : char { deformation = 'g', stress = 'h', affine = 'l' };

inline int field_output_dim(FieldKind k) {
    switch (k) {
        case FieldKind::deformation: return 3;
        case FieldKind::stress: return 6;
        case FieldKind::affine: return 9;
    }
    throw ParameterError("unknown field kind");
}

// Reference positions of the listed particles as a 3 x n matrix (all when `idx` is empty).
inline neural::Matrix gather_positions(const std::vector<Vec3>& X, std::span<const Index> idx = {}) {
    const Index n = idx.empty() ? X.size() : idx.size();
    neural::Matrix out(3, Eigen::Index(n));
    for (Index i = 0; i < n; ++i) out.col(Eigen::Index(i)) = X[idx.empty() ? i : idx[i]];
    return out;
}

struct FieldModel {
    FieldKind kind = FieldKind::deformation;
    int latent_dim = 0;
    bool mu_conditioned = false;
    neural::Mlp mlp;
    neural::Params theta;
    neural::Normalization position;   // reference positions X (3)
    neural::Normalization latent;     // x̂ (r)
    neural::Normalization parameter;  // mu (1); identity unless conditioned
    neural::Normalization output;     // d_out

    int output_dim() const { return field_output_dim(kind); }
    int input_dim() const { return 3 + latent_dim + (mu_conditioned ? 1 : 0); }

    static FieldModel create(FieldKind kind, int latent_dim, int hidden_layers, int hidden_width, bool mu_conditioned,
                             std::uint64_t seed) {
        FieldModel f;
        f.kind = kind;
        f.latent_dim = latent_dim;
        f.mu_conditioned = mu_conditioned;
        f.mlp = neural::Mlp({3 + latent_dim + (mu_conditioned ? 1 : 0), field_output_dim(kind), hidden_layers,
                             hidden_width});
        f.theta = f.mlp.xavier(seed);
        f.position = neural::Normalization::identity(3);
        f.latent = neural::Normalization::identity(latent_dim);
        f.parameter = neural::Normalization::identity(1);
        f.output = neural::Normalization::identity(field_output_dim(kind));
        return f;
    }

    // Normalized network input for reference positions X (3 x n) at one latent.
    neural::Matrix inputs(const neural::Matrix& X, const neural::Vector& z, double mu = 0.0) const {
        if (X.rows() != 3) throw ShapeError("field: reference positions must be 3 x n");
        if (z.size() != latent_dim) throw ShapeError("field: latent dimension mismatch");
        neural::Matrix in(input_dim(), X.cols());
        in.topRows(3) = position.normalize(X);
        const neural::Vector zn = (z - latent.mean).cwiseQuotient(latent.std);
        in.middleRows(3, latent_dim) = zn.replicate(1, X.cols());
        if (mu_conditioned) in.bottomRows(1).setConstant((mu - parameter.mean(0)) / parameter.std(0));
        return in;
    }

    // Output components with zero variance in the training data are constants:
    // the field emits their mean and the network rows are ignored.
    void mask_constant_outputs(neural::Matrix& y) const {
        for (int c = 0; c < output.dim(); ++c)
            if (output.clamped[c]) y.row(c).setZero();
    }

    // Physical outputs (d_out x n).
    neural::Matrix predict(const neural::Matrix& X, const neural::Vector& z, double mu = 0.0) const {
        neural::Matrix y = mlp.forward(theta, inputs(X, z, mu));
        mask_constant_outputs(y);
        y = output.denormalize(y);
        if (!y.allFinite()) throw ModelCorruptionError("field: non-finite decoder output");
        return y;
    }

    // d(output)/d(x̂) in physical units, rows ordered (particle, component): (d_out * n) x r.
    neural::Matrix latent_jacobian(const neural::Matrix& X, const neural::Vector& z, double mu = 0.0,
                                   neural::Matrix* value = nullptr) const {
        neural::Mlp::Cache cache;
        neural::Matrix y = mlp.forward(theta, inputs(X, z, mu), &cache);
        if (value) {
            mask_constant_outputs(y);
            *value = output.denormalize(y);
        }
        const int d = output_dim();
        const Eigen::Index n = X.cols();
        neural::Matrix J = neural::Matrix::Zero(d * n, latent_dim);
        for (int c = 0; c < d; ++c) {
            if (output.clamped[c]) continue;
            neural::Matrix up = neural::Matrix::Zero(d, n);
            up.row(c).setOnes();
            const neural::Matrix din = mlp.backward(theta, cache, up, {}, true);
            for (Eigen::Index p = 0; p < n; ++p)
                for (int j = 0; j < latent_dim; ++j) J(p * d + c, j) = din(3 + j, p) * output.std(c) / latent.std(j);
        }
        if (!J.allFinite()) throw ModelCorruptionError("field: non-finite decoder Jacobian");
        return J;
    }
};

inline Mat3 stress_from_output(const neural::Matrix& y, Eigen::Index col) { return from_voigt(y.col(col)); }

inline Mat3 affine_from_output(const neural::Matrix& y, Eigen::Index col) {
    Mat3 C;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) C(i, j) = y(3 * i + j, col);
    return C;
}

struct EncoderModel {
    neural::Encoder encoder;
    neural::Params theta;
    neural::Normalization frame;  // per-coordinate statistics of current positions

    int latent_dim() const { return encoder.spec().latent_dim; }

    neural::Matrix normalized_frame(const std::vector<Vec3>& x) const {
        if (Index(x.size()) != encoder.spec().sequence_length) throw ShapeError("encoder: particle count mismatch");
        return frame.normalize(gather_positions(x));
    }

    neural::Vector encode(const std::vector<Vec3>& x) const {
        return encoder.forward(theta, normalized_frame(x));
    }
};

// ---------------------------------------------------------------------------
// NSF1 checkpoint: one stream per network.
//   "NSF1" u32 version u8 tag ('g' 'h' 'l' 'e')
//   spec fields (see write_field / write_encoder), u32 normalization-block count, blocks
//   u64 layer count, (u64 offset, u64 size) per layer, u64 parameter count, f64 payload

namespace checkpoint {

inline constexpr std::uint32_t kVersion = 1;

inline void put_normalization(std::ostream& os, const neural::Normalization& n) {
    binary::put<std::uint32_t>(os, std::uint32_t(n.dim()));
    binary::put_doubles(os, n.mean.data(), n.dim());
    binary::put_doubles(os, n.std.data(), n.dim());
    for (auto c : n.clamped) binary::put<std::uint8_t>(os, c);
}

inline neural::Normalization get_normalization(std::istream& is) {
    const auto dim = binary::get<std::uint32_t>(is);
    if (dim > 4096) throw FormatError("checkpoint: implausible normalization size");
    neural::Normalization n{neural::Vector(dim), neural::Vector(dim), std::vector<std::uint8_t>(dim)};
    binary::get_doubles(is, n.mean.data(), dim);
    binary::get_doubles(is, n.std.data(), dim);
    for (auto& c : n.clamped) c = binary::get<std::uint8_t>(is);
    for (Index i = 0; i < dim; ++i)
        if (!(n.std(Eigen::Index(i)) > 0.0)) throw FormatError("checkpoint: non-positive normalization std");
    return n;
}

inline void put_manifest(std::ostream& os, const std::vector<std::pair<Index, Index>>& layers) {
    binary::put<std::uint64_t>(os, layers.size());
    for (const auto& [offset, size] : layers) {
        binary::put<std::uint64_t>(os, offset);
        binary::put<std::uint64_t>(os, size);
    }
}

inline std::vector<std::pair<Index, Index>> get_manifest(std::istream& is) {
    const auto n = binary::get<std::uint64_t>(is);
    if (n > 1024) throw FormatError("checkpoint: implausible layer count");
    std::vector<std::pair<Index, Index>> m(n);
    for (auto& [o, s] : m) {
        o = binary::get<std::uint64_t>(is);
        s = binary::get<std::uint64_t>(is);
    }
    return m;
}

inline void put_params(std::ostream& os, const neural::Params& theta) {
    binary::put<std::uint64_t>(os, theta.size());
    binary::put_doubles(os, theta.data(), theta.size());
}

inline neural::Params get_params(std::istream& is, Index expected) {
    const auto n = binary::get<std::uint64_t>(is);
    if (n != expected) throw FormatError("checkpoint: parameter count does not match architecture");
    neural::Params theta(n);
    binary::get_doubles(is, theta.data(), n);
    return theta;
}

inline void write_field(std::ostream& os, const FieldModel& f) {
    binary::put_magic(os, "NSF1");
    binary::put<std::uint32_t>(os, kVersion);
    binary::put<char>(os, char(f.kind));
    const auto& s = f.mlp.spec();
    binary::put<std::int32_t>(os, f.latent_dim);
    binary::put<std::int32_t>(os, s.input_dim);
    binary::put<std::int32_t>(os, s.output_dim);
    binary::put<std::int32_t>(os, s.hidden_layers);
    binary::put<std::int32_t>(os, s.hidden_width);
    binary::put<std::uint8_t>(os, f.mu_conditioned ? 1 : 0);
    binary::put<std::uint32_t>(os, 4);
    put_normalization(os, f.position);
    put_normalization(os, f.latent);
    put_normalization(os, f.parameter);
    put_normalization(os, f.output);
    put_manifest(os, f.mlp.layout());
    put_params(os, f.theta);
    if (!os) throw FormatError("checkpoint: write failed");
}

inline FieldModel read_field(std::istream& is) {
    binary::expect_magic(is, "NSF1", "checkpoint");
    if (binary::get<std::uint32_t>(is) != kVersion) throw FormatError("checkpoint: unsupported version");
    const char tag = binary::get<char>(is);
    if (tag != 'g' && tag != 'h' && tag != 'l') throw FormatError("checkpoint: not a decoder field");
    FieldModel f;
    f.kind = FieldKind(tag);
    f.latent_dim = binary::get<std::int32_t>(is);
    neural::MlpSpec s;
    s.input_dim = binary::get<std::int32_t>(is);
    s.output_dim = binary::get<std::int32_t>(is);
    s.hidden_layers = binary::get<std::int32_t>(is);
    s.hidden_width = binary::get<std::int32_t>(is);
    f.mu_conditioned = binary::get<std::uint8_t>(is) != 0;
    if (f.latent_dim <= 0 || s.output_dim != field_output_dim(f.kind) || s.input_dim != f.input_dim())
        throw FormatError("checkpoint: inconsistent decoder spec");
    try {
        f.mlp = neural::Mlp(s);
    } catch (const ArchitectureError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (binary::get<std::uint32_t>(is) != 4) throw FormatError("checkpoint: expected 4 normalization blocks");
    f.position = get_normalization(is);
    f.latent = get_normalization(is);
    f.parameter = get_normalization(is);
    f.output = get_normalization(is);
    if (f.position.dim() != 3 || f.latent.dim() != f.latent_dim || f.parameter.dim() != 1 ||
        f.output.dim() != s.output_dim)
        throw FormatError("checkpoint: normalization dimensions do not match spec");
    if (get_manifest(is) != f.mlp.layout()) throw FormatError("checkpoint: layer manifest mismatch");
    f.theta = get_params(is, f.mlp.parameter_count());
    return f;
}

inline void write_encoder(std::ostream& os, const EncoderModel& e) {
    binary::put_magic(os, "NSF1");
    binary::put<std::uint32_t>(os, kVersion);
    binary::put<char>(os, 'e');
    const auto& s = e.encoder.spec();
    binary::put<std::uint64_t>(os, s.sequence_length);
    binary::put<std::int32_t>(os, s.latent_dim);
    binary::put<std::int32_t>(os, s.channels);
    binary::put<std::int32_t>(os, s.kernel);
    binary::put<std::int32_t>(os, s.stride);
    binary::put<std::int32_t>(os, s.conv_channels);
    binary::put<std::uint64_t>(os, s.max_length);
    binary::put<std::int32_t>(os, s.dense_width);
    binary::put<std::uint32_t>(os, 1);
    put_normalization(os, e.frame);
    put_manifest(os, e.encoder.layout());
    put_params(os, e.theta);
    if (!os) throw FormatError("checkpoint: write failed");
}

inline EncoderModel read_encoder(std::istream& is) {
    binary::expect_magic(is, "NSF1", "checkpoint");
    if (binary::get<std::uint32_t>(is) != kVersion) throw FormatError("checkpoint: unsupported version");
    if (binary::get<char>(is) != 'e') throw FormatError("checkpoint: not an encoder");
    neural::EncoderSpec s;
    s.sequence_length = binary::get<std::uint64_t>(is);
    s.latent_dim = binary::get<std::int32_t>(is);
    s.channels = binary::get<std::int32_t>(is);
    s.kernel = binary::get<std::int32_t>(is);
    s.stride = binary::get<std::int32_t>(is);
    s.conv_channels = binary::get<std::int32_t>(is);
    s.max_length = binary::get<std::uint64_t>(is);
    s.dense_width = binary::get<std::int32_t>(is);
    if (s.channels != 3 || s.kernel <= 0 || s.stride <= 0 || s.conv_channels <= 0 || s.dense_width <= 0)
        throw FormatError("checkpoint: inconsistent encoder spec");
    EncoderModel e;
    try {
        e.encoder = neural::Encoder(s);
    } catch (const ArchitectureError& err) {
        throw FormatError(std::string("checkpoint: ") + err.what());
    }
    if (binary::get<std::uint32_t>(is) != 1) throw FormatError("checkpoint: expected 1 normalization block");
    e.frame = get_normalization(is);
    if (e.frame.dim() != 3) throw FormatError("checkpoint: encoder normalization must be 3-dimensional");
    if (get_manifest(is) != e.encoder.layout()) throw FormatError("checkpoint: layer manifest mismatch");
    e.theta = get_params(is, e.encoder.parameter_count());
    return e;
}

}  // namespace checkpoint
}  // namespace nsf
