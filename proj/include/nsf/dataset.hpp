#pragma once

// Trajectory datasets: in-memory frames and the .nsfd binary format, plus the
// .lat latent sidecar.
//
// .nsfd layout (little-endian):
//   "NSFD" u32 version u64 |P| u64 frames f64 mu f64 dt f64 dx   (48 bytes)
//   X_p                                      3|P| f64
//   per frame: positions 3|P|, stresses 6|P| (xx yy zz yz xz xy), affine 9|P| row-major
// Velocities are not part of the format.

#include "nsf/binary.hpp"
#include "nsf/core.hpp"

#include <istream>
#include <ostream>
#include <vector>

namespace nsf {

struct Frame {
    std::vector<Vec3> x;
    std::vector<Mat3> tau;  // symmetric
    std::vector<Mat3> C;
    std::vector<Vec3> v;  // in-memory only; empty after reading a file
};

struct Trajectory {
    double mu = 0.0;
    double dt = 0.0;
    double dx = 0.0;
    std::vector<Vec3> X;
    std::vector<Frame> frames;

    Index particle_count() const { return X.size(); }
    Index frame_count() const { return frames.size(); }
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 48;

inline std::size_t dataset_file_size(Index particles, Index frames) {
    return kDatasetHeaderBytes + frames * (18 * particles * 8) + 3 * particles * 8;
}

// Drops the antisymmetric part so the in-memory stress equals what the file stores.
inline Mat3 symmetric_stress(const Mat3& tau) { return from_voigt(to_voigt(tau)); }

inline void write_trajectory(std::ostream& os, const Trajectory& t) {
    const Index np = t.particle_count();
    binary::put_magic(os, "NSFD");
    binary::put<std::uint32_t>(os, kDatasetVersion);
    binary::put<std::uint64_t>(os, np);
    binary::put<std::uint64_t>(os, t.frame_count());
    binary::put<double>(os, t.mu);
    binary::put<double>(os, t.dt);
    binary::put<double>(os, t.dx);
    for (const auto& X : t.X) binary::put_doubles(os, X.data(), 3);
    std::vector<double> buf;
    for (const auto& f : t.frames) {
        if (f.x.size() != np || f.tau.size() != np || f.C.size() != np)
            throw ShapeError("dataset: frame particle count mismatch");
        buf.clear();
        buf.reserve(18 * np);
        for (const auto& x : f.x) buf.insert(buf.end(), {x(0), x(1), x(2)});
        for (const auto& s : f.tau) {
            const auto v = to_voigt(s);
            buf.insert(buf.end(), v.data(), v.data() + 6);
        }
        for (const auto& C : f.C)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) buf.push_back(C(i, j));
        binary::put_doubles(os, buf.data(), buf.size());
    }
    if (!os) throw FormatError("dataset: write failed");
}

inline Trajectory read_trajectory(std::istream& is) {
    binary::expect_magic(is, "NSFD", "dataset");
    const auto version = binary::get<std::uint32_t>(is);
    if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
    const auto np = binary::get<std::uint64_t>(is);
    const auto nf = binary::get<std::uint64_t>(is);
    Trajectory t;
    t.mu = binary::get<double>(is);
    t.dt = binary::get<double>(is);
    t.dx = binary::get<double>(is);
    if (np > (std::uint64_t(1) << 32) || nf > (std::uint64_t(1) << 32)) throw FormatError("dataset: implausible header");
    t.X.resize(np);
    for (auto& X : t.X) binary::get_doubles(is, X.data(), 3);
    std::vector<double> buf(18 * np);
    t.frames.resize(nf);
    for (auto& f : t.frames) {
        binary::get_doubles(is, buf.data(), buf.size());
        f.x.resize(np);
        f.tau.resize(np);
        f.C.resize(np);
        const double* b = buf.data();
        for (Index p = 0; p < np; ++p, b += 3) f.x[p] = Vec3(b[0], b[1], b[2]);
        for (Index p = 0; p < np; ++p, b += 6) f.tau[p] = from_voigt(Eigen::Map<const Eigen::Matrix<double, 6, 1>>(b));
        for (Index p = 0; p < np; ++p, b += 9) f.C[p] = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(b);
    }
    return t;
}

// Latent sidecar: "NSFL" u32 version u64 frames u64 r, then frames x r f64.
inline void write_latents(std::ostream& os, const std::vector<Eigen::VectorXd>& latents) {
    const Index r = latents.empty() ? 0 : Index(latents.front().size());
    binary::put_magic(os, "NSFL");
    binary::put<std::uint32_t>(os, 1);
    binary::put<std::uint64_t>(os, latents.size());
    binary::put<std::uint64_t>(os, r);
    for (const auto& z : latents) {
        if (Index(z.size()) != r) throw ShapeError("latents: inconsistent dimension");
        binary::put_doubles(os, z.data(), r);
    }
    if (!os) throw FormatError("latents: write failed");
}

inline std::vector<Eigen::VectorXd> read_latents(std::istream& is) {
    binary::expect_magic(is, "NSFL", "latents");
    if (binary::get<std::uint32_t>(is) != 1) throw FormatError("latents: unsupported version");
    const auto n = binary::get<std::uint64_t>(is);
    const auto r = binary::get<std::uint64_t>(is);
    if (r > 4096 || n > (std::uint64_t(1) << 32)) throw FormatError("latents: implausible header");
    std::vector<Eigen::VectorXd> out(n, Eigen::VectorXd(r));
    for (auto& z : out) binary::get_doubles(is, z.data(), r);
    return out;
}

}  // namespace nsf
