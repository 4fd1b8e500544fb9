#pragma once

// Desk-scale scene catalog, scene configuration files, full-order trajectory
// generation and the dataset manifest. Nothing here touches the filesystem;
// the CLI owns all writes.
//
// Scene files are sectioned key = value text (TOML subset), e.g.
//   [scene]
//   name = "cube_drop"
//   dx = 0.025
//   [material]
//   youngs = 60
//   [mu]
//   train = [40, 60, 100]
//   test = [80]

#include "nsf/dataset.hpp"
#include "nsf/mpm.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <functional>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nsf::scenes {

inline const std::vector<std::string>& scene_names() {
    static const std::vector<std::string> names{"cube_drop",     "cube_wall_collision", "sand_column", "bread_tear",
                                                "metal_squeeze", "toothpaste",          "inclined_ball"};
    return names;
}

struct SceneConfig {
    std::string name = "cube_drop";
    double dx = 0.025;
    double dt = 1e-3;
    int frames = 100;          // stored frames including the initial state
    int cells = 10;            // body size in grid cells along its main axis
    int particles_per_axis = 2;  // per cell and axis (8 per cell for 2)
    double jitter = 0.0;       // fraction of the sub-cell spacing
    std::uint64_t seed = 1;
    Vec3 gravity{0.0, -9.8, 0.0};
    mpm::TransferScheme transfer = mpm::TransferScheme::apic;

    double density = 1.0;
    double youngs = 60.0;
    double poisson = 0.3;
    double yield_stress = 0.05;
    double softening = 0.0;
    double viscosity = 0.17;
    double speed = 1.0;            // initial or driving speed
    double weak_scale = 0.05;      // stiffness factor inside the weak region (bread)
    double weak_cells = 1.0;       // weak region thickness in cells

    std::vector<double> train_mu;
    std::vector<double> test_mu;
    std::vector<double> mu_values;  // alternative: split by seeded random choice
    int test_count = 0;

    // The scene's problem parameter, in the unit listed by mu_meaning().
    std::string mu_meaning() const {
        if (name == "cube_drop" || name == "bread_tear") return "Young's modulus";
        if (name == "cube_wall_collision") return "initial speed";
        if (name == "sand_column") return "friction angle (degrees)";
        if (name == "metal_squeeze") return "hardening coefficient";
        if (name == "toothpaste") return "nozzle angle (degrees)";
        return "plane inclination (degrees)";
    }
};

// ---------------------------------------------------------------------------
// Configuration text

namespace detail {

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
        throw ConfigError("config: '" + key + "' expects a number, got '" + s + "'");
    return v;
}

inline long long parse_integer(const std::string& key, const std::string& s) {
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ConfigError("config: '" + key + "' expects an integer, got '" + s + "'");
    return v;
}

}  // namespace detail

inline SceneConfig parse_scene_config(std::istream& is) {
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(is);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    SceneConfig c;
    std::set<std::string> seen;
    for (const auto& it : items) {
        if (it.name == "++" || it.name == "--") continue;
        std::string key;
        for (const auto& p : it.parents) key += p + ".";
        key += it.name;
        if (it.name.find(' ') != std::string::npos || it.parents.size() > 1)
            throw ConfigError("config: malformed line near '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
        const auto& in = it.inputs;
        const auto one = [&]() -> const std::string& {
            if (in.size() != 1) throw ConfigError("config: '" + key + "' expects a single value");
            return in.front();
        };
        const auto num = [&] { return detail::parse_double(key, one()); };
        const auto integer = [&] { return detail::parse_integer(key, one()); };
        const auto list = [&] {
            std::vector<double> out;
            for (const auto& s : in) out.push_back(detail::parse_double(key, s));
            return out;
        };

        if (key == "scene.name") c.name = one();
        else if (key == "scene.dx") c.dx = num();
        else if (key == "scene.dt") c.dt = num();
        else if (key == "scene.frames") c.frames = int(integer());
        else if (key == "scene.cells") c.cells = int(integer());
        else if (key == "scene.particles_per_axis") c.particles_per_axis = int(integer());
        else if (key == "scene.jitter") c.jitter = num();
        else if (key == "scene.seed") c.seed = std::uint64_t(integer());
        else if (key == "scene.transfer") {
            if (one() == "apic") c.transfer = mpm::TransferScheme::apic;
            else if (one() == "pic") c.transfer = mpm::TransferScheme::pic;
            else throw ConfigError("config: transfer must be apic or pic");
        } else if (key == "scene.gravity") {
            const auto g = list();
            if (g.size() != 3) throw ConfigError("config: gravity needs three components");
            c.gravity = Vec3(g[0], g[1], g[2]);
        } else if (key == "scene.speed") c.speed = num();
        else if (key == "scene.weak_scale") c.weak_scale = num();
        else if (key == "scene.weak_cells") c.weak_cells = num();
        else if (key == "material.density") c.density = num();
        else if (key == "material.youngs") c.youngs = num();
        else if (key == "material.poisson") c.poisson = num();
        else if (key == "material.yield_stress") c.yield_stress = num();
        else if (key == "material.softening") c.softening = num();
        else if (key == "material.viscosity") c.viscosity = num();
        else if (key == "mu.train") c.train_mu = list();
        else if (key == "mu.test") c.test_mu = list();
        else if (key == "mu.values") c.mu_values = list();
        else if (key == "mu.test_count") c.test_count = int(integer());
        else throw ConfigError("config: unknown key '" + key + "'");
    }
    return c;
}

inline SceneConfig parse_scene_config(const std::string& text) {
    std::istringstream is(text);
    return parse_scene_config(is);
}

inline void validate(const SceneConfig& c) {
    if (std::find(scene_names().begin(), scene_names().end(), c.name) == scene_names().end())
        throw ConfigError("config: unknown scene '" + c.name + "'");
    if (!(c.dx > 0.0 && c.dx <= 0.1)) throw ConfigError("config: dx must lie in (0, 0.1]");
    if (!(c.dt > 0.0)) throw ConfigError("config: dt must be positive");
    if (c.frames < 2) throw ConfigError("config: need at least two frames");
    if (c.cells < 1 || c.particles_per_axis < 1) throw ConfigError("config: cells and particles_per_axis must be >= 1");
    if (!(c.jitter >= 0.0 && c.jitter < 0.5)) throw ConfigError("config: jitter must lie in [0, 0.5)");
    if (!(c.density > 0.0)) throw ConfigError("config: density must be positive");
    if (!(c.poisson >= 0.0 && c.poisson < 0.5)) throw ConfigError("config: poisson must lie in [0, 0.5)");
    if (!(c.weak_scale >= 0.0 && c.weak_scale <= 1.0)) throw ConfigError("config: weak_scale must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// Train/test split

struct Split {
    std::vector<double> train;
    std::vector<double> test;
};

// Explicit lists when given, otherwise a seeded random choice of test_count values.
inline Split make_split(const SceneConfig& c) {
    Split s;
    if (!c.train_mu.empty() || !c.test_mu.empty()) {
        if (!c.mu_values.empty()) throw ConfigError("config: give either mu.values or mu.train/mu.test");
        s.train = c.train_mu;
        s.test = c.test_mu;
    } else {
        if (c.test_count < 0 || std::size_t(c.test_count) > c.mu_values.size())
            throw ConfigError("config: test_count exceeds the number of mu values");
        std::vector<double> v = c.mu_values;
        std::mt19937_64 rng(c.seed);
        std::shuffle(v.begin(), v.end(), rng);
        s.test.assign(v.begin(), v.begin() + c.test_count);
        s.train.assign(v.begin() + c.test_count, v.end());
        std::sort(s.train.begin(), s.train.end());
        std::sort(s.test.begin(), s.test.end());
    }
    for (double a : s.train)
        for (double b : s.test)
            if (a == b) throw ConfigError("config: train and test mu values overlap");
    if (s.train.empty()) throw ConfigError("config: no training mu values");
    return s;
}

// ---------------------------------------------------------------------------
// Scene construction

struct Scene {
    mpm::ParticleSystem particles;
    mpm::Grid grid;
    mpm::SimConfig sim;
};

namespace detail {

// Regular sub-cell lattice over the cells of the box [lo, hi], kept where `inside` holds.
inline void seed_particles(const SceneConfig& c, const Vec3& lo, const Vec3& hi,
                           const std::function<bool(const Vec3&)>& inside, std::mt19937_64& rng,
                           std::vector<Vec3>& out) {
    const int k = c.particles_per_axis;
    const double h = c.dx / k;
    std::uniform_real_distribution<double> u(-c.jitter * h, c.jitter * h);
    std::array<int, 3> n;
    for (int a = 0; a < 3; ++a) n[a] = int(std::lround((hi[a] - lo[a]) / h));
    for (int i = 0; i < n[0]; ++i)
        for (int j = 0; j < n[1]; ++j)
            for (int l = 0; l < n[2]; ++l) {
                Vec3 x = lo + h * Vec3(i + 0.5, j + 0.5, l + 0.5);
                if (c.jitter > 0.0) x += Vec3(u(rng), u(rng), u(rng));
                if (inside(x)) out.push_back(x);
            }
}

inline Vec3 plane_normal(double degrees) {
    const double a = degrees * std::numbers::pi / 180.0;
    return Vec3(-std::sin(a), std::cos(a), 0.0);
}

}  // namespace detail

// Particle system, grid and solver settings for parameter value mu.
inline Scene build_scene(const SceneConfig& c, double mu) {
    validate(c);
    using constitutive::ElasticModel;
    using constitutive::PlasticModel;
    if (!std::isfinite(mu)) throw ConfigError("scene: mu must be finite");

    Scene s;
    const int nodes = int(std::lround(1.0 / c.dx)) + 1;
    s.grid = mpm::Grid(Vec3::Zero(), c.dx, {nodes, nodes, nodes});
    s.sim.dt = c.dt;
    s.sim.gravity = c.gravity;
    s.sim.transfer = c.transfer;
    s.sim.material.poisson_ratio = c.poisson;

    const double wall = 3.0 * c.dx;
    const double side = c.cells * c.dx;
    const auto add_walls = [&](mpm::BoundaryKind floor_kind) {
        s.grid.boundaries.push_back({floor_kind, Vec3(0, wall, 0), Vec3::UnitY()});
        for (int a : {0, 2}) {
            Vec3 n = Vec3::Zero();
            n[a] = 1.0;
            s.grid.boundaries.push_back({mpm::BoundaryKind::slip, n * wall, n});
            s.grid.boundaries.push_back({mpm::BoundaryKind::slip, n * (1.0 - wall), -n});
        }
        s.grid.boundaries.push_back({mpm::BoundaryKind::slip, Vec3(0, 1.0 - wall, 0), -Vec3::UnitY()});
    };

    double E = c.youngs;
    constitutive::PlasticParams pp;
    Vec3 v0 = Vec3::Zero();
    std::vector<Vec3> pos;
    std::vector<std::uint8_t> weak;
    std::size_t moving = std::numeric_limits<std::size_t>::max();  // particles [0, moving) start with v0
    std::mt19937_64 rng(c.seed);
    const auto box = [&](const Vec3& lo, const Vec3& hi) {
        detail::seed_particles(c, lo, hi, [](const Vec3&) { return true; }, rng, pos);
    };

    if (c.name == "cube_drop") {
        if (!(mu > 0.0)) throw ConfigError("scene: cube_drop needs a positive Young's modulus");
        E = mu;
        add_walls(mpm::BoundaryKind::sticky);
        const Vec3 lo(0.5 - side / 2, wall + 2.0 * c.dx, 0.5 - side / 2);
        box(lo, lo + Vec3::Constant(side));
    } else if (c.name == "cube_wall_collision") {
        if (!(mu >= 0.0)) throw ConfigError("scene: cube_wall_collision needs a non-negative speed");
        add_walls(mpm::BoundaryKind::sticky);
        const Vec3 lo(0.5 - 1.5 * side, wall, 0.5 - side / 2);
        box(lo, lo + Vec3::Constant(side));
        moving = pos.size();
        // jelly wall standing on the floor
        const Vec3 wlo(0.5 + side, wall, 0.5 - side);
        box(wlo, wlo + Vec3(0.5 * side, 2.0 * side, 2.0 * side));
        v0 = Vec3(mu, 0.0, 0.0);
    } else if (c.name == "sand_column") {
        if (!(mu > 0.0 && mu < 90.0)) throw ConfigError("scene: sand_column needs a friction angle in (0, 90) degrees");
        add_walls(mpm::BoundaryKind::sticky);
        pp.model = PlasticModel::drucker_prager;
        pp.friction_angle = mu * std::numbers::pi / 180.0;
        s.sim.material.elastic = ElasticModel::stvk_hencky;
        const Vec3 lo(0.5 - side / 4, wall, 0.5 - side / 4);
        box(lo, lo + Vec3(side / 2, side, side / 2));
    } else if (c.name == "bread_tear") {
        if (!(mu > 0.0)) throw ConfigError("scene: bread_tear needs a positive Young's modulus");
        E = mu;
        s.sim.gravity = Vec3::Zero();
        add_walls(mpm::BoundaryKind::slip);
        const Vec3 lo(0.5 - side, 0.5 - side / 4, 0.5 - side / 4);
        const Vec3 hi = lo + Vec3(2.0 * side, side / 2, side / 2);
        box(lo, hi);
        const double half = c.weak_cells * c.dx / 2;
        for (const auto& x : pos) weak.push_back(std::abs(x.x() - 0.5) < half);
        const double grip = 2.0 * c.dx;
        s.grid.dirichlet.push_back({Vec3(lo.x() - c.dx, 0, 0), Vec3(lo.x() + grip, 1, 1), Vec3(-c.speed, 0, 0)});
        s.grid.dirichlet.push_back({Vec3(hi.x() - grip, 0, 0), Vec3(hi.x() + c.dx, 1, 1), Vec3(c.speed, 0, 0)});
    } else if (c.name == "metal_squeeze") {
        if (!(mu >= 0.0)) throw ConfigError("scene: metal_squeeze needs a non-negative hardening coefficient");
        pp.model = PlasticModel::von_mises;
        pp.yield_stress = c.yield_stress;
        pp.hardening = mu;
        pp.softening = c.softening;
        s.sim.material.elastic = ElasticModel::stvk_hencky;
        s.sim.gravity = Vec3::Zero();
        add_walls(mpm::BoundaryKind::slip);
        // hollow square frame in the xy-plane
        const Vec3 lo(0.5 - side / 2, wall, 0.5 - side / 4);
        const Vec3 hi = lo + Vec3(side, side, side / 2);
        const double t = side / 4;
        detail::seed_particles(
            c, lo, hi,
            [&](const Vec3& x) {
                return x.x() < lo.x() + t || x.x() > hi.x() - t || x.y() < lo.y() + t || x.y() > hi.y() - t;
            },
            rng, pos);
        // a lid pushes down for the first third of the run, then lifts off
        const double squeeze = (c.frames - 1) * c.dt / 3.0;
        s.grid.boundaries.push_back({mpm::BoundaryKind::sticky, Vec3(0, hi.y() + c.dx, 0), -Vec3::UnitY(),
                                     Vec3(0, -c.speed, 0), squeeze});
    } else if (c.name == "toothpaste") {
        if (!(mu >= 0.0 && mu < 80.0)) throw ConfigError("scene: toothpaste needs an angle in [0, 80) degrees");
        pp.model = PlasticModel::herschel_bulkley;
        pp.yield_stress = c.yield_stress;
        pp.viscosity = c.viscosity;
        s.sim.material.elastic = ElasticModel::neo_hookean_volumetric;
        add_walls(mpm::BoundaryKind::sticky);
        // a paste strand leaving the nozzle, tilted by mu from vertical
        const double a = mu * std::numbers::pi / 180.0;
        const Vec3 dir(std::sin(a), -std::cos(a), 0.0);
        const double r = side / 6, len = side;
        const Vec3 tip(0.5, wall + 2.0 * c.dx + len, 0.5);
        detail::seed_particles(
            c, Vec3(0.5 - len, tip.y() - len, 0.5 - r), Vec3(0.5 + len, tip.y() + len, 0.5 + r),
            [&](const Vec3& x) {
                const Vec3 d = x - tip;
                const double along = -d.dot(dir);
                return along >= 0.0 && along <= len && (d + along * dir).norm() <= r;
            },
            rng, pos);
        v0 = c.speed * dir;
    } else {  // inclined_ball
        if (!(mu >= 0.0 && mu < 60.0)) throw ConfigError("scene: inclined_ball needs an inclination in [0, 60) degrees");
        add_walls(mpm::BoundaryKind::slip);
        s.grid.boundaries.front() = {mpm::BoundaryKind::sticky, Vec3(0.5, 0.3, 0.5), detail::plane_normal(mu)};
        const double r = side / 2;
        const Vec3 ctr(0.5, 0.3 + r + 3.0 * c.dx, 0.5);
        detail::seed_particles(
            c, ctr - Vec3::Constant(r), ctr + Vec3::Constant(r), [&](const Vec3& x) { return (x - ctr).norm() <= r; },
            rng, pos);
    }

    constitutive::validate(pp);
    s.sim.material.plastic = pp;
    const auto ep = constitutive::lame_from_E_nu(E, c.poisson);
    const double vol = std::pow(c.dx / c.particles_per_axis, 3);
    for (std::size_t p = 0; p < pos.size(); ++p) {
        const double f = !weak.empty() && weak[p] ? c.weak_scale : 1.0;
        s.particles.add(pos[p], c.density * vol, vol, f * ep.shear_modulus, f * ep.lame_modulus, pp.yield_stress);
        if (p < moving) s.particles.v.back() = v0;
    }
    if (s.particles.size() == 0) throw ConfigError("scene: no particles seeded");
    s.grid.set_mass_epsilon(s.particles.total_mass());
    mpm::refresh_stress(s.particles, s.sim);
    return s;
}

// ---------------------------------------------------------------------------
// Full-order trajectories

inline Frame capture_frame(const mpm::ParticleSystem& ps) {
    Frame f;
    f.x = ps.x;
    f.v = ps.v;
    f.C = ps.C;
    f.tau.resize(ps.size());
    for (Index p = 0; p < ps.size(); ++p) f.tau[p] = symmetric_stress(ps.tau[p]);
    return f;
}

struct SimulationSummary {
    Index inverted_steps = 0;
    bool cfl_warning = false;
};

// Runs the full-order solver from the scene's initial state; frame 0 is the
// initial state and every further frame is one solver step.
inline Trajectory simulate(Scene scene, double mu, int frames, SimulationSummary* summary = nullptr) {
    if (frames < 1) throw ParameterError("simulate: need at least one frame");
    Trajectory t;
    t.mu = mu;
    t.dt = scene.sim.dt;
    t.dx = scene.grid.dx;
    t.X = scene.particles.X;
    t.frames.push_back(capture_frame(scene.particles));
    for (int n = 1; n < frames; ++n) {
        const auto stats = mpm::step(scene.particles, scene.grid, scene.sim);
        for (Index p = 0; p < scene.particles.size(); ++p)
            if (!scene.particles.x[p].allFinite() || !scene.particles.tau[p].allFinite())
                throw NumericError("simulate: non-finite particle state at frame " + std::to_string(n));
        if (summary) {
            summary->inverted_steps += stats.inverted > 0;
            summary->cfl_warning = summary->cfl_warning || stats.cfl_warning;
        }
        t.frames.push_back(capture_frame(scene.particles));
    }
    return t;
}

inline Trajectory simulate(const SceneConfig& c, double mu, SimulationSummary* summary = nullptr) {
    return simulate(build_scene(c, mu), mu, c.frames, summary);
}

// ---------------------------------------------------------------------------
// Manifest: one line per trajectory, "train|test <mu> <file>".

struct ManifestEntry {
    bool train = true;
    double mu = 0.0;
    std::string file;
};

using Manifest = std::vector<ManifestEntry>;

inline void check_manifest(const Manifest& m) {
    std::set<std::string> files;
    for (const auto& e : m) {
        if (!files.insert(e.file).second) throw ConfigError("manifest: duplicate file '" + e.file + "'");
        for (const auto& o : m)
            if (e.train && !o.train && e.mu == o.mu) throw ConfigError("manifest: train and test splits overlap");
    }
}

inline void write_manifest(std::ostream& os, const Manifest& m) {
    check_manifest(m);
    os.precision(17);
    for (const auto& e : m) os << (e.train ? "train " : "test ") << e.mu << ' ' << e.file << '\n';
}

inline Manifest read_manifest(std::istream& is) {
    Manifest m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string split, mu, file;
        if (!(ls >> split >> mu >> file) || (split != "train" && split != "test"))
            throw ConfigError("manifest: malformed line '" + line + "'");
        m.push_back({split == "train", detail::parse_double("mu", mu), file});
    }
    check_manifest(m);
    return m;
}

inline std::string dataset_file_name(bool train, std::size_t index) {
    return std::string(train ? "train_" : "test_") + std::to_string(index) + ".nsfd";
}

}  // namespace nsf::scenes
