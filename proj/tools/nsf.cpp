// Command-line front end: simulate, generate, train, deploy, eval, bench.
// Exit codes: 0 success, 1 usage/configuration/dependency error, 2 numerical failure.
// This is the only place that touches the filesystem.

#include "nsf/metrics.hpp"
#include "nsf/rom.hpp"
#include "nsf/scenes.hpp"
#include "nsf/training.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace nsf;

namespace {

// ---------------------------------------------------------------------------
// Files

std::ifstream open_in(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw DependencyError("cannot open '" + p.string() + "'");
    return is;
}

// Writes through a temporary file so a failed write never leaves a partial output.
void write_file(const fs::path& p, const std::function<void(std::ostream&)>& body) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ConfigError("cannot write '" + p.string() + "'");
        body(os);
        os.flush();
        if (!os) {
            os.close();
            fs::remove(tmp);
            throw ConfigError("write failed for '" + p.string() + "'");
        }
    }
    fs::rename(tmp, p);
}

scenes::SceneConfig load_scene(const fs::path& p) {
    auto is = open_in(p);
    auto c = scenes::parse_scene_config(is);
    scenes::validate(c);
    return c;
}

Trajectory load_trajectory(const fs::path& p) {
    auto is = open_in(p);
    return read_trajectory(is);
}

const char* kManifest = "manifest.txt";

std::vector<Trajectory> load_training_set(const fs::path& dir) {
    auto is = open_in(dir / kManifest);
    const auto manifest = scenes::read_manifest(is);
    std::vector<Trajectory> data;
    for (const auto& e : manifest)
        if (e.train) data.push_back(load_trajectory(dir / e.file));
    if (data.empty()) throw DependencyError("no training trajectories in '" + dir.string() + "'");
    return data;
}

fs::path field_path(const fs::path& ckpt, char tag) { return ckpt / (std::string(1, tag) + ".nsf"); }

FieldModel load_field(const fs::path& ckpt, char tag) {
    const fs::path p = field_path(ckpt, tag);
    if (!fs::exists(p)) throw DependencyError("checkpoint '" + p.string() + "' not found");
    auto is = open_in(p);
    return checkpoint::read_field(is);
}

EncoderModel load_encoder(const fs::path& ckpt) {
    const fs::path p = field_path(ckpt, 'e');
    if (!fs::exists(p)) throw DependencyError("checkpoint '" + p.string() + "' not found");
    auto is = open_in(p);
    return checkpoint::read_encoder(is);
}

// ---------------------------------------------------------------------------
// Commands

struct SimulateArgs {
    std::string scene, out;
    double mu = 0.0;
};

int run_simulate(const SimulateArgs& a) {
    const auto cfg = load_scene(a.scene);
    scenes::SimulationSummary s;
    const Trajectory t = scenes::simulate(cfg, a.mu, &s);
    write_file(a.out, [&](std::ostream& os) { write_trajectory(os, t); });
    std::cout << "wrote " << a.out << ": " << t.particle_count() << " particles, " << t.frame_count() << " frames\n";
    if (s.cfl_warning) std::cerr << "warning: CFL condition violated during the run\n";
    return 0;
}

struct GenerateArgs {
    std::string scene, out_dir;
};

int run_generate(const GenerateArgs& a) {
    const auto cfg = load_scene(a.scene);
    const auto split = scenes::make_split(cfg);
    const fs::path dir = a.out_dir;
    fs::create_directories(dir);
    std::vector<fs::path> written;
    scenes::Manifest manifest;
    try {
        for (bool train : {true, false}) {
            const auto& mus = train ? split.train : split.test;
            for (std::size_t i = 0; i < mus.size(); ++i) {
                const std::string name = scenes::dataset_file_name(train, i);
                scenes::SimulationSummary s;
                const Trajectory t = scenes::simulate(cfg, mus[i], &s);
                write_file(dir / name, [&](std::ostream& os) { write_trajectory(os, t); });
                written.push_back(dir / name);
                manifest.push_back({train, mus[i], name});
                std::cout << (train ? "train " : "test  ") << "mu = " << mus[i] << " -> " << name << "\n";
                if (s.cfl_warning) std::cerr << "warning: CFL condition violated for mu = " << mus[i] << "\n";
            }
        }
        write_file(dir / kManifest, [&](std::ostream& os) { scenes::write_manifest(os, manifest); });
        fs::copy_file(a.scene, dir / "scene.toml", fs::copy_options::overwrite_existing);
    } catch (...) {
        for (const auto& p : written) fs::remove(p);
        throw;
    }
    return 0;
}

struct TrainArgs {
    std::string dataset_dir, field = "all", out;
    training::TrainConfig cfg;
    bool quiet = false;
};

int run_train(TrainArgs a) {
    if (!a.quiet) a.cfg.log = [](const std::string& s) { std::cerr << s << "\n"; };
    const auto data = load_training_set(a.dataset_dir);
    const fs::path ckpt = a.out;
    const bool all = a.field == "all";

    training::LatentTable latents;
    if (all || a.field == "g") {
        const auto res = training::train_deformation(data, a.cfg);
        write_file(field_path(ckpt, 'g'), [&](std::ostream& os) { checkpoint::write_field(os, res.g); });
        write_file(field_path(ckpt, 'e'), [&](std::ostream& os) { checkpoint::write_encoder(os, res.e); });
        std::cout << "g: final loss " << res.report.final_loss << ", " << res.report.steps << " steps\n";
        latents = res.latents;
    } else {
        // h and l are trained on the latents of the deformation encoder
        const auto e = load_encoder(ckpt);
        const auto g = load_field(ckpt, 'g');
        if (g.latent_dim != e.latent_dim()) throw DependencyError("g and e checkpoints disagree on r");
        a.cfg.latent_dim = g.latent_dim;
        for (const auto& t : data) {
            latents.emplace_back();
            for (const auto& f : t.frames) latents.back().push_back(e.encode(f.x));
        }
    }
    for (char tag : {'h', 'l'}) {
        if (!all && a.field != std::string(1, tag)) continue;
        training::TrainReport rep;
        const FieldModel f = tag == 'h' ? training::train_stress(data, latents, a.cfg, &rep)
                                        : training::train_affine(data, latents, a.cfg, &rep);
        write_file(field_path(ckpt, tag), [&](std::ostream& os) { checkpoint::write_field(os, f); });
        std::cout << tag << ": final loss " << rep.final_loss << ", " << rep.steps << " steps\n";
    }
    return 0;
}

struct DeployArgs {
    std::string ckpt, scene, out, latents;
    double mu = 0.0, dt_mult = 1.0;
    std::size_t samples = 50;
    long steps = -1;
    std::uint64_t seed = 1;
    rom::InversionConfig inversion;
};

struct Deployment {
    scenes::SceneConfig cfg;
    scenes::Scene scene;
    std::unique_ptr<rom::NeuralFields> fields;
    EncoderModel e;
    std::vector<Index> samples;
    rom::Bootstrap boot;
    double dt = 0.0;
};

Deployment prepare(const DeployArgs& a) {
    Deployment d;
    d.cfg = load_scene(a.scene);
    d.scene = scenes::build_scene(d.cfg, a.mu);
    FieldModel g = load_field(a.ckpt, 'g');
    d.e = load_encoder(a.ckpt);
    auto h = std::make_shared<const FieldModel>(load_field(a.ckpt, 'h'));
    auto l = std::make_shared<const FieldModel>(load_field(a.ckpt, 'l'));
    const int r = g.latent_dim;
    if (d.e.latent_dim() != r || h->latent_dim != r || l->latent_dim != r)
        throw DependencyError("checkpoints disagree on the latent dimension");
    const Index P = d.scene.particles.size();
    if (Index(d.e.encoder.spec().sequence_length) != P)
        throw DependencyError("checkpoint was trained for " + std::to_string(d.e.encoder.spec().sequence_length) +
                              " particles, scene has " + std::to_string(P));
    if (a.samples < rom::min_sample_count(r))
        throw ParameterError("refusing --samples " + std::to_string(a.samples) + ": need at least ceil(r/3) = " +
                             std::to_string(rom::min_sample_count(r)) + " for r = " + std::to_string(r));
    if (!(a.dt_mult > 0.0)) throw ParameterError("--dt-mult must be positive");
    d.samples = rom::select_sample_particles(P, a.samples, r, a.seed);
    d.fields = std::make_unique<rom::NeuralFields>(d.scene.particles.X, std::move(g), h, l, a.mu);
    d.dt = d.scene.sim.dt * a.dt_mult;
    d.boot = rom::bootstrap(*d.fields, d.samples, d.scene.particles.x, d.scene.particles.v, d.dt,
                            d.e.encode(d.scene.particles.x), a.inversion);
    return d;
}

int run_deploy(const DeployArgs& a) {
    Deployment d = prepare(a);
    rom::RolloutConfig rc;
    rc.steps = a.steps >= 0 ? Index(a.steps) : Index(d.cfg.frames - 1);
    rc.dt_multiplier = a.dt_mult;
    rc.inversion = a.inversion;
    const auto out = rom::rollout(*d.fields, d.scene.particles, d.scene.grid, d.scene.sim, d.samples, d.boot, rc);

    Trajectory t;
    t.mu = a.mu;
    t.dt = out.dt;
    t.dx = d.scene.grid.dx;
    t.X = d.scene.particles.X;
    const auto all = d.fields->all();
    for (std::size_t n = 0; n < out.latents.size(); ++n) {
        Frame f;
        f.x = out.frames[n];
        d.fields->stresses(all, out.latents[n], f.tau);
        for (auto& tau : f.tau) tau = symmetric_stress(tau);
        d.fields->affines(all, out.latents[n], f.C);
        t.frames.push_back(std::move(f));
    }
    write_file(a.out, [&](std::ostream& os) { write_trajectory(os, t); });
    if (!a.latents.empty()) write_file(a.latents, [&](std::ostream& os) { write_latents(os, out.latents); });

    double mean_n = 0.0;
    int flagged = 0, max_it = 0;
    for (const auto& rec : out.records) {
        mean_n += double(rec.integration_particles);
        flagged += !rec.converged || rec.ill_conditioned;
        max_it = std::max(max_it, rec.iterations);
    }
    if (!out.records.empty()) mean_n /= double(out.records.size());
    std::cout << "deployed " << rc.steps << " steps with |S| = " << d.samples.size() << ", mean |N| = " << mean_n
              << ", max Gauss-Newton iterations " << max_it << "\n";
    if (flagged) std::cerr << "warning: " << flagged << " steps ended with an inversion flag\n";
    return 0;
}

struct EvalArgs {
    std::string pred, truth, report;
};

int run_eval(const EvalArgs& a) {
    const Trajectory pred = load_trajectory(a.pred), truth = load_trajectory(a.truth);
    const auto err = metrics::relative_error(pred, truth);
    metrics::EvalReport r;
    r.delta = err.total;
    r.per_frame = err.per_frame;
    r.particles = truth.particle_count();
    std::cout << "delta=" << err.total << "\n";
    if (!a.report.empty()) write_file(a.report, [&](std::ostream& os) { os << r.key_values(); });
    return 0;
}

struct BenchArgs {
    DeployArgs deploy;
    std::string truth, report;
    int trials = 10;
    long steps = 100;
};

int run_bench(const BenchArgs& a) {
    Deployment d = prepare(a.deploy);
    const int r = d.fields->latent_dim();
    rom::RolloutConfig rc;
    rc.dt_multiplier = a.deploy.dt_mult;
    rc.inversion = a.deploy.inversion;
    metrics::BenchmarkConfig bc;
    bc.trials = a.trials;
    bc.steps = Index(std::max(1L, a.steps));
    const auto times = metrics::benchmark(*d.fields, d.scene, d.samples, d.boot, rc, bc);

    metrics::EvalReport rep;
    rep.particles = d.scene.particles.size();
    rep.latent_dim = r;
    rep.gamma = metrics::reduction_ratio(rep.particles, r);
    rep.samples = d.samples.size();
    metrics::record_times(rep, times, bc);
    const std::size_t params = d.fields->deformation().theta.size() + d.e.theta.size();
    rep.full_memory_bytes = metrics::full_order_bytes(rep.particles, d.scene.grid.node_count());
    rep.reduced_memory_bytes = metrics::reduced_bytes(rep.particles, Index(rep.mean_integration_particles),
                                                      d.scene.grid.node_count(), params, r);
    if (!a.truth.empty()) {
        const Trajectory truth = load_trajectory(a.truth);
        rc.steps = truth.frame_count() - 1;
        const auto out = rom::rollout(*d.fields, d.scene.particles, d.scene.grid, d.scene.sim, d.samples, d.boot, rc);
        const auto err = metrics::relative_error(
            metrics::PositionFrames(out.frames.begin() + 1, out.frames.end()),
            [&] {
                metrics::PositionFrames f;
                for (std::size_t n = 1; n < truth.frame_count(); ++n) f.push_back(truth.frames[n].x);
                return f;
            }());
        rep.delta = err.total;
        rep.per_frame = err.per_frame;
    }
    std::cout << rep.text();
    if (!a.report.empty()) write_file(a.report, [&](std::ostream& os) { os << rep.key_values(); });
    return 0;
}

void add_inversion_options(CLI::App* cmd, rom::InversionConfig& inv) {
    cmd->add_option("--iterations", inv.max_iterations, "Gauss-Newton iterations per step")->check(CLI::PositiveNumber);
    cmd->add_option("--tolerance", inv.tolerance, "normalized residual tolerance");
    cmd->add_flag("--damping", inv.damping, "halve steps that increase the residual");
    cmd->add_flag("--linearized", inv.linearized, "one linearized solve per step");
}

void add_deploy_options(CLI::App* cmd, DeployArgs& a) {
    cmd->add_option("--ckpt", a.ckpt, "checkpoint directory")->required();
    cmd->add_option("--scene", a.scene, "scene configuration")->required()->check(CLI::ExistingFile);
    cmd->add_option("--mu", a.mu, "problem parameter")->required();
    cmd->add_option("--samples", a.samples, "number of sample particles");
    cmd->add_option("--dt-mult", a.dt_mult, "deployment time-step multiplier");
    cmd->add_option("--seed", a.seed, "sample selection seed");
    add_inversion_options(cmd, a.inversion);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reduced-order elastoplastic simulation with neural stress fields"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* c_sim = app.add_subcommand("simulate", "run one full-order simulation");
    c_sim->add_option("--scene", sim.scene, "scene configuration")->required()->check(CLI::ExistingFile);
    c_sim->add_option("--mu", sim.mu, "problem parameter")->required();
    c_sim->add_option("--out", sim.out, "output .nsfd")->required();

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "simulate every mu of a scene and write the manifest");
    c_gen->add_option("--scene", gen.scene, "scene configuration")->required()->check(CLI::ExistingFile);
    c_gen->add_option("--out-dir", gen.out_dir, "dataset directory")->required();

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "train neural fields");
    c_tr->add_option("--dataset-dir", tr.dataset_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    c_tr->add_option("--field", tr.field, "g (with encoder), h, l or all")
        ->check(CLI::IsMember({"g", "h", "l", "all"}));
    c_tr->add_option("--out", tr.out, "checkpoint directory")->required();
    c_tr->add_option("--latent-dim", tr.cfg.latent_dim, "latent dimension r")->check(CLI::PositiveNumber);
    c_tr->add_option("--hidden-layers", tr.cfg.hidden_layers)->check(CLI::PositiveNumber);
    c_tr->add_option("--beta-g", tr.cfg.beta_g, "g width = 3 beta_g")->check(CLI::PositiveNumber);
    c_tr->add_option("--beta-h", tr.cfg.beta_h, "h width = 6 beta_h")->check(CLI::PositiveNumber);
    c_tr->add_option("--beta-l", tr.cfg.beta_l, "l width = 9 beta_l")->check(CLI::PositiveNumber);
    c_tr->add_option("--epoch-scale", tr.cfg.epoch_scale, "scale on the epoch counts");
    c_tr->add_option("--batch-frames", tr.cfg.max_batch_frames)->check(CLI::Range(1, 32));
    c_tr->add_option("--seed", tr.cfg.seed);
    c_tr->add_flag("--condition-mu", tr.cfg.condition_stress_on_mu, "feed mu to the stress field");
    c_tr->add_flag("--quiet", tr.quiet);

    DeployArgs dep;
    auto* c_dep = app.add_subcommand("deploy", "run latent-space dynamics");
    add_deploy_options(c_dep, dep);
    c_dep->add_option("--steps", dep.steps, "steps (default: scene frames - 1)");
    c_dep->add_option("--out", dep.out, "output .nsfd")->required();
    c_dep->add_option("--latents", dep.latents, "latent trajectory sidecar");

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "relative deformation error of a rollout");
    c_ev->add_option("--pred", ev.pred)->required()->check(CLI::ExistingFile);
    c_ev->add_option("--truth", ev.truth)->required()->check(CLI::ExistingFile);
    c_ev->add_option("--report", ev.report, "key=value report file");

    BenchArgs be;
    auto* c_be = app.add_subcommand("bench", "full-order versus reduced runtime");
    add_deploy_options(c_be, be.deploy);
    c_be->add_option("--steps", be.steps, "steps per trial");
    c_be->add_option("--trials", be.trials)->check(CLI::PositiveNumber);
    c_be->add_option("--truth", be.truth, "ground-truth .nsfd for delta")->check(CLI::ExistingFile);
    c_be->add_option("--report", be.report, "key=value report file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*c_sim) return run_simulate(sim);
        if (*c_gen) return run_generate(gen);
        if (*c_tr) return run_train(tr);
        if (*c_dep) return run_deploy(dep);
        if (*c_ev) return run_eval(ev);
        if (*c_be) return run_bench(be);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const OutOfDomainError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const UndefinedMetricError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
