#include "nsf/dataset.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out, err;
};

class Cli : public ::testing::Test {
protected:
    static inline fs::path dir;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("nsf_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "scene.toml") << "[scene]\nname = \"cube_drop\"\ndx = 0.05\ndt = 0.002\nframes = 8\n"
                                             "cells = 4\n[mu]\ntrain = [40, 80]\ntest = [60]\n";
        std::ofstream(dir / "diverge.toml") << "[scene]\ndx = 0.05\ndt = 0.02\nframes = 40\ncells = 4\n"
                                               "[material]\nyoungs = 1e7\n[mu]\ntrain = [40]\ntest = [1e7]\n";
    }
    static void TearDownTestSuite() { fs::remove_all(dir); }

    static CliResult run(const std::string& args) {
        const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
        const std::string cmd = "cd '" + dir.string() + "' && '" NSF_CLI "' " + args + " > '" + out.string() +
                                "' 2> '" + err.string() + "'";
        const int status = std::system(cmd.c_str());
        auto slurp = [](const fs::path& p) {
            std::ifstream is(p);
            std::stringstream ss;
            ss << is.rdbuf();
            return ss.str();
        };
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
    }

    // Dataset and r = 6 checkpoints shared by the deploy tests.
    static void ensure_trained() {
        if (fs::exists(dir / "ck" / "l.nsf")) return;
        ASSERT_EQ(run("generate --scene scene.toml --out-dir ds").code, 0);
        ASSERT_EQ(run("train --dataset-dir ds --field all --out ck --latent-dim 6 --epoch-scale 0.02 "
                      "--beta-g 2 --beta-h 2 --beta-l 2 --quiet")
                      .code,
                  0);
    }
};

}  // namespace

TEST_F(Cli, EvalOnIdenticalFilesPrintsZero) {
    ASSERT_EQ(run("simulate --scene scene.toml --mu 50 --out a.nsfd").code, 0);
    const auto r = run("eval --pred a.nsfd --truth a.nsfd");
    EXPECT_EQ(r.code, 0);
    EXPECT_EQ(r.out, "delta=0\n");
}

TEST_F(Cli, UnknownFlagIsUsageError) {
    EXPECT_EQ(run("simulate --scene scene.toml --mu 50 --out a.nsfd --warp 9").code, 1);
    EXPECT_EQ(run("teleport").code, 1);
    EXPECT_EQ(run("").code, 1);
}

TEST_F(Cli, MissingInputIsUsageError) {
    EXPECT_EQ(run("eval --pred nowhere.nsfd --truth nowhere.nsfd").code, 1);
}

TEST_F(Cli, StressFieldNeedsDeformationCheckpoint) {
    ASSERT_EQ(run("generate --scene scene.toml --out-dir ds_dep").code, 0);
    const auto r = run("train --dataset-dir ds_dep --field h --out empty_ck --quiet");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("dependency"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "empty_ck" / "h.nsf"));
}

TEST_F(Cli, SolverFailureExitsTwoWithoutPartialOutput) {
    const auto r = run("generate --scene diverge.toml --out-dir bad");
    EXPECT_EQ(r.code, 2);
    for (const auto& e : fs::directory_iterator(dir / "bad")) ADD_FAILURE() << "left behind " << e.path();
}

TEST_F(Cli, DeployRefusesTooFewSamples) {
    ensure_trained();
    const auto r = run("deploy --ckpt ck --scene scene.toml --mu 60 --samples 1 --out r.nsfd");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("ceil(r/3) = 2"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "r.nsfd"));
}

TEST_F(Cli, EndToEndPipeline) {
    ensure_trained();
    for (const char* f : {"g.nsf", "e.nsf", "h.nsf", "l.nsf"}) EXPECT_TRUE(fs::exists(dir / "ck" / f)) << f;
    ASSERT_EQ(run("deploy --ckpt ck --scene scene.toml --mu 60 --samples 2 --out r.nsfd --latents r.lat").code, 0);

    std::ifstream ts(dir / "r.nsfd", std::ios::binary);
    const nsf::Trajectory t = nsf::read_trajectory(ts);
    EXPECT_EQ(t.frame_count(), 8u);
    EXPECT_EQ(t.particle_count(), 512u);
    EXPECT_EQ(t.mu, 60.0);
    std::ifstream ls(dir / "r.lat", std::ios::binary);
    const auto z = nsf::read_latents(ls);
    ASSERT_EQ(z.size(), 8u);
    EXPECT_EQ(z[0].size(), 6);

    const auto e = run("eval --pred r.nsfd --truth ds/test_0.nsfd --report eval.txt");
    EXPECT_EQ(e.code, 0);
    EXPECT_EQ(e.out.rfind("delta=", 0), 0u);
    EXPECT_TRUE(fs::exists(dir / "eval.txt"));

    const auto b = run("bench --ckpt ck --scene scene.toml --mu 60 --samples 2 --steps 3 --trials 1 --report b.txt");
    EXPECT_EQ(b.code, 0) << b.err;
    EXPECT_NE(b.out.find("gamma"), std::string::npos);
}
