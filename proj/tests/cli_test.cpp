#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "vistok/io.hpp"

using namespace vistok;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result vistok_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

json manifest(const fs::path& dir) { return json::parse(io::read_file(dir / "manifest.json")); }

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("vistok_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string p(const std::string& name) const { return (dir_ / name).string(); }

    void write(const std::string& name, const std::string& text) const { io::atomic_write(dir_ / name, text); }

    void small_data(const std::string& name = "data", int n = 12) {
        ASSERT_EQ(vistok_run({"gen-data", "--n", std::to_string(n), "--image-size", "32", "--seed", "3", "--out", p(name)})
                      .code,
                  0);
    }

    // Depth tokenizer on 32x32 scenes with a 4x4 grid and 16 codes.
    Result depth_tokenizer(const std::string& out, std::vector<std::string> extra = {}) {
        write("tok.json", R"({"tokenizer": {"n_conv_layers": 3, "channel_schedule": [4, 8, 8],
                             "downsample_ratio": 8, "codebook_size": 16, "code_dim": 4, "n_resblocks": 1}})");
        std::vector<std::string> args{"train-tokenizer", "--task", "depth", "--data",       p("data"), "--config",
                                      p("tok.json"),     "--lr",   "3e-3",  "--batch-size", "4",       "--out",
                                      p(out)};
        args.insert(args.end(), extra.begin(), extra.end());
        return vistok_run(args);
    }

    Result mask_tokenizer(const std::string& out) {
        write("mtok.json", R"({"tokenizer": {"n_conv_layers": 4, "channel_schedule": [4, 4, 8, 8],
                              "downsample_ratio": 16, "codebook_size": 16, "code_dim": 4, "n_resblocks": 1}})");
        return vistok_run({"train-tokenizer", "--task", "mask", "--data", p("data"), "--config", p("mtok.json"),
                           "--epochs", "1", "--out", p(out)});
    }

    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, HelpAndBadFlags) {
    EXPECT_EQ(vistok_run({"--help"}).code, 0);
    EXPECT_EQ(vistok_run({}).code, 1);
    EXPECT_EQ(vistok_run({"gen-data", "--bogus", "1", "--out", p("x")}).code, 1);
    EXPECT_EQ(vistok_run({"gen-data"}).code, 1);  // --out is required
}

TEST_F(CliTest, GenDataIsDeterministicAndCounts) {
    ASSERT_EQ(vistok_run({"gen-data", "--n", "5", "--image-size", "32", "--out", p("a")}).code, 0);
    ASSERT_EQ(vistok_run({"gen-data", "--n", "5", "--image-size", "32", "--out", p("b")}).code, 0);
    const auto a = manifest(dir_ / "a"), b = manifest(dir_ / "b");
    EXPECT_EQ(a["outputs"], b["outputs"]);
    EXPECT_EQ(a["config"]["n"], 5);
    const auto ckpt = io::load_checkpoint(dir_ / "a" / "scenes.vtk");
    EXPECT_EQ(ckpt.manifest["scene_count"], 5);

    ASSERT_EQ(vistok_run({"gen-data", "--n", "0", "--out", p("empty")}).code, 0);
    EXPECT_TRUE(fs::exists(dir_ / "empty" / "manifest.json"));
    EXPECT_FALSE(fs::exists(dir_ / "empty" / "scenes.vtk"));
    EXPECT_TRUE(manifest(dir_ / "empty")["outputs"].empty());
}

TEST_F(CliTest, GenDataPreviewsAreListedInManifest) {
    ASSERT_EQ(vistok_run({"gen-data", "--n", "2", "--image-size", "32", "--pgm", "--out", p("a")}).code, 0);
    const auto m = manifest(dir_ / "a");
    EXPECT_EQ(m["outputs"].size(), 5u);
    EXPECT_TRUE(m["outputs"].contains("preview/scene_00001_depth.pgm"));
    EXPECT_EQ(io::read_file(dir_ / "a" / "preview" / "scene_00000_image.pgm").substr(0, 2), "P5");
}

TEST_F(CliTest, FlagsOverrideConfigOverrideDefaults) {
    write("cfg.json", R"({"n": 4, "seed": 9, "spec": {"image_size": 48, "max_objects": 2}})");
    ASSERT_EQ(vistok_run({"gen-data", "--config", p("cfg.json"), "--seed", "11", "--image-size", "32", "--out", p("a")})
                  .code,
              0);
    const auto cfg = manifest(dir_ / "a")["config"];
    EXPECT_EQ(cfg["n"], 4);                  // config
    EXPECT_EQ(cfg["seed"], 11);              // flag over config
    EXPECT_EQ(cfg["spec"]["image_size"], 32);
    EXPECT_EQ(cfg["spec"]["max_objects"], 2);
    EXPECT_EQ(cfg["spec"]["min_objects"], 1);  // default
}

TEST_F(CliTest, DataRootResolvesRelativePaths) {
    small_data("root/data");
    setenv("VISTOK_DATA_ROOT", p("root").c_str(), 1);
    const auto r = vistok_run({"roundtrip", "--suite", "vq", "--n", "5"});
    write("tok.json", R"({"tokenizer": {"n_conv_layers": 3, "channel_schedule": [4, 8, 8],
                         "downsample_ratio": 8, "codebook_size": 16, "code_dim": 4, "n_resblocks": 1}})");
    const auto t = vistok_run({"train-tokenizer", "--data", "data", "--config", p("tok.json"), "--epochs", "0",
                               "--out", p("tok")});
    unsetenv("VISTOK_DATA_ROOT");
    EXPECT_EQ(r.code, 0);
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_EQ(manifest(dir_ / "tok")["inputs"]["data"]["path"], (dir_ / "root" / "data" / "scenes.vtk").string());
}

TEST_F(CliTest, SuitesReportAndExitCodes) {
    for (const char* suite : {"vq", "codec", "interp"}) {
        const auto r = vistok_run({"roundtrip", "--suite", suite});
        EXPECT_EQ(r.code, 0) << suite << r.out;
        EXPECT_TRUE(json::parse(r.out)["passed"].get<bool>());
    }
    EXPECT_EQ(vistok_run({"roundtrip", "--suite", "nope"}).code, 1);

    const auto g = vistok_run({"gradcheck"});
    ASSERT_EQ(g.code, 0);
    EXPECT_LT(json::parse(g.out)["max_rel_error"].get<double>(), 1e-4);
    EXPECT_EQ(vistok_run({"gradcheck", "--tol", "1e-14"}).code, 2);
}

TEST_F(CliTest, MaskRatioRunsShareDataHash) {
    small_data();
    ASSERT_EQ(depth_tokenizer("r0", {"--epochs", "1"}).code, 0);
    ASSERT_EQ(depth_tokenizer("r5", {"--epochs", "1", "--mask-ratio", "0.5", "--patch-size", "8"}).code, 0);
    const auto a = manifest(dir_ / "r0"), b = manifest(dir_ / "r5");
    EXPECT_EQ(a["inputs"]["data"]["hash"], b["inputs"]["data"]["hash"]);
    EXPECT_NE(a["config"], b["config"]);
    EXPECT_NE(a["outputs"]["checkpoint.vtk"], b["outputs"]["checkpoint.vtk"]);
}

TEST_F(CliTest, TokenizerResumeIsBitIdentical) {
    small_data();
    ASSERT_EQ(depth_tokenizer("full", {"--epochs", "3"}).code, 0);
    ASSERT_EQ(depth_tokenizer("part", {"--epochs", "2"}).code, 0);
    const auto r = depth_tokenizer("part", {"--epochs", "3", "--resume"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(io::read_file(dir_ / "part" / "checkpoint.vtk"), io::read_file(dir_ / "full" / "checkpoint.vtk"));
    EXPECT_EQ(io::read_file(dir_ / "part" / "metrics.jsonl"), io::read_file(dir_ / "full" / "metrics.jsonl"));
    EXPECT_EQ(manifest(dir_ / "part")["outputs"], manifest(dir_ / "full")["outputs"]);

    const auto changed = depth_tokenizer("part", {"--epochs", "3", "--resume", "--seed", "5"});
    EXPECT_EQ(changed.code, 1);
    EXPECT_NE(changed.err.find("/train/seed"), std::string::npos) << changed.err;
}

TEST_F(CliTest, ResumeTruncatesExtraMetricRows) {
    small_data();
    ASSERT_EQ(depth_tokenizer("full", {"--epochs", "2"}).code, 0);
    ASSERT_EQ(depth_tokenizer("part", {"--epochs", "1"}).code, 0);
    // A row logged after the last checkpoint is dropped and written again.
    const auto rows = io::read_file(dir_ / "part" / "metrics.jsonl");
    io::atomic_write(dir_ / "part" / "metrics.jsonl", rows + "{\"epoch\": 99}\n");
    ASSERT_EQ(depth_tokenizer("part", {"--epochs", "2", "--resume"}).code, 0);
    EXPECT_EQ(io::read_file(dir_ / "part" / "metrics.jsonl"), io::read_file(dir_ / "full" / "metrics.jsonl"));
}

TEST_F(CliTest, ReplayReproducesAndDetectsDrift) {
    small_data();
    ASSERT_EQ(depth_tokenizer("tok", {"--epochs", "1"}).code, 0);
    const auto r = vistok_run({"replay", "--manifest", p("tok"), "--out", p("again")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(json::parse(r.out)["identical"].get<bool>());

    auto m = manifest(dir_ / "tok");
    m["outputs"]["metrics.jsonl"] = "0000000000000000";
    io::atomic_write(dir_ / "tok" / "manifest.json", m.dump());
    EXPECT_EQ(vistok_run({"replay", "--manifest", p("tok"), "--out", p("again2")}).code, 2);

    io::atomic_write(dir_ / "data" / "scenes.vtk", "tampered");
    EXPECT_EQ(vistok_run({"replay", "--manifest", p("tok"), "--out", p("again3")}).code, 1);
}

TEST_F(CliTest, SolverRefusesVocabularyMismatch) {
    small_data();
    ASSERT_EQ(depth_tokenizer("tok", {"--epochs", "0"}).code, 0);
    const auto r = vistok_run({"train-solver", "--tasks", "dep", "--data", p("data"), "--depth-tokenizer", p("tok"),
                               "--preset", "toy", "--out", p("sol")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("depth_codes 128 vs depth tokenizer codebook 16"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir_ / "sol" / "checkpoint.vtk"));
}

TEST_F(CliTest, JointSolverServesBothTasks) {
    small_data();
    ASSERT_EQ(depth_tokenizer("dtok", {"--epochs", "1"}).code, 0);
    ASSERT_EQ(mask_tokenizer("mtok").code, 0);
    write("sol.json", R"({"solver": {"embed_dim": 16, "n_heads": 2, "n_encoder_blocks": 1, "n_decoder_blocks": 1,
                         "vocab": {"mask_codes": 16, "depth_codes": 16, "n_coord_bins": 32}}})");
    const std::vector<std::string> train{"train-solver",    "--tasks",    "dep,ins",         "--data",
                                         p("data"),         "--preset",   "toy",             "--config",
                                         p("sol.json"),     "--epochs",   "2",               "--depth-tokenizer",
                                         p("dtok"),         "--mask-tokenizer", p("mtok"), "--out",
                                         p("sol")};
    const auto t = vistok_run(train);
    ASSERT_EQ(t.code, 0) << t.err;
    const auto m = manifest(dir_ / "sol");
    EXPECT_EQ(m["config"]["train"]["tasks"], json({"dep", "ins"}));
    EXPECT_TRUE(m["inputs"].contains("mask-tokenizer"));

    for (const char* mode : {"hard", "soft"}) {
        const auto e = vistok_run({"eval", "--ckpt", p("sol"), "--data", p("data"), "--task", "dep", "--mode", mode});
        ASSERT_EQ(e.code, 0) << e.err;
        const auto j = json::parse(e.out);
        EXPECT_TRUE(std::isfinite(j["rmse"].get<double>()));
        EXPECT_EQ(j["decode"]["mode"], mode);
    }
    const auto ins = vistok_run({"eval", "--ckpt", p("sol"), "--data", p("data"), "--task", "ins", "--out", p("ev")});
    ASSERT_EQ(ins.code, 0) << ins.err;
    EXPECT_TRUE(json::parse(ins.out).contains("mean_iou"));
    const auto rep = vistok_run({"replay", "--manifest", p("ev"), "--out", p("ev2")});
    EXPECT_EQ(rep.code, 0) << rep.err;

    EXPECT_EQ(vistok_run({"eval", "--ckpt", p("sol"), "--data", p("data"), "--task", "dep", "--mode", "fuzzy"}).code,
              1);
}
