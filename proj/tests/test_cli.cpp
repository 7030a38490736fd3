// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "mdiff/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string output;  // stdout and stderr interleaved
};

Result run(const std::string& args) {
    const std::string cmd = std::string(MDIFF_CLI_PATH) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("mdiff_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        mdiff::io::write_file(dir_ / "tiny.json", R"({
            "seed": 2,
            "dataset": {"synthetic": {"n_train": 48, "n_test": 8, "image_size": 16}},
            "schedule": {"T": 20},
            "model": {"denoiser": {"channels": 8, "n_blocks": 1, "step_embed_dim": 8, "ssm_state_dim": 4},
                      "conditioning": {"heads": 2, "ffn_dim": 16, "backbone_channels": [4, 4, 8, 8], "pool_size": 2}},
            "stage1": {"epochs": 2},
            "stage2": {"epochs": 10},
            "evaluation": {"n_samples": 4}
        })");
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string p(const std::string& rel) const { return (dir_ / rel).string(); }
    std::string config() const { return "-c " + p("tiny.json"); }

    fs::path dir_;
};

std::string tree_digest(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + mdiff::io::read_file(f);
    return all;
}

}  // namespace

TEST_F(Cli, HelpAndUnknownCommand) {
    EXPECT_EQ(run("--help").code, 0);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("").code, 2);
}

TEST_F(Cli, GenerateDataIsDeterministicAndCreatesDirectories) {
    const auto a = run("generate-data --seed 4 --n-train 6 --n-test 2 --image-size 16 -o " + p("nested/a"));
    ASSERT_EQ(a.code, 0) << a.output;
    const auto b = run("generate-data --seed 4 --n-train 6 --n-test 2 --image-size 16 -o " + p("b"));
    ASSERT_EQ(b.code, 0) << b.output;
    EXPECT_EQ(tree_digest(dir_ / "nested/a"), tree_digest(dir_ / "b"));
    ASSERT_EQ(run("generate-data --seed 5 --n-train 6 --n-test 2 --image-size 16 -o " + p("c")).code, 0);
    EXPECT_NE(tree_digest(dir_ / "b"), tree_digest(dir_ / "c"));
}

TEST_F(Cli, GenerateDataRejectsEmptySplit) {
    const auto r = run("generate-data --n-train 0 -o " + p("zero"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("n_train"), std::string::npos) << r.output;
}

TEST_F(Cli, OutputRootEnvironmentVariable) {
    const std::string cmd = "MDIFF_OUTPUT_ROOT=" + dir_.string() + " " + std::string(MDIFF_CLI_PATH) +
                            " generate-data --n-train 2 --n-test 1 --image-size 16 -o rooted > /dev/null 2>&1";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    EXPECT_TRUE(fs::exists(dir_ / "rooted"));
}

TEST_F(Cli, StubEvaluationReportsZeroError) {
    const auto r = run("evaluate --stub " + config() + " -o " + p("stub_report"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("WAPE=0.0000 MAE=0.0000"), std::string::npos) << r.output;
    EXPECT_TRUE(fs::exists(dir_ / "stub_report" / "summary.md"));
}

TEST_F(Cli, TrainSampleRefineEvaluateReport) {
    const auto t = run("train " + config() + " -o " + p("run"));
    ASSERT_EQ(t.code, 0) << t.output;
    for (const char* f : {"diffusion.ckpt", "refiner.ckpt", "manifest.json"}) EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
    const auto manifest = json::parse(mdiff::io::read_file(dir_ / "run" / "manifest.json"));
    EXPECT_EQ(manifest["ablation"], "none");

    const auto s = run("sample -r " + p("run") + " -o " + p("sheets"));
    ASSERT_EQ(s.code, 0) << s.output;
    std::size_t sheets = 0;
    for (const auto& e : fs::directory_iterator(dir_ / "sheets")) sheets += e.path().extension() == ".csv";
    EXPECT_EQ(sheets, 8u);

    const auto f = run("refine -r " + p("run") + " --sheets " + p("sheets") + " -o " + p("forecast.csv"));
    ASSERT_EQ(f.code, 0) << f.output;
    const auto csv = mdiff::io::read_file(dir_ / "forecast.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);

    const auto e = run("evaluate -r " + p("run") + " -o " + p("report"));
    ASSERT_EQ(e.code, 0) << e.output;
    EXPECT_NE(e.output.find("naive_training_mean WAPE="), std::string::npos);
    const auto last = e.output.substr(e.output.rfind("WAPE="));
    EXPECT_EQ(last.rfind("WAPE=", 0), 0u);
    std::size_t plots = 0;
    for (const auto& x : fs::directory_iterator(dir_ / "report" / "plots")) plots += x.path().extension() == ".png";
    EXPECT_EQ(plots, 8u);

    const auto rr = run("report " + p("report") + " -o " + p("rerendered"));
    ASSERT_EQ(rr.code, 0) << rr.output;
    EXPECT_EQ(mdiff::io::read_file(dir_ / "report" / "summary.md"), mdiff::io::read_file(dir_ / "rerendered" / "summary.md"));

    // A second evaluation reproduces the report exactly.
    ASSERT_EQ(run("evaluate -r " + p("run") + " -o " + p("report2")).code, 0);
    EXPECT_EQ(mdiff::io::read_file(dir_ / "report" / "report.json"), mdiff::io::read_file(dir_ / "report2" / "report.json"));
}

TEST_F(Cli, AblationRecordedInManifest) {
    const auto t = run("train " + config() + " --ablation no-image -o " + p("run"));
    ASSERT_EQ(t.code, 0) << t.output;
    const auto manifest = json::parse(mdiff::io::read_file(dir_ / "run" / "manifest.json"));
    EXPECT_EQ(manifest["ablation"], "no-image");
    EXPECT_FALSE(manifest["config"]["model"]["conditioning"]["use_image"].get<bool>());
    EXPECT_EQ(run("train " + config() + " --ablation no-sound -o " + p("run2")).code, 2);
}

TEST_F(Cli, RefusesNonEmptyRunDirectory) {
    fs::create_directories(dir_ / "busy");
    mdiff::io::write_file(dir_ / "busy" / "keep.txt", "x");
    const auto r = run("train " + config() + " -o " + p("busy"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("not empty"), std::string::npos) << r.output;
    EXPECT_EQ(mdiff::io::read_file(dir_ / "busy" / "keep.txt"), "x");
}

TEST_F(Cli, MissingPathsAreNamed) {
    const auto r = run("evaluate -r " + p("nowhere"));
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find(p("nowhere")), std::string::npos) << r.output;
    const auto c = run("train -c " + p("absent.json") + " -o " + p("run"));
    EXPECT_EQ(c.code, 2);
    EXPECT_NE(c.output.find("absent.json"), std::string::npos) << c.output;
    EXPECT_EQ(run("report " + p("noreport")).code, 2);
}

TEST_F(Cli, MalformedConfigAndOverrides) {
    mdiff::io::write_file(dir_ / "bad.json", "{ not json");
    EXPECT_EQ(run("train -c " + p("bad.json") + " -o " + p("run")).code, 2);
    EXPECT_EQ(run("train " + config() + " --set stage1.epochs=0 -o " + p("run")).code, 2);
    EXPECT_EQ(run("train " + config() + " --set novalue -o " + p("run")).code, 2);
}

TEST_F(Cli, RejectsCheckpointsFromDifferentRuns) {
    ASSERT_EQ(run("train " + config() + " -o " + p("a")).code, 0);
    ASSERT_EQ(run("train " + config() + " --seed 9 -o " + p("b")).code, 0);
    fs::copy_file(dir_ / "b" / "diffusion.ckpt", dir_ / "a" / "diffusion.ckpt", fs::copy_options::overwrite_existing);
    const auto r = run("evaluate -r " + p("a"));
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("diffusion.ckpt"), std::string::npos) << r.output;
}
