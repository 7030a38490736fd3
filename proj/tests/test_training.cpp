// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <unistd.h>

#include "mdiff/config.hpp"
#include "mdiff/io.hpp"
#include "mdiff/optim.hpp"
#include "mdiff/pipeline.hpp"
#include "mdiff/training.hpp"

namespace fs = std::filesystem;
namespace train = mdiff::train;
namespace pipeline = mdiff::pipeline;
using mdiff::ag::Var;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("mdiff_train_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

json tiny_run_json() {
    return json::parse(R"({
        "seed": 5,
        "dataset": {"synthetic": {"n_train": 64, "n_test": 16, "image_size": 16}},
        "schedule": {"T": 50},
        "model": {"denoiser": {"channels": 8, "n_blocks": 1, "step_embed_dim": 8, "ssm_state_dim": 4},
                  "conditioning": {"heads": 2, "ffn_dim": 16, "backbone_channels": [4, 4, 8, 8], "pool_size": 2}},
        "stage1": {"epochs": 3, "batch_size": 32},
        "stage2": {"epochs": 20},
        "evaluation": {"n_samples": 8}
    })");
}

mdiff::RunConfig tiny_run() { return mdiff::RunConfig::from_json(tiny_run_json()); }

mdiff::data::Dataset tiny_dataset(const mdiff::RunConfig& cfg) { return pipeline::load_dataset(cfg.dataset, cfg.seed); }

}  // namespace

TEST(Objective, OracleDenoiserGivesZeroLoss) {
    const auto s = mdiff::diffusion::make_schedule(50, 1e-4, 0.02);
    mdiff::Rng rng(1);
    std::vector<double> x0(4 * 6), noise(4 * 6);
    rng.fill_normal(x0);
    rng.fill_normal(noise);
    const std::vector<std::size_t> steps{1, 10, 25, 50};
    const auto eps_oracle = [&](const Var&, std::span<const std::size_t>) { return Var::constant(noise, {4, 6}); };
    EXPECT_EQ(train::denoising_loss(eps_oracle, x0, 6, steps, noise, s, mdiff::diffusion::Parameterization::epsilon).item(), 0.0);
    const auto x0_oracle = [&](const Var&, std::span<const std::size_t>) { return Var::constant(x0, {4, 6}); };
    EXPECT_EQ(train::denoising_loss(x0_oracle, x0, 6, steps, noise, s, mdiff::diffusion::Parameterization::x0).item(), 0.0);
    const auto zero = [&](const Var&, std::span<const std::size_t>) { return Var::zeros({4, 6}); };
    double sq = 0.0;
    for (double v : noise) sq += v * v;
    EXPECT_NEAR(train::denoising_loss(zero, x0, 6, steps, noise, s, mdiff::diffusion::Parameterization::epsilon).item(),
                sq / 24.0, 1e-12);
}

TEST(AdamW, ZeroLearningRateOnlyDecays) {
    mdiff::nn::ParamStore store;
    auto p = store.add("w", {1.0, -2.0, 0.5}, {3});
    mdiff::optim::AdamW opt(store, {0.0, 0.1});
    for (int k = 0; k < 3; ++k) {
        p.mutable_grad().assign(3, 100.0 * (k + 1));
        opt.step();
    }
    const double f = 0.9 * 0.9 * 0.9;
    EXPECT_DOUBLE_EQ(p.value()[0], 1.0 * f);
    EXPECT_DOUBLE_EQ(p.value()[1], -2.0 * f);
    EXPECT_DOUBLE_EQ(p.value()[2], 0.5 * f);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    mdiff::nn::ParamStore store;
    auto p = store.add("w", {0.0, 0.0}, {2});
    mdiff::optim::AdamW opt(store, {0.01, 0.0});
    p.mutable_grad() = {3.0, -0.5};
    opt.step();
    EXPECT_NEAR(p.value()[0], -0.01, 1e-9);
    EXPECT_NEAR(p.value()[1], 0.01, 1e-9);
    EXPECT_THROW((mdiff::optim::AdamW(store, {-1.0, 0.0})), mdiff::ValidationError);
    EXPECT_THROW((mdiff::optim::AdamW(store, {1e-3, 1.5})), mdiff::ValidationError);
}

TEST(Trainer, LossHalvesOnSmallSet) {
    // Default model, schedule and optimizer settings.
    const auto cfg = mdiff::RunConfig::from_json(
        json::parse(R"({"seed": 5, "dataset": {"synthetic": {"n_train": 32, "n_test": 4}}, "stage1": {"epochs": 200}})"));
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer t(cfg.model, cfg.make_schedule(), cfg.stage1);
    const auto records = ds.split(mdiff::data::Split::train);
    const double before = t.evaluate_loss(records, ds);
    t.run(ds);
    const double after = t.evaluate_loss(records, ds);
    EXPECT_EQ(t.epoch(), 200u);
    EXPECT_LE(after, 0.5 * before) << "before " << before << " after " << after;
}

TEST(Trainer, IdenticalSeedsGiveIdenticalTrajectories) {
    auto cfg = tiny_run();
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer a(cfg.model, cfg.make_schedule(), cfg.stage1), b(cfg.model, cfg.make_schedule(), cfg.stage1);
    a.run(ds);
    b.run(ds);
    EXPECT_EQ(a.loss_csv(), b.loss_csv());
    EXPECT_EQ(a.model().content_hash(), b.model().content_hash());
    cfg.stage1.seed += 1;
    train::DiffusionTrainer c(cfg.model, cfg.make_schedule(), cfg.stage1);
    c.run(ds);
    EXPECT_NE(c.model().content_hash(), a.model().content_hash());
}

TEST(Trainer, ResumeMatchesUninterruptedRunBitwise) {
    auto cfg = tiny_run();
    cfg.stage1.epochs = 4;
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer full(cfg.model, cfg.make_schedule(), cfg.stage1);
    full.run(ds);

    train::DiffusionTrainer first(cfg.model, cfg.make_schedule(), cfg.stage1);
    first.run(ds, [](const train::EpochRecord& r) { return r.epoch < 2; });
    ASSERT_EQ(first.epoch(), 2u);
    const auto path = temp_dir("resume");
    first.save_state(path);
    auto second = train::DiffusionTrainer::resume(path);
    EXPECT_EQ(second.epoch(), 2u);
    second.run(ds);
    EXPECT_EQ(second.epoch(), 4u);
    EXPECT_EQ(second.model().content_hash(), full.model().content_hash());
    EXPECT_EQ(second.loss_csv(), full.loss_csv());
    fs::remove(path);
}

TEST(Trainer, ValidationPartitionIsDisjointAndSeeded) {
    auto cfg = tiny_run();
    cfg.stage1.val_fraction = 0.25;
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer t(cfg.model, cfg.make_schedule(), cfg.stage1);
    const auto [fit, val] = t.partition(ds);
    EXPECT_EQ(val.size(), 16u);
    EXPECT_EQ(fit.size(), 48u);
    for (const auto* v : val) EXPECT_EQ(std::find(fit.begin(), fit.end(), v), fit.end());
    EXPECT_EQ(t.partition(ds).second, val);
}

TEST(Trainer, EarlyStoppingRestoresBestValidationParameters) {
    auto cfg = tiny_run();
    cfg.stage1.val_fraction = 0.25;
    cfg.stage1.patience = 1;
    cfg.stage1.epochs = 30;
    cfg.stage1.learning_rate = 0.05;  // large steps make a non-improving epoch likely
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer t(cfg.model, cfg.make_schedule(), cfg.stage1);
    t.run(ds);
    ASSERT_TRUE(t.stopped_early());
    double best = INFINITY;
    for (const auto& r : t.history()) best = std::min(best, r.val_loss);
    const auto [_, val] = t.partition(ds);
    EXPECT_DOUBLE_EQ(t.evaluate_loss(val, ds), best);
}

TEST(Trainer, NonFiniteLossNamesBatch) {
    auto cfg = tiny_run();
    const auto ds = tiny_dataset(cfg);
    train::DiffusionTrainer t(cfg.model, cfg.make_schedule(), cfg.stage1);
    t.model().params().items()[0].second.mutable_value()[0] = NAN;
    const auto records = ds.split(mdiff::data::Split::train);
    try {
        t.train_step(std::span(records).subspan(0, 2), ds);
        FAIL() << "expected failure";
    } catch (const mdiff::RuntimeFailure& e) {
        EXPECT_NE(std::string(e.what()).find(records[0]->id), std::string::npos) << e.what();
    }
}

TEST(Sampling, SheetsIndependentOfVisitOrder) {
    auto cfg = tiny_run();
    const auto ds = tiny_dataset(cfg);
    mdiff::ConditionalModel model(cfg.model);
    const auto s = cfg.make_schedule();
    auto records = ds.split(mdiff::data::Split::test);
    const auto a = train::draw_sheet(model, s, *records[3], 4, 99);
    const auto sheets = pipeline::draw_sheets(model, s, records, 4, 99);
    EXPECT_EQ(sheets[3].draws, a.draws);
    EXPECT_EQ(a.n, 4u);
    EXPECT_EQ(a.width, 6u);
    EXPECT_NE(train::draw_sheet(model, s, *records[3], 4, 100).draws, a.draws);
}

TEST(Pipeline, TinyRunWritesBoundArtifacts) {
    auto cfg = tiny_run();
    cfg.stage1.epochs = 100;
    const auto ds = tiny_dataset(cfg);
    const auto dir = temp_dir("pipeline");
    const auto run = pipeline::train_pipeline(ds, cfg, dir);
    for (const char* f : {"config.json", "diffusion.ckpt", "refiner.ckpt", "refiner.json", "manifest.json", "diffusion_loss.csv",
                          "refiner_loss.csv"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto& m = run.manifest;
    EXPECT_EQ(m.at("diffusion").at("hash"), mdiff::checkpoint::file_hash(dir / "diffusion.ckpt"));
    EXPECT_EQ(m.at("refiner").at("diffusion_hash"), m.at("diffusion").at("hash"));
    EXPECT_EQ(m.at("ablation"), "none");
    EXPECT_EQ(m.at("seeds").at("stage1"), mdiff::derive_seed(5, 2));
    // Stage 2 leaves the diffusion parameters untouched.
    EXPECT_EQ(run.model.content_hash(), m.at("diffusion").at("hash"));

    const auto loaded = pipeline::load_run(dir);
    EXPECT_EQ(loaded.model.content_hash(), run.model.content_hash());
    EXPECT_EQ(loaded.refiner.content_hash(), run.refiner.content_hash());

    EXPECT_THROW(pipeline::train_pipeline(ds, cfg, dir), mdiff::ValidationError);
    fs::remove_all(dir);
}

TEST(Pipeline, RejectsCheckpointsFromAnotherRun) {
    auto cfg = tiny_run();
    const auto ds = tiny_dataset(cfg);
    const auto a = temp_dir("bind_a"), b = temp_dir("bind_b");
    pipeline::train_pipeline(ds, cfg, a);
    cfg.stage1.seed += 7;
    pipeline::train_pipeline(ds, cfg, b);
    fs::copy_file(b / "refiner.ckpt", a / "refiner.ckpt", fs::copy_options::overwrite_existing);
    EXPECT_THROW(pipeline::load_run(a), mdiff::ValidationError);
    // Even with the manifest updated to the copied file, the embedded binding differs.
    auto m = json::parse(mdiff::io::read_file(a / "manifest.json"));
    m["refiner"]["hash"] = mdiff::checkpoint::file_hash(a / "refiner.ckpt");
    mdiff::io::write_file(a / "manifest.json", m.dump(2));
    try {
        pipeline::load_run(a);
        FAIL() << "expected binding failure";
    } catch (const mdiff::ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("different diffusion checkpoint"), std::string::npos);
    }
    EXPECT_THROW(pipeline::load_run(temp_dir("absent")), mdiff::ValidationError);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Pipeline, RerunIsBitwiseIdentical) {
    const auto cfg = tiny_run();
    const auto ds = tiny_dataset(cfg);
    const auto a = temp_dir("rerun_a"), b = temp_dir("rerun_b");
    const auto ra = pipeline::train_pipeline(ds, cfg, a), rb = pipeline::train_pipeline(tiny_dataset(cfg), cfg, b);
    for (const char* f : {"diffusion.ckpt", "refiner.ckpt", "manifest.json", "diffusion_loss.csv", "refiner_loss.csv"})
        EXPECT_EQ(mdiff::io::read_file(a / f), mdiff::io::read_file(b / f)) << f;
    const auto rep_a = pipeline::evaluate_run(ra, ds, mdiff::data::Split::test);
    const auto rep_b = pipeline::evaluate_run(pipeline::load_run(b), ds, mdiff::data::Split::test);
    EXPECT_EQ(rep_a.to_json().dump(), rep_b.to_json().dump());
    EXPECT_EQ(rep_a.products.size(), 16u);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(RunConfig, RoundTripDerivedSeedsAndValidation) {
    const auto cfg = tiny_run();
    EXPECT_EQ(mdiff::RunConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
    EXPECT_EQ(cfg.model.init_seed, mdiff::derive_seed(5, 1));
    EXPECT_EQ(cfg.stage2.seed, mdiff::derive_seed(5, 3));
    EXPECT_EQ(cfg.evaluation.seed, mdiff::derive_seed(5, 4));
    EXPECT_EQ(cfg.model.conditioning.channels, 8u);

    auto both = cfg;
    both.apply_ablation("no-image");
    EXPECT_EQ(both.ablation(), "no-image");
    both.apply_ablation("no-temporal");
    EXPECT_THROW(both.validate(), mdiff::ValidationError);
    EXPECT_THROW(both.apply_ablation("no-audio"), mdiff::ValidationError);

    auto j = tiny_run_json();
    j["model"]["denoiser"]["horizon"] = 5;
    EXPECT_THROW(mdiff::RunConfig::from_json(j).validate(), mdiff::ValidationError);
    j = tiny_run_json();
    j["evaluation"]["n_samples"] = 0;
    EXPECT_THROW(mdiff::RunConfig::from_json(j).validate(), mdiff::ValidationError);
}

TEST(RunConfig, Overrides) {
    auto j = tiny_run_json();
    mdiff::apply_override(j, "stage1.epochs=9");
    mdiff::apply_override(j, "dataset.source=visuelle");
    mdiff::apply_override(j, "stage2.lr=0.5");
    EXPECT_EQ(j["stage1"]["epochs"], 9);
    EXPECT_EQ(j["dataset"]["source"], "visuelle");
    EXPECT_EQ(j["stage2"]["lr"], 0.5);
    EXPECT_THROW(mdiff::apply_override(j, "novalue"), mdiff::ValidationError);
    EXPECT_THROW(mdiff::apply_override(j, "a..b=1"), mdiff::ValidationError);
}
