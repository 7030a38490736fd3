// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Two-stage run orchestration and the on-disk run directory:
//
//   <run>/config.json          resolved run configuration
//   <run>/diffusion.ckpt       stage-1 parameters
//   <run>/diffusion_loss.csv   per-epoch stage-1 loss
//   <run>/refiner.ckpt         stage-2 parameters
//   <run>/refiner.json         refiner sidecar (N, W, widths, bound diffusion hash)
//   <run>/refiner_loss.csv     per-epoch stage-2 loss
//   <run>/manifest.json        config, seeds, dataset hash, checkpoint hashes

#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/config.hpp"
#include "mdiff/data.hpp"
#include "mdiff/evaluation.hpp"
#include "mdiff/model.hpp"
#include "mdiff/refinement.hpp"
#include "mdiff/training.hpp"

namespace mdiff::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Loads (or generates) the configured dataset, resizes images and fits
/// the sales scaler on the training split.
inline data::Dataset load_dataset(const DatasetConfig& cfg, std::uint64_t seed, std::ostream* log = nullptr) {
    cfg.validate();
    data::Dataset ds;
    if (cfg.source == "synthetic") {
        ds = cfg.path.empty() ? data::generate_synthetic(cfg.synthetic, seed).dataset : data::load_synthetic(cfg.path).dataset;
    } else {
        auto res = data::load_visuelle(cfg.path, cfg.horizon, 0,
                                       cfg.mapping.empty() ? std::nullopt : std::optional<fs::path>(cfg.mapping));
        if (log)
            for (const auto& r : res.rejected) *log << "warning: rejected " << r << "\n";
        ds = std::move(res.dataset);
    }
    if (ds.horizon != cfg.horizon)
        throw ValidationError("dataset horizon " + std::to_string(ds.horizon) + " differs from configured " +
                              std::to_string(cfg.horizon));
    if (cfg.image_size)
        for (auto& r : ds.records) r.image = r.image.resized(cfg.image_size);
    return data::normalize_sales(std::move(ds), cfg.normalization);
}

/// Content hash over ids, splits, dates, sales and image pixels.
inline std::string dataset_hash(const data::Dataset& ds) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& r : ds.records) {
        os << r.id << '|' << data::to_string(r.split) << '|' << r.release.year << '-' << r.release.month << '-' << r.release.day
           << '|';
        for (double v : r.sales.values) os << v << ',';
        os << '|' << io::git_blob_hash(std::string_view(reinterpret_cast<const char*>(r.image.pixels.data()), r.image.pixels.size()))
           << '\n';
    }
    return io::git_blob_hash(os.str());
}

/// Sheets for the given records, in record order.
inline std::vector<diffusion::SampleSheet> draw_sheets(const ConditionalModel& model, const diffusion::NoiseSchedule& s,
                                                       const std::vector<const data::ProductRecord*>& records,
                                                       std::size_t n_samples, std::uint64_t seed) {
    std::vector<diffusion::SampleSheet> out;
    out.reserve(records.size());
    for (const auto* r : records) out.push_back(train::draw_sheet(model, s, *r, n_samples, seed));
    return out;
}

struct Run {
    RunConfig config;
    ConditionalModel model;
    refine::Refiner refiner;
    data::NormalizationState scaler;
    json manifest;
};

/// Trains both stages into `run_dir` (which must be empty or absent).
inline Run train_pipeline(const data::Dataset& ds, const RunConfig& cfg, const fs::path& run_dir, std::ostream* log = nullptr) {
    cfg.validate();
    if (fs::exists(run_dir) && !fs::is_empty(run_dir))
        throw ValidationError("run directory " + run_dir.string() + " is not empty; refusing to overwrite");
    fs::create_directories(run_dir);
    if (ds.count(data::Split::train) == 0) throw ValidationError("training split is empty");
    io::write_file(run_dir / "config.json", cfg.resolved().dump(2) + "\n");

    const auto schedule = cfg.make_schedule();
    train::DiffusionTrainer trainer(cfg.model, schedule, cfg.stage1);
    trainer.run(ds, [&](const train::EpochRecord& r) {
        if (log && (r.epoch == 1 || r.epoch % 10 == 0 || r.epoch == cfg.stage1.epochs))
            *log << "stage1 epoch " << r.epoch << " loss " << eval::fmt(r.train_loss, 5) << "\n";
        return true;
    });
    io::write_file(run_dir / "diffusion_loss.csv", trainer.loss_csv());
    ConditionalModel model = std::move(trainer.model());
    const std::string diffusion_hash = model.save(run_dir / "diffusion.ckpt");

    const auto train_records = ds.split(data::Split::train);
    const auto sheets = draw_sheets(model, schedule, train_records, cfg.evaluation.n_samples, derive_seed(cfg.stage2.seed, 0x5A));
    std::vector<refine::TrainingPair> pairs;
    for (std::size_t i = 0; i < sheets.size(); ++i) pairs.push_back({sheets[i], ds.target(*train_records[i])});
    auto fit = refine::train_refiner(pairs, cfg.stage2);
    if (log) *log << "stage2 loss " << eval::fmt(fit.loss_history.front(), 5) << " -> " << eval::fmt(fit.loss_history.back(), 5) << "\n";
    if (model.content_hash() != diffusion_hash) throw RuntimeFailure("stage-1 parameters changed during stage 2");

    const json sidecar{{"n_draws", fit.refiner.shape().n_draws},
                       {"horizon", fit.refiner.shape().horizon},
                       {"temporal_widths", fit.refiner.shape().temporal_widths()},
                       {"sample_widths", fit.refiner.shape().sample_widths()},
                       {"diffusion_hash", diffusion_hash}};
    const std::string refiner_hash = fit.refiner.save(run_dir / "refiner.ckpt", sidecar);
    io::write_file(run_dir / "refiner.json", sidecar.dump(2) + "\n");
    {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,loss\n";
        for (std::size_t e = 0; e < fit.loss_history.size(); ++e) os << e << "," << fit.loss_history[e] << "\n";
        io::write_file(run_dir / "refiner_loss.csv", os.str());
    }

    json manifest{{"format", "mdiff-run-v1"},
                  {"config", cfg.resolved()},
                  {"ablation", cfg.ablation()},
                  {"seeds",
                   {{"run", cfg.seed}, {"init", cfg.model.init_seed}, {"stage1", cfg.stage1.seed}, {"stage2", cfg.stage2.seed},
                    {"evaluation", cfg.evaluation.seed}}},
                  {"dataset_hash", dataset_hash(ds)},
                  {"scaler", ds.scaler.to_json()},
                  {"schedule_hash", schedule.hash()},
                  {"diffusion", {{"path", "diffusion.ckpt"}, {"hash", diffusion_hash}, {"epochs", trainer.epoch()},
                                 {"final_loss", trainer.history().back().train_loss}}},
                  {"refiner", {{"path", "refiner.ckpt"}, {"hash", refiner_hash}, {"diffusion_hash", diffusion_hash},
                               {"final_loss", fit.loss_history.back()}}}};
    io::write_file(run_dir / "manifest.json", manifest.dump(2) + "\n");
    return {cfg, std::move(model), std::move(fit.refiner), ds.scaler, manifest};
}

/// Loads a run directory and checks that the refiner is bound to the
/// diffusion checkpoint on disk.
inline Run load_run(const fs::path& run_dir) {
    const fs::path mpath = run_dir / "manifest.json";
    if (!fs::exists(mpath)) throw ValidationError("run manifest not found: " + mpath.string());
    const json manifest = json::parse(io::read_file(mpath));
    const fs::path dpath = run_dir / manifest.at("diffusion").at("path").get<std::string>();
    const fs::path rpath = run_dir / manifest.at("refiner").at("path").get<std::string>();
    const std::string dhash = checkpoint::file_hash(dpath);
    if (dhash != manifest.at("diffusion").at("hash"))
        throw ValidationError("diffusion checkpoint " + dpath.string() + " does not match the manifest hash");
    if (checkpoint::file_hash(rpath) != manifest.at("refiner").at("hash"))
        throw ValidationError("refiner checkpoint " + rpath.string() + " does not match the manifest hash");
    auto [refiner, extra] = refine::Refiner::load(rpath);
    if (extra.value("diffusion_hash", std::string()) != dhash)
        throw ValidationError("refiner " + rpath.string() + " was trained against a different diffusion checkpoint");
    return {RunConfig::from_json(manifest.at("config")), ConditionalModel::load(dpath), std::move(refiner),
            data::NormalizationState::from_json(manifest.at("scaler")), manifest};
}

/// Draw sheet (normalized) -> refined forecast; both returned in raw units.
inline eval::Forecast forecast(const Run& run, const diffusion::NoiseSchedule& s, const data::ProductRecord& r,
                               std::size_t n_samples, std::uint64_t seed) {
    auto sheet = train::draw_sheet(run.model, s, r, n_samples, seed);
    auto refined = run.refiner(sheet);
    return {eval::denormalize_sheet(std::move(sheet), run.scaler), run.scaler.denormalize(refined)};
}

inline eval::ForecastReport evaluate_run(const Run& run, const data::Dataset& ds, data::Split split, std::ostream* log = nullptr) {
    const auto s = run.config.make_schedule();
    const auto& ev = run.config.evaluation;
    json meta{{"diffusion_hash", run.manifest.at("diffusion").at("hash")},
              {"refiner_hash", run.manifest.at("refiner").at("hash")},
              {"ablation", run.config.ablation()},
              {"n_samples", ev.n_samples},
              {"config", run.config.resolved()}};
    return eval::evaluate_split(
        ds, split, [&](const data::ProductRecord& r) { return forecast(run, s, r, ev.n_samples, ev.seed); }, meta, log);
}

/// Oracle forecaster: the refined forecast is the truth itself.
inline eval::ForecastReport evaluate_stub(const data::Dataset& ds, data::Split split) {
    return eval::evaluate_split(
        ds, split, [](const data::ProductRecord& r) { return eval::Forecast{{}, r.sales.head()}; }, {{"stub", true}}, nullptr);
}

}  // namespace mdiff::pipeline
