// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// mdiff command-line entry point.
//
// Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
// Relative output paths are resolved under $MDIFF_OUTPUT_ROOT when set.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mdiff/config.hpp"
#include "mdiff/data.hpp"
#include "mdiff/error.hpp"
#include "mdiff/evaluation.hpp"
#include "mdiff/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mdiff;

namespace {

fs::path output_path(const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* root = std::getenv("MDIFF_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
    return path;
}

/// Config file (optional) + --set overrides + dedicated flags.
struct ConfigOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string ablation;

    void attach(CLI::App* cmd, bool with_ablation) {
        cmd->add_option("-c,--config", config_path, "JSON run configuration");
        cmd->add_option("--set", overrides, "override a config key, e.g. --set stage1.epochs=20");
        cmd->add_option("--seed", seed, "top-level seed");
        if (with_ablation) cmd->add_option("--ablation", ablation, "no-image | no-temporal");
    }

    RunConfig resolve() const {
        json doc = json::object();
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw ValidationError("config file not found: " + config_path);
            doc = json::parse(io::read_file(config_path), nullptr, false);
            if (doc.is_discarded() || !doc.is_object()) throw ValidationError("config file is not a JSON object: " + config_path);
        }
        if (seed) doc["seed"] = *seed;
        for (const auto& o : overrides) apply_override(doc, o);
        RunConfig cfg = RunConfig::from_json(doc);
        cfg.apply_ablation(ablation);
        cfg.validate();
        return cfg;
    }
};

data::Split split_arg(const std::string& s) { return data::parse_split(s); }

int run_generate(const ConfigOptions& co, const std::string& out, const std::optional<std::size_t>& n_train,
                 const std::optional<std::size_t>& n_test, const std::optional<std::size_t>& image_size) {
    json doc = json::object();
    if (!co.config_path.empty()) doc = json::parse(io::read_file(co.config_path));
    for (const auto& o : co.overrides) apply_override(doc, o);
    // Accept either a full run config or a bare generator section.
    json syn = doc.contains("dataset") ? doc["dataset"].value("synthetic", json::object()) : doc;
    auto cfg = data::SyntheticConfig::from_json(syn);
    if (n_train) cfg.n_train = *n_train;
    if (n_test) cfg.n_test = *n_test;
    if (image_size) cfg.image_size = *image_size;
    cfg.validate();
    const std::uint64_t seed = co.seed.value_or(doc.value("seed", std::uint64_t{0}));
    const auto ds = data::generate_synthetic(cfg, seed);
    const fs::path dir = output_path(out);
    data::save_synthetic(ds, dir);
    std::cout << "wrote " << ds.dataset.records.size() << " products to " << dir.string() << "\n";
    return 0;
}

int run_train(const ConfigOptions& co, const std::string& out) {
    const RunConfig cfg = co.resolve();
    const fs::path dir = output_path(out);
    if (fs::exists(dir) && !fs::is_empty(dir)) throw ValidationError("run directory " + dir.string() + " is not empty");
    const auto ds = pipeline::load_dataset(cfg.dataset, cfg.seed, &std::cerr);
    const auto run = pipeline::train_pipeline(ds, cfg, dir, &std::cerr);
    std::cout << "diffusion " << run.manifest["diffusion"]["hash"].get<std::string>() << "\n"
              << "refiner " << run.manifest["refiner"]["hash"].get<std::string>() << "\n"
              << "run " << dir.string() << "\n";
    return 0;
}

int run_sample(const std::string& run_dir, const std::string& split, const std::string& out, std::optional<std::size_t> n) {
    const auto run = pipeline::load_run(run_dir);
    const auto ds = pipeline::load_dataset(run.config.dataset, run.config.seed, &std::cerr);
    const auto s = run.config.make_schedule();
    const std::size_t n_samples = n.value_or(run.config.evaluation.n_samples);
    const fs::path dir = output_path(out);
    fs::create_directories(dir);
    std::size_t count = 0;
    for (const auto* r : ds.split(split_arg(split))) {
        const auto sheet = train::draw_sheet(run.model, s, *r, n_samples, run.config.evaluation.seed);
        io::write_file(dir / (r->id + ".csv"), sheet.to_csv());
        ++count;
    }
    std::cout << "wrote " << count << " normalized sheets to " << dir.string() << "\n";
    return 0;
}

int run_refine(const std::string& run_dir, const std::string& sheets_dir, const std::string& out) {
    const auto run = pipeline::load_run(run_dir);
    if (!fs::is_directory(sheets_dir)) throw ValidationError("sheet directory not found: " + sheets_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(sheets_dir))
        if (e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::ostringstream os;
    os.precision(10);
    os << "product_id";
    for (std::size_t w = 0; w < run.refiner.shape().horizon; ++w) os << ",week_" << (w + 1);
    os << "\n";
    for (const auto& f : files) {
        const auto sheet = diffusion::SampleSheet::from_csv(io::read_file(f), f.stem().string());
        const auto y = run.scaler.denormalize(run.refiner(sheet));
        os << sheet.product_id;
        for (double v : y) os << "," << v;
        os << "\n";
    }
    const fs::path path = output_path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    io::write_file(path, os.str());
    std::cout << "refined " << files.size() << " sheets into " << path.string() << "\n";
    return 0;
}

void print_metrics(const eval::ForecastReport& rep) {
    if (rep.aggregates.contains("naive_training_mean")) {
        const auto& n = rep.aggregates["naive_training_mean"]["clamped"];
        std::cout << "naive_training_mean WAPE=" << eval::fmt(n["wape"].get<double>()) << " MAE=" << eval::fmt(n["mae"].get<double>())
                  << "\n";
    }
    if (rep.aggregates.contains("mean_of_draws")) {
        const auto& n = rep.aggregates["mean_of_draws"]["clamped"];
        std::cout << "mean_of_draws WAPE=" << eval::fmt(n["wape"].get<double>()) << " MAE=" << eval::fmt(n["mae"].get<double>())
                  << "\n";
    }
    std::cout << "WAPE=" << eval::fmt(rep.wape()) << " MAE=" << eval::fmt(rep.mae()) << std::endl;
}

int run_evaluate(const std::string& run_dir, const std::string& split, const std::string& out, bool stub,
                 const ConfigOptions& co) {
    eval::ForecastReport rep;
    if (stub) {
        const RunConfig cfg = co.resolve();
        const auto ds = pipeline::load_dataset(cfg.dataset, cfg.seed, &std::cerr);
        rep = pipeline::evaluate_stub(ds, split_arg(split));
    } else {
        if (run_dir.empty()) throw ValidationError("--run is required unless --stub is given");
        const auto run = pipeline::load_run(run_dir);
        const auto ds = pipeline::load_dataset(run.config.dataset, run.config.seed, &std::cerr);
        rep = pipeline::evaluate_run(run, ds, split_arg(split), &std::cerr);
    }
    if (!out.empty()) eval::render_report(rep, output_path(out));
    print_metrics(rep);
    return 0;
}

int run_report(const std::string& report_dir, const std::string& out) {
    const fs::path in = fs::path(report_dir) / "report.json";
    if (!fs::exists(in)) throw ValidationError("report not found: " + in.string());
    const auto rep = eval::load_report(in);
    const fs::path dir = out.empty() ? fs::path(report_dir) : output_path(out);
    eval::render_report(rep, dir);
    std::cout << "rendered " << rep.products.size() << " plots into " << dir.string() << "\n";
    print_metrics(rep);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mdiff: conditioned diffusion forecasts for new products"};
    app.require_subcommand(1);

    ConfigOptions gen_co, train_co, eval_co;
    std::string gen_out = "data", train_out, run_dir, split = "test", out, sheets_dir, report_dir;
    std::optional<std::size_t> n_train, n_test, image_size, n_samples;
    bool stub = false;

    auto* gen = app.add_subcommand("generate-data", "write a seeded synthetic catalog");
    gen_co.attach(gen, false);
    gen->add_option("-o,--out", gen_out, "output directory (created if missing)");
    gen->add_option("--n-train", n_train);
    gen->add_option("--n-test", n_test);
    gen->add_option("--image-size", image_size);

    auto* trn = app.add_subcommand("train", "train both stages into a fresh run directory");
    train_co.attach(trn, true);
    trn->add_option("-o,--out", train_out, "run directory")->required();

    auto* smp = app.add_subcommand("sample", "draw normalized sample sheets for a split");
    smp->add_option("-r,--run", run_dir, "run directory")->required();
    smp->add_option("--split", split, "train | test");
    smp->add_option("-o,--out", out, "sheet directory")->required();
    smp->add_option("-n,--n-samples", n_samples);

    auto* ref = app.add_subcommand("refine", "refine sheet CSVs into forecasts (raw units)");
    ref->add_option("-r,--run", run_dir, "run directory")->required();
    ref->add_option("--sheets", sheets_dir, "directory of <id>.csv sheets")->required();
    ref->add_option("-o,--out", out, "forecast CSV path")->required();

    auto* evl = app.add_subcommand("evaluate", "evaluate a run on a split and write a report");
    evl->add_option("-r,--run", run_dir, "run directory");
    evl->add_option("--split", split, "train | test");
    evl->add_option("-o,--out", out, "report directory");
    evl->add_flag("--stub", stub, "oracle forecaster that returns the truth (no checkpoints needed)");
    eval_co.attach(evl, false);

    auto* rpt = app.add_subcommand("report", "re-render plots and summary from report.json");
    rpt->add_option("report_dir", report_dir, "report directory")->required();
    rpt->add_option("-o,--out", out, "destination (defaults to the report directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return run_generate(gen_co, gen_out, n_train, n_test, image_size);
        if (trn->parsed()) return run_train(train_co, train_out);
        if (smp->parsed()) return run_sample(run_dir, split, out, n_samples);
        if (ref->parsed()) return run_refine(run_dir, sheets_dir, out);
        if (evl->parsed()) return run_evaluate(run_dir, split, out, stub, eval_co);
        if (rpt->parsed()) return run_report(report_dir, out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed JSON: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
