// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion. Criteria 1-7 always
// run; criterion 8 needs the VISUELLE download and runs only when
// --visuelle <dir> is given. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <optional>
#include <sstream>
#include <unistd.h>

#include <CLI11.hpp>

#include "grad_check.hpp"
#include "mdiff/config.hpp"
#include "mdiff/diffusion.hpp"
#include "mdiff/evaluation.hpp"
#include "mdiff/io.hpp"
#include "mdiff/pipeline.hpp"
#include "mdiff/refinement.hpp"
#include "mdiff/training.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
namespace ag = mdiff::ag;
namespace dm = mdiff::diffusion;
namespace eval = mdiff::eval;
namespace pipeline = mdiff::pipeline;
namespace refine = mdiff::refine;
using ag::Var;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string sci(double v) {
    std::ostringstream os;
    os.precision(2);
    os << std::scientific << v;
    return os.str();
}

class Suite {
public:
    /// Runs one criterion, enforcing its runtime budget (seconds, 0 = none).
    void run(int id, const std::string& name, double budget, const std::function<Outcome()>& fn) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (budget > 0 && secs > budget) {
            o.pass = false;
            o.detail += "; runtime " + eval::fmt(secs, 1) + " s exceeds " + eval::fmt(budget, 0) + " s";
        }
        failures_ += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << ", " << eval::fmt(secs, 1)
                  << " s): " << o.detail << std::endl;
    }
    void skip(int id, const std::string& name, const std::string& why) {
        std::cout << "SKIP criterion " << id << " (" << name << "): " << why << std::endl;
    }
    int failures() const { return failures_; }

private:
    int failures_ = 0;
};

// ---------------------------------------------------------------- criterion 1

Outcome metric_oracles() {
    std::mt19937_64 gen(2024);
    std::uniform_real_distribution<double> val(0.0, 100.0);
    std::uniform_int_distribution<int> len(1, 24);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        const int n = len(gen);
        std::vector<double> y(n), p(n);
        for (auto& v : y) v = val(gen) + 0.01;
        for (auto& v : p) v = val(gen) - 20.0;
        worst = std::max(worst, std::fabs(eval::mae(y, p) - static_cast<double>(mdiff::testing::brute_mae(y, p))));
        worst = std::max(worst, std::fabs(eval::wape(y, p) - static_cast<double>(mdiff::testing::brute_wape(y, p))));
    }
    const bool hand = eval::wape(std::vector<double>{10, 10}, std::vector<double>{9, 11}) == 0.1 &&
                      eval::wape(std::vector<double>{3, 5, 7}, std::vector<double>{0, 0, 0}) == 1.0 &&
                      eval::mae(std::vector<double>{2, 4}, std::vector<double>{3, 3}) == 1.0;
    return {worst <= 1e-10 && hand,
            "1000 random pairs, max |diff| " + sci(worst) + " (limit 1e-10); hand cases " + (hand ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------- criterion 2

Outcome diffusion_math() {
    const std::size_t T = 100, n = 100000;
    const auto s = dm::make_schedule(T);
    std::string misses;
    bool decreasing = true;
    for (std::size_t t = 2; t <= T; ++t) decreasing &= s.alpha_bar_at(t) < s.alpha_bar_at(t - 1);

    const double x0 = 1.3;
    const std::vector<std::size_t> grid{1, T / 4, T / 2, 3 * T / 4, T};
    std::vector<double> chain(n, x0);
    mdiff::Rng chain_rng(1), closed_rng(2);
    std::size_t next = 0;
    for (std::size_t t = 1; t <= T; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        for (auto& x : chain) x = std::sqrt(1.0 - beta) * x + std::sqrt(beta) * chain_rng.normal();
        if (next < grid.size() && t == grid[next]) {
            std::vector<double> noise(n);
            closed_rng.fill_normal(noise);
            const auto closed = dm::forward_sample(std::vector<double>(n, x0), t, noise, s);
            const double abar = s.alpha_bar_at(t);
            const std::pair<const char*, const std::vector<double>*> samples[] = {{"chain", &chain}, {"closed form", &closed}};
            for (const auto& [label, v] : samples) {
                const auto miss = mdiff::testing::gaussian_moment_miss(*v, std::sqrt(abar) * x0, 1.0 - abar);
                if (!miss.empty()) misses += std::string(label) + " t=" + std::to_string(t) + ": " + miss + "; ";
            }
            ++next;
        }
    }

    // Full sampler with zero-strength guidance against no guidance.
    dm::FunctionDenoiser den(6, [](std::span<const double> xt, std::span<const std::size_t>, std::span<const double>, std::size_t) {
        std::vector<double> out(xt.size());
        for (std::size_t i = 0; i < xt.size(); ++i) out[i] = 0.3 * xt[i] + 0.1;
        return out;
    });
    dm::SamplerOptions plain;
    plain.n_samples = 50;
    plain.seed = 7;
    auto guided = plain;
    guided.guidance = dm::observation_guidance(0.0, std::vector<double>(6, 2.0), std::vector<double>(6, 1.0), s);
    const auto a = dm::sample(den, std::vector<double>{}, s, plain), b = dm::sample(den, std::vector<double>{}, s, guided);
    const bool noop = a.draws.size() == b.draws.size() &&
                      std::memcmp(a.draws.data(), b.draws.data(), a.draws.size() * sizeof(double)) == 0;

    const bool pass = misses.empty() && decreasing && noop;
    return {pass, std::string("MC moments at t={1,25,50,75,100} with 1e5 draws: ") + (misses.empty() ? "within 3 sigma" : misses) +
                      "; alpha_bar strictly decreasing: " + (decreasing ? "yes" : "NO") +
                      "; s=0 guidance bitwise no-op: " + (noop ? "yes" : "NO")};
}

// ---------------------------------------------------------------- criterion 3

mdiff::ModelConfig gradcheck_model() {
    mdiff::ModelConfig m;
    m.denoiser.n_blocks = 2;
    m.denoiser.channels = 8;
    m.denoiser.horizon = 6;
    m.denoiser.ssm_state_dim = 4;
    m.denoiser.step_embed_dim = 8;
    m.conditioning.channels = 8;
    m.conditioning.horizon = 6;
    m.conditioning.heads = 2;
    m.conditioning.ffn_dim = 8;
    m.conditioning.backbone_channels = {2, 3, 3, 4};
    m.conditioning.pool_size = 2;
    m.init_seed = 17;
    return m;
}

Outcome network_correctness() {
    mdiff::ConditionalModel model(gradcheck_model());
    mdiff::data::SyntheticConfig sc;
    sc.n_train = 2;
    sc.n_test = 1;
    sc.image_size = 16;
    auto records = mdiff::data::generate_synthetic(sc, 4).dataset.records;
    std::vector<const mdiff::data::ProductRecord*> ptrs{&records[0], &records[1]};
    mdiff::Rng rng(21);
    for (auto& [name, v] : model.params().items())
        if (name.ends_with(".bias"))
            for (auto& b : v.mutable_value()) b += 0.05 * rng.normal();  // off the ReLU kinks of zero background pixels
    const auto schedule = dm::make_schedule(10);
    std::vector<double> xv(12), pv(12);
    rng.fill_normal(xv);
    rng.fill_normal(pv);
    const Var xt = Var::constant(xv, {2, 6}), proj = Var::constant(pv, {2, 6});
    const std::vector<std::size_t> steps{3, schedule.T};
    auto loss = [&] { return ag::sum(ag::mul(model.predict(xt, steps, model.condition(ptrs)), proj)); };
    std::vector<std::pair<std::string, Var>> inputs(model.params().items().begin(), model.params().items().end());
    const auto results = mdiff::testing::check_gradients(loss, inputs, 1e-6);

    std::map<std::string, std::pair<double, double>> groups;  // group -> (max fd norm, max rel error)
    for (const auto& r : results) {
        auto& g = groups[r.name.substr(0, r.name.rfind('.'))];
        g.first = std::max(g.first, r.fd_norm);
        if (r.fd_norm > 1e-9) g.second = std::max(g.second, r.rel_error);
    }
    double worst = 0.0;
    std::string worst_group, dead;
    for (const auto& [name, g] : groups) {
        if (g.second > worst) worst = g.second, worst_group = name;
        // A single fused query attends only to itself, so these scores are constant.
        if (g.first == 0.0 && name != "fusion.self_attn.q" && name != "fusion.self_attn.k") dead += name + " ";
    }

    mdiff::nn::ParamStore store;
    mdiff::Rng srng(3);
    mdiff::net::S4DLayer s4(store, "s4", 5, 8, srng);
    for (auto& v : s4.log_neg_re.mutable_value()) v += 0.5 * srng.normal();
    std::vector<double> u(2 * 6 * 5);
    srng.fill_normal(u);
    const auto conv = s4.linear_part(Var::constant(u, {2, 6, 5})).value();
    const auto rec = mdiff::testing::s4_recurrence(s4, u, 2, 6);
    double kdiff = 0.0;
    for (std::size_t i = 0; i < conv.size(); ++i) kdiff = std::max(kdiff, std::fabs(conv[i] - rec[i]));

    const bool pass = worst < 1e-3 && dead.empty() && kdiff <= 1e-5;
    return {pass, std::to_string(groups.size()) + " parameter groups, worst relative error " + sci(worst) + " (" + worst_group +
                      ", limit 1e-3)" + (dead.empty() ? "" : "; no gradient: " + dead) + "; S4 kernel vs recurrence max |diff| " +
                      sci(kdiff) + " (limit 1e-5)"};
}

// ---------------------------------------------------------------- criterion 4

Outcome refinement_representability() {
    mdiff::Rng rng(1);
    double worst = 0.0;
    for (std::size_t n : {1u, 2u, 7u, 50u}) {
        const auto r = refine::Refiner::mean_aggregator({n, 6});
        for (int k = 0; k < 50; ++k) {
            dm::SampleSheet s{"p", n, 6, std::vector<double>(n * 6)};
            rng.fill_normal(s.draws, 3.0);
            const auto got = r(s);
            for (std::size_t w = 0; w < 6; ++w) {
                long double acc = 0;
                for (std::size_t i = 0; i < n; ++i) acc += s.at(i, w);
                worst = std::max(worst, std::fabs(got[w] - static_cast<double>(acc / n)));
            }
        }
    }
    refine::TrainingPair pair;
    pair.truth.resize(6);
    rng.fill_normal(pair.truth);
    pair.sheet = {"single", 10, 6, std::vector<double>(60)};
    rng.fill_normal(pair.sheet.draws);
    refine::RefinerHyper h;
    h.epochs = 1000;
    h.seed = 9;
    const double mse = refine::train_refiner(std::span(&pair, 1), h).loss_history.back();
    return {worst <= 1e-12 && mse < 1e-3, "mean construction max |diff| " + sci(worst) + " (limit 1e-12); single-pair MSE " +
                                              sci(mse) + " after 1000 epochs (limit 1e-3)"};
}

// ----------------------------------------------------------- criteria 5 - 7

struct Benchmark {
    fs::path work;
    mdiff::RunConfig base;
    std::optional<mdiff::data::Dataset> dataset;
    std::map<std::string, eval::ForecastReport> reports;  // by ablation

    const mdiff::data::Dataset& data() {
        if (!dataset) dataset = pipeline::load_dataset(base.dataset, base.seed);
        return *dataset;
    }
    const eval::ForecastReport& report(const std::string& ablation) {
        if (auto it = reports.find(ablation); it != reports.end()) return it->second;
        auto cfg = base;
        cfg.apply_ablation(ablation);
        const auto run = pipeline::train_pipeline(data(), cfg, work / ("run_" + ablation));
        auto rep = pipeline::evaluate_run(run, data(), mdiff::data::Split::test);
        eval::render_report(rep, work / ("report_" + ablation));
        return reports.emplace(ablation, std::move(rep)).first->second;
    }
};

std::string tree_digest(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + mdiff::io::read_file(f);
    return mdiff::io::git_blob_hash(all);
}

Outcome synthetic_benchmark(Benchmark& b) {
    const auto& rep = b.report("none");
    const double refined = rep.wape(), naive = rep.predictor_wape("naive_training_mean", true),
                 mean = rep.predictor_wape("mean_of_draws", true), median = rep.predictor_wape("median_of_draws", true);
    const bool a = refined < 0.9 * naive, c = refined <= mean;
    return {a && c, "test products " + std::to_string(rep.products.size()) + "; refined WAPE " + eval::fmt(refined) +
                        " vs 0.9 x naive " + eval::fmt(0.9 * naive) + " (" + (a ? "ok" : "NOT below") + "), mean-of-draws " +
                        eval::fmt(mean) + " (" + (c ? "ok" : "refined is worse") + "), median-of-draws " + eval::fmt(median)};
}

Outcome ablation_ordering(Benchmark& b) {
    const double full = b.report("none").wape(), no_image = b.report("no-image").wape(),
                 no_temporal = b.report("no-temporal").wape();
    const bool pass = full <= no_image && full <= no_temporal;
    return {pass, "WAPE full " + eval::fmt(full) + ", date-only (no-image) " + eval::fmt(no_image) + ", image-only (no-temporal) " +
                      eval::fmt(no_temporal)};
}

Outcome reproducibility(Benchmark& b) {
    b.report("none");
    const auto rerun = b.work / "rerun";
    const auto run = pipeline::train_pipeline(b.data(), b.base, rerun / "run");
    eval::render_report(pipeline::evaluate_run(pipeline::load_run(rerun / "run"), b.data(), mdiff::data::Split::test), rerun / "report");
    const bool ckpt = tree_digest(b.work / "run_none") == tree_digest(rerun / "run");
    const bool report = tree_digest(b.work / "report_none") == tree_digest(rerun / "report");

    // Resume: pause stage 1 half way, reload the state, finish; compare with
    // an uninterrupted run of the same length.
    auto cfg = b.base.stage1;
    cfg.epochs = 6;
    mdiff::train::DiffusionTrainer full(b.base.model, b.base.make_schedule(), cfg);
    full.run(b.data());
    mdiff::train::DiffusionTrainer first(b.base.model, b.base.make_schedule(), cfg);
    first.run(b.data(), [](const mdiff::train::EpochRecord& r) { return r.epoch < 3; });
    first.save_state(b.work / "paused.state");
    auto resumed = mdiff::train::DiffusionTrainer::resume(b.work / "paused.state");
    resumed.run(b.data());
    const bool resume = resumed.model().content_hash() == full.model().content_hash() && resumed.loss_csv() == full.loss_csv();
    (void)run;
    return {ckpt && report && resume, std::string("rerun checkpoints ") + (ckpt ? "bitwise identical" : "DIFFER") + ", reports " +
                                          (report ? "bitwise identical" : "DIFFER") + "; resume at epoch 3 of 6 " +
                                          (resume ? "matches" : "DIFFERS FROM") + " uninterrupted training"};
}

// ---------------------------------------------------------------- criterion 8

Outcome visuelle_reproduction(const fs::path& config, const std::string& data_dir, const fs::path& work) {
    json doc = json::parse(mdiff::io::read_file(config));
    doc["dataset"]["path"] = data_dir;
    const auto cfg = mdiff::RunConfig::from_json(doc);
    cfg.validate();
    const auto ds = pipeline::load_dataset(cfg.dataset, cfg.seed, &std::cerr);
    const auto run = pipeline::train_pipeline(ds, cfg, work / "visuelle_run", &std::cerr);
    const auto rep = pipeline::evaluate_run(run, ds, mdiff::data::Split::test, &std::cerr);
    eval::render_report(rep, work / "visuelle_report");
    const double wape = 100.0 * rep.wape(), mae = rep.mae();
    const bool pass = std::fabs(wape - 54.7) <= 2.0 && std::fabs(mae - 30.1) <= 1.5;
    return {pass, "WAPE " + eval::fmt(wape, 2) + " (target 54.7 +- 2.0), MAE " + eval::fmt(mae, 2) + " (target 30.1 +- 1.5)"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mdiff acceptance suite"};
    std::string visuelle, config = std::string(MDIFF_CONFIG_DIR) + "/desk.json", keep;
    app.add_option("--config", config, "benchmark configuration for criteria 5-7");
    app.add_option("--visuelle", visuelle, "VISUELLE root; enables criterion 8 (full-scale, hours of compute)");
    app.add_option("--keep", keep, "write runs and reports here and keep them");
    CLI11_PARSE(app, argc, argv);

    const fs::path work = keep.empty() ? fs::temp_directory_path() / ("mdiff_acceptance_" + std::to_string(::getpid())) : fs::path(keep);
    fs::remove_all(work);
    fs::create_directories(work);

    Suite suite;
    suite.run(1, "metric oracles", 5, metric_oracles);
    suite.run(2, "diffusion math", 60, diffusion_math);
    suite.run(3, "network correctness", 300, network_correctness);
    suite.run(4, "refinement representability", 120, refinement_representability);

    Benchmark bench{work, mdiff::RunConfig::from_json(json::parse(mdiff::io::read_file(config))), {}, {}};
    suite.run(5, "synthetic benchmark", 3600, [&] { return synthetic_benchmark(bench); });
    suite.run(6, "ablation ordering", 0, [&] { return ablation_ordering(bench); });
    suite.run(7, "reproducibility", 0, [&] { return reproducibility(bench); });

    if (visuelle.empty())
        suite.skip(8, "VISUELLE reproduction", "opt-in; pass --visuelle <dir> with the public dataset and full-scale compute");
    else
        suite.run(8, "VISUELLE reproduction", 0,
                  [&] { return visuelle_reproduction(std::string(MDIFF_CONFIG_DIR) + "/visuelle.json", visuelle, work); });

    if (keep.empty()) fs::remove_all(work);
    std::cout << (suite.failures() ? std::to_string(suite.failures()) + " criterion(s) failed" : std::string("all criteria passed"))
              << std::endl;
    return suite.failures() ? 1 : 0;
}
