// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Stage-1 diffusion training: per-item uniform step, closed-form noising,
// squared error against the injected noise (or the clean curve for the x0
// parameterization), one AdamW update per minibatch.

#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/checkpoint.hpp"
#include "mdiff/data.hpp"
#include "mdiff/diffusion.hpp"
#include "mdiff/error.hpp"
#include "mdiff/model.hpp"
#include "mdiff/optim.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::train {

namespace fs = std::filesystem;
using ag::Var;
using json = nlohmann::json;

struct TrainConfig {
    std::size_t epochs = 150;
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double val_fraction = 0.0;  // carved from the training split for monitoring
    std::size_t patience = 0;   // 0 disables early stopping

    void validate() const {
        if (epochs < 1) throw ValidationError("epochs must be positive");
        if (batch_size < 1) throw ValidationError("batch_size must be positive");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ValidationError("val_fraction must lie in [0, 1)");
        optim::AdamWConfig{learning_rate, weight_decay}.validate();
    }
    json to_json() const {
        return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"batch_size", batch_size},
                {"seed", seed}, {"val_fraction", val_fraction}, {"patience", patience}};
    }
    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.patience = j.value("patience", c.patience);
        return c;
    }
};

/// Regression target for a noised batch under the given parameterization.
inline const std::vector<double>& objective_target(diffusion::Parameterization p, const std::vector<double>& x0,
                                                   const std::vector<double>& noise) {
    return p == diffusion::Parameterization::epsilon ? noise : x0;
}

/// Noises x0 [B, W] at per-item steps and returns the squared-error loss of
/// `predict(xt, steps)` against the parameterization's target.
inline Var denoising_loss(const std::function<Var(const Var&, std::span<const std::size_t>)>& predict,
                          const std::vector<double>& x0, std::size_t width, std::span<const std::size_t> steps,
                          const std::vector<double>& noise, const diffusion::NoiseSchedule& s, diffusion::Parameterization p) {
    const std::size_t B = steps.size();
    if (x0.size() != B * width || noise.size() != x0.size()) throw ValidationError("denoising_loss: inconsistent batch shapes");
    std::vector<double> xt(x0.size());
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = diffusion::forward_sample(std::span(x0).subspan(b * width, width), steps[b],
                                                   std::span(noise).subspan(b * width, width), s);
        std::copy(row.begin(), row.end(), xt.begin() + static_cast<std::ptrdiff_t>(b * width));
    }
    const Var pred = predict(Var::constant(std::move(xt), {B, width}), steps);
    return ag::mse(pred, Var::constant(objective_target(p, x0, noise), {B, width}));
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = NAN;
};

/// Mutable training state. Everything needed to continue a run bitwise is
/// here: parameters (inside the model), optimizer moments, the sampling
/// stream and the epoch counter.
class DiffusionTrainer {
public:
    DiffusionTrainer(ModelConfig model_cfg, diffusion::NoiseSchedule schedule, TrainConfig cfg)
        : model_(std::move(model_cfg)), schedule_(std::move(schedule)), cfg_(cfg), rng_(derive_seed(cfg.seed, 0x7A1)) {
        cfg_.validate();
        opt_ = optim::AdamW(model_.params(), {cfg_.learning_rate, cfg_.weight_decay});
    }

    ConditionalModel& model() { return model_; }
    const ConditionalModel& model() const { return model_; }
    const diffusion::NoiseSchedule& schedule() const { return schedule_; }
    const TrainConfig& config() const { return cfg_; }
    std::size_t epoch() const { return epoch_; }
    const std::vector<EpochRecord>& history() const { return history_; }
    bool stopped_early() const { return stopped_; }
    bool done() const { return stopped_ || epoch_ >= cfg_.epochs; }

    /// One minibatch update; returns the loss before the update.
    double train_step(std::span<const data::ProductRecord* const> batch, const data::Dataset& ds) {
        const std::size_t W = model_.config().denoiser.horizon, B = batch.size();
        std::vector<double> x0, noise(B * W);
        std::vector<std::size_t> steps(B);
        for (const auto* r : batch) {
            const auto y = ds.target(*r);
            x0.insert(x0.end(), y.begin(), y.end());
        }
        for (auto& t : steps) t = static_cast<std::size_t>(rng_.uniform_int(1, static_cast<std::int64_t>(schedule_.T)));
        rng_.fill_normal(noise);
        model_.params().zero_grad();
        const auto where = [&] {
            std::string ids;
            for (const auto* r : batch) ids += (ids.empty() ? "" : ",") + r->id;
            return "epoch " + std::to_string(epoch_ + 1) + " on batch [" + ids + "]";
        };
        Var loss;
        try {
            const Var cond = model_.condition(batch);
            loss = denoising_loss([&](const Var& xt, std::span<const std::size_t> st) { return model_.predict(xt, st, cond); },
                                  x0, W, steps, noise, schedule_, model_.config().parameterization);
        } catch (const RuntimeFailure& e) {
            throw RuntimeFailure(std::string(e.what()) + " at " + where());
        }
        const double l = loss.item();
        if (!std::isfinite(l)) throw RuntimeFailure("non-finite diffusion loss at " + where());
        ag::backward(loss);
        opt_.step();
        return l;
    }

    /// Deterministic loss on held-out records: fixed steps and noise derived
    /// from the training seed, no update.
    double evaluate_loss(std::span<const data::ProductRecord* const> records, const data::Dataset& ds) const {
        if (records.empty()) return NAN;
        ag::NoGradGuard guard;
        const std::size_t W = model_.config().denoiser.horizon;
        Rng rng(derive_seed(cfg_.seed, 0x7A2));
        double total = 0.0;
        for (std::size_t start = 0; start < records.size(); start += cfg_.batch_size) {
            const auto batch = records.subspan(start, std::min(cfg_.batch_size, records.size() - start));
            std::vector<double> x0, noise(batch.size() * W);
            std::vector<std::size_t> steps(batch.size());
            for (const auto* r : batch) {
                const auto y = ds.target(*r);
                x0.insert(x0.end(), y.begin(), y.end());
            }
            for (auto& t : steps) t = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(schedule_.T)));
            rng.fill_normal(noise);
            const Var cond = model_.condition(batch);
            total += static_cast<double>(batch.size()) *
                     denoising_loss([&](const Var& xt, std::span<const std::size_t> st) { return model_.predict(xt, st, cond); },
                                    x0, W, steps, noise, schedule_, model_.config().parameterization)
                         .item();
        }
        return total / static_cast<double>(records.size());
    }

    /// Shuffles `train` with the state stream and runs one pass.
    EpochRecord run_epoch(std::vector<const data::ProductRecord*> train, std::span<const data::ProductRecord* const> val,
                          const data::Dataset& ds) {
        if (train.empty()) throw ValidationError("training split is empty");
        rng_.shuffle(train);
        double total = 0.0;
        for (std::size_t start = 0; start < train.size(); start += cfg_.batch_size) {
            const std::size_t n = std::min(cfg_.batch_size, train.size() - start);
            total += static_cast<double>(n) * train_step(std::span(train).subspan(start, n), ds);
        }
        ++epoch_;
        EpochRecord rec{epoch_, total / static_cast<double>(train.size()), evaluate_loss(val, ds)};
        history_.push_back(rec);
        return rec;
    }

    /// Splits the training records into (fit, validation) by a seeded shuffle.
    std::pair<std::vector<const data::ProductRecord*>, std::vector<const data::ProductRecord*>> partition(
        const data::Dataset& ds) const {
        auto all = ds.split(data::Split::train);
        const auto n_val = static_cast<std::size_t>(std::floor(cfg_.val_fraction * static_cast<double>(all.size())));
        if (n_val == 0) return {all, {}};
        Rng rng(derive_seed(cfg_.seed, 0x7A3));
        rng.shuffle(all);
        std::vector<const data::ProductRecord*> val(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
        std::vector<const data::ProductRecord*> fit(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
        return {fit, val};
    }

    /// Trains until `cfg.epochs` (or early stop). `on_epoch` may return false
    /// to pause; the state can then be saved and resumed later.
    void run(const data::Dataset& ds, const std::function<bool(const EpochRecord&)>& on_epoch = {}) {
        const auto [fit, val] = partition(ds);
        while (!done()) {
            const auto rec = run_epoch(fit, val, ds);
            if (cfg_.patience && !val.empty()) track_best(rec);
            if (on_epoch && !on_epoch(rec)) return;
        }
        if (stopped_ && !best_params_.empty()) restore_best();
    }

    std::string loss_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,train_loss,val_loss\n";
        for (const auto& r : history_) {
            os << r.epoch << "," << r.train_loss << ",";
            if (std::isfinite(r.val_loss)) os << r.val_loss;
            os << "\n";
        }
        return os.str();
    }

    /// Serializes parameters, moments, stream and history into one archive.
    std::string serialize_state() const {
        nn::ParamStore bundle;
        const auto& items = model_.params().items();
        auto& self = const_cast<DiffusionTrainer&>(*this);
        const auto& m = self.opt_.first_moments();
        const auto& v = self.opt_.second_moments();
        for (std::size_t k = 0; k < items.size(); ++k) {
            const auto& [name, p] = items[k];
            bundle.add("param/" + name, p.value(), p.shape());
            bundle.add("adam_m/" + name, m[k], p.shape());
            bundle.add("adam_v/" + name, v[k], p.shape());
        }
        json hist = json::array();
        for (const auto& r : history_)
            hist.push_back({r.epoch, r.train_loss, std::isfinite(r.val_loss) ? json(r.val_loss) : json(nullptr)});
        json header{{"kind", "train_state"},
                    {"model", model_.config().to_json()},
                    {"schedule", schedule_.to_json()},
                    {"train", cfg_.to_json()},
                    {"epoch", epoch_},
                    {"optimizer_step", opt_.steps()},
                    {"rng", rng_.state()},
                    {"history", hist},
                    {"stopped", stopped_},
                    {"best_val", best_val_},
                    {"bad_epochs", bad_epochs_},
                    {"best_params", best_params_}};
        return checkpoint::serialize(bundle, header);
    }
    void save_state(const fs::path& path) const { io::write_file(path, serialize_state()); }

    /// Rebuilds a trainer from `save_state` output. `epochs_override` allows
    /// extending a finished run.
    static DiffusionTrainer resume(const fs::path& path, std::optional<std::size_t> epochs_override = std::nullopt) {
        const auto a = checkpoint::parse(io::read_file(path));
        if (a.config.value("kind", std::string()) != "train_state") throw ValidationError(path.string() + " is not a training state");
        auto cfg = TrainConfig::from_json(a.config.at("train"));
        if (epochs_override) cfg.epochs = *epochs_override;
        DiffusionTrainer t(ModelConfig::from_json(a.config.at("model")), diffusion::schedule_from_json(a.config.at("schedule")),
                           cfg);
        nn::ParamStore bundle;
        for (const auto& [name, p] : t.model_.params().items()) {
            bundle.add("param/" + name, std::vector<double>(p.size()), p.shape());
            bundle.add("adam_m/" + name, std::vector<double>(p.size()), p.shape());
            bundle.add("adam_v/" + name, std::vector<double>(p.size()), p.shape());
        }
        checkpoint::load_into(a, bundle);
        auto& items = t.model_.params().items();
        for (std::size_t k = 0; k < items.size(); ++k) {
            const auto& name = items[k].first;
            items[k].second.mutable_value() = bundle.get("param/" + name).value();
            t.opt_.first_moments()[k] = bundle.get("adam_m/" + name).value();
            t.opt_.second_moments()[k] = bundle.get("adam_v/" + name).value();
        }
        t.opt_.set_steps(a.config.at("optimizer_step"));
        t.rng_.set_state(a.config.at("rng"));
        t.epoch_ = a.config.at("epoch");
        for (const auto& h : a.config.at("history"))
            t.history_.push_back({h[0].get<std::size_t>(), h[1].get<double>(), h[2].is_null() ? NAN : h[2].get<double>()});
        t.stopped_ = a.config.at("stopped");
        t.best_val_ = a.config.at("best_val").is_null() ? INFINITY : a.config.at("best_val").get<double>();
        t.bad_epochs_ = a.config.at("bad_epochs");
        t.best_params_ = a.config.at("best_params").get<std::vector<std::vector<double>>>();
        return t;
    }

private:
    void track_best(const EpochRecord& rec) {
        if (rec.val_loss < best_val_) {
            best_val_ = rec.val_loss;
            bad_epochs_ = 0;
            best_params_.clear();
            for (const auto& [_, p] : model_.params().items()) best_params_.push_back(p.value());
        } else if (++bad_epochs_ >= cfg_.patience) {
            stopped_ = true;
        }
    }
    void restore_best() {
        auto& items = model_.params().items();
        for (std::size_t k = 0; k < items.size(); ++k) items[k].second.mutable_value() = best_params_[k];
    }

    ConditionalModel model_;
    diffusion::NoiseSchedule schedule_;
    TrainConfig cfg_;
    optim::AdamW opt_;
    Rng rng_;
    std::size_t epoch_ = 0;
    std::vector<EpochRecord> history_;
    bool stopped_ = false;
    double best_val_ = INFINITY;
    std::size_t bad_epochs_ = 0;
    std::vector<std::vector<double>> best_params_;
};

/// FNV-1a of the product id; keys per-product sampling streams so a sheet
/// does not depend on the order products are visited.
inline std::uint64_t product_key(const std::string& id) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : id) h = (h ^ c) * 1099511628211ULL;
    return h;
}

/// Draws the N x W sheet for one product with its own seeded stream.
inline diffusion::SampleSheet draw_sheet(const ConditionalModel& model, const diffusion::NoiseSchedule& s,
                                         const data::ProductRecord& r, std::size_t n_samples, std::uint64_t seed) {
    const auto cond = model.condition_vector(r);
    ModelDenoiser den(model);
    diffusion::SamplerOptions opt;
    opt.n_samples = n_samples;
    opt.seed = derive_seed(seed, product_key(r.id));
    return diffusion::sample(den, cond, s, opt, r.id);
}

}  // namespace mdiff::train
