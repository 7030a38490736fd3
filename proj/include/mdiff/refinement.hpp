// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Refinement head: collapses an N x W sheet of diffusion draws into one
// W-week forecast.
//
//   temporal stack  per draw, along weeks: W -> 4W -> 8W -> 8W -> 4W -> W (ReLU
//                   between layers); the last layer's bias is indexed by draw
//                   and week, so it has shape [N, W]
//   skip            the input sheet is added to the temporal output
//   sample stack    per week, along draws: N -> N/2 -> N/4 -> 1 (ReLU between
//                   layers, hidden widths at least 2); the last layer's bias is
//                   one scalar per week
//
// Everything runs in normalized sales space.

#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/autograd.hpp"
#include "mdiff/checkpoint.hpp"
#include "mdiff/diffusion.hpp"
#include "mdiff/error.hpp"
#include "mdiff/nn.hpp"
#include "mdiff/optim.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::refine {

using ag::Var;
using diffusion::SampleSheet;
using json = nlohmann::json;

struct RefinerShape {
    std::size_t n_draws = 50;
    std::size_t horizon = 6;

    std::vector<std::size_t> temporal_widths() const {
        const std::size_t W = horizon;
        return {W, 4 * W, 8 * W, 8 * W, 4 * W, W};
    }
    std::vector<std::size_t> sample_widths() const {
        return {n_draws, std::max<std::size_t>(2, n_draws / 2), std::max<std::size_t>(2, n_draws / 4), 1};
    }
    void validate() const {
        if (n_draws < 1 || horizon < 1) throw ValidationError("refiner needs at least one draw and one week");
    }
    json to_json() const {
        return {{"n_draws", n_draws}, {"horizon", horizon}, {"temporal_widths", temporal_widths()},
                {"sample_widths", sample_widths()}};
    }
    static RefinerShape from_json(const json& j) { return {j.at("n_draws").get<std::size_t>(), j.at("horizon").get<std::size_t>()}; }
};

enum class RefinerInit { mean_aggregator, random };

struct RefinerHyper {
    std::size_t epochs = 200;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
    RefinerInit init = RefinerInit::mean_aggregator;
    double init_noise = 0.01;  // scale of the free weights around the mean construction

    void validate() const {
        if (epochs < 1) throw ValidationError("refiner epochs must be positive");
        optim::AdamWConfig{lr, weight_decay}.validate();
    }
    json to_json() const {
        return {{"epochs", epochs}, {"lr", lr}, {"weight_decay", weight_decay}, {"seed", seed},
                {"init", init == RefinerInit::mean_aggregator ? "mean" : "random"}, {"init_noise", init_noise}};
    }
    static RefinerHyper from_json(const json& j) {
        RefinerHyper h;
        h.epochs = j.value("epochs", h.epochs);
        h.lr = j.value("lr", h.lr);
        h.weight_decay = j.value("weight_decay", h.weight_decay);
        h.seed = j.value("seed", h.seed);
        const auto init = j.value("init", std::string("mean"));
        if (init == "mean") h.init = RefinerInit::mean_aggregator;
        else if (init == "random") h.init = RefinerInit::random;
        else throw ValidationError("refiner init must be 'mean' or 'random', got '" + init + "'");
        h.init_noise = j.value("init_noise", h.init_noise);
        return h;
    }
};

class Refiner {
public:
    /// Zero-initialized parameters of the given shape.
    explicit Refiner(RefinerShape shape) : shape_(shape) {
        shape_.validate();
        const auto tw = shape_.temporal_widths();
        for (std::size_t l = 0; l + 1 < tw.size(); ++l) {
            const bool last = l + 2 == tw.size();
            const std::string p = "temporal." + std::to_string(l);
            temporal_w_.push_back(store_.add(p + ".weight", std::vector<double>(tw[l] * tw[l + 1]), {tw[l], tw[l + 1]}));
            temporal_b_.push_back(last ? Var() : store_.add(p + ".bias", std::vector<double>(tw[l + 1]), {tw[l + 1]}));
        }
        draw_bias_ = store_.add("temporal.draw_bias", std::vector<double>(shape_.n_draws * shape_.horizon), {shape_.n_draws, shape_.horizon});
        const auto sw = shape_.sample_widths();
        for (std::size_t l = 0; l + 1 < sw.size(); ++l) {
            const bool last = l + 2 == sw.size();
            const std::string p = "sample." + std::to_string(l);
            sample_w_.push_back(store_.add(p + ".weight", std::vector<double>(sw[l] * sw[l + 1]), {sw[l], sw[l + 1]}));
            sample_b_.push_back(last ? Var() : store_.add(p + ".bias", std::vector<double>(sw[l + 1]), {sw[l + 1]}));
        }
        week_bias_ = store_.add("sample.week_bias", std::vector<double>(shape_.horizon), {shape_.horizon});
    }
    Refiner(const Refiner&) = delete;
    Refiner& operator=(const Refiner&) = delete;
    Refiner(Refiner&&) = default;
    Refiner& operator=(Refiner&&) = default;

    /// Weights under which the output is the per-week mean of the draws: the
    /// temporal stack is silent, the first sample layer computes +mean and
    /// -mean, the middle layer passes both through and the last one
    /// recombines relu(m) - relu(-m) = m.
    static Refiner mean_aggregator(RefinerShape shape) {
        Refiner r(shape);
        r.set_mean_construction();
        return r;
    }

    /// Mean construction plus small random weights on every unit that does
    /// not feed the construction path, so training starts at the mean
    /// aggregator but can use the spare capacity.
    static Refiner initialized(RefinerShape shape, const RefinerHyper& h) {
        Refiner r(shape);
        Rng rng(derive_seed(h.seed, 0x2EF1));
        if (h.init == RefinerInit::random) {
            for (auto& [_, v] : r.store_.items()) {
                const std::size_t fan_in = v.rank() == 2 ? v.dim(0) : 1;
                v.mutable_value() = nn::uniform_init(v.size(), fan_in, rng);
            }
            return r;
        }
        const auto tw = shape.temporal_widths();
        // Hidden temporal layers get the usual fan-in init; the last one stays
        // zero so the stack starts silent.
        for (std::size_t l = 0; l + 2 < tw.size(); ++l) {
            r.temporal_w_[l].mutable_value() = nn::uniform_init(tw[l] * tw[l + 1], tw[l], rng);
            r.temporal_b_[l].mutable_value() = nn::uniform_init(tw[l + 1], tw[l], rng);
        }
        const auto sw = shape.sample_widths();
        // Units 0 and 1 of each hidden sample layer carry the construction;
        // the rest only get inputs, their outgoing weights start at zero.
        auto& w0 = r.sample_w_[0].mutable_value();
        for (std::size_t i = 0; i < sw[0]; ++i)
            for (std::size_t o = 2; o < sw[1]; ++o) w0[i * sw[1] + o] = h.init_noise * rng.normal();
        auto& w1 = r.sample_w_[1].mutable_value();
        for (std::size_t i = 0; i < sw[1]; ++i)
            for (std::size_t o = 2; o < sw[2]; ++o) w1[i * sw[2] + o] = h.init_noise * rng.normal();
        r.set_mean_construction();
        return r;
    }

    const RefinerShape& shape() const { return shape_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    /// sheets [P, N, W] -> forecasts [P, W]
    Var forward(const Var& sheets) const {
        const std::size_t N = shape_.n_draws, W = shape_.horizon;
        if (sheets.rank() != 3 || sheets.dim(1) != N || sheets.dim(2) != W)
            throw ValidationError("refiner expects sheets [P, " + std::to_string(N) + ", " + std::to_string(W) + "], got " +
                                  ag::shape_str(sheets.shape()));
        const std::size_t P = sheets.dim(0);
        Var h = sheets;
        for (std::size_t l = 0; l < temporal_w_.size(); ++l) {
            h = ag::linear(h, temporal_w_[l], temporal_b_[l]);
            if (l + 1 < temporal_w_.size()) h = ag::relu(h);
        }
        h = ag::add_broadcast_leading(h, draw_bias_);
        h = ag::add(h, sheets);
        h = ag::transpose_last2(h);  // [P, W, N]
        for (std::size_t l = 0; l < sample_w_.size(); ++l) {
            h = ag::linear(h, sample_w_[l], sample_b_[l]);
            if (l + 1 < sample_w_.size()) h = ag::relu(h);
        }
        return ag::add_broadcast_leading(ag::reshape(h, {P, W}), week_bias_);
    }

    std::vector<double> operator()(const SampleSheet& sheet) const {
        check_sheet(sheet);
        ag::NoGradGuard guard;
        return forward(Var::constant(sheet.draws, {1, sheet.n, sheet.width})).value();
    }

    std::string content_hash(const json& extra = json::object()) const {
        return checkpoint::content_hash(store_, config_json(extra));
    }
    std::string save(const std::filesystem::path& path, const json& extra = json::object()) const {
        return checkpoint::save(path, store_, config_json(extra));
    }
    /// Returns the refiner plus the extra config stored alongside it.
    static std::pair<Refiner, json> load(const std::filesystem::path& path) {
        const auto archive = checkpoint::parse(io::read_file(path));
        Refiner r(RefinerShape::from_json(archive.config.at("shape")));
        checkpoint::load_into(archive, r.store_);
        return {std::move(r), archive.config.value("extra", json::object())};
    }

    void check_sheet(const SampleSheet& sheet) const {
        if (sheet.n != shape_.n_draws)
            throw ValidationError("sheet for '" + sheet.product_id + "' has " + std::to_string(sheet.n) +
                                  " draws but the refiner was trained for " + std::to_string(shape_.n_draws));
        if (sheet.width != shape_.horizon)
            throw ValidationError("sheet for '" + sheet.product_id + "' has width " + std::to_string(sheet.width) +
                                  ", refiner horizon is " + std::to_string(shape_.horizon));
        for (double v : sheet.draws)
            if (!std::isfinite(v)) throw ValidationError("sheet for '" + sheet.product_id + "' has a non-finite draw");
    }

private:
    json config_json(const json& extra) const { return {{"shape", shape_.to_json()}, {"extra", extra}}; }

    void set_mean_construction() {
        const std::size_t N = shape_.n_draws;
        const auto sw = shape_.sample_widths();
        auto& w0 = sample_w_[0].mutable_value();
        for (std::size_t i = 0; i < N; ++i) {
            w0[i * sw[1] + 0] = 1.0 / static_cast<double>(N);
            w0[i * sw[1] + 1] = -1.0 / static_cast<double>(N);
        }
        auto& w1 = sample_w_[1].mutable_value();
        for (std::size_t i = 0; i < sw[1]; ++i) {
            w1[i * sw[2] + 0] = i == 0 ? 1.0 : 0.0;
            w1[i * sw[2] + 1] = i == 1 ? 1.0 : 0.0;
        }
        auto& w2 = sample_w_[2].mutable_value();
        for (std::size_t i = 0; i < sw[2]; ++i) w2[i] = i == 0 ? 1.0 : (i == 1 ? -1.0 : 0.0);
        for (std::size_t k = 0; k < 2; ++k) {
            sample_b_[k].mutable_value()[0] = 0.0;
            sample_b_[k].mutable_value()[1] = 0.0;
        }
    }

    RefinerShape shape_;
    nn::ParamStore store_;
    std::vector<Var> temporal_w_, temporal_b_, sample_w_, sample_b_;
    Var draw_bias_, week_bias_;
};

/// Mean of squared differences.
inline double mse_loss(std::span<const double> y, std::span<const double> yhat) {
    if (y.size() != yhat.size())
        throw ValidationError("mse_loss: length mismatch (" + std::to_string(y.size()) + " vs " + std::to_string(yhat.size()) + ")");
    if (y.empty()) throw ValidationError("mse_loss: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return s / static_cast<double>(y.size());
}

struct TrainingPair {
    SampleSheet sheet;
    std::vector<double> truth;  // normalized, length W
};

struct RefinerFit {
    Refiner refiner;
    std::vector<double> loss_history;  // full-batch MSE before each epoch's update, then the final loss
};

/// Full-batch AdamW on the pairs, in the order given.
inline RefinerFit train_refiner(std::span<const TrainingPair> pairs, const RefinerHyper& hyper) {
    hyper.validate();
    if (pairs.empty()) throw ValidationError("train_refiner: no training pairs");
    const RefinerShape shape{pairs[0].sheet.n, pairs[0].sheet.width};
    RefinerFit fit{Refiner::initialized(shape, hyper), {}};
    std::vector<double> x, y;
    for (const auto& p : pairs) {
        fit.refiner.check_sheet(p.sheet);
        if (p.truth.size() != shape.horizon)
            throw ValidationError("train_refiner: truth for '" + p.sheet.product_id + "' has wrong length");
        x.insert(x.end(), p.sheet.draws.begin(), p.sheet.draws.end());
        y.insert(y.end(), p.truth.begin(), p.truth.end());
    }
    const Var X = Var::constant(std::move(x), {pairs.size(), shape.n_draws, shape.horizon});
    const Var Y = Var::constant(std::move(y), {pairs.size(), shape.horizon});
    optim::AdamW opt(fit.refiner.params(), {hyper.lr, hyper.weight_decay});
    for (std::size_t e = 0; e <= hyper.epochs; ++e) {
        fit.refiner.params().zero_grad();
        Var loss = ag::mse(fit.refiner.forward(X), Y);
        const double l = loss.item();
        if (!std::isfinite(l))
            throw RuntimeFailure("refiner training diverged at epoch " + std::to_string(e) + "; last finite epoch " +
                                 (e ? std::to_string(e - 1) : std::string("none")));
        fit.loss_history.push_back(l);
        if (e == hyper.epochs) break;
        ag::backward(loss);
        opt.step();
    }
    return fit;
}

}  // namespace mdiff::refine
