// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// The conditioned diffusion network: encoders + fusion + denoiser sharing
// one parameter store and one checkpoint.

#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/checkpoint.hpp"
#include "mdiff/conditioning.hpp"
#include "mdiff/data.hpp"
#include "mdiff/denoiser.hpp"
#include "mdiff/diffusion.hpp"

namespace mdiff {

using ag::Var;
using json = nlohmann::json;

struct ModelConfig {
    net::DenoiserConfig denoiser;
    net::ConditioningConfig conditioning;
    diffusion::Parameterization parameterization = diffusion::Parameterization::epsilon;
    std::uint64_t init_seed = 0;

    void validate() const {
        denoiser.validate();
        conditioning.validate();
        if (conditioning.channels != denoiser.channels)
            throw ValidationError("conditioning channels must equal denoiser channels");
        if (conditioning.horizon != denoiser.horizon) throw ValidationError("conditioning horizon must equal denoiser horizon");
    }
    json to_json() const {
        return {{"denoiser", denoiser.to_json()},
                {"conditioning", conditioning.to_json()},
                {"parameterization", diffusion::to_string(parameterization)},
                {"init_seed", init_seed}};
    }
    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.denoiser = net::DenoiserConfig::from_json(j.value("denoiser", json::object()));
        c.conditioning = net::ConditioningConfig::from_json(j.value("conditioning", json::object()));
        c.parameterization = diffusion::parse_parameterization(j.value("parameterization", std::string("epsilon")));
        c.init_seed = j.value("init_seed", c.init_seed);
        return c;
    }
};

class ConditionalModel {
public:
    explicit ConditionalModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.init_seed, 0x5EED));
        if (cfg_.conditioning.use_image) image_encoder_ = net::ImageEncoder(store_, "image_encoder", cfg_.conditioning, rng);
        if (cfg_.conditioning.use_temporal) temporal_encoder_ = net::TemporalEncoder(store_, "temporal_encoder", cfg_.denoiser.channels, rng);
        fusion_ = net::CrossAttentionFusion(store_, "fusion", cfg_.conditioning, rng);
        denoiser_ = net::DenoiserNet(store_, "denoiser", cfg_.denoiser, rng);
    }
    ConditionalModel(const ConditionalModel&) = delete;
    ConditionalModel& operator=(const ConditionalModel&) = delete;
    ConditionalModel(ConditionalModel&&) = default;
    ConditionalModel& operator=(ConditionalModel&&) = default;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const net::DenoiserNet& denoiser() const { return denoiser_; }
    const net::ImageEncoder& image_encoder() const { return image_encoder_; }
    const net::TemporalEncoder& temporal_encoder() const { return temporal_encoder_; }
    const net::CrossAttentionFusion& fusion() const { return fusion_; }

    /// images [B, S, S, 3] (ignored when images are ablated), dates [B, 4] -> c [B, C]
    Var condition(const Var& images, const Var& dates) const {
        const std::size_t B = dates.dim(0), C = cfg_.denoiser.channels, W = cfg_.denoiser.horizon;
        Var tokens = cfg_.conditioning.use_image ? image_encoder_(images) : Var::zeros({B, W, C});
        Var query = cfg_.conditioning.use_temporal ? temporal_encoder_(dates)
                                                   : ag::add_broadcast_leading(Var::zeros({B, C}), fusion_.null_query);
        return fusion_(tokens, query).cond;
    }

    Var condition(std::span<const data::ProductRecord* const> records) const {
        std::vector<const data::ProductImage*> imgs;
        std::vector<data::ReleaseDate> dates;
        for (const auto* r : records) {
            imgs.push_back(&r->image);
            dates.push_back(r->release);
        }
        const auto& c = cfg_.conditioning;
        Var images = c.use_image ? net::image_batch(imgs) : Var();
        return condition(images, net::date_batch(dates, c.year_min, c.year_span));
    }

    std::vector<double> condition_vector(const data::ProductRecord& r) const {
        ag::NoGradGuard guard;
        const data::ProductRecord* one[] = {&r};
        return condition(one).value();
    }

    /// xt [B, W], steps, cond [B, C] -> network output [B, W]
    Var predict(const Var& xt, std::span<const std::size_t> steps, const Var& cond) const { return denoiser_(xt, steps, cond); }

    std::string content_hash() const { return checkpoint::content_hash(store_, cfg_.to_json()); }
    std::string save(const std::filesystem::path& path) const { return checkpoint::save(path, store_, cfg_.to_json()); }

    static ConditionalModel load(const std::filesystem::path& path) {
        const auto archive = checkpoint::parse(io::read_file(path));
        ConditionalModel m(ModelConfig::from_json(archive.config));
        checkpoint::load_into(archive, m.store_);
        return m;
    }

private:
    ModelConfig cfg_;
    nn::ParamStore store_;
    net::ImageEncoder image_encoder_;
    net::TemporalEncoder temporal_encoder_;
    net::CrossAttentionFusion fusion_;
    net::DenoiserNet denoiser_;
};

/// Read-only view of a model as a sampler-facing denoiser.
class ModelDenoiser final : public diffusion::Denoiser {
public:
    explicit ModelDenoiser(const ConditionalModel& m) : model_(m) {}

    std::vector<double> predict(std::span<const double> xt, std::span<const std::size_t> steps,
                                std::span<const double> cond, std::size_t batch) const override {
        ag::NoGradGuard guard;
        const std::size_t W = horizon(), C = model_.config().denoiser.channels;
        Var x = Var::constant({xt.begin(), xt.end()}, {batch, W});
        Var c = Var::constant({cond.begin(), cond.end()}, {batch, C});
        return model_.predict(x, steps, c).value();
    }
    std::size_t horizon() const override { return model_.config().denoiser.horizon; }
    diffusion::Parameterization parameterization() const override { return model_.config().parameterization; }

private:
    const ConditionalModel& model_;
};

}  // namespace mdiff
