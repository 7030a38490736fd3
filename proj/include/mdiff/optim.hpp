// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Adam with decoupled weight decay. The decay term is applied directly as
// p <- p * (1 - weight_decay) and is not scaled by the learning rate, so a
// zero learning rate still shrinks parameters and ignores gradients.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/error.hpp"
#include "mdiff/nn.hpp"

namespace mdiff::optim {

using json = nlohmann::json;

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr >= 0.0)) throw ValidationError("learning rate must be non-negative");
        if (!(weight_decay >= 0.0 && weight_decay < 1.0)) throw ValidationError("weight decay must lie in [0, 1)");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("adam betas must lie in [0, 1)");
    }
};

class AdamW {
public:
    AdamW() = default;
    AdamW(nn::ParamStore& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
        cfg_.validate();
        for (const auto& [_, v] : store.items()) {
            m_.emplace_back(v.size(), 0.0);
            v_.emplace_back(v.size(), 0.0);
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return step_; }

    /// Applies one update from the gradients currently held by the store.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        auto& items = store_->items();
        for (std::size_t k = 0; k < items.size(); ++k) {
            ag::Var& p = items[k].second;
            auto& val = p.mutable_value();
            const auto& g = p.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < val.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                val[i] = val[i] * (1.0 - cfg_.weight_decay) - cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        }
    }

    json state() const { return {{"step", step_}, {"m", m_}, {"v", v_}}; }
    void load_state(const json& j) {
        auto m = j.at("m").get<std::vector<std::vector<double>>>();
        auto v = j.at("v").get<std::vector<std::vector<double>>>();
        if (m.size() != m_.size() || v.size() != v_.size()) throw ValidationError("optimizer state does not match model");
        for (std::size_t k = 0; k < m.size(); ++k)
            if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size())
                throw ValidationError("optimizer state shape mismatch for " + store_->items()[k].first);
        m_ = std::move(m);
        v_ = std::move(v);
        step_ = j.at("step").get<std::uint64_t>();
    }

    /// Raw moment buffers, in store order (for binary checkpointing).
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_steps(std::uint64_t s) { step_ = s; }

private:
    nn::ParamStore* store_ = nullptr;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t step_ = 0;
};

}  // namespace mdiff::optim
