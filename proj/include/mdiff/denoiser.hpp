// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Residual stack of S4D blocks predicting diffusion noise. Activations are
// laid out [batch, time, channels].

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/autograd.hpp"
#include "mdiff/error.hpp"
#include "mdiff/nn.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::net {

using ag::Var;
using json = nlohmann::json;

struct DenoiserConfig {
    std::size_t n_blocks = 4;
    std::size_t channels = 64;
    std::size_t horizon = 6;
    std::size_t ssm_state_dim = 16;
    std::size_t step_embed_dim = 64;

    void validate() const {
        if (!n_blocks || !channels || !horizon || !ssm_state_dim || !step_embed_dim)
            throw ValidationError("denoiser config: all sizes must be positive");
    }
    json to_json() const {
        return {{"n_blocks", n_blocks}, {"channels", channels}, {"horizon", horizon},
                {"ssm_state_dim", ssm_state_dim}, {"step_embed_dim", step_embed_dim}};
    }
    static DenoiserConfig from_json(const json& j) {
        DenoiserConfig c;
        c.n_blocks = j.value("n_blocks", c.n_blocks);
        c.channels = j.value("channels", c.channels);
        c.horizon = j.value("horizon", c.horizon);
        c.ssm_state_dim = j.value("ssm_state_dim", c.ssm_state_dim);
        c.step_embed_dim = j.value("step_embed_dim", c.step_embed_dim);
        return c;
    }
};

/// Transformer-style sinusoidal features of the step index; an odd `dim`
/// gets a zero final channel.
inline std::vector<double> sinusoidal_embedding(std::size_t t, std::size_t dim) {
    std::vector<double> e(dim, 0.0);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, half)));
        e[i] = std::sin(static_cast<double>(t) * freq);
        e[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return e;
}

struct StepEmbedding {
    std::size_t dim = 0;
    nn::Linear fc1, fc2;

    StepEmbedding() = default;
    StepEmbedding(nn::ParamStore& store, const std::string& prefix, std::size_t dim_, Rng& rng)
        : dim(dim_), fc1(store, nn::join(prefix, "fc1"), dim_, dim_, rng), fc2(store, nn::join(prefix, "fc2"), dim_, dim_, rng) {}

    /// [B, dim] for the given steps.
    Var operator()(std::span<const std::size_t> steps) const {
        std::vector<double> raw;
        raw.reserve(steps.size() * dim);
        for (auto t : steps) {
            const auto e = sinusoidal_embedding(t, dim);
            raw.insert(raw.end(), e.begin(), e.end());
        }
        Var x = Var::constant(std::move(raw), {steps.size(), dim});
        return ag::silu(fc2(ag::silu(fc1(x))));
    }
};

/// Diagonal state-space layer (S4D-Lin initialization) followed by a GELU and
/// a gated linear unit. Shape preserving on [B, L, C].
struct S4DLayer {
    std::size_t channels = 0, modes = 0;
    Var log_dt, log_neg_re, im, c_re, c_im, skip_d;
    nn::Linear glu;

    S4DLayer() = default;
    S4DLayer(nn::ParamStore& store, const std::string& prefix, std::size_t C, std::size_t state_dim, Rng& rng)
        : channels(C), modes(std::max<std::size_t>(1, state_dim / 2)) {
        const std::size_t M = modes;
        std::vector<double> dt(C), nre(C * M), imv(C * M), cr(C * M), ci(C * M), d(C);
        // Sequences are only a few steps long, so step sizes start larger than
        // the long-range defaults to give every mode a visible response.
        for (auto& v : dt) v = rng.uniform(std::log(0.1), std::log(1.0));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t m = 0; m < M; ++m) {
                nre[c * M + m] = std::log(0.5);
                imv[c * M + m] = std::numbers::pi * static_cast<double>(m);
                cr[c * M + m] = rng.normal() * std::sqrt(0.5);
                ci[c * M + m] = rng.normal() * std::sqrt(0.5);
            }
        for (auto& v : d) v = rng.normal();
        log_dt = store.add(nn::join(prefix, "log_dt"), std::move(dt), {C});
        log_neg_re = store.add(nn::join(prefix, "log_neg_re"), std::move(nre), {C, M});
        im = store.add(nn::join(prefix, "im"), std::move(imv), {C, M});
        c_re = store.add(nn::join(prefix, "c_re"), std::move(cr), {C, M});
        c_im = store.add(nn::join(prefix, "c_im"), std::move(ci), {C, M});
        skip_d = store.add(nn::join(prefix, "d"), std::move(d), {C});
        glu = nn::Linear(store, nn::join(prefix, "glu"), C, 2 * C, rng);
    }

    /// Materialized convolution kernel [C, L].
    Var kernel(std::size_t L) const {
        Var k = ag::s4d_kernel(log_dt, log_neg_re, im, c_re, c_im, L);
        for (double v : k.value())
            if (!std::isfinite(v))
                throw RuntimeFailure("S4D kernel is non-finite (min dt " + std::to_string(std::exp(*std::min_element(
                                         log_dt.value().begin(), log_dt.value().end()))) +
                                     ")");
        return k;
    }

    /// Linear state-space part only: causal convolution plus D skip.
    Var linear_part(const Var& x) const {
        return ag::add(ag::causal_depthwise_conv(x, kernel(x.dim(1))), ag::mul_broadcast_last(x, skip_d));
    }

    Var operator()(const Var& x) const {
        Var g = glu(ag::gelu(linear_part(x)));
        return ag::mul(ag::slice_last(g, 0, channels), ag::sigmoid(ag::slice_last(g, channels, channels)));
    }
};

struct BlockOutput {
    Var residual;  // [B, L, C]
    Var skip;      // [B, L, C]
};

/// One residual block: step projection added to the input, S4D layer,
/// conditioning added to the S4D output, tanh-sigmoid gate, then a split
/// into (residual, skip). The residual carries an identity shortcut.
struct ResidualBlock {
    std::size_t channels = 0;
    nn::Linear step_proj, mid_proj, out_proj;
    S4DLayer s4;

    ResidualBlock() = default;
    ResidualBlock(nn::ParamStore& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng)
        : channels(cfg.channels),
          step_proj(store, nn::join(prefix, "step_proj"), cfg.step_embed_dim, cfg.channels, rng),
          mid_proj(store, nn::join(prefix, "mid_proj"), cfg.channels, 2 * cfg.channels, rng),
          out_proj(store, nn::join(prefix, "out_proj"), cfg.channels, 2 * cfg.channels, rng),
          s4(store, nn::join(prefix, "s4"), cfg.channels, cfg.ssm_state_dim, rng) {}

    /// x [B, L, C], step_embed [B, E], cond [B, C].
    BlockOutput operator()(const Var& x, const Var& step_embed, const Var& cond) const {
        const std::size_t B = x.dim(0), L = x.dim(1), C = channels;
        if (x.dim(2) != C || cond.size() != B * C || step_embed.dim(0) != B)
            throw ValidationError("residual block: shape mismatch, x " + ag::shape_str(x.shape()) + ", cond " +
                                  ag::shape_str(cond.shape()));
        Var h = ag::add_broadcast_mid(x, step_proj(step_embed), B, L, C);
        h = ag::add_broadcast_mid(s4(h), cond, B, L, C);
        Var g = mid_proj(h);
        Var gated = ag::mul(ag::tanh(ag::slice_last(g, 0, C)), ag::sigmoid(ag::slice_last(g, C, C)));
        Var o = out_proj(gated);
        return {ag::add(x, ag::slice_last(o, 0, C)), ag::slice_last(o, C, C)};
    }
};

struct DenoiserNet {
    DenoiserConfig cfg;
    nn::Linear input_proj, skip_proj, output_proj;
    StepEmbedding step_embedding;
    std::vector<ResidualBlock> blocks;

    DenoiserNet() = default;
    DenoiserNet(nn::ParamStore& store, const std::string& prefix, const DenoiserConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        input_proj = nn::Linear(store, nn::join(prefix, "input_proj"), 1, cfg.channels, rng);
        step_embedding = StepEmbedding(store, nn::join(prefix, "step_embedding"), cfg.step_embed_dim, rng);
        for (std::size_t i = 0; i < cfg.n_blocks; ++i)
            blocks.emplace_back(store, nn::join(prefix, "blocks." + std::to_string(i)), cfg, rng);
        skip_proj = nn::Linear(store, nn::join(prefix, "skip_proj"), cfg.channels, cfg.channels, rng);
        output_proj = nn::Linear(store, nn::join(prefix, "output_proj"), cfg.channels, 1, rng);
    }

    /// Maps the summed skip tensor [B, L, C] to the prediction [B, L].
    Var head(const Var& skip_sum) const {
        const std::size_t B = skip_sum.dim(0), L = skip_sum.dim(1);
        return ag::reshape(output_proj(ag::relu(skip_proj(skip_sum))), {B, L});
    }

    /// xt [B, L], steps (B entries), cond [B, C] -> predicted noise [B, L].
    Var operator()(const Var& xt, std::span<const std::size_t> steps, const Var& cond) const {
        if (xt.rank() != 2 || steps.size() != xt.dim(0) || cond.size() != xt.dim(0) * cfg.channels)
            throw ValidationError("denoiser: inconsistent shapes, xt " + ag::shape_str(xt.shape()) + ", cond " +
                                  ag::shape_str(cond.shape()));
        const std::size_t B = xt.dim(0), L = xt.dim(1);
        Var h = ag::relu(input_proj(ag::reshape(xt, {B, L, 1})));
        const Var emb = step_embedding(steps);
        Var skip_sum;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto out = blocks[i](h, emb, cond);
            for (double v : out.residual.value())
                if (!std::isfinite(v)) throw RuntimeFailure("denoiser: non-finite activation in block " + std::to_string(i));
            h = out.residual;
            skip_sum = skip_sum.defined() ? ag::add(skip_sum, out.skip) : out.skip;
        }
        return head(ag::scale(skip_sum, 1.0 / std::sqrt(static_cast<double>(blocks.size()))));
    }
};

}  // namespace mdiff::net
