// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Image encoder, release-date encoder and the cross-attention layer that
// fuses them into one conditioning vector per product.

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/autograd.hpp"
#include "mdiff/data.hpp"
#include "mdiff/error.hpp"
#include "mdiff/nn.hpp"

namespace mdiff::net {

using ag::Var;
using json = nlohmann::json;

enum class Backbone {
    small,     // 4 strided conv stages
    residual,  // ResNet-18 topology (basic blocks, no normalization)
};

struct ConditioningConfig {
    std::size_t channels = 64;  // C, shared with the denoiser
    std::size_t horizon = 6;    // W image tokens
    Backbone backbone = Backbone::small;
    std::vector<std::size_t> backbone_channels{16, 32, 32, 64};
    std::size_t pool_size = 4;
    std::size_t heads = 4;
    std::size_t ffn_dim = 128;
    bool positional_encoding = true;
    bool use_image = true;
    bool use_temporal = true;
    int year_min = 2016;
    int year_span = 4;

    void validate() const {
        if (!use_image && !use_temporal) throw ValidationError("conditioning: use_image and use_temporal cannot both be false");
        if (heads == 0 || channels % heads != 0) throw ValidationError("conditioning: channels must be divisible by heads");
        if (backbone_channels.size() != 4) throw ValidationError("conditioning: backbone_channels needs 4 stage widths");
        if (!pool_size || !horizon || !ffn_dim) throw ValidationError("conditioning: sizes must be positive");
    }

    json to_json() const {
        return {{"channels", channels},
                {"horizon", horizon},
                {"backbone", backbone == Backbone::small ? "small" : "residual"},
                {"backbone_channels", backbone_channels},
                {"pool_size", pool_size},
                {"heads", heads},
                {"ffn_dim", ffn_dim},
                {"positional_encoding", positional_encoding},
                {"use_image", use_image},
                {"use_temporal", use_temporal},
                {"year_min", year_min},
                {"year_span", year_span}};
    }
    static ConditioningConfig from_json(const json& j) {
        ConditioningConfig c;
        c.channels = j.value("channels", c.channels);
        c.horizon = j.value("horizon", c.horizon);
        const std::string bb = j.value("backbone", std::string("small"));
        if (bb != "small" && bb != "residual") throw ValidationError("unknown backbone '" + bb + "'");
        c.backbone = bb == "small" ? Backbone::small : Backbone::residual;
        c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
        c.pool_size = j.value("pool_size", c.pool_size);
        c.heads = j.value("heads", c.heads);
        c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
        c.positional_encoding = j.value("positional_encoding", c.positional_encoding);
        c.use_image = j.value("use_image", c.use_image);
        c.use_temporal = j.value("use_temporal", c.use_temporal);
        c.year_min = j.value("year_min", c.year_min);
        c.year_span = j.value("year_span", c.year_span);
        return c;
    }
};

/// Stacks images into a [B, S, S, 3] tensor of [0,1] values.
inline Var image_batch(std::span<const data::ProductImage* const> images) {
    if (images.empty()) throw ValidationError("image batch is empty");
    const std::size_t S = images[0]->size;
    std::vector<double> v;
    v.reserve(images.size() * S * S * 3);
    for (const auto* img : images) {
        if (img->size != S) throw ValidationError("image batch mixes sizes");
        if (img->pixels.size() != S * S * 3) throw ValidationError("image must have exactly 3 channels");
        for (auto p : img->pixels) v.push_back(p / 255.0);
    }
    return Var::constant(std::move(v), {images.size(), S, S, 3});
}

inline Var date_batch(std::span<const data::ReleaseDate> dates, int year_min, int year_span) {
    std::vector<double> v;
    for (const auto& d : dates) {
        const auto e = d.encode(year_min, year_span);
        v.insert(v.end(), e.begin(), e.end());
    }
    return Var::constant(std::move(v), {dates.size(), 4});
}

struct BasicBlock {
    nn::Conv2d conv1, conv2, down;
    bool has_down = false;

    BasicBlock() = default;
    BasicBlock(nn::ParamStore& s, const std::string& p, std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
        : conv1(s, nn::join(p, "conv1"), in, out, 3, stride, 1, rng), conv2(s, nn::join(p, "conv2"), out, out, 3, 1, 1, rng) {
        if (stride != 1 || in != out) {
            down = nn::Conv2d(s, nn::join(p, "down"), in, out, 1, stride, 0, rng);
            has_down = true;
        }
    }
    Var operator()(const Var& x) const {
        Var y = conv2(ag::relu(conv1(x)));
        return ag::relu(ag::add(y, has_down ? down(x) : x));
    }
};

/// Image -> C x W tokens (stored [B, W, C]). The backbone's feature map is
/// pooled to P x P, read as a length-P^2 sequence, reduced over channels by a
/// kernel-1 Conv1D and over positions by a dense layer onto W tokens.
struct ImageEncoder {
    ConditioningConfig cfg;
    std::vector<nn::Conv2d> stages;
    nn::Conv2d stem;
    std::vector<BasicBlock> res_blocks;
    nn::Linear conv1d, to_tokens;

    ImageEncoder() = default;
    ImageEncoder(nn::ParamStore& store, const std::string& prefix, const ConditioningConfig& c, Rng& rng) : cfg(c) {
        const auto& ch = cfg.backbone_channels;
        std::size_t feat = 0;
        if (cfg.backbone == Backbone::small) {
            std::size_t in = 3;
            for (std::size_t i = 0; i < 4; ++i) {
                stages.emplace_back(store, nn::join(prefix, "stage" + std::to_string(i)), in, ch[i], 3, 2, 1, rng);
                in = ch[i];
            }
            feat = in;
        } else {
            stem = nn::Conv2d(store, nn::join(prefix, "stem"), 3, ch[0], 7, 2, 3, rng);
            std::size_t in = ch[0];
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t b = 0; b < 2; ++b) {
                    const std::size_t stride = b == 0 ? 2 : 1;  // layer1 stride stands in for the max-pool
                    res_blocks.emplace_back(store, nn::join(prefix, "layer" + std::to_string(i + 1) + "." + std::to_string(b)),
                                            in, ch[i], stride, rng);
                    in = ch[i];
                }
            feat = in;
        }
        conv1d = nn::Linear(store, nn::join(prefix, "conv1d"), feat, cfg.channels, rng);
        to_tokens = nn::Linear(store, nn::join(prefix, "to_tokens"), cfg.pool_size * cfg.pool_size, cfg.horizon, rng);
    }

    /// images [B, S, S, 3] -> tokens [B, W, C]
    Var operator()(const Var& images) const {
        if (images.rank() != 4 || images.dim(3) != 3 || images.dim(1) != images.dim(2))
            throw ValidationError("image encoder expects square 3-channel input, got " + ag::shape_str(images.shape()));
        if (images.dim(1) < 16) throw ValidationError("image encoder needs images of at least 16 pixels");
        Var h = images;
        if (cfg.backbone == Backbone::small) {
            for (const auto& s : stages) h = ag::relu(s(h));
        } else {
            h = ag::relu(stem(h));
            for (const auto& b : res_blocks) h = b(h);
        }
        const std::size_t B = images.dim(0), P = cfg.pool_size;
        h = ag::adaptive_avg_pool(h, P);
        h = ag::reshape(h, {B, P * P, h.dim(3)});
        h = ag::relu(conv1d(h));                     // [B, P^2, C]
        h = to_tokens(ag::transpose_last2(h));       // [B, C, W]
        return ag::transpose_last2(h);               // [B, W, C]
    }
};

/// Four per-component MLPs (1 -> C) whose outputs are concatenated and
/// reduced (4C -> C).
struct TemporalEncoder {
    std::array<nn::Linear, 4> in1, in2;
    nn::Linear out1, out2;

    TemporalEncoder() = default;
    TemporalEncoder(nn::ParamStore& store, const std::string& prefix, std::size_t C, Rng& rng) {
        static constexpr std::array<const char*, 4> names{"day", "week", "month", "year"};
        for (std::size_t i = 0; i < 4; ++i) {
            in1[i] = nn::Linear(store, nn::join(prefix, std::string(names[i]) + ".fc1"), 1, C, rng);
            in2[i] = nn::Linear(store, nn::join(prefix, std::string(names[i]) + ".fc2"), C, C, rng);
        }
        out1 = nn::Linear(store, nn::join(prefix, "reduce.fc1"), 4 * C, C, rng);
        out2 = nn::Linear(store, nn::join(prefix, "reduce.fc2"), C, C, rng);
    }

    /// dates [B, 4] (encoded) -> [B, C]
    Var operator()(const Var& dates) const {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < 4; ++i) parts.push_back(in2[i](ag::relu(in1[i](ag::slice_last(dates, i, 1)))));
        return out2(ag::relu(out1(ag::concat_last(parts))));
    }
};

struct MultiHeadAttention {
    std::size_t heads = 1, dim = 0;
    nn::Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(nn::ParamStore& s, const std::string& p, std::size_t C, std::size_t h, Rng& rng)
        : heads(h), dim(C), wq(s, nn::join(p, "q"), C, C, rng), wk(s, nn::join(p, "k"), C, C, rng),
          wv(s, nn::join(p, "v"), C, C, rng), wo(s, nn::join(p, "o"), C, C, rng) {}

    struct Result {
        Var out;                       // [B, Lq, C]
        std::vector<double> weights;   // [heads, B, Lq, Lk]
    };

    /// Scaled dot-product attention with 1/sqrt(head_dim) temperature.
    Result operator()(const Var& query, const Var& memory) const {
        const std::size_t dh = dim / heads;
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        Var q = wq(query), k = wk(memory), v = wv(memory);
        std::vector<Var> outs;
        Result r;
        for (std::size_t h = 0; h < heads; ++h) {
            Var qh = ag::slice_last(q, h * dh, dh), kh = ag::slice_last(k, h * dh, dh), vh = ag::slice_last(v, h * dh, dh);
            Var att = ag::softmax_last(ag::scale(ag::bmm(qh, ag::transpose_last2(kh)), inv));
            r.weights.insert(r.weights.end(), att.value().begin(), att.value().end());
            outs.push_back(ag::bmm(att, vh));
        }
        r.out = wo(ag::concat_last(outs));
        return r;
    }
};

/// Post-norm transformer decoder layer with a single query token: the
/// release-date embedding attends over the image tokens. Self-attention over
/// one token is kept for fidelity to the standard layer; its weight is 1.
struct CrossAttentionFusion {
    ConditioningConfig cfg;
    MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm norm1, norm2, norm3;
    nn::Linear ff1, ff2;
    Var positional;  // [W, C] learned
    Var null_query;  // [C], used when the date is ablated

    CrossAttentionFusion() = default;
    CrossAttentionFusion(nn::ParamStore& s, const std::string& p, const ConditioningConfig& c, Rng& rng)
        : cfg(c), self_attn(s, nn::join(p, "self_attn"), c.channels, c.heads, rng),
          cross_attn(s, nn::join(p, "cross_attn"), c.channels, c.heads, rng), norm1(s, nn::join(p, "norm1"), c.channels),
          norm2(s, nn::join(p, "norm2"), c.channels), norm3(s, nn::join(p, "norm3"), c.channels),
          ff1(s, nn::join(p, "ff1"), c.channels, c.ffn_dim, rng), ff2(s, nn::join(p, "ff2"), c.ffn_dim, c.channels, rng) {
        if (cfg.positional_encoding) {
            std::vector<double> pe(c.horizon * c.channels);
            for (auto& v : pe) v = 0.1 * rng.normal();
            positional = s.add(nn::join(p, "positional"), std::move(pe), {c.horizon, c.channels});
        }
        if (!cfg.use_temporal) {
            std::vector<double> q(c.channels);
            for (auto& v : q) v = rng.normal();
            null_query = s.add(nn::join(p, "null_query"), std::move(q), {c.channels});
        }
    }

    struct Result {
        Var cond;                     // [B, C]
        std::vector<double> weights;  // cross-attention [heads, B, 1, W]
    };

    /// tokens [B, W, C], temporal [B, C] -> [B, C]
    Result operator()(const Var& tokens, const Var& temporal) const {
        const std::size_t B = tokens.dim(0), W = tokens.dim(1), C = tokens.dim(2);
        if (C != cfg.channels || temporal.size() != B * C)
            throw ValidationError("fusion: token/query dimension mismatch " + ag::shape_str(tokens.shape()) + " vs " +
                                  ag::shape_str(temporal.shape()));
        Var memory = tokens;
        if (positional.defined()) {
            if (W != positional.dim(0)) throw ValidationError("fusion: positional encoding length differs from token count");
            memory = ag::add_broadcast_leading(tokens, positional);
        }
        Var q = ag::reshape(temporal, {B, 1, C});
        Var x = norm1(ag::add(q, self_attn(q, q).out));
        auto ca = cross_attn(x, memory);
        x = norm2(ag::add(x, ca.out));
        x = norm3(ag::add(x, ff2(ag::relu(ff1(x)))));
        return {ag::reshape(x, {B, C}), std::move(ca.weights)};
    }
};

}  // namespace mdiff::net
