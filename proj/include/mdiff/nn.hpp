// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Parameter registry and the small set of layers shared by every network.

#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdiff/autograd.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::nn {

using ag::Shape;
using ag::Var;

/// Ordered, name-addressable collection of trainable tensors. Names are
/// dotted module paths ("blocks.0.s4.log_dt") and double as checkpoint keys.
class ParamStore {
public:
    Var add(const std::string& name, std::vector<double> init, Shape shape) {
        if (index_.count(name)) throw std::logic_error("ParamStore: duplicate parameter " + name);
        index_[name] = params_.size();
        params_.emplace_back(name, Var::parameter(std::move(init), std::move(shape)));
        return params_.back().second;
    }

    const std::vector<std::pair<std::string, Var>>& items() const { return params_; }
    std::vector<std::pair<std::string, Var>>& items() { return params_; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Var get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return params_[it->second].second;
    }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) n += v.size();
        return n;
    }
    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }
    void fill(double x) {
        for (auto& [_, v] : params_)
            for (auto& e : v.mutable_value()) e = x;
    }

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::map<std::string, std::size_t> index_;
};

inline std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default.
inline std::vector<double> uniform_init(std::size_t n, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return v;
}

struct Linear {
    Var weight;  // [in, out]
    Var bias;    // [out]
    std::size_t in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, std::size_t in_features, std::size_t out_features, Rng& rng,
           bool with_bias = true)
        : in(in_features), out(out_features) {
        weight = store.add(join(prefix, "weight"), uniform_init(in * out, in, rng), {in, out});
        if (with_bias) bias = store.add(join(prefix, "bias"), uniform_init(out, in, rng), {out});
    }

    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& prefix, std::size_t dim) {
        gamma = store.add(join(prefix, "gamma"), std::vector<double>(dim, 1.0), {dim});
        beta = store.add(join(prefix, "beta"), std::vector<double>(dim, 0.0), {dim});
    }

    Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct Conv2d {
    Var weight;  // [k, k, in, out]
    Var bias;
    std::size_t stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
           std::size_t stride_, std::size_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        // He-uniform keeps activations alive through stacked ReLU stages.
        const double bound = std::sqrt(6.0 / static_cast<double>(k * k * in));
        std::vector<double> w(k * k * in * out);
        for (auto& x : w) x = rng.uniform(-bound, bound);
        weight = store.add(join(prefix, "weight"), std::move(w), {k, k, in, out});
        bias = store.add(join(prefix, "bias"), std::vector<double>(out, 0.0), {out});
    }

    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

}  // namespace mdiff::nn
