// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Noise schedule, closed-form forward noising and the ancestral reverse
// sampler. Nothing here knows about a particular network: the sampler only
// talks to the `Denoiser` interface.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/error.hpp"
#include "mdiff/io.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::diffusion {

using json = nlohmann::json;

/// How the reverse-step standard deviation is chosen.
enum class VarianceKind {
    beta,       // sigma_t^2 = beta_t
    posterior,  // sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
};

/// What the network predicts.
enum class Parameterization { epsilon, x0 };

inline std::string to_string(VarianceKind v) { return v == VarianceKind::beta ? "beta" : "posterior"; }
inline std::string to_string(Parameterization p) { return p == Parameterization::epsilon ? "epsilon" : "x0"; }
inline VarianceKind parse_variance(const std::string& s) {
    if (s == "beta") return VarianceKind::beta;
    if (s == "posterior") return VarianceKind::posterior;
    throw ValidationError("unknown variance kind '" + s + "'");
}
inline Parameterization parse_parameterization(const std::string& s) {
    if (s == "epsilon") return Parameterization::epsilon;
    if (s == "x0") return Parameterization::x0;
    throw ValidationError("unknown parameterization '" + s + "'");
}

/// Vectors are indexed by step t in 1..T at position t-1.
struct NoiseSchedule {
    std::size_t T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    VarianceKind variance = VarianceKind::beta;
    std::vector<double> beta, alpha, alpha_bar, sigma;

    double beta_at(std::size_t t) const { return beta[t - 1]; }
    double alpha_at(std::size_t t) const { return alpha[t - 1]; }
    double alpha_bar_at(std::size_t t) const { return alpha_bar[t - 1]; }
    double alpha_bar_prev(std::size_t t) const { return t > 1 ? alpha_bar[t - 2] : 1.0; }
    double sigma_at(std::size_t t) const { return sigma[t - 1]; }

    void check_step(std::size_t t) const {
        if (t < 1 || t > T) throw ValidationError("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(T));
    }

    json to_json() const {
        return {{"T", T}, {"kind", "linear"}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"variance", to_string(variance)}};
    }
    std::string hash() const { return io::git_blob_hash(to_json().dump()); }
};

/// Linear beta schedule. Throws with the offending index if any invariant
/// (0 < beta < 1, strictly decreasing alpha_bar, finite values) fails.
inline NoiseSchedule make_schedule(std::size_t T = 100, double beta_start = 1e-4, double beta_end = 0.02,
                                   VarianceKind variance = VarianceKind::beta) {
    if (T < 1) throw ValidationError("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ValidationError("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.variance = variance;
    double abar = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
        const double prev = abar;
        abar *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        s.alpha_bar.push_back(abar);
        const double var = variance == VarianceKind::beta ? b : b * (1.0 - prev) / (1.0 - abar);
        s.sigma.push_back(std::sqrt(var));
        if (!(b > 0.0 && b < 1.0) || !std::isfinite(abar) || !(abar < prev) || !std::isfinite(s.sigma.back()))
            throw ValidationError("schedule invariant violated at step " + std::to_string(i + 1));
    }
    return s;
}

inline NoiseSchedule schedule_from_json(const json& j) {
    if (j.value("kind", std::string("linear")) != "linear") throw ValidationError("only linear beta schedules are supported");
    return make_schedule(j.value("T", std::size_t{100}), j.value("beta_start", 1e-4), j.value("beta_end", 0.02),
                         parse_variance(j.value("variance", std::string("beta"))));
}

/// x^t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
inline std::vector<double> forward_sample(std::span<const double> x0, std::size_t t, std::span<const double> noise,
                                          const NoiseSchedule& s) {
    s.check_step(t);
    if (noise.size() != x0.size()) throw ValidationError("forward_sample: noise shape differs from x0");
    const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
    return out;
}

/// Extra score term added to the reverse mean as strength * sigma_t^2 * grad.
/// With strength 0 the gradient function is never called.
struct GuidanceSpec {
    double strength = 0.0;
    std::function<std::vector<double>(std::span<const double> xt, std::size_t t)> gradient_fn;

    bool active() const { return strength != 0.0 && static_cast<bool>(gradient_fn); }
};

/// grad_{x^t} log q(x^t | x^0) for observed entries of x^0 (mask = 1);
/// unobserved entries contribute 0.
inline GuidanceSpec observation_guidance(double strength, std::vector<double> observed, std::vector<double> mask,
                                         const NoiseSchedule& s) {
    GuidanceSpec g;
    g.strength = strength;
    g.gradient_fn = [observed = std::move(observed), mask = std::move(mask), s](std::span<const double> xt, std::size_t t) {
        const double a = std::sqrt(s.alpha_bar_at(t)), v = 1.0 - s.alpha_bar_at(t);
        std::vector<double> grad(xt.size());
        for (std::size_t i = 0; i < xt.size(); ++i) {
            const std::size_t k = i % observed.size();
            grad[i] = -mask[k] * (xt[i] - a * observed[k]) / v;
        }
        return grad;
    };
    return g;
}

/// Posterior mean of x^{t-1} from the network output.
inline std::vector<double> reverse_mean(std::span<const double> xt, std::size_t t, std::span<const double> model_out,
                                        const NoiseSchedule& s, Parameterization param = Parameterization::epsilon) {
    s.check_step(t);
    if (model_out.size() != xt.size()) throw ValidationError("reverse_step: prediction shape differs from x^t");
    std::vector<double> mean(xt.size());
    const double beta = s.beta_at(t), alpha = s.alpha_at(t), abar = s.alpha_bar_at(t), abar_prev = s.alpha_bar_prev(t);
    if (param == Parameterization::epsilon) {
        const double c = beta / std::sqrt(1.0 - abar), inv = 1.0 / std::sqrt(alpha);
        for (std::size_t i = 0; i < xt.size(); ++i) mean[i] = inv * (xt[i] - c * model_out[i]);
    } else {
        const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
        const double ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
        for (std::size_t i = 0; i < xt.size(); ++i) mean[i] = c0 * model_out[i] + ct * xt[i];
    }
    return mean;
}

/// One ancestral step. `z` is the standard-normal draw for this step; it is
/// ignored at t = 1 where no noise is added.
inline std::vector<double> reverse_step(std::span<const double> xt, std::size_t t, std::span<const double> model_out,
                                        std::span<const double> cond_gradient, const GuidanceSpec& guidance,
                                        const NoiseSchedule& s, std::span<const double> z,
                                        Parameterization param = Parameterization::epsilon) {
    auto mean = reverse_mean(xt, t, model_out, s, param);
    const double sigma = s.sigma_at(t);
    if (guidance.strength != 0.0 && !cond_gradient.empty()) {
        if (cond_gradient.size() != xt.size()) throw ValidationError("reverse_step: gradient shape differs from x^t");
        const double k = guidance.strength * sigma * sigma;
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += k * cond_gradient[i];
    }
    if (t > 1) {
        if (z.size() != xt.size()) throw ValidationError("reverse_step: noise shape differs from x^t");
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += sigma * z[i];
    }
    return mean;
}

/// Convenience overload drawing z from `rng`.
inline std::vector<double> reverse_step(std::span<const double> xt, std::size_t t, std::span<const double> model_out,
                                        const GuidanceSpec& guidance, const NoiseSchedule& s, Rng& rng,
                                        Parameterization param = Parameterization::epsilon) {
    std::vector<double> z(xt.size());
    rng.fill_normal(z);
    std::vector<double> grad;
    if (guidance.active()) grad = guidance.gradient_fn(xt, t);
    return reverse_step(xt, t, model_out, grad, guidance, s, z, param);
}

/// Batched noise (or x0) predictor: xt is [batch, width] row-major, steps has
/// one entry per row, cond is [batch, cond_dim] row-major.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual std::vector<double> predict(std::span<const double> xt, std::span<const std::size_t> steps,
                                        std::span<const double> cond, std::size_t batch) const = 0;
    virtual std::size_t horizon() const = 0;
    virtual Parameterization parameterization() const { return Parameterization::epsilon; }
};

/// Adapts a lambda to `Denoiser`.
class FunctionDenoiser final : public Denoiser {
public:
    using Fn = std::function<std::vector<double>(std::span<const double>, std::span<const std::size_t>,
                                                 std::span<const double>, std::size_t)>;
    FunctionDenoiser(std::size_t width, Fn fn, Parameterization p = Parameterization::epsilon)
        : width_(width), fn_(std::move(fn)), param_(p) {}
    std::vector<double> predict(std::span<const double> xt, std::span<const std::size_t> steps,
                                std::span<const double> cond, std::size_t batch) const override {
        return fn_(xt, steps, cond, batch);
    }
    std::size_t horizon() const override { return width_; }
    Parameterization parameterization() const override { return param_; }

private:
    std::size_t width_;
    Fn fn_;
    Parameterization param_;
};

/// N x W matrix of draws for one product; row i came from substream i.
struct SampleSheet {
    std::string product_id;
    std::size_t n = 0, width = 0;
    std::vector<double> draws;  // row-major [n, width]

    double at(std::size_t draw, std::size_t week) const { return draws[draw * width + week]; }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t w = 0; w < width; ++w) os << (w ? "," : "") << "week_" << (w + 1);
        os << "\n";
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t w = 0; w < width; ++w) os << (w ? "," : "") << at(i, w);
            os << "\n";
        }
        return os.str();
    }

    static SampleSheet from_csv(const std::string& text, std::string id = {}) {
        const auto rows = io::parse_csv(text);
        if (rows.size() < 2) throw ValidationError("sample sheet CSV has no draws");
        SampleSheet s;
        s.product_id = std::move(id);
        s.width = rows[0].size();
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != s.width) throw ValidationError("sample sheet row " + std::to_string(r) + " has wrong width");
            for (const auto& f : rows[r]) s.draws.push_back(std::stod(f));
        }
        s.n = rows.size() - 1;
        return s;
    }
};

struct SamplerOptions {
    std::size_t n_samples = 50;
    std::uint64_t seed = 0;
    GuidanceSpec guidance;
};

/// Draws `n_samples` curves for one conditioning vector. Draw i uses the
/// substream derive_seed(seed, i) for both its prior draw and every step's
/// noise, so the sheet does not depend on how draws are batched.
inline SampleSheet sample(const Denoiser& denoiser, std::span<const double> cond, const NoiseSchedule& s,
                          const SamplerOptions& opt, std::string product_id = {}) {
    if (opt.n_samples < 1) throw ValidationError("sample: n_samples must be >= 1");
    const std::size_t N = opt.n_samples, W = denoiser.horizon();
    std::vector<Rng> streams;
    streams.reserve(N);
    for (std::size_t i = 0; i < N; ++i) streams.emplace_back(derive_seed(opt.seed, i));
    std::vector<double> x(N * W);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t w = 0; w < W; ++w) x[i * W + w] = streams[i].normal();
    std::vector<double> cond_batch;
    cond_batch.reserve(N * cond.size());
    for (std::size_t i = 0; i < N; ++i) cond_batch.insert(cond_batch.end(), cond.begin(), cond.end());
    std::vector<double> z(N * W), grad;
    for (std::size_t t = s.T; t >= 1; --t) {
        const std::vector<std::size_t> steps(N, t);
        const auto out = denoiser.predict(x, steps, cond_batch, N);
        for (double v : out)
            if (!std::isfinite(v)) throw RuntimeFailure("sample: non-finite denoiser output at step " + std::to_string(t));
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t w = 0; w < W; ++w) z[i * W + w] = streams[i].normal();
        if (opt.guidance.active()) grad = opt.guidance.gradient_fn(x, t);
        x = reverse_step(x, t, out, grad, opt.guidance, s, z, denoiser.parameterization());
    }
    return {std::move(product_id), N, W, std::move(x)};
}

}  // namespace mdiff::diffusion
