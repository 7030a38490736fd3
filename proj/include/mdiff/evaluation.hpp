// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Forecast metrics, draw aggregators and the per-split report.
//
// Conventions: MAE is averaged per product and then across products; WAPE
// pools absolute errors and actuals over the whole split before dividing.
// The other convention of each is reported alongside. All metrics use raw
// (denormalized) sales. "Clamped" metrics floor predictions at zero.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/data.hpp"
#include "mdiff/diffusion.hpp"
#include "mdiff/error.hpp"
#include "mdiff/io.hpp"
#include "mdiff/plot.hpp"

namespace mdiff::eval {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// WAPE over a unit whose actuals sum to zero or less.
class UndefinedMetric : public ValidationError {
public:
    using ValidationError::ValidationError;
};

inline void require_same_length(std::span<const double> y, std::span<const double> yhat, const char* what) {
    if (y.size() != yhat.size())
        throw ValidationError(std::string(what) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                              std::to_string(yhat.size()) + ")");
    if (y.empty()) throw ValidationError(std::string(what) + ": empty series");
}

inline double abs_error_sum(std::span<const double> y, std::span<const double> yhat) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
    return s;
}

inline double mae(std::span<const double> y, std::span<const double> yhat) {
    require_same_length(y, yhat, "mae");
    return abs_error_sum(y, yhat) / static_cast<double>(y.size());
}

inline double wape(std::span<const double> y, std::span<const double> yhat) {
    require_same_length(y, yhat, "wape");
    double denom = 0.0;
    for (double v : y) denom += v;
    if (!(denom > 0.0)) throw UndefinedMetric("wape: actuals sum to " + io::format_double(denom) + ", ratio undefined");
    return abs_error_sum(y, yhat) / denom;
}

/// Pooled WAPE and both MAE conventions over many (truth, forecast) pairs.
struct MetricAccumulator {
    double abs_err = 0.0, actual = 0.0, mae_sum = 0.0, wape_sum = 0.0;
    std::size_t points = 0, products = 0, wape_products = 0;

    void add(std::span<const double> y, std::span<const double> yhat) {
        require_same_length(y, yhat, "metrics");
        const double e = abs_error_sum(y, yhat);
        double a = 0.0;
        for (double v : y) a += v;
        abs_err += e;
        actual += a;
        mae_sum += e / static_cast<double>(y.size());
        if (a > 0.0) {
            wape_sum += e / a;
            ++wape_products;
        }
        points += y.size();
        ++products;
    }
    double wape() const {
        if (!(actual > 0.0)) throw UndefinedMetric("pooled wape: actuals sum to " + io::format_double(actual));
        return abs_err / actual;
    }
    double mae() const { return products ? mae_sum / static_cast<double>(products) : NAN; }
    double pooled_mae() const { return points ? abs_err / static_cast<double>(points) : NAN; }
    double mean_product_wape() const { return wape_products ? wape_sum / static_cast<double>(wape_products) : NAN; }

    json to_json() const {
        auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
        return {{"wape", num(actual > 0.0 ? abs_err / actual : NAN)},
                {"mae", num(mae())},
                {"pooled_mae", num(pooled_mae())},
                {"mean_product_wape", num(mean_product_wape())},
                {"abs_error_sum", abs_err},
                {"actual_sum", actual},
                {"products", products}};
    }
};

inline std::vector<double> clamp_nonnegative(std::vector<double> v) {
    for (auto& x : v) x = std::max(0.0, x);
    return v;
}

/// Per-week mean across draws.
inline std::vector<double> draw_mean(const diffusion::SampleSheet& s) {
    std::vector<double> out(s.width, 0.0);
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t w = 0; w < s.width; ++w) out[w] += s.at(i, w);
    for (auto& v : out) v /= static_cast<double>(s.n);
    return out;
}

/// Linear-interpolated quantile of an unsorted sample; q in [0, 1]. For
/// q = 0.5 and an even count this is the midpoint of the two central values.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw ValidationError("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::vector<double> draw_quantile(const diffusion::SampleSheet& s, double q) {
    std::vector<double> out(s.width), col(s.n);
    for (std::size_t w = 0; w < s.width; ++w) {
        for (std::size_t i = 0; i < s.n; ++i) col[i] = s.at(i, w);
        out[w] = quantile(col, q);
    }
    return out;
}

inline std::vector<double> draw_median(const diffusion::SampleSheet& s) { return draw_quantile(s, 0.5); }

struct Baselines {
    std::vector<double> mean, median;
};

/// Mean and median of a sheet, mapped to raw units with `scaler`.
inline Baselines aggregate_baselines(const diffusion::SampleSheet& s, const data::NormalizationState& scaler) {
    auto raw = [&](std::vector<double> v) { return scaler.fitted ? scaler.denormalize(v) : v; };
    return {raw(draw_mean(s)), raw(draw_median(s))};
}

/// Maps every draw of a sheet to raw units.
inline diffusion::SampleSheet denormalize_sheet(diffusion::SampleSheet s, const data::NormalizationState& scaler) {
    if (scaler.fitted)
        for (auto& v : s.draws) v = scaler.denormalize(v);
    return s;
}

/// Mean training curve in raw units: the naive predictor.
inline std::vector<double> training_mean_curve(const data::Dataset& ds) {
    const auto train = ds.split(data::Split::train);
    if (train.empty()) throw ValidationError("naive baseline needs a non-empty training split");
    std::vector<double> out(ds.horizon, 0.0);
    for (const auto* r : train) {
        const auto h = r->sales.head();
        for (std::size_t w = 0; w < ds.horizon; ++w) out[w] += h[w];
    }
    for (auto& v : out) v /= static_cast<double>(train.size());
    return out;
}

inline const std::array<double, 5> kQuantileLevels{0.10, 0.25, 0.50, 0.75, 0.90};

/// What a forecaster returns for one product, in raw units.
struct Forecast {
    diffusion::SampleSheet sheet;  // raw-unit draws; may be empty (n = 0)
    std::vector<double> refined;
};

struct ProductResult {
    std::string id;
    std::vector<double> truth, refined, mean, median;
    std::array<std::vector<double>, 5> quantiles;  // q10, q25, q50, q75, q90
    diffusion::SampleSheet sheet;
    double mae = 0.0, mae_raw = 0.0;
    double abs_error_sum = 0.0, actual_sum = 0.0;
};

struct ForecastReport {
    json metadata = json::object();
    std::vector<ProductResult> products;
    std::vector<std::string> skipped;
    std::vector<double> naive_curve;
    json aggregates = json::object();

    double wape() const { return aggregates.at("refined").at("clamped").at("wape").get<double>(); }
    double mae() const { return aggregates.at("refined").at("clamped").at("mae").get<double>(); }
    double predictor_wape(const std::string& name, bool clamped = true) const {
        return aggregates.at(name).at(clamped ? "clamped" : "raw").at("wape").get<double>();
    }

    /// Recomputes every aggregate from the stored per-product numbers.
    void finalize() {
        struct Acc {
            MetricAccumulator clamped, raw;
        };
        std::map<std::string, Acc> acc;
        auto add = [&](const std::string& name, const std::vector<double>& y, const std::vector<double>& p) {
            acc[name].raw.add(y, p);
            acc[name].clamped.add(y, clamp_nonnegative(p));
        };
        for (const auto& r : products) {
            add("refined", r.truth, r.refined);
            if (!r.mean.empty()) add("mean_of_draws", r.truth, r.mean);
            if (!r.median.empty()) add("median_of_draws", r.truth, r.median);
            if (!naive_curve.empty()) add("naive_training_mean", r.truth, naive_curve);
        }
        aggregates = json::object();
        for (const auto& [name, a] : acc) aggregates[name] = {{"clamped", a.clamped.to_json()}, {"raw", a.raw.to_json()}};
        if (products.empty())
            aggregates["refined"] = {{"clamped", MetricAccumulator{}.to_json()}, {"raw", MetricAccumulator{}.to_json()}};
    }

    json to_json() const {
        json ps = json::array();
        for (const auto& r : products) {
            ps.push_back({{"id", r.id},
                          {"truth", r.truth},
                          {"refined", r.refined},
                          {"mean_of_draws", r.mean},
                          {"median_of_draws", r.median},
                          {"quantiles",
                           {{"q10", r.quantiles[0]}, {"q25", r.quantiles[1]}, {"q50", r.quantiles[2]}, {"q75", r.quantiles[3]},
                            {"q90", r.quantiles[4]}}},
                          {"mae", r.mae},
                          {"mae_raw", r.mae_raw},
                          {"abs_error_sum", r.abs_error_sum},
                          {"actual_sum", r.actual_sum}});
        }
        return {{"metadata", metadata}, {"aggregates", aggregates}, {"naive_curve", naive_curve},
                {"skipped", skipped},   {"products", ps}};
    }
};

/// Builds one product's entry. Per-product MAE and sums use clamped
/// predictions; `mae_raw` keeps the unclamped value.
inline ProductResult make_result(const std::string& id, std::vector<double> truth, Forecast f) {
    ProductResult r;
    r.id = id;
    if (f.refined.size() != truth.size())
        throw ValidationError("forecast for '" + id + "' has " + std::to_string(f.refined.size()) + " weeks, truth has " +
                              std::to_string(truth.size()));
    const auto clamped = clamp_nonnegative(f.refined);
    r.mae = mae(truth, clamped);
    r.mae_raw = mae(truth, f.refined);
    r.abs_error_sum = abs_error_sum(truth, clamped);
    for (double v : truth) r.actual_sum += v;
    if (f.sheet.n > 0) {
        r.mean = draw_mean(f.sheet);
        r.median = draw_median(f.sheet);
        for (std::size_t k = 0; k < kQuantileLevels.size(); ++k) r.quantiles[k] = draw_quantile(f.sheet, kQuantileLevels[k]);
    } else {
        for (auto& q : r.quantiles) q = f.refined;
    }
    r.truth = std::move(truth);
    r.refined = std::move(f.refined);
    r.sheet = std::move(f.sheet);
    return r;
}

/// Runs `forecaster` on every product of the split. Products without image
/// pixels are skipped with a warning on `log` and left out of aggregates.
inline ForecastReport evaluate_split(const data::Dataset& ds, data::Split split,
                                     const std::function<Forecast(const data::ProductRecord&)>& forecaster, json metadata = {},
                                     std::ostream* log = &std::cerr) {
    ForecastReport rep;
    rep.metadata = metadata.is_null() ? json::object() : std::move(metadata);
    rep.metadata["split"] = data::to_string(split);
    rep.naive_curve = ds.count(data::Split::train) ? training_mean_curve(ds) : std::vector<double>{};
    for (const auto* r : ds.split(split)) {
        if (r->image.pixels.empty()) {
            if (log) *log << "warning: product " << r->id << " has no image; skipped\n";
            rep.skipped.push_back(r->id);
            continue;
        }
        rep.products.push_back(make_result(r->id, r->sales.head(), forecaster(*r)));
    }
    rep.finalize();
    return rep;
}

inline std::string fmt(double v, int digits = 4) {
    if (!std::isfinite(v)) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string summary_markdown(const ForecastReport& rep) {
    std::ostringstream os;
    os << "# Forecast report\n\n";
    os << "Split: " << rep.metadata.value("split", std::string("?")) << ", products: " << rep.products.size()
       << ", skipped: " << rep.skipped.size() << "\n\n";
    os << "Predictions are clamped at zero unless marked raw.\n\n";
    os << "| predictor | WAPE | MAE | WAPE (raw) | MAE (raw) | pooled MAE | mean product WAPE |\n";
    os << "|---|---|---|---|---|---|---|\n";
    for (const auto& [name, a] : rep.aggregates.items()) {
        auto num = [](const json& j, const char* k) { return j.at(k).is_null() ? NAN : j.at(k).get<double>(); };
        os << "| " << name << " | " << fmt(num(a.at("clamped"), "wape")) << " | " << fmt(num(a.at("clamped"), "mae")) << " | "
           << fmt(num(a.at("raw"), "wape")) << " | " << fmt(num(a.at("raw"), "mae")) << " | "
           << fmt(num(a.at("clamped"), "pooled_mae")) << " | " << fmt(num(a.at("clamped"), "mean_product_wape")) << " |\n";
    }
    if (!rep.products.empty()) {
        os << "\n| product | MAE | plot |\n|---|---|---|\n";
        for (const auto& p : rep.products) os << "| " << p.id << " | " << fmt(p.mae) << " | plots/" << p.id << ".png |\n";
    }
    return os.str();
}

/// Writes report.json, summary.md, plots/<id>.png and sheets/<id>.csv.
inline void render_report(const ForecastReport& rep, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir / "plots", ec);
    if (!ec) fs::create_directories(out_dir / "sheets", ec);
    if (ec) throw RuntimeFailure("cannot create report directory " + out_dir.string() + ": " + ec.message());
    io::write_file(out_dir / "report.json", rep.to_json().dump(2) + "\n");
    io::write_file(out_dir / "summary.md", summary_markdown(rep));
    for (const auto& p : rep.products) {
        plot::ForecastPlot fp{p.quantiles[0], p.quantiles[1], p.quantiles[2], p.quantiles[3], p.quantiles[4], p.truth, p.refined};
        io::write_png(out_dir / "plots" / (p.id + ".png"), plot::render(fp).image());
        if (p.sheet.n > 0) io::write_file(out_dir / "sheets" / (p.id + ".csv"), p.sheet.to_csv());
    }
}

/// Rebuilds a report from report.json (sheets are not reloaded).
inline ForecastReport load_report(const fs::path& path) {
    const json j = json::parse(io::read_file(path));
    ForecastReport rep;
    rep.metadata = j.at("metadata");
    rep.naive_curve = j.at("naive_curve").get<std::vector<double>>();
    rep.skipped = j.at("skipped").get<std::vector<std::string>>();
    for (const auto& p : j.at("products")) {
        ProductResult r;
        r.id = p.at("id");
        r.truth = p.at("truth").get<std::vector<double>>();
        r.refined = p.at("refined").get<std::vector<double>>();
        r.mean = p.at("mean_of_draws").get<std::vector<double>>();
        r.median = p.at("median_of_draws").get<std::vector<double>>();
        const auto& q = p.at("quantiles");
        r.quantiles = {q.at("q10").get<std::vector<double>>(), q.at("q25").get<std::vector<double>>(),
                       q.at("q50").get<std::vector<double>>(), q.at("q75").get<std::vector<double>>(),
                       q.at("q90").get<std::vector<double>>()};
        r.mae = p.at("mae");
        r.mae_raw = p.at("mae_raw");
        r.abs_error_sum = p.at("abs_error_sum");
        r.actual_sum = p.at("actual_sum");
        rep.products.push_back(std::move(r));
    }
    rep.finalize();
    return rep;
}

}  // namespace mdiff::eval
