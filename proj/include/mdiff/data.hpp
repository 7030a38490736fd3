// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Product data model, sales normalization, the VISUELLE-layout loader and a
// seeded synthetic catalog whose generative process is known exactly.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/error.hpp"
#include "mdiff/io.hpp"
#include "mdiff/rng.hpp"

namespace mdiff::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Calendar

inline bool is_leap(int year) { return (year % 4 == 0 && year % 100 != 0) || year % 400 == 0; }

inline int days_in_month(int year, int month) {
    static constexpr std::array<int, 12> days{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    return month == 2 && is_leap(year) ? 29 : days[static_cast<std::size_t>(month - 1)];
}

inline int day_of_year(int year, int month, int day) {
    int doy = day;
    for (int m = 1; m < month; ++m) doy += days_in_month(year, m);
    return doy;
}

struct ReleaseDate {
    int day = 1;
    int week = 1;
    int month = 1;
    int year = 2000;

    /// Week is the 7-day block of the year containing the date (1..53).
    static ReleaseDate from_ymd(int year, int month, int day) {
        if (month < 1 || month > 12 || day < 1 || day > days_in_month(year, month))
            throw ValidationError("invalid calendar date " + std::to_string(year) + "-" + std::to_string(month) + "-" +
                                  std::to_string(day));
        return {day, (day_of_year(year, month, day) - 1) / 7 + 1, month, year};
    }

    /// Parses "YYYY-MM-DD" (an optional time suffix is ignored).
    static ReleaseDate parse(const std::string& text) {
        int y = 0, m = 0, d = 0;
        char sep1 = 0, sep2 = 0;
        std::istringstream is(text);
        if (!(is >> y >> sep1 >> m >> sep2 >> d) || sep1 != '-' || sep2 != '-')
            throw ValidationError("malformed date '" + text + "'");
        return from_ymd(y, m, d);
    }

    void validate() const {
        if (day < 1 || day > 31) throw ValidationError("release day out of range: " + std::to_string(day));
        if (week < 1 || week > 53) throw ValidationError("release week out of range: " + std::to_string(week));
        if (month < 1 || month > 12) throw ValidationError("release month out of range: " + std::to_string(month));
        if (year < 1900 || year > 2200) throw ValidationError("release year out of range: " + std::to_string(year));
    }

    /// Each component divided by its natural maximum; the year is mapped
    /// through [year_min, year_min + year_span].
    std::array<double, 4> encode(int year_min, int year_span) const {
        validate();
        return {day / 31.0, week / 53.0, month / 12.0,
                static_cast<double>(year - year_min) / static_cast<double>(std::max(1, year_span))};
    }

    bool operator==(const ReleaseDate&) const = default;
};

// ---------------------------------------------------------------------------
// Records

/// Square RGB image stored as bytes; `at` yields the [0,1] value.
struct ProductImage {
    std::size_t size = 0;
    std::vector<std::uint8_t> pixels;  // size * size * 3, HWC

    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * size + x) * 3 + c] / 255.0; }

    static ProductImage from_rgb(const io::RgbImage& img) {
        if (img.width != img.height)
            throw ValidationError("image is not square: " + std::to_string(img.width) + "x" + std::to_string(img.height));
        return {img.width, img.rgb};
    }
    io::RgbImage to_rgb() const { return {size, size, pixels}; }

    /// Box-filter resample to `target` x `target`.
    ProductImage resized(std::size_t target) const {
        if (target == size || target == 0) return *this;
        ProductImage out{target, std::vector<std::uint8_t>(target * target * 3)};
        for (std::size_t y = 0; y < target; ++y)
            for (std::size_t x = 0; x < target; ++x) {
                const std::size_t y0 = y * size / target, y1 = std::max(y0 + 1, (y + 1) * size / target);
                const std::size_t x0 = x * size / target, x1 = std::max(x0 + 1, (x + 1) * size / target);
                for (std::size_t c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (std::size_t yy = y0; yy < y1; ++yy)
                        for (std::size_t xx = x0; xx < x1; ++xx) acc += pixels[(yy * size + xx) * 3 + c];
                    out.pixels[(y * target + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::lround(acc / static_cast<double>((y1 - y0) * (x1 - x0))));
                }
            }
        return out;
    }

    bool operator==(const ProductImage&) const = default;
};

struct SalesCurve {
    std::vector<double> values;  // raw weekly units, >= 0
    std::size_t horizon_used = 6;

    std::vector<double> head() const {
        return {values.begin(), values.begin() + static_cast<std::ptrdiff_t>(horizon_used)};
    }
    void validate(const std::string& id) const {
        if (values.size() < horizon_used)
            throw ValidationError("sales curve of " + id + " shorter than horizon " + std::to_string(horizon_used));
        for (double v : values)
            if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("negative or non-finite sales in " + id);
    }
};

struct ProductRecord {
    std::string id;
    ProductImage image;
    std::string image_path;  // relative to the dataset root
    ReleaseDate release;
    SalesCurve sales;
    Split split = Split::train;
    std::vector<double> latents;  // synthetic only
};

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode { zscore, minmax };

inline std::string to_string(NormMode m) { return m == NormMode::zscore ? "zscore" : "minmax"; }
inline NormMode parse_norm_mode(const std::string& s) {
    if (s == "zscore") return NormMode::zscore;
    if (s == "minmax") return NormMode::minmax;
    throw ValidationError("unknown normalization mode '" + s + "'");
}

/// Affine map between raw units and model space: model = (raw - shift) / scale.
struct NormalizationState {
    NormMode mode = NormMode::zscore;
    bool fitted = false;
    double shift = 0.0;
    double scale = 1.0;

    double normalize(double v) const { return (v - shift) / scale; }
    double denormalize(double v) const { return v * scale + shift; }
    std::vector<double> normalize(const std::vector<double>& v) const {
        std::vector<double> out(v.size());
        std::transform(v.begin(), v.end(), out.begin(), [this](double x) { return normalize(x); });
        return out;
    }
    std::vector<double> denormalize(const std::vector<double>& v) const {
        std::vector<double> out(v.size());
        std::transform(v.begin(), v.end(), out.begin(), [this](double x) { return denormalize(x); });
        return out;
    }

    /// Pools every value of the given curves. Min-max over a degenerate range
    /// uses a unit scale, mapping the constant to 0.
    static NormalizationState fit(NormMode mode, const std::vector<std::vector<double>>& curves) {
        std::size_t n = 0;
        double sum = 0.0, lo = INFINITY, hi = -INFINITY;
        for (const auto& c : curves)
            for (double v : c) {
                sum += v;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                ++n;
            }
        if (n == 0) throw ValidationError("cannot fit normalization on an empty training split");
        NormalizationState s{mode, true, 0.0, 1.0};
        if (mode == NormMode::zscore) {
            const double mean = sum / static_cast<double>(n);
            double var = 0.0;
            for (const auto& c : curves)
                for (double v : c) var += (v - mean) * (v - mean);
            const double sd = std::sqrt(var / static_cast<double>(n));
            if (!(sd > 0.0))
                throw ValidationError("training sales are constant; z-score is undefined, use normalization mode 'minmax'");
            s.shift = mean;
            s.scale = sd;
        } else {
            s.shift = lo;
            s.scale = hi > lo ? hi - lo : 1.0;
        }
        return s;
    }

    json to_json() const { return {{"mode", to_string(mode)}, {"fitted", fitted}, {"shift", shift}, {"scale", scale}}; }
    static NormalizationState from_json(const json& j) {
        return {parse_norm_mode(j.at("mode")), j.at("fitted"), j.at("shift"), j.at("scale")};
    }
};

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
    std::vector<ProductRecord> records;
    NormalizationState scaler;
    std::size_t horizon = 6;
    int year_min = 2016;
    int year_span = 4;

    std::vector<const ProductRecord*> split(Split s) const {
        std::vector<const ProductRecord*> out;
        for (const auto& r : records)
            if (r.split == s) out.push_back(&r);
        return out;
    }
    std::size_t count(Split s) const { return split(s).size(); }

    /// Model-space target for a record (first `horizon` weeks).
    std::vector<double> target(const ProductRecord& r) const {
        auto h = r.sales.head();
        return scaler.fitted ? scaler.normalize(h) : h;
    }

    const ProductRecord* find(const std::string& id) const {
        for (const auto& r : records)
            if (r.id == id) return &r;
        return nullptr;
    }

    /// Checks id uniqueness, split disjointness and curve validity.
    void validate() const {
        std::set<std::string> ids;
        for (const auto& r : records) {
            if (!ids.insert(r.id).second) throw ValidationError("duplicate product id " + r.id);
            r.sales.validate(r.id);
            r.release.validate();
            if (r.image.size * r.image.size * 3 != r.image.pixels.size())
                throw ValidationError("image buffer of " + r.id + " does not match its size");
        }
    }
};

/// Fits the scaler on the training split and returns the normalized dataset.
inline Dataset normalize_sales(Dataset ds, NormMode mode) {
    if (ds.scaler.fitted) throw ValidationError("normalize_sales: scaler already fitted");
    std::vector<std::vector<double>> train;
    for (const auto* r : ds.split(Split::train)) train.push_back(r->sales.head());
    ds.scaler = NormalizationState::fit(mode, train);
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic catalog

struct SyntheticConfig {
    std::size_t n_train = 256;
    std::size_t n_test = 64;
    std::size_t image_size = 64;
    std::size_t n_factors = 2;    // 1..3 latent style factors rendered into the image
    std::size_t n_templates = 4;  // seasonal sales shapes selected by release month
    double noise_level = 0.1;     // relative multiplicative noise, clipped at 2 sigma
    std::size_t weeks_total = 12;
    std::size_t horizon = 6;
    int year_min = 2016;
    int n_years = 4;
    double base_amplitude = 60.0;

    void validate() const {
        if (n_train == 0 || n_test == 0) throw ValidationError("synthetic: n_train and n_test must be positive");
        if (image_size < 8) throw ValidationError("synthetic: image_size must be at least 8");
        if (n_factors < 1 || n_factors > 3) throw ValidationError("synthetic: n_factors must be in 1..3");
        if (n_templates < 1 || n_templates > 12) throw ValidationError("synthetic: n_templates must be in 1..12");
        if (noise_level < 0.0) throw ValidationError("synthetic: noise_level must be non-negative");
        if (weeks_total < horizon || horizon == 0) throw ValidationError("synthetic: weeks_total must cover horizon");
        if (n_years < 1) throw ValidationError("synthetic: n_years must be positive");
        if (!(base_amplitude > 0.0)) throw ValidationError("synthetic: base_amplitude must be positive");
    }

    json to_json() const {
        return {{"n_train", n_train},         {"n_test", n_test},           {"image_size", image_size},
                {"n_factors", n_factors},     {"n_templates", n_templates}, {"noise_level", noise_level},
                {"weeks_total", weeks_total}, {"horizon", horizon},         {"year_min", year_min},
                {"n_years", n_years},         {"base_amplitude", base_amplitude}};
    }
    static SyntheticConfig from_json(const json& j) {
        SyntheticConfig c;
        c.n_train = j.value("n_train", c.n_train);
        c.n_test = j.value("n_test", c.n_test);
        c.image_size = j.value("image_size", c.image_size);
        c.n_factors = j.value("n_factors", c.n_factors);
        c.n_templates = j.value("n_templates", c.n_templates);
        c.noise_level = j.value("noise_level", c.noise_level);
        c.weeks_total = j.value("weeks_total", c.weeks_total);
        c.horizon = j.value("horizon", c.horizon);
        c.year_min = j.value("year_min", c.year_min);
        c.n_years = j.value("n_years", c.n_years);
        c.base_amplitude = j.value("base_amplitude", c.base_amplitude);
        return c;
    }
};

/// Ground truth of the synthetic process:
///   sales[w] = round(max(0, amplitude * templates[k][w] * (1 + noise * e_w)))
///   amplitude = base * exp(sum_f weights[f] * (z_f - 0.5)) * (1 + interaction * (z_0 - 0.5) * season_sign[k])
/// with k = month_template[month - 1] and e_w ~ N(0,1) clipped to [-2, 2].
struct GeneratorParams {
    std::vector<std::vector<double>> templates;
    std::vector<double> factor_weights;
    std::vector<double> season_sign;
    std::vector<std::size_t> month_template;
    double base_amplitude = 60.0;
    double interaction = 0.5;

    std::size_t template_for(int month) const { return month_template.at(static_cast<std::size_t>(month - 1)); }

    double amplitude(const std::vector<double>& latents, int month) const {
        double s = 0.0;
        for (std::size_t f = 0; f < latents.size(); ++f) s += factor_weights[f] * (latents[f] - 0.5);
        const std::size_t k = template_for(month);
        return base_amplitude * std::exp(s) * (1.0 + interaction * (latents[0] - 0.5) * season_sign[k]);
    }

    /// Noise-free expected curve over all weeks.
    std::vector<double> mean_curve(const std::vector<double>& latents, int month) const {
        const auto& tpl = templates[template_for(month)];
        const double amp = amplitude(latents, month);
        std::vector<double> out(tpl.size());
        for (std::size_t w = 0; w < tpl.size(); ++w) out[w] = amp * tpl[w];
        return out;
    }

    json to_json() const {
        return {{"templates", templates},       {"factor_weights", factor_weights}, {"season_sign", season_sign},
                {"month_template", month_template}, {"base_amplitude", base_amplitude}, {"interaction", interaction}};
    }
    static GeneratorParams from_json(const json& j) {
        GeneratorParams p;
        p.templates = j.at("templates").get<std::vector<std::vector<double>>>();
        p.factor_weights = j.at("factor_weights").get<std::vector<double>>();
        p.season_sign = j.at("season_sign").get<std::vector<double>>();
        p.month_template = j.at("month_template").get<std::vector<std::size_t>>();
        p.base_amplitude = j.at("base_amplitude");
        p.interaction = j.at("interaction");
        return p;
    }
};

struct SyntheticDataset {
    Dataset dataset;
    GeneratorParams params;
    SyntheticConfig config;
    std::uint64_t seed = 0;
};

namespace detail {

/// Factor 0 sets the background hue (blue to red), factor 1 the number of
/// white squares (1..4), factor 2 the brightness of a green horizontal band.
inline ProductImage render_latents(const std::vector<double>& z, std::size_t size, Rng& rng) {
    ProductImage img{size, std::vector<std::uint8_t>(size * size * 3)};
    auto put = [&](std::size_t y, std::size_t x, double r, double g, double b) {
        auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
        img.pixels[(y * size + x) * 3 + 0] = q(r);
        img.pixels[(y * size + x) * 3 + 1] = q(g);
        img.pixels[(y * size + x) * 3 + 2] = q(b);
    };
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) put(y, x, z[0], 0.15, 1.0 - z[0]);
    if (z.size() > 2) {
        const std::size_t band = std::max<std::size_t>(1, size / 8);
        const std::size_t y0 = size / 2 - band / 2;
        for (std::size_t y = y0; y < y0 + band; ++y)
            for (std::size_t x = 0; x < size; ++x) put(y, x, z[0] * 0.5, z[2], (1.0 - z[0]) * 0.5);
    }
    if (z.size() > 1) {
        const auto count = static_cast<std::size_t>(std::lround(z[1] * 3.0)) + 1;
        const std::size_t cell = size / 3, side = std::max<std::size_t>(2, size / 6);
        std::vector<std::size_t> cells(9);
        for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
        rng.shuffle(cells);
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t cy = (cells[s] / 3) * cell + (cell - side) / 2;
            const std::size_t cx = (cells[s] % 3) * cell + (cell - side) / 2;
            for (std::size_t y = cy; y < cy + side; ++y)
                for (std::size_t x = cx; x < cx + side; ++x) put(y, x, 1.0, 1.0, 1.0);
        }
    }
    return img;
}

/// Distinct unimodal shapes: template k peaks later and decays slower as k grows.
inline std::vector<std::vector<double>> make_templates(std::size_t count, std::size_t weeks, Rng& rng) {
    std::vector<std::vector<double>> out;
    for (std::size_t k = 0; k < count; ++k) {
        const double frac = count > 1 ? static_cast<double>(k) / static_cast<double>(count - 1) : 0.5;
        const double peak = 0.5 + 4.0 * frac + rng.uniform(-0.25, 0.25);
        const double width = 1.2 + 2.5 * frac + rng.uniform(-0.2, 0.2);
        const double floor = 0.1 + 0.15 * (1.0 - frac);
        std::vector<double> t(weeks);
        for (std::size_t w = 0; w < weeks; ++w) {
            const double d = (static_cast<double>(w) - peak) / width;
            t[w] = floor + (1.0 - floor) * std::exp(-0.5 * d * d);
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace detail

/// Pure function of (config, seed): every random choice is drawn from
/// substreams derived from the seed and the record index.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
    config.validate();
    Rng global(derive_seed(seed, 0xC0FFEE));
    GeneratorParams params;
    params.templates = detail::make_templates(config.n_templates, config.weeks_total, global);
    static constexpr std::array<double, 3> weights{1.2, 0.9, 0.6};
    params.factor_weights.assign(weights.begin(), weights.begin() + static_cast<std::ptrdiff_t>(config.n_factors));
    for (std::size_t k = 0; k < config.n_templates; ++k) params.season_sign.push_back(k % 2 == 0 ? 1.0 : -1.0);
    for (int m = 1; m <= 12; ++m)
        params.month_template.push_back(static_cast<std::size_t>(m - 1) * config.n_templates / 12);
    params.base_amplitude = config.base_amplitude;

    SyntheticDataset out{{}, params, config, seed};
    Dataset& ds = out.dataset;
    ds.horizon = config.horizon;
    ds.year_min = config.year_min;
    ds.year_span = config.n_years;
    const std::size_t total = config.n_train + config.n_test;
    char idbuf[32];
    for (std::size_t i = 0; i < total; ++i) {
        Rng rng(derive_seed(seed, 1, i));
        ProductRecord r;
        std::snprintf(idbuf, sizeof idbuf, "syn-%05zu", i);
        r.id = idbuf;
        r.split = i < config.n_train ? Split::train : Split::test;
        for (std::size_t f = 0; f < config.n_factors; ++f) {
            double z = rng.uniform();
            if (f == 1) z = static_cast<double>(rng.uniform_int(0, 3)) / 3.0;  // square count is discrete
            r.latents.push_back(z);
        }
        const int year = config.year_min + static_cast<int>(rng.uniform_int(0, config.n_years - 1));
        const int doy = static_cast<int>(rng.uniform_int(1, is_leap(year) ? 366 : 365));
        int month = 1, rem = doy;
        while (rem > days_in_month(year, month)) rem -= days_in_month(year, month++);
        r.release = ReleaseDate::from_ymd(year, month, rem);
        r.image = detail::render_latents(r.latents, config.image_size, rng);
        r.image_path = "images/" + r.id + ".png";
        const auto mean = params.mean_curve(r.latents, r.release.month);
        r.sales.horizon_used = config.horizon;
        for (double m : mean) {
            const double e = std::clamp(rng.normal(), -2.0, 2.0);
            r.sales.values.push_back(std::round(std::max(0.0, m * (1.0 + config.noise_level * e))));
        }
        ds.records.push_back(std::move(r));
    }
    ds.validate();
    return out;
}

inline json record_to_json(const ProductRecord& r) {
    json j{{"id", r.id},
           {"split", to_string(r.split)},
           {"image", r.image_path},
           {"release", {{"day", r.release.day}, {"week", r.release.week}, {"month", r.release.month}, {"year", r.release.year}}},
           {"sales", r.sales.values}};
    if (!r.latents.empty()) j["latents"] = r.latents;
    return j;
}

inline json synthetic_manifest(const SyntheticDataset& s) {
    json recs = json::array();
    for (const auto& r : s.dataset.records) recs.push_back(record_to_json(r));
    return {{"format", "mdiff-synthetic-v1"},
            {"seed", s.seed},
            {"config", s.config.to_json()},
            {"generator", s.params.to_json()},
            {"records", recs}};
}

/// Writes manifest.json and images/<id>.png under `dir` (created if missing).
inline void save_synthetic(const SyntheticDataset& s, const fs::path& dir) {
    fs::create_directories(dir / "images");
    io::write_file(dir / "manifest.json", synthetic_manifest(s).dump(1));
    for (const auto& r : s.dataset.records) io::write_png(dir / r.image_path, r.image.to_rgb());
}

inline SyntheticDataset load_synthetic(const fs::path& dir) {
    const fs::path manifest = dir / "manifest.json";
    if (!fs::exists(manifest)) throw ValidationError("synthetic manifest not found: " + manifest.string());
    const json j = json::parse(io::read_file(manifest));
    if (j.value("format", "") != "mdiff-synthetic-v1") throw ValidationError("unrecognized manifest format in " + manifest.string());
    SyntheticDataset s;
    s.seed = j.at("seed");
    s.config = SyntheticConfig::from_json(j.at("config"));
    s.params = GeneratorParams::from_json(j.at("generator"));
    s.dataset.horizon = s.config.horizon;
    s.dataset.year_min = s.config.year_min;
    s.dataset.year_span = s.config.n_years;
    for (const auto& jr : j.at("records")) {
        ProductRecord r;
        r.id = jr.at("id");
        r.split = parse_split(jr.at("split"));
        r.image_path = jr.at("image");
        const auto& rel = jr.at("release");
        r.release = {rel.at("day"), rel.at("week"), rel.at("month"), rel.at("year")};
        r.sales.values = jr.at("sales").get<std::vector<double>>();
        r.sales.horizon_used = s.config.horizon;
        if (jr.contains("latents")) r.latents = jr.at("latents").get<std::vector<double>>();
        r.image = ProductImage::from_rgb(io::read_png(dir / r.image_path));
        s.dataset.records.push_back(std::move(r));
    }
    s.dataset.validate();
    return s;
}

// ---------------------------------------------------------------------------
// VISUELLE layout

/// Column mapping for the VISUELLE tables; read from `mapping.json` in the
/// dataset root when present, so header drift between dumps needs no code.
struct VisuelleMapping {
    std::string train_table = "train.csv";
    std::string test_table = "test.csv";
    std::string images_dir = "images";
    std::string id_column = "external_code";
    std::string date_column = "release_date";
    std::string image_column = "image_path";
    std::vector<std::string> sales_columns{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11"};
    int year_min = 2016;
    int year_span = 4;

    static VisuelleMapping from_json(const json& j) {
        VisuelleMapping m;
        m.train_table = j.value("train_table", m.train_table);
        m.test_table = j.value("test_table", m.test_table);
        m.images_dir = j.value("images_dir", m.images_dir);
        m.id_column = j.value("id_column", m.id_column);
        m.date_column = j.value("date_column", m.date_column);
        m.image_column = j.value("image_column", m.image_column);
        m.sales_columns = j.value("sales_columns", m.sales_columns);
        m.year_min = j.value("year_min", m.year_min);
        m.year_span = j.value("year_span", m.year_span);
        return m;
    }
};

struct LoadResult {
    Dataset dataset;
    std::vector<std::string> rejected;  // "<id>: <reason>"
};

/// Loads train/test tables from `root`. Records with a missing image or a
/// malformed date are dropped and reported; an empty split is fatal.
/// `image_size` > 0 resamples every image to that size.
inline LoadResult load_visuelle(const fs::path& root, std::size_t horizon, std::size_t image_size = 0,
                                const std::optional<fs::path>& mapping_path = std::nullopt) {
    if (!fs::is_directory(root)) throw ValidationError("dataset root not found: " + root.string());
    VisuelleMapping map;
    const fs::path mp = mapping_path.value_or(root / "mapping.json");
    if (fs::exists(mp)) map = VisuelleMapping::from_json(json::parse(io::read_file(mp)));
    if (map.sales_columns.size() < horizon) throw ValidationError("mapping has fewer sales columns than the horizon");

    LoadResult result;
    result.dataset.horizon = horizon;
    result.dataset.year_min = map.year_min;
    result.dataset.year_span = map.year_span;
    std::set<std::string> seen;
    for (const auto& [table, split] : {std::pair{map.train_table, Split::train}, std::pair{map.test_table, Split::test}}) {
        const fs::path path = root / table;
        if (!fs::exists(path)) throw ValidationError("split table not found: " + path.string());
        const auto rows = io::parse_csv(io::read_file(path));
        if (rows.empty()) throw ValidationError("split table is empty: " + path.string());
        std::map<std::string, std::size_t> col;
        for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
        auto need = [&](const std::string& name) {
            auto it = col.find(name);
            if (it == col.end()) throw ValidationError("column '" + name + "' missing from " + path.string());
            return it->second;
        };
        const std::size_t id_col = need(map.id_column), date_col = need(map.date_column);
        const std::optional<std::size_t> img_col =
            col.count(map.image_column) ? std::optional{col[map.image_column]} : std::nullopt;
        std::vector<std::size_t> sales_cols;
        for (const auto& s : map.sales_columns) sales_cols.push_back(need(s));

        std::size_t loaded = 0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto& row = rows[i];
            const std::string id = id_col < row.size() ? row[id_col] : "<row " + std::to_string(i) + ">";
            try {
                if (row.size() < rows[0].size()) throw ValidationError("short row");
                ProductRecord r;
                r.id = id;
                r.split = split;
                r.release = ReleaseDate::parse(row[date_col]);
                for (auto c : sales_cols) {
                    std::size_t used = 0;
                    const double v = std::stod(row[c], &used);
                    r.sales.values.push_back(v);
                }
                r.sales.horizon_used = horizon;
                r.sales.validate(id);
                r.image_path = map.images_dir + "/" + (img_col && !row[*img_col].empty() ? row[*img_col] : id + ".png");
                const fs::path img = root / r.image_path;
                if (!fs::exists(img)) throw ValidationError("missing image " + img.string());
                r.image = ProductImage::from_rgb(io::read_png(img)).resized(image_size);
                if (!seen.insert(r.id).second) throw ValidationError("duplicate id");
                result.dataset.records.push_back(std::move(r));
                ++loaded;
            } catch (const std::exception& e) {
                result.rejected.push_back(id + ": " + e.what());
            }
        }
        if (loaded == 0) throw ValidationError("split '" + to_string(split) + "' is empty after loading " + path.string());
    }
    return result;
}

}  // namespace mdiff::data
