// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal raster plot of one forecast: a shaded q10..q90 band, a darker
// q25..q75 band, the draw median, the truth and the refined forecast over
// the horizon. No text; colors are fixed:
//   band       light red / red       median  dark red
//   truth      black                 refined blue

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mdiff/io.hpp"

namespace mdiff::plot {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kAxis{90, 90, 90};
inline constexpr Color kGrid{225, 225, 225};
inline constexpr Color kOuterBand{250, 200, 200};
inline constexpr Color kInnerBand{235, 130, 130};
inline constexpr Color kMedian{150, 20, 20};
inline constexpr Color kTruth{0, 0, 0};
inline constexpr Color kRefined{30, 80, 220};

class Canvas {
public:
    Canvas(std::size_t w, std::size_t h) : img_{w, h, std::vector<std::uint8_t>(w * h * 3, 255)} {}

    void set(long x, long y, Color c) {
        if (x < 0 || y < 0 || x >= static_cast<long>(img_.width) || y >= static_cast<long>(img_.height)) return;
        auto* p = &img_.rgb[(static_cast<std::size_t>(y) * img_.width + static_cast<std::size_t>(x)) * 3];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }
    Color get(long x, long y) const {
        const auto* p = &img_.rgb[(static_cast<std::size_t>(y) * img_.width + static_cast<std::size_t>(x)) * 3];
        return {p[0], p[1], p[2]};
    }

    void vspan(long x, double y0, double y1, Color c) {
        const long a = std::lround(std::min(y0, y1)), b = std::lround(std::max(y0, y1));
        for (long y = a; y <= b; ++y) set(x, y, c);
    }

    /// Line of the given thickness (square brush).
    void line(double x0, double y0, double x1, double y1, Color c, int thickness = 2) {
        const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
        const int steps = std::max(1, static_cast<int>(std::ceil(len)));
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            const long x = std::lround(x0 + t * (x1 - x0)), y = std::lround(y0 + t * (y1 - y0));
            for (int dx = -thickness / 2; dx <= (thickness - 1) / 2; ++dx)
                for (int dy = -thickness / 2; dy <= (thickness - 1) / 2; ++dy) set(x + dx, y + dy, c);
        }
    }

    const io::RgbImage& image() const { return img_; }

private:
    io::RgbImage img_;
};

struct ForecastPlot {
    std::vector<double> q10, q25, q50, q75, q90, truth, refined;
};

/// Pixel geometry shared by the renderer and its tests.
struct Frame {
    std::size_t width = 480, height = 300;
    long left = 40, right = 20, top = 20, bottom = 30;
    double y_min = 0.0, y_max = 1.0;
    std::size_t weeks = 1;

    double x_of(double week) const {
        const double span = static_cast<double>(std::max<std::size_t>(1, weeks - 1));
        return static_cast<double>(left) + week / span * static_cast<double>(static_cast<long>(width) - left - right);
    }
    double y_of(double v) const {
        const double h = static_cast<double>(static_cast<long>(height) - top - bottom);
        return static_cast<double>(top) + (y_max - v) / (y_max - y_min) * h;
    }
};

inline Frame frame_for(const ForecastPlot& p) {
    Frame f;
    f.weeks = p.truth.size();
    double lo = 0.0, hi = 0.0;
    for (const auto* s : {&p.q10, &p.q90, &p.truth, &p.refined, &p.q50})
        for (double v : *s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi - lo < 1e-9) hi = lo + 1.0;
    const double pad = 0.05 * (hi - lo);
    f.y_min = lo < 0.0 ? lo - pad : 0.0;
    f.y_max = hi + pad;
    return f;
}

inline Canvas render(const ForecastPlot& p) {
    const Frame f = frame_for(p);
    Canvas c(f.width, f.height);
    const std::size_t W = f.weeks;
    for (std::size_t w = 0; w < W; ++w) {
        const double x = f.x_of(static_cast<double>(w));
        c.line(x, static_cast<double>(f.top), x, static_cast<double>(static_cast<long>(f.height) - f.bottom), kGrid, 1);
    }
    auto lerp = [&](const std::vector<double>& s, double t) {
        const auto i = std::min(static_cast<std::size_t>(t), W - 1);
        const auto j = std::min(i + 1, W - 1);
        return s[i] + (t - static_cast<double>(i)) * (s[j] - s[i]);
    };
    if (W >= 2) {
        const long x0 = std::lround(f.x_of(0.0)), x1 = std::lround(f.x_of(static_cast<double>(W - 1)));
        for (long x = x0; x <= x1; ++x) {
            const double t = static_cast<double>(x - x0) / static_cast<double>(x1 - x0) * static_cast<double>(W - 1);
            c.vspan(x, f.y_of(lerp(p.q10, t)), f.y_of(lerp(p.q90, t)), kOuterBand);
            c.vspan(x, f.y_of(lerp(p.q25, t)), f.y_of(lerp(p.q75, t)), kInnerBand);
        }
    }
    auto polyline = [&](const std::vector<double>& s, Color col, int th) {
        for (std::size_t w = 0; w + 1 < W; ++w)
            c.line(f.x_of(static_cast<double>(w)), f.y_of(s[w]), f.x_of(static_cast<double>(w + 1)), f.y_of(s[w + 1]), col, th);
        if (W == 1) c.line(f.x_of(0) - 3, f.y_of(s[0]), f.x_of(0) + 3, f.y_of(s[0]), col, th);
    };
    polyline(p.q50, kMedian, 2);
    polyline(p.truth, kTruth, 2);
    polyline(p.refined, kRefined, 2);
    const double base = static_cast<double>(static_cast<long>(f.height) - f.bottom);
    c.line(static_cast<double>(f.left), base, static_cast<double>(static_cast<long>(f.width) - f.right), base, kAxis, 1);
    c.line(static_cast<double>(f.left), static_cast<double>(f.top), static_cast<double>(f.left), base, kAxis, 1);
    return c;
}

}  // namespace mdiff::plot
