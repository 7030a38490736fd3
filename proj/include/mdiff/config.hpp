// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration. A run is described by one JSON document:
//
//   {
//     "seed": 0,
//     "dataset":    {"source": "synthetic" | "visuelle", "path": "...", "horizon": 6,
//                    "normalization": "zscore" | "minmax", "image_size": 32,
//                    "synthetic": {...generator options...}, "mapping": "..."},
//     "schedule":   {"T": 100, "beta_start": 1e-4, "beta_end": 0.02, "variance": "beta"},
//     "model":      {"denoiser": {...}, "conditioning": {...}, "parameterization": "epsilon"},
//     "stage1":     {...diffusion training...},
//     "stage2":     {...refiner training...},
//     "evaluation": {"n_samples": 50, "quantiles": [0.1, 0.25, 0.5, 0.75, 0.9]}
//   }
//
// Missing keys take defaults. Seeds of the individual stages are derived
// from the top-level seed unless given explicitly. `resolved()` fills in
// every default and derived value; that document is what runs persist.

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdiff/data.hpp"
#include "mdiff/diffusion.hpp"
#include "mdiff/error.hpp"
#include "mdiff/model.hpp"
#include "mdiff/refinement.hpp"
#include "mdiff/training.hpp"

namespace mdiff {

struct DatasetConfig {
    std::string source = "synthetic";
    std::string path;  // empty synthetic path: generate in memory from `synthetic`
    std::size_t horizon = 6;
    data::NormMode normalization = data::NormMode::zscore;
    std::size_t image_size = 0;  // 0 keeps the stored size
    data::SyntheticConfig synthetic;
    std::string mapping;

    void validate() const {
        if (source != "synthetic" && source != "visuelle")
            throw ValidationError("dataset.source must be 'synthetic' or 'visuelle', got '" + source + "'");
        if (source == "visuelle" && path.empty()) throw ValidationError("dataset.path is required for visuelle");
        if (horizon == 0) throw ValidationError("dataset.horizon must be positive");
        if (source == "synthetic" && path.empty()) synthetic.validate();
    }
    json to_json() const {
        return {{"source", source},       {"path", path},         {"horizon", horizon},
                {"normalization", data::to_string(normalization)}, {"image_size", image_size},
                {"synthetic", synthetic.to_json()}, {"mapping", mapping}};
    }
    static DatasetConfig from_json(const json& j) {
        DatasetConfig c;
        c.source = j.value("source", c.source);
        c.path = j.value("path", c.path);
        c.horizon = j.value("horizon", c.horizon);
        c.normalization = data::parse_norm_mode(j.value("normalization", std::string("zscore")));
        c.image_size = j.value("image_size", c.image_size);
        c.synthetic = data::SyntheticConfig::from_json(j.value("synthetic", json::object()));
        c.mapping = j.value("mapping", c.mapping);
        return c;
    }
};

struct EvaluationConfig {
    std::size_t n_samples = 50;
    std::vector<double> quantiles{0.10, 0.25, 0.50, 0.75, 0.90};
    std::uint64_t seed = 0;

    void validate() const {
        if (n_samples < 1) throw ValidationError("evaluation.n_samples must be at least 1");
        if (quantiles != std::vector<double>{0.10, 0.25, 0.50, 0.75, 0.90})
            throw ValidationError("evaluation.quantiles: only [0.1, 0.25, 0.5, 0.75, 0.9] is supported");
    }
    json to_json() const { return {{"n_samples", n_samples}, {"quantiles", quantiles}, {"seed", seed}}; }
    static EvaluationConfig from_json(const json& j) {
        EvaluationConfig c;
        c.n_samples = j.value("n_samples", c.n_samples);
        c.quantiles = j.value("quantiles", c.quantiles);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    json schedule = json::object();
    ModelConfig model;
    train::TrainConfig stage1;
    refine::RefinerHyper stage2;
    EvaluationConfig evaluation;

    diffusion::NoiseSchedule make_schedule() const { return diffusion::schedule_from_json(schedule); }

    void validate() const {
        dataset.validate();
        (void)make_schedule();
        model.validate();
        if (!model.conditioning.use_image && !model.conditioning.use_temporal)
            throw ValidationError("at most one conditioning modality can be ablated");
        if (model.denoiser.horizon != dataset.horizon)
            throw ValidationError("model horizon " + std::to_string(model.denoiser.horizon) + " differs from dataset horizon " +
                                  std::to_string(dataset.horizon));
        stage1.validate();
        stage2.validate();
        evaluation.validate();
    }

    /// Applies "no-image" / "no-temporal" / "none".
    void apply_ablation(const std::string& a) {
        if (a == "none" || a.empty()) return;
        if (a == "no-image") model.conditioning.use_image = false;
        else if (a == "no-temporal") model.conditioning.use_temporal = false;
        else throw ValidationError("unknown ablation '" + a + "' (expected no-image or no-temporal)");
    }
    std::string ablation() const {
        if (!model.conditioning.use_image) return "no-image";
        if (!model.conditioning.use_temporal) return "no-temporal";
        return "none";
    }

    json to_json() const {
        return {{"seed", seed},
                {"dataset", dataset.to_json()},
                {"schedule", make_schedule().to_json()},
                {"model", model.to_json()},
                {"stage1", stage1.to_json()},
                {"stage2", stage2.to_json()},
                {"evaluation", evaluation.to_json()}};
    }

    /// Parses a (possibly partial) document. Horizon and channel counts given
    /// once are propagated to the sections that must agree with them, and
    /// stage seeds absent from the document are derived from `seed`.
    static RunConfig from_json(const json& j) {
        RunConfig c;
        c.seed = j.value("seed", c.seed);
        c.dataset = DatasetConfig::from_json(j.value("dataset", json::object()));
        c.schedule = j.value("schedule", json::object());
        const json model = j.value("model", json::object());
        c.model = ModelConfig::from_json(model);
        const json den = model.value("denoiser", json::object()), cond = model.value("conditioning", json::object());
        if (!den.contains("horizon")) c.model.denoiser.horizon = c.dataset.horizon;
        if (!cond.contains("horizon")) c.model.conditioning.horizon = c.model.denoiser.horizon;
        if (!cond.contains("channels")) c.model.conditioning.channels = c.model.denoiser.channels;
        if (!model.contains("init_seed")) c.model.init_seed = derive_seed(c.seed, 1);
        if (c.dataset.source == "synthetic") {
            if (!cond.contains("year_min")) c.model.conditioning.year_min = c.dataset.synthetic.year_min;
            if (!cond.contains("year_span")) c.model.conditioning.year_span = c.dataset.synthetic.n_years;
        }
        const json s1 = j.value("stage1", json::object()), s2 = j.value("stage2", json::object());
        c.stage1 = train::TrainConfig::from_json(s1);
        if (!s1.contains("seed")) c.stage1.seed = derive_seed(c.seed, 2);
        c.stage2 = refine::RefinerHyper::from_json(s2);
        if (!s2.contains("seed")) c.stage2.seed = derive_seed(c.seed, 3);
        const json ev = j.value("evaluation", json::object());
        c.evaluation = EvaluationConfig::from_json(ev);
        if (!ev.contains("seed")) c.evaluation.seed = derive_seed(c.seed, 4);
        return c;
    }

    json resolved() const { return to_json(); }
};

/// Sets `path` ("stage1.epochs") in a JSON document. The value is parsed as
/// JSON when possible, otherwise stored as a string.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not of the form key.path=value");
    std::string pointer;
    const std::string key = assignment.substr(0, eq);
    std::size_t start = 0;
    while (start <= key.size()) {
        const auto dot = key.find('.', start);
        const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ValidationError("override '" + assignment + "' has an empty key segment");
        pointer += "/" + part;
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    doc[json::json_pointer(pointer)] = value;
}

}  // namespace mdiff
