#pragma once

// Pipeline configuration: every field has a default, JSON input may override
// any subset, and unknown keys are rejected. to_json() writes every field so
// reports can echo the effective configuration.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "triage/error.hpp"
#include "triage/io.hpp"
#include "triage/metrics.hpp"
#include "triage/synthcorpus.hpp"
#include "triage/twostage.hpp"

namespace triage::config {

using json = nlohmann::json;

inline constexpr ErrorCode kConfigError = ErrorCode::Config;

template <typename T>
void read_opt(const json& j, const char* key, T& dst, const std::string& what) {
    if (j.contains(key)) dst = io::get_field<T>(j, key, what, kConfigError);
}

inline void expect_keys(const json& j, std::initializer_list<std::string_view> keys, const std::string& what) {
    io::reject_unknown_keys(j, keys, what, kConfigError);
}

// ---- size distributions ------------------------------------------------------

/// {"bins": [{"lower_mm", "upper_mm" (null = unbounded), "proportion"}, ...]}
inline json to_json(const synth::SizeDistribution& d) {
    json bins = json::array();
    for (const auto& b : d.bins)
        bins.push_back({{"lower_mm", b.lower_mm},
                        {"upper_mm", std::isfinite(b.upper_mm) ? json(b.upper_mm) : json(nullptr)},
                        {"proportion", b.proportion}});
    return json{{"bins", std::move(bins)}};
}

inline synth::SizeDistribution size_dist_from_json(const json& j, const std::string& what) {
    expect_keys(j, {"bins"}, what);
    require(j.contains("bins") && j["bins"].is_array(), kConfigError, what + " needs a 'bins' array");
    synth::SizeDistribution d;
    for (const auto& b : j["bins"]) {
        expect_keys(b, {"lower_mm", "upper_mm", "proportion"}, what + " bin");
        synth::SizeBin bin;
        bin.lower_mm = io::get_field<double>(b, "lower_mm", what + " bin", kConfigError);
        require(b.contains("upper_mm"), kConfigError, what + " bin is missing 'upper_mm' (null for unbounded)");
        bin.upper_mm = b["upper_mm"].is_null() ? std::numeric_limits<double>::infinity()
                                               : io::get_field<double>(b, "upper_mm", what + " bin", kConfigError);
        bin.proportion = io::get_field<double>(b, "proportion", what + " bin", kConfigError);
        d.bins.push_back(bin);
    }
    try {
        d.validate();
    } catch (const Error& e) {
        fail(kConfigError, what + ": " + e.what());
    }
    return d;
}

// ---- render / noise / arch / training ----------------------------------------

inline json to_json(const synth::RenderConfig& r) {
    return {{"texture_sigma", r.texture_sigma},
            {"tissue_level", r.tissue_level},
            {"dense_tissue_level", r.dense_tissue_level},
            {"dense_texture_gain", r.dense_texture_gain},
            {"dense_fraction", r.dense_fraction},
            {"mm_to_px", r.mm_to_px},
            {"cancer_contrast", {r.cancer_contrast_lo, r.cancer_contrast_hi}},
            {"benign_contrast", {r.benign_contrast_lo, r.benign_contrast_hi}},
            {"benign_size_mm", {r.benign_size_lo_mm, r.benign_size_hi_mm}},
            {"max_radius_fraction", r.max_radius_fraction}};
}

inline void read_range(const json& j, const char* key, double& lo, double& hi, const std::string& what) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    require(v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number(), kConfigError,
            what + " field '" + key + "' must be [lo, hi]");
    lo = v[0].get<double>();
    hi = v[1].get<double>();
    require(lo <= hi, kConfigError, what + " field '" + key + "' needs lo <= hi");
}

inline synth::RenderConfig render_from_json(const json& j, synth::RenderConfig r, const std::string& what) {
    expect_keys(j, {"texture_sigma", "tissue_level", "dense_tissue_level", "dense_texture_gain", "dense_fraction",
                    "mm_to_px", "cancer_contrast", "benign_contrast", "benign_size_mm", "max_radius_fraction"},
                what);
    read_opt(j, "texture_sigma", r.texture_sigma, what);
    read_opt(j, "tissue_level", r.tissue_level, what);
    read_opt(j, "dense_tissue_level", r.dense_tissue_level, what);
    read_opt(j, "dense_texture_gain", r.dense_texture_gain, what);
    read_opt(j, "dense_fraction", r.dense_fraction, what);
    read_opt(j, "mm_to_px", r.mm_to_px, what);
    read_range(j, "cancer_contrast", r.cancer_contrast_lo, r.cancer_contrast_hi, what);
    read_range(j, "benign_contrast", r.benign_contrast_lo, r.benign_contrast_hi, what);
    read_range(j, "benign_size_mm", r.benign_size_lo_mm, r.benign_size_hi_mm, what);
    read_opt(j, "max_radius_fraction", r.max_radius_fraction, what);
    require(r.dense_fraction >= 0 && r.dense_fraction <= 1, kConfigError, what + ": dense_fraction must be in [0, 1]");
    require(r.mm_to_px > 0, kConfigError, what + ": mm_to_px must be > 0");
    return r;
}

// Patch tissue and source size always follow the shared render config and
// image size, so they are not serialised here.
inline json to_json(const synth::NoiseConfig& n) {
    return {{"lesion_diameter_px", {n.lesion_diameter_lo, n.lesion_diameter_hi}},
            {"contrast", {n.contrast_lo, n.contrast_hi}}};
}

inline synth::NoiseConfig noise_from_json(const json& j, synth::NoiseConfig n, const std::string& what) {
    expect_keys(j, {"lesion_diameter_px", "contrast"}, what);
    read_range(j, "lesion_diameter_px", n.lesion_diameter_lo, n.lesion_diameter_hi, what);
    read_range(j, "contrast", n.contrast_lo, n.contrast_hi, what);
    require(n.lesion_diameter_lo > 0, kConfigError, what + ": lesion diameters must be > 0");
    return n;
}

inline json to_json(const twostage::ArchConfig& a) {
    return {{"input_channels", a.input_channels},
            {"channels", a.channels},
            {"kernel", a.kernel},
            {"pool", a.pool},
            {"patch_size", a.patch_size}};
}

inline twostage::ArchConfig arch_from_json(const json& j, twostage::ArchConfig a, const std::string& what) {
    expect_keys(j, {"input_channels", "channels", "kernel", "pool", "patch_size"}, what);
    read_opt(j, "input_channels", a.input_channels, what);
    if (j.contains("channels")) {
        const auto& c = j["channels"];
        require(c.is_array() && !c.empty(), kConfigError, what + " field 'channels' must be a non-empty array");
        a.channels.clear();
        for (const auto& v : c) {
            require(v.is_number_unsigned() && v.get<std::size_t>() > 0, kConfigError,
                    what + " field 'channels' must hold positive integers");
            a.channels.push_back(v.get<std::size_t>());
        }
    }
    read_opt(j, "kernel", a.kernel, what);
    read_opt(j, "pool", a.pool, what);
    read_opt(j, "patch_size", a.patch_size, what);
    require(a.kernel >= 1 && a.pool >= 1 && a.input_channels >= 1, kConfigError,
            what + ": kernel, pool and input_channels must be >= 1");
    try {
        (void)twostage::build_patch_model(a, 0);
    } catch (const Error& e) {
        fail(kConfigError, what + ": " + e.what());
    }
    return a;
}

/// TrainConfig without its seed: pipeline seeds are derived, never configured.
inline json to_json(const twostage::TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"momentum", t.momentum},
            {"balance_classes", t.balance_classes},
            {"freeze_trunk", t.freeze_trunk}};
}

inline twostage::TrainConfig train_from_json(const json& j, twostage::TrainConfig t, const std::string& what,
                                             std::initializer_list<std::string_view> extra = {}) {
    std::vector<std::string_view> keys{"epochs", "batch_size", "learning_rate", "momentum", "balance_classes",
                                       "freeze_trunk"};
    keys.insert(keys.end(), extra.begin(), extra.end());
    require(j.is_object(), kConfigError, what + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        require(std::find(keys.begin(), keys.end(), key) != keys.end(), kConfigError,
                what + " has unknown field '" + key + "'");
    read_opt(j, "epochs", t.epochs, what);
    read_opt(j, "batch_size", t.batch_size, what);
    read_opt(j, "learning_rate", t.learning_rate, what);
    read_opt(j, "momentum", t.momentum, what);
    read_opt(j, "balance_classes", t.balance_classes, what);
    read_opt(j, "freeze_trunk", t.freeze_trunk, what);
    require(t.batch_size >= 1, kConfigError, what + ": batch_size must be >= 1");
    require(t.learning_rate > 0, kConfigError, what + ": learning_rate must be > 0");
    require(t.momentum >= 0 && t.momentum < 1, kConfigError, what + ": momentum must be in [0, 1)");
    return t;
}

// ---- pipeline ----------------------------------------------------------------

struct SplitConfig {
    std::string name;
    std::size_t n_normal = 0, n_benign = 0, n_cancer = 0;
    std::optional<synth::RenderConfig> render;  // overrides the shared render config

    friend bool operator==(const SplitConfig&, const SplitConfig&) = default;
};

struct SynthConfig {
    std::size_t image_size = 128;
    std::size_t n_patch_pos = 1000, n_patch_neg = 1000;
    synth::NoiseConfig noise;
    synth::RenderConfig render;
    synth::SizeDistribution size_dist{{{5, 20, 0.36}, {20, 50, 0.64}}};
    std::vector<SplitConfig> splits{{"train", 120, 80, 100, std::nullopt}, {"test", 80, 60, 60, std::nullopt}};

    const SplitConfig& split(const std::string& name) const {
        for (const auto& s : splits)
            if (s.name == name) return s;
        fail(kConfigError, "no corpus split named '" + name + "'");
    }
};

struct FullStage {
    std::string split = "train";
    twostage::TrainConfig train;
};

struct EvalConfig {
    std::string split = "test";
    eval::Unit unit = eval::Unit::Breast;
    bool exclude_benign = false;
    std::size_t steps = 20;
    std::size_t reps = 1000;
    double alpha = 0.05;
    double target_sensitivity = 0.95;
    double deferment_check_fraction = 0.2;
    // Illustrative screening-like mix; replace with the reference distribution of interest.
    synth::SizeDistribution target_size_dist{{{0, 20, 0.7}, {20, std::numeric_limits<double>::infinity(), 0.3}}};
    std::vector<std::string> subgroup_tags{"density"};
};

struct PipelineConfig {
    std::uint64_t seed = 7;
    SynthConfig synth;
    twostage::ArchConfig arch;
    std::size_t ensemble_size = 3;
    std::vector<double> ensemble_weights;  // empty = uniform
    twostage::TrainConfig train_patch{8, 16, 0.02, 0.9, 0, true, false};
    std::vector<FullStage> train_full{{"train", twostage::TrainConfig{4, 8, 0.001, 0.9, 0, true, false}}};
    EvalConfig eval;

    scoring::EnsembleWeights weights() const {
        return ensemble_weights.empty() ? scoring::EnsembleWeights::uniform(ensemble_size)
                                        : scoring::EnsembleWeights{ensemble_weights};
    }
};

inline json to_json(const SplitConfig& s) {
    json j{{"name", s.name}, {"n_normal", s.n_normal}, {"n_benign", s.n_benign}, {"n_cancer", s.n_cancer}};
    if (s.render) j["render"] = to_json(*s.render);
    return j;
}

inline json to_json(const SynthConfig& s) {
    json splits = json::array();
    for (const auto& sp : s.splits) splits.push_back(to_json(sp));
    return {{"image_size", s.image_size},
            {"patches", {{"n_pos", s.n_patch_pos}, {"n_neg", s.n_patch_neg}, {"noise", to_json(s.noise)}}},
            {"render", to_json(s.render)},
            {"size_dist", to_json(s.size_dist)},
            {"splits", std::move(splits)}};
}

inline json to_json(const EvalConfig& e) {
    return {{"split", e.split},
            {"unit", eval::to_string(e.unit)},
            {"exclude_benign", e.exclude_benign},
            {"steps", e.steps},
            {"reps", e.reps},
            {"alpha", e.alpha},
            {"target_sensitivity", e.target_sensitivity},
            {"deferment_check_fraction", e.deferment_check_fraction},
            {"target_size_dist", to_json(e.target_size_dist)},
            {"subgroup_tags", e.subgroup_tags}};
}

inline json to_json(const PipelineConfig& c) {
    json stages = json::array();
    for (const auto& s : c.train_full) {
        json j = to_json(s.train);
        j["split"] = s.split;
        stages.push_back(std::move(j));
    }
    return {{"format_version", io::kFormatVersion},
            {"seed", c.seed},
            {"synth", to_json(c.synth)},
            {"arch", to_json(c.arch)},
            {"ensemble", {{"size", c.ensemble_size}, {"weights", c.ensemble_weights}}},
            {"train_patch", to_json(c.train_patch)},
            {"train_full", std::move(stages)},
            {"eval", to_json(c.eval)}};
}

inline SynthConfig synth_from_json(const json& j, SynthConfig s) {
    const std::string what = "config synth";
    expect_keys(j, {"image_size", "patches", "render", "size_dist", "splits"}, what);
    read_opt(j, "image_size", s.image_size, what);
    require(s.image_size >= 16, kConfigError, what + ": image_size must be >= 16");
    if (j.contains("patches")) {
        const auto& p = j["patches"];
        expect_keys(p, {"n_pos", "n_neg", "noise"}, what + " patches");
        read_opt(p, "n_pos", s.n_patch_pos, what + " patches");
        read_opt(p, "n_neg", s.n_patch_neg, what + " patches");
        if (p.contains("noise")) s.noise = noise_from_json(p["noise"], s.noise, what + " patches noise");
    }
    if (j.contains("render")) s.render = render_from_json(j["render"], s.render, what + " render");
    if (j.contains("size_dist")) s.size_dist = size_dist_from_json(j["size_dist"], what + " size_dist");
    for (const auto& b : s.size_dist.bins)
        require(std::isfinite(b.upper_mm), kConfigError, what + " size_dist: generator bins need a finite upper_mm");
    if (j.contains("splits")) {
        require(j["splits"].is_array() && !j["splits"].empty(), kConfigError, what + " splits must be a non-empty array");
        s.splits.clear();
        for (const auto& sj : j["splits"]) {
            expect_keys(sj, {"name", "n_normal", "n_benign", "n_cancer", "render"}, what + " split");
            SplitConfig sp;
            sp.name = io::get_field<std::string>(sj, "name", what + " split", kConfigError);
            require(io::is_identifier(sp.name), kConfigError, what + ": split name '" + sp.name + "' is not an identifier");
            for (const auto& other : s.splits)
                require(other.name != sp.name, kConfigError, what + ": duplicate split '" + sp.name + "'");
            read_opt(sj, "n_normal", sp.n_normal, what + " split " + sp.name);
            read_opt(sj, "n_benign", sp.n_benign, what + " split " + sp.name);
            read_opt(sj, "n_cancer", sp.n_cancer, what + " split " + sp.name);
            require(sp.n_normal + sp.n_benign + sp.n_cancer > 0, kConfigError,
                    what + ": split " + sp.name + " has no studies");
            if (sj.contains("render")) sp.render = render_from_json(sj["render"], s.render, what + " split render");
            s.splits.push_back(std::move(sp));
        }
    }
    return s;
}

inline EvalConfig eval_from_json(const json& j, EvalConfig e) {
    const std::string what = "config eval";
    expect_keys(j, {"split", "unit", "exclude_benign", "steps", "reps", "alpha", "target_sensitivity",
                    "deferment_check_fraction", "target_size_dist", "subgroup_tags"},
                what);
    read_opt(j, "split", e.split, what);
    if (j.contains("unit")) {
        try {
            e.unit = eval::unit_from_string(io::get_field<std::string>(j, "unit", what, kConfigError));
        } catch (const Error& err) {
            fail(kConfigError, what + ": " + err.what());
        }
    }
    read_opt(j, "exclude_benign", e.exclude_benign, what);
    read_opt(j, "steps", e.steps, what);
    read_opt(j, "reps", e.reps, what);
    read_opt(j, "alpha", e.alpha, what);
    read_opt(j, "target_sensitivity", e.target_sensitivity, what);
    read_opt(j, "deferment_check_fraction", e.deferment_check_fraction, what);
    if (j.contains("target_size_dist")) e.target_size_dist = size_dist_from_json(j["target_size_dist"], what + " target_size_dist");
    read_opt(j, "subgroup_tags", e.subgroup_tags, what);
    require(e.steps >= 2, kConfigError, what + ": steps must be >= 2");
    require(e.reps >= 100, kConfigError, what + ": reps must be >= 100");
    require(e.alpha > 0 && e.alpha < 1, kConfigError, what + ": alpha must be in (0, 1)");
    require(e.target_sensitivity > 0 && e.target_sensitivity <= 1, kConfigError,
            what + ": target_sensitivity must be in (0, 1]");
    require(e.deferment_check_fraction >= 0 && e.deferment_check_fraction < 1, kConfigError,
            what + ": deferment_check_fraction must be in [0, 1)");
    return e;
}

inline PipelineConfig pipeline_from_json(const json& j) {
    const std::string what = "config";
    require(j.is_object(), kConfigError, "config must be a JSON object");
    expect_keys(j, {"format_version", "seed", "synth", "arch", "ensemble", "train_patch", "train_full", "eval"}, what);
    if (j.contains("format_version")) {
        try {
            io::check_format_version(j, what);
        } catch (const Error& e) {
            fail(kConfigError, e.what());
        }
    }
    PipelineConfig c;
    read_opt(j, "seed", c.seed, what);
    if (j.contains("synth")) c.synth = synth_from_json(j["synth"], c.synth);
    if (j.contains("arch")) c.arch = arch_from_json(j["arch"], c.arch, what + " arch");
    if (j.contains("ensemble")) {
        const auto& e = j["ensemble"];
        expect_keys(e, {"size", "weights"}, what + " ensemble");
        read_opt(e, "size", c.ensemble_size, what + " ensemble");
        read_opt(e, "weights", c.ensemble_weights, what + " ensemble");
    }
    require(c.ensemble_size >= 1, kConfigError, "config ensemble size must be >= 1");
    if (!c.ensemble_weights.empty()) {
        try {
            c.weights().validate(c.ensemble_size);
        } catch (const Error& e) {
            fail(kConfigError, std::string("config ensemble: ") + e.what());
        }
    }
    if (j.contains("train_patch")) c.train_patch = train_from_json(j["train_patch"], c.train_patch, what + " train_patch");
    if (j.contains("train_full")) {
        require(j["train_full"].is_array() && !j["train_full"].empty(), kConfigError,
                "config train_full must be a non-empty array of stages");
        const twostage::TrainConfig base = c.train_full.front().train;
        c.train_full.clear();
        for (const auto& s : j["train_full"]) {
            FullStage stage;
            stage.train = train_from_json(s, base, what + " train_full stage", {"split"});
            read_opt(s, "split", stage.split, what + " train_full stage");
            c.train_full.push_back(std::move(stage));
        }
    }
    if (j.contains("eval")) c.eval = eval_from_json(j["eval"], c.eval);
    require(c.arch.patch_size <= c.synth.image_size, kConfigError,
            "config: arch patch_size must not exceed synth image_size (patches are cropped from images)");
    for (const auto& s : c.train_full) (void)c.synth.split(s.split);
    (void)c.synth.split(c.eval.split);
    return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    const auto text = io::read_file(path);
    try {
        return pipeline_from_json(io::parse_json(text, "config " + path.string()));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::NotFound || e.code() == kConfigError) throw;
        fail(kConfigError, e.what());
    }
}

}  // namespace triage::config
