#pragma once

// Pipeline stages over an output directory:
//
//   <out>/corpus/    synthetic corpus (see corpus_io.hpp)
//   <out>/models/    patch_<k>.json, converted_<k>.json, full_<k>.json, *_loss.csv
//   <out>/scores/    raw_scores.csv, derived_scores.csv
//   <out>/report/    report.json, curve CSVs, SVG plots
//
// Each stage reads the previous stage's files, so any stage can be rerun on
// its own. Stage seeds are derive_seed(seed, stage, {model}); `jobs` only
// changes how work is spread, never the bytes written.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "triage/config.hpp"
#include "triage/corpus_io.hpp"
#include "triage/io.hpp"
#include "triage/parallel.hpp"
#include "triage/report.hpp"
#include "triage/rng.hpp"
#include "triage/scoring.hpp"
#include "triage/synthcorpus.hpp"
#include "triage/twostage.hpp"

namespace triage::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline fs::path model_path(const fs::path& models_dir, const std::string& kind, std::size_t k) {
    return models_dir / (kind + "_" + std::to_string(k) + ".json");
}
inline fs::path loss_path(const fs::path& models_dir, const std::string& kind, std::size_t k) {
    return models_dir / (kind + "_" + std::to_string(k) + "_loss.csv");
}

struct Layout {
    fs::path root;

    fs::path corpus() const { return root / "corpus"; }
    fs::path models() const { return root / "models"; }
    fs::path scores() const { return root / "scores"; }
    fs::path report() const { return root / "report"; }
};

inline fs::path raw_scores_path(const fs::path& scores_dir) { return scores_dir / "raw_scores.csv"; }
inline fs::path derived_scores_path(const fs::path& scores_dir) { return scores_dir / "derived_scores.csv"; }
inline fs::path split_metadata_path(const fs::path& corpus_dir, const std::string& split) {
    return corpus_dir / split / "metadata.csv";
}

inline std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
    return derive_seed(seed, "synth.split." + split, {});
}

/// Studies of one split, generated concurrently; each study is pure in its index.
inline std::vector<synth::StudyRecord> generate_split(const config::SynthConfig& cfg, const config::SplitConfig& split,
                                                      std::uint64_t seed, std::size_t jobs) {
    synth::StudyCorpusConfig sc;
    sc.n_normal = split.n_normal;
    sc.n_benign = split.n_benign;
    sc.n_cancer = split.n_cancer;
    sc.image_size = cfg.image_size;
    sc.size_dist = cfg.size_dist;
    sc.seed = split_seed(seed, split.name);
    sc.render = split.render.value_or(cfg.render);
    const std::size_t n = sc.n_normal + sc.n_benign + sc.n_cancer;
    require(n > 0, ErrorCode::InvalidArgument, "split " + split.name + " has no studies");
    if (sc.n_cancer > 0) sc.size_dist.validate();
    std::vector<synth::StudyRecord> out(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        if (i < sc.n_normal) {
            out[i] = synth::gen_study(sc, synth::Label::Normal, i);
        } else if (i < sc.n_normal + sc.n_benign) {
            out[i] = synth::gen_study(sc, synth::Label::Benign, i - sc.n_normal);
        } else {
            out[i] = synth::gen_study(sc, synth::Label::Cancer, i - sc.n_normal - sc.n_benign);
        }
    });
    return out;
}

inline void run_synth(const config::PipelineConfig& cfg, const fs::path& corpus_dir, std::size_t jobs) {
    const auto& s = cfg.synth;
    spdlog::info("synth: {} patches, {} splits -> {}", s.n_patch_pos + s.n_patch_neg, s.splits.size(),
                 corpus_dir.string());
    json generator{{"seed", cfg.seed}, {"synth", config::to_json(s)}, {"patch_size", cfg.arch.patch_size}};
    io::CorpusWriter writer(corpus_dir, generator);
    auto noise = s.noise;
    noise.tissue = s.render;
    noise.source_size = s.image_size;
    writer.write_patches(synth::gen_patch_dataset(s.n_patch_pos, s.n_patch_neg, cfg.arch.patch_size, noise,
                                                  derive_seed(cfg.seed, "synth.patches", {})));
    for (const auto& split : s.splits) {
        spdlog::debug("synth: split {}", split.name);
        writer.write_split(split.name, generate_split(s, split, cfg.seed, jobs));
    }
    writer.finish();
}

inline void save_trace(const fs::path& path, const std::vector<double>& trace) {
    io::write_file(path, io::loss_trace_to_csv(trace));
}

/// Trains the ensemble on the patch set; members run concurrently.
inline void run_train_patch(const config::PipelineConfig& cfg, const fs::path& corpus_dir, const fs::path& models_dir,
                            std::size_t jobs) {
    const auto data = io::CorpusReader(corpus_dir).read_patches();
    spdlog::info("train-patch: {} models on {} patches", cfg.ensemble_size, data.size());
    parallel_for(cfg.ensemble_size, jobs, [&](std::size_t k) {
        auto tc = cfg.train_patch;
        tc.seed = derive_seed(cfg.seed, "train-patch", {k});
        auto model = twostage::build_patch_model(cfg.arch, derive_seed(cfg.seed, "train-patch.init", {k}));
        auto result = twostage::train(std::move(model), data, tc);
        io::save_checkpoint(io::checkpoint_of(result.model), model_path(models_dir, "patch", k));
        save_trace(loss_path(models_dir, "patch", k), result.loss_trace);
        spdlog::debug("train-patch: model {} final loss {}", k, result.loss_trace.empty() ? 0.0 : result.loss_trace.back());
    });
}

inline void run_convert(const config::PipelineConfig& cfg, const fs::path& models_dir) {
    spdlog::info("convert: {} models", cfg.ensemble_size);
    for (std::size_t k = 0; k < cfg.ensemble_size; ++k)
        io::save_checkpoint(io::checkpoint_of(twostage::convert_to_full_image(io::load_patch_model(model_path(models_dir, "patch", k)))),
                            model_path(models_dir, "converted", k));
}

/// One sample per view; positive when the view's breast carries the cancer.
inline twostage::Dataset full_image_samples(const std::vector<synth::StudyRecord>& studies) {
    twostage::Dataset data;
    data.reserve(studies.size() * 4);
    for (const auto& s : studies)
        for (auto lat : synth::kLateralities)
            for (auto view : synth::kViews)
                data.push_back({s.image(lat, view), s.cancer_laterality() == lat ? 1 : 0});
    return data;
}

/// Fine-tunes converted models through every configured stage in order.
inline void run_train_full(const config::PipelineConfig& cfg, const fs::path& corpus_dir, const fs::path& models_dir,
                           std::size_t jobs) {
    const io::CorpusReader corpus(corpus_dir);
    std::vector<twostage::FullImageModel> models;
    for (std::size_t k = 0; k < cfg.ensemble_size; ++k) models.push_back(io::load_full_image_model(model_path(models_dir, "converted", k)));
    std::vector<std::vector<double>> traces(cfg.ensemble_size);
    for (std::size_t stage = 0; stage < cfg.train_full.size(); ++stage) {
        const auto& st = cfg.train_full[stage];
        const auto data = full_image_samples(corpus.read_split(st.split));
        spdlog::info("train-full: stage {} on split {} ({} images)", stage, st.split, data.size());
        parallel_for(cfg.ensemble_size, jobs, [&](std::size_t k) {
            auto tc = st.train;
            tc.seed = derive_seed(cfg.seed, "train-full", {stage, k});
            auto result = twostage::train(std::move(models[k]), data, tc);
            models[k] = std::move(result.model);
            traces[k].insert(traces[k].end(), result.loss_trace.begin(), result.loss_trace.end());
        });
    }
    for (std::size_t k = 0; k < cfg.ensemble_size; ++k) {
        io::save_checkpoint(io::checkpoint_of(models[k]), model_path(models_dir, "full", k));
        save_trace(loss_path(models_dir, "full", k), traces[k]);
    }
}

inline std::vector<twostage::FullImageModel> load_ensemble(const fs::path& models_dir, std::size_t size) {
    std::vector<twostage::FullImageModel> models;
    for (std::size_t k = 0; k < size; ++k) models.push_back(io::load_full_image_model(model_path(models_dir, "full", k)));
    return models;
}

inline scoring::ScoreTable run_score(const config::PipelineConfig& cfg, const fs::path& corpus_dir,
                                     const fs::path& models_dir, const std::string& split, const fs::path& scores_dir,
                                     std::size_t jobs) {
    const auto models = load_ensemble(models_dir, cfg.ensemble_size);
    const auto studies = io::CorpusReader(corpus_dir).read_split(split);
    spdlog::info("score: {} studies of split {} with {} models", studies.size(), split, models.size());
    auto table = scoring::score_corpus<twostage::FullImageModel>(studies, models, cfg.weights(), jobs);
    require(scoring::audit(table), ErrorCode::InvalidArgument, "score table failed its own audit");
    io::write_score_table(table, raw_scores_path(scores_dir), derived_scores_path(scores_dir));
    return table;
}

/// Report from score and metadata files on disk.
inline json run_eval(const config::EvalConfig& ecfg, const fs::path& derived_scores, const fs::path& metadata,
                     std::uint64_t seed, const json& config_echo, const fs::path& report_dir, std::size_t jobs) {
    const auto breasts = io::read_derived_scores(derived_scores);
    const auto meta = io::read_metadata(metadata);
    spdlog::info("eval: {} breasts, unit {}, {} bootstrap replicates", breasts.size(), eval::to_string(ecfg.unit),
                 ecfg.reps);
    auto r = report::build_report(ecfg, breasts, meta, seed, config_echo, jobs);
    report::write_report_files(r, report_dir);
    return r;
}

/// synth -> train-patch -> convert -> train-full -> score -> eval.
inline json run_pipeline(const config::PipelineConfig& cfg, const fs::path& root, std::size_t jobs) {
    const Layout out{root};
    run_synth(cfg, out.corpus(), jobs);
    run_train_patch(cfg, out.corpus(), out.models(), jobs);
    run_convert(cfg, out.models());
    run_train_full(cfg, out.corpus(), out.models(), jobs);
    run_score(cfg, out.corpus(), out.models(), cfg.eval.split, out.scores(), jobs);
    return run_eval(cfg.eval, derived_scores_path(out.scores()), split_metadata_path(out.corpus(), cfg.eval.split), cfg.seed,
                    config::to_json(cfg), out.report(), jobs);
}

}  // namespace triage::pipeline
