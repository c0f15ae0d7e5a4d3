#pragma once

// Ensemble scoring: per model, the mean over the original and vertically
// mirrored image; per image, the weighted mean over models; per breast, the
// mean over views; per study, the max over breasts. Uncertainty is the
// population variance of the 2M raw scores of an image, averaged over views.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "triage/error.hpp"
#include "triage/parallel.hpp"
#include "triage/synthcorpus.hpp"
#include "triage/tensor.hpp"

namespace triage::scoring {

using synth::Laterality;
using synth::View;

enum class Orientation { Original, VFlip };

inline std::string to_string(Orientation o) { return o == Orientation::Original ? "original" : "vflip"; }
inline std::optional<Orientation> orientation_from_string(const std::string& s) {
    if (s == "original") return Orientation::Original;
    if (s == "vflip") return Orientation::VFlip;
    return std::nullopt;
}

/// 2 x M raw scores of one image: orientation-major, model-minor.
class RawScoreSet {
public:
    RawScoreSet() = default;
    explicit RawScoreSet(std::size_t models) : models_(models), scores_(2 * models, 0.0f) {
        require(models >= 1, ErrorCode::InvalidArgument, "ensemble needs at least one model");
    }

    std::size_t models() const { return models_; }
    float& at(Orientation o, std::size_t model) { return scores_[index(o, model)]; }
    float at(Orientation o, std::size_t model) const { return scores_[index(o, model)]; }
    std::span<const float> all() const { return scores_; }

    void validate() const {
        require(models_ >= 1, ErrorCode::InvalidArgument, "ensemble needs at least one model");
        for (float s : scores_)
            require(std::isfinite(s) && s >= 0.0f && s <= 1.0f, ErrorCode::InvalidArgument,
                    "raw scores must lie in [0, 1], got " + std::to_string(s));
    }

    friend bool operator==(const RawScoreSet&, const RawScoreSet&) = default;

private:
    std::size_t index(Orientation o, std::size_t model) const {
        require(model < models_, ErrorCode::InvalidArgument, "model index out of range");
        return (o == Orientation::Original ? 0 : models_) + model;
    }

    std::size_t models_ = 0;
    std::vector<float> scores_;
};

/// Non-negative per-model weights with positive sum.
struct EnsembleWeights {
    std::vector<double> values;

    static EnsembleWeights uniform(std::size_t models) { return {std::vector<double>(models, 1.0)}; }

    void validate(std::size_t models) const {
        require(values.size() == models, ErrorCode::InvalidArgument,
                "got " + std::to_string(values.size()) + " ensemble weights for " + std::to_string(models) + " models");
        double sum = 0;
        for (double w : values) {
            require(std::isfinite(w) && w >= 0, ErrorCode::InvalidArgument, "ensemble weights must be non-negative");
            sum += w;
        }
        require(sum > 0, ErrorCode::InvalidArgument, "ensemble weights must have a positive sum");
    }

    friend bool operator==(const EnsembleWeights&, const EnsembleWeights&) = default;
};

/// Weighted mean over models of the per-model orientation mean.
inline double combine_raw(const RawScoreSet& raw, const EnsembleWeights& weights) {
    weights.validate(raw.models());
    double num = 0, den = 0;
    for (std::size_t m = 0; m < raw.models(); ++m) {
        const double s = (static_cast<double>(raw.at(Orientation::Original, m)) +
                          static_cast<double>(raw.at(Orientation::VFlip, m))) /
                         2.0;
        num += weights.values[m] * s;
        den += weights.values[m];
    }
    return num / den;
}

/// Population variance (divide by 2M) of all raw scores. Summed in sorted
/// order so any permutation of the scores gives the same bits.
inline double image_uncertainty(const RawScoreSet& raw) {
    require(!raw.all().empty(), ErrorCode::InvalidArgument, "empty raw score set");
    std::vector<float> s(raw.all().begin(), raw.all().end());
    std::sort(s.begin(), s.end());
    double mean = 0;
    for (float v : s) mean += v;
    mean /= static_cast<double>(s.size());
    double var = 0;
    for (float v : s) var += (v - mean) * (v - mean);
    return var / static_cast<double>(s.size());
}

struct ImageScore {
    double score = 0;
    RawScoreSet raw;
};

/// Scores one image with every model in both orientations. `Model` needs
/// `double predict(const Tensor&) const`.
template <typename Model>
ImageScore score_image(std::span<const Model> models, const EnsembleWeights& weights, const Tensor& image) {
    require(!models.empty(), ErrorCode::InvalidArgument, "ensemble needs at least one model");
    weights.validate(models.size());
    const Tensor flipped = vflip(image);
    ImageScore out{0, RawScoreSet(models.size())};
    for (std::size_t m = 0; m < models.size(); ++m) {
        out.raw.at(Orientation::Original, m) = static_cast<float>(models[m].predict(image));
        out.raw.at(Orientation::VFlip, m) = static_cast<float>(models[m].predict(flipped));
    }
    out.score = combine_raw(out.raw, weights);
    return out;
}

inline double mean_of(std::span<const double> values, const char* what) {
    require(!values.empty(), ErrorCode::InvalidArgument, std::string(what) + " needs at least one view");
    double s = 0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

inline double breast_score(std::span<const double> view_scores) { return mean_of(view_scores, "breast_score"); }
inline double breast_uncertainty(std::span<const double> view_uncertainties) {
    return mean_of(view_uncertainties, "breast_uncertainty");
}

/// Max over the lateralities that are present.
inline double study_score(std::optional<double> left, std::optional<double> right) {
    require(left || right, ErrorCode::InvalidArgument, "study_score needs at least one laterality");
    if (!left) return *right;
    if (!right) return *left;
    return std::max(*left, *right);
}

struct BreastSummary {
    double score = 0;
    double uncertainty = 0;
};

/// Uncertainty of the breast that attains the study max; ties go to the larger uncertainty.
inline double study_uncertainty(std::span<const BreastSummary> breasts) {
    require(!breasts.empty(), ErrorCode::InvalidArgument, "study_uncertainty needs at least one breast");
    const BreastSummary* best = &breasts[0];
    for (const auto& b : breasts.subspan(1))
        if (b.score > best->score || (b.score == best->score && b.uncertainty > best->uncertainty)) best = &b;
    return best->uncertainty;
}

struct ImageRow {
    std::string study_id;
    Laterality laterality = Laterality::Left;
    View view = View::CC;
    RawScoreSet raw;
    double image_score = 0;
    double image_uncertainty = 0;
};

struct BreastRow {
    std::string study_id;
    Laterality laterality = Laterality::Left;
    double breast_score = 0;
    double breast_uncertainty = 0;
    double study_score = 0;

    friend bool operator==(const BreastRow&, const BreastRow&) = default;
};

struct ScoreTable {
    EnsembleWeights weights;
    std::vector<ImageRow> images;   // ordered by (study_id, laterality, view)
    std::vector<BreastRow> breasts; // ordered by (study_id, laterality)
};

inline auto image_key(const ImageRow& r) { return std::tuple(r.study_id, r.laterality, r.view); }

/// Breast and study aggregates from image rows whose image fields are already set.
inline std::vector<BreastRow> derive_breasts(const std::vector<ImageRow>& images) {
    std::map<std::pair<std::string, Laterality>, std::pair<std::vector<double>, std::vector<double>>> per_breast;
    for (const auto& r : images) {
        auto& [s, u] = per_breast[{r.study_id, r.laterality}];
        s.push_back(r.image_score);
        u.push_back(r.image_uncertainty);
    }
    std::vector<BreastRow> breasts;
    for (const auto& [key, su] : per_breast)
        breasts.push_back({key.first, key.second, breast_score(su.first), breast_uncertainty(su.second), 0.0});
    std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> per_study;
    for (const auto& b : breasts) {
        auto& lr = per_study[b.study_id];
        (b.laterality == Laterality::Left ? lr.first : lr.second) = b.breast_score;
    }
    for (auto& b : breasts) {
        const auto& lr = per_study[b.study_id];
        b.study_score = study_score(lr.first, lr.second);
    }
    return breasts;
}

/// Sorts raw rows, fills image-level fields and derives breast/study rows.
inline ScoreTable build_score_table(std::vector<ImageRow> rows, EnsembleWeights weights) {
    for (auto& r : rows) {
        r.raw.validate();
        r.image_score = combine_raw(r.raw, weights);
        r.image_uncertainty = image_uncertainty(r.raw);
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return image_key(a) < image_key(b); });
    for (std::size_t i = 1; i < rows.size(); ++i)
        require(image_key(rows[i - 1]) != image_key(rows[i]), ErrorCode::InvalidArgument,
                "duplicate image row for study " + rows[i].study_id);
    ScoreTable table{std::move(weights), std::move(rows), {}};
    table.breasts = derive_breasts(table.images);
    return table;
}

/// True when every derived field equals recomputation from raw scores exactly.
inline bool audit(const ScoreTable& table) {
    for (const auto& r : table.images)
        if (r.image_score != combine_raw(r.raw, table.weights) || r.image_uncertainty != image_uncertainty(r.raw))
            return false;
    return derive_breasts(table.images) == table.breasts;
}

/// Per-study breast summaries keyed by study id.
inline std::map<std::string, std::vector<BreastSummary>> breasts_by_study(std::span<const BreastRow> rows) {
    std::map<std::string, std::vector<BreastSummary>> out;
    for (const auto& b : rows) out[b.study_id].push_back({b.breast_score, b.breast_uncertainty});
    return out;
}

/// Scores every view of every study. Work is spread over `jobs` threads;
/// each image writes its own slot, so the table is independent of `jobs`.
template <typename Model>
ScoreTable score_corpus(std::span<const synth::StudyRecord> studies, std::span<const Model> models,
                        const EnsembleWeights& weights, std::size_t jobs = 1) {
    std::vector<ImageRow> rows(studies.size() * 4);
    parallel_for(rows.size(), jobs, [&](std::size_t i) {
        const auto& st = studies[i / 4];
        const auto lat = synth::kLateralities[(i % 4) / 2];
        const auto view = synth::kViews[i % 2];
        auto scored = score_image(models, weights, st.image(lat, view));
        rows[i] = ImageRow{st.study_id, lat, view, std::move(scored.raw), 0, 0};
    });
    return build_score_table(std::move(rows), weights);
}

}  // namespace triage::scoring
