#pragma once

// Evaluation over scored units (breasts or studies): Mann-Whitney AUROC, ROC
// curve, stratified bootstrap, sensitivity-anchored triage, uncertainty-ranked
// deferment and composition curves, tumour-size-matched bootstrap and
// per-subgroup AUROC.
//
// Randomised operations give replicate r its own stream keyed by (seed, r), so
// the outcome is the same for any number of worker threads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triage/error.hpp"
#include "triage/metadata.hpp"
#include "triage/parallel.hpp"
#include "triage/rng.hpp"
#include "triage/scoring.hpp"
#include "triage/synthcorpus.hpp"

namespace triage::eval {

using synth::Label;

struct EvalEntry {
    std::string unit_id;
    double score = 0;
    double uncertainty = 0;
    Label label = Label::Normal;
    std::optional<double> tumor_size_mm;
    std::map<std::string, std::string> tags;
};

/// Positive is cancer. Negatives are normal and, unless excluded, benign.
struct LabelMapping {
    bool exclude_benign = false;

    bool positive(Label l) const { return l == Label::Cancer; }
    bool negative(Label l) const { return l == Label::Normal || (l == Label::Benign && !exclude_benign); }
};

struct SplitScores {
    std::vector<double> pos, neg;
};

inline SplitScores split_scores(std::span<const EvalEntry> entries, const LabelMapping& mapping) {
    SplitScores s;
    for (const auto& e : entries) {
        if (mapping.positive(e.label)) s.pos.push_back(e.score);
        else if (mapping.negative(e.label)) s.neg.push_back(e.score);
    }
    return s;
}

/// Mann-Whitney AUROC from explicit score lists: (wins + ties/2) / (n_pos * n_neg).
inline double auroc(std::vector<double> pos, std::vector<double> neg) {
    require(!pos.empty(), ErrorCode::EmptyClass, "AUROC needs at least one positive (cancer) unit");
    require(!neg.empty(), ErrorCode::EmptyClass, "AUROC needs at least one negative unit");
    std::sort(neg.begin(), neg.end());
    std::uint64_t wins2 = 0;  // twice the Mann-Whitney U, exact in integers
    for (double p : pos) {
        const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
        const auto hi = std::upper_bound(lo, neg.end(), p);
        wins2 += 2 * static_cast<std::uint64_t>(lo - neg.begin()) + static_cast<std::uint64_t>(hi - lo);
    }
    return static_cast<double>(wins2) / 2.0 / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline double auroc(std::span<const EvalEntry> entries, const LabelMapping& mapping = {}) {
    auto s = split_scores(entries, mapping);
    return auroc(std::move(s.pos), std::move(s.neg));
}

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    double threshold = 0;  // classify positive when score >= threshold; +inf at the origin
};

/// One point per distinct score (descending), after the (0, 0) origin.
inline std::vector<RocPoint> roc_curve(std::span<const EvalEntry> entries, const LabelMapping& mapping = {}) {
    auto s = split_scores(entries, mapping);
    require(!s.pos.empty() && !s.neg.empty(), ErrorCode::EmptyClass, "ROC curve needs both classes");
    std::vector<std::pair<double, int>> all;
    for (double p : s.pos) all.emplace_back(p, 1);
    for (double n : s.neg) all.emplace_back(n, 0);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const double np = static_cast<double>(s.pos.size()), nn = static_cast<double>(s.neg.size());
    std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < all.size();) {
        const double t = all[i].first;
        for (; i < all.size() && all[i].first == t; ++i) (all[i].second ? tp : fp)++;
        curve.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / np, t});
    }
    return curve;
}

inline double trapezoid_area(std::span<const RocPoint> curve) {
    double area = 0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
    return area;
}

struct BootstrapResult {
    std::size_t n_reps = 0;
    double alpha = 0.05;
    double mean = 0;
    double std = 0;  // sample standard deviation over replicates
    double lower = 0;
    double upper = 0;
    std::vector<double> replicates;
};

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
    require(!sorted.empty(), ErrorCode::InvalidArgument, "quantile of empty data");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(i);
    return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

inline BootstrapResult summarize_replicates(std::vector<double> reps, double alpha) {
    BootstrapResult r;
    r.n_reps = reps.size();
    r.alpha = alpha;
    double sum = 0;
    for (double v : reps) sum += v;
    r.mean = sum / static_cast<double>(reps.size());
    double ss = 0;
    for (double v : reps) ss += (v - r.mean) * (v - r.mean);
    r.std = reps.size() > 1 ? std::sqrt(ss / static_cast<double>(reps.size() - 1)) : 0.0;
    auto sorted = reps;
    std::sort(sorted.begin(), sorted.end());
    r.lower = quantile_sorted(sorted, alpha / 2);
    r.upper = quantile_sorted(sorted, 1 - alpha / 2);
    r.replicates = std::move(reps);
    return r;
}

/// Stratified bootstrap of the AUROC: positives and negatives are resampled
/// separately with replacement, at their original counts.
inline BootstrapResult bootstrap_ci(std::span<const EvalEntry> entries, std::size_t n_reps, std::uint64_t seed,
                                    double alpha = 0.05, const LabelMapping& mapping = {}, std::size_t jobs = 1) {
    require(n_reps >= 100, ErrorCode::InvalidArgument, "bootstrap needs at least 100 replicates");
    require(alpha > 0 && alpha < 1, ErrorCode::InvalidArgument, "alpha must be in (0, 1)");
    const auto s = split_scores(entries, mapping);
    require(!s.pos.empty() && !s.neg.empty(), ErrorCode::EmptyClass, "bootstrap needs both classes");
    std::vector<double> reps(n_reps);
    parallel_for(n_reps, jobs, [&](std::size_t r) {
        CounterRng rng(derive_seed(seed, "eval.bootstrap", {r}));
        std::vector<double> pos(s.pos.size()), neg(s.neg.size());
        for (auto& v : pos) v = s.pos[rng.below(s.pos.size())];
        for (auto& v : neg) v = s.neg[rng.below(s.neg.size())];
        reps[r] = auroc(std::move(pos), std::move(neg));
    });
    return summarize_replicates(std::move(reps), alpha);
}

/// Largest observed positive score t with fraction(positives >= t) >= target.
inline double threshold_at_sensitivity(std::span<const EvalEntry> entries, double target_sensitivity,
                                       const LabelMapping& mapping = {}) {
    require(target_sensitivity > 0 && target_sensitivity <= 1, ErrorCode::InvalidArgument,
            "target sensitivity must be in (0, 1]");
    auto pos = split_scores(entries, mapping).pos;
    require(!pos.empty(), ErrorCode::EmptyClass, "threshold selection needs at least one positive");
    std::sort(pos.begin(), pos.end(), std::greater<>());
    const double n = static_cast<double>(pos.size());
    for (std::size_t i = 0; i < pos.size();) {
        const double t = pos[i];
        while (i < pos.size() && pos[i] == t) ++i;  // i = count of positives >= t
        if (static_cast<double>(i) / n >= target_sensitivity) return t;
    }
    return pos.back();
}

/// Fraction of the population (default: normals) scored strictly below the threshold.
inline double triage_fraction(std::span<const EvalEntry> entries, double threshold,
                              std::span<const Label> population = std::span<const Label>()) {
    static constexpr Label kNormals[] = {Label::Normal};
    if (population.empty()) population = kNormals;
    std::size_t n = 0, cleared = 0;
    for (const auto& e : entries) {
        if (std::find(population.begin(), population.end(), e.label) == population.end()) continue;
        ++n;
        if (e.score < threshold) ++cleared;
    }
    require(n > 0, ErrorCode::EmptyClass, "triage population is empty");
    return static_cast<double>(cleared) / static_cast<double>(n);
}

inline double sensitivity_at(std::span<const EvalEntry> entries, double threshold, const LabelMapping& mapping = {}) {
    const auto pos = split_scores(entries, mapping).pos;
    require(!pos.empty(), ErrorCode::EmptyClass, "sensitivity needs at least one positive");
    const auto hit = std::count_if(pos.begin(), pos.end(), [&](double s) { return s >= threshold; });
    return static_cast<double>(hit) / static_cast<double>(pos.size());
}

/// Entry indices by uncertainty descending, unit_id ascending on ties.
inline std::vector<std::size_t> uncertainty_ranking(std::span<const EvalEntry> entries) {
    std::vector<std::size_t> order(entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (entries[a].uncertainty != entries[b].uncertainty) return entries[a].uncertainty > entries[b].uncertainty;
        return entries[a].unit_id < entries[b].unit_id;
    });
    return order;
}

/// Units removed at step k of `steps`: floor(k * n / steps).
inline std::size_t removed_at(std::size_t k, std::size_t steps, std::size_t n) { return k * n / steps; }

struct DefermentPoint {
    double fraction_removed = 0;  // nominal k / steps
    std::size_t n_removed = 0;
    double auroc = 0;
};

/// AUROC of the retained units as the most uncertain ones are removed. Stops
/// before the retained set loses its last positive or negative.
inline std::vector<DefermentPoint> deferment_curve(std::span<const EvalEntry> entries, std::size_t steps,
                                                   const LabelMapping& mapping = {}) {
    require(steps >= 2, ErrorCode::InvalidArgument, "deferment curve needs steps >= 2");
    const auto order = uncertainty_ranking(entries);
    std::vector<DefermentPoint> curve;
    for (std::size_t k = 0; k <= steps; ++k) {
        const std::size_t removed = removed_at(k, steps, entries.size());
        std::vector<double> pos, neg;
        for (std::size_t j = removed; j < order.size(); ++j) {
            const auto& e = entries[order[j]];
            if (mapping.positive(e.label)) pos.push_back(e.score);
            else if (mapping.negative(e.label)) neg.push_back(e.score);
        }
        if (pos.empty() || neg.empty()) {
            require(k > 0, ErrorCode::EmptyClass, "deferment curve needs both classes");
            break;
        }
        curve.push_back({static_cast<double>(k) / static_cast<double>(steps), removed, auroc(pos, neg)});
    }
    return curve;
}

struct CompositionPoint {
    double fraction_removed = 0;
    std::size_t n_removed = 0;
    double normal = 0, benign = 0, cancer = 0;  // shares of the removed units
};

/// Class make-up of the removed units along the same ranking. f = 0 reports
/// zeros; later steps that would remove no unit are omitted.
inline std::vector<CompositionPoint> composition_curve(std::span<const EvalEntry> entries, std::size_t steps) {
    require(steps >= 2, ErrorCode::InvalidArgument, "composition curve needs steps >= 2");
    require(!entries.empty(), ErrorCode::InvalidArgument, "composition curve needs entries");
    const auto order = uncertainty_ranking(entries);
    std::vector<CompositionPoint> curve{{0.0, 0, 0, 0, 0}};
    for (std::size_t k = 1; k <= steps; ++k) {
        const std::size_t removed = removed_at(k, steps, entries.size());
        if (removed == 0) continue;
        std::size_t counts[3] = {0, 0, 0};
        for (std::size_t j = 0; j < removed; ++j) ++counts[static_cast<int>(entries[order[j]].label)];
        const double n = static_cast<double>(removed);
        curve.push_back({static_cast<double>(k) / static_cast<double>(steps), removed, counts[0] / n, counts[1] / n,
                         counts[2] / n});
    }
    return curve;
}

struct SizeNormalizedResult {
    std::size_t n_reps = 0;
    double mean = 0;
    double std = 0;
    std::vector<double> mean_bin_proportions;  // realised share of each target bin, averaged over replicates
    std::vector<std::size_t> available_per_bin;
    std::vector<double> replicates;
};

/// Bootstrap AUROC with positives resampled to match a target tumour-size
/// distribution: each draw picks a bin by target proportion, then a cancer
/// uniformly from that bin. Negatives are resampled at their original count.
inline SizeNormalizedResult size_normalized_auroc(std::span<const EvalEntry> entries,
                                                  const synth::SizeDistribution& target, std::size_t n_reps,
                                                  std::uint64_t seed, const LabelMapping& mapping = {},
                                                  std::size_t jobs = 1) {
    require(n_reps >= 100, ErrorCode::InvalidArgument, "size-normalised bootstrap needs at least 100 replicates");
    target.validate();
    std::vector<std::vector<double>> by_bin(target.bins.size());
    std::vector<double> neg;
    std::size_t n_pos = 0;
    for (const auto& e : entries) {
        if (mapping.positive(e.label)) {
            require(e.tumor_size_mm.has_value(), ErrorCode::InvalidArgument,
                    "cancer unit " + e.unit_id + " has no tumor_size_mm");
            ++n_pos;
            if (auto b = target.bin_of(*e.tumor_size_mm)) by_bin[*b].push_back(e.score);
        } else if (mapping.negative(e.label)) {
            neg.push_back(e.score);
        }
    }
    require(n_pos > 0 && !neg.empty(), ErrorCode::EmptyClass, "size-normalised bootstrap needs both classes");
    for (std::size_t b = 0; b < target.bins.size(); ++b)
        require(target.bins[b].proportion == 0 || !by_bin[b].empty(), ErrorCode::InvalidArgument,
                "target size bin [" + std::to_string(target.bins[b].lower_mm) + ", " +
                    std::to_string(target.bins[b].upper_mm) + ") has proportion " +
                    std::to_string(target.bins[b].proportion) + " but no cancers");

    std::vector<double> cumulative;
    double cum = 0;
    for (const auto& b : target.bins) cumulative.push_back(cum += b.proportion);

    std::vector<double> reps(n_reps);
    std::vector<std::vector<std::size_t>> bin_counts(n_reps, std::vector<std::size_t>(target.bins.size(), 0));
    parallel_for(n_reps, jobs, [&](std::size_t r) {
        CounterRng rng(derive_seed(seed, "eval.size_normalized", {r}));
        std::vector<double> pos(n_pos), rneg(neg.size());
        for (auto& v : pos) {
            const double u = rng.uniform() * cumulative.back();
            std::size_t b = 0;
            while (b + 1 < cumulative.size() && (u >= cumulative[b] || target.bins[b].proportion == 0)) ++b;
            while (target.bins[b].proportion == 0) --b;
            ++bin_counts[r][b];
            v = by_bin[b][rng.below(by_bin[b].size())];
        }
        for (auto& v : rneg) v = neg[rng.below(neg.size())];
        reps[r] = auroc(std::move(pos), std::move(rneg));
    });

    SizeNormalizedResult out;
    auto summary = summarize_replicates(reps, 0.05);
    out.n_reps = n_reps;
    out.mean = summary.mean;
    out.std = summary.std;
    out.replicates = std::move(reps);
    out.mean_bin_proportions.assign(target.bins.size(), 0.0);
    for (const auto& counts : bin_counts)
        for (std::size_t b = 0; b < counts.size(); ++b)
            out.mean_bin_proportions[b] += static_cast<double>(counts[b]) / static_cast<double>(n_pos);
    for (auto& p : out.mean_bin_proportions) p /= static_cast<double>(n_reps);
    for (const auto& v : by_bin) out.available_per_bin.push_back(v.size());
    return out;
}

struct SubgroupResult {
    std::map<std::string, double> auroc;
    std::map<std::string, std::string> skipped;  // tag value -> reason
};

/// Independent AUROC per value of `tag_key`. Groups lacking a class are
/// skipped and listed; units without the tag are ignored.
inline SubgroupResult subgroup_auroc(std::span<const EvalEntry> entries, const std::string& tag_key,
                                     const LabelMapping& mapping = {}) {
    std::map<std::string, SplitScores> groups;
    for (const auto& e : entries) {
        auto it = e.tags.find(tag_key);
        if (it == e.tags.end()) continue;
        auto& g = groups[it->second];
        if (mapping.positive(e.label)) g.pos.push_back(e.score);
        else if (mapping.negative(e.label)) g.neg.push_back(e.score);
    }
    SubgroupResult out;
    for (auto& [value, g] : groups) {
        if (g.pos.empty()) out.skipped[value] = "no positive units";
        else if (g.neg.empty()) out.skipped[value] = "no negative units";
        else out.auroc[value] = auroc(std::move(g.pos), std::move(g.neg));
    }
    return out;
}

enum class Unit { Breast, Study };

inline std::string to_string(Unit u) { return u == Unit::Breast ? "breast" : "study"; }
inline Unit unit_from_string(const std::string& s) {
    if (s == "breast") return Unit::Breast;
    if (s == "study") return Unit::Study;
    fail(ErrorCode::InvalidArgument, "unknown evaluation unit '" + s + "' (expected breast or study)");
}

/// Joins derived breast scores with study metadata.
///
/// Breast units: the cancer breast is `cancer`; a benign study's breast is
/// `benign` when it matches the `lesion_laterality` tag (or when that tag is
/// absent); every other breast is `normal`. Study units take the study label
/// and the uncertainty of the breast attaining the study maximum.
inline std::vector<EvalEntry> make_entries(std::span<const scoring::BreastRow> breasts,
                                           std::span<const StudyMeta> metadata, Unit unit) {
    std::map<std::string, const StudyMeta*> meta;
    for (const auto& m : metadata) meta[m.study_id] = &m;
    auto find_meta = [&](const std::string& id) -> const StudyMeta& {
        auto it = meta.find(id);
        require(it != meta.end(), ErrorCode::InvalidArgument, "scored study " + id + " has no metadata row");
        return *it->second;
    };
    std::vector<EvalEntry> out;
    if (unit == Unit::Breast) {
        for (const auto& b : breasts) {
            const auto& m = find_meta(b.study_id);
            EvalEntry e{b.study_id + "_" + synth::to_string(b.laterality), b.breast_score, b.breast_uncertainty,
                        Label::Normal, std::nullopt, m.tags};
            if (m.label == Label::Cancer) {
                require(m.cancer_laterality.has_value(), ErrorCode::InvalidArgument,
                        "cancer study " + m.study_id + " has no cancer_laterality for breast-level evaluation");
                if (*m.cancer_laterality == b.laterality) {
                    e.label = Label::Cancer;
                    e.tumor_size_mm = m.tumor_size_mm;
                }
            } else if (m.label == Label::Benign) {
                auto it = m.tags.find("lesion_laterality");
                if (it == m.tags.end() || it->second == synth::to_string(b.laterality)) e.label = Label::Benign;
            }
            out.push_back(std::move(e));
        }
        return out;
    }
    const auto grouped = scoring::breasts_by_study(breasts);
    for (const auto& [id, summaries] : grouped) {
        const auto& m = find_meta(id);
        double best = summaries.front().score;
        for (const auto& s : summaries) best = std::max(best, s.score);
        out.push_back({id, best, scoring::study_uncertainty(summaries), m.label,
                       m.label == Label::Cancer ? m.tumor_size_mm : std::nullopt, m.tags});
    }
    return out;
}

}  // namespace triage::eval
