#pragma once

// Evaluation report: one JSON document holding every figure, plus roc.csv,
// deferment.csv and composition.csv (normative) and matching SVG line charts
// (cosmetic). Everything is recomputable from the scored units and the seed.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "triage/config.hpp"
#include "triage/io.hpp"
#include "triage/metrics.hpp"
#include "triage/rng.hpp"

namespace triage::report {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline json bootstrap_json(const eval::BootstrapResult& b) {
    return {{"n_reps", b.n_reps}, {"alpha", b.alpha}, {"mean", b.mean},
            {"std", b.std},       {"ci_lower", b.lower}, {"ci_upper", b.upper}};
}

inline json counts_json(std::span<const eval::EvalEntry> entries, const eval::LabelMapping& mapping) {
    std::size_t n[3] = {0, 0, 0}, pos = 0, neg = 0;
    for (const auto& e : entries) {
        ++n[static_cast<int>(e.label)];
        pos += mapping.positive(e.label);
        neg += mapping.negative(e.label);
    }
    return {{"units", entries.size()}, {"normal", n[0]}, {"benign", n[1]}, {"cancer", n[2]},
            {"positive", pos},         {"negative", neg}};
}

/// AUROC of the units left after removing floor(fraction * n) most uncertain ones.
inline double auroc_after_deferral(std::span<const eval::EvalEntry> entries, double fraction,
                                   const eval::LabelMapping& mapping) {
    const auto order = eval::uncertainty_ranking(entries);
    const auto removed = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(entries.size())));
    std::vector<eval::EvalEntry> kept;
    for (std::size_t j = removed; j < order.size(); ++j) kept.push_back(entries[order[j]]);
    return eval::auroc(kept, mapping);
}

/// Every metric of the evaluation harness over one scored split.
/// `config_echo` is stored verbatim.
inline json build_report(const config::EvalConfig& cfg, std::span<const scoring::BreastRow> breasts,
                         std::span<const StudyMeta> metadata, std::uint64_t seed, const json& config_echo,
                         std::size_t jobs = 1) {
    const eval::LabelMapping mapping{cfg.exclude_benign};
    const auto entries = eval::make_entries(breasts, metadata, cfg.unit);
    const auto studies = eval::make_entries(breasts, metadata, eval::Unit::Study);
    const auto eval_seed = derive_seed(seed, "eval", {});

    json r;
    r["format_version"] = io::kFormatVersion;
    r["config"] = config_echo;
    r["conventions"] = {
        {"unit", eval::to_string(cfg.unit)},
        {"benign_handling", cfg.exclude_benign ? "excluded" : "negative"},
        {"positive_class", "cancer"},
        {"variance", "population variance of the 2M raw scores per image (divide by 2M), averaged over views"},
        {"study_uncertainty",
         "uncertainty of the breast attaining the study max score; ties go to the larger uncertainty "
         "(extension: uncertainty is defined per breast)"},
        {"bootstrap", "stratified by positive/negative, replicate r seeded by hash(seed, r)"},
        {"dispersion", "std is the sample standard deviation of replicate AUROCs; ci is the percentile interval"},
        {"deferment_ranking", "uncertainty descending, unit_id ascending on ties"},
        {"triage_unit", "study"}};
    r["seed"] = seed;
    r["counts"] = counts_json(entries, mapping);

    r["auroc"] = eval::auroc(entries, mapping);
    r["auroc_normal_vs_cancer"] = eval::auroc(entries, eval::LabelMapping{true});
    r["bootstrap"] = bootstrap_json(eval::bootstrap_ci(entries, cfg.reps, eval_seed, cfg.alpha, mapping, jobs));

    json roc = json::array();
    for (const auto& p : eval::roc_curve(entries, mapping))
        roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr},
                       {"threshold", std::isfinite(p.threshold) ? json(p.threshold) : json(nullptr)}});
    r["roc"] = std::move(roc);

    r["study_level"] = {
        {"counts", counts_json(studies, mapping)},
        {"auroc", eval::auroc(studies, mapping)},
        {"bootstrap",
         bootstrap_json(eval::bootstrap_ci(studies, cfg.reps, derive_seed(eval_seed, "study", {}), cfg.alpha, mapping,
                                           jobs))}};

    {
        const double t = eval::threshold_at_sensitivity(studies, cfg.target_sensitivity, mapping);
        r["triage"] = {{"unit", "study"},
                       {"target_sensitivity", cfg.target_sensitivity},
                       {"threshold", t},
                       {"sensitivity", eval::sensitivity_at(studies, t, mapping)},
                       {"normal_fraction_cleared", eval::triage_fraction(studies, t)},
                       {"clinical_reference",
                        {{"normal_fraction_cleared", 0.60},
                         {"target_sensitivity", 0.95},
                         {"note", "clinical reference point from the original study; not reproducible on synthetic data"}}}};
    }

    json deferment = json::array();
    for (const auto& p : eval::deferment_curve(entries, cfg.steps, mapping))
        deferment.push_back({{"fraction_removed", p.fraction_removed}, {"n_removed", p.n_removed}, {"auroc", p.auroc}});
    r["deferment"] = std::move(deferment);
    {
        const double full = r["auroc"].get<double>();
        const double kept = auroc_after_deferral(entries, cfg.deferment_check_fraction, mapping);
        r["deferment_check"] = {{"fraction_removed", cfg.deferment_check_fraction},
                                {"auroc_all", full},
                                {"auroc_retained", kept},
                                {"change", kept - full}};
    }
    json composition = json::array();
    for (const auto& p : eval::composition_curve(entries, cfg.steps))
        composition.push_back({{"fraction_removed", p.fraction_removed},
                               {"n_removed", p.n_removed},
                               {"normal", p.normal},
                               {"benign", p.benign},
                               {"cancer", p.cancer}});
    r["composition"] = std::move(composition);

    try {
        const auto sn = eval::size_normalized_auroc(entries, cfg.target_size_dist, cfg.reps,
                                                    derive_seed(eval_seed, "size", {}), mapping, jobs);
        r["size_normalized"] = {{"target", config::to_json(cfg.target_size_dist)},
                                {"n_reps", sn.n_reps},
                                {"mean", sn.mean},
                                {"std", sn.std},
                                {"mean_bin_proportions", sn.mean_bin_proportions},
                                {"available_per_bin", sn.available_per_bin}};
    } catch (const Error& e) {
        r["size_normalized"] = {{"target", config::to_json(cfg.target_size_dist)}, {"error", e.what()}};
    }

    json subgroups = json::object();
    for (const auto& tag : cfg.subgroup_tags) {
        const auto g = eval::subgroup_auroc(entries, tag, mapping);
        subgroups[tag] = {{"auroc", g.auroc}, {"skipped", g.skipped}};
    }
    r["subgroups"] = std::move(subgroups);
    return r;
}

// ---- curve files -------------------------------------------------------------

inline std::string fmt(double v) { return io::format_score(v); }

inline std::string roc_csv(const json& report) {
    std::string out = "fpr,tpr,threshold\n";
    for (const auto& p : report.at("roc"))
        out += fmt(p["fpr"].get<double>()) + "," + fmt(p["tpr"].get<double>()) + "," +
               (p["threshold"].is_null() ? std::string("inf") : fmt(p["threshold"].get<double>())) + "\n";
    return out;
}

inline std::string deferment_csv(const json& report) {
    std::string out = "fraction_removed,n_removed,auroc\n";
    for (const auto& p : report.at("deferment"))
        out += fmt(p["fraction_removed"].get<double>()) + "," + std::to_string(p["n_removed"].get<std::size_t>()) + "," +
               fmt(p["auroc"].get<double>()) + "\n";
    return out;
}

inline std::string composition_csv(const json& report) {
    std::string out = "fraction_removed,n_removed,normal,benign,cancer\n";
    for (const auto& p : report.at("composition"))
        out += fmt(p["fraction_removed"].get<double>()) + "," + std::to_string(p["n_removed"].get<std::size_t>()) + "," +
               fmt(p["normal"].get<double>()) + "," + fmt(p["benign"].get<double>()) + "," +
               fmt(p["cancer"].get<double>()) + "\n";
    return out;
}

struct Series {
    std::string name;
    std::string colour;
    std::vector<std::pair<double, double>> points;
};

/// Unit-square line chart; y range is [y_lo, y_hi].
inline std::string svg_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                             const std::vector<Series>& series, double y_lo = 0.0, double y_hi = 1.0) {
    const double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
    auto px = [&](double x) { return L + x * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y_lo) / (y_hi - y_lo) * (H - T - B); };
    char buf[128];
    std::string s;
    std::snprintf(buf, sizeof buf, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\">\n", W, H);
    s += buf;
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">", W / 2);
    s += buf + title + "</text>\n";
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#444\"/>\n",
                  L, T, W - L - R, H - T - B);
    s += buf;
    for (int i = 0; i <= 4; ++i) {
        const double f = i / 4.0;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"middle\">%g</text>\n",
                      px(f), H - B + 16, f);
        s += buf;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"end\">%.3g</text>\n",
                      L - 6, py(y_lo + f * (y_hi - y_lo)) + 4, y_lo + f * (y_hi - y_lo));
        s += buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">", W / 2, H - 12);
    s += buf + x_label + "</text>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"16\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 %g)\">",
                  H / 2, H / 2);
    s += buf + y_label + "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& se = series[k];
        s += "<polyline fill=\"none\" stroke=\"" + se.colour + "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : se.points) {
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
            s += buf;
        }
        s += "\"/>\n";
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" fill=\"%s\">", L + 8,
                      T + 16 + 14 * static_cast<double>(k), se.colour.c_str());
        s += buf + se.name + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

inline void write_report_files(const json& report, const fs::path& dir) {
    io::write_file(dir / "report.json", report.dump(2) + "\n");
    io::write_file(dir / "roc.csv", roc_csv(report));
    io::write_file(dir / "deferment.csv", deferment_csv(report));
    io::write_file(dir / "composition.csv", composition_csv(report));

    Series roc{"ROC", "#1f77b4", {}};
    for (const auto& p : report.at("roc")) roc.points.emplace_back(p["fpr"].get<double>(), p["tpr"].get<double>());
    Series chance{"chance", "#999999", {{0, 0}, {1, 1}}};
    io::write_file(dir / "roc.svg", svg_chart("ROC", "false positive rate", "true positive rate", {roc, chance}));

    Series def{"AUROC of retained", "#d62728", {}};
    double lo = 1, hi = 0;
    for (const auto& p : report.at("deferment")) {
        const double a = p["auroc"].get<double>();
        def.points.emplace_back(p["fraction_removed"].get<double>(), a);
        lo = std::min(lo, a);
        hi = std::max(hi, a);
    }
    lo = std::max(0.0, std::floor(lo * 20 - 1) / 20);
    hi = std::min(1.0, std::ceil(hi * 20 + 1) / 20);
    io::write_file(dir / "deferment.svg",
                   svg_chart("AUROC by fraction deferred", "fraction removed (highest uncertainty first)", "AUROC",
                             {def}, lo, hi));

    Series n{"normal", "#2ca02c", {}}, b{"benign", "#ff7f0e", {}}, c{"cancer", "#9467bd", {}};
    for (const auto& p : report.at("composition")) {
        if (p["n_removed"].get<std::size_t>() == 0) continue;
        const double f = p["fraction_removed"].get<double>();
        n.points.emplace_back(f, p["normal"].get<double>());
        b.points.emplace_back(f, p["benign"].get<double>());
        c.points.emplace_back(f, p["cancer"].get<double>());
    }
    io::write_file(dir / "composition.svg",
                   svg_chart("Composition of deferred units", "fraction removed", "share of removed", {n, b, c}));
}

}  // namespace triage::report
