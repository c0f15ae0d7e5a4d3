#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "test_support.hpp"
#include "triage/metrics.hpp"

using namespace triage;
using namespace triage::eval;
using synth::Label;

namespace {

std::vector<EvalEntry> from_scores(const std::vector<double>& pos, const std::vector<double>& neg) {
    std::vector<EvalEntry> out;
    for (std::size_t i = 0; i < pos.size(); ++i) out.push_back({"p" + std::to_string(i), pos[i], 0, Label::Cancer, 10.0, {}});
    for (std::size_t i = 0; i < neg.size(); ++i) out.push_back({"n" + std::to_string(i), neg[i], 0, Label::Normal, {}, {}});
    return out;
}

// Random labelled set; scores quantised to force ties.
std::vector<EvalEntry> random_entries(std::uint64_t seed, std::size_t n, double levels = 20) {
    CounterRng rng(seed);
    std::vector<EvalEntry> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = rng.uniform();
        const Label l = r < 0.3 ? Label::Cancer : (r < 0.5 ? Label::Benign : Label::Normal);
        double s = rng.uniform() * 0.7 + (l == Label::Cancer ? 0.3 : 0.0);
        s = std::round(s * levels) / levels;
        char id[16];
        std::snprintf(id, sizeof id, "u%04zu", i);
        out.push_back({id, s, rng.uniform() * 0.1, l, 5 + 40 * rng.uniform(), {}});
    }
    return out;
}

SplitScores split(const std::vector<EvalEntry>& e) { return split_scores(e, {}); }

}  // namespace

TEST(Auroc, Examples) {
    EXPECT_EQ(auroc({0.9, 0.8}, {0.1, 0.7}), 1.0);
    EXPECT_EQ(auroc({0.5, 0.5}, {0.5, 0.5, 0.5}), 0.5);
    EXPECT_EQ(auroc({0.2}, {0.8}), 0.0);
    EXPECT_THROW(auroc(std::vector<double>{}, {0.1}), Error);
    EXPECT_THROW(auroc({0.1}, std::vector<double>{}), Error);
}

TEST(Auroc, MatchesPairCountOracleWithTies) {
    for (std::uint64_t s = 0; s < 60; ++s) {
        const auto e = random_entries(s, 5 + s * 3, s % 3 == 0 ? 4 : 20);
        const auto sp = split(e);
        if (sp.pos.empty() || sp.neg.empty()) continue;
        EXPECT_NEAR(auroc(e), triage::testing::pair_count_auroc(sp.pos, sp.neg), 1e-12);
    }
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
    auto e = random_entries(77, 150);
    const double base = auroc(e);
    for (auto& x : e) x.score = std::exp(3 * x.score) - 7;
    EXPECT_EQ(auroc(e), base);
}

TEST(Auroc, BenignExclusion) {
    std::vector<EvalEntry> e{{"a", 0.9, 0, Label::Cancer, 10.0, {}},
                             {"b", 0.95, 0, Label::Benign, {}, {}},
                             {"c", 0.1, 0, Label::Normal, {}, {}}};
    EXPECT_EQ(auroc(e), 0.5);
    EXPECT_EQ(auroc(e, LabelMapping{true}), 1.0);
}

TEST(Roc, PerfectSeparation) {
    const auto e = from_scores({0.9}, {0.1});
    const auto c = roc_curve(e);
    ASSERT_EQ(c.size(), 3u);
    EXPECT_EQ(c[0].fpr, 0.0);
    EXPECT_EQ(c[0].tpr, 0.0);
    EXPECT_TRUE(std::isinf(c[0].threshold));
    EXPECT_EQ(c[1].fpr, 0.0);
    EXPECT_EQ(c[1].tpr, 1.0);
    EXPECT_EQ(c[2].fpr, 1.0);
    EXPECT_EQ(c[2].tpr, 1.0);
}

TEST(Roc, DuplicateScoresCollapse) {
    const auto c = roc_curve(from_scores({0.5, 0.5, 0.7}, {0.5, 0.2}));
    ASSERT_EQ(c.size(), 4u);  // origin + {0.7, 0.5, 0.2}
    EXPECT_EQ(c[2].threshold, 0.5);
    EXPECT_EQ(c[2].tpr, 1.0);
    EXPECT_EQ(c[2].fpr, 0.5);
}

TEST(Roc, TrapezoidMatchesAuroc) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto e = random_entries(100 + s, 10 + 3 * s, 10);
        const auto sp = split(e);
        if (sp.pos.empty() || sp.neg.empty()) continue;
        const auto c = roc_curve(e);
        EXPECT_NEAR(trapezoid_area(c), triage::testing::pair_count_auroc(sp.pos, sp.neg), 1e-12);
        EXPECT_EQ(c.back().fpr, 1.0);
        EXPECT_EQ(c.back().tpr, 1.0);
        for (std::size_t i = 2; i < c.size(); ++i) EXPECT_LT(c[i].threshold, c[i - 1].threshold);
    }
}

TEST(Bootstrap, PerfectSeparation) {
    const auto r = bootstrap_ci(from_scores({0.9, 0.8, 0.85}, {0.1, 0.3}), 200, 1);
    EXPECT_EQ(r.mean, 1.0);
    EXPECT_EQ(r.std, 0.0);
}

TEST(Bootstrap, SeedStabilityAndOrder) {
    const auto e = random_entries(5, 200);
    const auto a = bootstrap_ci(e, 1000, 1);
    const auto b = bootstrap_ci(e, 1000, 2);
    EXPECT_NEAR(a.mean, b.mean, 0.01);
    for (const auto& r : {a, b}) {
        EXPECT_LE(0.0, r.lower);
        EXPECT_LE(r.lower, r.mean);
        EXPECT_LE(r.mean, r.upper);
        EXPECT_LE(r.upper, 1.0);
    }
}

TEST(Bootstrap, DeterministicAcrossJobs) {
    const auto e = random_entries(6, 120);
    const auto a = bootstrap_ci(e, 300, 9, 0.05, {}, 1);
    const auto b = bootstrap_ci(e, 300, 9, 0.05, {}, 4);
    EXPECT_EQ(a.replicates, b.replicates);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_THROW(bootstrap_ci(e, 99, 9), Error);
}

TEST(Bootstrap, PercentileQuantile) {
    const std::vector<double> v{1, 2, 3, 4, 5};
    EXPECT_EQ(quantile_sorted(v, 0.0), 1.0);
    EXPECT_EQ(quantile_sorted(v, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.1), 1.4);
    EXPECT_EQ(quantile_sorted(v, 1.0), 5.0);
}

TEST(Triage, ThresholdExamples) {
    EXPECT_EQ(threshold_at_sensitivity(from_scores({0.9, 0.8, 0.7, 0.2}, {0.1}), 0.75), 0.7);
    EXPECT_EQ(threshold_at_sensitivity(from_scores({0.9, 0.8, 0.7, 0.2}, {0.1}), 1.0), 0.2);
    EXPECT_EQ(threshold_at_sensitivity(from_scores({0.6}, {}), 0.95), 0.6);
    EXPECT_THROW(threshold_at_sensitivity(from_scores({}, {0.1}), 0.9), Error);
}

TEST(Triage, FractionExamples) {
    const auto e = from_scores({0.9}, {0.1, 0.2, 0.8});
    EXPECT_DOUBLE_EQ(triage_fraction(e, 0.7), 2.0 / 3.0);
    EXPECT_EQ(triage_fraction(e, 0.1), 0.0);
    EXPECT_THROW(triage_fraction(from_scores({0.9}, {}), 0.5), Error);
}

TEST(Triage, MatchesExhaustiveOracle) {
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto e = random_entries(300 + s, 80, 15);
        const auto sp = split(e);
        if (sp.pos.empty()) continue;
        for (double target : {0.5, 0.8, 0.95, 1.0}) {
            double best = -std::numeric_limits<double>::infinity();
            for (double t : sp.pos) {
                std::size_t hit = 0;
                for (double p : sp.pos) hit += p >= t;
                if (static_cast<double>(hit) / sp.pos.size() >= target) best = std::max(best, t);
            }
            const double t = threshold_at_sensitivity(e, target);
            EXPECT_EQ(t, best);
            EXPECT_GE(sensitivity_at(e, t), target);
        }
    }
}

TEST(Deferment, ConstantUncertainty) {
    auto e = random_entries(8, 60);
    for (auto& x : e) x.uncertainty = 0;
    const auto c = deferment_curve(e, 10);
    ASSERT_FALSE(c.empty());
    EXPECT_EQ(c[0].auroc, auroc(e));
    EXPECT_EQ(c[0].n_removed, 0u);
}

TEST(Deferment, FourCaseOracle) {
    std::vector<EvalEntry> e{{"a", 0.9, 0.01, Label::Cancer, 10.0, {}},
                             {"b", 0.05, 0.30, Label::Cancer, 10.0, {}},
                             {"c", 0.3, 0.02, Label::Normal, {}, {}},
                             {"d", 0.1, 0.03, Label::Normal, {}, {}}};
    const auto c = deferment_curve(e, 4);
    ASSERT_GE(c.size(), 2u);
    EXPECT_EQ(c[0].auroc, 0.5);
    EXPECT_EQ(c[1].fraction_removed, 0.25);
    EXPECT_EQ(c[1].auroc, 1.0);
    EXPECT_EQ(c.size(), 3u);  // f = 0.75 would leave a single class
}

TEST(Deferment, StopsBeforeClassEmpties) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto e = random_entries(500 + s, 40);
        const auto c = deferment_curve(e, 20);
        const auto order = uncertainty_ranking(e);
        for (const auto& p : c) {
            std::size_t pos = 0, neg = 0;
            for (std::size_t j = p.n_removed; j < order.size(); ++j) (e[order[j]].label == Label::Cancer ? pos : neg)++;
            EXPECT_GT(pos, 0u);
            EXPECT_GT(neg, 0u);
        }
        if (c.size() < 21) {
            const std::size_t next = removed_at(c.size(), 20, e.size());
            std::size_t pos = 0, neg = 0;
            for (std::size_t j = next; j < order.size(); ++j) (e[order[j]].label == Label::Cancer ? pos : neg)++;
            EXPECT_TRUE(pos == 0 || neg == 0);
        }
    }
}

TEST(Composition, EndpointsAndSums) {
    const auto e = random_entries(11, 97);
    const auto c = composition_curve(e, 10);
    EXPECT_EQ(c[0].normal + c[0].benign + c[0].cancer, 0.0);
    for (std::size_t i = 1; i < c.size(); ++i) EXPECT_NEAR(c[i].normal + c[i].benign + c[i].cancer, 1.0, 1e-12);
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& x : e) ++counts[static_cast<int>(x.label)];
    EXPECT_EQ(c.back().fraction_removed, 1.0);
    EXPECT_DOUBLE_EQ(c.back().normal, counts[0] / 97.0);
    EXPECT_DOUBLE_EQ(c.back().benign, counts[1] / 97.0);
    EXPECT_DOUBLE_EQ(c.back().cancer, counts[2] / 97.0);
}

TEST(Composition, SingleClassAndBenignFirst) {
    auto only = from_scores({0.1, 0.5, 0.9}, {});
    for (const auto& p : composition_curve(only, 4)) {
        if (p.n_removed > 0) {
            EXPECT_EQ(p.cancer, 1.0);
        }
    }

    std::vector<EvalEntry> e;
    for (int i = 0; i < 10; ++i) e.push_back({"b" + std::to_string(i), 0.5, 0.5 + 0.01 * i, Label::Benign, {}, {}});
    for (int i = 0; i < 30; ++i) e.push_back({"n" + std::to_string(i), 0.2, 0.01 * (i % 7), Label::Normal, {}, {}});
    for (int i = 0; i < 10; ++i) e.push_back({"c" + std::to_string(i), 0.8, 0.1, Label::Cancer, 20.0, {}});
    const auto c = composition_curve(e, 10);
    EXPECT_EQ(c[1].benign, 1.0);
    EXPECT_EQ(c[2].benign, 1.0);
}

TEST(Composition, ZeroRemovalStepsOmitted) {
    const auto c = composition_curve(from_scores({0.9}, {0.1, 0.2}), 10);
    for (std::size_t i = 1; i < c.size(); ++i) EXPECT_GT(c[i].n_removed, 0u);
    EXPECT_EQ(c.back().n_removed, 3u);
}

namespace {

std::vector<EvalEntry> sized_entries(std::uint64_t seed, std::size_t n_pos, std::size_t n_neg, double p_large) {
    CounterRng rng(seed);
    std::vector<EvalEntry> e;
    for (std::size_t i = 0; i < n_pos; ++i) {
        const bool large = rng.bernoulli(p_large);
        const double size = large ? rng.uniform(20, 50) : rng.uniform(5, 20);
        // Larger tumours score higher, so reweighting moves the AUROC.
        e.push_back({"p" + std::to_string(i), (large ? 0.5 : 0.2) + 0.5 * rng.uniform(), 0, Label::Cancer, size, {}});
    }
    for (std::size_t i = 0; i < n_neg; ++i) e.push_back({"n" + std::to_string(i), 0.5 * rng.uniform(), 0, Label::Normal, {}, {}});
    return e;
}

}  // namespace

TEST(SizeNormalized, BinProportionsMatchTarget) {
    const auto e = sized_entries(1, 120, 200, 0.3);
    const synth::SizeDistribution target{{{0, 20, 0.36}, {20, std::numeric_limits<double>::infinity(), 0.64}}};
    const auto r = size_normalized_auroc(e, target, 1000, 4);
    ASSERT_EQ(r.mean_bin_proportions.size(), 2u);
    EXPECT_NEAR(r.mean_bin_proportions[0], 0.36, 0.02);
    EXPECT_NEAR(r.mean_bin_proportions[1], 0.64, 0.02);
    EXPECT_GT(r.mean, bootstrap_ci(e, 1000, 4).mean);  // more large tumours -> easier
}

TEST(SizeNormalized, EmpiricalTargetMatchesPlainBootstrap) {
    const auto e = sized_entries(2, 150, 200, 0.5);
    std::size_t small = 0, n = 0;
    for (const auto& x : e)
        if (x.label == Label::Cancer) small += *x.tumor_size_mm < 20, ++n;
    const double p = static_cast<double>(small) / n;
    const synth::SizeDistribution target{{{0, 20, p}, {20, 1000, 1 - p}}};
    EXPECT_NEAR(size_normalized_auroc(e, target, 1000, 3).mean, bootstrap_ci(e, 1000, 3).mean, 0.02);
}

TEST(SizeNormalized, DegenerateSingleBin) {
    auto e = sized_entries(3, 80, 100, 1.0);
    const synth::SizeDistribution target{{{0, 20, 0.0}, {20, 100, 1.0}}};
    EXPECT_NEAR(size_normalized_auroc(e, target, 1000, 5).mean, bootstrap_ci(e, 1000, 5).mean, 0.01);
}

TEST(SizeNormalized, EmptyTargetBinRejected) {
    const auto e = sized_entries(4, 50, 50, 1.0);
    const synth::SizeDistribution target{{{0, 20, 0.5}, {20, 100, 0.5}}};
    EXPECT_THROW(size_normalized_auroc(e, target, 200, 1), Error);
    auto missing = e;
    missing[0].tumor_size_mm.reset();
    EXPECT_THROW(size_normalized_auroc(missing, synth::SizeDistribution{{{0, 100, 1.0}}}, 200, 1), Error);
}

TEST(SizeNormalized, DeterministicAcrossJobs) {
    const auto e = sized_entries(5, 60, 60, 0.5);
    const synth::SizeDistribution target{{{0, 20, 0.7}, {20, 100, 0.3}}};
    EXPECT_EQ(size_normalized_auroc(e, target, 200, 8, {}, 1).replicates,
              size_normalized_auroc(e, target, 200, 8, {}, 3).replicates);
}

TEST(Subgroup, Examples) {
    auto e = random_entries(12, 80);
    for (auto& x : e) x.tags["site"] = "A";
    const auto one = subgroup_auroc(e, "site");
    ASSERT_EQ(one.auroc.size(), 1u);
    EXPECT_EQ(one.auroc.at("A"), auroc(e));

    std::vector<EvalEntry> g{{"1", 0.9, 0, Label::Cancer, 10.0, {{"d", "x"}}}, {"2", 0.4, 0, Label::Normal, {}, {{"d", "x"}}},
                             {"3", 0.6, 0, Label::Normal, {}, {{"d", "x"}}},  {"4", 0.3, 0, Label::Cancer, 10.0, {{"d", "y"}}},
                             {"5", 0.5, 0, Label::Normal, {}, {{"d", "y"}}},  {"6", 0.2, 0, Label::Normal, {}, {{"d", "y"}}},
                             {"7", 0.2, 0, Label::Normal, {}, {{"d", "z"}}}};
    const auto r = subgroup_auroc(g, "d");
    EXPECT_EQ(r.auroc.at("x"), triage::testing::pair_count_auroc({0.9}, {0.4, 0.6}));
    EXPECT_EQ(r.auroc.at("y"), triage::testing::pair_count_auroc({0.3}, {0.5, 0.2}));
    EXPECT_EQ(r.auroc.count("z"), 0u);
    EXPECT_EQ(r.skipped.at("z"), "no positive units");
}

TEST(Entries, BreastAndStudyLabels) {
    std::vector<StudyMeta> meta{{"c1", Label::Cancer, synth::Laterality::Right, 25.0, {{"density", "dense"}}},
                                {"b1", Label::Benign, std::nullopt, std::nullopt, {{"lesion_laterality", "L"}}},
                                {"n1", Label::Normal, std::nullopt, std::nullopt, {}}};
    std::vector<scoring::BreastRow> rows;
    auto add = [&](const std::string& id, synth::Laterality l, double s, double u) {
        rows.push_back({id, l, s, u, 0});
    };
    add("c1", synth::Laterality::Left, 0.3, 0.02);
    add("c1", synth::Laterality::Right, 0.8, 0.05);
    add("b1", synth::Laterality::Left, 0.6, 0.01);
    add("b1", synth::Laterality::Right, 0.6, 0.03);
    add("n1", synth::Laterality::Left, 0.1, 0.0);
    add("n1", synth::Laterality::Right, 0.2, 0.0);
    const auto breasts = make_entries(rows, meta, Unit::Breast);
    ASSERT_EQ(breasts.size(), 6u);
    EXPECT_EQ(breasts[0].label, Label::Normal);  // c1 L
    EXPECT_EQ(breasts[1].label, Label::Cancer);
    EXPECT_EQ(*breasts[1].tumor_size_mm, 25.0);
    EXPECT_EQ(breasts[1].tags.at("density"), "dense");
    EXPECT_EQ(breasts[2].label, Label::Benign);
    EXPECT_EQ(breasts[3].label, Label::Normal);

    const auto studies = make_entries(rows, meta, Unit::Study);
    ASSERT_EQ(studies.size(), 3u);
    EXPECT_EQ(studies[0].unit_id, "b1");
    EXPECT_EQ(studies[0].score, 0.6);
    EXPECT_EQ(studies[0].uncertainty, 0.03);
    EXPECT_EQ(studies[1].score, 0.8);
    EXPECT_EQ(studies[1].uncertainty, 0.05);
    EXPECT_EQ(studies[1].label, Label::Cancer);

    rows.push_back({"ghost", synth::Laterality::Left, 0.5, 0, 0});
    EXPECT_THROW(make_entries(rows, meta, Unit::Breast), Error);
}
