#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "triage/synthcorpus.hpp"

using namespace triage;
using namespace triage::synth;

namespace {

const SizeDistribution kSource{{{5, 20, 0.36}, {20, 50, 0.64}}};

double mean_pixel(const Tensor& t) {
    double s = 0;
    for (float v : t.data()) s += v;
    return s / static_cast<double>(t.size());
}

}  // namespace

TEST(PatchDataset, EmptyPositiveClass) {
    const auto d = gen_patch_dataset(0, 5, 32, NoiseConfig{}, 1);
    ASSERT_EQ(d.size(), 5u);
    for (const auto& p : d) {
        EXPECT_EQ(p.label, 0);
        EXPECT_FALSE(p.lesion.has_value());
        EXPECT_EQ(p.image.shape(), (Shape{1, 32, 32}));
    }
}

TEST(PatchDataset, Deterministic) {
    const auto a = gen_patch_dataset(100, 100, 32, NoiseConfig{}, 9);
    const auto b = gen_patch_dataset(100, 100, 32, NoiseConfig{}, 9);
    ASSERT_EQ(a.size(), 200u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].label, b[i].label);
    }
    EXPECT_NE(a[0].image, gen_patch_dataset(1, 0, 32, NoiseConfig{}, 10)[0].image);
}

TEST(PatchDataset, PositivesBrighterOnAverage) {
    const auto d = gen_patch_dataset(1000, 1000, 32, NoiseConfig{}, 3);
    double pos = 0, neg = 0;
    for (const auto& p : d) (p.label ? pos : neg) += mean_pixel(p.image);
    EXPECT_GT(pos / 1000, neg / 1000);
    for (const auto& p : d) {
        EXPECT_EQ(p.lesion.has_value(), p.label == 1);
        EXPECT_TRUE(p.image.all_finite());
    }
}

TEST(PatchDataset, LesionMaskInsidePatch) {
    for (const auto& p : gen_patch_dataset(50, 0, 32, NoiseConfig{}, 4)) {
        const auto m = lesion_mask(*p.lesion, 32, 32);
        double covered = 0;
        for (float v : m.data()) covered += v;
        EXPECT_GT(covered, 0.0);
    }
}

TEST(StudyCorpus, NormalsOnly) {
    const auto c = gen_study_corpus(2, 0, 0, 128, SizeDistribution{}, 5);
    ASSERT_EQ(c.size(), 2u);
    for (const auto& s : c) {
        EXPECT_EQ(s.label, Label::Normal);
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_FALSE(s.lesions[i].has_value());
            EXPECT_EQ(s.images[i].shape(), (Shape{1, 128, 128}));
        }
        EXPECT_FALSE(s.cancer_laterality().has_value());
        EXPECT_FALSE(s.tumor_size_mm.has_value());
    }
}

TEST(StudyCorpus, ZeroStudiesRejected) { EXPECT_THROW(gen_study_corpus(0, 0, 0, 128, kSource, 1), Error); }

TEST(StudyCorpus, SourceSizeFraction) {
    // Counting sizes only; rendering at a small size keeps this fast.
    const SizeDistribution d{{{0, 20, 0.36}, {20, 200, 0.64}}};
    const auto c = gen_study_corpus(0, 0, 1000, 16, d, 7);
    std::size_t large = 0;
    for (const auto& s : c) large += *s.tumor_size_mm > 20;
    EXPECT_NEAR(static_cast<double>(large) / 1000.0, 0.64, 0.03);
}

TEST(StudyCorpus, BinConvergence) {
    const SizeDistribution d{{{5, 10, 0.2}, {10, 20, 0.3}, {20, 35, 0.3}, {35, 50, 0.2}}};
    for (std::size_t n : {100u, 400u, 1600u}) {
        const auto c = gen_study_corpus(0, 0, n, 16, d, 11);
        std::vector<double> freq(4, 0);
        for (const auto& s : c) freq[*d.bin_of(*s.tumor_size_mm)] += 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < 4; ++b) EXPECT_NEAR(freq[b], d.bins[b].proportion, 3 / std::sqrt(double(n)));
    }
}

TEST(StudyCorpus, PrefixStable) {
    const auto a = gen_study_corpus(3, 2, 2, 32, kSource, 8);
    const auto b = gen_study_corpus(5, 3, 4, 32, kSource, 8);
    auto find = [&](const std::string& id) -> const StudyRecord& {
        for (const auto& s : b)
            if (s.study_id == id) return s;
        throw std::runtime_error("missing " + id);
    };
    for (const auto& s : a) {
        const auto& t = find(s.study_id);
        EXPECT_EQ(s.images, t.images);
        EXPECT_EQ(s.label, t.label);
        EXPECT_EQ(s.tumor_size_mm, t.tumor_size_mm);
        EXPECT_EQ(s.tags, t.tags);
    }
    std::set<std::string> ids;
    for (const auto& s : b) ids.insert(s.study_id);
    EXPECT_EQ(ids.size(), b.size());
}

TEST(StudyCorpus, LabelLesionConsistency) {
    const auto c = gen_study_corpus(10, 10, 10, 64, kSource, 12);
    for (const auto& s : c) {
        for (auto lat : kLateralities)
            for (auto view : kViews) {
                const auto& lesion = s.lesions[image_index(lat, view)];
                const bool expected = s.label != Label::Normal && lat == *s.lesion_laterality;
                EXPECT_EQ(lesion.has_value(), expected);
                if (lesion) {
                    EXPECT_EQ(lesion->shape.kind, s.label == Label::Cancer ? LesionKind::Malignant : LesionKind::Benign);
                }
                EXPECT_TRUE(s.image(lat, view).all_finite());
            }
        if (s.label == Label::Cancer) {
            EXPECT_GT(*s.tumor_size_mm, 0.0);
            EXPECT_EQ(s.cancer_laterality(), s.lesion_laterality);
        } else {
            EXPECT_FALSE(s.tumor_size_mm.has_value());
        }
        if (s.label != Label::Normal) {
            EXPECT_EQ(s.tags.at("lesion_laterality"), to_string(*s.lesion_laterality));
        }
        EXPECT_TRUE(s.tags.count("density"));
    }
}

TEST(StudyCorpus, ViewsShareLesionParameters) {
    for (const auto& s : gen_study_corpus(0, 3, 3, 64, kSource, 14)) {
        const auto lat = *s.lesion_laterality;
        const auto& cc = *s.lesions[image_index(lat, View::CC)];
        const auto& mlo = *s.lesions[image_index(lat, View::MLO)];
        EXPECT_EQ(cc.shape.radius_px, mlo.shape.radius_px);
        EXPECT_EQ(cc.shape.contrast, mlo.shape.contrast);
    }
}

TEST(StudyCorpus, BenignFainterThanCancerOnAverage) {
    const auto c = gen_study_corpus(0, 200, 200, 16, kSource, 15);
    double benign = 0, cancer = 0;
    for (const auto& s : c) {
        const auto& l = *s.lesions[image_index(*s.lesion_laterality, View::CC)];
        (s.label == Label::Cancer ? cancer : benign) += l.shape.contrast / 200;
    }
    EXPECT_LT(benign, cancer);
}

TEST(StudyCorpus, FlipChangesImages) {
    const auto s = gen_study_corpus(1, 0, 0, 64, kSource, 16)[0];
    for (const auto& img : s.images) EXPECT_NE(vflip(img), img);
}

TEST(SizeDistribution, Validation) {
    EXPECT_THROW((SizeDistribution{{{0, 20, 0.5}, {10, 30, 0.5}}}.validate()), Error);
    EXPECT_THROW((SizeDistribution{{{0, 20, 0.5}, {20, 30, 0.4}}}.validate()), Error);
    EXPECT_THROW((SizeDistribution{{{20, 10, 1.0}}}.validate()), Error);
    EXPECT_THROW(SizeDistribution{}.validate(), Error);
    EXPECT_NO_THROW((SizeDistribution{{{0, 20, 0.36}, {20, INFINITY, 0.64}}}.validate()));
}
