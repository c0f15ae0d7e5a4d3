#pragma once

// Deterministic synthetic "needle in a haystack" data: labeled patches for
// patch-level training and four-view studies (normal / benign / cancer) for
// image-level training and evaluation.
//
// Every study is a pure function of (seed, label, index within label), so
// corpora of different sizes share their common prefix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "triage/error.hpp"
#include "triage/rng.hpp"
#include "triage/tensor.hpp"

namespace triage::synth {

enum class Label { Normal, Benign, Cancer };
enum class Laterality { Left, Right };
enum class View { CC, MLO };

inline std::string to_string(Label l) {
    switch (l) {
        case Label::Normal: return "normal";
        case Label::Benign: return "benign";
        case Label::Cancer: return "cancer";
    }
    return "?";
}
inline std::optional<Label> label_from_string(const std::string& s) {
    if (s == "normal") return Label::Normal;
    if (s == "benign") return Label::Benign;
    if (s == "cancer") return Label::Cancer;
    return std::nullopt;
}
inline std::string to_string(Laterality l) { return l == Laterality::Left ? "L" : "R"; }
inline std::optional<Laterality> laterality_from_string(const std::string& s) {
    if (s == "L") return Laterality::Left;
    if (s == "R") return Laterality::Right;
    return std::nullopt;
}
inline std::string to_string(View v) { return v == View::CC ? "CC" : "MLO"; }
inline std::optional<View> view_from_string(const std::string& s) {
    if (s == "CC") return View::CC;
    if (s == "MLO") return View::MLO;
    return std::nullopt;
}

inline constexpr std::array<Laterality, 2> kLateralities{Laterality::Left, Laterality::Right};
inline constexpr std::array<View, 2> kViews{View::CC, View::MLO};

/// Index of (laterality, view) in a study's image array: L-CC, L-MLO, R-CC, R-MLO.
constexpr std::size_t image_index(Laterality l, View v) {
    return (l == Laterality::Left ? 0u : 2u) + (v == View::CC ? 0u : 1u);
}

struct SizeBin {
    double lower_mm = 0;
    double upper_mm = 0;  // exclusive; may be +inf for evaluation targets
    double proportion = 0;

    bool contains(double mm) const { return mm >= lower_mm && mm < upper_mm; }
    friend bool operator==(const SizeBin&, const SizeBin&) = default;
};

struct SizeDistribution {
    std::vector<SizeBin> bins;

    void validate() const {
        require(!bins.empty(), ErrorCode::InvalidArgument, "size distribution has no bins");
        double total = 0;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const auto& b = bins[i];
            require(b.lower_mm >= 0 && b.upper_mm > b.lower_mm, ErrorCode::InvalidArgument,
                    "size bin " + std::to_string(i) + " must satisfy 0 <= lower < upper");
            require(b.proportion >= 0, ErrorCode::InvalidArgument, "size bin proportions must be non-negative");
            if (i > 0)
                require(b.lower_mm >= bins[i - 1].upper_mm, ErrorCode::InvalidArgument,
                        "size bins must be ascending and non-overlapping");
            total += b.proportion;
        }
        require(std::abs(total - 1.0) <= 1e-9, ErrorCode::InvalidArgument,
                "size bin proportions sum to " + std::to_string(total) + ", expected 1");
    }

    std::optional<std::size_t> bin_of(double mm) const {
        for (std::size_t i = 0; i < bins.size(); ++i)
            if (bins[i].contains(mm)) return i;
        return std::nullopt;
    }

    // Bin by proportion, then uniform within the bin.
    double sample(CounterRng& rng) const {
        const double u = rng.uniform();
        double cum = 0;
        std::size_t pick = bins.size() - 1;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            cum += bins[i].proportion;
            if (u < cum) {
                pick = i;
                break;
            }
        }
        while (bins[pick].proportion == 0 && pick > 0) --pick;
        const auto& b = bins[pick];
        require(std::isfinite(b.upper_mm), ErrorCode::InvalidArgument,
                "cannot sample sizes from an unbounded bin; give every bin a finite upper edge");
        return rng.uniform(b.lower_mm, b.upper_mm);
    }

    friend bool operator==(const SizeDistribution&, const SizeDistribution&) = default;
};

/// Background and lesion rendering constants.
struct RenderConfig {
    double texture_sigma = 0.25;     // pre-smoothing noise std (3x3 box filter follows)
    double tissue_level = 0.35;      // mean tissue intensity, non-dense
    double dense_tissue_level = 0.45;
    double dense_texture_gain = 1.6; // texture amplitude multiplier for dense breasts
    double dense_fraction = 0.5;     // studies tagged density=dense
    double mm_to_px = 0.6;           // at 128 px; scaled with image size
    double cancer_contrast_lo = 0.30, cancer_contrast_hi = 0.60;
    double benign_contrast_lo = 0.12, benign_contrast_hi = 0.35;
    double benign_size_lo_mm = 6, benign_size_hi_mm = 30;
    double max_radius_fraction = 0.2;  // rendered radius cap relative to image size

    friend bool operator==(const RenderConfig&, const RenderConfig&) = default;
};

/// Patch set: crops of `source_size` breast renders drawn with `tissue`;
/// positives are centred (with jitter) on one malignant lesion.
struct NoiseConfig {
    std::size_t source_size = 128;
    RenderConfig tissue;
    double lesion_diameter_lo = 3, lesion_diameter_hi = 30;  // px at source_size
    double contrast_lo = 0.30, contrast_hi = 0.60;

    friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

enum class LesionKind { Malignant, Benign };

/// Shape shared by the two views of one breast. Malignant lesions have a
/// sharp, lobulated edge; benign ones a smooth, round falloff.
struct LesionShape {
    LesionKind kind = LesionKind::Malignant;
    double radius_px = 0;
    double contrast = 0;
    double aspect = 1;  // benign ellipse axis ratio
    double angle = 0;
    int lobes = 0;
    double lobe_amp = 0, lobe_phase = 0;
    double spike_amp = 0, spike_phase = 0;
};

struct Lesion {
    LesionShape shape;
    double cx = 0, cy = 0;
};

/// Additive intensity of the lesion at (x, y).
inline double lesion_value(const Lesion& lesion, double x, double y) {
    const auto& s = lesion.shape;
    const double dx = x - lesion.cx, dy = y - lesion.cy;
    if (s.kind == LesionKind::Benign) {
        const double c = std::cos(s.angle), sn = std::sin(s.angle);
        const double u = (dx * c + dy * sn) / s.radius_px;
        const double v = (-dx * sn + dy * c) / (s.radius_px * s.aspect);
        return s.contrast * std::exp(-1.5 * (u * u + v * v));
    }
    const double d = std::sqrt(dx * dx + dy * dy);
    const double theta = std::atan2(dy, dx);
    const double edge = s.radius_px * (1.0 + s.lobe_amp * std::sin(s.lobes * theta + s.lobe_phase) +
                                       s.spike_amp * std::sin(2.0 * s.lobes * theta + s.spike_phase));
    const double t = std::clamp((edge - d) / 0.7 + 0.5, 0.0, 1.0);
    return s.contrast * t;
}

// Footprint: pixels raised above 5% of the lesion contrast.
inline bool lesion_covers(const Lesion& lesion, double x, double y) {
    return lesion_value(lesion, x, y) > 0.05 * lesion.shape.contrast;
}

/// Binary mask (1, H, W) of the lesion footprint.
inline Tensor lesion_mask(const Lesion& lesion, std::size_t height, std::size_t width) {
    Tensor mask({1, height, width});
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            mask.at(0, y, x) = lesion_covers(lesion, static_cast<double>(x), static_cast<double>(y)) ? 1.0f : 0.0f;
    return mask;
}

namespace detail {

// Box-filtered Gaussian texture; border pixels average their in-bounds neighbours.
inline std::vector<double> texture(std::size_t h, std::size_t w, double sigma, CounterRng& rng) {
    std::vector<double> raw(h * w), out(h * w);
    for (auto& v : raw) v = sigma * rng.normal();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                    s += raw[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                    ++n;
                }
            out[y * w + x] = s / n;
        }
    return out;
}

inline void add_lesion(Tensor& img, const Lesion& lesion) {
    const std::size_t h = img.dim(1), w = img.dim(2);
    const double reach = lesion.shape.radius_px * 2.0 + 2.0;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(lesion.cy - reach)));
    const auto y1 = static_cast<std::size_t>(std::clamp(std::ceil(lesion.cy + reach), 0.0, static_cast<double>(h - 1)));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(lesion.cx - reach)));
    const auto x1 = static_cast<std::size_t>(std::clamp(std::ceil(lesion.cx + reach), 0.0, static_cast<double>(w - 1)));
    for (std::size_t y = y0; y <= y1 && y < h; ++y)
        for (std::size_t x = x0; x <= x1 && x < w; ++x)
            img.at(0, y, x) += static_cast<float>(lesion_value(lesion, static_cast<double>(x), static_cast<double>(y)));
}

inline LesionShape malignant_shape(double radius_px, double contrast, CounterRng& rng) {
    LesionShape s;
    s.kind = LesionKind::Malignant;
    s.radius_px = radius_px;
    s.contrast = contrast;
    s.lobes = 3 + static_cast<int>(rng.below(4));
    s.lobe_amp = rng.uniform(0.1, 0.3);
    s.lobe_phase = rng.uniform(0, 2 * M_PI);
    s.spike_amp = rng.uniform(0.05, 0.15);
    s.spike_phase = rng.uniform(0, 2 * M_PI);
    return s;
}

inline LesionShape benign_shape(double radius_px, double contrast, CounterRng& rng) {
    LesionShape s;
    s.kind = LesionKind::Benign;
    s.radius_px = radius_px;
    s.contrast = contrast;
    s.aspect = rng.uniform(0.7, 1.0);
    s.angle = rng.uniform(0, M_PI);
    return s;
}

// Half-ellipse breast against the chest wall (left edge for L, right for R),
// off-centre vertically; MLO views add a bright pectoral wedge at the top.
struct Anatomy {
    double cy, a, b;
    bool chest_left;
    bool mlo;
    double pectoral;
};

inline double breast_mask(const Anatomy& an, std::size_t w, double x, double y) {
    const double ex = an.chest_left ? x : static_cast<double>(w - 1) - x;
    const double r = std::sqrt((ex / an.a) * (ex / an.a) + ((y - an.cy) / an.b) * ((y - an.cy) / an.b));
    return std::clamp((1.0 - r) * 12.0, 0.0, 1.0);
}

inline Anatomy random_anatomy(std::size_t S, Laterality lat, View view, CounterRng& rng) {
    const double s = static_cast<double>(S);
    return Anatomy{s * rng.uniform(0.40, 0.60), s * rng.uniform(0.70, 0.90), s * rng.uniform(0.40, 0.47),
                   lat == Laterality::Left, view == View::MLO, rng.uniform(0.25, 0.4)};
}

inline Tensor render_view(std::size_t S, const Anatomy& an, double level, double sigma, CounterRng& rng) {
    const auto tex = texture(S, S, sigma, rng);
    Tensor img({1, S, S});
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double m = breast_mask(an, S, static_cast<double>(x), static_cast<double>(y));
            double v = m * (level + tex[y * S + x]);
            if (an.mlo) {
                // Pectoral wedge: triangle at the chest wall in the top rows.
                const double ex = an.chest_left ? static_cast<double>(x) : static_cast<double>(S - 1 - x);
                const double depth =
                    an.pectoral * static_cast<double>(S) * (1.0 - static_cast<double>(y) / (0.6 * static_cast<double>(S)));
                if (ex < depth) v += 0.25 * m;
            }
            img.at(0, y, x) = static_cast<float>(v);
        }
    return img;
}

// Centre inside the breast, away from the skin line.
inline void place_lesion(Lesion& lesion, const Anatomy& an, std::size_t S, CounterRng& rng) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        const double ex = rng.uniform(0.1, 0.6) * an.a;
        lesion.cx = an.chest_left ? ex : static_cast<double>(S - 1) - ex;
        lesion.cy = an.cy + rng.uniform(-0.6, 0.6) * an.b;
        if (breast_mask(an, S, lesion.cx, lesion.cy) >= 1.0) break;
    }
}

}  // namespace detail

struct LabeledPatch {
    Tensor image;
    int label = 0;
    std::optional<Lesion> lesion;
};

/// Positives first (n_pos), then negatives; sample i depends only on (seed, class, i).
/// Negatives are centred anywhere on breast tissue, so edges and the pectoral
/// wedge appear as background.
inline std::vector<LabeledPatch> gen_patch_dataset(std::size_t n_pos, std::size_t n_neg, std::size_t patch_size,
                                                   const NoiseConfig& noise, std::uint64_t seed) {
    require(patch_size >= 4, ErrorCode::InvalidArgument, "patch size must be at least 4");
    const std::size_t S = noise.source_size;
    require(S >= patch_size, ErrorCode::InvalidArgument, "patch source images must be at least the patch size");
    const auto& rc = noise.tissue;
    std::vector<LabeledPatch> out;
    out.reserve(n_pos + n_neg);
    for (std::size_t cls : {1u, 0u}) {
        const std::size_t n = cls ? n_pos : n_neg;
        for (std::size_t i = 0; i < n; ++i) {
            CounterRng rng(derive_seed(seed, "synth.patch", {cls, i}));
            const bool dense = rng.bernoulli(rc.dense_fraction);
            const auto lat = rng.bernoulli(0.5) ? Laterality::Left : Laterality::Right;
            const auto view = rng.bernoulli(0.5) ? View::CC : View::MLO;
            const auto an = detail::random_anatomy(S, lat, view, rng);
            auto img = detail::render_view(S, an, dense ? rc.dense_tissue_level : rc.tissue_level,
                                           rc.texture_sigma * (dense ? rc.dense_texture_gain : 1.0), rng);
            double cx = 0, cy = 0;
            std::optional<Lesion> lesion;
            if (cls) {
                const double radius = std::min(rng.uniform(noise.lesion_diameter_lo, noise.lesion_diameter_hi) / 2,
                                               rc.max_radius_fraction * static_cast<double>(S));
                Lesion l{detail::malignant_shape(radius, rng.uniform(noise.contrast_lo, noise.contrast_hi), rng), 0, 0};
                detail::place_lesion(l, an, S, rng);
                detail::add_lesion(img, l);
                const double jitter = static_cast<double>(patch_size) / 8;
                cx = l.cx + rng.uniform(-jitter, jitter);
                cy = l.cy + rng.uniform(-jitter, jitter);
                lesion = l;
            } else {
                for (int attempt = 0; attempt < 200; ++attempt) {
                    cx = rng.uniform(0, static_cast<double>(S - 1));
                    cy = rng.uniform(0, static_cast<double>(S - 1));
                    if (detail::breast_mask(an, S, cx, cy) > 0) break;
                }
            }
            const double half = static_cast<double>(patch_size) / 2;
            const auto x0 = static_cast<std::size_t>(std::clamp(std::round(cx - half), 0.0, static_cast<double>(S - patch_size)));
            const auto y0 = static_cast<std::size_t>(std::clamp(std::round(cy - half), 0.0, static_cast<double>(S - patch_size)));
            LabeledPatch p{Tensor({1, patch_size, patch_size}), static_cast<int>(cls), std::nullopt};
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x) p.image.at(0, y, x) = img.at(0, y0 + y, x0 + x);
            if (lesion) {
                lesion->cx -= static_cast<double>(x0);
                lesion->cy -= static_cast<double>(y0);
                p.lesion = lesion;
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

struct StudyRecord {
    std::string study_id;
    std::array<Tensor, 4> images;                 // indexed by image_index()
    std::array<std::optional<Lesion>, 4> lesions; // rendered lesion per image, if any
    Label label = Label::Normal;
    std::optional<Laterality> lesion_laterality;  // benign and cancer
    std::optional<double> tumor_size_mm;          // cancer only
    std::map<std::string, std::string> tags;

    const Tensor& image(Laterality l, View v) const { return images[image_index(l, v)]; }
    std::optional<Laterality> cancer_laterality() const {
        return label == Label::Cancer ? lesion_laterality : std::nullopt;
    }
};

struct StudyCorpusConfig {
    std::size_t n_normal = 0, n_benign = 0, n_cancer = 0;
    std::size_t image_size = 128;
    SizeDistribution size_dist;
    std::uint64_t seed = 0;
    RenderConfig render;
};

inline std::string study_id_for(std::uint64_t key) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "s%012llx", static_cast<unsigned long long>(key & 0xFFFFFFFFFFFFULL));
    return buf;
}

/// One study; pure in (config.seed, label, index).
inline StudyRecord gen_study(const StudyCorpusConfig& cfg, Label label, std::size_t index) {
    const std::size_t S = cfg.image_size;
    const auto& rc = cfg.render;
    const auto key = derive_seed(cfg.seed, "synth.study", {static_cast<std::uint64_t>(label), index});
    CounterRng rng(key);
    StudyRecord rec;
    rec.study_id = study_id_for(key);
    rec.label = label;
    const bool dense = rng.bernoulli(rc.dense_fraction);
    rec.tags["density"] = dense ? "dense" : "nondense";
    const double scale = static_cast<double>(S) / 128.0;
    const double max_radius = rc.max_radius_fraction * static_cast<double>(S);

    std::optional<LesionShape> shape;
    if (label != Label::Normal) {
        rec.lesion_laterality = rng.bernoulli(0.5) ? Laterality::Left : Laterality::Right;
        rec.tags["lesion_laterality"] = to_string(*rec.lesion_laterality);
        if (label == Label::Cancer) {
            rec.tumor_size_mm = cfg.size_dist.sample(rng);
            const double r = std::clamp(*rec.tumor_size_mm * rc.mm_to_px * scale / 2, 1.5, max_radius);
            shape = detail::malignant_shape(r, rng.uniform(rc.cancer_contrast_lo, rc.cancer_contrast_hi), rng);
        } else {
            const double mm = rng.uniform(rc.benign_size_lo_mm, rc.benign_size_hi_mm);
            const double r = std::clamp(mm * rc.mm_to_px * scale / 2, 1.5, max_radius);
            shape = detail::benign_shape(r, rng.uniform(rc.benign_contrast_lo, rc.benign_contrast_hi), rng);
        }
    }

    const double level = dense ? rc.dense_tissue_level : rc.tissue_level;
    const double sigma = rc.texture_sigma * (dense ? rc.dense_texture_gain : 1.0);
    for (auto lat : kLateralities)
        for (auto view : kViews) {
            const auto idx = image_index(lat, view);
            CounterRng irng(derive_seed(key, "synth.image", {idx}));
            const auto an = detail::random_anatomy(S, lat, view, irng);
            auto img = detail::render_view(S, an, level, sigma, irng);
            if (shape && lat == *rec.lesion_laterality) {
                Lesion lesion{*shape, 0, 0};
                detail::place_lesion(lesion, an, S, irng);
                detail::add_lesion(img, lesion);
                rec.lesions[idx] = lesion;
            }
            rec.images[idx] = std::move(img);
        }
    return rec;
}

/// Normals, then benigns, then cancers.
inline std::vector<StudyRecord> gen_study_corpus(const StudyCorpusConfig& cfg) {
    require(cfg.n_normal + cfg.n_benign + cfg.n_cancer > 0, ErrorCode::InvalidArgument,
            "study corpus must contain at least one study");
    require(cfg.image_size >= 16, ErrorCode::InvalidArgument, "image size must be at least 16");
    if (cfg.n_cancer > 0) cfg.size_dist.validate();
    std::vector<StudyRecord> out;
    out.reserve(cfg.n_normal + cfg.n_benign + cfg.n_cancer);
    for (std::size_t i = 0; i < cfg.n_normal; ++i) out.push_back(gen_study(cfg, Label::Normal, i));
    for (std::size_t i = 0; i < cfg.n_benign; ++i) out.push_back(gen_study(cfg, Label::Benign, i));
    for (std::size_t i = 0; i < cfg.n_cancer; ++i) out.push_back(gen_study(cfg, Label::Cancer, i));
    return out;
}

inline std::vector<StudyRecord> gen_study_corpus(std::size_t n_normal, std::size_t n_benign, std::size_t n_cancer,
                                                 std::size_t image_size, const SizeDistribution& size_dist,
                                                 std::uint64_t seed) {
    StudyCorpusConfig cfg;
    cfg.n_normal = n_normal;
    cfg.n_benign = n_benign;
    cfg.n_cancer = n_cancer;
    cfg.image_size = image_size;
    cfg.size_dist = size_dist;
    cfg.seed = seed;
    return gen_study_corpus(cfg);
}

}  // namespace triage::synth
