#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ditguide/common.hpp"
#include "ditguide/rng.hpp"
#include "ditguide/tokenizer.hpp"

// Procedural similar-subject scenes: flat shapes stamped onto a dark
// background, captioned "a X and a Y [and a Z ...]". Classes come in
// visually similar families so that multi-subject prompts within a
// family are genuinely confusable.

namespace ditguide {

struct SubjectTruth {
    std::string shape_class;
    int center_y = 0;
    int center_x = 0;
    int size = 0;  // stencil window side
};

struct ToyImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;  // row-major [h][w][c], values in [0,1]
    std::vector<SubjectTruth> subject_truth;

    float at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Stencil window side. Shapes are defined analytically on this window
// at a fixed canonical size; only position and intensity vary.
inline constexpr int kStencilSide = 13;

namespace shapes {

// dx, dy in [-6, 6] relative to the stencil center.
inline bool inside(const std::string& cls, int dx, int dy) {
    const double x = dx, y = dy;
    if (cls == "circle") return x * x + y * y <= 5.0 * 5.0;
    if (cls == "ellipse") return (x * x) / (6.0 * 6.0) + (y * y) / (3.4 * 3.4) <= 1.0;
    if (cls == "ring") {
        const double r2 = x * x + y * y;
        return r2 <= 5.6 * 5.6 && r2 >= 3.0 * 3.0;
    }
    if (cls == "crescent") {
        const double r2 = x * x + y * y;
        const double ox = x - 2.6;
        return r2 <= 5.2 * 5.2 && ox * ox + y * y > 4.4 * 4.4;
    }
    if (cls == "square") return std::abs(x) <= 4.5 && std::abs(y) <= 4.5;
    if (cls == "rectangle") return std::abs(x) <= 6.0 && std::abs(y) <= 3.0;
    if (cls == "diamond") return std::abs(x) + std::abs(y) <= 5.8;
    if (cls == "trapezoid")
        return y >= -4.0 && y <= 4.0 && std::abs(x) <= 2.4 + (y + 4.0) * 0.45;
    if (cls == "triangle") return y >= -5.0 && y <= 4.0 && std::abs(x) <= (y + 5.0) * 0.62;
    if (cls == "wedge") return y >= -5.0 && y <= 4.0 && x >= -4.5 && x <= -4.5 + (y + 5.0) * 1.05;
    if (cls == "chevron")
        return std::abs(x) <= 5.5 && y >= std::abs(x) * 0.8 - 4.5 && y <= std::abs(x) * 0.8 - 1.0;
    if (cls == "arrow") {
        if (y >= -5.0 && y < 0.0 && std::abs(x) <= (y + 5.0) * 0.9) return true;
        return y >= 0.0 && y <= 5.0 && std::abs(x) <= 1.4;
    }
    throw Error("shapes: unknown class '" + cls + "'");
}

inline MaskGrid stencil(const std::string& cls) {
    MaskGrid m(kStencilSide, kStencilSide);
    const int half = kStencilSide / 2;
    for (int r = 0; r < kStencilSide; ++r) {
        for (int c = 0; c < kStencilSide; ++c) {
            m.at(r, c) = inside(cls, c - half, r - half) ? 1 : 0;
        }
    }
    return m;
}

}  // namespace shapes

struct DatasetConfig {
    int image_side = 32;
    int channels = 3;
    // Three families of four; any subset of a family is a
    // similar-subject combination.
    std::vector<std::vector<std::string>> families = {
        {"circle", "ellipse", "ring", "crescent"},
        {"square", "rectangle", "diamond", "trapezoid"},
        {"triangle", "wedge", "chevron", "arrow"},
    };
    int min_subjects = 2;
    int max_subjects = 3;
    double max_overlap_fraction = 0.05;  // of the smaller shape's pixel count
    int placement_retries = 64;          // per subject, then whole-scene restarts
    int scene_retries = 32;
    double background = 0.08;
    double foreground_low = 0.85;
    double foreground_high = 1.0;

    std::vector<std::string> all_classes() const {
        std::vector<std::string> out;
        for (const auto& fam : families)
            for (const auto& c : fam) out.push_back(c);
        return out;
    }

    std::vector<std::string> caption_words() const {
        std::vector<std::string> out = {"a", "and"};
        for (const auto& c : all_classes()) out.push_back(c);
        return out;
    }

    void validate() const {
        if (image_side <= kStencilSide) throw Error("dataset: image_side too small for stencils");
        if (all_classes().size() < 6) throw Error("dataset: need at least 6 shape classes");
        if (min_subjects < 1 || max_subjects < min_subjects)
            throw Error("dataset: bad subject count range");
    }
};

inline std::string make_caption(const std::vector<std::string>& subjects) {
    std::string caption;
    for (size_t i = 0; i < subjects.size(); ++i) {
        if (i > 0) caption += " and ";
        caption += "a " + subjects[i];
    }
    return caption;
}

struct ToySample {
    ToyImage image;
    std::string caption;
    TokenizedPrompt prompt;
};

namespace detail_dataset {

struct Placement {
    int cy, cx;
    MaskGrid mask;  // stencil
};

inline int overlap_pixels(const Placement& a, const Placement& b) {
    // stencils are the same size; work in image coordinates
    int count = 0;
    const int half = kStencilSide / 2;
    for (int r = 0; r < kStencilSide; ++r) {
        for (int c = 0; c < kStencilSide; ++c) {
            if (!a.mask.at(r, c)) continue;
            const int iy = a.cy - half + r;
            const int ix = a.cx - half + c;
            const int br = iy - (b.cy - half);
            const int bc = ix - (b.cx - half);
            if (br < 0 || br >= kStencilSide || bc < 0 || bc >= kStencilSide) continue;
            if (b.mask.at(br, bc)) ++count;
        }
    }
    return count;
}

}  // namespace detail_dataset

// Renders the listed subjects at the given placements. Used by the
// generator and by the detector's calibration path.
inline ToyImage render_scene(const std::vector<std::string>& classes,
                             const std::vector<std::pair<int, int>>& centers,
                             const std::vector<double>& intensities,
                             const DatasetConfig& cfg) {
    ToyImage img;
    img.height = cfg.image_side;
    img.width = cfg.image_side;
    img.channels = cfg.channels;
    img.pixels.assign(static_cast<size_t>(cfg.image_side) * cfg.image_side * cfg.channels,
                      static_cast<float>(cfg.background));
    const int half = kStencilSide / 2;
    for (size_t s = 0; s < classes.size(); ++s) {
        const MaskGrid st = shapes::stencil(classes[s]);
        const auto [cy, cx] = centers[s];
        for (int r = 0; r < kStencilSide; ++r) {
            for (int c = 0; c < kStencilSide; ++c) {
                if (!st.at(r, c)) continue;
                const int iy = cy - half + r;
                const int ix = cx - half + c;
                if (iy < 0 || iy >= img.height || ix < 0 || ix >= img.width) continue;
                for (int ch = 0; ch < img.channels; ++ch) {
                    img.at(iy, ix, ch) = std::max(img.at(iy, ix, ch),
                                                  static_cast<float>(intensities[s]));
                }
            }
        }
        img.subject_truth.push_back({classes[s], cy, cx, kStencilSide});
    }
    return img;
}

// Deterministic in (seed, config). Subjects are distinct classes with a
// bias toward same-family pairs so similar-subject scenes are common in
// training.
inline ToySample generate_toy_sample(uint64_t seed, const DatasetConfig& cfg,
                                     const TokenizerTables& tables) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0xda7a));
    const auto classes = cfg.all_classes();

    const int n = cfg.min_subjects + rng.below_int(cfg.max_subjects - cfg.min_subjects + 1);

    // Half the scenes draw all subjects from one family.
    std::vector<std::string> picked;
    const bool same_family = rng.uniform() < 0.5;
    if (same_family) {
        const auto& fam = cfg.families[rng.below_int(static_cast<int>(cfg.families.size()))];
        std::vector<int> idx(fam.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        for (int i = 0; i < n && i < static_cast<int>(fam.size()); ++i) {
            const int j = i + rng.below_int(static_cast<int>(idx.size()) - i);
            std::swap(idx[i], idx[j]);
            picked.push_back(fam[static_cast<size_t>(idx[i])]);
        }
    }
    while (static_cast<int>(picked.size()) < n) {
        const auto& c = classes[static_cast<size_t>(rng.below_int(static_cast<int>(classes.size())))];
        bool dup = false;
        for (const auto& p : picked) dup |= p == c;
        if (!dup) picked.push_back(c);
    }

    const int half = kStencilSide / 2;
    const int lo = half;
    const int hi = cfg.image_side - 1 - half;

    std::vector<detail_dataset::Placement> placements;
    bool placed_all = false;
    for (int attempt = 0; attempt < cfg.scene_retries && !placed_all; ++attempt) {
        placements.clear();
        placed_all = true;
        for (const auto& cls : picked) {
            detail_dataset::Placement p{0, 0, shapes::stencil(cls)};
            const int area = p.mask.count();
            bool ok = false;
            for (int retry = 0; retry < cfg.placement_retries; ++retry) {
                p.cy = lo + rng.below_int(hi - lo + 1);
                p.cx = lo + rng.below_int(hi - lo + 1);
                ok = true;
                for (const auto& q : placements) {
                    const int inter = detail_dataset::overlap_pixels(p, q);
                    const int smaller = std::min(area, q.mask.count());
                    if (inter > cfg.max_overlap_fraction * smaller) {
                        ok = false;
                        break;
                    }
                }
                if (ok) break;
            }
            if (!ok) {
                placed_all = false;
                break;
            }
            placements.push_back(std::move(p));
        }
    }
    if (!placed_all) {
        throw Error("generate_toy_sample: placement failed for seed " + std::to_string(seed));
    }

    std::vector<std::pair<int, int>> centers;
    std::vector<double> intensities;
    for (const auto& p : placements) {
        centers.emplace_back(p.cy, p.cx);
        intensities.push_back(rng.uniform(cfg.foreground_low, cfg.foreground_high));
    }

    ToySample sample;
    sample.image = render_scene(picked, centers, intensities, cfg);
    sample.caption = make_caption(picked);
    sample.prompt = tokenize_prompt(sample.caption, picked, tables);
    return sample;
}

}  // namespace ditguide
