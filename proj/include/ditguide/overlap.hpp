#pragma once

#include <string>
#include <vector>

#include "ditguide/attention.hpp"
#include "ditguide/common.hpp"
#include "ditguide/losses.hpp"

// Overlap online detection: per-subject saliency from both encoders,
// binarization, pairwise overlap ratios, worst-subject selection, and
// the conflict mask handed to the restriction loss.

namespace ditguide {

struct OverlapReport {
    std::vector<std::string> subjects;
    std::vector<GridD> saliency;   // per subject, minmax-normalized
    std::vector<MaskGrid> masks;   // per subject
    std::vector<double> ratios;    // per subject, in [0,1]
    bool conflict = false;         // verdict: conflict vs pass
    int i_star = -1;               // worst subject when conflict, else -1
    MaskGrid conflict_mask;        // nonempty when conflict
};

inline GridD minmax_normalize(const GridD& g) {
    GridD out(g.h, g.w);
    double mx = -1e300, mn = 1e300;
    for (double x : g.v) {
        mx = std::max(mx, x);
        mn = std::min(mn, x);
    }
    if (mx == mn) return out;  // flat map normalizes to all-zero
    for (size_t i = 0; i < g.v.size(); ++i) out.v[i] = (g.v[i] - mn) / (mx - mn);
    return out;
}

// Minmax-normalized mean of the two encoders' late-range maps.
template <typename T>
GridD subject_saliency(const WordAttention<T>& wa, int subject, const GuidanceConfig& cfg) {
    Tensor<T> a = range_mean(wa, subject, EncoderId::A, cfg.late_range);
    Tensor<T> b = range_mean(wa, subject, EncoderId::B, cfg.late_range);
    GridD g(wa.grid_h, wa.grid_w);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < g.v.size(); ++i) {
        g.v[i] = 0.5 * static_cast<double>(av[i]) + 0.5 * static_cast<double>(bv[i]);
    }
    return minmax_normalize(g);
}

// Strict per-pixel comparison: exactly-threshold pixels stay off.
inline MaskGrid binarize(const GridD& map, double threshold) {
    MaskGrid m(map.h, map.w);
    for (size_t i = 0; i < map.v.size(); ++i) m.v[i] = map.v[i] > threshold ? 1 : 0;
    return m;
}

// |M_i intersect union_{j != i} M_j| / |M_i|; 0 for an empty M_i.
inline double overlap_ratio(const std::vector<MaskGrid>& masks, int i,
                            WarningSink* warnings = nullptr) {
    if (masks.size() < 2) throw Error("overlap_ratio: need at least two masks");
    const MaskGrid& mi = masks[static_cast<size_t>(i)];
    for (const auto& m : masks) {
        if (m.h != mi.h || m.w != mi.w) throw Error("overlap_ratio: mask shape mismatch");
    }
    int denom = 0, inter = 0;
    for (size_t p = 0; p < mi.v.size(); ++p) {
        if (!mi.v[p]) continue;
        ++denom;
        for (size_t j = 0; j < masks.size(); ++j) {
            if (j != static_cast<size_t>(i) && masks[j].v[p]) {
                ++inter;
                break;
            }
        }
    }
    if (denom == 0) {
        warn(warnings, "overlap_ratio: subject " + std::to_string(i) + " has an empty mask");
        return 0.0;
    }
    return static_cast<double>(inter) / denom;
}

// Full overlap online detection pass. Verdict is conflict iff any
// ratio strictly exceeds the detection threshold; ties at the argmax
// break toward the lowest subject index.
template <typename T>
OverlapReport detect(const WordAttention<T>& wa, const GuidanceConfig& cfg,
                     WarningSink* warnings = nullptr) {
    const int n = wa.num_subjects();
    if (n < 1) throw Error("detect: need at least one subject");
    OverlapReport rep;
    rep.subjects = wa.subject_words;
    for (int i = 0; i < n; ++i) {
        rep.saliency.push_back(subject_saliency(wa, i, cfg));
        rep.masks.push_back(binarize(rep.saliency.back(), cfg.binarize_threshold));
    }
    if (n == 1) {
        rep.ratios.assign(1, 0.0);  // no other subjects to overlap with
        return rep;
    }
    for (int i = 0; i < n; ++i) {
        rep.ratios.push_back(overlap_ratio(rep.masks, i, warnings));
    }
    int worst = 0;
    for (int i = 1; i < n; ++i) {
        if (rep.ratios[(size_t)i] > rep.ratios[(size_t)worst]) worst = i;
    }
    if (rep.ratios[(size_t)worst] > cfg.detect_threshold) {
        rep.conflict = true;
        rep.i_star = worst;
        rep.conflict_mask = MaskGrid(wa.grid_h, wa.grid_w);
        const MaskGrid& mi = rep.masks[(size_t)worst];
        for (size_t p = 0; p < mi.v.size(); ++p) {
            if (!mi.v[p]) continue;
            for (int j = 0; j < n; ++j) {
                if (j != worst && rep.masks[(size_t)j].v[p]) {
                    rep.conflict_mask.v[p] = 1;
                    break;
                }
            }
        }
    }
    return rep;
}

}  // namespace ditguide
