#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ditguide/attention.hpp"
#include "ditguide/common.hpp"
#include "ditguide/tensor.hpp"

// The guidance losses: block alignment, text-encoder alignment,
// overlap, their weighted combination, and the conflict-mask
// restriction loss. All are differentiable scalar functions of the
// word-level attention maps.

namespace ditguide {

enum class NormalizeMode { Max, MinMax };

struct IterRange {
    int first_step = 0;
    int last_step = 0;
    int iterations = 0;
};

struct GuidanceConfig {
    double lambda_ba = 1.0;
    double lambda_ta = 0.2;
    double lambda_ol = 0.001;
    double alpha = 30.0;  // latent update scale, constant across steps

    BlockRange early_range{5, 8};
    BlockRange late_range{9, 12};
    BlockRange full_range{5, 12};

    double binarize_threshold = 0.2;
    double detect_threshold = 0.2;
    int detect_step = 5;  // O: overlap online detection step

    int total_steps = 28;       // T
    int optimize_first = 1;     // latent updates only inside this step window
    int optimize_last = 14;
    std::vector<IterRange> iteration_schedule = {
        {1, 2, 1}, {3, 5, 15}, {6, 14, 1}, {15, 28, 0}};

    double guidance_scale = 7.0;

    // How the hatted maps of the overlap loss are normalized. Kept
    // configurable to allow A/B runs; Max is the default reading.
    NormalizeMode overlap_normalize = NormalizeMode::Max;

    void validate(int num_blocks) const {
        if (lambda_ba < 0 || lambda_ta < 0 || lambda_ol < 0) {
            throw Error("guidance: loss weights must be nonnegative");
        }
        if (binarize_threshold <= 0 || binarize_threshold >= 1 || detect_threshold <= 0 ||
            detect_threshold >= 1) {
            throw Error("guidance: thresholds must lie in (0,1)");
        }
        for (const BlockRange* r : {&early_range, &late_range, &full_range}) {
            if (r->lo < 1 || r->hi > num_blocks || r->lo > r->hi) {
                throw Error("guidance: block range outside model depth");
            }
        }
        if (detect_step < 1 || detect_step > optimize_last) {
            throw Error("guidance: detection step must lie within the optimized steps");
        }
        if (optimize_first < 1 || optimize_last > total_steps || optimize_first > optimize_last) {
            throw Error("guidance: bad optimization window");
        }
        if (total_steps < 1) throw Error("guidance: total_steps must be positive");
    }
};

struct LossReport {
    double l_ba = 0.0;
    double l_ta = 0.0;
    double l_ol = 0.0;
    double l_res = 0.0;
    double l_amb = 0.0;
    double l_total = 0.0;
    bool res_evaluated = false;

    bool finite() const {
        return std::isfinite(l_ba) && std::isfinite(l_ta) && std::isfinite(l_ol) &&
               std::isfinite(l_res) && std::isfinite(l_amb) && std::isfinite(l_total);
    }
};

namespace detail_loss {

template <typename T>
double value_norm(const Tensor<T>& m) {
    double s = 0.0;
    for (T x : m.values()) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

}  // namespace detail_loss

// Cosine similarity of the flattened maps. A zero-norm input is
// defined as similarity 0 (with a warning) instead of dividing by
// zero.
template <typename T>
Tensor<T> cosine(const Tensor<T>& p, const Tensor<T>& q, WarningSink* warnings = nullptr) {
    if (p.numel() != q.numel()) throw Error("cosine: shape mismatch");
    if (detail_loss::value_norm(p) == 0.0 || detail_loss::value_norm(q) == 0.0) {
        warn(warnings, "cosine: zero-norm map, similarity defined as 0");
        return Tensor<T>::scalar(T(0));
    }
    Tensor<T> num = dot_all(p, q);
    Tensor<T> den = mul(sqrt_t(dot_all(p, p)), sqrt_t(dot_all(q, q)));
    return div(num, den);
}

// (1/2N) sum_i [(1 - cos(early_a, late_a*)) + (1 - cos(early_b, late_b*))]
// where * marks the detached late-range mean: the late blocks act as a
// fixed target and receive no gradient.
template <typename T>
Tensor<T> block_alignment_loss(const WordAttention<T>& wa, const GuidanceConfig& cfg,
                               WarningSink* warnings = nullptr) {
    const int n = wa.num_subjects();
    if (n < 1) throw Error("block_alignment_loss: need at least one subject");
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (int i = 0; i < n; ++i) {
        for (EncoderId enc : {EncoderId::A, EncoderId::B}) {
            Tensor<T> early = range_mean(wa, i, enc, cfg.early_range);
            Tensor<T> late = detach(range_mean(wa, i, enc, cfg.late_range));
            Tensor<T> c = cosine(early, late, warnings);
            acc = add(acc, add_const(scale(c, T(-1)), T(1)));
        }
    }
    return scale(acc, T(1.0 / (2.0 * n)));
}

// (1/N) sum_i (1 - cos(late_a, late_b)); both encoders stay live.
template <typename T>
Tensor<T> text_encoder_alignment_loss(const WordAttention<T>& wa, const GuidanceConfig& cfg,
                                      WarningSink* warnings = nullptr) {
    const int n = wa.num_subjects();
    if (n < 1) throw Error("text_encoder_alignment_loss: need at least one subject");
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (int i = 0; i < n; ++i) {
        Tensor<T> a = range_mean(wa, i, EncoderId::A, cfg.late_range);
        Tensor<T> b = range_mean(wa, i, EncoderId::B, cfg.late_range);
        Tensor<T> c = cosine(a, b, warnings);
        acc = add(acc, add_const(scale(c, T(-1)), T(1)));
    }
    return scale(acc, T(1.0 / n));
}

// Max mode: map / max(map). MinMax mode: (map - min) / (max - min).
// Degenerate inputs (flat or all-zero) normalize to all-zero, except a
// flat positive map under Max which becomes all-ones.
template <typename T>
Tensor<T> normalize_map(const Tensor<T>& map, NormalizeMode mode) {
    const auto& v = map.values();
    double mx = -1e300, mn = 1e300;
    for (T x : v) {
        mx = std::max(mx, static_cast<double>(x));
        mn = std::min(mn, static_cast<double>(x));
    }
    if (mode == NormalizeMode::Max) {
        if (mx == 0.0) return Tensor<T>::zeros(map.shape());
        return div_bcast(map, max_all(map));
    }
    if (mx == mn) return Tensor<T>::zeros(map.shape());
    Tensor<T> mxt = max_all(map);
    Tensor<T> mnt = min_all(map);
    return div_bcast(sub_bcast(map, mnt), sub(mxt, mnt));
}

// Sum over unordered subject pairs of the four cross-encoder inner
// products of normalized late-range maps. Zero when fewer than two
// subjects.
template <typename T>
Tensor<T> overlap_loss(const WordAttention<T>& wa, const GuidanceConfig& cfg,
                       WarningSink* warnings = nullptr) {
    (void)warnings;
    const int n = wa.num_subjects();
    if (n < 2) return Tensor<T>::scalar(T(0));
    std::vector<Tensor<T>> norm_a(static_cast<size_t>(n)), norm_b(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        norm_a[(size_t)i] = normalize_map(range_mean(wa, i, EncoderId::A, cfg.late_range),
                                          cfg.overlap_normalize);
        norm_b[(size_t)i] = normalize_map(range_mean(wa, i, EncoderId::B, cfg.late_range),
                                          cfg.overlap_normalize);
    }
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            acc = add(acc, dot_all(norm_a[(size_t)i], norm_a[(size_t)j]));
            acc = add(acc, dot_all(norm_b[(size_t)i], norm_b[(size_t)j]));
            acc = add(acc, dot_all(norm_a[(size_t)i], norm_b[(size_t)j]));
            acc = add(acc, dot_all(norm_b[(size_t)i], norm_a[(size_t)j]));
        }
    }
    return acc;
}

// The most ambiguous subject and the region it is penalized for
// occupying, as decided by overlap online detection.
struct ConflictContext {
    int i_star = 0;
    MaskGrid mask;
};

// Half the sum over encoders of (attention mass inside the conflict
// mask / total attention mass), full block range, subject i_star only.
template <typename T>
Tensor<T> restriction_loss(const WordAttention<T>& wa, const ConflictContext& conflict,
                           const GuidanceConfig& cfg, WarningSink* warnings = nullptr) {
    if (conflict.mask.count() < 1) throw Error("restriction_loss: conflict mask is empty");
    if (conflict.i_star < 0 || conflict.i_star >= wa.num_subjects()) {
        throw Error("restriction_loss: subject index out of range");
    }
    std::vector<T> mv(conflict.mask.v.begin(), conflict.mask.v.end());
    Tensor<T> mask = Tensor<T>::leaf(std::move(mv), {conflict.mask.h, conflict.mask.w});
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (EncoderId enc : {EncoderId::A, EncoderId::B}) {
        Tensor<T> full = range_mean(wa, conflict.i_star, enc, cfg.full_range);
        double total = 0.0;
        for (T x : full.values()) total += static_cast<double>(x);
        if (total == 0.0) {
            warn(warnings, "restriction_loss: subject attention mass is zero");
            continue;
        }
        acc = add(acc, div(dot_all(full, mask), sum_all(full)));
    }
    return scale(acc, T(0.5));
}

// The scalar side of Eq.-style combination; combined_loss's graph uses
// the same association, so the report matches this bit for bit.
inline double weighted_ambiguity(const GuidanceConfig& cfg, double l_ba, double l_ta, double l_ol) {
    return (l_ba * cfg.lambda_ba + l_ta * cfg.lambda_ta) + l_ol * cfg.lambda_ol;
}

template <typename T>
struct CombinedLoss {
    Tensor<T> total;
    LossReport report;
};

// l_amb = lambda_ba*l_ba + lambda_ta*l_ta + lambda_ol*l_ol;
// l_total = l_amb + l_res (l_res only when a conflict context exists).
template <typename T>
CombinedLoss<T> combined_loss(const WordAttention<T>& wa,
                              const std::optional<ConflictContext>& conflict,
                              const GuidanceConfig& cfg, WarningSink* warnings = nullptr) {
    CombinedLoss<T> out;
    Tensor<T> ba = block_alignment_loss(wa, cfg, warnings);
    Tensor<T> ta = text_encoder_alignment_loss(wa, cfg, warnings);
    Tensor<T> ol = overlap_loss(wa, cfg, warnings);
    Tensor<T> amb = add(add(scale(ba, static_cast<T>(cfg.lambda_ba)),
                            scale(ta, static_cast<T>(cfg.lambda_ta))),
                        scale(ol, static_cast<T>(cfg.lambda_ol)));
    out.report.l_ba = static_cast<double>(ba.item());
    out.report.l_ta = static_cast<double>(ta.item());
    out.report.l_ol = static_cast<double>(ol.item());
    out.report.l_amb = static_cast<double>(amb.item());
    if (conflict.has_value()) {
        Tensor<T> res = restriction_loss(wa, *conflict, cfg, warnings);
        out.report.l_res = static_cast<double>(res.item());
        out.report.res_evaluated = true;
        out.total = add(amb, res);
    } else {
        out.total = amb;
    }
    out.report.l_total = static_cast<double>(out.total.item());
    if (!out.report.finite()) {
        throw NumericError("combined_loss: non-finite loss value");
    }
    return out;
}

}  // namespace ditguide
