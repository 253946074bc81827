#pragma once

// Plain-double reference implementations used as independent oracles.
// Deliberately written as direct enumeration over indices, with no use
// of the tensor engine, so they can disagree with the production path.

#include <cmath>
#include <vector>

namespace refcalc {

using Map = std::vector<double>;  // flattened spatial map

inline double dot(const Map& a, const Map& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Map& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Map& a, const Map& b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline Map mean_maps(const std::vector<Map>& ms) {
    Map out(ms.at(0).size(), 0.0);
    for (const auto& m : ms)
        for (size_t i = 0; i < m.size(); ++i) out[i] += m[i];
    for (auto& x : out) x /= static_cast<double>(ms.size());
    return out;
}

inline Map max_normalize(const Map& m) {
    double mx = 0;
    for (double x : m) mx = std::max(mx, x);
    Map out(m.size(), 0.0);
    if (mx == 0) return out;
    for (size_t i = 0; i < m.size(); ++i) out[i] = m[i] / mx;
    return out;
}

inline Map minmax_normalize(const Map& m) {
    double mx = -1e300, mn = 1e300;
    for (double x : m) {
        mx = std::max(mx, x);
        mn = std::min(mn, x);
    }
    Map out(m.size(), 0.0);
    if (mx == mn) return out;
    for (size_t i = 0; i < m.size(); ++i) out[i] = (m[i] - mn) / (mx - mn);
    return out;
}

// Per-token cross map from raw joint-attention portions:
// i2t[head][img][txt], t2i[head][txt][img]. Heads averaged first, then
// the two slices averaged.
inline std::vector<Map> token_maps(const std::vector<std::vector<std::vector<double>>>& i2t,
                                   const std::vector<std::vector<std::vector<double>>>& t2i) {
    const size_t heads = i2t.size();
    const size_t n_img = i2t[0].size();
    const size_t n_txt = i2t[0][0].size();
    std::vector<Map> out(n_txt, Map(n_img, 0.0));
    for (size_t k = 0; k < n_txt; ++k) {
        for (size_t p = 0; p < n_img; ++p) {
            double col = 0, row = 0;
            for (size_t h = 0; h < heads; ++h) {
                col += i2t[h][p][k];
                row += t2i[h][k][p];
            }
            col /= static_cast<double>(heads);
            row /= static_cast<double>(heads);
            out[k][p] = 0.5 * (col + row);
        }
    }
    return out;
}

// Brute-force overlap ratio by pixel enumeration.
inline double overlap_ratio(const std::vector<std::vector<int>>& masks, int i) {
    const auto& mi = masks[(size_t)i];
    int denom = 0, inter = 0;
    for (size_t p = 0; p < mi.size(); ++p) {
        if (!mi[p]) continue;
        ++denom;
        bool any = false;
        for (size_t j = 0; j < masks.size(); ++j) {
            if (j != (size_t)i && masks[j][p]) any = true;
        }
        if (any) ++inter;
    }
    if (denom == 0) return 0.0;
    return static_cast<double>(inter) / denom;
}

inline std::vector<int> conflict_mask(const std::vector<std::vector<int>>& masks, int i_star) {
    std::vector<int> out(masks[(size_t)i_star].size(), 0);
    for (size_t p = 0; p < out.size(); ++p) {
        if (!masks[(size_t)i_star][p]) continue;
        for (size_t j = 0; j < masks.size(); ++j) {
            if (j != (size_t)i_star && masks[j][p]) out[p] = 1;
        }
    }
    return out;
}

}  // namespace refcalc
