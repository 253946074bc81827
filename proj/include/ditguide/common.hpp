#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ditguide {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a numeric state goes non-finite (latents, gradients, losses).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what) {}
};

// Thrown on malformed external inputs (prompt files, manifests, configs).
class ParseError : public Error {
public:
    explicit ParseError(const std::string& what) : Error(what) {}
};

template <typename T>
inline bool all_finite(const std::vector<T>& v) {
    for (const T& x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            return false;
        }
    }
    return true;
}

// Non-fatal diagnostics (degenerate cosine inputs, empty masks, ...).
// Callers that care pass a sink; everyone else passes nullptr.
using WarningSink = std::vector<std::string>;

inline void warn(WarningSink* sink, const std::string& msg) {
    if (sink != nullptr) {
        sink->push_back(msg);
    }
}

// Dense 2-D map of plain values, used wherever no gradient is needed
// (saliency maps, masks, heatmaps, detector templates).
struct GridD {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    GridD() = default;
    GridD(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    double& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
    size_t size() const { return v.size(); }
};

struct MaskGrid {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;  // 0 or 1

    MaskGrid() = default;
    MaskGrid(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

    uint8_t& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
    uint8_t at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
    size_t size() const { return v.size(); }
    int count() const {
        int n = 0;
        for (uint8_t x : v) n += x != 0;
        return n;
    }
};

}  // namespace ditguide
