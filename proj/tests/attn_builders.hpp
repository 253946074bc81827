#pragma once

// Hand-construction helpers for attention structures in tests.

#include <vector>

#include "ditguide/attention.hpp"
#include "ditguide/rng.hpp"

namespace testutil {

using ditguide::AttentionBundle;
using ditguide::EncoderId;
using ditguide::Rng;
using ditguide::Tensor;
using ditguide::WordAttention;

// Random nonnegative bundle with the given geometry.
inline AttentionBundle<double> random_bundle(int blocks, int heads, int grid, int tokens_a,
                                             int tokens_b, Rng& rng) {
    AttentionBundle<double> b;
    b.grid_h = grid;
    b.grid_w = grid;
    b.tokens_a = tokens_a;
    b.tokens_b = tokens_b;
    const int n_img = grid * grid;
    const int n_txt = tokens_a + tokens_b;
    b.img_to_txt.resize((size_t)blocks);
    b.txt_to_img.resize((size_t)blocks);
    for (int bl = 0; bl < blocks; ++bl) {
        for (int h = 0; h < heads; ++h) {
            std::vector<double> m1((size_t)n_img * n_txt), m2((size_t)n_txt * n_img);
            for (auto& x : m1) x = rng.uniform();
            for (auto& x : m2) x = rng.uniform();
            b.img_to_txt[(size_t)bl].push_back(Tensor<double>::leaf(m1, {n_img, n_txt}));
            b.txt_to_img[(size_t)bl].push_back(Tensor<double>::leaf(m2, {n_txt, n_img}));
        }
    }
    return b;
}

// WordAttention from explicit per-(subject, encoder, block) grids.
// maps[i][e][b] is a flattened grid_h x grid_w map.
inline WordAttention<double> make_word_attention(
    int grid_h, int grid_w, const std::vector<std::array<std::vector<std::vector<double>>, 2>>& maps,
    bool requires_grad = false) {
    WordAttention<double> wa;
    wa.grid_h = grid_h;
    wa.grid_w = grid_w;
    wa.maps.resize(maps.size());
    for (size_t i = 0; i < maps.size(); ++i) {
        wa.subject_words.push_back("s" + std::to_string(i));
        for (int e = 0; e < 2; ++e) {
            for (const auto& m : maps[i][(size_t)e]) {
                wa.maps[i][(size_t)e].push_back(
                    Tensor<double>::leaf(m, {grid_h, grid_w}, requires_grad));
            }
        }
    }
    return wa;
}

}  // namespace testutil
