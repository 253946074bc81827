#pragma once

#include <array>
#include <string>
#include <vector>

#include "ditguide/common.hpp"
#include "ditguide/tensor.hpp"
#include "ditguide/tokenizer.hpp"

// Partitioning of the joint self-attention into its two cross
// portions, and the word / block-range aggregations the guidance
// losses operate on. Everything stays in the autodiff graph so the
// losses are differentiable with respect to the latent that produced
// the bundle.

namespace ditguide {

// Raw per-block, per-head cross-attention portions of the joint
// self-attention. Text tokens are encoder A's followed by encoder B's;
// the boundary index is tokens_a.
template <typename T>
struct AttentionBundle {
    int grid_h = 0;
    int grid_w = 0;
    int tokens_a = 0;
    int tokens_b = 0;
    // [block][head]; blocks are contiguous from 1, stored 0-based.
    std::vector<std::vector<Tensor<T>>> img_to_txt;  // each [n_img, n_txt]
    std::vector<std::vector<Tensor<T>>> txt_to_img;  // each [n_txt, n_img]

    int num_blocks() const { return static_cast<int>(img_to_txt.size()); }
    int heads() const { return img_to_txt.empty() ? 0 : static_cast<int>(img_to_txt[0].size()); }
    int image_tokens() const { return grid_h * grid_w; }
    int text_tokens() const { return tokens_a + tokens_b; }
};

// Per-block spatial maps, one per text token, split at the encoder
// boundary.
template <typename T>
struct CrossMaps {
    int grid_h = 0;
    int grid_w = 0;
    int tokens_a = 0;
    int tokens_b = 0;
    // [block][token], token indices run over A then B; each map [grid_h, grid_w]
    std::vector<std::vector<Tensor<T>>> maps;

    int num_blocks() const { return static_cast<int>(maps.size()); }
};

// For each text token, the mean of (a) its column slice of the
// image->text portion and (b) its row slice of the text->image portion
// placed onto the image grid, heads averaged first.
template <typename T>
CrossMaps<T> extract_cross(const AttentionBundle<T>& bundle) {
    const int n_img = bundle.image_tokens();
    const int n_txt = bundle.text_tokens();
    if (bundle.img_to_txt.size() != bundle.txt_to_img.size()) {
        throw Error("extract_cross: block count mismatch between portions");
    }
    CrossMaps<T> out;
    out.grid_h = bundle.grid_h;
    out.grid_w = bundle.grid_w;
    out.tokens_a = bundle.tokens_a;
    out.tokens_b = bundle.tokens_b;
    out.maps.resize(bundle.img_to_txt.size());
    for (size_t b = 0; b < bundle.img_to_txt.size(); ++b) {
        if (bundle.img_to_txt[b].size() != bundle.txt_to_img[b].size()) {
            throw Error("extract_cross: head count mismatch between portions");
        }
        for (size_t h = 0; h < bundle.img_to_txt[b].size(); ++h) {
            const auto& i2t = bundle.img_to_txt[b][h];
            const auto& t2i = bundle.txt_to_img[b][h];
            if (i2t.dim(0) != n_img || i2t.dim(1) != n_txt || t2i.dim(0) != n_txt ||
                t2i.dim(1) != n_img) {
                throw Error("extract_cross: portion shapes disagree with token counts");
            }
        }
        Tensor<T> i2t = average(bundle.img_to_txt[b]);  // [n_img, n_txt]
        Tensor<T> t2i = average(bundle.txt_to_img[b]);  // [n_txt, n_img]
        out.maps[b].reserve(static_cast<size_t>(n_txt));
        for (int k = 0; k < n_txt; ++k) {
            Tensor<T> col = reshape(slice2d(i2t, 0, n_img, k, k + 1), {bundle.grid_h, bundle.grid_w});
            Tensor<T> row = reshape(slice2d(t2i, k, k + 1, 0, n_img), {bundle.grid_h, bundle.grid_w});
            out.maps[b].push_back(scale(add(col, row), T(0.5)));
        }
    }
    return out;
}

// Word-level spatial attention per subject, encoder, and block.
template <typename T>
struct WordAttention {
    int grid_h = 0;
    int grid_w = 0;
    std::vector<std::string> subject_words;
    // [subject][encoder][block]; blocks contiguous from 1, stored 0-based
    std::vector<std::array<std::vector<Tensor<T>>, 2>> maps;

    int num_subjects() const { return static_cast<int>(maps.size()); }
    int num_blocks() const { return maps.empty() ? 0 : static_cast<int>(maps[0][0].size()); }

    const Tensor<T>& map(int subject, EncoderId enc, int block_1based) const {
        return maps[static_cast<size_t>(subject)][enc == EncoderId::A ? 0 : 1]
                   [static_cast<size_t>(block_1based - 1)];
    }
};

// Per word per encoder per block: the mean over the word's token maps.
template <typename T>
WordAttention<T> word_maps(const CrossMaps<T>& cross, const TokenizedPrompt& prompt) {
    WordAttention<T> out;
    out.grid_h = cross.grid_h;
    out.grid_w = cross.grid_w;
    out.subject_words = prompt.subject_words;
    out.maps.resize(static_cast<size_t>(prompt.num_subjects()));
    for (int i = 0; i < prompt.num_subjects(); ++i) {
        for (EncoderId enc : {EncoderId::A, EncoderId::B}) {
            const TokenSpan span = prompt.subject_span(i, enc);
            if (span.count() <= 0) {
                throw Error("word_maps: empty span for subject '" + prompt.subject_words[(size_t)i] +
                            "' under encoder " + (enc == EncoderId::A ? "A" : "B"));
            }
            const int offset = enc == EncoderId::A ? 0 : cross.tokens_a;
            auto& per_block = out.maps[static_cast<size_t>(i)][enc == EncoderId::A ? 0 : 1];
            per_block.reserve(cross.maps.size());
            for (size_t b = 0; b < cross.maps.size(); ++b) {
                std::vector<Tensor<T>> token_maps;
                token_maps.reserve(static_cast<size_t>(span.count()));
                for (int k = span.first; k <= span.last; ++k) {
                    token_maps.push_back(cross.maps[b][static_cast<size_t>(offset + k)]);
                }
                per_block.push_back(average(token_maps));
            }
        }
    }
    return out;
}

// Inclusive 1-based block range.
struct BlockRange {
    int lo = 0;
    int hi = 0;
    bool contains(int b) const { return b >= lo && b <= hi; }
    int count() const { return hi - lo + 1; }
};

// Arithmetic mean over blocks lo..hi of one subject/encoder track.
template <typename T>
Tensor<T> range_mean(const WordAttention<T>& wa, int subject, EncoderId enc, BlockRange range) {
    if (range.lo < 1 || range.hi > wa.num_blocks() || range.lo > range.hi) {
        throw Error("range_mean: block range [" + std::to_string(range.lo) + "," +
                    std::to_string(range.hi) + "] outside available blocks 1.." +
                    std::to_string(wa.num_blocks()));
    }
    std::vector<Tensor<T>> ms;
    ms.reserve(static_cast<size_t>(range.count()));
    for (int b = range.lo; b <= range.hi; ++b) {
        ms.push_back(wa.map(subject, enc, b));
    }
    return average(ms);
}

// Named range mean, as surfaced by the diagnose output.
template <typename T>
struct BlockRangeMap {
    int subject = 0;
    EncoderId encoder = EncoderId::A;
    BlockRange range;
    Tensor<T> map;
};

template <typename T>
BlockRangeMap<T> block_range_map(const WordAttention<T>& wa, int subject, EncoderId enc,
                                 BlockRange range) {
    return BlockRangeMap<T>{subject, enc, range, range_mean(wa, subject, enc, range)};
}

}  // namespace ditguide
