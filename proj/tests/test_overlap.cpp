#include <doctest.h>

#include "attn_builders.hpp"
#include "ditguide/overlap.hpp"
#include "refcalc.hpp"

using namespace ditguide;
using testutil::make_word_attention;

namespace {

GuidanceConfig one_block_config() {
    GuidanceConfig cfg;
    cfg.early_range = {1, 1};
    cfg.late_range = {1, 1};
    cfg.full_range = {1, 1};
    return cfg;
}

MaskGrid mask_of(int h, int w, std::vector<uint8_t> v) {
    MaskGrid m(h, w);
    m.v = std::move(v);
    return m;
}

}  // namespace

TEST_CASE("subject_saliency: encoder mean then minmax") {
    const GuidanceConfig cfg = one_block_config();
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;

    // identical encoder maps -> minmax of the map itself
    std::vector<SubjectMaps> same(1);
    same[0][0] = {{0.1, 0.4}};
    same[0][1] = {{0.1, 0.4}};
    GridD s = subject_saliency(make_word_attention(1, 2, same), 0, cfg);
    CHECK(s.v[0] == doctest::Approx(0.0));
    CHECK(s.v[1] == doctest::Approx(1.0));

    // late_a=[0.2,0.4], late_b=[0.0,0.4] -> mean [0.1,0.4] -> minmax [0,1]
    std::vector<SubjectMaps> mixed(1);
    mixed[0][0] = {{0.2, 0.4}};
    mixed[0][1] = {{0.0, 0.4}};
    GridD m = subject_saliency(make_word_attention(1, 2, mixed), 0, cfg);
    CHECK(m.v[0] == doctest::Approx(0.0));
    CHECK(m.v[1] == doctest::Approx(1.0));

    // constant map -> all zeros
    std::vector<SubjectMaps> flat(1);
    flat[0][0] = {{0.3, 0.3}};
    flat[0][1] = {{0.3, 0.3}};
    GridD f = subject_saliency(make_word_attention(1, 2, flat), 0, cfg);
    CHECK(f.v[0] == 0.0);
    CHECK(f.v[1] == 0.0);
}

TEST_CASE("binarize: strict threshold") {
    GridD g(1, 3);
    g.v = {0.0, 0.5, 1.0};
    MaskGrid m = binarize(g, 0.2);
    CHECK(m.v == std::vector<uint8_t>{0, 1, 1});

    GridD exact(1, 1);
    exact.v = {0.2};
    CHECK(binarize(exact, 0.2).v[0] == 0);  // strict >

    GridD zeros(2, 2);
    CHECK(binarize(zeros, 0.2).count() == 0);
}

TEST_CASE("overlap_ratio: frozen examples") {
    // disjoint
    CHECK(overlap_ratio({mask_of(1, 4, {1, 1, 0, 0}), mask_of(1, 4, {0, 0, 1, 1})}, 0) == 0.0);
    // identical
    CHECK(overlap_ratio({mask_of(1, 4, {1, 0, 1, 0}), mask_of(1, 4, {1, 0, 1, 0})}, 0) == 1.0);

    // 4x4 grid, M1 = rows 0-1, M2 = rows 1-2 -> OR_1 = 4/8 = 0.5
    MaskGrid m1(4, 4), m2(4, 4);
    for (int c = 0; c < 4; ++c) {
        m1.at(0, c) = m1.at(1, c) = 1;
        m2.at(1, c) = m2.at(2, c) = 1;
    }
    CHECK(overlap_ratio({m1, m2}, 0) == doctest::Approx(0.5));

    // empty mask: ratio 0 with a warning
    WarningSink warnings;
    CHECK(overlap_ratio({mask_of(1, 2, {0, 0}), mask_of(1, 2, {1, 1})}, 0, &warnings) == 0.0);
    CHECK(warnings.size() == 1);

    CHECK_THROWS_AS((void)overlap_ratio({mask_of(1, 2, {1, 0}), mask_of(2, 1, {1, 0})}, 0), Error);
    CHECK_THROWS_AS((void)overlap_ratio({mask_of(1, 2, {1, 0})}, 0), Error);
}

TEST_CASE("detect: single subject passes by definition") {
    const GuidanceConfig cfg = one_block_config();
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;
    std::vector<SubjectMaps> maps(1);
    maps[0][0] = {{0.9, 0.1, 0.2, 0.8}};
    maps[0][1] = {{0.7, 0.0, 0.3, 0.9}};
    OverlapReport rep = detect(make_word_attention(2, 2, maps), cfg);
    CHECK_FALSE(rep.conflict);
    CHECK(rep.i_star == -1);
    CHECK(rep.ratios.size() == 1);
    CHECK(rep.ratios[0] == 0.0);
}

TEST_CASE("detect: all ratios at or below threshold pass, any above conflicts") {
    GuidanceConfig cfg = one_block_config();
    // craft masks through saliency: use 10-pixel maps whose binarized
    // masks produce known ratios
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;

    // two subjects sharing exactly 1 of 5 active pixels: OR = 0.2 -> pass (strict)
    std::vector<SubjectMaps> borderline(2);
    std::vector<double> a(10, 0.0), b(10, 0.0);
    for (int i = 0; i < 5; ++i) a[(size_t)i] = 1.0;
    for (int i = 4; i < 9; ++i) b[(size_t)i] = 1.0;
    borderline[0][0] = {a};
    borderline[0][1] = {a};
    borderline[1][0] = {b};
    borderline[1][1] = {b};
    OverlapReport rep = detect(make_word_attention(2, 5, borderline), cfg);
    CHECK(rep.ratios[0] == doctest::Approx(0.2));
    CHECK_FALSE(rep.conflict);

    // three of five shared: OR = 0.6 -> conflict
    std::vector<double> c(10, 0.0);
    for (int i = 2; i < 7; ++i) c[(size_t)i] = 1.0;
    borderline[1][0] = {c};
    borderline[1][1] = {c};
    OverlapReport rep2 = detect(make_word_attention(2, 5, borderline), cfg);
    CHECK(rep2.conflict);
    CHECK(rep2.i_star == 0);  // tie at 0.6 breaks to the lowest index
    CHECK(rep2.conflict_mask.count() == 3);
}

TEST_CASE("detect: worst subject and conflict mask match enumeration") {
    const GuidanceConfig cfg = one_block_config();
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;
    // ratios (0.5, 0.3): M1 has 4 active px sharing 2; M2 has 10 sharing 3
    // build directly from saliency maps on a 4x4 grid
    std::vector<double> m1(16, 0.0), m2(16, 0.0);
    for (int i = 0; i < 4; ++i) m1[(size_t)i] = 1.0;         // pixels 0..3
    for (int i = 2; i < 12; ++i) m2[(size_t)i] = 1.0;        // pixels 2..11
    std::vector<SubjectMaps> maps(2);
    maps[0][0] = {m1};
    maps[0][1] = {m1};
    maps[1][0] = {m2};
    maps[1][1] = {m2};
    OverlapReport rep = detect(make_word_attention(4, 4, maps), cfg);
    CHECK(rep.ratios[0] == doctest::Approx(0.5));
    CHECK(rep.ratios[1] == doctest::Approx(0.2));
    CHECK(rep.conflict);
    CHECK(rep.i_star == 0);
    // oracle
    std::vector<std::vector<int>> masks = {std::vector<int>(16, 0), std::vector<int>(16, 0)};
    for (int i = 0; i < 16; ++i) {
        masks[0][(size_t)i] = m1[(size_t)i] > 0 ? 1 : 0;
        masks[1][(size_t)i] = m2[(size_t)i] > 0 ? 1 : 0;
    }
    const auto expect = refcalc::conflict_mask(masks, 0);
    for (int i = 0; i < 16; ++i) CHECK((int)rep.conflict_mask.v[(size_t)i] == expect[(size_t)i]);
}

TEST_CASE("overlap_ratio and conflict mask agree with brute force on random masks") {
    Rng rng(41);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 2 + (int)rng.below(3);
        std::vector<MaskGrid> masks;
        std::vector<std::vector<int>> ref;
        for (int i = 0; i < n; ++i) {
            MaskGrid m(8, 8);
            std::vector<int> rm(64);
            for (int p = 0; p < 64; ++p) {
                const int bit = rng.uniform() < 0.3 ? 1 : 0;
                m.v[(size_t)p] = (uint8_t)bit;
                rm[(size_t)p] = bit;
            }
            masks.push_back(m);
            ref.push_back(rm);
        }
        for (int i = 0; i < n; ++i) {
            CHECK(overlap_ratio(masks, i) == refcalc::overlap_ratio(ref, i));
        }
    }
}

TEST_CASE("overlap_ratio: monotone in other subjects' masks") {
    Rng rng(43);
    for (int trial = 0; trial < 100; ++trial) {
        MaskGrid m1(4, 4), m2(4, 4);
        for (int p = 0; p < 16; ++p) {
            m1.v[(size_t)p] = rng.uniform() < 0.4 ? 1 : 0;
            m2.v[(size_t)p] = rng.uniform() < 0.3 ? 1 : 0;
        }
        const double before = overlap_ratio({m1, m2}, 0);
        MaskGrid grown = m2;
        for (int p = 0; p < 16; ++p) {
            if (rng.uniform() < 0.3) grown.v[(size_t)p] = 1;
        }
        const double after = overlap_ratio({m1, grown}, 0);
        CHECK(after >= before);
    }
}

TEST_CASE("detect: relabeling subjects permutes ratios and maps i_star through") {
    const GuidanceConfig cfg = one_block_config();
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;
    Rng rng(47);
    std::vector<SubjectMaps> maps(3);
    for (auto& s : maps) {
        std::vector<double> m(16);
        for (auto& x : m) x = rng.uniform();
        s[0] = {m};
        s[1] = {m};
    }
    OverlapReport base = detect(make_word_attention(4, 4, maps), cfg);
    std::vector<SubjectMaps> perm = {maps[1], maps[2], maps[0]};
    OverlapReport rot = detect(make_word_attention(4, 4, perm), cfg);
    CHECK(rot.ratios[0] == doctest::Approx(base.ratios[1]));
    CHECK(rot.ratios[1] == doctest::Approx(base.ratios[2]));
    CHECK(rot.ratios[2] == doctest::Approx(base.ratios[0]));
    CHECK(base.conflict == rot.conflict);
}

TEST_CASE("detect: verdict invariant under positive affine rescaling before minmax") {
    const GuidanceConfig cfg = one_block_config();
    using SubjectMaps = std::array<std::vector<std::vector<double>>, 2>;
    Rng rng(53);
    std::vector<SubjectMaps> maps(2), scaled(2);
    for (size_t i = 0; i < 2; ++i) {
        std::vector<double> m(16), ms(16);
        for (size_t p = 0; p < 16; ++p) {
            m[p] = rng.uniform();
            ms[p] = 2.5 * m[p] + 0.7;  // positive slope affine
        }
        maps[i][0] = {m};
        maps[i][1] = {m};
        scaled[i][0] = {ms};
        scaled[i][1] = {ms};
    }
    OverlapReport a = detect(make_word_attention(4, 4, maps), cfg);
    OverlapReport b = detect(make_word_attention(4, 4, scaled), cfg);
    CHECK(a.conflict == b.conflict);
    CHECK(a.i_star == b.i_star);
    for (size_t i = 0; i < a.ratios.size(); ++i) {
        CHECK(a.ratios[i] == doctest::Approx(b.ratios[i]).epsilon(1e-12));
    }
}
