#include <doctest.h>

#include <map>
#include <set>

#include "ditguide/dataset.hpp"

using namespace ditguide;

namespace {

TokenizerTables tables_for(const DatasetConfig& cfg) {
    return build_tokenizer_tables(cfg.caption_words());
}

}  // namespace

TEST_CASE("dataset: caption follows the template") {
    DatasetConfig cfg;
    auto tables = tables_for(cfg);
    for (uint64_t seed : {0ull, 1ull, 2ull, 17ull}) {
        ToySample s = generate_toy_sample(seed, cfg, tables);
        const int n = (int)s.prompt.subject_words.size();
        CHECK(n >= cfg.min_subjects);
        CHECK(n <= cfg.max_subjects);
        std::string expect = make_caption(s.prompt.subject_words);
        CHECK(s.caption == expect);
        // "a X and a Y [and a Z ...]"
        CHECK(s.caption.rfind("a ", 0) == 0);
        if (n >= 2) CHECK(s.caption.find(" and a ") != std::string::npos);
    }
}

TEST_CASE("dataset: identical seed gives bit-identical output") {
    DatasetConfig cfg;
    auto tables = tables_for(cfg);
    ToySample a = generate_toy_sample(7, cfg, tables);
    ToySample b = generate_toy_sample(7, cfg, tables);
    CHECK(a.caption == b.caption);
    CHECK(a.image.pixels == b.image.pixels);
    CHECK(a.image.subject_truth.size() == b.image.subject_truth.size());
    ToySample c = generate_toy_sample(8, cfg, tables);
    CHECK(a.image.pixels != c.image.pixels);
}

TEST_CASE("dataset: truth regions lie within bounds and respect overlap cap") {
    DatasetConfig cfg;
    auto tables = tables_for(cfg);
    for (uint64_t seed = 0; seed < 200; ++seed) {
        ToySample s = generate_toy_sample(seed, cfg, tables);
        const int half = kStencilSide / 2;
        std::vector<detail_dataset::Placement> ps;
        for (const auto& t : s.image.subject_truth) {
            CHECK(t.center_y - half >= 0);
            CHECK(t.center_y + half < cfg.image_side);
            CHECK(t.center_x - half >= 0);
            CHECK(t.center_x + half < cfg.image_side);
            ps.push_back({t.center_y, t.center_x, shapes::stencil(t.shape_class)});
        }
        for (size_t i = 0; i < ps.size(); ++i) {
            for (size_t j = i + 1; j < ps.size(); ++j) {
                const int inter = detail_dataset::overlap_pixels(ps[i], ps[j]);
                const int smaller = std::min(ps[i].mask.count(), ps[j].mask.count());
                CHECK((double)inter <= cfg.max_overlap_fraction * smaller);
            }
        }
    }
}

TEST_CASE("dataset: class frequencies are near uniform over 10000 samples") {
    DatasetConfig cfg;
    auto tables = tables_for(cfg);
    std::map<std::string, int> counts;
    int total = 0;
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        ToySample s = generate_toy_sample(seed, cfg, tables);
        for (const auto& w : s.prompt.subject_words) {
            counts[w]++;
            ++total;
        }
    }
    const auto classes = cfg.all_classes();
    CHECK(counts.size() == classes.size());
    const double uniform = (double)total / (double)classes.size();
    for (const auto& c : classes) {
        CHECK((double)counts[c] > 0.8 * uniform);
        CHECK((double)counts[c] < 1.2 * uniform);
    }
}

TEST_CASE("dataset: impossible placement reports the seed") {
    DatasetConfig cfg;
    cfg.image_side = 16;  // room for barely one stencil
    cfg.min_subjects = 4;
    cfg.max_subjects = 4;
    cfg.max_overlap_fraction = 0.0;
    cfg.placement_retries = 8;
    cfg.scene_retries = 2;
    auto tables = tables_for(cfg);
    CHECK_THROWS_WITH_AS((void)generate_toy_sample(123, cfg, tables), doctest::Contains("123"),
                         Error);
}

TEST_CASE("dataset: pixel values stay in [0,1] and subjects are visible") {
    DatasetConfig cfg;
    auto tables = tables_for(cfg);
    ToySample s = generate_toy_sample(3, cfg, tables);
    for (float p : s.image.pixels) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
    }
    // every truth center should be bright in all channels
    for (const auto& t : s.image.subject_truth) {
        bool bright = false;
        const MaskGrid st = shapes::stencil(t.shape_class);
        const int half = kStencilSide / 2;
        for (int r = 0; r < kStencilSide && !bright; ++r) {
            for (int c = 0; c < kStencilSide && !bright; ++c) {
                if (st.at(r, c) && s.image.at(t.center_y - half + r, t.center_x - half + c, 0) > 0.5f) {
                    bright = true;
                }
            }
        }
        CHECK(bright);
    }
}

TEST_CASE("dataset: every class stencil is nonempty and distinct") {
    DatasetConfig cfg;
    std::set<std::vector<uint8_t>> seen;
    for (const auto& cls : cfg.all_classes()) {
        MaskGrid st = shapes::stencil(cls);
        CHECK(st.count() > 10);
        CHECK(seen.insert(st.v).second);
    }
    CHECK_THROWS_AS((void)shapes::stencil("blob"), Error);
}
