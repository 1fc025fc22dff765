#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "demgan/curation.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace demgan;
using support::kind_of;

namespace {

// 3-band jpeg tile, 40x25 = 1000 pixels per band, with `distinct` levels per
// band cycling over 100..100+distinct-1 and the first `dominant` joint values
// (spread over the bands) set to level 7.
RasterTile diversity_tile(int distinct, int dominant) {
    RasterTile t(40, 25, 3, ValueDomain::jpeg_0_255);
    for (int b = 0; b < 3; ++b) {
        auto band = t.band(b);
        for (std::size_t i = 0; i < band.size(); ++i) band[i] = 100.0 + static_cast<double>(i % distinct);
    }
    for (int k = 0; k < dominant; ++k) t.band(k % 3)[static_cast<std::size_t>(k / 3)] = 7.0;
    return t;
}

struct HistogramOracle {
    bool any_low = false;
    bool dominant = false;
};

HistogramOracle histogram_oracle(const RasterTile& t) {
    HistogramOracle o;
    std::map<long, std::size_t> joint;
    std::size_t total = 0;
    for (int b = 0; b < t.bands(); ++b) {
        std::set<long> levels;
        for (std::size_t i = 0; i < t.pixel_count(); ++i) {
            if (t.masked(i)) continue;
            const long level = std::lround(t.band(b)[i]);
            levels.insert(level);
            ++joint[level];
            ++total;
        }
        if (levels.size() < 20) o.any_low = true;
    }
    std::size_t peak = 0;
    for (const auto& [level, n] : joint) peak = std::max(peak, n);
    o.dominant = static_cast<double>(peak) / static_cast<double>(total) > 0.2;
    return o;
}

DatasetManifest manifest_of(int n) {
    DatasetManifest m;
    for (int i = 0; i < n; ++i) {
        ManifestEntry e;
        char id[16];
        std::snprintf(id, sizeof(id), "p%05d", i);
        e.pair_id = id;
        e.rgb_path = std::string("tiles/") + id + "_rgb.tif";
        e.dem_path = std::string("tiles/") + id + "_dem.tif";
        e.elevation_range = i * 1.5;
        m.entries.push_back(e);
    }
    return m;
}

}  // namespace

TEST_SUITE("curation") {

TEST_CASE("unique-value boundary: 19 flagged, 20 not") {
    const QualityFlags f19 = spectral_diversity_flags(diversity_tile(19, 0));
    const QualityFlags f20 = spectral_diversity_flags(diversity_tile(20, 0));
    CHECK(f19.low_unique_values == std::vector<bool>{true, true, true});
    CHECK(f19.excluded);
    CHECK(f20.low_unique_values == std::vector<bool>{false, false, false});

    RasterTile one_band = diversity_tile(40, 0);
    for (double& v : one_band.band(1)) v = 100.0 + std::fmod(v, 19.0);
    const QualityFlags f = spectral_diversity_flags(one_band);
    CHECK(f.low_unique_values == std::vector<bool>{false, true, false});
    CHECK(f.excluded);
}

TEST_CASE("dominant share boundary: exactly 20% kept, above flagged") {
    // 3000 joint values: 600 is exactly 20.0%, 603 is 20.1%, 630 is 21%.
    const QualityFlags at = spectral_diversity_flags(diversity_tile(50, 600));
    CHECK_FALSE(at.dominant_value_excess);
    CHECK_FALSE(at.excluded);
    const QualityFlags above = spectral_diversity_flags(diversity_tile(50, 603));
    CHECK(above.dominant_value_excess);
    CHECK(above.excluded);
    CHECK(spectral_diversity_flags(diversity_tile(50, 630)).dominant_value_excess);

    // Per-band mode looks at the worst band instead.
    const QualityThresholds per_band{20, 0.2, DominantShareMode::per_band};
    RasterTile t = diversity_tile(50, 0);
    for (std::size_t i = 0; i < 201; ++i) t.band(0)[i] = 7.0;
    CHECK(spectral_diversity_flags(t, per_band).dominant_value_excess);
    CHECK_FALSE(spectral_diversity_flags(t).dominant_value_excess);
}

TEST_CASE("degenerate tiles") {
    RasterTile c(8, 8, 3, ValueDomain::jpeg_0_255);
    for (double& v : c.values()) v = 12.0;
    const QualityFlags f = spectral_diversity_flags(c);
    CHECK(f.low_unique_values == std::vector<bool>{true, true, true});
    CHECK(f.dominant_value_excess);
    CHECK(f.excluded);
    CHECK_FALSE(f.degenerate);

    for (std::size_t i = 0; i < c.pixel_count(); ++i) c.set_masked(i, true);
    const QualityFlags m = spectral_diversity_flags(c);
    CHECK(m.degenerate);
    CHECK(m.excluded);
    CHECK(kind_of([] { spectral_diversity_flags(RasterTile(4, 4, 3)); }) == ErrorKind::domain);
}

TEST_CASE("excluded equals the union of both criteria on random tiles") {
    oracle::Gen g(31);
    for (int trial = 0; trial < 200; ++trial) {
        RasterTile t(g.integer(4, 20), g.integer(4, 20), 3, ValueDomain::jpeg_0_255);
        const int levels = g.integer(1, 40);
        const double skew = g.uniform(0, 1);
        for (double& v : t.values()) v = g.coin(skew * 0.5) ? 3.0 : 50.0 + g.integer(0, levels - 1) + g.uniform(-0.4, 0.4);
        if (g.coin(0.3)) t.set_masked(std::size_t{0}, true);
        const QualityFlags f = spectral_diversity_flags(t);
        const HistogramOracle o = histogram_oracle(t);
        const bool any_low = std::any_of(f.low_unique_values.begin(), f.low_unique_values.end(), [](bool b) { return b; });
        CHECK(any_low == o.any_low);
        CHECK(f.dominant_value_excess == o.dominant);
        CHECK(f.excluded == (o.any_low || o.dominant));
    }
}

TEST_CASE("exclusion") {
    DatasetManifest m = manifest_of(5);
    CHECK(kind_of([&] { exclude_flagged_pairs(m); }) == ErrorKind::precondition);
    for (auto& e : m.entries) e.flags = QualityFlags{{false, false, false}, false, false, false};
    const ExclusionResult clean = exclude_flagged_pairs(m);
    CHECK(clean.manifest == m);
    CHECK(clean.retained == 5);

    m.entries[1].flags->excluded = true;
    m.entries[1].split = Split::train;
    const ExclusionResult some = exclude_flagged_pairs(m);
    CHECK(some.retained == 4);
    CHECK(some.excluded_ids == std::vector<std::string>{"p00001"});
    CHECK_FALSE(some.manifest.entries[1].split.has_value());

    for (auto& e : m.entries) e.flags->excluded = true;
    const ExclusionResult none = exclude_flagged_pairs(m);
    CHECK(none.retained == 0);
    CHECK(kind_of([&] { split_dataset(none.manifest, {}, 1); }) == ErrorKind::empty_dataset);
}

TEST_CASE("split arithmetic") {
    const SplitCounts big = split_counts(12357, {});
    CHECK(big.train == 9885);
    CHECK(big.val == 1236);
    CHECK(big.test == 1236);
    const SplitCounts ten = split_counts(10, {});
    CHECK(ten.train == 8);
    CHECK(ten.val == 1);
    CHECK(ten.test == 1);
    CHECK(kind_of([] { split_counts(10, {0.7, 0.1, 0.1}); }) == ErrorKind::argument);

    // Independent rounding rule: nearest integer, halves away from zero.
    for (std::size_t n = 3; n < 2000; n += 7) {
        const SplitCounts c = split_counts(n, {});
        const auto r = static_cast<std::size_t>(std::floor(0.1 * static_cast<double>(n) + 0.5));
        CHECK(c.val == r);
        CHECK(c.test == r);
        CHECK(c.train + c.val + c.test == n);
    }
}

TEST_CASE("split assignment partitions usable entries deterministically") {
    DatasetManifest m = manifest_of(57);
    for (auto& e : m.entries) e.flags = QualityFlags{{false, false, false}, false, false, false};
    m.entries[4].flags->excluded = true;
    m.entries[9].flags->excluded = true;
    const DatasetManifest a = split_dataset(m, {}, 99);
    const DatasetManifest b = split_dataset(m, {}, 99);
    CHECK(a == b);
    CHECK(a.count(Split::train) + a.count(Split::val) + a.count(Split::test) == 55);
    CHECK(a.count(Split::val) == 6);
    CHECK(a.count(Split::test) == 6);
    CHECK_FALSE(a.entries[4].split.has_value());

    std::set<std::string> seen;
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (const auto* e : a.in_split(s)) CHECK(seen.insert(e->pair_id).second);
    }
    CHECK(seen.size() == 55);

    // Entry order in the input does not change the assignment.
    DatasetManifest reversed = m;
    std::reverse(reversed.entries.begin(), reversed.entries.end());
    const DatasetManifest r = split_dataset(reversed, {}, 99);
    for (const auto& e : a.entries) CHECK(r.find(e.pair_id)->split == e.split);
    CHECK_FALSE(split_dataset(m, {}, 100) == a);
}

TEST_CASE("SSIM refinement filter") {
    DatasetManifest m = manifest_of(6);
    const double scores[] = {0.1, 0.2, 0.3, 0.0, 0.05, 0.9};
    const Split splits[] = {Split::train, Split::train, Split::train, Split::test, Split::val, Split::train};
    for (int i = 0; i < 6; ++i) {
        m.entries[i].split = splits[i];
        m.entries[i].ssim_score = scores[i];
    }
    const RefinementResult r = filter_training_by_ssim(m, 0.2);
    REQUIRE(r.removed.size() == 1);
    CHECK(r.removed[0].pair_id == "p00000");
    CHECK(r.manifest.find("p00003") != nullptr);
    CHECK(r.manifest.find("p00004") != nullptr);
    CHECK(r.manifest.count(Split::train) == 3);
    CHECK(filter_training_by_ssim(m, -1.0).manifest == m);

    std::size_t previous = 0;
    for (double t = -0.5; t <= 1.0; t += 0.05) {
        const RefinementResult rt = filter_training_by_ssim(m, t);
        CHECK(rt.removed.size() >= previous);
        previous = rt.removed.size();
        for (const auto& e : filter_training_by_ssim(m, t - 0.05).removed) {
            CHECK(std::any_of(rt.removed.begin(), rt.removed.end(), [&](const auto& x) { return x.pair_id == e.pair_id; }));
        }
    }

    m.entries[2].ssim_score.reset();
    try {
        filter_training_by_ssim(m, 0.2);
        FAIL("expected a precondition error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::precondition);
        CHECK(std::string(e.what()).find("p00002") != std::string::npos);
    }
}

TEST_CASE("manifest round trip and lock") {
    support::ScratchDir dir("manifest");
    DatasetManifest m = manifest_of(4);
    m.entries[0].flags = QualityFlags{{true, false, false}, true, false, true};
    m.entries[1].flags = QualityFlags{{false, false, false}, false, false, false};
    m.entries[1].split = Split::test;
    m.entries[1].ssim_score = 0.123456789012345678;
    m.entries[2].split = Split::train;
    m.entries[2].region = {-5.135, -4.865, 99.865, 100.135, 30};
    m.entries[3].elevation_range = 1.0 / 3.0;
    write_manifest(dir.path / "m.jsonl", m);
    CHECK(read_manifest(dir.path / "m.jsonl") == m);

    {
        ManifestLock lock(dir.path / "m.jsonl");
        CHECK(kind_of([&] { ManifestLock again(dir.path / "m.jsonl"); }) == ErrorKind::io);
    }
    CHECK_NOTHROW(ManifestLock(dir.path / "m.jsonl"));

    DatasetManifest dup = m;
    dup.entries[1].pair_id = dup.entries[0].pair_id;
    CHECK(kind_of([&] { write_manifest(dir.path / "bad.jsonl", dup); }) == ErrorKind::precondition);
}

}  // TEST_SUITE
