#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "demgan/geotiff.hpp"
#include "demgan/ingest.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace demgan;
using support::kind_of;

namespace {

SceneRecord scene_with(double cover, RasterTile rgb = RasterTile(2, 2, 3)) {
    SceneRecord s;
    s.scene_cloud_cover = cover;
    s.rgb = std::move(rgb);
    return s;
}

RasterTile pixel_tile(std::initializer_list<double> rgb) {
    RasterTile t(1, 1, 3);
    int b = 0;
    for (double v : rgb) t.at(b++, 0, 0) = v;
    return t;
}

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("cloud filter is strict") {
    ImageStack stack;
    for (double c : {19.9, 20.0, 35.0}) stack.scenes.push_back(scene_with(c));
    const ImageStack kept = filter_scenes_by_cloud(stack);
    REQUIRE(kept.scenes.size() == 1);
    CHECK(kept.scenes[0].scene_cloud_cover == 19.9);

    ImageStack clear;
    for (int i = 0; i < 4; ++i) clear.scenes.push_back(scene_with(0.0));
    CHECK(filter_scenes_by_cloud(clear).scenes.size() == 4);
    CHECK(filter_scenes_by_cloud(ImageStack{}).scenes.empty());
}

TEST_CASE("quality mask") {
    oracle::Gen g(1);
    SceneRecord s = scene_with(0, g.tile(6, 5, 3, 0, 5000, ValueDomain::raw));
    s.quality_mask.assign(30, 0);
    CHECK(apply_quality_mask(s).rgb == s.rgb);

    s.quality_mask.assign(30, 1);
    CHECK(apply_quality_mask(s).rgb.valid_count() == 0);

    for (std::size_t i = 0; i < 30; ++i) s.quality_mask[i] = static_cast<std::uint8_t>(((i % 6) + (i / 6)) % 2);
    const SceneRecord checker = apply_quality_mask(s);
    for (std::size_t i = 0; i < 30; ++i) {
        CHECK(checker.rgb.masked(i) == (s.quality_mask[i] == 1));
        if (!checker.rgb.masked(i)) CHECK(checker.rgb.band(1)[i] == s.rgb.band(1)[i]);
    }
    s.quality_mask.resize(29);
    CHECK(kind_of([&] { apply_quality_mask(s); }) == ErrorKind::alignment);
}

TEST_CASE("median composite examples") {
    oracle::Gen g(2);
    ImageStack one{{}, {scene_with(0, g.tile(4, 4, 3, 0, 100, ValueDomain::raw))}};
    CHECK(median_composite(one) == one.scenes[0].rgb);

    ImageStack three;
    for (double v : {1.0, 5.0, 9.0}) three.scenes.push_back(scene_with(0, pixel_tile({v, v, v})));
    CHECK(median_composite(three).at(0, 0, 0) == 5.0);

    three.scenes[1].quality_mask = {1};
    CHECK(median_composite(three).at(1, 0, 0) == 5.0);

    three.scenes[0].rgb.set_masked(std::size_t{0}, true);
    three.scenes[2].rgb.set_masked(std::size_t{0}, true);
    CHECK(median_composite(three).masked(std::size_t{0}));

    CHECK(kind_of([] { median_composite(ImageStack{}); }) == ErrorKind::empty_dataset);
    ImageStack mismatched{{}, {scene_with(0, RasterTile(2, 2, 3)), scene_with(0, RasterTile(3, 2, 3))}};
    CHECK(kind_of([&] { median_composite(mismatched); }) == ErrorKind::alignment);
}

TEST_CASE("median composite properties") {
    oracle::Gen g(3);
    for (int trial = 0; trial < 30; ++trial) {
        ImageStack stack;
        const int n = g.integer(1, 7);
        for (int s = 0; s < n; ++s) {
            SceneRecord sc = scene_with(0, g.tile(5, 4, 3, 0, 10, ValueDomain::raw));
            for (double& v : sc.rgb.values()) v = std::round(v);  // ties exercise the even-count rule
            sc.quality_mask.resize(20);
            for (auto& m : sc.quality_mask) m = g.coin(0.3) ? 1 : 0;
            stack.scenes.push_back(sc);
        }
        const RasterTile out = median_composite(stack);
        CHECK(out == oracle::median_composite(stack));

        ImageStack shuffled = stack;
        std::shuffle(shuffled.scenes.begin(), shuffled.scenes.end(), g.eng);
        CHECK(median_composite(shuffled) == out);

        ImageStack copies;
        for (int k = 0; k < g.integer(1, 5); ++k) copies.scenes.push_back(scene_with(0, stack.scenes[0].rgb));
        CHECK(median_composite(copies) == stack.scenes[0].rgb);
    }
}

TEST_CASE("sensor fallback merge") {
    oracle::Gen g(4);
    const RasterTile p = g.tile(5, 5, 3, 0, 100, ValueDomain::raw);
    const RasterTile f = g.tile(5, 5, 3, 100, 200, ValueDomain::raw);
    CHECK(sensor_fallback_merge(p, f) == p);
    CHECK(sensor_fallback_merge(p, p) == p);

    RasterTile holes = p;
    holes.set_masked(2, 2, true);
    holes.set_masked(0, 4, true);
    RasterTile f2 = f;
    f2.set_masked(0, 4, true);
    const RasterTile m = sensor_fallback_merge(holes, f2);
    CHECK(!m.masked(2, 2));
    for (int b = 0; b < 3; ++b) CHECK(m.at(b, 2, 2) == f.at(b, 2, 2));
    CHECK(m.masked(0, 4));
    CHECK(m.valid_count() >= holes.valid_count());
    CHECK(kind_of([&] { sensor_fallback_merge(p, RasterTile(4, 5, 3)); }) == ErrorKind::alignment);
}

TEST_CASE("region mosaic: fallback modes and all-cloudy stacks") {
    RasterTile pr(2, 1, 3), fb(2, 1, 3);
    for (int b = 0; b < 3; ++b) {
        pr.at(b, 0, 0) = 10;
        fb.at(b, 0, 0) = 20;
        fb.at(b, 0, 1) = 30;
    }
    pr.set_masked(0, 1, true);
    SceneRecord ps = scene_with(5, pr);
    SceneRecord fs = scene_with(5, fb);
    fs.sensor = SensorRole::fallback;
    const ImageStack stack{{}, {ps, fs}};
    const RasterTile per_pixel = build_region_mosaic(stack);
    CHECK(per_pixel.at(0, 0, 0) == 10);
    CHECK(per_pixel.at(0, 0, 1) == 30);
    const RasterTile per_region = build_region_mosaic(stack, {20.0, FallbackMode::per_region});
    CHECK(per_region.masked(0, 1));

    ImageStack cloudy{{}, {scene_with(40, pr), scene_with(25, fb)}};
    CHECK(kind_of([&] { build_region_mosaic(cloudy); }) == ErrorKind::empty_dataset);
}

TEST_CASE("synthetic terrain") {
    const TerrainPair a = synthesize_terrain_pair(42, 48);
    const TerrainPair b = synthesize_terrain_pair(42, 48);
    CHECK(a.rgb == b.rgb);
    CHECK(a.dem == b.dem);
    CHECK(!(synthesize_terrain_pair(43, 48).dem == a.dem));
    CHECK(kind_of([] { synthesize_terrain_pair(1, 15); }) == ErrorKind::argument);
    CHECK(a.rgb.bands() == 3);
    CHECK(a.dem.bands() == 1);

    TerrainOptions flat;
    flat.flat = true;
    const TerrainPair f = synthesize_terrain_pair(5, 32, flat);
    for (double v : f.dem.values()) CHECK(v == f.dem.values()[0]);
    const RasterTile fh = render_hillshade(f.dem);
    for (double v : fh.values()) CHECK(v == doctest::Approx(fh.values()[0]).epsilon(1e-12));

    // Hillshade against the DEM slope along the sun direction (azimuth 315).
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        const TerrainPair t = synthesize_terrain_pair(seed, 64);
        const RasterTile hs = render_hillshade(t.dem);
        const double cell = t.dem.georef().resolution;
        std::vector<double> shade, slope;
        const double se = std::sin(315.0 * M_PI / 180.0);
        const double sn = std::cos(315.0 * M_PI / 180.0);
        for (int y = 1; y < 63; ++y) {
            for (int x = 1; x < 63; ++x) {
                const double dzdx = (t.dem.at(0, y, x + 1) - t.dem.at(0, y, x - 1)) / (2 * cell);
                const double dzdn = (t.dem.at(0, y - 1, x) - t.dem.at(0, y + 1, x)) / (2 * cell);
                slope.push_back(-(dzdx * se + dzdn * sn));
                shade.push_back(hs.at(0, y, x));
            }
        }
        CHECK(std::abs(oracle::pearson(shade, slope)) > 0.3);
    }
}

TEST_CASE("synthetic catalog round trip and mosaics") {
    support::ScratchDir dir("catalog");
    SyntheticCatalogOptions opts;
    opts.regions = 4;
    opts.size = 32;
    opts.seed = 9;
    const auto index = write_synthetic_catalog(dir.path, opts);
    const SceneCatalog cat = load_catalog(index);
    REQUIRE(cat.regions.size() == 4);
    for (const auto& r : cat.regions) {
        CHECK(r.scenes.size() == 5);
        const ImageStack stack = load_image_stack(cat, r);
        CHECK(stack.scenes.size() == 5);
        const RasterTile mosaic = build_region_mosaic(stack);
        CHECK(mosaic.valid_count() > 0);
        CHECK(mosaic.width() == 32);
    }
    save_catalog(dir.path / "copy.json", cat);
    const SceneCatalog again = load_catalog(dir.path / "copy.json");
    CHECK(again.regions.size() == cat.regions.size());
    CHECK(again.regions[2].scenes[3].path == cat.regions[2].scenes[3].path);
    CHECK(again.regions[2].region == cat.regions[2].region);

    opts.all_cloudy = true;
    support::ScratchDir cloudy("catalog_cloudy");
    const SceneCatalog cc = load_catalog(write_synthetic_catalog(cloudy.path, opts));
    for (const auto& r : cc.regions) {
        CHECK(kind_of([&] { build_region_mosaic(load_image_stack(cc, r)); }) == ErrorKind::empty_dataset);
    }
    CHECK(kind_of([&] { load_catalog(dir.path / "missing.json"); }) == ErrorKind::io);
}

}  // TEST_SUITE
