#include "demgan/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/geotiff.hpp"
#include "demgan/rng.hpp"
#include "demgan/sites.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool pixel_invalid(const SceneRecord& scene, std::size_t i) {
    return scene.rgb.masked(i) || (!scene.quality_mask.empty() && scene.quality_mask[i] != 0);
}

double median_of(std::vector<double>& values) {
    const std::size_t n = values.size();
    const std::size_t mid = n / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (n % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

// ---- value noise ----

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
    const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL ^
                                                         static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double value_noise(std::uint64_t seed, double x, double y) {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double u = fade(x - fx);
    const double v = fade(y - fy);
    const double a = lattice(seed, ix, iy);
    const double b = lattice(seed, ix + 1, iy);
    const double c = lattice(seed, ix, iy + 1);
    const double d = lattice(seed, ix + 1, iy + 1);
    return (a + (b - a) * u) * (1.0 - v) + (c + (d - c) * u) * v;
}

struct Rgb {
    double r, g, b;
};

Rgb lerp(Rgb a, Rgb b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

Rgb banded_color(double t) {
    constexpr Rgb lowland{70, 120, 55};
    constexpr Rgb upland{160, 140, 95};
    constexpr Rgb summit{215, 210, 205};
    t = std::clamp(t, 0.0, 1.0);
    return t < 0.5 ? lerp(lowland, upland, t * 2.0) : lerp(upland, summit, (t - 0.5) * 2.0);
}

constexpr Rgb kNeutral{110, 115, 90};
constexpr double kCountsPerLevel = 40.0;
constexpr double kFullTintRelief = 600.0;

std::string date_for(int day_of_year) {
    static const int days[] = {31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    int month = 0;
    while (month < 11 && day_of_year >= days[month]) day_of_year -= days[month++];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "2000-%02d-%02d", month + 1, day_of_year + 1);
    return buf;
}

}  // namespace

const char* to_string(SensorRole role) {
    return role == SensorRole::primary ? "primary" : "fallback";
}

SensorRole sensor_role_from_string(const std::string& name) {
    if (name == "primary" || name == "landsat5") return SensorRole::primary;
    if (name == "fallback" || name == "landsat7") return SensorRole::fallback;
    throw Error(ErrorKind::io, "unknown sensor role '" + name + "'");
}

void ImageStack::validate() const {
    for (const auto& scene : scenes) {
        if (!scene.quality_mask.empty() && scene.quality_mask.size() != scene.rgb.pixel_count()) {
            throw Error(ErrorKind::alignment, "quality mask does not match scene dimensions");
        }
        if (!scene.rgb.same_shape(scenes.front().rgb) || !(scene.rgb.georef() == scenes.front().rgb.georef())) {
            throw Error(ErrorKind::alignment, "scenes in a stack must share one pixel grid");
        }
    }
}

ImageStack filter_scenes_by_cloud(const ImageStack& stack, double max_cover) {
    ImageStack out{stack.region, {}};
    for (const auto& scene : stack.scenes) {
        if (scene.scene_cloud_cover < max_cover) out.scenes.push_back(scene);
    }
    return out;
}

SceneRecord apply_quality_mask(const SceneRecord& scene) {
    if (scene.quality_mask.size() != scene.rgb.pixel_count()) {
        throw Error(ErrorKind::alignment, "quality mask does not match scene dimensions");
    }
    SceneRecord out = scene;
    for (std::size_t i = 0; i < scene.quality_mask.size(); ++i) {
        if (scene.quality_mask[i] == 0) continue;
        out.rgb.set_masked(i, true);
        for (int b = 0; b < out.rgb.bands(); ++b) out.rgb.band(b)[i] = 0.0;
    }
    return out;
}

RasterTile median_composite(const ImageStack& stack) {
    if (stack.scenes.empty()) throw Error(ErrorKind::empty_dataset, "median composite of an empty stack");
    stack.validate();
    const RasterTile& first = stack.scenes.front().rgb;
    RasterTile out(first.width(), first.height(), first.bands(), first.domain(), first.georef());
    std::vector<double> values;
    values.reserve(stack.scenes.size());
    for (std::size_t i = 0; i < first.pixel_count(); ++i) {
        bool any = false;
        for (int b = 0; b < first.bands(); ++b) {
            values.clear();
            for (const auto& scene : stack.scenes) {
                if (!pixel_invalid(scene, i)) values.push_back(scene.rgb.band(b)[i]);
            }
            if (values.empty()) break;
            any = true;
            out.band(b)[i] = median_of(values);
        }
        if (!any) out.set_masked(i, true);
    }
    return out;
}

RasterTile sensor_fallback_merge(const RasterTile& primary, const RasterTile& fallback) {
    if (!primary.same_shape(fallback)) throw Error(ErrorKind::alignment, "fallback tile does not match primary");
    RasterTile out = primary;
    for (std::size_t i = 0; i < primary.pixel_count(); ++i) {
        if (!primary.masked(i)) continue;
        if (fallback.masked(i)) continue;
        out.set_masked(i, false);
        for (int b = 0; b < out.bands(); ++b) out.band(b)[i] = fallback.band(b)[i];
    }
    return out;
}

RasterTile build_region_mosaic(const ImageStack& stack, const MosaicOptions& options) {
    stack.validate();
    const ImageStack kept = filter_scenes_by_cloud(stack, options.max_cloud_cover);
    ImageStack primary{stack.region, {}};
    ImageStack fallback{stack.region, {}};
    for (const auto& scene : kept.scenes) {
        SceneRecord masked = scene.quality_mask.empty() ? scene : apply_quality_mask(scene);
        (scene.sensor == SensorRole::primary ? primary : fallback).scenes.push_back(std::move(masked));
    }
    if (primary.scenes.empty() && fallback.scenes.empty()) {
        throw Error(ErrorKind::empty_dataset, "no scene passes the cloud-cover filter");
    }

    RasterTile merged;
    if (primary.scenes.empty()) {
        merged = median_composite(fallback);
    } else if (fallback.scenes.empty()) {
        merged = median_composite(primary);
    } else {
        RasterTile p = median_composite(primary);
        if (options.fallback_mode == FallbackMode::per_region) {
            merged = p.valid_count() > 0 ? p : median_composite(fallback);
        } else {
            merged = sensor_fallback_merge(p, median_composite(fallback));
        }
    }
    if (merged.valid_count() == 0) throw Error(ErrorKind::empty_dataset, "mosaic has no valid pixels");
    return merged;
}

RasterTile render_hillshade(const RasterTile& dem, double azimuth_deg, double altitude_deg) {
    if (dem.bands() != 1) throw Error(ErrorKind::argument, "hillshade needs a single-band DEM");
    const double deg = std::numbers::pi / 180.0;
    const double az = azimuth_deg * deg;
    const double alt = altitude_deg * deg;
    const double sun_e = std::sin(az) * std::cos(alt);
    const double sun_n = std::cos(az) * std::cos(alt);
    const double sun_u = std::sin(alt);
    const double cell = dem.georef().resolution;
    const int w = dem.width();
    const int h = dem.height();
    RasterTile out(w, h, 1, ValueDomain::raw, dem.georef());
    for (int y = 0; y < h; ++y) {
        const int yn = std::max(y - 1, 0);
        const int ys = std::min(y + 1, h - 1);
        for (int x = 0; x < w; ++x) {
            const int xw = std::max(x - 1, 0);
            const int xe = std::min(x + 1, w - 1);
            const double dz_de = (dem.at(0, y, xe) - dem.at(0, y, xw)) / ((xe - xw) * cell);
            const double dz_dn = (dem.at(0, yn, x) - dem.at(0, ys, x)) / ((ys - yn) * cell);
            const double norm = std::sqrt(dz_de * dz_de + dz_dn * dz_dn + 1.0);
            const double shade = (-dz_de * sun_e - dz_dn * sun_n + sun_u) / norm;
            out.at(0, y, x) = std::max(0.0, shade);
        }
    }
    return out;
}

TerrainPair synthesize_terrain_pair(std::uint64_t seed, int size, const TerrainOptions& options) {
    if (size < 16) throw Error(ErrorKind::argument, "synthetic tiles must be at least 16 pixels");
    Rng rng(derive_seed(seed, "terrain"));
    GeoRegion region{0.0, 1.0, 0.0, 1.0, options.resolution};

    const double base = 3000.0 * uniform01(rng);
    const double relief =
        options.min_relief * std::pow(options.max_relief / options.min_relief, uniform01(rng));
    const double shaping = 0.8 + 1.2 * uniform01(rng);
    const double offset_x = 1000.0 * uniform01(rng);
    const double offset_y = 1000.0 * uniform01(rng);
    const double base_cell = size / (1.5 + 2.0 * uniform01(rng));
    const std::uint64_t noise_seed = rng();

    TerrainPair pair{RasterTile(size, size, 3, ValueDomain::raw, region),
                     RasterTile(size, size, 1, ValueDomain::raw, region)};
    RasterTile& dem = pair.dem;
    if (options.flat) {
        for (double& v : dem.values()) v = base;
    } else {
        constexpr int kOctaves = 5;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                double amp = 1.0;
                double freq = 1.0 / base_cell;
                double sum = 0.0;
                for (int o = 0; o < kOctaves; ++o) {
                    sum += amp * value_noise(noise_seed + static_cast<std::uint64_t>(o),
                                             (x + offset_x) * freq, (y + offset_y) * freq);
                    amp *= 0.5;
                    freq *= 2.0;
                }
                dem.at(0, y, x) = sum;
                lo = std::min(lo, sum);
                hi = std::max(hi, sum);
            }
        }
        const double span = hi > lo ? hi - lo : 1.0;
        for (double& v : dem.values()) v = base + relief * std::pow((v - lo) / span, shaping);
    }

    const RasterTile shade = render_hillshade(dem);
    const double dem_min = *std::min_element(dem.values().begin(), dem.values().end());
    const double dem_max = *std::max_element(dem.values().begin(), dem.values().end());
    const double range = dem_max - dem_min;
    const double tint = std::min(1.0, range / kFullTintRelief);
    Rng noise_rng(derive_seed(seed, "terrain-noise"));
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double t = range > 0.0 ? (dem.at(0, y, x) - dem_min) / range : 0.0;
            const Rgb color = lerp(kNeutral, banded_color(t), tint);
            const double lit = 0.35 + 0.65 * shade.at(0, y, x);
            const double channels[3] = {color.r, color.g, color.b};
            for (int b = 0; b < 3; ++b) {
                const double v = channels[b] * lit * kCountsPerLevel + options.noise_sigma * standard_normal(noise_rng);
                pair.rgb.at(b, y, x) = std::max(0.0, v);
            }
        }
    }
    return pair;
}

// ---- catalog ----------------------------------------------------------------

SceneCatalog load_catalog(const fs::path& index_path) {
    std::ifstream in(index_path);
    if (!in) throw Error(ErrorKind::io, "cannot open catalog index '" + index_path.string() + "'");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, "malformed catalog index '" + index_path.string() + "': " + e.what());
    }
    SceneCatalog catalog;
    catalog.root = index_path.parent_path();
    try {
        for (const auto& r : doc.at("regions")) {
            CatalogRegion region;
            region.region_id = r.at("region_id").get<std::string>();
            region.region = {r.at("lat_min").get<double>(), r.at("lat_max").get<double>(),
                             r.at("lon_min").get<double>(), r.at("lon_max").get<double>(),
                             r.value("resolution_m", 30.0)};
            region.dem_path = r.at("dem_path").get<std::string>();
            for (const auto& s : r.at("scenes")) {
                CatalogScene scene;
                scene.path = s.at("path").get<std::string>();
                scene.mask_path = s.value("mask_path", std::string{});
                scene.sensor = sensor_role_from_string(s.at("sensor").get<std::string>());
                scene.date = s.value("date", std::string{});
                scene.cloud_cover = s.at("cloud_cover").get<double>();
                region.scenes.push_back(std::move(scene));
            }
            catalog.regions.push_back(std::move(region));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, "catalog index '" + index_path.string() + "': " + e.what());
    }
    return catalog;
}

void save_catalog(const fs::path& index_path, const SceneCatalog& catalog) {
    json doc;
    doc["format_version"] = 1;
    doc["regions"] = json::array();
    for (const auto& r : catalog.regions) {
        json jr = {{"region_id", r.region_id},     {"lat_min", r.region.lat_min}, {"lat_max", r.region.lat_max},
                   {"lon_min", r.region.lon_min},  {"lon_max", r.region.lon_max},
                   {"resolution_m", r.region.resolution}, {"dem_path", r.dem_path}};
        jr["scenes"] = json::array();
        for (const auto& s : r.scenes) {
            jr["scenes"].push_back({{"path", s.path},
                                    {"mask_path", s.mask_path},
                                    {"sensor", to_string(s.sensor)},
                                    {"date", s.date},
                                    {"cloud_cover", s.cloud_cover}});
        }
        doc["regions"].push_back(std::move(jr));
    }
    if (index_path.has_parent_path()) fs::create_directories(index_path.parent_path());
    std::ofstream out(index_path);
    if (!out) throw Error(ErrorKind::io, "cannot write catalog index '" + index_path.string() + "'");
    out << doc.dump(2) << '\n';
}

ImageStack load_image_stack(const SceneCatalog& catalog, const CatalogRegion& region) {
    ImageStack stack{region.region, {}};
    for (const auto& s : region.scenes) {
        SceneRecord scene;
        scene.sensor = s.sensor;
        scene.acquisition_date = s.date;
        scene.scene_cloud_cover = s.cloud_cover;
        scene.rgb = read_geotiff(catalog.root / s.path);
        if (!s.mask_path.empty()) {
            int w = 0;
            int h = 0;
            scene.quality_mask = read_mask_geotiff(catalog.root / s.mask_path, w, h);
            if (w != scene.rgb.width() || h != scene.rgb.height()) {
                throw Error(ErrorKind::alignment, "mask '" + s.mask_path + "' does not match its scene");
            }
        } else {
            scene.quality_mask.assign(scene.rgb.pixel_count(), 0);
        }
        stack.scenes.push_back(std::move(scene));
    }
    return stack;
}

fs::path write_synthetic_catalog(const fs::path& dir, const SyntheticCatalogOptions& options) {
    if (options.regions < 1) throw Error(ErrorKind::argument, "synthetic catalog needs at least one region");
    Rng rng(derive_seed(options.seed, "synthetic-catalog"));
    SceneCatalog catalog;
    catalog.root = dir;
    const int size = options.size;
    const int degenerate_count = static_cast<int>(std::lround(options.degenerate_fraction * options.regions));

    for (int r = 0; r < options.regions; ++r) {
        char id[32];
        std::snprintf(id, sizeof(id), "site_%05d", r);
        const LatLon center{-50.0 + 110.0 * uniform01(rng), -180.0 + 360.0 * uniform01(rng)};
        CatalogRegion region;
        region.region_id = id;
        region.region = buffer_site(center, kDefaultSiteBuffer, options.terrain.resolution);

        const std::uint64_t pair_seed = derive_seed(options.seed, std::string("pair/") + id);
        TerrainPair truth = synthesize_terrain_pair(pair_seed, size, options.terrain);
        truth.rgb.set_georef(region.region);
        truth.dem.set_georef(region.region);
        const bool degenerate = r < degenerate_count;
        if (degenerate) {
            // Quantized water-like surface: very few distinct levels.
            for (double& v : truth.rgb.values()) v = 400.0 * std::floor(v / 2000.0) + 800.0;
        }
        region.dem_path = "dem/" + region.region_id + ".tif";
        write_geotiff(dir / region.dem_path, truth.dem);

        // Some regions lose a vertical strip in every primary scene.
        const bool primary_gap = !degenerate && uniform01(rng) < 0.3;
        const int gap_x0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(size / 2)));
        const int gap_w = size / 6;

        const int n_scenes = options.primary_scenes + options.fallback_scenes;
        for (int s = 0; s < n_scenes; ++s) {
            const SensorRole role = s < options.primary_scenes ? SensorRole::primary : SensorRole::fallback;
            Rng scene_rng(derive_seed(pair_seed, "scene/" + std::to_string(s)));
            const double target_cover =
                options.all_cloudy ? 25.0 + 50.0 * uniform01(scene_rng)
                                   : (s % 3 == 2 ? 25.0 + 40.0 * uniform01(scene_rng) : 12.0 * uniform01(scene_rng));
            const double gain = degenerate ? 1.0 : 1.0 + 0.03 * standard_normal(scene_rng);
            const double noise = degenerate ? 0.0 : options.terrain.noise_sigma;

            RasterTile rgb = truth.rgb;
            for (double& v : rgb.values()) v = std::max(0.0, v * gain + noise * standard_normal(scene_rng));

            std::vector<std::uint8_t> mask(rgb.pixel_count(), 0);
            const std::size_t target_pixels =
                static_cast<std::size_t>(target_cover / 100.0 * static_cast<double>(rgb.pixel_count()));
            std::size_t covered = 0;
            int guard = 0;
            while (covered < target_pixels && guard++ < 200) {
                const double cy = size * uniform01(scene_rng);
                const double cx = size * uniform01(scene_rng);
                const double radius = size * (0.05 + 0.1 * uniform01(scene_rng));
                for (int y = 0; y < size; ++y) {
                    for (int x = 0; x < size; ++x) {
                        const double dy = y - cy;
                        const double dx = x - cx;
                        const std::size_t i = static_cast<std::size_t>(y) * size + x;
                        if (dx * dx + dy * dy <= radius * radius && mask[i] == 0) {
                            mask[i] = 1;
                            ++covered;
                            for (int b = 0; b < 3; ++b) rgb.at(b, y, x) = 9000.0 + 300.0 * uniform01(scene_rng);
                        }
                    }
                }
            }
            if (role == SensorRole::primary && primary_gap) {
                for (int y = 0; y < size; ++y) {
                    for (int x = gap_x0; x < std::min(size, gap_x0 + gap_w); ++x) rgb.set_masked(y, x, true);
                }
            }

            CatalogScene scene;
            scene.sensor = role;
            scene.date = date_for(static_cast<int>(uniform_index(scene_rng, 366)));
            scene.cloud_cover = 100.0 * static_cast<double>(covered) / static_cast<double>(rgb.pixel_count());
            scene.path = "scenes/" + region.region_id + "_" + std::to_string(s) + ".tif";
            scene.mask_path = "masks/" + region.region_id + "_" + std::to_string(s) + ".tif";
            write_geotiff(dir / scene.path, rgb, {SampleType::f32});
            write_mask_geotiff(dir / scene.mask_path, mask, size, size, region.region);
            region.scenes.push_back(std::move(scene));
        }
        catalog.regions.push_back(std::move(region));
    }
    const fs::path index = dir / "index.json";
    save_catalog(index, catalog);
    return index;
}

}  // namespace demgan
