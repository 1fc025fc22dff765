#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "demgan/raster.hpp"

namespace demgan {

/// primary = Landsat-5 role, fallback = Landsat-7 role.
enum class SensorRole { primary, fallback };

const char* to_string(SensorRole role);
SensorRole sensor_role_from_string(const std::string& name);

struct SceneRecord {
    SensorRole sensor = SensorRole::primary;
    std::string acquisition_date;  // YYYY-MM-DD
    double scene_cloud_cover = 0.0;  // percent
    RasterTile rgb;
    std::vector<std::uint8_t> quality_mask;  // 1 = cloud or cloud shadow
};

struct ImageStack {
    GeoRegion region;
    std::vector<SceneRecord> scenes;

    /// All scenes on one pixel grid with aligned masks.
    void validate() const;
};

inline constexpr double kDefaultMaxSceneCloudCover = 20.0;

/// Keeps scenes whose cloud cover is strictly below max_cover.
ImageStack filter_scenes_by_cloud(const ImageStack& stack, double max_cover = kDefaultMaxSceneCloudCover);

SceneRecord apply_quality_mask(const SceneRecord& scene);

/// Per pixel and band, the median over scenes where the pixel is unmasked
/// (even counts average the two middle values). Nodata where no scene is valid.
RasterTile median_composite(const ImageStack& stack);

/// Primary value where valid, else fallback value, else nodata.
RasterTile sensor_fallback_merge(const RasterTile& primary, const RasterTile& fallback);

enum class FallbackMode { per_pixel, per_region };

struct MosaicOptions {
    double max_cloud_cover = kDefaultMaxSceneCloudCover;
    FallbackMode fallback_mode = FallbackMode::per_pixel;
};

/// Filter, mask, and composite each sensor role, then merge with the primary
/// sensor taking priority. Throws empty_dataset when no valid pixel survives.
RasterTile build_region_mosaic(const ImageStack& stack, const MosaicOptions& options = {});

// ---- synthetic terrain oracle ---------------------------------------------

struct TerrainOptions {
    bool flat = false;
    /// Elevation range drawn log-uniformly from [min_relief, max_relief] meters.
    double min_relief = 10.0;
    double max_relief = 2500.0;
    double resolution = 30.0;
    /// Sensor noise, in reflectance counts.
    double noise_sigma = 120.0;
};

struct TerrainPair {
    RasterTile rgb;  // raw reflectance counts
    RasterTile dem;  // meters
};

/// Hillshade in [0, 1] from a single-band DEM (azimuth and altitude in degrees).
RasterTile render_hillshade(const RasterTile& dem, double azimuth_deg = 315.0, double altitude_deg = 45.0);

/// Deterministic multi-octave value-noise terrain with an RGB rendering made
/// of hillshading, elevation-banded color, and seeded noise.
TerrainPair synthesize_terrain_pair(std::uint64_t seed, int size, const TerrainOptions& options = {});

// ---- scene catalog ----------------------------------------------------------

struct CatalogScene {
    std::string path;       // RGB GeoTIFF, relative to the catalog root
    std::string mask_path;  // 0/1 mask GeoTIFF, relative to the catalog root
    SensorRole sensor = SensorRole::primary;
    std::string date;
    double cloud_cover = 0.0;
};

struct CatalogRegion {
    std::string region_id;
    GeoRegion region;
    std::string dem_path;
    std::vector<CatalogScene> scenes;
};

struct SceneCatalog {
    std::filesystem::path root;
    std::vector<CatalogRegion> regions;
};

SceneCatalog load_catalog(const std::filesystem::path& index_path);
void save_catalog(const std::filesystem::path& index_path, const SceneCatalog& catalog);
ImageStack load_image_stack(const SceneCatalog& catalog, const CatalogRegion& region);

struct SyntheticCatalogOptions {
    int regions = 10;
    int size = 64;
    std::uint64_t seed = 0;
    int primary_scenes = 3;
    int fallback_scenes = 2;
    /// Fraction of regions rendered as near-constant, low-diversity tiles.
    double degenerate_fraction = 0.0;
    /// Every scene over the cloud threshold.
    bool all_cloudy = false;
    TerrainOptions terrain{};
};

/// Writes scenes, masks, DEMs and index.json under dir; returns the index path.
std::filesystem::path write_synthetic_catalog(const std::filesystem::path& dir, const SyntheticCatalogOptions& options);

}  // namespace demgan
