#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "demgan/raster.hpp"

namespace demgan {

enum class SampleType { u8, f32, f64 };

struct GeoTiffWriteOptions {
    SampleType sample_type = SampleType::f64;
};

/// Writes an uncompressed, single-strip, pixel-interleaved GeoTIFF in
/// geographic (EPSG:4326) coordinates. Masked pixels are written as the
/// nodata value advertised in the GDAL_NODATA tag (NaN for float samples,
/// 255 for u8). Value domain and resolution travel in GDAL_METADATA.
void write_geotiff(const std::filesystem::path& path, const RasterTile& tile,
                   const GeoTiffWriteOptions& options = {});

/// Reads baseline uncompressed TIFF/GeoTIFF: either byte order, strips,
/// chunky or planar, 8/16/32-bit integer and 32/64-bit float samples.
RasterTile read_geotiff(const std::filesystem::path& path);

/// Single-band 0/1 quality mask (1 = cloud or shadow).
void write_mask_geotiff(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, int width,
                        int height, const GeoRegion& region);
std::vector<std::uint8_t> read_mask_geotiff(const std::filesystem::path& path, int& width, int& height);

/// 8-bit PNG preview: grayscale for one band, RGB for three. Raw tiles are
/// percentile-stretched first; masked pixels are black.
void write_png_preview(const std::filesystem::path& path, const RasterTile& tile);

}  // namespace demgan
