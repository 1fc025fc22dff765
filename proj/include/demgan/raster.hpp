#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace demgan {

struct GeoRegion {
    double lat_min = 0.0;
    double lat_max = 1.0;
    double lon_min = 0.0;
    double lon_max = 1.0;
    double resolution = 30.0;  // meters per pixel

    void validate() const;
    bool operator==(const GeoRegion&) const = default;
};

enum class ValueDomain { raw, jpeg_0_255, signed_unit };

const char* to_string(ValueDomain domain);
ValueDomain value_domain_from_string(std::string_view name);

/// Band-planar raster: values[(band * height + y) * width + x]. The nodata
/// mask is per pixel and shared by all bands.
class RasterTile {
public:
    RasterTile() = default;
    RasterTile(int width, int height, int bands, ValueDomain domain = ValueDomain::raw,
               GeoRegion georef = {});

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int bands() const noexcept { return bands_; }
    std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
    }

    ValueDomain domain() const noexcept { return domain_; }
    void set_domain(ValueDomain domain) noexcept { domain_ = domain; }
    const GeoRegion& georef() const noexcept { return georef_; }
    void set_georef(const GeoRegion& region) { georef_ = region; }

    double& at(int band, int y, int x) { return values_[index(band, y, x)]; }
    double at(int band, int y, int x) const { return values_[index(band, y, x)]; }

    std::span<double> band(int b);
    std::span<const double> band(int b) const;
    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    bool masked(std::size_t pixel) const { return mask_[pixel] != 0; }
    bool masked(int y, int x) const { return masked(static_cast<std::size_t>(y) * width_ + x); }
    void set_masked(std::size_t pixel, bool value) { mask_[pixel] = value ? 1 : 0; }
    void set_masked(int y, int x, bool value) { set_masked(static_cast<std::size_t>(y) * width_ + x, value); }
    std::span<const std::uint8_t> mask() const noexcept { return mask_; }
    std::size_t valid_count() const;

    bool same_shape(const RasterTile& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_ && bands_ == other.bands_;
    }
    bool same_grid(const RasterTile& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }

    /// Throws if the stored values violate the declared value domain.
    void validate() const;

    bool operator==(const RasterTile&) const = default;

private:
    std::size_t index(int band, int y, int x) const {
        return (static_cast<std::size_t>(band) * height_ + y) * width_ + x;
    }

    int width_ = 0;
    int height_ = 0;
    int bands_ = 0;
    ValueDomain domain_ = ValueDomain::raw;
    GeoRegion georef_{};
    std::vector<double> values_;
    std::vector<std::uint8_t> mask_;
};

struct StretchParams {
    double lower_percentile = 2.0;   // in percent
    double upper_percentile = 98.0;  // in percent
    bool round_to_8bit = false;      // strict-JPEG quantization of the stretched output

    void validate() const;
};

/// Linear-interpolation percentile (p in percent) of an ascending-sorted sample.
double percentile_sorted(std::span<const double> sorted, double p);

/// Percentile stretch of every band into [0, 255], clamped. Constant bands map to 0.
RasterTile stretch_min_max(const RasterTile& tile, const StretchParams& params = {});

/// v -> v / 127.5 - 1 for a jpeg_0_255 tile.
RasterTile scale_to_signed_unit(const RasterTile& tile);

/// Inverse of scale_to_signed_unit.
RasterTile signed_unit_to_jpeg(const RasterTile& tile);

/// Subtracts the minimum unmasked value of a single-band DEM.
RasterTile to_relative_elevation(const RasterTile& dem);

/// Bilinear resample on pixel centers; masked pixels carry zero weight and an
/// output pixel is masked only when all of its contributing inputs are.
RasterTile resample_tile(const RasterTile& tile, int out_w, int out_h);

}  // namespace demgan
