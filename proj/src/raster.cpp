#include "demgan/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "demgan/error.hpp"

namespace demgan {

namespace {

std::vector<double> unmasked_band_values(const RasterTile& tile, int b) {
    std::vector<double> out;
    out.reserve(tile.pixel_count());
    const auto values = tile.band(b);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!tile.masked(i)) out.push_back(values[i]);
    }
    return out;
}

void zero_masked(RasterTile& tile) {
    for (int b = 0; b < tile.bands(); ++b) {
        auto values = tile.band(b);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (tile.masked(i)) values[i] = 0.0;
        }
    }
}

}  // namespace

void GeoRegion::validate() const {
    if (!(lat_min < lat_max) || !(lon_min < lon_max)) {
        throw Error(ErrorKind::argument, "geo region bounds must satisfy min < max");
    }
    if (!(resolution > 0.0)) {
        throw Error(ErrorKind::argument, "geo region resolution must be positive");
    }
}

const char* to_string(ValueDomain domain) {
    switch (domain) {
        case ValueDomain::raw: return "raw";
        case ValueDomain::jpeg_0_255: return "jpeg_0_255";
        case ValueDomain::signed_unit: return "signed_unit";
    }
    return "raw";
}

ValueDomain value_domain_from_string(std::string_view name) {
    if (name == "raw") return ValueDomain::raw;
    if (name == "jpeg_0_255") return ValueDomain::jpeg_0_255;
    if (name == "signed_unit") return ValueDomain::signed_unit;
    throw Error(ErrorKind::argument, "unknown value domain '" + std::string(name) + "'");
}

RasterTile::RasterTile(int width, int height, int bands, ValueDomain domain, GeoRegion georef)
    : width_(width), height_(height), bands_(bands), domain_(domain), georef_(georef) {
    if (width <= 0 || height <= 0 || bands <= 0) {
        throw Error(ErrorKind::argument, "raster dimensions must be positive");
    }
    values_.assign(static_cast<std::size_t>(bands) * pixel_count(), 0.0);
    mask_.assign(pixel_count(), 0);
}

std::span<double> RasterTile::band(int b) {
    return std::span<double>(values_).subspan(static_cast<std::size_t>(b) * pixel_count(), pixel_count());
}

std::span<const double> RasterTile::band(int b) const {
    return std::span<const double>(values_).subspan(static_cast<std::size_t>(b) * pixel_count(),
                                                    pixel_count());
}

std::size_t RasterTile::valid_count() const {
    return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{0}));
}

void RasterTile::validate() const {
    if (values_.size() != static_cast<std::size_t>(bands_) * pixel_count() || mask_.size() != pixel_count()) {
        throw Error(ErrorKind::domain, "raster storage does not match its dimensions");
    }
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    if (domain_ == ValueDomain::jpeg_0_255) {
        lo = 0.0;
        hi = 255.0;
    } else if (domain_ == ValueDomain::signed_unit) {
        lo = -1.0;
        hi = 1.0;
    }
    for (int b = 0; b < bands_; ++b) {
        const auto values = band(b);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (masked(i)) continue;
            if (!(values[i] >= lo && values[i] <= hi)) {
                throw Error(ErrorKind::domain, std::string("value outside the ") + to_string(domain_) +
                                                   " domain");
            }
        }
    }
}

void StretchParams::validate() const {
    if (!(lower_percentile >= 0.0 && lower_percentile < upper_percentile && upper_percentile <= 100.0)) {
        throw Error(ErrorKind::argument, "stretch percentiles must satisfy 0 <= lower < upper <= 100");
    }
}

double percentile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw Error(ErrorKind::degenerate_input, "percentile of an empty sample");
    const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0) return sorted[lo];
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

RasterTile stretch_min_max(const RasterTile& tile, const StretchParams& params) {
    params.validate();
    RasterTile out = tile;
    out.set_domain(ValueDomain::jpeg_0_255);
    for (int b = 0; b < tile.bands(); ++b) {
        auto sample = unmasked_band_values(tile, b);
        if (sample.empty()) {
            throw Error(ErrorKind::degenerate_input, "band " + std::to_string(b) + " has no unmasked pixels");
        }
        std::sort(sample.begin(), sample.end());
        const double p_min = percentile_sorted(sample, params.lower_percentile);
        const double p_max = percentile_sorted(sample, params.upper_percentile);
        const double span = p_max - p_min;
        auto values = out.band(b);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (tile.masked(i)) continue;
            double v = 0.0;
            if (span > 0.0) {
                const double p = values[i];
                if (p <= p_min) {
                    v = 0.0;
                } else if (p >= p_max) {
                    v = 255.0;
                } else {
                    v = 255.0 * ((p - p_min) / span);
                }
            }
            if (params.round_to_8bit) v = std::round(v);
            values[i] = v;
        }
    }
    zero_masked(out);
    return out;
}

RasterTile scale_to_signed_unit(const RasterTile& tile) {
    if (tile.domain() != ValueDomain::jpeg_0_255) {
        throw Error(ErrorKind::domain, std::string("expected a jpeg_0_255 tile, got ") + to_string(tile.domain()));
    }
    RasterTile out = tile;
    out.set_domain(ValueDomain::signed_unit);
    for (double& v : out.values()) v = v / 127.5 - 1.0;
    zero_masked(out);
    return out;
}

RasterTile signed_unit_to_jpeg(const RasterTile& tile) {
    if (tile.domain() != ValueDomain::signed_unit) {
        throw Error(ErrorKind::domain, std::string("expected a signed_unit tile, got ") + to_string(tile.domain()));
    }
    RasterTile out = tile;
    out.set_domain(ValueDomain::jpeg_0_255);
    for (double& v : out.values()) v = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
    zero_masked(out);
    return out;
}

RasterTile to_relative_elevation(const RasterTile& dem) {
    if (dem.bands() != 1) throw Error(ErrorKind::argument, "relative elevation needs a single-band DEM");
    const auto values = dem.band(0);
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!dem.masked(i)) lowest = std::min(lowest, values[i]);
    }
    if (!std::isfinite(lowest)) throw Error(ErrorKind::degenerate_input, "DEM has no unmasked pixels");
    RasterTile out = dem;
    for (double& v : out.values()) v -= lowest;
    zero_masked(out);
    return out;
}

RasterTile resample_tile(const RasterTile& tile, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw Error(ErrorKind::argument, "resample target must be at least 1x1");
    if (out_w == tile.width() && out_h == tile.height()) return tile;

    RasterTile out(out_w, out_h, tile.bands(), tile.domain(), tile.georef());
    const double sx = static_cast<double>(tile.width()) / out_w;
    const double sy = static_cast<double>(tile.height()) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, tile.height() - 1.0);
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, tile.height() - 1);
        const double ty = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, tile.width() - 1.0);
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, tile.width() - 1);
            const double tx = fx - x0;
            const int ys[4] = {y0, y0, y1, y1};
            const int xs[4] = {x0, x1, x0, x1};
            double w[4] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
            double total = 0.0;
            for (int k = 0; k < 4; ++k) {
                if (tile.masked(ys[k], xs[k])) w[k] = 0.0;
                total += w[k];
            }
            if (total <= 0.0) {
                out.set_masked(y, x, true);
                continue;
            }
            for (int b = 0; b < tile.bands(); ++b) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k) {
                    if (w[k] != 0.0) acc += w[k] * tile.at(b, ys[k], xs[k]);
                }
                out.at(b, y, x) = acc / total;
            }
        }
    }
    return out;
}

}  // namespace demgan
