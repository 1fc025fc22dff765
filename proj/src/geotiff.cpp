#include "demgan/geotiff.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <regex>
#include <sstream>
#include <string>

#include "demgan/error.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;

enum TiffType : std::uint16_t {
    kByte = 1,
    kAscii = 2,
    kShort = 3,
    kLong = 4,
    kRational = 5,
    kSByte = 6,
    kUndefined = 7,
    kSShort = 8,
    kSLong = 9,
    kSRational = 10,
    kFloat = 11,
    kDouble = 12,
};

constexpr std::uint16_t kTagWidth = 256;
constexpr std::uint16_t kTagHeight = 257;
constexpr std::uint16_t kTagBitsPerSample = 258;
constexpr std::uint16_t kTagCompression = 259;
constexpr std::uint16_t kTagPhotometric = 262;
constexpr std::uint16_t kTagStripOffsets = 273;
constexpr std::uint16_t kTagSamplesPerPixel = 277;
constexpr std::uint16_t kTagRowsPerStrip = 278;
constexpr std::uint16_t kTagStripByteCounts = 279;
constexpr std::uint16_t kTagPlanarConfig = 284;
constexpr std::uint16_t kTagExtraSamples = 338;
constexpr std::uint16_t kTagSampleFormat = 339;
constexpr std::uint16_t kTagPixelScale = 33550;
constexpr std::uint16_t kTagTiepoint = 33922;
constexpr std::uint16_t kTagGeoKeys = 34735;
constexpr std::uint16_t kTagGdalMetadata = 42112;
constexpr std::uint16_t kTagGdalNodata = 42113;

constexpr double kMetersPerDegree = 111320.0;

std::size_t type_size(std::uint16_t type) {
    switch (type) {
        case kByte: case kAscii: case kSByte: case kUndefined: return 1;
        case kShort: case kSShort: return 2;
        case kLong: case kSLong: case kFloat: return 4;
        case kRational: case kSRational: case kDouble: return 8;
        default: return 0;
    }
}

// ---- writer --------------------------------------------------------------

struct OutEntry {
    std::uint16_t tag;
    std::uint16_t type;
    std::uint32_t count;
    std::vector<std::uint8_t> payload;
};

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.insert(out.end(), bytes, bytes + sizeof(T));
}

OutEntry shorts(std::uint16_t tag, const std::vector<std::uint16_t>& values) {
    OutEntry e{tag, kShort, static_cast<std::uint32_t>(values.size()), {}};
    for (auto v : values) append_le(e.payload, v);
    return e;
}

OutEntry longs(std::uint16_t tag, const std::vector<std::uint32_t>& values) {
    OutEntry e{tag, kLong, static_cast<std::uint32_t>(values.size()), {}};
    for (auto v : values) append_le(e.payload, v);
    return e;
}

OutEntry doubles(std::uint16_t tag, const std::vector<double>& values) {
    OutEntry e{tag, kDouble, static_cast<std::uint32_t>(values.size()), {}};
    for (auto v : values) append_le(e.payload, v);
    return e;
}

OutEntry ascii(std::uint16_t tag, const std::string& text) {
    OutEntry e{tag, kAscii, static_cast<std::uint32_t>(text.size() + 1), {}};
    e.payload.assign(text.begin(), text.end());
    e.payload.push_back(0);
    return e;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_file_atomically(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::io, "failed writing '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

void write_tiff(const fs::path& path, int width, int height, int bands, SampleType type,
                const std::vector<std::uint8_t>& pixels, const GeoRegion& region, const std::string& nodata,
                const std::map<std::string, std::string>& metadata) {
    const std::uint16_t bits = type == SampleType::u8 ? 8 : (type == SampleType::f32 ? 32 : 64);
    const std::uint16_t format = type == SampleType::u8 ? 1 : 3;
    const auto spp = static_cast<std::uint16_t>(bands);

    std::vector<OutEntry> entries;
    entries.push_back(longs(kTagWidth, {static_cast<std::uint32_t>(width)}));
    entries.push_back(longs(kTagHeight, {static_cast<std::uint32_t>(height)}));
    entries.push_back(shorts(kTagBitsPerSample, std::vector<std::uint16_t>(spp, bits)));
    entries.push_back(shorts(kTagCompression, {1}));
    entries.push_back(shorts(kTagPhotometric, {static_cast<std::uint16_t>(bands == 3 ? 2 : 1)}));
    entries.push_back(longs(kTagStripOffsets, {0}));  // patched below
    entries.push_back(shorts(kTagSamplesPerPixel, {spp}));
    entries.push_back(longs(kTagRowsPerStrip, {static_cast<std::uint32_t>(height)}));
    entries.push_back(longs(kTagStripByteCounts, {static_cast<std::uint32_t>(pixels.size())}));
    entries.push_back(shorts(kTagPlanarConfig, {1}));
    if (bands != 1 && bands != 3) {
        entries.push_back(shorts(kTagExtraSamples, std::vector<std::uint16_t>(bands - 1, 0)));
    }
    entries.push_back(shorts(kTagSampleFormat, std::vector<std::uint16_t>(spp, format)));

    const double scale_x = (region.lon_max - region.lon_min) / width;
    const double scale_y = (region.lat_max - region.lat_min) / height;
    entries.push_back(doubles(kTagPixelScale, {scale_x, scale_y, 0.0}));
    entries.push_back(doubles(kTagTiepoint, {0.0, 0.0, 0.0, region.lon_min, region.lat_max, 0.0}));
    // GTModelType=Geographic, GTRasterType=PixelIsArea, GeographicType=WGS84
    entries.push_back(shorts(kTagGeoKeys, {1, 1, 0, 3, 1024, 0, 1, 2, 1025, 0, 1, 1, 2048, 0, 1, 4326}));

    std::string xml = "<GDALMetadata>\n";
    for (const auto& [key, value] : metadata) {
        xml += "  <Item name=\"" + key + "\">" + value + "</Item>\n";
    }
    xml += "</GDALMetadata>";
    entries.push_back(ascii(kTagGdalMetadata, xml));
    entries.push_back(ascii(kTagGdalNodata, nodata));

    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.tag < b.tag; });

    const std::uint32_t ifd_offset = 8;
    const std::uint32_t ifd_size = 2 + 12 * static_cast<std::uint32_t>(entries.size()) + 4;
    std::uint32_t cursor = ifd_offset + ifd_size;
    std::vector<std::uint32_t> payload_offsets(entries.size(), 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].payload.size() > 4) {
            cursor += cursor % 2;
            payload_offsets[i] = cursor;
            cursor += static_cast<std::uint32_t>(entries[i].payload.size());
        }
    }
    cursor += (8 - cursor % 8) % 8;
    const std::uint32_t image_offset = cursor;
    for (auto& e : entries) {
        if (e.tag == kTagStripOffsets) {
            e.payload.clear();
            append_le(e.payload, image_offset);
        }
    }

    std::vector<std::uint8_t> out;
    out.reserve(image_offset + pixels.size());
    out.push_back('I');
    out.push_back('I');
    append_le<std::uint16_t>(out, 42);
    append_le<std::uint32_t>(out, ifd_offset);
    append_le(out, static_cast<std::uint16_t>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        append_le(out, e.tag);
        append_le(out, e.type);
        append_le(out, e.count);
        if (e.payload.size() > 4) {
            append_le(out, payload_offsets[i]);
        } else {
            auto field = e.payload;
            field.resize(4, 0);
            out.insert(out.end(), field.begin(), field.end());
        }
    }
    append_le<std::uint32_t>(out, 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].payload.size() <= 4) continue;
        out.resize(payload_offsets[i], 0);
        out.insert(out.end(), entries[i].payload.begin(), entries[i].payload.end());
    }
    out.resize(image_offset, 0);
    out.insert(out.end(), pixels.begin(), pixels.end());
    write_file_atomically(path, out);
}

// ---- reader --------------------------------------------------------------

class TiffReader {
public:
    explicit TiffReader(const fs::path& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorKind::io, "cannot open '" + path.string() + "'");
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        if (bytes_.size() < 8) fail("file too short");
        if (bytes_[0] == 'I' && bytes_[1] == 'I') {
            swap_ = std::endian::native == std::endian::big;
        } else if (bytes_[0] == 'M' && bytes_[1] == 'M') {
            swap_ = std::endian::native == std::endian::little;
        } else {
            fail("not a TIFF file");
        }
        if (read<std::uint16_t>(2) != 42) fail("unsupported TIFF variant");
        const std::uint32_t ifd = read<std::uint32_t>(4);
        const std::uint16_t n = read<std::uint16_t>(ifd);
        for (std::uint16_t i = 0; i < n; ++i) {
            const std::size_t at = ifd + 2 + 12 * static_cast<std::size_t>(i);
            Field f;
            f.type = read<std::uint16_t>(at + 2);
            f.count = read<std::uint32_t>(at + 4);
            const std::size_t size = type_size(f.type) * f.count;
            f.offset = size <= 4 ? at + 8 : read<std::uint32_t>(at + 8);
            if (type_size(f.type) != 0) {
                if (f.offset + size > bytes_.size()) fail("tag data out of range");
                fields_[read<std::uint16_t>(at)] = f;
            }
        }
    }

    bool has(std::uint16_t tag) const { return fields_.count(tag) != 0; }

    std::vector<double> numbers(std::uint16_t tag) const {
        const auto it = fields_.find(tag);
        if (it == fields_.end()) fail("missing tag " + std::to_string(tag));
        const Field& f = it->second;
        std::vector<double> out;
        out.reserve(f.count);
        const std::size_t sz = type_size(f.type);
        for (std::uint32_t i = 0; i < f.count; ++i) {
            const std::size_t at = f.offset + i * sz;
            switch (f.type) {
                case kByte: case kUndefined: out.push_back(bytes_[at]); break;
                case kSByte: out.push_back(static_cast<std::int8_t>(bytes_[at])); break;
                case kShort: out.push_back(read<std::uint16_t>(at)); break;
                case kSShort: out.push_back(read<std::int16_t>(at)); break;
                case kLong: out.push_back(read<std::uint32_t>(at)); break;
                case kSLong: out.push_back(read<std::int32_t>(at)); break;
                case kFloat: out.push_back(read<float>(at)); break;
                case kDouble: out.push_back(read<double>(at)); break;
                case kRational:
                    out.push_back(static_cast<double>(read<std::uint32_t>(at)) / read<std::uint32_t>(at + 4));
                    break;
                case kSRational:
                    out.push_back(static_cast<double>(read<std::int32_t>(at)) / read<std::int32_t>(at + 4));
                    break;
                default: fail("unsupported tag type");
            }
        }
        return out;
    }

    double number(std::uint16_t tag, double fallback) const {
        if (!has(tag)) return fallback;
        return numbers(tag).front();
    }

    std::string text(std::uint16_t tag) const {
        const auto it = fields_.find(tag);
        if (it == fields_.end()) return {};
        const Field& f = it->second;
        std::string s(reinterpret_cast<const char*>(bytes_.data() + f.offset), f.count);
        while (!s.empty() && s.back() == '\0') s.pop_back();
        return s;
    }

    double sample(std::size_t at, int bits, int format) const {
        if (at + bits / 8 > bytes_.size()) fail("pixel data out of range");
        if (format == 3) {
            if (bits == 32) return read<float>(at);
            if (bits == 64) return read<double>(at);
        } else if (format == 2) {
            if (bits == 8) return static_cast<std::int8_t>(bytes_[at]);
            if (bits == 16) return read<std::int16_t>(at);
            if (bits == 32) return read<std::int32_t>(at);
        } else {
            if (bits == 8) return bytes_[at];
            if (bits == 16) return read<std::uint16_t>(at);
            if (bits == 32) return read<std::uint32_t>(at);
        }
        fail("unsupported sample layout");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw Error(ErrorKind::io, "'" + path_.string() + "': " + what);
    }

private:
    struct Field {
        std::uint16_t type = 0;
        std::uint32_t count = 0;
        std::size_t offset = 0;
    };

    template <typename T>
    T read(std::size_t at) const {
        if (at + sizeof(T) > bytes_.size()) fail("read past end of file");
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, bytes_.data() + at, sizeof(T));
        if (swap_) std::reverse(raw, raw + sizeof(T));
        T value;
        std::memcpy(&value, raw, sizeof(T));
        return value;
    }

    fs::path path_;
    std::vector<std::uint8_t> bytes_;
    bool swap_ = false;
    std::map<std::uint16_t, Field> fields_;
};

std::map<std::string, std::string> parse_gdal_metadata(const std::string& xml) {
    std::map<std::string, std::string> out;
    static const std::regex item(R"re(<Item name="([^"]+)"[^>]*>([^<]*)</Item>)re");
    for (auto it = std::sregex_iterator(xml.begin(), xml.end(), item); it != std::sregex_iterator(); ++it) {
        out[(*it)[1].str()] = (*it)[2].str();
    }
    return out;
}

struct DecodedImage {
    int width = 0;
    int height = 0;
    int bands = 0;
    std::vector<double> planar;  // band-planar
    GeoRegion region{};
    bool has_georef = false;
    std::string nodata;
    std::map<std::string, std::string> metadata;
};

DecodedImage decode(const fs::path& path) {
    TiffReader tiff(path);
    DecodedImage img;
    img.width = static_cast<int>(tiff.number(kTagWidth, 0));
    img.height = static_cast<int>(tiff.number(kTagHeight, 0));
    img.bands = static_cast<int>(tiff.number(kTagSamplesPerPixel, 1));
    if (img.width <= 0 || img.height <= 0 || img.bands <= 0) tiff.fail("invalid dimensions");
    if (tiff.number(kTagCompression, 1) != 1) tiff.fail("compressed TIFF is not supported");
    const int bits = static_cast<int>(tiff.has(kTagBitsPerSample) ? tiff.numbers(kTagBitsPerSample).front() : 1);
    const int format = static_cast<int>(tiff.has(kTagSampleFormat) ? tiff.numbers(kTagSampleFormat).front() : 1);
    const int planar_config = static_cast<int>(tiff.number(kTagPlanarConfig, 1));
    const int rows_per_strip = static_cast<int>(tiff.number(kTagRowsPerStrip, img.height));
    const auto offsets = tiff.numbers(kTagStripOffsets);
    if (bits % 8 != 0) tiff.fail("sub-byte samples are not supported");
    const std::size_t bytes_per_sample = static_cast<std::size_t>(bits) / 8;
    const std::size_t pixels = static_cast<std::size_t>(img.width) * img.height;
    img.planar.assign(pixels * img.bands, 0.0);

    const int strips_per_plane = (img.height + rows_per_strip - 1) / rows_per_strip;
    for (int y = 0; y < img.height; ++y) {
        const int strip = y / rows_per_strip;
        const int row_in_strip = y % rows_per_strip;
        for (int x = 0; x < img.width; ++x) {
            for (int b = 0; b < img.bands; ++b) {
                std::size_t at = 0;
                if (planar_config == 1) {
                    at = static_cast<std::size_t>(offsets.at(strip)) +
                         ((static_cast<std::size_t>(row_in_strip) * img.width + x) * img.bands + b) * bytes_per_sample;
                } else {
                    at = static_cast<std::size_t>(offsets.at(static_cast<std::size_t>(b) * strips_per_plane + strip)) +
                         (static_cast<std::size_t>(row_in_strip) * img.width + x) * bytes_per_sample;
                }
                img.planar[(static_cast<std::size_t>(b) * img.height + y) * img.width + x] =
                    tiff.sample(at, bits, format);
            }
        }
    }

    if (tiff.has(kTagPixelScale) && tiff.has(kTagTiepoint)) {
        const auto scale = tiff.numbers(kTagPixelScale);
        const auto tie = tiff.numbers(kTagTiepoint);
        if (scale.size() >= 2 && tie.size() >= 6) {
            img.region.lon_min = tie[3] - tie[0] * scale[0];
            img.region.lat_max = tie[4] + tie[1] * scale[1];
            img.region.lon_max = img.region.lon_min + scale[0] * img.width;
            img.region.lat_min = img.region.lat_max - scale[1] * img.height;
            img.region.resolution = scale[0] * kMetersPerDegree;
            img.has_georef = true;
        }
    }
    img.nodata = tiff.text(kTagGdalNodata);
    img.metadata = parse_gdal_metadata(tiff.text(kTagGdalMetadata));
    return img;
}

}  // namespace

void write_geotiff(const fs::path& path, const RasterTile& tile, const GeoTiffWriteOptions& options) {
    const std::size_t pixels = tile.pixel_count();
    const int bands = tile.bands();
    std::vector<std::uint8_t> data;
    const std::size_t bytes_per_sample =
        options.sample_type == SampleType::u8 ? 1 : (options.sample_type == SampleType::f32 ? 4 : 8);
    data.reserve(pixels * bands * bytes_per_sample);
    for (std::size_t i = 0; i < pixels; ++i) {
        for (int b = 0; b < bands; ++b) {
            const double v = tile.masked(i) ? std::numeric_limits<double>::quiet_NaN() : tile.band(b)[i];
            switch (options.sample_type) {
                case SampleType::u8: {
                    const double c = std::isnan(v) ? 255.0 : std::clamp(std::round(v), 0.0, 254.0);
                    data.push_back(static_cast<std::uint8_t>(c));
                    break;
                }
                case SampleType::f32: append_le(data, static_cast<float>(v)); break;
                case SampleType::f64: append_le(data, v); break;
            }
        }
    }
    const std::map<std::string, std::string> metadata = {
        {"resolution_m", format_double(tile.georef().resolution)},
        {"value_domain", to_string(tile.domain())},
    };
    write_tiff(path, tile.width(), tile.height(), bands, options.sample_type, data, tile.georef(),
               options.sample_type == SampleType::u8 ? "255" : "nan", metadata);
}

RasterTile read_geotiff(const fs::path& path) {
    DecodedImage img = decode(path);
    ValueDomain domain = ValueDomain::raw;
    if (const auto it = img.metadata.find("value_domain"); it != img.metadata.end()) {
        domain = value_domain_from_string(it->second);
    }
    GeoRegion region = img.has_georef ? img.region : GeoRegion{};
    if (const auto it = img.metadata.find("resolution_m"); it != img.metadata.end()) {
        region.resolution = std::stod(it->second);
    }
    RasterTile tile(img.width, img.height, img.bands, domain, region);
    std::copy(img.planar.begin(), img.planar.end(), tile.values().begin());

    const bool nan_nodata = img.nodata == "nan" || img.nodata == "NaN" || img.nodata == "-nan";
    double nodata_value = std::numeric_limits<double>::quiet_NaN();
    if (!img.nodata.empty() && !nan_nodata) nodata_value = std::stod(img.nodata);
    for (std::size_t i = 0; i < tile.pixel_count(); ++i) {
        bool nodata = false;
        for (int b = 0; b < tile.bands(); ++b) {
            const double v = tile.band(b)[i];
            if (std::isnan(v) || (!img.nodata.empty() && !nan_nodata && v == nodata_value)) nodata = true;
        }
        if (nodata) {
            tile.set_masked(i, true);
            for (int b = 0; b < tile.bands(); ++b) tile.band(b)[i] = 0.0;
        }
    }
    return tile;
}

void write_mask_geotiff(const fs::path& path, const std::vector<std::uint8_t>& mask, int width, int height,
                        const GeoRegion& region) {
    if (mask.size() != static_cast<std::size_t>(width) * height) {
        throw Error(ErrorKind::alignment, "mask size does not match its dimensions");
    }
    std::vector<std::uint8_t> data(mask.size());
    std::transform(mask.begin(), mask.end(), data.begin(), [](std::uint8_t m) { return m ? 1 : 0; });
    write_tiff(path, width, height, 1, SampleType::u8, data, region, "", {{"role", "quality_mask"}});
}

std::vector<std::uint8_t> read_mask_geotiff(const fs::path& path, int& width, int& height) {
    DecodedImage img = decode(path);
    if (img.bands != 1) throw Error(ErrorKind::io, "'" + path.string() + "': mask must be single-band");
    width = img.width;
    height = img.height;
    std::vector<std::uint8_t> mask(img.planar.size());
    std::transform(img.planar.begin(), img.planar.end(), mask.begin(),
                   [](double v) { return static_cast<std::uint8_t>(v != 0.0 ? 1 : 0); });
    return mask;
}

void write_png_preview(const fs::path& path, const RasterTile& tile) {
    if (tile.bands() != 1 && tile.bands() != 3) {
        throw Error(ErrorKind::argument, "PNG preview needs 1 or 3 bands");
    }
    RasterTile eight_bit = tile;
    if (tile.domain() == ValueDomain::raw) eight_bit = stretch_min_max(tile);
    if (tile.domain() == ValueDomain::signed_unit) eight_bit = signed_unit_to_jpeg(tile);

    const int w = tile.width();
    const int h = tile.height();
    const int channels = tile.bands();
    std::vector<png_byte> rows(static_cast<std::size_t>(w) * h * channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int b = 0; b < channels; ++b) {
                const double v = eight_bit.masked(y, x) ? 0.0 : eight_bit.at(b, y, x);
                rows[(static_cast<std::size_t>(y) * w + x) * channels + b] =
                    static_cast<png_byte>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw Error(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw Error(ErrorKind::io, "libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
        png_write_row(png, rows.data() + static_cast<std::size_t>(y) * w * channels);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace demgan
