#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "demgan/raster.hpp"

namespace demgan {

enum class DominantShareMode { joint, per_band };

struct QualityThresholds {
    int min_unique_values = 20;       // a band with fewer distinct 8-bit levels is flagged
    double max_dominant_share = 0.2;  // a single level covering more than this share is flagged
    DominantShareMode dominant_mode = DominantShareMode::joint;
};

struct QualityFlags {
    std::vector<bool> low_unique_values;  // per band
    bool dominant_value_excess = false;
    bool degenerate = false;  // no unmasked pixels at all
    bool excluded = false;

    bool operator==(const QualityFlags&) const = default;
};

enum class Split { train, val, test };

const char* to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
    std::string pair_id;
    std::string rgb_path;  // relative to the manifest directory
    std::string dem_path;
    GeoRegion region;
    std::optional<QualityFlags> flags;
    std::optional<Split> split;
    std::optional<double> ssim_score;
    double elevation_range = 0.0;  // meters

    bool usable() const { return !(flags && flags->excluded); }
    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    /// Unique pair ids; usable entries with a split, excluded entries without.
    void validate() const;
    std::size_t count(Split split) const;
    std::vector<const ManifestEntry*> in_split(Split split) const;
    const ManifestEntry* find(const std::string& pair_id) const;
    ManifestEntry* find(const std::string& pair_id);

    bool operator==(const DatasetManifest&) const = default;
};

/// Distinct-level and dominant-level checks on an RGB tile in the 0..255 range,
/// evaluated after rounding to 8-bit levels.
QualityFlags spectral_diversity_flags(const RasterTile& rgb, const QualityThresholds& thresholds = {});

struct ExclusionResult {
    DatasetManifest manifest;
    std::size_t retained = 0;
    std::vector<std::string> excluded_ids;
};

/// Clears the split of every excluded entry; requires flags on every entry.
ExclusionResult exclude_flagged_pairs(const DatasetManifest& manifest);

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct SplitCounts {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

/// val = round(val_fraction * n), test = round(test_fraction * n), train = rest;
/// halves round away from zero.
SplitCounts split_counts(std::size_t n, const SplitFractions& fractions);

/// Seeded shuffle of the usable entries (ordered by pair id first) into splits.
DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitFractions& fractions,
                              std::uint64_t seed);

struct RefinementResult {
    DatasetManifest manifest;
    std::vector<ManifestEntry> removed;
    double threshold = 0.0;
};

/// Drops train entries whose score is strictly below threshold. Val and test
/// entries are untouched.
RefinementResult filter_training_by_ssim(const DatasetManifest& manifest, double threshold);

/// Line-delimited JSON, one entry per line; written via temp file and rename.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

void write_exclusion_audit(const std::filesystem::path& path, const DatasetManifest& manifest);
void write_refinement_audit(const std::filesystem::path& path, const RefinementResult& result);

/// Advisory lock held for the lifetime of the object: `<manifest>.lock`,
/// created exclusively.
class ManifestLock {
public:
    explicit ManifestLock(const std::filesystem::path& manifest_path);
    ~ManifestLock();
    ManifestLock(const ManifestLock&) = delete;
    ManifestLock& operator=(const ManifestLock&) = delete;

private:
    std::filesystem::path lock_path_;
};

}  // namespace demgan
