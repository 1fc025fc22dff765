#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "demgan/raster.hpp"

namespace demgan {

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 2.0;  // signed-unit data spans [-1, 1]
};

/// Normalized 1-D Gaussian window.
std::vector<double> gaussian_window(int size, double sigma);

/// Mean local SSIM over every fully valid Gaussian window placed inside both
/// single-band tiles. Windows touching nodata in either tile are skipped.
double ssim(const RasterTile& a, const RasterTile& b, const SsimOptions& options = {});

/// Root mean squared difference over pixels valid in both tiles, all bands.
double rmse(const RasterTile& a, const RasterTile& b);

struct EvalRecord {
    std::string pair_id;
    double ssim = 0.0;
    double rmse = 0.0;
    double elevation_range = 0.0;  // meters
    std::optional<int> cluster_id;

    bool operator==(const EvalRecord&) const = default;
};

struct AggregateStats {
    double mean_ssim = 0.0;
    double median_ssim = 0.0;
    double mean_rmse = 0.0;
    double median_rmse = 0.0;
    std::size_t count = 0;

    bool operator==(const AggregateStats&) const = default;
};

/// Median with the mean of the middle two for even counts.
double median(std::vector<double> values);

AggregateStats aggregate_stats(const std::vector<EvalRecord>& records);

/// max - min over unmasked pixels of a single-band DEM.
double elevation_range(const RasterTile& dem);

/// 1-D k-means on elevation range (k-means++ seeding, several seeded restarts,
/// lowest inertia wins). Empty clusters are dropped and ids are relabeled so
/// cluster 0 has the smallest mean range.
std::vector<EvalRecord> cluster_by_elevation_range(const std::vector<EvalRecord>& records, int k = 3,
                                                   std::uint64_t seed = 0);

struct Histogram {
    std::vector<double> edges;  // bins + 1 uniform edges over [-1, 1]
    std::vector<std::size_t> counts;
};

Histogram ssim_histogram(const std::vector<EvalRecord>& records, int bins);

struct ClusterSummary {
    int cluster_id = 0;
    std::size_t count = 0;
    double mean_elevation_range = 0.0;
    double ssim_min = 0.0;
    double ssim_q1 = 0.0;
    double ssim_median = 0.0;
    double ssim_q3 = 0.0;
    double ssim_max = 0.0;
};

/// Box-plot material per cluster; records without a cluster id are ignored.
std::vector<ClusterSummary> summarize_clusters(const std::vector<EvalRecord>& records);

void write_eval_records_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_eval_records_csv(const std::filesystem::path& path);

struct AggregateReport {
    std::string label;
    int stage = 1;
    std::optional<double> ssim_filter;
    AggregateStats stats;
};

void write_aggregate_json(const std::filesystem::path& path, const AggregateReport& report);
AggregateReport read_aggregate_json(const std::filesystem::path& path);

void write_histogram_csv(const std::filesystem::path& path, const Histogram& histogram);
void write_histogram_svg(const std::filesystem::path& path, const Histogram& histogram, const std::string& title);
void write_cluster_csv(const std::filesystem::path& path, const std::vector<ClusterSummary>& clusters);

}  // namespace demgan
