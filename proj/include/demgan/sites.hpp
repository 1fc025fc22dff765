#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "demgan/raster.hpp"

namespace demgan {

struct LatLon {
    double lat = 0.0;
    double lon = 0.0;

    auto operator<=>(const LatLon&) const = default;
};

struct CloudCell {
    LatLon center;
    double cloud_fraction = 0.0;
};

struct CloudFractionGrid {
    std::vector<CloudCell> cells;
    int month = 0;  // 1..12, 0 when unknown

    void validate() const;
};

struct SiteCandidate {
    LatLon center;
    GeoRegion region;
    std::optional<int> cluster_id;
};

struct KMeansOptions {
    int k = 100;
    int batch_size = 100;
    int max_iterations = 300;
    double tolerance = 1e-6;  // max centroid shift, degrees
    std::uint64_t seed = 0;
};

struct ClusterModel {
    int k = 0;
    std::vector<LatLon> centroids;
    std::vector<int> assignments;  // one per fitted point
    double inertia = 0.0;
    int minibatch_iterations = 0;
    /// Full-data inertia after each refinement sweep; non-increasing.
    std::vector<double> inertia_trace;
};

inline constexpr double kDefaultSiteBuffer = 0.135;

/// Cell centers with zero cloud fraction, sorted by (lat, lon).
std::vector<LatLon> extract_zero_cloud_sites(const CloudFractionGrid& grid);

GeoRegion buffer_site(LatLon center, double buffer = kDefaultSiteBuffer, double resolution = 30.0);

/// Mini-batch k-means (k-means++ seeding, per-centroid 1/count learning rate)
/// followed by full-batch Lloyd refinement. Squared Euclidean distance in
/// degree space. Empty clusters are dropped, so |centroids| <= min(k, distinct).
ClusterModel minibatch_kmeans(const std::vector<LatLon>& points, const KMeansOptions& options);

/// Index of the nearest centroid; ties go to the lower index.
int nearest_centroid(const ClusterModel& model, LatLon p);

/// The candidate closest to each non-empty cluster's centroid, one per cluster,
/// ties broken by lowest (lat, lon). Returned in cluster order with cluster_id set.
std::vector<SiteCandidate> select_representative_sites(const ClusterModel& model,
                                                       const std::vector<SiteCandidate>& candidates);

CloudFractionGrid read_cloud_grid_csv(const std::filesystem::path& path);
/// Single-band raster of fractions; cell centers come from the georeference.
CloudFractionGrid read_cloud_grid_geotiff(const std::filesystem::path& path);
CloudFractionGrid read_cloud_grid(const std::filesystem::path& path);

void write_sites_csv(const std::filesystem::path& path, const std::vector<SiteCandidate>& sites);
void write_sites_json(const std::filesystem::path& path, const std::vector<SiteCandidate>& sites,
                      const ClusterModel& model);

}  // namespace demgan
