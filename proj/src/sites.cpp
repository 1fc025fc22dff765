#include "demgan/sites.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/geotiff.hpp"
#include "demgan/rng.hpp"

namespace demgan {

namespace {

double sq_dist(LatLon a, LatLon b) {
    const double dlat = a.lat - b.lat;
    const double dlon = a.lon - b.lon;
    return dlat * dlat + dlon * dlon;
}

int nearest(const std::vector<LatLon>& centroids, LatLon p, double* dist_out = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = sq_dist(p, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

std::vector<LatLon> kmeanspp_init(const std::vector<LatLon>& points, int k, Rng& rng) {
    std::vector<LatLon> centers;
    centers.reserve(static_cast<std::size_t>(k));
    centers.push_back(points[uniform_index(rng, points.size())]);
    std::vector<double> d2(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) d2[i] = sq_dist(points[i], centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (double d : d2) total += d;
        if (total <= 0.0) break;
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        std::size_t pick = points.size() - 1;
        for (std::size_t i = 0; i < points.size(); ++i) {
            acc += d2[i];
            if (acc > target && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        while (d2[pick] <= 0.0 && pick > 0) --pick;
        centers.push_back(points[pick]);
        for (std::size_t i = 0; i < points.size(); ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
    }
    return centers;
}

double max_shift(const std::vector<LatLon>& a, const std::vector<LatLon>& b) {
    double shift = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) shift = std::max(shift, std::sqrt(sq_dist(a[c], b[c])));
    return shift;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        const auto first = field.find_first_not_of(" \t\r");
        const auto last = field.find_last_not_of(" \t\r");
        out.push_back(first == std::string::npos ? std::string{} : field.substr(first, last - first + 1));
    }
    return out;
}

}  // namespace

void CloudFractionGrid::validate() const {
    for (const auto& cell : cells) {
        if (!(cell.cloud_fraction >= 0.0 && cell.cloud_fraction <= 1.0)) {
            throw Error(ErrorKind::domain, "cloud fraction outside [0, 1]");
        }
    }
}

std::vector<LatLon> extract_zero_cloud_sites(const CloudFractionGrid& grid) {
    std::vector<LatLon> out;
    for (const auto& cell : grid.cells) {
        if (cell.cloud_fraction == 0.0) out.push_back(cell.center);
    }
    std::stable_sort(out.begin(), out.end());
    return out;
}

GeoRegion buffer_site(LatLon center, double buffer, double resolution) {
    if (!std::isfinite(center.lat) || !std::isfinite(center.lon)) {
        throw Error(ErrorKind::argument, "site coordinates must be finite");
    }
    if (!(buffer > 0.0)) throw Error(ErrorKind::argument, "site buffer must be positive");
    GeoRegion region{center.lat - buffer, center.lat + buffer, center.lon - buffer, center.lon + buffer, resolution};
    region.validate();
    return region;
}

ClusterModel minibatch_kmeans(const std::vector<LatLon>& points, const KMeansOptions& options) {
    if (options.k < 1) throw Error(ErrorKind::argument, "k-means needs k >= 1");
    if (points.empty()) throw Error(ErrorKind::argument, "k-means needs at least one point");
    if (options.batch_size < 1) throw Error(ErrorKind::argument, "k-means batch size must be >= 1");

    ClusterModel model;
    model.k = options.k;

    std::vector<LatLon> distinct = points;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<LatLon> centroids;
    if (static_cast<std::size_t>(options.k) >= distinct.size()) {
        centroids = distinct;
    } else {
        Rng rng(options.seed);
        centroids = kmeanspp_init(points, options.k, rng);

        std::vector<double> counts(centroids.size(), 0.0);
        for (int iter = 0; iter < options.max_iterations; ++iter) {
            const auto before = centroids;
            for (int s = 0; s < options.batch_size; ++s) {
                const LatLon p = points[uniform_index(rng, points.size())];
                const int c = nearest(centroids, p);
                counts[c] += 1.0;
                const double eta = 1.0 / counts[c];
                centroids[c].lat += eta * (p.lat - centroids[c].lat);
                centroids[c].lon += eta * (p.lon - centroids[c].lon);
            }
            model.minibatch_iterations = iter + 1;
            if (max_shift(before, centroids) < options.tolerance) break;
        }

        // Lloyd refinement on the full data set.
        std::vector<int> assign(points.size());
        for (int iter = 0; iter < options.max_iterations; ++iter) {
            double inertia = 0.0;
            for (std::size_t i = 0; i < points.size(); ++i) {
                double d = 0.0;
                assign[i] = nearest(centroids, points[i], &d);
                inertia += d;
            }
            model.inertia_trace.push_back(inertia);
            std::vector<LatLon> sums(centroids.size());
            std::vector<std::size_t> members(centroids.size(), 0);
            for (std::size_t i = 0; i < points.size(); ++i) {
                sums[assign[i]].lat += points[i].lat;
                sums[assign[i]].lon += points[i].lon;
                ++members[assign[i]];
            }
            const auto before = centroids;
            for (std::size_t c = 0; c < centroids.size(); ++c) {
                if (members[c] == 0) continue;
                centroids[c] = {sums[c].lat / static_cast<double>(members[c]),
                                sums[c].lon / static_cast<double>(members[c])};
            }
            if (max_shift(before, centroids) < options.tolerance) break;
        }
    }

    // Final assignment; drop empty clusters and compact ids.
    std::vector<int> assign(points.size());
    std::vector<std::size_t> members(centroids.size(), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        assign[i] = nearest(centroids, points[i]);
        ++members[assign[i]];
    }
    std::vector<int> remap(centroids.size(), -1);
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        if (members[c] == 0) continue;
        remap[c] = static_cast<int>(model.centroids.size());
        model.centroids.push_back(centroids[c]);
    }
    model.assignments.resize(points.size());
    model.inertia = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        model.assignments[i] = remap[assign[i]];
        model.inertia += sq_dist(points[i], model.centroids[model.assignments[i]]);
    }
    if (model.inertia_trace.empty() || model.inertia < model.inertia_trace.back()) {
        model.inertia_trace.push_back(model.inertia);
    }
    return model;
}

int nearest_centroid(const ClusterModel& model, LatLon p) {
    if (model.centroids.empty()) throw Error(ErrorKind::precondition, "cluster model has no centroids");
    return nearest(model.centroids, p);
}

std::vector<SiteCandidate> select_representative_sites(const ClusterModel& model,
                                                       const std::vector<SiteCandidate>& candidates) {
    const bool use_assignments = model.assignments.size() == candidates.size();
    struct Best {
        double dist = std::numeric_limits<double>::infinity();
        const SiteCandidate* candidate = nullptr;
    };
    std::vector<Best> best(model.centroids.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& cand = candidates[i];
        const int c = use_assignments ? model.assignments[i] : nearest_centroid(model, cand.center);
        if (c < 0 || static_cast<std::size_t>(c) >= best.size()) continue;
        const double d = sq_dist(cand.center, model.centroids[c]);
        Best& b = best[c];
        if (b.candidate == nullptr || d < b.dist || (d == b.dist && cand.center < b.candidate->center)) {
            b = {d, &cand};
        }
    }
    std::vector<SiteCandidate> out;
    for (std::size_t c = 0; c < best.size(); ++c) {
        if (best[c].candidate == nullptr) continue;
        SiteCandidate rep = *best[c].candidate;
        rep.cluster_id = static_cast<int>(c);
        out.push_back(rep);
    }
    return out;
}

CloudFractionGrid read_cloud_grid_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open cloud grid '" + path.string() + "'");
    CloudFractionGrid grid;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto fields = split_csv_line(line);
        if (fields.size() < 3) {
            throw Error(ErrorKind::io, path.string() + ":" + std::to_string(line_no) + ": expected lat,lon,fraction");
        }
        try {
            grid.cells.push_back({{std::stod(fields[0]), std::stod(fields[1])}, std::stod(fields[2])});
        } catch (const std::invalid_argument&) {
            if (grid.cells.empty() && line_no == 1) continue;  // header row
            throw Error(ErrorKind::io, path.string() + ":" + std::to_string(line_no) + ": non-numeric field");
        }
    }
    grid.validate();
    return grid;
}

CloudFractionGrid read_cloud_grid_geotiff(const std::filesystem::path& path) {
    const RasterTile tile = read_geotiff(path);
    if (tile.bands() != 1) throw Error(ErrorKind::io, "cloud grid raster must be single-band");
    const GeoRegion& r = tile.georef();
    const double dy = (r.lat_max - r.lat_min) / tile.height();
    const double dx = (r.lon_max - r.lon_min) / tile.width();
    CloudFractionGrid grid;
    for (int y = 0; y < tile.height(); ++y) {
        for (int x = 0; x < tile.width(); ++x) {
            if (tile.masked(y, x)) continue;
            grid.cells.push_back({{r.lat_max - (y + 0.5) * dy, r.lon_min + (x + 0.5) * dx}, tile.at(0, y, x)});
        }
    }
    grid.validate();
    return grid;
}

CloudFractionGrid read_cloud_grid(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".tif" || ext == ".tiff") return read_cloud_grid_geotiff(path);
    return read_cloud_grid_csv(path);
}

void write_sites_csv(const std::filesystem::path& path, const std::vector<SiteCandidate>& sites) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
    out.precision(17);
    out << "cluster_id,lat,lon,lat_min,lat_max,lon_min,lon_max\n";
    for (const auto& s : sites) {
        out << (s.cluster_id ? std::to_string(*s.cluster_id) : std::string{}) << ',' << s.center.lat << ','
            << s.center.lon << ',' << s.region.lat_min << ',' << s.region.lat_max << ',' << s.region.lon_min << ','
            << s.region.lon_max << '\n';
    }
}

void write_sites_json(const std::filesystem::path& path, const std::vector<SiteCandidate>& sites,
                      const ClusterModel& model) {
    using nlohmann::json;
    json doc;
    doc["k"] = model.k;
    doc["inertia"] = model.inertia;
    doc["centroids"] = json::array();
    for (const auto& c : model.centroids) doc["centroids"].push_back({{"lat", c.lat}, {"lon", c.lon}});
    doc["sites"] = json::array();
    for (const auto& s : sites) {
        json j = {{"lat", s.center.lat},
                  {"lon", s.center.lon},
                  {"region",
                   {{"lat_min", s.region.lat_min},
                    {"lat_max", s.region.lat_max},
                    {"lon_min", s.region.lon_min},
                    {"lon_max", s.region.lon_max}}}};
        j["cluster_id"] = s.cluster_id ? json(*s.cluster_id) : json(nullptr);
        doc["sites"].push_back(j);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
    out << doc.dump(2) << '\n';
}

}  // namespace demgan
