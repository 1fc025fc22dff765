#include "demgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/rng.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::ofstream open_for_write(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
    out.precision(17);
    return out;
}

// "valid" separable correlation of a w x h field with a square window.
std::vector<double> filter_valid(const std::vector<double>& field, int w, int h, const std::vector<double>& g) {
    const int n = static_cast<int>(g.size());
    const int ow = w - n + 1;
    const int oh = h - n + 1;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
    for (int y = 0; y < h; ++y) {
        const double* src = field.data() + static_cast<std::size_t>(y) * w;
        double* dst = rows.data() + static_cast<std::size_t>(y) * ow;
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k) acc += g[k] * src[x + k];
            dst[x] = acc;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
    for (int y = 0; y < oh; ++y) {
        double* dst = out.data() + static_cast<std::size_t>(y) * ow;
        for (int k = 0; k < n; ++k) {
            const double* src = rows.data() + static_cast<std::size_t>(y + k) * ow;
            for (int x = 0; x < ow; ++x) dst[x] += g[k] * src[x];
        }
    }
    return out;
}

std::vector<double> kmeans_1d(const std::vector<double>& values, int k, Rng& rng, std::vector<int>& assign,
                              double& inertia) {
    const std::size_t n = values.size();
    std::vector<double> centers;
    centers.push_back(values[uniform_index(rng, n)]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = (values[i] - centers[0]) * (values[i] - centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        if (total <= 0.0) break;
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (acc > target && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        while (d2[pick] <= 0.0 && pick > 0) --pick;
        centers.push_back(values[pick]);
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (values[i] - centers.back()) * (values[i] - centers.back()));
        }
    }

    assign.assign(n, 0);
    for (int iter = 0; iter < 300; ++iter) {
        bool changed = iter == 0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < centers.size(); ++c) {
                const double d = std::abs(values[i] - centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(c);
                }
            }
            if (assign[i] != best) changed = true;
            assign[i] = best;
        }
        if (!changed) break;
        std::vector<double> sums(centers.size(), 0.0);
        std::vector<std::size_t> counts(centers.size(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums[assign[i]] += values[i];
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < centers.size(); ++c) {
            if (counts[c] > 0) centers[c] = sums[c] / static_cast<double>(counts[c]);
        }
    }
    inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        inertia += (values[i] - centers[assign[i]]) * (values[i] - centers[assign[i]]);
    }
    return centers;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> g(static_cast<std::size_t>(size));
    const double center = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        g[i] = std::exp(-((i - center) * (i - center)) / (2.0 * sigma * sigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

double ssim(const RasterTile& a, const RasterTile& b, const SsimOptions& options) {
    if (a.bands() != 1 || b.bands() != 1) throw Error(ErrorKind::argument, "SSIM expects single-band tiles");
    if (!a.same_shape(b)) throw Error(ErrorKind::alignment, "SSIM tiles differ in size");
    const int w = a.width();
    const int h = a.height();
    const int n = options.window;
    if (w < n || h < n) {
        throw Error(ErrorKind::argument, "tile smaller than the " + std::to_string(n) + "-pixel SSIM window");
    }
    const double c1 = (options.k1 * options.dynamic_range) * (options.k1 * options.dynamic_range);
    const double c2 = (options.k2 * options.dynamic_range) * (options.k2 * options.dynamic_range);
    const auto g = gaussian_window(n, options.sigma);

    const std::size_t pixels = a.pixel_count();
    std::vector<double> fa(pixels), fb(pixels), faa(pixels), fbb(pixels), fab(pixels);
    // Integral image of the union nodata mask.
    std::vector<int> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0);
    for (int y = 0; y < h; ++y) {
        int row = 0;
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const bool bad = a.masked(i) || b.masked(i);
            const double va = bad ? 0.0 : a.band(0)[i];
            const double vb = bad ? 0.0 : b.band(0)[i];
            fa[i] = va;
            fb[i] = vb;
            faa[i] = va * va;
            fbb[i] = vb * vb;
            fab[i] = va * vb;
            row += bad ? 1 : 0;
            integral[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] =
                integral[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
        }
    }
    const auto mu_a = filter_valid(fa, w, h, g);
    const auto mu_b = filter_valid(fb, w, h, g);
    const auto e_aa = filter_valid(faa, w, h, g);
    const auto e_bb = filter_valid(fbb, w, h, g);
    const auto e_ab = filter_valid(fab, w, h, g);

    const int ow = w - n + 1;
    const int oh = h - n + 1;
    double sum = 0.0;
    std::size_t used = 0;
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            const auto at = [&](int yy, int xx) { return integral[static_cast<std::size_t>(yy) * (w + 1) + xx]; };
            if (at(y + n, x + n) - at(y, x + n) - at(y + n, x) + at(y, x) != 0) continue;
            const std::size_t i = static_cast<std::size_t>(y) * ow + x;
            const double ma = mu_a[i];
            const double mb = mu_b[i];
            const double va = e_aa[i] - ma * ma;
            const double vb = e_bb[i] - mb * mb;
            const double cov = e_ab[i] - ma * mb;
            const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
            ++used;
        }
    }
    if (used == 0) throw Error(ErrorKind::degenerate_input, "every SSIM window touches nodata");
    return std::clamp(sum / static_cast<double>(used), -1.0, 1.0);
}

double rmse(const RasterTile& a, const RasterTile& b) {
    if (!a.same_shape(b)) throw Error(ErrorKind::alignment, "RMSE tiles differ in shape");
    double acc = 0.0;
    std::size_t count = 0;
    for (int band = 0; band < a.bands(); ++band) {
        const auto va = a.band(band);
        const auto vb = b.band(band);
        for (std::size_t i = 0; i < va.size(); ++i) {
            if (a.masked(i) || b.masked(i)) continue;
            const double d = va[i] - vb[i];
            acc += d * d;
            ++count;
        }
    }
    if (count == 0) throw Error(ErrorKind::degenerate_input, "RMSE tiles share no valid pixels");
    return std::sqrt(acc / static_cast<double>(count));
}

double median(std::vector<double> values) {
    if (values.empty()) throw Error(ErrorKind::argument, "median of an empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AggregateStats aggregate_stats(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw Error(ErrorKind::argument, "aggregate statistics need at least one record");
    std::vector<double> s;
    std::vector<double> r;
    for (const auto& rec : records) {
        s.push_back(rec.ssim);
        r.push_back(rec.rmse);
    }
    AggregateStats stats;
    stats.count = records.size();
    stats.mean_ssim = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    stats.mean_rmse = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    stats.median_ssim = median(std::move(s));
    stats.median_rmse = median(std::move(r));
    return stats;
}

double elevation_range(const RasterTile& dem) {
    if (dem.bands() != 1) throw Error(ErrorKind::argument, "elevation range needs a single-band DEM");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    const auto values = dem.band(0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (dem.masked(i)) continue;
        lo = std::min(lo, values[i]);
        hi = std::max(hi, values[i]);
    }
    if (!(lo <= hi)) throw Error(ErrorKind::degenerate_input, "DEM has no unmasked pixels");
    return hi - lo;
}

std::vector<EvalRecord> cluster_by_elevation_range(const std::vector<EvalRecord>& records, int k,
                                                   std::uint64_t seed) {
    if (k < 1) throw Error(ErrorKind::argument, "cluster count must be >= 1");
    if (records.size() < static_cast<std::size_t>(k)) {
        throw Error(ErrorKind::argument, "need at least k = " + std::to_string(k) + " records to cluster");
    }
    std::vector<double> ranges;
    for (const auto& r : records) ranges.push_back(r.elevation_range);

    constexpr int kRestarts = 10;
    Rng rng(seed);
    std::vector<int> best_assign;
    std::vector<double> best_centers;
    double best_inertia = std::numeric_limits<double>::infinity();
    for (int run = 0; run < kRestarts; ++run) {
        std::vector<int> assign;
        double inertia = 0.0;
        auto centers = kmeans_1d(ranges, k, rng, assign, inertia);
        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_assign = std::move(assign);
            best_centers = std::move(centers);
        }
    }

    // Relabel non-empty clusters by ascending mean range.
    std::vector<double> sums(best_centers.size(), 0.0);
    std::vector<std::size_t> counts(best_centers.size(), 0);
    for (std::size_t i = 0; i < ranges.size(); ++i) {
        sums[best_assign[i]] += ranges[i];
        ++counts[best_assign[i]];
    }
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < best_centers.size(); ++c) {
        if (counts[c] > 0) order.push_back(c);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return sums[a] / static_cast<double>(counts[a]) < sums[b] / static_cast<double>(counts[b]);
    });
    std::vector<int> label(best_centers.size(), -1);
    for (std::size_t rank = 0; rank < order.size(); ++rank) label[order[rank]] = static_cast<int>(rank);

    std::vector<EvalRecord> out = records;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].cluster_id = label[best_assign[i]];
    return out;
}

Histogram ssim_histogram(const std::vector<EvalRecord>& records, int bins) {
    if (bins < 1) throw Error(ErrorKind::argument, "histogram needs at least one bin");
    Histogram hist;
    hist.counts.assign(static_cast<std::size_t>(bins), 0);
    for (int i = 0; i <= bins; ++i) hist.edges.push_back(-1.0 + 2.0 * i / bins);
    for (const auto& r : records) {
        const double t = (std::clamp(r.ssim, -1.0, 1.0) + 1.0) / 2.0 * bins;
        const int bin = std::min(bins - 1, static_cast<int>(std::floor(t)));
        ++hist.counts[static_cast<std::size_t>(bin)];
    }
    return hist;
}

std::vector<ClusterSummary> summarize_clusters(const std::vector<EvalRecord>& records) {
    int max_id = -1;
    for (const auto& r : records) {
        if (r.cluster_id) max_id = std::max(max_id, *r.cluster_id);
    }
    std::vector<ClusterSummary> out;
    for (int c = 0; c <= max_id; ++c) {
        std::vector<double> s;
        double range_sum = 0.0;
        for (const auto& r : records) {
            if (r.cluster_id != c) continue;
            s.push_back(r.ssim);
            range_sum += r.elevation_range;
        }
        if (s.empty()) continue;
        std::sort(s.begin(), s.end());
        ClusterSummary summary;
        summary.cluster_id = c;
        summary.count = s.size();
        summary.mean_elevation_range = range_sum / static_cast<double>(s.size());
        summary.ssim_min = s.front();
        summary.ssim_q1 = quantile_sorted(s, 0.25);
        summary.ssim_median = median(s);
        summary.ssim_q3 = quantile_sorted(s, 0.75);
        summary.ssim_max = s.back();
        out.push_back(summary);
    }
    return out;
}

void write_eval_records_csv(const fs::path& path, const std::vector<EvalRecord>& records) {
    std::ofstream out = open_for_write(path);
    out << "pair_id,ssim,rmse,elevation_range,cluster_id\n";
    for (const auto& r : records) {
        out << r.pair_id << ',' << fmt(r.ssim) << ',' << fmt(r.rmse) << ',' << fmt(r.elevation_range) << ','
            << (r.cluster_id ? std::to_string(*r.cluster_id) : std::string{}) << '\n';
    }
}

std::vector<EvalRecord> read_eval_records_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path.string() + "'");
    std::vector<EvalRecord> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[5];
        for (auto& field : f) std::getline(ss, field, ',');
        EvalRecord r;
        r.pair_id = f[0];
        r.ssim = std::stod(f[1]);
        r.rmse = std::stod(f[2]);
        r.elevation_range = std::stod(f[3]);
        if (!f[4].empty()) r.cluster_id = std::stoi(f[4]);
        out.push_back(r);
    }
    return out;
}

void write_aggregate_json(const fs::path& path, const AggregateReport& report) {
    json doc = {{"label", report.label},
                {"stage", report.stage},
                {"ssim_filter", report.ssim_filter ? json(*report.ssim_filter) : json(nullptr)},
                {"count", report.stats.count},
                {"ssim", {{"mean", report.stats.mean_ssim}, {"median", report.stats.median_ssim}}},
                {"rmse", {{"mean", report.stats.mean_rmse}, {"median", report.stats.median_rmse}}}};
    std::ofstream out = open_for_write(path);
    out << doc.dump(2) << '\n';
}

AggregateReport read_aggregate_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path.string() + "'");
    try {
        json doc;
        in >> doc;
        AggregateReport report;
        report.label = doc.at("label").get<std::string>();
        report.stage = doc.at("stage").get<int>();
        if (!doc.at("ssim_filter").is_null()) report.ssim_filter = doc["ssim_filter"].get<double>();
        report.stats.count = doc.at("count").get<std::size_t>();
        report.stats.mean_ssim = doc.at("ssim").at("mean").get<double>();
        report.stats.median_ssim = doc.at("ssim").at("median").get<double>();
        report.stats.mean_rmse = doc.at("rmse").at("mean").get<double>();
        report.stats.median_rmse = doc.at("rmse").at("median").get<double>();
        return report;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, "malformed aggregate report '" + path.string() + "': " + e.what());
    }
}

void write_histogram_csv(const fs::path& path, const Histogram& histogram) {
    std::ofstream out = open_for_write(path);
    out << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < histogram.counts.size(); ++i) {
        out << fmt(histogram.edges[i]) << ',' << fmt(histogram.edges[i + 1]) << ',' << histogram.counts[i] << '\n';
    }
}

void write_histogram_svg(const fs::path& path, const Histogram& histogram, const std::string& title) {
    constexpr double kWidth = 480.0;
    constexpr double kHeight = 260.0;
    constexpr double kMargin = 30.0;
    const std::size_t peak = histogram.counts.empty()
                                 ? 0
                                 : *std::max_element(histogram.counts.begin(), histogram.counts.end());
    std::ofstream out = open_for_write(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\">\n";
    out << "  <text x=\"" << kMargin << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << title
        << "</text>\n";
    const double plot_w = kWidth - 2 * kMargin;
    const double plot_h = kHeight - 2 * kMargin;
    const double bar_w = histogram.counts.empty() ? 0.0 : plot_w / static_cast<double>(histogram.counts.size());
    for (std::size_t i = 0; i < histogram.counts.size(); ++i) {
        const double bar_h = peak == 0 ? 0.0 : plot_h * static_cast<double>(histogram.counts[i]) / peak;
        out << "  <rect x=\"" << kMargin + i * bar_w << "\" y=\"" << kMargin + plot_h - bar_h << "\" width=\""
            << bar_w * 0.9 << "\" height=\"" << bar_h << "\" fill=\"#4a7ab5\"/>\n";
    }
    out << "  <line x1=\"" << kMargin << "\" y1=\"" << kMargin + plot_h << "\" x2=\"" << kMargin + plot_w
        << "\" y2=\"" << kMargin + plot_h << "\" stroke=\"black\"/>\n";
    out << "  <text x=\"" << kMargin << "\" y=\"" << kHeight - 8 << "\" font-size=\"11\">-1</text>\n";
    out << "  <text x=\"" << kMargin + plot_w - 8 << "\" y=\"" << kHeight - 8 << "\" font-size=\"11\">1</text>\n";
    out << "</svg>\n";
}

void write_cluster_csv(const fs::path& path, const std::vector<ClusterSummary>& clusters) {
    std::ofstream out = open_for_write(path);
    out << "cluster_id,count,mean_elevation_range,ssim_min,ssim_q1,ssim_median,ssim_q3,ssim_max\n";
    for (const auto& c : clusters) {
        out << c.cluster_id << ',' << c.count << ',' << fmt(c.mean_elevation_range) << ',' << fmt(c.ssim_min) << ','
            << fmt(c.ssim_q1) << ',' << fmt(c.ssim_median) << ',' << fmt(c.ssim_q3) << ',' << fmt(c.ssim_max)
            << '\n';
    }
}

}  // namespace demgan
