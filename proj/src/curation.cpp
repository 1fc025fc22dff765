#include "demgan/curation.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/rng.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int to_level(double v) { return static_cast<int>(std::clamp(std::lround(v), 0L, 255L)); }

json region_to_json(const GeoRegion& r) {
    return {{"lat_min", r.lat_min}, {"lat_max", r.lat_max}, {"lon_min", r.lon_min}, {"lon_max", r.lon_max},
            {"resolution_m", r.resolution}};
}

GeoRegion region_from_json(const json& j) {
    return {j.at("lat_min").get<double>(), j.at("lat_max").get<double>(), j.at("lon_min").get<double>(),
            j.at("lon_max").get<double>(), j.value("resolution_m", 30.0)};
}

json entry_to_json(const ManifestEntry& e) {
    json j;
    j["pair_id"] = e.pair_id;
    j["rgb_path"] = e.rgb_path;
    j["dem_path"] = e.dem_path;
    j["region"] = region_to_json(e.region);
    if (e.flags) {
        json f;
        f["low_unique_values"] = json::array();
        for (bool b : e.flags->low_unique_values) f["low_unique_values"].push_back(b);
        f["dominant_value_excess"] = e.flags->dominant_value_excess;
        f["degenerate"] = e.flags->degenerate;
        f["excluded"] = e.flags->excluded;
        j["flags"] = f;
    } else {
        j["flags"] = nullptr;
    }
    j["split"] = e.split ? json(to_string(*e.split)) : json(nullptr);
    j["ssim_score"] = e.ssim_score ? json(*e.ssim_score) : json(nullptr);
    j["elevation_range"] = e.elevation_range;
    return j;
}

ManifestEntry entry_from_json(const json& j) {
    ManifestEntry e;
    e.pair_id = j.at("pair_id").get<std::string>();
    e.rgb_path = j.at("rgb_path").get<std::string>();
    e.dem_path = j.at("dem_path").get<std::string>();
    e.region = region_from_json(j.at("region"));
    if (j.contains("flags") && !j["flags"].is_null()) {
        const json& f = j["flags"];
        QualityFlags flags;
        for (const auto& b : f.at("low_unique_values")) flags.low_unique_values.push_back(b.get<bool>());
        flags.dominant_value_excess = f.at("dominant_value_excess").get<bool>();
        flags.degenerate = f.value("degenerate", false);
        flags.excluded = f.at("excluded").get<bool>();
        e.flags = flags;
    }
    if (j.contains("split") && !j["split"].is_null()) e.split = split_from_string(j["split"].get<std::string>());
    if (j.contains("ssim_score") && !j["ssim_score"].is_null()) e.ssim_score = j["ssim_score"].get<double>();
    e.elevation_range = j.value("elevation_range", 0.0);
    return e;
}

std::ofstream open_for_write(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
    out.precision(17);
    return out;
}

}  // namespace

const char* to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw Error(ErrorKind::argument, "unknown split '" + name + "'");
}

void DatasetManifest::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.pair_id).second) {
            throw Error(ErrorKind::precondition, "duplicate pair id '" + e.pair_id + "'");
        }
        if (!e.usable() && e.split) {
            throw Error(ErrorKind::precondition, "excluded pair '" + e.pair_id + "' carries a split");
        }
    }
}

std::size_t DatasetManifest::count(Split split) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [split](const auto& e) {
        return e.usable() && e.split == split;
    }));
}

std::vector<const ManifestEntry*> DatasetManifest::in_split(Split split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
        if (e.usable() && e.split == split) out.push_back(&e);
    }
    return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& pair_id) const {
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.pair_id == pair_id; });
    return it == entries.end() ? nullptr : &*it;
}

ManifestEntry* DatasetManifest::find(const std::string& pair_id) {
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.pair_id == pair_id; });
    return it == entries.end() ? nullptr : &*it;
}

QualityFlags spectral_diversity_flags(const RasterTile& rgb, const QualityThresholds& thresholds) {
    if (rgb.domain() != ValueDomain::jpeg_0_255) {
        throw Error(ErrorKind::domain, "spectral diversity flags need a jpeg_0_255 tile");
    }
    QualityFlags flags;
    flags.low_unique_values.assign(static_cast<std::size_t>(rgb.bands()), false);
    if (rgb.valid_count() == 0) {
        std::fill(flags.low_unique_values.begin(), flags.low_unique_values.end(), true);
        flags.dominant_value_excess = true;
        flags.degenerate = true;
        flags.excluded = true;
        return flags;
    }

    std::array<std::size_t, 256> joint{};
    std::size_t joint_total = 0;
    double worst_band_share = 0.0;
    for (int b = 0; b < rgb.bands(); ++b) {
        std::array<std::size_t, 256> hist{};
        std::size_t total = 0;
        const auto values = rgb.band(b);
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (rgb.masked(i)) continue;
            ++hist[static_cast<std::size_t>(to_level(values[i]))];
            ++total;
        }
        const auto distinct = std::count_if(hist.begin(), hist.end(), [](std::size_t c) { return c > 0; });
        flags.low_unique_values[static_cast<std::size_t>(b)] = distinct < thresholds.min_unique_values;
        const std::size_t peak = *std::max_element(hist.begin(), hist.end());
        worst_band_share = std::max(worst_band_share, static_cast<double>(peak) / static_cast<double>(total));
        for (std::size_t level = 0; level < hist.size(); ++level) joint[level] += hist[level];
        joint_total += total;
    }
    const double joint_share =
        static_cast<double>(*std::max_element(joint.begin(), joint.end())) / static_cast<double>(joint_total);
    const double share = thresholds.dominant_mode == DominantShareMode::joint ? joint_share : worst_band_share;
    flags.dominant_value_excess = share > thresholds.max_dominant_share;

    const bool any_low = std::any_of(flags.low_unique_values.begin(), flags.low_unique_values.end(),
                                     [](bool b) { return b; });
    flags.excluded = any_low || flags.dominant_value_excess;
    return flags;
}

ExclusionResult exclude_flagged_pairs(const DatasetManifest& manifest) {
    std::vector<std::string> unflagged;
    for (const auto& e : manifest.entries) {
        if (!e.flags) unflagged.push_back(e.pair_id);
    }
    if (!unflagged.empty()) {
        std::string list;
        for (const auto& id : unflagged) list += (list.empty() ? "" : ", ") + id;
        throw Error(ErrorKind::precondition, "quality flags missing for: " + list);
    }
    ExclusionResult result{manifest, 0, {}};
    for (auto& e : result.manifest.entries) {
        if (e.flags->excluded) {
            e.split.reset();
            result.excluded_ids.push_back(e.pair_id);
        } else {
            ++result.retained;
        }
    }
    return result;
}

SplitCounts split_counts(std::size_t n, const SplitFractions& fractions) {
    for (double f : {fractions.train, fractions.val, fractions.test}) {
        if (!(f >= 0.0 && f <= 1.0)) throw Error(ErrorKind::argument, "split fractions must lie in [0, 1]");
    }
    if (std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
        throw Error(ErrorKind::argument, "split fractions must sum to 1");
    }
    SplitCounts counts;
    counts.val = static_cast<std::size_t>(std::llround(fractions.val * static_cast<double>(n)));
    counts.test = static_cast<std::size_t>(std::llround(fractions.test * static_cast<double>(n)));
    if (counts.val + counts.test > n) throw Error(ErrorKind::argument, "split fractions leave no room for training");
    counts.train = n - counts.val - counts.test;
    return counts;
}

DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitFractions& fractions, std::uint64_t seed) {
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].usable()) usable.push_back(i);
    }
    const SplitCounts counts = split_counts(usable.size(), fractions);
    if (usable.size() < 3) {
        throw Error(ErrorKind::empty_dataset,
                    "splitting needs at least 3 usable pairs, found " + std::to_string(usable.size()));
    }
    std::sort(usable.begin(), usable.end(), [&](std::size_t a, std::size_t b) {
        return manifest.entries[a].pair_id < manifest.entries[b].pair_id;
    });
    Rng rng(seed);
    shuffle_in_place(usable, rng);

    DatasetManifest out = manifest;
    for (auto& e : out.entries) {
        if (!e.usable()) e.split.reset();
    }
    for (std::size_t k = 0; k < usable.size(); ++k) {
        Split s = Split::train;
        if (k < counts.val) {
            s = Split::val;
        } else if (k < counts.val + counts.test) {
            s = Split::test;
        }
        out.entries[usable[k]].split = s;
    }
    return out;
}

RefinementResult filter_training_by_ssim(const DatasetManifest& manifest, double threshold) {
    std::string unscored;
    for (const auto* e : manifest.in_split(Split::train)) {
        if (!e->ssim_score) unscored += (unscored.empty() ? "" : ", ") + e->pair_id;
    }
    if (!unscored.empty()) throw Error(ErrorKind::precondition, "training pairs without SSIM scores: " + unscored);

    RefinementResult result{{}, {}, threshold};
    for (const auto& e : manifest.entries) {
        if (e.usable() && e.split == Split::train && *e.ssim_score < threshold) {
            result.removed.push_back(e);
        } else {
            result.manifest.entries.push_back(e);
        }
    }
    return result;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
    manifest.validate();
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out = open_for_write(tmp);
        for (const auto& e : manifest.entries) out << entry_to_json(e).dump() << '\n';
        if (!out) throw Error(ErrorKind::io, "failed writing '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open manifest '" + path.string() + "'");
    DatasetManifest manifest;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            manifest.entries.push_back(entry_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::io, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    manifest.validate();
    return manifest;
}

void write_exclusion_audit(const fs::path& path, const DatasetManifest& manifest) {
    std::ofstream out = open_for_write(path);
    out << "pair_id,low_unique_bands,dominant_value_excess,degenerate,excluded\n";
    for (const auto& e : manifest.entries) {
        if (!e.flags) continue;
        std::string bands;
        for (std::size_t b = 0; b < e.flags->low_unique_values.size(); ++b) {
            if (e.flags->low_unique_values[b]) bands += (bands.empty() ? "" : ";") + std::to_string(b);
        }
        out << e.pair_id << ',' << bands << ',' << e.flags->dominant_value_excess << ',' << e.flags->degenerate << ','
            << e.flags->excluded << '\n';
    }
}

void write_refinement_audit(const fs::path& path, const RefinementResult& result) {
    std::ofstream out = open_for_write(path);
    out << "pair_id,ssim_score,threshold\n";
    for (const auto& e : result.removed) {
        out << e.pair_id << ',' << *e.ssim_score << ',' << result.threshold << '\n';
    }
}

ManifestLock::ManifestLock(const fs::path& manifest_path) : lock_path_(manifest_path.string() + ".lock") {
    if (lock_path_.has_parent_path()) fs::create_directories(lock_path_.parent_path());
    const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw Error(ErrorKind::io, "manifest is locked by another command: '" + lock_path_.string() + "'");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

ManifestLock::~ManifestLock() {
    std::error_code ec;
    fs::remove(lock_path_, ec);
}

}  // namespace demgan
