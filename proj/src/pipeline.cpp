#include "demgan/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/geotiff.hpp"
#include "demgan/rng.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

void reject_unknown_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw Error(ErrorKind::config, where + " must be an object");
    for (const auto& item : obj.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
        if (!known) throw Error(ErrorKind::config, "unknown key '" + item.key() + "' in " + where);
    }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

fs::path resolve(const fs::path& base, const json& obj, const char* key) {
    if (!obj.contains(key)) throw Error(ErrorKind::config, std::string("paths.") + key + " is required");
    const fs::path p = obj.at(key).get<std::string>();
    return p.is_absolute() ? p : base / p;
}

StageParams stage_from_json(const json& j, StageParams s, const std::string& where) {
    reject_unknown_keys(j, where, {"learning_rate", "steps", "batch_size", "lambda_l1", "checkpoint_interval"});
    read_opt(j, "learning_rate", s.learning_rate);
    read_opt(j, "steps", s.steps);
    read_opt(j, "batch_size", s.batch_size);
    read_opt(j, "lambda_l1", s.lambda_l1);
    read_opt(j, "checkpoint_interval", s.checkpoint_interval);
    return s;
}

json stage_to_json(const StageParams& s) {
    return {{"learning_rate", s.learning_rate},
            {"steps", s.steps},
            {"batch_size", s.batch_size},
            {"lambda_l1", s.lambda_l1},
            {"checkpoint_interval", s.checkpoint_interval}};
}

fs::path manifest_dir(const PipelineConfig& config) { return config.paths.manifest.parent_path(); }

std::string format_threshold(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", t);
    return buf;
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw Error(ErrorKind::precondition, what + " not found: '" + path.string() + "'");
}

RasterTile fit_to_tile(const RasterTile& tile, int size) {
    if (tile.width() == size && tile.height() == size) return tile;
    return resample_tile(tile, size, size);
}

}  // namespace

// ---- config ------------------------------------------------------------------

void PipelineConfig::validate() const {
    stretch.validate();
    generator.validate();
    discriminator.validate();
    if (tile_size < 16) throw Error(ErrorKind::config, "tile_size must be >= 16");
    if (tile_size % (1 << generator.depth) != 0) {
        throw Error(ErrorKind::config, "tile_size must be divisible by 2^generator.depth");
    }
    if (discriminator.patch_grid(tile_size) < 1) throw Error(ErrorKind::config, "discriminator too deep for tile_size");
    if (!(sites.buffer > 0.0)) throw Error(ErrorKind::config, "sites.buffer must be positive");
    if (sites.kmeans.k < 1 || sites.kmeans.batch_size < 1 || sites.kmeans.max_iterations < 1) {
        throw Error(ErrorKind::config, "sites.k, sites.batch_size and sites.max_iterations must be >= 1");
    }
    if (!(mosaic.max_cloud_cover > 0.0 && mosaic.max_cloud_cover <= 100.0)) {
        throw Error(ErrorKind::config, "max_cloud_cover must be in (0, 100]");
    }
    if (quality.min_unique_values < 1 || quality.min_unique_values > 256) {
        throw Error(ErrorKind::config, "quality.min_unique_values must be in [1, 256]");
    }
    if (!(quality.max_dominant_share > 0.0 && quality.max_dominant_share <= 1.0)) {
        throw Error(ErrorKind::config, "quality.max_dominant_share must be in (0, 1]");
    }
    const double total = split.train + split.val + split.test;
    if (split.train <= 0.0 || split.val < 0.0 || split.test <= 0.0 || std::abs(total - 1.0) > 1e-9) {
        throw Error(ErrorKind::config, "split fractions must be non-negative, with train and test positive, and sum to 1");
    }
    if (!(corrupt_train_fraction >= 0.0 && corrupt_train_fraction <= 1.0)) {
        throw Error(ErrorKind::config, "corrupt_train_fraction must be in [0, 1]");
    }
    if (!(ssim_filter_threshold >= -1.0 && ssim_filter_threshold <= 1.0)) {
        throw Error(ErrorKind::config, "ssim_filter_threshold must be in [-1, 1]");
    }
    if (eval.histogram_bins < 1 || eval.elevation_clusters < 1) {
        throw Error(ErrorKind::config, "eval.histogram_bins and eval.elevation_clusters must be >= 1");
    }
    stage_config(*this, Stage::stage1).validate();
    stage_config(*this, Stage::stage2).validate();
}

PipelineConfig pipeline_config_from_json(const json& doc, const fs::path& base_dir) {
    PipelineConfig c;
    try {
        reject_unknown_keys(doc, "config",
                            {"seed", "paths", "tile_size", "stretch", "sites", "mosaic", "quality", "split",
                             "corrupt_train_fraction", "corrupt_mode", "generator", "discriminator", "stage1", "stage2",
                             "ssim_filter_threshold", "eval", "synthetic"});
        read_opt(doc, "seed", c.seed);
        read_opt(doc, "tile_size", c.tile_size);
        if (c.tile_size >= 256) {
            c.generator.depth = 6;
            c.generator.base_channels = 32;
        }
        read_opt(doc, "corrupt_train_fraction", c.corrupt_train_fraction);
        if (doc.contains("corrupt_mode")) {
            const auto mode = doc.at("corrupt_mode").get<std::string>();
            if (mode == "swap") {
                c.corrupt_mode = CorruptionMode::swap;
            } else if (mode == "noise") {
                c.corrupt_mode = CorruptionMode::noise;
            } else {
                throw Error(ErrorKind::config, "corrupt_mode must be 'swap' or 'noise', got '" + mode + "'");
            }
        }
        read_opt(doc, "ssim_filter_threshold", c.ssim_filter_threshold);

        if (!doc.contains("paths")) throw Error(ErrorKind::config, "paths section is required");
        const json& p = doc.at("paths");
        reject_unknown_keys(p, "paths", {"catalog", "cloud_grid", "sites", "manifest", "checkpoints", "reports"});
        c.paths.catalog = resolve(base_dir, p, "catalog");
        c.paths.cloud_grid = resolve(base_dir, p, "cloud_grid");
        c.paths.sites = resolve(base_dir, p, "sites");
        c.paths.manifest = resolve(base_dir, p, "manifest");
        c.paths.checkpoints = resolve(base_dir, p, "checkpoints");
        c.paths.reports = resolve(base_dir, p, "reports");

        if (doc.contains("stretch")) {
            const json& s = doc.at("stretch");
            reject_unknown_keys(s, "stretch", {"lower_percentile", "upper_percentile", "round_to_8bit"});
            read_opt(s, "lower_percentile", c.stretch.lower_percentile);
            read_opt(s, "upper_percentile", c.stretch.upper_percentile);
            read_opt(s, "round_to_8bit", c.stretch.round_to_8bit);
        }
        if (doc.contains("sites")) {
            const json& s = doc.at("sites");
            reject_unknown_keys(s, "sites", {"buffer", "k", "batch_size", "max_iterations", "tolerance", "mode"});
            read_opt(s, "buffer", c.sites.buffer);
            read_opt(s, "k", c.sites.kmeans.k);
            read_opt(s, "batch_size", c.sites.kmeans.batch_size);
            read_opt(s, "max_iterations", c.sites.kmeans.max_iterations);
            read_opt(s, "tolerance", c.sites.kmeans.tolerance);
            if (s.contains("mode")) {
                const auto mode = s.at("mode").get<std::string>();
                if (mode == "representatives") {
                    c.sites.mode = SiteMode::representatives;
                } else if (mode == "all") {
                    c.sites.mode = SiteMode::all_candidates;
                } else {
                    throw Error(ErrorKind::config, "sites.mode must be 'representatives' or 'all'");
                }
            }
        }
        if (doc.contains("mosaic")) {
            const json& m = doc.at("mosaic");
            reject_unknown_keys(m, "mosaic", {"max_cloud_cover", "fallback_mode"});
            read_opt(m, "max_cloud_cover", c.mosaic.max_cloud_cover);
            if (m.contains("fallback_mode")) {
                const auto mode = m.at("fallback_mode").get<std::string>();
                if (mode == "per_pixel") {
                    c.mosaic.fallback_mode = FallbackMode::per_pixel;
                } else if (mode == "per_region") {
                    c.mosaic.fallback_mode = FallbackMode::per_region;
                } else {
                    throw Error(ErrorKind::config, "mosaic.fallback_mode must be 'per_pixel' or 'per_region'");
                }
            }
        }
        if (doc.contains("quality")) {
            const json& q = doc.at("quality");
            reject_unknown_keys(q, "quality", {"min_unique_values", "max_dominant_share", "dominant_mode"});
            read_opt(q, "min_unique_values", c.quality.min_unique_values);
            read_opt(q, "max_dominant_share", c.quality.max_dominant_share);
            if (q.contains("dominant_mode")) {
                const auto mode = q.at("dominant_mode").get<std::string>();
                if (mode == "joint") {
                    c.quality.dominant_mode = DominantShareMode::joint;
                } else if (mode == "per_band") {
                    c.quality.dominant_mode = DominantShareMode::per_band;
                } else {
                    throw Error(ErrorKind::config, "quality.dominant_mode must be 'joint' or 'per_band'");
                }
            }
        }
        if (doc.contains("split")) {
            const json& s = doc.at("split");
            reject_unknown_keys(s, "split", {"train", "val", "test"});
            read_opt(s, "train", c.split.train);
            read_opt(s, "val", c.split.val);
            read_opt(s, "test", c.split.test);
        }
        if (doc.contains("generator")) {
            const json& g = doc.at("generator");
            reject_unknown_keys(g, "generator",
                                {"depth", "base_channels", "dropout", "dropout_levels", "skip_connections"});
            read_opt(g, "depth", c.generator.depth);
            read_opt(g, "base_channels", c.generator.base_channels);
            read_opt(g, "dropout", c.generator.dropout);
            read_opt(g, "dropout_levels", c.generator.dropout_levels);
            read_opt(g, "skip_connections", c.generator.skip_connections);
        }
        if (doc.contains("discriminator")) {
            const json& d = doc.at("discriminator");
            reject_unknown_keys(d, "discriminator", {"layers", "base_channels"});
            read_opt(d, "layers", c.discriminator.layers);
            read_opt(d, "base_channels", c.discriminator.base_channels);
        }
        if (doc.contains("stage1")) c.stage1 = stage_from_json(doc.at("stage1"), c.stage1, "stage1");
        if (doc.contains("stage2")) c.stage2 = stage_from_json(doc.at("stage2"), c.stage2, "stage2");
        if (doc.contains("eval")) {
            const json& e = doc.at("eval");
            reject_unknown_keys(e, "eval", {"histogram_bins", "elevation_clusters"});
            read_opt(e, "histogram_bins", c.eval.histogram_bins);
            read_opt(e, "elevation_clusters", c.eval.elevation_clusters);
        }
        if (doc.contains("synthetic")) {
            const json& s = doc.at("synthetic");
            reject_unknown_keys(s, "synthetic",
                                {"regions", "size", "primary_scenes", "fallback_scenes", "degenerate_fraction",
                                 "all_cloudy", "min_relief", "max_relief", "noise_sigma"});
            read_opt(s, "regions", c.synthetic.regions);
            read_opt(s, "size", c.synthetic.size);
            read_opt(s, "primary_scenes", c.synthetic.primary_scenes);
            read_opt(s, "fallback_scenes", c.synthetic.fallback_scenes);
            read_opt(s, "degenerate_fraction", c.synthetic.degenerate_fraction);
            read_opt(s, "all_cloudy", c.synthetic.all_cloudy);
            read_opt(s, "min_relief", c.synthetic.terrain.min_relief);
            read_opt(s, "max_relief", c.synthetic.terrain.max_relief);
            read_opt(s, "noise_sigma", c.synthetic.terrain.noise_sigma);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, e.what());
    }
    c.synthetic.seed = derive_seed(c.seed, "synthetic");
    c.sites.kmeans.seed = derive_seed(c.seed, "kmeans");
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorKind::config, "override '" + assignment + "' is not key.path=value");
    }
    std::string pointer = "/" + assignment.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    doc[json::json_pointer(pointer)] = value;
}

PipelineConfig load_pipeline_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::config, "cannot open config '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
        for (const auto& o : overrides) apply_override(doc, o);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, path.string() + ": " + e.what());
    }
    return pipeline_config_from_json(doc, path.parent_path());
}

json pipeline_config_to_json(const PipelineConfig& c) {
    return {
        {"seed", c.seed},
        {"paths",
         {{"catalog", c.paths.catalog.string()},
          {"cloud_grid", c.paths.cloud_grid.string()},
          {"sites", c.paths.sites.string()},
          {"manifest", c.paths.manifest.string()},
          {"checkpoints", c.paths.checkpoints.string()},
          {"reports", c.paths.reports.string()}}},
        {"tile_size", c.tile_size},
        {"stretch",
         {{"lower_percentile", c.stretch.lower_percentile},
          {"upper_percentile", c.stretch.upper_percentile},
          {"round_to_8bit", c.stretch.round_to_8bit}}},
        {"sites",
         {{"buffer", c.sites.buffer},
          {"k", c.sites.kmeans.k},
          {"batch_size", c.sites.kmeans.batch_size},
          {"max_iterations", c.sites.kmeans.max_iterations},
          {"tolerance", c.sites.kmeans.tolerance},
          {"mode", c.sites.mode == SiteMode::representatives ? "representatives" : "all"}}},
        {"mosaic",
         {{"max_cloud_cover", c.mosaic.max_cloud_cover},
          {"fallback_mode", c.mosaic.fallback_mode == FallbackMode::per_pixel ? "per_pixel" : "per_region"}}},
        {"quality",
         {{"min_unique_values", c.quality.min_unique_values},
          {"max_dominant_share", c.quality.max_dominant_share},
          {"dominant_mode", c.quality.dominant_mode == DominantShareMode::joint ? "joint" : "per_band"}}},
        {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
        {"corrupt_train_fraction", c.corrupt_train_fraction},
        {"corrupt_mode", c.corrupt_mode == CorruptionMode::swap ? "swap" : "noise"},
        {"generator",
         {{"depth", c.generator.depth},
          {"base_channels", c.generator.base_channels},
          {"dropout", c.generator.dropout},
          {"dropout_levels", c.generator.dropout_levels},
          {"skip_connections", c.generator.skip_connections}}},
        {"discriminator", {{"layers", c.discriminator.layers}, {"base_channels", c.discriminator.base_channels}}},
        {"stage1", stage_to_json(c.stage1)},
        {"stage2", stage_to_json(c.stage2)},
        {"ssim_filter_threshold", c.ssim_filter_threshold},
        {"eval", {{"histogram_bins", c.eval.histogram_bins}, {"elevation_clusters", c.eval.elevation_clusters}}},
        {"synthetic",
         {{"regions", c.synthetic.regions},
          {"size", c.synthetic.size},
          {"primary_scenes", c.synthetic.primary_scenes},
          {"fallback_scenes", c.synthetic.fallback_scenes},
          {"degenerate_fraction", c.synthetic.degenerate_fraction},
          {"all_cloudy", c.synthetic.all_cloudy},
          {"min_relief", c.synthetic.terrain.min_relief},
          {"max_relief", c.synthetic.terrain.max_relief},
          {"noise_sigma", c.synthetic.terrain.noise_sigma}}},
    };
}

TrainingStageConfig stage_config(const PipelineConfig& config, Stage stage) {
    const StageParams& p = stage == Stage::stage1 ? config.stage1 : config.stage2;
    TrainingStageConfig t;
    t.learning_rate = p.learning_rate;
    t.steps = p.steps;
    t.batch_size = p.batch_size;
    t.lambda_l1 = p.lambda_l1;
    t.checkpoint_interval = p.checkpoint_interval;
    t.stage = stage;
    t.seed = derive_seed(config.seed, stage == Stage::stage1 ? "stage1" : "stage2");
    return t;
}

std::string run_label(Stage stage, std::optional<double> ssim_filter) {
    if (stage == Stage::stage1) return "stage1";
    return "stage2_ssim" + format_threshold(ssim_filter.value_or(0.0));
}

fs::path checkpoint_path(const PipelineConfig& config, Stage stage, std::optional<double> ssim_filter) {
    return config.paths.checkpoints / (run_label(stage, ssim_filter) + ".ckpt");
}

fs::path stage2_manifest_path(const PipelineConfig& config, double ssim_filter) {
    const fs::path& m = config.paths.manifest;
    return m.parent_path() / (m.stem().string() + "_ssim" + format_threshold(ssim_filter) + m.extension().string());
}

// ---- helpers -------------------------------------------------------------------

namespace {

std::vector<std::size_t> pick_training_pairs(const DatasetManifest& manifest, double fraction, Rng& rng) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error(ErrorKind::argument, "corruption fraction must be in [0, 1]");
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].usable() && manifest.entries[i].split == Split::train) train.push_back(i);
    }
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size())));
    shuffle_in_place(train, rng);
    train.resize(count);
    std::sort(train.begin(), train.end());
    return train;
}

}  // namespace

DatasetManifest corrupt_training_pairs(const DatasetManifest& manifest, double fraction, std::uint64_t seed,
                                       std::vector<std::string>* corrupted_ids) {
    DatasetManifest out = manifest;
    Rng rng(seed);
    const std::vector<std::size_t> picked = pick_training_pairs(manifest, fraction, rng);
    const std::size_t count = picked.size();
    if (count < 2) {
        if (count == 1) warn("corruption needs at least two pairs; nothing corrupted");
        return out;
    }
    const ManifestEntry first = out.entries[picked[0]];
    for (std::size_t k = 0; k < count; ++k) {
        ManifestEntry& dst = out.entries[picked[k]];
        const ManifestEntry& src = k + 1 < count ? out.entries[picked[k + 1]] : first;
        dst.dem_path = src.dem_path;
        dst.elevation_range = src.elevation_range;
        if (corrupted_ids) corrupted_ids->push_back(dst.pair_id);
    }
    return out;
}

DatasetManifest corrupt_training_pairs_with_noise(const DatasetManifest& manifest, double fraction, std::uint64_t seed,
                                                  const fs::path& manifest_dir, std::vector<std::string>* corrupted_ids) {
    DatasetManifest out = manifest;
    Rng rng(seed);
    for (std::size_t index : pick_training_pairs(manifest, fraction, rng)) {
        ManifestEntry& e = out.entries[index];
        const RasterTile dem = read_geotiff(manifest_dir / e.dem_path);
        RasterTile noise(dem.width(), dem.height(), 1, ValueDomain::signed_unit, dem.georef());
        for (double& v : noise.values()) v = 2.0 * uniform01(rng) - 1.0;
        e.dem_path = "tiles/" + e.pair_id + "_dem_noise.tif";
        write_geotiff(manifest_dir / e.dem_path, noise);
        if (corrupted_ids) corrupted_ids->push_back(e.pair_id);
    }
    return out;
}

CloudFractionGrid synthetic_cloud_grid(std::uint64_t seed, int rows, int cols, double zero_share) {
    if (rows < 1 || cols < 1) throw Error(ErrorKind::argument, "cloud grid needs at least one cell");
    Rng rng(seed);
    CloudFractionGrid grid;
    grid.month = 7;
    const double dlat = 110.0 / rows;
    const double dlon = 360.0 / cols;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const LatLon center{-50.0 + dlat * (r + 0.5), -180.0 + dlon * (c + 0.5)};
            const double u = uniform01(rng);
            const double fraction = u < zero_share ? 0.0 : 0.01 + 0.99 * uniform01(rng);
            grid.cells.push_back({center, fraction});
        }
    }
    return grid;
}

void write_cloud_grid_csv(const fs::path& path, const CloudFractionGrid& grid) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
    out.precision(17);
    out << "lat,lon,fraction\n";
    for (const auto& c : grid.cells) out << c.center.lat << ',' << c.center.lon << ',' << c.cloud_fraction << '\n';
}

// ---- commands ------------------------------------------------------------------

fs::path cmd_synth(const PipelineConfig& config) {
    if (config.paths.catalog.filename() != "index.json") {
        throw Error(ErrorKind::config, "synthetic catalogs are written as index.json; set paths.catalog accordingly");
    }
    SyntheticCatalogOptions opts = config.synthetic;
    const fs::path index = write_synthetic_catalog(config.paths.catalog.parent_path(), opts);
    write_cloud_grid_csv(config.paths.cloud_grid, synthetic_cloud_grid(derive_seed(config.seed, "cloud-grid"), 40, 80));
    return index;
}

SitesResult cmd_sites(const PipelineConfig& config) {
    const CloudFractionGrid grid = read_cloud_grid(config.paths.cloud_grid);
    const std::vector<LatLon> zero = extract_zero_cloud_sites(grid);
    if (zero.empty()) throw Error(ErrorKind::empty_dataset, "no cell with zero cloud fraction");

    SitesResult result;
    for (const auto& p : zero) result.candidates.push_back({p, buffer_site(p, config.sites.buffer), std::nullopt});
    result.model = minibatch_kmeans(zero, config.sites.kmeans);
    for (std::size_t i = 0; i < result.candidates.size(); ++i) {
        result.candidates[i].cluster_id = nearest_centroid(result.model, result.candidates[i].center);
    }
    result.selected = config.sites.mode == SiteMode::representatives
                          ? select_representative_sites(result.model, result.candidates)
                          : result.candidates;

    const fs::path& dir = config.paths.sites;
    write_sites_csv(dir / "candidates.csv", result.candidates);
    write_sites_csv(dir / "sites.csv", result.selected);
    write_sites_json(dir / "sites.json", result.selected, result.model);
    return result;
}

DatasetManifest cmd_build(const PipelineConfig& config) {
    require_file(config.paths.catalog, "catalog");
    const SceneCatalog catalog = load_catalog(config.paths.catalog);
    if (catalog.regions.empty()) throw Error(ErrorKind::empty_dataset, "catalog has no regions");

    const fs::path dir = manifest_dir(config);
    ManifestLock lock(config.paths.manifest);
    std::vector<const CatalogRegion*> regions;
    for (const auto& r : catalog.regions) regions.push_back(&r);
    std::sort(regions.begin(), regions.end(),
              [](const auto* a, const auto* b) { return a->region_id < b->region_id; });

    DatasetManifest manifest;
    std::size_t skipped = 0;
    for (const auto* region : regions) {
        RasterTile mosaic;
        try {
            mosaic = build_region_mosaic(load_image_stack(catalog, *region), config.mosaic);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::empty_dataset) throw;
            warn("region " + region->region_id + " skipped: " + e.what());
            ++skipped;
            continue;
        }
        RasterTile dem = read_geotiff(catalog.root / region->dem_path);
        if (dem.bands() != 1) throw Error(ErrorKind::alignment, "DEM for " + region->region_id + " is not single-band");
        mosaic = fit_to_tile(mosaic, config.tile_size);
        dem = to_relative_elevation(fit_to_tile(dem, config.tile_size));

        ManifestEntry entry;
        entry.pair_id = region->region_id;
        entry.region = region->region;
        entry.elevation_range = elevation_range(dem);
        entry.rgb_path = "tiles/" + entry.pair_id + "_rgb.tif";
        entry.dem_path = "tiles/" + entry.pair_id + "_dem.tif";
        try {
            write_geotiff(dir / entry.rgb_path, scale_to_signed_unit(stretch_min_max(mosaic, config.stretch)));
            write_geotiff(dir / entry.dem_path, scale_to_signed_unit(stretch_min_max(dem, config.stretch)));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::degenerate_input) throw;
            warn("region " + region->region_id + " skipped: " + e.what());
            ++skipped;
            continue;
        }
        manifest.entries.push_back(std::move(entry));
    }
    if (manifest.entries.empty()) warn("no region produced a usable mosaic; manifest is empty");
    if (skipped > 0) warn(std::to_string(skipped) + " of " + std::to_string(regions.size()) + " regions skipped");
    write_manifest(config.paths.manifest, manifest);
    return manifest;
}

DatasetManifest cmd_curate(const PipelineConfig& config) {
    require_file(config.paths.manifest, "manifest");
    const fs::path dir = manifest_dir(config);
    ManifestLock lock(config.paths.manifest);
    DatasetManifest manifest = read_manifest(config.paths.manifest);
    if (manifest.entries.empty()) throw Error(ErrorKind::empty_dataset, "manifest is empty");

    // Restore built DEM paths.
    std::map<std::string, double> range_by_dem;
    for (const auto& e : manifest.entries) range_by_dem[e.dem_path] = e.elevation_range;
    for (auto& e : manifest.entries) {
        e.dem_path = "tiles/" + e.pair_id + "_dem.tif";
        if (const auto it = range_by_dem.find(e.dem_path); it != range_by_dem.end()) e.elevation_range = it->second;
        e.split.reset();
        e.ssim_score.reset();
        e.flags = spectral_diversity_flags(signed_unit_to_jpeg(read_geotiff(dir / e.rgb_path)), config.quality);
    }
    ExclusionResult excluded = exclude_flagged_pairs(manifest);
    write_exclusion_audit(config.paths.reports / "exclusions.csv", excluded.manifest);
    DatasetManifest split = split_dataset(excluded.manifest, config.split, derive_seed(config.seed, "split"));

    if (config.corrupt_train_fraction > 0.0) {
        std::vector<std::string> ids;
        const std::uint64_t seed = derive_seed(config.seed, "corrupt");
        split = config.corrupt_mode == CorruptionMode::swap
                    ? corrupt_training_pairs(split, config.corrupt_train_fraction, seed, &ids)
                    : corrupt_training_pairs_with_noise(split, config.corrupt_train_fraction, seed, dir, &ids);
        std::ofstream out(config.paths.reports / "corrupted.csv");
        out << "pair_id\n";
        for (const auto& id : ids) out << id << '\n';
    }
    write_manifest(config.paths.manifest, split);
    return split;
}

TrainOutcome cmd_train(const PipelineConfig& config, Stage stage, std::optional<double> ssim_filter) {
    const fs::path dir = manifest_dir(config);
    if (stage == Stage::stage2 && !fs::exists(config.paths.manifest)) {
        std::string missing = "\n  manifest '" + config.paths.manifest.string() + "'";
        const fs::path stage1_ckpt = checkpoint_path(config, Stage::stage1, std::nullopt);
        if (!fs::exists(stage1_ckpt)) missing += "\n  stage-1 checkpoint '" + stage1_ckpt.string() + "'";
        throw Error(ErrorKind::precondition, "stage 2 prerequisites missing:" + missing);
    }
    require_file(config.paths.manifest, "manifest");
    DatasetManifest manifest = read_manifest(config.paths.manifest);
    TrainOutcome outcome;
    TrainOptions options;
    options.manifest_dir = dir;

    if (stage == Stage::stage1) {
        if (manifest.count(Split::train) == 0) {
            throw Error(ErrorKind::precondition, "manifest has no train split; run curate first");
        }
        outcome.checkpoint = checkpoint_path(config, stage, std::nullopt);
        outcome.log = config.paths.reports / "stage1_train_log.csv";
        options.checkpoint_path = outcome.checkpoint;
        options.log_path = outcome.log;
        ModelCheckpoint init = ModelCheckpoint::fresh(config.generator, config.discriminator, config.tile_size,
                                                      derive_seed(config.seed, "model-init"));
        TrainResult trained = train_stage(manifest, stage_config(config, stage), std::move(init), options);
        outcome.train_pairs = manifest.count(Split::train);

        ManifestLock lock(config.paths.manifest);
        write_manifest(config.paths.manifest, score_training_split(make_predictor(trained.checkpoint), manifest, dir));
        return outcome;
    }

    const double threshold = ssim_filter.value_or(config.ssim_filter_threshold);
    const fs::path stage1_ckpt = checkpoint_path(config, Stage::stage1, std::nullopt);
    std::string missing;
    if (!fs::exists(stage1_ckpt)) missing += "\n  stage-1 checkpoint '" + stage1_ckpt.string() + "'";
    std::size_t unscored = 0;
    for (const auto* e : manifest.in_split(Split::train)) unscored += e->ssim_score ? 0 : 1;
    if (manifest.count(Split::train) == 0) {
        missing += "\n  train split in '" + config.paths.manifest.string() + "'";
    } else if (unscored > 0) {
        missing += "\n  stage-1 SSIM scores for " + std::to_string(unscored) + " train pairs";
    }
    if (!missing.empty()) throw Error(ErrorKind::precondition, "stage 2 prerequisites missing:" + missing);

    RefinementResult refined = filter_training_by_ssim(manifest, threshold);
    const std::string label = run_label(stage, threshold);
    write_refinement_audit(config.paths.reports / (label + "_removed.csv"), refined);
    const fs::path refined_path = stage2_manifest_path(config, threshold);
    write_manifest(refined_path, refined.manifest);
    if (refined.manifest.count(Split::train) == 0) {
        throw Error(ErrorKind::empty_dataset, "SSIM filter " + format_threshold(threshold) + " removed every train pair");
    }

    outcome.checkpoint = checkpoint_path(config, stage, threshold);
    outcome.log = config.paths.reports / (label + "_train_log.csv");
    outcome.train_pairs = refined.manifest.count(Split::train);
    outcome.removed_pairs = refined.removed.size();
    options.checkpoint_path = outcome.checkpoint;
    options.log_path = outcome.log;
    train_stage(refined.manifest, stage_config(config, stage), load_checkpoint(stage1_ckpt), options);
    return outcome;
}

EvalOutcome cmd_eval(const PipelineConfig& config, const fs::path& checkpoint, const std::string& label,
                     std::optional<double> ssim_filter) {
    require_file(config.paths.manifest, "manifest");
    if (!fs::exists(checkpoint)) {
        throw Error(ErrorKind::precondition, "checkpoint not found: '" + checkpoint.string() + "'");
    }
    const DatasetManifest manifest = read_manifest(config.paths.manifest);
    ModelCheckpoint ck = load_checkpoint(checkpoint);
    const std::string digest = split_digest(manifest, Split::test);
    if (!ck.test_split_digest.empty() && ck.test_split_digest != digest) {
        throw Error(ErrorKind::precondition, "checkpoint was trained against a different test split");
    }

    EvalOutcome outcome;
    outcome.report_dir = config.paths.reports / label;
    const auto records = evaluate_model(make_predictor(ck), manifest, manifest_dir(config), Split::test);
    const int clusters = std::min(config.eval.elevation_clusters, static_cast<int>(records.size()));
    outcome.records = cluster_by_elevation_range(records, clusters,
                                                 derive_seed(config.seed, "elevation-clusters"));
    outcome.stats = aggregate_stats(outcome.records);

    fs::create_directories(outcome.report_dir);
    write_eval_records_csv(outcome.report_dir / "records.csv", outcome.records);
    write_aggregate_json(outcome.report_dir / "aggregate.json",
                         {label, static_cast<int>(ck.stage), ssim_filter, outcome.stats});
    const Histogram hist = ssim_histogram(outcome.records, config.eval.histogram_bins);
    write_histogram_csv(outcome.report_dir / "ssim_histogram.csv", hist);
    write_histogram_svg(outcome.report_dir / "ssim_histogram.svg", hist, "Test SSIM, " + label);
    write_cluster_csv(outcome.report_dir / "elevation_clusters.csv", summarize_clusters(outcome.records));
    return outcome;
}

std::vector<ReportRow> cmd_report(const PipelineConfig& config) {
    std::vector<ReportRow> rows;
    if (fs::exists(config.paths.reports)) {
        for (const auto& item : fs::directory_iterator(config.paths.reports)) {
            const fs::path agg = item.path() / "aggregate.json";
            if (!item.is_directory() || !fs::exists(agg)) continue;
            const AggregateReport r = read_aggregate_json(agg);
            rows.push_back({r.label, r.stage, r.ssim_filter, r.stats});
        }
    }
    if (rows.empty()) throw Error(ErrorKind::precondition, "no evaluated runs under '" + config.paths.reports.string() + "'");
    std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
        if (a.stage != b.stage) return a.stage < b.stage;
        if (a.ssim_filter.has_value() != b.ssim_filter.has_value()) return !a.ssim_filter.has_value();
        if (a.ssim_filter && *a.ssim_filter != *b.ssim_filter) return *a.ssim_filter < *b.ssim_filter;
        return a.label < b.label;
    });

    std::ofstream csv(config.paths.reports / "comparison.csv");
    std::ofstream txt(config.paths.reports / "comparison.txt");
    if (!csv || !txt) throw Error(ErrorKind::io, "cannot write comparison tables");
    csv << "run,stage,ssim_filter,count,mean_ssim,median_ssim,mean_rmse,median_rmse\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-24s %5s %7s %6s %10s %10s %10s %10s\n", "run", "stage", "filter", "count",
                  "mean_ssim", "med_ssim", "mean_rmse", "med_rmse");
    txt << buf;
    for (const auto& r : rows) {
        const std::string filter = r.ssim_filter ? format_threshold(*r.ssim_filter) : "";
        std::snprintf(buf, sizeof(buf), "%s,%d,%s,%zu,%.17g,%.17g,%.17g,%.17g\n", r.label.c_str(), r.stage,
                      filter.c_str(), r.stats.count, r.stats.mean_ssim, r.stats.median_ssim, r.stats.mean_rmse,
                      r.stats.median_rmse);
        csv << buf;
        std::snprintf(buf, sizeof(buf), "%-24s %5d %7s %6zu %10.4f %10.4f %10.4f %10.4f\n", r.label.c_str(), r.stage,
                      filter.empty() ? "-" : filter.c_str(), r.stats.count, r.stats.mean_ssim, r.stats.median_ssim,
                      r.stats.mean_rmse, r.stats.median_rmse);
        txt << buf;
    }
    return rows;
}

}  // namespace demgan
