#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "demgan/cgan.hpp"
#include "demgan/curation.hpp"
#include "demgan/ingest.hpp"
#include "demgan/metrics.hpp"
#include "demgan/raster.hpp"
#include "demgan/sites.hpp"

namespace demgan {

enum class SiteMode { representatives, all_candidates };

/// swap: DEMs rotate among the chosen training pairs.
/// noise: each chosen pair gets a fresh DEM tile of uniform noise in [-1, 1].
enum class CorruptionMode { swap, noise };

struct PipelinePaths {
    std::filesystem::path catalog;     // index.json of the scene catalog
    std::filesystem::path cloud_grid;  // CSV or GeoTIFF cloud-fraction grid
    std::filesystem::path sites;       // output directory for site lists
    std::filesystem::path manifest;    // JSONL; tiles are written next to it
    std::filesystem::path checkpoints;
    std::filesystem::path reports;
};

struct SiteParams {
    double buffer = kDefaultSiteBuffer;
    KMeansOptions kmeans{};
    SiteMode mode = SiteMode::representatives;
};

struct StageParams {
    double learning_rate = 2e-4;
    std::int64_t steps = 5000;
    int batch_size = 4;
    double lambda_l1 = 100.0;
    std::int64_t checkpoint_interval = 0;
};

struct EvalParams {
    int histogram_bins = 20;
    int elevation_clusters = 3;
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    PipelinePaths paths;
    int tile_size = 256;
    StretchParams stretch{};
    SiteParams sites{};
    MosaicOptions mosaic{};
    QualityThresholds quality{};
    SplitFractions split{};
    /// Training pairs whose DEM is swapped with another pair's after splitting.
    double corrupt_train_fraction = 0.0;
    CorruptionMode corrupt_mode = CorruptionMode::swap;
    GeneratorConfig generator{};
    DiscriminatorConfig discriminator{};
    StageParams stage1{};
    StageParams stage2{1e-4, 2000, 4, 100.0, 0};
    double ssim_filter_threshold = 0.2;
    EvalParams eval{};
    SyntheticCatalogOptions synthetic{};

    void validate() const;
};

/// Parses a JSON config. Relative paths resolve against base_dir.
PipelineConfig pipeline_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
/// Each override is "key.path=value"; the value is parsed as JSON when it can be.
void apply_override(nlohmann::json& doc, const std::string& assignment);
PipelineConfig load_pipeline_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
nlohmann::json pipeline_config_to_json(const PipelineConfig& config);

/// Training stage config with the derived seed for that stage.
TrainingStageConfig stage_config(const PipelineConfig& config, Stage stage);

std::string run_label(Stage stage, std::optional<double> ssim_filter);
std::filesystem::path checkpoint_path(const PipelineConfig& config, Stage stage, std::optional<double> ssim_filter);
std::filesystem::path stage2_manifest_path(const PipelineConfig& config, double ssim_filter);

/// Swaps DEMs around a cycle of randomly chosen training pairs.
DatasetManifest corrupt_training_pairs(const DatasetManifest& manifest, double fraction, std::uint64_t seed,
                                       std::vector<std::string>* corrupted_ids = nullptr);

/// Replaces the DEMs of randomly chosen training pairs with uniform noise tiles
/// written under manifest_dir/tiles.
DatasetManifest corrupt_training_pairs_with_noise(const DatasetManifest& manifest, double fraction, std::uint64_t seed,
                                                  const std::filesystem::path& manifest_dir,
                                                  std::vector<std::string>* corrupted_ids = nullptr);

/// Cloud-fraction grid over a lat/lon box with a share of zero-cloud cells.
CloudFractionGrid synthetic_cloud_grid(std::uint64_t seed, int rows, int cols, double zero_share = 0.3);
void write_cloud_grid_csv(const std::filesystem::path& path, const CloudFractionGrid& grid);

struct SitesResult {
    std::vector<SiteCandidate> candidates;
    std::vector<SiteCandidate> selected;
    ClusterModel model;
};

struct TrainOutcome {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    std::size_t train_pairs = 0;
    std::size_t removed_pairs = 0;
};

struct EvalOutcome {
    std::filesystem::path report_dir;
    std::vector<EvalRecord> records;
    AggregateStats stats;
};

struct ReportRow {
    std::string label;
    int stage = 1;
    std::optional<double> ssim_filter;
    AggregateStats stats;
};

/// Writes a synthetic scene catalog and cloud grid at the configured paths.
std::filesystem::path cmd_synth(const PipelineConfig& config);
SitesResult cmd_sites(const PipelineConfig& config);
DatasetManifest cmd_build(const PipelineConfig& config);
DatasetManifest cmd_curate(const PipelineConfig& config);
TrainOutcome cmd_train(const PipelineConfig& config, Stage stage, std::optional<double> ssim_filter = std::nullopt);
/// Evaluates a checkpoint on the test split. The checkpoint must have been
/// trained against the same test split as the current manifest.
EvalOutcome cmd_eval(const PipelineConfig& config, const std::filesystem::path& checkpoint,
                     const std::string& label, std::optional<double> ssim_filter = std::nullopt);
/// One row per evaluated run: stage 1 first, then stage 2 by threshold.
std::vector<ReportRow> cmd_report(const PipelineConfig& config);

}  // namespace demgan
