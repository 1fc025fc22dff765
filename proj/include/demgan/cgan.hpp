#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "demgan/curation.hpp"
#include "demgan/metrics.hpp"
#include "demgan/nn/layers.hpp"
#include "demgan/raster.hpp"

namespace demgan {

struct GeneratorConfig {
    int depth = 4;           // encoder levels; tile size must be divisible by 2^depth
    int base_channels = 16;  // channels at level i: base * 2^min(i, 3)
    double dropout = 0.5;    // noise z, realized as dropout in the innermost decoder levels
    int dropout_levels = 2;
    bool skip_connections = true;

    void validate() const;
    bool operator==(const GeneratorConfig&) const = default;
};

struct DiscriminatorConfig {
    int layers = 2;  // stride-2 convolutions before the two stride-1 ones
    int base_channels = 16;

    void validate() const;
    /// Side length of the logits grid for a square input of `tile_size`.
    int patch_grid(int tile_size) const;
    bool operator==(const DiscriminatorConfig&) const = default;
};

enum class Stage { stage1 = 1, stage2 = 2 };

struct TrainingStageConfig {
    double learning_rate = 2e-4;
    std::int64_t steps = 5000;
    int batch_size = 4;
    double lambda_l1 = 100.0;
    std::uint64_t seed = 0;
    Stage stage = Stage::stage1;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::int64_t checkpoint_interval = 0;  // 0 writes only the final checkpoint

    void validate() const;
};

/// Encoder-decoder with skip connections: strided 4x4 convolutions down,
/// fractionally strided 4x4 convolutions up, tanh output in [-1, 1].
class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& config, std::uint64_t seed);

    /// rgb: [N,3,H,W] -> [N,1,H,W]. Dropout is active only when rng is given.
    nn::Tensor forward(const nn::Tensor& rgb, Rng* rng);
    /// Gradient of the input for the last forward; accumulates parameter gradients.
    nn::Tensor backward(const nn::Tensor& grad_out);
    std::vector<nn::Parameter*> parameters();
    std::size_t parameter_count();
    const GeneratorConfig& config() const noexcept { return config_; }

private:
    struct Down {
        nn::LeakyRelu act{0.2};
        nn::Conv2d conv;
        std::optional<nn::InstanceNorm> norm;
    };
    struct Up {
        nn::LeakyRelu act{0.0};
        nn::ConvTranspose2d conv;
        std::optional<nn::InstanceNorm> norm;
        nn::Dropout dropout{0.0};
    };

    GeneratorConfig config_;
    std::vector<int> channels_;
    std::vector<Down> down_;
    std::vector<Up> up_;
    nn::Tanh tanh_;
};

/// Patch classifier over the channel-wise pair (RGB, DEM): a grid of logits.
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

    nn::Tensor forward(const nn::Tensor& rgb, const nn::Tensor& dem);
    /// Returns the gradient of the concatenated [RGB, DEM] input.
    nn::Tensor backward(const nn::Tensor& grad_logits);
    std::vector<nn::Parameter*> parameters();
    std::size_t parameter_count();
    const DiscriminatorConfig& config() const noexcept { return config_; }

private:
    struct Block {
        nn::Conv2d conv;
        std::optional<nn::InstanceNorm> norm;
        std::optional<nn::LeakyRelu> act;
    };

    DiscriminatorConfig config_;
    std::vector<Block> blocks_;
};

struct BceTerm {
    double value = 0.0;
    nn::Tensor grad;  // d value / d logits
};

/// Mean binary cross-entropy of sigmoid(logits) against a constant label, from logits.
BceTerm bce_with_logits(const nn::Tensor& logits, double label);

struct GeneratorLoss {
    double total = 0.0;
    double gan_term = 0.0;
    double l1_term = 0.0;
    nn::Tensor grad_logits;
    nn::Tensor grad_pred;  // lambda-weighted L1 part only
};

GeneratorLoss generator_loss(const nn::Tensor& d_fake_logits, const nn::Tensor& dem_pred, const nn::Tensor& dem_target,
                             double lambda_l1);

struct DiscriminatorLoss {
    double total = 0.0;
    double real_term = 0.0;
    double fake_term = 0.0;
    nn::Tensor grad_real;
    nn::Tensor grad_fake;
};

DiscriminatorLoss discriminator_loss(const nn::Tensor& d_real_logits, const nn::Tensor& d_fake_logits);

struct CGanModel {
    GeneratorConfig generator_config;
    DiscriminatorConfig discriminator_config;
    int tile_size = 64;
    Generator generator;
    Discriminator discriminator;

    static CGanModel fresh(const GeneratorConfig& g, const DiscriminatorConfig& d, int tile_size, std::uint64_t seed);
    std::uint64_t config_hash() const;
};

/// Tile <-> tensor conversion (band-planar layout matches CHW). Masked pixels become 0.
nn::Tensor tile_to_tensor(const RasterTile& tile);
RasterTile tensor_to_tile(const nn::Tensor& tensor, int sample, const GeoRegion& georef, ValueDomain domain);

/// Deterministic when stochastic is false; rng must be non-null otherwise.
RasterTile generator_forward(Generator& generator, const RasterTile& rgb, bool stochastic, Rng* rng = nullptr);
nn::Tensor discriminator_forward(Discriminator& discriminator, const RasterTile& rgb, const RasterTile& dem);

struct StepLosses {
    double gen_total = 0.0;
    double gan_term = 0.0;
    double l1_term = 0.0;
    double disc_total = 0.0;
    double disc_real = 0.0;
    double disc_fake = 0.0;
};

/// Zeroes and fills discriminator gradients (real and fake BCE) on the given batch.
DiscriminatorLoss discriminator_gradients(CGanModel& model, const nn::Tensor& rgb, const nn::Tensor& dem,
                                          const nn::Tensor& fake);
/// Zeroes and fills generator gradients (adversarial plus weighted L1), back-propagating through
/// the discriminator (whose own gradients are left dirty).
GeneratorLoss generator_gradients(CGanModel& model, const nn::Tensor& rgb, const nn::Tensor& dem, double lambda_l1,
                                  Rng* dropout_rng);

struct ModelCheckpoint {
    CGanModel model;
    std::int64_t step = 0;
    Stage stage = Stage::stage1;
    double learning_rate = 2e-4;
    std::int64_t generator_adam_steps = 0;
    std::int64_t discriminator_adam_steps = 0;
    std::string test_split_digest;  // digest of the test pair ids the model was trained against

    static ModelCheckpoint fresh(const GeneratorConfig& g, const DiscriminatorConfig& d, int tile_size,
                                 std::uint64_t seed);
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Binary checkpoint: magic, format version, JSON header (configs, counters,
/// config hash), then raw parameter values and optimizer moments. Atomic replace.
void save_checkpoint(const std::filesystem::path& path, ModelCheckpoint& checkpoint);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

struct TrainingLogRow {
    std::int64_t step = 0;
    double gen_total = 0.0;
    double gan_term = 0.0;
    double l1_term = 0.0;
    double disc_total = 0.0;
};

void write_training_log(const std::filesystem::path& path, const std::vector<TrainingLogRow>& rows);

struct TrainOptions {
    std::filesystem::path manifest_dir;  // tile paths in the manifest are relative to this
    std::optional<std::filesystem::path> checkpoint_path;
    std::optional<std::filesystem::path> log_path;
};

struct TrainResult {
    ModelCheckpoint checkpoint;
    std::vector<TrainingLogRow> log;
};

/// Alternating discriminator / generator updates over the train split.
/// `init` carries the starting model (fresh or from an earlier stage); the step
/// counter continues from it and the learning rate comes from `config`.
TrainResult train_stage(const DatasetManifest& manifest, const TrainingStageConfig& config, ModelCheckpoint init,
                        const TrainOptions& options);

/// Maps a signed-unit RGB tile to a signed-unit DEM tile.
using DemPredictor = std::function<RasterTile(const RasterTile& rgb)>;

DemPredictor make_predictor(ModelCheckpoint& checkpoint);

/// SSIM/RMSE per pair of the split; fails listing every unreadable tile.
std::vector<EvalRecord> evaluate_model(const DemPredictor& predictor, const DatasetManifest& manifest,
                                       const std::filesystem::path& manifest_dir, Split split);

/// Writes stage-1 SSIM scores into every train entry.
DatasetManifest score_training_split(const DemPredictor& predictor, const DatasetManifest& manifest,
                                     const std::filesystem::path& manifest_dir);

/// Order-independent digest of a split's pair ids.
std::string split_digest(const DatasetManifest& manifest, Split split);

}  // namespace demgan
