#include "demgan/cgan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "demgan/error.hpp"
#include "demgan/geotiff.hpp"
#include "demgan/rng.hpp"

namespace demgan {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

constexpr double kInitStddev = 0.02;
constexpr char kCheckpointMagic[8] = {'D', 'E', 'M', 'G', 'A', 'N', 'C', 'K'};

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
    if (a.c != b.c || a.h != b.h || a.w != b.w) {
        throw Error(ErrorKind::alignment, "cannot stack " + a.shape_string() + " and " + b.shape_string());
    }
    Tensor out(a.n + b.n, a.c, a.h, a.w);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

Tensor batch_slice(const Tensor& t, int first, int count) {
    Tensor out(count, t.c, t.h, t.w);
    const auto begin = t.data.begin() + static_cast<std::ptrdiff_t>(first * t.sample_size());
    std::copy(begin, begin + static_cast<std::ptrdiff_t>(out.size()), out.data.begin());
    return out;
}

int level_channels(int base, int level) { return base * (1 << std::min(level, 3)); }

json generator_config_json(const GeneratorConfig& g) {
    return {{"depth", g.depth},
            {"base_channels", g.base_channels},
            {"dropout", g.dropout},
            {"dropout_levels", g.dropout_levels},
            {"skip_connections", g.skip_connections}};
}

json discriminator_config_json(const DiscriminatorConfig& d) {
    return {{"layers", d.layers}, {"base_channels", d.base_channels}};
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

template <typename T>
void put(std::vector<char>& out, const T& value) {
    const char* p = reinterpret_cast<const char*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

class ByteReader {
public:
    ByteReader(std::vector<char> bytes, fs::path path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <typename T>
    T get() {
        T value;
        need(sizeof(T));
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    void get_doubles(nn::Buffer& out) {
        need(out.size() * sizeof(double));
        std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
        pos_ += out.size() * sizeof(double);
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw Error(ErrorKind::io, "truncated checkpoint '" + path_.string() + "'");
    }

    std::vector<char> bytes_;
    fs::path path_;
    std::size_t pos_ = 0;
};

// Generator gradients assuming the forward pass for `fake` is still cached.
GeneratorLoss generator_backward_from(CGanModel& model, const Tensor& rgb, const Tensor& fake, const Tensor& dem,
                                      double lambda_l1) {
    for (auto* p : model.generator.parameters()) p->zero_grad();
    const Tensor logits = model.discriminator.forward(rgb, fake);
    GeneratorLoss loss = generator_loss(logits, fake, dem, lambda_l1);
    const Tensor grad_pair = model.discriminator.backward(loss.grad_logits);
    Tensor grad_rgb;
    Tensor grad_fake;
    nn::split_channels(grad_pair, rgb.c, grad_rgb, grad_fake);
    for (std::size_t i = 0; i < grad_fake.size(); ++i) grad_fake.data[i] += loss.grad_pred.data[i];
    model.generator.backward(grad_fake);
    return loss;
}

struct Sample {
    Tensor rgb;
    Tensor dem;
};

Sample load_sample(const fs::path& dir, const ManifestEntry& entry, int tile_size) {
    RasterTile rgb = read_geotiff(dir / entry.rgb_path);
    RasterTile dem = read_geotiff(dir / entry.dem_path);
    if (rgb.domain() != ValueDomain::signed_unit || dem.domain() != ValueDomain::signed_unit) {
        throw Error(ErrorKind::precondition, "pair '" + entry.pair_id + "' is not normalized to signed_unit");
    }
    if (rgb.bands() != 3 || dem.bands() != 1 || !rgb.same_grid(dem)) {
        throw Error(ErrorKind::precondition, "pair '" + entry.pair_id + "' has unexpected band layout");
    }
    if (rgb.width() != tile_size || rgb.height() != tile_size) {
        throw Error(ErrorKind::precondition, "pair '" + entry.pair_id + "' is not " + std::to_string(tile_size) +
                                                 " pixels square");
    }
    return {tile_to_tensor(rgb), tile_to_tensor(dem)};
}

}  // namespace

// ---- configs -------------------------------------------------------------------

void GeneratorConfig::validate() const {
    if (depth < 2 || depth > 8) throw Error(ErrorKind::config, "generator depth must be in [2, 8]");
    if (base_channels < 1) throw Error(ErrorKind::config, "generator base_channels must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::config, "generator dropout must be in [0, 1)");
    if (dropout_levels < 0) throw Error(ErrorKind::config, "generator dropout_levels must be >= 0");
}

void DiscriminatorConfig::validate() const {
    if (layers < 1 || layers > 6) throw Error(ErrorKind::config, "discriminator layers must be in [1, 6]");
    if (base_channels < 1) throw Error(ErrorKind::config, "discriminator base_channels must be >= 1");
}

int DiscriminatorConfig::patch_grid(int tile_size) const {
    int s = tile_size;
    for (int i = 0; i < layers; ++i) s = (s + 2 - 4) / 2 + 1;
    return s - 2;
}

void TrainingStageConfig::validate() const {
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::config, "learning_rate must be positive");
    if (!(lambda_l1 >= 0.0)) throw Error(ErrorKind::config, "lambda_l1 must be non-negative");
    if (steps < 0) throw Error(ErrorKind::config, "steps must be non-negative");
    if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be >= 1");
    if (checkpoint_interval < 0) throw Error(ErrorKind::config, "checkpoint_interval must be non-negative");
}

// ---- generator -------------------------------------------------------------------

Generator::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    const int levels = config.depth;
    for (int i = 0; i < levels; ++i) channels_.push_back(level_channels(config.base_channels, i));
    Rng rng(derive_seed(seed, "generator"));

    down_.resize(static_cast<std::size_t>(levels));
    for (int i = 0; i < levels; ++i) {
        Down& d = down_[i];
        const int in = i == 0 ? 3 : channels_[i - 1];
        d.conv = nn::Conv2d(in, channels_[i], 4, 2, 1, "gen.down" + std::to_string(i));
        d.conv.init_normal(rng, kInitStddev);
        if (i > 0 && i < levels - 1) d.norm.emplace(channels_[i], "gen.down" + std::to_string(i) + ".norm");
    }
    up_.resize(static_cast<std::size_t>(levels));
    for (int i = 0; i < levels; ++i) {
        Up& u = up_[i];
        const int out = i == 0 ? 1 : channels_[i - 1];
        const int in = i == levels - 1 ? channels_[i] : (config.skip_connections ? 2 : 1) * channels_[i];
        u.conv = nn::ConvTranspose2d(in, out, 4, 2, 1, "gen.up" + std::to_string(i));
        u.conv.init_normal(rng, kInitStddev);
        if (i > 0) u.norm.emplace(out, "gen.up" + std::to_string(i) + ".norm");
        const bool noisy = i > 0 && i >= levels - config.dropout_levels;
        u.dropout = nn::Dropout(noisy ? config.dropout : 0.0);
    }
}

Tensor Generator::forward(const Tensor& rgb, Rng* rng) {
    const int levels = config_.depth;
    const int factor = 1 << levels;
    if (rgb.c != 3) throw Error(ErrorKind::alignment, "generator expects 3 input bands, got " + rgb.shape_string());
    if (rgb.h % factor != 0 || rgb.w % factor != 0) {
        throw Error(ErrorKind::argument, "tile size must be divisible by " + std::to_string(factor));
    }
    std::vector<Tensor> enc(static_cast<std::size_t>(levels));
    enc[0] = down_[0].conv.forward(rgb);
    for (int i = 1; i < levels; ++i) {
        Down& d = down_[i];
        Tensor t = d.conv.forward(d.act.forward(enc[i - 1]));
        enc[i] = d.norm ? d.norm->forward(t) : std::move(t);
    }
    Tensor h = enc[levels - 1];
    for (int i = levels - 1; i >= 1; --i) {
        Up& u = up_[i];
        Tensor t = u.conv.forward(u.act.forward(h));
        t = u.norm->forward(t);
        t = u.dropout.forward(t, rng);
        h = config_.skip_connections ? nn::concat_channels(t, enc[i - 1]) : std::move(t);
    }
    return tanh_.forward(up_[0].conv.forward(up_[0].act.forward(h)));
}

Tensor Generator::backward(const Tensor& grad_out) {
    const int levels = config_.depth;
    std::vector<Tensor> skip_grad(static_cast<std::size_t>(levels));
    Tensor g = up_[0].act.backward(up_[0].conv.backward(tanh_.backward(grad_out)));
    for (int i = 1; i < levels; ++i) {
        Up& u = up_[i];
        if (config_.skip_connections) {
            Tensor gu;
            nn::split_channels(g, channels_[i - 1], gu, skip_grad[i - 1]);
            g = std::move(gu);
        }
        g = u.dropout.backward(g);
        g = u.norm->backward(g);
        g = u.act.backward(u.conv.backward(g));
    }
    for (int i = levels - 1; i >= 1; --i) {
        if (!skip_grad[i].data.empty()) {
            for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += skip_grad[i].data[k];
        }
        Down& d = down_[i];
        if (d.norm) g = d.norm->backward(g);
        g = d.act.backward(d.conv.backward(g));
    }
    if (!skip_grad[0].data.empty()) {
        for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += skip_grad[0].data[k];
    }
    return down_[0].conv.backward(g);
}

std::vector<nn::Parameter*> Generator::parameters() {
    std::vector<nn::Parameter*> out;
    for (auto& d : down_) {
        for (auto* p : d.conv.parameters()) out.push_back(p);
        if (d.norm) {
            for (auto* p : d.norm->parameters()) out.push_back(p);
        }
    }
    for (auto& u : up_) {
        for (auto* p : u.conv.parameters()) out.push_back(p);
        if (u.norm) {
            for (auto* p : u.norm->parameters()) out.push_back(p);
        }
    }
    return out;
}

std::size_t Generator::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
}

// ---- discriminator -----------------------------------------------------------------

Discriminator::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(derive_seed(seed, "discriminator"));
    int in = 4;
    for (int i = 0; i <= config.layers; ++i) {
        const int out = level_channels(config.base_channels, i);
        const int stride = i < config.layers ? 2 : 1;
        Block b;
        b.conv = nn::Conv2d(in, out, 4, stride, 1, "disc.block" + std::to_string(i));
        if (i > 0) b.norm.emplace(out, "disc.block" + std::to_string(i) + ".norm");
        b.act.emplace(0.2);
        blocks_.push_back(std::move(b));
        in = out;
    }
    Block head;
    head.conv = nn::Conv2d(in, 1, 4, 1, 1, "disc.head");
    blocks_.push_back(std::move(head));
    for (auto& b : blocks_) b.conv.init_normal(rng, kInitStddev);
}

Tensor Discriminator::forward(const Tensor& rgb, const Tensor& dem) {
    if (rgb.n != dem.n || rgb.h != dem.h || rgb.w != dem.w || rgb.c != 3 || dem.c != 1) {
        throw Error(ErrorKind::alignment, "discriminator pair misaligned: " + rgb.shape_string() + " vs " +
                                              dem.shape_string());
    }
    Tensor x = nn::concat_channels(rgb, dem);
    for (auto& b : blocks_) {
        x = b.conv.forward(x);
        if (b.norm) x = b.norm->forward(x);
        if (b.act) x = b.act->forward(x);
    }
    return x;
}

Tensor Discriminator::backward(const Tensor& grad_logits) {
    Tensor g = grad_logits;
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
        if (it->act) g = it->act->backward(g);
        if (it->norm) g = it->norm->backward(g);
        g = it->conv.backward(g);
    }
    return g;
}

std::vector<nn::Parameter*> Discriminator::parameters() {
    std::vector<nn::Parameter*> out;
    for (auto& b : blocks_) {
        for (auto* p : b.conv.parameters()) out.push_back(p);
        if (b.norm) {
            for (auto* p : b.norm->parameters()) out.push_back(p);
        }
    }
    return out;
}

std::size_t Discriminator::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
}

// ---- losses --------------------------------------------------------------------

BceTerm bce_with_logits(const Tensor& logits, double label) {
    BceTerm term;
    term.grad = Tensor(logits.n, logits.c, logits.h, logits.w);
    const double count = static_cast<double>(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double l = logits.data[i];
        sum += label * softplus(-l) + (1.0 - label) * softplus(l);
        term.grad.data[i] = (sigmoid(l) - label) / count;
    }
    term.value = sum / count;
    return term;
}

GeneratorLoss generator_loss(const Tensor& d_fake_logits, const Tensor& dem_pred, const Tensor& dem_target,
                             double lambda_l1) {
    if (!dem_pred.same_shape(dem_target)) {
        throw Error(ErrorKind::alignment, "prediction " + dem_pred.shape_string() + " vs target " +
                                              dem_target.shape_string());
    }
    GeneratorLoss loss;
    BceTerm gan = bce_with_logits(d_fake_logits, 1.0);
    loss.gan_term = gan.value;
    loss.grad_logits = std::move(gan.grad);
    loss.grad_pred = Tensor(dem_pred.n, dem_pred.c, dem_pred.h, dem_pred.w);
    const double count = static_cast<double>(dem_pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < dem_pred.size(); ++i) {
        const double d = dem_pred.data[i] - dem_target.data[i];
        sum += std::abs(d);
        const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        loss.grad_pred.data[i] = lambda_l1 * sign / count;
    }
    loss.l1_term = sum / count;
    loss.total = loss.gan_term + lambda_l1 * loss.l1_term;
    return loss;
}

DiscriminatorLoss discriminator_loss(const Tensor& d_real_logits, const Tensor& d_fake_logits) {
    DiscriminatorLoss loss;
    BceTerm real = bce_with_logits(d_real_logits, 1.0);
    BceTerm fake = bce_with_logits(d_fake_logits, 0.0);
    loss.real_term = real.value;
    loss.fake_term = fake.value;
    loss.total = real.value + fake.value;
    loss.grad_real = std::move(real.grad);
    loss.grad_fake = std::move(fake.grad);
    return loss;
}

// ---- model ---------------------------------------------------------------------

CGanModel CGanModel::fresh(const GeneratorConfig& g, const DiscriminatorConfig& d, int tile_size, std::uint64_t seed) {
    if (tile_size < 1 || tile_size % (1 << g.depth) != 0) {
        throw Error(ErrorKind::config, "tile size " + std::to_string(tile_size) + " incompatible with generator depth");
    }
    if (d.patch_grid(tile_size) < 1) throw Error(ErrorKind::config, "discriminator too deep for the tile size");
    return {g, d, tile_size, Generator(g, seed), Discriminator(d, seed)};
}

std::uint64_t CGanModel::config_hash() const {
    const json doc = {{"generator", generator_config_json(generator_config)},
                      {"discriminator", discriminator_config_json(discriminator_config)},
                      {"tile_size", tile_size}};
    return fnv1a64(doc.dump());
}

Tensor tile_to_tensor(const RasterTile& tile) {
    Tensor t(1, tile.bands(), tile.height(), tile.width());
    const auto values = tile.values();
    std::copy(values.begin(), values.end(), t.data.begin());
    for (int b = 0; b < tile.bands(); ++b) {
        for (std::size_t i = 0; i < tile.pixel_count(); ++i) {
            if (tile.masked(i)) t.data[b * tile.pixel_count() + i] = 0.0;
        }
    }
    return t;
}

RasterTile tensor_to_tile(const Tensor& tensor, int sample, const GeoRegion& georef, ValueDomain domain) {
    RasterTile tile(tensor.w, tensor.h, tensor.c, domain, georef);
    const auto src = tensor.sample(sample);
    std::copy(src.begin(), src.end(), tile.values().begin());
    return tile;
}

RasterTile generator_forward(Generator& generator, const RasterTile& rgb, bool stochastic, Rng* rng) {
    if (rgb.domain() != ValueDomain::signed_unit) {
        throw Error(ErrorKind::domain, std::string("generator input must be signed_unit, got ") + to_string(rgb.domain()));
    }
    if (stochastic && rng == nullptr) throw Error(ErrorKind::argument, "stochastic generation needs an rng");
    const Tensor out = generator.forward(tile_to_tensor(rgb), stochastic ? rng : nullptr);
    return tensor_to_tile(out, 0, rgb.georef(), ValueDomain::signed_unit);
}

Tensor discriminator_forward(Discriminator& discriminator, const RasterTile& rgb, const RasterTile& dem) {
    if (!rgb.same_grid(dem)) throw Error(ErrorKind::alignment, "RGB and DEM tiles differ in size");
    return discriminator.forward(tile_to_tensor(rgb), tile_to_tensor(dem));
}

DiscriminatorLoss discriminator_gradients(CGanModel& model, const Tensor& rgb, const Tensor& dem, const Tensor& fake) {
    for (auto* p : model.discriminator.parameters()) p->zero_grad();
    const Tensor logits = model.discriminator.forward(concat_batch(rgb, rgb), concat_batch(dem, fake));
    DiscriminatorLoss loss = discriminator_loss(batch_slice(logits, 0, rgb.n), batch_slice(logits, rgb.n, rgb.n));
    model.discriminator.backward(concat_batch(loss.grad_real, loss.grad_fake));
    return loss;
}

GeneratorLoss generator_gradients(CGanModel& model, const Tensor& rgb, const Tensor& dem, double lambda_l1,
                                  Rng* dropout_rng) {
    const Tensor fake = model.generator.forward(rgb, dropout_rng);
    return generator_backward_from(model, rgb, fake, dem, lambda_l1);
}

// ---- checkpoints -------------------------------------------------------------------

ModelCheckpoint ModelCheckpoint::fresh(const GeneratorConfig& g, const DiscriminatorConfig& d, int tile_size,
                                       std::uint64_t seed) {
    ModelCheckpoint ck;
    ck.model = CGanModel::fresh(g, d, tile_size, seed);
    return ck;
}

void save_checkpoint(const fs::path& path, ModelCheckpoint& checkpoint) {
    CGanModel& model = checkpoint.model;
    std::vector<nn::Parameter*> params = model.generator.parameters();
    for (auto* p : model.discriminator.parameters()) params.push_back(p);

    json header = {{"format_version", kCheckpointFormatVersion},
                   {"generator", generator_config_json(model.generator_config)},
                   {"discriminator", discriminator_config_json(model.discriminator_config)},
                   {"tile_size", model.tile_size},
                   {"config_hash", hex64(model.config_hash())},
                   {"step", checkpoint.step},
                   {"stage", static_cast<int>(checkpoint.stage)},
                   {"learning_rate", checkpoint.learning_rate},
                   {"generator_adam_steps", checkpoint.generator_adam_steps},
                   {"discriminator_adam_steps", checkpoint.discriminator_adam_steps},
                   {"test_split_digest", checkpoint.test_split_digest}};
    header["parameters"] = json::array();
    for (auto* p : params) header["parameters"].push_back({{"name", p->name}, {"size", p->size()}});
    const std::string text = header.dump();

    std::vector<char> bytes(kCheckpointMagic, kCheckpointMagic + sizeof(kCheckpointMagic));
    put(bytes, kCheckpointFormatVersion);
    put(bytes, static_cast<std::uint64_t>(text.size()));
    bytes.insert(bytes.end(), text.begin(), text.end());
    for (auto* p : params) {
        for (const auto* block : {&p->value, &p->m, &p->v}) {
            const char* raw = reinterpret_cast<const char*>(block->data());
            bytes.insert(bytes.end(), raw, raw + block->size() * sizeof(double));
        }
    }

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write checkpoint '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::io, "failed writing checkpoint '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

ModelCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open checkpoint '" + path.string() + "'");
    ByteReader reader(std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()), path);
    if (reader.get_string(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
        throw Error(ErrorKind::io, "'" + path.string() + "' is not a checkpoint");
    }
    const auto version = reader.get<std::uint32_t>();
    if (version != kCheckpointFormatVersion) {
        throw Error(ErrorKind::io, "checkpoint format version " + std::to_string(version) + " is not supported");
    }
    const auto header_len = reader.get<std::uint64_t>();
    json header;
    try {
        header = json::parse(reader.get_string(static_cast<std::size_t>(header_len)));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, "corrupt checkpoint header in '" + path.string() + "': " + e.what());
    }

    GeneratorConfig g;
    const json& jg = header.at("generator");
    g.depth = jg.at("depth").get<int>();
    g.base_channels = jg.at("base_channels").get<int>();
    g.dropout = jg.at("dropout").get<double>();
    g.dropout_levels = jg.at("dropout_levels").get<int>();
    g.skip_connections = jg.at("skip_connections").get<bool>();
    DiscriminatorConfig d;
    d.layers = header.at("discriminator").at("layers").get<int>();
    d.base_channels = header.at("discriminator").at("base_channels").get<int>();

    ModelCheckpoint ck;
    ck.model = CGanModel::fresh(g, d, header.at("tile_size").get<int>(), 0);
    if (hex64(ck.model.config_hash()) != header.at("config_hash").get<std::string>()) {
        throw Error(ErrorKind::io, "checkpoint '" + path.string() + "' config hash mismatch");
    }
    ck.step = header.at("step").get<std::int64_t>();
    ck.stage = static_cast<Stage>(header.at("stage").get<int>());
    ck.learning_rate = header.at("learning_rate").get<double>();
    ck.generator_adam_steps = header.at("generator_adam_steps").get<std::int64_t>();
    ck.discriminator_adam_steps = header.at("discriminator_adam_steps").get<std::int64_t>();
    ck.test_split_digest = header.at("test_split_digest").get<std::string>();

    std::vector<nn::Parameter*> params = ck.model.generator.parameters();
    for (auto* p : ck.model.discriminator.parameters()) params.push_back(p);
    const json& listed = header.at("parameters");
    if (listed.size() != params.size()) throw Error(ErrorKind::io, "checkpoint parameter list mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (listed[i].at("name").get<std::string>() != params[i]->name ||
            listed[i].at("size").get<std::size_t>() != params[i]->size()) {
            throw Error(ErrorKind::io, "checkpoint parameter '" + params[i]->name + "' mismatch");
        }
        reader.get_doubles(params[i]->value);
        reader.get_doubles(params[i]->m);
        reader.get_doubles(params[i]->v);
    }
    return ck;
}

void write_training_log(const fs::path& path, const std::vector<TrainingLogRow>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write training log '" + path.string() + "'");
    out << "step,gen_total,gan_term,l1_term,disc_total\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step), r.gen_total,
                      r.gan_term, r.l1_term, r.disc_total);
        out << buf;
    }
}

// ---- training ------------------------------------------------------------------

TrainResult train_stage(const DatasetManifest& manifest, const TrainingStageConfig& config, ModelCheckpoint init,
                        const TrainOptions& options) {
    config.validate();
    const auto entries = manifest.in_split(Split::train);
    if (entries.empty()) throw Error(ErrorKind::empty_dataset, "train split is empty");

    TrainResult result{std::move(init), {}};
    ModelCheckpoint& ck = result.checkpoint;
    CGanModel& model = ck.model;
    const int size = model.tile_size;

    std::vector<Sample> samples;
    samples.reserve(entries.size());
    for (const auto* e : entries) samples.push_back(load_sample(options.manifest_dir, *e, size));

    nn::Adam gen_opt(model.generator.parameters(), config.learning_rate, config.beta1, config.beta2);
    nn::Adam disc_opt(model.discriminator.parameters(), config.learning_rate, config.beta1, config.beta2);
    gen_opt.set_steps(ck.generator_adam_steps);
    disc_opt.set_steps(ck.discriminator_adam_steps);
    ck.stage = config.stage;
    ck.learning_rate = config.learning_rate;
    ck.test_split_digest = split_digest(manifest, Split::test);

    Rng order_rng(derive_seed(config.seed, "batch-order"));
    Rng dropout_rng(derive_seed(config.seed, "dropout"));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_in_place(order, order_rng);
    std::size_t cursor = 0;

    const int batch = config.batch_size;
    Tensor rgb(batch, 3, size, size);
    Tensor dem(batch, 1, size, size);
    result.log.reserve(static_cast<std::size_t>(config.steps));

    auto sync_counters = [&] {
        ck.generator_adam_steps = gen_opt.steps();
        ck.discriminator_adam_steps = disc_opt.steps();
    };

    for (std::int64_t s = 0; s < config.steps; ++s) {
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                shuffle_in_place(order, order_rng);
                cursor = 0;
            }
            const Sample& sample = samples[order[cursor++]];
            std::copy(sample.rgb.data.begin(), sample.rgb.data.end(), rgb.sample(b).begin());
            std::copy(sample.dem.data.begin(), sample.dem.data.end(), dem.sample(b).begin());
        }

        const Tensor fake = model.generator.forward(rgb, &dropout_rng);
        const DiscriminatorLoss dl = discriminator_gradients(model, rgb, dem, fake);
        const GeneratorLoss gl = generator_backward_from(model, rgb, fake, dem, config.lambda_l1);
        if (!std::isfinite(dl.total) || !std::isfinite(gl.total)) {
            if (options.log_path) write_training_log(*options.log_path, result.log);
            throw Error(ErrorKind::divergence, "non-finite loss at step " + std::to_string(ck.step + 1));
        }
        disc_opt.step();
        gen_opt.step();
        ++ck.step;
        result.log.push_back({ck.step, gl.total, gl.gan_term, gl.l1_term, dl.total});

        if (options.checkpoint_path && config.checkpoint_interval > 0 && ck.step % config.checkpoint_interval == 0) {
            sync_counters();
            save_checkpoint(*options.checkpoint_path, ck);
        }
    }
    sync_counters();
    if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, ck);
    if (options.log_path) write_training_log(*options.log_path, result.log);
    return result;
}

// ---- evaluation ------------------------------------------------------------------

DemPredictor make_predictor(ModelCheckpoint& checkpoint) {
    Generator* generator = &checkpoint.model.generator;
    return [generator](const RasterTile& rgb) { return generator_forward(*generator, rgb, false); };
}

std::vector<EvalRecord> evaluate_model(const DemPredictor& predictor, const DatasetManifest& manifest,
                                       const fs::path& manifest_dir, Split split) {
    const auto entries = manifest.in_split(split);
    if (entries.empty()) throw Error(ErrorKind::empty_dataset, std::string(to_string(split)) + " split is empty");
    std::string missing;
    for (const auto* e : entries) {
        for (const auto& rel : {e->rgb_path, e->dem_path}) {
            if (!fs::exists(manifest_dir / rel)) missing += "\n  " + (manifest_dir / rel).string();
        }
    }
    if (!missing.empty()) throw Error(ErrorKind::io, "missing tiles:" + missing);

    std::vector<EvalRecord> records;
    records.reserve(entries.size());
    for (const auto* e : entries) {
        const RasterTile rgb = read_geotiff(manifest_dir / e->rgb_path);
        const RasterTile dem = read_geotiff(manifest_dir / e->dem_path);
        const RasterTile pred = predictor(rgb);
        records.push_back({e->pair_id, ssim(pred, dem), rmse(pred, dem), e->elevation_range, std::nullopt});
    }
    return records;
}

DatasetManifest score_training_split(const DemPredictor& predictor, const DatasetManifest& manifest,
                                     const fs::path& manifest_dir) {
    const auto records = evaluate_model(predictor, manifest, manifest_dir, Split::train);
    DatasetManifest out = manifest;
    for (const auto& r : records) out.find(r.pair_id)->ssim_score = r.ssim;
    return out;
}

std::string split_digest(const DatasetManifest& manifest, Split split) {
    std::vector<std::string> ids;
    for (const auto* e : manifest.in_split(split)) ids.push_back(e->pair_id);
    std::sort(ids.begin(), ids.end());
    std::string joined;
    for (const auto& id : ids) joined += id + '\n';
    return hex64(fnv1a64(joined));
}

}  // namespace demgan
