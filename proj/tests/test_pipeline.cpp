#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "demgan/error.hpp"
#include "demgan/geotiff.hpp"
#include "demgan/pipeline.hpp"
#include "support.hpp"

using namespace demgan;
using support::kind_of;
namespace fs = std::filesystem;

namespace {

nlohmann::json mini_config_doc() {
    return nlohmann::json::parse(R"({
      "seed": 3,
      "paths": {"catalog": "catalog/index.json", "cloud_grid": "catalog/cloud_grid.csv", "sites": "sites",
                "manifest": "dataset/manifest.jsonl", "checkpoints": "checkpoints", "reports": "reports"},
      "tile_size": 32,
      "synthetic": {"regions": 24, "size": 32, "degenerate_fraction": 0.15},
      "generator": {"depth": 2, "base_channels": 4},
      "discriminator": {"layers": 1, "base_channels": 4},
      "stage1": {"steps": 4, "batch_size": 2},
      "stage2": {"steps": 2, "batch_size": 2}
    })");
}

fs::path write_config(const fs::path& dir, const nlohmann::json& doc) {
    fs::create_directories(dir);
    std::ofstream(dir / "config.json") << doc.dump(2);
    return dir / "config.json";
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::set<std::string> test_lines(const DatasetManifest& m) {
    std::set<std::string> out;
    for (const auto* e : m.in_split(Split::test)) out.insert(e->pair_id + "|" + e->rgb_path + "|" + e->dem_path);
    return out;
}

int run_cli(const std::string& args) {
    const int status = std::system((std::string(DEMGAN_CLI) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config parsing, defaults and overrides") {
    support::ScratchDir dir("config");
    const PipelineConfig c = load_pipeline_config(write_config(dir.path, mini_config_doc()));
    CHECK(c.paths.manifest == dir.path / "dataset/manifest.jsonl");
    CHECK(c.tile_size == 32);
    CHECK(c.stage1.learning_rate == 2e-4);
    CHECK(c.stage2.learning_rate == 1e-4);
    CHECK(c.stage1.lambda_l1 == 100.0);
    CHECK(c.ssim_filter_threshold == 0.2);
    CHECK(c.quality.min_unique_values == 20);
    CHECK(c.quality.max_dominant_share == 0.2);
    CHECK(c.mosaic.max_cloud_cover == 20.0);
    CHECK(c.sites.buffer == doctest::Approx(0.135));
    CHECK(c.sites.kmeans.k == 100);
    CHECK(c.sites.kmeans.batch_size == 100);
    CHECK(c.synthetic.seed == derive_seed(3, "synthetic"));

    const PipelineConfig o = load_pipeline_config(dir.path / "config.json",
                                                  {"stage1.steps=9", "ssim_filter_threshold=0.3", "paths.reports=out"});
    CHECK(o.stage1.steps == 9);
    CHECK(o.ssim_filter_threshold == 0.3);
    CHECK(o.paths.reports == dir.path / "out");

    const auto t1 = stage_config(o, Stage::stage1);
    const auto t2 = stage_config(o, Stage::stage2);
    CHECK(t1.learning_rate == 2e-4);
    CHECK(t2.learning_rate == 1e-4);
    CHECK(t1.seed != t2.seed);

    nlohmann::json bad = mini_config_doc();
    bad["stage1"]["stepz"] = 3;
    CHECK(kind_of([&] { load_pipeline_config(write_config(dir.path / "bad", bad)); }) == ErrorKind::config);
    bad = mini_config_doc();
    bad["stage1"]["learning_rate"] = -1;
    CHECK(kind_of([&] { load_pipeline_config(write_config(dir.path / "neg", bad)); }) == ErrorKind::config);
    CHECK(kind_of([&] { load_pipeline_config(dir.path / "config.json", {"no_equals_sign"}); }) == ErrorKind::config);
    CHECK(kind_of([&] { load_pipeline_config(dir.path / "missing.json"); }) == ErrorKind::config);

    nlohmann::json arch = mini_config_doc();
    arch.erase("generator");
    arch["tile_size"] = 64;
    const PipelineConfig small = pipeline_config_from_json(arch, dir.path);
    CHECK(small.generator.depth == 4);
    CHECK(small.generator.base_channels == 16);
    arch["tile_size"] = 256;
    const PipelineConfig large = pipeline_config_from_json(arch, dir.path);
    CHECK(large.generator.depth == 6);
    CHECK(large.generator.base_channels == 32);
    arch["generator"] = {{"depth", 5}};
    CHECK(pipeline_config_from_json(arch, dir.path).generator.depth == 5);
    CHECK(pipeline_config_from_json(arch, dir.path).generator.base_channels == 32);

    const PipelineConfig round = pipeline_config_from_json(pipeline_config_to_json(c), dir.path);
    CHECK(pipeline_config_to_json(round) == pipeline_config_to_json(c));
}

TEST_CASE("labels and derived paths") {
    CHECK(run_label(Stage::stage1, std::nullopt) == "stage1");
    CHECK(run_label(Stage::stage2, 0.2) == "stage2_ssim0.2");
    PipelineConfig c;
    c.paths.manifest = "/data/manifest.jsonl";
    c.paths.checkpoints = "/ck";
    CHECK(stage2_manifest_path(c, 0.1) == fs::path("/data/manifest_ssim0.1.jsonl"));
    CHECK(checkpoint_path(c, Stage::stage2, 0.3) == fs::path("/ck/stage2_ssim0.3.ckpt"));
}

TEST_CASE("corrupting training pairs") {
    DatasetManifest m;
    for (int i = 0; i < 40; ++i) {
        ManifestEntry e;
        e.pair_id = "p" + std::to_string(10 + i);
        e.rgb_path = e.pair_id + "_rgb.tif";
        e.dem_path = e.pair_id + "_dem.tif";
        e.elevation_range = i;
        e.split = i < 30 ? Split::train : (i < 35 ? Split::val : Split::test);
        m.entries.push_back(e);
    }
    std::vector<std::string> ids;
    const DatasetManifest c = corrupt_training_pairs(m, 0.1, 5, &ids);
    CHECK(ids.size() == 3);
    std::size_t swapped = 0;
    std::multiset<std::string> before, after;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        if (m.entries[i].split == Split::train) {
            before.insert(m.entries[i].dem_path);
            after.insert(c.entries[i].dem_path);
        } else {
            CHECK(c.entries[i] == m.entries[i]);
        }
        swapped += c.entries[i].dem_path != m.entries[i].dem_path;
        CHECK(c.entries[i].rgb_path == m.entries[i].rgb_path);
    }
    CHECK(swapped == 3);
    CHECK(before == after);
    CHECK(corrupt_training_pairs(m, 0.1, 5) == c);
    CHECK(corrupt_training_pairs(m, 0.0, 5) == m);
}

TEST_CASE("synthetic cloud grid") {
    const CloudFractionGrid g = synthetic_cloud_grid(1, 10, 20, 0.3);
    CHECK(g.cells.size() == 200);
    std::size_t zero = 0;
    for (const auto& c : g.cells) zero += c.cloud_fraction == 0.0;
    CHECK(zero > 20);
    CHECK(zero < 100);
    CHECK_NOTHROW(g.validate());
}

TEST_CASE("end-to-end mini run") {
    support::ScratchDir dir("pipeline");
    const PipelineConfig c = load_pipeline_config(write_config(dir.path, mini_config_doc()));

    CHECK(kind_of([&] { cmd_train(c, Stage::stage2, 0.2); }) == ErrorKind::precondition);

    cmd_synth(c);
    const SitesResult sites = cmd_sites(c);
    CHECK(!sites.selected.empty());
    CHECK(sites.selected.size() <= static_cast<std::size_t>(c.sites.kmeans.k));
    CHECK(fs::exists(c.paths.sites / "sites.json"));

    const DatasetManifest built = cmd_build(c);
    CHECK(built.entries.size() == 24);
    const std::string manifest_bytes = slurp(c.paths.manifest);
    const std::string tile_bytes = slurp(c.paths.manifest.parent_path() / built.entries[3].dem_path);
    cmd_build(c);
    CHECK(slurp(c.paths.manifest) == manifest_bytes);
    CHECK(slurp(c.paths.manifest.parent_path() / built.entries[3].dem_path) == tile_bytes);

    const DatasetManifest curated = cmd_curate(c);
    std::size_t excluded = 0;
    for (const auto& e : curated.entries) excluded += e.flags && e.flags->excluded;
    CHECK(excluded >= 1);
    CHECK(fs::exists(c.paths.reports / "exclusions.csv"));
    const std::size_t usable = curated.entries.size() - excluded;
    CHECK(curated.count(Split::test) == split_counts(usable, c.split).test);

    // Stage 2 still refuses while stage 1 has not produced scores.
    CHECK(kind_of([&] { cmd_train(c, Stage::stage2, 0.2); }) == ErrorKind::precondition);

    const TrainOutcome t1 = cmd_train(c, Stage::stage1);
    CHECK(fs::exists(t1.checkpoint));
    const DatasetManifest scored = read_manifest(c.paths.manifest);
    for (const auto* e : scored.in_split(Split::train)) CHECK(e->ssim_score.has_value());
    const EvalOutcome e1 = cmd_eval(c, t1.checkpoint, "stage1");
    CHECK(e1.records.size() == scored.count(Split::test));
    for (const char* f : {"records.csv", "aggregate.json", "ssim_histogram.csv", "ssim_histogram.svg",
                          "elevation_clusters.csv"}) {
        CHECK(fs::exists(e1.report_dir / f));
    }

    const double threshold = [&] {
        std::vector<double> s;
        for (const auto* e : scored.in_split(Split::train)) s.push_back(*e->ssim_score);
        return median(s);
    }();
    const TrainOutcome t2 = cmd_train(c, Stage::stage2, threshold);
    const DatasetManifest refined = read_manifest(stage2_manifest_path(c, threshold));
    for (const auto* e : refined.in_split(Split::train)) CHECK(*e->ssim_score >= threshold);
    std::size_t below = 0;
    for (const auto* e : scored.in_split(Split::train)) below += *e->ssim_score < threshold;
    CHECK(t2.removed_pairs == below);
    CHECK(test_lines(refined) == test_lines(scored));
    const ModelCheckpoint ck2 = load_checkpoint(t2.checkpoint);
    CHECK(ck2.step == c.stage1.steps + c.stage2.steps);
    CHECK(ck2.learning_rate == 1e-4);

    const EvalOutcome e2 = cmd_eval(c, t2.checkpoint, run_label(Stage::stage2, threshold), threshold);
    CHECK(e2.records.size() == e1.records.size());
    const auto rows = cmd_report(c);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].label == "stage1");
    CHECK(rows[1].stage == 2);
    CHECK(fs::exists(c.paths.reports / "comparison.csv"));

    // A re-split that changes the test set invalidates existing checkpoints.
    PipelineConfig moved = c;
    moved.paths.manifest = dir.path / "other" / "manifest.jsonl";
    DatasetManifest reshuffled = split_dataset(curated, c.split, 12345);
    for (auto& e : reshuffled.entries) {
        e.rgb_path = "../dataset/" + e.rgb_path;
        e.dem_path = "../dataset/" + e.dem_path;
    }
    write_manifest(moved.paths.manifest, reshuffled);
    if (test_lines(reshuffled) != test_lines(curated)) {
        CHECK(kind_of([&] { cmd_eval(moved, t1.checkpoint, "moved"); }) == ErrorKind::precondition);
    }
}

TEST_CASE("corruption modes and repeated curation") {
    support::ScratchDir dir("corrupt");
    nlohmann::json doc = mini_config_doc();
    doc["corrupt_train_fraction"] = 0.25;
    doc["corrupt_mode"] = "noise";
    PipelineConfig c = load_pipeline_config(write_config(dir.path, doc));
    cmd_synth(c);
    const DatasetManifest built = cmd_build(c);

    const DatasetManifest noisy = cmd_curate(c);
    const std::string noisy_bytes = slurp(c.paths.manifest);
    const std::string noisy_ids = slurp(c.paths.reports / "corrupted.csv");
    std::size_t corrupted = 0;
    for (const auto* e : noisy.in_split(Split::train)) {
        if (e->dem_path != "tiles/" + e->pair_id + "_dem.tif") {
            ++corrupted;
            CHECK(e->dem_path == "tiles/" + e->pair_id + "_dem_noise.tif");
            CHECK(noisy_ids.find(e->pair_id) != std::string::npos);
            const RasterTile t = read_geotiff(c.paths.manifest.parent_path() / e->dem_path);
            CHECK(t.width() == 32);
            for (double v : t.values()) CHECK((v >= -1.0 && v <= 1.0));
        }
    }
    CHECK(corrupted == static_cast<std::size_t>(std::llround(0.25 * noisy.count(Split::train))));
    for (const auto* e : noisy.in_split(Split::test)) CHECK(e->dem_path == "tiles/" + e->pair_id + "_dem.tif");
    cmd_curate(c);
    CHECK(slurp(c.paths.manifest) == noisy_bytes);

    c.corrupt_mode = CorruptionMode::swap;
    const DatasetManifest swapped = cmd_curate(c);
    const std::string swapped_bytes = slurp(c.paths.manifest);
    cmd_curate(c);
    CHECK(slurp(c.paths.manifest) == swapped_bytes);
    std::multiset<std::string> dems;
    for (const auto& e : swapped.entries) {
        CHECK(e.dem_path.find("_noise") == std::string::npos);
        dems.insert(e.dem_path);
    }
    std::multiset<std::string> original;
    for (const auto& e : built.entries) original.insert(e.dem_path);
    CHECK(dems == original);

    doc["corrupt_mode"] = "scramble";
    CHECK(kind_of([&] { load_pipeline_config(write_config(dir.path / "bad", doc)); }) == ErrorKind::config);
}

TEST_CASE("all-cloudy catalog yields an empty manifest") {
    support::ScratchDir dir("cloudy");
    nlohmann::json doc = mini_config_doc();
    doc["synthetic"]["all_cloudy"] = true;
    doc["synthetic"]["regions"] = 4;
    const PipelineConfig c = load_pipeline_config(write_config(dir.path, doc));
    cmd_synth(c);
    const DatasetManifest m = cmd_build(c);
    CHECK(m.entries.empty());
    CHECK(read_manifest(c.paths.manifest).entries.empty());
    CHECK(kind_of([&] { cmd_curate(c); }) == ErrorKind::empty_dataset);
}

TEST_CASE("command line exit codes") {
    support::ScratchDir dir("cli");
    const fs::path cfg = write_config(dir.path, mini_config_doc());
    CHECK(run_cli("") == 2);
    CHECK(run_cli("-c " + (dir.path / "nope.json").string() + " build") == 2);
    CHECK(run_cli("-c " + cfg.string() + " --set stage1.bogus=1 build") == 2);
    CHECK(run_cli("-c " + cfg.string() + " train --stage 2") == 3);
    CHECK(run_cli("-c " + cfg.string() + " synth") == 0);
    CHECK(run_cli("-c " + cfg.string() + " build") == 0);
}

}  // TEST_SUITE
