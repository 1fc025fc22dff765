// demgan: command-line driver for the RGB-to-DEM pipeline.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demgan/error.hpp"
#include "demgan/pipeline.hpp"

namespace fs = std::filesystem;
using namespace demgan;

namespace {

void print_stats(const std::string& label, const AggregateStats& s) {
    std::printf("%s: n=%zu mean_ssim=%.4f median_ssim=%.4f mean_rmse=%.4f median_rmse=%.4f\n", label.c_str(), s.count,
                s.mean_ssim, s.median_ssim, s.mean_rmse, s.median_rmse);
}

Stage parse_stage(int stage) {
    if (stage == 1) return Stage::stage1;
    if (stage == 2) return Stage::stage2;
    throw Error(ErrorKind::argument, "--stage must be 1 or 2");
}

EvalOutcome eval_stage(const PipelineConfig& config, Stage stage, std::optional<double> filter) {
    if (stage == Stage::stage2 && !filter) filter = config.ssim_filter_threshold;
    if (stage == Stage::stage1) filter.reset();
    const std::string label = run_label(stage, filter);
    EvalOutcome out = cmd_eval(config, checkpoint_path(config, stage, filter), label, filter);
    print_stats(label, out.stats);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-to-real RGB to DEM translation pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "pipeline config (JSON)")->required();
    app.add_option("--set", overrides, "override a config value, e.g. --set stage1.steps=200");

    auto* synth = app.add_subcommand("synth", "write a synthetic scene catalog and cloud grid");
    auto* sites = app.add_subcommand("sites", "mine zero-cloud sites and cluster them");
    auto* build = app.add_subcommand("build", "composite scenes and write the paired tile manifest");
    auto* curate = app.add_subcommand("curate", "flag low-diversity tiles and split the dataset");

    auto* train = app.add_subcommand("train", "train stage 1, or refine as stage 2");
    int train_stage_arg = 1;
    std::optional<double> train_filter;
    train->add_option("--stage", train_stage_arg, "1 or 2")->check(CLI::IsMember({1, 2}));
    train->add_option("--ssim-filter", train_filter, "stage-2 SSIM threshold");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    int eval_stage_arg = 1;
    std::optional<double> eval_filter;
    std::string eval_checkpoint;
    std::string eval_label;
    eval->add_option("--stage", eval_stage_arg, "1 or 2")->check(CLI::IsMember({1, 2}));
    eval->add_option("--ssim-filter", eval_filter, "stage-2 SSIM threshold");
    eval->add_option("--checkpoint", eval_checkpoint, "explicit checkpoint path (needs --label)");
    eval->add_option("--label", eval_label, "report label for --checkpoint");

    auto* report = app.add_subcommand("report", "tabulate evaluated runs");

    auto* run = app.add_subcommand("run", "build, curate, train and evaluate both stages, then report");
    bool run_synth = false;
    run->add_flag("--synth", run_synth, "generate the synthetic catalog first");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const PipelineConfig config = load_pipeline_config(config_path, overrides);
        if (synth->parsed()) {
            std::cout << "catalog: " << cmd_synth(config).string() << '\n';
        } else if (sites->parsed()) {
            const SitesResult r = cmd_sites(config);
            std::printf("%zu candidates, %zu clusters, %zu selected\n", r.candidates.size(), r.model.centroids.size(),
                        r.selected.size());
        } else if (build->parsed()) {
            std::printf("%zu pairs\n", cmd_build(config).entries.size());
        } else if (curate->parsed()) {
            const DatasetManifest m = cmd_curate(config);
            std::printf("train %zu / val %zu / test %zu, %zu excluded\n", m.count(Split::train), m.count(Split::val),
                        m.count(Split::test),
                        m.entries.size() - m.count(Split::train) - m.count(Split::val) - m.count(Split::test));
        } else if (train->parsed()) {
            const TrainOutcome t = cmd_train(config, parse_stage(train_stage_arg), train_filter);
            std::printf("trained on %zu pairs (%zu removed); checkpoint %s\n", t.train_pairs, t.removed_pairs,
                        t.checkpoint.c_str());
        } else if (eval->parsed()) {
            if (!eval_checkpoint.empty()) {
                if (eval_label.empty()) throw Error(ErrorKind::argument, "--checkpoint needs --label");
                print_stats(eval_label, cmd_eval(config, eval_checkpoint, eval_label, eval_filter).stats);
            } else {
                eval_stage(config, parse_stage(eval_stage_arg), eval_filter);
            }
        } else if (report->parsed()) {
            cmd_report(config);
            std::ifstream table(config.paths.reports / "comparison.txt");
            std::cout << table.rdbuf();
        } else if (run->parsed()) {
            if (run_synth) cmd_synth(config);
            cmd_build(config);
            cmd_curate(config);
            cmd_train(config, Stage::stage1);
            eval_stage(config, Stage::stage1, std::nullopt);
            cmd_train(config, Stage::stage2, config.ssim_filter_threshold);
            eval_stage(config, Stage::stage2, config.ssim_filter_threshold);
            cmd_report(config);
        }
    } catch (const Error& e) {
        std::cerr << "demgan: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "demgan: I/O error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "demgan: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
