// Command-line front end for the dual-stage canal segmentation pipeline.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "canalseg/checkpoint.hpp"
#include "canalseg/config.hpp"
#include "canalseg/metrics.hpp"
#include "canalseg/morphology.hpp"
#include "canalseg/phantom.hpp"
#include "canalseg/pipeline.hpp"
#include "canalseg/train.hpp"
#include "canalseg/windowing.hpp"

namespace {

using nlohmann::json;

struct GlobalOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int threads = 0;
};

canalseg::RunConfig effective_config(const GlobalOpts& g) {
    canalseg::RunConfig cfg =
        g.config_path.empty() ? canalseg::default_run_config() : canalseg::parse_config(g.config_path);
    if (g.seed) cfg.training.seed = *g.seed;
    return cfg;
}

void apply_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

void echo_config(const std::string& out_dir, const std::string& command,
                 const canalseg::RunConfig& cfg, const json& args) {
    std::filesystem::create_directories(out_dir);
    json j;
    j["command"] = command;
    j["args"] = args;
    j["run_config"] = cfg.dump();
    std::ofstream out(out_dir + "/config.json", std::ios::trunc);
    out << j.dump(2) << '\n';
}

std::vector<canalseg::HuRegime> parse_regimes(const std::string& csv) {
    std::vector<canalseg::HuRegime> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                             : comma - start);
        if (!tok.empty()) out.push_back(canalseg::regime_from_string(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw std::invalid_argument("no regimes given");
    return out;
}

json window_to_json(const canalseg::WindowParams& w) {
    return json{{"wc", w.wc}, {"ww", w.ww}};
}

// ---------------------------------------------------------------------------

int cmd_phantom_gen(const GlobalOpts& g, int n, const std::string& out_dir,
                    const std::string& regimes_csv) {
    const canalseg::RunConfig cfg = effective_config(g);
    const std::uint64_t seed = g.seed.value_or(cfg.training.seed);
    const auto regimes = parse_regimes(regimes_csv);
    canalseg::generate_dataset(n, seed, regimes, out_dir);
    echo_config(out_dir, "phantom-gen", cfg,
                json{{"n", n}, {"seed", seed}, {"regimes", regimes_csv}, {"out", out_dir}});
    std::cout << "wrote " << n << " cases to " << out_dir << "\n";
    return 0;
}

int cmd_window(const std::string& volume_path, const std::string& out_path, int bin_width) {
    const canalseg::Volume v = canalseg::load_volume(volume_path);
    canalseg::WindowParams w;
    const canalseg::NormVolume norm = canalseg::window_volume(v, bin_width, &w);
    if (!out_path.empty()) canalseg::save_volume(norm, out_path);
    std::cout << window_to_json(w).dump() << "\n";
    return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& data_manifest, const std::string& out_dir,
              bool coarse) {
    const canalseg::RunConfig cfg = effective_config(g);
    const auto cases = canalseg::load_cases(canalseg::load_manifest(data_manifest));
    if (cases.empty()) throw std::runtime_error("dataset manifest lists no cases");

    std::filesystem::create_directories(out_dir);
    canalseg::TrainLog log;
    std::string ckpt;
    if (coarse) {
        canalseg::CoarseNet net = canalseg::train_coarse(cases, cfg, &log);
        ckpt = out_dir + "/coarse.ckpt";
        canalseg::save_checkpoint(net, ckpt);
    } else {
        canalseg::FineNet net = canalseg::train_fine(cases, cfg, &log);
        ckpt = out_dir + "/fine.ckpt";
        canalseg::save_checkpoint(net, ckpt);
    }
    {
        json j;
        j["epoch_losses"] = log.epoch_losses;
        std::ofstream out(out_dir + "/losses.json", std::ios::trunc);
        out << j.dump(2) << '\n';
    }
    echo_config(out_dir, coarse ? "train-coarse" : "train-fine", cfg,
                json{{"data", data_manifest}, {"out", out_dir}});
    std::cout << "checkpoint written to " << ckpt << "\n";
    if (!log.epoch_losses.empty())
        std::cout << "final epoch loss " << log.epoch_losses.back() << "\n";
    return 0;
}

int cmd_infer(const GlobalOpts& g, const std::string& volume_path,
              const std::string& windowed_path, const std::string& coarse_ckpt,
              const std::string& fine_ckpt, const std::string& out_dir, bool refine,
              bool save_intermediates) {
    const canalseg::RunConfig cfg = effective_config(g);

    std::optional<canalseg::CoarseNet> coarse;
    std::optional<canalseg::FineNet> fine;
    try {
        coarse.emplace(canalseg::load_coarse_checkpoint(coarse_ckpt));
        fine.emplace(canalseg::load_fine_checkpoint(fine_ckpt));
    } catch (const std::exception& e) {
        throw canalseg::UntrainedNet(std::string("cannot load checkpoints: ") + e.what());
    }

    canalseg::PipelineResult result;
    if (!windowed_path.empty()) {
        const canalseg::NormVolume windowed = canalseg::load_grid<float>(windowed_path);
        result = canalseg::run_pipeline_windowed(windowed, *coarse, *fine, cfg.pipeline, refine);
    } else {
        const canalseg::Volume v = canalseg::load_volume(volume_path);
        result = canalseg::run_pipeline(v, *coarse, *fine, cfg.pipeline, refine);
    }

    std::filesystem::create_directories(out_dir);
    canalseg::save_volume(result.full, out_dir + "/full.volz");
    canalseg::save_volume(result.left, out_dir + "/left.volz");
    canalseg::save_volume(result.right, out_dir + "/right.volz");
    {
        json vois = json::array();
        for (const auto& r : result.vois) vois.push_back(canalseg::voi_record_to_json(r));
        json j;
        j["vois"] = std::move(vois);
        j["window"] = window_to_json(result.window);
        std::ofstream out(out_dir + "/vois.json", std::ios::trunc);
        out << j.dump(2) << '\n';
    }
    if (save_intermediates) {
        for (std::size_t i = 0; i < result.vois.size(); ++i) {
            canalseg::save_volume(result.vois[i].prob,
                                  out_dir + "/voi_" + canalseg::to_string(result.vois[i].side) +
                                      "_prob.volz");
        }
    }
    echo_config(out_dir, "infer", cfg,
                json{{"volume", volume_path},
                     {"windowed", windowed_path},
                     {"coarse", coarse_ckpt},
                     {"fine", fine_ckpt},
                     {"refine", refine}});
    for (const std::string& w : result.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "masks written to " << out_dir << "\n";
    return 0;
}

int cmd_postprocess(const std::string& in_path, const std::string& out_path, int sides) {
    const canalseg::BinaryMask in = canalseg::load_grid<std::uint8_t>(in_path);
    canalseg::save_volume(canalseg::refine_canal(in, sides), out_path);
    return 0;
}

json case_report_json(const std::string& name, const canalseg::CaseReport& r) {
    json j;
    j["case"] = name;
    j["left"] = canalseg::metric_report_to_json(r.left);
    j["right"] = canalseg::metric_report_to_json(r.right);
    j["overall"] = canalseg::metric_report_to_json(r.overall);
    return j;
}

void write_eval_csv(const std::string& path, const canalseg::DatasetAggregate& left,
                    const canalseg::DatasetAggregate& right,
                    const canalseg::DatasetAggregate& overall) {
    std::ofstream out(path, std::ios::trunc);
    out << "Metric,Left Canal,Right Canal,Overall\n";
    auto row = [&](const char* label, double canalseg::MetricReport::* field) {
        out << label << ',' << left.mean.*field << ',' << right.mean.*field << ','
            << overall.mean.*field << '\n';
    };
    row("mIOU", &canalseg::MetricReport::iou);
    row("Precision", &canalseg::MetricReport::precision);
    row("Recall", &canalseg::MetricReport::recall);
    row("Dice Score", &canalseg::MetricReport::dice);
    row("F1 Score", &canalseg::MetricReport::f1);
    row("Specificity", &canalseg::MetricReport::specificity);
}

int cmd_eval(const std::string& data_manifest, const std::string& pred_dir,
             const std::string& json_path, const std::string& csv_path) {
    const canalseg::DatasetManifest manifest = canalseg::load_manifest(data_manifest);
    if (manifest.cases.empty()) throw std::runtime_error("dataset manifest lists no cases");

    json cases = json::array();
    std::vector<canalseg::MetricReport> lefts, rights, overalls;
    for (const auto& entry : manifest.cases) {
        const std::string gt_dir = manifest.root + "/" + entry.dir;
        const std::string pd = pred_dir + "/" + entry.dir;
        const auto gt_l = canalseg::load_grid<std::uint8_t>(gt_dir + "/gt_left.volz");
        const auto gt_r = canalseg::load_grid<std::uint8_t>(gt_dir + "/gt_right.volz");
        const auto pred_l = canalseg::load_grid<std::uint8_t>(pd + "/left.volz");
        const auto pred_r = canalseg::load_grid<std::uint8_t>(pd + "/right.volz");
        const canalseg::CaseReport r = canalseg::evaluate_case(pred_l, pred_r, gt_l, gt_r);
        cases.push_back(case_report_json(entry.dir, r));
        lefts.push_back(r.left);
        rights.push_back(r.right);
        overalls.push_back(r.overall);
    }
    const auto agg_l = canalseg::evaluate_dataset(lefts);
    const auto agg_r = canalseg::evaluate_dataset(rights);
    const auto agg_o = canalseg::evaluate_dataset(overalls);

    json j;
    j["cases"] = std::move(cases);
    j["aggregate"] = {{"left", canalseg::metric_report_to_json(agg_l.mean)},
                      {"right", canalseg::metric_report_to_json(agg_r.mean)},
                      {"overall", canalseg::metric_report_to_json(agg_o.mean)},
                      {"excluded",
                       {{"precision", agg_o.excluded_precision},
                        {"recall", agg_o.excluded_recall},
                        {"f1", agg_o.excluded_f1},
                        {"iou", agg_o.excluded_iou},
                        {"dice", agg_o.excluded_dice},
                        {"specificity", agg_o.excluded_specificity}}}};
    const std::string serialized = j.dump(2);
    if (json_path.empty()) {
        std::cout << serialized << "\n";
    } else {
        std::ofstream out(json_path, std::ios::trunc);
        out << serialized << '\n';
    }
    if (!csv_path.empty()) write_eval_csv(csv_path, agg_l, agg_r, agg_o);
    return 0;
}

// Fine-stage ablation on ground-truth VOIs: multiscale and residual
// connections toggled independently, evaluated on held-out cases.
struct AblationRow {
    canalseg::MetricReport mean;
};

AblationRow run_fine_variant(const std::vector<canalseg::PhantomCase>& train_cases,
                             const std::vector<canalseg::PhantomCase>& test_cases,
                             const canalseg::RunConfig& cfg, bool multiscale, bool residual) {
    return {canalseg::ablate_fine_variant(train_cases, test_cases, cfg, multiscale, residual)};
}

void write_ablation_csv(const std::string& path, const AblationRow& no_ms, const AblationRow& ms,
                        const AblationRow& no_res, const AblationRow& res) {
    std::ofstream out(path, std::ios::trunc);
    out << "Metric,Without Multiscale,With Multiscale,Without Residual Connections,"
           "With Residual Connections\n";
    auto row = [&](const char* label, double canalseg::MetricReport::* field) {
        out << label << ',' << no_ms.mean.*field << ',' << ms.mean.*field << ','
            << no_res.mean.*field << ',' << res.mean.*field << '\n';
    };
    row("mIOU", &canalseg::MetricReport::iou);
    row("Precision", &canalseg::MetricReport::precision);
    row("Recall", &canalseg::MetricReport::recall);
    row("Dice Score", &canalseg::MetricReport::dice);
    row("F1 Score", &canalseg::MetricReport::f1);
}

int cmd_ablate(const GlobalOpts& g, const std::string& train_manifest,
               const std::string& test_manifest, const std::string& out_dir, int seeds) {
    canalseg::RunConfig base_cfg = effective_config(g);
    const auto train_cases = canalseg::load_cases(canalseg::load_manifest(train_manifest));
    const auto test_cases = canalseg::load_cases(canalseg::load_manifest(test_manifest));
    if (train_cases.empty() || test_cases.empty())
        throw std::runtime_error("ablation needs non-empty train and test sets");
    std::filesystem::create_directories(out_dir);

    int multiscale_wins = 0, residual_wins = 0;
    json per_seed = json::array();
    for (int s = 0; s < seeds; ++s) {
        canalseg::RunConfig cfg = base_cfg;
        cfg.training.seed = base_cfg.training.seed + static_cast<std::uint64_t>(s);

        const AblationRow full = run_fine_variant(train_cases, test_cases, cfg, true, true);
        const AblationRow no_ms = run_fine_variant(train_cases, test_cases, cfg, false, true);
        const AblationRow no_res = run_fine_variant(train_cases, test_cases, cfg, true, false);

        char name[48];
        std::snprintf(name, sizeof(name), "ablation_seed%02d.csv", s);
        write_ablation_csv(out_dir + "/" + name, no_ms, full, no_res, full);

        const bool ms_win = full.mean.dice >= no_ms.mean.dice;
        const bool res_win = full.mean.dice >= no_res.mean.dice;
        multiscale_wins += ms_win ? 1 : 0;
        residual_wins += res_win ? 1 : 0;
        per_seed.push_back({{"seed", cfg.training.seed},
                            {"dice_full", full.mean.dice},
                            {"dice_without_multiscale", no_ms.mean.dice},
                            {"dice_without_residual", no_res.mean.dice},
                            {"multiscale_win", ms_win},
                            {"residual_win", res_win}});
        std::cout << "seed " << cfg.training.seed << ": dice full " << full.mean.dice
                  << ", w/o multiscale " << no_ms.mean.dice << ", w/o residual "
                  << no_res.mean.dice << "\n";
    }
    json summary;
    summary["seeds"] = seeds;
    summary["multiscale_wins"] = multiscale_wins;
    summary["residual_wins"] = residual_wins;
    summary["per_seed"] = std::move(per_seed);
    std::ofstream out(out_dir + "/summary.json", std::ios::trunc);
    out << summary.dump(2) << '\n';
    echo_config(out_dir, "ablate", base_cfg,
                json{{"data", train_manifest}, {"test", test_manifest}, {"seeds", seeds}});
    std::cout << "multiscale wins " << multiscale_wins << "/" << seeds << ", residual wins "
              << residual_wins << "/" << seeds << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-stage mandibular canal segmentation on volumetric scans"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON run configuration");
    std::uint64_t seed_opt = 0;
    auto* seed_flag = app.add_option("--seed", seed_opt, "override the configured seed");
    app.add_option("--threads", g.threads, "worker thread count (0 = library default)");

    // phantom-gen
    auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset");
    int gen_n = 1;
    std::string gen_out, gen_regimes = "TypeA";
    gen->add_option("--n", gen_n, "number of cases")->required();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--regimes", gen_regimes, "comma-separated HU regimes to cycle through");

    // window
    auto* win = app.add_subcommand("window", "compute the dynamic window for a scan");
    std::string win_volume, win_out;
    int win_bins = 10;
    win->add_option("--volume", win_volume, "input scan (.volz)")->required();
    win->add_option("-o,--out", win_out, "write the normalized volume here");
    win->add_option("--bin-width", win_bins, "histogram bin width in HU");

    // train-coarse / train-fine
    auto* tc = app.add_subcommand("train-coarse", "train the localization net");
    auto* tf = app.add_subcommand("train-fine", "train the fine segmentation net");
    std::string tc_data, tc_out, tf_data, tf_out;
    tc->add_option("--data", tc_data, "dataset manifest")->required();
    tc->add_option("--out", tc_out, "output directory")->required();
    tf->add_option("--data", tf_data, "dataset manifest")->required();
    tf->add_option("--out", tf_out, "output directory")->required();

    // infer
    auto* inf = app.add_subcommand("infer", "run the full dual-stage pipeline");
    std::string inf_volume, inf_windowed, inf_coarse, inf_fine, inf_out;
    bool inf_no_refine = false, inf_intermediates = false;
    inf->add_option("--volume", inf_volume, "input scan (.volz)");
    inf->add_option("--windowed", inf_windowed, "pre-windowed volume (skips the window stage)");
    inf->add_option("--coarse", inf_coarse, "coarse checkpoint")->required();
    inf->add_option("--fine", inf_fine, "fine checkpoint")->required();
    inf->add_option("--out", inf_out, "output directory")->required();
    inf->add_flag("--no-refine", inf_no_refine, "skip morphological refinement");
    inf->add_flag("--save-intermediates", inf_intermediates, "write per-VOI probability maps");

    // postprocess
    auto* post = app.add_subcommand("postprocess", "morphologically refine a mask");
    std::string post_in, post_out;
    int post_sides = 1;
    post->add_option("--in", post_in, "input mask (.volz)")->required();
    post->add_option("--out", post_out, "output mask (.volz)")->required();
    post->add_option("--sides", post_sides, "components to keep (1 per-side, 2 merged)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate predictions against ground truth");
    std::string ev_data, ev_pred, ev_json, ev_csv;
    ev->add_option("--data", ev_data, "dataset manifest with ground truth")->required();
    ev->add_option("--pred-dir", ev_pred, "directory of per-case left/right masks")->required();
    ev->add_option("--json", ev_json, "write the report here (default: stdout)");
    ev->add_option("--csv", ev_csv, "also write a per-canal metric table");

    // ablate
    auto* ab = app.add_subcommand("ablate", "fine-stage multiscale/residual on-off grid");
    std::string ab_data, ab_test, ab_out;
    int ab_seeds = 1;
    ab->add_option("--data", ab_data, "training manifest")->required();
    ab->add_option("--test", ab_test, "held-out manifest")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--seeds", ab_seeds, "number of seeds to repeat over");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }
    if (*seed_flag) g.seed = seed_opt;
    apply_threads(g.threads);

    try {
        if (gen->parsed()) return cmd_phantom_gen(g, gen_n, gen_out, gen_regimes);
        if (win->parsed()) return cmd_window(win_volume, win_out, win_bins);
        if (tc->parsed()) return cmd_train(g, tc_data, tc_out, /*coarse=*/true);
        if (tf->parsed()) return cmd_train(g, tf_data, tf_out, /*coarse=*/false);
        if (inf->parsed()) {
            if (inf_volume.empty() && inf_windowed.empty()) {
                std::cerr << "infer needs --volume or --windowed\n";
                return 1;
            }
            return cmd_infer(g, inf_volume, inf_windowed, inf_coarse, inf_fine, inf_out,
                             !inf_no_refine, inf_intermediates);
        }
        if (post->parsed()) return cmd_postprocess(post_in, post_out, post_sides);
        if (ev->parsed()) return cmd_eval(ev_data, ev_pred, ev_json, ev_csv);
        if (ab->parsed()) return cmd_ablate(g, ab_data, ab_test, ab_out, ab_seeds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
