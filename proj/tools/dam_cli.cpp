#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dam/experiment.hpp"

namespace {

std::vector<double> parse_alpha_list(const std::string& csv) {
    std::vector<double> alphas;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        alphas.push_back(std::stod(item));
    }
    if (alphas.empty()) throw dam::ConfigError("--alpha-sweep: no alpha values given");
    return alphas;
}

void print_report(const dam::Report& r) {
    std::printf("experiment %s (config %s)\n", r.experiment_id.c_str(), r.config_hash.c_str());
    for (const auto& tm : r.tasks) {
        std::printf("  %-10s %-10s ACC %.4f  ASR %.4f\n", tm.task_id.c_str(), tm.role.c_str(),
                    tm.acc, tm.asr);
    }
    std::printf("  ACC_avg %.4f  ASR_avg %.4f  score %.4f\n", r.acc_avg, r.asr_avg,
                r.scalarized_score);
    for (const auto& s : r.succession) {
        std::printf("  succession %-10s merged ASR %.4f (individual %.4f) -> %s\n",
                    s.task_id.c_str(), s.merged_asr, s.individual_asr,
                    s.flag ? "FLAGGED" : "ok");
    }
    for (const auto& t : r.transfer) {
        std::printf("  transfer   %-10s delta ASR %+.4f -> %s\n", t.task_id.c_str(),
                    t.delta_asr, t.flag ? "FLAGGED" : "ok");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task model merging laboratory with backdoor-aware defenses"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "Experiment config JSON")->required();

    auto* gen = app.add_subcommand("gen-data", "Generate datasets for every task and split");
    auto* pre = app.add_subcommand("pretrain", "Train the shared pre-trained checkpoint");
    auto* fin = app.add_subcommand("finetune", "Fine-tune per-task models per the zoo spec");
    std::string only_task;
    fin->add_option("--task", only_task, "Only fine-tune this task");

    auto* mrg = app.add_subcommand("merge", "Merge the zoo with a baseline method");
    std::string method = "average";
    mrg->add_option("--method", method,
                    "average|task_arithmetic|ties|fisher|adamerging")
        ->required();

    auto* dmc = app.add_subcommand("dam", "Run defense-aware merging");
    double alpha_override = -1.0;
    std::string sweep_csv;
    dmc->add_option("--alpha", alpha_override, "Override the safety weight alpha");
    dmc->add_option("--alpha-sweep", sweep_csv, "Comma-separated alphas to sweep");

    auto* evl = app.add_subcommand("eval", "Evaluate a saved model against the task suite");
    std::string model_path;
    evl->add_option("--model", model_path, "Checkpoint to evaluate")->required();

    auto* rep = app.add_subcommand("repro",
                                   "Run the full pipeline and write the acceptance summary");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const dam::ExperimentConfig cfg = dam::load_config_file(config_path);
        if (gen->parsed()) {
            dam::cmd_gen_data(cfg);
            std::printf("datasets written under %s (config %s)\n", cfg.output_dir.c_str(),
                        cfg.hash.c_str());
        } else if (pre->parsed()) {
            dam::cmd_pretrain(cfg);
            std::printf("pretrained checkpoint written (config %s)\n", cfg.hash.c_str());
        } else if (fin->parsed()) {
            dam::cmd_finetune(cfg, only_task.empty()
                                       ? std::nullopt
                                       : std::optional<std::string>(only_task));
            std::printf("fine-tuned checkpoints written (config %s)\n", cfg.hash.c_str());
        } else if (mrg->parsed()) {
            print_report(dam::cmd_merge(cfg, method));
        } else if (dmc->parsed()) {
            std::optional<double> alpha;
            if (alpha_override >= 0.0) alpha = alpha_override;
            std::optional<std::vector<double>> sweep;
            if (!sweep_csv.empty()) sweep = parse_alpha_list(sweep_csv);
            print_report(dam::cmd_dam(cfg, alpha, sweep));
        } else if (evl->parsed()) {
            print_report(dam::cmd_eval(cfg, model_path));
        } else if (rep->parsed()) {
            const dam::json summary = dam::cmd_repro(cfg);
            std::printf("%s\n", summary.dump(2).c_str());
        }
    } catch (const dam::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
