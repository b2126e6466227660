#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dam/damopt.hpp"
#include "dam/eval.hpp"
#include "dam/io.hpp"
#include "dam/merge.hpp"
#include "dam/train.hpp"

namespace dam {

// Thrown for configuration problems; the CLI maps it to exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    ArchSpec arch;
    std::vector<TaskSpec> tasks;
    std::vector<bool> backdoored;        // per task
    std::vector<TriggerSpec> triggers;   // per task; clean tasks carry the eval trigger
    TrainConfig pretrain_cfg;
    TrainConfig finetune_cfg;

    double ta_lambda = 0.3;
    double ties_density = 0.2;
    double ties_lambda = 1.0;
    Granularity adamerging_granularity = Granularity::layer_wise;
    double adamerging_lr = 0.01;
    std::size_t adamerging_steps = 300;
    std::size_t adamerging_batch = 64;
    std::size_t fisher_probe = 128;

    DamConfig dam;
    std::vector<double> sweep_alphas = {0.0, 0.1, 1.0, 10.0};

    double omega = 1.0;
    double succession_threshold = 0.40;
    double transfer_threshold = 0.05;

    json canonical;    // validated config as written
    std::string hash;  // 16 hex digits of the canonical form

    std::string artifact_path(const std::string& stem, const std::string& ext) const;
};

json default_config_json();
ExperimentConfig parse_config(const json& j);
// Applies the DAM_OUTPUT_DIR override when set.
ExperimentConfig load_config_file(const std::string& path);

std::string config_hash_hex(const json& canonical);

struct Zoo {
    Checkpoint pretrained;
    std::vector<Checkpoint> models;  // one per task, gate metrics recorded
    std::vector<Dataset> train_sets;
    std::vector<Dataset> test_sets;
};

// Generates data, pretrains and fine-tunes the per-task models, and records
// gate metrics (test ACC, test ASR under the task's trigger) in the metadata.
Zoo build_zoo(const ExperimentConfig& cfg);

// Aborts with a diagnostic when a backdoored model sits below ACC/ASR 90% or
// a clean model below ACC 95%.
void check_zoo_gate(const Zoo& zoo, const ExperimentConfig& cfg);

std::vector<TaskVector> zoo_task_vectors(const Zoo& zoo);
std::vector<Tensor> test_input_pools(const Zoo& zoo);

// method: average | task_arithmetic | ties | fisher | adamerging
ParamVector run_merge_method(const std::string& method, const ExperimentConfig& cfg,
                             const Zoo& zoo, const std::vector<TaskVector>& taus);

Report evaluate_model(const ParamVector& model, const ExperimentConfig& cfg, const Zoo& zoo,
                      const std::string& experiment_id);
std::pair<double, double> acc_asr_avg(const ParamVector& model, const ExperimentConfig& cfg,
                                      const Zoo& zoo);

// Disk-level pipeline steps used by the CLI; each writes artifacts named with
// the config hash under output_dir and checks its prerequisites.
void cmd_gen_data(const ExperimentConfig& cfg);
void cmd_pretrain(const ExperimentConfig& cfg);
void cmd_finetune(const ExperimentConfig& cfg, const std::optional<std::string>& only_task);
Report cmd_merge(const ExperimentConfig& cfg, const std::string& method);
Report cmd_dam(const ExperimentConfig& cfg, std::optional<double> alpha_override,
               const std::optional<std::vector<double>>& sweep);
Report cmd_eval(const ExperimentConfig& cfg, const std::string& model_path);
json cmd_repro(const ExperimentConfig& cfg);

}  // namespace dam
