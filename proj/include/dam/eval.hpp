#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dam/data.hpp"
#include "dam/nn.hpp"

namespace dam {

struct TaskMetrics {
    std::string task_id;
    std::string role;  // "clean" or "backdoored"
    double acc = 0.0;
    double asr = 0.0;
    std::size_t n_clean_eval = 0;
    std::size_t n_trigger_eval = 0;
};

struct SuccessionRow {
    std::string task_id;
    double merged_asr = 0.0;
    double individual_asr = 0.0;  // bound from the zoo gate
    bool flag = false;            // merged_asr >= threshold
};

struct TransferRow {
    std::string task_id;
    double merged_asr = 0.0;
    double individual_asr = 0.0;  // the individual clean model
    double delta_asr = 0.0;
    bool flag = false;  // delta >= threshold
};

struct Report {
    std::string experiment_id;
    std::string config_hash;
    std::vector<TaskMetrics> tasks;
    double acc_avg = 0.0;
    double asr_avg = 0.0;
    double acc_backdoored_avg = 0.0;  // over backdoored-task subset
    double asr_backdoored_avg = 0.0;
    std::vector<SuccessionRow> succession;
    std::vector<TransferRow> transfer;
    double omega = 1.0;
    double scalarized_score = 0.0;  // acc_avg - omega * asr_avg
};

// Fraction of argmax-correct predictions on the clean test split.
double accuracy(const ParamVector& model, const Dataset& clean_test);

// Applies the trigger to every non-target-class sample and reports the
// fraction classified as the target class.
double attack_success_rate(const ParamVector& model, const Dataset& clean_test,
                           const TriggerSpec& trig, std::size_t side);

std::vector<SuccessionRow> succession_report(const std::vector<TaskMetrics>& merged,
                                             const std::vector<std::string>& backdoored_ids,
                                             const std::vector<double>& individual_bounds,
                                             double threshold = 0.40);

std::vector<TransferRow> transfer_report(const std::vector<TaskMetrics>& merged,
                                         const std::vector<std::string>& clean_ids,
                                         const std::vector<double>& individual_clean_asr,
                                         double threshold = 0.05);

// Recomputes the aggregate fields from the per-task rows.
void finalize_report(Report& report);

nlohmann::json report_to_json(const Report& report);
Report report_from_json(const nlohmann::json& j);

// JSON (full report) plus CSV with header task_id,role,acc,asr and 6-decimal
// fixed formatting; byte-deterministic for fixed input.
void emit_report(const Report& report, const std::string& json_path,
                 const std::string& csv_path);
Report load_report(const std::string& json_path);

}  // namespace dam
