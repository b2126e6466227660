#include "dam/eval.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace dam {

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_atomically(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp);
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

double accuracy(const ParamVector& model, const Dataset& clean_test) {
    if (clean_test.size() == 0) throw std::invalid_argument("accuracy: empty test set");
    const std::vector<int> pred = predict(model, clean_test.inputs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == clean_test.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double attack_success_rate(const ParamVector& model, const Dataset& clean_test,
                           const TriggerSpec& trig, std::size_t side) {
    const std::size_t d = side * side;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < clean_test.size(); ++i) {
        if (clean_test.labels[i] != trig.target_class) rows.push_back(i);
    }
    if (rows.empty()) {
        throw std::invalid_argument(
            "attack_success_rate: every sample carries the target class");
    }
    Tensor triggered({rows.size(), d}, 0.0);
    for (std::size_t b = 0; b < rows.size(); ++b) {
        Tensor img({d}, std::vector<double>(
                            clean_test.inputs.data.begin() + rows[b] * d,
                            clean_test.inputs.data.begin() + (rows[b] + 1) * d));
        const Tensor trg = apply_trigger(img, trig, side);
        std::copy(trg.data.begin(), trg.data.end(), triggered.data.begin() + b * d);
    }
    const std::vector<int> pred = predict(model, triggered);
    std::size_t hits = 0;
    for (int p : pred) hits += p == trig.target_class;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<SuccessionRow> succession_report(const std::vector<TaskMetrics>& merged,
                                             const std::vector<std::string>& backdoored_ids,
                                             const std::vector<double>& individual_bounds,
                                             double threshold) {
    if (backdoored_ids.size() != individual_bounds.size()) {
        throw std::invalid_argument("succession_report: bounds length mismatch");
    }
    std::vector<SuccessionRow> rows;
    for (std::size_t i = 0; i < backdoored_ids.size(); ++i) {
        for (const auto& tm : merged) {
            if (tm.task_id != backdoored_ids[i]) continue;
            rows.push_back({tm.task_id, tm.asr, individual_bounds[i], tm.asr >= threshold});
        }
    }
    return rows;
}

std::vector<TransferRow> transfer_report(const std::vector<TaskMetrics>& merged,
                                         const std::vector<std::string>& clean_ids,
                                         const std::vector<double>& individual_clean_asr,
                                         double threshold) {
    if (clean_ids.size() != individual_clean_asr.size()) {
        throw std::invalid_argument("transfer_report: metrics length mismatch");
    }
    std::vector<TransferRow> rows;
    for (std::size_t i = 0; i < clean_ids.size(); ++i) {
        for (const auto& tm : merged) {
            if (tm.task_id != clean_ids[i]) continue;
            const double delta = tm.asr - individual_clean_asr[i];
            rows.push_back({tm.task_id, tm.asr, individual_clean_asr[i], delta,
                            delta >= threshold});
        }
    }
    return rows;
}

void finalize_report(Report& report) {
    double acc = 0.0, asr = 0.0, acc_bd = 0.0, asr_bd = 0.0;
    std::size_t n_bd = 0;
    for (const auto& tm : report.tasks) {
        acc += tm.acc;
        asr += tm.asr;
        if (tm.role == "backdoored") {
            acc_bd += tm.acc;
            asr_bd += tm.asr;
            ++n_bd;
        }
    }
    const double n = static_cast<double>(report.tasks.size());
    report.acc_avg = report.tasks.empty() ? 0.0 : acc / n;
    report.asr_avg = report.tasks.empty() ? 0.0 : asr / n;
    report.acc_backdoored_avg = n_bd ? acc_bd / static_cast<double>(n_bd) : 0.0;
    report.asr_backdoored_avg = n_bd ? asr_bd / static_cast<double>(n_bd) : 0.0;
    report.scalarized_score = report.acc_avg - report.omega * report.asr_avg;
}

nlohmann::json report_to_json(const Report& r) {
    nlohmann::json j;
    j["experiment_id"] = r.experiment_id;
    j["config_hash"] = r.config_hash;
    j["tasks"] = nlohmann::json::array();
    for (const auto& tm : r.tasks) {
        j["tasks"].push_back({{"task_id", tm.task_id},
                              {"role", tm.role},
                              {"acc", tm.acc},
                              {"asr", tm.asr},
                              {"n_clean_eval", tm.n_clean_eval},
                              {"n_trigger_eval", tm.n_trigger_eval}});
    }
    j["acc_avg"] = r.acc_avg;
    j["asr_avg"] = r.asr_avg;
    j["acc_backdoored_avg"] = r.acc_backdoored_avg;
    j["asr_backdoored_avg"] = r.asr_backdoored_avg;
    j["succession"] = nlohmann::json::array();
    for (const auto& s : r.succession) {
        j["succession"].push_back({{"task_id", s.task_id},
                                   {"merged_asr", s.merged_asr},
                                   {"individual_asr", s.individual_asr},
                                   {"flag", s.flag}});
    }
    j["transfer"] = nlohmann::json::array();
    for (const auto& t : r.transfer) {
        j["transfer"].push_back({{"task_id", t.task_id},
                                 {"merged_asr", t.merged_asr},
                                 {"individual_asr", t.individual_asr},
                                 {"delta_asr", t.delta_asr},
                                 {"flag", t.flag}});
    }
    j["omega"] = r.omega;
    j["scalarized_score"] = r.scalarized_score;
    j["schema_version"] = 1;
    return j;
}

Report report_from_json(const nlohmann::json& j) {
    Report r;
    r.experiment_id = j.value("experiment_id", std::string{});
    r.config_hash = j.value("config_hash", std::string{});
    for (const auto& tj : j.at("tasks")) {
        TaskMetrics tm;
        tm.task_id = tj.at("task_id").get<std::string>();
        tm.role = tj.at("role").get<std::string>();
        tm.acc = tj.at("acc").get<double>();
        tm.asr = tj.at("asr").get<double>();
        tm.n_clean_eval = tj.value("n_clean_eval", std::size_t{0});
        tm.n_trigger_eval = tj.value("n_trigger_eval", std::size_t{0});
        r.tasks.push_back(tm);
    }
    r.omega = j.value("omega", 1.0);
    for (const auto& sj : j.value("succession", nlohmann::json::array())) {
        r.succession.push_back({sj.at("task_id").get<std::string>(),
                                sj.at("merged_asr").get<double>(),
                                sj.at("individual_asr").get<double>(),
                                sj.at("flag").get<bool>()});
    }
    for (const auto& tj : j.value("transfer", nlohmann::json::array())) {
        r.transfer.push_back({tj.at("task_id").get<std::string>(),
                              tj.at("merged_asr").get<double>(),
                              tj.at("individual_asr").get<double>(),
                              tj.at("delta_asr").get<double>(),
                              tj.at("flag").get<bool>()});
    }
    // Aggregates are recomputed rather than trusted.
    Report recomputed = r;
    finalize_report(recomputed);
    const double tol = 1e-9;
    if (std::abs(recomputed.acc_avg - j.at("acc_avg").get<double>()) > tol ||
        std::abs(recomputed.asr_avg - j.at("asr_avg").get<double>()) > tol) {
        throw std::runtime_error("report: stored aggregates disagree with per-task rows");
    }
    finalize_report(r);
    return r;
}

void emit_report(const Report& report, const std::string& json_path,
                 const std::string& csv_path) {
    write_atomically(json_path, report_to_json(report).dump(2) + "\n");
    std::string csv = "task_id,role,acc,asr\n";
    for (const auto& tm : report.tasks) {
        csv += tm.task_id + "," + tm.role + "," + fixed6(tm.acc) + "," + fixed6(tm.asr) + "\n";
    }
    write_atomically(csv_path, csv);
}

Report load_report(const std::string& json_path) {
    std::ifstream f(json_path);
    if (!f) throw std::runtime_error("load_report: cannot open " + json_path);
    nlohmann::json j;
    f >> j;
    return report_from_json(j);
}

}  // namespace dam
