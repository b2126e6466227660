#include "dam/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dam {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPretrainStream = 0x1001;
constexpr std::uint64_t kFinetuneStream = 0x2001;
constexpr std::uint64_t kPrototypeStream = 0x3001;
constexpr std::uint64_t kDamStream = 0x4001;
constexpr std::uint64_t kAdamergingStream = 0x5001;

std::uint64_t fnv1a64_bytes(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
}

double require_positive(const json& j, const std::string& path, const char* key,
                        double fallback) {
    const double v = j.value(key, fallback);
    if (!(v > 0.0)) config_error(path + "." + key, "must be positive");
    return v;
}

TrainConfig parse_train_section(const json& j, const std::string& path,
                                const TrainConfig& defaults) {
    TrainConfig cfg = defaults;
    cfg.epochs = j.value("epochs", defaults.epochs);
    cfg.batch_size = j.value("batch_size", defaults.batch_size);
    cfg.learning_rate = j.value("learning_rate", defaults.learning_rate);
    cfg.momentum = j.value("momentum", defaults.momentum);
    cfg.seed = j.value("seed", defaults.seed);
    if (cfg.batch_size == 0) config_error(path + ".batch_size", "must be positive");
    if (cfg.learning_rate < 0.0) config_error(path + ".learning_rate", "must be >= 0");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
        config_error(path + ".momentum", "must lie in [0,1)");
    }
    return cfg;
}

json train_section_json(const TrainConfig& cfg) {
    return json{{"epochs", cfg.epochs},
                {"batch_size", cfg.batch_size},
                {"learning_rate", cfg.learning_rate},
                {"momentum", cfg.momentum},
                {"seed", cfg.seed}};
}

void require_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw std::runtime_error("missing prerequisite " + path + "; run `" + producer +
                                 "` first");
    }
}

void save_container_if_absent(const std::string& path, const Container& c) {
    if (!fs::exists(path)) save_container(path, c);
}

std::string dataset_stem(const std::string& task_id, const char* split) {
    return "dataset_" + task_id + "_" + split;
}

}  // namespace

std::string config_hash_hex(const json& canonical) {
    json hashed = canonical;
    hashed.erase("output_dir");  // relocating outputs must not change identity
    const std::uint64_t h = fnv1a64_bytes(hashed.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string ExperimentConfig::artifact_path(const std::string& stem,
                                            const std::string& ext) const {
    return output_dir + "/" + stem + "_" + hash + ext;
}

json default_config_json() {
    json j;
    j["seed"] = 1;
    j["output_dir"] = "out";
    j["arch"] = {{"input_dim", 196}, {"hidden", {64, 64}}, {"num_classes", 8}};
    j["tasks"] = json::array();
    for (const char* id : {"task_a", "task_b", "task_c", "task_d"}) {
        j["tasks"].push_back({{"task_id", id},
                              {"side", 14},
                              {"num_classes", 8},
                              {"prototype_seed", 0},
                              {"noise_sigma", 0.42},
                              {"n_train", 1000},
                              {"n_test", 320}});
    }
    j["zoo"] = json::array();
    j["zoo"].push_back({{"task", "task_a"}, {"backdoored", false}});
    j["zoo"].push_back({{"task", "task_b"}, {"backdoored", true}});
    j["zoo"].push_back({{"task", "task_c"}, {"backdoored", true}});
    j["zoo"].push_back({{"task", "task_d"}, {"backdoored", false}});
    j["trigger"] = {{"patch_size", 3},
                    {"position", "bottom_right"},
                    {"value", 1.0},
                    {"target_class", 0}};
    j["trainer"] = {
        {"pretrain",
         {{"epochs", 1}, {"batch_size", 32}, {"learning_rate", 0.002}, {"momentum", 0.9},
          {"seed", 0}}},
        {"finetune",
         {{"epochs", 40}, {"batch_size", 32}, {"learning_rate", 0.05}, {"momentum", 0.9},
          {"seed", 0}}},
        {"poison_rate", 0.1}};
    j["merge"] = {{"ta_lambda", 0.3},
                  {"ties_density", 0.2},
                  {"ties_lambda", 1.0},
                  {"adamerging",
                   {{"granularity", "layer_wise"}, {"lr", 0.01}, {"steps", 300},
                    {"batch_size", 64}}},
                  {"fisher_probe", 128}};
    j["dam"] = {{"epochs", 300},     {"eta1", 0.01},
                {"eta2", 10.0},      {"eta3", 10.0},
                {"alpha", 10.0},     {"xi", 2.0},
                {"temperature", 0.5},{"batch_size", 64},
                {"lambda_rule", "adamerging_layer_wise"},
                {"lambda_init", 0.3},
                {"warm_start_lambda", false},
                {"persist_delta", false},
                {"hard_deploy_mask", false},
                {"sweep_alphas", {0.0, 0.1, 1.0, 10.0}}};
    j["eval"] = {{"omega", 1.0},
                 {"succession_threshold", 0.40},
                 {"transfer_threshold", 0.05}};
    return j;
}

ExperimentConfig parse_config(const json& in) {
    // Start from defaults and overlay, so the canonical form is fully explicit.
    json j = default_config_json();
    j.merge_patch(in);

    ExperimentConfig cfg;
    cfg.seed = j.value("seed", std::uint64_t{1});
    cfg.output_dir = j.value("output_dir", std::string("out"));

    try {
        cfg.arch = arch_from_json(j.at("arch"));
    } catch (const json::exception& e) {
        config_error("arch", e.what());
    }
    if (cfg.arch.input_dim == 0 || cfg.arch.num_classes == 0) {
        config_error("arch", "input_dim and num_classes must be positive");
    }

    if (!j.contains("tasks") || !j["tasks"].is_array() || j["tasks"].size() < 2) {
        config_error("tasks", "at least 2 tasks required");
    }
    TriggerSpec default_trigger = trigger_from_json(j.value("trigger", json::object()));

    for (std::size_t i = 0; i < j["tasks"].size(); ++i) {
        const json& tj = j["tasks"][i];
        const std::string path = "tasks[" + std::to_string(i) + "]";
        TaskSpec t;
        t.task_id = tj.value("task_id", std::string{});
        if (t.task_id.empty()) config_error(path + ".task_id", "must be set");
        t.side = tj.value("side", std::size_t{14});
        t.num_classes = tj.value("num_classes", cfg.arch.num_classes);
        t.prototype_seed = tj.value("prototype_seed", std::uint64_t{0});
        if (t.prototype_seed == 0) {
            t.prototype_seed = Rng(cfg.seed).derive(kPrototypeStream + i).seed();
        }
        t.noise_sigma = tj.value("noise_sigma", 0.42);
        t.n_train = tj.value("n_train", std::size_t{1000});
        t.n_test = tj.value("n_test", std::size_t{320});
        if (t.side * t.side != cfg.arch.input_dim) {
            config_error(path + ".side", "side^2 must equal arch.input_dim");
        }
        if (t.num_classes != cfg.arch.num_classes) {
            config_error(path + ".num_classes", "must equal arch.num_classes");
        }
        if (t.noise_sigma < 0.0) config_error(path + ".noise_sigma", "must be >= 0");
        if (t.n_train == 0 || t.n_test == 0) {
            config_error(path + ".n_train", "split sizes must be positive");
        }
        cfg.tasks.push_back(t);
    }

    cfg.backdoored.assign(cfg.tasks.size(), false);
    cfg.triggers.assign(cfg.tasks.size(), default_trigger);
    if (!j.contains("zoo") || !j["zoo"].is_array()) config_error("zoo", "must be an array");
    for (std::size_t i = 0; i < j["zoo"].size(); ++i) {
        const json& zj = j["zoo"][i];
        const std::string path = "zoo[" + std::to_string(i) + "]";
        const std::string task = zj.value("task", std::string{});
        auto it = std::find_if(cfg.tasks.begin(), cfg.tasks.end(),
                               [&](const TaskSpec& t) { return t.task_id == task; });
        if (it == cfg.tasks.end()) config_error(path + ".task", "unknown task '" + task + "'");
        const std::size_t idx = static_cast<std::size_t>(it - cfg.tasks.begin());
        cfg.backdoored[idx] = zj.value("backdoored", false);
        if (zj.contains("trigger")) cfg.triggers[idx] = trigger_from_json(zj["trigger"]);
        if (cfg.triggers[idx].patch_size > cfg.tasks[idx].side) {
            config_error(path + ".trigger.patch_size", "patch does not fit in image");
        }
        if (cfg.triggers[idx].target_class < 0 ||
            static_cast<std::size_t>(cfg.triggers[idx].target_class) >=
                cfg.arch.num_classes) {
            config_error(path + ".trigger.target_class", "out of class range");
        }
    }

    const json& tr = j.value("trainer", json::object());
    cfg.pretrain_cfg = parse_train_section(tr.value("pretrain", json::object()),
                                           "trainer.pretrain", TrainConfig{});
    cfg.finetune_cfg = parse_train_section(tr.value("finetune", json::object()),
                                           "trainer.finetune", TrainConfig{});
    const double poison_rate = tr.value("poison_rate", 0.1);
    if (poison_rate < 0.0 || poison_rate > 1.0) {
        config_error("trainer.poison_rate", "must lie in [0,1]");
    }
    cfg.pretrain_cfg.poison_rate = poison_rate;
    cfg.finetune_cfg.poison_rate = poison_rate;
    if (cfg.pretrain_cfg.epochs > 0 && cfg.pretrain_cfg.learning_rate == 0.0) {
        config_error("trainer.pretrain.learning_rate", "must be positive for training");
    }
    if (cfg.pretrain_cfg.seed == 0) {
        cfg.pretrain_cfg.seed = Rng(cfg.seed).derive(kPretrainStream).seed();
    }

    const json& mj = j.value("merge", json::object());
    cfg.ta_lambda = mj.value("ta_lambda", 0.3);
    cfg.ties_density = mj.value("ties_density", 0.2);
    cfg.ties_lambda = mj.value("ties_lambda", 1.0);
    if (!(cfg.ties_density > 0.0 && cfg.ties_density <= 1.0)) {
        config_error("merge.ties_density", "must lie in (0,1]");
    }
    const json& aj = mj.value("adamerging", json::object());
    const std::string gran = aj.value("granularity", std::string("layer_wise"));
    if (gran == "layer_wise") {
        cfg.adamerging_granularity = Granularity::layer_wise;
    } else if (gran == "task_wise") {
        cfg.adamerging_granularity = Granularity::task_wise;
    } else {
        config_error("merge.adamerging.granularity", "expected task_wise or layer_wise");
    }
    cfg.adamerging_lr = require_positive(aj, "merge.adamerging", "lr", 0.01);
    cfg.adamerging_steps = aj.value("steps", std::size_t{300});
    cfg.adamerging_batch = aj.value("batch_size", std::size_t{64});
    cfg.fisher_probe = mj.value("fisher_probe", std::size_t{128});
    if (cfg.fisher_probe == 0) config_error("merge.fisher_probe", "must be positive");

    const json& dj = j.value("dam", json::object());
    cfg.dam.epochs = dj.value("epochs", std::size_t{300});
    cfg.dam.eta1 = require_positive(dj, "dam", "eta1", 0.01);
    cfg.dam.eta2 = require_positive(dj, "dam", "eta2", 10.0);
    cfg.dam.eta3 = require_positive(dj, "dam", "eta3", 10.0);
    cfg.dam.alpha = dj.value("alpha", 10.0);
    if (cfg.dam.alpha < 0.0) config_error("dam.alpha", "must be >= 0");
    cfg.dam.xi = require_positive(dj, "dam", "xi", 2.0);
    cfg.dam.temperature = require_positive(dj, "dam", "temperature", 0.5);
    cfg.dam.batch_size = dj.value("batch_size", std::size_t{64});
    if (cfg.dam.batch_size == 0) config_error("dam.batch_size", "must be positive");
    const std::string rule = dj.value("lambda_rule", std::string("adamerging_layer_wise"));
    if (rule == "task_arithmetic") {
        cfg.dam.lambda_rule = LambdaRule::task_arithmetic;
    } else if (rule == "adamerging_task_wise") {
        cfg.dam.lambda_rule = LambdaRule::adamerging_task_wise;
    } else if (rule == "adamerging_layer_wise") {
        cfg.dam.lambda_rule = LambdaRule::adamerging_layer_wise;
    } else {
        config_error("dam.lambda_rule",
                     "expected task_arithmetic, adamerging_task_wise or adamerging_layer_wise");
    }
    cfg.dam.lambda_init = dj.value("lambda_init", 0.3);
    cfg.dam.warm_start_lambda = dj.value("warm_start_lambda", false);
    cfg.dam.persist_delta = dj.value("persist_delta", false);
    cfg.dam.hard_deploy_mask = dj.value("hard_deploy_mask", false);
    cfg.dam.seed = Rng(cfg.seed).derive(kDamStream).seed();
    if (dj.contains("sweep_alphas")) {
        cfg.sweep_alphas = dj["sweep_alphas"].get<std::vector<double>>();
        for (double a : cfg.sweep_alphas) {
            if (a < 0.0) config_error("dam.sweep_alphas", "alphas must be >= 0");
        }
    }

    const json& ej = j.value("eval", json::object());
    cfg.omega = ej.value("omega", 1.0);
    cfg.succession_threshold = ej.value("succession_threshold", 0.40);
    cfg.transfer_threshold = ej.value("transfer_threshold", 0.05);

    cfg.canonical = j;
    cfg.hash = config_hash_hex(j);
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    ExperimentConfig cfg = parse_config(j);
    if (const char* env = std::getenv("DAM_OUTPUT_DIR"); env != nullptr && *env != '\0') {
        cfg.output_dir = env;
    }
    return cfg;
}

Zoo build_zoo(const ExperimentConfig& cfg) {
    Zoo zoo;
    for (const auto& task : cfg.tasks) {
        zoo.train_sets.push_back(generate(task, cfg.seed, Split::train));
        zoo.test_sets.push_back(generate(task, cfg.seed, Split::test));
    }
    zoo.pretrained = pretrain(cfg.arch, zoo.train_sets, cfg.pretrain_cfg);
    zoo.pretrained.meta.created = "cfg:" + cfg.hash;

    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        TrainConfig ft = cfg.finetune_cfg;
        if (ft.seed == 0) ft.seed = Rng(cfg.seed).derive(kFinetuneStream + i).seed();
        Checkpoint ckpt =
            cfg.backdoored[i]
                ? finetune_backdoored(zoo.pretrained, zoo.train_sets[i], cfg.triggers[i],
                                      cfg.tasks[i].side, ft)
                : finetune(zoo.pretrained, zoo.train_sets[i], ft);
        ckpt.meta.created = "cfg:" + cfg.hash;
        ckpt.meta.gate_acc = accuracy(ckpt.params, zoo.test_sets[i]);
        ckpt.meta.gate_asr = attack_success_rate(ckpt.params, zoo.test_sets[i],
                                                 cfg.triggers[i], cfg.tasks[i].side);
        zoo.models.push_back(std::move(ckpt));
    }
    return zoo;
}

void check_zoo_gate(const Zoo& zoo, const ExperimentConfig& cfg) {
    for (std::size_t i = 0; i < zoo.models.size(); ++i) {
        const auto& m = zoo.models[i].meta;
        const double acc = m.gate_acc.value_or(0.0);
        const double asr = m.gate_asr.value_or(0.0);
        std::ostringstream os;
        if (cfg.backdoored[i] && (acc < 0.90 || asr < 0.90)) {
            os << "zoo gate failed: backdoored model " << m.task_id << " has ACC " << acc
               << " / ASR " << asr << " (needs ACC >= 0.90 and ASR >= 0.90)";
            throw std::runtime_error(os.str());
        }
        if (!cfg.backdoored[i] && acc < 0.95) {
            os << "zoo gate failed: clean model " << m.task_id << " has ACC " << acc
               << " (needs ACC >= 0.95)";
            throw std::runtime_error(os.str());
        }
    }
}

std::vector<TaskVector> zoo_task_vectors(const Zoo& zoo) {
    std::vector<TaskVector> taus;
    taus.reserve(zoo.models.size());
    for (const auto& m : zoo.models) {
        taus.push_back(task_vector(m.params, zoo.pretrained.params, m.meta.task_id));
    }
    return taus;
}

std::vector<Tensor> test_input_pools(const Zoo& zoo) {
    std::vector<Tensor> pools;
    pools.reserve(zoo.test_sets.size());
    for (const auto& ds : zoo.test_sets) pools.push_back(ds.inputs);
    return pools;
}

ParamVector run_merge_method(const std::string& method, const ExperimentConfig& cfg,
                             const Zoo& zoo, const std::vector<TaskVector>& taus) {
    const auto segs = cfg.arch.segments();
    if (method == "average") {
        std::vector<ParamVector> params;
        for (const auto& m : zoo.models) params.push_back(m.params);
        return merge_weight_average(params);
    }
    if (method == "task_arithmetic") {
        const auto coeffs = MergeCoefficients::constant(Granularity::task_wise, taus.size(),
                                                        segs.size(), cfg.ta_lambda);
        return merge_with_coefficients(zoo.pretrained.params, taus, coeffs);
    }
    if (method == "ties") {
        return merge_ties(zoo.pretrained.params, taus, cfg.ties_density, cfg.ties_lambda);
    }
    if (method == "fisher") {
        std::vector<ParamVector> params;
        std::vector<Tensor> probes;
        Rng rng = Rng(cfg.seed).derive(0xf15e);
        for (std::size_t i = 0; i < zoo.models.size(); ++i) {
            params.push_back(zoo.models[i].params);
            probes.push_back(draw_batch(zoo.test_sets[i].inputs, cfg.fisher_probe, rng));
        }
        return merge_fisher(params, probes);
    }
    if (method == "adamerging") {
        Rng rng = Rng(cfg.seed).derive(kAdamergingStream);
        const auto coeffs = optimize_coefficients(
            zoo.pretrained.params, taus, test_input_pools(zoo), cfg.adamerging_granularity,
            cfg.adamerging_lr, cfg.adamerging_steps, cfg.adamerging_batch, rng);
        return merge_with_coefficients(zoo.pretrained.params, taus, coeffs);
    }
    throw ConfigError("merge.method: unknown method '" + method +
                      "' (expected average|task_arithmetic|ties|fisher|adamerging)");
}

Report evaluate_model(const ParamVector& model, const ExperimentConfig& cfg, const Zoo& zoo,
                      const std::string& experiment_id) {
    Report report;
    report.experiment_id = experiment_id;
    report.config_hash = cfg.hash;
    report.omega = cfg.omega;
    std::vector<std::string> bd_ids, clean_ids;
    std::vector<double> bd_bounds, clean_asr;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        TaskMetrics tm;
        tm.task_id = cfg.tasks[i].task_id;
        tm.role = cfg.backdoored[i] ? "backdoored" : "clean";
        tm.acc = accuracy(model, zoo.test_sets[i]);
        tm.asr = attack_success_rate(model, zoo.test_sets[i], cfg.triggers[i],
                                     cfg.tasks[i].side);
        tm.n_clean_eval = zoo.test_sets[i].size();
        std::size_t non_target = 0;
        for (int y : zoo.test_sets[i].labels) {
            non_target += y != cfg.triggers[i].target_class;
        }
        tm.n_trigger_eval = non_target;
        report.tasks.push_back(tm);
        if (cfg.backdoored[i]) {
            bd_ids.push_back(tm.task_id);
            bd_bounds.push_back(zoo.models[i].meta.gate_asr.value_or(0.0));
        } else {
            clean_ids.push_back(tm.task_id);
            clean_asr.push_back(zoo.models[i].meta.gate_asr.value_or(0.0));
        }
    }
    report.succession =
        succession_report(report.tasks, bd_ids, bd_bounds, cfg.succession_threshold);
    report.transfer =
        transfer_report(report.tasks, clean_ids, clean_asr, cfg.transfer_threshold);
    finalize_report(report);
    return report;
}

std::pair<double, double> acc_asr_avg(const ParamVector& model, const ExperimentConfig& cfg,
                                      const Zoo& zoo) {
    double acc = 0.0, asr = 0.0;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        acc += accuracy(model, zoo.test_sets[i]);
        asr += attack_success_rate(model, zoo.test_sets[i], cfg.triggers[i],
                                   cfg.tasks[i].side);
    }
    const double n = static_cast<double>(cfg.tasks.size());
    return {acc / n, asr / n};
}

// ---------------------------------------------------------------------------
// Disk-level pipeline
// ---------------------------------------------------------------------------

namespace {

Zoo load_zoo_from_disk(const ExperimentConfig& cfg) {
    Zoo zoo;
    require_file(cfg.artifact_path("checkpoint_pre", ".dam"), "pretrain --config <config>");
    zoo.pretrained = load_checkpoint(cfg.artifact_path("checkpoint_pre", ".dam"));
    for (const auto& task : cfg.tasks) {
        const std::string tr = cfg.artifact_path(dataset_stem(task.task_id, "train"), ".dam");
        const std::string te = cfg.artifact_path(dataset_stem(task.task_id, "test"), ".dam");
        require_file(tr, "gen-data --config <config>");
        require_file(te, "gen-data --config <config>");
        zoo.train_sets.push_back(dataset_from_container(load_container(tr)));
        zoo.test_sets.push_back(dataset_from_container(load_container(te)));
        const std::string ck = cfg.artifact_path("checkpoint_" + task.task_id, ".dam");
        require_file(ck, "finetune --config <config>");
        zoo.models.push_back(load_checkpoint(ck));
    }
    return zoo;
}

void write_report_files(const ExperimentConfig& cfg, const Report& report,
                        const std::string& stem) {
    fs::create_directories(cfg.output_dir);
    emit_report(report, cfg.artifact_path(stem, ".json"), cfg.artifact_path(stem, ".csv"));
}

json sweep_to_json(const std::vector<SweepPoint>& points) {
    json arr = json::array();
    for (const auto& p : points) {
        arr.push_back({{"alpha", p.alpha},
                       {"acc_avg", p.acc_avg},
                       {"asr_avg", p.asr_avg},
                       {"non_dominated", p.non_dominated}});
    }
    return arr;
}

Container mask_to_container(const MaskState& mask) {
    Container c;
    c.meta["kind"] = "mask";
    c.meta["temperature"] = mask.temperature;
    c.meta["rng_seed"] = mask.rng.seed();
    c.meta["rng_counter"] = mask.rng.counter();
    c.tensors.push_back({"mask.logits", mask.logits});
    return c;
}

Container coefficients_to_container(const MergeCoefficients& coeffs) {
    Container c;
    c.meta["kind"] = "coefficients";
    c.meta["granularity"] =
        coeffs.granularity == Granularity::task_wise ? "task_wise" : "layer_wise";
    c.meta["n_tasks"] = coeffs.n_tasks;
    c.meta["n_layers"] = coeffs.n_layers;
    Tensor values({coeffs.values.size()}, coeffs.values);
    c.tensors.push_back({"lambda", std::move(values)});
    return c;
}

Container perturbations_to_container(const std::vector<Tensor>& deltas,
                                     const ExperimentConfig& cfg) {
    Container c;
    c.meta["kind"] = "perturbations";
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        c.tensors.push_back({"delta." + cfg.tasks[i].task_id, deltas[i]});
    }
    return c;
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    for (const auto& task : cfg.tasks) {
        const Dataset train = generate(task, cfg.seed, Split::train);
        const Dataset test = generate(task, cfg.seed, Split::test);
        save_container_if_absent(cfg.artifact_path(dataset_stem(task.task_id, "train"), ".dam"),
                                 dataset_to_container(train, task));
        save_container_if_absent(cfg.artifact_path(dataset_stem(task.task_id, "test"), ".dam"),
                                 dataset_to_container(test, task));
    }
}

void cmd_pretrain(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    std::vector<Dataset> train_sets;
    for (const auto& task : cfg.tasks) {
        const std::string path = cfg.artifact_path(dataset_stem(task.task_id, "train"), ".dam");
        require_file(path, "gen-data --config <config>");
        train_sets.push_back(dataset_from_container(load_container(path)));
    }
    Checkpoint pre = pretrain(cfg.arch, train_sets, cfg.pretrain_cfg);
    pre.meta.created = "cfg:" + cfg.hash;
    save_container_if_absent(cfg.artifact_path("checkpoint_pre", ".dam"), to_container(pre));
}

void cmd_finetune(const ExperimentConfig& cfg, const std::optional<std::string>& only_task) {
    const std::string pre_path = cfg.artifact_path("checkpoint_pre", ".dam");
    require_file(pre_path, "pretrain --config <config>");
    const Checkpoint pre = load_checkpoint(pre_path);
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        const auto& task = cfg.tasks[i];
        if (only_task && task.task_id != *only_task) continue;
        const std::string tr = cfg.artifact_path(dataset_stem(task.task_id, "train"), ".dam");
        const std::string te = cfg.artifact_path(dataset_stem(task.task_id, "test"), ".dam");
        require_file(tr, "gen-data --config <config>");
        require_file(te, "gen-data --config <config>");
        const Dataset train = dataset_from_container(load_container(tr));
        const Dataset test = dataset_from_container(load_container(te));
        TrainConfig ft = cfg.finetune_cfg;
        if (ft.seed == 0) ft.seed = Rng(cfg.seed).derive(kFinetuneStream + i).seed();
        Checkpoint ckpt = cfg.backdoored[i]
                              ? finetune_backdoored(pre, train, cfg.triggers[i], task.side, ft)
                              : finetune(pre, train, ft);
        ckpt.meta.created = "cfg:" + cfg.hash;
        ckpt.meta.gate_acc = accuracy(ckpt.params, test);
        ckpt.meta.gate_asr =
            attack_success_rate(ckpt.params, test, cfg.triggers[i], task.side);
        save_container_if_absent(cfg.artifact_path("checkpoint_" + task.task_id, ".dam"),
                                 to_container(ckpt));
    }
    if (only_task) {
        const bool known = std::any_of(cfg.tasks.begin(), cfg.tasks.end(),
                                       [&](const TaskSpec& t) { return t.task_id == *only_task; });
        if (!known) throw ConfigError("--task: unknown task '" + *only_task + "'");
    }
}

Report cmd_merge(const ExperimentConfig& cfg, const std::string& method) {
    Zoo zoo = load_zoo_from_disk(cfg);
    check_zoo_gate(zoo, cfg);
    const auto taus = zoo_task_vectors(zoo);
    const ParamVector merged = run_merge_method(method, cfg, zoo, taus);

    Checkpoint out;
    out.params = merged;
    out.meta.kind = "merged";
    out.meta.task_id = method;
    out.meta.seed = cfg.seed;
    out.meta.created = "cfg:" + cfg.hash;
    save_container_if_absent(cfg.artifact_path("merged_" + method, ".dam"), to_container(out));

    const Report report = evaluate_model(merged, cfg, zoo, "merge_" + method);
    write_report_files(cfg, report, "report_merge_" + method);
    return report;
}

Report cmd_dam(const ExperimentConfig& cfg, std::optional<double> alpha_override,
               const std::optional<std::vector<double>>& sweep) {
    Zoo zoo = load_zoo_from_disk(cfg);
    check_zoo_gate(zoo, cfg);
    const auto taus = zoo_task_vectors(zoo);
    const auto pools = test_input_pools(zoo);

    DamConfig dam_cfg = cfg.dam;
    std::string stem = "dam";
    if (alpha_override) {
        dam_cfg.alpha = *alpha_override;
        std::ostringstream os;
        os << "dam_alpha" << *alpha_override;
        stem = os.str();
    }

    const DamResult result = run_dam(zoo.pretrained.params, taus, pools, dam_cfg);

    save_container_if_absent(cfg.artifact_path(stem + "_mask", ".dam"),
                             mask_to_container(result.mask));
    save_container_if_absent(cfg.artifact_path(stem + "_coefficients", ".dam"),
                             coefficients_to_container(result.coefficients));
    save_container_if_absent(cfg.artifact_path(stem + "_perturbations", ".dam"),
                             perturbations_to_container(result.perturbations, cfg));
    Checkpoint merged;
    merged.params = result.merged;
    merged.meta.kind = "merged";
    merged.meta.task_id = stem;
    merged.meta.seed = cfg.seed;
    merged.meta.created = "cfg:" + cfg.hash;
    save_container_if_absent(cfg.artifact_path("merged_" + stem, ".dam"),
                             to_container(merged));

    json trace = json::array();
    for (const auto& row : result.trace) {
        trace.push_back({{"clean_entropy_sum", row.clean_entropy_sum},
                         {"perturbed_entropy_sum", row.perturbed_entropy_sum},
                         {"mask_mean_prob", row.mask_mean_prob}});
    }
    if (!fs::exists(cfg.artifact_path(stem + "_trace", ".json"))) {
        std::ofstream f(cfg.artifact_path(stem + "_trace", ".json"));
        f << trace.dump(2) << "\n";
    }

    const Report report = evaluate_model(result.merged, cfg, zoo, stem);
    write_report_files(cfg, report, "report_" + stem);

    if (sweep) {
        const auto points = sweep_alpha(
            zoo.pretrained.params, taus, pools, dam_cfg, *sweep,
            [&](const ParamVector& model) { return acc_asr_avg(model, cfg, zoo); });
        if (!fs::exists(cfg.artifact_path("dam_sweep", ".json"))) {
            std::ofstream f(cfg.artifact_path("dam_sweep", ".json"));
            f << sweep_to_json(points).dump(2) << "\n";
        }
    }
    return report;
}

Report cmd_eval(const ExperimentConfig& cfg, const std::string& model_path) {
    require_file(model_path, "merge or dam --config <config>");
    Zoo zoo = load_zoo_from_disk(cfg);
    const Checkpoint model = load_checkpoint(model_path);
    const std::string stem =
        "report_eval_" + fs::path(model_path).stem().string();
    const Report report = evaluate_model(model.params, cfg, zoo, stem);
    write_report_files(cfg, report, stem);
    return report;
}

json cmd_repro(const ExperimentConfig& cfg) {
    cmd_gen_data(cfg);
    cmd_pretrain(cfg);
    cmd_finetune(cfg, std::nullopt);

    json summary;
    summary["config_hash"] = cfg.hash;
    summary["seed"] = cfg.seed;

    {
        Zoo zoo = load_zoo_from_disk(cfg);
        json gate = json::array();
        for (std::size_t i = 0; i < zoo.models.size(); ++i) {
            const auto& m = zoo.models[i].meta;
            gate.push_back({{"task_id", m.task_id},
                            {"role", cfg.backdoored[i] ? "backdoored" : "clean"},
                            {"acc", m.gate_acc.value_or(0.0)},
                            {"asr", m.gate_asr.value_or(0.0)}});
        }
        summary["zoo_gate"] = gate;
        check_zoo_gate(zoo, cfg);
        summary["pretrain_warning"] = zoo.pretrained.meta.warning.value_or("");
    }

    json merges = json::object();
    for (const char* method :
         {"average", "task_arithmetic", "ties", "fisher", "adamerging"}) {
        const Report r = cmd_merge(cfg, method);
        bool succ = false, trans = false;
        for (const auto& s : r.succession) succ = succ || s.flag;
        for (const auto& t : r.transfer) trans = trans || t.flag;
        merges[method] = {{"acc_avg", r.acc_avg},
                          {"asr_avg", r.asr_avg},
                          {"succession_flag", succ},
                          {"transfer_flag", trans}};
    }
    summary["merges"] = merges;

    const Report dam_report = cmd_dam(cfg, std::nullopt, cfg.sweep_alphas);
    summary["dam"] = {{"acc_avg", dam_report.acc_avg},
                      {"asr_avg", dam_report.asr_avg},
                      {"alpha", cfg.dam.alpha}};
    {
        std::ifstream f(cfg.artifact_path("dam_sweep", ".json"));
        json sweep;
        f >> sweep;
        summary["alpha_sweep"] = sweep;
    }

    const std::string path = cfg.artifact_path("acceptance_summary", ".json");
    if (!fs::exists(path)) {
        std::ofstream f(path);
        f << summary.dump(2) << "\n";
    }
    return summary;
}

}  // namespace dam
