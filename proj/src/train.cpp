#include "dam/train.hpp"

#include <stdexcept>

namespace dam {

namespace {

void sgd(ParamVector& params, const Dataset& data, const TrainConfig& cfg, Rng& rng) {
    const std::size_t n = data.size();
    const std::size_t d_in = params.arch.input_dim;
    Tensor velocity({params.arch.param_count()}, 0.0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_indices(rng, n);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t bs = std::min(cfg.batch_size, n - start);
            Tensor batch({bs, d_in}, 0.0);
            std::vector<int> labels(bs);
            for (std::size_t b = 0; b < bs; ++b) {
                const std::size_t idx = order[start + b];
                std::copy(data.inputs.data.begin() + idx * d_in,
                          data.inputs.data.begin() + (idx + 1) * d_in,
                          batch.data.begin() + b * d_in);
                labels[b] = data.labels[idx];
            }
            const Tensor g = grad_params(params, batch, LossKind::cross_entropy, &labels);
            for (std::size_t i = 0; i < velocity.numel(); ++i) {
                velocity.data[i] = cfg.momentum * velocity.data[i] + g.data[i];
                params.flat.data[i] -= cfg.learning_rate * velocity.data[i];
            }
        }
    }
}

double train_accuracy(const ParamVector& params, const Dataset& data) {
    const std::vector<int> pred = predict(params, data.inputs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("trainer.batch_size must be positive");
    if (learning_rate < 0.0) throw std::invalid_argument("trainer.learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw std::invalid_argument("trainer.momentum must lie in [0,1)");
    }
    if (poison_rate < 0.0 || poison_rate > 1.0) {
        throw std::invalid_argument("trainer.poison_rate must lie in [0,1]");
    }
}

Checkpoint pretrain(const ArchSpec& arch, const std::vector<Dataset>& train_sets,
                    const TrainConfig& cfg) {
    cfg.validate();
    if (train_sets.size() < 2) {
        throw std::invalid_argument("pretrain: needs at least 2 tasks");
    }
    Dataset mixture;
    mixture.task_id = "mixture";
    mixture.split = "train";
    const std::size_t d_in = arch.input_dim;
    std::size_t total = 0;
    for (const auto& ds : train_sets) total += ds.size();
    mixture.inputs = Tensor({total, d_in}, 0.0);
    mixture.labels.reserve(total);
    std::size_t row = 0;
    for (const auto& ds : train_sets) {
        if (ds.inputs.cols() != d_in) {
            throw std::invalid_argument("pretrain: dataset input_dim mismatch");
        }
        std::copy(ds.inputs.data.begin(), ds.inputs.data.end(),
                  mixture.inputs.data.begin() + row * d_in);
        mixture.labels.insert(mixture.labels.end(), ds.labels.begin(), ds.labels.end());
        row += ds.size();
    }

    Rng rng = Rng(cfg.seed).derive(0x70726531ULL);  // init + shuffles
    Checkpoint ckpt;
    ckpt.params = init_params(arch, rng);
    sgd(ckpt.params, mixture, cfg, rng);

    ckpt.meta.kind = "pretrained";
    ckpt.meta.task_id = "mixture";
    ckpt.meta.backdoored = false;
    ckpt.meta.seed = cfg.seed;
    const double acc = train_accuracy(ckpt.params, mixture);
    const double chance = 1.0 / static_cast<double>(arch.num_classes);
    if (acc < chance + 0.05) {
        ckpt.meta.warning = "pretrain barely above chance: train acc " + std::to_string(acc);
    }
    return ckpt;
}

Checkpoint finetune(const Checkpoint& pre, const Dataset& train, const TrainConfig& cfg) {
    cfg.validate();
    if (train.inputs.cols() != pre.params.arch.input_dim) {
        throw std::invalid_argument("finetune: dataset input_dim mismatch");
    }
    Rng rng = Rng(cfg.seed).derive(0x66747565ULL);
    Checkpoint ckpt;
    ckpt.params = pre.params;
    sgd(ckpt.params, train, cfg, rng);
    ckpt.meta.kind = "finetuned";
    ckpt.meta.task_id = train.task_id;
    ckpt.meta.backdoored = false;
    ckpt.meta.seed = cfg.seed;
    return ckpt;
}

Checkpoint finetune_backdoored(const Checkpoint& pre, const Dataset& train,
                               const TriggerSpec& trig, std::size_t side,
                               const TrainConfig& cfg) {
    cfg.validate();
    Rng poison_rng = Rng(cfg.seed).derive(0x706f6973ULL);
    const Dataset poisoned = poison(train, trig, cfg.poison_rate, side, poison_rng);
    Checkpoint ckpt = finetune(pre, poisoned, cfg);
    ckpt.meta.backdoored = true;
    ckpt.meta.trigger = trig;
    return ckpt;
}

}  // namespace dam
