#pragma once

#include <cstdint>
#include <vector>

#include "dam/checkpoint.hpp"
#include "dam/data.hpp"
#include "dam/nn.hpp"

namespace dam {

struct TrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    double poison_rate = 0.1;  // used by backdoored runs only

    void validate() const;
};

// SGD with momentum on the shuffled mixture of the given train splits,
// starting from a fresh init. Adds a warning to the metadata when the final
// train accuracy stays within 5 points of chance.
Checkpoint pretrain(const ArchSpec& arch, const std::vector<Dataset>& train_sets,
                    const TrainConfig& cfg);

Checkpoint finetune(const Checkpoint& pre, const Dataset& train, const TrainConfig& cfg);

// Poisons floor(poison_rate * N) rows of the train split, then fine-tunes.
// Records the trigger in the checkpoint metadata.
Checkpoint finetune_backdoored(const Checkpoint& pre, const Dataset& train,
                               const TriggerSpec& trig, std::size_t side,
                               const TrainConfig& cfg);

}  // namespace dam
