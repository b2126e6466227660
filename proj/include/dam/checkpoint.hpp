#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dam/data.hpp"
#include "dam/nn.hpp"

namespace dam {

// A trained model plus its provenance. "kind" is "pretrained" or "finetuned".
struct CheckpointMeta {
    std::string kind;
    std::string task_id;
    bool backdoored = false;
    std::optional<TriggerSpec> trigger;
    std::uint64_t seed = 0;
    std::string created;
    std::optional<std::string> warning;
    // Filled by the zoo gate after evaluation.
    std::optional<double> gate_acc;
    std::optional<double> gate_asr;
};

struct Checkpoint {
    ParamVector params;
    CheckpointMeta meta;
};

}  // namespace dam
