#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dam/checkpoint.hpp"
#include "dam/data.hpp"
#include "dam/nn.hpp"
#include "dam/tensor.hpp"

namespace dam {

using json = nlohmann::json;

// Self-describing binary container:
//   magic "DAM1" | version u32 LE (=1) | header_len u64 LE | header JSON | payload
// The header declares {arch, tensors:[{name, shape, dtype:"f64", offset,
// byte_len}], meta:{kind, ...}}; the payload holds little-endian f64 values at
// the declared offsets (relative to payload start, 8-byte aligned).
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Container {
    json meta = json::object();  // must carry "kind"
    json arch = nullptr;
    std::vector<NamedTensor> tensors;
};

enum class ContainerErrorKind {
    bad_magic,
    version_mismatch,
    truncated,
    overlapping_tensors,
    non_finite_payload,
    malformed,
};

class ContainerError : public std::runtime_error {
public:
    ContainerError(ContainerErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ContainerErrorKind kind() const { return kind_; }

private:
    ContainerErrorKind kind_;
};

// Writes to <path>.tmp and renames into place.
void save_container(const std::string& path, const Container& container);
Container load_container(const std::string& path);

// Conversions between domain objects and containers.
Container to_container(const Checkpoint& ckpt);
Checkpoint checkpoint_from_container(const Container& c);

Container dataset_to_container(const Dataset& ds, const TaskSpec& spec);
Dataset dataset_from_container(const Container& c);

json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const json& j);
json trigger_to_json(const TriggerSpec& trig);
TriggerSpec trigger_from_json(const json& j);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dam
