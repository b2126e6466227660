#include "dam/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dam {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void put_f64le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64le(out, bits);
}

double get_f64le(const unsigned char* p) {
    const std::uint64_t bits = get_u64le(p);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

}  // namespace

void save_container(const std::string& path, const Container& container) {
    json header;
    header["arch"] = container.arch;
    header["meta"] = container.meta;
    header["tensors"] = json::array();
    std::size_t offset = 0;
    for (const auto& nt : container.tensors) {
        json tj;
        tj["name"] = nt.name;
        tj["shape"] = nt.tensor.shape;
        tj["dtype"] = "f64";
        tj["offset"] = offset;
        tj["byte_len"] = nt.tensor.numel() * 8;
        header["tensors"].push_back(tj);
        offset += nt.tensor.numel() * 8;
    }
    std::string header_str = header.dump();
    // Pad so the payload starts 8-byte aligned in the file as well.
    while ((16 + header_str.size()) % 8 != 0) header_str.push_back(' ');

    std::string bytes;
    bytes.reserve(16 + header_str.size() + offset);
    bytes.append(kMagic, 4);
    put_u32le(bytes, kVersion);
    put_u64le(bytes, header_str.size());
    bytes.append(header_str);
    for (const auto& nt : container.tensors) {
        for (double v : nt.tensor.data) put_f64le(bytes, v);
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("save_container: cannot open " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("save_container: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Container load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContainerError(ContainerErrorKind::malformed, "cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < 16) {
        throw ContainerError(ContainerErrorKind::truncated, path + ": file shorter than header");
    }
    if (std::memcmp(p, kMagic, 4) != 0) {
        throw ContainerError(ContainerErrorKind::bad_magic,
                             path + ": bad magic, expected \"DAM1\"");
    }
    const std::uint32_t version = get_u32le(p + 4);
    if (version != kVersion) {
        throw ContainerError(ContainerErrorKind::version_mismatch,
                             path + ": unsupported version " + std::to_string(version));
    }
    const std::uint64_t header_len = get_u64le(p + 8);
    if (16 + header_len > bytes.size()) {
        throw ContainerError(ContainerErrorKind::truncated, path + ": truncated header");
    }
    json header;
    try {
        header = json::parse(bytes.substr(16, header_len));
    } catch (const json::exception& e) {
        throw ContainerError(ContainerErrorKind::malformed,
                             path + ": header is not valid JSON: " + e.what());
    }
    if (!header.contains("tensors") || !header["tensors"].is_array()) {
        throw ContainerError(ContainerErrorKind::malformed, path + ": header lacks tensors[]");
    }

    const std::size_t payload_begin = 16 + header_len;
    const std::size_t payload_size = bytes.size() - payload_begin;

    struct Decl {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset;
        std::size_t byte_len;
    };
    std::vector<Decl> decls;
    for (const auto& tj : header["tensors"]) {
        Decl d;
        try {
            d.name = tj.at("name").get<std::string>();
            d.shape = tj.at("shape").get<std::vector<std::size_t>>();
            d.offset = tj.at("offset").get<std::size_t>();
            d.byte_len = tj.at("byte_len").get<std::size_t>();
            if (tj.at("dtype").get<std::string>() != "f64") {
                throw ContainerError(ContainerErrorKind::malformed,
                                     path + ": tensor " + d.name + " has unsupported dtype");
            }
        } catch (const json::exception& e) {
            throw ContainerError(ContainerErrorKind::malformed,
                                 path + ": bad tensor declaration: " + e.what());
        }
        if (d.byte_len != numel_of(d.shape) * 8) {
            throw ContainerError(ContainerErrorKind::malformed,
                                 path + ": tensor " + d.name + " byte_len mismatch");
        }
        if (d.offset % 8 != 0) {
            throw ContainerError(ContainerErrorKind::malformed,
                                 path + ": tensor " + d.name + " offset not 8-byte aligned");
        }
        if (d.offset + d.byte_len > payload_size) {
            throw ContainerError(ContainerErrorKind::truncated,
                                 path + ": payload truncated for tensor " + d.name);
        }
        decls.push_back(std::move(d));
    }
    // Overlap check on the declared ranges.
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    std::vector<std::string> names;
    for (const auto& d : decls) {
        ranges.push_back({d.offset, d.offset + d.byte_len});
        names.push_back(d.name);
    }
    for (std::size_t i = 0; i < ranges.size(); ++i) {
        for (std::size_t j = i + 1; j < ranges.size(); ++j) {
            const bool disjoint =
                ranges[i].second <= ranges[j].first || ranges[j].second <= ranges[i].first;
            if (!disjoint) {
                throw ContainerError(ContainerErrorKind::overlapping_tensors,
                                     path + ": tensors " + names[i] + " and " + names[j] +
                                         " overlap");
            }
        }
    }

    Container c;
    c.arch = header.value("arch", json(nullptr));
    c.meta = header.value("meta", json::object());
    for (const auto& d : decls) {
        Tensor t(d.shape, 0.0);
        const unsigned char* src = p + payload_begin + d.offset;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t.data[i] = get_f64le(src + i * 8);
            if (!std::isfinite(t.data[i])) {
                throw ContainerError(ContainerErrorKind::non_finite_payload,
                                     path + ": tensor " + d.name + " holds a non-finite value");
            }
        }
        c.tensors.push_back({d.name, std::move(t)});
    }
    return c;
}

json arch_to_json(const ArchSpec& arch) {
    return json{{"input_dim", arch.input_dim},
                {"hidden", arch.hidden},
                {"num_classes", arch.num_classes}};
}

ArchSpec arch_from_json(const json& j) {
    ArchSpec a;
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    return a;
}

json trigger_to_json(const TriggerSpec& trig) {
    return json{{"patch_size", trig.patch_size},
                {"position", corner_name(trig.position)},
                {"value", trig.value},
                {"target_class", trig.target_class}};
}

TriggerSpec trigger_from_json(const json& j) {
    TriggerSpec t;
    t.patch_size = j.value("patch_size", std::size_t{3});
    t.position = corner_from_name(j.value("position", std::string("bottom_right")));
    t.value = j.value("value", 1.0);
    t.target_class = j.value("target_class", 0);
    return t;
}

Container to_container(const Checkpoint& ckpt) {
    Container c;
    c.arch = arch_to_json(ckpt.params.arch);
    c.meta["kind"] = ckpt.meta.kind;
    c.meta["task_id"] = ckpt.meta.task_id;
    c.meta["backdoored"] = ckpt.meta.backdoored;
    if (ckpt.meta.trigger) c.meta["trigger"] = trigger_to_json(*ckpt.meta.trigger);
    c.meta["seed"] = ckpt.meta.seed;
    c.meta["created"] = ckpt.meta.created;
    if (ckpt.meta.warning) c.meta["warning"] = *ckpt.meta.warning;
    if (ckpt.meta.gate_acc) c.meta["gate_acc"] = *ckpt.meta.gate_acc;
    if (ckpt.meta.gate_asr) c.meta["gate_asr"] = *ckpt.meta.gate_asr;

    const auto segs = ckpt.params.arch.segments();
    for (std::size_t li = 0; li < segs.size(); ++li) {
        const auto& s = segs[li];
        const double* base = ckpt.params.flat.data.data() + s.offset;
        Tensor w({s.out_dim, s.in_dim},
                 std::vector<double>(base, base + s.out_dim * s.in_dim));
        Tensor b({s.out_dim}, std::vector<double>(base + s.out_dim * s.in_dim,
                                                  base + s.length));
        c.tensors.push_back({"layer" + std::to_string(li) + ".weight", std::move(w)});
        c.tensors.push_back({"layer" + std::to_string(li) + ".bias", std::move(b)});
    }
    return c;
}

Checkpoint checkpoint_from_container(const Container& c) {
    if (c.arch.is_null()) {
        throw ContainerError(ContainerErrorKind::malformed, "checkpoint container lacks arch");
    }
    const ArchSpec arch = arch_from_json(c.arch);
    Tensor flat({arch.param_count()}, 0.0);
    const auto segs = arch.segments();
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& nt : c.tensors) {
            if (nt.name == name) return nt.tensor;
        }
        throw ContainerError(ContainerErrorKind::malformed,
                             "checkpoint container lacks tensor " + name);
    };
    for (std::size_t li = 0; li < segs.size(); ++li) {
        const auto& s = segs[li];
        const Tensor& w = find("layer" + std::to_string(li) + ".weight");
        const Tensor& b = find("layer" + std::to_string(li) + ".bias");
        if (w.numel() != s.in_dim * s.out_dim || b.numel() != s.out_dim) {
            throw ContainerError(ContainerErrorKind::malformed,
                                 "checkpoint layer " + std::to_string(li) + " shape mismatch");
        }
        std::copy(w.data.begin(), w.data.end(), flat.data.begin() + s.offset);
        std::copy(b.data.begin(), b.data.end(),
                  flat.data.begin() + s.offset + s.in_dim * s.out_dim);
    }
    Checkpoint ckpt{ParamVector(arch, std::move(flat)), {}};
    ckpt.meta.kind = c.meta.value("kind", std::string{});
    ckpt.meta.task_id = c.meta.value("task_id", std::string{});
    ckpt.meta.backdoored = c.meta.value("backdoored", false);
    if (c.meta.contains("trigger")) ckpt.meta.trigger = trigger_from_json(c.meta["trigger"]);
    ckpt.meta.seed = c.meta.value("seed", std::uint64_t{0});
    ckpt.meta.created = c.meta.value("created", std::string{});
    if (c.meta.contains("warning")) ckpt.meta.warning = c.meta["warning"].get<std::string>();
    if (c.meta.contains("gate_acc")) ckpt.meta.gate_acc = c.meta["gate_acc"].get<double>();
    if (c.meta.contains("gate_asr")) ckpt.meta.gate_asr = c.meta["gate_asr"].get<double>();
    return ckpt;
}

Container dataset_to_container(const Dataset& ds, const TaskSpec& spec) {
    Container c;
    c.meta["kind"] = "dataset";
    c.meta["task_id"] = ds.task_id;
    c.meta["split"] = ds.split;
    c.meta["seed"] = ds.seed;
    c.meta["task_spec"] = json{{"task_id", spec.task_id},
                               {"side", spec.side},
                               {"num_classes", spec.num_classes},
                               {"prototype_seed", spec.prototype_seed},
                               {"noise_sigma", spec.noise_sigma},
                               {"n_train", spec.n_train},
                               {"n_test", spec.n_test}};
    c.tensors.push_back({"inputs", ds.inputs});
    Tensor labels({ds.labels.size()}, 0.0);
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
        labels.data[i] = static_cast<double>(ds.labels[i]);
    }
    c.tensors.push_back({"labels", std::move(labels)});
    return c;
}

Dataset dataset_from_container(const Container& c) {
    Dataset ds;
    ds.task_id = c.meta.value("task_id", std::string{});
    ds.split = c.meta.value("split", std::string{});
    ds.seed = c.meta.value("seed", std::uint64_t{0});
    for (const auto& nt : c.tensors) {
        if (nt.name == "inputs") ds.inputs = nt.tensor;
        if (nt.name == "labels") {
            ds.labels.resize(nt.tensor.numel());
            for (std::size_t i = 0; i < nt.tensor.numel(); ++i) {
                ds.labels[i] = static_cast<int>(nt.tensor.data[i]);
            }
        }
    }
    if (ds.inputs.numel() == 0 || ds.labels.empty()) {
        throw ContainerError(ContainerErrorKind::malformed,
                             "dataset container lacks inputs/labels");
    }
    return ds;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    save_container(path, to_container(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_container(load_container(path));
}

}  // namespace dam
