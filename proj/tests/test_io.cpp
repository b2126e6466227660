#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "dam/io.hpp"

using namespace dam;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("damlab_io_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Checkpoint make_checkpoint(std::uint64_t seed) {
    ArchSpec arch{4, {5}, 3};
    Rng rng(seed);
    Checkpoint ckpt;
    ckpt.params = init_params(arch, rng);
    ckpt.meta.kind = "finetuned";
    ckpt.meta.task_id = "task_x";
    ckpt.meta.backdoored = true;
    ckpt.meta.trigger = TriggerSpec{};
    ckpt.meta.seed = seed;
    ckpt.meta.created = "cfg:test";
    ckpt.meta.gate_acc = 0.97;
    ckpt.meta.gate_asr = 0.93;
    return ckpt;
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ContainerErrorKind load_error_kind(const std::string& path) {
    try {
        (void)load_container(path);
    } catch (const ContainerError& e) {
        return e.kind();
    }
    FAIL("expected ContainerError");
    return ContainerErrorKind::malformed;
}

}  // namespace

TEST_CASE("checkpoint round-trip is bit identical") {
    TempDir dir;
    const Checkpoint ckpt = make_checkpoint(5);
    const std::string path = dir.file("ckpt.dam");
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.params.flat.data == ckpt.params.flat.data);
    CHECK(loaded.params.arch == ckpt.params.arch);
    CHECK(loaded.meta.kind == "finetuned");
    CHECK(loaded.meta.task_id == "task_x");
    CHECK(loaded.meta.backdoored);
    REQUIRE(loaded.meta.trigger.has_value());
    CHECK(loaded.meta.trigger->patch_size == 3);
    CHECK(loaded.meta.seed == 5);
    CHECK(loaded.meta.gate_acc == 0.97);

    // saving the loaded checkpoint reproduces the file byte for byte
    const std::string path2 = dir.file("ckpt2.dam");
    save_checkpoint(path2, loaded);
    CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("dataset round-trip") {
    TempDir dir;
    TaskSpec t;
    t.task_id = "toy";
    t.side = 4;
    t.num_classes = 2;
    t.prototype_seed = 3;
    t.n_train = 10;
    t.n_test = 4;
    const Dataset ds = generate(t, 8, Split::test);
    const std::string path = dir.file("data.dam");
    save_container(path, dataset_to_container(ds, t));
    const Dataset loaded = dataset_from_container(load_container(path));
    CHECK(loaded.inputs.data == ds.inputs.data);
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.task_id == "toy");
    CHECK(loaded.split == "test");
}

TEST_CASE("generic container round-trip for mask-like payloads") {
    TempDir dir;
    Container c;
    c.meta["kind"] = "mask";
    c.meta["temperature"] = 0.5;
    Rng rng(12);
    Tensor logits({64}, 0.0);
    for (double& v : logits.data) v = rng.normal(0.0, 2.0);
    c.tensors.push_back({"mask.logits", logits});
    const std::string path = dir.file("mask.dam");
    save_container(path, c);
    const Container loaded = load_container(path);
    REQUIRE(loaded.tensors.size() == 1);
    CHECK(loaded.tensors[0].name == "mask.logits");
    CHECK(loaded.tensors[0].tensor.data == logits.data);
    CHECK(loaded.meta["kind"] == "mask");
}

TEST_CASE("the on-disk layout is little-endian with the documented prefix") {
    TempDir dir;
    Container c;
    c.meta["kind"] = "probe";
    c.tensors.push_back({"v", Tensor({1}, {1.0})});
    const std::string path = dir.file("probe.dam");
    save_container(path, c);
    const std::string bytes = read_bytes(path);
    REQUIRE(bytes.size() >= 16);
    CHECK(bytes.substr(0, 4) == "DAM1");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version 1 LE
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    // payload is the last 8 bytes: IEEE-754 LE of 1.0 = 00..00 F0 3F
    const std::string payload = bytes.substr(bytes.size() - 8);
    CHECK(static_cast<unsigned char>(payload[6]) == 0xF0);
    CHECK(static_cast<unsigned char>(payload[7]) == 0x3F);
    for (int i = 0; i < 6; ++i) CHECK(payload[i] == 0);
    // payload offset is 8-byte aligned
    CHECK(bytes.size() % 8 == 0);
}

TEST_CASE("corrupted files raise their specific errors") {
    TempDir dir;
    const Checkpoint ckpt = make_checkpoint(6);
    const std::string good = dir.file("good.dam");
    save_checkpoint(good, ckpt);
    const std::string bytes = read_bytes(good);

    SUBCASE("bad magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        bad[1] = 'X';
        write_bytes(dir.file("bad.dam"), bad);
        CHECK(load_error_kind(dir.file("bad.dam")) == ContainerErrorKind::bad_magic);
    }
    SUBCASE("version mismatch") {
        std::string bad = bytes;
        bad[4] = 2;
        write_bytes(dir.file("bad.dam"), bad);
        CHECK(load_error_kind(dir.file("bad.dam")) == ContainerErrorKind::version_mismatch);
    }
    SUBCASE("truncated payload names the tensor") {
        std::string bad = bytes.substr(0, bytes.size() - 8);
        write_bytes(dir.file("bad.dam"), bad);
        try {
            (void)load_container(dir.file("bad.dam"));
            FAIL("expected error");
        } catch (const ContainerError& e) {
            CHECK(e.kind() == ContainerErrorKind::truncated);
            CHECK(std::string(e.what()).find("layer") != std::string::npos);
        }
    }
    SUBCASE("NaN payload") {
        std::string bad = bytes;
        // overwrite the first payload f64 with a quiet NaN (LE)
        const unsigned char nan_bytes[8] = {0, 0, 0, 0, 0, 0, 0xF8, 0x7F};
        const std::size_t header_len = static_cast<unsigned char>(bytes[8]) |
                                       (static_cast<unsigned char>(bytes[9]) << 8);
        const std::size_t payload_at = 16 + header_len;
        for (int i = 0; i < 8; ++i) bad[payload_at + i] = static_cast<char>(nan_bytes[i]);
        write_bytes(dir.file("bad.dam"), bad);
        CHECK(load_error_kind(dir.file("bad.dam")) == ContainerErrorKind::non_finite_payload);
    }
    SUBCASE("overlapping tensors") {
        // Handcraft a header declaring two overlapping tensors.
        json header;
        header["arch"] = nullptr;
        header["meta"] = {{"kind", "probe"}};
        header["tensors"] = json::array();
        header["tensors"].push_back({{"name", "a"},
                                     {"shape", {2}},
                                     {"dtype", "f64"},
                                     {"offset", 0},
                                     {"byte_len", 16}});
        header["tensors"].push_back({{"name", "b"},
                                     {"shape", {2}},
                                     {"dtype", "f64"},
                                     {"offset", 8},
                                     {"byte_len", 16}});
        std::string hs = header.dump();
        while ((16 + hs.size()) % 8 != 0) hs.push_back(' ');
        std::string out = "DAM1";
        out.push_back(1);
        out.append(3, '\0');
        for (int i = 0; i < 8; ++i) {
            out.push_back(static_cast<char>((hs.size() >> (8 * i)) & 0xff));
        }
        out += hs;
        out.append(24, '\0');
        write_bytes(dir.file("bad.dam"), out);
        CHECK(load_error_kind(dir.file("bad.dam")) ==
              ContainerErrorKind::overlapping_tensors);
    }
}

TEST_CASE("misaligned offsets are rejected") {
    TempDir dir;
    json header;
    header["arch"] = nullptr;
    header["meta"] = {{"kind", "probe"}};
    header["tensors"] = json::array();
    header["tensors"].push_back({{"name", "a"},
                                 {"shape", {1}},
                                 {"dtype", "f64"},
                                 {"offset", 4},
                                 {"byte_len", 8}});
    std::string hs = header.dump();
    while ((16 + hs.size()) % 8 != 0) hs.push_back(' ');
    std::string out = "DAM1";
    out.push_back(1);
    out.append(3, '\0');
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((hs.size() >> (8 * i)) & 0xff));
    }
    out += hs;
    out.append(16, '\0');
    write_bytes(dir.file("bad.dam"), out);
    try {
        (void)load_container(dir.file("bad.dam"));
        FAIL("expected error");
    } catch (const ContainerError& e) {
        CHECK(e.kind() == ContainerErrorKind::malformed);
        CHECK(std::string(e.what()).find("aligned") != std::string::npos);
    }
}
