#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "statex/checkpoint.hpp"
#include "statex/statex.hpp"

#include <filesystem>
#include <fstream>

using namespace statex;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string & name) {
    fs::path dir = fs::temp_directory_path() / "statex_test_checkpoint";
    fs::create_directories(dir);
    return dir / name;
}

std::string read_file(const fs::path & p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path & p, const std::string & bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint sample(Family family, StorageType storage) {
    auto cfg = fixtures::config(family, 2, 16, 2, 4, 4, 20);
    auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 7), 8);
    ckpt.meta.seed = 7;
    ckpt.meta.tokens_seen = 123456789012ULL;
    ckpt.meta.stage = "pretrain";
    ckpt.meta.storage = storage;
    return ckpt;
}

} // namespace

TEST_CASE("save twice gives byte-identical files") {
    auto c = sample(Family::Gla, StorageType::F32);
    save(c, scratch("a.ckpt"));
    save(c, scratch("b.ckpt"));
    CHECK(read_file(scratch("a.ckpt")) == read_file(scratch("b.ckpt")));
}

TEST_CASE("save/load/save is byte-identical and load is a fixed point") {
    for (auto family : {Family::Gla, Family::Mamba2}) {
        for (auto storage : {StorageType::F32, StorageType::F64}) {
            auto c = sample(family, storage);
            save(c, scratch("r1.ckpt"));
            auto back = load(scratch("r1.ckpt"));
            save(back, scratch("r2.ckpt"));
            CHECK(read_file(scratch("r1.ckpt")) == read_file(scratch("r2.ckpt")));
            CHECK(back == round_to_storage(c));
            CHECK(load(scratch("r2.ckpt")) == back);
            if (storage == StorageType::F64) {
                CHECK(back == c);
            }
        }
    }
}

TEST_CASE("expanded checkpoint with accounting survives the round trip") {
    auto c = sample(Family::Mamba2, StorageType::F64);
    ExpansionPlan plan;
    plan.family = Family::Mamba2;
    plan.m = 1;
    auto out = apply_statex(c, plan).checkpoint;
    CHECK(deserialize(serialize(out)) == out);
}

TEST_CASE("corrupted payload is refused with a checksum error") {
    auto bytes = serialize(sample(Family::Gla, StorageType::F32));
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(deserialize(bad), ChecksumError);
    bad = bytes;
    bad[bad.size() - 1] ^= 0x01;
    CHECK_THROWS_AS(deserialize(bad), ChecksumError);
}

TEST_CASE("truncated file is a checksum error, not a crash") {
    auto bytes = serialize(sample(Family::Gla, StorageType::F32));
    for (std::size_t keep : {std::size_t{0}, std::size_t{4}, std::size_t{12}, std::size_t{40}, bytes.size() / 3,
                             bytes.size() - 1}) {
        write_file(scratch("trunc.ckpt"), bytes.substr(0, keep));
        if (keep < 8) {
            CHECK_THROWS_AS(load(scratch("trunc.ckpt")), IoError);
        } else {
            CHECK_THROWS_AS(load(scratch("trunc.ckpt")), ChecksumError);
        }
    }
}

TEST_CASE("version mismatch is a distinct error") {
    auto bytes = serialize(sample(Family::Gla, StorageType::F32));
    bytes[8] = 2;
    try {
        deserialize(bytes);
        FAIL("expected VersionError");
    } catch (const VersionError & e) {
        CHECK(std::string(e.what()).find("version 2") != std::string::npos);
    }
}

TEST_CASE("unknown tensor name is a schema error naming it") {
    auto c = sample(Family::Gla, StorageType::F32);
    c.tensors["layers.0.gla.w_extra"] = Tensor({2, 2});
    CHECK_THROWS_AS(serialize(c), SchemaError);
    auto bytes = serialize(c, false);
    try {
        deserialize(bytes);
        FAIL("expected SchemaError");
    } catch (const SchemaError & e) {
        CHECK(std::string(e.what()).find("layers.0.gla.w_extra") != std::string::npos);
    }
}

TEST_CASE("missing tensor and wrong shape are schema errors") {
    auto c = sample(Family::Mamba2, StorageType::F32);
    auto missing = c;
    missing.tensors.erase("layers.1.ssm.a");
    CHECK_THROWS_WITH_AS(deserialize(serialize(missing, false)), doctest::Contains("layers.1.ssm.a"), SchemaError);
    auto wrong = c;
    wrong.tensors["embed"] = Tensor({3, 16});
    CHECK_THROWS_WITH_AS(deserialize(serialize(wrong, false)), doctest::Contains("embed"), SchemaError);
}

TEST_CASE("bad magic and missing file are io errors") {
    CHECK_THROWS_AS(deserialize(std::string(64, 'x')), IoError);
    CHECK_THROWS_AS(load(scratch("does_not_exist.ckpt")), IoError);
}

TEST_CASE("layout is little-endian with fixed widths") {
    auto bytes = serialize(sample(Family::Gla, StorageType::F32));
    CHECK(bytes.substr(0, 8) == std::string("STXCKPT\0", 8));
    CHECK(static_cast<unsigned char>(bytes[8]) == 1);
    CHECK(bytes[9] == 0);
    CHECK(bytes[10] == 0);
    CHECK(bytes[11] == 0);
    const auto f32 = serialize(sample(Family::Gla, StorageType::F32)).size();
    const auto f64 = serialize(sample(Family::Gla, StorageType::F64)).size();
    CHECK(f64 > f32);
}

TEST_CASE("inspect lists names, shapes and checksums") {
    auto c = sample(Family::Gla, StorageType::F32);
    const std::string text = inspect(c);
    CHECK(text.find("embed") != std::string::npos);
    CHECK(text.find("[20,16]") != std::string::npos);
    std::size_t lines = 0;
    for (char ch : text) {
        lines += ch == '\n';
    }
    CHECK(lines >= c.tensors.size());
    auto other = c;
    other.at("embed")[0] += 1.0;
    CHECK(inspect(other) != text);
}
