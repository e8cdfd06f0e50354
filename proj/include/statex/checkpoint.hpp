#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "statex/config.hpp"
#include "statex/error.hpp"

namespace statex {

enum class StorageType : std::uint8_t { F32 = 0, F64 = 1 };

struct Metadata {
    std::uint64_t seed = 0;
    std::uint64_t tokens_seen = 0;
    std::string stage = "init";
    // Text form of the accounting report when the checkpoint was expanded.
    std::string accounting;
    StorageType storage = StorageType::F32;

    friend bool operator==(const Metadata &, const Metadata &) = default;
};

struct Checkpoint {
    ModelConfig config;
    TensorMap tensors;
    Metadata meta;

    const Tensor & at(const std::string & name) const;
    Tensor & at(const std::string & name);
    // Throws SchemaError unless the tensor names and shapes match the config.
    void validate_schema() const;

    friend bool operator==(const Checkpoint &, const Checkpoint &) = default;
};

class ChecksumError : public IoError {
public:
    using IoError::IoError;
};

class VersionError : public IoError {
public:
    using IoError::IoError;
};

class SchemaError : public IoError {
public:
    using IoError::IoError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian, fixed widths):
//   "STXCKPT\0" | u32 version | config block | u32 tensor count |
//   per tensor sorted by name: u32 name length, name, u8 dtype, u32 rank,
//   u64 extents, payload | metadata block | u64 FNV-1a of all prior bytes
std::string serialize(const Checkpoint & ckpt, bool check_schema = true);
Checkpoint deserialize(const std::string & bytes);

void save(const Checkpoint & ckpt, const std::filesystem::path & path);
Checkpoint load(const std::filesystem::path & path);

// Rounds every tensor to the precision of meta.storage, the fixed point of save/load.
Checkpoint round_to_storage(Checkpoint ckpt);

// Names, shapes and per-tensor checksums, one tensor per line.
std::string inspect(const Checkpoint & ckpt);

std::uint64_t fnv1a64(const void * data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t tensor_checksum(const Tensor & t, StorageType storage);

} // namespace statex
