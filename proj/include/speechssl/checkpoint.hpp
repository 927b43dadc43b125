#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace speechssl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

/// On disk: "MSEC", u32 version, u32 header length, UTF-8 JSON header
/// {"meta": ..., "tensors": [{"name", "shape", "offset"}]}, then the tensors'
/// little-endian f32 data in header order. Offsets are relative to the start
/// of the data block.
struct CheckpointFile {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

}  // namespace speechssl
