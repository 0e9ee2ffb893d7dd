#pragma once

// Versioned binary container for named float tensors.
//
// Layout (all integers little-endian):
//   "TDIDCKPT" | u32 format_version
//   repeated until EOF:
//     u32 name_length | name bytes (UTF-8) | u32 rank | u64 extent x rank |
//     f32 value x product(extents)

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tdid/tensor.hpp"

namespace tdid {

inline constexpr char kCheckpointMagic[8] = {'T', 'D', 'I', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensorf tensor;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace tdid
