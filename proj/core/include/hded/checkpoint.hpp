#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "hded/network.hpp"

// Binary checkpoint layout (all integers little-endian):
//   "2HDE" | u32 version | u32 entry count |
//   per entry: u16 name length, UTF-8 name, u8 elem type (1 = f32, 2 = f64),
//              u8 rank, u32 extents[rank], raw little-endian values.
namespace hded {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  ElemType elem_type = ElemType::f32;
  Shape shape;
  std::vector<double> values;  // widened; f32 entries round-trip exactly
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

/// Writes every parameter and batch-norm buffer of `model`.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

/// Loads into a model of matching architecture. Every model tensor must be
/// present with the same shape; extra entries are an error.
template <typename T>
void load_checkpoint(Model<T>& model, const std::filesystem::path& path);

}  // namespace hded
