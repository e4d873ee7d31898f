#include "hded/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace hded {
namespace {

constexpr char kMagic[4] = {'2', 'H', 'D', 'E'};

template <typename U>
void put(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

template <typename T>
std::vector<CheckpointEntry> model_entries(const Model<T>& model) {
  std::vector<CheckpointEntry> entries;
  auto add = [&](const std::vector<NamedTensor<T>>& list) {
    for (const auto& nt : list) {
      CheckpointEntry e;
      e.name = nt.name;
      e.elem_type = elem_type_of<T>();
      e.shape = nt.tensor.shape();
      e.values.assign(nt.tensor.data().begin(), nt.tensor.data().end());
      entries.push_back(std::move(e));
    }
  };
  add(model.parameters());
  add(model.buffers());
  return entries;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw CheckpointError("parameter name too long: " + e.name);
    if (e.shape.size() > 0xFF) throw CheckpointError("rank too large for " + e.name);
    if (numel(e.shape) != e.values.size()) throw CheckpointError("shape/value mismatch for " + e.name);
    put<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.elem_type));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    if (e.elem_type == ElemType::f32) {
      for (double v : e.values) put<float>(os, static_cast<float>(v));
    } else {
      for (double v : e.values) put<double>(os, v);
    }
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                          path.string());
  }
  const auto count = get<std::uint32_t>(is, path);
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = get<std::uint16_t>(is, path);
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw CheckpointError("truncated checkpoint " + path.string());
    const auto tag = get<std::uint8_t>(is, path);
    if (tag != static_cast<std::uint8_t>(ElemType::f32) && tag != static_cast<std::uint8_t>(ElemType::f64)) {
      throw CheckpointError("unknown element type " + std::to_string(tag) + " for " + e.name);
    }
    e.elem_type = static_cast<ElemType>(tag);
    const auto rank = get<std::uint8_t>(is, path);
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(get<std::uint32_t>(is, path));
    const std::size_t n = numel(e.shape);
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      e.values[k] = e.elem_type == ElemType::f32 ? static_cast<double>(get<float>(is, path))
                                                 : get<double>(is, path);
    }
    entries.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("trailing bytes after checkpoint entries in " + path.string());
  }
  return entries;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  write_checkpoint(path, model_entries(model));
}

template <typename T>
void load_checkpoint(Model<T>& model, const std::filesystem::path& path) {
  auto entries = read_checkpoint(path);
  std::map<std::string, CheckpointEntry*> by_name;
  for (auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) throw CheckpointError("duplicate entry " + e.name);
  }
  std::size_t used = 0;
  auto fill = [&](std::vector<NamedTensor<T>> list) {
    for (auto& nt : list) {
      auto it = by_name.find(nt.name);
      if (it == by_name.end()) {
        throw CheckpointError("checkpoint " + path.string() + " lacks tensor " + nt.name);
      }
      const auto& e = *it->second;
      if (e.shape != nt.tensor.shape()) {
        throw CheckpointError("shape mismatch for " + nt.name + ": checkpoint " + to_string(e.shape) +
                              ", model " + to_string(nt.tensor.shape()));
      }
      auto dst = nt.tensor.data_mut();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(e.values[k]);
      ++used;
    }
  };
  fill(model.parameters());
  fill(model.buffers());
  if (used != entries.size()) {
    throw CheckpointError("checkpoint " + path.string() + " has " +
                          std::to_string(entries.size() - used) +
                          " tensor(s) the model does not declare");
  }
}

template void save_checkpoint(const Model<float>&, const std::filesystem::path&);
template void save_checkpoint(const Model<double>&, const std::filesystem::path&);
template void load_checkpoint(Model<float>&, const std::filesystem::path&);
template void load_checkpoint(Model<double>&, const std::filesystem::path&);

}  // namespace hded
