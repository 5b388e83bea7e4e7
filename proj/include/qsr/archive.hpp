#pragma once

// Named-tensor archive used for checkpoints.
//
// Layout (little-endian):
//   8 bytes  magic "QSRARCH1"
//   8 bytes  uint64 manifest length M
//   M bytes  JSON manifest: {"metadata": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
//   payload  raw tensor bytes; offsets are relative to the payload start

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/tensor.hpp"

namespace qsr {

class TensorArchive {
 public:
  void put(const std::string& name, const ad::Shape& shape, std::span<const float> values);
  void put(const std::string& name, const ad::Shape& shape, std::span<const double> values);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const ad::Shape& shape_of(const std::string& name) const;
  std::string dtype_of(const std::string& name) const;
  /// Values converted to T (float <-> double conversions are allowed).
  template <typename T>
  std::vector<T> get(const std::string& name) const;
  std::vector<std::string> names() const;

  nlohmann::json& metadata() noexcept { return metadata_; }
  const nlohmann::json& metadata() const noexcept { return metadata_; }

  std::vector<unsigned char> serialize() const;
  static TensorArchive deserialize(std::span<const unsigned char> bytes);
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  struct Entry {
    ad::Shape shape;
    std::string dtype;
    std::vector<unsigned char> bytes;
  };
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

}  // namespace qsr
