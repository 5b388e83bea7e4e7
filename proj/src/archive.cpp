#include "qsr/archive.hpp"

#include <cstdint>
#include <cstring>

#include "qsr/error.hpp"
#include "qsr/io.hpp"

namespace qsr {
namespace {

constexpr char kMagic[8] = {'Q', 'S', 'R', 'A', 'R', 'C', 'H', '1'};

template <typename T>
std::vector<unsigned char> to_bytes(std::span<const T> values) {
  std::vector<unsigned char> out(values.size() * sizeof(T));
  std::memcpy(out.data(), values.data(), out.size());
  return out;
}

template <typename T>
std::vector<T> from_bytes(const std::vector<unsigned char>& bytes) {
  std::vector<T> out(bytes.size() / sizeof(T));
  std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  return out;
}

}  // namespace

void TensorArchive::put(const std::string& name, const ad::Shape& shape, std::span<const float> values) {
  if (ad::numel(shape) != values.size()) throw InvalidArgument("archive entry " + name + ": shape/size mismatch");
  entries_[name] = {shape, "float32", to_bytes(values)};
}

void TensorArchive::put(const std::string& name, const ad::Shape& shape, std::span<const double> values) {
  if (ad::numel(shape) != values.size()) throw InvalidArgument("archive entry " + name + ": shape/size mismatch");
  entries_[name] = {shape, "float64", to_bytes(values)};
}

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive has no tensor named '" + name + "'");
  return it->second;
}

const ad::Shape& TensorArchive::shape_of(const std::string& name) const { return entry(name).shape; }

std::string TensorArchive::dtype_of(const std::string& name) const { return entry(name).dtype; }

template <typename T>
std::vector<T> TensorArchive::get(const std::string& name) const {
  const Entry& e = entry(name);
  std::vector<T> out;
  if (e.dtype == "float32") {
    const auto v = from_bytes<float>(e.bytes);
    out.assign(v.begin(), v.end());
  } else {
    const auto v = from_bytes<double>(e.bytes);
    out.assign(v.begin(), v.end());
  }
  return out;
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<unsigned char> TensorArchive::serialize() const {
  nlohmann::json manifest;
  manifest["metadata"] = metadata_;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", offset}, {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string text = manifest.dump();
  std::vector<unsigned char> out(sizeof(kMagic) + 8);
  std::memcpy(out.data(), kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  std::memcpy(out.data() + sizeof(kMagic), &len, 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, e] : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  return out;
}

TensorArchive TensorArchive::deserialize(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a tensor archive (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (16 + len > bytes.size()) throw IoError("truncated tensor archive manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad tensor archive manifest: ") + e.what());
  }
  const std::size_t base = 16 + len;
  TensorArchive out;
  out.metadata_ = manifest.value("metadata", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (base + offset + nbytes > bytes.size()) throw IoError("truncated tensor archive payload");
    Entry e;
    e.shape = t.at("shape").get<ad::Shape>();
    e.dtype = t.at("dtype").get<std::string>();
    if (e.dtype != "float32" && e.dtype != "float64") throw IoError("unsupported dtype " + e.dtype);
    const std::size_t width = e.dtype == "float32" ? 4 : 8;
    if (nbytes != ad::numel(e.shape) * width) throw IoError("archive entry size does not match its shape");
    e.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(base + offset + nbytes));
    out.entries_[t.at("name").get<std::string>()] = std::move(e);
  }
  return out;
}

void TensorArchive::save(const std::filesystem::path& path) const { io::write_bytes(path, serialize()); }

TensorArchive TensorArchive::load(const std::filesystem::path& path) { return deserialize(io::read_bytes(path)); }

template std::vector<float> TensorArchive::get<float>(const std::string&) const;
template std::vector<double> TensorArchive::get<double>(const std::string&) const;

}  // namespace qsr
