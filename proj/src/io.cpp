#include "qsr/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qsr/error.hpp"

namespace qsr::io {

static_assert(std::endian::native == std::endian::little, "payload formats assume a little-endian host");

fs::path sidecar_path(const fs::path& payload) { return fs::path(payload.string() + ".json"); }

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void write_volume(const fs::path& path, const VolumeFile& volume) {
  std::size_t expected = 1;
  for (auto d : volume.dims) expected *= d;
  if (expected != volume.data.size()) throw InvalidArgument("write_volume: dims do not match payload size");
  write_bytes(path, std::span(reinterpret_cast<const unsigned char*>(volume.data.data()),
                              volume.data.size() * sizeof(float)));
  nlohmann::json side = volume.extra;
  side["dims"] = volume.dims;
  side["dtype"] = "float32";
  side["endianness"] = "little";
  side["b0_normalized"] = volume.b0_normalized;
  write_json(sidecar_path(path), side);
}

VolumeFile read_volume(const fs::path& path) {
  const auto side = read_json(sidecar_path(path));
  VolumeFile out;
  try {
    out.dims = side.at("dims").get<std::vector<std::size_t>>();
    if (side.at("dtype").get<std::string>() != "float32") throw IoError("unsupported dtype in " + path.string());
    out.b0_normalized = side.value("b0_normalized", true);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar for " + path.string() + ": " + e.what());
  }
  out.extra = side;
  const auto bytes = read_bytes(path);
  std::size_t expected = 1;
  for (auto d : out.dims) expected *= d;
  if (bytes.size() != expected * sizeof(float)) {
    throw IoError(path.string() + ": payload has " + std::to_string(bytes.size()) + " bytes, sidecar implies " +
                  std::to_string(expected * sizeof(float)));
  }
  out.data.resize(expected);
  std::memcpy(out.data.data(), bytes.data(), bytes.size());
  return out;
}

VolumeFile pack_slices(std::span<const DwiVolume> slices) {
  VolumeFile file;
  if (slices.empty()) {
    file.dims = {0, 0, 0, 0};
    return file;
  }
  const auto& first = slices.front();
  file.dims = {slices.size(), first.height, first.width, first.dirs};
  for (const auto& s : slices) {
    if (s.height != first.height || s.width != first.width || s.dirs != first.dirs) {
      throw InvalidArgument("pack_slices: slices differ in shape");
    }
    for (double v : s.data) file.data.push_back(static_cast<float>(v));
  }
  return file;
}

std::vector<DwiVolume> unpack_slices(const VolumeFile& file, const GradientTable& table) {
  if (file.dims.size() == 3) {
    VolumeFile four = file;
    four.dims.insert(four.dims.begin(), 1);
    return unpack_slices(four, table);
  }
  if (file.dims.size() != 4) throw IoError("expected [slices, height, width, dirs] volume");
  const std::size_t s = file.dims[0], h = file.dims[1], w = file.dims[2], n = file.dims[3];
  if (n != table.size()) {
    throw InvalidArgument("volume has " + std::to_string(n) + " directions, gradient table has " +
                          std::to_string(table.size()));
  }
  std::vector<DwiVolume> out;
  for (std::size_t i = 0; i < s; ++i) {
    DwiVolume v(h, w, table);
    const float* src = file.data.data() + i * h * w * n;
    for (std::size_t j = 0; j < h * w * n; ++j) v.data[j] = src[j];
    out.push_back(std::move(v));
  }
  return out;
}

void write_fsl_table(const fs::path& bvals, const fs::path& bvecs, const GradientTable& table) {
  std::ostringstream vals;
  vals << std::setprecision(17);
  for (std::size_t i = 0; i < table.size(); ++i) vals << (i ? " " : "") << table.bvals[i];
  vals << '\n';
  write_text(bvals, vals.str());
  std::ostringstream vecs;
  vecs << std::setprecision(17);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < table.size(); ++i) vecs << (i ? " " : "") << table.bvecs[i](c);
    vecs << '\n';
  }
  write_text(bvecs, vecs.str());
}

namespace {
std::vector<std::vector<double>> read_rows(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      try {
        row.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw IoError("non-numeric token '" + tok + "' in " + path.string());
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}
}  // namespace

GradientTable read_fsl_table(const fs::path& bvals, const fs::path& bvecs) {
  const auto vals = read_rows(bvals);
  const auto vecs = read_rows(bvecs);
  if (vals.size() != 1) throw IoError(bvals.string() + ": expected one row of b-values");
  if (vecs.size() != 3) throw IoError(bvecs.string() + ": expected three rows of b-vector components");
  const std::size_t n = vals[0].size();
  if (vecs[0].size() != n || vecs[1].size() != n || vecs[2].size() != n) {
    throw IoError("bvals/bvecs column counts differ");
  }
  GradientTable table;
  table.bvals = vals[0];
  for (std::size_t i = 0; i < n; ++i) table.bvecs.emplace_back(vecs[0][i], vecs[1][i], vecs[2][i]);
  return table;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

}  // namespace qsr::io
