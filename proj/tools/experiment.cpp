#include "experiment.hpp"

#include <cmath>

#include "qsr/error.hpp"
#include "qsr/io.hpp"

namespace qsr::cli {

namespace {

using nlohmann::json;

json slice_json(const phantom::SliceSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"axial", s.axial},
          {"radial", s.radial},
          {"csf_diffusivity", s.csf_diffusivity},
          {"min_crossing_deg", s.min_crossing_deg},
          {"max_crossing_deg", s.max_crossing_deg},
          {"max_csf_fraction", s.max_csf_fraction},
          {"max_second_fraction", s.max_second_fraction}};
}

json model_json(const model::ModelConfig& m) {
  auto j = model::to_json(m);
  j.erase("height");
  j.erase("width");
  return j;
}

// Walks `given` against the fully populated default document.
void check_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  if (!known.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const auto where = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config field '" + where + "'");
    check_keys(value, known.at(key), where);
  }
}

template <typename T>
T field(const json& j, const char* key, T fallback, const std::string& section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + section + "." + key + "' has the wrong type");
  }
}

void check_positive(std::size_t v, const std::string& name) {
  if (v == 0) throw ConfigError("config field '" + name + "' must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("config field 'output_dir' must not be empty");
  check_positive(phantom.slice.height, "phantom.height");
  check_positive(phantom.slice.width, "phantom.width");
  check_positive(phantom.train_slices, "phantom.train_slices");
  check_positive(phantom.val_slices, "phantom.val_slices");
  check_positive(phantom.test_slices, "phantom.test_slices");
  if (!(phantom.noise_sigma >= 0.0) || !std::isfinite(phantom.noise_sigma)) {
    throw ConfigError("config field 'phantom.noise_sigma' must be finite and >= 0");
  }
  if (!(phantom.slice.axial > 0.0) || !(phantom.slice.radial > 0.0) || !(phantom.slice.csf_diffusivity > 0.0)) {
    throw ConfigError("config fields 'phantom.axial', 'phantom.radial' and 'phantom.csf_diffusivity' must be positive");
  }
  if (scheme.directions < 2) throw ConfigError("config field 'scheme.directions' must be at least 2");
  if (!(scheme.bval > 0.0)) throw ConfigError("config field 'scheme.bval' must be positive");
  check_positive(scheme.input_directions, "scheme.input_directions");
  if (scheme.input_directions >= scheme.directions) {
    throw ConfigError("config field 'scheme.input_directions' (" + std::to_string(scheme.input_directions) +
                      ") must be below 'scheme.directions' (" + std::to_string(scheme.directions) +
                      "): the ASR scale r = N_target / N_in must exceed 1");
  }
  if (model.height != phantom.slice.height || model.width != phantom.slice.width) {
    throw ConfigError("model geometry does not follow the phantom slice size");
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  try {
    train.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  try {
    sampler.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
  if (sampler.steps > train.diffusion_steps) {
    throw ConfigError("config field 'sampler.steps' exceeds 'train.diffusion_steps'");
  }
  if (grid.oc.empty() || grid.scc.empty()) throw ConfigError("config fields 'grid.oc' and 'grid.scc' must not be empty");
  for (double w : grid.oc) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("config field 'grid.oc' holds a negative or non-finite weight");
  }
  for (double w : grid.scc) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("config field 'grid.scc' holds a negative or non-finite weight");
  }
  check_positive(grid.slices, "grid.slices");
}

json to_json(const ExperimentConfig& c) {
  auto phantom = slice_json(c.phantom.slice);
  phantom["train_slices"] = c.phantom.train_slices;
  phantom["val_slices"] = c.phantom.val_slices;
  phantom["test_slices"] = c.phantom.test_slices;
  phantom["noise_sigma"] = c.phantom.noise_sigma;
  phantom["seed"] = c.phantom.seed;
  return {{"output_dir", c.output_dir},
          {"precision", c.precision == Precision::kFloat ? "float" : "double"},
          {"phantom", phantom},
          {"scheme",
           {{"directions", c.scheme.directions},
            {"bval", c.scheme.bval},
            {"seed", c.scheme.seed},
            {"input_directions", c.scheme.input_directions}}},
          {"model", model_json(c.model)},
          {"train", diffusion::to_json(c.train)},
          {"sampler", sampler::to_json(c.sampler)},
          {"grid", {{"oc", c.grid.oc}, {"scc", c.grid.scc}, {"slices", c.grid.slices}}}};
}

ExperimentConfig experiment_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const ExperimentConfig defaults;
  check_keys(j, to_json(defaults), "");

  ExperimentConfig c;
  c.output_dir = field(j, "output_dir", c.output_dir, "");
  const auto precision = field(j, "precision", std::string("float"), "");
  if (precision != "float" && precision != "double") {
    throw ConfigError("config field 'precision' must be \"float\" or \"double\"");
  }
  c.precision = precision == "float" ? Precision::kFloat : Precision::kDouble;

  const json empty = json::object();
  const auto& p = j.contains("phantom") ? j.at("phantom") : empty;
  auto& s = c.phantom.slice;
  s.height = field(p, "height", s.height, "phantom");
  s.width = field(p, "width", s.width, "phantom");
  s.axial = field(p, "axial", s.axial, "phantom");
  s.radial = field(p, "radial", s.radial, "phantom");
  s.csf_diffusivity = field(p, "csf_diffusivity", s.csf_diffusivity, "phantom");
  s.min_crossing_deg = field(p, "min_crossing_deg", s.min_crossing_deg, "phantom");
  s.max_crossing_deg = field(p, "max_crossing_deg", s.max_crossing_deg, "phantom");
  s.max_csf_fraction = field(p, "max_csf_fraction", s.max_csf_fraction, "phantom");
  s.max_second_fraction = field(p, "max_second_fraction", s.max_second_fraction, "phantom");
  c.phantom.train_slices = field(p, "train_slices", c.phantom.train_slices, "phantom");
  c.phantom.val_slices = field(p, "val_slices", c.phantom.val_slices, "phantom");
  c.phantom.test_slices = field(p, "test_slices", c.phantom.test_slices, "phantom");
  c.phantom.noise_sigma = field(p, "noise_sigma", c.phantom.noise_sigma, "phantom");
  c.phantom.seed = field(p, "seed", c.phantom.seed, "phantom");

  const auto& sc = j.contains("scheme") ? j.at("scheme") : empty;
  c.scheme.directions = field(sc, "directions", c.scheme.directions, "scheme");
  c.scheme.bval = field(sc, "bval", c.scheme.bval, "scheme");
  c.scheme.seed = field(sc, "seed", c.scheme.seed, "scheme");
  c.scheme.input_directions = field(sc, "input_directions", c.scheme.input_directions, "scheme");

  auto m = j.contains("model") ? j.at("model") : empty;
  m["height"] = s.height;
  m["width"] = s.width;
  c.model = model::model_config_from_json(m);
  if (j.contains("train")) c.train = diffusion::train_config_from_json(j.at("train"));
  if (j.contains("sampler")) c.sampler = sampler::sampler_config_from_json(j.at("sampler"));

  const auto& g = j.contains("grid") ? j.at("grid") : empty;
  c.grid.oc = field(g, "oc", c.grid.oc, "grid");
  c.grid.scc = field(g, "scc", c.grid.scc, "grid");
  c.grid.slices = field(g, "slices", c.grid.slices, "grid");

  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form a.b=value");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::string config_hash(const ExperimentConfig& c) {
  const auto text = to_json(c).dump();
  return io::sha256_hex(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

GradientTable target_table(const SchemeSettings& s) { return phantom::make_shell(s.directions, s.bval, s.seed); }

void write_dwi(const fs::path& path, const std::vector<DwiVolume>& slices, const std::string& kind) {
  if (slices.empty()) throw InvalidArgument("no slices to write to " + path.string());
  auto file = io::pack_slices(slices);
  const auto& table = slices.front().table;
  json vecs = json::array();
  for (const auto& v : table.bvecs) vecs.push_back({v.x(), v.y(), v.z()});
  file.extra["kind"] = kind;
  file.extra["bvals"] = table.bvals;
  file.extra["bvecs"] = vecs;
  io::write_volume(path, file);
}

std::vector<DwiVolume> read_dwi(const fs::path& path) {
  require_file(path, "volume");
  const auto file = io::read_volume(path);
  if (!file.extra.contains("bvals") || !file.extra.contains("bvecs")) {
    throw IoError(path.string() + ": sidecar carries no gradient table");
  }
  GradientTable table;
  try {
    table.bvals = file.extra.at("bvals").get<std::vector<double>>();
    for (const auto& v : file.extra.at("bvecs")) {
      const auto c = v.get<std::vector<double>>();
      if (c.size() != 3) throw IoError(path.string() + ": bvec without three components");
      table.bvecs.emplace_back(c[0], c[1], c[2]);
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed gradient table: " + e.what());
  }
  table.validate();
  return io::unpack_slices(file, table);
}

void require_file(const fs::path& path, const std::string& what) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw IoError(what + " not found: " + path.string());
}

json file_entry(const fs::path& path, const fs::path& relative_to) {
  const auto shown = relative_to.empty() ? path : fs::relative(path, relative_to);
  json e = {{"path", shown.generic_string()}, {"sha256", io::sha256_file(path)}};
  const auto side = io::sidecar_path(path);
  std::error_code ec;
  if (fs::is_regular_file(side, ec)) e["sidecar_sha256"] = io::sha256_file(side);
  return e;
}

}  // namespace qsr::cli
