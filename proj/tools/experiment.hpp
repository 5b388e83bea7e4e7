#pragma once

// Experiment configuration shared by every subcommand, plus the small file
// helpers the commands have in common.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/diffusion.hpp"
#include "qsr/dwi.hpp"
#include "qsr/model.hpp"
#include "qsr/phantom.hpp"
#include "qsr/sampler.hpp"

namespace qsr::cli {

namespace fs = std::filesystem;

struct PhantomSettings {
  phantom::SliceSpec slice;
  std::size_t train_slices = 128;
  std::size_t val_slices = 8;
  std::size_t test_slices = 16;
  /// Rician noise level; 0 writes noiseless signal.
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
};

struct SchemeSettings {
  std::size_t directions = 60;
  double bval = 1000.0;
  std::uint64_t seed = 1;
  /// Observed directions of the low-resolution input.
  std::size_t input_directions = 6;

  /// r = N_target / N_in
  double asr_scale() const { return static_cast<double>(directions) / static_cast<double>(input_directions); }
};

struct GridSettings {
  std::vector<double> oc = sampler::default_weight_grid();
  std::vector<double> scc = sampler::default_weight_grid();
  /// Leading validation slices scored per grid point.
  std::size_t slices = 8;
};

enum class Precision { kFloat, kDouble };

struct ExperimentConfig {
  std::string output_dir = "runs/default";
  Precision precision = Precision::kFloat;
  PhantomSettings phantom;
  SchemeSettings scheme;
  /// height and width always follow the phantom slice size.
  model::ModelConfig model;
  diffusion::TrainConfig train;
  sampler::SamplerConfig sampler;
  GridSettings grid;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Unknown keys at any level are rejected with their dotted path.
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Applies `a.b.c=value`. The value is parsed as JSON when it parses, and
/// taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// SHA-256 of the canonical serialization.
std::string config_hash(const ExperimentConfig& c);

GradientTable target_table(const SchemeSettings& s);

/// Slices with the gradient table carried in the sidecar.
void write_dwi(const fs::path& path, const std::vector<DwiVolume>& slices, const std::string& kind = "dwi");
std::vector<DwiVolume> read_dwi(const fs::path& path);

/// Fails with IoError when a launch input is missing.
void require_file(const fs::path& path, const std::string& what);

/// { "path": ..., "sha256": ... } for a file, plus the sidecar when one exists.
nlohmann::json file_entry(const fs::path& path, const fs::path& relative_to = {});

}  // namespace qsr::cli
