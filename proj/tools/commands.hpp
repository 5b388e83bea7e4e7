#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "experiment.hpp"

namespace qsr::cli {

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitNumeric = 3, kExitIo = 4 };

/// Exit code for the exception in flight.
int exit_code_for(const std::exception& e);

struct Invocation {
  std::vector<std::string> argv;  // recorded verbatim in provenance
  std::ostream* log = nullptr;    // progress messages; may be null
};

/// Writes train/val/test DWI slices and tensor fields, bvals/bvecs and manifest.json.
nlohmann::json cmd_phantom(const ExperimentConfig& c, const fs::path& out, const Invocation& inv = {});

struct TrainArgs {
  fs::path data;  // dataset directory
  fs::path out;
  std::optional<fs::path> resume;
  /// Stop after this iteration; the mask-ratio ramp still spans train.iterations.
  std::optional<std::size_t> stop_at;
};

void cmd_train(const ExperimentConfig& c, const TrainArgs& args, const Invocation& inv = {});

/// Keeps `scheme.input_directions` directions of every slice in `input`.
void cmd_downsample(const ExperimentConfig& c, const fs::path& input, const fs::path& out, const Invocation& inv = {});

struct SuperResolveArgs {
  fs::path checkpoint;
  fs::path input;      // low-resolution volume
  fs::path table_dir;  // holds bvals/bvecs of the target table
  fs::path out;
};

void cmd_super_resolve(const ExperimentConfig& c, const SuperResolveArgs& args, const Invocation& inv = {});

struct EvalArgs {
  fs::path truth;
  fs::path recon;
  fs::path out;
  /// When set, only directions absent from this volume's table are scored.
  std::optional<fs::path> exclude_observed;
};

nlohmann::json cmd_eval(const EvalArgs& args, const Invocation& inv = {});

struct GridArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
};

nlohmann::json cmd_gridsearch(const ExperimentConfig& c, const GridArgs& args, const Invocation& inv = {});

/// Index into `target` of every entry of `input`. Antipodal vectors match.
/// Throws InvalidArgument when an entry has no counterpart or two entries share one.
std::vector<std::size_t> match_directions(const GradientTable& input, const GradientTable& target);

}  // namespace qsr::cli
