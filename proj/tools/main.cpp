// qsr: phantom generation, training, super-resolution and evaluation.
//
//   qsr phantom       --config cfg.json
//   qsr train         --config cfg.json [--resume ckpt] [--stop-at N]
//   qsr downsample    --config cfg.json --input test.vol
//   qsr super-resolve --config cfg.json --input lar.vol [--checkpoint ckpt] [--no-guidance]
//   qsr eval          --truth test.vol --recon har.vol [--observed lar.vol]
//   qsr gridsearch    --config cfg.json [--checkpoint ckpt]
//
// Every command takes --set a.b=value overrides, --threads and --out.
// QSR_OUTPUT_ROOT prefixes a relative output_dir; QSR_THREADS sets the default thread count.

#include <omp.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"
#include "qsr/error.hpp"
#include "qsr/io.hpp"

namespace {

using namespace qsr;
using namespace qsr::cli;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  int threads = 0;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) {
    sub->add_option("--config", c.config, "experiment config JSON");
    sub->add_option("--set", c.overrides, "override a config field, e.g. --set train.iterations=10")
        ->allow_extra_args(false);
  }
  sub->add_option("--threads", c.threads, "worker threads (default: QSR_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "output directory");
}

ExperimentConfig load_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) {
    require_file(c.config, "config");
    j = nlohmann::json::parse(io::read_text(c.config), nullptr, false);
    if (j.is_discarded()) throw ConfigError(c.config + " is not valid JSON");
  }
  for (const auto& o : c.overrides) apply_override(j, o);
  return experiment_from_json(j);
}

fs::path run_root(const ExperimentConfig& c) {
  fs::path dir = c.output_dir;
  const char* root = std::getenv("QSR_OUTPUT_ROOT");
  if (root && *root && dir.is_relative()) dir = fs::path(root) / dir;
  return dir;
}

fs::path pick(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback : fs::path(given); }

void set_threads(int requested) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("QSR_THREADS"); env && *env) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("QSR_THREADS='") + env + "' is not an integer");
      }
      if (n <= 0) throw ConfigError("QSR_THREADS must be positive");
    } else {
      n = omp_get_num_procs();
    }
  }
  omp_set_num_threads(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Angular super-resolution of diffusion MRI with a guided diffusion transformer"};
  app.require_subcommand(1);

  Common phantom_opts, train_opts, down_opts, sr_opts, eval_opts, grid_opts;
  std::string resume, input, checkpoint, table_dir, data, truth, recon, observed;
  bool no_guidance = false;

  auto* phantom_cmd = app.add_subcommand("phantom", "write train/val/test phantom splits");
  add_common(phantom_cmd, phantom_opts);

  auto* train_cmd = app.add_subcommand("train", "train the denoising network");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--data", data, "dataset directory (default <output_dir>/dataset)");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  std::size_t stop_at = 0;
  train_cmd->add_option("--stop-at", stop_at, "stop after this iteration (checkpoint and resume later)");

  auto* down_cmd = app.add_subcommand("downsample", "keep scheme.input_directions directions of a volume");
  add_common(down_cmd, down_opts);
  down_cmd->add_option("--input", input, "volume to subsample")->required();

  auto* sr_cmd = app.add_subcommand("super-resolve", "reconstruct the full direction set from a subsampled volume");
  add_common(sr_cmd, sr_opts);
  sr_cmd->add_option("--input", input, "low-resolution volume")->required();
  sr_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (default <output_dir>/train/checkpoint_final.qsr)");
  sr_cmd->add_option("--table", table_dir, "directory with the target bvals/bvecs (default <output_dir>/dataset)");
  sr_cmd->add_flag("--no-guidance", no_guidance, "set both guidance weights to zero");

  auto* eval_cmd = app.add_subcommand("eval", "compare a reconstruction with ground truth");
  add_common(eval_cmd, eval_opts, false);
  eval_cmd->add_option("--truth", truth, "ground-truth volume")->required();
  eval_cmd->add_option("--recon", recon, "reconstructed volume")->required();
  eval_cmd->add_option("--observed", observed, "score only directions missing from this volume");

  auto* grid_cmd = app.add_subcommand("gridsearch", "pick guidance weights on the validation split");
  add_common(grid_cmd, grid_opts);
  grid_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (default <output_dir>/train/checkpoint_final.qsr)");
  grid_cmd->add_option("--data", data, "dataset directory (default <output_dir>/dataset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  Invocation inv;
  inv.argv.assign(argv + 1, argv + argc);
  inv.log = &std::cerr;

  try {
    if (*phantom_cmd) {
      set_threads(phantom_opts.threads);
      const auto c = load_config(phantom_opts);
      cmd_phantom(c, pick(phantom_opts.out, run_root(c) / "dataset"), inv);
    } else if (*train_cmd) {
      set_threads(train_opts.threads);
      const auto c = load_config(train_opts);
      TrainArgs args{pick(data, run_root(c) / "dataset"), pick(train_opts.out, run_root(c) / "train"), std::nullopt, std::nullopt};
      if (!resume.empty()) args.resume = resume;
      if (stop_at > 0) args.stop_at = stop_at;
      cmd_train(c, args, inv);
    } else if (*down_cmd) {
      set_threads(down_opts.threads);
      const auto c = load_config(down_opts);
      cmd_downsample(c, input, pick(down_opts.out, run_root(c) / "lar"), inv);
    } else if (*sr_cmd) {
      set_threads(sr_opts.threads);
      if (no_guidance) {
        sr_opts.overrides.push_back("sampler.lambda_oc=0");
        sr_opts.overrides.push_back("sampler.lambda_scc=0");
      }
      const auto c = load_config(sr_opts);
      SuperResolveArgs args{pick(checkpoint, run_root(c) / "train" / "checkpoint_final.qsr"), input,
                            pick(table_dir, run_root(c) / "dataset"), pick(sr_opts.out, run_root(c) / "super_resolve")};
      cmd_super_resolve(c, args, inv);
    } else if (*eval_cmd) {
      set_threads(eval_opts.threads);
      const char* root = std::getenv("QSR_OUTPUT_ROOT");
      EvalArgs args{truth, recon, pick(eval_opts.out, fs::path(root ? root : "") / "eval"), std::nullopt};
      if (!observed.empty()) args.exclude_observed = observed;
      cmd_eval(args, inv);
    } else if (*grid_cmd) {
      set_threads(grid_opts.threads);
      const auto c = load_config(grid_opts);
      GridArgs args{pick(checkpoint, run_root(c) / "train" / "checkpoint_final.qsr"), pick(data, run_root(c) / "dataset"),
                    pick(grid_opts.out, run_root(c) / "gridsearch")};
      cmd_gridsearch(c, args, inv);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}
