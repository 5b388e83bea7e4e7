#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "qsr/archive.hpp"
#include "qsr/error.hpp"
#include "qsr/io.hpp"
#include "qsr/metrics.hpp"
#include "qsr/rng.hpp"

namespace qsr::cli {

namespace {

using nlohmann::json;

constexpr const char* kToolVersion = "qsr 0.1.0";
constexpr std::size_t kTensorSlots = 3;
constexpr std::size_t kTensorFields = 7;  // fraction, xx, yy, zz, xy, xz, yz

void say(const Invocation& inv, const std::string& msg) {
  if (inv.log) *inv.log << msg << '\n' << std::flush;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_provenance(const fs::path& dir, const std::string& command, const Invocation& inv,
                      const ExperimentConfig* config, const json& inputs, const json& outputs, const json& seeds) {
  json p;
  p["tool"] = kToolVersion;
  p["command"] = command;
  p["argv"] = inv.argv;
  if (config) {
    p["config"] = to_json(*config);
    p["config_sha256"] = config_hash(*config);
  }
  p["inputs"] = inputs;
  p["outputs"] = outputs;
  p["seeds"] = seeds;
  io::write_json(dir / "provenance.json", p);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

bool same_table(const GradientTable& a, const GradientTable& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.bvals[i] != b.bvals[i] || a.bvecs[i] != b.bvecs[i]) return false;
  }
  return true;
}

void check_dataset_geometry(const ExperimentConfig& c, const std::vector<DwiVolume>& slices, const fs::path& from) {
  if (slices.empty()) throw IoError(from.string() + " holds no slices");
  const auto& s = slices.front();
  if (s.height != c.phantom.slice.height || s.width != c.phantom.slice.width) {
    throw ConfigError(from.string() + " holds " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                      " slices but the config expects " + std::to_string(c.phantom.slice.height) + "x" +
                      std::to_string(c.phantom.slice.width));
  }
}

// Rows of a CSV log whose leading integer is at most `limit`.
std::string kept_rows(const fs::path& path, std::size_t limit, std::vector<std::string>* rows_out = nullptr) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) return {};
  std::istringstream in(io::read_text(path));
  std::string line, kept;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    std::size_t iter = 0;
    try {
      iter = std::stoull(line.substr(0, comma));
    } catch (const std::exception&) {
      throw IoError(path.string() + ": malformed row '" + line + "'");
    }
    if (iter > limit) continue;
    kept += line + "\n";
    if (rows_out) rows_out->push_back(line);
  }
  return kept;
}

// Fields of the stored training config that differ from `now`, ignoring the iteration budget.
std::vector<std::string> train_config_diff(const json& stored, const json& now) {
  std::vector<std::string> out;
  for (const auto& [key, value] : now.items()) {
    if (key == "iterations") continue;
    if (!stored.contains(key) || stored.at(key) != value) out.push_back(key);
  }
  return out;
}

std::string precision_of(const TensorArchive& archive) {
  return archive.metadata().value("precision", std::string("float64"));
}

template <typename T>
void run_train(const ExperimentConfig& c, const TrainArgs& args, const std::vector<DwiVolume>& train_set,
               const std::vector<DwiVolume>& val_set, const Invocation& inv) {
  diffusion::TrainState<T> state(c.model, c.train.optimizer);
  const auto loss_path = args.out / "loss.csv";
  const auto val_path = args.out / "val.csv";
  const auto best_path = args.out / "checkpoint_best.qsr";
  const auto final_path = args.out / "checkpoint_final.qsr";

  json inputs = {{"train", file_entry(args.data / "train.vol")}, {"val", file_entry(args.data / "val.vol")}};
  if (args.resume) {
    require_file(*args.resume, "checkpoint");
    inputs["resume"] = file_entry(*args.resume);
  }

  std::string loss_text = diffusion::loss_log_header();
  std::string val_text = "iter,val_loss\n";
  double best = std::numeric_limits<double>::infinity();

  if (args.resume) {
    const auto archive = TensorArchive::load(*args.resume);
    const auto stored_model = diffusion::checkpoint_model_config(archive);
    if (model::to_json(stored_model) != model::to_json(c.model)) {
      throw ConfigError("resume: checkpoint model config differs from the config");
    }
    if (archive.metadata().contains("train_config")) {
      const auto diff = train_config_diff(archive.metadata().at("train_config"), diffusion::to_json(c.train));
      if (!diff.empty()) throw ConfigError("resume: config field 'train." + diff.front() + "' differs from the checkpoint");
    }
    diffusion::restore_checkpoint(state, archive);
    if (state.iteration > c.train.iterations) {
      throw ConfigError("resume: checkpoint is at iteration " + std::to_string(state.iteration) +
                        ", beyond 'train.iterations' = " + std::to_string(c.train.iterations));
    }
    loss_text += kept_rows(loss_path, state.iteration);
    std::vector<std::string> val_rows;
    val_text += kept_rows(val_path, state.iteration, &val_rows);
    for (const auto& row : val_rows) best = std::min(best, std::stod(row.substr(row.find(',') + 1)));
    say(inv, "resuming at iteration " + std::to_string(state.iteration));
  }

  io::write_text(loss_path, loss_text);
  io::write_text(val_path, val_text);
  std::ofstream loss_log(loss_path, std::ios::app);
  std::ofstream val_log(val_path, std::ios::app);
  std::ofstream run_log(args.out / "run.log", std::ios::app);
  if (!loss_log || !val_log || !run_log) throw IoError("cannot append to the logs in " + args.out.string());
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  diffusion::TrainCallbacks callbacks;
  callbacks.on_step = [&](const diffusion::StepRecord& r) {
    loss_log << diffusion::loss_log_row(r) << std::flush;
    if (r.iter % 50 == 0 || r.iter == c.train.iterations || r.iter == args.stop_at) {
      std::ostringstream os;
      os << "iter " << r.iter << " loss " << r.loss << " elapsed " << elapsed() << "s";
      run_log << os.str() << '\n' << std::flush;
      say(inv, os.str());
    }
  };
  callbacks.on_validation = [&](std::size_t iter, double v) {
    val_log << iter << ',' << format_double(v) << '\n' << std::flush;
    if (v < best) {
      best = v;
      diffusion::save_checkpoint(state, c.train, best_path);
    }
    say(inv, "iter " + std::to_string(iter) + " validation " + format_double(v));
  };

  try {
    diffusion::train(state, c.train, train_set, val_set, callbacks, args.stop_at.value_or(0));
  } catch (const NumericError& e) {
    io::write_text(args.out / "failure.json", e.what());
    throw;
  }
  diffusion::save_checkpoint(state, c.train, final_path);
  loss_log.close();
  val_log.close();

  json outputs = json::array();
  for (const auto& p : {final_path, best_path, loss_path, val_path}) {
    std::error_code ec;
    if (fs::is_regular_file(p, ec)) outputs.push_back(file_entry(p, args.out));
  }
  write_provenance(args.out, "train", inv, &c, inputs, outputs,
                   {{"model", c.model.seed}, {"train", c.train.seed}});
}

template <typename T>
void run_super_resolve(const ExperimentConfig& c, const SuperResolveArgs& args, const TensorArchive& archive,
                       const Invocation& inv) {
  const auto mc = diffusion::checkpoint_model_config(archive);
  model::DiffusionTransformer<T> net(mc);
  net.load(archive);
  const auto train_config = archive.metadata().contains("train_config")
                                ? diffusion::train_config_from_json(archive.metadata().at("train_config"))
                                : c.train;
  const auto schedule = train_config.schedule();
  if (c.sampler.steps > schedule.steps) {
    throw ConfigError("config field 'sampler.steps' exceeds the checkpoint's diffusion steps");
  }

  const auto target = io::read_fsl_table(args.table_dir / "bvals", args.table_dir / "bvecs");
  const auto lar = read_dwi(args.input);
  const auto index = match_directions(lar.front().table, target);
  if (index.size() >= target.size()) {
    throw InvalidArgument("mask/table mismatch: the input already holds every target direction");
  }
  if (lar.front().height != mc.height || lar.front().width != mc.width) {
    throw InvalidArgument("input slices are " + std::to_string(lar.front().height) + "x" +
                          std::to_string(lar.front().width) + " but the model expects " + std::to_string(mc.height) +
                          "x" + std::to_string(mc.width));
  }
  AngularMask mask = AngularMask::all_masked(target.size());
  for (auto i : index) mask.observed[i] = 1;

  std::vector<DwiVolume> observed;
  observed.reserve(lar.size());
  for (const auto& slice : lar) {
    DwiVolume v(slice.height, slice.width, target);
    for (std::size_t p = 0; p < slice.voxels(); ++p) {
      for (std::size_t j = 0; j < slice.dirs; ++j) v.data[p * v.dirs + index[j]] = slice.data[p * slice.dirs + j];
    }
    observed.push_back(std::move(v));
  }

  say(inv, "super-resolving " + std::to_string(observed.size()) + " slices, " + std::to_string(index.size()) + " -> " +
               std::to_string(target.size()) + " directions");
  const auto result = sampler::sample(net, std::span<const DwiVolume>(observed), mask, schedule, c.sampler);

  const auto har_path = args.out / "har.vol";
  write_dwi(har_path, result.volumes);
  std::string trace = "slice," + sampler::SamplerTrace{}.to_csv();
  for (std::size_t s = 0; s < result.traces.size(); ++s) {
    std::istringstream rows(result.traces[s].to_csv());
    std::string line;
    std::getline(rows, line);
    while (std::getline(rows, line)) trace += std::to_string(s) + "," + line + "\n";
  }
  const auto trace_path = args.out / "trace.csv";
  io::write_text(trace_path, trace);

  json outputs = json::array({file_entry(har_path, args.out), file_entry(trace_path, args.out)});
  json inputs = {{"checkpoint", file_entry(args.checkpoint)},
                 {"input", file_entry(args.input)},
                 {"bvals", file_entry(args.table_dir / "bvals")},
                 {"bvecs", file_entry(args.table_dir / "bvecs")}};
  write_provenance(args.out, "super-resolve", inv, &c, inputs, outputs,
                   {{"sampler", c.sampler.seed},
                    {"lambda_oc", c.sampler.weights.oc},
                    {"lambda_scc", c.sampler.weights.scc}});
}

template <typename T>
json run_gridsearch(const ExperimentConfig& c, const GridArgs& args, const TensorArchive& archive,
                    const Invocation& inv) {
  const auto mc = diffusion::checkpoint_model_config(archive);
  model::DiffusionTransformer<T> net(mc);
  net.load(archive);
  const auto train_config = archive.metadata().contains("train_config")
                                ? diffusion::train_config_from_json(archive.metadata().at("train_config"))
                                : c.train;
  auto val = read_dwi(args.data / "val.vol");
  check_dataset_geometry(c, val, args.data / "val.vol");
  if (val.size() > c.grid.slices) val.resize(c.grid.slices);
  const auto mask = phantom::subsample_directions(val.front().table, c.scheme.input_directions);

  say(inv, "grid search over " + std::to_string(c.grid.oc.size() * c.grid.scc.size()) + " weight pairs on " +
               std::to_string(val.size()) + " slices");
  const auto result = sampler::grid_search_weights(net, std::span<const DwiVolume>(val), mask, train_config.schedule(),
                                                   c.sampler, c.grid.oc, c.grid.scc);

  std::string csv = "lambda_oc,lambda_scc,masked_psnr\n";
  json points = json::array();
  for (const auto& p : result.points) {
    csv += format_double(p.weights.oc) + "," + format_double(p.weights.scc) + "," + format_double(p.psnr) + "\n";
    points.push_back({{"lambda_oc", p.weights.oc}, {"lambda_scc", p.weights.scc}, {"masked_psnr", metrics::psnr_json(p.psnr)}});
  }
  json report = {{"best", {{"lambda_oc", result.best.oc}, {"lambda_scc", result.best.scc}}}, {"points", points}};
  auto selected = c;
  selected.sampler.weights = result.best;
  io::write_text(args.out / "gridsearch.csv", csv);
  io::write_json(args.out / "gridsearch.json", report);
  io::write_json(args.out / "selected_config.json", to_json(selected));

  json outputs = json::array();
  for (const char* name : {"gridsearch.csv", "gridsearch.json", "selected_config.json"}) {
    outputs.push_back(file_entry(args.out / name, args.out));
  }
  write_provenance(args.out, "gridsearch", inv, &c,
                   {{"checkpoint", file_entry(args.checkpoint)}, {"val", file_entry(args.data / "val.vol")}}, outputs,
                   {{"sampler", c.sampler.seed}});
  return report;
}

TensorArchive load_checkpoint(const ExperimentConfig& c, const fs::path& path) {
  require_file(path, "checkpoint");
  auto archive = TensorArchive::load(path);
  const auto mc = diffusion::checkpoint_model_config(archive);
  if (model::to_json(mc) != model::to_json(c.model)) {
    throw ConfigError("checkpoint " + path.string() + " was trained with a different model config");
  }
  return archive;
}

struct MapScore {
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
};

json map_json(const MapScore& m) {
  return {{"psnr", metrics::psnr_json(m.psnr)}, {"ssim", m.ssim}, {"mae", m.mae}};
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::kInvalidArgument:
      case ErrorKind::kConfig:
        return kExitConfig;
      case ErrorKind::kNumeric:
        return kExitNumeric;
      case ErrorKind::kIo:
        return kExitIo;
    }
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return kExitIo;
  return kExitFailure;
}

std::vector<std::size_t> match_directions(const GradientTable& input, const GradientTable& target) {
  std::vector<std::size_t> index(input.size());
  std::vector<bool> used(target.size(), false);
  for (std::size_t j = 0; j < input.size(); ++j) {
    bool found = false;
    for (std::size_t i = 0; i < target.size() && !found; ++i) {
      const double scale = std::max(1.0, std::abs(target.bvals[i]));
      if (std::abs(target.bvals[i] - input.bvals[j]) > 1e-6 * scale) continue;
      if (target.bvals[i] > 0.0 && std::abs(target.bvecs[i].dot(input.bvecs[j])) < 1.0 - 1e-9) continue;
      if (used[i]) {
        throw InvalidArgument("mask/table mismatch: input directions share target direction " + std::to_string(i));
      }
      used[i] = true;
      index[j] = i;
      found = true;
    }
    if (!found) {
      std::ostringstream os;
      os << "mask/table mismatch: input direction " << j << " (b=" << input.bvals[j] << ", g=["
         << input.bvecs[j].transpose() << "]) is not in the target table";
      throw InvalidArgument(os.str());
    }
  }
  return index;
}

json cmd_phantom(const ExperimentConfig& c, const fs::path& out, const Invocation& inv) {
  c.validate();
  make_dir(out);
  const auto table = target_table(c.scheme);
  io::write_fsl_table(out / "bvals", out / "bvecs", table);

  struct Split {
    const char* name;
    std::size_t count;
  };
  const Split splits[] = {{"train", c.phantom.train_slices}, {"val", c.phantom.val_slices}, {"test", c.phantom.test_slices}};
  const auto& spec = c.phantom.slice;

  json files = json::array();
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& split = splits[s];
    say(inv, std::string("writing ") + split.name + " split (" + std::to_string(split.count) + " slices)");
    std::vector<DwiVolume> slices;
    slices.reserve(split.count);
    io::VolumeFile tensors;
    tensors.dims = {split.count, spec.height, spec.width, kTensorSlots, kTensorFields};
    tensors.data.assign(split.count * spec.height * spec.width * kTensorSlots * kTensorFields, 0.0f);
    tensors.b0_normalized = false;
    tensors.extra = {{"kind", "tensor_field"},
                     {"fields", {"fraction", "xx", "yy", "zz", "xy", "xz", "yz"}},
                     {"units", "mm^2/s"}};
    for (std::size_t i = 0; i < split.count; ++i) {
      const auto models = phantom::generate_slice_models(spec, derive_seed(c.phantom.seed, s, i));
      auto volume = phantom::simulate_multitensor(models, spec.height, spec.width, table);
      if (c.phantom.noise_sigma > 0.0) {
        volume = phantom::add_rician_noise(volume, c.phantom.noise_sigma, derive_seed(c.phantom.seed, 16 + s, i));
      }
      slices.push_back(std::move(volume));
      for (std::size_t v = 0; v < models.size(); ++v) {
        if (models[v].size() > kTensorSlots) throw InvalidArgument("voxel with more than three compartments");
        for (std::size_t k = 0; k < models[v].size(); ++k) {
          const auto& comp = models[v][k];
          const auto& d = comp.diffusivity;
          const double row[kTensorFields] = {comp.fraction, d(0, 0), d(1, 1), d(2, 2), d(0, 1), d(0, 2), d(1, 2)};
          float* dst = tensors.data.data() + ((i * models.size() + v) * kTensorSlots + k) * kTensorFields;
          for (std::size_t f = 0; f < kTensorFields; ++f) dst[f] = static_cast<float>(row[f]);
        }
      }
    }
    const auto dwi_path = out / (std::string(split.name) + ".vol");
    const auto tensor_path = out / (std::string(split.name) + "_tensors.vol");
    write_dwi(dwi_path, slices);
    io::write_volume(tensor_path, tensors);
    auto dwi_entry = file_entry(dwi_path, out);
    dwi_entry["split"] = split.name;
    dwi_entry["kind"] = "dwi";
    dwi_entry["slices"] = split.count;
    auto tensor_entry = file_entry(tensor_path, out);
    tensor_entry["split"] = split.name;
    tensor_entry["kind"] = "tensor_field";
    tensor_entry["slices"] = split.count;
    files.push_back(dwi_entry);
    files.push_back(tensor_entry);
  }

  json manifest = {{"files", files},
                   {"scheme", {{"bvals", file_entry(out / "bvals", out)}, {"bvecs", file_entry(out / "bvecs", out)}}},
                   {"height", spec.height},
                   {"width", spec.width},
                   {"directions", table.size()},
                   {"asr_scale", c.scheme.asr_scale()},
                   {"config_sha256", config_hash(c)}};
  io::write_json(out / "manifest.json", manifest);
  write_provenance(out, "phantom", inv, &c, json::object(), json::array({file_entry(out / "manifest.json", out)}),
                   {{"phantom", c.phantom.seed}, {"scheme", c.scheme.seed}});
  return manifest;
}

void cmd_train(const ExperimentConfig& c, const TrainArgs& args, const Invocation& inv) {
  c.validate();
  const auto train_set = read_dwi(args.data / "train.vol");
  const auto val_set = read_dwi(args.data / "val.vol");
  check_dataset_geometry(c, train_set, args.data / "train.vol");
  check_dataset_geometry(c, val_set, args.data / "val.vol");
  if (!same_table(train_set.front().table, val_set.front().table)) {
    throw InvalidArgument("train and val splits use different gradient tables");
  }
  make_dir(args.out);
  if (c.precision == Precision::kFloat) {
    run_train<float>(c, args, train_set, val_set, inv);
  } else {
    run_train<double>(c, args, train_set, val_set, inv);
  }
}

void cmd_downsample(const ExperimentConfig& c, const fs::path& input, const fs::path& out, const Invocation& inv) {
  c.validate();
  const auto slices = read_dwi(input);
  const auto& table = slices.front().table;
  if (c.scheme.input_directions >= table.weighted_indices().size()) {
    throw ConfigError("config field 'scheme.input_directions' must be below the input's " +
                      std::to_string(table.weighted_indices().size()) + " weighted directions");
  }
  const auto mask = phantom::subsample_directions(table, c.scheme.input_directions);
  const auto keep = mask.observed_indices();
  const auto sub = table.subset(keep);
  std::vector<DwiVolume> lar;
  lar.reserve(slices.size());
  for (const auto& s : slices) {
    DwiVolume v(s.height, s.width, sub);
    for (std::size_t p = 0; p < s.voxels(); ++p) {
      for (std::size_t j = 0; j < keep.size(); ++j) v.data[p * v.dirs + j] = s.data[p * s.dirs + keep[j]];
    }
    lar.push_back(std::move(v));
  }
  make_dir(out);
  const auto path = out / "lar.vol";
  write_dwi(path, lar);
  say(inv, "kept directions " + json(keep).dump());
  write_provenance(out, "downsample", inv, &c, {{"input", file_entry(input)}},
                   json::array({file_entry(path, out)}), json::object());
}

void cmd_super_resolve(const ExperimentConfig& c, const SuperResolveArgs& args, const Invocation& inv) {
  c.validate();
  require_file(args.input, "input volume");
  require_file(args.table_dir / "bvals", "target bvals");
  require_file(args.table_dir / "bvecs", "target bvecs");
  const auto archive = load_checkpoint(c, args.checkpoint);
  make_dir(args.out);
  if (precision_of(archive) == "float32") {
    run_super_resolve<float>(c, args, archive, inv);
  } else {
    run_super_resolve<double>(c, args, archive, inv);
  }
}

json cmd_eval(const EvalArgs& args, const Invocation& inv) {
  const auto truth = read_dwi(args.truth);
  const auto recon = read_dwi(args.recon);
  if (truth.size() != recon.size()) {
    throw InvalidArgument("shape mismatch: " + std::to_string(truth.size()) + " ground-truth slices vs " +
                          std::to_string(recon.size()) + " reconstructed");
  }
  const auto& t0 = truth.front();
  const auto& r0 = recon.front();
  if (t0.height != r0.height || t0.width != r0.width || t0.dirs != r0.dirs) {
    throw InvalidArgument("shape mismatch: ground truth is " + std::to_string(t0.height) + "x" +
                          std::to_string(t0.width) + "x" + std::to_string(t0.dirs) + ", reconstruction " +
                          std::to_string(r0.height) + "x" + std::to_string(r0.width) + "x" + std::to_string(r0.dirs));
  }
  if (!same_table(t0.table, r0.table)) throw InvalidArgument("shape mismatch: gradient tables differ");

  std::vector<std::size_t> directions;
  if (args.exclude_observed) {
    const auto lar = read_dwi(*args.exclude_observed);
    const auto index = match_directions(lar.front().table, t0.table);
    std::vector<bool> seen(t0.dirs, false);
    for (auto i : index) seen[i] = true;
    for (std::size_t n = 0; n < t0.dirs; ++n) {
      if (!seen[n]) directions.push_back(n);
    }
    if (directions.empty()) throw InvalidArgument("every direction is observed; nothing to score");
  } else {
    for (std::size_t n = 0; n < t0.dirs; ++n) directions.push_back(n);
  }

  std::vector<double> all_t, all_r, slice_ssim;
  json per_slice = json::array();
  MapScore fa_sum, md_sum, ad_sum;
  std::vector<double> fa_abs;
  std::size_t truth_flags = 0, recon_flags = 0;
  std::ostringstream csv;
  csv.precision(10);
  auto fmt = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    if (std::isnan(v)) return std::string("nan");
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
  };
  csv << "slice,psnr,ssim,pearson_r,fa_psnr,fa_ssim,fa_mae,md_psnr,md_ssim,ad_psnr,ad_ssim\n";

  const metrics::SsimOptions map_opts;
  auto score = [&](std::span<const double> a, std::span<const double> b) {
    MapScore m;
    m.psnr = metrics::psnr(a, b);
    m.ssim = metrics::ssim(a, b, t0.height, t0.width, map_opts);
    for (std::size_t i = 0; i < a.size(); ++i) m.mae += std::abs(a[i] - b[i]);
    m.mae /= static_cast<double>(a.size());
    return m;
  };

  for (std::size_t s = 0; s < truth.size(); ++s) {
    const auto rep = metrics::compare_volumes(truth[s], recon[s], directions);
    std::vector<double> st, sr;
    for (std::size_t p = 0; p < t0.voxels(); ++p) {
      for (auto n : directions) {
        st.push_back(truth[s].data[p * t0.dirs + n]);
        sr.push_back(recon[s].data[p * t0.dirs + n]);
      }
    }
    all_t.insert(all_t.end(), st.begin(), st.end());
    all_r.insert(all_r.end(), sr.begin(), sr.end());

    const auto mt = metrics::dti_scalars(metrics::fit_dti(truth[s]));
    const auto mr = metrics::dti_scalars(metrics::fit_dti(recon[s]));
    for (auto f : mt.flags) truth_flags += f != metrics::kDtiOk;
    for (auto f : mr.flags) recon_flags += f != metrics::kDtiOk;
    const auto fa = score(mt.fa, mr.fa);
    const auto md = score(metrics::normalize_range(mt.md), metrics::normalize_range(mr.md));
    const auto ad = score(metrics::normalize_range(mt.ad), metrics::normalize_range(mr.ad));
    for (std::size_t i = 0; i < mt.fa.size(); ++i) fa_abs.push_back(std::abs(mt.fa[i] - mr.fa[i]));
    const std::pair<MapScore*, const MapScore*> sums[] = {{&fa_sum, &fa}, {&md_sum, &md}, {&ad_sum, &ad}};
    for (const auto& [acc, m] : sums) {
      acc->psnr += m->psnr;
      acc->ssim += m->ssim;
      acc->mae += m->mae;
    }

    const double r = rep.pearson;
    slice_ssim.push_back(rep.ssim_summary.mean);
    auto js = metrics::to_json(rep);
    js["slice"] = s;
    js["dti"] = {{"fa", map_json(fa)}, {"md", map_json(md)}, {"ad", map_json(ad)}};
    per_slice.push_back(js);
    csv << s << ',' << fmt(rep.volume_psnr) << ',' << fmt(rep.ssim_summary.mean) << ',' << fmt(r) << ','
        << fmt(fa.psnr) << ',' << fmt(fa.ssim) << ',' << fmt(fa.mae) << ',' << fmt(md.psnr) << ',' << fmt(md.ssim)
        << ',' << fmt(ad.psnr) << ',' << fmt(ad.ssim) << '\n';
  }

  const double n = static_cast<double>(truth.size());
  for (auto* acc : {&fa_sum, &md_sum, &ad_sum}) {
    acc->psnr /= n;
    acc->ssim /= n;
    acc->mae /= n;
  }
  const double pooled_psnr = metrics::psnr(all_t, all_r);
  double pooled_r = std::numeric_limits<double>::quiet_NaN();
  try {
    pooled_r = metrics::pearson_r(all_t, all_r);
  } catch (const InvalidArgument&) {
  }
  const auto ssim_summary = metrics::summarize(slice_ssim);
  double fa_max = 0.0;
  for (double v : fa_abs) fa_max = std::max(fa_max, v);

  json report;
  report["truth"] = args.truth.generic_string();
  report["reconstruction"] = args.recon.generic_string();
  report["slices"] = truth.size();
  report["height"] = t0.height;
  report["width"] = t0.width;
  report["directions"] = directions;
  report["dwi"] = {{"psnr", metrics::psnr_json(pooled_psnr)},
                   {"ssim_mean", ssim_summary.mean},
                   {"ssim_std", ssim_summary.std},
                   {"pearson_r", std::isfinite(pooled_r) ? json(pooled_r) : json(nullptr)}};
  report["dti"] = {{"fa", map_json(fa_sum)},
                   {"md", map_json(md_sum)},
                   {"ad", map_json(ad_sum)},
                   {"fa_max_abs_error", fa_max},
                   {"flagged_voxels", {{"truth", truth_flags}, {"reconstruction", recon_flags}}}};
  report["per_slice"] = per_slice;
  csv << "all," << fmt(pooled_psnr) << ',' << fmt(ssim_summary.mean) << ',' << fmt(pooled_r) << ','
      << fmt(fa_sum.psnr) << ',' << fmt(fa_sum.ssim) << ',' << fmt(fa_sum.mae) << ',' << fmt(md_sum.psnr) << ','
      << fmt(md_sum.ssim) << ',' << fmt(ad_sum.psnr) << ',' << fmt(ad_sum.ssim) << '\n';

  make_dir(args.out);
  io::write_json(args.out / "report.json", report);
  io::write_text(args.out / "report.csv", csv.str());
  json inputs = {{"truth", file_entry(args.truth)}, {"reconstruction", file_entry(args.recon)}};
  if (args.exclude_observed) inputs["observed"] = file_entry(*args.exclude_observed);
  write_provenance(args.out, "eval", inv, nullptr, inputs,
                   json::array({file_entry(args.out / "report.json", args.out),
                                file_entry(args.out / "report.csv", args.out)}),
                   json::object());
  say(inv, "psnr " + fmt(pooled_psnr) + " ssim " + fmt(ssim_summary.mean) + " r " + fmt(pooled_r));
  return report;
}

json cmd_gridsearch(const ExperimentConfig& c, const GridArgs& args, const Invocation& inv) {
  c.validate();
  const auto archive = load_checkpoint(c, args.checkpoint);
  make_dir(args.out);
  if (precision_of(archive) == "float32") return run_gridsearch<float>(c, args, archive, inv);
  return run_gridsearch<double>(c, args, archive, inv);
}

}  // namespace qsr::cli
