#pragma once

// Forward noising process, angular masking and the masked-denoising
// pretraining loop.
//
// Timesteps run 1..T. Index 0 of every schedule array is the clean state
// (beta 0, alpha_bar 1).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/archive.hpp"
#include "qsr/dwi.hpp"
#include "qsr/model.hpp"
#include "qsr/tensor.hpp"

namespace qsr::diffusion {

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       // [T+1]
  std::vector<double> alpha;      // [T+1]
  std::vector<double> alpha_bar;  // [T+1]

  /// Throws InvalidArgument unless 1 <= t <= steps.
  void check(int t) const;
};

/// Linear beta from beta_min to beta_max over `steps`.
NoiseSchedule make_schedule(int steps, double beta_min, double beta_max);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
template <typename T>
std::vector<T> forward_diffuse(std::span<const T> x0, int t, std::span<const T> noise, const NoiseSchedule& schedule);

/// round(k * n), rejected unless it lies in [1, n-1].
std::size_t masked_count(double k, std::size_t n);
/// Uniformly random subset of round(k*n) whole directions marked missing.
AngularMask sample_mask(double k, std::size_t n, std::uint64_t seed);

/// Linear ramp from k_min at iter 0 to k_max at iter == total.
double mask_ratio_schedule(std::size_t iter, std::size_t total, double k_min = 0.5, double k_max = 0.94);

/// M*x0 + (1-M)*x_t for volumes laid out [..., N] (direction innermost).
template <typename T>
std::vector<T> build_masked_input(std::span<const T> x0, std::span<const T> x_t, const AngularMask& mask);

/// Mean of (pred - target)^2 over entries where `observed` is 0. All [B,H,W,N].
template <typename T>
ad::Tensor<T> masked_mse(const ad::Tensor<T>& pred, const ad::Tensor<T>& target, const ad::Tensor<T>& observed);

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::size_t step_count() const noexcept { return steps_; }

  /// One update of every parameter that appears in `grads`.
  void step(std::map<std::string, ad::Tensor<T>>& params, const ad::GradientMap<T>& grads);

  void save(TensorArchive& archive, const std::string& prefix = "adam/") const;
  void load(const TensorArchive& archive, const std::string& prefix = "adam/");

 private:
  AdamWConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 2;
  int diffusion_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  double k_min = 0.5;
  double k_max = 0.94;
  AdamWConfig optimizer;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  std::size_t val_every = 200;
  std::size_t val_items = 8;
  /// Masked ratio used for validation draws.
  double val_mask_ratio = 0.9;

  void validate() const;
  NoiseSchedule schedule() const { return make_schedule(diffusion_steps, beta_min, beta_max); }
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Random draws of one step: per-item slice index, mask, timestep and noise.
struct StepDraws {
  std::vector<std::size_t> items;
  std::vector<AngularMask> masks;
  std::vector<int> timesteps;
  std::vector<double> noise;  // [B,H,W,N]
};

/// Everything is a function of (seed, stream); independent of call order.
StepDraws draw_step(std::uint64_t seed, std::uint64_t stream, std::size_t dataset_size, std::size_t batch,
                    std::size_t voxels, std::size_t dirs, double k, int max_t);

struct StepRecord {
  std::size_t iter = 0;  // 1-based index of the completed update
  double k = 0.0;
  double t_mean = 0.0;
  double loss = 0.0;
};

template <typename T>
struct TrainState {
  model::DiffusionTransformer<T> model;
  AdamW<T> optimizer;
  std::size_t iteration = 0;  // completed updates

  TrainState(model::ModelConfig mc, AdamWConfig oc) : model(std::move(mc)), optimizer(oc) {}
};

/// Masked denoising loss of a batch under fixed draws. Builds the graph.
template <typename T>
ad::Tensor<T> denoising_loss(const model::DiffusionTransformer<T>& model, std::span<const DwiVolume> data,
                             const StepDraws& draws, const NoiseSchedule& schedule);

/// One optimizer update. Draws come from (config.seed, state.iteration), so a
/// restored state continues the exact same trajectory. A non-finite loss throws
/// NumericError carrying a JSON snapshot of the draws.
template <typename T>
StepRecord train_step(TrainState<T>& state, const TrainConfig& config, std::span<const DwiVolume> data,
                      const NoiseSchedule& schedule);

/// Mean masked loss over `config.val_items` fixed draws.
template <typename T>
double validation_loss(const model::DiffusionTransformer<T>& model, const TrainConfig& config,
                       std::span<const DwiVolume> data, const NoiseSchedule& schedule);

/// Model, optimizer moments, iteration and configs in one archive.
template <typename T>
void save_checkpoint(const TrainState<T>& state, const TrainConfig& config, const std::filesystem::path& path);
template <typename T>
void restore_checkpoint(TrainState<T>& state, const TensorArchive& archive);
/// Model config stored in a checkpoint.
model::ModelConfig checkpoint_model_config(const TensorArchive& archive);

std::string loss_log_header();
std::string loss_log_row(const StepRecord& r);

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t iter, double val_loss)> on_validation;
};

/// Runs updates until state.iteration reaches `stop_at` (0 means config.iterations).
/// The mask-ratio ramp always spans config.iterations.
template <typename T>
std::vector<StepRecord> train(TrainState<T>& state, const TrainConfig& config, std::span<const DwiVolume> train_set,
                              std::span<const DwiVolume> val_set, const TrainCallbacks& callbacks = {},
                              std::size_t stop_at = 0);

/// Stacks slices into a [B,H,W,N] buffer in the given order.
template <typename T>
std::vector<T> stack_slices(std::span<const DwiVolume> data, std::span<const std::size_t> items);

}  // namespace qsr::diffusion
