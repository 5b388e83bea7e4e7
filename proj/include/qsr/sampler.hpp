#pragma once

// Guided reverse diffusion for angular super-resolution.
//
// Each step predicts the noise, takes the ancestral update, then subtracts the
// gradients of two spherical-harmonic losses on the denoised estimate:
//   OC : || Y F x_hat0 - x0t ||^2   x_hat0 = M x_obs + (1-M) x0t
//   SCC: || C_obs - F x_hat0 ||^2   C_obs fit once from the observed directions
// where F is the regularized fit over all directions and Y its basis. Observed
// directions are then overwritten with the measurement noised to the next level.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/diffusion.hpp"
#include "qsr/dwi.hpp"
#include "qsr/model.hpp"
#include "qsr/rng.hpp"
#include "qsr/sphere_sh.hpp"
#include "qsr/tensor.hpp"

namespace qsr::sampler {

struct GuidanceWeights {
  double oc = 0.0;
  double scc = 0.0;

  void validate() const;
  friend bool operator==(const GuidanceWeights&, const GuidanceWeights&) = default;
};

enum class Jacobian {
  kFull,  // reverse mode through the network
  kFast   // noise estimate held constant: d x0t / d x_t = I / sqrt(abar_t)
};

enum class TweedieForm {
  kStandard,  // (x_t - sqrt(1 - abar) eps) / sqrt(abar)
  kLiteral    // (x_t - beta / sqrt(1 - abar) eps) / sqrt(abar)
};

struct SamplerConfig {
  int steps = 100;
  GuidanceWeights weights;
  /// SH order of both fits; -1 picks the largest order the observed set supports.
  int sh_order = -1;
  double lambda_reg = sh::kDefaultLambdaReg;
  std::uint64_t seed = 0;
  Jacobian jacobian = Jacobian::kFull;
  TweedieForm tweedie = TweedieForm::kStandard;
  /// Multiply the x_t gradient by abar_t, which turns the weight into a step
  /// size on the denoised estimate. Off applies the raw gradient.
  bool scale_by_alpha_bar = true;
  /// Slices denoised together per network call.
  std::size_t batch = 4;

  void validate() const;
};

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// Uniform-stride subset round(i T / S), i = 1..S, ascending.
std::vector<int> respace(int diffusion_steps, int steps);

/// Coefficients of one respaced transition t -> t_prev.
struct StepCoefficients {
  int t = 0;
  int t_prev = 0;
  double alpha_bar = 1.0;
  double alpha_bar_prev = 1.0;
  double beta = 0.0;   // 1 - abar / abar_prev
  double sigma = 0.0;  // posterior standard deviation; 0 on the last step
};

/// Transitions from the largest timestep down, one per respaced step.
std::vector<StepCoefficients> step_coefficients(const diffusion::NoiseSchedule& schedule, int steps);

template <typename T>
std::vector<T> tweedie_denoise(std::span<const T> x_t, std::span<const T> eps, int t,
                               const diffusion::NoiseSchedule& schedule, TweedieForm form = TweedieForm::kStandard);

/// M x_obs + (1-M) x0t over [B,H,W,N] tensors; `observed` is the mask volume.
template <typename T>
ad::Tensor<T> hybrid_fuse(const ad::Tensor<T>& x_obs, const ad::Tensor<T>& x0t, const ad::Tensor<T>& observed);

/// Dense SH operators of one (table, mask, order) triple.
struct ShGuidance {
  int order = 0;
  std::size_t dirs = 0;
  std::size_t coeffs = 0;
  std::vector<double> projection;  // [N, N], Y F over all directions
  std::vector<double> fit_full;    // [C, N]
  std::vector<double> fit_obs;     // [C, N] with zero columns on masked directions
};

/// Throws NumericError naming the direction count when the observed fit is singular.
ShGuidance make_sh_guidance(const GradientTable& table, const AngularMask& mask, int order, double lambda_reg);
/// Order used when the config asks for automatic selection.
int resolve_order(const SamplerConfig& config, const AngularMask& mask);

/// Sum over voxels of || P x_hat0 - x0t ||^2.
template <typename T>
ad::Tensor<T> oc_loss(const ad::Tensor<T>& x_hat0, const ad::Tensor<T>& x0t, const ShGuidance& g);
/// Sum over voxels of || C_obs - F x_hat0 ||^2; c_obs is [..., C].
template <typename T>
ad::Tensor<T> scc_loss(const ad::Tensor<T>& x_hat0, const ad::Tensor<T>& c_obs, const ShGuidance& g);
/// Observed-direction coefficients [..., C] of a [..., N] volume.
template <typename T>
ad::Tensor<T> observed_coefficients(const ad::Tensor<T>& x_obs, const ShGuidance& g);

struct TraceRecord {
  std::size_t step = 0;
  int t = 0;
  double oc_loss = 0.0;
  double scc_loss = 0.0;
  double oc_grad_norm = 0.0;   // of the loss w.r.t. the denoised estimate
  double scc_grad_norm = 0.0;
  double update_norm = 0.0;    // guidance displacement applied to x_{t-1}
};

struct SamplerTrace {
  std::vector<TraceRecord> records;
  std::string to_csv() const;
};

/// Per-trajectory Gaussian source. The distribution keeps its own cached
/// draw, so each item's sequence depends on its stream alone.
struct NoiseStream {
  Rng rng;
  std::normal_distribution<double> normal{0.0, 1.0};

  explicit NoiseStream(std::uint64_t seed) : rng(seed) {}
  double operator()() { return normal(rng); }
};

/// Stream of batch item `item` under master `seed`.
inline NoiseStream make_stream(std::uint64_t seed, std::uint64_t item) { return NoiseStream(derive_seed(seed, item)); }

/// Fixed inputs of one batched trajectory.
template <typename T>
struct GuidanceProblem {
  ad::Tensor<T> x_obs;   // [B,H,W,N], zero on masked directions
  ad::Tensor<T> observed;
  std::vector<AngularMask> masks;
  std::vector<GradientTable> tables;
  ShGuidance sh;
  ad::Tensor<T> c_obs;  // [B,H,W,C]
};

template <typename T>
GuidanceProblem<T> make_problem(std::span<const DwiVolume> observed, const AngularMask& mask, const SamplerConfig& c);

/// Quantities of one step at state x_t.
template <typename T>
struct GuidanceEval {
  std::vector<T> eps;
  std::vector<T> x0t;
  std::vector<T> grad_oc;   // d L_OC / d x_t
  std::vector<T> grad_scc;  // d L_SCC / d x_t
  std::vector<double> oc_per_item;
  std::vector<double> scc_per_item;
  double oc_grad_norm = 0.0;
  double scc_grad_norm = 0.0;
};

/// Noise estimate, denoised estimate, both losses and their x_t gradients.
/// Gradients are only formed for losses with a positive weight unless
/// `force_gradients` is set.
template <typename T>
GuidanceEval<T> evaluate_guidance(const model::DiffusionTransformer<T>& model, const GuidanceProblem<T>& p,
                                  const ad::Tensor<T>& x_t, const StepCoefficients& sc,
                                  const diffusion::NoiseSchedule& schedule, const SamplerConfig& config,
                                  bool force_gradients = false);

/// One transition. `streams` holds one source per batch item and `records`, when
/// given, points at one trace vector per item. Returns x_{t_prev}.
template <typename T>
std::vector<T> guided_step(const model::DiffusionTransformer<T>& model, const GuidanceProblem<T>& p,
                           const std::vector<T>& x_t, const StepCoefficients& sc,
                           const diffusion::NoiseSchedule& schedule, const SamplerConfig& config,
                           std::vector<NoiseStream>& streams, std::vector<TraceRecord>* records = nullptr,
                           std::size_t step_index = 0);

struct SampleResult {
  std::vector<DwiVolume> volumes;
  std::vector<SamplerTrace> traces;
};

/// Super-resolves every slice. Inputs carry the full table; only directions
/// with mask 1 are read. Item i draws from the stream derived from (seed, i).
template <typename T>
SampleResult sample(model::DiffusionTransformer<T>& model, std::span<const DwiVolume> observed,
                    const AngularMask& mask, const diffusion::NoiseSchedule& schedule, const SamplerConfig& config);

struct GridPoint {
  GuidanceWeights weights;
  double psnr = 0.0;
};

struct GridResult {
  GuidanceWeights best;
  std::vector<GridPoint> points;  // in evaluation order
};

/// Default candidates {0, 0.1, 0.3, 1, 3, 10}.
std::vector<double> default_weight_grid();

/// Mean masked-direction PSNR over `truth` for every (oc, scc) pair. The best
/// pair wins; ties go to the smaller weight sum, then smaller oc.
template <typename T>
GridResult grid_search_weights(model::DiffusionTransformer<T>& model, std::span<const DwiVolume> truth,
                               const AngularMask& mask, const diffusion::NoiseSchedule& schedule,
                               const SamplerConfig& base, std::span<const double> oc_grid,
                               std::span<const double> scc_grid);

/// Pick from evaluated points with the same tie rule.
GuidanceWeights select_best(std::span<const GridPoint> points);

/// Mean PSNR over masked directions of each reconstruction.
double masked_psnr(std::span<const DwiVolume> truth, std::span<const DwiVolume> recon, const AngularMask& mask);

}  // namespace qsr::sampler
