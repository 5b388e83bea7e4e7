#pragma once

// Desk-scale diffusion transformer over (direction x patch) tokens with
// gradient-direction-conditioned modulation.
//
// Tokens are laid out [batch, direction, patch, feature]. Every block gets six
// per-direction vectors from a small MLP over (b-vector, timestep embedding):
// scale/shift/gate for the attention branch and for the MLP branch. Scales are
// stored as offsets from 1, so an all-zero modulation output is
// (scale 1, shift 0, gate 0) and every block starts as the identity.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/archive.hpp"
#include "qsr/dwi.hpp"
#include "qsr/tensor.hpp"

namespace qsr::model {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch = 8;
  std::size_t dim = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  /// When false the modulation is pinned to (scale 1, shift 0, gate 1): a plain
  /// pre-norm transformer without b-vector or timestep conditioning.
  bool geometry_modulation = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t patches() const { return grid_h() * grid_w(); }
  std::size_t patch_area() const { return patch * patch; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Trainable parameter count:
///   p2*D + D                      patch embedding
/// + 2*D                           observed/missing embedding
/// + depth * (12*D^2 + 9*D)        attention (qkv, out) and MLP (ratio 4)
/// + depth * (7*D^2 + 10*D)        modulation MLP, only with geometry_modulation
/// + D*p2 + p2                     output head
/// where p2 = patch^2 and the MLP term generalizes to 2*r*D^2 + (r+1)*D.
std::size_t parameter_count(const ModelConfig& c);

template <typename T>
struct ModulationParams {
  ad::Tensor<T> scale_attn, shift_attn, gate_attn;  // each [B, N, D]
  ad::Tensor<T> scale_mlp, shift_mlp, gate_mlp;
};

/// [B, H, W, N] -> [B, N, P, patch*patch]; a pure permutation.
template <typename T>
ad::Tensor<T> patchify(const ad::Tensor<T>& volume, std::size_t patch);
/// Inverse of patchify.
template <typename T>
ad::Tensor<T> unpatchify(const ad::Tensor<T>& tokens, std::size_t height, std::size_t width);

/// Fixed 2D sinusoidal encoding per patch, [P, D].
std::vector<double> spatial_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim);
/// sin/cos of integer multiples of the polar and azimuthal angles of `bvec`, [D].
/// Every direction gets squared norm D/2.
std::vector<double> angular_encoding(const Vec3& bvec, std::size_t dim);
/// spatial + angular, [N, P, D].
std::vector<double> positional_encoding(std::size_t grid_h, std::size_t grid_w, const GradientTable& table,
                                        std::size_t dim);
/// Sinusoidal embedding of a diffusion timestep, [D].
std::vector<double> timestep_embedding(double t, std::size_t dim);

/// Inputs of one denoising call. All volumes are [B, H, W, N].
template <typename T>
struct NoiseQuery {
  ad::Tensor<T> x_t;
  ad::Tensor<T> x_obs;
  std::vector<AngularMask> masks;       // one per batch item
  std::vector<int> timesteps;           // one per batch item, in [1, T]
  std::vector<GradientTable> tables;    // one per batch item, or a single shared table
};

template <typename T>
class DiffusionTransformer {
 public:
  explicit DiffusionTransformer(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  /// Parameters in a fixed (name-sorted) order.
  const std::map<std::string, ad::Tensor<T>>& parameters() const noexcept { return params_; }
  ad::Tensor<T>& parameter(const std::string& name);
  std::size_t parameter_count() const;
  void set_trainable(bool flag);

  /// Linear projection of patches plus observed/missing and positional embeddings. [B, N, P, D]
  ad::Tensor<T> embed(const ad::Tensor<T>& x_inp, std::span<const AngularMask> masks,
                      std::span<const GradientTable> tables) const;
  /// Modulation vectors of one block for every (item, direction). bvecs: [B, N, 3].
  ModulationParams<T> modulation(std::size_t block, const ad::Tensor<T>& bvecs,
                                 const ad::Tensor<T>& time_embed) const;
  /// Joint attention over all N*P tokens, then MLP; both branches gated.
  ad::Tensor<T> block_forward(std::size_t block, const ad::Tensor<T>& tokens, const ModulationParams<T>& mods) const;
  /// Final norm and linear projection back to pixels. [B, H, W, N]
  ad::Tensor<T> head(const ad::Tensor<T>& tokens) const;

  /// Noise estimate over every direction. Observed directions read x_obs,
  /// masked directions read x_t.
  ad::Tensor<T> predict_noise(const NoiseQuery<T>& query, int max_timestep) const;

  void save(TensorArchive& archive, const std::string& prefix = "model/") const;
  void load(const TensorArchive& archive, const std::string& prefix = "model/");

 private:
  ad::Tensor<T> linear(const ad::Tensor<T>& x, const std::string& name) const;
  void add_param(const std::string& name, ad::Shape shape, std::vector<double> init);

  ModelConfig config_;
  std::map<std::string, ad::Tensor<T>> params_;
};

/// Per-item mask tensor [B, H, W, N] with 1 on observed directions.
template <typename T>
ad::Tensor<T> mask_volume(std::span<const AngularMask> masks, std::size_t height, std::size_t width);

}  // namespace qsr::model
