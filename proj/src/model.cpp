#include "qsr/model.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "qsr/error.hpp"
#include "qsr/ops.hpp"
#include "qsr/rng.hpp"

namespace qsr::model {

using ad::Shape;
using ad::Tensor;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (patch == 0) fail("patch must be positive");
  if (height == 0 || width == 0 || height % patch != 0 || width % patch != 0) {
    fail("height and width must be positive multiples of patch (" + std::to_string(height) + "x" +
         std::to_string(width) + ", patch " + std::to_string(patch) + ")");
  }
  if (dim == 0 || dim % 4 != 0) fail("dim must be a positive multiple of 4");
  if (heads == 0 || dim % heads != 0) fail("dim must be divisible by heads");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"height", c.height}, {"width", c.width},         {"patch", c.patch},
          {"dim", c.dim},       {"depth", c.depth},         {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio}, {"geometry_modulation", c.geometry_modulation}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.patch = j.value("patch", c.patch);
    c.dim = j.value("dim", c.dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.geometry_modulation = j.value("geometry_modulation", c.geometry_modulation);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.dim, p2 = c.patch_area(), r = c.mlp_ratio;
  std::size_t block = 4 * d * d + 4 * d;                // qkv + output projection
  block += 2 * r * d * d + (r + 1) * d;                 // MLP
  if (c.geometry_modulation) block += 7 * d * d + 10 * d;  // (D+3)->D->6D
  return p2 * d + d + 2 * d + c.depth * block + d * p2 + p2;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& volume, std::size_t patch) {
  if (volume.rank() != 4) throw InvalidArgument("patchify expects [B,H,W,N], got " + ad::to_string(volume.shape()));
  const std::size_t b = volume.dim(0), h = volume.dim(1), w = volume.dim(2), n = volume.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw InvalidArgument("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  auto x = ad::reshape(volume, Shape{b, gh, patch, gw, patch, n});
  x = ad::transpose(x, {0, 5, 1, 3, 2, 4});
  return ad::reshape(x, Shape{b, n, gh * gw, patch * patch});
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 4) throw InvalidArgument("unpatchify expects [B,N,P,p*p]");
  const std::size_t b = tokens.dim(0), n = tokens.dim(1), area = tokens.dim(3);
  const auto patch = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(area))));
  if (patch * patch != area || height % patch != 0 || width % patch != 0 ||
      tokens.dim(2) != (height / patch) * (width / patch)) {
    throw InvalidArgument("unpatchify: token grid " + ad::to_string(tokens.shape()) + " does not tile " +
                          std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t gh = height / patch, gw = width / patch;
  auto x = ad::reshape(tokens, Shape{b, n, gh, gw, patch, patch});
  x = ad::transpose(x, {0, 2, 4, 3, 5, 1});
  return ad::reshape(x, Shape{b, height, width, n});
}

std::vector<double> spatial_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  const std::size_t quarter = dim / 4;
  std::vector<double> out(grid_h * grid_w * dim);
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      double* row = out.data() + (gy * grid_w + gx) * dim;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = std::sin(static_cast<double>(gy) * omega);
        row[quarter + i] = std::cos(static_cast<double>(gy) * omega);
        row[2 * quarter + i] = std::sin(static_cast<double>(gx) * omega);
        row[3 * quarter + i] = std::cos(static_cast<double>(gx) * omega);
      }
    }
  }
  return out;
}

std::vector<double> angular_encoding(const Vec3& bvec, std::size_t dim) {
  const std::size_t quarter = dim / 4;
  const double theta = std::acos(std::clamp(bvec.z() / std::max(bvec.norm(), 1e-300), -1.0, 1.0));
  const double phi = std::atan2(bvec.y(), bvec.x());
  std::vector<double> out(dim, 0.0);
  for (std::size_t i = 0; i < quarter; ++i) {
    const double k = static_cast<double>(i + 1);
    out[i] = std::sin(k * theta);
    out[quarter + i] = std::cos(k * theta);
    out[2 * quarter + i] = std::sin(k * phi);
    out[3 * quarter + i] = std::cos(k * phi);
  }
  return out;
}

std::vector<double> positional_encoding(std::size_t grid_h, std::size_t grid_w, const GradientTable& table,
                                        std::size_t dim) {
  const auto spatial = spatial_encoding(grid_h, grid_w, dim);
  const std::size_t patches = grid_h * grid_w;
  std::vector<double> out(table.size() * patches * dim);
  for (std::size_t n = 0; n < table.size(); ++n) {
    const auto ang = angular_encoding(table.bvecs[n], dim);
    for (std::size_t p = 0; p < patches; ++p) {
      for (std::size_t d = 0; d < dim; ++d) out[(n * patches + p) * dim + d] = spatial[p * dim + d] + ang[d];
    }
  }
  return out;
}

std::vector<double> timestep_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::cos(t * freq);
    out[half + i] = std::sin(t * freq);
  }
  return out;
}

template <typename T>
Tensor<T> mask_volume(std::span<const AngularMask> masks, std::size_t height, std::size_t width) {
  if (masks.empty()) throw InvalidArgument("mask_volume: no masks");
  const std::size_t n = masks.front().size();
  std::vector<T> values(masks.size() * height * width * n);
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].size() != n) throw InvalidArgument("mask_volume: masks differ in length");
    for (std::size_t v = 0; v < height * width; ++v) {
      for (std::size_t k = 0; k < n; ++k) values[(b * height * width + v) * n + k] = masks[b].observed[k] ? T(1) : T(0);
    }
  }
  return Tensor<T>::constant(Shape{masks.size(), height, width, n}, std::move(values));
}

namespace {

std::vector<double> xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> out(fan_in * fan_out);
  for (auto& v : out) v = u(rng);
  return out;
}

template <typename T>
Tensor<T> expand_over_patches(const Tensor<T>& m, std::size_t patches) {
  const std::size_t b = m.dim(0), n = m.dim(1), d = m.dim(2);
  return ad::expand(ad::reshape(m, Shape{b, n, 1, d}), 2, patches);
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  return ad::add(ad::mul(x, ad::add_scalar(scale, T(1))), shift);
}

const GradientTable& table_for(std::span<const GradientTable> tables, std::size_t item) {
  return tables.size() == 1 ? tables[0] : tables[item];
}

}  // namespace

template <typename T>
DiffusionTransformer<T>::DiffusionTransformer(ModelConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.dim, p2 = config_.patch_area(), hidden = config_.mlp_ratio * d;
  Rng rng(derive_seed(config_.seed, 0x90DE1));

  add_param("embed.weight", {p2, d}, xavier(rng, p2, d));
  add_param("embed.bias", {d}, std::vector<double>(d, 0.0));
  {
    std::normal_distribution<double> normal(0.0, 0.02);
    std::vector<double> m(2 * d);
    for (auto& v : m) v = normal(rng);
    add_param("mask_embed", {2, d}, std::move(m));
  }
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    add_param(p + "qkv.weight", {d, 3 * d}, xavier(rng, d, 3 * d));
    add_param(p + "qkv.bias", {3 * d}, std::vector<double>(3 * d, 0.0));
    add_param(p + "proj.weight", {d, d}, xavier(rng, d, d));
    add_param(p + "proj.bias", {d}, std::vector<double>(d, 0.0));
    add_param(p + "fc1.weight", {d, hidden}, xavier(rng, d, hidden));
    add_param(p + "fc1.bias", {hidden}, std::vector<double>(hidden, 0.0));
    add_param(p + "fc2.weight", {hidden, d}, xavier(rng, hidden, d));
    add_param(p + "fc2.bias", {d}, std::vector<double>(d, 0.0));
    if (config_.geometry_modulation) {
      add_param(p + "mod.fc1.weight", {d + 3, d}, xavier(rng, d + 3, d));
      add_param(p + "mod.fc1.bias", {d}, std::vector<double>(d, 0.0));
      // Zero output layer: scale offset, shift and gate all start at 0.
      add_param(p + "mod.fc2.weight", {d, 6 * d}, std::vector<double>(6 * d * d, 0.0));
      add_param(p + "mod.fc2.bias", {6 * d}, std::vector<double>(6 * d, 0.0));
    }
  }
  add_param("head.weight", {d, p2}, std::vector<double>(d * p2, 0.0));
  add_param("head.bias", {p2}, std::vector<double>(p2, 0.0));
}

template <typename T>
void DiffusionTransformer<T>::add_param(const std::string& name, Shape shape, std::vector<double> init) {
  params_.emplace(name, Tensor<T>::parameter(std::move(shape), std::vector<T>(init.begin(), init.end())));
}

template <typename T>
Tensor<T>& DiffusionTransformer<T>::parameter(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("no parameter named " + name);
  return it->second;
}

template <typename T>
std::size_t DiffusionTransformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.size();
  return n;
}

template <typename T>
void DiffusionTransformer<T>::set_trainable(bool flag) {
  for (auto& [_, p] : params_) p.set_requires_grad(flag);
}

template <typename T>
Tensor<T> DiffusionTransformer<T>::linear(const Tensor<T>& x, const std::string& name) const {
  return ad::add(ad::matmul(x, params_.at(name + ".weight")), params_.at(name + ".bias"));
}

template <typename T>
Tensor<T> DiffusionTransformer<T>::embed(const Tensor<T>& x_inp, std::span<const AngularMask> masks,
                                         std::span<const GradientTable> tables) const {
  const std::size_t b = x_inp.dim(0), n = x_inp.dim(3), d = config_.dim, patches = config_.patches();
  auto tokens = linear(patchify(x_inp, config_.patch), "embed");  // [B, N, P, D]

  std::vector<T> onehot(b * n * 2, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < n; ++k) onehot[(i * n + k) * 2 + (masks[i].observed[k] ? 1 : 0)] = T(1);
  }
  auto state = ad::matmul(Tensor<T>::constant(Shape{b, n, 2}, std::move(onehot)), params_.at("mask_embed"));
  tokens = ad::add(tokens, expand_over_patches(state, patches));

  std::vector<T> pos;
  pos.reserve(b * n * patches * d);
  for (std::size_t i = 0; i < b; ++i) {
    const auto enc = positional_encoding(config_.grid_h(), config_.grid_w(), table_for(tables, i), d);
    pos.insert(pos.end(), enc.begin(), enc.end());
  }
  return ad::add(tokens, Tensor<T>::constant(Shape{b, n, patches, d}, std::move(pos)));
}

template <typename T>
ModulationParams<T> DiffusionTransformer<T>::modulation(std::size_t block, const Tensor<T>& bvecs,
                                                        const Tensor<T>& time_embed) const {
  const std::size_t b = bvecs.dim(0), n = bvecs.dim(1), d = config_.dim;
  if (!config_.geometry_modulation) {
    auto zeros = Tensor<T>::zeros(Shape{b, n, d});
    auto ones = Tensor<T>::full(Shape{b, n, d}, T(1));
    return {zeros, zeros, ones, zeros, zeros, ones};
  }
  const std::string p = "blocks." + std::to_string(block) + ".mod";
  auto temb = ad::expand(ad::reshape(time_embed, Shape{b, 1, d}), 1, n);
  auto hidden = ad::gelu(linear(ad::concat<T>({bvecs, temb}, 2), p + ".fc1"));
  auto out = ad::split(linear(hidden, p + ".fc2"), 2, std::vector<std::size_t>(6, d));
  return {out[0], out[1], out[2], out[3], out[4], out[5]};
}

template <typename T>
Tensor<T> DiffusionTransformer<T>::block_forward(std::size_t block, const Tensor<T>& tokens,
                                                 const ModulationParams<T>& mods) const {
  const std::size_t b = tokens.dim(0), n = tokens.dim(1), patches = tokens.dim(2), d = tokens.dim(3);
  const std::size_t heads = config_.heads, dh = d / heads, seq = n * patches;
  const std::string p = "blocks." + std::to_string(block) + ".";

  auto a = modulate(ad::layer_norm(tokens), expand_over_patches(mods.scale_attn, patches),
                    expand_over_patches(mods.shift_attn, patches));
  auto qkv = ad::split(linear(ad::reshape(a, Shape{b, seq, d}), p + "qkv"), 2, {d, d, d});
  auto heads_view = [&](const Tensor<T>& x) {
    auto y = ad::transpose(ad::reshape(x, Shape{b, seq, heads, dh}), {0, 2, 1, 3});
    return ad::reshape(y, Shape{b * heads, seq, dh});
  };
  auto q = ad::scale(heads_view(qkv[0]), T(1) / std::sqrt(static_cast<T>(dh)));
  auto k = heads_view(qkv[1]);
  auto v = heads_view(qkv[2]);
  auto weights = ad::softmax(ad::matmul(q, k, true));
  auto ctx = ad::transpose(ad::reshape(ad::matmul(weights, v), Shape{b, heads, seq, dh}), {0, 2, 1, 3});
  auto attn = ad::reshape(linear(ad::reshape(ctx, Shape{b, seq, d}), p + "proj"), Shape{b, n, patches, d});
  auto h = ad::add(tokens, ad::mul(expand_over_patches(mods.gate_attn, patches), attn));

  auto m = modulate(ad::layer_norm(h), expand_over_patches(mods.scale_mlp, patches),
                    expand_over_patches(mods.shift_mlp, patches));
  m = linear(ad::gelu(linear(m, p + "fc1")), p + "fc2");
  return ad::add(h, ad::mul(expand_over_patches(mods.gate_mlp, patches), m));
}

template <typename T>
Tensor<T> DiffusionTransformer<T>::head(const Tensor<T>& tokens) const {
  return unpatchify(linear(ad::layer_norm(tokens), "head"), config_.height, config_.width);
}

template <typename T>
Tensor<T> DiffusionTransformer<T>::predict_noise(const NoiseQuery<T>& q, int max_timestep) const {
  const auto& shape = q.x_t.shape();
  if (shape.size() != 4 || shape[1] != config_.height || shape[2] != config_.width) {
    throw InvalidArgument("predict_noise: x_t must be [B," + std::to_string(config_.height) + "," +
                          std::to_string(config_.width) + ",N], got " + ad::to_string(shape));
  }
  if (q.x_obs.shape() != shape) throw InvalidArgument("predict_noise: x_obs and x_t shapes differ");
  const std::size_t b = shape[0], n = shape[3], d = config_.dim;
  if (q.masks.size() != b || q.timesteps.size() != b) {
    throw InvalidArgument("predict_noise: need one mask and one timestep per batch item");
  }
  if (q.tables.size() != 1 && q.tables.size() != b) throw InvalidArgument("predict_noise: need 1 or B gradient tables");
  for (const auto& t : q.tables) {
    t.validate();
    if (t.size() != n) throw InvalidArgument("predict_noise: gradient table length differs from volume directions");
    for (std::size_t k = 0; k < n; ++k) {
      if (std::abs(t.bvecs[k].norm() - 1.0) > 1e-6) {
        throw InvalidArgument("predict_noise: b-vector " + std::to_string(k) + " is not unit length");
      }
    }
  }
  for (const auto& m : q.masks) {
    if (m.size() != n) throw InvalidArgument("predict_noise: mask length differs from volume directions");
  }
  for (int t : q.timesteps) {
    if (t < 1 || t > max_timestep) {
      throw InvalidArgument("predict_noise: timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(max_timestep) + "]");
    }
  }

  auto observed = mask_volume<T>(q.masks, config_.height, config_.width);
  auto missing = ad::add_scalar(ad::scale(observed, T(-1)), T(1));
  auto x_inp = ad::add(ad::mul(q.x_obs, observed), ad::mul(q.x_t, missing));
  auto tokens = embed(x_inp, q.masks, q.tables);

  std::vector<T> bv(b * n * 3), te;
  te.reserve(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& table = table_for(q.tables, i);
    for (std::size_t k = 0; k < n; ++k) {
      for (int c = 0; c < 3; ++c) bv[(i * n + k) * 3 + static_cast<std::size_t>(c)] = static_cast<T>(table.bvecs[k](c));
    }
    const auto emb = timestep_embedding(static_cast<double>(q.timesteps[i]), d);
    te.insert(te.end(), emb.begin(), emb.end());
  }
  const auto bvecs = Tensor<T>::constant(Shape{b, n, 3}, std::move(bv));
  const auto temb = Tensor<T>::constant(Shape{b, d}, std::move(te));
  for (std::size_t blk = 0; blk < config_.depth; ++blk) {
    tokens = block_forward(blk, tokens, modulation(blk, bvecs, temb));
  }
  return head(tokens);
}

template <typename T>
void DiffusionTransformer<T>::save(TensorArchive& archive, const std::string& prefix) const {
  for (const auto& [name, p] : params_) archive.put(prefix + name, p.shape(), p.data());
  archive.metadata()["model_config"] = to_json(config_);
}

template <typename T>
void DiffusionTransformer<T>::load(const TensorArchive& archive, const std::string& prefix) {
  for (const auto& full : archive.names()) {
    if (full.rfind(prefix, 0) != 0) continue;
    const auto name = full.substr(prefix.size());
    if (!params_.contains(name)) throw IoError("checkpoint has parameter " + name + " unknown to this model");
  }
  for (auto& [name, p] : params_) {
    if (!archive.contains(prefix + name)) throw IoError("checkpoint is missing parameter " + name);
    if (archive.shape_of(prefix + name) != p.shape()) {
      throw IoError("checkpoint parameter " + name + " has shape " + ad::to_string(archive.shape_of(prefix + name)) +
                    ", model expects " + ad::to_string(p.shape()));
    }
    const auto values = archive.get<T>(prefix + name);
    std::copy(values.begin(), values.end(), p.mutable_data().begin());
  }
}

template class DiffusionTransformer<float>;
template class DiffusionTransformer<double>;
template Tensor<float> patchify(const Tensor<float>&, std::size_t);
template Tensor<double> patchify(const Tensor<double>&, std::size_t);
template Tensor<float> unpatchify(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> unpatchify(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> mask_volume<float>(std::span<const AngularMask>, std::size_t, std::size_t);
template Tensor<double> mask_volume<double>(std::span<const AngularMask>, std::size_t, std::size_t);

}  // namespace qsr::model
