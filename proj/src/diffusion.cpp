#include "qsr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "qsr/error.hpp"
#include "qsr/ops.hpp"
#include "qsr/rng.hpp"

namespace qsr::diffusion {

using ad::Shape;
using ad::Tensor;

namespace {

constexpr std::uint64_t kValidationStream = 0x7A11DA7EULL;

}  // namespace

void NoiseSchedule::check(int t) const {
  if (t < 1 || t > steps) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw InvalidArgument("noise schedule needs at least one step");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw InvalidArgument("noise schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha.assign(s.beta.size(), 1.0);
  s.alpha_bar.assign(s.beta.size(), 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_min + frac * (beta_max - beta_min);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

template <typename T>
std::vector<T> forward_diffuse(std::span<const T> x0, int t, std::span<const T> noise, const NoiseSchedule& schedule) {
  schedule.check(t);
  if (x0.size() != noise.size()) throw InvalidArgument("forward_diffuse: x0 and noise sizes differ");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(noise[i]));
  }
  return out;
}

std::size_t masked_count(double k, std::size_t n) {
  if (!(k > 0.0 && k < 1.0)) throw InvalidArgument("mask ratio must lie in (0, 1), got " + std::to_string(k));
  const auto count = static_cast<std::size_t>(std::llround(k * static_cast<double>(n)));
  if (count < 1 || count + 1 > n) {
    throw InvalidArgument("mask ratio " + std::to_string(k) + " over " + std::to_string(n) + " directions masks " +
                          std::to_string(count) + "; need between 1 and N-1");
  }
  return count;
}

AngularMask sample_mask(double k, std::size_t n, std::uint64_t seed) {
  const std::size_t count = masked_count(k, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  AngularMask mask = AngularMask::all_observed(n);
  for (std::size_t i = 0; i < count; ++i) mask.observed[order[i]] = 0;
  return mask;
}

double mask_ratio_schedule(std::size_t iter, std::size_t total, double k_min, double k_max) {
  if (total == 0) return k_max;
  const double frac = std::min(1.0, static_cast<double>(iter) / static_cast<double>(total));
  return k_min + frac * (k_max - k_min);
}

template <typename T>
std::vector<T> build_masked_input(std::span<const T> x0, std::span<const T> x_t, const AngularMask& mask) {
  const std::size_t n = mask.size();
  if (x0.size() != x_t.size() || n == 0 || x0.size() % n != 0) {
    throw InvalidArgument("build_masked_input: shapes do not match the mask");
  }
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = mask.observed[i % n] ? x0[i] : x_t[i];
  return out;
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& observed) {
  if (pred.shape() != target.shape() || pred.shape() != observed.shape()) {
    throw InvalidArgument("masked_mse: shapes differ");
  }
  std::size_t count = 0;
  for (T m : observed.data()) count += m == T(0);
  if (count == 0) throw InvalidArgument("masked_mse: no masked entries");
  const auto missing = ad::add_scalar(ad::scale(observed, T(-1)), T(1));
  const auto diff = ad::mul(ad::sub(pred, target), missing);
  return ad::scale(ad::sum(ad::mul(diff, diff)), T(1) / static_cast<T>(count));
}

template <typename T>
void AdamW<T>::step(std::map<std::string, Tensor<T>>& params, const ad::GradientMap<T>& grads) {
  ++steps_;
  const AdamWConfig& c = config_;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(steps_));
  for (auto& [name, p] : params) {
    if (!grads.contains(p)) continue;
    const auto g = grads.of(p);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), T(0));
      v.assign(g.size(), T(0));
    }
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
      w[i] = static_cast<T>(w[i] - c.lr * (update + c.weight_decay * w[i]));
    }
  }
}

template <typename T>
void AdamW<T>::save(TensorArchive& archive, const std::string& prefix) const {
  for (const auto& [name, m] : m_) {
    archive.put(prefix + "m/" + name, {m.size()}, std::span<const T>(m));
    archive.put(prefix + "v/" + name, {m.size()}, std::span<const T>(v_.at(name)));
  }
  archive.metadata()["optimizer"] = {{"steps", steps_},
                                     {"lr", config_.lr},
                                     {"beta1", config_.beta1},
                                     {"beta2", config_.beta2},
                                     {"eps", config_.eps},
                                     {"weight_decay", config_.weight_decay}};
}

template <typename T>
void AdamW<T>::load(const TensorArchive& archive, const std::string& prefix) {
  const auto& meta = archive.metadata();
  if (!meta.contains("optimizer")) throw IoError("checkpoint has no optimizer state");
  steps_ = meta["optimizer"].at("steps").template get<std::size_t>();
  m_.clear();
  v_.clear();
  const std::string mp = prefix + "m/";
  for (const auto& full : archive.names()) {
    if (full.rfind(mp, 0) != 0) continue;
    const auto name = full.substr(mp.size());
    m_[name] = archive.get<T>(full);
    v_[name] = archive.get<T>(prefix + "v/" + name);
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (iterations == 0) fail("iterations must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (diffusion_steps < 1) fail("diffusion_steps must be positive");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) fail("need 0 < beta_min <= beta_max < 1");
  if (!(k_min > 0.0 && k_min <= k_max && k_max < 1.0)) fail("need 0 < k_min <= k_max < 1");
  if (!(val_mask_ratio > 0.0 && val_mask_ratio < 1.0)) fail("val_mask_ratio must lie in (0, 1)");
  if (!(optimizer.lr > 0.0) || optimizer.weight_decay < 0.0) fail("optimizer lr must be positive, decay non-negative");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    fail("optimizer betas must lie in [0, 1)");
  }
  if (grad_clip < 0.0) fail("grad_clip must be non-negative");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"diffusion_steps", c.diffusion_steps},
          {"beta_min", c.beta_min},
          {"beta_max", c.beta_max},
          {"k_min", c.k_min},
          {"k_max", c.k_max},
          {"optimizer",
           {{"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"val_every", c.val_every},
          {"val_items", c.val_items},
          {"val_mask_ratio", c.val_mask_ratio}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.beta_min = j.value("beta_min", c.beta_min);
    c.beta_max = j.value("beta_max", c.beta_max);
    c.k_min = j.value("k_min", c.k_min);
    c.k_max = j.value("k_max", c.k_max);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.optimizer.lr = o.value("lr", c.optimizer.lr);
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    }
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.val_every = j.value("val_every", c.val_every);
    c.val_items = j.value("val_items", c.val_items);
    c.val_mask_ratio = j.value("val_mask_ratio", c.val_mask_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

StepDraws draw_step(std::uint64_t seed, std::uint64_t stream, std::size_t dataset_size, std::size_t batch,
                    std::size_t voxels, std::size_t dirs, double k, int max_t) {
  if (dataset_size == 0) throw InvalidArgument("training set is empty");
  Rng rng = make_rng(seed, stream);
  StepDraws d;
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::uniform_int_distribution<int> tdist(1, max_t);
  for (std::size_t b = 0; b < batch; ++b) {
    d.items.push_back(pick(rng));
    d.masks.push_back(sample_mask(k, dirs, rng()));
    d.timesteps.push_back(tdist(rng));
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  d.noise.resize(batch * voxels * dirs);
  for (auto& z : d.noise) z = normal(rng);
  return d;
}

template <typename T>
std::vector<T> stack_slices(std::span<const DwiVolume> data, std::span<const std::size_t> items) {
  std::vector<T> out;
  for (std::size_t i : items) {
    const auto& v = data[i];
    if (v.data.size() != data[items[0]].data.size()) throw InvalidArgument("slices of a batch differ in shape");
    out.insert(out.end(), v.data.begin(), v.data.end());
  }
  return out;
}

template <typename T>
Tensor<T> denoising_loss(const model::DiffusionTransformer<T>& model, std::span<const DwiVolume> data,
                         const StepDraws& draws, const NoiseSchedule& schedule) {
  const std::size_t b = draws.items.size();
  const auto& first = data[draws.items.at(0)];
  const std::size_t h = first.height, w = first.width, n = first.dirs, per = h * w * n;
  const auto x0 = stack_slices<T>(data, draws.items);
  std::vector<T> noise(draws.noise.begin(), draws.noise.end());
  std::vector<T> x_t(x0.size());
  for (std::size_t i = 0; i < b; ++i) {
    const auto xi = forward_diffuse<T>(std::span<const T>(x0).subspan(i * per, per), draws.timesteps[i],
                                       std::span<const T>(noise).subspan(i * per, per), schedule);
    std::copy(xi.begin(), xi.end(), x_t.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  model::NoiseQuery<T> q;
  q.x_t = Tensor<T>::constant({b, h, w, n}, std::move(x_t));
  q.x_obs = Tensor<T>::constant({b, h, w, n}, x0);
  q.masks = draws.masks;
  q.timesteps = draws.timesteps;
  for (std::size_t i : draws.items) q.tables.push_back(data[i].table);
  const auto eps_hat = model.predict_noise(q, schedule.steps);
  const auto observed = model::mask_volume<T>(draws.masks, h, w);
  return masked_mse(eps_hat, Tensor<T>::constant({b, h, w, n}, std::move(noise)), observed);
}

template <typename T>
StepRecord train_step(TrainState<T>& state, const TrainConfig& config, std::span<const DwiVolume> data,
                      const NoiseSchedule& schedule) {
  if (data.empty()) throw InvalidArgument("train_step: empty batch source");
  const auto& first = data[0];
  const double k = mask_ratio_schedule(state.iteration, config.iterations, config.k_min, config.k_max);
  const auto draws = draw_step(config.seed, state.iteration, data.size(), config.batch_size, first.voxels(),
                               first.dirs, k, schedule.steps);
  state.model.set_trainable(true);
  const auto loss = denoising_loss(state.model, data, draws, schedule);

  StepRecord rec;
  rec.iter = state.iteration + 1;
  rec.k = k;
  rec.t_mean = std::accumulate(draws.timesteps.begin(), draws.timesteps.end(), 0.0) /
               static_cast<double>(draws.timesteps.size());
  rec.loss = loss.item();

  auto grads = ad::backward(loss);
  double norm2 = 0.0;
  for (const auto& [name, p] : state.model.parameters()) {
    if (!grads.contains(p)) continue;
    for (T g : grads.of(p)) norm2 += static_cast<double>(g) * static_cast<double>(g);
  }
  if (!std::isfinite(rec.loss) || !std::isfinite(norm2)) {
    nlohmann::json snap = {{"iteration", rec.iter},
                           {"k", k},
                           {"loss", std::isfinite(rec.loss) ? nlohmann::json(rec.loss) : nlohmann::json(nullptr)},
                           {"grad_norm_finite", std::isfinite(norm2)},
                           {"items", draws.items},
                           {"timesteps", draws.timesteps}};
    throw NumericError("non-finite training loss or gradient; snapshot " + snap.dump());
  }
  if (config.grad_clip > 0.0) {
    const double norm = std::sqrt(norm2);
    if (norm > config.grad_clip) {
      const double f = config.grad_clip / norm;
      ad::GradientMap<T> clipped;
      for (const auto& [name, p] : state.model.parameters()) {
        if (!grads.contains(p)) continue;
        const auto g = grads.of(p);
        std::vector<T> c(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) c[i] = static_cast<T>(static_cast<double>(g[i]) * f);
        clipped.insert(p.node(), std::move(c));
      }
      grads = std::move(clipped);
    }
  }
  auto params = state.model.parameters();  // handles share storage with the model
  state.optimizer.step(params, grads);
  ++state.iteration;
  return rec;
}

template <typename T>
double validation_loss(const model::DiffusionTransformer<T>& model, const TrainConfig& config,
                       std::span<const DwiVolume> data, const NoiseSchedule& schedule) {
  if (data.empty()) throw InvalidArgument("validation set is empty");
  const std::size_t count = std::max<std::size_t>(config.val_items, 1);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    auto draws = draw_step(derive_seed(config.seed, kValidationStream), i, data.size(), 1, data[0].voxels(),
                           data[0].dirs, config.val_mask_ratio, schedule.steps);
    draws.items[0] = i % data.size();
    total += static_cast<double>(denoising_loss(model, data, draws, schedule).item());
  }
  return total / static_cast<double>(count);
}

template <typename T>
void save_checkpoint(const TrainState<T>& state, const TrainConfig& config, const std::filesystem::path& path) {
  TensorArchive ar;
  state.model.save(ar);
  state.optimizer.save(ar);
  ar.metadata()["iteration"] = state.iteration;
  ar.metadata()["train_config"] = to_json(config);
  ar.metadata()["precision"] = sizeof(T) == 4 ? "float32" : "float64";
  ar.save(path);
}

template <typename T>
void restore_checkpoint(TrainState<T>& state, const TensorArchive& archive) {
  const auto& meta = archive.metadata();
  if (!meta.contains("iteration")) throw IoError("checkpoint has no iteration counter");
  if (meta.contains("model_config") && model::model_config_from_json(meta["model_config"]).geometry_modulation !=
                                           state.model.config().geometry_modulation) {
    throw IoError("checkpoint modulation setting differs from the model");
  }
  state.model.load(archive);
  state.optimizer.load(archive);
  state.iteration = meta["iteration"].get<std::size_t>();
}

model::ModelConfig checkpoint_model_config(const TensorArchive& archive) {
  if (!archive.metadata().contains("model_config")) throw IoError("checkpoint has no model config");
  try {
    return model::model_config_from_json(archive.metadata()["model_config"]);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint model config: ") + e.what());
  }
}

std::string loss_log_header() { return "iter,k,t_mean,loss\n"; }

std::string loss_log_row(const StepRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.iter << ',' << r.k << ',' << r.t_mean << ',' << r.loss << '\n';
  return os.str();
}

template <typename T>
std::vector<StepRecord> train(TrainState<T>& state, const TrainConfig& config, std::span<const DwiVolume> train_set,
                              std::span<const DwiVolume> val_set, const TrainCallbacks& callbacks,
                              std::size_t stop_at) {
  config.validate();
  const auto schedule = config.schedule();
  const std::size_t until = stop_at == 0 ? config.iterations : std::min(stop_at, config.iterations);
  std::vector<StepRecord> out;
  while (state.iteration < until) {
    out.push_back(train_step(state, config, train_set, schedule));
    if (callbacks.on_step) callbacks.on_step(out.back());
    if (!val_set.empty() && config.val_every > 0 &&
        (state.iteration % config.val_every == 0 || state.iteration == config.iterations)) {
      const double v = validation_loss(state.model, config, val_set, schedule);
      if (!std::isfinite(v)) throw NumericError("non-finite validation loss at iteration " + std::to_string(state.iteration));
      if (callbacks.on_validation) callbacks.on_validation(state.iteration, v);
    }
  }
  return out;
}

#define QSR_DIFFUSION_INSTANTIATE(T)                                                                              \
  template std::vector<T> forward_diffuse(std::span<const T>, int, std::span<const T>, const NoiseSchedule&);     \
  template std::vector<T> build_masked_input(std::span<const T>, std::span<const T>, const AngularMask&);         \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template class AdamW<T>;                                                                                        \
  template std::vector<T> stack_slices(std::span<const DwiVolume>, std::span<const std::size_t>);                 \
  template Tensor<T> denoising_loss(const model::DiffusionTransformer<T>&, std::span<const DwiVolume>,            \
                                    const StepDraws&, const NoiseSchedule&);                                      \
  template StepRecord train_step(TrainState<T>&, const TrainConfig&, std::span<const DwiVolume>,                  \
                                 const NoiseSchedule&);                                                           \
  template double validation_loss(const model::DiffusionTransformer<T>&, const TrainConfig&,                      \
                                  std::span<const DwiVolume>, const NoiseSchedule&);                              \
  template void save_checkpoint(const TrainState<T>&, const TrainConfig&, const std::filesystem::path&);          \
  template void restore_checkpoint(TrainState<T>&, const TensorArchive&);                                         \
  template std::vector<StepRecord> train(TrainState<T>&, const TrainConfig&, std::span<const DwiVolume>,          \
                                         std::span<const DwiVolume>, const TrainCallbacks&, std::size_t);

QSR_DIFFUSION_INSTANTIATE(float)
QSR_DIFFUSION_INSTANTIATE(double)

}  // namespace qsr::diffusion
