#include "qsr/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <sstream>

#include "qsr/error.hpp"
#include "qsr/metrics.hpp"
#include "qsr/ops.hpp"

namespace qsr::sampler {

using ad::Shape;
using ad::Tensor;

namespace {

template <typename T>
Tensor<T> constant_from(const std::vector<double>& values, Shape shape) {
  return Tensor<T>::constant(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

template <typename T>
Tensor<T> oc_residual(const Tensor<T>& x_hat0, const Tensor<T>& x0t, const ShGuidance& g) {
  const auto proj = constant_from<T>(g.projection, {g.dirs, g.dirs});
  return ad::sub(ad::matmul(x_hat0, proj, true), x0t);
}

template <typename T>
Tensor<T> scc_residual(const Tensor<T>& x_hat0, const Tensor<T>& c_obs, const ShGuidance& g) {
  const auto fit = constant_from<T>(g.fit_full, {g.coeffs, g.dirs});
  return ad::sub(c_obs, ad::matmul(x_hat0, fit, true));
}

template <typename T>
std::vector<double> per_item_energy(const Tensor<T>& r, std::size_t items) {
  std::vector<double> out(items, 0.0);
  const std::size_t per = r.size() / items;
  const auto d = r.data();
  for (std::size_t b = 0; b < items; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += static_cast<double>(d[b * per + i]) * static_cast<double>(d[b * per + i]);
    out[b] = acc;
  }
  return out;
}

template <typename T>
double norm2(std::span<const T> v) {
  double acc = 0.0;
  for (T x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

template <typename T>
std::vector<T> leaf_grad(const ad::GradientMap<T>& grads, const Tensor<T>& leaf) {
  if (!grads.contains(leaf)) return std::vector<T>(leaf.size(), T(0));
  const auto g = grads.of(leaf);
  return {g.begin(), g.end()};
}

double tweedie_coefficient(const StepCoefficients& sc, TweedieForm form) {
  return form == TweedieForm::kStandard ? std::sqrt(1.0 - sc.alpha_bar) : sc.beta / std::sqrt(1.0 - sc.alpha_bar);
}

}  // namespace

void GuidanceWeights::validate() const {
  if (!(std::isfinite(oc) && oc >= 0.0 && std::isfinite(scc) && scc >= 0.0)) {
    throw ConfigError("guidance weights must be finite and non-negative");
  }
}

void SamplerConfig::validate() const {
  weights.validate();
  if (steps < 1) throw ConfigError("sampler steps must be positive");
  if (sh_order != -1 && (sh_order < 0 || sh_order % 2 != 0)) throw ConfigError("sh_order must be -1 or even >= 0");
  if (!(lambda_reg >= 0.0 && std::isfinite(lambda_reg))) throw ConfigError("lambda_reg must be finite and >= 0");
  if (batch == 0) throw ConfigError("sampler batch must be positive");
}

nlohmann::json to_json(const SamplerConfig& c) {
  return {{"steps", c.steps},
          {"lambda_oc", c.weights.oc},
          {"lambda_scc", c.weights.scc},
          {"sh_order", c.sh_order},
          {"lambda_reg", c.lambda_reg},
          {"seed", c.seed},
          {"jacobian", c.jacobian == Jacobian::kFull ? "full" : "fast"},
          {"tweedie", c.tweedie == TweedieForm::kStandard ? "standard" : "literal"},
          {"scale_by_alpha_bar", c.scale_by_alpha_bar},
          {"batch", c.batch}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.weights.oc = j.value("lambda_oc", c.weights.oc);
    c.weights.scc = j.value("lambda_scc", c.weights.scc);
    c.sh_order = j.value("sh_order", c.sh_order);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.seed = j.value("seed", c.seed);
    const auto jac = j.value("jacobian", std::string("full"));
    if (jac != "full" && jac != "fast") throw ConfigError("sampler jacobian must be \"full\" or \"fast\"");
    c.jacobian = jac == "full" ? Jacobian::kFull : Jacobian::kFast;
    const auto tw = j.value("tweedie", std::string("standard"));
    if (tw != "standard" && tw != "literal") throw ConfigError("sampler tweedie must be \"standard\" or \"literal\"");
    c.tweedie = tw == "standard" ? TweedieForm::kStandard : TweedieForm::kLiteral;
    c.scale_by_alpha_bar = j.value("scale_by_alpha_bar", c.scale_by_alpha_bar);
    c.batch = j.value("batch", c.batch);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sampler config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<int> respace(int diffusion_steps, int steps) {
  if (steps < 1 || steps > diffusion_steps) {
    throw InvalidArgument("respaced step count " + std::to_string(steps) + " must lie in [1, " +
                          std::to_string(diffusion_steps) + "]");
  }
  std::vector<int> out;
  for (int i = 1; i <= steps; ++i) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * diffusion_steps / steps)));
  }
  return out;
}

std::vector<StepCoefficients> step_coefficients(const diffusion::NoiseSchedule& schedule, int steps) {
  const auto ts = respace(schedule.steps, steps);
  std::vector<StepCoefficients> out;
  for (std::size_t i = ts.size(); i-- > 0;) {
    StepCoefficients sc;
    sc.t = ts[i];
    sc.t_prev = i == 0 ? 0 : ts[i - 1];
    sc.alpha_bar = schedule.alpha_bar[static_cast<std::size_t>(sc.t)];
    sc.alpha_bar_prev = schedule.alpha_bar[static_cast<std::size_t>(sc.t_prev)];
    sc.beta = 1.0 - sc.alpha_bar / sc.alpha_bar_prev;
    sc.sigma = sc.t_prev == 0 ? 0.0 : std::sqrt((1.0 - sc.alpha_bar_prev) / (1.0 - sc.alpha_bar) * sc.beta);
    out.push_back(sc);
  }
  return out;
}

template <typename T>
std::vector<T> tweedie_denoise(std::span<const T> x_t, std::span<const T> eps, int t,
                               const diffusion::NoiseSchedule& schedule, TweedieForm form) {
  schedule.check(t);
  if (x_t.size() != eps.size()) throw InvalidArgument("tweedie_denoise: sizes differ");
  StepCoefficients sc;
  sc.alpha_bar = schedule.alpha_bar[static_cast<std::size_t>(t)];
  sc.beta = schedule.beta[static_cast<std::size_t>(t)];
  const double c = tweedie_coefficient(sc, form), inv = 1.0 / std::sqrt(sc.alpha_bar);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    out[i] = static_cast<T>((static_cast<double>(x_t[i]) - c * static_cast<double>(eps[i])) * inv);
  }
  return out;
}

template <typename T>
Tensor<T> hybrid_fuse(const Tensor<T>& x_obs, const Tensor<T>& x0t, const Tensor<T>& observed) {
  if (x_obs.shape() != x0t.shape() || x_obs.shape() != observed.shape()) {
    throw InvalidArgument("hybrid_fuse: shapes differ");
  }
  const auto missing = ad::add_scalar(ad::scale(observed, T(-1)), T(1));
  return ad::add(ad::mul(x_obs, observed), ad::mul(x0t, missing));
}

ShGuidance make_sh_guidance(const GradientTable& table, const AngularMask& mask, int order, double lambda_reg) {
  if (mask.size() != table.size()) {
    throw InvalidArgument("mask has " + std::to_string(mask.size()) + " directions, table has " +
                          std::to_string(table.size()));
  }
  const auto obs = mask.observed_indices();
  if (obs.empty()) throw InvalidArgument("no observed directions");
  std::optional<sh::ShFitter> full, part;
  try {
    full.emplace(sh::eval_sh_basis(table.bvecs, order), lambda_reg);
  } catch (const NumericError& e) {
    throw NumericError(std::string("full-table SH fit: ") + e.what());
  }
  std::vector<Vec3> obs_dirs;
  for (auto i : obs) obs_dirs.push_back(table.bvecs[i]);
  try {
    part.emplace(sh::eval_sh_basis(obs_dirs, order), lambda_reg);
  } catch (const NumericError& e) {
    throw NumericError(std::string("observed-direction SH fit: ") + e.what());
  }
  ShGuidance g;
  g.order = order;
  g.dirs = table.size();
  g.coeffs = full->coefficients();
  const Eigen::MatrixXd proj = full->basis().values * full->fit_operator();
  g.projection.resize(g.dirs * g.dirs);
  g.fit_full.resize(g.coeffs * g.dirs);
  g.fit_obs.assign(g.coeffs * g.dirs, 0.0);
  for (std::size_t i = 0; i < g.dirs; ++i) {
    for (std::size_t j = 0; j < g.dirs; ++j) g.projection[i * g.dirs + j] = proj(i, j);
  }
  for (std::size_t c = 0; c < g.coeffs; ++c) {
    for (std::size_t j = 0; j < g.dirs; ++j) g.fit_full[c * g.dirs + j] = full->fit_operator()(c, j);
    for (std::size_t k = 0; k < obs.size(); ++k) g.fit_obs[c * g.dirs + obs[k]] = part->fit_operator()(c, k);
  }
  return g;
}

int resolve_order(const SamplerConfig& config, const AngularMask& mask) {
  return config.sh_order >= 0 ? config.sh_order : sh::max_order_for(mask.observed_count());
}

template <typename T>
Tensor<T> oc_loss(const Tensor<T>& x_hat0, const Tensor<T>& x0t, const ShGuidance& g) {
  const auto r = oc_residual(x_hat0, x0t, g);
  return ad::sum(ad::mul(r, r));
}

template <typename T>
Tensor<T> scc_loss(const Tensor<T>& x_hat0, const Tensor<T>& c_obs, const ShGuidance& g) {
  const auto r = scc_residual(x_hat0, c_obs, g);
  return ad::sum(ad::mul(r, r));
}

template <typename T>
Tensor<T> observed_coefficients(const Tensor<T>& x_obs, const ShGuidance& g) {
  const auto fit = constant_from<T>(g.fit_obs, {g.coeffs, g.dirs});
  return ad::matmul(x_obs.detach(), fit, true).detach();
}

std::string SamplerTrace::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "step,t,oc_loss,scc_loss,oc_grad_norm,scc_grad_norm,update_norm\n";
  for (const auto& r : records) {
    os << r.step << ',' << r.t << ',' << r.oc_loss << ',' << r.scc_loss << ',' << r.oc_grad_norm << ','
       << r.scc_grad_norm << ',' << r.update_norm << '\n';
  }
  return os.str();
}

template <typename T>
GuidanceProblem<T> make_problem(std::span<const DwiVolume> observed, const AngularMask& mask, const SamplerConfig& c) {
  if (observed.empty()) throw InvalidArgument("nothing to sample");
  const auto& first = observed[0];
  const std::size_t h = first.height, w = first.width, n = first.dirs, b = observed.size();
  if (mask.size() != n) {
    throw InvalidArgument("mask has " + std::to_string(mask.size()) + " directions, volume has " + std::to_string(n));
  }
  if (mask.observed_count() == 0 || mask.masked_count() == 0) {
    throw InvalidArgument("mask must contain observed and missing directions");
  }
  GuidanceProblem<T> p;
  std::vector<T> x(b * h * w * n, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    const auto& v = observed[i];
    if (v.height != h || v.width != w || v.dirs != n || v.table.size() != n) {
      throw InvalidArgument("slices passed to the sampler differ in geometry");
    }
    for (std::size_t k = 0; k < h * w * n; ++k) {
      if (mask.observed[k % n]) x[i * h * w * n + k] = static_cast<T>(v.data[k]);
    }
    p.masks.push_back(mask);
  }
  p.tables.push_back(first.table);
  p.x_obs = Tensor<T>::constant({b, h, w, n}, std::move(x));
  p.observed = model::mask_volume<T>(p.masks, h, w);
  p.sh = make_sh_guidance(first.table, mask, resolve_order(c, mask), c.lambda_reg);
  p.c_obs = observed_coefficients(p.x_obs, p.sh);
  return p;
}

template <typename T>
GuidanceEval<T> evaluate_guidance(const model::DiffusionTransformer<T>& model, const GuidanceProblem<T>& p,
                                  const Tensor<T>& x_t, const StepCoefficients& sc,
                                  const diffusion::NoiseSchedule& schedule, const SamplerConfig& config,
                                  bool force_gradients) {
  const bool want_oc = force_gradients || config.weights.oc > 0.0;
  const bool want_scc = force_gradients || config.weights.scc > 0.0;
  const bool full = config.jacobian == Jacobian::kFull && (want_oc || want_scc);
  const std::size_t b = p.masks.size();
  const double c = tweedie_coefficient(sc, config.tweedie), inv = 1.0 / std::sqrt(sc.alpha_bar);

  Tensor<T> xt_leaf = full ? Tensor<T>::parameter(x_t.shape(), {x_t.data().begin(), x_t.data().end()}) : x_t.detach();
  model::NoiseQuery<T> q;
  q.x_t = xt_leaf;
  q.x_obs = p.x_obs;
  q.masks = p.masks;
  q.timesteps.assign(b, sc.t);
  q.tables = p.tables;
  const auto eps = model.predict_noise(q, schedule.steps);
  const auto x0t_graph = ad::scale(ad::sub(xt_leaf, ad::scale(eps, static_cast<T>(c))), static_cast<T>(inv));

  GuidanceEval<T> ev;
  ev.eps.assign(eps.data().begin(), eps.data().end());
  ev.x0t.assign(x0t_graph.data().begin(), x0t_graph.data().end());

  auto x0_leaf = Tensor<T>::parameter(x_t.shape(), ev.x0t);
  const auto xh = hybrid_fuse(p.x_obs, x0_leaf, p.observed);
  const auto r_oc = oc_residual(xh, x0_leaf, p.sh);
  const auto r_scc = scc_residual(xh, p.c_obs, p.sh);
  ev.oc_per_item = per_item_energy(r_oc, b);
  ev.scc_per_item = per_item_energy(r_scc, b);

  std::vector<T> g_oc(x_t.size(), T(0)), g_scc(x_t.size(), T(0));
  if (want_oc) g_oc = leaf_grad(ad::backward(ad::sum(ad::mul(r_oc, r_oc))), x0_leaf);
  if (want_scc) g_scc = leaf_grad(ad::backward(ad::sum(ad::mul(r_scc, r_scc))), x0_leaf);
  ev.oc_grad_norm = norm2<T>(g_oc);
  ev.scc_grad_norm = norm2<T>(g_scc);

  // Chain rule from the denoised estimate back to x_t.
  auto pull_back = [&](const std::vector<T>& g) -> std::vector<T> {
    if (!full) {
      std::vector<T> out(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<T>(static_cast<double>(g[i]) * inv);
      return out;
    }
    const auto proj = ad::sum(ad::mul(x0t_graph, Tensor<T>::constant(x_t.shape(), g)));
    return leaf_grad(ad::backward(proj), xt_leaf);
  };
  if (want_oc) ev.grad_oc = pull_back(g_oc);
  if (want_scc) ev.grad_scc = pull_back(g_scc);
  return ev;
}

template <typename T>
std::vector<T> guided_step(const model::DiffusionTransformer<T>& model, const GuidanceProblem<T>& p,
                           const std::vector<T>& x_t, const StepCoefficients& sc,
                           const diffusion::NoiseSchedule& schedule, const SamplerConfig& config,
                           std::vector<NoiseStream>& streams, std::vector<TraceRecord>* records, std::size_t step_index) {
  const std::size_t b = p.masks.size();
  if (streams.size() != b) throw InvalidArgument("guided_step needs one random stream per item");
  const auto& shape = p.x_obs.shape();
  const std::size_t per = x_t.size() / b, n = shape[3];
  const auto ev = evaluate_guidance(model, p, Tensor<T>::constant(shape, x_t), sc, schedule, config);

  const double alpha = 1.0 - sc.beta;
  const double eps_coef = sc.beta / std::sqrt(1.0 - sc.alpha_bar), inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double gscale = config.scale_by_alpha_bar ? sc.alpha_bar : 1.0;
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < b; ++i) {
    double update2 = 0.0;
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
      double v = (static_cast<double>(x_t[k]) - eps_coef * static_cast<double>(ev.eps[k])) * inv_sqrt_alpha;
      if (sc.sigma > 0.0) v += sc.sigma * streams[i]();
      double u = 0.0;
      if (!ev.grad_oc.empty()) u += config.weights.oc * static_cast<double>(ev.grad_oc[k]);
      if (!ev.grad_scc.empty()) u += config.weights.scc * static_cast<double>(ev.grad_scc[k]);
      u *= gscale;
      update2 += u * u;
      out[k] = static_cast<T>(v - u);
    }
    if (!std::isfinite(update2)) {
      SamplerTrace dump;
      if (records) dump.records = *records;
      throw NumericError("non-finite guidance gradient at t=" + std::to_string(sc.t) + "; trace so far:\n" +
                         dump.to_csv());
    }
    const double a = std::sqrt(sc.alpha_bar_prev), s = std::sqrt(1.0 - sc.alpha_bar_prev);
    const auto obs = p.x_obs.data();
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
      if (!p.masks[i].observed[k % n]) continue;
      double v = a * static_cast<double>(obs[k]);
      if (sc.t_prev > 0) v += s * streams[i]();
      out[k] = static_cast<T>(v);
    }
    if (records) {
      TraceRecord r;
      r.step = step_index;
      r.t = sc.t;
      r.oc_loss = ev.oc_per_item[i];
      r.scc_loss = ev.scc_per_item[i];
      r.oc_grad_norm = ev.oc_grad_norm;
      r.scc_grad_norm = ev.scc_grad_norm;
      r.update_norm = std::sqrt(update2);
      records[i].push_back(r);
    }
  }
  return out;
}

template <typename T>
SampleResult sample(model::DiffusionTransformer<T>& model, std::span<const DwiVolume> observed,
                    const AngularMask& mask, const diffusion::NoiseSchedule& schedule, const SamplerConfig& config) {
  config.validate();
  if (observed.empty()) throw InvalidArgument("nothing to sample");
  const auto& mc = model.config();
  if (observed[0].height != mc.height || observed[0].width != mc.width) {
    throw InvalidArgument("slice is " + std::to_string(observed[0].height) + "x" + std::to_string(observed[0].width) +
                          ", model expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width));
  }
  model.set_trainable(false);
  const auto steps = step_coefficients(schedule, config.steps);
  SampleResult result;
  for (std::size_t start = 0; start < observed.size(); start += config.batch) {
    const std::size_t count = std::min(config.batch, observed.size() - start);
    const auto chunk = observed.subspan(start, count);
    const auto problem = make_problem<T>(chunk, mask, config);
    const std::size_t per = chunk[0].data.size();
    std::vector<NoiseStream> streams;
    std::vector<T> x(count * per);
    for (std::size_t i = 0; i < count; ++i) {
      streams.push_back(make_stream(config.seed, start + i));
      for (std::size_t k = 0; k < per; ++k) x[i * per + k] = static_cast<T>(streams.back()());
    }
    std::vector<std::vector<TraceRecord>> records(count);
    for (std::size_t s = 0; s < steps.size(); ++s) {
      x = guided_step(model, problem, x, steps[s], schedule, config, streams, records.data(), s);
    }
    for (std::size_t i = 0; i < count; ++i) {
      DwiVolume v = chunk[i];
      for (std::size_t k = 0; k < per; ++k) {
        if (!mask.observed[k % v.dirs]) v.data[k] = static_cast<double>(x[i * per + k]);
      }
      result.volumes.push_back(std::move(v));
      result.traces.push_back({std::move(records[i])});
    }
  }
  return result;
}

std::vector<double> default_weight_grid() { return {0.0, 0.1, 0.3, 1.0, 3.0, 10.0}; }

GuidanceWeights select_best(std::span<const GridPoint> points) {
  if (points.empty()) throw InvalidArgument("empty weight grid");
  std::vector<GridPoint> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(), [](const GridPoint& a, const GridPoint& b) {
    const double sa = a.weights.oc + a.weights.scc, sb = b.weights.oc + b.weights.scc;
    if (sa != sb) return sa < sb;
    return a.weights.oc < b.weights.oc;
  });
  const GridPoint* best = &sorted[0];
  for (const auto& p : sorted) {
    if (p.psnr > best->psnr) best = &p;
  }
  return best->weights;
}

double masked_psnr(std::span<const DwiVolume> truth, std::span<const DwiVolume> recon, const AngularMask& mask) {
  if (truth.size() != recon.size() || truth.empty()) throw InvalidArgument("masked_psnr: set sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::size_t n = truth[i].dirs;
    if (recon[i].data.size() != truth[i].data.size() || mask.size() != n) {
      throw InvalidArgument("masked_psnr: geometry differs");
    }
    std::vector<double> a, b;
    for (std::size_t k = 0; k < truth[i].data.size(); ++k) {
      if (mask.observed[k % n]) continue;
      a.push_back(truth[i].data[k]);
      b.push_back(recon[i].data[k]);
    }
    acc += metrics::psnr(a, b);
  }
  return acc / static_cast<double>(truth.size());
}

template <typename T>
GridResult grid_search_weights(model::DiffusionTransformer<T>& model, std::span<const DwiVolume> truth,
                               const AngularMask& mask, const diffusion::NoiseSchedule& schedule,
                               const SamplerConfig& base, std::span<const double> oc_grid,
                               std::span<const double> scc_grid) {
  if (oc_grid.empty() || scc_grid.empty() || truth.empty()) throw InvalidArgument("grid search needs candidates and data");
  GridResult out;
  for (double oc : oc_grid) {
    for (double scc : scc_grid) {
      SamplerConfig c = base;
      c.weights = {oc, scc};
      const auto res = sample(model, truth, mask, schedule, c);
      out.points.push_back({c.weights, masked_psnr(truth, res.volumes, mask)});
    }
  }
  out.best = select_best(out.points);
  return out;
}

#define QSR_SAMPLER_INSTANTIATE(T)                                                                                 \
  template std::vector<T> tweedie_denoise(std::span<const T>, std::span<const T>, int,                            \
                                          const diffusion::NoiseSchedule&, TweedieForm);                          \
  template Tensor<T> hybrid_fuse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> oc_loss(const Tensor<T>&, const Tensor<T>&, const ShGuidance&);                              \
  template Tensor<T> scc_loss(const Tensor<T>&, const Tensor<T>&, const ShGuidance&);                             \
  template Tensor<T> observed_coefficients(const Tensor<T>&, const ShGuidance&);                                  \
  template GuidanceProblem<T> make_problem(std::span<const DwiVolume>, const AngularMask&, const SamplerConfig&); \
  template GuidanceEval<T> evaluate_guidance(const model::DiffusionTransformer<T>&, const GuidanceProblem<T>&,    \
                                             const Tensor<T>&, const StepCoefficients&,                           \
                                             const diffusion::NoiseSchedule&, const SamplerConfig&, bool);        \
  template std::vector<T> guided_step(const model::DiffusionTransformer<T>&, const GuidanceProblem<T>&,           \
                                      const std::vector<T>&, const StepCoefficients&,                             \
                                      const diffusion::NoiseSchedule&, const SamplerConfig&, std::vector<NoiseStream>&,   \
                                      std::vector<TraceRecord>*, std::size_t);                                    \
  template SampleResult sample(model::DiffusionTransformer<T>&, std::span<const DwiVolume>, const AngularMask&,  \
                               const diffusion::NoiseSchedule&, const SamplerConfig&);                            \
  template GridResult grid_search_weights(model::DiffusionTransformer<T>&, std::span<const DwiVolume>,            \
                                          const AngularMask&, const diffusion::NoiseSchedule&,                    \
                                          const SamplerConfig&, std::span<const double>, std::span<const double>);

QSR_SAMPLER_INSTANTIATE(float)
QSR_SAMPLER_INSTANTIATE(double)

}  // namespace qsr::sampler
