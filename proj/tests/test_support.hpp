#pragma once

// Shared helpers for the test binaries: quadrature on S^2 and small builders.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "qsr/sphere_sh.hpp"

namespace qsr::test {

struct Quadrature {
  std::vector<Eigen::Vector3d> dirs;
  std::vector<double> weights;
  std::vector<double> theta;
  std::vector<double> phi;
};

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
}

/// Gauss-Legendre in cos(theta) times a uniform phi grid; exact for
/// band-limited integrands up to degree min(2 n_theta - 1, n_phi - 1).
inline Quadrature product_quadrature(int n_theta, int n_phi) {
  std::vector<double> x, w;
  gauss_legendre(n_theta, x, w);
  Quadrature q;
  for (int i = 0; i < n_theta; ++i) {
    const double th = std::acos(x[i]);
    for (int j = 0; j < n_phi; ++j) {
      const double ph = 2.0 * std::numbers::pi * j / n_phi;
      q.dirs.emplace_back(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), x[i]);
      q.weights.push_back(w[i] * 2.0 * std::numbers::pi / n_phi);
      q.theta.push_back(th);
      q.phi.push_back(ph);
    }
  }
  return q;
}

inline Eigen::Vector3d from_angles(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

/// 1/2 * integral |grad f|^2 over S^2 for f = Y c, with the surface gradient
/// from central differences in theta and phi.
inline double dirichlet_energy_quadrature(const sh::ShCoefficients& c, int n_theta = 40, int n_phi = 80) {
  const auto q = product_quadrature(n_theta, n_phi);
  const double h = 1e-5;
  double total = 0.0;
  for (std::size_t i = 0; i < q.dirs.size(); ++i) {
    const double th = q.theta[i], ph = q.phi[i];
    const std::vector<Eigen::Vector3d> pts = {from_angles(th + h, ph), from_angles(th - h, ph),
                                              from_angles(th, ph + h), from_angles(th, ph - h)};
    const auto f = sh::synth_from_sh(c, sh::eval_sh_basis(pts, c.order));
    const double dth = (f[0] - f[1]) / (2 * h);
    const double dph = (f[2] - f[3]) / (2 * h) / std::sin(th);
    total += q.weights[i] * (dth * dth + dph * dph);
  }
  return 0.5 * total;
}

inline sh::ShCoefficients random_coefficients(int order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  sh::ShCoefficients c{Eigen::VectorXd(static_cast<Eigen::Index>(sh::coefficient_count(order))), order};
  for (Eigen::Index i = 0; i < c.coeffs.size(); ++i) c.coeffs(i) = nd(rng);
  return c;
}

}  // namespace qsr::test

#include "qsr/model.hpp"
#include "qsr/phantom.hpp"

namespace qsr::test {

/// Overwrites every parameter with N(0, scale^2 / fan_in) values so that no
/// layer is exactly zero (fan_in = leading dim for matrices, 1 otherwise).
template <typename T>
void perturb_parameters(model::DiffusionTransformer<T>& m, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (const auto& [name, p] : m.parameters()) {
    auto tensor = p;
    const double fan_in = tensor.rank() == 2 ? static_cast<double>(tensor.dim(0)) : 1.0;
    const double sd = scale / std::sqrt(fan_in) * (tensor.rank() == 2 ? 1.0 : 0.1);
    for (auto& v : tensor.mutable_data()) v = static_cast<T>(sd * nd(rng));
  }
}

template <typename T>
ad::Tensor<T> random_volume(ad::Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(nd(rng));
  return ad::Tensor<T>::constant(std::move(shape), std::move(v));
}

/// Small model configuration for exact and finite-difference tests.
inline model::ModelConfig tiny_config(bool modulation = true, std::size_t depth = 2) {
  model::ModelConfig c;
  c.height = 4;
  c.width = 4;
  c.patch = 2;
  c.dim = 8;
  c.depth = depth;
  c.heads = 2;
  c.mlp_ratio = 4;
  c.geometry_modulation = modulation;
  c.seed = 3;
  return c;
}

/// Every-other-direction mask of length n (direction 0 observed).
inline AngularMask alternating_mask(std::size_t n) {
  AngularMask m{std::vector<std::uint8_t>(n, 0)};
  for (std::size_t i = 0; i < n; i += 2) m.observed[i] = 1;
  return m;
}

template <typename T>
model::NoiseQuery<T> tiny_query(const model::ModelConfig& c, std::size_t batch, std::size_t dirs, std::uint64_t seed) {
  model::NoiseQuery<T> q;
  q.x_t = random_volume<T>({batch, c.height, c.width, dirs}, seed);
  q.x_obs = random_volume<T>({batch, c.height, c.width, dirs}, seed + 1, 0.3);
  for (std::size_t b = 0; b < batch; ++b) {
    q.masks.push_back(alternating_mask(dirs));
    q.timesteps.push_back(static_cast<int>(10 + 37 * b));
  }
  q.tables.push_back(phantom::make_shell(dirs, 1000.0, seed));
  return q;
}

struct ParamGradReport {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Central differences on `samples` coordinates of every parameter tensor.
template <typename Loss>
ParamGradReport parameter_finite_diff(model::DiffusionTransformer<double>& m, Loss loss_fn, double eps,
                                      std::size_t samples, std::uint64_t seed, double abs_floor = 1e-6) {
  const auto loss = loss_fn();
  const auto grads = ad::backward(loss);
  ParamGradReport report;
  std::mt19937_64 rng(seed);
  for (const auto& [name, p] : m.parameters()) {
    auto tensor = p;
    std::uniform_int_distribution<std::size_t> pick(0, tensor.size() - 1);
    for (std::size_t s = 0; s < std::min(samples, tensor.size()); ++s) {
      const std::size_t i = samples >= tensor.size() ? s : pick(rng);
      const double analytic = grads.contains(tensor) ? grads.of(tensor)[i] : 0.0;
      const double base = tensor.data()[i];
      tensor.mutable_data()[i] = base + eps;
      const double up = loss_fn().item();
      tensor.mutable_data()[i] = base - eps;
      const double down = loss_fn().item();
      tensor.mutable_data()[i] = base;
      const double numeric = (up - down) / (2 * eps);
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

/// Noiseless phantom slices sharing one shell of `dirs` directions.
inline std::vector<DwiVolume> tiny_dataset(std::size_t count, std::size_t size, std::size_t dirs, std::uint64_t seed) {
  const auto table = phantom::make_shell(dirs, 1000.0, seed);
  phantom::SliceSpec spec;
  spec.height = size;
  spec.width = size;
  std::vector<DwiVolume> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto models = phantom::generate_slice_models(spec, seed * 1000 + i);
    out.push_back(phantom::simulate_multitensor(models, size, size, table));
  }
  return out;
}

}  // namespace qsr::test
