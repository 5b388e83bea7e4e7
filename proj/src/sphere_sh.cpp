#include "qsr/sphere_sh.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>

#include "qsr/error.hpp"

namespace qsr::sh {
namespace {

void check_order(int order) {
  if (order < 0 || order % 2 != 0) {
    throw InvalidArgument("SH order must be even and non-negative, got " + std::to_string(order));
  }
}

// Normalized associated Legendre values N_l^m P_l^m(x) for even l <= order,
// 0 <= m <= l, stored at [l * (order + 1) + m].
void normalized_legendre(int order, double x, std::vector<double>& out) {
  const int stride = order + 1;
  out.assign(static_cast<std::size_t>(stride * stride), 0.0);
  const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
  double pmm = 0.5 / std::sqrt(std::numbers::pi);  // m = l = 0
  for (int m = 0; m <= order; ++m) {
    if (m > 0) pmm *= s * std::sqrt((2.0 * m + 1.0) / (2.0 * m));
    out[static_cast<std::size_t>(m * stride + m)] = pmm;
    if (m == order) break;
    double prev2 = pmm;
    double prev1 = x * std::sqrt(2.0 * m + 3.0) * pmm;
    out[static_cast<std::size_t>((m + 1) * stride + m)] = prev1;
    for (int l = m + 2; l <= order; ++l) {
      const double l2 = static_cast<double>(l) * l;
      const double m2 = static_cast<double>(m) * m;
      const double a = std::sqrt((4.0 * l2 - 1.0) / (l2 - m2));
      const double b = std::sqrt(((l - 1.0) * (l - 1.0) - m2) / (4.0 * (l - 1.0) * (l - 1.0) - 1.0));
      const double cur = a * (x * prev1 - b * prev2);
      out[static_cast<std::size_t>(l * stride + m)] = cur;
      prev2 = prev1;
      prev1 = cur;
    }
  }
}

void fill_row(const ShIndex& index, const Vec3& u, std::vector<double>& legendre, double* row) {
  const int order = index.order();
  normalized_legendre(order, u.z(), legendre);
  const double phi = std::atan2(u.y(), u.x());
  const int stride = order + 1;
  for (std::size_t j = 0; j < index.size(); ++j) {
    const auto [l, m] = index[j];
    const int am = std::abs(m);
    const double p = legendre[static_cast<std::size_t>(l * stride + am)];
    if (m == 0) {
      row[j] = p;
    } else if (m > 0) {
      row[j] = std::numbers::sqrt2 * p * std::cos(am * phi);
    } else {
      row[j] = std::numbers::sqrt2 * p * std::sin(am * phi);
    }
  }
}

Eigen::VectorXd penalty_diagonal(int order) {
  return -laplace_beltrami_eigenvalues(order);
}

}  // namespace

ShIndex::ShIndex(int order) : order_(order) {
  check_order(order);
  for (int l = 0; l <= order; l += 2) {
    for (int m = -l; m <= l; ++m) terms_.push_back({l, m});
  }
}

std::size_t ShIndex::position(int l, int m) const {
  if (l < 0 || l > order_ || l % 2 != 0 || std::abs(m) > l) {
    throw InvalidArgument("no SH term (" + std::to_string(l) + "," + std::to_string(m) + ") at order " +
                          std::to_string(order_));
  }
  return coefficient_count(l - 2 < 0 ? -2 : l - 2) + static_cast<std::size_t>(m + l);
}

std::size_t coefficient_count(int order) {
  if (order < 0) return 0;
  check_order(order);
  const auto L = static_cast<std::size_t>(order);
  return (L + 1) * (L + 2) / 2;
}

int max_order_for(std::size_t directions) {
  if (directions == 0) throw InvalidArgument("no directions to choose an SH order for");
  int order = 0;
  while (coefficient_count(order + 2) <= directions) order += 2;
  return order;
}

ShIndex sh_index_table(int order) { return ShIndex(order); }

ShBasis eval_sh_basis(std::span<const Vec3> directions, int order) {
  const ShIndex index(order);
  ShBasis basis;
  basis.order = order;
  basis.directions.assign(directions.begin(), directions.end());
  basis.values.resize(static_cast<Eigen::Index>(directions.size()), static_cast<Eigen::Index>(index.size()));
  std::vector<double> legendre;
  std::vector<double> row(index.size());
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const Vec3& u = directions[i];
    if (std::abs(u.norm() - 1.0) > 1e-9) {
      std::ostringstream os;
      os << "direction " << i << " is not unit length (norm " << u.norm() << ")";
      throw InvalidArgument(os.str());
    }
    fill_row(index, u, legendre, row.data());
    for (std::size_t j = 0; j < row.size(); ++j) basis.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return basis;
}

ShFitter::ShFitter(ShBasis basis, double lambda_reg) : basis_(std::move(basis)), lambda_(lambda_reg) {
  if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg)) {
    throw InvalidArgument("lambda_reg must be finite and non-negative");
  }
  const auto& Y = basis_.values;
  const Eigen::Index n_coef = Y.cols();
  const Eigen::Index n_dirs = Y.rows();
  Eigen::MatrixXd normal = Y.transpose() * Y;
  normal.diagonal() += lambda_ * penalty_diagonal(basis_.order);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(normal, Eigen::EigenvaluesOnly);
  const double hi = eig.eigenvalues().maxCoeff();
  const double lo = eig.eigenvalues().minCoeff();
  if (n_dirs == 0 || !(hi > 0.0) || lo <= 1e-12 * hi) {
    std::ostringstream os;
    os << "singular SH normal matrix: order " << basis_.order << " needs at least " << n_coef
       << " well-spread directions at lambda_reg = 0, got " << n_dirs;
    throw NumericError(os.str());
  }
  fit_op_ = normal.ldlt().solve(Y.transpose());
}

ShCoefficients ShFitter::fit(std::span<const double> signal) const {
  if (signal.size() != directions()) {
    throw InvalidArgument("signal has " + std::to_string(signal.size()) + " samples, basis has " +
                          std::to_string(directions()) + " directions");
  }
  const Eigen::Map<const Eigen::VectorXd> s(signal.data(), static_cast<Eigen::Index>(signal.size()));
  return {fit_op_ * s, basis_.order};
}

void ShFitter::fit_batch(std::span<const double> signals, std::span<double> coeffs, Exec exec) const {
  const std::size_t n = directions();
  const std::size_t k = coefficients();
  if (signals.size() % n != 0 || coeffs.size() != signals.size() / n * k) {
    throw InvalidArgument("fit_batch: buffer sizes do not match " + std::to_string(n) + " directions / " +
                          std::to_string(k) + " coefficients");
  }
  const auto voxels = static_cast<std::int64_t>(signals.size() / n);
  if (exec == Exec::kSerial) {
    for (std::int64_t v = 0; v < voxels; ++v) {
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += fit_op_(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) * signals[v * n + i];
        }
        coeffs[v * k + j] = acc;
      }
    }
    return;
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  constexpr std::int64_t kChunk = 256;
  const std::int64_t chunks = (voxels + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < chunks; ++c) {
    const std::int64_t v0 = c * kChunk;
    const std::int64_t len = std::min(kChunk, voxels - v0);
    Eigen::Map<const RowMat> s(signals.data() + v0 * static_cast<std::int64_t>(n), len, static_cast<Eigen::Index>(n));
    Eigen::Map<RowMat> out(coeffs.data() + v0 * static_cast<std::int64_t>(k), len, static_cast<Eigen::Index>(k));
    out.noalias() = s * fit_op_.transpose();
  }
}

ShCoefficients fit_sh(std::span<const double> signal, const ShBasis& basis, double lambda_reg) {
  return ShFitter(basis, lambda_reg).fit(signal);
}

std::vector<double> synth_from_sh(const ShCoefficients& coeffs, const ShBasis& basis) {
  if (coeffs.coeffs.size() != basis.values.cols()) {
    throw InvalidArgument("synth_from_sh: " + std::to_string(coeffs.coeffs.size()) + " coefficients for a basis with " +
                          std::to_string(basis.values.cols()) + " columns");
  }
  const Eigen::VectorXd s = basis.values * coeffs.coeffs;
  return {s.data(), s.data() + s.size()};
}

Eigen::VectorXd laplace_beltrami_eigenvalues(int order) {
  const ShIndex index(order);
  Eigen::VectorXd ev(static_cast<Eigen::Index>(index.size()));
  for (std::size_t j = 0; j < index.size(); ++j) {
    const double l = index[j].l;
    ev(static_cast<Eigen::Index>(j)) = -l * (l + 1.0);
  }
  return ev;
}

namespace {
void check_coeffs(const ShCoefficients& c) {
  if (static_cast<std::size_t>(c.coeffs.size()) != coefficient_count(c.order)) {
    throw InvalidArgument("coefficient vector length " + std::to_string(c.coeffs.size()) + " does not match order " +
                          std::to_string(c.order));
  }
}
}  // namespace

ShCoefficients laplace_beltrami_apply(const ShCoefficients& coeffs) {
  check_coeffs(coeffs);
  return {coeffs.coeffs.cwiseProduct(laplace_beltrami_eigenvalues(coeffs.order)), coeffs.order};
}

double smoothness_energy(const ShCoefficients& coeffs) {
  check_coeffs(coeffs);
  const Eigen::VectorXd w = -laplace_beltrami_eigenvalues(coeffs.order);
  return 0.5 * w.dot(coeffs.coeffs.cwiseAbs2());
}

ShCoefficients heat_smooth(const ShCoefficients& coeffs, double tau) {
  check_coeffs(coeffs);
  if (!(tau >= 0.0)) throw InvalidArgument("heat_smooth: tau must be non-negative");
  const Eigen::VectorXd ev = laplace_beltrami_eigenvalues(coeffs.order);
  Eigen::VectorXd out = coeffs.coeffs;
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    // exp(-inf * 0) is NaN; the l = 0 term is untouched for any tau.
    out(j) = ev(j) == 0.0 ? out(j) : out(j) * std::exp(ev(j) * tau);
  }
  return {out, coeffs.order};
}

}  // namespace qsr::sh
