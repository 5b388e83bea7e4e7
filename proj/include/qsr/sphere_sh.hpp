#pragma once

// Real symmetric (even-degree) spherical harmonics on S^2: basis evaluation,
// Laplace-Beltrami-regularized least-squares fitting, and spectral operators.
//
// Basis convention (orthonormal on S^2, no Condon-Shortley phase):
//   m < 0 : sqrt(2) * N_l^|m| * P_l^|m|(cos theta) * sin(|m| phi)
//   m = 0 : N_l^0 * P_l^0(cos theta)
//   m > 0 : sqrt(2) * N_l^m * P_l^m(cos theta) * cos(m phi)
// Coefficients are ordered by ascending l, then ascending m.

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace qsr::sh {

using Vec3 = Eigen::Vector3d;

enum class Exec { kSerial, kParallel };

struct ShTerm {
  int l = 0;
  int m = 0;
  friend bool operator==(const ShTerm&, const ShTerm&) = default;
};

/// Ordered (l, m) enumeration for even l up to `order`.
class ShIndex {
 public:
  explicit ShIndex(int order);

  int order() const noexcept { return order_; }
  std::size_t size() const noexcept { return terms_.size(); }
  const ShTerm& operator[](std::size_t i) const { return terms_[i]; }
  std::span<const ShTerm> terms() const noexcept { return terms_; }
  /// Position of (l, m); throws for odd or out-of-range terms.
  std::size_t position(int l, int m) const;

 private:
  int order_;
  std::vector<ShTerm> terms_;
};

/// (L+1)(L+2)/2 for even L.
std::size_t coefficient_count(int order);
/// Largest even L whose coefficient count fits into `directions` samples.
int max_order_for(std::size_t directions);

ShIndex sh_index_table(int order);

/// Rows are directions, columns follow ShIndex ordering.
struct ShBasis {
  Eigen::MatrixXd values;
  int order = 0;
  std::vector<Vec3> directions;
};

/// Per-voxel (or single) coefficient vector.
struct ShCoefficients {
  Eigen::VectorXd coeffs;
  int order = 0;
};

ShBasis eval_sh_basis(std::span<const Vec3> directions, int order);

/// Closed-form minimizer of ||Y c - s||^2 + lambda * sum l(l+1) c^2.
ShCoefficients fit_sh(std::span<const double> signal, const ShBasis& basis, double lambda_reg);
std::vector<double> synth_from_sh(const ShCoefficients& coeffs, const ShBasis& basis);

ShCoefficients laplace_beltrami_apply(const ShCoefficients& coeffs);
/// 1/2 * sum l(l+1) c^2, the Dirichlet energy 1/2 * integral |grad f|^2.
double smoothness_energy(const ShCoefficients& coeffs);
/// c_lm * exp(-l(l+1) tau).
ShCoefficients heat_smooth(const ShCoefficients& coeffs, double tau);

/// -l(l+1) per coefficient in ShIndex order.
Eigen::VectorXd laplace_beltrami_eigenvalues(int order);

/// Precomputed regularized least-squares operator for one direction set.
/// Batched fits reuse the factorization across voxels.
class ShFitter {
 public:
  ShFitter(ShBasis basis, double lambda_reg);

  const ShBasis& basis() const noexcept { return basis_; }
  int order() const noexcept { return basis_.order; }
  double lambda_reg() const noexcept { return lambda_; }
  std::size_t directions() const noexcept { return static_cast<std::size_t>(basis_.values.rows()); }
  std::size_t coefficients() const noexcept { return static_cast<std::size_t>(basis_.values.cols()); }
  /// (Y^T Y + lambda * Lambda)^-1 Y^T, coefficients x directions.
  const Eigen::MatrixXd& fit_operator() const noexcept { return fit_op_; }

  ShCoefficients fit(std::span<const double> signal) const;

  /// signals: voxels x directions (row-major) -> voxels x coefficients (row-major).
  void fit_batch(std::span<const double> signals, std::span<double> coeffs, Exec exec = Exec::kParallel) const;

 private:
  ShBasis basis_;
  double lambda_;
  Eigen::MatrixXd fit_op_;
};

/// Default Tikhonov weight on the Laplace-Beltrami penalty.
inline constexpr double kDefaultLambdaReg = 0.006;

}  // namespace qsr::sh
