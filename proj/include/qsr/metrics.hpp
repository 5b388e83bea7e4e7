#pragma once

// Image-quality metrics and downstream DTI fitting.

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/dwi.hpp"

namespace qsr::metrics {

enum class Exec { kSerial, kParallel };

/// Returned by psnr() for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE). Identical inputs give kPsnrIdentical.
double psnr(std::span<const double> x, std::span<const double> y, double peak = 1.0);

struct SsimOptions {
  std::size_t window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over all fully contained windows of two H x W images
/// (uniform window, sample covariance).
double ssim(std::span<const double> x, std::span<const double> y, std::size_t height, std::size_t width,
            const SsimOptions& opts = {});

double pearson_r(std::span<const double> x, std::span<const double> y);

/// Unique components (xx, yy, zz, xy, xz, yz) per voxel, mm^2/s.
struct DiffusionTensorField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::array<double, 6>> tensors;
};

/// Unweighted log-linear least squares on the b > 0 entries. Uses the mean of
/// the b = 0 entries as S0 when present, otherwise the data are taken as
/// already b0-normalized.
DiffusionTensorField fit_dti(const DwiVolume& volume, Exec exec = Exec::kParallel);

enum DtiFlag : std::uint8_t { kDtiOk = 0, kNegativeEigenvalue = 1, kNonFinite = 2 };

struct DtiMaps {
  std::vector<double> fa;
  std::vector<double> md;
  std::vector<double> ad;
  std::vector<std::uint8_t> flags;
};

/// Sorted eigenvalues l1 >= l2 >= l3 of one tensor.
std::array<double, 3> tensor_eigenvalues(const std::array<double, 6>& d);
double fractional_anisotropy(const std::array<double, 3>& eigenvalues);
DtiMaps dti_scalars(const DiffusionTensorField& field);
/// Min-max rescale to [0, 1]; constant maps become all zero.
std::vector<double> normalize_range(std::span<const double> map);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
};
Summary summarize(std::span<const double> values);

/// Comparison of a reconstruction with ground truth over a set of directions.
struct MetricReport {
  std::vector<std::size_t> directions;
  std::vector<double> psnr;  // per direction
  std::vector<double> ssim;  // per direction
  double volume_psnr = 0.0;  // over all evaluated voxel-direction pairs
  double pearson = 0.0;      // over all evaluated voxel-direction pairs; NaN if either side is constant
  Summary psnr_summary;
  Summary ssim_summary;
};

/// Evaluates the listed directions (all when empty).
MetricReport compare_volumes(const DwiVolume& truth, const DwiVolume& recon, std::vector<std::size_t> directions = {});

nlohmann::json to_json(const MetricReport& report);
/// One row per direction plus a trailing "volume" row.
std::string to_csv(const MetricReport& report);

/// JSON-safe encoding of a possibly infinite PSNR ("inf" string sentinel).
nlohmann::json psnr_json(double value);

}  // namespace qsr::metrics
