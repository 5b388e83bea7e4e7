#pragma once

// Shared diffusion-MRI data types: gradient tables, angular masks and
// b0-normalized DWI slices.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <vector>

namespace qsr {

using Vec3 = Eigen::Vector3d;

struct GradientTable {
  std::vector<double> bvals;  // s/mm^2
  std::vector<Vec3> bvecs;    // unit where bval > 0

  std::size_t size() const noexcept { return bvals.size(); }
  /// Throws InvalidArgument on length mismatch, negative b or non-unit vectors.
  void validate() const;
  /// Entries with b > 0.
  std::vector<std::size_t> weighted_indices() const;
  GradientTable subset(const std::vector<std::size_t>& indices) const;
};

/// Observed/missing flag per direction. Masking is always whole-direction.
struct AngularMask {
  std::vector<std::uint8_t> observed;

  std::size_t size() const noexcept { return observed.size(); }
  std::size_t observed_count() const;
  std::size_t masked_count() const { return size() - observed_count(); }
  /// Masked fraction k = #masked / N.
  double ratio() const;
  std::vector<std::size_t> observed_indices() const;
  std::vector<std::size_t> masked_indices() const;

  static AngularMask all_observed(std::size_t n) { return {std::vector<std::uint8_t>(n, 1)}; }
  static AngularMask all_masked(std::size_t n) { return {std::vector<std::uint8_t>(n, 0)}; }
};

/// One 2D slice of b0-normalized signal, layout [height][width][direction].
struct DwiVolume {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dirs = 0;
  std::vector<double> data;
  GradientTable table;

  DwiVolume() = default;
  DwiVolume(std::size_t h, std::size_t w, GradientTable t)
      : height(h), width(w), dirs(t.size()), data(h * w * t.size(), 0.0), table(std::move(t)) {}

  std::size_t voxels() const noexcept { return height * width; }
  double& at(std::size_t y, std::size_t x, std::size_t n) { return data[(y * width + x) * dirs + n]; }
  double at(std::size_t y, std::size_t x, std::size_t n) const { return data[(y * width + x) * dirs + n]; }
  /// Direction image [height][width] for direction n.
  std::vector<double> direction_image(std::size_t n) const;
};

}  // namespace qsr
