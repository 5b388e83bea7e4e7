#pragma once

// Synthetic ground truth: electrostatic gradient schemes, multi-tensor
// signals on 2D slices, Rician magnitude noise, angular subsampling.

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

#include "qsr/dwi.hpp"

namespace qsr::phantom {

enum class Exec { kSerial, kParallel };

/// Antipodal Coulomb energy sum_{i<j} 1/|u_i - u_j| + 1/|u_i + u_j|.
double electrostatic_energy(std::span<const Vec3> dirs);

struct DirectionOptions {
  int max_iterations = 4000;
  double tolerance = 1e-12;  // relative energy change that stops the descent
};

/// Antipodally symmetric repulsion scheme of n unit vectors, deterministic in seed.
std::vector<Vec3> generate_directions(std::size_t n, std::uint64_t seed, const DirectionOptions& opts = {});

/// Single-shell table: n electrostatic directions at one b-value.
GradientTable make_shell(std::size_t n, double bval, std::uint64_t seed);

/// Chooses n_in of the weighted table entries with low antipodal energy
/// (exhaustive when there are at most 20000 subsets, otherwise
/// farthest-point seeding from every start, then pairwise exchange).
AngularMask subsample_directions(const GradientTable& table, std::size_t n_in);

struct TensorCompartment {
  double fraction = 1.0;
  Eigen::Matrix3d diffusivity = Eigen::Matrix3d::Identity() * 1e-3;  // mm^2/s
};

using VoxelModel = std::vector<TensorCompartment>;

/// S(b, g) = sum_k f_k exp(-b g^T D_k g) for every voxel of an H x W slice.
DwiVolume simulate_multitensor(std::span<const VoxelModel> voxels, std::size_t height, std::size_t width,
                               const GradientTable& table, Exec exec = Exec::kParallel);

/// s' = sqrt((s + n1)^2 + n2^2), n ~ N(0, sigma^2). Per-voxel streams derived from seed.
DwiVolume add_rician_noise(const DwiVolume& volume, double sigma, std::uint64_t seed, Exec exec = Exec::kParallel);

/// Tensor with principal eigenvalue `axial` along `axis` and `radial` across.
Eigen::Matrix3d axial_tensor(const Vec3& axis, double axial, double radial);

struct SliceSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  double axial = 1.7e-3;
  double radial = 0.2e-3;
  double csf_diffusivity = 3.0e-3;
  double min_crossing_deg = 45.0;
  double max_crossing_deg = 90.0;
  double max_csf_fraction = 0.6;
  double max_second_fraction = 0.5;
};

/// Smoothly varying two-fiber crossings plus an isotropic CSF compartment.
std::vector<VoxelModel> generate_slice_models(const SliceSpec& spec, std::uint64_t seed);

}  // namespace qsr::phantom
