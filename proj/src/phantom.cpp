#include "qsr/phantom.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <numbers>
#include <random>

#include "qsr/error.hpp"
#include "qsr/rng.hpp"

namespace qsr::phantom {
namespace {

constexpr double kExhaustiveSubsets = 20000.0;

double pair_energy(const Vec3& a, const Vec3& b) { return 1.0 / (a - b).norm() + 1.0 / (a + b).norm(); }

Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(normal(rng), normal(rng), normal(rng));
  } while (v.norm() < 1e-8);
  return v.normalized();
}

void canonicalize(std::vector<Vec3>& dirs) {
  for (auto& u : dirs) {
    if (u.z() < 0.0 || (u.z() == 0.0 && (u.y() < 0.0 || (u.y() == 0.0 && u.x() < 0.0)))) u = -u;
  }
}

void check_compartments(const VoxelModel& model, std::size_t voxel) {
  if (model.empty()) throw InvalidArgument("voxel " + std::to_string(voxel) + " has no compartments");
  double total = 0.0;
  for (const auto& c : model) {
    if (!(c.fraction >= 0.0 && c.fraction <= 1.0)) {
      throw InvalidArgument("voxel " + std::to_string(voxel) + ": volume fraction outside [0, 1]");
    }
    total += c.fraction;
    const Eigen::Matrix3d& D = c.diffusivity;
    if ((D - D.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1e-30, D.cwiseAbs().maxCoeff())) {
      throw InvalidArgument("voxel " + std::to_string(voxel) + ": diffusion tensor is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(D, Eigen::EigenvaluesOnly);
    if (!(eig.eigenvalues().minCoeff() > 0.0)) {
      throw InvalidArgument("voxel " + std::to_string(voxel) + ": diffusion tensor is not positive definite");
    }
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw InvalidArgument("voxel " + std::to_string(voxel) + ": volume fractions sum to " + std::to_string(total));
  }
}

double signal_of(const VoxelModel& model, double bval, const Vec3& g) {
  double s = 0.0;
  double total = 0.0;
  for (const auto& c : model) {
    s += c.fraction * std::exp(-bval * g.dot(c.diffusivity * g));
    total += c.fraction;
  }
  return s / total;
}

struct SmoothField {
  double kx, ky, phase, amp;
  double operator()(double x, double y) const { return amp * std::sin(kx * x + ky * y + phase); }
};

SmoothField random_wave(Rng& rng, double max_freq, double amp) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double angle = 2.0 * std::numbers::pi * u(rng);
  const double freq = max_freq * (0.3 + 0.7 * u(rng));
  return {freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * u(rng), amp};
}

}  // namespace

double electrostatic_energy(std::span<const Vec3> dirs) {
  double e = 0.0;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    for (std::size_t j = i + 1; j < dirs.size(); ++j) e += pair_energy(dirs[i], dirs[j]);
  }
  return e;
}

std::vector<Vec3> generate_directions(std::size_t n, std::uint64_t seed, const DirectionOptions& opts) {
  if (n == 0) throw InvalidArgument("generate_directions: n must be >= 1");
  Rng rng = make_rng(seed, 0xD1EC7);
  std::vector<Vec3> dirs(n);
  for (auto& u : dirs) u = random_unit(rng);
  if (n == 1) return dirs;

  std::vector<Vec3> grad(n), trial(n);
  double energy = electrostatic_energy(dirs);
  double step = 0.1 / static_cast<double>(n);
  for (int it = 0; it < opts.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 g = Vec3::Zero();
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const Vec3 dm = dirs[i] - dirs[j];
        const Vec3 dp = dirs[i] + dirs[j];
        g -= dm / std::pow(dm.norm(), 3) + dp / std::pow(dp.norm(), 3);
      }
      grad[i] = g - g.dot(dirs[i]) * dirs[i];  // tangential component
    }
    bool accepted = false;
    while (step > 1e-14) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = (dirs[i] - step * grad[i]).normalized();
      const double e = electrostatic_energy(trial);
      if (e < energy) {
        const double change = (energy - e) / energy;
        dirs.swap(trial);
        energy = e;
        step *= 1.5;
        accepted = true;
        if (change < opts.tolerance) it = opts.max_iterations;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  canonicalize(dirs);
  return dirs;
}

GradientTable make_shell(std::size_t n, double bval, std::uint64_t seed) {
  GradientTable table;
  table.bvecs = generate_directions(n, seed);
  table.bvals.assign(n, bval);
  return table;
}

AngularMask subsample_directions(const GradientTable& table, std::size_t n_in) {
  table.validate();
  if (n_in == 0) throw InvalidArgument("subsample_directions: n_in must be >= 1");
  const auto cand = table.weighted_indices();
  if (n_in > cand.size()) {
    throw InvalidArgument("subsample_directions: asked for " + std::to_string(n_in) + " of " +
                          std::to_string(cand.size()) + " weighted directions");
  }
  AngularMask mask{std::vector<std::uint8_t>(table.size(), 0)};
  if (n_in == cand.size()) {
    for (auto i : cand) mask.observed[i] = 1;
    return mask;
  }

  const std::size_t n = cand.size();
  Eigen::MatrixXd e(n, n);
  Eigen::MatrixXd sep(n, n);  // angle between axes
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Vec3& a = table.bvecs[cand[i]];
      const Vec3& b = table.bvecs[cand[j]];
      e(i, j) = i == j ? 0.0 : pair_energy(a, b);
      sep(i, j) = std::acos(std::clamp(std::abs(a.dot(b)), 0.0, 1.0));
    }
  }
  auto subset_energy = [&](const std::vector<std::size_t>& s) {
    double total = 0.0;
    for (std::size_t a = 0; a < s.size(); ++a) {
      for (std::size_t b = a + 1; b < s.size(); ++b) total += e(s[a], s[b]);
    }
    return total;
  };

  std::vector<std::size_t> best;
  double best_energy = std::numeric_limits<double>::infinity();

  // Small problems: enumerate every subset.
  double subsets = 1.0;
  for (std::size_t i = 0; i < n_in; ++i) subsets *= static_cast<double>(n - i) / static_cast<double>(i + 1);
  if (subsets <= kExhaustiveSubsets) {
    std::vector<std::size_t> sel(n_in);
    std::iota(sel.begin(), sel.end(), 0);
    while (true) {
      const double total = subset_energy(sel);
      if (total < best_energy) {
        best_energy = total;
        best = sel;
      }
      std::size_t i = n_in;
      while (i > 0 && sel[i - 1] == n - n_in + (i - 1)) --i;
      if (i == 0) break;
      ++sel[i - 1];
      for (std::size_t j = i; j < n_in; ++j) sel[j] = sel[j - 1] + 1;
    }
    for (auto i : best) mask.observed[cand[i]] = 1;
    return mask;
  }

  for (std::size_t start = 0; start < n; ++start) {
    std::vector<std::size_t> sel{start};
    std::vector<std::uint8_t> in(n, 0);
    in[start] = 1;
    while (sel.size() < n_in) {
      std::size_t pick = n;
      double pick_sep = -1.0;
      for (std::size_t c = 0; c < n; ++c) {
        if (in[c]) continue;
        double nearest = std::numeric_limits<double>::infinity();
        for (auto s : sel) nearest = std::min(nearest, sep(c, s));
        if (nearest > pick_sep) {
          pick_sep = nearest;
          pick = c;
        }
      }
      sel.push_back(pick);
      in[pick] = 1;
    }
    // Pairwise exchange until no single swap lowers the energy.
    for (bool improved = true; improved;) {
      improved = false;
      for (std::size_t slot = 0; slot < sel.size(); ++slot) {
        const std::size_t cur = sel[slot];
        double cur_cost = 0.0;
        for (auto s : sel) cur_cost += e(cur, s);
        std::size_t swap_to = n;
        double swap_cost = cur_cost;
        for (std::size_t c = 0; c < n; ++c) {
          if (in[c]) continue;
          double cost = 0.0;
          for (auto s : sel) cost += s == cur ? 0.0 : e(c, s);
          if (cost < swap_cost - 1e-12 * std::abs(cur_cost)) {
            swap_cost = cost;
            swap_to = c;
          }
        }
        if (swap_to != n) {
          in[cur] = 0;
          in[swap_to] = 1;
          sel[slot] = swap_to;
          improved = true;
        }
      }
    }
    const double total = subset_energy(sel);
    if (total < best_energy) {
      best_energy = total;
      best = sel;
    }
  }
  for (auto i : best) mask.observed[cand[i]] = 1;
  return mask;
}

DwiVolume simulate_multitensor(std::span<const VoxelModel> voxels, std::size_t height, std::size_t width,
                               const GradientTable& table, Exec exec) {
  table.validate();
  if (voxels.size() != height * width) {
    throw InvalidArgument("simulate_multitensor: " + std::to_string(voxels.size()) + " voxel models for a " +
                          std::to_string(height) + "x" + std::to_string(width) + " slice");
  }
  for (std::size_t v = 0; v < voxels.size(); ++v) check_compartments(voxels[v], v);

  DwiVolume out(height, width, table);
  const std::size_t dirs = table.size();
  const auto count = static_cast<std::int64_t>(voxels.size());
  auto run = [&](std::int64_t v) {
    for (std::size_t n = 0; n < dirs; ++n) {
      out.data[static_cast<std::size_t>(v) * dirs + n] =
          table.bvals[n] > 0.0 ? signal_of(voxels[static_cast<std::size_t>(v)], table.bvals[n], table.bvecs[n]) : 1.0;
    }
  };
  if (exec == Exec::kSerial) {
    for (std::int64_t v = 0; v < count; ++v) run(v);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < count; ++v) run(v);
  }
  return out;
}

DwiVolume add_rician_noise(const DwiVolume& volume, double sigma, std::uint64_t seed, Exec exec) {
  if (!(sigma >= 0.0)) throw InvalidArgument("add_rician_noise: sigma must be non-negative");
  DwiVolume out = volume;
  if (sigma == 0.0) return out;
  const std::size_t dirs = volume.dirs;
  const auto count = static_cast<std::int64_t>(volume.voxels());
  auto run = [&](std::int64_t v) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(v));
    std::normal_distribution<double> normal(0.0, sigma);
    for (std::size_t n = 0; n < dirs; ++n) {
      double& s = out.data[static_cast<std::size_t>(v) * dirs + n];
      const double re = s + normal(rng);
      const double im = normal(rng);
      s = std::sqrt(re * re + im * im);
    }
  };
  if (exec == Exec::kSerial) {
    for (std::int64_t v = 0; v < count; ++v) run(v);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < count; ++v) run(v);
  }
  return out;
}

Eigen::Matrix3d axial_tensor(const Vec3& axis, double axial, double radial) {
  const Vec3 a = axis.normalized();
  return radial * Eigen::Matrix3d::Identity() + (axial - radial) * a * a.transpose();
}

std::vector<VoxelModel> generate_slice_models(const SliceSpec& spec, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x511CE);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double size = static_cast<double>(std::max(spec.height, spec.width));

  // CSF: a few Gaussian blobs. Second fiber: smooth wave. Orientation: waves on the angles.
  struct Blob {
    double cx, cy, width, amp;
  };
  std::vector<Blob> blobs(2 + static_cast<std::size_t>(u(rng) * 2.0));
  for (auto& b : blobs) {
    b = {u(rng) * spec.width, u(rng) * spec.height, size * (0.08 + 0.15 * u(rng)), 0.5 + 0.5 * u(rng)};
  }
  const SmoothField second = random_wave(rng, 2.0 * pi / size * 2.0, 1.0);
  const SmoothField az_wave = random_wave(rng, 2.0 * pi / size * 1.5, 0.6 * pi);
  const SmoothField el_wave = random_wave(rng, 2.0 * pi / size * 1.5, 0.4);
  const SmoothField roll_wave = random_wave(rng, 2.0 * pi / size, pi);
  const double az0 = 2.0 * pi * u(rng);
  const double el0 = (u(rng) - 0.5) * 0.8;
  const double crossing =
      (spec.min_crossing_deg + (spec.max_crossing_deg - spec.min_crossing_deg) * u(rng)) * pi / 180.0;
  const double second_base = u(rng);

  std::vector<VoxelModel> out(spec.height * spec.width);
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double fx = static_cast<double>(x);
      const double fy = static_cast<double>(y);
      double csf = 0.0;
      for (const auto& b : blobs) {
        const double r2 = (fx - b.cx) * (fx - b.cx) + (fy - b.cy) * (fy - b.cy);
        csf += b.amp * std::exp(-0.5 * r2 / (b.width * b.width));
      }
      csf = spec.max_csf_fraction * std::min(1.0, csf);
      const double share = spec.max_second_fraction * std::clamp(0.5 * second_base + 0.5 * (0.5 + 0.5 * second(fx, fy)), 0.0, 1.0);

      const double az = az0 + az_wave(fx, fy);
      const double el = el0 + el_wave(fx, fy);
      const Vec3 a1(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      Vec3 p = a1.cross(Vec3::UnitZ());
      if (p.norm() < 1e-6) p = a1.cross(Vec3::UnitX());
      p.normalize();
      const Vec3 q = a1.cross(p).normalized();
      const double roll = roll_wave(fx, fy);
      const Vec3 a2 =
          (std::cos(crossing) * a1 + std::sin(crossing) * (std::cos(roll) * p + std::sin(roll) * q)).normalized();

      const double fibre = 1.0 - csf;
      VoxelModel model;
      model.push_back({fibre * (1.0 - share), axial_tensor(a1, spec.axial, spec.radial)});
      model.push_back({fibre * share, axial_tensor(a2, spec.axial, spec.radial)});
      model.push_back({csf, spec.csf_diffusivity * Eigen::Matrix3d::Identity()});
      // Exact unit sum for the compartment check.
      model[2].fraction = std::max(0.0, 1.0 - model[0].fraction - model[1].fraction);
      out[y * spec.width + x] = std::move(model);
    }
  }
  return out;
}

}  // namespace qsr::phantom
