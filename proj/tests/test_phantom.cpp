#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "qsr/error.hpp"
#include "qsr/phantom.hpp"

using namespace qsr;
using namespace qsr::phantom;

namespace {

double axis_angle_deg(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(std::abs(a.dot(b)), 0.0, 1.0)) * 180.0 / std::numbers::pi;
}

double min_axis_angle(const std::vector<Vec3>& d) {
  double m = 180.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = i + 1; j < d.size(); ++j) m = std::min(m, axis_angle_deg(d[i], d[j]));
  }
  return m;
}

std::vector<Vec3> pick(const GradientTable& t, const std::vector<std::size_t>& idx) {
  std::vector<Vec3> out;
  for (auto i : idx) out.push_back(t.bvecs[i]);
  return out;
}

DwiVolume single_voxel(const VoxelModel& m, const GradientTable& t) {
  const std::vector<VoxelModel> v{m};
  return simulate_multitensor(v, 1, 1, t);
}

}  // namespace

TEST(Directions, SingleAndUnit) {
  const auto one = generate_directions(1, 4);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_NEAR(one[0].norm(), 1.0, 1e-12);
  for (const auto& u : generate_directions(30, 4)) EXPECT_NEAR(u.norm(), 1.0, 1e-12);
  EXPECT_THROW(generate_directions(0, 1), InvalidArgument);
}

TEST(Directions, SixDirectionsNearIcosahedral) {
  EXPECT_GE(min_axis_angle(generate_directions(6, 7)), 58.0);
}

TEST(Directions, DeterministicInSeed) {
  const auto a = generate_directions(20, 99), b = generate_directions(20, 99), c = generate_directions(20, 100);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(a[0], c[0]);
}

TEST(Directions, NinetyWithinOnePercentOfBestRestart) {
  const double e = electrostatic_energy(generate_directions(90, 0));
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t s = 1; s <= 20; ++s) best = std::min(best, electrostatic_energy(generate_directions(90, s)));
  EXPECT_LE(e, 1.01 * best);
}

TEST(Subsample, AllObservedAndErrors) {
  const auto t = make_shell(12, 1000, 1);
  const auto m = subsample_directions(t, 12);
  EXPECT_EQ(m.observed_count(), 12u);
  EXPECT_THROW(subsample_directions(t, 0), InvalidArgument);
  EXPECT_THROW(subsample_directions(t, 13), InvalidArgument);
}

TEST(Subsample, MatchesExhaustiveMinimum) {
  const auto t = make_shell(10, 1000, 3);
  const auto m = subsample_directions(t, 3);
  ASSERT_EQ(m.observed_count(), 3u);
  const double got = electrostatic_energy(pick(t, m.observed_indices()));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < 10; ++a) {
    for (std::size_t b = a + 1; b < 10; ++b) {
      for (std::size_t c = b + 1; c < 10; ++c) best = std::min(best, electrostatic_energy(pick(t, {a, b, c})));
    }
  }
  EXPECT_NEAR(got, best, 1e-12 * best);
}

TEST(Subsample, BeatsMedianRandomSubset) {
  const auto t = make_shell(90, 1000, 5);
  const auto m = subsample_directions(t, 6);
  ASSERT_EQ(m.observed_count(), 6u);
  const double got = min_axis_angle(pick(t, m.observed_indices()));
  std::mt19937_64 rng(1);
  std::vector<std::size_t> all(90);
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> random_angles;
  for (int i = 0; i < 1000; ++i) {
    std::shuffle(all.begin(), all.end(), rng);
    random_angles.push_back(min_axis_angle(pick(t, {all.begin(), all.begin() + 6})));
  }
  std::nth_element(random_angles.begin(), random_angles.begin() + 500, random_angles.end());
  EXPECT_GE(got, random_angles[500]);
  const auto again = subsample_directions(t, 6);
  EXPECT_EQ(again.observed, m.observed);
}

TEST(Subsample, SkipsB0Entries) {
  auto t = make_shell(8, 1000, 2);
  t.bvals.insert(t.bvals.begin(), 0.0);
  t.bvecs.insert(t.bvecs.begin(), Vec3::Zero());
  const auto m = subsample_directions(t, 4);
  EXPECT_EQ(m.observed[0], 0);
  EXPECT_EQ(m.observed_count(), 4u);
}

TEST(Simulate, ClosedForms) {
  GradientTable t;
  t.bvals = {0.0, 1000.0, 1000.0, 1000.0};
  t.bvecs = {Vec3::Zero(), Vec3::UnitX(), Vec3::UnitY(), Vec3(1, 1, 1).normalized()};
  const auto iso = single_voxel({{1.0, 0.7e-3 * Eigen::Matrix3d::Identity()}}, t);
  EXPECT_EQ(iso.data[0], 1.0);
  for (int n = 1; n < 4; ++n) EXPECT_NEAR(iso.data[n], 0.4965853038, 1e-9);
  const Eigen::Matrix3d prolate = Eigen::Vector3d(1.7e-3, 0.2e-3, 0.2e-3).asDiagonal();
  const auto p = single_voxel({{1.0, prolate}}, t);
  EXPECT_NEAR(p.data[1], std::exp(-1.7), 1e-12);
  EXPECT_NEAR(p.data[1], 0.1827, 1e-4);
}

TEST(Simulate, RejectsInvalidCompartments) {
  const auto t = make_shell(6, 1000, 1);
  Eigen::Matrix3d neg = Eigen::Matrix3d::Identity() * 1e-3;
  neg(2, 2) = -1e-4;
  EXPECT_THROW(single_voxel({{1.0, neg}}, t), InvalidArgument);
  Eigen::Matrix3d asym = Eigen::Matrix3d::Identity() * 1e-3;
  asym(0, 1) = 1e-4;
  EXPECT_THROW(single_voxel({{1.0, asym}}, t), InvalidArgument);
  EXPECT_THROW(single_voxel({{0.6, Eigen::Matrix3d::Identity() * 1e-3}}, t), InvalidArgument);
}

TEST(Simulate, AntipodalSymmetryMonotoneAndRange) {
  const auto models = generate_slice_models(SliceSpec{.height = 8, .width = 8}, 3);
  GradientTable t = make_shell(20, 1000, 2);
  GradientTable flipped = t;
  for (auto& g : flipped.bvecs) g = -g;
  const auto a = simulate_multitensor(models, 8, 8, t);
  const auto b = simulate_multitensor(models, 8, 8, flipped);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_EQ(a.data[i], b.data[i]);
    EXPECT_GT(a.data[i], 0.0);
    EXPECT_LE(a.data[i], 1.0);
  }
  const Eigen::Matrix3d D = axial_tensor(Vec3(1, 2, 3).normalized(), 1.7e-3, 0.2e-3);
  double prev = 1.0;
  for (double bval : {500.0, 1000.0, 2000.0, 3000.0}) {
    GradientTable one{{bval}, {Vec3(0.3, -0.2, 0.9).normalized()}};
    const double s = single_voxel({{1.0, D}}, one).data[0];
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(Simulate, SerialMatchesParallel) {
  const auto models = generate_slice_models(SliceSpec{.height = 16, .width = 16}, 8);
  const auto t = make_shell(30, 1000, 1);
  EXPECT_EQ(simulate_multitensor(models, 16, 16, t, Exec::kSerial).data,
            simulate_multitensor(models, 16, 16, t, Exec::kParallel).data);
}

TEST(Rician, IdentityAtZeroSigma) {
  const auto models = generate_slice_models(SliceSpec{.height = 4, .width = 4}, 1);
  const auto v = simulate_multitensor(models, 4, 4, make_shell(6, 1000, 1));
  EXPECT_EQ(add_rician_noise(v, 0.0, 5).data, v.data);
  EXPECT_THROW(add_rician_noise(v, -0.1, 5), InvalidArgument);
}

TEST(Rician, RayleighAndRicianMeans) {
  GradientTable t{std::vector<double>(10, 1000.0), std::vector<Vec3>(10, Vec3::UnitZ())};
  DwiVolume zero(100, 100, t);
  const auto n0 = add_rician_noise(zero, 0.05, 7);
  double mean0 = 0.0;
  for (double v : n0.data) mean0 += v;
  mean0 /= static_cast<double>(n0.data.size());
  EXPECT_NEAR(mean0, 0.05 * std::sqrt(std::numbers::pi / 2.0), 0.02 * 0.0627);

  DwiVolume ones(100, 100, t);
  std::fill(ones.data.begin(), ones.data.end(), 1.0);
  const auto n1 = add_rician_noise(ones, 0.02, 8);
  double mean1 = 0.0;
  for (double v : n1.data) mean1 += v;
  mean1 /= static_cast<double>(n1.data.size());
  EXPECT_GE(mean1, 1.0);
  EXPECT_LE(mean1, 1.0008);
}

TEST(Rician, DeterministicAndThreadIndependent) {
  const auto models = generate_slice_models(SliceSpec{.height = 16, .width = 16}, 2);
  const auto v = simulate_multitensor(models, 16, 16, make_shell(12, 1000, 1));
  const auto a = add_rician_noise(v, 0.02, 11, Exec::kSerial);
  const auto b = add_rician_noise(v, 0.02, 11, Exec::kParallel);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(add_rician_noise(v, 0.02, 12).data, a.data);
}

TEST(SliceModels, ValidFractions) {
  const SliceSpec spec;
  const auto models = generate_slice_models(spec, 21);
  ASSERT_EQ(models.size(), spec.height * spec.width);
  for (const auto& m : models) {
    double total = 0.0;
    for (const auto& c : m) {
      EXPECT_GE(c.fraction, 0.0);
      total += c.fraction;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}
