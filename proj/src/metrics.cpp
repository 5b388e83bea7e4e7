#include "qsr/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qsr/error.hpp"

namespace qsr::metrics {
namespace {

void check_pair(const char* what, std::span<const double> x, std::span<const double> y) {
  if (x.empty()) throw InvalidArgument(std::string(what) + ": empty input");
  if (x.size() != y.size()) {
    throw InvalidArgument(std::string(what) + ": size mismatch " + std::to_string(x.size()) + " vs " +
                          std::to_string(y.size()));
  }
}

Eigen::Matrix3d full_tensor(const std::array<double, 6>& d) {
  Eigen::Matrix3d m;
  m << d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2];
  return m;
}

}  // namespace

double psnr(std::span<const double> x, std::span<const double> y, double peak) {
  check_pair("psnr", x, y);
  if (!(peak > 0.0)) throw InvalidArgument("psnr: peak must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    sse += d * d;
  }
  if (sse == 0.0) return kPsnrIdentical;
  const double mse = sse / static_cast<double>(x.size());
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(std::span<const double> x, std::span<const double> y, std::size_t height, std::size_t width,
            const SsimOptions& opts) {
  check_pair("ssim", x, y);
  if (x.size() != height * width) throw InvalidArgument("ssim: buffer does not match image size");
  const std::size_t w = opts.window;
  if (w == 0 || w > height || w > width) {
    throw InvalidArgument("ssim: window " + std::to_string(w) + " larger than image " + std::to_string(height) + "x" +
                          std::to_string(width));
  }
  const double c1 = (opts.k1 * opts.dynamic_range) * (opts.k1 * opts.dynamic_range);
  const double c2 = (opts.k2 * opts.dynamic_range) * (opts.k2 * opts.dynamic_range);
  const double np = static_cast<double>(w * w);
  const double cov_norm = np / (np - 1.0);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r0 = 0; r0 + w <= height; ++r0) {
    for (std::size_t c0 = 0; c0 + w <= width; ++c0) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (std::size_t r = r0; r < r0 + w; ++r) {
        for (std::size_t c = c0; c < c0 + w; ++c) {
          const double a = x[r * width + c];
          const double b = y[r * width + c];
          mx += a;
          my += b;
          mxx += a * a;
          myy += b * b;
          mxy += a * b;
        }
      }
      mx /= np;
      my /= np;
      const double vx = cov_norm * (mxx / np - mx * mx);
      const double vy = cov_norm * (myy / np - my * my);
      const double vxy = cov_norm * (mxy / np - mx * my);
      total += ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  check_pair("pearson_r", x, y);
  if (x.size() < 2) throw InvalidArgument("pearson_r: need at least 2 samples");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = x[i] - mx;
    const double b = y[i] - my;
    sxx += a * a;
    syy += b * b;
    sxy += a * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw InvalidArgument("pearson_r: zero variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

DiffusionTensorField fit_dti(const DwiVolume& volume, Exec exec) {
  const GradientTable& table = volume.table;
  table.validate();
  if (volume.dirs != table.size() || volume.data.size() != volume.voxels() * volume.dirs) {
    throw InvalidArgument("fit_dti: volume does not match its gradient table");
  }
  const auto weighted = table.weighted_indices();
  std::vector<std::size_t> b0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table.bvals[i] == 0.0) b0.push_back(i);
  }
  const auto rows = static_cast<Eigen::Index>(weighted.size());
  Eigen::MatrixXd design(rows, 6);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Vec3& g = table.bvecs[weighted[static_cast<std::size_t>(r)]];
    const double b = table.bvals[weighted[static_cast<std::size_t>(r)]];
    design.row(r) << b * g.x() * g.x(), b * g.y() * g.y(), b * g.z() * g.z(), 2 * b * g.x() * g.y(),
        2 * b * g.x() * g.z(), 2 * b * g.y() * g.z();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (rows < 6 || qr.rank() < 6) {
    throw NumericError("fit_dti: rank-deficient design (rank " + std::to_string(rows < 6 ? rows : qr.rank()) +
                       " from " + std::to_string(rows) + " weighted directions, need 6 non-collinear)");
  }
  // Least-squares operator, 6 x rows.
  const Eigen::MatrixXd solve = qr.solve(Eigen::MatrixXd::Identity(rows, rows));

  DiffusionTensorField field{volume.height, volume.width, std::vector<std::array<double, 6>>(volume.voxels())};
  constexpr double kFloor = 1e-6;
  const std::size_t dirs = volume.dirs;
  auto run = [&](std::int64_t vi) {
    const auto v = static_cast<std::size_t>(vi);
    const double* s = volume.data.data() + v * dirs;
    double s0 = 1.0;
    if (!b0.empty()) {
      s0 = 0.0;
      for (auto i : b0) s0 += s[i];
      s0 /= static_cast<double>(b0.size());
    }
    Eigen::VectorXd y(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double ratio = s0 > 0.0 ? s[weighted[static_cast<std::size_t>(r)]] / s0 : 0.0;
      y(r) = -std::log(std::max(ratio, kFloor));
    }
    const Eigen::VectorXd d = solve * y;
    for (int j = 0; j < 6; ++j) field.tensors[v][static_cast<std::size_t>(j)] = d(j);
  };
  const auto count = static_cast<std::int64_t>(volume.voxels());
  if (exec == Exec::kSerial) {
    for (std::int64_t v = 0; v < count; ++v) run(v);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < count; ++v) run(v);
  }
  return field;
}

std::array<double, 3> tensor_eigenvalues(const std::array<double, 6>& d) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(full_tensor(d), Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();  // ascending
  return {ev(2), ev(1), ev(0)};
}

double fractional_anisotropy(const std::array<double, 3>& ev) {
  const double md = (ev[0] + ev[1] + ev[2]) / 3.0;
  const double num = std::sqrt((ev[0] - md) * (ev[0] - md) + (ev[1] - md) * (ev[1] - md) + (ev[2] - md) * (ev[2] - md));
  const double den = std::sqrt(ev[0] * ev[0] + ev[1] * ev[1] + ev[2] * ev[2]);
  if (den == 0.0) return 0.0;
  return std::clamp(std::sqrt(1.5) * num / den, 0.0, 1.0);
}

DtiMaps dti_scalars(const DiffusionTensorField& field) {
  DtiMaps maps;
  const std::size_t n = field.tensors.size();
  maps.fa.resize(n);
  maps.md.resize(n);
  maps.ad.resize(n);
  maps.flags.assign(n, kDtiOk);
  for (std::size_t v = 0; v < n; ++v) {
    const auto& d = field.tensors[v];
    if (!std::all_of(d.begin(), d.end(), [](double x) { return std::isfinite(x); })) {
      maps.flags[v] = kNonFinite;
      maps.fa[v] = maps.md[v] = maps.ad[v] = 0.0;
      continue;
    }
    const auto ev = tensor_eigenvalues(d);
    if (ev[2] < 0.0) maps.flags[v] |= kNegativeEigenvalue;
    maps.fa[v] = fractional_anisotropy(ev);
    maps.md[v] = (ev[0] + ev[1] + ev[2]) / 3.0;
    maps.ad[v] = ev[0];
  }
  return maps;
}

std::vector<double> normalize_range(std::span<const double> map) {
  std::vector<double> out(map.begin(), map.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, b = *hi;
  for (auto& v : out) v = b > a ? (v - a) / (b - a) : 0.0;
  return out;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (!std::isfinite(s.mean)) return {s.mean, 0.0};
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(values.size()));
  return s;
}

MetricReport compare_volumes(const DwiVolume& truth, const DwiVolume& recon, std::vector<std::size_t> directions) {
  if (truth.height != recon.height || truth.width != recon.width || truth.dirs != recon.dirs) {
    throw InvalidArgument("compare_volumes: shape mismatch");
  }
  if (directions.empty()) {
    directions.resize(truth.dirs);
    for (std::size_t n = 0; n < truth.dirs; ++n) directions[n] = n;
  }
  MetricReport report;
  report.directions = directions;
  std::vector<double> all_t, all_r;
  for (auto n : directions) {
    if (n >= truth.dirs) throw InvalidArgument("compare_volumes: direction index out of range");
    const auto a = truth.direction_image(n);
    const auto b = recon.direction_image(n);
    report.psnr.push_back(psnr(a, b));
    report.ssim.push_back(ssim(a, b, truth.height, truth.width));
    all_t.insert(all_t.end(), a.begin(), a.end());
    all_r.insert(all_r.end(), b.begin(), b.end());
  }
  report.volume_psnr = psnr(all_t, all_r);
  try {
    report.pearson = pearson_r(all_t, all_r);
  } catch (const InvalidArgument&) {
    report.pearson = std::numeric_limits<double>::quiet_NaN();  // constant input
  }
  report.psnr_summary = summarize(report.psnr);
  report.ssim_summary = summarize(report.ssim);
  return report;
}

nlohmann::json psnr_json(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  return value;
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::json j;
  j["directions"] = report.directions;
  j["psnr"] = nlohmann::json::array();
  for (double v : report.psnr) j["psnr"].push_back(psnr_json(v));
  j["ssim"] = report.ssim;
  j["volume_psnr"] = psnr_json(report.volume_psnr);
  j["pearson_r"] = std::isfinite(report.pearson) ? nlohmann::json(report.pearson) : nlohmann::json(nullptr);
  j["psnr_mean"] = psnr_json(report.psnr_summary.mean);
  j["psnr_std"] = report.psnr_summary.std;
  j["ssim_mean"] = report.ssim_summary.mean;
  j["ssim_std"] = report.ssim_summary.std;
  return j;
}

std::string to_csv(const MetricReport& report) {
  std::ostringstream os;
  os.precision(10);
  auto fmt = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
  };
  os << "direction,psnr,ssim\n";
  for (std::size_t i = 0; i < report.directions.size(); ++i) {
    os << report.directions[i] << ',' << fmt(report.psnr[i]) << ',' << fmt(report.ssim[i]) << '\n';
  }
  os << "volume," << fmt(report.volume_psnr) << ',' << fmt(report.ssim_summary.mean) << '\n';
  return os.str();
}

}  // namespace qsr::metrics
