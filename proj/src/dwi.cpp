#include "qsr/dwi.hpp"

#include <cmath>
#include <sstream>

#include "qsr/error.hpp"

namespace qsr {

void GradientTable::validate() const {
  if (bvals.size() != bvecs.size()) {
    throw InvalidArgument("gradient table has " + std::to_string(bvals.size()) + " b-values but " +
                          std::to_string(bvecs.size()) + " b-vectors");
  }
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    if (!(bvals[i] >= 0.0) || !std::isfinite(bvals[i])) {
      throw InvalidArgument("b-value " + std::to_string(i) + " is negative or non-finite");
    }
    if (bvals[i] > 0.0 && std::abs(bvecs[i].norm() - 1.0) > 1e-6) {
      std::ostringstream os;
      os << "b-vector " << i << " is not unit length (norm " << bvecs[i].norm() << ")";
      throw InvalidArgument(os.str());
    }
  }
}

std::vector<std::size_t> GradientTable::weighted_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    if (bvals[i] > 0.0) out.push_back(i);
  }
  return out;
}

GradientTable GradientTable::subset(const std::vector<std::size_t>& indices) const {
  GradientTable out;
  for (auto i : indices) {
    out.bvals.push_back(bvals.at(i));
    out.bvecs.push_back(bvecs.at(i));
  }
  return out;
}

std::size_t AngularMask::observed_count() const {
  std::size_t n = 0;
  for (auto o : observed) n += o ? 1 : 0;
  return n;
}

double AngularMask::ratio() const {
  if (observed.empty()) return 0.0;
  return static_cast<double>(masked_count()) / static_cast<double>(size());
}

std::vector<std::size_t> AngularMask::observed_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (observed[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> AngularMask::masked_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (!observed[i]) out.push_back(i);
  }
  return out;
}

std::vector<double> DwiVolume::direction_image(std::size_t n) const {
  std::vector<double> out(voxels());
  for (std::size_t v = 0; v < voxels(); ++v) out[v] = data[v * dirs + n];
  return out;
}

}  // namespace qsr
