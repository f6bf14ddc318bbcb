#pragma once

#include <complex>

#include <Eigen/Core>

namespace fpm {

/// Row-major 2-D sample grid; row index is y, column index is x.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using RealImage = Image<double>;
using ComplexImage = Image<std::complex<double>>;

using Index = Eigen::Index;

template <typename Derived>
bool all_finite(const Eigen::ArrayBase<Derived>& a) {
  return a.allFinite();
}

}  // namespace fpm
