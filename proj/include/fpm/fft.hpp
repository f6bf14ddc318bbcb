#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "fpm/types.hpp"

namespace fpm {

// Unitary 2-D discrete Fourier transform (1/sqrt(N) in both directions) in
// the unshifted layout: bin 0 is DC, bins above N/2 hold negative frequencies.
//
// Each thread keeps its own Eigen::FFT engine since the engine caches twiddle
// tables internally.

namespace detail {

template <typename Scalar>
Eigen::FFT<Scalar>& thread_fft_engine() {
  thread_local Eigen::FFT<Scalar> engine = [] {
    Eigen::FFT<Scalar> e;
    e.SetFlag(Eigen::FFT<Scalar>::Unscaled);
    return e;
  }();
  return engine;
}

template <typename Scalar>
Image<std::complex<Scalar>> transform2(const Image<std::complex<Scalar>>& in,
                                       bool inverse) {
  using Complex = std::complex<Scalar>;
  auto& engine = thread_fft_engine<Scalar>();
  const Index rows = in.rows();
  const Index cols = in.cols();
  Image<Complex> out(rows, cols);

  std::vector<Complex> src(static_cast<std::size_t>(std::max(rows, cols)));
  std::vector<Complex> dst(src.size());
  // A length-1 transform is the identity; kissfft cannot plan it.
  if (cols == 1) out = in;
  for (Index r = 0; cols > 1 && r < rows; ++r) {
    const Complex* row_in = in.data() + r * cols;
    Complex* row_out = out.data() + r * cols;
    if (inverse)
      engine.inv(row_out, row_in, cols);
    else
      engine.fwd(row_out, row_in, cols);
  }
  for (Index c = 0; rows > 1 && c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) src[r] = out(r, c);
    if (inverse)
      engine.inv(dst.data(), src.data(), rows);
    else
      engine.fwd(dst.data(), src.data(), rows);
    for (Index r = 0; r < rows; ++r) out(r, c) = dst[r];
  }
  out *= Scalar(1) / std::sqrt(static_cast<Scalar>(rows * cols));
  return out;
}

}  // namespace detail

template <typename Scalar>
Image<std::complex<Scalar>> fft2(const Image<std::complex<Scalar>>& in) {
  return detail::transform2(in, false);
}

template <typename Scalar>
Image<std::complex<Scalar>> ifft2(const Image<std::complex<Scalar>>& in) {
  return detail::transform2(in, true);
}

/// Signed frequency index of unshifted bin `k` on an axis of length `n`.
inline Index signed_bin(Index k, Index n) { return k < (n + 1) / 2 ? k : k - n; }

/// Unshifted storage position of signed frequency index `m`.
inline Index wrap_bin(Index m, Index n) { return ((m % n) + n) % n; }

}  // namespace fpm
