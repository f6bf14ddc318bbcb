#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "fpm/types.hpp"

namespace fpm {

/// Philox4x32-10 counter-based generator. A (seed, stream) key plus a 64-bit
/// block counter fully determine the output sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal (Box-Muller, both variates consumed in turn).
  double normal();

  /// Independent generator for a sub-stream; does not advance this one.
  Rng split(std::uint64_t stream) const;

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::uint64_t counter_ = 0;
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

/// Sensor noise parameters. `m` scales the Gaussian approximation of Poisson
/// noise; slope s of std vs sqrt(mean) relates as m = 1 / s^2.
struct NoiseModel {
  static constexpr double kDefaultSlope = 0.41;

  double m = 1.0 / (kDefaultSlope * kDefaultSlope);
  int bit_depth = 16;
  std::uint64_t seed = 0;

  double max_count() const { return static_cast<double>((1u << bit_depth) - 1u); }
  void validate() const;
};

/// max(I + sqrt(I/m) g, 0) per pixel with fresh standard normal g.
RealImage apply_poisson_approx(const RealImage& intensity, const NoiseModel& model,
                               Rng& rng);

/// Same map with caller-supplied normal draws.
RealImage apply_poisson_approx(const RealImage& intensity, const NoiseModel& model,
                               const RealImage& normal_draws);

/// clamp(I, 0, 2^bits - 1) plus fresh uniform [0,1) noise per pixel.
RealImage apply_quantization(const RealImage& intensity, const NoiseModel& model,
                             Rng& rng);

/// Quantization then Poisson approximation, the order used in training.
RealImage apply_sensor_noise(const RealImage& intensity, const NoiseModel& model, Rng& rng);

struct NoiseCalibration {
  double slope = 0.0;
  /// 1/slope^2; +infinity for noiseless repeats.
  double m = std::numeric_limits<double>::infinity();
};

/// Zero-intercept least-squares fit of per-pixel sample std (divisor R-1)
/// against sqrt(sample mean) over R repeated images of one scene.
NoiseCalibration calibrate_noise(const std::vector<RealImage>& repeats);

}  // namespace fpm
