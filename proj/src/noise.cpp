#include "fpm/noise.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fpm/error.hpp"

namespace fpm {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kPhiloxM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kPhiloxM1} * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
           static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
           static_cast<std::uint32_t>(p0)};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      seed_(seed),
      stream_(stream) {}

void Rng::refill() {
  block_ = philox4x32_10({static_cast<std::uint32_t>(counter_),
                          static_cast<std::uint32_t>(counter_ >> 32),
                          static_cast<std::uint32_t>(stream_),
                          static_cast<std::uint32_t>(stream_ >> 32)},
                         key_);
  ++counter_;
  used_ = 0;
}

std::uint32_t Rng::next_u32() {
  if (used_ == 4) refill();
  return block_[static_cast<std::size_t>(used_++)];
}

double Rng::uniform() {
  const std::uint64_t hi = next_u32() >> 5;  // 27 bits
  const std::uint64_t lo = next_u32() >> 6;  // 26 bits
  return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Rng Rng::split(std::uint64_t stream) const {
  // Mix the parent stream into the child so nested splits stay distinct.
  return Rng(seed_, stream_ * 0x9E3779B97F4A7C15ull + stream + 1);
}

void NoiseModel::validate() const {
  if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("noise factor m must be positive");
  if (bit_depth < 8 || bit_depth > 16) throw ConfigError("bit depth must be in [8, 16]");
}

RealImage apply_poisson_approx(const RealImage& intensity, const NoiseModel& model,
                               const RealImage& normal_draws) {
  if (normal_draws.rows() != intensity.rows() || normal_draws.cols() != intensity.cols())
    throw SizeError("normal draws differ in shape from the image");
  if ((intensity < 0.0).any())
    throw DomainError("Poisson approximation needs nonnegative intensities");
  const double m = model.m;
  RealImage out(intensity.rows(), intensity.cols());
  for (Index k = 0; k < out.size(); ++k) {
    const double scaled = intensity(k) * m;
    out(k) = std::max((std::sqrt(scaled) * normal_draws(k) + scaled) / m, 0.0);
  }
  return out;
}

RealImage apply_poisson_approx(const RealImage& intensity, const NoiseModel& model,
                               Rng& rng) {
  RealImage g(intensity.rows(), intensity.cols());
  for (Index k = 0; k < g.size(); ++k) g(k) = rng.normal();
  return apply_poisson_approx(intensity, model, g);
}

RealImage apply_quantization(const RealImage& intensity, const NoiseModel& model, Rng& rng) {
  RealImage out = intensity.max(0.0).min(model.max_count());
  for (Index k = 0; k < out.size(); ++k) out(k) += rng.uniform();
  return out;
}

RealImage apply_sensor_noise(const RealImage& intensity, const NoiseModel& model, Rng& rng) {
  return apply_poisson_approx(apply_quantization(intensity, model, rng), model, rng);
}

NoiseCalibration calibrate_noise(const std::vector<RealImage>& repeats) {
  if (repeats.size() < 2) throw SizeError("noise calibration needs at least 2 repeats");
  const Index rows = repeats.front().rows();
  const Index cols = repeats.front().cols();
  for (const auto& im : repeats)
    if (im.rows() != rows || im.cols() != cols)
      throw SizeError("noise calibration repeats differ in shape");

  // Two-pass moments about the first repeat; identical repeats give exactly
  // zero variance.
  const double count = static_cast<double>(repeats.size());
  const RealImage& ref = repeats.front();
  RealImage shift_mean = RealImage::Zero(rows, cols);
  for (const auto& im : repeats) shift_mean += im - ref;
  shift_mean /= count;
  RealImage var = RealImage::Zero(rows, cols);
  for (const auto& im : repeats) var += (im - ref - shift_mean).square();
  var /= count - 1.0;
  const RealImage mean = ref + shift_mean;

  // sigma = s sqrt(mu) through the origin: s = sum(sqrt(mu) sigma) / sum(mu).
  const double denom = mean.max(0.0).sum();
  if (!(denom > 0.0)) throw NumericError("noise calibration: all sample means are zero");
  const double numer = (mean.max(0.0).sqrt() * var.sqrt()).sum();
  NoiseCalibration out;
  out.slope = numer / denom;
  out.m = out.slope > 0.0 ? 1.0 / (out.slope * out.slope)
                          : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace fpm
