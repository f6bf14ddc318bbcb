#include <gtest/gtest.h>

#include <cmath>

#include "fpm/error.hpp"
#include "fpm/noise.hpp"

namespace fpm {
namespace {

const double kPaperM = 1.0 / (0.41 * 0.41);

// Scene whose mean intensities span [1e2, 1e4] log-uniformly.
RealImage ramp_scene(Index rows, Index cols) {
  RealImage s(rows, cols);
  for (Index k = 0; k < s.size(); ++k)
    s(k) = std::pow(10.0, 2.0 + 2.0 * static_cast<double>(k) / static_cast<double>(s.size() - 1));
  return s;
}

std::vector<RealImage> noisy_repeats(const RealImage& scene, double m, int count,
                                     std::uint64_t seed) {
  NoiseModel model;
  model.m = m;
  Rng rng(seed);
  std::vector<RealImage> out;
  for (int r = 0; r < count; ++r) out.push_back(apply_poisson_approx(scene, model, rng));
  return out;
}

TEST(Rng, SeededStreamsAreRepeatableAndDistinct) {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u32();
    EXPECT_EQ(x, b.next_u32());
    (void)c.next_u32();
  }
  EXPECT_NE(Rng(7).next_u32(), Rng(8).next_u32());
  EXPECT_NE(Rng(7).split(1).next_u32(), Rng(7).split(2).next_u32());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(123);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(PoissonApprox, ZeroDrawIsIdentity) {
  NoiseModel model;
  const RealImage I = RealImage::Random(8, 8).abs() * 500.0;
  EXPECT_LT((apply_poisson_approx(I, model, RealImage::Zero(8, 8)) - I).abs().maxCoeff(), 1e-12);
}

TEST(PoissonApprox, ZeroIntensityStaysZero) {
  NoiseModel model;
  Rng rng(1);
  EXPECT_TRUE((apply_poisson_approx(RealImage::Zero(16, 16), model, rng) == 0.0).all());
}

TEST(PoissonApprox, StandardDeviationMatchesMonteCarloOracle) {
  NoiseModel model;
  model.m = 5.9488;
  Rng rng(2024);
  const RealImage I = RealImage::Constant(1, 100000, 1000.0);
  const RealImage out = apply_poisson_approx(I, model, rng);
  const double mu = out.mean();
  const double sd = std::sqrt((out - mu).square().sum() / (out.size() - 1));
  EXPECT_NEAR(sd, 12.965, 0.03 * 12.965);
  EXPECT_NEAR(std::sqrt(1000.0 / 5.9488), 12.965, 1e-3);
}

TEST(PoissonApprox, NegativeInputIsDomainError) {
  NoiseModel model;
  Rng rng(1);
  RealImage I = RealImage::Ones(2, 2);
  I(1, 1) = -1.0;
  EXPECT_THROW(apply_poisson_approx(I, model, rng), DomainError);
}

TEST(PoissonApprox, OutputNonnegative) {
  NoiseModel model;
  model.m = 0.01;  // very noisy
  Rng rng(3);
  const RealImage out = apply_poisson_approx(RealImage::Constant(64, 64, 0.5), model, rng);
  EXPECT_TRUE((out >= 0.0).all());
}

TEST(Quantization, ClampsAndAddsUnitUniform) {
  NoiseModel model;
  Rng rng(5);
  RealImage I(1, 3);
  I << 70000.0, -5.0, 100.0;
  for (int rep = 0; rep < 50; ++rep) {
    const RealImage q = apply_quantization(I, model, rng);
    EXPECT_GE(q(0), 65535.0);
    EXPECT_LT(q(0), 65536.0);
    EXPECT_GE(q(1), 0.0);
    EXPECT_LT(q(1), 1.0);
    EXPECT_GE(q(2), 100.0);
    EXPECT_LT(q(2), 101.0);
  }
}

TEST(Quantization, RedrawsPerCall) {
  NoiseModel model;
  Rng rng(5);
  const RealImage I = RealImage::Constant(4, 4, 10.0);
  EXPECT_FALSE((apply_quantization(I, model, rng) == apply_quantization(I, model, rng)).all());
}

TEST(SensorNoise, SeededDeterminism) {
  NoiseModel model;
  const RealImage I = ramp_scene(16, 16);
  Rng a(99), b(99);
  EXPECT_TRUE((apply_sensor_noise(I, model, a) == apply_sensor_noise(I, model, b)).all());
}

TEST(Calibration, NoiselessRepeatsGiveZeroSlope) {
  std::vector<RealImage> reps(5, ramp_scene(8, 8));
  const auto cal = calibrate_noise(reps);
  EXPECT_EQ(cal.slope, 0.0);
  EXPECT_TRUE(std::isinf(cal.m));
}

TEST(Calibration, RecoversPaperSlope) {
  const auto cal = calibrate_noise(noisy_repeats(ramp_scene(32, 32), kPaperM, 100, 11));
  EXPECT_NEAR(cal.slope, 0.41, 0.05 * 0.41);
}

TEST(Calibration, RecoversUnitFactor) {
  const auto cal = calibrate_noise(noisy_repeats(ramp_scene(32, 32), 1.0, 100, 12));
  EXPECT_NEAR(cal.slope, 1.0, 0.05);
}

TEST(Calibration, RoundTripRecoversMWithinTenPercent) {
  for (double m : {0.5, 2.0, kPaperM, 20.0}) {
    const auto cal = calibrate_noise(noisy_repeats(ramp_scene(32, 32), m, 100, 13));
    EXPECT_NEAR(cal.m, m, 0.1 * m) << "m = " << m;
  }
}

TEST(Calibration, Errors) {
  EXPECT_THROW(calibrate_noise({RealImage::Ones(2, 2)}), SizeError);
  EXPECT_THROW(calibrate_noise({RealImage::Ones(2, 2), RealImage::Ones(3, 2)}), SizeError);
  EXPECT_THROW(calibrate_noise({RealImage::Zero(2, 2), RealImage::Zero(2, 2)}), NumericError);
}

}  // namespace
}  // namespace fpm
