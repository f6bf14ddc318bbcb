#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"
#include "fpm/phantom.hpp"

namespace fpm {
namespace {

TEST(Kind, ParseRoundTrip) {
  for (auto k : {PhantomKind::Bars, PhantomKind::TwoPoint, PhantomKind::Blobs})
    EXPECT_EQ(parse_phantom_kind(to_string(k)), k);
  EXPECT_THROW(parse_phantom_kind("stripes"), ConfigError);
}

TEST(Spec, Validation) {
  PhantomSpec s;
  s.validate();
  s.feature_um = 0.1;
  EXPECT_THROW(s.validate(), ConfigError);
  s.kind = PhantomKind::TwoPoint;
  s.feature_um = 0.0;
  s.validate();
  s = {};
  s.amplitude_max = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.phase_min = -4.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.amplitude_min = 0.8;
  s.amplitude_max = 0.7;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.rows = 0;
  EXPECT_THROW(generate_phantom(s), ConfigError);
}

TEST(Bars, TargetFrequencyInPixels) {
  const OpticsConfig cfg;
  const double period = period_from_lp_per_mm(228.0);
  EXPECT_NEAR(period, 4.386, 5e-4);
  // One line pair spans 26.99 high-res pixels; a single line is 13.5.
  EXPECT_NEAR(period / cfg.highres_pitch_um(), 26.99, 5e-3);
  EXPECT_NEAR(period / 2.0 / cfg.highres_pitch_um(), 13.5, 5e-3);
}

TEST(Bars, GratingProfile) {
  PhantomSpec s;
  s.kind = PhantomKind::Bars;
  s.rows = 4;
  s.cols = 64;
  s.pitch_um = 0.25;
  s.feature_um = 4.0;  // 16 px period, 8 px bars
  s.amplitude_min = 0.1;
  s.amplitude_max = 0.9;
  s.phase_min = 0.0;
  s.phase_max = 0.5;
  const ComplexField f = generate_phantom(s);
  ASSERT_EQ(f.rows(), 4);
  ASSERT_EQ(f.cols(), 64);
  EXPECT_EQ(f.pitch_um, 0.25);
  // Pixel c covers [(c - 32) p, (c - 31) p); bars cover |x - 4k| < 1.
  for (Index c = 0; c < 64; ++c) {
    const long x = static_cast<long>(c) - 32;
    const long m = ((x % 16) + 16) % 16;
    const bool on = m < 4 || m >= 12;
    EXPECT_NEAR(std::abs(f.values(0, c)), on ? 0.9 : 0.1, 1e-12) << c;
    EXPECT_NEAR(std::arg(f.values(0, c)), on ? 0.5 : 0.0, 1e-12) << c;
    for (Index r = 1; r < 4; ++r) EXPECT_EQ(f.values(r, c), f.values(0, c));
  }
}

TEST(Bars, FiniteCountLeavesBackground) {
  PhantomSpec s;
  s.kind = PhantomKind::Bars;
  s.rows = 1;
  s.cols = 40;
  s.pitch_um = 1.0;
  s.feature_um = 8.0;
  s.bar_count = 2;
  s.amplitude_min = 0.0;
  s.amplitude_max = 1.0;
  s.phase_min = s.phase_max = 0.0;
  const ComplexField f = generate_phantom(s);
  // Bars of width 4 centred at -4 and +4 relative to the field centre.
  double total = 0.0;
  for (Index c = 0; c < 40; ++c) total += std::abs(f.values(0, c));
  EXPECT_NEAR(total, 8.0, 1e-12);
  EXPECT_NEAR(std::abs(f.values(0, 20 - 4)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(f.values(0, 20 + 3)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(f.values(0, 20)), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(f.values(0, 5)), 0.0, 1e-12);
}

TEST(TwoPoint, SpacingAndDegenerateCase) {
  PhantomSpec s;
  s.kind = PhantomKind::TwoPoint;
  s.rows = s.cols = 32;
  s.pitch_um = 0.5;
  s.feature_um = 4.0;
  s.amplitude_min = 0.0;
  s.amplitude_max = 1.0;
  s.phase_min = s.phase_max = 0.0;
  ComplexField f = generate_phantom(s);
  EXPECT_EQ(f.values(16, 12), 1.0);
  EXPECT_EQ(f.values(16, 20), 1.0);
  EXPECT_NEAR(f.values.abs().sum(), 2.0, 0.0);

  s.feature_um = 0.0;
  f = generate_phantom(s);
  EXPECT_EQ(f.values(16, 16), 1.0);  // amplitude 2 clipped to the range
  EXPECT_NEAR(f.values.abs().sum(), 1.0, 0.0);

  s.feature_um = 40.0;
  EXPECT_THROW(generate_phantom(s), ConfigError);
}

TEST(Blobs, DeterministicAndInRange) {
  PhantomSpec s;
  s.rows = s.cols = 48;
  s.seed = 9;
  const ComplexField a = generate_phantom(s), b = generate_phantom(s);
  EXPECT_TRUE((a.values == b.values).all());
  s.seed = 10;
  EXPECT_FALSE((generate_phantom(s).values == a.values).all());
  const RealImage amp = a.values.abs();
  EXPECT_GE(amp.minCoeff(), 0.2 - 1e-12);
  EXPECT_LE(amp.maxCoeff(), 1.0 + 1e-12);
  EXPECT_NEAR(amp.maxCoeff(), 1.0, 1e-12);
  for (Index k = 0; k < a.values.size(); ++k) {
    EXPECT_GE(std::arg(a.values(k)), -1.0 - 1e-12);
    EXPECT_LE(std::arg(a.values(k)), 1.0 + 1e-12);
  }
}

TEST(Blobs, SmoothFieldsArePeriodic) {
  PhantomSpec s;
  s.rows = s.cols = 32;
  s.feature_um = 0.8;
  s.blob_count = 1;
  s.seed = 2;
  s.phase_min = s.phase_max = 0.0;
  const RealImage amp = generate_phantom(s).values.abs();
  // A single blob wraps: opposite edges differ by at most one pixel step.
  double step = 0.0;
  for (Index r = 0; r < 32; ++r)
    for (Index c = 0; c < 31; ++c) step = std::max(step, std::abs(amp(r, c + 1) - amp(r, c)));
  for (Index r = 0; r < 32; ++r) EXPECT_LE(std::abs(amp(r, 0) - amp(r, 31)), step + 1e-12);
}

TEST(Bandlimit, ZeroOutsideAndIdempotent) {
  PhantomSpec s;
  s.rows = s.cols = 40;
  s.feature_um = 0.2;
  s.blob_count = 30;
  const ComplexField f = generate_phantom(s);
  const double cutoff = 1.2;
  const ComplexField g = bandlimit(f, cutoff);
  const ComplexImage spec = fft2(g.values);
  const double du = 1.0 / (40 * s.pitch_um);
  double inside_change = 0.0;
  const ComplexImage orig = fft2(f.values);
  for (Index r = 0; r < 40; ++r)
    for (Index c = 0; c < 40; ++c) {
      const double u = std::hypot(signed_bin(r, 40) * du, signed_bin(c, 40) * du);
      if (u > cutoff)
        EXPECT_LT(std::abs(spec(r, c)), 1e-12);
      else
        inside_change = std::max(inside_change, std::abs(spec(r, c) - orig(r, c)));
    }
  EXPECT_LT(inside_change, 1e-12);
  EXPECT_LT((bandlimit(g, cutoff).values - g.values).abs().maxCoeff(), 1e-12);
}

TEST(Render, UnitObjectGivesConstantImages) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 69);
  const ComplexField one{ComplexImage::Ones(32, 32), cfg.highres_pitch_um()};
  RenderSettings rs;
  rs.gain = 1.0;
  const auto set = render_training_set({one}, cfg, leds, rs);
  ASSERT_EQ(set.size(), 1u);
  ASSERT_EQ(set[0].stack.size(), 69u);
  for (const auto& im : set[0].stack.images) {
    ASSERT_EQ(im.rows(), 16);
    EXPECT_LT((im - 1.0).abs().maxCoeff(), 1e-12);
  }
  EXPECT_TRUE((set[0].target.values == one.values).all());
}

TEST(Render, OracleTargetsAreThePhantoms) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 69);
  std::vector<ComplexField> ph;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    PhantomSpec s;
    s.rows = s.cols = 32;
    s.seed = seed;
    ph.push_back(generate_phantom(s));
  }
  const auto set = render_training_set(ph, cfg, leds, {});
  ASSERT_EQ(set.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_TRUE((set[k].target.values == ph[k].values).all());
    EXPECT_EQ(set[k].stack.size(), 69u);
    // Gain scales the single-LED images of the same field linearly.
    const ImageStack plain = simulate_stack(ph[k], build_pupil(cfg, 16, 16),
                                            spectrum_shifts(cfg, leds, 32, 32), 1e4);
    for (std::size_t l = 0; l < 69; ++l)
      EXPECT_TRUE((set[k].stack.images[l] == plain.images[l]).all());
  }
}

TEST(Render, NoiseIsSeededPerPhantom) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 9);
  PhantomSpec s;
  s.rows = s.cols = 32;
  const ComplexField p = generate_phantom(s);
  RenderSettings rs;
  rs.noise = NoiseModel{};
  rs.noise->seed = 4;
  const auto a = render_training_set({p, p}, cfg, leds, rs);
  const auto b = render_training_set({p, p}, cfg, leds, rs);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t l = 0; l < 9; ++l)
      EXPECT_TRUE((a[k].stack.images[l] == b[k].stack.images[l]).all());
  // Same phantom, different sub-streams.
  EXPECT_FALSE((a[0].stack.images[0] == a[1].stack.images[0]).all());
  for (const auto& im : a[0].stack.images) EXPECT_GE(im.minCoeff(), 0.0);
}

TEST(Render, RejectsOffGridPhantom) {
  const OpticsConfig cfg;
  const ComplexField odd{ComplexImage::Ones(31, 32), cfg.highres_pitch_um()};
  EXPECT_THROW(render_training_set({odd}, cfg, select_centermost(cfg, 69), {}), SizeError);
}

TEST(Render, PipelineTargetsMatchPhantomInPassband) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 69);
  PhantomSpec s;
  s.rows = s.cols = 64;
  s.feature_um = 0.4;
  s.blob_count = 20;
  s.seed = 1;
  const double cutoff = (cfg.objective_na + max_illumination_na(cfg, leds)) / cfg.wavelength_um;
  const ComplexField truth = bandlimit(generate_phantom(s), cutoff);
  RenderSettings rs;
  rs.mode = TargetMode::Pipeline;
  rs.recon.patch_rows = rs.recon.patch_cols = 1;
  rs.recon.iterations = 1000;
  const auto set = render_training_set({truth}, cfg, leds, rs);
  ASSERT_EQ(set[0].target.rows(), 64);
  const Image<bool> mask = synthetic_passband(cfg, leds, 64, 64);
  EXPECT_LT(passband_error(set[0].target, truth, mask), 0.05);
}

}  // namespace
}  // namespace fpm
