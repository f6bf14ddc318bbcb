#include <gtest/gtest.h>

#include <cmath>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"
#include "fpm/noise.hpp"
#include "fpm/phantom.hpp"
#include "fpm/recon.hpp"

namespace fpm {
namespace {

using diff::Graph;
using diff::Tensor;
using diff::Var;

ImageStack random_stack(std::size_t n, Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  ImageStack s;
  for (std::size_t l = 0; l < n; ++l) {
    RealImage im(rows, cols);
    for (Index k = 0; k < im.size(); ++k) im(k) = scale * rng.uniform();
    s.images.push_back(im);
    s.led_index.push_back(static_cast<int>(l));
    s.exposure_ms.push_back(2000.0);
  }
  return s;
}

ComplexImage random_field(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  ComplexImage f(rows, cols);
  for (Index k = 0; k < f.size(); ++k) f(k) = {rng.uniform() + 0.5, rng.uniform() - 0.5};
  return f;
}

TEST(Settings, Validation) {
  ReconSettings s;
  s.validate();
  EXPECT_EQ(s.learning_rate, 0.2);
  EXPECT_EQ(s.iterations, 3000);
  s.learning_rate = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.iterations = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.overlap = -1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Background, ZeroIsIdentity) {
  const ImageStack s = random_stack(3, 5, 6, 1);
  const ImageStack out = subtract_background(s, std::vector<double>(3, 0.0));
  for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE((out.images[l] == s.images[l]).all());
}

TEST(Background, ClampsAtZero) {
  ImageStack s;
  s.images = {RealImage::Constant(4, 4, 5.0)};
  s.led_index = {0};
  s.exposure_ms = {2000.0};
  EXPECT_TRUE((subtract_background(s, std::vector<double>{7.0}).images[0] == 0.0).all());
  EXPECT_TRUE((subtract_background(s, RealImage::Constant(4, 4, 7.0)).images[0] == 0.0).all());
}

TEST(Background, DarkCornerMatchesLoop) {
  const ImageStack s = random_stack(4, 12, 10, 2, 100.0);
  const DarkWindow w{1, 2, 3, 4};
  const auto bg = estimate_background(s, w);
  const ImageStack out = subtract_background(s, bg);
  for (std::size_t l = 0; l < s.size(); ++l) {
    double acc = 0.0;
    for (Index r = 1; r < 4; ++r)
      for (Index c = 2; c < 6; ++c) acc += s.images[l](r, c);
    EXPECT_NEAR(bg[l], acc / 12.0, 1e-12);
    for (Index r = 0; r < 12; ++r)
      for (Index c = 0; c < 10; ++c)
        EXPECT_EQ(out.images[l](r, c), std::max(s.images[l](r, c) - bg[l], 0.0));
  }
}

TEST(Background, Errors) {
  const ImageStack s = random_stack(2, 4, 4, 3);
  EXPECT_THROW(subtract_background(s, std::vector<double>{1.0}), SizeError);
  EXPECT_THROW(subtract_background(s, RealImage::Zero(3, 4)), SizeError);
  EXPECT_THROW(subtract_background(s, std::vector<double>{1.0, -1.0}), DomainError);
  EXPECT_THROW(estimate_background(s, DarkWindow{2, 2, 4, 4}), SizeError);
}

TEST(Average, MeanOfRepeats) {
  const ImageStack a = random_stack(2, 3, 3, 4), b = random_stack(2, 3, 3, 5);
  const ImageStack m = average_stacks({a, b});
  EXPECT_LT((m.images[1] - (a.images[1] + b.images[1]) / 2.0).abs().maxCoeff(), 1e-15);
  EXPECT_THROW(average_stacks({}), SizeError);
}

TEST(InitObject, ConstantStack) {
  ImageStack s;
  for (int l = 0; l < 69; ++l) {
    s.images.push_back(RealImage::Constant(4, 4, 9.0));
    s.led_index.push_back(l);
    s.exposure_ms.push_back(2000.0);
  }
  const ComplexField o = init_object(s, 2, 0.1625);
  ASSERT_EQ(o.rows(), 8);
  EXPECT_LT((o.values - std::complex<double>(3.0, 0.0)).abs().maxCoeff(), 1e-14);
  for (auto& im : s.images) im.setZero();
  EXPECT_TRUE((init_object(s, 2, 0.1625).values == std::complex<double>(0.0, 0.0)).all());
}

TEST(InitObject, RandomMatchesLoop) {
  const ImageStack s = random_stack(69, 5, 7, 6, 50.0);
  const ComplexField o = init_object(s, 3, 0.1);
  ASSERT_EQ(o.rows(), 15);
  ASSERT_EQ(o.cols(), 21);
  for (Index r = 0; r < 15; ++r)
    for (Index c = 0; c < 21; ++c) {
      double acc = 0.0;
      for (const auto& im : s.images) acc += im(r / 3, c / 3);
      EXPECT_NEAR(o.values(r, c).real(), std::sqrt(acc / 69.0), 1e-12);
      EXPECT_EQ(o.values(r, c).imag(), 0.0);
    }
}

TEST(InitObject, EmptyIsSizeError) {
  EXPECT_THROW(init_object(ImageStack{}, 2, 0.1), SizeError);
}

TEST(AmplitudeLoss, PlainValues) {
  const ImageStack a = random_stack(3, 4, 5, 7, 10.0), b = random_stack(3, 4, 5, 8, 10.0);
  EXPECT_EQ(amplitude_loss(a, a), 0.0);
  double acc = 0.0;
  for (std::size_t l = 0; l < 3; ++l)
    for (Index r = 0; r < 4; ++r)
      for (Index c = 0; c < 5; ++c) {
        const double d = std::sqrt(a.images[l](r, c)) - std::sqrt(b.images[l](r, c));
        acc += d * d;
      }
  EXPECT_NEAR(amplitude_loss(a, b), acc, 1e-12 * acc);

  ImageStack p, q;
  p.images = {RealImage::Constant(1, 1, 9.0)};
  q.images = {RealImage::Constant(1, 1, 4.0)};
  EXPECT_EQ(amplitude_loss(p, q), 1.0);
}

TEST(AmplitudeLoss, Errors) {
  ImageStack a = random_stack(2, 3, 3, 9);
  EXPECT_THROW(amplitude_loss(a, random_stack(2, 3, 4, 9)), SizeError);
  ImageStack b = a;
  b.images[1](0, 0) = -1.0;
  EXPECT_THROW(amplitude_loss(a, b), DomainError);
}

struct SmallCase {
  OpticsConfig cfg;
  LedSet leds;
  ComplexField truth;
  ImageStack measured;
};

// 8x8 low-res stack from 9 LEDs, measured with noise so the loss is nonzero.
SmallCase small_case(std::uint64_t seed) {
  SmallCase s;
  s.leds = select_centermost(s.cfg, 9);
  s.truth = {random_field(16, 16, seed), s.cfg.highres_pitch_um()};
  const Pupil pupil = build_pupil(s.cfg, 8, 8);
  s.measured = simulate_stack(s.truth, pupil, spectrum_shifts(s.cfg, s.leds, 16, 16), 50.0);
  NoiseModel noise;
  noise.m = 1.0;
  Rng rng(seed);
  for (auto& im : s.measured.images) im = apply_poisson_approx(im, noise, rng);
  return s;
}

TEST(AmplitudeLossGraph, MatchesPlainLoss) {
  const SmallCase s = small_case(11);
  const StackModel model = make_stack_model(s.measured, s.cfg, s.leds);
  ComplexField guess{random_field(16, 16, 12), s.cfg.highres_pitch_um()};
  guess.values *= std::sqrt(50.0);
  Graph g;
  const Var loss = amplitude_loss(g.leaf(Tensor::from_image(guess.values)),
                                  g.leaf(Tensor::from_image(RealImage(RealImage::Zero(8, 8)))), model);
  const ImageStack sim =
      simulate_stack(guess, build_pupil(s.cfg, 8, 8), spectrum_shifts(s.cfg, s.leds, 16, 16));
  const double plain = amplitude_loss(s.measured, sim);
  EXPECT_NEAR(loss.value().item(), plain, 1e-9 * plain);
}

// Smooth complex truth and a guess at 0.6 of it: the object gradient is then
// close to a multiple of the object, so no component sits at the noise floor
// of the central differences.
TEST(AmplitudeLossGraph, ObjectGradientMatchesFiniteDifferences) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 9);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ComplexField rough{random_field(16, 16, 100 + seed), cfg.highres_pitch_um()};
    const ComplexImage truth =
        std::complex<double>(1.0, 0.6) * (1.0 + bandlimit(rough, 0.5).values);
    const ImageStack measured = simulate_stack({truth, cfg.highres_pitch_um()}, build_pupil(cfg, 8, 8),
                                               spectrum_shifts(cfg, leds, 16, 16), 50.0);
    const StackModel model = make_stack_model(measured, cfg, leds);
    Rng rng(seed);
    RealImage phase(8, 8);
    for (Index k = 0; k < phase.size(); ++k) phase(k) = 0.6 * (rng.uniform() - 0.5);
    const Tensor phase_t = Tensor::from_image(RealImage(phase * model.pupil_amplitude));
    const Tensor object_t = Tensor::from_image(ComplexImage(truth * (0.6 * std::sqrt(50.0))));
    const double e = diff::check_gradient(
        [&](Var o) { return amplitude_loss(o, o.graph().constant(phase_t), model); }, object_t);
    EXPECT_LT(e, 1e-5) << "seed " << seed;
  }
}

TEST(AmplitudeLossGraph, PupilGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SmallCase s = small_case(100 + seed);
    const StackModel model = make_stack_model(s.measured, s.cfg, s.leds);
    Rng rng(seed);
    RealImage phase(8, 8);
    for (Index k = 0; k < phase.size(); ++k) phase(k) = 0.3 * (rng.uniform() - 0.5);
    const Tensor phase_t = Tensor::from_image(RealImage(phase * model.pupil_amplitude));
    const Tensor object_t = Tensor::from_image(ComplexImage(random_field(16, 16, 200 + seed) * 7.0));
    const double e = diff::check_gradient(
        [&](Var p) { return amplitude_loss(p.graph().constant(object_t), p, model); }, phase_t);
    EXPECT_LT(e, 1e-5) << "seed " << seed;
  }
}

TEST(PistonTilt, PlaneIsRemovedAndResidualIsOrthogonal) {
  const RealImage mask = build_pupil(OpticsConfig{}, 32, 32).amplitude;
  RealImage plane(32, 32), bump(32, 32);
  for (Index r = 0; r < 32; ++r)
    for (Index c = 0; c < 32; ++c) {
      const double v = static_cast<double>(signed_bin(r, 32));
      const double u = static_cast<double>(signed_bin(c, 32));
      plane(r, c) = 0.3 - 0.02 * v + 0.05 * u;
      bump(r, c) = 0.01 * (u * u + v * v);
    }
  EXPECT_LT(remove_piston_and_tilt(plane, mask).abs().maxCoeff(), 1e-12);
  const RealImage out = remove_piston_and_tilt(bump + plane, mask);
  EXPECT_TRUE((out * (1.0 - mask) == 0.0).all());
  EXPECT_NEAR((out * mask).sum(), 0.0, 1e-10);
  EXPECT_LT((remove_piston_and_tilt(out, mask) - out).abs().maxCoeff(), 1e-12);
}

TEST(ReconstructPatch, LossFallsAndPupilStaysFlat) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 69);
  PhantomSpec spec;
  spec.rows = spec.cols = 32;
  spec.feature_um = 0.4;
  spec.blob_count = 8;
  spec.seed = 5;
  const ComplexField truth = generate_phantom(spec);
  const ImageStack stack =
      simulate_stack(truth, build_pupil(cfg, 16, 16), spectrum_shifts(cfg, leds, 32, 32), 1e4);
  ReconSettings st;
  st.iterations = 600;
  const PatchResult r = reconstruct_patch(stack, cfg, st, leds);
  ASSERT_EQ(r.loss_history.size(), 601u);
  EXPECT_LT(r.loss_history.back(), 1e-2 * r.loss_history.front());
  ASSERT_EQ(r.object.rows(), 32);
  EXPECT_EQ(r.object.pitch_um, cfg.highres_pitch_um());
  const double inside = r.pupil.amplitude.sum();
  EXPECT_LT((r.pupil.phase.abs() * r.pupil.amplitude).sum() / inside, 0.05);

  ReconSettings frozen = st;
  frozen.pupil_phase_learning = false;
  frozen.iterations = 5;
  EXPECT_TRUE((reconstruct_patch(stack, cfg, frozen, leds).pupil.phase == 0.0).all());
}

TEST(ReconstructPatch, NanReportsIteration) {
  const SmallCase s = small_case(1);
  ImageStack bad = s.measured;
  bad.images[3](2, 2) = std::nan("");
  ReconSettings st;
  st.iterations = 3;
  try {
    reconstruct_patch(bad, s.cfg, st, s.leds);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(ReconstructPatch, MismatchedLedCountIsSizeError) {
  const SmallCase s = small_case(1);
  ReconSettings st;
  st.iterations = 1;
  EXPECT_THROW(reconstruct_patch(s.measured, s.cfg, st, select_centermost(s.cfg, 5)), SizeError);
}

ReconSettings grid(int rows, int cols, int overlap) {
  ReconSettings s;
  s.patch_rows = rows;
  s.patch_cols = cols;
  s.overlap = overlap;
  return s;
}

TEST(Layout, SingleSpan) {
  const PatchLayout l = make_layout(64, 48, grid(1, 1, 8));
  ASSERT_EQ(l.count(), 1u);
  EXPECT_EQ(l.row_spans[0].begin, 0);
  EXPECT_EQ(l.row_spans[0].end, 64);
  EXPECT_EQ(l.col_spans[0].end, 48);
}

TEST(Layout, SixteenPatchArithmetic) {
  const PatchLayout l = make_layout(64, 64, grid(4, 4, 8));
  ASSERT_EQ(l.count(), 16u);
  // Closed form: core 16, patch k spans [16k - 4, 16k + 20) clipped to [0, 64).
  for (int k = 0; k < 4; ++k) {
    const Index b = std::max<Index>(0, 16 * k - 4), e = std::min<Index>(64, 16 * k + 20);
    EXPECT_EQ(l.row_spans[k].begin, b);
    EXPECT_EQ(l.row_spans[k].end, e);
  }
  EXPECT_EQ(l.row_spans[1].size(), 24);
  EXPECT_EQ(l.row_spans[2].size(), 24);
  EXPECT_EQ(l.row_spans[0].size(), 20);
  // Neighbours share exactly `overlap` pixels.
  for (int k = 0; k + 1 < 4; ++k) EXPECT_EQ(l.col_spans[k].end - l.col_spans[k + 1].begin, 8);
}

TEST(Layout, ZeroOverlapTiles) {
  const PatchLayout l = make_layout(30, 30, grid(3, 2, 0));
  Index next = 0;
  for (const auto& s : l.row_spans) {
    EXPECT_EQ(s.begin, next);
    next = s.end;
  }
  EXPECT_EQ(next, 30);
}

TEST(Layout, OverlapNotSmallerThanPatchIsConfigError) {
  EXPECT_THROW(make_layout(64, 64, grid(4, 4, 16)), ConfigError);
  EXPECT_NO_THROW(make_layout(64, 64, grid(4, 4, 15)));
}

TEST(Split, CoverageAndContent) {
  const ImageStack s = random_stack(3, 40, 36, 21);
  const PatchLayout l = make_layout(40, 36, grid(3, 2, 6));
  const auto parts = split_patches(s, l);
  ASSERT_EQ(parts.size(), 6u);
  RealImage hits = RealImage::Zero(40, 36);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Span& rs = l.row_spans[k / 2];
    const Span& cs = l.col_spans[k % 2];
    EXPECT_EQ(parts[k].size(), 3u);
    EXPECT_TRUE((parts[k].images[2] == s.images[2].block(rs.begin, cs.begin, rs.size(), cs.size())).all());
    hits.block(rs.begin, cs.begin, rs.size(), cs.size()) += 1.0;
  }
  EXPECT_GE(hits.minCoeff(), 1.0);
  EXPECT_TRUE((split_patches(s, make_layout(40, 36, grid(1, 1, 0)))[0].images[1] == s.images[1]).all());
  EXPECT_THROW(split_patches(random_stack(1, 8, 8, 1), l), SizeError);
}

std::vector<ComplexField> crops(const ComplexImage& field, const PatchLayout& l, int f) {
  std::vector<ComplexField> out;
  for (const auto& rs : l.row_spans)
    for (const auto& cs : l.col_spans)
      out.push_back({field.block(rs.begin * f, cs.begin * f, rs.size() * f, cs.size() * f), 0.1});
  return out;
}

TEST(Merge, PartitionOfUnity) {
  for (int f : {1, 2}) {
    const PatchLayout l = make_layout(64, 50, grid(4, 3, 7));
    RealImage total = RealImage::Zero(64 * f, 50 * f);
    for (std::size_t k = 0; k < l.count(); ++k) {
      const Span& rs = l.row_spans[k / l.col_spans.size()];
      const Span& cs = l.col_spans[k % l.col_spans.size()];
      total.block(rs.begin * f, cs.begin * f, rs.size() * f, cs.size() * f) += blend_weights(l, k, f);
    }
    EXPECT_LT((total - 1.0).abs().maxCoeff(), 1e-12);
  }
}

TEST(Merge, ConstantFieldIsExact) {
  const PatchLayout l = make_layout(64, 64, grid(4, 4, 8));
  const std::complex<double> c(0.7, -0.2);
  const ComplexField merged = merge_patches(crops(ComplexImage::Constant(128, 128, c), l, 2), l, 2);
  EXPECT_LT((merged.values - c).abs().maxCoeff(), 1e-12);
}

TEST(Merge, TwoPatchRamp) {
  const PatchLayout l = make_layout(1, 20, grid(1, 2, 4));
  ASSERT_EQ(l.col_spans[0].end, 12);
  ASSERT_EQ(l.col_spans[1].begin, 8);
  const double a = 1.0, b = 3.0;
  std::vector<ComplexField> p = {{ComplexImage::Constant(1, 12, a), 1.0},
                                 {ComplexImage::Constant(1, 12, b), 1.0}};
  const ComplexField m = merge_patches(p, l, 1);
  for (Index x = 0; x < 8; ++x) EXPECT_EQ(m.values(0, x).real(), a);
  for (Index t = 0; t < 4; ++t) {
    const double w = (static_cast<double>(t) + 0.5) / 4.0;
    EXPECT_NEAR(m.values(0, 8 + t).real(), (1.0 - w) * a + w * b, 1e-15);
  }
  for (Index x = 12; x < 20; ++x) EXPECT_EQ(m.values(0, x).real(), b);
}

TEST(Merge, SplitMergeRoundTrip) {
  const PatchLayout l = make_layout(40, 40, grid(4, 4, 6));
  const ComplexImage field = random_field(80, 80, 33);
  EXPECT_LT((merge_patches(crops(field, l, 2), l, 2).values - field).abs().maxCoeff(), 1e-12);
}

TEST(Merge, LayoutMismatchIsSizeError) {
  const PatchLayout l = make_layout(40, 40, grid(2, 2, 4));
  auto p = crops(random_field(80, 80, 1), l, 2);
  p.pop_back();
  EXPECT_THROW(merge_patches(p, l, 2), SizeError);
  p = crops(random_field(80, 80, 1), l, 2);
  p[1].values = ComplexImage::Zero(3, 3);
  EXPECT_THROW(merge_patches(p, l, 2), SizeError);
}

TEST(Merge, PhaseAlignmentRecoversCommonPhase) {
  const PatchLayout l = make_layout(40, 40, grid(3, 3, 6));
  const ComplexImage field = random_field(80, 80, 34);
  auto p = crops(field, l, 2);
  Rng rng(3);
  for (auto& q : p) q.values *= std::polar(1.0, 6.0 * rng.uniform());
  const std::complex<double> first = p[0].values(0, 0) / field(0, 0);
  align_patch_phases(p, l, 2);
  const ComplexField m = merge_patches(p, l, 2);
  EXPECT_LT((m.values - field * first).abs().maxCoeff(), 1e-12);
}

TEST(Reconstruct, ThreadCountDoesNotChangeBits) {
  const OpticsConfig cfg;
  const LedSet leds = select_centermost(cfg, 9);
  const ComplexField truth{random_field(64, 64, 8), cfg.highres_pitch_um()};
  const ImageStack stack =
      simulate_stack(truth, build_pupil(cfg, 32, 32), spectrum_shifts(cfg, leds, 64, 64), 100.0);
  ReconSettings st = grid(2, 2, 4);
  st.iterations = 5;
  const ReconResult a = reconstruct(stack, cfg, st, leds, 1);
  const ReconResult b = reconstruct(stack, cfg, st, leds, 3);
  ASSERT_EQ(a.object.rows(), 64);
  EXPECT_TRUE((a.object.values == b.object.values).all());
  ASSERT_EQ(a.patches.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k)
    EXPECT_EQ(a.patches[k].loss_history, b.patches[k].loss_history);
}

TEST(Reconstruct, SingleGridIsOnePatchWithoutMargin) {
  const SmallCase s = small_case(5);
  ReconSettings st = grid(1, 1, 4);
  st.iterations = 20;
  st.margin = 8;
  const ReconResult whole = reconstruct(s.measured, s.cfg, st, s.leds);
  const PatchResult one = reconstruct_patch(s.measured, s.cfg, st, s.leds);
  EXPECT_TRUE((whole.object.values == one.object.values).all());
  EXPECT_EQ(whole.patches.at(0).loss_history, one.loss_history);
}

TEST(Passband, OnAxisIsPupilDisk) {
  const OpticsConfig cfg;
  const Image<bool> m = synthetic_passband(cfg, {{0, 0}}, 128, 128);
  const double du = 1.0 / (128 * cfg.highres_pitch_um());
  for (Index r = 0; r < 128; ++r)
    for (Index c = 0; c < 128; ++c)
      EXPECT_EQ(m(r, c), std::hypot(signed_bin(r, 128) * du, signed_bin(c, 128) * du) <= cfg.pupil_cutoff());
  const Image<bool> all = synthetic_passband(cfg, select_centermost(cfg, 69), 128, 128);
  EXPECT_GT(all.count(), m.count());
}

TEST(Passband, ErrorIgnoresGlobalPhase) {
  const ComplexField t{random_field(32, 32, 4), 0.1};
  const Image<bool> mask = Image<bool>::Constant(32, 32, true);
  ComplexField e = t;
  e.values *= std::polar(1.0, 2.1);
  EXPECT_LT(passband_error(e, t, mask), 1e-12);
  e.values *= 1.1;
  EXPECT_NEAR(passband_error(e, t, mask), 0.1, 1e-12);
}

}  // namespace
}  // namespace fpm
