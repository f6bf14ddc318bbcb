#include "fpm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"

namespace fpm {

PhantomKind parse_phantom_kind(const std::string& name) {
  if (name == "bars") return PhantomKind::Bars;
  if (name == "two-point") return PhantomKind::TwoPoint;
  if (name == "blobs") return PhantomKind::Blobs;
  throw ConfigError("unknown phantom kind '" + name + "'");
}

std::string to_string(PhantomKind kind) {
  switch (kind) {
    case PhantomKind::Bars: return "bars";
    case PhantomKind::TwoPoint: return "two-point";
    case PhantomKind::Blobs: return "blobs";
  }
  return "?";
}

void PhantomSpec::validate() const {
  if (rows < 1 || cols < 1) throw ConfigError("phantom size must be positive");
  if (!(pitch_um > 0.0)) throw ConfigError("phantom pitch must be positive");
  if (!(amplitude_min >= 0.0 && amplitude_min <= amplitude_max && amplitude_max <= 1.0))
    throw ConfigError("amplitude range must lie within [0, 1]");
  const double pi = std::numbers::pi;
  if (!(phase_min >= -pi && phase_min <= phase_max && phase_max <= pi))
    throw ConfigError("phase range must lie within [-pi, pi]");
  if (kind == PhantomKind::TwoPoint ? feature_um < 0.0 : feature_um < pitch_um)
    throw ConfigError("feature scale " + std::to_string(feature_um) +
                      " um is below the pixel pitch " + std::to_string(pitch_um) + " um");
  if (bar_count < 0) throw ConfigError("bar count must be nonnegative");
  if (blob_count < 0) throw ConfigError("blob count must be nonnegative");
}

namespace {

// Fraction of [a, b) covered by the bars of a grating whose bars occupy
// [k p - p/4, k p + p/4), restricted to |k| bars centred on the field.
double bar_coverage(double a, double b, double period, int bar_count) {
  double covered = 0.0;
  const double half = period / 4.0;
  if (bar_count > 0) {
    for (int k = 0; k < bar_count; ++k) {
      const double centre = (k - (bar_count - 1) / 2.0) * period;
      covered += std::max(0.0, std::min(b, centre + half) - std::max(a, centre - half));
    }
  } else {
    const long k0 = static_cast<long>(std::floor(a / period)) - 1;
    const long k1 = static_cast<long>(std::ceil(b / period)) + 1;
    for (long k = k0; k <= k1; ++k) {
      const double centre = static_cast<double>(k) * period;
      covered += std::max(0.0, std::min(b, centre + half) - std::max(a, centre - half));
    }
  }
  return covered / (b - a);
}

ComplexImage bars(const PhantomSpec& s) {
  ComplexImage out(s.rows, s.cols);
  const double half_field = static_cast<double>(s.cols) / 2.0;
  for (Index c = 0; c < s.cols; ++c) {
    const double a = (static_cast<double>(c) - half_field) * s.pitch_um;
    const double t = bar_coverage(a, a + s.pitch_um, s.feature_um, s.bar_count);
    const double amp = s.amplitude_min + (s.amplitude_max - s.amplitude_min) * t;
    const double phase = s.phase_min + (s.phase_max - s.phase_min) * t;
    out.col(c).setConstant(std::polar(amp, phase));
  }
  return out;
}

ComplexImage two_point(const PhantomSpec& s) {
  RealImage count = RealImage::Zero(s.rows, s.cols);
  const double offset = s.feature_um / 2.0 / s.pitch_um;
  const Index r = s.rows / 2;
  for (double sign : {-1.0, 1.0}) {
    const Index c = static_cast<Index>(std::lround(static_cast<double>(s.cols / 2) + sign * offset));
    if (c < 0 || c >= s.cols) throw ConfigError("two-point spacing exceeds the field");
    count(r, c) += 1.0;
  }
  ComplexImage out(s.rows, s.cols);
  for (Index k = 0; k < out.size(); ++k)
    out(k) = std::clamp(std::max(s.amplitude_min, count(k)), s.amplitude_min, s.amplitude_max);
  return out;
}

// Periodic Gaussian bumps; the two sums share centres but not weights.
ComplexImage blobs(const PhantomSpec& s) {
  Rng rng(s.seed);
  RealImage amp = RealImage::Zero(s.rows, s.cols);
  RealImage phase = RealImage::Zero(s.rows, s.cols);
  const double sigma = s.feature_um / s.pitch_um;
  for (int b = 0; b < s.blob_count; ++b) {
    const double cy = rng.uniform() * static_cast<double>(s.rows);
    const double cx = rng.uniform() * static_cast<double>(s.cols);
    const double wa = 0.5 + 0.5 * rng.uniform();
    const double wp = 0.5 + 0.5 * rng.uniform();
    for (Index r = 0; r < s.rows; ++r) {
      double dy = std::abs(static_cast<double>(r) - cy);
      dy = std::min(dy, static_cast<double>(s.rows) - dy);
      for (Index c = 0; c < s.cols; ++c) {
        double dx = std::abs(static_cast<double>(c) - cx);
        dx = std::min(dx, static_cast<double>(s.cols) - dx);
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        amp(r, c) += wa * g;
        phase(r, c) += wp * g;
      }
    }
  }
  if (amp.maxCoeff() > 0.0) amp /= amp.maxCoeff();
  if (phase.maxCoeff() > 0.0) phase /= phase.maxCoeff();
  ComplexImage out(s.rows, s.cols);
  for (Index k = 0; k < out.size(); ++k)
    out(k) = std::polar(s.amplitude_min + (s.amplitude_max - s.amplitude_min) * amp(k),
                        s.phase_min + (s.phase_max - s.phase_min) * phase(k));
  return out;
}

}  // namespace

ComplexField generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case PhantomKind::Bars: return {bars(spec), spec.pitch_um};
    case PhantomKind::TwoPoint: return {two_point(spec), spec.pitch_um};
    case PhantomKind::Blobs: return {blobs(spec), spec.pitch_um};
  }
  throw ConfigError("unknown phantom kind");
}

ComplexField bandlimit(const ComplexField& field, double cutoff_per_um) {
  ComplexImage spec = fft2(field.values);
  const double du_r = 1.0 / (static_cast<double>(field.rows()) * field.pitch_um);
  const double du_c = 1.0 / (static_cast<double>(field.cols()) * field.pitch_um);
  for (Index r = 0; r < spec.rows(); ++r)
    for (Index c = 0; c < spec.cols(); ++c)
      if (std::hypot(signed_bin(r, spec.rows()) * du_r, signed_bin(c, spec.cols()) * du_c) >
          cutoff_per_um)
        spec(r, c) = 0.0;
  return {ifft2(spec), field.pitch_um};
}

std::vector<TrainingExample> render_training_set(const std::vector<ComplexField>& phantoms,
                                                 const OpticsConfig& cfg, const LedSet& leds,
                                                 const RenderSettings& settings) {
  cfg.validate();
  if (!(settings.gain > 0.0)) throw ConfigError("render gain must be positive");
  if (settings.noise) settings.noise->validate();
  std::vector<TrainingExample> out;
  out.reserve(phantoms.size());
  for (std::size_t k = 0; k < phantoms.size(); ++k) {
    const ComplexField& o = phantoms[k];
    if (o.rows() % cfg.upsample != 0 || o.cols() % cfg.upsample != 0)
      throw SizeError("phantom size is not a multiple of the upsample factor");
    const Pupil pupil = build_pupil(cfg, o.rows() / cfg.upsample, o.cols() / cfg.upsample);
    TrainingExample ex;
    ex.stack = simulate_stack(o, pupil, spectrum_shifts(cfg, leds, o.rows(), o.cols()), settings.gain);
    if (settings.noise) {
      Rng rng = Rng(settings.noise->seed).split(k);
      for (auto& im : ex.stack.images) im = apply_sensor_noise(im, *settings.noise, rng);
    }
    if (settings.mode == TargetMode::Oracle) {
      ex.target = o;
    } else {
      ex.target = reconstruct(ex.stack, cfg, settings.recon, leds, settings.threads).object;
      ex.target.values /= std::sqrt(settings.gain);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace fpm
