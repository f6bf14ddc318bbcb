#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fpm/noise.hpp"
#include "fpm/optics.hpp"
#include "fpm/recon.hpp"

namespace fpm {

enum class PhantomKind { Bars, TwoPoint, Blobs };

PhantomKind parse_phantom_kind(const std::string& name);
std::string to_string(PhantomKind kind);

struct PhantomSpec {
  PhantomKind kind = PhantomKind::Blobs;
  /// High-res grid size.
  Index rows = 128;
  Index cols = 128;
  double pitch_um = 0.1625;
  double amplitude_min = 0.2;
  double amplitude_max = 1.0;
  double phase_min = -1.0;
  double phase_max = 1.0;
  /// Bars: period of one line pair. Two-point: point spacing. Blobs: blob
  /// radius.
  double feature_um = 2.0;
  /// Bars only; 0 fills the field with a periodic grating.
  int bar_count = 0;
  /// Blobs only.
  int blob_count = 12;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Bars period for a line-pair frequency in lp/mm.
inline double period_from_lp_per_mm(double lp_per_mm) { return 1000.0 / lp_per_mm; }

ComplexField generate_phantom(const PhantomSpec& spec);

/// Zero every spectral component with |u| > cutoff (1/um).
ComplexField bandlimit(const ComplexField& field, double cutoff_per_um);

struct TrainingExample {
  ImageStack stack;
  /// Single measured pattern image; empty for stack examples.
  RealImage image;
  ComplexField target;
};

enum class TargetMode { Oracle, Pipeline };

struct RenderSettings {
  /// Counts of a unit object at full exposure.
  double gain = 10000.0;
  std::optional<NoiseModel> noise;
  TargetMode mode = TargetMode::Oracle;
  /// Used in pipeline mode; targets are divided by sqrt(gain).
  ReconSettings recon;
  int threads = 1;
};

/// One single-LED stack per phantom. Noise for phantom k draws from
/// Rng(noise.seed).split(k).
std::vector<TrainingExample> render_training_set(const std::vector<ComplexField>& phantoms,
                                                 const OpticsConfig& cfg, const LedSet& leds,
                                                 const RenderSettings& settings);

}  // namespace fpm
