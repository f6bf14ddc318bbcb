#pragma once

#include <compare>
#include <vector>

#include "fpm/types.hpp"

namespace fpm {

/// Instrument geometry. Lengths carry their unit in the field name.
struct OpticsConfig {
  double wavelength_um = 0.518;
  double objective_na = 0.5;
  double magnification = 20.0;
  double sensor_pixel_um = 6.5;
  int bit_depth = 16;
  double led_pitch_mm = 4.0;
  double led_z_mm = 69.5;
  int led_grid_rows = 32;
  int led_grid_cols = 32;
  int num_leds = 69;
  int upsample = 2;

  /// Object-plane sample pitch of the camera images.
  double lowres_pitch_um() const { return sensor_pixel_um / magnification; }
  /// Sample pitch of the reconstructed object.
  double highres_pitch_um() const { return lowres_pitch_um() / upsample; }
  /// Coherent cutoff of the objective, NA / lambda.
  double pupil_cutoff() const { return objective_na / wavelength_um; }

  /// Throws ConfigError on invalid geometry.
  void validate() const;
};

/// LED lattice position in pitch units relative to the matrix centre.
/// `i` runs along x (image columns), `j` along y (image rows).
struct LedOffset {
  int i = 0;
  int j = 0;

  int radius_squared() const { return i * i + j * j; }
  auto operator<=>(const LedOffset&) const = default;
};

using LedSet = std::vector<LedOffset>;

/// Transverse illumination spatial frequency in 1/um.
struct SpatialFrequency {
  double ux = 0.0;
  double uy = 0.0;
};

/// Integer spectrum displacement on the high-resolution frequency grid.
/// Low-res bin m samples the object spectrum at high-res bin m + shift.
struct SpectrumShift {
  Index row = 0;
  Index col = 0;
};

struct ComplexField {
  ComplexImage values;
  double pitch_um = 1.0;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

/// Objective pupil on the low-resolution frequency grid (unshifted layout).
struct Pupil {
  RealImage amplitude;
  RealImage phase;

  ComplexImage transfer() const;
};

/// Per-LED brightness weights in [0,1] plus exposure in [0, 2000] ms.
struct IlluminationPattern {
  static constexpr double kMaxExposureMs = 2000.0;

  Eigen::ArrayXd weights;
  double exposure_ms = 200.0;

  /// Exposure normalised by the full 2000 ms exposure.
  double exposure_fraction() const { return exposure_ms / kMaxExposureMs; }

  void validate() const;
  /// Clamp weights to [0,1] and exposure to [0, 2000] ms.
  void project();
};

/// One low-resolution intensity image per LED, in LED-set order.
struct ImageStack {
  std::vector<RealImage> images;
  std::vector<int> led_index;
  std::vector<double> exposure_ms;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  Index rows() const { return images.empty() ? 0 : images.front().rows(); }
  Index cols() const { return images.empty() ? 0 : images.front().cols(); }

  /// Throws SizeError on inconsistent shapes or metadata and DomainError on
  /// negative pixels.
  void validate() const;
};

/// The `n` lattice offsets nearest the matrix centre, sorted by radius, then
/// i, then j.
LedSet select_centermost(const OpticsConfig& cfg, int n);

/// Plane-wave transverse frequency of an LED from the matrix geometry.
SpatialFrequency led_spatial_frequency(const OpticsConfig& cfg, LedOffset led);

/// Illumination NA (sine of the incidence angle).
double illumination_na(const OpticsConfig& cfg, LedOffset led);

/// Largest illumination NA over a set.
double max_illumination_na(const OpticsConfig& cfg, const LedSet& leds);

/// Nearest high-res frequency bin of the LED frequency for an object of
/// `hi_rows` x `hi_cols` samples at the high-res pitch.
SpectrumShift spectrum_shift(const OpticsConfig& cfg, LedOffset led,
                             Index hi_rows, Index hi_cols);

std::vector<SpectrumShift> spectrum_shifts(const OpticsConfig& cfg,
                                           const LedSet& leds, Index hi_rows,
                                           Index hi_cols);

/// Aberration-free pupil: unit disk of radius NA/lambda, zero phase.
Pupil build_pupil(const OpticsConfig& cfg, Index rows, Index cols);

/// Amplitude scale making a unit object produce unit intensity through the
/// crop from a hi_rows x hi_cols spectrum to lo_rows x lo_cols.
double downsample_gain(Index lo_rows, Index lo_cols, Index hi_rows, Index hi_cols);

/// Copy the lo_rows x lo_cols spectrum window centred on `shift`. Throws
/// ConfigError if the window does not fit inside the high-res grid.
ComplexImage crop_spectrum(const ComplexImage& spectrum, Index lo_rows,
                           Index lo_cols, SpectrumShift shift);

/// Throws ConfigError unless the shifted window fits inside the grid.
void check_window(Index lo_rows, Index lo_cols, Index hi_rows, Index hi_cols,
                  SpectrumShift shift);

/// Single-LED intensity image |F^-1{P(u) O(u + u_l)}|^2.
RealImage forward_single(const ComplexField& object, const Pupil& pupil,
                         SpectrumShift shift);

/// Same as forward_single, reusing a precomputed object spectrum.
RealImage forward_single_spectrum(const ComplexImage& spectrum,
                                  const ComplexImage& pupil_transfer,
                                  SpectrumShift shift);

/// Incoherent sum of single-LED images weighted by the pattern brightness.
RealImage forward_multiplexed(const ComplexField& object, const Pupil& pupil,
                              const IlluminationPattern& pattern,
                              const std::vector<SpectrumShift>& shifts);

/// One single-LED image per shift.
ImageStack simulate_stack(const ComplexField& object, const Pupil& pupil,
                          const std::vector<SpectrumShift>& shifts,
                          double gain = 1.0);

/// Pattern image emulated from a full-brightness, full-exposure stack:
/// exposure_fraction * sum_l c_l I_l.
RealImage emulate_pattern_image(const ImageStack& stack,
                                const IlluminationPattern& pattern);

}  // namespace fpm
