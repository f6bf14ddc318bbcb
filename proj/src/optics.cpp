#include "fpm/optics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"

namespace fpm {

namespace {

// Signed frequency range [lo, hi] covered by an unshifted axis of length n.
std::pair<Index, Index> signed_range(Index n) {
  return {signed_bin((n + 1) / 2, n), signed_bin((n + 1) / 2 - 1, n)};
}

void require_same_shape(const RealImage& a, const RealImage& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw SizeError(std::string(what) + ": image shapes differ");
}

}  // namespace

void OpticsConfig::validate() const {
  if (!(wavelength_um > 0.0)) throw ConfigError("wavelength must be positive");
  if (!(objective_na > 0.0 && objective_na < 1.0))
    throw ConfigError("objective NA must lie in (0, 1)");
  if (!(magnification > 0.0)) throw ConfigError("magnification must be positive");
  if (!(sensor_pixel_um > 0.0)) throw ConfigError("sensor pixel must be positive");
  if (bit_depth < 1 || bit_depth > 16) throw ConfigError("bit depth must be in [1, 16]");
  if (!(led_pitch_mm > 0.0)) throw ConfigError("LED pitch must be positive");
  if (!(led_z_mm > 0.0)) throw ConfigError("LED distance must be positive");
  if (led_grid_rows < 1 || led_grid_cols < 1) throw ConfigError("LED grid must be nonempty");
  if (num_leds < 1 || num_leds > led_grid_rows * led_grid_cols)
    throw ConfigError("LED count must be within the grid");
  if (upsample < 1) throw ConfigError("upsample factor must be >= 1");
}

ComplexImage Pupil::transfer() const {
  ComplexImage t(amplitude.rows(), amplitude.cols());
  for (Index k = 0; k < t.size(); ++k)
    t(k) = std::polar(amplitude(k), phase(k));
  return t;
}

void IlluminationPattern::validate() const {
  if (!weights.allFinite() || (weights < 0.0).any() || (weights > 1.0).any())
    throw DomainError("LED brightness weights must lie in [0, 1]");
  if (!(exposure_ms >= 0.0 && exposure_ms <= kMaxExposureMs))
    throw DomainError("exposure must lie in [0, 2000] ms");
}

void IlluminationPattern::project() {
  weights = weights.max(0.0).min(1.0);
  exposure_ms = std::clamp(exposure_ms, 0.0, kMaxExposureMs);
}

void ImageStack::validate() const {
  if (led_index.size() != images.size() || exposure_ms.size() != images.size())
    throw SizeError("image stack metadata length differs from image count");
  for (const auto& im : images) {
    if (im.rows() != rows() || im.cols() != cols())
      throw SizeError("image stack images differ in shape");
    if ((im < 0.0).any()) throw DomainError("image stack contains negative intensities");
  }
}

LedSet select_centermost(const OpticsConfig& cfg, int n) {
  const int area = cfg.led_grid_rows * cfg.led_grid_cols;
  if (n < 1 || n > area)
    throw SizeError("requested " + std::to_string(n) + " LEDs from a grid of " +
                    std::to_string(area));
  // Offsets span the physical matrix with the centre LED at index grid/2.
  LedSet all;
  all.reserve(static_cast<std::size_t>(area));
  for (int j = -cfg.led_grid_rows / 2; j < cfg.led_grid_rows - cfg.led_grid_rows / 2; ++j)
    for (int i = -cfg.led_grid_cols / 2; i < cfg.led_grid_cols - cfg.led_grid_cols / 2; ++i)
      all.push_back({i, j});
  std::sort(all.begin(), all.end(), [](const LedOffset& a, const LedOffset& b) {
    if (a.radius_squared() != b.radius_squared())
      return a.radius_squared() < b.radius_squared();
    return a < b;
  });
  all.resize(static_cast<std::size_t>(n));
  return all;
}

SpatialFrequency led_spatial_frequency(const OpticsConfig& cfg, LedOffset led) {
  const double x = led.i * cfg.led_pitch_mm;
  const double y = led.j * cfg.led_pitch_mm;
  const double r = std::sqrt(x * x + y * y + cfg.led_z_mm * cfg.led_z_mm);
  return {x / (cfg.wavelength_um * r), y / (cfg.wavelength_um * r)};
}

double illumination_na(const OpticsConfig& cfg, LedOffset led) {
  const auto u = led_spatial_frequency(cfg, led);
  return cfg.wavelength_um * std::hypot(u.ux, u.uy);
}

double max_illumination_na(const OpticsConfig& cfg, const LedSet& leds) {
  double best = 0.0;
  for (const auto& led : leds) best = std::max(best, illumination_na(cfg, led));
  return best;
}

SpectrumShift spectrum_shift(const OpticsConfig& cfg, LedOffset led, Index hi_rows,
                             Index hi_cols) {
  // An LED at +x tilts the exit wave so the pupil samples the object spectrum
  // at u + u_l.
  const auto u = led_spatial_frequency(cfg, led);
  const double p = cfg.highres_pitch_um();
  return {static_cast<Index>(std::lround(u.uy * hi_rows * p)),
          static_cast<Index>(std::lround(u.ux * hi_cols * p))};
}

std::vector<SpectrumShift> spectrum_shifts(const OpticsConfig& cfg, const LedSet& leds,
                                           Index hi_rows, Index hi_cols) {
  std::vector<SpectrumShift> out;
  out.reserve(leds.size());
  for (const auto& led : leds) out.push_back(spectrum_shift(cfg, led, hi_rows, hi_cols));
  return out;
}

Pupil build_pupil(const OpticsConfig& cfg, Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw SizeError("pupil grid must be nonempty");
  const double p = cfg.lowres_pitch_um();
  const double cutoff = cfg.pupil_cutoff();
  const double nyquist = 1.0 / (2.0 * p);
  if (cutoff > nyquist)
    throw ConfigError("pupil cutoff " + std::to_string(cutoff) +
                      " exceeds the image Nyquist frequency " + std::to_string(nyquist));
  Pupil pupil;
  pupil.amplitude = RealImage::Zero(rows, cols);
  pupil.phase = RealImage::Zero(rows, cols);
  const double du_r = 1.0 / (rows * p);
  const double du_c = 1.0 / (cols * p);
  for (Index r = 0; r < rows; ++r) {
    const double uy = signed_bin(r, rows) * du_r;
    for (Index c = 0; c < cols; ++c) {
      const double ux = signed_bin(c, cols) * du_c;
      if (std::hypot(ux, uy) <= cutoff) pupil.amplitude(r, c) = 1.0;
    }
  }
  return pupil;
}

double downsample_gain(Index lo_rows, Index lo_cols, Index hi_rows, Index hi_cols) {
  return std::sqrt(static_cast<double>(lo_rows * lo_cols) /
                   static_cast<double>(hi_rows * hi_cols));
}

void check_window(Index lo_rows, Index lo_cols, Index hi_rows, Index hi_cols,
                  SpectrumShift shift) {
  const auto [lo_r0, lo_r1] = signed_range(lo_rows);
  const auto [lo_c0, lo_c1] = signed_range(lo_cols);
  const auto [hi_r0, hi_r1] = signed_range(hi_rows);
  const auto [hi_c0, hi_c1] = signed_range(hi_cols);
  if (shift.row + lo_r0 < hi_r0 || shift.row + lo_r1 > hi_r1 ||
      shift.col + lo_c0 < hi_c0 || shift.col + lo_c1 > hi_c1)
    throw ConfigError("spectrum window shifted by (" + std::to_string(shift.row) + ", " +
                      std::to_string(shift.col) + ") leaves the high-resolution grid");
}

ComplexImage crop_spectrum(const ComplexImage& spectrum, Index lo_rows, Index lo_cols,
                           SpectrumShift shift) {
  const Index hi_rows = spectrum.rows();
  const Index hi_cols = spectrum.cols();
  check_window(lo_rows, lo_cols, hi_rows, hi_cols, shift);
  ComplexImage out(lo_rows, lo_cols);
  for (Index r = 0; r < lo_rows; ++r) {
    const Index hr = wrap_bin(signed_bin(r, lo_rows) + shift.row, hi_rows);
    for (Index c = 0; c < lo_cols; ++c)
      out(r, c) = spectrum(hr, wrap_bin(signed_bin(c, lo_cols) + shift.col, hi_cols));
  }
  return out;
}

RealImage forward_single_spectrum(const ComplexImage& spectrum,
                                  const ComplexImage& pupil_transfer, SpectrumShift shift) {
  const Index lo_rows = pupil_transfer.rows();
  const Index lo_cols = pupil_transfer.cols();
  ComplexImage window = crop_spectrum(spectrum, lo_rows, lo_cols, shift);
  window *= pupil_transfer;
  const double gain = downsample_gain(lo_rows, lo_cols, spectrum.rows(), spectrum.cols());
  return (ifft2(window) * gain).abs2();
}

RealImage forward_single(const ComplexField& object, const Pupil& pupil,
                         SpectrumShift shift) {
  if (object.rows() < pupil.amplitude.rows() || object.cols() < pupil.amplitude.cols())
    throw SizeError("object grid is smaller than the pupil grid");
  return forward_single_spectrum(fft2(object.values), pupil.transfer(), shift);
}

RealImage forward_multiplexed(const ComplexField& object, const Pupil& pupil,
                              const IlluminationPattern& pattern,
                              const std::vector<SpectrumShift>& shifts) {
  if (static_cast<std::size_t>(pattern.weights.size()) != shifts.size())
    throw SizeError("pattern length " + std::to_string(pattern.weights.size()) +
                    " differs from LED count " + std::to_string(shifts.size()));
  const ComplexImage spectrum = fft2(object.values);
  const ComplexImage transfer = pupil.transfer();
  RealImage sum = RealImage::Zero(pupil.amplitude.rows(), pupil.amplitude.cols());
  for (std::size_t l = 0; l < shifts.size(); ++l) {
    const double c = pattern.weights(static_cast<Index>(l));
    if (c == 0.0) continue;
    sum += c * forward_single_spectrum(spectrum, transfer, shifts[l]);
  }
  return sum;
}

ImageStack simulate_stack(const ComplexField& object, const Pupil& pupil,
                          const std::vector<SpectrumShift>& shifts, double gain) {
  const ComplexImage spectrum = fft2(object.values);
  const ComplexImage transfer = pupil.transfer();
  ImageStack stack;
  for (std::size_t l = 0; l < shifts.size(); ++l) {
    RealImage im = forward_single_spectrum(spectrum, transfer, shifts[l]);
    if (gain != 1.0) im *= gain;
    stack.images.push_back(std::move(im));
    stack.led_index.push_back(static_cast<int>(l));
    stack.exposure_ms.push_back(IlluminationPattern::kMaxExposureMs);
  }
  return stack;
}

RealImage emulate_pattern_image(const ImageStack& stack,
                                const IlluminationPattern& pattern) {
  if (static_cast<std::size_t>(pattern.weights.size()) != stack.size())
    throw SizeError("pattern length " + std::to_string(pattern.weights.size()) +
                    " differs from stack size " + std::to_string(stack.size()));
  if (stack.empty()) throw SizeError("cannot emulate a pattern image from an empty stack");
  RealImage sum = RealImage::Zero(stack.rows(), stack.cols());
  for (std::size_t l = 0; l < stack.size(); ++l) {
    require_same_shape(stack.images[l], sum, "emulate_pattern_image");
    sum += pattern.weights(static_cast<Index>(l)) * stack.images[l];
  }
  return pattern.exposure_fraction() * sum;
}

}  // namespace fpm
