#pragma once

#include <vector>

#include "fpm/diff.hpp"
#include "fpm/optics.hpp"
#include "fpm/types.hpp"

namespace fpm {

struct ReconSettings {
  double learning_rate = 0.2;
  int iterations = 3000;
  int patch_rows = 4;
  int patch_cols = 4;
  /// Pixels shared by neighbouring patches on the low-res grid.
  int overlap = 8;
  /// Unmeasured border grown around each patch of a split field (low-res
  /// pixels). The model is periodic, so without it content leaving one edge
  /// of a patch re-enters at the opposite edge. A 1x1 grid uses none.
  int margin = 8;
  bool pupil_phase_learning = true;

  void validate() const;
};

/// Rectangle on the low-res grid used to estimate per-image background.
struct DarkWindow {
  Index row = 0;
  Index col = 0;
  Index rows = 8;
  Index cols = 8;
};

/// Per-image mean over `window`.
std::vector<double> estimate_background(const ImageStack& stack, const DarkWindow& window);

/// max(I_l - b_l, 0) with one scalar per image.
ImageStack subtract_background(const ImageStack& stack, const std::vector<double>& background);
/// max(I_l - B, 0) with one image shared by all LEDs.
ImageStack subtract_background(const ImageStack& stack, const RealImage& background);

/// Pixelwise average of repeated acquisitions of the same stack.
ImageStack average_stacks(const std::vector<ImageStack>& repeats);

/// sqrt of the stack mean, replicated f x f, zero phase.
ComplexField init_object(const ImageStack& stack, int upsample, double highres_pitch_um);

/// sum_l sum_px (sqrt(I_l) - sqrt(I_l^g))^2.
double amplitude_loss(const ImageStack& measured, const ImageStack& simulated);

/// Fixed inputs of the differentiable stack model for one patch.
struct StackModel {
  Index lo_rows = 0;
  Index lo_cols = 0;
  double gain = 1.0;
  RealImage pupil_amplitude;
  std::vector<SpectrumShift> shifts;
  /// sqrt of the measured images, one per shift, zero on the margin.
  std::vector<RealImage> measured_amplitude;
  /// 1 on measured pixels, 0 on the margin; empty when there is no margin.
  RealImage loss_mask;
};

/// The model grid is the measured grid grown by `margin` on every side.
StackModel make_stack_model(const ImageStack& measured, const OpticsConfig& cfg,
                            const LedSet& leds, int margin = 0);

/// Amplitude loss of the object estimate against the measured stack, with the
/// pupil transfer A exp(i phase).
diff::Var amplitude_loss(diff::Var object, diff::Var pupil_phase, const StackModel& model);

/// Subtract the least-squares plane (piston and tilt) of `phase` over the
/// nonzero pixels of `mask`; zero outside the mask. Piston and tilt of the
/// pupil phase are indistinguishable from a global phase and a translation of
/// the object.
RealImage remove_piston_and_tilt(const RealImage& phase, const RealImage& mask);

struct PatchResult {
  ComplexField object;
  Pupil pupil;
  std::vector<double> loss_history;
};

/// Adam on the object (and pupil phase) from the sqrt-mean initial guess,
/// edge-replicated over `margin`. The returned object covers the measured
/// pixels only; the pupil lives on the grown grid.
/// loss_history[k] is the loss at the start of iteration k; the final entry
/// is the loss of the returned estimate.
PatchResult reconstruct_patch(const ImageStack& stack, const OpticsConfig& cfg,
                              const ReconSettings& settings, const LedSet& leds,
                              int margin = 0);

struct Span {
  Index begin = 0;
  Index end = 0;
  Index size() const { return end - begin; }
};

/// Overlapping tiling of a low-res frame. Core k along an axis is
/// [k N / g, (k+1) N / g); patches extend floor(v/2) before and ceil(v/2)
/// after each interior core boundary.
struct PatchLayout {
  Index rows = 0;
  Index cols = 0;
  int overlap = 0;
  std::vector<Span> row_spans;
  std::vector<Span> col_spans;

  std::size_t count() const { return row_spans.size() * col_spans.size(); }
};

PatchLayout make_layout(Index rows, Index cols, const ReconSettings& settings);

/// Sub-stacks in row-major patch order.
std::vector<ImageStack> split_patches(const ImageStack& stack, const PatchLayout& layout);

/// Blend weights of one patch on its own (upsampled) extent. Across patches
/// the weights sum to one at every pixel.
RealImage blend_weights(const PatchLayout& layout, std::size_t patch, int upsample);

/// Weighted sum of upsampled patches.
ComplexField merge_patches(const std::vector<ComplexField>& patches, const PatchLayout& layout,
                           int upsample);

/// Rotate each patch's global phase to agree with the patches before it on
/// their shared pixels.
void align_patch_phases(std::vector<ComplexField>& patches, const PatchLayout& layout,
                        int upsample);

struct ReconResult {
  ComplexField object;
  std::vector<PatchResult> patches;
  PatchLayout layout;
};

/// Split, reconstruct patches on `threads` workers, align phases and merge.
ReconResult reconstruct(const ImageStack& stack, const OpticsConfig& cfg,
                        const ReconSettings& settings, const LedSet& leds, int threads = 1);

/// High-res frequency bins reached by at least one shifted pupil.
Image<bool> synthetic_passband(const OpticsConfig& cfg, const LedSet& leds, Index hi_rows,
                               Index hi_cols);

/// Relative L2 spectral error inside `mask` after the best global phase
/// rotation of `estimate`.
double passband_error(const ComplexField& estimate, const ComplexField& truth,
                      const Image<bool>& mask);

}  // namespace fpm
