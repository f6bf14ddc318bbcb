#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fpm/diff.hpp"
#include "fpm/noise.hpp"
#include "fpm/optics.hpp"
#include "fpm/phantom.hpp"

namespace fpm {

struct CnnArchitecture {
  int blocks = 4;
  int channels = 32;
  int kernel = 3;
  int upsample = 2;
  double leaky_slope = 0.1;

  void validate() const;
};

/// Residual CNN from one low-res intensity image to a (real, imaginary)
/// high-res field:
///   x = image / mean(image)
///   h = lrelu(conv_k(x))                        head, 1 -> C
///   h = h + conv_k(lrelu(conv_k(h)))            `blocks` times
///   u = lrelu(shuffle_f(conv_k(h)))             C -> C f^2 -> C at f x size
///   y = conv_1(u)                               C -> 2
struct CnnModel {
  CnnArchitecture arch;
  double output_pitch_um = 1.0;
  /// Low-res image shape the model was trained on; 0 accepts any.
  Index input_rows = 0;
  Index input_cols = 0;
  /// Head (w, b), then (w1, b1, w2, b2) per block, then upsampler (w, b),
  /// then output (w, b).
  std::vector<diff::Tensor> params;

  /// He-normal weights, zero biases and a zero output layer.
  static CnnModel create(const CnnArchitecture& arch, double output_pitch_um, std::uint64_t seed);
  static CnnModel create(const CnnArchitecture& arch, double output_pitch_um, Rng rng);

  std::size_t parameter_count() const;
  /// Throws SizeError when the tensors do not match the architecture.
  void validate() const;
};

/// Forward pass on a graph. `params` holds one Var per model tensor; the
/// result has shape (2, f H, f W).
diff::Var cnn_forward(diff::Var image, const std::vector<diff::Var>& params,
                      const CnnArchitecture& arch);

/// Brightness weights ~ U[0,1] i.i.d. and exposure 200 ms.
IlluminationPattern init_pattern(std::uint64_t seed, int led_count = 69);

/// mean |pred - truth|^2 + w_g sum_{x,y} mean |d pred - d truth|^2 with
/// forward differences.
double training_objective(const ComplexField& pred, const ComplexField& truth,
                          double gradient_weight);
/// Same on (2, H, W) real tensors holding (real, imaginary).
diff::Var training_objective(diff::Var pred, diff::Var truth, double gradient_weight);

/// Quantization and Poisson draws for one emulated image, in the order
/// apply_sensor_noise consumes them.
struct NoiseDraws {
  RealImage uniform;
  RealImage normal;

  static NoiseDraws draw(Index rows, Index cols, Rng& rng);
};

/// exposure_fraction * sum_l c_l I_l, then optionally clamp to the sensor
/// range, add quantization noise and the Poisson approximation with the given
/// draws. `stack` is a constant (n, H, W) tensor; `weights` (n); `exposure`
/// is the exposure fraction (1).
diff::Var emulate_pattern_image(diff::Var stack, diff::Var weights, diff::Var exposure,
                                const NoiseModel* noise, const NoiseDraws* draws);

struct TrainSettings {
  int epochs = 50;
  int batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double gradient_weight = 1.0;
  /// Update the pattern alongside the CNN; off keeps the initial pattern.
  bool train_pattern = true;
  CnnArchitecture arch;
  int threads = 1;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> step_loss;
  /// Mean of the step losses of each epoch.
  std::vector<double> epoch_loss;
  /// Pattern after every step.
  std::vector<IlluminationPattern> patterns;
};

struct TrainResult {
  IlluminationPattern pattern;
  CnnModel model;
  TrainHistory history;
};

/// Adam over pattern weights, exposure and CNN parameters. Batches follow a
/// seeded shuffle per epoch; noise for example k at step s draws from its own
/// stream of Rng(seed). A null `noise` trains on clean emulated images.
TrainResult train_joint(const std::vector<TrainingExample>& dataset, const OpticsConfig& cfg,
                        const NoiseModel* noise, const TrainSettings& settings);

/// Continue training the CNN on measured pattern images (`image` of each
/// example). The pattern is not an input to the optimisation.
TrainResult finetune(const std::vector<TrainingExample>& measured,
                     const IlluminationPattern& pattern, const CnnModel& model,
                     const TrainSettings& settings);

/// One measured image in, one f-upsampled complex field out. Throws
/// SizeError when the image differs from the trained input shape.
ComplexField predict_single_shot(const RealImage& image, const CnnModel& model);

/// Per-example objective. Stack examples are emulated through the pattern
/// (with noise from Rng(noise_seed) stream k when `noise` is set); image
/// examples are fed as they are.
std::vector<double> evaluate_examples(const std::vector<TrainingExample>& examples,
                                      const IlluminationPattern& pattern, const CnnModel& model,
                                      const NoiseModel* noise, std::uint64_t noise_seed,
                                      double gradient_weight);

/// Emulated, noisy pattern images for stack examples, as a microscope would
/// record them with `pattern`.
std::vector<TrainingExample> capture_pattern_images(const std::vector<TrainingExample>& examples,
                                                    const IlluminationPattern& pattern,
                                                    const NoiseModel* noise,
                                                    std::uint64_t noise_seed);

double median(std::vector<double> values);

}  // namespace fpm
