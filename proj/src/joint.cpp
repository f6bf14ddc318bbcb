#include "fpm/joint.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "fpm/error.hpp"

namespace fpm {

using diff::Graph;
using diff::Shape;
using diff::Tensor;
using diff::Var;

void CnnArchitecture::validate() const {
  if (blocks < 0) throw ConfigError("residual block count must be nonnegative");
  if (channels < 1) throw ConfigError("channel count must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd and positive");
  if (upsample < 1) throw ConfigError("upsample factor must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0))
    throw ConfigError("leaky slope must lie in [0, 1)");
}

namespace {

std::vector<Shape> parameter_shapes(const CnnArchitecture& a) {
  const Index c = a.channels, k = a.kernel, f2 = Index{a.upsample} * a.upsample;
  std::vector<Shape> s = {{c, 1, k, k}, {c}};
  for (int b = 0; b < a.blocks; ++b) {
    s.push_back({c, c, k, k});
    s.push_back({c});
    s.push_back({c, c, k, k});
    s.push_back({c});
  }
  s.push_back({c * f2, c, k, k});
  s.push_back({c * f2});
  s.push_back({2, c, 1, 1});
  s.push_back({2});
  return s;
}

Tensor stack_tensor(const ImageStack& stack) {
  const Index plane = stack.rows() * stack.cols();
  Eigen::ArrayXd v(static_cast<Index>(stack.size()) * plane);
  for (std::size_t l = 0; l < stack.size(); ++l)
    v.segment(static_cast<Index>(l) * plane, plane) =
        Eigen::Map<const Eigen::ArrayXd>(stack.images[l].data(), plane);
  return Tensor::real({static_cast<Index>(stack.size()), stack.rows(), stack.cols()}, std::move(v));
}

Tensor field_tensor(const ComplexField& f) {
  const Index plane = f.rows() * f.cols();
  Eigen::ArrayXd v(2 * plane);
  for (Index k = 0; k < plane; ++k) {
    v(k) = f.values(k).real();
    v(plane + k) = f.values(k).imag();
  }
  return Tensor::real({2, f.rows(), f.cols()}, std::move(v));
}

ComplexField tensor_field(const Tensor& t, double pitch) {
  const Index rows = t.dim(1), cols = t.dim(2), plane = rows * cols;
  ComplexImage out(rows, cols);
  for (Index k = 0; k < plane; ++k) out(k) = {t.real()(k), t.real()(plane + k)};
  return {std::move(out), pitch};
}

Tensor pattern_weights(const IlluminationPattern& p) {
  return Tensor::real({p.weights.size()}, p.weights);
}

Tensor pattern_exposure(const IlluminationPattern& p) {
  return Tensor::real({1}, Eigen::ArrayXd::Constant(1, p.exposure_fraction()));
}

}  // namespace

CnnModel CnnModel::create(const CnnArchitecture& arch, double output_pitch_um, std::uint64_t seed) {
  return create(arch, output_pitch_um, Rng(seed));
}

CnnModel CnnModel::create(const CnnArchitecture& arch, double output_pitch_um, Rng rng) {
  arch.validate();
  CnnModel m;
  m.arch = arch;
  m.output_pitch_um = output_pitch_um;
  const auto shapes = parameter_shapes(arch);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Shape& s = shapes[i];
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(diff::shape_size(s));
    if (s.size() == 4 && i + 2 < shapes.size()) {
      const double sd = std::sqrt(2.0 / static_cast<double>(s[1] * s[2] * s[3]));
      for (Index i = 0; i < v.size(); ++i) v(i) = sd * rng.normal();
    }
    m.params.push_back(Tensor::real(s, std::move(v)));
  }
  return m;
}

std::size_t CnnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.size());
  return n;
}

void CnnModel::validate() const {
  arch.validate();
  const auto shapes = parameter_shapes(arch);
  if (params.size() != shapes.size())
    throw SizeError("model has " + std::to_string(params.size()) + " tensors, architecture needs " +
                    std::to_string(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (params[i].shape() != shapes[i] || params[i].is_complex())
      throw SizeError("model tensor " + std::to_string(i) + " has shape " +
                      diff::shape_string(params[i].shape()) + ", expected " +
                      diff::shape_string(shapes[i]));
}

Var cnn_forward(Var image, const std::vector<Var>& p, const CnnArchitecture& arch) {
  const Shape& s = image.shape();
  if (s.size() != 2) throw SizeError("CNN input must be a single 2-D image");
  const double a = arch.leaky_slope;
  std::size_t i = 0;
  Var x = reshape(normalize_mean(image), {1, s[0], s[1]});
  Var h = leaky_relu(conv2d(x, p[i], p[i + 1]), a);
  i += 2;
  for (int b = 0; b < arch.blocks; ++b, i += 4) {
    const Var r = conv2d(leaky_relu(conv2d(h, p[i], p[i + 1]), a), p[i + 2], p[i + 3]);
    h = h + r;
  }
  const Var u = leaky_relu(pixel_shuffle(conv2d(h, p[i], p[i + 1]), arch.upsample), a);
  return conv2d(u, p[i + 2], p[i + 3]);
}

IlluminationPattern init_pattern(std::uint64_t seed, int led_count) {
  if (led_count < 1) throw ConfigError("pattern needs at least one LED");
  Rng rng(seed);
  IlluminationPattern p;
  p.weights.resize(led_count);
  for (Index l = 0; l < led_count; ++l) p.weights(l) = rng.uniform();
  p.exposure_ms = 200.0;
  return p;
}

double training_objective(const ComplexField& pred, const ComplexField& truth,
                          double gradient_weight) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw SizeError("prediction and target differ in shape");
  const ComplexImage d = pred.values - truth.values;
  double loss = d.abs2().mean();
  if (d.cols() > 1)
    loss += gradient_weight *
            (d.rightCols(d.cols() - 1) - d.leftCols(d.cols() - 1)).abs2().mean();
  if (d.rows() > 1)
    loss += gradient_weight *
            (d.bottomRows(d.rows() - 1) - d.topRows(d.rows() - 1)).abs2().mean();
  return loss;
}

Var training_objective(Var pred, Var truth, double gradient_weight) {
  if (pred.shape() != truth.shape() || pred.shape().size() != 3 || pred.shape()[0] != 2)
    throw SizeError("objective needs matching (2, H, W) tensors");
  // Means over the real and imaginary planes together are half the per-pixel
  // complex means.
  const Var d = pred - truth;
  Var loss = scale(mean(abs2(d)), 2.0);
  if (pred.shape()[2] > 1) loss = loss + scale(mean(abs2(diff_x(d))), 2.0 * gradient_weight);
  if (pred.shape()[1] > 1) loss = loss + scale(mean(abs2(diff_y(d))), 2.0 * gradient_weight);
  return loss;
}

NoiseDraws NoiseDraws::draw(Index rows, Index cols, Rng& rng) {
  NoiseDraws d{RealImage(rows, cols), RealImage(rows, cols)};
  for (Index k = 0; k < d.uniform.size(); ++k) d.uniform(k) = rng.uniform();
  for (Index k = 0; k < d.normal.size(); ++k) d.normal(k) = rng.normal();
  return d;
}

Var emulate_pattern_image(Var stack, Var weights, Var exposure, const NoiseModel* noise,
                          const NoiseDraws* draws) {
  Var image = scale_by(weighted_sum(stack, weights), exposure);
  if (!noise) return image;
  if (!draws) throw ContractError("noisy emulation needs noise draws");
  Graph& g = stack.graph();
  const Shape& s = image.shape();
  if (draws->uniform.rows() != s[0] || draws->uniform.cols() != s[1] ||
      draws->normal.rows() != s[0] || draws->normal.cols() != s[1])
    throw SizeError("noise draws differ in shape from the emulated image");
  const Var quantized =
      clamp(image, 0.0, noise->max_count()) + g.constant(Tensor::from_image(draws->uniform));
  const Var shot = sqrt_guarded(scale(quantized, 1.0 / noise->m)) *
                   g.constant(Tensor::from_image(draws->normal));
  return clamp(quantized + shot, 0.0, std::numeric_limits<double>::infinity());
}

void TrainSettings::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive");
  if (!(gradient_weight >= 0.0)) throw ConfigError("gradient weight must be nonnegative");
  if (threads < 1) throw ConfigError("thread count must be positive");
  arch.validate();
}

double median(std::vector<double> values) {
  if (values.empty()) throw SizeError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

// Sub-streams of Rng(seed). The pattern uses Rng(seed) itself.
constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kNoiseStream = 3;

struct StepGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;  // pattern weights, exposure (if trained), then model
};

// Loss and gradients of one example. Stack examples go through the emulator;
// image examples feed the CNN directly.
StepGrads example_gradients(const TrainingExample& ex, const Tensor& weights,
                            const Tensor& exposure, bool train_pattern, const CnnModel& model,
                            const NoiseModel* noise, const NoiseDraws* draws,
                            double gradient_weight) {
  Graph g;
  Var image;
  Var w, e;
  if (!ex.stack.empty()) {
    w = train_pattern ? g.leaf(weights) : g.constant(weights);
    e = train_pattern ? g.leaf(exposure) : g.constant(exposure);
    image = emulate_pattern_image(g.constant(stack_tensor(ex.stack)), w, e, noise, draws);
  } else {
    image = g.constant(Tensor::from_image(ex.image));
  }
  std::vector<Var> p;
  for (const auto& t : model.params) p.push_back(g.leaf(t));
  const Var pred = cnn_forward(image, p, model.arch);
  const Var loss = training_objective(pred, g.constant(field_tensor(ex.target)), gradient_weight);
  g.backward(loss);
  StepGrads out;
  out.loss = loss.value().item();
  if (train_pattern) {
    out.grads.push_back(g.grad(w));
    out.grads.push_back(g.grad(e));
  }
  for (const Var& v : p) out.grads.push_back(g.grad(v));
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex mutex;
  std::vector<std::thread> pool;
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(threads));
  for (std::size_t t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

void check_example(const TrainingExample& ex, const CnnModel& model, std::size_t led_count,
                   bool stacks) {
  if (stacks) {
    if (ex.stack.empty()) throw SizeError("training example carries no image stack");
    ex.stack.validate();
    if (ex.stack.size() != led_count)
      throw SizeError("stack has " + std::to_string(ex.stack.size()) + " images for a " +
                      std::to_string(led_count) + "-LED pattern");
  } else if (ex.image.size() == 0) {
    throw SizeError("fine-tuning example carries no pattern image");
  }
  const Index rows = stacks ? ex.stack.rows() : ex.image.rows();
  const Index cols = stacks ? ex.stack.cols() : ex.image.cols();
  const Index f = model.arch.upsample;
  if (ex.target.rows() != f * rows || ex.target.cols() != f * cols)
    throw SizeError("target shape " + std::to_string(ex.target.rows()) + "x" +
                    std::to_string(ex.target.cols()) + " is not the upsampled input shape");
}

TrainResult run_training(const std::vector<TrainingExample>& data, IlluminationPattern pattern,
                         CnnModel model, const NoiseModel* noise, const TrainSettings& st,
                         bool train_pattern) {
  TrainResult result;
  Tensor weights = pattern_weights(pattern);
  Tensor exposure = pattern_exposure(pattern);
  diff::AdamState adam;
  const Rng root(st.seed);
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  long step = 0;

  for (int epoch = 0; epoch < st.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = root.split(kShuffleStream).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle.uniform() * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(st.batch_size), ++step) {
      const std::size_t bn = std::min(n - b0, static_cast<std::size_t>(st.batch_size));
      std::vector<StepGrads> parts(bn);
      parallel_for(bn, st.threads, [&](std::size_t i) {
        const std::size_t k = order[b0 + i];
        std::optional<NoiseDraws> draws;
        if (noise && !data[k].stack.empty()) {
          Rng rng = root.split(kNoiseStream).split(static_cast<std::uint64_t>(step)).split(k);
          draws = NoiseDraws::draw(data[k].stack.rows(), data[k].stack.cols(), rng);
        }
        parts[i] = example_gradients(data[k], weights, exposure, train_pattern, model, noise,
                                     draws ? &*draws : nullptr, st.gradient_weight);
      });
      // Fixed-order reduction keeps results independent of the thread count.
      StepGrads total = std::move(parts[0]);
      for (std::size_t i = 1; i < bn; ++i) {
        total.loss += parts[i].loss;
        for (std::size_t j = 0; j < total.grads.size(); ++j)
          total.grads[j].real() += parts[i].grads[j].real();
      }
      const double inv = 1.0 / static_cast<double>(bn);
      total.loss *= inv;
      for (auto& gr : total.grads) gr.real() *= inv;
      if (!std::isfinite(total.loss))
        throw NumericError("training loss is not finite at step " + std::to_string(step));

      std::vector<Tensor*> params;
      if (train_pattern) {
        params.push_back(&weights);
        params.push_back(&exposure);
      }
      for (auto& t : model.params) params.push_back(&t);
      diff::adam_step(params, total.grads, adam, st.learning_rate);
      for (const Tensor* t : params)
        if (!t->all_finite())
          throw NumericError("parameters diverged at step " + std::to_string(step));

      if (train_pattern) {
        weights.real() = weights.real().max(0.0).min(1.0);
        exposure.real() = exposure.real().max(0.0).min(1.0);
        pattern.weights = weights.real();
        pattern.exposure_ms = exposure.real()(0) * IlluminationPattern::kMaxExposureMs;
      }
      result.history.patterns.push_back(pattern);
      result.history.step_loss.push_back(total.loss);
      epoch_sum += total.loss;
      ++epoch_steps;
    }
    result.history.epoch_loss.push_back(epoch_sum / epoch_steps);
  }
  result.pattern = std::move(pattern);
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train_joint(const std::vector<TrainingExample>& dataset, const OpticsConfig& cfg,
                        const NoiseModel* noise, const TrainSettings& settings) {
  settings.validate();
  cfg.validate();
  if (noise) noise->validate();
  if (dataset.empty()) throw SizeError("training set is empty");
  if (settings.arch.upsample != cfg.upsample)
    throw ConfigError("CNN upsample factor differs from the optics upsample factor");
  const std::size_t leds = dataset.front().stack.size();
  IlluminationPattern pattern = init_pattern(settings.seed, static_cast<int>(leds));
  CnnModel model = CnnModel::create(settings.arch, cfg.highres_pitch_um(),
                                    Rng(settings.seed).split(kModelStream));
  for (const auto& ex : dataset) check_example(ex, model, leds, true);
  const TrainingExample& first = dataset.front();
  for (const auto& ex : dataset)
    if (ex.stack.rows() != first.stack.rows() || ex.stack.cols() != first.stack.cols())
      throw SizeError("training stacks differ in shape");
  model.input_rows = first.stack.rows();
  model.input_cols = first.stack.cols();
  return run_training(dataset, std::move(pattern), std::move(model), noise, settings,
                      settings.train_pattern);
}

TrainResult finetune(const std::vector<TrainingExample>& measured,
                     const IlluminationPattern& pattern, const CnnModel& model,
                     const TrainSettings& settings) {
  settings.validate();
  model.validate();
  if (measured.empty()) throw SizeError("fine-tuning set is empty");
  const RealImage& first = measured.front().image;
  for (const auto& ex : measured) {
    check_example(ex, model, 0, false);
    if (ex.image.rows() != first.rows() || ex.image.cols() != first.cols())
      throw SizeError("fine-tuning images differ in shape");
  }
  if (model.input_rows != 0 &&
      (first.rows() != model.input_rows || first.cols() != model.input_cols))
    throw SizeError("fine-tuning images are " + std::to_string(first.rows()) + "x" +
                    std::to_string(first.cols()) + ", the model was trained on " +
                    std::to_string(model.input_rows) + "x" + std::to_string(model.input_cols));
  return run_training(measured, pattern, model, nullptr, settings, false);
}

ComplexField predict_single_shot(const RealImage& image, const CnnModel& model) {
  model.validate();
  if (image.size() == 0) throw SizeError("prediction needs a nonempty image");
  if (model.input_rows != 0 && (image.rows() != model.input_rows || image.cols() != model.input_cols))
    throw SizeError("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                    ", the model expects " + std::to_string(model.input_rows) + "x" +
                    std::to_string(model.input_cols));
  Graph g;
  std::vector<Var> p;
  for (const auto& t : model.params) p.push_back(g.constant(t));
  const Var out = cnn_forward(g.constant(Tensor::from_image(image)), p, model.arch);
  return tensor_field(out.value(), model.output_pitch_um);
}

std::vector<TrainingExample> capture_pattern_images(const std::vector<TrainingExample>& examples,
                                                    const IlluminationPattern& pattern,
                                                    const NoiseModel* noise,
                                                    std::uint64_t noise_seed) {
  if (noise) noise->validate();
  std::vector<TrainingExample> out;
  const Rng root(noise_seed);
  for (std::size_t k = 0; k < examples.size(); ++k) {
    TrainingExample ex;
    ex.target = examples[k].target;
    ex.image = emulate_pattern_image(examples[k].stack, pattern);
    if (noise) {
      Rng rng = root.split(k);
      ex.image = apply_sensor_noise(ex.image, *noise, rng);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<double> evaluate_examples(const std::vector<TrainingExample>& examples,
                                      const IlluminationPattern& pattern, const CnnModel& model,
                                      const NoiseModel* noise, std::uint64_t noise_seed,
                                      double gradient_weight) {
  std::vector<double> out;
  const Rng root(noise_seed);
  for (std::size_t k = 0; k < examples.size(); ++k) {
    const TrainingExample& ex = examples[k];
    RealImage image = ex.image;
    if (!ex.stack.empty()) {
      image = emulate_pattern_image(ex.stack, pattern);
      if (noise) {
        Rng rng = root.split(k);
        image = apply_sensor_noise(image, *noise, rng);
      }
    }
    out.push_back(training_objective(predict_single_shot(image, model), ex.target, gradient_weight));
  }
  return out;
}

}  // namespace fpm
