#include "fpm/recon.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include <Eigen/Dense>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"

namespace fpm {

using diff::Graph;
using diff::Tensor;
using diff::Var;

void ReconSettings::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive");
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (patch_rows < 1 || patch_cols < 1) throw ConfigError("patch grid must be at least 1x1");
  if (overlap < 0) throw ConfigError("overlap must be nonnegative");
  if (margin < 0) throw ConfigError("margin must be nonnegative");
}

std::vector<double> estimate_background(const ImageStack& stack, const DarkWindow& window) {
  if (window.rows < 1 || window.cols < 1 || window.row < 0 || window.col < 0 ||
      window.row + window.rows > stack.rows() || window.col + window.cols > stack.cols())
    throw SizeError("dark window lies outside the images");
  std::vector<double> out;
  out.reserve(stack.size());
  for (const auto& im : stack.images)
    out.push_back(im.block(window.row, window.col, window.rows, window.cols).mean());
  return out;
}

ImageStack subtract_background(const ImageStack& stack, const std::vector<double>& background) {
  if (background.size() != stack.size())
    throw SizeError("background has " + std::to_string(background.size()) + " entries for " +
                    std::to_string(stack.size()) + " images");
  ImageStack out = stack;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    if (!(background[l] >= 0.0)) throw DomainError("background must be nonnegative");
    out.images[l] = (stack.images[l] - background[l]).max(0.0);
  }
  return out;
}

ImageStack subtract_background(const ImageStack& stack, const RealImage& background) {
  if (background.rows() != stack.rows() || background.cols() != stack.cols())
    throw SizeError("background image differs in shape from the stack");
  if ((background < 0.0).any()) throw DomainError("background must be nonnegative");
  ImageStack out = stack;
  for (auto& im : out.images) im = (im - background).max(0.0);
  return out;
}

ImageStack average_stacks(const std::vector<ImageStack>& repeats) {
  if (repeats.empty()) throw SizeError("no stacks to average");
  ImageStack out = repeats.front();
  for (std::size_t k = 1; k < repeats.size(); ++k) {
    const ImageStack& s = repeats[k];
    if (s.size() != out.size() || s.rows() != out.rows() || s.cols() != out.cols())
      throw SizeError("repeated stacks differ in shape");
    for (std::size_t l = 0; l < s.size(); ++l) out.images[l] += s.images[l];
  }
  for (auto& im : out.images) im /= static_cast<double>(repeats.size());
  return out;
}

ComplexField init_object(const ImageStack& stack, int upsample, double highres_pitch_um) {
  if (stack.empty()) throw SizeError("cannot initialise from an empty stack");
  if (upsample < 1) throw ConfigError("upsample factor must be at least 1");
  RealImage mean = RealImage::Zero(stack.rows(), stack.cols());
  for (const auto& im : stack.images) mean += im;
  mean = (mean / static_cast<double>(stack.size())).sqrt();

  ComplexImage o(stack.rows() * upsample, stack.cols() * upsample);
  for (Index r = 0; r < o.rows(); ++r)
    for (Index c = 0; c < o.cols(); ++c) o(r, c) = mean(r / upsample, c / upsample);
  return {std::move(o), highres_pitch_um};
}

double amplitude_loss(const ImageStack& measured, const ImageStack& simulated) {
  if (measured.size() != simulated.size() || measured.rows() != simulated.rows() ||
      measured.cols() != simulated.cols())
    throw SizeError("measured and simulated stacks differ in shape");
  double loss = 0.0;
  for (std::size_t l = 0; l < measured.size(); ++l) {
    const RealImage& a = measured.images[l];
    const RealImage& b = simulated.images[l];
    if ((a < 0.0).any() || (b < 0.0).any())
      throw DomainError("amplitude loss needs nonnegative intensities");
    loss += (a.sqrt() - b.sqrt()).square().sum();
  }
  return loss;
}

namespace {

RealImage pad_edge(const RealImage& im, int margin) {
  const Index rows = im.rows() + 2 * margin;
  const Index cols = im.cols() + 2 * margin;
  RealImage out(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      out(r, c) = im(std::clamp<Index>(r - margin, 0, im.rows() - 1),
                     std::clamp<Index>(c - margin, 0, im.cols() - 1));
  return out;
}

}  // namespace

StackModel make_stack_model(const ImageStack& measured, const OpticsConfig& cfg,
                            const LedSet& leds, int margin) {
  measured.validate();
  if (measured.size() != leds.size())
    throw SizeError("stack has " + std::to_string(measured.size()) + " images for " +
                    std::to_string(leds.size()) + " LEDs");
  if (margin < 0) throw ConfigError("margin must be nonnegative");
  StackModel m;
  m.lo_rows = measured.rows() + 2 * margin;
  m.lo_cols = measured.cols() + 2 * margin;
  const Index hi_rows = m.lo_rows * cfg.upsample;
  const Index hi_cols = m.lo_cols * cfg.upsample;
  m.gain = downsample_gain(m.lo_rows, m.lo_cols, hi_rows, hi_cols);
  m.pupil_amplitude = build_pupil(cfg, m.lo_rows, m.lo_cols).amplitude;
  m.shifts = spectrum_shifts(cfg, leds, hi_rows, hi_cols);
  for (const auto& s : m.shifts) check_window(m.lo_rows, m.lo_cols, hi_rows, hi_cols, s);
  for (const auto& im : measured.images) {
    RealImage a = RealImage::Zero(m.lo_rows, m.lo_cols);
    a.block(margin, margin, measured.rows(), measured.cols()) = im.sqrt();
    m.measured_amplitude.push_back(std::move(a));
  }
  if (margin > 0) {
    m.loss_mask = RealImage::Zero(m.lo_rows, m.lo_cols);
    m.loss_mask.block(margin, margin, measured.rows(), measured.cols()).setOnes();
  }
  return m;
}

Var amplitude_loss(Var object, Var pupil_phase, const StackModel& model) {
  Graph& g = object.graph();
  const Var pupil = g.constant(Tensor::from_image(model.pupil_amplitude)) * unit_phasor(pupil_phase);
  const Var spectrum = fft2(object);
  const bool masked = model.loss_mask.size() > 0;
  const Var mask = masked ? g.constant(Tensor::from_image(model.loss_mask)) : Var{};
  Var loss;
  for (std::size_t l = 0; l < model.shifts.size(); ++l) {
    const Var window = pupil * freq_crop(spectrum, model.lo_rows, model.lo_cols, model.shifts[l]);
    const Var field = scale(ifft2(window), model.gain);
    const Var residual = sqrt_guarded(abs2(field)) -
                         g.constant(Tensor::from_image(model.measured_amplitude[l]));
    const Var term = sum(abs2(masked ? residual * mask : residual));
    loss = l == 0 ? term : loss + term;
  }
  return loss;
}

RealImage remove_piston_and_tilt(const RealImage& phase, const RealImage& mask) {
  // Least-squares plane a + b v + c u over the masked pixels, with (v, u) the
  // signed frequency bins.
  Eigen::Matrix3d normal = Eigen::Matrix3d::Zero();
  Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
  for (Index r = 0; r < phase.rows(); ++r)
    for (Index c = 0; c < phase.cols(); ++c) {
      if (mask(r, c) == 0.0) continue;
      const Eigen::Vector3d basis(1.0, static_cast<double>(signed_bin(r, phase.rows())),
                                  static_cast<double>(signed_bin(c, phase.cols())));
      normal += basis * basis.transpose();
      rhs += basis * phase(r, c);
    }
  if (normal(0, 0) == 0.0) return RealImage::Zero(phase.rows(), phase.cols());
  const Eigen::Vector3d coef = normal.ldlt().solve(rhs);
  RealImage out(phase.rows(), phase.cols());
  for (Index r = 0; r < phase.rows(); ++r)
    for (Index c = 0; c < phase.cols(); ++c)
      out(r, c) = mask(r, c) == 0.0
                      ? 0.0
                      : phase(r, c) - coef(0) - coef(1) * static_cast<double>(signed_bin(r, phase.rows())) -
                            coef(2) * static_cast<double>(signed_bin(c, phase.cols()));
  return out;
}

PatchResult reconstruct_patch(const ImageStack& stack, const OpticsConfig& cfg,
                              const ReconSettings& settings, const LedSet& leds, int margin) {
  settings.validate();
  const StackModel model = make_stack_model(stack, cfg, leds, margin);

  ImageStack grown = stack;
  for (auto& im : grown.images) im = pad_edge(im, margin);
  Tensor object = Tensor::from_image(init_object(grown, cfg.upsample, cfg.highres_pitch_um()).values);
  Tensor phase = Tensor::from_image(RealImage(RealImage::Zero(model.lo_rows, model.lo_cols)));
  const RealImage& inside = model.pupil_amplitude;

  diff::AdamState adam;
  PatchResult result;
  result.loss_history.reserve(static_cast<std::size_t>(settings.iterations) + 1);

  auto evaluate = [&](bool with_grad, Tensor* grad_object, Tensor* grad_phase) {
    Graph g;
    const Var o = g.leaf(object);
    const Var p = settings.pupil_phase_learning ? g.leaf(phase) : g.constant(phase);
    const Var loss = amplitude_loss(o, p, model);
    if (with_grad) {
      g.backward(loss);
      *grad_object = g.grad(o);
      if (settings.pupil_phase_learning) *grad_phase = g.grad(p);
    }
    return loss.value().item();
  };

  for (int it = 0; it < settings.iterations; ++it) {
    Tensor go, gp;
    try {
      result.loss_history.push_back(evaluate(true, &go, &gp));
    } catch (const NumericError& e) {
      throw NumericError("reconstruction diverged at iteration " + std::to_string(it) + ": " +
                         e.what());
    }
    if (settings.pupil_phase_learning) {
      Tensor* params[] = {&object, &phase};
      const Tensor grads[] = {go, Tensor::from_image(remove_piston_and_tilt(gp.real_image(), inside))};
      diff::adam_step(params, grads, adam, settings.learning_rate);
      phase = Tensor::from_image(remove_piston_and_tilt(phase.real_image(), inside));
    } else {
      Tensor* params[] = {&object};
      const Tensor grads[] = {go};
      diff::adam_step(params, grads, adam, settings.learning_rate);
    }
    if (!object.all_finite())
      throw NumericError("reconstruction diverged at iteration " + std::to_string(it));
  }
  try {
    result.loss_history.push_back(evaluate(false, nullptr, nullptr));
  } catch (const NumericError& e) {
    throw NumericError("reconstruction diverged at final evaluation: " + std::string(e.what()));
  }

  const Index m = static_cast<Index>(margin) * cfg.upsample;
  result.object = {ComplexImage(object.complex_image().block(m, m, stack.rows() * cfg.upsample,
                                                              stack.cols() * cfg.upsample)),
                   cfg.highres_pitch_um()};
  result.pupil = {model.pupil_amplitude, phase.real_image()};
  return result;
}

namespace {

std::vector<Span> axis_spans(Index n, int grid, int overlap) {
  const Index core = n / grid;
  if (core < 1) throw ConfigError("patch grid is finer than the image");
  if (grid > 1 && overlap >= core)
    throw ConfigError("overlap " + std::to_string(overlap) + " is not smaller than the patch size " +
                      std::to_string(core));
  const Index before = overlap / 2;
  const Index after = overlap - before;
  std::vector<Span> spans;
  for (int k = 0; k < grid; ++k) {
    const Index b0 = k * n / grid;
    const Index b1 = (k + 1) * n / grid;
    spans.push_back({k == 0 ? 0 : b0 - before, k == grid - 1 ? n : b1 + after});
  }
  return spans;
}

// Weight of the patch spanning `s` at absolute position x (upsampled units).
RealImage axis_weights(const std::vector<Span>& spans, std::size_t k, int overlap, int f) {
  const Span& s = spans[k];
  const Index len = s.size() * f;
  Eigen::ArrayXd w = Eigen::ArrayXd::Ones(len);
  const Index v = static_cast<Index>(overlap) * f;
  if (v == 0) return RealImage(w.transpose());
  if (k > 0)  // ramp up over the overlap with the previous patch
    for (Index t = 0; t < v; ++t) w(t) = (static_cast<double>(t) + 0.5) / static_cast<double>(v);
  if (k + 1 < spans.size())  // ramp down over the overlap with the next patch
    for (Index t = 0; t < v; ++t)
      w(len - v + t) *= 1.0 - (static_cast<double>(t) + 0.5) / static_cast<double>(v);
  return RealImage(w.transpose());
}

}  // namespace

PatchLayout make_layout(Index rows, Index cols, const ReconSettings& settings) {
  settings.validate();
  PatchLayout layout;
  layout.rows = rows;
  layout.cols = cols;
  layout.overlap = settings.overlap;
  layout.row_spans = axis_spans(rows, settings.patch_rows, settings.overlap);
  layout.col_spans = axis_spans(cols, settings.patch_cols, settings.overlap);
  return layout;
}

std::vector<ImageStack> split_patches(const ImageStack& stack, const PatchLayout& layout) {
  if (stack.rows() != layout.rows || stack.cols() != layout.cols)
    throw SizeError("stack shape differs from the patch layout");
  std::vector<ImageStack> out;
  for (const Span& rs : layout.row_spans)
    for (const Span& cs : layout.col_spans) {
      ImageStack p;
      p.led_index = stack.led_index;
      p.exposure_ms = stack.exposure_ms;
      for (const auto& im : stack.images)
        p.images.emplace_back(im.block(rs.begin, cs.begin, rs.size(), cs.size()));
      out.push_back(std::move(p));
    }
  return out;
}

RealImage blend_weights(const PatchLayout& layout, std::size_t patch, int upsample) {
  const std::size_t pr = patch / layout.col_spans.size();
  const std::size_t pc = patch % layout.col_spans.size();
  const RealImage wr = axis_weights(layout.row_spans, pr, layout.overlap, upsample);
  const RealImage wc = axis_weights(layout.col_spans, pc, layout.overlap, upsample);
  return (wr.transpose().matrix() * wc.matrix()).array();
}

ComplexField merge_patches(const std::vector<ComplexField>& patches, const PatchLayout& layout,
                           int upsample) {
  if (patches.size() != layout.count())
    throw SizeError("expected " + std::to_string(layout.count()) + " patches, got " +
                    std::to_string(patches.size()));
  const Index f = upsample;
  ComplexImage out = ComplexImage::Zero(layout.rows * f, layout.cols * f);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const Span& rs = layout.row_spans[k / layout.col_spans.size()];
    const Span& cs = layout.col_spans[k % layout.col_spans.size()];
    if (patches[k].rows() != rs.size() * f || patches[k].cols() != cs.size() * f)
      throw SizeError("patch " + std::to_string(k) + " does not match the layout");
    out.block(rs.begin * f, cs.begin * f, rs.size() * f, cs.size() * f) +=
        patches[k].values * blend_weights(layout, k, upsample);
  }
  return {std::move(out), patches.empty() ? 1.0 : patches.front().pitch_um};
}

void align_patch_phases(std::vector<ComplexField>& patches, const PatchLayout& layout,
                        int upsample) {
  if (patches.size() != layout.count()) throw SizeError("patch count does not match the layout");
  const Index f = upsample;
  ComplexImage acc = ComplexImage::Zero(layout.rows * f, layout.cols * f);
  Image<bool> filled = Image<bool>::Constant(acc.rows(), acc.cols(), false);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const Span& rs = layout.row_spans[k / layout.col_spans.size()];
    const Span& cs = layout.col_spans[k % layout.col_spans.size()];
    auto region = acc.block(rs.begin * f, cs.begin * f, rs.size() * f, cs.size() * f);
    auto seen = filled.block(rs.begin * f, cs.begin * f, rs.size() * f, cs.size() * f);
    std::complex<double> overlap{0.0, 0.0};
    for (Index r = 0; r < region.rows(); ++r)
      for (Index c = 0; c < region.cols(); ++c)
        if (seen(r, c)) overlap += std::conj(patches[k].values(r, c)) * region(r, c);
    if (std::abs(overlap) > 0.0) patches[k].values *= overlap / std::abs(overlap);
    for (Index r = 0; r < region.rows(); ++r)
      for (Index c = 0; c < region.cols(); ++c)
        if (!seen(r, c)) {
          region(r, c) = patches[k].values(r, c);
          seen(r, c) = true;
        }
  }
}

ReconResult reconstruct(const ImageStack& stack, const OpticsConfig& cfg,
                        const ReconSettings& settings, const LedSet& leds, int threads) {
  ReconResult out;
  out.layout = make_layout(stack.rows(), stack.cols(), settings);
  const std::vector<ImageStack> parts = split_patches(stack, out.layout);
  const int margin = out.layout.count() > 1 ? settings.margin : 0;
  out.patches.resize(parts.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < parts.size(); k = next++) {
      try {
        out.patches[k] = reconstruct_patch(parts[k], cfg, settings, leds, margin);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(parts.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<ComplexField> fields;
  for (const auto& p : out.patches) fields.push_back(p.object);
  align_patch_phases(fields, out.layout, cfg.upsample);
  out.object = merge_patches(fields, out.layout, cfg.upsample);
  return out;
}

Image<bool> synthetic_passband(const OpticsConfig& cfg, const LedSet& leds, Index hi_rows,
                               Index hi_cols) {
  const double du_r = 1.0 / (static_cast<double>(hi_rows) * cfg.highres_pitch_um());
  const double du_c = 1.0 / (static_cast<double>(hi_cols) * cfg.highres_pitch_um());
  const double cutoff = cfg.pupil_cutoff();
  Image<bool> mask = Image<bool>::Constant(hi_rows, hi_cols, false);
  for (const auto& s : spectrum_shifts(cfg, leds, hi_rows, hi_cols))
    for (Index r = 0; r < hi_rows; ++r)
      for (Index c = 0; c < hi_cols; ++c) {
        const double ur = static_cast<double>(signed_bin(r, hi_rows) - s.row) * du_r;
        const double uc = static_cast<double>(signed_bin(c, hi_cols) - s.col) * du_c;
        if (std::hypot(ur, uc) <= cutoff) mask(r, c) = true;
      }
  return mask;
}

double passband_error(const ComplexField& estimate, const ComplexField& truth,
                      const Image<bool>& mask) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols() ||
      mask.rows() != truth.rows() || mask.cols() != truth.cols())
    throw SizeError("passband error inputs differ in shape");
  const ComplexImage e = fft2(estimate.values);
  const ComplexImage t = fft2(truth.values);
  std::complex<double> inner{0.0, 0.0};
  double norm = 0.0;
  for (Index k = 0; k < t.size(); ++k)
    if (mask(k)) {
      inner += std::conj(e(k)) * t(k);
      norm += std::norm(t(k));
    }
  if (!(norm > 0.0)) throw NumericError("truth has no energy inside the passband");
  const std::complex<double> rot = std::abs(inner) > 0.0 ? inner / std::abs(inner) : 1.0;
  double err = 0.0;
  for (Index k = 0; k < t.size(); ++k)
    if (mask(k)) err += std::norm(e(k) * rot - t(k));
  return std::sqrt(err / norm);
}

}  // namespace fpm
