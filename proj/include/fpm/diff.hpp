#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fpm/optics.hpp"
#include "fpm/types.hpp"

// Tape-based reverse-mode differentiation over dense real and complex arrays.
//
// Complex values carry gradients as independent real/imaginary parts: the
// gradient slot of a complex tensor z holds dL/dRe(z) + i dL/dIm(z). Under
// this convention a C-linear map y = A x back-propagates as A^H, so the
// unitary FFT's backward is the unitary inverse FFT.

namespace fpm::diff {

using Shape = std::vector<Index>;

enum class DType { Real, Complex };

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of up to four dimensions.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  static Tensor real(Shape shape, Eigen::ArrayXd values);
  static Tensor complex(Shape shape, Eigen::ArrayXcd values);
  static Tensor scalar(double value);
  static Tensor from_image(const RealImage& image);
  static Tensor from_image(const ComplexImage& image);

  RealImage real_image() const;
  ComplexImage complex_image() const;

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  bool is_complex() const { return dtype_ == DType::Complex; }
  Index size() const { return shape_size(shape_); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const;

  const Eigen::ArrayXd& real() const { return real_; }
  Eigen::ArrayXd& real() { return real_; }
  const Eigen::ArrayXcd& cplx() const { return cplx_; }
  Eigen::ArrayXcd& cplx() { return cplx_; }

  /// Value of a single-element real tensor.
  double item() const;
  bool all_finite() const;
  /// Same data, new shape of equal size.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  DType dtype_ = DType::Real;
  Eigen::ArrayXd real_;
  Eigen::ArrayXcd cplx_;
};

class Graph;

/// Handle to a node in a Graph. Valid for the graph's lifetime.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Records operations in creation order, which is a topological order.
/// A graph is single-writer; independent graphs may live on different threads.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Input without gradient.
  Var constant(Tensor value);

  /// Record an op output. Throws NumericError naming `op` on a non-finite value.
  Var record(const char* op, Tensor value, const std::vector<int>& inputs,
             BackwardFn backward);

  /// Reverse sweep from a real scalar. Throws ContractError for non-scalar
  /// losses and NumericError on non-finite gradients.
  void backward(Var loss);

  /// Gradient of a node after backward(); zeros if nothing reached it.
  Tensor grad(Var v) const;

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  Eigen::ArrayXd& real_grad(int id);
  Eigen::ArrayXcd& complex_grad(int id);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  void ensure_grad(int id);

  std::deque<Node> nodes_;
};

// Elementwise arithmetic. Mixed real/complex operands promote to complex.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var conj(Var a);
/// |a|^2 for real or complex a; result is real.
Var abs2(Var a);
/// sqrt(max(a, guard)); backward uses the guarded argument.
inline constexpr double kSqrtGuard = 1e-12;
Var sqrt_guarded(Var a, double guard = kSqrtGuard);
/// Elementwise clamp; gradient passes only inside [lo, hi].
Var clamp(Var a, double lo, double hi);
Var leaky_relu(Var a, double slope);
/// exp(i a) for real a.
Var unit_phasor(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// Unitary 2-D transforms of a complex 2-D tensor.
Var fft2(Var a);
Var ifft2(Var a);

/// Low-res window of an unshifted spectrum centred on `shift`.
Var freq_crop(Var spectrum, Index rows, Index cols, SpectrumShift shift);
/// Adjoint of freq_crop: zero-padded placement into a rows x cols spectrum.
Var freq_embed(Var window, Index rows, Index cols, SpectrumShift shift);

/// Sum of all elements of a real tensor, shape {1}.
Var sum(Var a);
Var mean(Var a);
/// Forward differences along the last axis (x) and second-to-last (y).
Var diff_x(Var a);
Var diff_y(Var a);

/// sum_l weights[l] * stack[l] for a real (n, H, W) stack and (n) weights.
Var weighted_sum(Var stack, Var weights);
/// a * s for a real tensor a and a real single-element s.
Var scale_by(Var a, Var s);
/// a / (mean(a) + guard).
Var normalize_mean(Var a, double guard = 1e-12);
Var reshape(Var a, Shape shape);

/// Same-padded stride-1 convolution. x: (Cin, H, W); w: (Cout, Cin, k, k),
/// k odd; b: (Cout).
Var conv2d(Var x, Var w, Var b);
/// (C f^2, H, W) -> (C, f H, f W); output channel c, sub-pixel (dy, dx) reads
/// input channel c f^2 + dy f + dx.
Var pixel_shuffle(Var x, int factor);

/// Worst componentwise relative error between backward() and central finite
/// differences of `f` at `x`. Denominator max(|analytic|, |numeric|, 1e-12).
double check_gradient(const std::function<Var(Var)>& f, const Tensor& x,
                      double step = 1e-6);

/// Bias-corrected Adam. Complex parameters update real and imaginary parts
/// independently.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
               AdamState& state, double learning_rate);

}  // namespace fpm::diff
