#include "fpm/diff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fpm/error.hpp"
#include "fpm/fft.hpp"

namespace fpm::diff {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Complex = std::complex<double>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw SizeError(std::string(op) + ": shape " + shape_string(a.shape()) +
                    " does not match " + shape_string(b.shape()));
}

void require_real(const Tensor& a, const char* op) {
  if (a.is_complex()) throw ContractError(std::string(op) + ": expects a real tensor");
}

void require_ndim(const Tensor& a, int ndim, const char* op) {
  if (a.ndim() != ndim)
    throw SizeError(std::string(op) + ": expects " + std::to_string(ndim) +
                    "-D input, got " + shape_string(a.shape()));
}

Eigen::ArrayXcd as_complex(const Tensor& t) {
  if (t.is_complex()) return t.cplx();
  return t.real().cast<Complex>();
}

// Accumulate a complex-valued gradient into a node of either dtype.
void accumulate(Graph& g, int id, const Eigen::ArrayXcd& delta) {
  if (!g.needs_grad(id)) return;
  if (g.value(id).is_complex())
    g.complex_grad(id) += delta;
  else
    g.real_grad(id) += delta.real();
}

void accumulate(Graph& g, int id, const Eigen::ArrayXd& delta) {
  if (!g.needs_grad(id)) return;
  if (g.value(id).is_complex())
    g.complex_grad(id) += delta.cast<Complex>();
  else
    g.real_grad(id) += delta;
}

ComplexImage view_image(const Eigen::ArrayXcd& flat, Index rows, Index cols) {
  return Eigen::Map<const ComplexImage>(flat.data(), rows, cols);
}

Eigen::ArrayXcd flatten(const ComplexImage& im) {
  return Eigen::Map<const Eigen::ArrayXcd>(im.data(), im.size());
}

// Batch count and trailing plane dims of a tensor with ndim >= 2.
struct Planes {
  Index count;
  Index rows;
  Index cols;
};

Planes planes_of(const Tensor& t, const char* op) {
  if (t.ndim() < 2)
    throw SizeError(std::string(op) + ": expects at least 2-D input, got " +
                    shape_string(t.shape()));
  const Index rows = t.dim(t.ndim() - 2);
  const Index cols = t.dim(t.ndim() - 1);
  return {t.size() / std::max<Index>(rows * cols, 1), rows, cols};
}

// Unshifted low-res bin r maps to high-res bin (signed(r) + shift) mod hi.
std::vector<Index> window_index(Index lo, Index hi, Index shift) {
  std::vector<Index> idx(static_cast<std::size_t>(lo));
  for (Index r = 0; r < lo; ++r) idx[static_cast<std::size_t>(r)] = wrap_bin(signed_bin(r, lo) + shift, hi);
  return idx;
}

RowMatrix im2col(const double* x, Index channels, Index rows, Index cols, Index k) {
  const Index pad = k / 2;
  RowMatrix col = RowMatrix::Zero(channels * k * k, rows * cols);
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        double* dst = col.data() + ((c * k + ky) * k + kx) * rows * cols;
        const double* src = x + c * rows * cols;
        for (Index y = 0; y < rows; ++y) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= rows) continue;
          const Index x0 = std::max<Index>(0, pad - kx);
          const Index x1 = std::min<Index>(cols, cols + pad - kx);
          for (Index xx = x0; xx < x1; ++xx) dst[y * cols + xx] = src[sy * cols + xx + kx - pad];
        }
      }
  return col;
}

void col2im_add(const RowMatrix& col, double* x, Index channels, Index rows, Index cols,
                Index k) {
  const Index pad = k / 2;
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const double* src = col.data() + ((c * k + ky) * k + kx) * rows * cols;
        double* dst = x + c * rows * cols;
        for (Index y = 0; y < rows; ++y) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= rows) continue;
          const Index x0 = std::max<Index>(0, pad - kx);
          const Index x1 = std::min<Index>(cols, cols + pad - kx);
          for (Index xx = x0; xx < x1; ++xx) dst[sy * cols + xx + kx - pad] += src[y * cols + xx];
        }
      }
}

}  // namespace

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  if (dtype_ == DType::Real)
    real_ = Eigen::ArrayXd::Zero(size());
  else
    cplx_ = Eigen::ArrayXcd::Zero(size());
}

Tensor Tensor::real(Shape shape, Eigen::ArrayXd values) {
  if (values.size() != shape_size(shape)) throw SizeError("tensor data does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::Real;
  t.real_ = std::move(values);
  return t;
}

Tensor Tensor::complex(Shape shape, Eigen::ArrayXcd values) {
  if (values.size() != shape_size(shape)) throw SizeError("tensor data does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::Complex;
  t.cplx_ = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return real({1}, Eigen::ArrayXd::Constant(1, value)); }

Tensor Tensor::from_image(const RealImage& image) {
  return real({image.rows(), image.cols()},
              Eigen::Map<const Eigen::ArrayXd>(image.data(), image.size()));
}

Tensor Tensor::from_image(const ComplexImage& image) {
  return complex({image.rows(), image.cols()}, flatten(image));
}

RealImage Tensor::real_image() const {
  if (is_complex() || ndim() != 2) throw ContractError("tensor is not a real 2-D image");
  return Eigen::Map<const RealImage>(real_.data(), shape_[0], shape_[1]);
}

ComplexImage Tensor::complex_image() const {
  if (!is_complex() || ndim() != 2) throw ContractError("tensor is not a complex 2-D image");
  return view_image(cplx_, shape_[0], shape_[1]);
}

Index Tensor::dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

double Tensor::item() const {
  if (is_complex() || size() != 1) throw ContractError("item() needs a real single-element tensor");
  return real_(0);
}

bool Tensor::all_finite() const { return is_complex() ? cplx_.allFinite() : real_.allFinite(); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size())
    throw SizeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(const char* op, Tensor value, const std::vector<int>& inputs,
                  BackwardFn backward) {
  if (!value.all_finite())
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (int id : inputs) n.requires_grad = n.requires_grad || needs_grad(id);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::ensure_grad(int id) {
  Node& n = node(id);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), n.value.dtype());
    n.has_grad = true;
  }
}

Eigen::ArrayXd& Graph::real_grad(int id) {
  ensure_grad(id);
  return node(id).grad.real();
}

Eigen::ArrayXcd& Graph::complex_grad(int id) {
  ensure_grad(id);
  return node(id).grad.cplx();
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
  const Tensor& lv = value(loss.id());
  if (lv.is_complex() || lv.size() != 1)
    throw ContractError("backward needs a real scalar loss, got shape " +
                        shape_string(lv.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  real_grad(loss.id()).setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.has_grad || !n.backward) continue;
    if (!n.grad.all_finite())
      throw NumericError(std::string("non-finite gradient at output of op '") + n.op + "'");
    n.backward(*this, n.grad);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), n.value.dtype());
}

// ---------------------------------------------------------------------------
// Elementwise ops

Var add(Var a, Var b) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  const int ia = a.id(), ib = b.id();
  if (!av.is_complex() && !bv.is_complex()) {
    return g.record("add", Tensor::real(av.shape(), av.real() + bv.real()), {ia, ib},
                    [ia, ib](Graph& g, const Tensor& gr) {
                      accumulate(g, ia, gr.real());
                      accumulate(g, ib, gr.real());
                    });
  }
  return g.record("add", Tensor::complex(av.shape(), as_complex(av) + as_complex(bv)),
                  {ia, ib}, [ia, ib](Graph& g, const Tensor& gr) {
                    accumulate(g, ia, gr.cplx());
                    accumulate(g, ib, gr.cplx());
                  });
}

Var sub(Var a, Var b) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  const int ia = a.id(), ib = b.id();
  if (!av.is_complex() && !bv.is_complex()) {
    return g.record("sub", Tensor::real(av.shape(), av.real() - bv.real()), {ia, ib},
                    [ia, ib](Graph& g, const Tensor& gr) {
                      accumulate(g, ia, gr.real());
                      accumulate(g, ib, Eigen::ArrayXd(-gr.real()));
                    });
  }
  return g.record("sub", Tensor::complex(av.shape(), as_complex(av) - as_complex(bv)),
                  {ia, ib}, [ia, ib](Graph& g, const Tensor& gr) {
                    accumulate(g, ia, gr.cplx());
                    accumulate(g, ib, Eigen::ArrayXcd(-gr.cplx()));
                  });
}

Var mul(Var a, Var b) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  const int ia = a.id(), ib = b.id();
  if (!av.is_complex() && !bv.is_complex()) {
    return g.record("mul", Tensor::real(av.shape(), av.real() * bv.real()), {ia, ib},
                    [ia, ib](Graph& g, const Tensor& gr) {
                      accumulate(g, ia, Eigen::ArrayXd(gr.real() * g.value(ib).real()));
                      accumulate(g, ib, Eigen::ArrayXd(gr.real() * g.value(ia).real()));
                    });
  }
  // dL/da = G conj(b) for complex a; the real part of that for real a.
  return g.record("mul", Tensor::complex(av.shape(), as_complex(av) * as_complex(bv)),
                  {ia, ib}, [ia, ib](Graph& g, const Tensor& gr) {
                    if (g.needs_grad(ia))
                      accumulate(g, ia, Eigen::ArrayXcd(gr.cplx() * as_complex(g.value(ib)).conjugate()));
                    if (g.needs_grad(ib))
                      accumulate(g, ib, Eigen::ArrayXcd(gr.cplx() * as_complex(g.value(ia)).conjugate()));
                  });
}

Var scale(Var a, double factor) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const int ia = a.id();
  Tensor out = av;
  if (out.is_complex())
    out.cplx() *= factor;
  else
    out.real() *= factor;
  return g.record("scale", std::move(out), {ia}, [ia, factor](Graph& g, const Tensor& gr) {
    if (gr.is_complex())
      accumulate(g, ia, Eigen::ArrayXcd(gr.cplx() * factor));
    else
      accumulate(g, ia, Eigen::ArrayXd(gr.real() * factor));
  });
}

Var conj(Var a) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const int ia = a.id();
  if (!av.is_complex())
    return g.record("conj", av, {ia},
                    [ia](Graph& g, const Tensor& gr) { accumulate(g, ia, gr.real()); });
  return g.record("conj", Tensor::complex(av.shape(), av.cplx().conjugate()), {ia},
                  [ia](Graph& g, const Tensor& gr) {
                    accumulate(g, ia, Eigen::ArrayXcd(gr.cplx().conjugate()));
                  });
}

Var abs2(Var a) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const int ia = a.id();
  Eigen::ArrayXd value = av.is_complex() ? Eigen::ArrayXd(av.cplx().abs2())
                                         : Eigen::ArrayXd(av.real().square());
  return g.record("abs2", Tensor::real(av.shape(), std::move(value)), {ia},
                  [ia](Graph& g, const Tensor& gr) {
                    const Tensor& x = g.value(ia);
                    if (x.is_complex())
                      accumulate(g, ia, Eigen::ArrayXcd(2.0 * x.cplx() * gr.real().cast<Complex>()));
                    else
                      accumulate(g, ia, Eigen::ArrayXd(2.0 * x.real() * gr.real()));
                  });
}

Var sqrt_guarded(Var a, double guard) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "sqrt_guarded");
  const int ia = a.id();
  Eigen::ArrayXd root = av.real().max(guard).sqrt();
  return g.record("sqrt_guarded", Tensor::real(av.shape(), root), {ia},
                  [ia, root](Graph& g, const Tensor& gr) {
                    accumulate(g, ia, Eigen::ArrayXd(0.5 * gr.real() / root));
                  });
}

Var clamp(Var a, double lo, double hi) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "clamp");
  const int ia = a.id();
  return g.record("clamp", Tensor::real(av.shape(), av.real().max(lo).min(hi)), {ia},
                  [ia, lo, hi](Graph& g, const Tensor& gr) {
                    const Eigen::ArrayXd& x = g.value(ia).real();
                    accumulate(g, ia, Eigen::ArrayXd(((x >= lo) && (x <= hi)).select(gr.real(), 0.0)));
                  });
}

Var leaky_relu(Var a, double slope) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "leaky_relu");
  const int ia = a.id();
  return g.record("leaky_relu",
                  Tensor::real(av.shape(), (av.real() > 0.0).select(av.real(), slope * av.real())),
                  {ia}, [ia, slope](Graph& g, const Tensor& gr) {
                    const Eigen::ArrayXd& x = g.value(ia).real();
                    accumulate(g, ia, Eigen::ArrayXd((x > 0.0).select(gr.real(), slope * gr.real())));
                  });
}

Var unit_phasor(Var a) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "unit_phasor");
  const int ia = a.id();
  Eigen::ArrayXcd y(av.size());
  for (Index k = 0; k < y.size(); ++k) y(k) = std::polar(1.0, av.real()(k));
  return g.record("unit_phasor", Tensor::complex(av.shape(), y), {ia},
                  [ia, y](Graph& g, const Tensor& gr) {
                    // dL/dphi = Re(conj(G) i y) = -Im(conj(G) y)
                    accumulate(g, ia, Eigen::ArrayXd(-(gr.cplx().conjugate() * y).imag()));
                  });
}

// ---------------------------------------------------------------------------
// Fourier ops

namespace {

Var transform(Var a, bool inverse) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const char* op = inverse ? "ifft2" : "fft2";
  require_ndim(av, 2, op);
  const Index rows = av.dim(0), cols = av.dim(1);
  const ComplexImage in = view_image(as_complex(av), rows, cols);
  const ComplexImage out = inverse ? fpm::ifft2(in) : fpm::fft2(in);
  const int ia = a.id();
  return g.record(op, Tensor::complex(av.shape(), flatten(out)), {ia},
                  [ia, rows, cols, inverse](Graph& g, const Tensor& gr) {
                    const ComplexImage gi = view_image(gr.cplx(), rows, cols);
                    accumulate(g, ia, flatten(inverse ? fpm::fft2(gi) : fpm::ifft2(gi)));
                  });
}

}  // namespace

Var fft2(Var a) { return transform(a, false); }
Var ifft2(Var a) { return transform(a, true); }

Var freq_crop(Var spectrum, Index rows, Index cols, SpectrumShift shift) {
  Graph& g = spectrum.graph();
  const Tensor& sv = spectrum.value();
  require_ndim(sv, 2, "freq_crop");
  const Index hi_rows = sv.dim(0), hi_cols = sv.dim(1);
  check_window(rows, cols, hi_rows, hi_cols, shift);
  const auto ri = window_index(rows, hi_rows, shift.row);
  const auto ci = window_index(cols, hi_cols, shift.col);
  const Eigen::ArrayXcd src = as_complex(sv);
  Eigen::ArrayXcd out(rows * cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      out(r * cols + c) = src(ri[static_cast<std::size_t>(r)] * hi_cols + ci[static_cast<std::size_t>(c)]);
  const int is = spectrum.id();
  return g.record("freq_crop", Tensor::complex({rows, cols}, std::move(out)), {is},
                  [is, rows, cols, hi_rows, hi_cols, ri, ci](Graph& g, const Tensor& gr) {
                    Eigen::ArrayXcd full = Eigen::ArrayXcd::Zero(hi_rows * hi_cols);
                    for (Index r = 0; r < rows; ++r)
                      for (Index c = 0; c < cols; ++c)
                        full(ri[static_cast<std::size_t>(r)] * hi_cols + ci[static_cast<std::size_t>(c)]) +=
                            gr.cplx()(r * cols + c);
                    accumulate(g, is, full);
                  });
}

Var freq_embed(Var window, Index rows, Index cols, SpectrumShift shift) {
  Graph& g = window.graph();
  const Tensor& wv = window.value();
  require_ndim(wv, 2, "freq_embed");
  const Index lo_rows = wv.dim(0), lo_cols = wv.dim(1);
  check_window(lo_rows, lo_cols, rows, cols, shift);
  const auto ri = window_index(lo_rows, rows, shift.row);
  const auto ci = window_index(lo_cols, cols, shift.col);
  const Eigen::ArrayXcd src = as_complex(wv);
  Eigen::ArrayXcd out = Eigen::ArrayXcd::Zero(rows * cols);
  for (Index r = 0; r < lo_rows; ++r)
    for (Index c = 0; c < lo_cols; ++c)
      out(ri[static_cast<std::size_t>(r)] * cols + ci[static_cast<std::size_t>(c)]) = src(r * lo_cols + c);
  const int iw = window.id();
  return g.record("freq_embed", Tensor::complex({rows, cols}, std::move(out)), {iw},
                  [iw, lo_rows, lo_cols, cols, ri, ci](Graph& g, const Tensor& gr) {
                    Eigen::ArrayXcd part(lo_rows * lo_cols);
                    for (Index r = 0; r < lo_rows; ++r)
                      for (Index c = 0; c < lo_cols; ++c)
                        part(r * lo_cols + c) =
                            gr.cplx()(ri[static_cast<std::size_t>(r)] * cols + ci[static_cast<std::size_t>(c)]);
                    accumulate(g, iw, part);
                  });
}

// ---------------------------------------------------------------------------
// Reductions and differences

Var sum(Var a) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "sum");
  const int ia = a.id();
  const Index n = av.size();
  return g.record("sum", Tensor::scalar(av.real().sum()), {ia},
                  [ia, n](Graph& g, const Tensor& gr) {
                    accumulate(g, ia, Eigen::ArrayXd(Eigen::ArrayXd::Constant(n, gr.real()(0))));
                  });
}

Var mean(Var a) {
  const Index n = a.value().size();
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

template <typename Array>
Array forward_difference(const Array& src, Planes p, bool along_x) {
  const Index out_rows = along_x ? p.rows : p.rows - 1;
  const Index out_cols = along_x ? p.cols - 1 : p.cols;
  Array out(p.count * out_rows * out_cols);
  for (Index b = 0; b < p.count; ++b)
    for (Index r = 0; r < out_rows; ++r)
      for (Index c = 0; c < out_cols; ++c) {
        const Index i0 = (b * p.rows + r) * p.cols + c;
        const Index i1 = along_x ? i0 + 1 : i0 + p.cols;
        out((b * out_rows + r) * out_cols + c) = src(i1) - src(i0);
      }
  return out;
}

template <typename Array>
Array forward_difference_adjoint(const Array& grad, Planes p, bool along_x) {
  const Index out_rows = along_x ? p.rows : p.rows - 1;
  const Index out_cols = along_x ? p.cols - 1 : p.cols;
  Array in = Array::Zero(p.count * p.rows * p.cols);
  for (Index b = 0; b < p.count; ++b)
    for (Index r = 0; r < out_rows; ++r)
      for (Index c = 0; c < out_cols; ++c) {
        const Index i0 = (b * p.rows + r) * p.cols + c;
        const Index i1 = along_x ? i0 + 1 : i0 + p.cols;
        const auto v = grad((b * out_rows + r) * out_cols + c);
        in(i1) += v;
        in(i0) -= v;
      }
  return in;
}

Var difference(Var a, bool along_x) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const char* op = along_x ? "diff_x" : "diff_y";
  const Planes p = planes_of(av, op);
  if ((along_x ? p.cols : p.rows) < 2)
    throw SizeError(std::string(op) + ": axis too short for a forward difference");
  Shape shape = av.shape();
  shape[shape.size() - (along_x ? 1 : 2)] -= 1;
  const int ia = a.id();
  auto backward = [ia, p, along_x](Graph& g, const Tensor& gr) {
    if (gr.is_complex())
      accumulate(g, ia, forward_difference_adjoint(gr.cplx(), p, along_x));
    else
      accumulate(g, ia, forward_difference_adjoint(gr.real(), p, along_x));
  };
  if (av.is_complex())
    return g.record(op, Tensor::complex(shape, forward_difference(av.cplx(), p, along_x)), {ia},
                    backward);
  return g.record(op, Tensor::real(shape, forward_difference(av.real(), p, along_x)), {ia},
                  backward);
}

}  // namespace

Var diff_x(Var a) { return difference(a, true); }
Var diff_y(Var a) { return difference(a, false); }

// ---------------------------------------------------------------------------
// Pattern emulation helpers

Var weighted_sum(Var stack, Var weights) {
  Graph& g = stack.graph();
  const Tensor& sv = stack.value();
  const Tensor& wv = weights.value();
  require_real(sv, "weighted_sum");
  require_real(wv, "weighted_sum");
  require_ndim(sv, 3, "weighted_sum");
  const Index n = sv.dim(0), rows = sv.dim(1), cols = sv.dim(2);
  if (wv.size() != n)
    throw SizeError("weighted_sum: " + std::to_string(wv.size()) + " weights for " +
                    std::to_string(n) + " images");
  const Index plane = rows * cols;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(plane);
  for (Index l = 0; l < n; ++l) out += wv.real()(l) * sv.real().segment(l * plane, plane);
  const int is = stack.id(), iw = weights.id();
  return g.record("weighted_sum", Tensor::real({rows, cols}, std::move(out)), {is, iw},
                  [is, iw, n, plane](Graph& g, const Tensor& gr) {
                    const Eigen::ArrayXd& s = g.value(is).real();
                    const Eigen::ArrayXd& w = g.value(iw).real();
                    if (g.needs_grad(iw)) {
                      Eigen::ArrayXd dw(n);
                      for (Index l = 0; l < n; ++l)
                        dw(l) = (gr.real() * s.segment(l * plane, plane)).sum();
                      accumulate(g, iw, dw);
                    }
                    if (g.needs_grad(is)) {
                      Eigen::ArrayXd ds(n * plane);
                      for (Index l = 0; l < n; ++l) ds.segment(l * plane, plane) = w(l) * gr.real();
                      accumulate(g, is, ds);
                    }
                  });
}

Var scale_by(Var a, Var s) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  require_real(av, "scale_by");
  require_real(sv, "scale_by");
  if (sv.size() != 1) throw SizeError("scale_by: factor must be a single element");
  const int ia = a.id(), is = s.id();
  return g.record("scale_by", Tensor::real(av.shape(), av.real() * sv.real()(0)), {ia, is},
                  [ia, is](Graph& g, const Tensor& gr) {
                    if (g.needs_grad(ia))
                      accumulate(g, ia, Eigen::ArrayXd(gr.real() * g.value(is).real()(0)));
                    if (g.needs_grad(is))
                      accumulate(g, is, Eigen::ArrayXd::Constant(1, (gr.real() * g.value(ia).real()).sum()).eval());
                  });
}

Var normalize_mean(Var a, double guard) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  require_real(av, "normalize_mean");
  const int ia = a.id();
  const double n = static_cast<double>(av.size());
  const double mu = av.real().sum() / n + guard;
  if (!(mu > 0.0)) throw NumericError("normalize_mean: nonpositive mean");
  return g.record("normalize_mean", Tensor::real(av.shape(), av.real() / mu), {ia},
                  [ia, mu, n](Graph& g, const Tensor& gr) {
                    const Eigen::ArrayXd& x = g.value(ia).real();
                    const double coupling = (gr.real() * x).sum() / (mu * mu * n);
                    accumulate(g, ia, Eigen::ArrayXd(gr.real() / mu - coupling));
                  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = a.graph();
  const int ia = a.id();
  return g.record("reshape", a.value().reshaped(std::move(shape)), {ia},
                  [ia](Graph& g, const Tensor& gr) {
                    if (gr.is_complex())
                      accumulate(g, ia, gr.cplx());
                    else
                      accumulate(g, ia, gr.real());
                  });
}

// ---------------------------------------------------------------------------
// Network layers

Var conv2d(Var x, Var w, Var b) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_real(xv, "conv2d");
  require_real(wv, "conv2d");
  require_real(bv, "conv2d");
  require_ndim(xv, 3, "conv2d");
  require_ndim(wv, 4, "conv2d");
  const Index cin = xv.dim(0), rows = xv.dim(1), cols = xv.dim(2);
  const Index cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k || k % 2 == 0)
    throw SizeError("conv2d: weight shape " + shape_string(wv.shape()) +
                    " incompatible with input " + shape_string(xv.shape()));
  if (bv.size() != cout) throw SizeError("conv2d: bias length differs from output channels");

  RowMatrix col = im2col(xv.real().data(), cin, rows, cols, k);
  Eigen::Map<const RowMatrix> weight(wv.real().data(), cout, cin * k * k);
  RowMatrix out = weight * col;
  out.colwise() += Eigen::Map<const Eigen::VectorXd>(bv.real().data(), cout);

  const int ix = x.id(), iw = w.id(), ib = b.id();
  return g.record(
      "conv2d",
      Tensor::real({cout, rows, cols}, Eigen::Map<const Eigen::ArrayXd>(out.data(), out.size())),
      {ix, iw, ib},
      [ix, iw, ib, cin, cout, rows, cols, k, col = std::move(col)](Graph& g, const Tensor& gr) {
        Eigen::Map<const RowMatrix> grad(gr.real().data(), cout, rows * cols);
        if (g.needs_grad(iw)) {
          RowMatrix dw = grad * col.transpose();
          accumulate(g, iw, Eigen::ArrayXd(Eigen::Map<const Eigen::ArrayXd>(dw.data(), dw.size())));
        }
        if (g.needs_grad(ib)) accumulate(g, ib, Eigen::ArrayXd(grad.rowwise().sum().array()));
        if (g.needs_grad(ix)) {
          Eigen::Map<const RowMatrix> weight(g.value(iw).real().data(), cout, cin * k * k);
          RowMatrix dcol = weight.transpose() * grad;
          Eigen::ArrayXd dx = Eigen::ArrayXd::Zero(cin * rows * cols);
          col2im_add(dcol, dx.data(), cin, rows, cols, k);
          accumulate(g, ix, dx);
        }
      });
}

Var pixel_shuffle(Var x, int factor) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  require_real(xv, "pixel_shuffle");
  require_ndim(xv, 3, "pixel_shuffle");
  const Index f = factor;
  const Index cin = xv.dim(0), rows = xv.dim(1), cols = xv.dim(2);
  if (f < 1 || cin % (f * f) != 0)
    throw SizeError("pixel_shuffle: channel count not divisible by factor^2");
  const Index cout = cin / (f * f);
  const Index orows = rows * f, ocols = cols * f;
  // out index -> in index
  std::vector<Index> source(static_cast<std::size_t>(cout * orows * ocols));
  for (Index c = 0; c < cout; ++c)
    for (Index oy = 0; oy < orows; ++oy)
      for (Index ox = 0; ox < ocols; ++ox) {
        const Index ic = c * f * f + (oy % f) * f + (ox % f);
        source[static_cast<std::size_t>((c * orows + oy) * ocols + ox)] =
            (ic * rows + oy / f) * cols + ox / f;
      }
  Eigen::ArrayXd out(static_cast<Index>(source.size()));
  for (Index i = 0; i < out.size(); ++i) out(i) = xv.real()(source[static_cast<std::size_t>(i)]);
  const int ix = x.id();
  const Index in_size = xv.size();
  return g.record("pixel_shuffle", Tensor::real({cout, orows, ocols}, std::move(out)), {ix},
                  [ix, in_size, source = std::move(source)](Graph& g, const Tensor& gr) {
                    Eigen::ArrayXd dx(in_size);
                    for (std::size_t i = 0; i < source.size(); ++i)
                      dx(source[i]) = gr.real()(static_cast<Index>(i));
                    accumulate(g, ix, dx);
                  });
}

// ---------------------------------------------------------------------------
// Verification and optimisation

double check_gradient(const std::function<Var(Var)>& f, const Tensor& x, double step) {
  Graph graph;
  Var xv = graph.leaf(x);
  graph.backward(f(xv));
  const Tensor analytic = graph.grad(xv);

  auto evaluate = [&f](const Tensor& at) {
    Graph g;
    return f(g.leaf(at)).value().item();
  };

  double worst = 0.0;
  auto compare = [&worst](double a, double n) {
    const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
    worst = std::max(worst, std::abs(a - n) / denom);
  };

  for (Index k = 0; k < x.size(); ++k) {
    if (x.is_complex()) {
      for (int part = 0; part < 2; ++part) {
        const Complex delta = part == 0 ? Complex(step, 0.0) : Complex(0.0, step);
        Tensor plus = x, minus = x;
        plus.cplx()(k) += delta;
        minus.cplx()(k) -= delta;
        const double numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step);
        const Complex a = analytic.cplx()(k);
        compare(part == 0 ? a.real() : a.imag(), numeric);
      }
    } else {
      Tensor plus = x, minus = x;
      plus.real()(k) += step;
      minus.real()(k) -= step;
      compare(analytic.real()(k), (evaluate(plus) - evaluate(minus)) / (2.0 * step));
    }
  }
  return worst;
}

namespace {

// Real view of a tensor's storage; complex data as interleaved (re, im).
Eigen::Map<Eigen::ArrayXd> real_view(Tensor& t) {
  if (t.is_complex())
    return {reinterpret_cast<double*>(t.cplx().data()), 2 * t.size()};
  return {t.real().data(), t.size()};
}

Eigen::Map<const Eigen::ArrayXd> real_view(const Tensor& t) {
  if (t.is_complex())
    return {reinterpret_cast<const double*>(t.cplx().data()), 2 * t.size()};
  return {t.real().data(), t.size()};
}

}  // namespace

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
               AdamState& state, double learning_rate) {
  if (params.size() != grads.size())
    throw SizeError("adam_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const Tensor* p : params) {
      state.first_moment.emplace_back(p->shape(), p->dtype());
      state.second_moment.emplace_back(p->shape(), p->dtype());
    }
  }
  if (state.first_moment.size() != params.size())
    throw SizeError("adam_step: optimizer state was built for a different parameter set");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (grads[i].shape() != p.shape() || grads[i].dtype() != p.dtype())
      throw SizeError("adam_step: gradient " + std::to_string(i) + " does not match its parameter");
    auto value = real_view(p);
    auto grad = real_view(grads[i]);
    auto m = real_view(state.first_moment[i]);
    auto v = real_view(state.second_moment[i]);
    m = state.beta1 * m + (1.0 - state.beta1) * grad;
    v = state.beta2 * v + (1.0 - state.beta2) * grad.square();
    value -= learning_rate * (m / bias1) / ((v / bias2).sqrt() + state.epsilon);
  }
}

}  // namespace fpm::diff
