#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fgq {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;
struct TensorImpl;

/// Dense f64 tensor handle. Copies are shallow (shared storage); detach()
/// produces an independent value with no graph attachment.
///
/// A tensor participates in autodiff when it either is a leaf created with
/// requires_grad, or was produced by an op recorded on an active Tape.
/// Gradients accumulate additively into `grad` across backward() calls until
/// zero_grad() is called.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  /// Leaf with requires_grad set, the constructor used for parameters.
  static Tensor param(Shape shape, std::vector<double> data);

  bool defined() const { return im_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int ndim() const;
  int64_t dim(int i) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double at(int64_t i) const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  /// Leaves always receive gradients; an intermediate (op output) keeps its
  /// gradient across backward() only when marked this way. Used for
  /// activation hooks.
  Tensor& retain_grad();

  /// Accumulated gradient (zeros if no backward has touched this tensor).
  std::vector<double> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Value copy detached from any tape.
  Tensor detach() const;

  std::shared_ptr<TensorImpl> impl() const { return im_; }
  explicit Tensor(std::shared_ptr<TensorImpl> im) : im_(std::move(im)) {}

 private:
  std::shared_ptr<TensorImpl> im_;
};

/// When checked mode is on (the default), every forward op scans its output
/// and raises on NaN/Inf instead of letting them propagate.
void set_checked_mode(bool on);
bool checked_mode();
struct CheckedModeGuard {
  explicit CheckedModeGuard(bool on) : prev_(checked_mode()) { set_checked_mode(on); }
  ~CheckedModeGuard() { set_checked_mode(prev_); }
  bool prev_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Each returns a fresh tensor; a node is recorded on the
// active tape when any input requires grad.
// ---------------------------------------------------------------------------

/// Elementwise with suffix broadcast: rhs.shape must equal a trailing
/// slice of lhs.shape (broadcast over the leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// a * x + b with scalar constants (covers scalar mul / negate / shift).
Tensor affine(const Tensor& x, double a, double b);

/// 2D x 2D, batched 3D x 3D (equal batch), or 3D x 2D (shared rhs).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swap of the last two axes.
Tensor transpose2(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

/// Full reductions to a scalar (shape {}).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one axis; the axis is removed from the shape.
Tensor mean_axis(const Tensor& x, int axis);

Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
/// Elementwise 1/x.
Tensor recip(const Tensor& x);
Tensor gelu(const Tensor& x);
/// Softmax over the last axis.
Tensor softmax(const Tensor& x);
/// Layer normalization over the last axis with affine gamma/beta
/// (population variance, matching var([1,2,3]) = 2/3).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Clamp with subgradient 1 inside the range and exactly at the boundary.
Tensor clamp(const Tensor& x, double lo, double hi);
/// Round half away from zero; straight-through gradient (identity).
Tensor round_ste(const Tensor& x);
/// X = A^-1 B via LU solve (A square 2D, B 2D). Differentiable in both.
Tensor mat_solve(const Tensor& a, const Tensor& b);

/// Extension point for fused ops (the quantizer registers through this).
/// `gin[i]` is null when input i does not require grad; otherwise the hook
/// must += its contribution into the referenced buffer.
using CustomBackward = std::function<void(const std::vector<Tensor>& inputs, const Tensor& output,
                                          const std::vector<double>& gout,
                                          const std::vector<std::vector<double>*>& gin)>;
Tensor custom_op(const char* name, std::vector<Tensor> inputs, Tensor value, CustomBackward bw);

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Records the primitive ops of one forward evaluation in execution order.
/// Single-writer: one evaluation per tape. backward() walks the record in
/// reverse; per-call contributions are computed in scratch buffers in a
/// fixed (node-order) sequence and flushed additively into each tensor's
/// grad, so repeated backward() calls accumulate.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// root must be a scalar produced by this tape.
  void backward(const Tensor& root);

  size_t num_nodes() const;
  /// Node ids of the inputs of node `id` (-1 entries are leaves); for
  /// checking the topological invariant in tests.
  std::vector<int> input_node_ids(int id) const;
  const char* op_name(int id) const;

  struct Impl;
  Impl* impl() const { return impl_.get(); }

 private:
  std::unique_ptr<Impl> impl_;
};

/// RAII activation of a tape for the current thread.
struct TapeScope {
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function, the verification oracle
/// for backward(). Raises when eps is too small for the floating format
/// (detected by a zero difference at a point where a larger step moves f).
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& point,
                              double eps);

}  // namespace fgq
