#include "fgq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "fgq/linalg.hpp"

namespace fgq {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

thread_local bool g_checked = true;
thread_local Tape* g_tape = nullptr;

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means all-zero
  bool requires_grad = false;
  bool retain_grad = false;
  Tape::Impl* tape = nullptr;
  int node_id = -1;
};

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto im = std::make_shared<TensorImpl>();
  im->shape = std::move(shape);
  im->data = std::move(data);
  return im;
}

const TensorImpl& req(const Tensor& t, const char* what) {
  if (!t.defined()) throw std::invalid_argument(std::string(what) + ": undefined tensor");
  return *t.impl();
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
  int64_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
  int64_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return Tensor(make_impl({}, {value})); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
  Tensor t = from_data(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

const Shape& Tensor::shape() const { return req(*this, "shape").shape; }
int64_t Tensor::size() const { return static_cast<int64_t>(req(*this, "size").data.size()); }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }
int64_t Tensor::dim(int i) const { return shape().at(i); }

std::vector<double>& Tensor::data() {
  if (!im_) throw std::invalid_argument("data: undefined tensor");
  return im_->data;
}
const std::vector<double>& Tensor::data() const { return req(*this, "data").data; }
double Tensor::at(int64_t i) const { return data().at(i); }

double Tensor::item() const {
  const auto& d = data();
  if (d.size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(d.size()) + " elements");
  return d[0];
}

bool Tensor::requires_grad() const { return req(*this, "requires_grad").requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!im_) throw std::invalid_argument("set_requires_grad: undefined tensor");
  im_->requires_grad = v;
  return *this;
}

Tensor& Tensor::retain_grad() {
  if (!im_) throw std::invalid_argument("retain_grad: undefined tensor");
  im_->retain_grad = true;
  return *this;
}

std::vector<double> Tensor::grad() const {
  const auto& im = req(*this, "grad");
  if (im.grad.empty()) return std::vector<double>(im.data.size(), 0.0);
  return im.grad;
}

bool Tensor::has_grad() const { return !req(*this, "grad").grad.empty(); }

void Tensor::zero_grad() {
  if (im_) im_->grad.clear();
}

Tensor Tensor::detach() const {
  const auto& im = req(*this, "detach");
  return Tensor(make_impl(im.shape, im.data));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class Op {
  Add, Sub, Mul, Affine, MatMul, Transpose2, Reshape, Concat, Slice,
  Sum, Mean, MeanAxis, Square, Sqrt, Exp, Recip, Gelu, Softmax,
  LayerNorm, Clamp, RoundSte, MatSolve, Custom,
};

namespace {
const char* op_label(Op op) {
  switch (op) {
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Affine: return "affine";
    case Op::MatMul: return "matmul";
    case Op::Transpose2: return "transpose2";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MeanAxis: return "mean_axis";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Exp: return "exp";
    case Op::Recip: return "recip";
    case Op::Gelu: return "gelu";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layernorm";
    case Op::Clamp: return "clamp";
    case Op::RoundSte: return "round_ste";
    case Op::MatSolve: return "mat_solve";
    case Op::Custom: return "custom";
  }
  return "?";
}
}  // namespace

struct Node {
  Op op = Op::Custom;
  std::vector<std::shared_ptr<TensorImpl>> in;
  std::shared_ptr<TensorImpl> out;
  int axis = 0;
  int64_t i0 = 0, i1 = 0;
  double a = 0.0, b = 0.0;
  std::vector<double> saved;
  CustomBackward custom;
  const char* name = "";
};

struct Tape::Impl {
  std::vector<Node> nodes;
};

Tape::Tape() : impl_(std::make_unique<Impl>()) {}
Tape::~Tape() = default;

size_t Tape::num_nodes() const { return impl_->nodes.size(); }

std::vector<int> Tape::input_node_ids(int id) const {
  const Node& nd = impl_->nodes.at(id);
  std::vector<int> out;
  for (const auto& im : nd.in) {
    out.push_back(im->tape == impl_.get() ? im->node_id : -1);
  }
  return out;
}

const char* Tape::op_name(int id) const {
  const Node& nd = impl_->nodes.at(id);
  return nd.op == Op::Custom ? nd.name : op_label(nd.op);
}

TapeScope::TapeScope(Tape& t) : prev_(g_tape) { g_tape = &t; }
TapeScope::~TapeScope() { g_tape = prev_; }
Tape* active_tape() { return g_tape; }

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace {

// C = A(MxK) @ B(KxN), accumulate optionally
void mm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = A(MxK) @ B(NxK)^T
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      double* cp = c + i * n + j;
      *cp = acc ? *cp + s : s;
    }
  }
}

// C = A(KxM)^T @ B(KxN)
void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void check_finite(const std::vector<double>& v, const char* opname) {
  if (!g_checked) return;
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + opname + "'");
    }
  }
}

// rhs shape must equal a trailing slice of lhs shape
void check_suffix_broadcast(const Shape& a, const Shape& b, const char* opname) {
  if (b.size() > a.size()) {
    throw std::invalid_argument(std::string(opname) + ": cannot broadcast " + shape_str(b) + " with " +
                                shape_str(a));
  }
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) {
      throw std::invalid_argument(std::string(opname) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " do not broadcast over leading axes");
    }
  }
}

Tensor finish(Op op, std::vector<Tensor> inputs, Shape out_shape, std::vector<double> out_data,
              const std::function<void(Node&)>& fill = nullptr) {
  check_finite(out_data, op_label(op));
  Tensor out = Tensor::from_data(std::move(out_shape), std::move(out_data));
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  Tape* tape = g_tape;
  if (needs && tape) {
    Node nd;
    nd.op = op;
    for (auto& t : inputs) nd.in.push_back(t.impl());
    nd.out = out.impl();
    if (fill) fill(nd);
    out.impl()->requires_grad = true;
    out.impl()->tape = tape->impl();
    out.impl()->node_id = static_cast<int>(tape->impl()->nodes.size());
    tape->impl()->nodes.push_back(std::move(nd));
  }
  return out;
}

int64_t prod(const Shape& s, size_t from, size_t to) {
  int64_t p = 1;
  for (size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / broadcast
// ---------------------------------------------------------------------------

namespace {

enum class Ew { Add, Sub, Mul };

Tensor ewise(Ew kind, const Tensor& a, const Tensor& b) {
  const auto& ia = req(a, "ewise");
  const auto& ib = req(b, "ewise");
  const char* nm = kind == Ew::Add ? "add" : kind == Ew::Sub ? "sub" : "mul";
  check_suffix_broadcast(ia.shape, ib.shape, nm);
  int64_t nb = static_cast<int64_t>(ib.data.size());
  int64_t rep = static_cast<int64_t>(ia.data.size()) / nb;
  std::vector<double> out(ia.data.size());
  const double* pa = ia.data.data();
  const double* pb = ib.data.data();
  for (int64_t r = 0; r < rep; ++r) {
    double* po = out.data() + r * nb;
    const double* pr = pa + r * nb;
    switch (kind) {
      case Ew::Add: for (int64_t i = 0; i < nb; ++i) po[i] = pr[i] + pb[i]; break;
      case Ew::Sub: for (int64_t i = 0; i < nb; ++i) po[i] = pr[i] - pb[i]; break;
      case Ew::Mul: for (int64_t i = 0; i < nb; ++i) po[i] = pr[i] * pb[i]; break;
    }
  }
  Op op = kind == Ew::Add ? Op::Add : kind == Ew::Sub ? Op::Sub : Op::Mul;
  return finish(op, {a, b}, ia.shape, std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return ewise(Ew::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return ewise(Ew::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return ewise(Ew::Mul, a, b); }

Tensor affine(const Tensor& x, double a, double b) {
  const auto& ix = req(x, "affine");
  std::vector<double> out(ix.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * ix.data[i] + b;
  return finish(Op::Affine, {x}, ix.shape, std::move(out), [&](Node& nd) {
    nd.a = a;
    nd.b = b;
  });
}

// ---------------------------------------------------------------------------
// MatMul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& ia = req(a, "matmul");
  const auto& ib = req(b, "matmul");
  const Shape& sa = ia.shape;
  const Shape& sb = ib.shape;
  auto fail = [&]() {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] != sb[0]) fail();
    int64_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<double> out(m * n);
    mm(ia.data.data(), ib.data.data(), out.data(), m, k, n, false);
    return finish(Op::MatMul, {a, b}, {m, n}, std::move(out));
  }
  if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) fail();
    int64_t bt = sa[0], m = sa[1], k = sa[2], n = sb[2];
    std::vector<double> out(bt * m * n);
    for (int64_t t = 0; t < bt; ++t) {
      mm(ia.data.data() + t * m * k, ib.data.data() + t * k * n, out.data() + t * m * n, m, k, n, false);
    }
    return finish(Op::MatMul, {a, b}, {bt, m, n}, std::move(out));
  }
  if (sa.size() == 3 && sb.size() == 2) {
    if (sa[2] != sb[0]) fail();
    int64_t bt = sa[0], m = sa[1], k = sa[2], n = sb[1];
    std::vector<double> out(bt * m * n);
    // collapses to one (bt*m, k) x (k, n) product
    mm(ia.data.data(), ib.data.data(), out.data(), bt * m, k, n, false);
    return finish(Op::MatMul, {a, b}, {bt, m, n}, std::move(out));
  }
  fail();
  return {};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor transpose2(const Tensor& x) {
  const auto& ix = req(x, "transpose2");
  const Shape& s = ix.shape;
  if (s.size() < 2) throw std::invalid_argument("transpose2: needs >= 2 dims, got " + shape_str(s));
  Shape so = s;
  std::swap(so[so.size() - 1], so[so.size() - 2]);
  int64_t r = s[s.size() - 2], c = s[s.size() - 1];
  int64_t batch = prod(s, 0, s.size() - 2);
  std::vector<double> out(ix.data.size());
  for (int64_t t = 0; t < batch; ++t) {
    const double* src = ix.data.data() + t * r * c;
    double* dst = out.data() + t * r * c;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return finish(Op::Transpose2, {x}, std::move(so), std::move(out));
}

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& ix = req(x, "reshape");
  if (shape_numel(shape) != static_cast<int64_t>(ix.data.size())) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(ix.shape) + " as " + shape_str(shape));
  }
  return finish(Op::Reshape, {x}, std::move(shape), ix.data);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = req(parts[0], "concat").shape;
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw std::invalid_argument("concat: bad axis");
  Shape so = s0;
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& sp = req(p, "concat").shape;
    if (sp.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < sp.size(); ++i) {
      if (static_cast<int>(i) != axis && sp[i] != s0[i]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(sp) + " vs " + shape_str(s0));
      }
    }
    total += sp[axis];
  }
  so[axis] = total;
  int64_t outer = prod(so, 0, axis);
  int64_t inner = prod(so, axis + 1, so.size());
  std::vector<double> out(shape_numel(so));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t ext = p.shape()[axis];
    const double* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      double* dst = out.data() + (o * total + off) * inner;
      const double* sp = src + o * ext * inner;
      std::copy(sp, sp + ext * inner, dst);
    }
    off += ext;
  }
  return finish(Op::Concat, parts, std::move(so), std::move(out), [&](Node& nd) { nd.axis = axis; });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  const auto& ix = req(x, "slice");
  const Shape& s = ix.shape;
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > s[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of bounds for axis extent " + std::to_string(s[axis]));
  }
  Shape so = s;
  so[axis] = len;
  int64_t outer = prod(s, 0, axis);
  int64_t inner = prod(s, axis + 1, s.size());
  std::vector<double> out(shape_numel(so));
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = ix.data.data() + (o * s[axis] + start) * inner;
    std::copy(src, src + len * inner, out.data() + o * len * inner);
  }
  return finish(Op::Slice, {x}, std::move(so), std::move(out), [&](Node& nd) {
    nd.axis = axis;
    nd.i0 = start;
    nd.i1 = len;
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto& ix = req(x, "sum");
  double s = 0.0;
  for (double v : ix.data) s += v;
  return finish(Op::Sum, {x}, {}, {s});
}

Tensor mean(const Tensor& x) {
  const auto& ix = req(x, "mean");
  double s = 0.0;
  for (double v : ix.data) s += v;
  return finish(Op::Mean, {x}, {}, {s / static_cast<double>(ix.data.size())});
}

Tensor mean_axis(const Tensor& x, int axis) {
  const auto& ix = req(x, "mean_axis");
  const Shape& s = ix.shape;
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("mean_axis: bad axis");
  Shape so;
  for (size_t i = 0; i < s.size(); ++i)
    if (static_cast<int>(i) != axis) so.push_back(s[i]);
  int64_t outer = prod(s, 0, axis);
  int64_t ext = s[axis];
  int64_t inner = prod(s, axis + 1, s.size());
  std::vector<double> out(outer * inner, 0.0);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t e = 0; e < ext; ++e) {
      const double* src = ix.data.data() + (o * ext + e) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  double inv = 1.0 / static_cast<double>(ext);
  for (double& v : out) v *= inv;
  return finish(Op::MeanAxis, {x}, std::move(so), std::move(out), [&](Node& nd) { nd.axis = axis; });
}

// ---------------------------------------------------------------------------
// Unary math
// ---------------------------------------------------------------------------

namespace {
template <typename F>
Tensor unary(Op op, const Tensor& x, F f) {
  const auto& ix = req(x, op_label(op));
  std::vector<double> out(ix.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(ix.data[i]);
  return finish(op, {x}, ix.shape, std::move(out));
}
}  // namespace

Tensor square(const Tensor& x) { return unary(Op::Square, x, [](double v) { return v * v; }); }
Tensor sqrt(const Tensor& x) { return unary(Op::Sqrt, x, [](double v) { return std::sqrt(v); }); }
Tensor exp(const Tensor& x) { return unary(Op::Exp, x, [](double v) { return std::exp(v); }); }
Tensor recip(const Tensor& x) { return unary(Op::Recip, x, [](double v) { return 1.0 / v; }); }

Tensor gelu(const Tensor& x) {
  return unary(Op::Gelu, x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  const auto& ix = req(x, "clamp");
  std::vector<double> out(ix.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, ix.data[i]));
  return finish(Op::Clamp, {x}, ix.shape, std::move(out), [&](Node& nd) {
    nd.a = lo;
    nd.b = hi;
  });
}

Tensor round_ste(const Tensor& x) {
  return unary(Op::RoundSte, x, [](double v) { return std::round(v); });
}

Tensor softmax(const Tensor& x) {
  const auto& ix = req(x, "softmax");
  const Shape& s = ix.shape;
  if (s.empty()) throw std::invalid_argument("softmax: needs >= 1 dim");
  int64_t m = s.back();
  int64_t rows = static_cast<int64_t>(ix.data.size()) / m;
  std::vector<double> out(ix.data.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = ix.data.data() + r * m;
    double* dst = out.data() + r * m;
    double mx = src[0];
    for (int64_t i = 1; i < m; ++i) mx = std::max(mx, src[i]);
    double z = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      dst[i] = std::exp(src[i] - mx);
      z += dst[i];
    }
    double inv = 1.0 / z;
    for (int64_t i = 0; i < m; ++i) dst[i] *= inv;
  }
  return finish(Op::Softmax, {x}, s, std::move(out));
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto& ix = req(x, "layernorm");
  const auto& ig = req(gamma, "layernorm");
  const auto& ib = req(beta, "layernorm");
  const Shape& s = ix.shape;
  if (s.empty()) throw std::invalid_argument("layernorm: needs >= 1 dim");
  int64_t m = s.back();
  if (ig.shape != Shape{m} || ib.shape != Shape{m}) {
    throw std::invalid_argument("layernorm: gamma/beta must have shape (" + std::to_string(m) + ")");
  }
  int64_t rows = static_cast<int64_t>(ix.data.size()) / m;
  std::vector<double> out(ix.data.size());
  std::vector<double> saved(2 * rows);  // mean, 1/sigma per row
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = ix.data.data() + r * m;
    double* dst = out.data() + r * m;
    double mu = 0.0;
    for (int64_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      double d = src[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps);
    saved[2 * r] = mu;
    saved[2 * r + 1] = inv;
    for (int64_t i = 0; i < m; ++i) dst[i] = ig.data[i] * ((src[i] - mu) * inv) + ib.data[i];
  }
  return finish(Op::LayerNorm, {x, gamma, beta}, s, std::move(out), [&](Node& nd) {
    nd.a = eps;
    nd.saved = std::move(saved);
  });
}

Tensor mat_solve(const Tensor& a, const Tensor& b) {
  const auto& ia = req(a, "mat_solve");
  const auto& ib = req(b, "mat_solve");
  if (ia.shape.size() != 2 || ia.shape[0] != ia.shape[1]) {
    throw std::invalid_argument("mat_solve: A must be square 2D, got " + shape_str(ia.shape));
  }
  if (ib.shape.size() != 2 || ib.shape[0] != ia.shape[0]) {
    throw std::invalid_argument("mat_solve: B shape " + shape_str(ib.shape) + " incompatible with A " +
                                shape_str(ia.shape));
  }
  int n = static_cast<int>(ia.shape[0]);
  int m = static_cast<int>(ib.shape[1]);
  std::vector<double> x = linalg::lu_solve(ia.data.data(), n, ib.data.data(), m);
  return finish(Op::MatSolve, {a, b}, ib.shape, std::move(x));
}

Tensor custom_op(const char* name, std::vector<Tensor> inputs, Tensor value, CustomBackward bw) {
  const auto& iv = req(value, name);
  if (iv.node_id >= 0) throw std::invalid_argument("custom_op: value must not already be on a tape");
  check_finite(iv.data, name);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  Tape* tape = g_tape;
  if (needs && tape) {
    Node nd;
    nd.op = Op::Custom;
    nd.name = name;
    for (auto& t : inputs) nd.in.push_back(t.impl());
    nd.out = value.impl();
    nd.custom = std::move(bw);
    value.impl()->requires_grad = true;
    value.impl()->tape = tape->impl();
    value.impl()->node_id = static_cast<int>(tape->impl()->nodes.size());
    tape->impl()->nodes.push_back(std::move(nd));
  }
  return value;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

struct BackCtx {
  std::unordered_map<TensorImpl*, std::vector<double>> scratch;

  std::vector<double>* buf_for(const std::shared_ptr<TensorImpl>& im) {
    if (!im->requires_grad) return nullptr;
    auto& b = scratch[im.get()];
    if (b.empty()) b.assign(im->data.size(), 0.0);
    return &b;
  }
};

void reduce_to_suffix(const std::vector<double>& g, std::vector<double>* gb, double sign) {
  if (!gb) return;
  size_t nb = gb->size();
  size_t rep = g.size() / nb;
  for (size_t r = 0; r < rep; ++r) {
    const double* src = g.data() + r * nb;
    for (size_t i = 0; i < nb; ++i) (*gb)[i] += sign * src[i];
  }
}

void backward_node(const Node& nd, const std::vector<double>& g, BackCtx& ctx) {
  switch (nd.op) {
    case Op::Add: {
      if (auto* ga = ctx.buf_for(nd.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      reduce_to_suffix(g, ctx.buf_for(nd.in[1]), 1.0);
      break;
    }
    case Op::Sub: {
      if (auto* ga = ctx.buf_for(nd.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      reduce_to_suffix(g, ctx.buf_for(nd.in[1]), -1.0);
      break;
    }
    case Op::Mul: {
      const auto& a = nd.in[0]->data;
      const auto& b = nd.in[1]->data;
      size_t nb = b.size();
      size_t rep = a.size() / nb;
      if (auto* ga = ctx.buf_for(nd.in[0])) {
        for (size_t r = 0; r < rep; ++r)
          for (size_t i = 0; i < nb; ++i) (*ga)[r * nb + i] += g[r * nb + i] * b[i];
      }
      if (auto* gb = ctx.buf_for(nd.in[1])) {
        for (size_t r = 0; r < rep; ++r)
          for (size_t i = 0; i < nb; ++i) (*gb)[i] += g[r * nb + i] * a[r * nb + i];
      }
      break;
    }
    case Op::Affine: {
      if (auto* gx = ctx.buf_for(nd.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += nd.a * g[i];
      break;
    }
    case Op::MatMul: {
      const auto& sa = nd.in[0]->shape;
      const auto& sb = nd.in[1]->shape;
      const double* pa = nd.in[0]->data.data();
      const double* pb = nd.in[1]->data.data();
      auto* ga = ctx.buf_for(nd.in[0]);
      auto* gb = ctx.buf_for(nd.in[1]);
      if (sa.size() == 2 && sb.size() == 2) {
        int64_t m = sa[0], k = sa[1], n = sb[1];
        if (ga) mm_nt(g.data(), pb, ga->data(), m, n, k, true);
        if (gb) mm_tn(pa, g.data(), gb->data(), k, m, n, true);
      } else if (sa.size() == 3 && sb.size() == 3) {
        int64_t bt = sa[0], m = sa[1], k = sa[2], n = sb[2];
        for (int64_t t = 0; t < bt; ++t) {
          if (ga) mm_nt(g.data() + t * m * n, pb + t * k * n, ga->data() + t * m * k, m, n, k, true);
          if (gb) mm_tn(pa + t * m * k, g.data() + t * m * n, gb->data() + t * k * n, k, m, n, true);
        }
      } else {  // 3D x 2D
        int64_t bt = sa[0], m = sa[1], k = sa[2], n = sb[1];
        if (ga) mm_nt(g.data(), pb, ga->data(), bt * m, n, k, true);
        if (gb) mm_tn(pa, g.data(), gb->data(), k, bt * m, n, true);
      }
      break;
    }
    case Op::Transpose2: {
      auto* gx = ctx.buf_for(nd.in[0]);
      if (!gx) break;
      const Shape& so = nd.out->shape;  // transposed shape
      int64_t r = so[so.size() - 2], c = so[so.size() - 1];
      int64_t batch = static_cast<int64_t>(g.size()) / (r * c);
      for (int64_t t = 0; t < batch; ++t) {
        const double* src = g.data() + t * r * c;
        double* dst = gx->data() + t * r * c;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) dst[j * r + i] += src[i * c + j];
      }
      break;
    }
    case Op::Reshape: {
      if (auto* gx = ctx.buf_for(nd.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      break;
    }
    case Op::Concat: {
      const Shape& so = nd.out->shape;
      int axis = nd.axis;
      int64_t total = so[axis];
      int64_t outer = prod(so, 0, axis);
      int64_t inner = prod(so, axis + 1, so.size());
      int64_t off = 0;
      for (const auto& inp : nd.in) {
        int64_t ext = inp->shape[axis];
        if (auto it = ctx.buf_for(inp)) {
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * total + off) * inner;
            double* dst = it->data() + o * ext * inner;
            for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        off += ext;
      }
      break;
    }
    case Op::Slice: {
      auto* gx = ctx.buf_for(nd.in[0]);
      if (!gx) break;
      const Shape& s = nd.in[0]->shape;
      int axis = nd.axis;
      int64_t start = nd.i0, len = nd.i1;
      int64_t outer = prod(s, 0, axis);
      int64_t inner = prod(s, axis + 1, s.size());
      for (int64_t o = 0; o < outer; ++o) {
        double* dst = gx->data() + (o * s[axis] + start) * inner;
        const double* src = g.data() + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
      break;
    }
    case Op::Sum: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        double gv = g[0];
        for (double& v : *gx) v += gv;
      }
      break;
    }
    case Op::Mean: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        double gv = g[0] / static_cast<double>(gx->size());
        for (double& v : *gx) v += gv;
      }
      break;
    }
    case Op::MeanAxis: {
      auto* gx = ctx.buf_for(nd.in[0]);
      if (!gx) break;
      const Shape& s = nd.in[0]->shape;
      int axis = nd.axis;
      int64_t outer = prod(s, 0, axis);
      int64_t ext = s[axis];
      int64_t inner = prod(s, axis + 1, s.size());
      double inv = 1.0 / static_cast<double>(ext);
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * inner;
        for (int64_t e = 0; e < ext; ++e) {
          double* dst = gx->data() + (o * ext + e) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
        }
      }
      break;
    }
    case Op::Square: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& x = nd.in[0]->data;
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0 * x[i] * g[i];
      }
      break;
    }
    case Op::Sqrt: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& y = nd.out->data;
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / (2.0 * y[i]);
      }
      break;
    }
    case Op::Exp: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& y = nd.out->data;
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
      }
      break;
    }
    case Op::Recip: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& y = nd.out->data;
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] -= g[i] * y[i] * y[i];
      }
      break;
    }
    case Op::Gelu: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& x = nd.in[0]->data;
        for (size_t i = 0; i < g.size(); ++i) {
          double v = x[i];
          double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
          (*gx)[i] += g[i] * d;
        }
      }
      break;
    }
    case Op::Softmax: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& y = nd.out->data;
        int64_t m = nd.out->shape.back();
        int64_t rows = static_cast<int64_t>(y.size()) / m;
        for (int64_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * m;
          const double* gr = g.data() + r * m;
          double dot = 0.0;
          for (int64_t i = 0; i < m; ++i) dot += gr[i] * yr[i];
          double* dst = gx->data() + r * m;
          for (int64_t i = 0; i < m; ++i) dst[i] += yr[i] * (gr[i] - dot);
        }
      }
      break;
    }
    case Op::LayerNorm: {
      const auto& x = nd.in[0]->data;
      const auto& gamma = nd.in[1]->data;
      int64_t m = nd.in[0]->shape.back();
      int64_t rows = static_cast<int64_t>(x.size()) / m;
      auto* gx = ctx.buf_for(nd.in[0]);
      auto* gg = ctx.buf_for(nd.in[1]);
      auto* gb = ctx.buf_for(nd.in[2]);
      for (int64_t r = 0; r < rows; ++r) {
        double mu = nd.saved[2 * r];
        double inv = nd.saved[2 * r + 1];
        const double* xr = x.data() + r * m;
        const double* gr = g.data() + r * m;
        double s1 = 0.0, s2 = 0.0;  // mean(gy), mean(gy*xhat)
        for (int64_t i = 0; i < m; ++i) {
          double xhat = (xr[i] - mu) * inv;
          double gy = gr[i] * gamma[i];
          s1 += gy;
          s2 += gy * xhat;
        }
        s1 /= static_cast<double>(m);
        s2 /= static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) {
          double xhat = (xr[i] - mu) * inv;
          if (gx) (*gx)[r * m + i] += inv * (gr[i] * gamma[i] - s1 - xhat * s2);
          if (gg) (*gg)[i] += gr[i] * xhat;
          if (gb) (*gb)[i] += gr[i];
        }
      }
      break;
    }
    case Op::Clamp: {
      if (auto* gx = ctx.buf_for(nd.in[0])) {
        const auto& x = nd.in[0]->data;
        for (size_t i = 0; i < g.size(); ++i) {
          if (x[i] >= nd.a && x[i] <= nd.b) (*gx)[i] += g[i];
        }
      }
      break;
    }
    case Op::RoundSte: {
      if (auto* gx = ctx.buf_for(nd.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      break;
    }
    case Op::MatSolve: {
      // Y = A^-1 B;  gB = A^-T g;  gA = -gB Y^T
      const auto& sa = nd.in[0]->shape;
      int n = static_cast<int>(sa[0]);
      int m = static_cast<int>(nd.out->shape[1]);
      const auto& adata = nd.in[0]->data;
      std::vector<double> at(static_cast<size_t>(n) * n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) at[j * n + i] = adata[i * n + j];
      std::vector<double> z = linalg::lu_solve(at.data(), n, g.data(), m);
      if (auto* gb = ctx.buf_for(nd.in[1])) {
        for (size_t i = 0; i < z.size(); ++i) (*gb)[i] += z[i];
      }
      if (auto* ga = ctx.buf_for(nd.in[0])) {
        // -z (n x m) @ Y^T (m x n)
        const auto& y = nd.out->data;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < m; ++p) s += z[i * m + p] * y[j * m + p];
            (*ga)[i * n + j] -= s;
          }
      }
      break;
    }
    case Op::Custom: {
      std::vector<Tensor> ins;
      ins.reserve(nd.in.size());
      for (const auto& im : nd.in) ins.emplace_back(im);
      std::vector<std::vector<double>*> gins;
      gins.reserve(nd.in.size());
      for (const auto& im : nd.in) gins.push_back(ctx.buf_for(im));
      nd.custom(ins, Tensor(nd.out), g, gins);
      break;
    }
  }
}

}  // namespace

void Tape::backward(const Tensor& root) {
  const auto rim = root.impl();
  if (!rim) throw std::invalid_argument("backward: undefined root");
  if (!rim->shape.empty()) {
    throw std::invalid_argument("backward: root must be a scalar (shape []), got " + shape_str(rim->shape));
  }
  if (rim->tape != impl_.get() || rim->node_id < 0) {
    throw std::invalid_argument("backward: root was not produced by this tape");
  }
  BackCtx ctx;
  ctx.scratch[rim.get()] = {1.0};
  for (int nid = rim->node_id; nid >= 0; --nid) {
    const Node& nd = impl_->nodes[nid];
    auto it = ctx.scratch.find(nd.out.get());
    if (it == ctx.scratch.end()) continue;
    backward_node(nd, it->second, ctx);
  }
  // flush scratch into persistent grads (additive across backward calls);
  // leaves always, intermediates only when marked retain_grad
  auto flush = [&ctx](TensorImpl* im) {
    bool leaf = im->node_id < 0;
    if (!leaf && !im->retain_grad) return;
    auto it = ctx.scratch.find(im);
    if (it == ctx.scratch.end() || it->second.empty()) return;
    if (im->grad.empty()) im->grad.assign(im->data.size(), 0.0);
    for (size_t i = 0; i < it->second.size(); ++i) im->grad[i] += it->second[i];
    it->second.clear();  // each tensor flushed once
  };
  for (int nid = rim->node_id; nid >= 0; --nid) {
    const Node& nd = impl_->nodes[nid];
    for (const auto& im : nd.in) flush(im.get());
    flush(nd.out.get());
  }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& point,
                              double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_difference_grad: eps must be positive");
  Tensor x = point.detach();
  Tensor g = Tensor::zeros(point.shape());
  for (size_t i = 0; i < x.data().size(); ++i) {
    double orig = x.data()[i];
    double xp = orig + eps;
    double xm = orig - eps;
    if (xp == orig && xm == orig) {
      // The step vanished in rounding; decide whether f actually varies here.
      double big = std::max(1.0, std::fabs(orig)) * eps * 4096.0;
      x.data()[i] = orig + big;
      double fpb = f(x);
      x.data()[i] = orig - big;
      double fmb = f(x);
      x.data()[i] = orig;
      if (fpb != fmb) {
        throw std::runtime_error("finite_difference_grad: eps too small for the floating format");
      }
      continue;
    }
    x.data()[i] = xp;
    double fp = f(x);
    x.data()[i] = xm;
    double fm = f(x);
    x.data()[i] = orig;
    g.data()[i] = (fp - fm) / (xp - xm);
  }
  return g;
}

}  // namespace fgq
