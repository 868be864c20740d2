#include "gfad/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <utility>

namespace gfad {

namespace {

std::atomic<uint64_t> g_node_counter{1};

void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

std::string op_shapes(Op op, std::initializer_list<const Tensor*> ts) {
  std::string s = std::string(op_name(op)) + ":";
  for (const Tensor* t : ts) s += " " + shape_str(t->shape());
  return s;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Affine: return "affine";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Sqrt: return "sqrt";
    case Op::Sign: return "sign";
    case Op::Clamp: return "clamp";
    case Op::MaxConst: return "max_const";
    case Op::Sum: return "sum";
    case Op::SFill: return "sfill";
    case Op::SMul: return "smul";
    case Op::Dot: return "dot";
    case Op::RowDot: return "row_dot";
    case Op::RowScale: return "row_scale";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Slice: return "slice";
    case Op::Embed: return "embed";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dInputGrad: return "conv2d_input_grad";
    case Op::Conv2dWeightGrad: return "conv2d_weight_grad";
    case Op::BiasAdd: return "bias_add";
    case Op::ChannelSum: return "channel_sum";
    case Op::ChannelBroadcast: return "channel_broadcast";
    case Op::MaxPool2d: return "maxpool2d";
    case Op::PoolScatter: return "pool_scatter";
    case Op::PoolGather: return "pool_gather";
  }
  return "?";
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double x) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), x);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int64_t Tensor::numel() const { return shape_numel(shape_); }

const std::vector<double>& Tensor::values() const {
  if (!data_) throw std::runtime_error("tensor: undefined");
  return *data_;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ShapeError("tensor: value() on non-scalar " + shape_str(shape_));
  }
  return values()[0];
}

Tensor Tensor::detached() const {
  Tensor t(*this);
  t.node_.reset();
  return t;
}

Tensor Tensor::with_grad() const {
  Tensor t(*this);
  auto n = std::make_shared<Node>();
  n->op = Op::Leaf;
  n->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
  n->out_shape = shape_;
  t.node_ = std::move(n);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Single construction point for op results: attaches a graph node when any
// input is tracked.
Tensor make_result(Op op, Shape shape, std::vector<double>&& values,
                   std::vector<Tensor> inputs, std::vector<double> fattrs,
                   std::vector<int64_t> iattrs,
                   std::shared_ptr<const std::vector<int64_t>> indices) {
  Tensor out(std::move(shape), std::move(values));
  bool tracked = false;
  for (const Tensor& t : inputs) {
    if (t.tracked()) {
      tracked = true;
      break;
    }
  }
  if (tracked) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
    n->out_shape = out.shape();
    n->inputs = std::move(inputs);
    n->fattrs = std::move(fattrs);
    n->iattrs = std::move(iattrs);
    n->indices = std::move(indices);
    out.node_ = std::move(n);
  }
  return out;
}

namespace {

Tensor elementwise2(Op op, const Tensor& a, const Tensor& b,
                    double (*f)(double, double)) {
  check(a.shape() == b.shape(), op_shapes(op, {&a, &b}));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  return make_result(op, a.shape(), std::move(out), {a, b}, {}, {}, nullptr);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::Add, a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::Sub, a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::Mul, a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise2(Op::Div, a, b, [](double x, double y) { return x / y; });
}

Tensor affine(const Tensor& x, double a, double b) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = a * xv[i] + b;
  return make_result(Op::Affine, x.shape(), std::move(out), {x}, {a, b}, {},
                     nullptr);
}

Tensor tanh(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return make_result(Op::Tanh, x.shape(), std::move(out), {x}, {}, {}, nullptr);
}

Tensor relu(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_result(Op::Relu, x.shape(), std::move(out), {x}, {}, {}, nullptr);
}

Tensor sqrt(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = std::sqrt(xv[i]);
  return make_result(Op::Sqrt, x.shape(), std::move(out), {x}, {}, {}, nullptr);
}

Tensor sign(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
  }
  return make_result(Op::Sign, x.shape(), std::move(out), {x}, {}, {}, nullptr);
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  check(lo <= hi, "clamp: lo > hi");
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] < lo ? lo : (xv[i] > hi ? hi : xv[i]);
  }
  return make_result(Op::Clamp, x.shape(), std::move(out), {x}, {lo, hi}, {},
                     nullptr);
}

Tensor max_const(const Tensor& x, double c) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > c ? xv[i] : c;
  return make_result(Op::MaxConst, x.shape(), std::move(out), {x}, {c}, {},
                     nullptr);
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result(Op::Sum, {1}, {acc}, {x}, {}, {}, nullptr);
}

Tensor sfill(const Tensor& s, Shape shape) {
  check(s.numel() == 1, op_shapes(Op::SFill, {&s}));
  std::vector<double> out(static_cast<size_t>(shape_numel(shape)),
                          s.values()[0]);
  return make_result(Op::SFill, std::move(shape), std::move(out), {s}, {}, {},
                     nullptr);
}

Tensor smul(const Tensor& x, const Tensor& s) {
  check(s.numel() == 1, op_shapes(Op::SMul, {&x, &s}));
  double c = s.values()[0];
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  return make_result(Op::SMul, x.shape(), std::move(out), {x, s}, {}, {},
                     nullptr);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), op_shapes(Op::Dot, {&a, &b}));
  const auto& av = a.values();
  const auto& bv = b.values();
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  return make_result(Op::Dot, {1}, {acc}, {a, b}, {}, {}, nullptr);
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape() && a.shape().size() == 2,
        op_shapes(Op::RowDot, {&a, &b}));
  int64_t rows = a.shape()[0], cols = a.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(rows), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* ap = av.data() + r * cols;
    const double* bp = bv.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) acc += ap[c] * bp[c];
    out[static_cast<size_t>(r)] = acc;
  }
  return make_result(Op::RowDot, {rows}, std::move(out), {a, b}, {}, {},
                     nullptr);
}

Tensor row_scale(const Tensor& a, const Tensor& s) {
  check(a.shape().size() == 2 && s.shape().size() == 1 &&
            s.shape()[0] == a.shape()[0],
        op_shapes(Op::RowScale, {&a, &s}));
  int64_t rows = a.shape()[0], cols = a.shape()[1];
  const auto& av = a.values();
  const auto& sv = s.values();
  std::vector<double> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    double c = sv[static_cast<size_t>(r)];
    for (int64_t j = 0; j < cols; ++j) {
      out[static_cast<size_t>(r * cols + j)] =
          av[static_cast<size_t>(r * cols + j)] * c;
    }
  }
  return make_result(Op::RowScale, a.shape(), std::move(out), {a, s}, {}, {},
                     nullptr);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2 &&
            a.shape()[1] == b.shape()[0],
        op_shapes(Op::MatMul, {&a, &b}));
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  // i-k-j order: streams rows of b, vectorizes the inner loop.
  for (int64_t i = 0; i < m; ++i) {
    double* op = out.data() + i * n;
    const double* ap = av.data() + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      double aik = ap[kk];
      if (aik == 0.0) continue;
      const double* bp = bv.data() + kk * n;
      for (int64_t j = 0; j < n; ++j) op[j] += aik * bp[j];
    }
  }
  return make_result(Op::MatMul, {m, n}, std::move(out), {a, b}, {}, {},
                     nullptr);
}

Tensor transpose(const Tensor& a) {
  check(a.shape().size() == 2, op_shapes(Op::Transpose, {&a}));
  int64_t m = a.shape()[0], n = a.shape()[1];
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      out[static_cast<size_t>(j * m + i)] = av[static_cast<size_t>(i * n + j)];
    }
  }
  return make_result(Op::Transpose, {n, m}, std::move(out), {a}, {}, {},
                     nullptr);
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(shape_numel(shape) == x.numel(),
        "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out = x.values();
  return make_result(Op::Reshape, std::move(shape), std::move(out), {x}, {},
                     {}, nullptr);
}

namespace {

// Row-major strides.
std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] =
        st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  }
  return st;
}

// Copies a rectangular block between a tensor and a buffer of block shape.
// `to_block`: big -> block (slice); else block -> big (embed).
void block_copy(const Shape& big, const std::vector<int64_t>& offsets,
                const Shape& block, const std::vector<double>& src,
                std::vector<double>& dst, bool to_block) {
  auto big_strides = strides_of(big);
  int64_t n = shape_numel(block);
  size_t rank = block.size();
  std::vector<int64_t> idx(rank, 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t big_off = 0;
    for (size_t d = 0; d < rank; ++d) {
      big_off += (idx[d] + offsets[d]) * big_strides[d];
    }
    if (to_block) {
      dst[static_cast<size_t>(flat)] = src[static_cast<size_t>(big_off)];
    } else {
      dst[static_cast<size_t>(big_off)] = src[static_cast<size_t>(flat)];
    }
    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < block[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace

Tensor slice(const Tensor& x, const std::vector<int64_t>& offsets,
             const Shape& sizes) {
  const Shape& s = x.shape();
  check(offsets.size() == s.size() && sizes.size() == s.size(),
        "slice: rank mismatch on " + shape_str(s));
  for (size_t d = 0; d < s.size(); ++d) {
    check(offsets[d] >= 0 && sizes[d] >= 1 && offsets[d] + sizes[d] <= s[d],
          "slice: out of range on " + shape_str(s));
  }
  std::vector<double> out(static_cast<size_t>(shape_numel(sizes)));
  block_copy(s, offsets, sizes, x.values(), out, true);
  std::vector<int64_t> iattrs(offsets);
  return make_result(Op::Slice, sizes, std::move(out), {x}, {},
                     std::move(iattrs), nullptr);
}

Tensor embed(const Tensor& x, const Shape& big_shape,
             const std::vector<int64_t>& offsets) {
  const Shape& s = x.shape();
  check(offsets.size() == s.size() && big_shape.size() == s.size(),
        "embed: rank mismatch on " + shape_str(s));
  for (size_t d = 0; d < s.size(); ++d) {
    check(offsets[d] >= 0 && offsets[d] + s[d] <= big_shape[d],
          "embed: out of range on " + shape_str(s));
  }
  std::vector<double> out(static_cast<size_t>(shape_numel(big_shape)), 0.0);
  block_copy(big_shape, offsets, s, x.values(), out, false);
  std::vector<int64_t> iattrs(offsets);
  return make_result(Op::Embed, big_shape, std::move(out), {x}, {},
                     std::move(iattrs), nullptr);
}

namespace {

struct ConvDims {
  int64_t B, IC, H, W, OC, KH, KW, OH, OW;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, int64_t pad) {
  ConvDims d;
  d.B = xs[0];
  d.IC = xs[1];
  d.H = xs[2];
  d.W = xs[3];
  d.OC = ws[0];
  d.KH = ws[2];
  d.KW = ws[3];
  d.OH = d.H + 2 * pad - d.KH + 1;
  d.OW = d.W + 2 * pad - d.KW + 1;
  return d;
}

void check_conv(const Tensor& x, const Tensor& w, int64_t pad, Op op) {
  check(x.shape().size() == 4 && w.shape().size() == 4 &&
            x.shape()[1] == w.shape()[1] && pad >= 0,
        op_shapes(op, {&x, &w}));
  ConvDims d = conv_dims(x.shape(), w.shape(), pad);
  check(d.OH >= 1 && d.OW >= 1, op_shapes(op, {&x, &w}));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int64_t pad) {
  check_conv(x, w, pad, Op::Conv2d);
  ConvDims d = conv_dims(x.shape(), w.shape(), pad);
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> out(static_cast<size_t>(d.B * d.OC * d.OH * d.OW), 0.0);
  for (int64_t b = 0; b < d.B; ++b) {
    for (int64_t oc = 0; oc < d.OC; ++oc) {
      for (int64_t ic = 0; ic < d.IC; ++ic) {
        const double* xp = xv.data() + ((b * d.IC + ic) * d.H) * d.W;
        const double* wp = wv.data() + ((oc * d.IC + ic) * d.KH) * d.KW;
        double* op = out.data() + ((b * d.OC + oc) * d.OH) * d.OW;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          for (int64_t kw = 0; kw < d.KW; ++kw) {
            double wvv = wp[kh * d.KW + kw];
            if (wvv == 0.0) continue;
            int64_t ih0 = -pad + kh, iw0 = -pad + kw;
            int64_t oh_lo = std::max<int64_t>(0, -ih0);
            int64_t oh_hi = std::min(d.OH, d.H - ih0);
            int64_t ow_lo = std::max<int64_t>(0, -iw0);
            int64_t ow_hi = std::min(d.OW, d.W - iw0);
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* xr = xp + (oh + ih0) * d.W + iw0;
              double* orow = op + oh * d.OW;
              for (int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                orow[ow] += wvv * xr[ow];
              }
            }
          }
        }
      }
    }
  }
  return make_result(Op::Conv2d, {d.B, d.OC, d.OH, d.OW}, std::move(out),
                     {x, w}, {}, {pad}, nullptr);
}

Tensor conv2d_input_grad(const Tensor& gout, const Tensor& w,
                         const Shape& x_shape, int64_t pad) {
  check(gout.shape().size() == 4 && w.shape().size() == 4 &&
            x_shape.size() == 4 && gout.shape()[1] == w.shape()[0],
        op_shapes(Op::Conv2dInputGrad, {&gout, &w}));
  ConvDims d = conv_dims(x_shape, w.shape(), pad);
  check(gout.shape()[2] == d.OH && gout.shape()[3] == d.OW &&
            gout.shape()[0] == d.B,
        op_shapes(Op::Conv2dInputGrad, {&gout, &w}));
  const auto& gv = gout.values();
  const auto& wv = w.values();
  std::vector<double> out(static_cast<size_t>(shape_numel(x_shape)), 0.0);
  for (int64_t b = 0; b < d.B; ++b) {
    for (int64_t oc = 0; oc < d.OC; ++oc) {
      const double* gp = gv.data() + ((b * d.OC + oc) * d.OH) * d.OW;
      for (int64_t ic = 0; ic < d.IC; ++ic) {
        const double* wp = wv.data() + ((oc * d.IC + ic) * d.KH) * d.KW;
        double* op = out.data() + ((b * d.IC + ic) * d.H) * d.W;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          for (int64_t kw = 0; kw < d.KW; ++kw) {
            double wvv = wp[kh * d.KW + kw];
            if (wvv == 0.0) continue;
            int64_t ih0 = -pad + kh, iw0 = -pad + kw;
            int64_t oh_lo = std::max<int64_t>(0, -ih0);
            int64_t oh_hi = std::min(d.OH, d.H - ih0);
            int64_t ow_lo = std::max<int64_t>(0, -iw0);
            int64_t ow_hi = std::min(d.OW, d.W - iw0);
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* grow = gp + oh * d.OW;
              double* xr = op + (oh + ih0) * d.W + iw0;
              for (int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                xr[ow] += wvv * grow[ow];
              }
            }
          }
        }
      }
    }
  }
  return make_result(Op::Conv2dInputGrad, x_shape, std::move(out), {gout, w},
                     {}, {pad, d.H, d.W}, nullptr);
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gout,
                          const Shape& w_shape, int64_t pad) {
  check(x.shape().size() == 4 && gout.shape().size() == 4 &&
            w_shape.size() == 4 && x.shape()[1] == w_shape[1] &&
            gout.shape()[1] == w_shape[0] && x.shape()[0] == gout.shape()[0],
        op_shapes(Op::Conv2dWeightGrad, {&x, &gout}));
  ConvDims d = conv_dims(x.shape(), w_shape, pad);
  check(gout.shape()[2] == d.OH && gout.shape()[3] == d.OW,
        op_shapes(Op::Conv2dWeightGrad, {&x, &gout}));
  const auto& xv = x.values();
  const auto& gv = gout.values();
  std::vector<double> out(static_cast<size_t>(shape_numel(w_shape)), 0.0);
  for (int64_t b = 0; b < d.B; ++b) {
    for (int64_t oc = 0; oc < d.OC; ++oc) {
      const double* gp = gv.data() + ((b * d.OC + oc) * d.OH) * d.OW;
      for (int64_t ic = 0; ic < d.IC; ++ic) {
        const double* xp = xv.data() + ((b * d.IC + ic) * d.H) * d.W;
        double* wp = out.data() + ((oc * d.IC + ic) * d.KH) * d.KW;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          for (int64_t kw = 0; kw < d.KW; ++kw) {
            int64_t ih0 = -pad + kh, iw0 = -pad + kw;
            int64_t oh_lo = std::max<int64_t>(0, -ih0);
            int64_t oh_hi = std::min(d.OH, d.H - ih0);
            int64_t ow_lo = std::max<int64_t>(0, -iw0);
            int64_t ow_hi = std::min(d.OW, d.W - iw0);
            double acc = 0.0;
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* grow = gp + oh * d.OW;
              const double* xr = xp + (oh + ih0) * d.W + iw0;
              for (int64_t ow = ow_lo; ow < ow_hi; ++ow) {
                acc += grow[ow] * xr[ow];
              }
            }
            wp[kh * d.KW + kw] += acc;
          }
        }
      }
    }
  }
  return make_result(Op::Conv2dWeightGrad, w_shape, std::move(out), {x, gout},
                     {}, {pad}, nullptr);
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  check(x.shape().size() == 4 && b.shape().size() == 1 &&
            b.shape()[0] == x.shape()[1],
        op_shapes(Op::BiasAdd, {&x, &b}));
  const auto& xv = x.values();
  const auto& bv = b.values();
  int64_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  std::vector<double> out(xv.size());
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      double bc = bv[static_cast<size_t>(c)];
      const double* xp = xv.data() + (n * C + c) * HW;
      double* op = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] = xp[i] + bc;
    }
  }
  return make_result(Op::BiasAdd, x.shape(), std::move(out), {x, b}, {}, {},
                     nullptr);
}

Tensor channel_sum(const Tensor& x) {
  check(x.shape().size() == 4, op_shapes(Op::ChannelSum, {&x}));
  int64_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(C), 0.0);
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* xp = xv.data() + (n * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += xp[i];
      out[static_cast<size_t>(c)] += acc;
    }
  }
  return make_result(Op::ChannelSum, {C}, std::move(out), {x}, {},
                     {B, x.shape()[2], x.shape()[3]}, nullptr);
}

Tensor channel_broadcast(const Tensor& b, int64_t batch, int64_t h, int64_t w) {
  check(b.shape().size() == 1, op_shapes(Op::ChannelBroadcast, {&b}));
  int64_t C = b.shape()[0], HW = h * w;
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(batch * C * HW));
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      double v = bv[static_cast<size_t>(c)];
      double* op = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] = v;
    }
  }
  return make_result(Op::ChannelBroadcast, {batch, C, h, w}, std::move(out),
                     {b}, {}, {batch, h, w}, nullptr);
}

Tensor maxpool2d(const Tensor& x, int64_t k) {
  check(x.shape().size() == 4 && k >= 1 && x.shape()[2] % k == 0 &&
            x.shape()[3] % k == 0,
        op_shapes(Op::MaxPool2d, {&x}));
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
          W = x.shape()[3];
  int64_t OH = H / k, OW = W / k;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(B * C * OH * OW));
  auto idx = std::make_shared<std::vector<int64_t>>(out.size());
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* xp = xv.data() + (n * C + c) * H * W;
      int64_t base = (n * C + c) * H * W;
      for (int64_t oh = 0; oh < OH; ++oh) {
        for (int64_t ow = 0; ow < OW; ++ow) {
          int64_t best = -1;
          double bv = 0.0;
          for (int64_t dh = 0; dh < k; ++dh) {
            for (int64_t dw = 0; dw < k; ++dw) {
              int64_t off = (oh * k + dh) * W + (ow * k + dw);
              if (best < 0 || xp[off] > bv) {
                best = off;
                bv = xp[off];
              }
            }
          }
          int64_t o = ((n * C + c) * OH + oh) * OW + ow;
          out[static_cast<size_t>(o)] = bv;
          (*idx)[static_cast<size_t>(o)] = base + best;
        }
      }
    }
  }
  return make_result(Op::MaxPool2d, {B, C, OH, OW}, std::move(out), {x}, {},
                     {k}, std::shared_ptr<const std::vector<int64_t>>(idx));
}

Tensor pool_scatter(const Tensor& g,
                    std::shared_ptr<const std::vector<int64_t>> idx,
                    const Shape& in_shape) {
  check(idx && g.numel() == static_cast<int64_t>(idx->size()),
        op_shapes(Op::PoolScatter, {&g}));
  const auto& gv = g.values();
  std::vector<double> out(static_cast<size_t>(shape_numel(in_shape)), 0.0);
  for (size_t i = 0; i < gv.size(); ++i) {
    out[static_cast<size_t>((*idx)[i])] += gv[i];
  }
  return make_result(Op::PoolScatter, in_shape, std::move(out), {g}, {}, {},
                     std::move(idx));
}

Tensor pool_gather(const Tensor& v,
                   std::shared_ptr<const std::vector<int64_t>> idx,
                   const Shape& out_shape) {
  check(idx && shape_numel(out_shape) == static_cast<int64_t>(idx->size()),
        op_shapes(Op::PoolGather, {&v}));
  const auto& vv = v.values();
  std::vector<double> out(idx->size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = vv[static_cast<size_t>((*idx)[i])];
  }
  return make_result(Op::PoolGather, out_shape, std::move(out), {v}, {}, {},
                     std::move(idx));
}

Tensor norm(const Tensor& x) { return sqrt(dot(x, x)); }

double Rng::uniform() {
  // 53-bit mantissa draw in [0, 1).
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double th = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

int64_t Rng::below(int64_t n) {
  if (n <= 0) throw std::runtime_error("rng: below(n) needs n > 0");
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t v;
  do {
    v = eng_();
  } while (v >= limit);
  return static_cast<int64_t>(v % un);
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace gfad
