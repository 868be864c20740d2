#ifndef GFAD_TENSOR_HPP
#define GFAD_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfad {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Thrown on incompatible operand shapes; message names the op and shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Affine,       // a*x + b with constant a, b
  Tanh,
  Relu,
  Sqrt,
  Sign,
  Clamp,        // clamp(x, lo, hi)
  MaxConst,     // max(x, c) elementwise
  Sum,          // full reduction to a scalar
  SFill,        // scalar broadcast to a shape
  SMul,         // tensor times scalar tensor
  Dot,          // <a, b> over all elements
  RowDot,       // per-row inner product on [B,D] operands
  RowScale,     // scale each row of [B,D] by the matching entry of [B]
  MatMul,
  Transpose,
  Reshape,
  Slice,
  Embed,        // zero-pad a block back into a larger shape (adjoint of Slice)
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  BiasAdd,      // per-channel bias on NCHW
  ChannelSum,   // reduce NCHW over batch and spatial dims to [C]
  ChannelBroadcast,
  MaxPool2d,
  PoolScatter,  // route pooled gradient back to argmax positions
  PoolGather,   // pick argmax positions out of an input-shaped tensor
};

const char* op_name(Op op);

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Dense row-major f64 tensor. Copies are cheap (values are shared and
/// immutable). A tensor optionally carries a node in the computation graph;
/// any operation with a tracked input produces a tracked output.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor from(Shape shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values));
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const;
  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<double>& values() const;
  /// Value of a scalar (1-element) tensor.
  double value() const;

  bool tracked() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  /// Same values, no graph attachment.
  Tensor detached() const;
  /// Same values, registered as a tracked leaf of a fresh graph node.
  Tensor with_grad() const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  NodePtr node_;

  friend Tensor make_result(Op, Shape, std::vector<double>&&,
                            std::vector<Tensor>, std::vector<double>,
                            std::vector<int64_t>,
                            std::shared_ptr<const std::vector<int64_t>>);
};

struct Node {
  Op op = Op::Leaf;
  uint64_t id = 0;
  Shape out_shape;
  std::vector<Tensor> inputs;  // saved tensors, graph links intact
  std::vector<double> fattrs;
  std::vector<int64_t> iattrs;
  std::shared_ptr<const std::vector<int64_t>> indices;  // pooling argmax map
};

// Elementwise, same-shape operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// a*x + b with scalar constants (covers negation, scaling, shifting).
Tensor affine(const Tensor& x, double a, double b);
inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }
inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sqrt(const Tensor& x);
/// sign(0) == 0. Gradient is zero everywhere.
Tensor sign(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor max_const(const Tensor& x, double c);

Tensor sum(const Tensor& x);
/// Broadcast a scalar tensor to a shape (adjoint of sum).
Tensor sfill(const Tensor& s, Shape shape);
/// x * s where s is a scalar tensor.
Tensor smul(const Tensor& x, const Tensor& s);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor row_dot(const Tensor& a, const Tensor& b);
Tensor row_scale(const Tensor& a, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, const std::vector<int64_t>& offsets,
             const Shape& sizes);
Tensor embed(const Tensor& x, const Shape& big_shape,
             const std::vector<int64_t>& offsets);

// NCHW convolution, stride 1, symmetric zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, int64_t pad);
Tensor conv2d_input_grad(const Tensor& gout, const Tensor& w,
                         const Shape& x_shape, int64_t pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gout,
                          const Shape& w_shape, int64_t pad);
Tensor bias_add(const Tensor& x, const Tensor& b);
Tensor channel_sum(const Tensor& x);
Tensor channel_broadcast(const Tensor& b, int64_t batch, int64_t h, int64_t w);

/// 2x2 stride-2 max pooling; argmax ties go to the lowest flat index.
Tensor maxpool2d(const Tensor& x, int64_t k);
Tensor pool_scatter(const Tensor& g,
                    std::shared_ptr<const std::vector<int64_t>> idx,
                    const Shape& in_shape);
Tensor pool_gather(const Tensor& v,
                   std::shared_ptr<const std::vector<int64_t>> idx,
                   const Shape& out_shape);

/// L2 norm of all elements as a scalar tensor; composed of primitives.
Tensor norm(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// Deterministic RNG. The mt19937_64 engine is fully specified by the
/// standard; draws are hand-rolled so streams do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  uint64_t next_u64() { return eng_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  int64_t below(int64_t n);
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[below(i + 1)]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng);

}  // namespace gfad

#endif  // GFAD_TENSOR_HPP
