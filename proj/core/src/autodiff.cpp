#include "gfad/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>

namespace gfad {

namespace {

std::atomic<uint64_t> g_backward_calls{0};

Tensor maybe_detach(const Tensor& t, bool track) {
  return track ? t : t.detached();
}

// Constant 0/1 mask derived from a node input; always untracked (the mask is
// locally constant, so its derivative contribution is zero).
Tensor mask_gt(const Tensor& x, double c) {
  const auto& xv = x.values();
  std::vector<double> m(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) m[i] = xv[i] > c ? 1.0 : 0.0;
  return Tensor(x.shape(), std::move(m));
}

Tensor mask_open_interval(const Tensor& x, double lo, double hi) {
  const auto& xv = x.values();
  std::vector<double> m(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    m[i] = (xv[i] > lo && xv[i] < hi) ? 1.0 : 0.0;
  }
  return Tensor(x.shape(), std::move(m));
}

// Adjoints of each node input given the node's output adjoint g. An
// undefined tensor in the result means "no gradient to this input".
std::vector<Tensor> backward_rule(const Node& n, const Tensor& g, bool track) {
  switch (n.op) {
    case Op::Leaf:
      return {};
    case Op::Add:
      return {g, g};
    case Op::Sub:
      return {g, neg(g)};
    case Op::Mul: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor b = maybe_detach(n.inputs[1], track);
      return {mul(g, b), mul(g, a)};
    }
    case Op::Div: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor b = maybe_detach(n.inputs[1], track);
      return {div(g, b), neg(div(mul(g, a), mul(b, b)))};
    }
    case Op::Affine:
      return {affine(g, n.fattrs[0], 0.0)};
    case Op::Tanh: {
      Tensor x = maybe_detach(n.inputs[0], track);
      Tensor t = tanh(x);
      return {mul(g, affine(mul(t, t), -1.0, 1.0))};
    }
    case Op::Relu:
      return {mul(g, mask_gt(n.inputs[0], 0.0))};
    case Op::Sqrt: {
      Tensor x = maybe_detach(n.inputs[0], track);
      return {div(g, affine(sqrt(x), 2.0, 0.0))};
    }
    case Op::Sign:
      return {Tensor::zeros(n.inputs[0].shape())};
    case Op::Clamp:
      return {mul(g, mask_open_interval(n.inputs[0], n.fattrs[0], n.fattrs[1]))};
    case Op::MaxConst:
      return {mul(g, mask_gt(n.inputs[0], n.fattrs[0]))};
    case Op::Sum:
      return {sfill(g, n.inputs[0].shape())};
    case Op::SFill:
      return {sum(g)};
    case Op::SMul: {
      Tensor x = maybe_detach(n.inputs[0], track);
      Tensor s = maybe_detach(n.inputs[1], track);
      return {smul(g, s), sum(mul(g, x))};
    }
    case Op::Dot: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor b = maybe_detach(n.inputs[1], track);
      return {smul(b, g), smul(a, g)};
    }
    case Op::RowDot: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor b = maybe_detach(n.inputs[1], track);
      return {row_scale(b, g), row_scale(a, g)};
    }
    case Op::RowScale: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor s = maybe_detach(n.inputs[1], track);
      return {row_scale(g, s), row_dot(g, a)};
    }
    case Op::MatMul: {
      Tensor a = maybe_detach(n.inputs[0], track);
      Tensor b = maybe_detach(n.inputs[1], track);
      return {matmul(g, transpose(b)), matmul(transpose(a), g)};
    }
    case Op::Transpose:
      return {transpose(g)};
    case Op::Reshape:
      return {reshape(g, n.inputs[0].shape())};
    case Op::Slice:
      return {embed(g, n.inputs[0].shape(), n.iattrs)};
    case Op::Embed:
      return {slice(g, n.iattrs, n.inputs[0].shape())};
    case Op::Conv2d: {
      Tensor x = maybe_detach(n.inputs[0], track);
      Tensor w = maybe_detach(n.inputs[1], track);
      int64_t pad = n.iattrs[0];
      return {conv2d_input_grad(g, w, x.shape(), pad),
              conv2d_weight_grad(x, g, w.shape(), pad)};
    }
    case Op::Conv2dInputGrad: {
      // Output is x-shaped; inputs are (gout, w). Both partials follow from
      // the bilinearity of conv2d.
      Tensor gout = maybe_detach(n.inputs[0], track);
      Tensor w = maybe_detach(n.inputs[1], track);
      int64_t pad = n.iattrs[0];
      return {conv2d(g, w, pad),
              conv2d_weight_grad(g, gout, w.shape(), pad)};
    }
    case Op::Conv2dWeightGrad: {
      // Output is w-shaped; inputs are (x, gout).
      Tensor x = maybe_detach(n.inputs[0], track);
      Tensor gout = maybe_detach(n.inputs[1], track);
      int64_t pad = n.iattrs[0];
      return {conv2d_input_grad(gout, g, x.shape(), pad), conv2d(x, g, pad)};
    }
    case Op::BiasAdd:
      return {g, channel_sum(g)};
    case Op::ChannelSum:
      return {channel_broadcast(g, n.iattrs[0], n.iattrs[1], n.iattrs[2])};
    case Op::ChannelBroadcast:
      return {channel_sum(g)};
    case Op::MaxPool2d:
      return {pool_scatter(g, n.indices, n.inputs[0].shape())};
    case Op::PoolScatter:
      return {pool_gather(g, n.indices, n.inputs[0].shape())};
    case Op::PoolGather:
      return {pool_scatter(g, n.indices, n.inputs[0].shape())};
  }
  throw std::runtime_error("backward: unhandled op");
}

}  // namespace

uint64_t backward_call_count() {
  return g_backward_calls.load(std::memory_order_relaxed);
}

std::vector<Tensor> backward(const Tensor& root, const std::vector<Tensor>& wrt,
                             bool create_graph) {
  g_backward_calls.fetch_add(1, std::memory_order_relaxed);
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got " +
                     shape_str(root.shape()));
  }
  if (!root.tracked()) {
    throw std::runtime_error("backward: root is not graph-tracked");
  }

  // Reachable subgraph, then reverse creation order. Node ids increase
  // monotonically during construction, so descending id is a valid
  // topological order of the DAG.
  std::vector<Node*> order;
  std::unordered_map<Node*, Tensor> adjoint;
  {
    std::vector<Node*> stack{root.node().get()};
    std::unordered_map<Node*, bool> seen;
    seen[root.node().get()] = true;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const Tensor& in : n->inputs) {
        if (in.tracked() && !seen[in.node().get()]) {
          seen[in.node().get()] = true;
          stack.push_back(in.node().get());
        }
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  adjoint.emplace(root.node().get(), Tensor::scalar(1.0));

  for (Node* n : order) {
    auto it = adjoint.find(n);
    if (it == adjoint.end()) continue;
    const Tensor g = it->second;
    if (n->op == Op::Leaf) continue;
    std::vector<Tensor> partials = backward_rule(*n, g, create_graph);
    for (size_t i = 0; i < partials.size(); ++i) {
      if (!partials[i].defined()) continue;
      const Tensor& in = n->inputs[i];
      if (!in.tracked()) continue;
      Node* p = in.node().get();
      auto pit = adjoint.find(p);
      if (pit == adjoint.end()) {
        adjoint.emplace(p, partials[i]);
      } else {
        pit->second = add(pit->second, partials[i]);
      }
    }
  }

  std::vector<Tensor> grads;
  grads.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    if (w.tracked()) {
      auto it = adjoint.find(w.node().get());
      if (it != adjoint.end()) {
        grads.push_back(create_graph ? it->second : it->second.detached());
        continue;
      }
    }
    grads.push_back(Tensor::zeros(w.shape()));
  }
  return grads;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double step) {
  if (step <= 0.0) throw std::runtime_error("finite differences: step <= 0");
  const auto& xv = x.values();
  std::vector<double> grad(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    std::vector<double> plus(xv), minus(xv);
    plus[i] += step;
    minus[i] -= step;
    double fp = f(Tensor(x.shape(), std::move(plus)));
    double fm = f(Tensor(x.shape(), std::move(minus)));
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace gfad
