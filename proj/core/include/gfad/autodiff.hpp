#ifndef GFAD_AUTODIFF_HPP
#define GFAD_AUTODIFF_HPP

#include <cstdint>
#include <functional>
#include <vector>

#include "gfad/tensor.hpp"

namespace gfad {

/// Reverse-mode differentiation of a scalar root with respect to the given
/// tensors. Backward rules are themselves built from forward primitives, so
/// with create_graph the returned gradients carry a graph and can be
/// differentiated again. A wrt tensor that does not participate in the root's
/// graph yields a zero tensor (not an error).
std::vector<Tensor> backward(const Tensor& root,
                             const std::vector<Tensor>& wrt,
                             bool create_graph);

/// Process-wide count of backward() invocations. Used to verify that
/// black-box code paths never touch gradients.
uint64_t backward_call_count();

/// Central-difference gradient oracle: (f(x+he_i) - f(x-he_i)) / 2h.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double step);

}  // namespace gfad

#endif  // GFAD_AUTODIFF_HPP
