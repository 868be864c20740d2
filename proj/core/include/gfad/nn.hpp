#ifndef GFAD_NN_HPP
#define GFAD_NN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "gfad/tensor.hpp"

namespace gfad::nn {

enum class Arch { MlpFashion = 1, CnnCifar10 = 2 };

Arch arch_from_string(const std::string& s);
std::string arch_to_string(Arch a);
Shape arch_input_shape(Arch a, int64_t batch);

enum class Activation { None, Tanh, Relu };

struct LayerSpec {
  enum class Kind { Dense, Conv2d, MaxPool2d };
  Kind kind = Kind::Dense;
  Activation act = Activation::None;
  int64_t in = 0;      // dense fan-in / conv input channels
  int64_t out = 0;     // dense fan-out / conv output channels
  int64_t kernel = 0;  // conv / pool window
  int64_t pad = 0;
  bool has_bias = false;
};

/// Architecture plus parameter tensors. Dense weights are stored [in, out]
/// (so forward is x @ W); conv weights [out_ch, in_ch, k, k] with a separate
/// [out_ch] bias. Dense layers carry no bias.
struct ModelState {
  Arch arch = Arch::MlpFashion;
  std::vector<LayerSpec> specs;
  std::vector<Tensor> params;
  uint64_t rng_seed = 0;

  int64_t param_layer_count() const;
  /// Index into params of layer l's weight tensor.
  int64_t weight_index(int64_t layer) const;
  int64_t total_param_count() const;
  /// Copy whose parameters are tracked leaves (for training).
  ModelState with_tracked_params() const;
};

/// Per-layer activations captured during a forward pass. layer_inputs[l] is
/// the tensor feeding parameterized layer l (the first entry is the network
/// input, flattened for dense layers).
struct ForwardTrace {
  std::vector<Tensor> layer_inputs;
  std::vector<Tensor> pre_activations;
  Tensor output;
};

ModelState build_model(Arch arch, uint64_t seed);

ForwardTrace forward(const ModelState& model, const Tensor& x, bool capture);

/// Mean over batch and classes of squared error; graph-tracked.
Tensor mse_loss(const Tensor& logits, const Tensor& one_hot_targets);

/// Argmax class per row; ties go to the lowest class index.
std::vector<int> predict_classes(const Tensor& logits);
int predict_class(const ModelState& model, const Tensor& x);

void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace gfad::nn

#endif  // GFAD_NN_HPP
