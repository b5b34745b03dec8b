#pragma once

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

#include "fedrco/data.hpp"
#include "fedrco/numerics.hpp"
#include "fedrco/rng.hpp"
#include "fedrco/tensor.hpp"

namespace fedrco::model {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
};
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
};
struct Relu {};
// Stride equals the kernel size.
struct MaxPool {
  std::size_t kernel = 2;
};
struct Flatten {};

using LayerSpec = std::variant<Dense, Conv2d, Relu, MaxPool, Flatten>;

// One matrix per parameterized layer: dense d_out x (d_in + 1), conv
// out_ch x (in_ch*k*k + 1). The last column is the bias.
using Params = std::vector<Matrix>;

// Whether conv-layer Gamma is normalized by batch*positions or by batch only.
enum class GammaNormalization { Positions, BatchOnly };

class Network {
 public:
  // Throws ShapeMismatch / KernelLargerThanInput if the layers do not compose.
  Network(Shape3 input, std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  Shape3 input_shape() const { return input_; }
  // Shape entering layer i; index layers().size() is the output shape.
  Shape3 shape_before(std::size_t layer) const { return shapes_[layer]; }
  std::size_t num_classes() const { return shapes_.back().channels; }

  const Params& params() const { return params_; }
  Params& params() { return params_; }
  void set_params(Params params);

  // Layer index of each parameter block.
  const std::vector<std::size_t>& parameterized_layers() const { return param_layers_; }
  std::size_t parameter_count() const;

  // He-uniform weights, zero biases.
  void initialize(Rng& rng);

 private:
  Shape3 input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape3> shapes_;
  std::vector<std::size_t> param_layers_;
  Params params_;
};

Network make_dense_network(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                           std::size_t classes);

// conv(k) -> relu -> maxpool(2) -> conv(k) -> relu -> flatten -> dense
// hidden layers with relu -> dense output.
Network make_cnn(Shape3 input, const std::vector<std::size_t>& conv_channels,
                 std::size_t kernel, const std::vector<std::size_t>& hidden,
                 std::size_t classes);

/// Input activations and pre-activation gradients of one parameterized layer.
/// activations: (fan_in + 1) x B_eff with a trailing row of ones.
/// preact_grads: d_out x B_eff, per-sample gradients (batch size times the
/// gradient of the mean loss).
struct LayerCapture {
  Matrix activations;
  Matrix preact_grads;
  double activation_count = 0.0;
  double gradient_count = 0.0;
};

struct BatchCapture {
  std::vector<LayerCapture> layers;
};

struct ForwardBackwardResult {
  double loss = 0.0;
  Params grads;
  BatchCapture capture;
};

struct BackwardOptions {
  bool capture = true;
  GammaNormalization gamma_normalization = GammaNormalization::Positions;
};

/// Mean softmax cross-entropy over the batch and its exact gradient.
/// x holds one sample per column. Throws ShapeMismatch, LabelOutOfRange.
ForwardBackwardResult forward_backward(const Network& net, const Matrix& x,
                                       std::span<const int> labels,
                                       const BackwardOptions& options = {});

// classes x B
Matrix logits(const Network& net, const Matrix& x);

double mean_loss(const Network& net, const Matrix& x, std::span<const int> labels);

// Fraction of argmax(logits) == label, ties broken towards the lowest class.
// Throws EmptyDataset.
double evaluate_accuracy(const Network& net, const data::Dataset& ds);

/// im2col: column j holds the flattened C x k x k patch at output position j,
/// with j = b*(H'*W') + oh*W' + ow and row = c*k*k + ki*k + kj.
/// Throws KernelLargerThanInput.
Matrix unfold(const Tensor4& input, std::size_t kernel, std::size_t stride,
              std::size_t pad);

// Params arithmetic.
Params zeros_like(const Params& p);
void axpy(Params& y, double a, const Params& x);  // y += a * x
double squared_norm(const Params& p);
double squared_distance(const Params& a, const Params& b);
bool same_shape(const Params& a, const Params& b);
bool all_finite(const Params& p);

}  // namespace fedrco::model
