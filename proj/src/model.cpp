#include "fedrco/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedrco/error.hpp"

namespace fedrco::model {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) {
    throw Error(ErrorCode::KernelLargerThanInput,
                "kernel " + std::to_string(k) + " exceeds padded input " +
                    std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

void unfold_raw(const double* in, std::size_t batch, Shape3 s, std::size_t k,
                std::size_t stride, std::size_t pad, bool ones_row, Matrix& out) {
  const std::size_t oh = conv_extent(s.height, k, stride, pad);
  const std::size_t ow = conv_extent(s.width, k, stride, pad);
  const std::size_t patch = s.channels * k * k;
  const std::size_t rows = patch + (ones_row ? 1 : 0);
  out.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(batch * oh * ow));
  double* dst = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* sample = in + b * s.size();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t c = 0; c < s.channels; ++c) {
          for (std::size_t ki = 0; ki < k; ++ki) {
            const long y = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
            for (std::size_t kj = 0; kj < k; ++kj) {
              const long x = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
              const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(s.height) &&
                                  x < static_cast<long>(s.width);
              *dst++ = inside ? sample[(c * s.height + static_cast<std::size_t>(y)) * s.width +
                                       static_cast<std::size_t>(x)]
                              : 0.0;
            }
          }
        }
        if (ones_row) *dst++ = 1.0;
      }
    }
  }
}

// Adjoint of unfold_raw (without the ones row).
Matrix fold(const Matrix& cols, std::size_t batch, Shape3 s, std::size_t k,
            std::size_t stride, std::size_t pad) {
  const std::size_t oh = conv_extent(s.height, k, stride, pad);
  const std::size_t ow = conv_extent(s.width, k, stride, pad);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(batch));
  double* dst = out.data();
  const double* src = cols.data();
  const std::size_t rows = static_cast<std::size_t>(cols.rows());
  std::size_t j = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    double* sample = dst + b * s.size();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++j) {
        const double* col = src + j * rows;
        std::size_t r = 0;
        for (std::size_t c = 0; c < s.channels; ++c) {
          for (std::size_t ki = 0; ki < k; ++ki) {
            const long y = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
            for (std::size_t kj = 0; kj < k; ++kj, ++r) {
              const long x = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
              if (y >= 0 && x >= 0 && y < static_cast<long>(s.height) &&
                  x < static_cast<long>(s.width)) {
                sample[(c * s.height + static_cast<std::size_t>(y)) * s.width +
                       static_cast<std::size_t>(x)] += col[r];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Per-layer values the backward pass needs.
struct Trace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> augmented;
  std::vector<std::vector<Eigen::Index>> argmax;
};

Matrix forward(const Network& net, const Matrix& x, Trace* trace) {
  if (x.rows() != static_cast<Eigen::Index>(net.input_shape().size()) || x.cols() == 0) {
    throw Error(ErrorCode::ShapeMismatch,
                "forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                    std::to_string(net.input_shape().size()));
  }
  const auto& layers = net.layers();
  const auto batch = static_cast<std::size_t>(x.cols());
  if (trace) {
    trace->inputs.assign(layers.size(), Matrix());
    trace->augmented.assign(layers.size(), Matrix());
    trace->argmax.assign(layers.size(), {});
  }
  Matrix act = x;
  std::size_t param_index = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape3 in_shape = net.shape_before(i);
    const Shape3 out_shape = net.shape_before(i + 1);
    Matrix next;
    std::visit(
        Overloaded{
            [&](const Dense& d) {
              const Matrix& w = net.params()[param_index++];
              Matrix aug(static_cast<Eigen::Index>(d.in + 1), act.cols());
              aug.topRows(static_cast<Eigen::Index>(d.in)) = act;
              aug.row(static_cast<Eigen::Index>(d.in)).setOnes();
              next.noalias() = w * aug;
              if (trace) trace->augmented[i] = std::move(aug);
            },
            [&](const Conv2d& c) {
              const Matrix& w = net.params()[param_index++];
              Matrix cols;
              unfold_raw(act.data(), batch, in_shape, c.kernel, c.stride, c.pad, true, cols);
              const Matrix z = w * cols;
              const std::size_t positions = out_shape.height * out_shape.width;
              next.resize(static_cast<Eigen::Index>(out_shape.size()), act.cols());
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
                  for (std::size_t p = 0; p < positions; ++p) {
                    next(static_cast<Eigen::Index>(oc * positions + p),
                         static_cast<Eigen::Index>(b)) =
                        z(static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(b * positions + p));
                  }
                }
              }
              if (trace) trace->augmented[i] = std::move(cols);
            },
            [&](const Relu&) { next = act.cwiseMax(0.0); },
            [&](const MaxPool& m) {
              next.resize(static_cast<Eigen::Index>(out_shape.size()), act.cols());
              std::vector<Eigen::Index> arg(static_cast<std::size_t>(next.size()));
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < out_shape.channels; ++c) {
                  for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
                    for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
                      double best = -std::numeric_limits<double>::infinity();
                      Eigen::Index best_row = -1;
                      for (std::size_t ki = 0; ki < m.kernel; ++ki) {
                        for (std::size_t kj = 0; kj < m.kernel; ++kj) {
                          const auto row = static_cast<Eigen::Index>(
                              (c * in_shape.height + oy * m.kernel + ki) * in_shape.width +
                              ox * m.kernel + kj);
                          const double v = act(row, static_cast<Eigen::Index>(b));
                          if (best_row < 0 || v > best) {
                            best = v;
                            best_row = row;
                          }
                        }
                      }
                      const auto out_row = static_cast<Eigen::Index>(
                          (c * out_shape.height + oy) * out_shape.width + ox);
                      next(out_row, static_cast<Eigen::Index>(b)) = best;
                      arg[b * out_shape.size() + static_cast<std::size_t>(out_row)] = best_row;
                    }
                  }
                }
              }
              if (trace) trace->argmax[i] = std::move(arg);
            },
            [&](const Flatten&) { next = std::move(act); },
        },
        layers[i]);
    if (trace) trace->inputs[i] = std::move(act);
    act = std::move(next);
  }
  return act;
}

}  // namespace

Network::Network(Shape3 input, std::vector<LayerSpec> layers)
    : input_(input), layers_(std::move(layers)) {
  if (input_.size() == 0 || layers_.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "network needs a non-empty input and layer list");
  }
  shapes_.push_back(input_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Shape3 s = shapes_.back();
    const std::string where = "layer " + std::to_string(i) + ": ";
    Shape3 next = std::visit(
        Overloaded{
            [&](const Dense& d) {
              if (s.height != 1 || s.width != 1 || s.channels != d.in || d.out == 0) {
                throw Error(ErrorCode::ShapeMismatch,
                            where + "dense expects a flat input of size " + std::to_string(d.in));
              }
              param_layers_.push_back(i);
              params_.push_back(Matrix::Zero(static_cast<Eigen::Index>(d.out),
                                             static_cast<Eigen::Index>(d.in + 1)));
              return Shape3{d.out, 1, 1};
            },
            [&](const Conv2d& c) {
              if (s.channels != c.in_channels || c.out_channels == 0 || c.kernel == 0 ||
                  c.stride == 0) {
                throw Error(ErrorCode::ShapeMismatch, where + "conv channel mismatch");
              }
              param_layers_.push_back(i);
              params_.push_back(Matrix::Zero(
                  static_cast<Eigen::Index>(c.out_channels),
                  static_cast<Eigen::Index>(c.in_channels * c.kernel * c.kernel + 1)));
              return Shape3{c.out_channels, conv_extent(s.height, c.kernel, c.stride, c.pad),
                            conv_extent(s.width, c.kernel, c.stride, c.pad)};
            },
            [&](const Relu&) { return s; },
            [&](const MaxPool& m) {
              if (m.kernel == 0 || s.height < m.kernel || s.width < m.kernel) {
                throw Error(ErrorCode::KernelLargerThanInput, where + "pool kernel too large");
              }
              return Shape3{s.channels, s.height / m.kernel, s.width / m.kernel};
            },
            [&](const Flatten&) { return Shape3{s.size(), 1, 1}; },
        },
        layers_[i]);
    shapes_.push_back(next);
  }
  if (shapes_.back().height != 1 || shapes_.back().width != 1 || param_layers_.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "network must end in a flat class-score layer");
  }
}

void Network::set_params(Params params) {
  if (!same_shape(params, params_)) {
    throw Error(ErrorCode::ShapeMismatch, "set_params: parameter shapes differ");
  }
  params_ = std::move(params);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

void Network::initialize(Rng& rng) {
  for (auto& w : params_) {
    const auto fan_in = static_cast<double>(w.cols() - 1);
    std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    for (Eigen::Index j = 0; j + 1 < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    w.col(w.cols() - 1).setZero();
  }
}

Network make_dense_network(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                           std::size_t classes) {
  std::vector<LayerSpec> layers;
  std::size_t in = input_dim;
  for (std::size_t h : hidden) {
    layers.emplace_back(Dense{in, h});
    layers.emplace_back(Relu{});
    in = h;
  }
  layers.emplace_back(Dense{in, classes});
  return Network(Shape3{input_dim, 1, 1}, std::move(layers));
}

Network make_cnn(Shape3 input, const std::vector<std::size_t>& conv_channels,
                 std::size_t kernel, const std::vector<std::size_t>& hidden,
                 std::size_t classes) {
  std::vector<LayerSpec> layers;
  Shape3 s = input;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    layers.emplace_back(Conv2d{s.channels, conv_channels[i], kernel, 1, 0});
    layers.emplace_back(Relu{});
    s = Shape3{conv_channels[i], conv_extent(s.height, kernel, 1, 0),
               conv_extent(s.width, kernel, 1, 0)};
    if (i == 0) {
      if (s.height < 2 || s.width < 2) {
        throw Error(ErrorCode::KernelLargerThanInput, "make_cnn: input too small to pool");
      }
      layers.emplace_back(MaxPool{2});
      s = Shape3{s.channels, s.height / 2, s.width / 2};
    }
  }
  layers.emplace_back(Flatten{});
  std::size_t in = s.size();
  for (std::size_t h : hidden) {
    layers.emplace_back(Dense{in, h});
    layers.emplace_back(Relu{});
    in = h;
  }
  layers.emplace_back(Dense{in, classes});
  return Network(input, std::move(layers));
}

ForwardBackwardResult forward_backward(const Network& net, const Matrix& x,
                                       std::span<const int> labels,
                                       const BackwardOptions& options) {
  if (labels.size() != static_cast<std::size_t>(x.cols())) {
    throw Error(ErrorCode::ShapeMismatch, "forward_backward: " + std::to_string(labels.size()) +
                                              " labels for " + std::to_string(x.cols()) +
                                              " samples");
  }
  const std::size_t classes = net.num_classes();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw Error(ErrorCode::LabelOutOfRange,
                  "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Trace trace;
  const Matrix z = forward(net, x, &trace);
  const auto batch = static_cast<std::size_t>(x.cols());
  const double inv_b = 1.0 / static_cast<double>(batch);

  ForwardBackwardResult result;
  Matrix delta(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    const double m = z.col(b).maxCoeff();
    const Vector e = (z.col(b).array() - m).exp().matrix();
    const double sum = e.sum();
    const int y = labels[static_cast<std::size_t>(b)];
    loss += std::log(sum) + m - z(y, b);
    delta.col(b) = e / sum;
    delta(y, b) -= 1.0;
  }
  result.loss = loss * inv_b;
  delta *= inv_b;

  const auto& layers = net.layers();
  const auto& param_layers = net.parameterized_layers();
  result.grads.resize(param_layers.size());
  if (options.capture) result.capture.layers.resize(param_layers.size());
  std::size_t param_index = param_layers.size();
  for (std::size_t ii = layers.size(); ii-- > 0;) {
    const Shape3 in_shape = net.shape_before(ii);
    const Shape3 out_shape = net.shape_before(ii + 1);
    const Matrix& input = trace.inputs[ii];
    Matrix prev;
    const bool need_prev = ii > 0;
    std::visit(
        Overloaded{
            [&](const Dense& d) {
              const std::size_t pi = --param_index;
              const Matrix& w = net.params()[pi];
              const Matrix& aug = trace.augmented[ii];
              result.grads[pi].noalias() = delta * aug.transpose();
              if (need_prev) {
                prev.noalias() = w.leftCols(static_cast<Eigen::Index>(d.in)).transpose() * delta;
              }
              if (options.capture) {
                LayerCapture& cap = result.capture.layers[pi];
                cap.activations = aug;
                cap.preact_grads = delta * static_cast<double>(batch);
                cap.activation_count = static_cast<double>(batch);
                cap.gradient_count = static_cast<double>(batch);
              }
            },
            [&](const Conv2d& c) {
              const std::size_t pi = --param_index;
              const Matrix& w = net.params()[pi];
              const Matrix& cols = trace.augmented[ii];
              const std::size_t positions = out_shape.height * out_shape.width;
              Matrix dz(static_cast<Eigen::Index>(c.out_channels),
                        static_cast<Eigen::Index>(batch * positions));
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
                  for (std::size_t p = 0; p < positions; ++p) {
                    dz(static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(b * positions + p)) =
                        delta(static_cast<Eigen::Index>(oc * positions + p),
                              static_cast<Eigen::Index>(b));
                  }
                }
              }
              result.grads[pi].noalias() = dz * cols.transpose();
              if (need_prev) {
                const Matrix dcols = w.leftCols(w.cols() - 1).transpose() * dz;
                prev = fold(dcols, batch, in_shape, c.kernel, c.stride, c.pad);
              }
              if (options.capture) {
                LayerCapture& cap = result.capture.layers[pi];
                cap.activations = cols;
                cap.preact_grads = dz * static_cast<double>(batch);
                cap.activation_count = static_cast<double>(batch * positions);
                cap.gradient_count =
                    options.gamma_normalization == GammaNormalization::Positions
                        ? static_cast<double>(batch * positions)
                        : static_cast<double>(batch);
              }
            },
            [&](const Relu&) {
              if (need_prev) prev = (input.array() > 0.0).select(delta, 0.0);
            },
            [&](const MaxPool&) {
              if (!need_prev) return;
              prev = Matrix::Zero(static_cast<Eigen::Index>(in_shape.size()),
                                  static_cast<Eigen::Index>(batch));
              const auto& arg = trace.argmax[ii];
              for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t r = 0; r < out_shape.size(); ++r) {
                  prev(arg[b * out_shape.size() + r], static_cast<Eigen::Index>(b)) +=
                      delta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(b));
                }
              }
            },
            [&](const Flatten&) {
              if (need_prev) prev = std::move(delta);
            },
        },
        layers[ii]);
    if (!need_prev) break;
    delta = std::move(prev);
  }
  return result;
}

Matrix logits(const Network& net, const Matrix& x) { return forward(net, x, nullptr); }

double mean_loss(const Network& net, const Matrix& x, std::span<const int> labels) {
  if (labels.size() != static_cast<std::size_t>(x.cols())) {
    throw Error(ErrorCode::ShapeMismatch, "mean_loss: label count differs from sample count");
  }
  const Matrix z = logits(net, x);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= z.rows()) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y) + " out of range");
    }
    const double m = z.col(b).maxCoeff();
    loss += std::log((z.col(b).array() - m).exp().sum()) + m - z(y, b);
  }
  return loss / static_cast<double>(z.cols());
}

double evaluate_accuracy(const Network& net, const data::Dataset& ds) {
  if (ds.size() == 0) throw Error(ErrorCode::EmptyDataset, "evaluate_accuracy: empty dataset");
  constexpr Eigen::Index kChunk = 512;
  std::size_t correct = 0;
  const Eigen::Index n = ds.features.cols();
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - start);
    const Matrix z = logits(net, ds.features.middleCols(start, len));
    for (Eigen::Index b = 0; b < len; ++b) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < z.rows(); ++c) {
        if (z(c, b) > z(best, b)) best = c;
      }
      if (best == ds.labels[static_cast<std::size_t>(start + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

Matrix unfold(const Tensor4& input, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (kernel == 0 || stride == 0) {
    throw Error(ErrorCode::InvalidArgument, "unfold: kernel and stride must be positive");
  }
  Matrix out;
  unfold_raw(input.values.data(), input.batch, input.shape, kernel, stride, pad, false, out);
  return out;
}

Params zeros_like(const Params& p) {
  Params z;
  z.reserve(p.size());
  for (const auto& m : p) z.push_back(Matrix::Zero(m.rows(), m.cols()));
  return z;
}

void axpy(Params& y, double a, const Params& x) {
  if (!same_shape(y, x)) throw Error(ErrorCode::ShapeMismatch, "axpy: shapes differ");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

double squared_norm(const Params& p) {
  double s = 0.0;
  for (const auto& m : p) s += m.squaredNorm();
  return s;
}

double squared_distance(const Params& a, const Params& b) {
  if (!same_shape(a, b)) throw Error(ErrorCode::ShapeMismatch, "squared_distance: shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).squaredNorm();
  return s;
}

bool same_shape(const Params& a, const Params& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
  }
  return true;
}

bool all_finite(const Params& p) {
  for (const auto& m : p) {
    if (!m.allFinite()) return false;
  }
  return true;
}

}  // namespace fedrco::model
