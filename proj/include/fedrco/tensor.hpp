#pragma once

#include <cstddef>
#include <vector>

#include "fedrco/numerics.hpp"

namespace fedrco {

// Per-sample shape in channel-major (C, H, W) order. Flat feature vectors use
// (d, 1, 1).
struct Shape3 {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

/// Batch of samples laid out [B][C][H][W]. The same buffer read as a
/// column-major (C*H*W) x B matrix has one sample per column, which is the
/// activation layout used throughout the model.
struct Tensor4 {
  std::size_t batch = 0;
  Shape3 shape;
  std::vector<double> values;

  Tensor4() = default;
  Tensor4(std::size_t b, Shape3 s)
      : batch(b), shape(s), values(b * s.size(), 0.0) {}

  double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return values[((b * shape.channels + c) * shape.height + h) * shape.width + w];
  }
  double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return values[((b * shape.channels + c) * shape.height + h) * shape.width + w];
  }

  Matrix as_columns() const {
    return Eigen::Map<const Matrix>(values.data(),
                                    static_cast<Eigen::Index>(shape.size()),
                                    static_cast<Eigen::Index>(batch));
  }
};

}  // namespace fedrco
