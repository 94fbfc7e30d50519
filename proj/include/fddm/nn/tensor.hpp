#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fddm/errors.hpp"

namespace fddm::nn {

// Fixed-rank NCHW shape. Weight tensors reuse the fields as
// (out_channels, in_channels, kh, kw); vectors as (1, c, 1, 1).
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const = default;

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Dense double buffer with shared ownership. Graph values are written once
// during construction and treated as immutable afterwards, so sharing is safe.
class Tensor {
 public:
  Tensor() : buf_(std::make_shared<std::vector<double>>()) {}
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(s), buf_(std::make_shared<std::vector<double>>(s.numel(), fill)) {}

  Shape shape{};

  double* data() { return buf_->data(); }
  [[nodiscard]] const double* data() const { return buf_->data(); }
  [[nodiscard]] std::size_t numel() const { return buf_->size(); }

  double& operator[](std::size_t i) { return (*buf_)[i]; }
  double operator[](std::size_t i) const { return (*buf_)[i]; }

  // Deep copy (plain copies share the buffer).
  [[nodiscard]] Tensor clone() const {
    Tensor t(shape);
    *t.buf_ = *buf_;
    return t;
  }

  // Element access for NCHW tensors.
  double& at(int n, int c, int h, int w) {
    return (*buf_)[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }
  [[nodiscard]] double at(int n, int c, int h, int w) const {
    return (*buf_)[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }

 private:
  std::shared_ptr<std::vector<double>> buf_;
};

}  // namespace fddm::nn
