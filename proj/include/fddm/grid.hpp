#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fddm/errors.hpp"

namespace fddm {

// Dense row-major 2D scalar field (dose, CT channel or mask plane).
struct Grid2D {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Grid2D() = default;
  Grid2D(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw DimensionError("grid dimensions must be positive");
  }

  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }

  [[nodiscard]] std::size_t size() const { return values.size(); }

  [[nodiscard]] bool same_shape(const Grid2D& o) const { return height == o.height && width == o.width; }

  [[nodiscard]] bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double squared_norm(const Grid2D& g) {
  double s = 0.0;
  for (double v : g.values) s += v * v;
  return s;
}

}  // namespace fddm
