#pragma once

#include "fddm/grid.hpp"

namespace fddm {

// The four single-level Haar subbands of an even-shaped grid, each
// (H/2) x (W/2). (lh, hl, hh) form the high-frequency group, ll the
// low-frequency band.
struct SubbandSet {
  Grid2D ll, lh, hl, hh;
};

// Orthonormal single-level 2D Haar analysis. For each non-overlapping
// 2x2 block [a b; c d]:
//   ll = (a+b+c+d)/2   hl = (a-b+c-d)/2
//   lh = (a+b-c-d)/2   hh = (a-b-c+d)/2
// Throws DimensionError on odd dimensions.
SubbandSet dwt2(const Grid2D& image);

// Exact inverse of dwt2 under the same convention.
Grid2D iwt2(const SubbandSet& bands);

}  // namespace fddm
