#include "fddm/wavelet.hpp"

namespace fddm {

SubbandSet dwt2(const Grid2D& image) {
  if (image.height < 2 || image.width < 2 || image.height % 2 != 0 || image.width % 2 != 0)
    throw DimensionError("dwt2 requires even dimensions >= 2, got " + std::to_string(image.height) + "x" +
                         std::to_string(image.width));

  const int hh2 = image.height / 2;
  const int ww2 = image.width / 2;
  SubbandSet out{Grid2D(hh2, ww2), Grid2D(hh2, ww2), Grid2D(hh2, ww2), Grid2D(hh2, ww2)};

  for (int r = 0; r < hh2; ++r) {
    for (int c = 0; c < ww2; ++c) {
      const double a = image.at(2 * r, 2 * c);
      const double b = image.at(2 * r, 2 * c + 1);
      const double cc = image.at(2 * r + 1, 2 * c);
      const double d = image.at(2 * r + 1, 2 * c + 1);
      out.ll.at(r, c) = (a + b + cc + d) / 2.0;
      out.hl.at(r, c) = (a - b + cc - d) / 2.0;
      out.lh.at(r, c) = (a + b - cc - d) / 2.0;
      out.hh.at(r, c) = (a - b - cc + d) / 2.0;
    }
  }
  return out;
}

Grid2D iwt2(const SubbandSet& bands) {
  const Grid2D& ll = bands.ll;
  if (!ll.same_shape(bands.lh) || !ll.same_shape(bands.hl) || !ll.same_shape(bands.hh))
    throw DimensionError("iwt2 requires four equally shaped subbands");

  Grid2D out(ll.height * 2, ll.width * 2);
  for (int r = 0; r < ll.height; ++r) {
    for (int c = 0; c < ll.width; ++c) {
      const double l = ll.at(r, c);
      const double x = bands.hl.at(r, c);
      const double y = bands.lh.at(r, c);
      const double z = bands.hh.at(r, c);
      out.at(2 * r, 2 * c) = (l + x + y + z) / 2.0;
      out.at(2 * r, 2 * c + 1) = (l - x + y - z) / 2.0;
      out.at(2 * r + 1, 2 * c) = (l + x - y - z) / 2.0;
      out.at(2 * r + 1, 2 * c + 1) = (l - x - y + z) / 2.0;
    }
  }
  return out;
}

}  // namespace fddm
