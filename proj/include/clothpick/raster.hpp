#ifndef CLOTHPICK_RASTER_HPP
#define CLOTHPICK_RASTER_HPP

#include "clothpick/eigen.hpp"

#include <algorithm>
#include <cmath>

// Top-down rasterization over the [-1,1]^2 workspace.
//
// Cell (row, col) of a res x res grid has its centre at
// (cell_center(col), cell_center(row)); rows follow +y. Centres are computed as
// (2i + 1 - res) / res, which makes them exactly antisymmetric, and the
// inside tests below only use exact negation-symmetric arithmetic. Together
// this makes rasterization commute bit-exactly with quarter turns and flips of
// the input geometry.
namespace clothpick::raster {

template <class Scalar>
inline Scalar cell_center(int i, int res) {
  return static_cast<Scalar>(2 * i + 1 - res) / static_cast<Scalar>(res);
}

// Index of the cell containing coordinate x, or -1 outside [-1, 1].
template <class Scalar>
inline int cell_of(Scalar x, int res) {
  if (!(x >= Scalar(-1) && x <= Scalar(1))) return -1;
  const int i = static_cast<int>(std::floor((x + Scalar(1)) * Scalar(0.5) * static_cast<Scalar>(res)));
  return std::clamp(i, 0, res - 1);
}

template <class Scalar>
inline Scalar cell_width(int res) {
  return Scalar(2) / static_cast<Scalar>(res);
}

template <class Scalar>
inline Scalar orient(Scalar ax, Scalar ay, Scalar bx, Scalar by, Scalar px, Scalar py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Closed-triangle test, independent of winding.
template <class Scalar>
inline bool in_triangle(Scalar ax, Scalar ay, Scalar bx, Scalar by, Scalar cx, Scalar cy, Scalar px, Scalar py) {
  const Scalar d0 = orient(ax, ay, bx, by, px, py);
  const Scalar d1 = orient(bx, by, cx, cy, px, py);
  const Scalar d2 = orient(cx, cy, ax, ay, px, py);
  const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
  const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
  return !(has_neg && has_pos);
}

// Lattice quad (p00, p01, p11, p10) split along the p00-p11 diagonal.
template <class Scalar>
inline bool in_quad(const Scalar* x, const Scalar* y, Scalar px, Scalar py) {
  return in_triangle(x[0], y[0], x[1], y[1], x[2], y[2], px, py) ||
         in_triangle(x[0], y[0], x[2], y[2], x[3], y[3], px, py);
}

// Calls visit(cell_index, quad_index) for every grid cell whose centre lies in
// the top-down projection of a lattice quad. `positions` is 3 x (rows*cols).
template <class Derived, class Visit>
void for_each_covered_cell(const Eigen::MatrixBase<Derived>& positions, int rows, int cols, int res, Visit&& visit) {
  using Scalar = typename Derived::Scalar;
  const Scalar w = cell_width<Scalar>(res);
  for (int r = 0; r + 1 < rows; ++r) {
    for (int c = 0; c + 1 < cols; ++c) {
      const int ids[4] = {r * cols + c, r * cols + c + 1, (r + 1) * cols + c + 1, (r + 1) * cols + c};
      Scalar x[4], y[4];
      for (int k = 0; k < 4; ++k) {
        x[k] = positions(0, ids[k]);
        y[k] = positions(1, ids[k]);
      }
      const Scalar minx = std::min({x[0], x[1], x[2], x[3]});
      const Scalar maxx = std::max({x[0], x[1], x[2], x[3]});
      const Scalar miny = std::min({y[0], y[1], y[2], y[3]});
      const Scalar maxy = std::max({y[0], y[1], y[2], y[3]});
      // Conservative index range; the exact centre test decides.
      auto index = [&](Scalar v) {
        return static_cast<int>(std::clamp<Scalar>(std::floor((v + 1) / w), Scalar(-2), Scalar(res + 2)));
      };
      const int c0 = std::max(0, index(minx) - 1);
      const int c1 = std::min(res - 1, index(maxx) + 1);
      const int r0 = std::max(0, index(miny) - 1);
      const int r1 = std::min(res - 1, index(maxy) + 1);
      for (int gr = r0; gr <= r1; ++gr) {
        const Scalar py = cell_center<Scalar>(gr, res);
        for (int gc = c0; gc <= c1; ++gc) {
          const Scalar px = cell_center<Scalar>(gc, res);
          if (in_quad(x, y, px, py)) visit(gr * res + gc, r * (cols - 1) + c);
        }
      }
    }
  }
}

} // namespace clothpick::raster

#endif
