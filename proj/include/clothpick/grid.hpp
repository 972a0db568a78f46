#ifndef CLOTHPICK_GRID_HPP
#define CLOTHPICK_GRID_HPP

#include "clothpick/errors.hpp"

#include <Eigen/Core>

// Square res x res grids stored row-major with rows along +y and columns
// along +x, matching the workspace frame. The transforms below mirror
// transform_point: k counter-clockwise quarter turns, then an optional y flip.
namespace clothpick::grid {

// Source cell of destination cell (r, c) under the transform.
inline void source_cell(int r, int c, int res, int quarter_turns, bool vflip, int& sr, int& sc) {
  if (vflip) r = res - 1 - r;
  // Undo the turns one at a time: a quarter turn maps (r, c) -> (c, res-1-r).
  const int k = ((quarter_turns % 4) + 4) % 4;
  for (int i = 0; i < k; ++i) {
    const int pr = res - 1 - c;
    const int pc = r;
    r = pr;
    c = pc;
  }
  sr = r;
  sc = c;
}

// Transforms every row of `in` (each a flattened res x res grid).
template <class Derived>
typename Derived::PlainObject transform_rows(const Eigen::MatrixBase<Derived>& in, int res, int quarter_turns,
                                             bool vflip) {
  if (in.cols() != static_cast<Eigen::Index>(res) * res)
    throw ContractError("grid transform needs square res x res rows");
  typename Derived::PlainObject out(in.rows(), in.cols());
  for (int r = 0; r < res; ++r) {
    for (int c = 0; c < res; ++c) {
      int sr = 0, sc = 0;
      source_cell(r, c, res, quarter_turns, vflip, sr, sc);
      out.col(r * res + c) = in.col(sr * res + sc);
    }
  }
  return out;
}

} // namespace clothpick::grid

#endif
