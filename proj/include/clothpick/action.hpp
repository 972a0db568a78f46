#ifndef CLOTHPICK_ACTION_HPP
#define CLOTHPICK_ACTION_HPP

#include "clothpick/eigen.hpp"

#include <algorithm>
#include <cmath>

namespace clothpick {

// Single-picker pick-and-place in the [-1,1] pixel space, which is also the
// workspace frame: (x_pick, y_pick, x_place, y_place).
struct PickPlaceAction {
  real x_pick = 0, y_pick = 0, x_place = 0, y_place = 0;

  vec2 pick() const { return {x_pick, y_pick}; }
  vec2 place() const { return {x_place, y_place}; }

  vec4 as_vector() const { return {x_pick, y_pick, x_place, y_place}; }

  template <class Derived>
  static PickPlaceAction from_vector(const Eigen::MatrixBase<Derived>& v) {
    return {v(0), v(1), v(2), v(3)};
  }

  real max_abs() const {
    return std::max({std::abs(x_pick), std::abs(y_pick), std::abs(x_place), std::abs(y_place)});
  }

  bool finite() const {
    return std::isfinite(x_pick) && std::isfinite(y_pick) && std::isfinite(x_place) && std::isfinite(y_place);
  }

  bool in_range() const { return finite() && max_abs() <= 1.0; }

  PickPlaceAction clamped() const {
    auto c = [](real v) { return std::isfinite(v) ? std::clamp(v, real(-1), real(1)) : real(0); };
    return {c(x_pick), c(y_pick), c(x_place), c(y_place)};
  }

  // Rounded through float so the action survives the 32-bit dataset format unchanged.
  PickPlaceAction float_rounded() const {
    auto f = [](real v) { return static_cast<real>(static_cast<float>(v)); };
    return {f(x_pick), f(y_pick), f(x_place), f(y_place)};
  }

  friend bool operator==(const PickPlaceAction&, const PickPlaceAction&) = default;
};

} // namespace clothpick

#endif
