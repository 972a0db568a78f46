#ifndef CLOTHPICK_EIGEN_HPP
#define CLOTHPICK_EIGEN_HPP

#include <Eigen/Core>

namespace clothpick {

template <class T, int M = Eigen::Dynamic, int N = Eigen::Dynamic>
using matrix = Eigen::Matrix<T, M, N>;

template <class T, int M = Eigen::Dynamic>
using vector = matrix<T, M, 1>;

using real = double;

using vec = vector<real>;
using vec2 = vector<real, 2>;
using vec3 = vector<real, 3>;
using vec4 = vector<real, 4>;
using mat = matrix<real>;
using mat3x = matrix<real, 3, Eigen::Dynamic>;

} // namespace clothpick

#endif
