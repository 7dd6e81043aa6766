#pragma once

#include <Eigen/Dense>

#include "chips/numerics.hpp"

namespace chips::testing {

inline Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  Eigen::VectorXd e(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) e(i) = v[i];
  return e;
}

}  // namespace chips::testing
