#pragma once

// Generators and comparison helpers shared by the test binaries.

#include <cmath>

#include "flatopt/numcore.hpp"

namespace flatopt::testing {

inline ParamVector random_vector(Rng& rng, std::size_t dim, double scale) {
  ParamVector v(dim);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline Batch random_batch(Rng& rng, std::size_t rows, std::size_t cols, std::size_t classes) {
  Batch b;
  b.cols = cols;
  std::vector<double> x(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto& v : x) v = rng.normal();
    b.push_back(x, rng.uniform_int(classes));
  }
  return b;
}

/// ‖a − b‖ / max(‖b‖, tiny)
inline double relative_error(const ParamVector& a, const ParamVector& b) {
  return l2_norm(subtract(a, b)) / std::max(l2_norm(b), 1e-300);
}

inline double cosine(const ParamVector& a, const ParamVector& b) {
  return dot(a, b) / (l2_norm(a) * l2_norm(b));
}

}  // namespace flatopt::testing
