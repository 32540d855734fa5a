#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

namespace mmnt {

// Shannon entropy in nats, 0 ln 0 := 0, clamped to [0, ln n].
// Shared by DAPE scoring and logit-lens distributions.
inline double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x < 0.0) throw std::domain_error("negative probability in entropy");
    if (x > 0.0) h -= x * std::log(x);
  }
  const double upper = p.empty() ? 0.0 : std::log(static_cast<double>(p.size()));
  return std::clamp(h, 0.0, upper);
}

}  // namespace mmnt
