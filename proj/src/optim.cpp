#include "lightseg/optim.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace lightseg {

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state,
               T lr, T beta1, T beta2, T epsilon) {
  const std::size_t n = param.size();
  if (grad.size() != n) {
    throw std::invalid_argument("adam_step: grad size " + std::to_string(grad.size()) +
                                " does not match param size " + std::to_string(n));
  }
  if (state.m.empty()) state.m.assign(n, T(0));
  if (state.v.empty()) state.v.assign(n, T(0));
  if (state.m.size() != n || state.v.size() != n || state.t < 0) {
    throw std::invalid_argument("adam_step: optimizer state does not match param size");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      throw numeric_error("adam_step: non-finite gradient at index " +
                          std::to_string(i));
    }
  }
  state.t += 1;
  const T c1 = T(1) - std::pow(beta1, static_cast<T>(state.t));
  const T c2 = T(1) - std::pow(beta2, static_cast<T>(state.t));
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = beta1 * state.m[i] + (T(1) - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (T(1) - beta2) * grad[i] * grad[i];
    const T mhat = state.m[i] / c1;
    const T vhat = state.v[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + epsilon);
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>,
                               AdamState<float>&, float, float, float, float);
template void adam_step<double>(std::span<double>, std::span<const double>,
                                AdamState<double>&, double, double, double, double);

}  // namespace lightseg
