#include "lightseg/convert.hpp"

namespace lightseg {

int output_stride(const NetworkSpec& spec) {
  int s = 4;  // stem conv (2) * max-pool (2)
  for (int i = 0; i < 4; ++i) {
    for (int u = 0; u < 2; ++u) s *= spec.stages[i][u].stride;
  }
  return s;
}

NetworkSpec convert_to_dilated(const NetworkSpec& spec) {
  if (spec.converted) {
    throw std::invalid_argument("convert_to_dilated: spec is already converted");
  }
  const std::array<int, 4> expected_strides{1, 2, 2, 2};
  for (int s = 0; s < 4; ++s) {
    if (spec.stages[s][0].stride != expected_strides[s] ||
        spec.stages[s][1].stride != 1) {
      throw std::invalid_argument("convert_to_dilated: stage " + std::to_string(s + 1) +
                                  " does not have the default stride layout");
    }
    for (int u = 0; u < 2; ++u) {
      if (spec.stages[s][u].dilation != 1) {
        throw std::invalid_argument("convert_to_dilated: stage " +
                                    std::to_string(s + 1) +
                                    " already carries a dilation");
      }
    }
  }

  NetworkSpec out = spec;
  for (int u = 0; u < 2; ++u) {
    out.stages[2][u].stride = 1;
    out.stages[2][u].dilation = 2;
    out.stages[3][u].stride = 1;
    out.stages[3][u].dilation = 4;
  }
  out.head_upsample = 8;
  out.converted = true;
  out.bn_stats_stale = true;
  return out;
}

}  // namespace lightseg
