#pragma once

#include "lightseg/network.hpp"

namespace lightseg {

// Cumulative stride from the input to the final feature map
// (stem conv * max-pool * stage strides).
int output_stride(const NetworkSpec& spec);

// Stride-to-dilation conversion: stage-3 and stage-4 strides drop to 1 and
// their 3x3 convolutions dilate by 2x and 4x respectively, taking the output
// stride from 32 to 8 without touching any weight. Projection 1x1 convs stay
// at dilation 1, the head upsample factor becomes 8 and BN running statistics
// are marked stale. Rejects specs that are already converted or otherwise not
// in the default (1,2,2,2)/dilation-1 layout.
NetworkSpec convert_to_dilated(const NetworkSpec& spec);

}  // namespace lightseg
