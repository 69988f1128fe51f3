#pragma once

#include <cstdint>

namespace mergelab {

// IEEE binary16 and bfloat16 conversions, round-to-nearest-even.
std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);

std::uint16_t float_to_bf16(float f);
float bf16_to_float(std::uint16_t h);

} // namespace mergelab
