#pragma once

#include <string>

#include "irfusion/nn/graph.hpp"

namespace irfusion::nn {

// Binary weights file, little-endian: magic "FVW1", version u32, record
// count u32, then one record per stored tensor in graph declaration order:
// kind u8 (1 = conv weight, 2 = conv bias, 3 = batch-norm pack), dim count
// u32, dims u32[], float32 payload. The batch-norm pack has dims [4, C] and
// carries gamma, beta, running mean, running variance. Round-trips bit-exact.
void save_weights(const std::string& path, const Graph<float>& g);

// Loads into an identically structured graph; any structural mismatch is an
// error. Marks batch-norm running statistics as usable for eval mode.
void load_weights(const std::string& path, Graph<float>& g);

}  // namespace irfusion::nn
