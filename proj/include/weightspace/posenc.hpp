#pragma once

#include <cstddef>
#include <vector>

#include "weightspace/matrix.hpp"
#include "weightspace/tokenizer.hpp"

namespace weightspace {

// Parameter-free sinusoidal encoding of 3D token positions. The embedding
// width is split into equal thirds (global, layer, within-layer); each third
// holds interleaved sin/cos pairs at frequencies base^(-2j/third).
struct PositionEncodingConfig {
    std::size_t model_dim = 96;  // must be divisible by 6
    double base = 10000.0;
};

std::vector<double> encode_position(const TokenPosition& pos,
                                    const PositionEncodingConfig& cfg);

Matrix encode_batch(const std::vector<TokenPosition>& positions,
                    const PositionEncodingConfig& cfg);

}  // namespace weightspace
