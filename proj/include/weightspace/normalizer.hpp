#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "weightspace/checkpoint.hpp"
#include "weightspace/matrix.hpp"

namespace weightspace {

inline constexpr double kNormEpsilon = 1e-8;

// Scalar batch statistics over signal (unmasked) elements only.
struct NormStats {
    double mean = 0.0;
    double std_dev = 0.0;  // population
    std::size_t count = 0;
};

NormStats masked_stats(const Matrix& tokens, const Matrix& mask);

// (t - mean) / max(std, eps) on signal elements; masked elements forced to 0.
Matrix normalize_tokens(const Matrix& tokens, const Matrix& mask, const NormStats& stats);

// Reconstruction loss: statistics come from the target batch, both sides are
// normalized with them, and the squared error is averaged over signal
// elements only.
double masked_mse_loss(const Matrix& pred, const Matrix& target, const Matrix& mask);

// Per-layer statistics across a layout-homogeneous zoo; the preprocessing
// baseline that the runtime loss normalization replaces.
struct LayerStats {
    std::map<std::string, std::pair<double, double>> by_layer;  // name -> (mu, sigma)
};

LayerStats layerwise_fit(const std::vector<WeightCheckpoint>& zoo);
WeightCheckpoint layerwise_apply(const WeightCheckpoint& ckpt, const LayerStats& stats,
                                 bool inverse);

std::string layer_stats_to_json(const LayerStats& stats);
LayerStats layer_stats_from_json(const std::string& text);

}  // namespace weightspace
