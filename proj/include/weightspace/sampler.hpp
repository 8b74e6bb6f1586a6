#pragma once

#include <cstddef>
#include <vector>

#include "weightspace/backbone.hpp"
#include "weightspace/checkpoint.hpp"
#include "weightspace/matrix.hpp"
#include "weightspace/rng.hpp"
#include "weightspace/tokenizer.hpp"
#include "weightspace/zoo.hpp"

namespace weightspace {

// Latents of one or more layout-identical models, stacked per anchor in
// token order so position-aligned slices are row arithmetic.
struct AnchorSet {
    Matrix latents;  // [num_anchors * tokens_per_anchor x latent_dim]
    std::vector<TokenPosition> positions;  // positions of one anchor sequence
    Layout layout;
    TokenScheme scheme = TokenScheme::Dense;
    std::size_t token_size = 0;
    std::size_t num_anchors = 0;
    std::size_t tokens_per_anchor = 0;
    // Non-trainable layers of the first anchor; copied verbatim into every
    // generated checkpoint instead of being sampled.
    std::vector<LayerTensor> non_trainable_reference;
};

AnchorSet embed_anchors(const Backbone& b, const std::vector<WeightCheckpoint>& anchors);

// Gaussian mixture with one isotropic component per support point.
struct KdeModel {
    Matrix support;
    double bandwidth = 0.0;
};

KdeModel fit_kde(const Matrix& points, double bandwidth);
double kde_density(const KdeModel& kde, const std::vector<double>& x);
Matrix sample_latents(const KdeModel& kde, std::size_t count, Rng& rng);

// Scott's-rule bandwidth over position-aligned anchor latents; falls back to
// 0.05 for a single anchor or zero spread.
double default_bandwidth(const AnchorSet& anchors);

// Per generated model: sample a latent for every token slot from the
// position-matched anchor latents, decode window-by-window with `halo`
// context rows on each side (halo outputs discarded, out-of-range context
// zero-padded), detokenize to the anchor layout, and copy non-trainable
// layers verbatim from the first anchor.
std::vector<WeightCheckpoint> generate_weights(const Backbone& b, const AnchorSet& anchors,
                                               double bandwidth, std::size_t count,
                                               std::size_t halo, Rng& rng);

// Refreshes batch-norm running statistics with `passes` single-batch forward
// passes over the dataset's train split; trainable parameters are untouched.
// Architectures without batch norm return the input unchanged.
WeightCheckpoint bn_condition(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                              const SyntheticDataset& ds, std::size_t passes,
                              double momentum);

}  // namespace weightspace
