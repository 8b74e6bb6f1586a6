#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "weightspace/matrix.hpp"
#include "weightspace/rng.hpp"
#include "weightspace/tokenizer.hpp"

namespace weightspace {

// How the reconstruction error is normalized during training. Masked is the
// runtime scheme (batch statistics over signal elements, pads excluded from
// both the statistics and the error); None is the unnormalized baseline
// (raw squared error over every element, pads included).
enum class LossNorm { Masked, None };

std::string to_string(LossNorm norm);
LossNorm loss_norm_from_string(const std::string& name);

struct BackboneConfig {
    std::size_t token_size = 32;  // d_t
    std::size_t model_dim = 96;   // divisible by 6 and by num_heads
    std::size_t latent_dim = 16;
    std::size_t num_layers = 2;  // encoder depth == decoder depth
    std::size_t num_heads = 2;
    std::size_t window_size = 64;
    std::size_t subsample_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    double temperature = 0.5;        // contrastive temperature
    double contrastive_weight = 0.1;
    double aug_mask_prob = 0.1;
    double aug_noise_sigma = 0.01;
    LossNorm loss_norm = LossNorm::Masked;
    TokenScheme scheme = TokenScheme::Dense;
    double posenc_base = 10000.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
    std::string to_json() const;
    static BackboneConfig from_json(const std::string& text);
};

struct LinearParams {
    Matrix weight;  // [in x out]
    Matrix bias;    // [1 x out]
};

struct NormParams {
    Matrix gain;  // [1 x dim]
    Matrix bias;  // [1 x dim]
};

struct AttentionParams {
    LinearParams query, key, value, output;
};

struct BlockParams {
    NormParams norm1;
    AttentionParams attn;
    NormParams norm2;
    LinearParams mlp_in, mlp_out;
};

struct BackboneParams {
    LinearParams input_proj;
    std::vector<BlockParams> encoder;
    NormParams encoder_norm;
    LinearParams to_latent;
    LinearParams from_latent;
    std::vector<BlockParams> decoder;
    NormParams decoder_norm;
    LinearParams output_proj;
};

struct Backbone {
    BackboneConfig config;
    BackboneParams params;
};

Backbone init_backbone(const BackboneConfig& cfg);

// Ordered (name, matrix) enumeration of every parameter.
std::vector<std::pair<std::string, Matrix*>> parameter_list(BackboneParams& params);
std::vector<std::pair<std::string, const Matrix*>> parameter_list(const BackboneParams& params);
std::size_t parameter_count(const BackboneParams& params);

// Per-token latents. Pad elements of the input are zeroed before the forward
// pass; only the loss side of the contract depends on the mask beyond that.
Matrix encode(const Backbone& b, const Matrix& tokens, const Matrix& mask,
              const std::vector<TokenPosition>& positions);
Matrix decode(const Backbone& b, const Matrix& latents,
              const std::vector<TokenPosition>& positions);

struct Window {
    Matrix tokens;
    Matrix mask;
    std::vector<TokenPosition> positions;
    std::string source_model_id;
    std::size_t start_index = 0;
};

// Uniform contiguous window of min(window_size, n) tokens, then (optionally)
// a sorted uniform subset of subsample_size tokens within it.
Window sample_window(const TokenSequence& seq, std::size_t window_size,
                     std::size_t subsample_size, Rng& rng);

// Two independent views: Gaussian noise plus Bernoulli zero-masking on signal
// elements; pads untouched. The rng draw stream is data-independent.
std::pair<Window, Window> augment(const Window& w, const BackboneConfig& cfg, Rng& rng);

// NT-Xent over 2B stacked embeddings (rows of z_a and z_b are positive
// pairs), cosine similarity scaled by temperature, mean over all 2B anchors.
double contrastive_loss(const Matrix& z_a, const Matrix& z_b, double temperature);

struct TrainingLog {
    struct EpochEntry {
        std::size_t epoch = 0;
        double reconstruction = 0.0;
        double contrastive = 0.0;
        double total = 0.0;
        double learning_rate = 0.0;
    };
    std::vector<EpochEntry> epochs;
    std::size_t steps = 0;
};

std::pair<Backbone, TrainingLog> train(const std::vector<TokenSequence>& data,
                                       const BackboneConfig& cfg,
                                       const std::vector<std::string>* model_ids = nullptr);

// Full-sequence reconstruction, processed in consecutive window_size chunks.
Matrix reconstruct_tokens(const Backbone& b, const TokenSequence& seq);

// Explained variance over signal elements, global signal mean as baseline.
double explained_variance(const std::vector<TokenSequence>& data,
                          const std::vector<Matrix>& predictions);
double reconstruction_r2(const Backbone& b, const std::vector<TokenSequence>& data);

enum class LossKind { Reconstruction, Contrastive, Combined };

struct StepLossValue {
    double reconstruction = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};

// The loss one optimization step would see on these windows, with
// augmentation views drawn from a stream seeded by the backbone config.
StepLossValue step_loss(const Backbone& b, const std::vector<Window>& windows,
                        LossKind kind = LossKind::Combined);

// Compares analytic gradients of the step loss against central finite
// differences for every parameter; returns the max relative error.
double gradient_check(const Backbone& b, const std::vector<Window>& windows, double epsilon,
                      LossKind kind = LossKind::Combined);

// Tensor file plus a JSON config sidecar at <path>.json.
void save_backbone(const Backbone& b, const std::filesystem::path& path);
Backbone load_backbone(const std::filesystem::path& path);

}  // namespace weightspace
