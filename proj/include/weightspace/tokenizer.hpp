#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "weightspace/checkpoint.hpp"
#include "weightspace/matrix.hpp"

namespace weightspace {

enum class TokenScheme { Sparse, Dense };

std::string to_string(TokenScheme scheme);
TokenScheme token_scheme_from_string(const std::string& name);

struct TokenPosition {
    std::size_t global = 0;    // n: index in the full sequence
    std::size_t layer = 0;     // l: layer index
    std::size_t in_layer = 0;  // k: token index within the layer
    bool operator==(const TokenPosition&) const = default;
};

struct TokenSequence {
    Matrix tokens;  // [n x d_t]
    Matrix mask;    // [n x d_t], 1 = signal, 0 = zero-pad
    std::vector<TokenPosition> positions;
    TokenScheme scheme = TokenScheme::Dense;
    std::string layout_id;

    std::size_t count() const { return tokens.rows(); }
    std::size_t token_size() const { return tokens.cols(); }
    std::size_t signal_count() const;
};

// Rows of each layer (outgoing-channel slices) are chunked independently;
// the final chunk of every row is zero-padded. 1-D layers count as one row.
TokenSequence tokenize_sparse(const WeightCheckpoint& ckpt, std::size_t token_size);

// Each layer is flattened whole before chunking, so only the final chunk of
// each layer carries padding.
TokenSequence tokenize_dense(const WeightCheckpoint& ckpt, std::size_t token_size);

// Exact inverse of the tokenizer selected by seq.scheme. Pads are discarded.
WeightCheckpoint detokenize(const TokenSequence& seq, const Layout& layout);

double padding_fraction(const TokenSequence& seq);

// Closed-form token count for a layout without materializing a sequence.
std::size_t token_count(const Layout& layout, TokenScheme scheme, std::size_t token_size);

// The signal/pad pattern a layout induces, independent of the weight values.
Matrix signal_mask(const Layout& layout, TokenScheme scheme, std::size_t token_size);

// On-disk form: u64-le header length, JSON header, float32-le token matrix,
// bit-packed mask (row-major, LSB first).
void save_token_file(const TokenSequence& seq, const Layout& layout,
                     const std::filesystem::path& path);
std::pair<TokenSequence, Layout> load_token_file(const std::filesystem::path& path);

}  // namespace weightspace
