#include "weightspace/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "weightspace/errors.hpp"

namespace weightspace {

namespace {

TokenSequence tokenize_for(const Backbone& b, const WeightCheckpoint& w) {
    return b.config.scheme == TokenScheme::Dense ? tokenize_dense(w, b.config.token_size)
                                                 : tokenize_sparse(w, b.config.token_size);
}

Matrix encode_full_sequence(const Backbone& b, const TokenSequence& seq) {
    Matrix latents(seq.count(), b.config.latent_dim);
    const std::size_t ws = b.config.window_size;
    for (std::size_t begin = 0; begin < seq.count(); begin += ws) {
        const std::size_t end = std::min(begin + ws, seq.count());
        const std::size_t rows = end - begin;
        Matrix tokens(rows, seq.token_size());
        Matrix mask(rows, seq.token_size());
        std::vector<TokenPosition> positions(seq.positions.begin() + begin,
                                             seq.positions.begin() + end);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < seq.token_size(); ++j) {
                tokens(i, j) = seq.tokens(begin + i, j);
                mask(i, j) = seq.mask(begin + i, j);
            }
        }
        const Matrix z = encode(b, tokens, mask, positions);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < z.cols(); ++j) latents(begin + i, j) = z(i, j);
        }
    }
    return latents;
}

}  // namespace

AnchorSet embed_anchors(const Backbone& b, const std::vector<WeightCheckpoint>& anchors) {
    if (anchors.empty()) throw EmptyCollection("embed_anchors: no anchors");
    const std::string reference = anchors.front().layout_id();
    for (const auto& anchor : anchors) {
        if (anchor.layout_id() != reference) {
            throw LayoutMismatch("anchors must share one layout");
        }
    }

    AnchorSet set;
    set.layout = anchors.front().layout();
    set.scheme = b.config.scheme;
    set.token_size = b.config.token_size;
    set.num_anchors = anchors.size();
    for (const auto& layer : anchors.front().layers) {
        if (set.layout.non_trainable.contains(layer.name)) {
            set.non_trainable_reference.push_back(layer);
        }
    }

    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const TokenSequence seq = tokenize_for(b, anchors[a]);
        const Matrix latents = encode_full_sequence(b, seq);
        if (a == 0) {
            set.tokens_per_anchor = seq.count();
            set.positions = seq.positions;
            set.latents = Matrix(anchors.size() * seq.count(), b.config.latent_dim);
        }
        for (std::size_t i = 0; i < latents.rows(); ++i) {
            for (std::size_t j = 0; j < latents.cols(); ++j) {
                set.latents(a * set.tokens_per_anchor + i, j) = latents(i, j);
            }
        }
    }
    return set;
}

KdeModel fit_kde(const Matrix& points, double bandwidth) {
    if (points.rows() == 0) throw EmptyCollection("fit_kde: no support points");
    if (bandwidth <= 0.0) throw ConfigError("fit_kde: bandwidth must be positive");
    return {points, bandwidth};
}

double kde_density(const KdeModel& kde, const std::vector<double>& x) {
    if (x.size() != kde.support.cols()) throw ShapeError("kde_density: dimension mismatch");
    const double h = kde.bandwidth;
    const std::size_t d = x.size();
    const double norm =
        std::pow(h * std::sqrt(2.0 * std::numbers::pi), -static_cast<double>(d));

    double acc = 0.0;
    for (std::size_t i = 0; i < kde.support.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = (x[j] - kde.support(i, j)) / h;
            sq += diff * diff;
        }
        acc += std::exp(-0.5 * sq);
    }
    return acc * norm / static_cast<double>(kde.support.rows());
}

Matrix sample_latents(const KdeModel& kde, std::size_t count, Rng& rng) {
    if (count == 0) throw ConfigError("sample_latents: count must be positive");
    Matrix out(count, kde.support.cols());
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t pick = rng.uniform_index(kde.support.rows());
        for (std::size_t j = 0; j < out.cols(); ++j) {
            out(i, j) = kde.support(pick, j) + kde.bandwidth * rng.normal();
        }
    }
    return out;
}

double default_bandwidth(const AnchorSet& anchors) {
    if (anchors.num_anchors < 2) return 0.05;

    // Pooled per-slot variance across anchors, Scott's factor in the latent
    // dimension.
    const std::size_t slots = anchors.tokens_per_anchor;
    const std::size_t dim = anchors.latents.cols();
    double pooled = 0.0;
    for (std::size_t slot = 0; slot < slots; ++slot) {
        for (std::size_t j = 0; j < dim; ++j) {
            double mean = 0.0;
            for (std::size_t a = 0; a < anchors.num_anchors; ++a) {
                mean += anchors.latents(a * slots + slot, j);
            }
            mean /= static_cast<double>(anchors.num_anchors);
            for (std::size_t a = 0; a < anchors.num_anchors; ++a) {
                const double d = anchors.latents(a * slots + slot, j) - mean;
                pooled += d * d;
            }
        }
    }
    pooled /= static_cast<double>(slots * dim * anchors.num_anchors);
    const double sigma = std::sqrt(pooled);
    if (sigma <= 0.0) return 0.05;
    return sigma * std::pow(static_cast<double>(anchors.num_anchors),
                            -1.0 / static_cast<double>(dim + 4));
}

std::vector<WeightCheckpoint> generate_weights(const Backbone& b, const AnchorSet& anchors,
                                               double bandwidth, std::size_t count,
                                               std::size_t halo, Rng& rng) {
    if (count == 0) throw ConfigError("generate_weights: count must be positive");
    if (bandwidth <= 0.0) throw ConfigError("generate_weights: bandwidth must be positive");
    if (halo >= b.config.window_size) {
        throw ConfigError("generate_weights: halo must be smaller than the window");
    }
    if (anchors.scheme != b.config.scheme || anchors.token_size != b.config.token_size) {
        throw LayoutMismatch("anchor set was embedded under a different tokenization");
    }

    const std::size_t slots = anchors.tokens_per_anchor;
    const std::size_t dim = b.config.latent_dim;
    const std::size_t ws = b.config.window_size;
    if (token_count(anchors.layout, anchors.scheme, anchors.token_size) != slots) {
        throw LayoutMismatch("anchor layout does not match its token count");
    }
    const Matrix mask = signal_mask(anchors.layout, anchors.scheme, anchors.token_size);

    std::vector<WeightCheckpoint> generated;
    generated.reserve(count);
    for (std::size_t sample = 0; sample < count; ++sample) {
        Rng stream = rng.split(sample);

        // Position-aligned draw: slot i samples around one of the anchors'
        // latents for that same slot.
        Matrix latents(slots, dim);
        for (std::size_t slot = 0; slot < slots; ++slot) {
            const std::size_t pick = stream.uniform_index(anchors.num_anchors);
            for (std::size_t j = 0; j < dim; ++j) {
                latents(slot, j) =
                    anchors.latents(pick * slots + slot, j) + bandwidth * stream.normal();
            }
        }

        // Windowed decode; halo context rows are decoded and discarded,
        // out-of-range context is zero latents at the clamped edge position.
        TokenSequence seq;
        seq.scheme = anchors.scheme;
        seq.layout_id = anchors.layout.id();
        seq.positions = anchors.positions;
        seq.tokens = Matrix(slots, anchors.token_size);
        seq.mask = mask;

        for (std::size_t begin = 0; begin < slots; begin += ws) {
            const std::size_t end = std::min(begin + ws, slots);
            const std::ptrdiff_t in_begin =
                static_cast<std::ptrdiff_t>(begin) - static_cast<std::ptrdiff_t>(halo);
            const std::ptrdiff_t in_end =
                static_cast<std::ptrdiff_t>(end) + static_cast<std::ptrdiff_t>(halo);

            const std::size_t rows = static_cast<std::size_t>(in_end - in_begin);
            Matrix dec_in(rows, dim);
            std::vector<TokenPosition> positions(rows);
            for (std::ptrdiff_t r = in_begin; r < in_end; ++r) {
                const std::size_t row = static_cast<std::size_t>(r - in_begin);
                if (r >= 0 && r < static_cast<std::ptrdiff_t>(slots)) {
                    for (std::size_t j = 0; j < dim; ++j) {
                        dec_in(row, j) = latents(static_cast<std::size_t>(r), j);
                    }
                    positions[row] = anchors.positions[static_cast<std::size_t>(r)];
                } else {
                    positions[row] = anchors.positions[r < 0 ? 0 : slots - 1];
                }
            }

            const Matrix decoded = decode(b, dec_in, positions);
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t row = i - begin + halo;
                for (std::size_t j = 0; j < anchors.token_size; ++j) {
                    seq.tokens(i, j) = seq.mask(i, j) != 0.0 ? decoded(row, j) : 0.0;
                }
            }
        }

        WeightCheckpoint out = detokenize(seq, anchors.layout);
        for (const auto& reference : anchors.non_trainable_reference) {
            for (auto& layer : out.layers) {
                if (layer.name == reference.name) {
                    layer.data = reference.data;
                    break;
                }
            }
        }
        generated.push_back(std::move(out));
    }
    return generated;
}

}  // namespace weightspace
