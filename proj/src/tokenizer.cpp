#include "weightspace/tokenizer.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "weightspace/errors.hpp"

namespace weightspace {

namespace {

using ordered_json = nlohmann::ordered_json;

struct LayerView {
    std::size_t rows;        // c_out (1 for vectors and scalars)
    std::size_t row_length;  // c_r
};

LayerView sliced_view(const LayerTensor& layer) {
    if (layer.data.empty()) {
        throw EmptyLayer("layer '" + layer.name + "' has no elements");
    }
    if (layer.shape.size() < 2) {
        return {1, layer.data.size()};
    }
    return {layer.shape[0], layer.data.size() / layer.shape[0]};
}

std::size_t chunks(std::size_t length, std::size_t token_size) {
    return (length + token_size - 1) / token_size;
}

void require_token_size(std::size_t token_size) {
    if (token_size == 0) throw ConfigError("token size must be positive");
}

}  // namespace

std::string to_string(TokenScheme scheme) {
    return scheme == TokenScheme::Sparse ? "sparse" : "dense";
}

TokenScheme token_scheme_from_string(const std::string& name) {
    if (name == "sparse") return TokenScheme::Sparse;
    if (name == "dense") return TokenScheme::Dense;
    throw ConfigError("unknown tokenization scheme: " + name);
}

std::size_t TokenSequence::signal_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data()[i] != 0.0) ++n;
    }
    return n;
}

TokenSequence tokenize_sparse(const WeightCheckpoint& ckpt, std::size_t token_size) {
    require_token_size(token_size);

    std::size_t total = 0;
    for (const auto& layer : ckpt.layers) {
        const LayerView view = sliced_view(layer);
        total += view.rows * chunks(view.row_length, token_size);
    }

    TokenSequence seq;
    seq.scheme = TokenScheme::Sparse;
    seq.layout_id = ckpt.layout_id();
    seq.tokens = Matrix(total, token_size);
    seq.mask = Matrix(total, token_size);
    seq.positions.reserve(total);

    std::size_t global = 0;
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const auto& layer = ckpt.layers[l];
        const LayerView view = sliced_view(layer);
        std::size_t in_layer = 0;
        for (std::size_t r = 0; r < view.rows; ++r) {
            const float* row = layer.data.data() + r * view.row_length;
            for (std::size_t offset = 0; offset < view.row_length; offset += token_size) {
                const std::size_t take = std::min(token_size, view.row_length - offset);
                for (std::size_t j = 0; j < take; ++j) {
                    seq.tokens(global, j) = static_cast<double>(row[offset + j]);
                    seq.mask(global, j) = 1.0;
                }
                seq.positions.push_back({global, l, in_layer});
                ++global;
                ++in_layer;
            }
        }
    }
    return seq;
}

TokenSequence tokenize_dense(const WeightCheckpoint& ckpt, std::size_t token_size) {
    require_token_size(token_size);

    std::size_t total = 0;
    for (const auto& layer : ckpt.layers) {
        if (layer.data.empty()) throw EmptyLayer("layer '" + layer.name + "' has no elements");
        total += chunks(layer.data.size(), token_size);
    }

    TokenSequence seq;
    seq.scheme = TokenScheme::Dense;
    seq.layout_id = ckpt.layout_id();
    seq.tokens = Matrix(total, token_size);
    seq.mask = Matrix(total, token_size);
    seq.positions.reserve(total);

    std::size_t global = 0;
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const auto& layer = ckpt.layers[l];
        std::size_t in_layer = 0;
        for (std::size_t offset = 0; offset < layer.data.size(); offset += token_size) {
            const std::size_t take = std::min(token_size, layer.data.size() - offset);
            for (std::size_t j = 0; j < take; ++j) {
                seq.tokens(global, j) = static_cast<double>(layer.data[offset + j]);
                seq.mask(global, j) = 1.0;
            }
            seq.positions.push_back({global, l, in_layer});
            ++global;
            ++in_layer;
        }
    }
    return seq;
}

std::size_t token_count(const Layout& layout, TokenScheme scheme, std::size_t token_size) {
    require_token_size(token_size);
    std::size_t total = 0;
    for (const auto& entry : layout.entries) {
        std::size_t count = 1;
        for (std::size_t d : entry.shape) count *= d;
        if (count == 0) throw EmptyLayer("layer '" + entry.name + "' has no elements");
        if (scheme == TokenScheme::Dense) {
            total += chunks(count, token_size);
        } else {
            const std::size_t rows = entry.shape.size() < 2 ? 1 : entry.shape[0];
            total += rows * chunks(count / rows, token_size);
        }
    }
    return total;
}

Matrix signal_mask(const Layout& layout, TokenScheme scheme, std::size_t token_size) {
    const std::size_t total = token_count(layout, scheme, token_size);
    Matrix mask(total, token_size);
    std::size_t global = 0;

    auto mark_span = [&](std::size_t length) {
        for (std::size_t offset = 0; offset < length; offset += token_size) {
            const std::size_t take = std::min(token_size, length - offset);
            for (std::size_t j = 0; j < take; ++j) mask(global, j) = 1.0;
            ++global;
        }
    };

    for (const auto& entry : layout.entries) {
        std::size_t count = 1;
        for (std::size_t d : entry.shape) count *= d;
        if (scheme == TokenScheme::Dense) {
            mark_span(count);
        } else {
            const std::size_t rows = entry.shape.size() < 2 ? 1 : entry.shape[0];
            const std::size_t row_length = count / rows;
            for (std::size_t r = 0; r < rows; ++r) mark_span(row_length);
        }
    }
    return mask;
}

WeightCheckpoint detokenize(const TokenSequence& seq, const Layout& layout) {
    if (layout.id() != seq.layout_id) {
        throw LayoutMismatch("layout id does not match the token sequence");
    }
    if (token_count(layout, seq.scheme, seq.token_size()) != seq.count()) {
        throw LayoutMismatch("token count does not match the layout");
    }

    WeightCheckpoint ckpt;
    const std::size_t token_size = seq.token_size();
    std::size_t global = 0;

    for (const auto& entry : layout.entries) {
        LayerTensor layer;
        layer.name = entry.name;
        layer.shape = entry.shape;
        std::size_t count = 1;
        for (std::size_t d : entry.shape) count *= d;
        layer.data.resize(count);

        auto copy_span = [&](std::size_t dest, std::size_t length) {
            for (std::size_t offset = 0; offset < length; offset += token_size) {
                const std::size_t take = std::min(token_size, length - offset);
                for (std::size_t j = 0; j < take; ++j) {
                    layer.data[dest + offset + j] =
                        static_cast<float>(seq.tokens(global, j));
                }
                ++global;
            }
        };

        if (seq.scheme == TokenScheme::Dense) {
            copy_span(0, count);
        } else {
            const std::size_t rows = entry.shape.size() < 2 ? 1 : entry.shape[0];
            const std::size_t row_length = count / rows;
            for (std::size_t r = 0; r < rows; ++r) copy_span(r * row_length, row_length);
        }
        ckpt.layers.push_back(std::move(layer));
    }

    for (const auto& name : layout.non_trainable) {
        if (ckpt.find(name) != nullptr) ckpt.non_trainable_names.insert(name);
    }
    ckpt.validate();
    return ckpt;
}

double padding_fraction(const TokenSequence& seq) {
    if (seq.count() == 0) throw EmptySequence("padding_fraction needs at least one token");
    const double total = static_cast<double>(seq.count() * seq.token_size());
    return 1.0 - static_cast<double>(seq.signal_count()) / total;
}

void save_token_file(const TokenSequence& seq, const Layout& layout,
                     const std::filesystem::path& path) {
    if (layout.id() != seq.layout_id) {
        throw LayoutMismatch("layout id does not match the token sequence");
    }

    ordered_json header;
    header["scheme"] = to_string(seq.scheme);
    header["d_t"] = seq.token_size();
    header["layout_id"] = seq.layout_id;
    header["n"] = seq.count();
    ordered_json layers = ordered_json::array();
    for (const auto& entry : layout.entries) {
        layers.push_back(ordered_json::array({entry.name, entry.shape}));
    }
    header["layout"] = std::move(layers);
    header["non_trainable"] =
        std::vector<std::string>(layout.non_trainable.begin(), layout.non_trainable.end());
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open token file for writing: " + path.string());

    const std::uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    std::vector<float> tokens(seq.tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = static_cast<float>(seq.tokens.data()[i]);
    }
    out.write(reinterpret_cast<const char*>(tokens.data()),
              static_cast<std::streamsize>(tokens.size() * sizeof(float)));

    std::vector<std::uint8_t> packed((seq.mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < seq.mask.size(); ++i) {
        if (seq.mask.data()[i] != 0.0) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    out.write(reinterpret_cast<const char*>(packed.data()),
              static_cast<std::streamsize>(packed.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::pair<TokenSequence, Layout> load_token_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open token file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8) throw FormatError("token file too small for header length");

    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) throw FormatError("token header exceeds file size");

    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("token header is not valid JSON: ") + e.what());
    }

    TokenSequence seq;
    seq.scheme = token_scheme_from_string(header.at("scheme").get<std::string>());
    const std::size_t token_size = header.at("d_t").get<std::size_t>();
    const std::size_t count = header.at("n").get<std::size_t>();
    seq.layout_id = header.at("layout_id").get<std::string>();

    Layout layout;
    for (const auto& item : header.at("layout")) {
        Layout::Entry entry;
        entry.name = item.at(0).get<std::string>();
        for (const auto& d : item.at(1)) entry.shape.push_back(d.get<std::size_t>());
        layout.entries.push_back(std::move(entry));
    }
    if (header.contains("non_trainable")) {
        for (const auto& name : header["non_trainable"]) {
            layout.non_trainable.insert(name.get<std::string>());
        }
    }
    if (layout.id() != seq.layout_id) throw FormatError("token header layout id mismatch");

    const std::size_t elements = count * token_size;
    const std::size_t data_bytes = elements * sizeof(float);
    const std::size_t mask_bytes = (elements + 7) / 8;
    if (bytes.size() != 8 + header_len + data_bytes + mask_bytes) {
        throw FormatError("token file payload size mismatch");
    }

    seq.tokens = Matrix(count, token_size);
    const char* data_base = bytes.data() + 8 + header_len;
    for (std::size_t i = 0; i < elements; ++i) {
        float v;
        std::memcpy(&v, data_base + i * sizeof(float), sizeof(float));
        seq.tokens.data()[i] = static_cast<double>(v);
    }

    seq.mask = Matrix(count, token_size);
    const auto* packed = reinterpret_cast<const std::uint8_t*>(data_base + data_bytes);
    for (std::size_t i = 0; i < elements; ++i) {
        seq.mask.data()[i] = (packed[i / 8] >> (i % 8)) & 1u ? 1.0 : 0.0;
    }

    seq.positions.reserve(count);
    std::size_t global = 0;
    for (std::size_t l = 0; l < layout.entries.size(); ++l) {
        std::size_t layer_count = 1;
        for (std::size_t d : layout.entries[l].shape) layer_count *= d;
        std::size_t tokens_here;
        if (seq.scheme == TokenScheme::Dense) {
            tokens_here = (layer_count + token_size - 1) / token_size;
        } else {
            const std::size_t rows =
                layout.entries[l].shape.size() < 2 ? 1 : layout.entries[l].shape[0];
            const std::size_t row_length = layer_count / rows;
            tokens_here = rows * ((row_length + token_size - 1) / token_size);
        }
        for (std::size_t k = 0; k < tokens_here; ++k) {
            seq.positions.push_back({global, l, k});
            ++global;
        }
    }
    if (global != count) throw FormatError("token header count does not match layout");
    return {std::move(seq), std::move(layout)};
}

}  // namespace weightspace
