#include "weightspace/posenc.hpp"

#include <cmath>

#include "weightspace/errors.hpp"

namespace weightspace {

namespace {

void check_config(const PositionEncodingConfig& cfg) {
    if (cfg.model_dim == 0 || cfg.model_dim % 6 != 0) {
        throw ConfigError("position encoding width must be a positive multiple of 6");
    }
    if (cfg.base <= 0.0) throw ConfigError("position encoding base must be positive");
}

void encode_coordinate(double coordinate, double base, std::size_t block_dim, double* out) {
    for (std::size_t j = 0; j * 2 < block_dim; ++j) {
        const double freq =
            std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(block_dim));
        const double angle = coordinate * freq;
        out[2 * j] = std::sin(angle);
        out[2 * j + 1] = std::cos(angle);
    }
}

}  // namespace

std::vector<double> encode_position(const TokenPosition& pos,
                                    const PositionEncodingConfig& cfg) {
    check_config(cfg);
    const std::size_t block = cfg.model_dim / 3;
    std::vector<double> out(cfg.model_dim);
    encode_coordinate(static_cast<double>(pos.global), cfg.base, block, out.data());
    encode_coordinate(static_cast<double>(pos.layer), cfg.base, block, out.data() + block);
    encode_coordinate(static_cast<double>(pos.in_layer), cfg.base, block,
                      out.data() + 2 * block);
    return out;
}

Matrix encode_batch(const std::vector<TokenPosition>& positions,
                    const PositionEncodingConfig& cfg) {
    check_config(cfg);
    Matrix out(positions.size(), cfg.model_dim);
    const std::size_t block = cfg.model_dim / 3;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        double* row = out.row(i);
        encode_coordinate(static_cast<double>(positions[i].global), cfg.base, block, row);
        encode_coordinate(static_cast<double>(positions[i].layer), cfg.base, block,
                          row + block);
        encode_coordinate(static_cast<double>(positions[i].in_layer), cfg.base, block,
                          row + 2 * block);
    }
    return out;
}

}  // namespace weightspace
