#include "weightspace/normalizer.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "weightspace/errors.hpp"

namespace weightspace {

NormStats masked_stats(const Matrix& tokens, const Matrix& mask) {
    if (!tokens.same_shape(mask)) throw ShapeError("masked_stats: token/mask shapes disagree");

    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (mask.data()[i] != 0.0) {
            sum += tokens.data()[i];
            ++count;
        }
    }
    if (count == 0) throw DegenerateBatch("masked_stats: batch has no signal elements");

    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (mask.data()[i] != 0.0) {
            const double d = tokens.data()[i] - mean;
            sq += d * d;
        }
    }
    return {mean, std::sqrt(sq / static_cast<double>(count)), count};
}

Matrix normalize_tokens(const Matrix& tokens, const Matrix& mask, const NormStats& stats) {
    if (!tokens.same_shape(mask)) {
        throw ShapeError("normalize_tokens: token/mask shapes disagree");
    }
    const double inv = 1.0 / std::max(stats.std_dev, kNormEpsilon);
    Matrix out(tokens.rows(), tokens.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out.data()[i] =
            mask.data()[i] != 0.0 ? (tokens.data()[i] - stats.mean) * inv : 0.0;
    }
    return out;
}

double masked_mse_loss(const Matrix& pred, const Matrix& target, const Matrix& mask) {
    if (!pred.same_shape(target) || !pred.same_shape(mask)) {
        throw ShapeError("masked_mse_loss: shapes disagree");
    }
    const NormStats stats = masked_stats(target, mask);
    const double inv = 1.0 / std::max(stats.std_dev, kNormEpsilon);

    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask.data()[i] != 0.0) {
            const double d = (pred.data()[i] - target.data()[i]) * inv;
            acc += d * d;
        }
    }
    return acc / static_cast<double>(stats.count);
}

LayerStats layerwise_fit(const std::vector<WeightCheckpoint>& zoo) {
    if (zoo.empty()) throw EmptyCollection("layerwise_fit: zoo is empty");

    const std::string reference = zoo.front().layout_id();
    for (const auto& ckpt : zoo) {
        if (ckpt.layout_id() != reference) {
            throw LayoutMismatch("layerwise_fit requires a layout-homogeneous zoo");
        }
    }

    LayerStats stats;
    for (std::size_t l = 0; l < zoo.front().layers.size(); ++l) {
        const std::string& name = zoo.front().layers[l].name;
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& ckpt : zoo) {
            for (float v : ckpt.layers[l].data) {
                sum += static_cast<double>(v);
                ++count;
            }
        }
        const double mean = sum / static_cast<double>(count);
        double sq = 0.0;
        for (const auto& ckpt : zoo) {
            for (float v : ckpt.layers[l].data) {
                const double d = static_cast<double>(v) - mean;
                sq += d * d;
            }
        }
        stats.by_layer[name] = {mean, std::sqrt(sq / static_cast<double>(count))};
    }
    return stats;
}

WeightCheckpoint layerwise_apply(const WeightCheckpoint& ckpt, const LayerStats& stats,
                                 bool inverse) {
    WeightCheckpoint out = ckpt;
    for (auto& layer : out.layers) {
        const auto it = stats.by_layer.find(layer.name);
        if (it == stats.by_layer.end()) {
            throw LayoutMismatch("no statistics for layer '" + layer.name + "'");
        }
        const double mu = it->second.first;
        const double sigma = std::max(it->second.second, kNormEpsilon);
        for (float& v : layer.data) {
            const double x = static_cast<double>(v);
            v = static_cast<float>(inverse ? x * sigma + mu : (x - mu) / sigma);
        }
    }
    return out;
}

std::string layer_stats_to_json(const LayerStats& stats) {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [name, ms] : stats.by_layer) {
        doc[name] = {ms.first, ms.second};
    }
    return doc.dump();
}

LayerStats layer_stats_from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("layer stats are not valid JSON: ") + e.what());
    }
    LayerStats stats;
    for (const auto& [name, ms] : doc.items()) {
        stats.by_layer[name] = {ms.at(0).get<double>(), ms.at(1).get<double>()};
    }
    return stats;
}

}  // namespace weightspace
