#include "weightspace/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "weightspace/autodiff.hpp"
#include "weightspace/errors.hpp"
#include "weightspace/normalizer.hpp"
#include "weightspace/posenc.hpp"

namespace weightspace {

namespace {

using ad::NodeId;
using ad::Tape;

constexpr std::size_t kMlpExpansion = 4;

// ---------------------------------------------------------------------------
// Parameter bookkeeping
// ---------------------------------------------------------------------------

template <typename P, typename F>
void visit_params(P& params, F&& fn) {
    auto linear = [&](auto& lin, const std::string& prefix) {
        fn(prefix + ".weight", lin.weight);
        fn(prefix + ".bias", lin.bias);
    };
    auto norm = [&](auto& n, const std::string& prefix) {
        fn(prefix + ".gain", n.gain);
        fn(prefix + ".bias", n.bias);
    };
    auto block = [&](auto& b, const std::string& prefix) {
        norm(b.norm1, prefix + ".norm1");
        linear(b.attn.query, prefix + ".attn.query");
        linear(b.attn.key, prefix + ".attn.key");
        linear(b.attn.value, prefix + ".attn.value");
        linear(b.attn.output, prefix + ".attn.output");
        norm(b.norm2, prefix + ".norm2");
        linear(b.mlp_in, prefix + ".mlp_in");
        linear(b.mlp_out, prefix + ".mlp_out");
    };

    linear(params.input_proj, "input_proj");
    for (std::size_t i = 0; i < params.encoder.size(); ++i) {
        block(params.encoder[i], "encoder." + std::to_string(i));
    }
    norm(params.encoder_norm, "encoder_norm");
    linear(params.to_latent, "to_latent");
    linear(params.from_latent, "from_latent");
    for (std::size_t i = 0; i < params.decoder.size(); ++i) {
        block(params.decoder[i], "decoder." + std::to_string(i));
    }
    norm(params.decoder_norm, "decoder_norm");
    linear(params.output_proj, "output_proj");
}

BackboneParams make_param_shapes(const BackboneConfig& cfg) {
    const std::size_t d = cfg.model_dim;
    auto linear = [](std::size_t in, std::size_t out) {
        return LinearParams{Matrix(in, out), Matrix(1, out)};
    };
    auto norm = [&](std::size_t dim) { return NormParams{Matrix(1, dim, 1.0), Matrix(1, dim)}; };
    auto block = [&]() {
        BlockParams b;
        b.norm1 = norm(d);
        b.attn = {linear(d, d), linear(d, d), linear(d, d), linear(d, d)};
        b.norm2 = norm(d);
        b.mlp_in = linear(d, kMlpExpansion * d);
        b.mlp_out = linear(kMlpExpansion * d, d);
        return b;
    };

    BackboneParams p;
    p.input_proj = linear(cfg.token_size, d);
    p.encoder.resize(cfg.num_layers);
    for (auto& b : p.encoder) b = block();
    p.encoder_norm = norm(d);
    p.to_latent = linear(d, cfg.latent_dim);
    p.from_latent = linear(cfg.latent_dim, d);
    p.decoder.resize(cfg.num_layers);
    for (auto& b : p.decoder) b = block();
    p.decoder_norm = norm(d);
    p.output_proj = linear(d, cfg.token_size);
    return p;
}

// Mirror of BackboneParams holding tape node ids in identical order.
struct ParamNodes {
    std::vector<NodeId> flat;
    BackboneParams const* source = nullptr;

    struct LinearIds {
        NodeId weight, bias;
    };
    struct NormIds {
        NodeId gain, bias;
    };
    struct AttnIds {
        LinearIds query, key, value, output;
    };
    struct BlockIds {
        NormIds norm1;
        AttnIds attn;
        NormIds norm2;
        LinearIds mlp_in, mlp_out;
    };

    LinearIds input_proj;
    std::vector<BlockIds> encoder;
    NormIds encoder_norm;
    LinearIds to_latent, from_latent;
    std::vector<BlockIds> decoder;
    NormIds decoder_norm;
    LinearIds output_proj;
};

ParamNodes make_param_nodes(Tape& tape, const BackboneParams& params) {
    ParamNodes ids;
    ids.source = &params;
    ids.encoder.resize(params.encoder.size());
    ids.decoder.resize(params.decoder.size());

    auto linear = [&](const LinearParams& lin) {
        ParamNodes::LinearIds out{tape.leaf(lin.weight), tape.leaf(lin.bias)};
        ids.flat.push_back(out.weight);
        ids.flat.push_back(out.bias);
        return out;
    };
    auto norm = [&](const NormParams& n) {
        ParamNodes::NormIds out{tape.leaf(n.gain), tape.leaf(n.bias)};
        ids.flat.push_back(out.gain);
        ids.flat.push_back(out.bias);
        return out;
    };
    auto block = [&](const BlockParams& b) {
        ParamNodes::BlockIds out;
        out.norm1 = norm(b.norm1);
        out.attn = {linear(b.attn.query), linear(b.attn.key), linear(b.attn.value),
                    linear(b.attn.output)};
        out.norm2 = norm(b.norm2);
        out.mlp_in = linear(b.mlp_in);
        out.mlp_out = linear(b.mlp_out);
        return out;
    };

    ids.input_proj = linear(params.input_proj);
    for (std::size_t i = 0; i < params.encoder.size(); ++i) {
        ids.encoder[i] = block(params.encoder[i]);
    }
    ids.encoder_norm = norm(params.encoder_norm);
    ids.to_latent = linear(params.to_latent);
    ids.from_latent = linear(params.from_latent);
    for (std::size_t i = 0; i < params.decoder.size(); ++i) {
        ids.decoder[i] = block(params.decoder[i]);
    }
    ids.decoder_norm = norm(params.decoder_norm);
    ids.output_proj = linear(params.output_proj);
    return ids;
}

// The flat id order above matches visit_params order; keep both in sync.

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

NodeId linear_node(Tape& t, NodeId x, const ParamNodes::LinearIds& p) {
    return t.add_row_broadcast(t.matmul(x, p.weight), p.bias);
}

NodeId attention_node(Tape& t, NodeId x, const ParamNodes::AttnIds& p, std::size_t heads) {
    const NodeId q = linear_node(t, x, p.query);
    const NodeId k = linear_node(t, x, p.key);
    const NodeId v = linear_node(t, x, p.value);
    const std::size_t dim = t.value(q).cols();
    const std::size_t head_dim = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<NodeId> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t begin = h * head_dim;
        const std::size_t end = begin + head_dim;
        const NodeId qh = t.slice_cols(q, begin, end);
        const NodeId kh = t.slice_cols(k, begin, end);
        const NodeId vh = t.slice_cols(v, begin, end);
        const NodeId attn = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), scale));
        outputs.push_back(t.matmul(attn, vh));
    }
    return linear_node(t, t.concat_cols(outputs), p.output);
}

NodeId block_node(Tape& t, NodeId x, const ParamNodes::BlockIds& p, std::size_t heads) {
    const NodeId attn_in = t.layer_norm(x, p.norm1.gain, p.norm1.bias);
    const NodeId h = t.add(x, attention_node(t, attn_in, p.attn, heads));
    const NodeId mlp_in = t.layer_norm(h, p.norm2.gain, p.norm2.bias);
    const NodeId mlp = linear_node(t, t.gelu(linear_node(t, mlp_in, p.mlp_in)), p.mlp_out);
    return t.add(h, mlp);
}

NodeId encode_graph(Tape& t, const ParamNodes& ids, const BackboneConfig& cfg,
                    const Matrix& masked_tokens, const Matrix& pe) {
    NodeId h = t.add_const(linear_node(t, t.leaf(masked_tokens), ids.input_proj), pe);
    for (const auto& block : ids.encoder) h = block_node(t, h, block, cfg.num_heads);
    h = t.layer_norm(h, ids.encoder_norm.gain, ids.encoder_norm.bias);
    return linear_node(t, h, ids.to_latent);
}

NodeId decode_graph(Tape& t, const ParamNodes& ids, const BackboneConfig& cfg,
                    NodeId latents, const Matrix& pe) {
    NodeId h = t.add_const(linear_node(t, latents, ids.from_latent), pe);
    for (const auto& block : ids.decoder) h = block_node(t, h, block, cfg.num_heads);
    h = t.layer_norm(h, ids.decoder_norm.gain, ids.decoder_norm.bias);
    return linear_node(t, h, ids.output_proj);
}

Matrix apply_mask(const Matrix& tokens, const Matrix& mask) {
    Matrix out = tokens;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask.data()[i] == 0.0) out.data()[i] = 0.0;
    }
    return out;
}

Matrix position_encoding(const BackboneConfig& cfg, const std::vector<TokenPosition>& pos) {
    return encode_batch(pos, PositionEncodingConfig{cfg.model_dim, cfg.posenc_base});
}

// ---------------------------------------------------------------------------
// Step loss (shared by train and gradient_check)
// ---------------------------------------------------------------------------

struct StepItem {
    const Window* target;
    Matrix view_a;
    Matrix view_b;
};

struct StepLoss {
    NodeId total;
    double reconstruction = 0.0;
    double contrastive = 0.0;
};

NormStats batch_stats(const std::vector<StepItem>& batch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& item : batch) {
        const Matrix& t = item.target->tokens;
        const Matrix& m = item.target->mask;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (m.data()[i] != 0.0) {
                sum += t.data()[i];
                ++count;
            }
        }
    }
    if (count == 0) throw DegenerateBatch("training batch has no signal elements");
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& item : batch) {
        const Matrix& t = item.target->tokens;
        const Matrix& m = item.target->mask;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (m.data()[i] != 0.0) {
                const double d = t.data()[i] - mean;
                sq += d * d;
            }
        }
    }
    return {mean, std::sqrt(sq / static_cast<double>(count)), count};
}

StepLoss build_step_loss(Tape& tape, const ParamNodes& ids, const BackboneConfig& cfg,
                         const std::vector<StepItem>& batch, LossKind kind) {
    const bool masked = cfg.loss_norm == LossNorm::Masked;

    NormStats stats{0.0, 1.0, 0};
    double inv_std = 1.0;
    if (masked) {
        stats = batch_stats(batch);
        inv_std = 1.0 / std::max(stats.std_dev, kNormEpsilon);
    }

    std::size_t denom = 0;
    for (const auto& item : batch) {
        if (masked) {
            const Matrix& m = item.target->mask;
            for (std::size_t i = 0; i < m.size(); ++i) {
                if (m.data()[i] != 0.0) ++denom;
            }
        } else {
            denom += item.target->tokens.size();
        }
    }

    std::vector<NodeId> sq_errors;
    std::vector<NodeId> pooled_a, pooled_b;
    for (const auto& item : batch) {
        const Window& w = *item.target;
        const Matrix pe = position_encoding(cfg, w.positions);
        const Matrix loss_mask =
            masked ? w.mask : Matrix(w.mask.rows(), w.mask.cols(), 1.0);
        const Matrix target_norm =
            masked ? normalize_tokens(w.tokens, w.mask, stats) : w.tokens;

        for (const Matrix* view : {&item.view_a, &item.view_b}) {
            const NodeId latents =
                encode_graph(tape, ids, cfg, apply_mask(*view, w.mask), pe);
            if (kind != LossKind::Reconstruction) {
                (view == &item.view_a ? pooled_a : pooled_b)
                    .push_back(tape.mean_rows(latents));
            }
            if (kind != LossKind::Contrastive) {
                const NodeId pred = decode_graph(tape, ids, cfg, latents, pe);
                sq_errors.push_back(tape.masked_scaled_sq_error(
                    pred, target_norm, loss_mask, stats.mean, inv_std));
            }
        }
    }

    std::vector<NodeId> terms;
    StepLoss out{};
    if (!sq_errors.empty()) {
        const NodeId recon = tape.scale(tape.add_scalars(sq_errors),
                                        1.0 / (2.0 * static_cast<double>(denom)));
        out.reconstruction = tape.value(recon)(0, 0);
        terms.push_back(recon);
    }
    if (kind != LossKind::Reconstruction && batch.size() >= 2) {
        const NodeId za = tape.concat_rows(pooled_a);
        const NodeId zb = tape.concat_rows(pooled_b);
        const NodeId normed = tape.l2_normalize_rows(tape.concat_rows({za, zb}));
        const NodeId sims = tape.matmul_nt(normed, normed);
        const NodeId contrast =
            tape.nt_xent_from_logits(tape.scale(sims, 1.0 / cfg.temperature));
        out.contrastive = tape.value(contrast)(0, 0);
        const double weight = kind == LossKind::Contrastive ? 1.0 : cfg.contrastive_weight;
        terms.push_back(tape.scale(contrast, weight));
    }
    if (terms.empty()) throw BatchTooSmall("contrastive loss needs at least two windows");

    out.total = terms.size() == 1 ? terms.front() : tape.add_scalars(terms);
    return out;
}

// One-cycle schedule: cosine warmup to the peak over the first 30% of steps,
// cosine anneal down to peak/25/1e4 afterwards.
double one_cycle_lr(std::size_t step, std::size_t total_steps, double max_lr) {
    constexpr double kPctStart = 0.3;
    constexpr double kDivFactor = 25.0;
    constexpr double kFinalDivFactor = 1e4;
    const double initial = max_lr / kDivFactor;
    const double floor = initial / kFinalDivFactor;

    const std::size_t warmup = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(kPctStart * static_cast<double>(total_steps))));
    if (step < warmup) {
        const double t = static_cast<double>(step) / static_cast<double>(warmup);
        return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
    }
    const std::size_t tail = std::max<std::size_t>(1, total_steps - warmup);
    const double t = static_cast<double>(step - warmup) / static_cast<double>(tail);
    return floor + (max_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void init(const std::vector<std::pair<std::string, Matrix*>>& params) {
        for (const auto& [name, mat] : params) {
            m.push_back(Matrix::zeros_like(*mat));
            v.push_back(Matrix::zeros_like(*mat));
        }
    }

    void step(const std::vector<std::pair<std::string, Matrix*>>& params,
              const std::vector<const Matrix*>& grads, double lr, double weight_decay) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Matrix& param = *params[p].second;
            const Matrix& g = *grads[p];
            for (std::size_t i = 0; i < param.size(); ++i) {
                double& mi = m[p].data()[i];
                double& vi = v[p].data()[i];
                const double gi = g.data()[i];
                mi = beta1 * mi + (1.0 - beta1) * gi;
                vi = beta2 * vi + (1.0 - beta2) * gi * gi;
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                param.data()[i] -=
                    lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * param.data()[i]);
            }
        }
    }
};

std::vector<StepItem> make_step_items(const std::vector<Window>& targets,
                                      const BackboneConfig& cfg, Rng& rng) {
    std::vector<StepItem> batch;
    batch.reserve(targets.size());
    for (const auto& w : targets) {
        auto [a, b] = augment(w, cfg, rng);
        batch.push_back({&w, std::move(a.tokens), std::move(b.tokens)});
    }
    return batch;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string to_string(LossNorm norm) { return norm == LossNorm::Masked ? "masked" : "none"; }

LossNorm loss_norm_from_string(const std::string& name) {
    if (name == "masked") return LossNorm::Masked;
    if (name == "none") return LossNorm::None;
    throw ConfigError("unknown loss normalization: " + name);
}

void BackboneConfig::validate() const {
    if (token_size == 0) throw ConfigError("token_size must be positive");
    if (model_dim == 0 || model_dim % 6 != 0) {
        throw ConfigError("model_dim must be a positive multiple of 6");
    }
    if (num_heads == 0 || model_dim % num_heads != 0) {
        throw ConfigError("model_dim must be divisible by num_heads");
    }
    if (latent_dim == 0 || latent_dim > model_dim) {
        throw ConfigError("latent_dim must be in [1, model_dim]");
    }
    if (num_layers == 0) throw ConfigError("num_layers must be positive");
    if (window_size == 0) throw ConfigError("window_size must be positive");
    if (subsample_size == 0 || subsample_size > window_size) {
        throw ConfigError("subsample_size must be in [1, window_size]");
    }
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (contrastive_weight < 0.0) throw ConfigError("contrastive_weight must be non-negative");
    if (aug_mask_prob < 0.0 || aug_mask_prob >= 1.0) {
        throw ConfigError("aug_mask_prob must be in [0, 1)");
    }
    if (aug_noise_sigma < 0.0) throw ConfigError("aug_noise_sigma must be non-negative");
    if (posenc_base <= 0.0) throw ConfigError("posenc_base must be positive");
}

std::string BackboneConfig::to_json() const {
    nlohmann::json doc;
    doc["token_size"] = token_size;
    doc["model_dim"] = model_dim;
    doc["latent_dim"] = latent_dim;
    doc["num_layers"] = num_layers;
    doc["num_heads"] = num_heads;
    doc["window_size"] = window_size;
    doc["subsample_size"] = subsample_size;
    doc["learning_rate"] = learning_rate;
    doc["weight_decay"] = weight_decay;
    doc["batch_size"] = batch_size;
    doc["epochs"] = epochs;
    doc["temperature"] = temperature;
    doc["contrastive_weight"] = contrastive_weight;
    doc["aug_mask_prob"] = aug_mask_prob;
    doc["aug_noise_sigma"] = aug_noise_sigma;
    doc["loss_norm"] = to_string(loss_norm);
    doc["scheme"] = weightspace::to_string(scheme);
    doc["posenc_base"] = posenc_base;
    doc["seed"] = seed;
    return doc.dump(2);
}

BackboneConfig BackboneConfig::from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("backbone config is not valid JSON: ") + e.what());
    }
    BackboneConfig cfg;
    auto get = [&](const char* key, auto& value) {
        if (doc.contains(key)) value = doc[key].template get<std::decay_t<decltype(value)>>();
    };
    get("token_size", cfg.token_size);
    get("model_dim", cfg.model_dim);
    get("latent_dim", cfg.latent_dim);
    get("num_layers", cfg.num_layers);
    get("num_heads", cfg.num_heads);
    get("window_size", cfg.window_size);
    get("subsample_size", cfg.subsample_size);
    get("learning_rate", cfg.learning_rate);
    get("weight_decay", cfg.weight_decay);
    get("batch_size", cfg.batch_size);
    get("epochs", cfg.epochs);
    get("temperature", cfg.temperature);
    get("contrastive_weight", cfg.contrastive_weight);
    get("aug_mask_prob", cfg.aug_mask_prob);
    get("aug_noise_sigma", cfg.aug_noise_sigma);
    get("posenc_base", cfg.posenc_base);
    get("seed", cfg.seed);
    if (doc.contains("loss_norm")) {
        cfg.loss_norm = loss_norm_from_string(doc["loss_norm"].get<std::string>());
    }
    if (doc.contains("scheme")) {
        cfg.scheme = token_scheme_from_string(doc["scheme"].get<std::string>());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Matrix*>> parameter_list(BackboneParams& params) {
    std::vector<std::pair<std::string, Matrix*>> out;
    visit_params(params, [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> parameter_list(const BackboneParams& params) {
    std::vector<std::pair<std::string, const Matrix*>> out;
    visit_params(params,
                 [&](const std::string& name, const Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

std::size_t parameter_count(const BackboneParams& params) {
    std::size_t n = 0;
    visit_params(params, [&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

Backbone init_backbone(const BackboneConfig& cfg) {
    cfg.validate();
    Backbone b;
    b.config = cfg;
    b.params = make_param_shapes(cfg);

    Rng rng(cfg.seed);
    visit_params(b.params, [&](const std::string& name, Matrix& m) {
        const bool is_weight = name.ends_with(".weight");
        if (!is_weight) return;  // biases stay zero, norm gains stay one
        const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
    });
    return b;
}

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

Matrix encode(const Backbone& b, const Matrix& tokens, const Matrix& mask,
              const std::vector<TokenPosition>& positions) {
    if (tokens.rows() == 0) throw ShapeError("encode: empty input");
    if (tokens.cols() != b.config.token_size) {
        throw ShapeError("encode: token width does not match the backbone");
    }
    if (!tokens.same_shape(mask) || positions.size() != tokens.rows()) {
        throw ShapeError("encode: tokens/mask/positions are inconsistent");
    }
    Tape tape;
    const ParamNodes ids = make_param_nodes(tape, b.params);
    const NodeId z = encode_graph(tape, ids, b.config, apply_mask(tokens, mask),
                                  position_encoding(b.config, positions));
    return tape.value(z);
}

Matrix decode(const Backbone& b, const Matrix& latents,
              const std::vector<TokenPosition>& positions) {
    if (latents.rows() == 0) throw ShapeError("decode: empty input");
    if (latents.cols() != b.config.latent_dim) {
        throw ShapeError("decode: latent width does not match the backbone");
    }
    if (positions.size() != latents.rows()) {
        throw ShapeError("decode: latents/positions are inconsistent");
    }
    Tape tape;
    const ParamNodes ids = make_param_nodes(tape, b.params);
    const NodeId out = decode_graph(tape, ids, b.config, tape.leaf(latents),
                                    position_encoding(b.config, positions));
    return tape.value(out);
}

// ---------------------------------------------------------------------------
// Windows and augmentation
// ---------------------------------------------------------------------------

Window sample_window(const TokenSequence& seq, std::size_t window_size,
                     std::size_t subsample_size, Rng& rng) {
    if (window_size == 0) throw ConfigError("window size must be positive");
    const std::size_t n = seq.count();
    if (n == 0) throw EmptySequence("cannot sample a window from an empty sequence");

    const std::size_t length = std::min(window_size, n);
    const std::size_t start = rng.uniform_index(n - length + 1);

    std::vector<std::size_t> indices(length);
    for (std::size_t i = 0; i < length; ++i) indices[i] = start + i;
    if (subsample_size > 0 && subsample_size < length) {
        // Partial Fisher-Yates, then restore source order.
        for (std::size_t i = 0; i < subsample_size; ++i) {
            const std::size_t j = i + rng.uniform_index(length - i);
            std::swap(indices[i], indices[j]);
        }
        indices.resize(subsample_size);
        std::sort(indices.begin(), indices.end());
    }

    Window w;
    w.start_index = start;
    w.tokens = Matrix(indices.size(), seq.token_size());
    w.mask = Matrix(indices.size(), seq.token_size());
    w.positions.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        for (std::size_t j = 0; j < seq.token_size(); ++j) {
            w.tokens(i, j) = seq.tokens(indices[i], j);
            w.mask(i, j) = seq.mask(indices[i], j);
        }
        w.positions.push_back(seq.positions[indices[i]]);
    }
    return w;
}

std::pair<Window, Window> augment(const Window& w, const BackboneConfig& cfg, Rng& rng) {
    if (cfg.aug_mask_prob >= 1.0) {
        throw ConfigError("aug_mask_prob of 1 would erase every signal element");
    }
    auto make_view = [&]() {
        Window view = w;
        for (std::size_t i = 0; i < view.tokens.size(); ++i) {
            // Draw unconditionally so the stream is independent of the mask.
            const double noise = rng.normal();
            const double drop = rng.uniform();
            if (view.mask.data()[i] != 0.0) {
                view.tokens.data()[i] += cfg.aug_noise_sigma * noise;
                if (drop < cfg.aug_mask_prob) view.tokens.data()[i] = 0.0;
            }
        }
        return view;
    };
    Window a = make_view();
    Window b = make_view();
    return {std::move(a), std::move(b)};
}

double contrastive_loss(const Matrix& z_a, const Matrix& z_b, double temperature) {
    if (!z_a.same_shape(z_b)) throw ShapeError("contrastive_loss: shapes disagree");
    if (z_a.rows() < 2) throw BatchTooSmall("contrastive_loss needs at least two pairs");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");

    Tape tape;
    const NodeId z = tape.concat_rows({tape.leaf(z_a), tape.leaf(z_b)});
    const NodeId n = tape.l2_normalize_rows(z);
    const NodeId logits = tape.scale(tape.matmul_nt(n, n), 1.0 / temperature);
    return tape.value(tape.nt_xent_from_logits(logits))(0, 0);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::pair<Backbone, TrainingLog> train(const std::vector<TokenSequence>& data,
                                       const BackboneConfig& cfg,
                                       const std::vector<std::string>* model_ids) {
    cfg.validate();
    if (data.empty()) throw ConfigError("train: no token sequences supplied");
    for (const auto& seq : data) {
        if (seq.token_size() != cfg.token_size) {
            throw ShapeError("train: sequence token width does not match the config");
        }
        if (seq.count() == 0) throw EmptySequence("train: empty token sequence");
    }

    Backbone backbone = init_backbone(cfg);
    auto params = parameter_list(backbone.params);
    AdamWState optimizer;
    optimizer.init(params);

    Rng rng = Rng(cfg.seed).split(0x7261696e);  // training stream

    const std::size_t num_models = data.size();
    const std::size_t steps_per_epoch = (num_models + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;

    TrainingLog log;
    std::size_t step = 0;
    std::vector<std::size_t> order(num_models);
    for (std::size_t i = 0; i < num_models; ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_recon = 0.0, epoch_contrast = 0.0, epoch_total = 0.0, last_lr = 0.0;
        std::size_t epoch_steps = 0;

        for (std::size_t begin = 0; begin < num_models; begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, num_models);
            std::vector<Window> targets;
            targets.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t model = order[i];
                Window w = sample_window(data[model], cfg.window_size, cfg.subsample_size, rng);
                w.source_model_id = model_ids != nullptr && model < model_ids->size()
                                        ? (*model_ids)[model]
                                        : "model" + std::to_string(model);
                targets.push_back(std::move(w));
            }
            const std::vector<StepItem> batch = make_step_items(targets, cfg, rng);

            Tape tape;
            const ParamNodes ids = make_param_nodes(tape, backbone.params);
            const StepLoss loss = build_step_loss(tape, ids, cfg, batch, LossKind::Combined);
            const double total = tape.value(loss.total)(0, 0);
            if (!std::isfinite(total)) {
                throw DivergenceError("training loss is not finite", step);
            }
            tape.backward(loss.total);

            std::vector<const Matrix*> grads;
            grads.reserve(ids.flat.size());
            for (NodeId id : ids.flat) grads.push_back(&tape.grad(id));

            const double lr = one_cycle_lr(step, total_steps, cfg.learning_rate);
            optimizer.step(params, grads, lr, cfg.weight_decay);

            epoch_recon += loss.reconstruction;
            epoch_contrast += loss.contrastive;
            epoch_total += total;
            last_lr = lr;
            ++epoch_steps;
            ++step;
        }

        const double inv = 1.0 / static_cast<double>(epoch_steps);
        log.epochs.push_back({epoch, epoch_recon * inv, epoch_contrast * inv,
                              epoch_total * inv, last_lr});
    }
    log.steps = step;
    return {std::move(backbone), std::move(log)};
}

// ---------------------------------------------------------------------------
// Reconstruction metrics
// ---------------------------------------------------------------------------

Matrix reconstruct_tokens(const Backbone& b, const TokenSequence& seq) {
    if (seq.count() == 0) throw EmptySequence("reconstruct_tokens: empty sequence");
    if (seq.token_size() != b.config.token_size) {
        throw ShapeError("reconstruct_tokens: token width does not match the backbone");
    }

    Matrix out(seq.count(), seq.token_size());
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

        const Matrix latents = encode(b, tokens, mask, positions);
        const Matrix pred = decode(b, latents, positions);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < seq.token_size(); ++j) {
                out(begin + i, j) = pred(i, j);
            }
        }
    }
    return out;
}

double explained_variance(const std::vector<TokenSequence>& data,
                          const std::vector<Matrix>& predictions) {
    if (data.empty()) throw DegenerateData("explained_variance: no data");
    if (data.size() != predictions.size()) {
        throw ShapeError("explained_variance: prediction count mismatch");
    }

    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& seq : data) {
        for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
            if (seq.mask.data()[i] != 0.0) {
                sum += seq.tokens.data()[i];
                ++count;
            }
        }
    }
    if (count == 0) throw DegenerateData("explained_variance: no signal elements");
    const double mean = sum / static_cast<double>(count);

    double residual = 0.0, variance = 0.0;
    for (std::size_t s = 0; s < data.size(); ++s) {
        const TokenSequence& seq = data[s];
        const Matrix& pred = predictions[s];
        if (!pred.same_shape(seq.tokens)) {
            throw ShapeError("explained_variance: prediction shape mismatch");
        }
        for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
            if (seq.mask.data()[i] == 0.0) continue;
            const double t = seq.tokens.data()[i];
            const double d = t - pred.data()[i];
            residual += d * d;
            variance += (t - mean) * (t - mean);
        }
    }
    if (variance == 0.0) throw DegenerateData("explained_variance: zero-variance data");
    return 1.0 - residual / variance;
}

double reconstruction_r2(const Backbone& b, const std::vector<TokenSequence>& data) {
    std::vector<Matrix> predictions;
    predictions.reserve(data.size());
    for (const auto& seq : data) predictions.push_back(reconstruct_tokens(b, seq));
    return explained_variance(data, predictions);
}

StepLossValue step_loss(const Backbone& b, const std::vector<Window>& windows,
                        LossKind kind) {
    if (windows.empty()) throw ConfigError("step_loss: no windows");
    Rng rng = Rng(b.config.seed).split(0x67636b);
    const std::vector<StepItem> batch = make_step_items(windows, b.config, rng);

    Tape tape;
    const ParamNodes ids = make_param_nodes(tape, b.params);
    const StepLoss loss = build_step_loss(tape, ids, b.config, batch, kind);
    return {loss.reconstruction, loss.contrastive, tape.value(loss.total)(0, 0)};
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double gradient_check(const Backbone& b, const std::vector<Window>& windows, double epsilon,
                      LossKind kind) {
    if (windows.empty()) throw ConfigError("gradient_check: no windows");
    if (epsilon <= 0.0) throw ConfigError("gradient_check: epsilon must be positive");
    if (kind != LossKind::Reconstruction && windows.size() < 2) {
        throw BatchTooSmall("gradient_check: contrastive terms need at least two windows");
    }

    // Fixed augmented views shared by the analytic and numeric evaluations.
    Rng rng = Rng(b.config.seed).split(0x67636b);
    const std::vector<StepItem> batch = make_step_items(windows, b.config, rng);

    Backbone probe = b;
    auto params = parameter_list(probe.params);

    auto loss_value = [&]() {
        Tape tape;
        const ParamNodes ids = make_param_nodes(tape, probe.params);
        return tape.value(build_step_loss(tape, ids, probe.config, batch, kind).total)(0, 0);
    };

    // Analytic pass.
    std::vector<Matrix> analytic;
    {
        Tape tape;
        const ParamNodes ids = make_param_nodes(tape, probe.params);
        const StepLoss loss = build_step_loss(tape, ids, probe.config, batch, kind);
        tape.backward(loss.total);
        for (NodeId id : ids.flat) analytic.push_back(tape.grad(id));
    }

    double max_err = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix& mat = *params[p].second;
        for (std::size_t i = 0; i < mat.size(); ++i) {
            const double original = mat.data()[i];
            mat.data()[i] = original + epsilon;
            const double up = loss_value();
            mat.data()[i] = original - epsilon;
            const double down = loss_value();
            mat.data()[i] = original;

            const double numeric = (up - down) / (2.0 * epsilon);
            const double exact = analytic[p].data()[i];
            const double denom = std::max({std::abs(numeric), std::abs(exact), 1e-3});
            max_err = std::max(max_err, std::abs(numeric - exact) / denom);
        }
    }
    return max_err;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_backbone(const Backbone& b, const std::filesystem::path& path) {
    WeightCheckpoint ckpt;
    visit_params(b.params, [&](const std::string& name, const Matrix& m) {
        LayerTensor layer;
        layer.name = name;
        layer.shape = {m.rows(), m.cols()};
        layer.data.resize(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
            layer.data[i] = static_cast<float>(m.data()[i]);
        }
        ckpt.layers.push_back(std::move(layer));
    });
    save_checkpoint(ckpt, path);

    std::ofstream cfg(path.string() + ".json", std::ios::trunc);
    if (!cfg) throw IoError("cannot write backbone config sidecar");
    cfg << b.config.to_json() << '\n';
}

Backbone load_backbone(const std::filesystem::path& path) {
    std::ifstream cfg_in(path.string() + ".json");
    if (!cfg_in) throw IoError("missing backbone config sidecar: " + path.string() + ".json");
    std::string cfg_text((std::istreambuf_iterator<char>(cfg_in)),
                         std::istreambuf_iterator<char>());

    Backbone b;
    b.config = BackboneConfig::from_json(cfg_text);
    b.params = make_param_shapes(b.config);

    const WeightCheckpoint ckpt = load_checkpoint(path);
    visit_params(b.params, [&](const std::string& name, Matrix& m) {
        const LayerTensor* layer = ckpt.find(name);
        if (layer == nullptr) throw LayoutMismatch("backbone file is missing '" + name + "'");
        if (layer->data.size() != m.size()) {
            throw LayoutMismatch("backbone parameter '" + name + "' has the wrong size");
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<double>(layer->data[i]);
        }
    });
    return b;
}

}  // namespace weightspace
