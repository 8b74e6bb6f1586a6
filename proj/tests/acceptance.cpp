// Acceptance suite: one pass/fail line per criterion, non-zero exit when any
// criterion fails. Fixtures are generated on the fly under a scratch
// directory; everything is seeded.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "weightspace/backbone.hpp"
#include "weightspace/checkpoint.hpp"
#include "weightspace/cli.hpp"
#include "weightspace/errors.hpp"
#include "weightspace/normalizer.hpp"
#include "weightspace/rng.hpp"
#include "weightspace/sampler.hpp"
#include "weightspace/tokenizer.hpp"
#include "weightspace/zoo.hpp"

using namespace weightspace;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

double elapsed_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string format(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fs::path scratch_root() {
    static fs::path root = [] {
        fs::path p = fs::temp_directory_path() /
                     ("weightspace_acceptance_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return root;
}

// Copy-task zoo: one tiny MLP architecture trained against ten blob datasets
// (three of them share one seed, so those members see identical data),
// checkpoints at epochs 2/4/6 -> 30 layout-identical models.
struct CopyTaskZoo {
    fs::path dir;
    std::vector<ZooRecord> records;
    ArchitectureSpec arch;
    SyntheticDataset anchor_dataset;
    std::vector<WeightCheckpoint> checkpoints;
};

const CopyTaskZoo& copy_task_zoo() {
    static CopyTaskZoo zoo = [] {
        CopyTaskZoo out;
        out.dir = scratch_root() / "copy_zoo";
        out.arch = {"copy_mlp", ArchKind::Mlp, {6}, 4, 2, false};

        ZooConfig cfg;
        cfg.seed = 2024;
        cfg.specs = {out.arch};
        for (int i = 0; i < 10; ++i) {
            // c0..c2 share a seed: three independent trainings on one dataset.
            const std::uint64_t seed = i < 3 ? 555 : 700 + static_cast<std::uint64_t>(i);
            cfg.datasets.push_back({"c" + std::to_string(i), DatasetKind::GaussianBlobs, 2,
                                    4, 128, 64, seed});
        }
        cfg.epochs = 6;
        cfg.checkpoints_at = {2, 4, 6};
        cfg.learning_rate = 0.05;

        out.records = generate_zoo(cfg, out.dir);
        out.anchor_dataset = cfg.datasets[0];
        for (const auto& r : out.records) {
            out.checkpoints.push_back(load_checkpoint(out.dir / r.checkpoint));
        }
        return out;
    }();
    return zoo;
}

std::vector<TokenSequence> tokenize_zoo(const CopyTaskZoo& zoo, TokenScheme scheme,
                                        std::size_t token_size) {
    std::vector<TokenSequence> out;
    for (const auto& ckpt : zoo.checkpoints) {
        out.push_back(scheme == TokenScheme::Dense ? tokenize_dense(ckpt, token_size)
                                                   : tokenize_sparse(ckpt, token_size));
    }
    return out;
}

BackboneConfig copy_task_config() {
    BackboneConfig cfg;
    cfg.token_size = 8;
    cfg.model_dim = 48;
    cfg.latent_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.window_size = 16;
    cfg.subsample_size = 16;
    cfg.batch_size = 5;
    cfg.epochs = 200;
    cfg.learning_rate = 3e-3;
    cfg.weight_decay = 1e-4;
    cfg.temperature = 0.5;
    cfg.contrastive_weight = 0.1;
    cfg.aug_mask_prob = 0.05;
    cfg.aug_noise_sigma = 0.01;
    cfg.scheme = TokenScheme::Dense;
    cfg.seed = 31;
    return cfg;
}

// Trained copy-task backbone plus its log, shared by criteria 6 and 8.
struct TrainedCopyTask {
    Backbone backbone;
    TrainingLog log;
    std::vector<TokenSequence> train_data;
    std::vector<TokenSequence> heldout_data;
};

const TrainedCopyTask& trained_copy_task() {
    static TrainedCopyTask fixture = [] {
        const CopyTaskZoo& zoo = copy_task_zoo();
        const std::vector<TokenSequence> all = tokenize_zoo(zoo, TokenScheme::Dense, 8);

        // Train on the epoch-2/epoch-6 checkpoints of every run (20 models);
        // hold out unseen mid-trajectory checkpoints of four runs.
        TrainedCopyTask out;
        for (std::size_t i = 0; i < zoo.records.size(); ++i) {
            const auto& r = zoo.records[i];
            if (r.epoch != 4) {
                out.train_data.push_back(all[i]);
            } else if (r.dataset_id == "c3" || r.dataset_id == "c4" ||
                       r.dataset_id == "c5" || r.dataset_id == "c6") {
                out.heldout_data.push_back(all[i]);
            }
        }
        auto [backbone, log] = train(out.train_data, copy_task_config());
        out.backbone = std::move(backbone);
        out.log = std::move(log);
        return out;
    }();
    return fixture;
}

double ks_distance(std::vector<float> a, std::vector<float> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j]) {
            ++i;
        } else {
            ++j;
        }
        d = std::max(d, std::abs(static_cast<double>(i) / na -
                                 static_cast<double>(j) / nb));
    }
    return d;
}

double ntxent_oracle(const Matrix& za, const Matrix& zb, double tau) {
    const std::size_t half = za.rows();
    const std::size_t n = 2 * half;
    Matrix z(n, za.cols());
    for (std::size_t i = 0; i < half; ++i) {
        for (std::size_t j = 0; j < za.cols(); ++j) {
            z(i, j) = za(i, j);
            z(half + i, j) = zb(i, j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) norm += z(i, j) * z(i, j);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) /= norm;
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pair = (i + half) % n;
        double denom = 0.0, pos = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            double sim = 0.0;
            for (std::size_t j = 0; j < z.cols(); ++j) sim += z(i, j) * z(k, j);
            const double e = std::exp(sim / tau);
            denom += e;
            if (k == pair) pos = e;
        }
        loss += -std::log(pos / denom);
    }
    return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

Outcome criterion_1() {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(1001);
    for (int trial = 0; trial < 500; ++trial) {
        WeightCheckpoint ckpt;
        const std::size_t layers = 1 + rng.uniform_index(4);
        for (std::size_t l = 0; l < layers; ++l) {
            LayerTensor layer;
            layer.name = "t" + std::to_string(l);
            const std::size_t rank = rng.uniform_index(4);
            std::size_t count = 1;
            for (std::size_t r = 0; r < rank; ++r) {
                const std::size_t dim = 1 + rng.uniform_index(9);
                layer.shape.push_back(dim);
                count *= dim;
            }
            layer.data.resize(count);
            for (auto& v : layer.data) v = static_cast<float>(rng.normal());
            ckpt.layers.push_back(std::move(layer));
        }
        const std::size_t token_size = 1 + rng.uniform_index(64);

        const WeightCheckpoint dense =
            detokenize(tokenize_dense(ckpt, token_size), ckpt.layout());
        const WeightCheckpoint sparse =
            detokenize(tokenize_sparse(ckpt, token_size), ckpt.layout());
        for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
            if (dense.layers[l].data != ckpt.layers[l].data ||
                sparse.layers[l].data != ckpt.layers[l].data) {
                return {1, "tokenization round-trip", false,
                        "mismatch at trial " + std::to_string(trial),
                        elapsed_since(start)};
            }
        }
    }
    const double secs = elapsed_since(start);
    return {1, "tokenization round-trip", secs < 30.0,
            "500 cases exact, " + format(secs) + "s (limit 30s)", secs};
}

Outcome criterion_2() {
    const auto start = std::chrono::steady_clock::now();

    WeightCheckpoint hand;
    LayerTensor layer;
    layer.name = "w";
    layer.shape = {3, 5};
    layer.data.resize(15);
    for (std::size_t i = 0; i < 15; ++i) layer.data[i] = static_cast<float>(i + 1);
    hand.layers.push_back(std::move(layer));
    const double dense_hand = padding_fraction(tokenize_dense(hand, 4));
    const double sparse_hand = padding_fraction(tokenize_sparse(hand, 4));

    const fs::path zoo_dir = scratch_root() / "default_zoo";
    generate_zoo(default_zoo_config(7), zoo_dir);
    const CollectionStats stats = collection_stats(collect_models(zoo_dir), 32);

    const bool hand_ok = dense_hand == 0.0625 && sparse_hand == 0.375;
    const bool zoo_ok = stats.padding_fraction_dense < stats.padding_fraction_sparse;
    return {2, "padding dominance", hand_ok && zoo_ok,
            "hand case " + format(dense_hand) + "/" + format(sparse_hand) + ", zoo " +
                format(stats.padding_fraction_dense) + " < " +
                format(stats.padding_fraction_sparse),
            elapsed_since(start)};
}

Outcome criterion_3() {
    const auto start = std::chrono::steady_clock::now();

    Matrix tokens(2, 2), mask(2, 2);
    tokens(0, 0) = 1;
    tokens(0, 1) = 3;
    tokens(1, 0) = 2;
    mask(0, 0) = mask(0, 1) = mask(1, 0) = 1.0;

    const NormStats stats = masked_stats(tokens, mask);
    bool ok = std::abs(stats.mean - 2.0) < 1e-6 &&
              std::abs(stats.std_dev - std::sqrt(2.0 / 3.0)) < 1e-6 && stats.count == 3;

    Matrix pred = tokens;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask.data()[i] != 0.0) pred.data()[i] += 1.0;
    }
    const double loss = masked_mse_loss(pred, tokens, mask);
    ok = ok && std::abs(loss - 1.5) < 1e-6;

    Rng rng(1003);
    for (int i = 0; i < 100 && ok; ++i) {
        Matrix dirty_target = tokens;
        Matrix dirty_pred = pred;
        dirty_target(1, 1) = rng.uniform(-1e6, 1e6);
        dirty_pred(1, 1) = rng.uniform(-1e6, 1e6);
        const NormStats s2 = masked_stats(dirty_target, mask);
        ok = s2.mean == stats.mean && s2.std_dev == stats.std_dev &&
             masked_mse_loss(dirty_pred, dirty_target, mask) == loss;
    }
    return {3, "masked loss normalization", ok,
            "mean 2, std sqrt(2/3), loss " + format(loss) + ", 100 pad corruptions inert",
            elapsed_since(start)};
}

Outcome criterion_4() {
    const auto start = std::chrono::steady_clock::now();

    BackboneConfig cfg;
    cfg.token_size = 4;
    cfg.model_dim = 12;
    cfg.latent_dim = 4;
    cfg.num_layers = 1;
    cfg.num_heads = 1;
    cfg.window_size = 8;
    cfg.subsample_size = 8;
    cfg.aug_mask_prob = 0.15;
    cfg.aug_noise_sigma = 0.01;
    cfg.seed = 1004;
    const Backbone b = init_backbone(cfg);

    Rng rng(1005);
    std::vector<Window> windows;
    for (int w = 0; w < 2; ++w) {
        Window win;
        win.tokens = Matrix(6, 4);
        win.mask = Matrix(6, 4, 1.0);
        for (std::size_t i = 0; i < win.tokens.size(); ++i) {
            win.tokens.data()[i] = rng.normal();
        }
        win.mask(5, 2) = 0.0;
        win.mask(5, 3) = 0.0;
        win.tokens(5, 2) = 0.0;
        win.tokens(5, 3) = 0.0;
        for (std::size_t i = 0; i < 6; ++i) win.positions.push_back({i, 0, i});
        windows.push_back(std::move(win));
    }

    const double err = gradient_check(b, windows, 1e-4, LossKind::Combined);
    const double secs = elapsed_since(start);
    const bool ok = err < 1e-3 && secs < 60.0 && parameter_count(b.params) <= 5000;
    return {4, "gradient check", ok,
            "max rel error " + format(err) + " over " +
                std::to_string(parameter_count(b.params)) + " params, " + format(secs) +
                "s (limit 60s)",
            secs};
}

Outcome criterion_5() {
    const auto start = std::chrono::steady_clock::now();

    Matrix za(2, 2), zb(2, 2);
    za(0, 0) = 1.0;
    za(1, 1) = 1.0;
    zb = za;
    const double expected = std::log((std::exp(1.0) + 2.0) / std::exp(1.0));
    const double closed = contrastive_loss(za, zb, 1.0);
    bool ok = std::abs(closed - expected) < 1e-6;

    Rng rng(1006);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t batch = 2 + rng.uniform_index(6);
        const std::size_t dim = 2 + rng.uniform_index(8);
        Matrix a(batch, dim), c(batch, dim);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a.data()[i] = rng.normal();
            c.data()[i] = rng.normal();
        }
        const double tau = 0.2 + rng.uniform() * 1.5;
        worst = std::max(worst,
                         std::abs(contrastive_loss(a, c, tau) - ntxent_oracle(a, c, tau)));
    }
    ok = ok && worst < 1e-9;
    return {5, "contrastive closed form", ok,
            "closed form " + format(closed) + " vs " + format(expected) +
                ", oracle max diff " + format(worst),
            elapsed_since(start)};
}

Outcome criterion_6() {
    const auto start = std::chrono::steady_clock::now();
    const TrainedCopyTask& fixture = trained_copy_task();

    const double first = fixture.log.epochs.front().reconstruction;
    const double last = fixture.log.epochs.back().reconstruction;
    const double r2 = reconstruction_r2(fixture.backbone, fixture.heldout_data);
    const double secs = elapsed_since(start);

    const bool ok = last <= 0.5 * first && r2 > 0.9 && secs < 600.0;
    return {6, "copy-task learning", ok,
            "recon " + format(first) + " -> " + format(last) + ", held-out R2 " +
                format(r2) + ", " + format(secs) + "s (limit 600s)",
            secs};
}

// Distribution matching needs layers large enough for a two-sample KS
// distance to resolve and a padding-heavy sparse tokenization, so it uses
// its own zoo: a deeper 3-class MLP with ragged rows (36% sparse padding).
// Both variants train in the underfit regime where the unnormalized
// baseline's pad targets visibly pull reconstructions toward zero.
Outcome criterion_7() {
    const auto start = std::chrono::steady_clock::now();

    const ArchitectureSpec arch{"dist_mlp", ArchKind::Mlp, {11, 7}, 4, 3, false};
    ZooConfig zoo_cfg;
    zoo_cfg.seed = 4040;
    zoo_cfg.specs = {arch};
    for (int i = 0; i < 10; ++i) {
        zoo_cfg.datasets.push_back({"d" + std::to_string(i), DatasetKind::GaussianBlobs, 3,
                                    4, 126, 63, 900 + static_cast<std::uint64_t>(i)});
    }
    zoo_cfg.epochs = 6;
    zoo_cfg.checkpoints_at = {2, 4, 6};
    const fs::path dir = scratch_root() / "dist_zoo";
    const auto records = generate_zoo(zoo_cfg, dir);

    std::vector<WeightCheckpoint> checkpoints;
    std::vector<TokenSequence> sparse;
    for (const auto& r : records) {
        checkpoints.push_back(load_checkpoint(dir / r.checkpoint));
        sparse.push_back(tokenize_sparse(checkpoints.back(), 8));
    }
    const std::vector<TokenSequence> train_data(sparse.begin(), sparse.end() - 4);

    BackboneConfig cfg = copy_task_config();
    cfg.scheme = TokenScheme::Sparse;
    cfg.window_size = 32;
    cfg.subsample_size = 32;
    cfg.epochs = 40;
    cfg.seed = 77;

    BackboneConfig cfg_none = cfg;
    cfg_none.loss_norm = LossNorm::None;

    const auto [masked_backbone, masked_log] = train(train_data, cfg);
    const auto [raw_backbone, raw_log] = train(train_data, cfg_none);

    std::size_t wins = 0, total = 0;
    for (std::size_t m = 0; m < checkpoints.size(); ++m) {
        const WeightCheckpoint& ckpt = checkpoints[m];
        const TokenSequence& seq = sparse[m];
        auto reconstruct = [&](const Backbone& b) {
            TokenSequence recon = seq;
            const Matrix pred = reconstruct_tokens(b, seq);
            for (std::size_t i = 0; i < pred.size(); ++i) {
                recon.tokens.data()[i] = seq.mask.data()[i] != 0.0 ? pred.data()[i] : 0.0;
            }
            return detokenize(recon, ckpt.layout());
        };
        const WeightCheckpoint via_masked = reconstruct(masked_backbone);
        const WeightCheckpoint via_raw = reconstruct(raw_backbone);

        for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
            const double ks_masked =
                ks_distance(ckpt.layers[l].data, via_masked.layers[l].data);
            const double ks_raw = ks_distance(ckpt.layers[l].data, via_raw.layers[l].data);
            if (ks_masked < ks_raw) ++wins;
            ++total;
        }
    }
    const double fraction = static_cast<double>(wins) / static_cast<double>(total);
    return {7, "distribution matching", fraction >= 0.6,
            "masked normalization wins " + std::to_string(wins) + "/" +
                std::to_string(total) + " layers (" + format(fraction) + ")",
            elapsed_since(start)};
}

Outcome criterion_8() {
    const auto start = std::chrono::steady_clock::now();
    const CopyTaskZoo& zoo = copy_task_zoo();
    const TrainedCopyTask& fixture = trained_copy_task();
    const Backbone& b = fixture.backbone;

    // Three converged models trained independently on the shared dataset.
    std::vector<WeightCheckpoint> anchors;
    double anchor_accuracy = 0.0;
    for (std::size_t i = 0; i < zoo.records.size(); ++i) {
        const auto& r = zoo.records[i];
        if (r.epoch == 6 &&
            (r.dataset_id == "c0" || r.dataset_id == "c1" || r.dataset_id == "c2")) {
            anchors.push_back(zoo.checkpoints[i]);
            if (r.dataset_id == "c0") anchor_accuracy = r.test_accuracy;
        }
    }
    if (anchors.size() != 3) {
        return {8, "generative sanity", false, "anchor selection failed",
                elapsed_since(start)};
    }

    const AnchorSet set = embed_anchors(b, anchors);
    Rng rng(1008);
    std::vector<WeightCheckpoint> generated = generate_weights(b, set, 0.05, 5, 2, rng);

    bool zero_shot_ok = true;
    bool finetune_ok = true;
    double worst_zero_shot = 1.0;
    double worst_finetuned = 1.0;
    for (auto& g : generated) {
        g = bn_condition(g, zoo.arch, zoo.anchor_dataset, 4, 0.1);  // no-op for MLPs
        const double zero_shot = evaluate_weights(g, zoo.arch, zoo.anchor_dataset);
        worst_zero_shot = std::min(worst_zero_shot, zero_shot);
        if (!(zero_shot > 0.5)) zero_shot_ok = false;

        // Finetune with the recipe the zoo itself was trained with.
        const FinetuneResult tuned = finetune(g, zoo.arch, zoo.anchor_dataset, 5, 0.05);
        worst_finetuned = std::min(worst_finetuned, tuned.accuracy.back());
        if (tuned.accuracy.back() < anchor_accuracy - 0.05) finetune_ok = false;
    }

    // Degenerate bandwidth: the generated model equals the backbone's own
    // reconstruction of the anchor.
    Rng rng2(1009);
    const std::vector<WeightCheckpoint> single =
        generate_weights(b, embed_anchors(b, {anchors[0]}), 1e-12, 1, 0, rng2);
    const TokenSequence anchor_seq = tokenize_dense(anchors[0], 8);
    const Matrix pred = reconstruct_tokens(b, anchor_seq);
    TokenSequence recon_seq = anchor_seq;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        recon_seq.tokens.data()[i] =
            anchor_seq.mask.data()[i] != 0.0 ? pred.data()[i] : 0.0;
    }
    const WeightCheckpoint expected = detokenize(recon_seq, anchors[0].layout());
    double max_diff = 0.0;
    for (std::size_t l = 0; l < expected.layers.size(); ++l) {
        for (std::size_t e = 0; e < expected.layers[l].data.size(); ++e) {
            max_diff = std::max(max_diff,
                                std::abs(static_cast<double>(single[0].layers[l].data[e]) -
                                         static_cast<double>(expected.layers[l].data[e])));
        }
    }

    const bool ok = zero_shot_ok && finetune_ok && max_diff < 1e-5;
    return {8, "generative sanity", ok,
            "zero-shot min " + format(worst_zero_shot) + " (baseline 0.5), finetuned min " +
                format(worst_finetuned) + " vs anchor " + format(anchor_accuracy) +
                ", degenerate-bandwidth diff " + format(max_diff),
            elapsed_since(start)};
}

Outcome criterion_9() {
    const auto start = std::chrono::steady_clock::now();
    const ArchitectureSpec conv{"conv_4", ArchKind::ConvBn, {4}, 8, 2, true};
    const SyntheticDataset ds{"blobs", DatasetKind::GaussianBlobs, 2, 8, 64, 32, 1010};

    WeightCheckpoint w;
    for (const auto& entry : conv.layout().entries) {
        LayerTensor layer;
        layer.name = entry.name;
        layer.shape = entry.shape;
        std::size_t count = 1;
        for (std::size_t d : entry.shape) count *= d;
        const float fill = entry.name == "conv0.bias"        ? 1.0f
                           : entry.name == "bn0.running_var" ? 1.0f
                           : entry.name == "bn0.weight"      ? 1.0f
                                                             : 0.0f;
        layer.data.assign(count, fill);
        w.layers.push_back(std::move(layer));
    }
    w.non_trainable_names = {"bn0.running_mean", "bn0.running_var"};

    bool ok = true;
    double worst = 0.0;
    for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{5}}) {
        const WeightCheckpoint out = bn_condition(w, conv, ds, k, 0.1);
        const double expected = 1.0 - std::pow(0.9, static_cast<double>(k));
        for (float v : out.find("bn0.running_mean")->data) {
            worst = std::max(worst, std::abs(static_cast<double>(v) - expected));
            if (std::abs(static_cast<double>(v) - expected) >= 1e-6) ok = false;
        }
        for (const auto& layer : out.layers) {
            if (layer.name.find("running_") != std::string::npos) continue;
            if (layer.data != w.find(layer.name)->data) ok = false;
        }
    }
    return {9, "batch-norm conditioning", ok,
            "EMA max error " + format(worst) + " for k in {1,2,5}, trainables bitwise",
            elapsed_since(start)};
}

// The probe experiment follows the homogeneous-zoo protocol: one
// architecture, many independent training runs, checkpoints across a run
// that is still visibly learning (rings at this rate move from ~0.55 to
// ~0.98 test accuracy over ten epochs, so the epoch leaves a real trace in
// the weights).
Outcome criterion_10() {
    const auto start = std::chrono::steady_clock::now();

    const fs::path zoo_dir = scratch_root() / "probe_zoo";
    ZooConfig zoo_cfg;
    zoo_cfg.seed = 808;
    zoo_cfg.specs = {{"probe_mlp", ArchKind::Mlp, {16, 8}, 8, 2, false}};
    for (int i = 0; i < 24; ++i) {
        zoo_cfg.datasets.push_back({"pr" + std::to_string(i), DatasetKind::TwoRings, 2, 8,
                                    256, 128, 1300 + static_cast<std::uint64_t>(i)});
    }
    zoo_cfg.epochs = 10;
    zoo_cfg.checkpoints_at = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    zoo_cfg.learning_rate = 0.05;
    generate_zoo(zoo_cfg, zoo_dir);
    const ZooIndex zoo = load_zoo(zoo_dir);
    if (zoo.records.size() < 60) {
        return {10, "probe direction", false,
                "zoo too small: " + std::to_string(zoo.records.size()),
                elapsed_since(start)};
    }

    std::vector<TokenSequence> data;
    std::vector<WeightCheckpoint> checkpoints;
    std::vector<double> epochs;
    for (const auto& r : zoo.records) {
        checkpoints.push_back(load_checkpoint(zoo_dir / r.checkpoint));
        data.push_back(tokenize_dense(checkpoints.back(), 32));
        epochs.push_back(static_cast<double>(r.epoch));
    }

    BackboneConfig cfg;
    cfg.token_size = 32;
    cfg.model_dim = 48;
    cfg.latent_dim = 24;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.window_size = 16;
    cfg.subsample_size = 16;
    cfg.batch_size = 24;
    cfg.epochs = 300;
    cfg.learning_rate = 3e-3;
    cfg.contrastive_weight = 0.2;
    cfg.seed = 1100;
    const auto [trained, log] = train(data, cfg);

    auto embed_all = [&](const Backbone& b) {
        Matrix emb(checkpoints.size(), b.config.latent_dim);
        for (std::size_t i = 0; i < checkpoints.size(); ++i) {
            const std::vector<double> z = mean_pool_embed(b, checkpoints[i]);
            for (std::size_t j = 0; j < z.size(); ++j) emb(i, j) = z[j];
        }
        return emb;
    };
    const Matrix trained_emb = embed_all(trained);

    std::ostringstream detail;
    bool ok = true;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        BackboneConfig untrained_cfg = cfg;
        untrained_cfg.seed = 9000 + seed;
        const Backbone untrained = init_backbone(untrained_cfg);
        const double trained_r2 = linear_probe(trained_emb, epochs, seed);
        const double untrained_r2 = linear_probe(embed_all(untrained), epochs, seed);
        if (!(trained_r2 > untrained_r2)) ok = false;
        detail << " s" << seed << ": " << format(trained_r2) << ">"
               << format(untrained_r2);
    }
    return {10, "probe direction", ok,
            "epoch probe R2 (trained>untrained):" + detail.str(), elapsed_since(start)};
}

Outcome criterion_11() {
    const auto start = std::chrono::steady_clock::now();

    auto run_pipeline = [](const fs::path& dir) {
        const std::string zoo = (dir / "zoo").string();
        const std::string tokens = (dir / "tokens").string();
        const std::string backbone = (dir / "backbone.st").string();
        const std::vector<std::vector<std::string>> stages = {
            {"zoo", "generate", "--out", zoo, "--preset", "smoke", "--seed", "21"},
            {"ingest", "--dir", zoo, "--token-size", "16", "--out",
             (dir / "ingest_report.json").string()},
            {"tokenize", "--dir", zoo, "--scheme", "dense", "--token-size", "16", "--out",
             tokens},
            {"train", "--data", tokens, "--out", backbone, "--epochs", "2", "--seed", "21",
             "--model-dim", "24", "--latent-dim", "6", "--layers", "1", "--heads", "2",
             "--window", "16", "--subsample", "8", "--batch-size", "6"},
            {"sample", "--backbone", backbone, "--anchors", zoo, "--count", "2", "--keep",
             "1", "--halo", "2", "--seed", "21", "--out", (dir / "generated").string()},
            {"zoo", "eval", "--dir", zoo, "--out", (dir / "zoo_eval.json").string()},
            {"probe", "--zoo", zoo, "--backbone", backbone, "--target", "epoch", "--seed",
             "21", "--out", (dir / "probe.json").string()},
            {"report", "--run", dir.string()},
        };
        for (const auto& stage : stages) {
            if (cli::run(stage) != 0) return false;
        }
        return true;
    };

    const fs::path run_a = scratch_root() / "pipeline_a";
    const fs::path run_b = scratch_root() / "pipeline_b";
    if (!run_pipeline(run_a) || !run_pipeline(run_b)) {
        return {11, "pipeline determinism", false, "a stage failed", elapsed_since(start)};
    }

    auto load_report = [](const fs::path& dir) {
        std::ifstream in(dir / "report.json");
        nlohmann::json doc = nlohmann::json::parse(in);
        doc.erase("generated_at");
        return doc;
    };
    const nlohmann::json a = load_report(run_a);
    const nlohmann::json b = load_report(run_b);

    const double secs = elapsed_since(start);
    const bool ok = a == b && a.at("complete").get<bool>() && secs < 900.0;
    return {11, "pipeline determinism", ok,
            std::string(a == b ? "reports identical" : "reports differ") + ", " +
                format(secs) + "s (limit 900s)",
            secs};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::function<Outcome()>> criteria = {
        criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
        criterion_7, criterion_8, criterion_9, criterion_10, criterion_11};

    // Optional criterion ids on the command line restrict the run.
    std::vector<std::function<Outcome()>> selected;
    for (int i = 1; i < argc; ++i) {
        const int id = std::atoi(argv[i]);
        if (id >= 1 && id <= static_cast<int>(criteria.size())) {
            selected.push_back(criteria[id - 1]);
        }
    }
    if (selected.empty()) selected = criteria;

    bool all_passed = true;
    for (const auto& fn : selected) {
        Outcome outcome{};
        try {
            outcome = fn();
        } catch (const std::exception& e) {
            outcome.passed = false;
            outcome.detail = std::string("exception: ") + e.what();
        }
        all_passed = all_passed && outcome.passed;
        std::printf("%s criterion %2d %-24s %s [%.1fs]\n",
                    outcome.passed ? "PASS" : "FAIL", outcome.id, outcome.name.c_str(),
                    outcome.detail.c_str(), outcome.seconds);
        std::fflush(stdout);
    }

    std::error_code ec;
    fs::remove_all(scratch_root(), ec);
    return all_passed ? 0 : 1;
}
