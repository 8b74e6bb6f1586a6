#include "weightspace/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "weightspace/backbone.hpp"
#include "weightspace/checkpoint.hpp"
#include "weightspace/errors.hpp"
#include "weightspace/sampler.hpp"
#include "weightspace/tokenizer.hpp"
#include "weightspace/zoo.hpp"

namespace weightspace::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_json(const json& doc, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + " is not valid JSON: " + e.what());
    }
}

// Resolved-parameter snapshot written beside every stage's outputs.
void write_config_snapshot(const fs::path& dir, const std::string& stage, json params) {
    params["stage"] = stage;
    write_json(params, dir / (stage + "_config.json"));
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

json ingest_report_json(const IngestReport& r) {
    json doc;
    doc["model_id"] = r.model_id;
    doc["loadable"] = r.loadable;
    doc["tokenizable"] = r.tokenizable;
    if (r.reject_reason) doc["reject_reason"] = *r.reject_reason;
    doc["token_count_dense"] = r.token_count_dense;
    doc["token_count_sparse"] = r.token_count_sparse;
    return doc;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct IngestOptions {
    std::string dir;
    std::size_t token_size = 32;
    std::string out;
};

int run_ingest(const IngestOptions& opt) {
    const auto manifest = collect_models(opt.dir);
    if (manifest.empty()) throw EmptyCollection("no models found in " + opt.dir);

    json reports = json::array();
    for (const auto& entry : manifest) {
        reports.push_back(ingest_report_json(sanity_check(entry, opt.token_size)));
    }
    const CollectionStats stats = collection_stats(manifest, opt.token_size);

    json doc;
    doc["token_size"] = opt.token_size;
    doc["reports"] = std::move(reports);
    doc["collection"] = {{"num_models", stats.num_models},
                         {"num_tokens_dense", stats.num_tokens_dense},
                         {"num_tokens_sparse", stats.num_tokens_sparse},
                         {"padding_fraction_dense", stats.padding_fraction_dense},
                         {"padding_fraction_sparse", stats.padding_fraction_sparse},
                         {"group_counts", stats.group_counts}};
    write_json(doc, opt.out);
    write_config_snapshot(fs::path(opt.out).parent_path(), "ingest",
                          {{"dir", opt.dir}, {"token_size", opt.token_size}});

    std::cout << "ingest: " << stats.num_models << " models accepted, padding dense "
              << stats.padding_fraction_dense << " / sparse "
              << stats.padding_fraction_sparse << "\n";
    return 0;
}

struct TokenizeOptions {
    std::string dir;
    std::string scheme = "dense";
    std::size_t token_size = 32;
    std::string out;
};

int run_tokenize(const TokenizeOptions& opt) {
    const TokenScheme scheme = token_scheme_from_string(opt.scheme);
    const auto manifest = collect_models(opt.dir);
    if (manifest.empty()) throw EmptyCollection("no models found in " + opt.dir);
    fs::create_directories(opt.out);

    json models = json::array();
    json skipped = json::array();
    std::size_t total_tokens = 0;
    std::size_t total_signal = 0;

    for (const auto& entry : manifest) {
        const IngestReport report = sanity_check(entry, opt.token_size);
        if (!report.accepted()) {
            skipped.push_back({{"model_id", entry.model_id},
                               {"reason", report.reject_reason.value_or("unknown")}});
            continue;
        }
        WeightCheckpoint ckpt = load_checkpoint(entry.path);
        if (entry.non_trainable) {
            ckpt.non_trainable_names.clear();
            for (const auto& name : *entry.non_trainable) {
                if (ckpt.find(name) != nullptr) ckpt.non_trainable_names.insert(name);
            }
        }
        const TokenSequence seq = scheme == TokenScheme::Dense
                                      ? tokenize_dense(ckpt, opt.token_size)
                                      : tokenize_sparse(ckpt, opt.token_size);
        const fs::path file = fs::path(opt.out) / (entry.model_id + ".tok");
        save_token_file(seq, ckpt.layout(), file);

        total_tokens += seq.count();
        total_signal += seq.signal_count();
        models.push_back({{"model_id", entry.model_id},
                          {"file", file.filename().string()},
                          {"tokens", seq.count()},
                          {"padding_fraction", padding_fraction(seq)}});
    }
    if (models.empty()) throw EmptyCollection("every model was rejected during tokenization");

    json doc;
    doc["scheme"] = opt.scheme;
    doc["token_size"] = opt.token_size;
    doc["num_models"] = models.size();
    doc["num_tokens"] = total_tokens;
    doc["padding_fraction"] =
        1.0 - static_cast<double>(total_signal) /
                  static_cast<double>(total_tokens * opt.token_size);
    doc["models"] = std::move(models);
    doc["skipped"] = std::move(skipped);
    write_json(doc, fs::path(opt.out) / "tokenize_summary.json");
    write_config_snapshot(opt.out, "tokenize",
                          {{"dir", opt.dir},
                           {"scheme", opt.scheme},
                           {"token_size", opt.token_size}});

    std::cout << "tokenize: " << doc["num_models"] << " models, " << total_tokens
              << " tokens (" << opt.scheme << ")\n";
    return 0;
}

struct TrainOptions {
    std::string data;
    std::string config;
    std::string out;
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> model_dim;
    std::optional<std::size_t> latent_dim;
    std::optional<std::size_t> num_layers;
    std::optional<std::size_t> num_heads;
    std::optional<std::size_t> window;
    std::optional<std::size_t> subsample;
    std::optional<std::size_t> batch_size;
    std::optional<double> learning_rate;
    std::optional<std::string> loss_norm;
};

int run_train(const TrainOptions& opt) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(opt.data)) {
        if (entry.is_regular_file() && entry.path().extension() == ".tok") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw EmptyCollection("no token files in " + opt.data);

    std::vector<TokenSequence> data;
    std::vector<std::string> ids;
    for (const auto& file : files) {
        auto [seq, layout] = load_token_file(file);
        data.push_back(std::move(seq));
        ids.push_back(file.stem().string());
    }

    BackboneConfig cfg;
    if (!opt.config.empty()) {
        std::ifstream in(opt.config);
        if (!in) throw IoError("cannot read config " + opt.config);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        cfg = BackboneConfig::from_json(text);
    }
    cfg.token_size = data.front().token_size();
    cfg.scheme = data.front().scheme;
    for (const auto& seq : data) {
        if (seq.token_size() != cfg.token_size || seq.scheme != cfg.scheme) {
            throw ConfigError("token files disagree on scheme or token size");
        }
    }

    if (opt.epochs) cfg.epochs = *opt.epochs;
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.model_dim) cfg.model_dim = *opt.model_dim;
    if (opt.latent_dim) cfg.latent_dim = *opt.latent_dim;
    if (opt.num_layers) cfg.num_layers = *opt.num_layers;
    if (opt.num_heads) cfg.num_heads = *opt.num_heads;
    if (opt.window) cfg.window_size = *opt.window;
    if (opt.subsample) cfg.subsample_size = *opt.subsample;
    if (opt.batch_size) cfg.batch_size = *opt.batch_size;
    if (opt.learning_rate) cfg.learning_rate = *opt.learning_rate;
    if (opt.loss_norm) cfg.loss_norm = loss_norm_from_string(*opt.loss_norm);
    cfg.validate();

    auto [backbone, log] = train(data, cfg, &ids);
    save_backbone(backbone, opt.out);
    const double r2 = reconstruction_r2(backbone, data);

    json epochs = json::array();
    for (const auto& e : log.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"reconstruction", e.reconstruction},
                          {"contrastive", e.contrastive},
                          {"total", e.total},
                          {"learning_rate", e.learning_rate}});
    }
    json doc;
    doc["num_sequences"] = data.size();
    doc["steps"] = log.steps;
    doc["epochs"] = std::move(epochs);
    doc["final_reconstruction"] = log.epochs.back().reconstruction;
    doc["final_contrastive"] = log.epochs.back().contrastive;
    doc["final_total"] = log.epochs.back().total;
    doc["reconstruction_r2"] = r2;

    const fs::path out_dir = fs::path(opt.out).parent_path();
    write_json(doc, out_dir / "train_log.json");
    write_config_snapshot(out_dir, "train", json::parse(cfg.to_json()));

    std::cout << "train: " << log.steps << " steps, final loss "
              << log.epochs.back().total << ", reconstruction R2 " << r2 << "\n";
    return 0;
}

struct SampleOptions {
    std::string backbone;
    std::string anchors;
    std::size_t count = 10;
    std::size_t keep = 2;
    double bandwidth = 0.0;  // 0 = data-driven default
    std::optional<std::size_t> halo;
    std::size_t anchor_count = 3;
    std::size_t bn_passes = 4;
    double bn_momentum = 0.1;
    std::uint64_t seed = 0;
    std::string out;
};

int run_sample(const SampleOptions& opt) {
    if (opt.keep == 0 || opt.keep > opt.count) {
        throw ConfigError("--keep must be in [1, count]");
    }
    const Backbone backbone = load_backbone(opt.backbone);
    const ZooIndex zoo = load_zoo(opt.anchors);
    if (zoo.records.empty()) throw EmptyCollection("anchor zoo has no records");

    // Anchor group: the (architecture, dataset) pair with the best checkpoint.
    std::map<std::string, std::vector<const ZooRecord*>> groups;
    for (const auto& r : zoo.records) groups[r.arch_id + "|" + r.dataset_id].push_back(&r);
    std::string best_key;
    double best_acc = -1.0;
    for (const auto& [key, records] : groups) {
        for (const auto* r : records) {
            if (r->test_accuracy > best_acc) {
                best_acc = r->test_accuracy;
                best_key = key;
            }
        }
    }
    auto group = groups.at(best_key);
    std::sort(group.begin(), group.end(), [](const ZooRecord* a, const ZooRecord* b) {
        if (a->test_accuracy != b->test_accuracy) return a->test_accuracy > b->test_accuracy;
        return a->model_id < b->model_id;
    });
    group.resize(std::min(group.size(), opt.anchor_count));

    const ArchitectureSpec& arch = zoo.archs.at(group.front()->arch_id);
    const SyntheticDataset& dataset = zoo.datasets.at(group.front()->dataset_id);

    std::vector<WeightCheckpoint> anchor_ckpts;
    json anchor_ids = json::array();
    for (const auto* r : group) {
        anchor_ckpts.push_back(load_checkpoint(zoo.dir / r->checkpoint));
        anchor_ids.push_back(r->model_id);
    }

    const AnchorSet anchors = embed_anchors(backbone, anchor_ckpts);
    const double bandwidth =
        opt.bandwidth > 0.0 ? opt.bandwidth : default_bandwidth(anchors);
    const std::size_t halo =
        opt.halo.value_or(std::min<std::size_t>(8, backbone.config.window_size - 1));

    Rng rng(opt.seed);
    std::vector<WeightCheckpoint> generated =
        generate_weights(backbone, anchors, bandwidth, opt.count, halo, rng);

    std::vector<std::pair<double, std::size_t>> scored;
    json accuracies = json::array();
    for (std::size_t i = 0; i < generated.size(); ++i) {
        generated[i] =
            bn_condition(generated[i], arch, dataset, opt.bn_passes, opt.bn_momentum);
        const double acc = evaluate_weights(generated[i], arch, dataset);
        accuracies.push_back(acc);
        scored.emplace_back(acc, i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    fs::create_directories(opt.out);
    json kept = json::array();
    for (std::size_t rank = 0; rank < opt.keep; ++rank) {
        const auto [acc, index] = scored[rank];
        const std::string name = "gen_" + std::to_string(rank) + ".st";
        save_checkpoint(generated[index], fs::path(opt.out) / name);
        kept.push_back({{"file", name}, {"accuracy", acc}, {"sample_index", index}});
    }

    json doc;
    doc["arch_id"] = arch.id;
    doc["dataset_id"] = dataset.id;
    doc["anchors"] = std::move(anchor_ids);
    doc["bandwidth"] = bandwidth;
    doc["halo"] = halo;
    doc["count"] = opt.count;
    doc["keep"] = opt.keep;
    doc["seed"] = opt.seed;
    doc["zero_shot_accuracy"] = std::move(accuracies);
    doc["kept"] = std::move(kept);
    write_json(doc, fs::path(opt.out) / "sample_results.json");
    write_config_snapshot(opt.out, "sample",
                          {{"backbone", opt.backbone},
                           {"anchors", opt.anchors},
                           {"count", opt.count},
                           {"keep", opt.keep},
                           {"bandwidth", bandwidth},
                           {"halo", halo},
                           {"bn_passes", opt.bn_passes},
                           {"bn_momentum", opt.bn_momentum},
                           {"seed", opt.seed}});

    std::cout << "sample: kept " << opt.keep << "/" << opt.count << " models, best accuracy "
              << scored.front().first << "\n";
    return 0;
}

struct ZooGenerateOptions {
    std::string out;
    std::string preset = "default";
    std::uint64_t seed = 0;
};

int run_zoo_generate(const ZooGenerateOptions& opt) {
    ZooConfig cfg;
    if (opt.preset == "default") {
        cfg = default_zoo_config(opt.seed);
    } else if (opt.preset == "smoke") {
        cfg = smoke_zoo_config(opt.seed);
    } else {
        throw ConfigError("unknown zoo preset: " + opt.preset);
    }

    const auto records = generate_zoo(cfg, opt.out);
    std::size_t usable = 0;
    for (const auto& r : records) {
        if (!r.diverged) ++usable;
    }
    write_config_snapshot(opt.out, "zoo",
                          {{"preset", opt.preset}, {"seed", opt.seed}});

    std::cout << "zoo generate: " << usable << " checkpoints ("
              << records.size() - usable << " diverged)\n";
    return 0;
}

struct ZooEvalOptions {
    std::string dir;
    std::string out;
};

int run_zoo_eval(const ZooEvalOptions& opt) {
    const ZooIndex zoo = load_zoo(opt.dir);
    if (zoo.records.empty()) throw EmptyCollection("zoo has no records");

    std::size_t matches = 0;
    json details = json::array();
    for (const auto& r : zoo.records) {
        const WeightCheckpoint ckpt = load_checkpoint(zoo.dir / r.checkpoint);
        const double acc =
            evaluate_weights(ckpt, zoo.archs.at(r.arch_id), zoo.datasets.at(r.dataset_id));
        const bool match = acc == r.test_accuracy;
        if (match) ++matches;
        details.push_back({{"model_id", r.model_id},
                           {"recorded", r.test_accuracy},
                           {"measured", acc},
                           {"match", match}});
    }

    json doc;
    doc["records"] = zoo.records.size();
    doc["matches"] = matches;
    doc["all_match"] = matches == zoo.records.size();
    doc["details"] = std::move(details);
    write_json(doc, opt.out);

    std::cout << "zoo eval: " << matches << "/" << zoo.records.size()
              << " recorded accuracies reproduced\n";
    return 0;
}

struct ProbeOptions {
    std::string zoo;
    std::string backbone;
    std::string target = "epoch";
    std::uint64_t seed = 0;
    std::string out;
};

int run_probe(const ProbeOptions& opt) {
    const ZooIndex zoo = load_zoo(opt.zoo);
    const Backbone backbone = load_backbone(opt.backbone);
    if (zoo.records.empty()) throw EmptyCollection("zoo has no records");

    Matrix embeddings(zoo.records.size(), backbone.config.latent_dim);
    std::vector<double> targets(zoo.records.size());
    for (std::size_t i = 0; i < zoo.records.size(); ++i) {
        const auto& r = zoo.records[i];
        const WeightCheckpoint ckpt = load_checkpoint(zoo.dir / r.checkpoint);
        const std::vector<double> z = mean_pool_embed(backbone, ckpt);
        for (std::size_t j = 0; j < z.size(); ++j) embeddings(i, j) = z[j];
        if (opt.target == "accuracy") {
            targets[i] = r.test_accuracy;
        } else if (opt.target == "ggap") {
            targets[i] = r.ggap;
        } else if (opt.target == "epoch") {
            targets[i] = static_cast<double>(r.epoch);
        } else {
            throw ConfigError("unknown probe target: " + opt.target);
        }
    }

    const double r2 = linear_probe(embeddings, targets, opt.seed);

    json doc;
    doc["target"] = opt.target;
    doc["num_records"] = zoo.records.size();
    doc["split_seed"] = opt.seed;
    doc["r2"] = r2;
    write_json(doc, opt.out);
    write_config_snapshot(fs::path(opt.out).parent_path(), "probe",
                          {{"zoo", opt.zoo},
                           {"backbone", opt.backbone},
                           {"target", opt.target},
                           {"seed", opt.seed}});

    std::cout << "probe: target " << opt.target << " R2 " << r2 << "\n";
    return 0;
}

struct ReportOptions {
    std::string run;
    std::string out;
};

int run_report(const ReportOptions& opt) {
    const json doc = pipeline_report(opt.run);
    const fs::path out =
        opt.out.empty() ? fs::path(opt.run) / "report.json" : fs::path(opt.out);
    write_json(doc, out);

    if (doc["complete"].get<bool>()) {
        std::cout << "report: all stages present\n";
    } else {
        std::cout << "report: partial, missing";
        for (const auto& stage : doc["missing"]) {
            std::cout << " " << stage.get<std::string>();
        }
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Report merge
// ---------------------------------------------------------------------------

nlohmann::json pipeline_report(const std::filesystem::path& run_dir) {
    json doc;
    doc["schema_version"] = 1;
    doc["generated_at"] = timestamp();
    doc["stages"] = json::object();
    json missing = json::array();

    auto add_stage = [&](const std::string& name, const fs::path& file,
                         const std::function<json(const json&)>& shape) {
        if (fs::exists(file)) {
            doc["stages"][name] = shape(read_json(file));
        } else {
            missing.push_back(name);
        }
    };

    add_stage("zoo", run_dir / "zoo" / "zoo_meta.json", [&](const json& meta) {
        json stage;
        stage["num_archs"] = meta.at("archs").size();
        stage["num_datasets"] = meta.at("datasets").size();
        stage["seed"] = meta.at("seed");
        std::size_t records = 0;
        double acc_sum = 0.0;
        std::ifstream in(run_dir / "zoo" / "zoo.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json r = json::parse(line);
            acc_sum += r.at("test_accuracy").get<double>();
            ++records;
        }
        stage["num_records"] = records;
        stage["mean_test_accuracy"] = records > 0 ? acc_sum / records : 0.0;
        const fs::path eval_file = run_dir / "zoo_eval.json";
        if (fs::exists(eval_file)) {
            const json eval = read_json(eval_file);
            stage["eval"] = {{"records", eval.at("records")},
                             {"matches", eval.at("matches")},
                             {"all_match", eval.at("all_match")}};
        }
        return stage;
    });

    add_stage("ingest", run_dir / "ingest_report.json", [](const json& j) {
        json stage;
        stage["token_size"] = j.at("token_size");
        stage["collection"] = j.at("collection");
        stage["num_reports"] = j.at("reports").size();
        return stage;
    });

    add_stage("tokenize", run_dir / "tokens" / "tokenize_summary.json", [](const json& j) {
        json stage;
        stage["scheme"] = j.at("scheme");
        stage["token_size"] = j.at("token_size");
        stage["num_models"] = j.at("num_models");
        stage["num_tokens"] = j.at("num_tokens");
        stage["padding_fraction"] = j.at("padding_fraction");
        return stage;
    });

    add_stage("train", run_dir / "train_log.json", [](const json& j) {
        json stage;
        stage["num_sequences"] = j.at("num_sequences");
        stage["steps"] = j.at("steps");
        stage["final_reconstruction"] = j.at("final_reconstruction");
        stage["final_contrastive"] = j.at("final_contrastive");
        stage["final_total"] = j.at("final_total");
        stage["reconstruction_r2"] = j.at("reconstruction_r2");
        return stage;
    });

    add_stage("sample", run_dir / "generated" / "sample_results.json", [](const json& j) {
        json stage;
        stage["arch_id"] = j.at("arch_id");
        stage["dataset_id"] = j.at("dataset_id");
        stage["bandwidth"] = j.at("bandwidth");
        stage["halo"] = j.at("halo");
        stage["zero_shot_accuracy"] = j.at("zero_shot_accuracy");
        stage["kept"] = j.at("kept");
        return stage;
    });

    add_stage("probe", run_dir / "probe.json", [](const json& j) {
        json stage;
        stage["target"] = j.at("target");
        stage["num_records"] = j.at("num_records");
        stage["r2"] = j.at("r2");
        return stage;
    });

    doc["missing"] = missing;
    doc["complete"] = missing.empty();
    return doc;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
    CLI::App app{"Weight-space learning on heterogeneous checkpoints"};
    app.require_subcommand(1);

    IngestOptions ingest_opt;
    auto* ingest = app.add_subcommand("ingest", "Sanity-check a checkpoint collection");
    ingest->add_option("--dir", ingest_opt.dir, "checkpoint directory")->required();
    ingest->add_option("--token-size", ingest_opt.token_size, "token size");
    ingest->add_option("--out", ingest_opt.out, "report file")->required();

    TokenizeOptions tokenize_opt;
    auto* tokenize = app.add_subcommand("tokenize", "Convert checkpoints to token files");
    tokenize->add_option("--dir", tokenize_opt.dir, "checkpoint directory")->required();
    tokenize->add_option("--scheme", tokenize_opt.scheme, "dense or sparse")
        ->check(CLI::IsMember({"dense", "sparse"}));
    tokenize->add_option("--token-size", tokenize_opt.token_size, "token size");
    tokenize->add_option("--out", tokenize_opt.out, "token directory")->required();

    TrainOptions train_opt;
    auto* train_cmd = app.add_subcommand("train", "Train the autoencoder backbone");
    train_cmd->add_option("--data", train_opt.data, "token directory")->required();
    train_cmd->add_option("--config", train_opt.config, "backbone config JSON");
    train_cmd->add_option("--out", train_opt.out, "backbone output file")->required();
    train_cmd->add_option("--epochs", train_opt.epochs, "override epochs");
    train_cmd->add_option("--seed", train_opt.seed, "override seed");
    train_cmd->add_option("--model-dim", train_opt.model_dim, "override model width");
    train_cmd->add_option("--latent-dim", train_opt.latent_dim, "override latent width");
    train_cmd->add_option("--layers", train_opt.num_layers, "override depth");
    train_cmd->add_option("--heads", train_opt.num_heads, "override attention heads");
    train_cmd->add_option("--window", train_opt.window, "override window size");
    train_cmd->add_option("--subsample", train_opt.subsample, "override subsample size");
    train_cmd->add_option("--batch-size", train_opt.batch_size, "override batch size");
    train_cmd->add_option("--lr", train_opt.learning_rate, "override learning rate");
    train_cmd->add_option("--loss-norm", train_opt.loss_norm, "masked or none");

    SampleOptions sample_opt;
    auto* sample = app.add_subcommand("sample", "Generate weights around anchors");
    sample->add_option("--backbone", sample_opt.backbone, "backbone file")->required();
    sample->add_option("--anchors", sample_opt.anchors, "zoo directory")->required();
    sample->add_option("--count", sample_opt.count, "models to generate");
    sample->add_option("--keep", sample_opt.keep, "models to keep");
    sample->add_option("--bandwidth", sample_opt.bandwidth, "kernel bandwidth (0 = auto)");
    sample->add_option("--halo", sample_opt.halo, "context rows per window side");
    sample->add_option("--anchor-count", sample_opt.anchor_count, "anchors to embed");
    sample->add_option("--bn-passes", sample_opt.bn_passes, "conditioning passes");
    sample->add_option("--bn-momentum", sample_opt.bn_momentum, "conditioning momentum");
    sample->add_option("--seed", sample_opt.seed, "sampling seed");
    sample->add_option("--out", sample_opt.out, "output directory")->required();

    auto* zoo = app.add_subcommand("zoo", "Model zoo utilities");
    zoo->require_subcommand(1);
    ZooGenerateOptions zoo_gen_opt;
    auto* zoo_gen = zoo->add_subcommand("generate", "Fabricate a synthetic zoo");
    zoo_gen->add_option("--out", zoo_gen_opt.out, "zoo directory")->required();
    zoo_gen->add_option("--preset", zoo_gen_opt.preset, "default or smoke")
        ->check(CLI::IsMember({"default", "smoke"}));
    zoo_gen->add_option("--seed", zoo_gen_opt.seed, "zoo seed");

    ZooEvalOptions zoo_eval_opt;
    auto* zoo_eval = zoo->add_subcommand("eval", "Re-evaluate recorded accuracies");
    zoo_eval->add_option("--dir", zoo_eval_opt.dir, "zoo directory")->required();
    zoo_eval->add_option("--out", zoo_eval_opt.out, "output file")->required();

    ProbeOptions probe_opt;
    auto* probe = app.add_subcommand("probe", "Linear probe of model properties");
    probe->add_option("--zoo", probe_opt.zoo, "zoo directory")->required();
    probe->add_option("--backbone", probe_opt.backbone, "backbone file")->required();
    probe->add_option("--target", probe_opt.target, "accuracy, ggap or epoch")
        ->check(CLI::IsMember({"accuracy", "ggap", "epoch"}));
    probe->add_option("--seed", probe_opt.seed, "split seed");
    probe->add_option("--out", probe_opt.out, "output file")->required();

    ReportOptions report_opt;
    auto* report = app.add_subcommand("report", "Consolidate stage outputs");
    report->add_option("--run", report_opt.run, "run directory")->required();
    report->add_option("--out", report_opt.out, "output file");

    std::vector<const char*> argv;
    argv.push_back("weightspace");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        if (ingest->parsed()) return run_ingest(ingest_opt);
        if (tokenize->parsed()) return run_tokenize(tokenize_opt);
        if (train_cmd->parsed()) return run_train(train_opt);
        if (sample->parsed()) return run_sample(sample_opt);
        if (zoo->parsed()) {
            if (zoo_gen->parsed()) return run_zoo_generate(zoo_gen_opt);
            if (zoo_eval->parsed()) return run_zoo_eval(zoo_eval_opt);
        }
        if (probe->parsed()) return run_probe(probe_opt);
        if (report->parsed()) return run_report(report_opt);
        std::cerr << "no subcommand selected\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace weightspace::cli
