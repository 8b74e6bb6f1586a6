#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "weightspace/backbone.hpp"
#include "weightspace/checkpoint.hpp"
#include "weightspace/matrix.hpp"

namespace weightspace {

enum class ArchKind { Mlp, ConvBn };

std::string to_string(ArchKind kind);
ArchKind arch_kind_from_string(const std::string& name);

// Small classifier family used to fabricate heterogeneous checkpoints:
// plain MLPs and 1-D conv stacks with batch-norm stages.
struct ArchitectureSpec {
    std::string id;
    ArchKind kind = ArchKind::Mlp;
    std::vector<std::size_t> widths;  // MLP hidden widths / conv channels
    std::size_t input_dim = 8;
    std::size_t num_classes = 2;
    bool has_bn = false;

    Layout layout() const;
    void validate() const;
};

enum class DatasetKind { GaussianBlobs, TwoRings };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);

struct SyntheticDataset {
    std::string id;
    DatasetKind generator = DatasetKind::GaussianBlobs;
    std::size_t num_classes = 2;
    std::size_t dimension = 8;
    std::size_t train_size = 256;
    std::size_t test_size = 128;
    std::uint64_t seed = 0;
};

struct DatasetSplits {
    Matrix train_x;
    std::vector<int> train_y;
    Matrix test_x;
    std::vector<int> test_y;
};

DatasetSplits make_dataset(const SyntheticDataset& spec);

struct ZooRecord {
    std::string model_id;
    std::string checkpoint;  // path relative to the zoo directory
    std::string arch_id;
    std::string dataset_id;
    std::size_t epoch = 0;
    double test_accuracy = 0.0;
    double train_accuracy = 0.0;
    double ggap = 0.0;  // train - test
    bool diverged = false;
};

struct ZooConfig {
    std::vector<ArchitectureSpec> specs;
    std::vector<SyntheticDataset> datasets;
    std::size_t epochs = 6;
    std::vector<std::size_t> checkpoints_at = {1, 2, 3, 4, 5, 6};
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

ZooConfig default_zoo_config(std::uint64_t seed);
ZooConfig smoke_zoo_config(std::uint64_t seed);

// Trains every (spec, dataset) pair with SGD, saving a checkpoint plus
// measured accuracies at each requested epoch. Writes zoo.jsonl,
// zoo_meta.json and an ingest manifest into out_dir.
std::vector<ZooRecord> generate_zoo(const ZooConfig& cfg,
                                    const std::filesystem::path& out_dir);

struct ZooIndex {
    std::filesystem::path dir;
    std::vector<ZooRecord> records;
    std::map<std::string, ArchitectureSpec> archs;
    std::map<std::string, SyntheticDataset> datasets;
};

ZooIndex load_zoo(const std::filesystem::path& dir);

// Deterministic forward pass on the test split; argmax ties resolve to the
// lowest class index.
double evaluate_weights(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                        const SyntheticDataset& ds);

struct FinetuneResult {
    WeightCheckpoint weights;
    std::vector<double> accuracy;  // test accuracy after each epoch
};

FinetuneResult finetune(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                        const SyntheticDataset& ds, std::size_t epochs, double learning_rate);

// Architecture-agnostic probe input: mean of all per-token latents of the
// full sequence, processed in window-size chunks.
std::vector<double> mean_pool_embed(const Backbone& b, const WeightCheckpoint& w);

double r2_score(const std::vector<double>& truth, const std::vector<double>& pred);

// 70/15/15 split by split_seed, ridge (1e-6) least squares on the train
// portion, explained variance on the test portion.
double linear_probe(const Matrix& embeddings, const std::vector<double>& targets,
                    std::uint64_t split_seed);

}  // namespace weightspace
