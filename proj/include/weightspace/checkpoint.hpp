#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace weightspace {

struct LayerTensor {
    std::string name;
    std::vector<std::size_t> shape;  // row-major; empty shape = scalar
    std::vector<float> data;

    std::size_t param_count() const;
    bool operator==(const LayerTensor&) const = default;
};

struct Layout {
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        bool operator==(const Entry&) const = default;
    };
    std::vector<Entry> entries;
    std::set<std::string> non_trainable;

    std::string id() const;  // stable hash over the ordered (name, shape) list
    bool same_shapes(const Layout& other) const { return entries == other.entries; }
};

struct WeightCheckpoint {
    std::vector<LayerTensor> layers;
    std::set<std::string> non_trainable_names;

    Layout layout() const;
    std::string layout_id() const;
    std::size_t param_count() const;
    const LayerTensor* find(const std::string& name) const;

    // Throws InvariantViolation on shape/data mismatch or unknown
    // non-trainable names.
    void validate() const;

    bool operator==(const WeightCheckpoint&) const = default;
};

// Names matching these substrings are non-trainable by default:
// running_mean, running_var, num_batches.
std::set<std::string> default_non_trainable(const std::vector<std::string>& names);

WeightCheckpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const WeightCheckpoint& ckpt, const std::filesystem::path& path);

struct ManifestEntry {
    std::filesystem::path path;
    std::string model_id;
    std::vector<std::string> tags;
    std::optional<std::vector<std::string>> non_trainable;  // overrides the default rule
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& manifest_path);
// Uses <dir>/manifest.json when present, otherwise scans for tensor files.
std::vector<ManifestEntry> collect_models(const std::filesystem::path& dir);

struct IngestReport {
    std::string model_id;
    bool loadable = false;
    bool tokenizable = false;
    std::optional<std::string> reject_reason;
    std::size_t token_count_dense = 0;
    std::size_t token_count_sparse = 0;

    bool accepted() const { return loadable && tokenizable; }
};

// Total by design: failures land in the report, never as exceptions.
IngestReport sanity_check(const std::filesystem::path& path, std::size_t token_size);
IngestReport sanity_check(const ManifestEntry& entry, std::size_t token_size);

struct CollectionStats {
    std::size_t num_models = 0;
    std::size_t num_tokens_dense = 0;
    std::size_t num_tokens_sparse = 0;
    double padding_fraction_dense = 0.0;
    double padding_fraction_sparse = 0.0;
    std::map<std::string, std::size_t> group_counts;  // first manifest tag -> count
};

CollectionStats collection_stats(const std::vector<ManifestEntry>& manifest,
                                 std::size_t token_size);

}  // namespace weightspace
