#include "weightspace/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "weightspace/errors.hpp"
#include "weightspace/tokenizer.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");

namespace weightspace {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kNonTrainableSubstrings[] = {"running_mean", "running_var",
                                                   "num_batches"};

std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

std::size_t LayerTensor::param_count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string Layout::id() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& entry : entries) {
        h = fnv1a(h, entry.name.data(), entry.name.size());
        const std::uint64_t rank = entry.shape.size();
        h = fnv1a(h, &rank, sizeof(rank));
        for (std::size_t d : entry.shape) {
            const std::uint64_t dim = d;
            h = fnv1a(h, &dim, sizeof(dim));
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

Layout WeightCheckpoint::layout() const {
    Layout out;
    out.entries.reserve(layers.size());
    for (const auto& layer : layers) out.entries.push_back({layer.name, layer.shape});
    out.non_trainable = non_trainable_names;
    return out;
}

std::string WeightCheckpoint::layout_id() const { return layout().id(); }

std::size_t WeightCheckpoint::param_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.data.size();
    return n;
}

const LayerTensor* WeightCheckpoint::find(const std::string& name) const {
    for (const auto& layer : layers) {
        if (layer.name == name) return &layer;
    }
    return nullptr;
}

void WeightCheckpoint::validate() const {
    for (const auto& layer : layers) {
        if (layer.param_count() != layer.data.size()) {
            throw InvariantViolation("layer '" + layer.name +
                                     "' shape product does not match data length");
        }
    }
    for (const auto& name : non_trainable_names) {
        if (find(name) == nullptr) {
            throw InvariantViolation("non-trainable name '" + name + "' is not a layer");
        }
    }
}

std::set<std::string> default_non_trainable(const std::vector<std::string>& names) {
    std::set<std::string> out;
    for (const auto& name : names) {
        for (const char* marker : kNonTrainableSubstrings) {
            if (name.find(marker) != std::string::npos) {
                out.insert(name);
                break;
            }
        }
    }
    return out;
}

WeightCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() < 8) throw FormatError("file too small for header length");

    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) {
        throw FormatError("header length exceeds file size");
    }

    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("header must be a JSON object");

    const std::size_t data_size = bytes.size() - 8 - header_len;
    const char* data_base = bytes.data() + 8 + header_len;

    WeightCheckpoint ckpt;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& [name, meta] : header.items()) {
        if (name == "__metadata__") continue;
        if (!meta.is_object() || !meta.contains("dtype") || !meta.contains("shape") ||
            !meta.contains("data_offsets")) {
            throw FormatError("tensor entry '" + name + "' is malformed");
        }
        const std::string dtype = meta["dtype"].get<std::string>();
        if (dtype != "F32") {
            throw UnsupportedDtype("tensor '" + name + "' has dtype " + dtype +
                                   "; only F32 is accepted");
        }

        LayerTensor layer;
        layer.name = name;
        std::size_t count = 1;
        for (const auto& dim : meta["shape"]) {
            if (!dim.is_number_unsigned()) throw FormatError("negative or non-integer dim");
            const std::size_t d = dim.get<std::size_t>();
            layer.shape.push_back(d);
            count *= d;
        }

        const auto& offsets = meta["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2) {
            throw FormatError("tensor '" + name + "' has malformed data_offsets");
        }
        const std::uint64_t begin = offsets[0].get<std::uint64_t>();
        const std::uint64_t end = offsets[1].get<std::uint64_t>();
        if (begin > end || end > data_size) {
            throw FormatError("tensor '" + name + "' offsets out of bounds");
        }
        if (end - begin != count * sizeof(float)) {
            throw FormatError("tensor '" + name + "' byte span does not match shape");
        }

        layer.data.resize(count);
        std::memcpy(layer.data.data(), data_base + begin, count * sizeof(float));
        spans.emplace_back(begin, end);
        ckpt.layers.push_back(std::move(layer));
    }

    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) throw FormatError("tensor spans overlap");
    }

    std::vector<std::string> names;
    names.reserve(ckpt.layers.size());
    for (const auto& layer : ckpt.layers) names.push_back(layer.name);
    ckpt.non_trainable_names = default_non_trainable(names);
    return ckpt;
}

void save_checkpoint(const WeightCheckpoint& ckpt, const std::filesystem::path& path) {
    ckpt.validate();

    ordered_json header = ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& layer : ckpt.layers) {
        const std::uint64_t bytes = layer.data.size() * sizeof(float);
        header[layer.name] = {{"dtype", "F32"},
                              {"shape", layer.shape},
                              {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path.string());

    const std::uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& layer : ckpt.layers) {
        out.write(reinterpret_cast<const char*>(layer.data.data()),
                  static_cast<std::streamsize>(layer.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(read_all(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!doc.is_array()) throw FormatError("manifest must be a JSON array");

    const auto base = manifest_path.parent_path();
    std::vector<ManifestEntry> entries;
    for (const auto& item : doc) {
        ManifestEntry entry;
        std::filesystem::path p = item.at("path").get<std::string>();
        entry.path = p.is_absolute() ? p : base / p;
        entry.model_id = item.contains("model_id") ? item["model_id"].get<std::string>()
                                                   : p.stem().string();
        if (item.contains("tags")) {
            for (const auto& tag : item["tags"]) entry.tags.push_back(tag.get<std::string>());
        }
        if (item.contains("non_trainable")) {
            std::vector<std::string> names;
            for (const auto& n : item["non_trainable"]) names.push_back(n.get<std::string>());
            entry.non_trainable = std::move(names);
        }
        entries.push_back(std::move(entry));
    }
    return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& manifest_path) {
    const auto base = manifest_path.parent_path();
    ordered_json doc = ordered_json::array();
    for (const auto& entry : entries) {
        ordered_json item;
        std::error_code ec;
        const auto rel = std::filesystem::relative(entry.path, base, ec);
        item["path"] = (ec || rel.empty()) ? entry.path.string() : rel.string();
        item["model_id"] = entry.model_id;
        item["tags"] = entry.tags;
        if (entry.non_trainable) item["non_trainable"] = *entry.non_trainable;
        doc.push_back(std::move(item));
    }
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + manifest_path.string());
    out << doc.dump(2) << '\n';
}

std::vector<ManifestEntry> collect_models(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (std::filesystem::exists(manifest_path)) return read_manifest(manifest_path);

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".st") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());

    std::vector<ManifestEntry> entries;
    for (const auto& file : files) {
        entries.push_back({file, file.stem().string(), {}, std::nullopt});
    }
    return entries;
}

IngestReport sanity_check(const ManifestEntry& entry, std::size_t token_size) {
    IngestReport report;
    report.model_id = entry.model_id;

    WeightCheckpoint ckpt;
    try {
        ckpt = load_checkpoint(entry.path);
        report.loadable = true;
    } catch (const UnsupportedDtype&) {
        report.reject_reason = "dtype";
        return report;
    } catch (const Error&) {
        report.reject_reason = "format";
        return report;
    }

    if (entry.non_trainable) {
        ckpt.non_trainable_names.clear();
        for (const auto& name : *entry.non_trainable) {
            if (ckpt.find(name) != nullptr) ckpt.non_trainable_names.insert(name);
        }
    }

    try {
        const TokenSequence dense = tokenize_dense(ckpt, token_size);
        const TokenSequence sparse = tokenize_sparse(ckpt, token_size);
        report.tokenizable = true;
        report.token_count_dense = dense.count();
        report.token_count_sparse = sparse.count();
    } catch (const EmptyLayer&) {
        report.reject_reason = "empty layer";
    } catch (const Error&) {
        report.reject_reason = "tokenize";
    }
    return report;
}

IngestReport sanity_check(const std::filesystem::path& path, std::size_t token_size) {
    return sanity_check(ManifestEntry{path, path.stem().string(), {}, std::nullopt},
                        token_size);
}

CollectionStats collection_stats(const std::vector<ManifestEntry>& manifest,
                                 std::size_t token_size) {
    if (manifest.empty()) throw EmptyCollection("manifest is empty");

    CollectionStats stats;
    std::size_t signal_dense = 0, total_dense = 0;
    std::size_t signal_sparse = 0, total_sparse = 0;

    for (const auto& entry : manifest) {
        const IngestReport report = sanity_check(entry, token_size);
        if (!report.accepted()) continue;

        // Accepted above, so this cannot throw.
        const WeightCheckpoint ckpt = load_checkpoint(entry.path);
        const TokenSequence dense = tokenize_dense(ckpt, token_size);
        const TokenSequence sparse = tokenize_sparse(ckpt, token_size);

        stats.num_models += 1;
        stats.num_tokens_dense += dense.count();
        stats.num_tokens_sparse += sparse.count();
        signal_dense += dense.signal_count();
        total_dense += dense.count() * token_size;
        signal_sparse += sparse.signal_count();
        total_sparse += sparse.count() * token_size;

        const std::string group = entry.tags.empty() ? "unknown" : entry.tags.front();
        stats.group_counts[group] += 1;
    }

    if (stats.num_models == 0) throw EmptyCollection("every model in the manifest was rejected");
    stats.padding_fraction_dense =
        1.0 - static_cast<double>(signal_dense) / static_cast<double>(total_dense);
    stats.padding_fraction_sparse =
        1.0 - static_cast<double>(signal_sparse) / static_cast<double>(total_sparse);
    return stats;
}

}  // namespace weightspace
