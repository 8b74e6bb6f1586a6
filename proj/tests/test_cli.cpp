#include <doctest.h>

#include <fstream>

#include "test_support.hpp"
#include "weightspace/cli.hpp"

using namespace weightspace;
using weightspace::cli::pipeline_report;
using weightspace::cli::run;
using weightspace::testing::TempDir;

namespace {

using nlohmann::json;

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

// Checks the schema subset the published report schema uses: type,
// required, properties, items.
bool matches_schema(const json& value, const json& schema, std::string* why) {
    if (schema.contains("type")) {
        const std::string type = schema["type"].get<std::string>();
        const bool ok = (type == "object" && value.is_object()) ||
                        (type == "array" && value.is_array()) ||
                        (type == "string" && value.is_string()) ||
                        (type == "boolean" && value.is_boolean()) ||
                        (type == "integer" && value.is_number_integer()) ||
                        (type == "number" && value.is_number());
        if (!ok) {
            *why = "expected " + type + ", got " + value.dump().substr(0, 40);
            return false;
        }
    }
    if (schema.contains("required")) {
        for (const auto& key : schema["required"]) {
            if (!value.contains(key.get<std::string>())) {
                *why = "missing required key " + key.get<std::string>();
                return false;
            }
        }
    }
    if (schema.contains("properties")) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (value.contains(key) && !matches_schema(value[key], sub, why)) {
                *why = key + ": " + *why;
                return false;
            }
        }
    }
    if (schema.contains("items") && value.is_array()) {
        for (const auto& item : value) {
            if (!matches_schema(item, schema["items"], why)) return false;
        }
    }
    return true;
}

// A fast end-to-end run into `dir`; returns the exit code of the first
// failing stage (0 when everything passed).
int smoke_pipeline(const std::filesystem::path& dir, const std::string& seed) {
    const std::string zoo = (dir / "zoo").string();
    const std::string tokens = (dir / "tokens").string();
    const std::string backbone = (dir / "backbone.st").string();

    const std::vector<std::vector<std::string>> stages = {
        {"zoo", "generate", "--out", zoo, "--preset", "smoke", "--seed", seed},
        {"ingest", "--dir", zoo, "--token-size", "16", "--out",
         (dir / "ingest_report.json").string()},
        {"tokenize", "--dir", zoo, "--scheme", "dense", "--token-size", "16", "--out",
         tokens},
        {"train", "--data", tokens, "--out", backbone, "--epochs", "2", "--seed", seed,
         "--model-dim", "24", "--latent-dim", "6", "--layers", "1", "--heads", "2",
         "--window", "16", "--subsample", "8", "--batch-size", "6"},
        {"sample", "--backbone", backbone, "--anchors", zoo, "--count", "2", "--keep", "1",
         "--halo", "2", "--seed", seed, "--out", (dir / "generated").string()},
        {"zoo", "eval", "--dir", zoo, "--out", (dir / "zoo_eval.json").string()},
        {"probe", "--zoo", zoo, "--backbone", backbone, "--target", "epoch", "--seed", seed,
         "--out", (dir / "probe.json").string()},
        {"report", "--run", dir.string()},
    };
    for (const auto& stage : stages) {
        const int code = run(stage);
        if (code != 0) return code;
    }
    return 0;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("help exits zero, unknown flags exit one") {
    CHECK(run({"--help"}) == 0);
    CHECK(run({"ingest", "--help"}) == 0);
    CHECK(run({"ingest", "--bogus-flag", "x"}) == 1);
    CHECK(run({"no-such-command"}) == 1);
    CHECK(run({}) == 1);
}

TEST_CASE("runtime failures exit two") {
    TempDir dir("cli");
    CHECK(run({"ingest", "--dir", (dir.path() / "nowhere").string(), "--token-size", "8",
               "--out", (dir.path() / "r.json").string()}) == 2);
    CHECK(run({"probe", "--zoo", dir.path().string(), "--backbone", "missing.st", "--out",
               (dir.path() / "p.json").string()}) == 2);
}

TEST_CASE("validation failures exit one") {
    TempDir dir("cli");
    REQUIRE(run({"zoo", "generate", "--out", (dir.path() / "zoo").string(), "--preset",
                 "smoke", "--seed", "5"}) == 0);
    // keep > count is a validation error.
    CHECK(run({"sample", "--backbone", "missing.st", "--anchors",
               (dir.path() / "zoo").string(), "--count", "2", "--keep", "5", "--out",
               (dir.path() / "g").string()}) == 1);
}

TEST_CASE("full smoke pipeline produces a complete report") {
    TempDir dir("cli");
    REQUIRE(smoke_pipeline(dir.path(), "11") == 0);

    const auto report = pipeline_report(dir.path());
    CHECK(report.at("complete").get<bool>());
    CHECK(report.at("missing").empty());
    CHECK(report.at("stages").contains("zoo"));
    CHECK(report.at("stages").contains("ingest"));
    CHECK(report.at("stages").contains("tokenize"));
    CHECK(report.at("stages").contains("train"));
    CHECK(report.at("stages").contains("sample"));
    CHECK(report.at("stages").contains("probe"));
    CHECK(report.at("stages").at("ingest").at("collection").at("num_models").get<int>() >
          0);
    CHECK(std::filesystem::exists(dir.path() / "report.json"));

    // A complete report validates against the published schema.
    std::ifstream schema_in(std::filesystem::path(WEIGHTSPACE_SOURCE_DIR) / "docs" /
                            "report.schema.json");
    REQUIRE(schema_in.good());
    const json schema = json::parse(schema_in);
    std::string why;
    const bool valid = matches_schema(report, schema, &why);
    CAPTURE(why);
    CHECK(valid);

    // Every stage left a resolved-config snapshot beside its outputs.
    CHECK(std::filesystem::exists(dir.path() / "zoo" / "zoo_config.json"));
    CHECK(std::filesystem::exists(dir.path() / "ingest_config.json"));
    CHECK(std::filesystem::exists(dir.path() / "tokens" / "tokenize_config.json"));
    CHECK(std::filesystem::exists(dir.path() / "train_config.json"));
    CHECK(std::filesystem::exists(dir.path() / "generated" / "sample_config.json"));
    CHECK(std::filesystem::exists(dir.path() / "probe_config.json"));
}

TEST_CASE("a partial run lists its gaps") {
    TempDir dir("cli");
    const auto report = pipeline_report(dir.path());
    CHECK(!report.at("complete").get<bool>());
    CHECK(report.at("missing").size() == 6);
}

TEST_CASE("commands are idempotent and do not mutate inputs") {
    TempDir dir("cli");
    const std::string zoo = (dir.path() / "zoo").string();
    REQUIRE(run({"zoo", "generate", "--out", zoo, "--preset", "smoke", "--seed", "3"}) ==
            0);
    const std::string zoo_bytes = slurp(dir.path() / "zoo" / "zoo.jsonl");

    const std::string out1 = (dir.path() / "t1").string();
    const std::string out2 = (dir.path() / "t2").string();
    REQUIRE(run({"tokenize", "--dir", zoo, "--scheme", "sparse", "--token-size", "8",
                 "--out", out1}) == 0);
    REQUIRE(run({"tokenize", "--dir", zoo, "--scheme", "sparse", "--token-size", "8",
                 "--out", out2}) == 0);

    for (const auto& entry : std::filesystem::directory_iterator(out1)) {
        const auto other = std::filesystem::path(out2) / entry.path().filename();
        CHECK(slurp(entry.path()) == slurp(other));
    }
    CHECK(slurp(dir.path() / "zoo" / "zoo.jsonl") == zoo_bytes);
}

TEST_SUITE_END();
