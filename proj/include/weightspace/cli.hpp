#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace weightspace::cli {

// Entry point behind the binary. args excludes the program name.
// Exit codes: 0 success, 1 validation error, 2 runtime error.
int run(const std::vector<std::string>& args);

// Merge the stage outputs found under run_dir into one report. Stages that
// have not produced their output file are listed under "missing".
nlohmann::json pipeline_report(const std::filesystem::path& run_dir);

}  // namespace weightspace::cli
