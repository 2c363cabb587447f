#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssng/config.hpp"
#include "ssng/data.hpp"

namespace ssng::runner {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Command line entry point: ssng <train-ssl|train-ssng|probe|topsim|collapse-report|plot> ...
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

std::string code_version();

// Config snapshot, code version, dataset checksums and timings.
void write_manifest(const std::filesystem::path& path, const std::string& command, const ExperimentConfig& cfg,
                    const data::LoadedDataset* dataset, double wall_seconds,
                    const nlohmann::json& outputs = nlohmann::json::object());

// Reads `path` (if present), sets `key`, writes it back.
void merge_report(const std::filesystem::path& path, const std::string& key, const nlohmann::json& value);

}  // namespace ssng::runner
