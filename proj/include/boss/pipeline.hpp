#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "boss/config.hpp"

namespace boss {

/// A command's input is not on disk; `path` names what was looked for.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(std::filesystem::path path, const std::string& message)
      : std::runtime_error(message), path_(std::move(path)) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Artifact locations under the output directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path train_log() const { return root / "train_log.csv"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path ratings() const { return root / "ratings.csv"; }
  std::filesystem::path best_architecture() const { return root / "best_architecture.json"; }
  std::filesystem::path oracle() const { return root / "oracle.csv"; }
  std::filesystem::path correlation() const { return root / "correlation.json"; }
  std::filesystem::path convergence_csv() const { return root / "convergence.csv"; }
  std::filesystem::path convergence_json() const { return root / "convergence.json"; }
  std::filesystem::path summary() const { return root / "summary.json"; }
};

RunPaths run_paths(const RunConfig& config);

/// The four splits plus the nas-train channel statistics used by every
/// stage.
struct RunData {
  Dataset dataset;
  ChannelStats stats;
};
RunData build_run_data(const RunConfig& config);

/// Distinct seeded sample of the space (the whole space when it has fewer
/// architectures than requested), in draw order.
std::vector<Architecture> oracle_architectures(const SearchSpaceDef& space, const RunConfig& config);

/// Checkpoint manifests under dir, sorted by file name (epoch order).
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);

/// Runs one of train, search, oracle, correlate, track, report. Progress
/// goes to `log`; returns the artifact paths written.
std::vector<std::filesystem::path> dispatch(const std::string& command, const RunConfig& config, std::ostream& log);

}  // namespace boss
