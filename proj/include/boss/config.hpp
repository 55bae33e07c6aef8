#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "boss/data.hpp"
#include "boss/evaluator.hpp"
#include "boss/ranking.hpp"
#include "boss/search_space.hpp"
#include "boss/trainer.hpp"

namespace boss {

/// Rejected configuration; `path` is the dotted key at fault.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::invalid_argument(message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | cifar10
  std::vector<std::string> cifar10_paths;
  int classes = 8;  // synthetic only
  SyntheticOptions synthetic;
  SplitSizes splits;
  std::int64_t seed = -1;  // -1: derived from the global seed

  bool operator==(const DatasetConfig&) const = default;
};

struct EvaluatorConfig {
  std::int64_t view_seed = -1;
  std::vector<double> lambda;  // empty: all ones
  std::size_t val_subset = 512;
  std::size_t traversal_cap = 4096;
  std::size_t chunk = 128;
  std::string method = "traversal";  // traversal | evolution
  EvolutionConfig evolution;        // evolution.seed unused; see evolution_seed
  std::int64_t evolution_seed = -1;
  std::size_t table_limit = 4096;  // full table when the space is at most this large
  std::string checkpoint;          // empty: latest under the output directory

  bool operator==(const EvaluatorConfig&) const = default;
};

struct OracleRunConfig {
  std::size_t architectures = 24;
  std::size_t seeds = 3;
  std::int64_t seed = -1;
  OracleConfig train;

  bool operator==(const OracleRunConfig&) const = default;
};

struct RunConfig {
  std::string space = "mbconv-mini";
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0: available parallelism
  std::string output_dir = "boss-run";
  DatasetConfig dataset;
  TrainConfig trainer;            // trainer.seed unused; the document's trainer.seed is trainer_seed
  std::int64_t trainer_seed = -1;
  EvaluatorConfig evaluator;
  OracleRunConfig oracle;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);

/// Fully defaulted document; also the schema that parse_config validates
/// against.
nlohmann::json default_config_json();

/// Merges `document` over the defaults, then applies "dotted.key=value"
/// overrides (values parsed as JSON, falling back to a bare string).
/// Throws ConfigError on unknown keys, type mismatches and invalid enums.
RunConfig parse_config(const nlohmann::json& document, const std::vector<std::string>& overrides = {});
RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});

/// Canonical serialized form (sorted keys, 2-space indent).
std::string serialize_config(const RunConfig& config);

/// 16 hex digits over the canonical form without output_dir and workers,
/// which do not affect any artifact.
std::string config_digest(const RunConfig& config);

/// The explicit seed when non-negative, else derive_seed(global, label).
std::uint64_t stage_seed(const RunConfig& config, std::int64_t explicit_seed, const std::string& label);

SearchSpaceDef run_space(const RunConfig& config);
TrainConfig run_train_config(const RunConfig& config);
EvolutionConfig run_evolution_config(const RunConfig& config);
std::vector<double> run_lambda(const RunConfig& config, std::size_t blocks);
std::size_t run_workers(const RunConfig& config);

}  // namespace boss
