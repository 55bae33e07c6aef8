#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "boss/data.hpp"
#include "boss/evaluator.hpp"
#include "boss/optim.hpp"
#include "boss/search_space.hpp"

namespace boss {

/// Coefficients are empty (undefined) when either variable is constant.
/// All three throw std::invalid_argument on length mismatch or n < 2.
std::optional<double> kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y);
std::optional<double> spearman_rho(const std::vector<double>& x, const std::vector<double>& y);
std::optional<double> pearson_r(const std::vector<double>& x, const std::vector<double>& y);

/// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& x);

struct OracleConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double lr = 0.05;  // cosine decay, no warmup
  double momentum = 0.9;
  double weight_decay = 0.0;
  AugmentPolicy augment{true, false, false, false};  // flips mirror grating orientation

  bool operator==(const OracleConfig&) const = default;
};

struct OracleRecord {
  std::string architecture;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::size_t epochs = 0;
  std::string notes;
};

/// Trains stem + the architecture's blocks + pool + linear classifier from
/// scratch with cross-entropy and reports top-1 accuracy on `test`.
OracleRecord oracle_train(const SearchSpaceDef& space, const Architecture& arch, const DatasetSplit& train,
                          const DatasetSplit& test, const ChannelStats& stats, const OracleConfig& config,
                          std::uint64_t seed);

std::string format_oracle_csv(const std::vector<OracleRecord>& records);
/// Leading "#" comment lines are skipped.
std::vector<OracleRecord> parse_oracle_csv(const std::string& text);

struct CorrelationReport {
  std::optional<double> kendall_tau;
  std::optional<double> spearman_rho;
  std::optional<double> pearson_r;
  std::size_t n = 0;
};

/// Inner join on the architecture string (oracle seeds averaged), then
/// correlates the negated rating totals with the accuracies. Throws when
/// fewer than 3 architectures join.
CorrelationReport correlate(const RatingTable& ratings, const std::vector<OracleRecord>& oracle);

/// Undefined coefficients are written as the string "undefined".
nlohmann::json report_json(const CorrelationReport& report);

struct EpochCorrelation {
  std::size_t epoch = 0;
  std::string checkpoint;
  CorrelationReport report;
};

/// Loads each checkpoint into `net`, rates the oracle architectures on the
/// same fixed views and correlates. The epoch is read from the checkpoint
/// meta when present, else the position in the series.
std::vector<EpochCorrelation> convergence_track(Supernet& net, const std::vector<std::filesystem::path>& checkpoints,
                                                const FixedViewSet& views, const std::vector<OracleRecord>& oracle,
                                                const std::vector<double>& lambda, const EvalOptions& opts = {});

}  // namespace boss
