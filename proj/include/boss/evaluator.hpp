#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "boss/data.hpp"
#include "boss/supernet.hpp"

namespace boss {

/// One frozen, normalized view pair per validation sample.
struct FixedViewSet {
  Tensor x1;
  Tensor x2;
  std::uint64_t seed = 0;
  std::string source;

  std::size_t size() const { return x1.rank() == 0 ? 0 : x1.dim(0); }
};

/// limit > 0 keeps only the first `limit` samples of the split.
FixedViewSet build_fixed_views(const DatasetSplit& split, std::uint64_t seed, const AugmentPolicy& policy,
                               const ChannelStats& stats, std::size_t limit = 0);

/// Evaluation forwards use eval-mode batchnorm, so chunking does not change
/// results.
struct EvalOptions {
  std::size_t chunk = 128;  // samples per forward
};

/// Feature maps entering a block on both views.
struct BlockInput {
  int entry_scale = 0;
  Tensor f1;
  Tensor f2;
};

/// Normalized projected block outputs on x1 and x2, [N, D] each.
struct PathVectors {
  Tensor v1;
  Tensor v2;
};

BlockInput stem_input(Supernet& net, const FixedViewSet& views, const EvalOptions& opts = {});
/// Runs a block path on both views of `in`; the result enters block k+1.
BlockInput advance(Supernet& net, std::size_t k, const BlockPath& path, const BlockInput& in,
                   const EvalOptions& opts = {});
PathVectors path_vectors(Supernet& net, std::size_t k, const BlockPath& path, const BlockInput& in,
                         const EvalOptions& opts = {});

/// Normalized mean of the members' x2 vectors.
Tensor population_center(const std::vector<PathVectors>& members);
Tensor population_center(Supernet& net, std::size_t k, const std::vector<BlockPath>& population, const BlockInput& in,
                         const EvalOptions& opts = {});

/// Mean over samples of ||v1 - center||^2.
double rating_loss(const PathVectors& candidate, const Tensor& center);
std::vector<double> rate_block_candidates(const std::vector<PathVectors>& candidates, const Tensor& center);

/// Index of the smallest value; ties keep the lowest index.
std::size_t argmin_first(const std::vector<double>& values);

/// Ratings of every enumerated path of block k from one entry scale, all
/// against the same center and the same prefix features.
struct BlockRatings {
  std::size_t block = 0;
  int entry_scale = 0;
  Architecture prefix;  // blocks [0, k) feeding this rating
  std::vector<BlockPath> paths;
  std::vector<double> loss;
};

struct TraversalResult {
  Architecture best;
  double best_total = 0.0;
  std::vector<double> best_block_loss;
  std::vector<BlockRatings> ratings;

  /// Rating of block k's path when entered at entry_scale; throws if that
  /// path was not enumerated.
  double lookup(std::size_t k, int entry_scale, const BlockPath& path) const;
};

/// Rates every path of every block against its population center (the
/// block's full enumeration). Block k is fed by the best prefix reaching
/// its entry scale, ranked by the lambda-weighted running total; with a
/// single entry scale per block this is greedy block-by-block selection.
/// Throws when a block exceeds the traversal cap.
TraversalResult traversal_search(Supernet& net, const FixedViewSet& views, const std::vector<double>& lambda,
                                 const EvalOptions& opts = {});

struct EvolutionConfig {
  std::size_t population = 16;
  std::size_t generations = 8;
  double mutation_rate = 0.5;
  std::uint64_t seed = 0;

  bool operator==(const EvolutionConfig&) const = default;
};

struct GenerationRecord {
  std::size_t block = 0;
  std::size_t generation = 0;  // 1-based
  std::vector<BlockPath> population;
  std::vector<double> loss;
  BlockPath best;
  double best_loss = 0.0;
};

struct EvolutionResult {
  Architecture best;
  std::vector<double> best_block_loss;
  std::vector<GenerationRecord> history;
};

/// Per block: the population center is recomputed from the current
/// generation, the better half survives and is refilled by single-gene
/// mutants (or copies) of survivors. Block k+1 is fed through block k's
/// final best. A population at least as large as the block's path count
/// starts as the full enumeration.
EvolutionResult evolutionary_search(Supernet& net, const FixedViewSet& views, const EvolutionConfig& config,
                                    const EvalOptions& opts = {});

struct RatingTable {
  std::string checkpoint;
  std::uint64_t view_seed = 0;
  std::string prefix_policy = "best-prefix";
  std::vector<double> lambda;
  std::string digest;
  std::vector<std::string> architectures;
  std::vector<std::vector<double>> block_loss;
  std::vector<double> total;

  std::size_t rows() const { return architectures.size(); }
};

/// sum_k lambda_k * loss_k, accumulated in block order.
double weighted_total(const std::vector<double>& block_loss, const std::vector<double>& lambda);

RatingTable rate_architecture_set(const SearchSpaceDef& space, const TraversalResult& traversal,
                                  const std::vector<Architecture>& architectures, const std::vector<double>& lambda);
RatingTable rate_architecture_set(Supernet& net, const std::vector<Architecture>& architectures,
                                  const FixedViewSet& views, const std::vector<double>& lambda,
                                  const EvalOptions& opts = {});

/// Row order of argsort(total), ties broken by row index.
std::vector<std::size_t> rank_order(const RatingTable& table);

/// "# key=value,..." metadata line, column header, one row per architecture.
std::string format_rating_csv(const RatingTable& table);
RatingTable parse_rating_csv(const std::string& text);
void write_rating_csv(const RatingTable& table, const std::filesystem::path& path);
RatingTable read_rating_csv(const std::filesystem::path& path);

}  // namespace boss
