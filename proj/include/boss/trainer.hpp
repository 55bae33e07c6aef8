#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "boss/data.hpp"
#include "boss/optim.hpp"
#include "boss/supernet.hpp"

namespace boss {

enum class MomentumSchedule { constant, cosine_to_one };
enum class Bootstrap { ensemble, naive };

struct TrainConfig {
  std::size_t paths_per_step = 4;
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;  // optimizer.lr is the base learning rate
  double tau = 0.99;
  MomentumSchedule tau_schedule = MomentumSchedule::constant;
  Bootstrap bootstrap = Bootstrap::ensemble;
  bool symmetrize = false;
  bool softmax_ensemble = false;
  AugmentPolicy augment;
  int projection_hidden = 64;
  int projection_out = 32;
  int predictor_hidden = 32;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

/// Throws std::invalid_argument on inconsistent settings (e.g. an ensemble
/// of fewer than two paths).
void validate_train_config(const TrainConfig& config);

/// Online and target supernets (projection heads included) plus the
/// online-only predictors, one per block.
struct SiameseState {
  SiameseState(const SearchSpaceDef& space, const TrainConfig& config);

  Supernet online;
  Supernet target;
  std::vector<Head> predictors;
  double tau = 0.99;
  std::uint64_t step = 0;

  std::vector<StoreRef> store_refs();
};

/// target = tau*target + (1-tau)*online for every parameter of the target
/// supernet, projection heads included.
void ema_update(SiameseState& state, double tau);

/// Row-wise normalize(mean_p normalize(z_p)) of stored [N,D] vectors. With
/// softmax=true each member is passed through a softmax before averaging.
/// A single member (or equal members) comes back unchanged.
Tensor ensemble_mean(const std::vector<Tensor>& members, bool softmax = false);

/// Target-network vectors indexed [path][block]: each path's block output
/// on its own view (target prefix), pooled, projected, normalized.
std::vector<std::vector<Tensor>> target_vectors(SiameseState& state, const std::vector<Architecture>& paths,
                                   const std::vector<Tensor>& views, bool train_bn = true);

/// ensemble_mean over the target vectors of block k for all paths.
Tensor ensemble_target(SiameseState& state, std::size_t k, const std::vector<Architecture>& paths,
                       const std::vector<Tensor>& views, bool softmax = false);

/// sum_i ||z_i - target_i||^2 / N for [N,D] rows; target carries no gradient.
Var bootstrap_loss(Var z, const Tensor& target);

struct StepResult {
  std::vector<double> block_loss;  // mean over paths and batch
  double lr = 0.0;
  double tau = 0.0;
};

/// One optimization step on a batch of source images (pixels in [0,1]):
/// samples paths, builds per-path view pairs, regresses online predictions
/// to the bootstrap target, steps the optimizer on the touched stores, then
/// applies the EMA.
StepResult train_step(SiameseState& state, const TrainConfig& config, const Tensor& source_images,
                      const ChannelStats& stats, Rng& path_rng, Rng& view_rng, double lr, double tau);

/// One independent view pair per path.
std::vector<std::pair<Tensor, Tensor>> make_training_views(const Tensor& source_images, std::size_t paths,
                                                           const AugmentPolicy& policy, const ChannelStats& stats,
                                                           Rng& rng);

double momentum_at(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::size_t block = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<std::filesystem::path> checkpoints;
};

/// Trains all blocks jointly. When checkpoint_dir is set, writes
/// epoch_000 (untrained) and one checkpoint after every epoch.
TrainResult train_supernet(SiameseState& state, const TrainConfig& config, const DatasetSplit& nas_train,
                           const ChannelStats& stats, const std::optional<std::filesystem::path>& checkpoint_dir,
                           const nlohmann::json& meta = nlohmann::json::object(),
                           const std::function<void(const EpochLog&)>& on_log = {});

void save_state(SiameseState& state, const std::filesystem::path& stem, const nlohmann::json& meta);
/// Restores a state written by save_state; returns the manifest meta.
nlohmann::json load_state(SiameseState& state, const std::filesystem::path& manifest);

std::string format_log_csv(const std::vector<EpochLog>& log);

}  // namespace boss
