#include "boss/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace boss {

namespace {

Supernet make_online(const SearchSpaceDef& space, const TrainConfig& config) {
  Rng rng(derive_seed(config.seed, "init"));
  return Supernet(space, rng, config.projection_hidden, config.projection_out);
}

// Row-wise softmax of a [N,D] tensor.
Tensor softmax_rows(const Tensor& t) {
  Tensor out = t;
  const std::size_t n = t.dim(0), d = t.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data.data() + i * d;
    double m = row[0];
    for (std::size_t j = 1; j < d; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < d; ++j) row[j] /= s;
  }
  return out;
}

using GradMap = std::map<ParameterStore*, std::map<std::string, std::vector<double>>>;

void accumulate(GradMap& acc, const std::vector<ParameterStore*>& stores) {
  for (ParameterStore* s : stores) {
    auto& slot = acc[s];
    for (auto& [id, p] : s->params()) {
      auto& g = slot[id];
      if (g.empty()) g.assign(p.size(), 0.0);
      const auto& pg = *p.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += pg[i];
    }
  }
}

std::string epoch_stem(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu", epoch);
  return buf;
}

}  // namespace

void validate_train_config(const TrainConfig& c) {
  if (c.paths_per_step < 1) throw std::invalid_argument("trainer.paths_per_step must be >= 1");
  if (c.bootstrap == Bootstrap::ensemble && c.paths_per_step < 2) {
    throw std::invalid_argument("trainer.paths_per_step must be >= 2 for ensemble bootstrapping (1 is naive)");
  }
  if (c.batch_size < 2) throw std::invalid_argument("trainer.batch_size must be >= 2 (batchnorm)");
  if (c.warmup_epochs > c.epochs) throw std::invalid_argument("trainer.warmup_epochs exceeds trainer.epochs");
  if (c.tau < 0.0 || c.tau > 1.0) throw std::invalid_argument("trainer.tau must lie in [0, 1]");
  if (c.optimizer.lr <= 0.0) throw std::invalid_argument("trainer.optimizer.lr must be positive");
}

SiameseState::SiameseState(const SearchSpaceDef& space, const TrainConfig& config)
    : online(make_online(space, config)), target(online), tau(config.tau) {
  Rng rng(derive_seed(config.seed, "predictors"));
  for (std::size_t k = 0; k < space.block_count(); ++k) {
    predictors.emplace_back(config.projection_out, config.predictor_hidden, config.projection_out, rng);
  }
}

std::vector<StoreRef> SiameseState::store_refs() {
  auto refs = online.store_refs("online");
  auto t = target.store_refs("target");
  refs.insert(refs.end(), t.begin(), t.end());
  for (std::size_t k = 0; k < predictors.size(); ++k) {
    refs.push_back({"pred" + std::to_string(k), &predictors[k].params()});
  }
  return refs;
}

void ema_update(SiameseState& state, double tau) {
  auto on = state.online.stores();
  auto tg = state.target.stores();
  if (on.size() != tg.size()) throw std::logic_error("ema_update: online and target are not aligned");
  for (std::size_t s = 0; s < on.size(); ++s) {
    for (auto& [id, tp] : tg[s]->params()) {
      const Tensor& op = on[s]->at(id);
      if (op.shape != tp.shape) throw std::logic_error("ema_update: shape mismatch at " + id);
      if (tau == 1.0) continue;
      if (tau == 0.0) {
        tp.data = op.data;
        continue;
      }
      for (std::size_t i = 0; i < tp.size(); ++i) tp.data[i] = tau * tp.data[i] + (1.0 - tau) * op.data[i];
    }
  }
}

Tensor ensemble_mean(const std::vector<Tensor>& members, bool softmax) {
  if (members.empty()) throw std::invalid_argument("ensemble_mean: empty population");
  const Shape& shape = members.front().shape;
  if (shape.size() != 2) throw ShapeError("ensemble_mean: members must be [N,D], got " + shape_str(shape));
  for (const auto& m : members) {
    if (m.shape != shape) throw ShapeError("ensemble_mean: member shape " + shape_str(m.shape) + " vs " + shape_str(shape));
  }
  const std::size_t n = shape[0], d = shape[1];
  std::vector<Tensor> soft;
  const std::vector<Tensor>* src = &members;
  if (softmax) {
    for (const auto& m : members) soft.push_back(softmax_rows(m));
    src = &soft;
  }
  Tensor out(shape);
  std::vector<long double> acc(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0L);
    for (const auto& m : *src) {
      for (std::size_t j = 0; j < d; ++j) acc[j] += m.data[i * d + j];
    }
    long double sq = 0.0L;
    for (std::size_t j = 0; j < d; ++j) {
      acc[j] /= static_cast<long double>(src->size());
      sq += acc[j] * acc[j];
    }
    const long double norm = std::sqrt(sq);
    // Already unit (singletons, equal members): keep the mean as is.
    const bool unit = std::fabs(norm - 1.0L) <= 1e-12L;
    for (std::size_t j = 0; j < d; ++j) {
      out.data[i * d + j] = static_cast<double>(unit ? acc[j] : acc[j] / std::max(norm, 1e-12L));
    }
  }
  return out;
}

std::vector<std::vector<Tensor>> target_vectors(SiameseState& state, const std::vector<Architecture>& paths,
                                                const std::vector<Tensor>& views, bool train_bn) {
  if (paths.size() != views.size()) throw std::invalid_argument("target_vectors: one view per path required");
  std::vector<std::vector<Tensor>> out;
  for (std::size_t p = 0; p < paths.size(); ++p) {
    Tape tape(false);
    auto feats = state.target.forward(tape, paths[p], tape.constant(views[p]), train_bn);
    std::vector<Tensor> per_block;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      per_block.push_back(l2_normalize(state.target.projection(k).forward(tape, feats[k], train_bn)).value());
    }
    out.push_back(std::move(per_block));
  }
  return out;
}

Tensor ensemble_target(SiameseState& state, std::size_t k, const std::vector<Architecture>& paths,
                       const std::vector<Tensor>& views, bool softmax) {
  auto vecs = target_vectors(state, paths, views);
  std::vector<Tensor> members;
  for (auto& v : vecs) members.push_back(std::move(v.at(k)));
  return ensemble_mean(members, softmax);
}

Var bootstrap_loss(Var z, const Tensor& target) {
  if (z.value().shape != target.shape) {
    throw ShapeError("bootstrap_loss: " + shape_str(z.value().shape) + " vs target " + shape_str(target.shape));
  }
  // target may alias a value on z's tape; read it before pushing nodes
  const double inv_n = 1.0 / static_cast<double>(target.dim(0));
  Var diff = sub(z, z.tape->constant(target));
  return scale(sum(mul(diff, diff)), inv_n);
}

std::vector<std::pair<Tensor, Tensor>> make_training_views(const Tensor& source_images, std::size_t paths,
                                                           const AugmentPolicy& policy, const ChannelStats& stats,
                                                           Rng& rng) {
  const std::size_t n = source_images.dim(0);
  const std::size_t per = source_images.size() / n;
  std::vector<std::pair<Tensor, Tensor>> out;
  auto one_view = [&] {
    Tensor v = source_images;
    for (std::size_t i = 0; i < n; ++i) {
      augment(std::span<double>(v.data.data() + i * per, per), v.dim(2), v.dim(3), policy, rng);
    }
    normalize_in_place(v, stats);
    return v;
  };
  for (std::size_t p = 0; p < paths; ++p) {
    Tensor a = one_view();
    Tensor b = one_view();
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

double momentum_at(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps) {
  if (config.tau_schedule == MomentumSchedule::constant || total_steps == 0) return config.tau;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 1.0 - (1.0 - config.tau) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

StepResult train_step(SiameseState& state, const TrainConfig& config, const Tensor& source_images,
                      const ChannelStats& stats, Rng& path_rng, Rng& view_rng, double lr, double tau) {
  validate_train_config(config);
  const SearchSpaceDef& space = state.online.space();
  const std::size_t blocks = space.block_count();
  const std::size_t np = config.paths_per_step;

  std::vector<Architecture> paths = sample_architectures(space, np, path_rng);
  auto views = make_training_views(source_images, np, config.augment, stats, view_rng);

  // Each direction: online sees `first`, target sees `second`.
  std::vector<std::pair<std::vector<Tensor>, std::vector<Tensor>>> directions(1);
  for (auto& [a, b] : views) {
    directions[0].first.push_back(a);
    directions[0].second.push_back(b);
  }
  if (config.symmetrize) directions.emplace_back(directions[0].second, directions[0].first);

  StepResult result;
  result.block_loss.assign(blocks, 0.0);
  result.lr = lr;
  result.tau = tau;
  GradMap acc;
  const double weight = 1.0 / static_cast<double>(np * directions.size());

  for (auto& [online_views, target_views] : directions) {
    auto tvecs = target_vectors(state, paths, target_views);
    std::vector<Tensor> ensemble(blocks);
    if (config.bootstrap == Bootstrap::ensemble) {
      for (std::size_t k = 0; k < blocks; ++k) {
        std::vector<Tensor> members;
        for (std::size_t p = 0; p < np; ++p) members.push_back(tvecs[p][k]);
        ensemble[k] = ensemble_mean(members, config.softmax_ensemble);
      }
    }
    for (std::size_t p = 0; p < np; ++p) {
      Tape tape;
      auto feats = state.online.forward(tape, paths[p], tape.constant(online_views[p]), true, /*detach_between=*/true);
      Var total = tape.constant(Tensor(Shape{}, 0.0));
      for (std::size_t k = 0; k < blocks; ++k) {
        Var z = state.online.projection(k).forward(tape, feats[k], true);
        z = l2_normalize(state.predictors[k].forward(tape, z, true));
        const Tensor& t = config.bootstrap == Bootstrap::ensemble ? ensemble[k] : tvecs[p][k];
        Var lk = bootstrap_loss(z, t);
        result.block_loss[k] += lk.value()[0] * weight;
        total = add(total, lk);
      }
      tape.backward(scale(total, weight));
      accumulate(acc, tape.bound_stores());
    }
  }

  OptimizerConfig opt = config.optimizer;
  opt.lr = lr;
  for (auto& [store, grads] : acc) {
    for (auto& [id, g] : grads) store->at(id).grad = std::move(g);
    optimizer_step(*store, opt);
    store->clear_grad();
  }
  ema_update(state, tau);
  ++state.step;
  return result;
}

void save_state(SiameseState& state, const std::filesystem::path& stem, const nlohmann::json& meta) {
  nlohmann::json m = meta;
  m["step"] = state.step;
  m["tau"] = state.tau;
  m["space"] = state.online.space().name;
  save_checkpoint(stem, state.store_refs(), m);
}

nlohmann::json load_state(SiameseState& state, const std::filesystem::path& manifest) {
  CheckpointData data = load_checkpoint(manifest);
  if (data.meta.contains("space") && data.meta.at("space") != state.online.space().name) {
    throw std::invalid_argument("checkpoint " + manifest.string() + " is for space " +
                                data.meta.at("space").get<std::string>() + ", not " + state.online.space().name);
  }
  restore_checkpoint(data, state.store_refs());
  if (data.meta.contains("step")) state.step = data.meta.at("step").get<std::uint64_t>();
  return data.meta;
}

TrainResult train_supernet(SiameseState& state, const TrainConfig& config, const DatasetSplit& nas_train,
                           const ChannelStats& stats, const std::optional<std::filesystem::path>& checkpoint_dir,
                           const nlohmann::json& meta, const std::function<void(const EpochLog&)>& on_log) {
  validate_train_config(config);
  if (nas_train.size() < config.batch_size) {
    throw std::invalid_argument("train: nas-train has " + std::to_string(nas_train.size()) +
                                " samples, fewer than one batch of " + std::to_string(config.batch_size));
  }
  const std::size_t blocks = state.online.space().block_count();
  const std::size_t steps_per_epoch = nas_train.size() / config.batch_size;
  const std::uint64_t total = steps_per_epoch * config.epochs;
  const std::uint64_t warmup = steps_per_epoch * config.warmup_epochs;

  Rng data_rng(derive_seed(config.seed, "data"));
  Rng path_rng(derive_seed(config.seed, "paths"));
  Rng view_rng(derive_seed(config.seed, "views"));

  TrainResult result;
  auto checkpoint = [&](std::size_t epoch) {
    if (!checkpoint_dir) return;
    std::filesystem::create_directories(*checkpoint_dir);
    nlohmann::json m = meta;
    m["epoch"] = epoch;
    const auto stem = *checkpoint_dir / epoch_stem(epoch);
    save_state(state, stem, m);
    result.checkpoints.push_back(stem.string() + ".json");
  };
  checkpoint(0);

  const Shape one = nas_train.images.shape;
  const std::size_t per = nas_train.images.size() / nas_train.size();
  std::vector<std::size_t> order(nas_train.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(data_rng, i)]);
    std::vector<double> sums(blocks, 0.0);
    double lr = 0.0, tau = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      Shape shape = one;
      shape[0] = config.batch_size;
      Tensor batch(shape);
      for (std::size_t i = 0; i < config.batch_size; ++i) {
        const std::size_t row = order[s * config.batch_size + i];
        std::copy_n(nas_train.images.data.begin() + static_cast<std::ptrdiff_t>(row * per), per,
                    batch.data.begin() + static_cast<std::ptrdiff_t>(i * per));
      }
      lr = warmup_cosine_lr(config.optimizer.lr, step, warmup, total);
      tau = momentum_at(config, step, total);
      state.tau = tau;
      StepResult r = train_step(state, config, batch, stats, path_rng, view_rng, lr, tau);
      for (std::size_t k = 0; k < blocks; ++k) sums[k] += r.block_loss[k];
    }
    for (std::size_t k = 0; k < blocks; ++k) {
      EpochLog row{epoch, k + 1, sums[k] / static_cast<double>(steps_per_epoch), lr, tau};
      result.log.push_back(row);
      if (on_log) on_log(row);
    }
    checkpoint(epoch);
  }
  return result;
}

std::string format_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,block,mean_loss,lr,tau\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", r.epoch, r.block, r.mean_loss, r.lr, r.tau);
    out += buf;
  }
  return out;
}

}  // namespace boss
