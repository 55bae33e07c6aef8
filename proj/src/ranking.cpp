#include "boss/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "boss/checkpoint.hpp"
#include "boss/supernet.hpp"

namespace boss {

namespace {

void check_pair(const std::vector<double>& x, const std::vector<double>& y, const char* what) {
  if (x.size() != y.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw std::invalid_argument(std::string(what) + ": needs at least 2 samples");
}

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

// Standalone classifier: a supernet restricted to one path plus a linear
// layer on the pooled last block.
class OracleNet {
 public:
  OracleNet(const SearchSpaceDef& space, int classes, std::uint64_t seed) : net_(make(space, seed)) {
    Rng rng(derive_seed(seed, "oracle-head"));
    const auto width = static_cast<std::size_t>(net_.max_block_channels(space.block_count() - 1));
    fc_.add("fc.w", he_normal({width, static_cast<std::size_t>(classes)}, width, rng));
    fc_.add("fc.b", Tensor({static_cast<std::size_t>(classes)}, 0.0));
  }

  Var logits(Tape& tape, const Architecture& arch, Var x, bool train) {
    Var h = net_.forward(tape, arch, x, train).back();
    h = reshape(global_avg_pool(h), {h.dim(0), h.dim(1)});
    Var w = tape.param(fc_, "fc.w");
    if (h.dim(1) != w.dim(0)) w = slice_leading(w, {h.dim(1), w.dim(1)});
    return add_bias(matmul(h, w), tape.param(fc_, "fc.b"));
  }

 private:
  static Supernet make(const SearchSpaceDef& space, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "oracle-init"));
    return Supernet(space, rng);
  }

  Supernet net_;
  ParameterStore fc_;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x, y, "kendall_tau_b");
  // concordant, discordant, tied in x only, tied in y only
  long long c = 0, d = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) ++tx;
      else if (dy == 0.0) ++ty;
      else if ((dx > 0.0) == (dy > 0.0)) ++c;
      else ++d;
    }
  }
  const double denom = std::sqrt(static_cast<double>(c + d + tx) * static_cast<double>(c + d + ty));
  if (c + d + tx == 0 || c + d + ty == 0) return std::nullopt;
  return clamp_unit(static_cast<double>(c - d) / denom);
}

std::optional<double> pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x, y, "pearson_r");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = x[i] - mx, b = y[i] - my;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return clamp_unit(sxy / std::sqrt(sxx * syy));
}

std::optional<double> spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  check_pair(x, y, "spearman_rho");
  return pearson_r(average_ranks(x), average_ranks(y));
}

OracleRecord oracle_train(const SearchSpaceDef& space, const Architecture& arch, const DatasetSplit& train,
                          const DatasetSplit& test, const ChannelStats& stats, const OracleConfig& config,
                          std::uint64_t seed) {
  validate_architecture(space, arch);
  if (train.size() == 0 || test.size() == 0) throw std::invalid_argument("oracle: empty train or test split");
  if (train.source == test.source) {
    std::set<std::size_t> a(train.indices.begin(), train.indices.end());
    for (std::size_t i : test.indices) {
      if (a.count(i)) throw std::invalid_argument("oracle: train and test splits share source row " + std::to_string(i));
    }
  }
  if (config.batch_size < 2) throw std::invalid_argument("oracle.batch_size must be >= 2");

  OracleNet net(space, train.class_count, seed);
  Rng data_rng(derive_seed(seed, "oracle-data"));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::sgd_momentum;
  opt.momentum = config.momentum;
  opt.weight_decay = config.weight_decay;

  const std::size_t batch = std::min(config.batch_size, train.size());
  const std::size_t steps_per_epoch = train.size() / batch;
  const std::uint64_t total = steps_per_epoch * config.epochs;
  std::vector<std::size_t> order(train.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(data_rng, i)]);
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      std::span<const std::size_t> rows(order.data() + s * batch, batch);
      Tensor x = make_batch(train, rows, config.augment, stats, data_rng);
      const std::vector<int> labels = gather_labels(train, rows);
      Tape tape;
      Var loss = softmax_cross_entropy(net.logits(tape, arch, tape.constant(std::move(x)), true), labels);
      tape.backward(loss);
      opt.lr = warmup_cosine_lr(config.lr, step, 0, total);
      for (ParameterStore* store : tape.bound_stores()) optimizer_step(*store, opt);
    }
  }

  std::size_t correct = 0;
  constexpr std::size_t chunk = 256;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < test.size(); b += chunk) {
    rows.resize(std::min(test.size(), b + chunk) - b);
    std::iota(rows.begin(), rows.end(), b);
    Rng unused(0);
    Tensor x = make_batch(test, rows, AugmentPolicy::none(), stats, unused);
    Tape tape(false);
    const Tensor& z = net.logits(tape, arch, tape.constant(std::move(x)), false).value();
    const std::size_t classes = z.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double* row = z.data.data() + i * classes;
      const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
      correct += pred == test.labels[rows[i]] ? 1 : 0;
    }
  }
  OracleRecord rec;
  rec.architecture = encode_architecture(space, arch);
  rec.seed = seed;
  rec.epochs = config.epochs;
  rec.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  rec.notes = "train=" + std::to_string(train.size()) + " test=" + std::to_string(test.size());
  return rec;
}

std::string format_oracle_csv(const std::vector<OracleRecord>& records) {
  std::string out = "architecture,seed,accuracy,epochs\n";
  for (const auto& r : records) {
    out += r.architecture + "," + std::to_string(r.seed) + "," + format_double(r.accuracy) + "," +
           std::to_string(r.epochs) + "\n";
  }
  return out;
}

std::vector<OracleRecord> parse_oracle_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (!header && std::getline(in, line)) {
    ++lineno;
    header = line.rfind('#', 0) != 0;
  }
  if (!header || line != "architecture,seed,accuracy,epochs") {
    throw std::invalid_argument("oracle records: unexpected header '" + line + "'");
  }
  std::vector<OracleRecord> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4) throw std::invalid_argument("oracle records: line " + std::to_string(lineno) + " malformed");
    OracleRecord r;
    r.architecture = cells[0];
    try {
      r.seed = std::stoull(cells[1]);
      r.accuracy = std::stod(cells[2]);
      r.epochs = std::stoul(cells[3]);
    } catch (const std::exception&) {
      throw std::invalid_argument("oracle records: line " + std::to_string(lineno) + " has a bad number");
    }
    out.push_back(r);
  }
  return out;
}

CorrelationReport correlate(const RatingTable& ratings, const std::vector<OracleRecord>& oracle) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : oracle) {
    auto& slot = acc[r.architecture];
    slot.first += r.accuracy;
    slot.second += 1;
  }
  std::vector<double> score, truth;
  for (std::size_t i = 0; i < ratings.rows(); ++i) {
    auto it = acc.find(ratings.architectures[i]);
    if (it == acc.end()) continue;
    score.push_back(-ratings.total[i]);
    truth.push_back(it->second.first / static_cast<double>(it->second.second));
  }
  if (score.size() < 3) {
    throw std::invalid_argument("correlate: only " + std::to_string(score.size()) +
                                " architectures appear in both ratings and oracle records (need 3)");
  }
  CorrelationReport rep;
  rep.n = score.size();
  rep.kendall_tau = kendall_tau_b(score, truth);
  rep.spearman_rho = spearman_rho(score, truth);
  rep.pearson_r = pearson_r(score, truth);
  return rep;
}

nlohmann::json report_json(const CorrelationReport& report) {
  auto value = [](const std::optional<double>& v) -> nlohmann::json {
    if (!v) return "undefined";
    return *v;
  };
  return {{"kendall_tau_b", value(report.kendall_tau)},
          {"spearman_rho", value(report.spearman_rho)},
          {"pearson_r", value(report.pearson_r)},
          {"n", report.n}};
}

std::vector<EpochCorrelation> convergence_track(Supernet& net, const std::vector<std::filesystem::path>& checkpoints,
                                                const FixedViewSet& views, const std::vector<OracleRecord>& oracle,
                                                const std::vector<double>& lambda, const EvalOptions& opts) {
  if (checkpoints.size() < 2) throw std::invalid_argument("convergence tracking needs at least 2 checkpoints");
  std::vector<Architecture> archs;
  std::set<std::string> seen;
  for (const auto& r : oracle) {
    if (seen.insert(r.architecture).second) archs.push_back(decode_architecture(net.space(), r.architecture));
  }
  std::vector<EpochCorrelation> out;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    CheckpointData data = load_checkpoint(checkpoints[i]);
    restore_checkpoint(data, net.store_refs("online"));
    RatingTable table = rate_architecture_set(net, archs, views, lambda, opts);
    EpochCorrelation e;
    e.epoch = data.meta.contains("epoch") ? data.meta.at("epoch").get<std::size_t>() : i;
    e.checkpoint = checkpoints[i].filename().string();
    e.report = correlate(table, oracle);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace boss
