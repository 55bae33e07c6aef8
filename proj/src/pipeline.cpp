#include "boss/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "boss/checkpoint.hpp"
#include "boss/random.hpp"

namespace boss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw MissingArtifact(path, "missing " + path.string() + " (run `boss " + producer + "` first)");
  }
}

json read_json(const fs::path& path) { return json::parse(read_text(path)); }

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string digest_line(const std::string& digest) { return "# digest=" + digest + "\n"; }

SiameseState make_state(const RunConfig& config, const SearchSpaceDef& space) {
  return SiameseState(space, run_train_config(config));
}

FixedViewSet make_views(const RunConfig& config, const RunData& data) {
  const std::uint64_t seed = stage_seed(config, config.evaluator.view_seed, "views");
  return build_fixed_views(data.dataset.split(SplitId::nas_val), seed, config.trainer.augment, data.stats,
                           config.evaluator.val_subset);
}

fs::path resolve_checkpoint(const RunConfig& config, const RunPaths& paths) {
  if (!config.evaluator.checkpoint.empty()) {
    fs::path p = config.evaluator.checkpoint;
    require(p, "train");
    return p;
  }
  const auto all = list_checkpoints(paths.checkpoints());
  if (all.empty()) {
    throw MissingArtifact(paths.checkpoints() / "epoch_*.json",
                          "missing checkpoint: no epoch_*.json under " + paths.checkpoints().string() +
                              " (run `boss train` first)");
  }
  return all.back();
}

void restore_online(SiameseState& state, const fs::path& manifest) {
  CheckpointData data = load_checkpoint(manifest);
  if (data.meta.contains("space") && data.meta.at("space") != state.online.space().name) {
    throw std::invalid_argument("checkpoint " + manifest.string() + " is for space " +
                                data.meta.at("space").get<std::string>() + ", not " + state.online.space().name);
  }
  restore_checkpoint(data, state.online.store_refs("online"));
}

std::vector<fs::path> command_train(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  const std::string digest = config_digest(config);
  const SearchSpaceDef space = run_space(config);
  const RunData data = build_run_data(config);
  const TrainConfig tc = run_train_config(config);

  if (fs::exists(paths.checkpoints())) {
    for (const auto& stale : list_checkpoints(paths.checkpoints())) {
      fs::remove(stale);
      fs::remove(fs::path(stale).replace_extension(".bin"));
    }
  }
  SiameseState state(space, tc);
  const json meta = {{"digest", digest}, {"space", space.name}};
  TrainResult result = train_supernet(state, tc, data.dataset.split(SplitId::nas_train), data.stats,
                                      paths.checkpoints(), meta, [&](const EpochLog& row) {
                                        log << "train: epoch " << row.epoch << "/" << tc.epochs << " block "
                                            << row.block << " loss " << row.mean_loss << "\n";
                                      });
  write_text(paths.train_log(), digest_line(digest) + format_log_csv(result.log));
  std::vector<fs::path> out{paths.train_log()};
  out.insert(out.end(), result.checkpoints.begin(), result.checkpoints.end());
  return out;
}

std::vector<fs::path> command_search(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  const fs::path checkpoint = resolve_checkpoint(config, paths);
  const std::string digest = config_digest(config);
  const SearchSpaceDef space = run_space(config);
  const RunData data = build_run_data(config);
  const std::vector<double> lambda = run_lambda(config, space.block_count());
  const EvalOptions opts{config.evaluator.chunk};

  SiameseState state = make_state(config, space);
  restore_online(state, checkpoint);
  const FixedViewSet views = make_views(config, data);
  log << "search: " << config.evaluator.method << " over " << views.size() << " fixed views from "
      << checkpoint.filename().string() << "\n";

  TraversalResult traversal = traversal_search(state.online, views, lambda, opts);
  Architecture best = traversal.best;
  std::vector<double> best_loss = traversal.best_block_loss;
  if (config.evaluator.method == "evolution") {
    EvolutionResult ev = evolutionary_search(state.online, views, run_evolution_config(config), opts);
    best = ev.best;
    best_loss = ev.best_block_loss;
  }

  std::vector<Architecture> rows;
  if (count_architectures(space) <= config.evaluator.table_limit) {
    rows = enumerate_architectures(space, config.evaluator.table_limit);
  } else {
    rows = oracle_architectures(space, config);
    if (std::find(rows.begin(), rows.end(), best) == rows.end()) rows.push_back(best);
  }
  RatingTable table = rate_architecture_set(space, traversal, rows, lambda);
  table.checkpoint = checkpoint.filename().string();
  table.view_seed = views.seed;
  table.digest = digest;
  write_rating_csv(table, paths.ratings());

  json doc = {{"digest", digest},
              {"space", space.name},
              {"method", config.evaluator.method},
              {"checkpoint", table.checkpoint},
              {"view_seed", views.seed},
              {"architecture", encode_architecture(space, best)},
              {"block_loss", best_loss},
              {"total", weighted_total(best_loss, lambda)},
              {"lambda", lambda}};
  write_json(paths.best_architecture(), doc);
  log << "search: best " << doc["architecture"].get<std::string>() << "\n";
  return {paths.ratings(), paths.best_architecture()};
}

std::vector<fs::path> command_oracle(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  const std::string digest = config_digest(config);
  const SearchSpaceDef space = run_space(config);
  const RunData data = build_run_data(config);
  const std::vector<Architecture> archs = oracle_architectures(space, config);
  const std::uint64_t base = stage_seed(config, config.oracle.seed, "oracle");
  const std::size_t seeds = config.oracle.seeds;

  std::vector<OracleRecord> records(archs.size() * seeds);
  std::vector<std::exception_ptr> errors(records.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job = next++; job < records.size(); job = next++) {
      try {
        const std::uint64_t seed = derive_seed(base, "seed" + std::to_string(job % seeds));
        records[job] = oracle_train(space, archs[job / seeds], data.dataset.split(SplitId::oracle_train),
                                    data.dataset.split(SplitId::oracle_test), data.stats, config.oracle.train, seed);
      } catch (...) {
        errors[job] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(run_workers(config), records.size());
  log << "oracle: " << archs.size() << " architectures x " << seeds << " seeds on " << workers << " worker(s)\n";
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  write_text(paths.oracle(), digest_line(digest) + format_oracle_csv(records));
  return {paths.oracle()};
}

std::vector<fs::path> command_correlate(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  require(paths.ratings(), "search");
  require(paths.oracle(), "oracle");
  const RatingTable table = read_rating_csv(paths.ratings());
  const auto oracle = parse_oracle_csv(read_text(paths.oracle()));
  const CorrelationReport report = correlate(table, oracle);
  json doc = report_json(report);
  doc["digest"] = config_digest(config);
  doc["ratings_digest"] = table.digest;
  doc["checkpoint"] = table.checkpoint;
  write_json(paths.correlation(), doc);
  log << "correlate: " << doc.dump() << "\n";
  return {paths.correlation()};
}

std::vector<fs::path> command_track(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  require(paths.oracle(), "oracle");
  const auto checkpoints = list_checkpoints(paths.checkpoints());
  if (checkpoints.size() < 2) {
    throw MissingArtifact(paths.checkpoints() / "epoch_*.json",
                          "track needs at least 2 checkpoints under " + paths.checkpoints().string() +
                              " (run `boss train` first)");
  }
  const std::string digest = config_digest(config);
  const SearchSpaceDef space = run_space(config);
  const RunData data = build_run_data(config);
  const auto oracle = parse_oracle_csv(read_text(paths.oracle()));
  SiameseState state = make_state(config, space);
  const FixedViewSet views = make_views(config, data);
  const auto series = convergence_track(state.online, checkpoints, views, oracle,
                                        run_lambda(config, space.block_count()), EvalOptions{config.evaluator.chunk});

  std::string csv = digest_line(digest) + "epoch,checkpoint,kendall_tau_b,spearman_rho,pearson_r,n\n";
  json doc = {{"digest", digest}, {"series", json::array()}};
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  for (const auto& e : series) {
    csv += std::to_string(e.epoch) + "," + e.checkpoint + "," + cell(e.report.kendall_tau) + "," +
           cell(e.report.spearman_rho) + "," + cell(e.report.pearson_r) + "," + std::to_string(e.report.n) + "\n";
    json row = report_json(e.report);
    row["epoch"] = e.epoch;
    row["checkpoint"] = e.checkpoint;
    doc["series"].push_back(row);
    log << "track: epoch " << e.epoch << " rho " << cell(e.report.spearman_rho) << "\n";
  }
  write_text(paths.convergence_csv(), csv);
  write_json(paths.convergence_json(), doc);
  return {paths.convergence_csv(), paths.convergence_json()};
}

std::vector<fs::path> command_report(const RunConfig& config, std::ostream& log) {
  const RunPaths paths = run_paths(config);
  json doc = {{"digest", config_digest(config)}, {"config", to_json(config)}};
  doc["config"].erase("output_dir");
  doc["config"].erase("workers");
  std::size_t found = 0;
  auto attach = [&](const std::string& key, const fs::path& path) {
    if (fs::exists(path)) {
      doc[key] = read_json(path);
      ++found;
    } else {
      doc[key] = nullptr;
    }
  };
  attach("best_architecture", paths.best_architecture());
  attach("correlation", paths.correlation());
  attach("convergence", paths.convergence_json());

  json final_loss = nullptr;
  if (fs::exists(paths.train_log())) {
    ++found;
    std::istringstream in(read_text(paths.train_log()));
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#' || line.rfind("epoch,", 0) == 0) continue;
      std::vector<std::string> cells;
      std::istringstream ls(line);
      for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
      rows.push_back(cells);
    }
    if (!rows.empty()) {
      final_loss = json::array();
      const std::string last = rows.back()[0];
      for (const auto& r : rows) {
        if (r[0] == last) final_loss.push_back(std::stod(r[2]));
      }
      doc["epochs_trained"] = std::stoul(last);
    }
  }
  doc["final_block_loss"] = final_loss;
  if (found == 0) {
    throw MissingArtifact(paths.root, "nothing to report under " + paths.root.string() + " (run `boss train` first)");
  }
  write_json(paths.summary(), doc);
  log << "report: merged " << found << " artifact(s)\n";
  return {paths.summary()};
}

}  // namespace

RunPaths run_paths(const RunConfig& config) { return RunPaths{config.output_dir}; }

RunData build_run_data(const RunConfig& config) {
  const auto& d = config.dataset;
  const std::uint64_t seed = stage_seed(config, d.seed, "data");
  RawDataset raw;
  if (d.source == "cifar10") {
    std::vector<fs::path> files(d.cifar10_paths.begin(), d.cifar10_paths.end());
    raw = load_cifar10_binary(files);
  } else {
    const std::size_t n = d.splits.nas_train + d.splits.nas_val + d.splits.oracle_train + d.splits.oracle_test;
    raw = generate_synthetic(seed, n, d.classes, d.synthetic);
  }
  RunData out;
  out.dataset = partition(raw, d.splits, seed);
  const DatasetSplit& basis = out.dataset.split(SplitId::nas_train).size() > 0
                                  ? out.dataset.split(SplitId::nas_train)
                                  : out.dataset.split(SplitId::oracle_train);
  if (basis.size() == 0) throw ConfigError("dataset.splits", "config: nas_train and oracle_train are both empty");
  out.stats = channel_stats(basis.images);
  return out;
}

std::vector<Architecture> oracle_architectures(const SearchSpaceDef& space, const RunConfig& config) {
  const std::uint64_t total = count_architectures(space);
  const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(config.oracle.architectures, total));
  Rng rng(derive_seed(stage_seed(config, config.oracle.seed, "oracle"), "sample"));
  std::vector<Architecture> out;
  std::set<Architecture> seen;
  while (out.size() < want) {
    Architecture a = sample_architecture(space, rng);
    if (seen.insert(a).second) out.push_back(std::move(a));
  }
  return out;
}

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("epoch_", 0) == 0 && entry.path().extension() == ".json") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> dispatch(const std::string& command, const RunConfig& config, std::ostream& log) {
  std::vector<fs::path> out;
  if (command == "train") {
    out = command_train(config, log);
  } else if (command == "search") {
    out = command_search(config, log);
  } else if (command == "oracle") {
    out = command_oracle(config, log);
  } else if (command == "correlate") {
    out = command_correlate(config, log);
  } else if (command == "track") {
    out = command_track(config, log);
  } else if (command == "report") {
    out = command_report(config, log);
  } else {
    throw std::invalid_argument("unknown command '" + command +
                                "' (expected train, search, oracle, correlate, track, report)");
  }
  const fs::path doc = run_paths(config).config();
  write_json(doc, {{"digest", config_digest(config)}, {"config", to_json(config)}});
  out.push_back(doc);
  return out;
}

}  // namespace boss
