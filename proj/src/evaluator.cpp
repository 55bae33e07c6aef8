#include "boss/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "boss/trainer.hpp"

namespace boss {

namespace {

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape shape = t.shape;
  shape[0] = end - begin;
  const std::size_t per = t.size() / t.dim(0);
  return Tensor(shape, std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                           t.data.begin() + static_cast<std::ptrdiff_t>(end * per)));
}

// Applies fn to row chunks of `in` and concatenates the results.
template <typename Fn>
Tensor chunked(const Tensor& in, std::size_t chunk, Fn fn) {
  const std::size_t n = in.dim(0);
  Tensor out;
  std::size_t filled = 0;
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    Tape tape(false);
    const Tensor& part = fn(tape, tape.constant(rows_of(in, b, e))).value();
    if (b == 0) {
      Shape shape = part.shape;
      shape[0] = n;
      out = Tensor(shape);
    }
    std::copy(part.data.begin(), part.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(filled));
    filled += part.size();
  }
  return out;
}

Tensor block_vectors(Supernet& net, std::size_t k, const BlockPath& path, const Tensor& in, int entry_scale,
                     const EvalOptions& opts) {
  return chunked(in, opts.chunk, [&](Tape& tape, Var x) {
    Var h = net.forward_block(tape, k, path, x, entry_scale, false);
    return l2_normalize(net.projection(k).forward(tape, h, false));
  });
}

BlockPath mutate(const SearchSpaceDef& space, std::size_t k, const BlockPath& parent, int entry_scale, Rng& rng) {
  const std::size_t begin = space.first_layer(k);
  // invalid mutants are rejected and redrawn; a bounded retry keeps a
  // fully constrained parent from spinning
  for (int attempt = 0; attempt < 64; ++attempt) {
    BlockPath child = parent;
    const std::size_t i = uniform_index(rng, parent.size());
    auto options = gene_options(space, begin + i);
    options.erase(std::remove(options.begin(), options.end(), parent[i]), options.end());
    if (options.empty()) return child;
    child[i] = options[uniform_index(rng, options.size())];
    if (space.kind == SpaceKind::hytra && validate_hytra_path(space, child, entry_scale, begin)) continue;
    return child;
  }
  return parent;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw std::invalid_argument("ratings: bad number '" + s + "' in " + what);
  return v;
}

}  // namespace

FixedViewSet build_fixed_views(const DatasetSplit& split, std::uint64_t seed, const AugmentPolicy& policy,
                               const ChannelStats& stats, std::size_t limit) {
  if (split.size() == 0) throw std::invalid_argument("fixed views: split " + split_name(split.id) + " is empty");
  const std::size_t n = limit == 0 ? split.size() : std::min(limit, split.size());
  FixedViewSet views;
  views.seed = seed;
  views.source = split_name(split.id) + ":" + split.source;
  Shape shape = split.images.shape;
  shape[0] = n;
  views.x1 = Tensor(shape);
  views.x2 = Tensor(shape);
  const std::size_t per = split.images.size() / split.size();
  Rng rng(derive_seed(seed, "views"));
  for (std::size_t i = 0; i < n; ++i) {
    for (Tensor* x : {&views.x1, &views.x2}) {
      std::span<double> dst(x->data.data() + i * per, per);
      std::copy_n(split.images.data.begin() + static_cast<std::ptrdiff_t>(i * per), per, dst.begin());
      augment(dst, shape[2], shape[3], policy, rng);
    }
  }
  normalize_in_place(views.x1, stats);
  normalize_in_place(views.x2, stats);
  return views;
}

BlockInput stem_input(Supernet& net, const FixedViewSet& views, const EvalOptions& opts) {
  if (views.size() == 0) throw std::invalid_argument("fixed views are empty");
  auto stem = [&](Tape& tape, Var x) { return net.forward_stem(tape, x, false); };
  return {net.space().initial_scale, chunked(views.x1, opts.chunk, stem), chunked(views.x2, opts.chunk, stem)};
}

BlockInput advance(Supernet& net, std::size_t k, const BlockPath& path, const BlockInput& in,
                   const EvalOptions& opts) {
  auto run = [&](Tape& tape, Var x) { return net.forward_block(tape, k, path, x, in.entry_scale, false); };
  return {path_exit_scale(net.space(), path, in.entry_scale), chunked(in.f1, opts.chunk, run),
          chunked(in.f2, opts.chunk, run)};
}

PathVectors path_vectors(Supernet& net, std::size_t k, const BlockPath& path, const BlockInput& in,
                         const EvalOptions& opts) {
  return {block_vectors(net, k, path, in.f1, in.entry_scale, opts),
          block_vectors(net, k, path, in.f2, in.entry_scale, opts)};
}

Tensor population_center(const std::vector<PathVectors>& members) {
  if (members.empty()) throw std::invalid_argument("population_center: empty population");
  std::vector<Tensor> v2;
  v2.reserve(members.size());
  for (const auto& m : members) v2.push_back(m.v2);
  return ensemble_mean(v2);
}

Tensor population_center(Supernet& net, std::size_t k, const std::vector<BlockPath>& population, const BlockInput& in,
                         const EvalOptions& opts) {
  std::vector<PathVectors> members;
  for (const auto& p : population) members.push_back(path_vectors(net, k, p, in, opts));
  return population_center(members);
}

double rating_loss(const PathVectors& candidate, const Tensor& center) {
  if (candidate.v1.shape != center.shape) {
    throw ShapeError("rating: candidate " + shape_str(candidate.v1.shape) + " vs center " + shape_str(center.shape));
  }
  const std::size_t n = center.dim(0), d = center.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = candidate.v1.data[i * d + j] - center.data[i * d + j];
      s += diff * diff;
    }
    total += s;
  }
  return total / static_cast<double>(n);
}

std::vector<double> rate_block_candidates(const std::vector<PathVectors>& candidates, const Tensor& center) {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(rating_loss(c, center));
  return out;
}

std::size_t argmin_first(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("argmin of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] < values[best]) best = i;
  }
  return best;
}

double TraversalResult::lookup(std::size_t k, int entry_scale, const BlockPath& path) const {
  for (const auto& r : ratings) {
    if (r.block != k || r.entry_scale != entry_scale) continue;
    auto it = std::lower_bound(r.paths.begin(), r.paths.end(), path);
    if (it != r.paths.end() && *it == path) return r.loss[static_cast<std::size_t>(it - r.paths.begin())];
    break;
  }
  throw std::invalid_argument("block " + std::to_string(k + 1) + " path from scale " + std::to_string(entry_scale) +
                              " is not in the rated enumeration");
}

double weighted_total(const std::vector<double>& block_loss, const std::vector<double>& lambda) {
  if (block_loss.size() != lambda.size()) {
    throw std::invalid_argument("lambda has " + std::to_string(lambda.size()) + " entries for " +
                                std::to_string(block_loss.size()) + " blocks");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < block_loss.size(); ++k) total += lambda[k] * block_loss[k];
  return total;
}

TraversalResult traversal_search(Supernet& net, const FixedViewSet& views, const std::vector<double>& lambda,
                                 const EvalOptions& opts) {
  const SearchSpaceDef& space = net.space();
  const std::size_t blocks = space.block_count();
  if (lambda.size() != blocks) {
    throw std::invalid_argument("lambda has " + std::to_string(lambda.size()) + " entries for " +
                                std::to_string(blocks) + " blocks");
  }
  for (std::size_t k = 0; k < blocks; ++k) {
    for (int scale : reachable_entry_scales(space, k)) {
      if (count_block_paths(space, k, scale) > space.traversal_cap) {
        throw std::invalid_argument(space.name + ": block " + std::to_string(k + 1) + " has " +
                                    std::to_string(count_block_paths(space, k, scale)) +
                                    " paths, above the traversal cap; use evolutionary search");
      }
    }
  }

  // Best prefix reaching each entry scale of the current block.
  struct Frontier {
    double total = 0.0;
    Architecture prefix;
    std::vector<double> block_loss;
    BlockInput input;
  };
  std::map<int, Frontier> frontier;
  frontier[space.initial_scale] = {0.0, {}, {}, stem_input(net, views, opts)};

  TraversalResult result;
  for (std::size_t k = 0; k < blocks; ++k) {
    struct Candidate {
      double total;
      Architecture arch;
      std::vector<double> block_loss;
      const Frontier* from;
      BlockPath path;
    };
    std::map<int, Candidate> next;
    for (const auto& [scale, f] : frontier) {
      BlockRatings r;
      r.block = k;
      r.entry_scale = scale;
      r.prefix = f.prefix;
      r.paths = enumerate_block_paths(space, k, scale);
      std::vector<PathVectors> vecs;
      vecs.reserve(r.paths.size());
      for (const auto& p : r.paths) vecs.push_back(path_vectors(net, k, p, f.input, opts));
      const Tensor center = population_center(vecs);
      r.loss = rate_block_candidates(vecs, center);

      for (std::size_t i = 0; i < r.paths.size(); ++i) {
        Candidate c{f.total + lambda[k] * r.loss[i], f.prefix, f.block_loss, &f, r.paths[i]};
        c.arch.blocks.push_back(r.paths[i]);
        c.block_loss.push_back(r.loss[i]);
        const int exit = path_exit_scale(space, r.paths[i], scale);
        auto it = next.find(exit);
        if (it == next.end() || c.total < it->second.total ||
            (c.total == it->second.total && c.arch < it->second.arch)) {
          next.insert_or_assign(exit, std::move(c));
        }
      }
      result.ratings.push_back(std::move(r));
    }

    std::map<int, Frontier> advanced;
    for (auto& [exit, c] : next) {
      Frontier f;
      f.total = c.total;
      f.prefix = c.arch;
      f.block_loss = c.block_loss;
      if (k + 1 < blocks) f.input = advance(net, k, c.path, c.from->input, opts);
      advanced.emplace(exit, std::move(f));
    }
    frontier = std::move(advanced);
  }

  const Frontier* best = nullptr;
  for (const auto& [scale, f] : frontier) {
    if (!best || f.total < best->total || (f.total == best->total && f.prefix < best->prefix)) {
      best = &f;
    }
  }
  result.best = best->prefix;
  result.best_total = best->total;
  result.best_block_loss = best->block_loss;
  return result;
}

EvolutionResult evolutionary_search(Supernet& net, const FixedViewSet& views, const EvolutionConfig& config,
                                    const EvalOptions& opts) {
  if (config.population < 2) throw std::invalid_argument("evolution: population must be >= 2");
  if (config.mutation_rate < 0.0 || config.mutation_rate > 1.0) {
    throw std::invalid_argument("evolution: mutation rate must lie in [0, 1]");
  }
  const SearchSpaceDef& space = net.space();
  EvolutionResult result;
  BlockInput input = stem_input(net, views, opts);
  for (std::size_t k = 0; k < space.block_count(); ++k) {
    const std::string label = "evolution/block" + std::to_string(k);
    Rng rng(derive_seed(config.seed, label));
    std::vector<BlockPath> pop;
    if (count_block_paths(space, k, input.entry_scale) <= config.population &&
        count_block_paths(space, k, input.entry_scale) <= space.traversal_cap) {
      pop = enumerate_block_paths(space, k, input.entry_scale);
    } else {
      pop = sample_paths(space, k, config.population, rng(), input.entry_scale);
    }

    BlockPath best;
    double best_loss = 0.0;
    for (std::size_t g = 1; g <= std::max<std::size_t>(config.generations, 1); ++g) {
      std::vector<PathVectors> vecs;
      vecs.reserve(pop.size());
      for (const auto& p : pop) vecs.push_back(path_vectors(net, k, p, input, opts));
      const Tensor center = population_center(vecs);
      std::vector<double> loss = rate_block_candidates(vecs, center);

      std::vector<std::size_t> order(pop.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (loss[a] != loss[b]) return loss[a] < loss[b];
        return pop[a] < pop[b];
      });
      // ratings are relative to this generation's center, so only the
      // final generation's best is reported
      best = pop[order[0]];
      best_loss = loss[order[0]];
      result.history.push_back({k, g, pop, loss, best, best_loss});
      if (g >= config.generations) break;

      const std::size_t keep = std::max<std::size_t>(1, pop.size() / 2);
      std::vector<BlockPath> survivors;
      for (std::size_t i = 0; i < keep; ++i) survivors.push_back(pop[order[i]]);
      std::vector<BlockPath> children = survivors;
      while (children.size() < config.population) {
        const BlockPath& parent = survivors[uniform_index(rng, survivors.size())];
        children.push_back(uniform_unit(rng) < config.mutation_rate
                               ? mutate(space, k, parent, input.entry_scale, rng)
                               : parent);
      }
      pop = std::move(children);
    }
    result.best.blocks.push_back(best);
    result.best_block_loss.push_back(best_loss);
    if (k + 1 < space.block_count()) input = advance(net, k, best, input, opts);
  }
  return result;
}

RatingTable rate_architecture_set(const SearchSpaceDef& space, const TraversalResult& traversal,
                                  const std::vector<Architecture>& architectures, const std::vector<double>& lambda) {
  RatingTable table;
  table.lambda = lambda;
  for (const auto& arch : architectures) {
    validate_architecture(space, arch);
    std::vector<double> losses;
    int scale = space.initial_scale;
    for (std::size_t k = 0; k < arch.blocks.size(); ++k) {
      losses.push_back(traversal.lookup(k, scale, arch.blocks[k]));
      scale = path_exit_scale(space, arch.blocks[k], scale);
    }
    table.architectures.push_back(encode_architecture(space, arch));
    table.total.push_back(weighted_total(losses, lambda));
    table.block_loss.push_back(std::move(losses));
  }
  return table;
}

RatingTable rate_architecture_set(Supernet& net, const std::vector<Architecture>& architectures,
                                  const FixedViewSet& views, const std::vector<double>& lambda,
                                  const EvalOptions& opts) {
  TraversalResult t = traversal_search(net, views, lambda, opts);
  RatingTable table = rate_architecture_set(net.space(), t, architectures, lambda);
  table.view_seed = views.seed;
  return table;
}

std::vector<std::size_t> rank_order(const RatingTable& table) {
  std::vector<std::size_t> order(table.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return table.total[a] < table.total[b]; });
  return order;
}

std::string format_rating_csv(const RatingTable& table) {
  std::string lambda;
  for (std::size_t k = 0; k < table.lambda.size(); ++k) lambda += (k ? ";" : "") + format_double(table.lambda[k]);
  std::string out = "# checkpoint=" + table.checkpoint + ",view_seed=" + std::to_string(table.view_seed) +
                    ",prefix_policy=" + table.prefix_policy + ",lambda=" + lambda + ",digest=" + table.digest + "\n";
  out += "architecture";
  for (std::size_t k = 0; k < table.lambda.size(); ++k) out += ",block" + std::to_string(k + 1);
  out += ",total\n";
  for (std::size_t r = 0; r < table.rows(); ++r) {
    out += table.architectures[r];
    for (double v : table.block_loss[r]) out += "," + format_double(v);
    out += "," + format_double(table.total[r]) + "\n";
  }
  return out;
}

RatingTable parse_rating_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  RatingTable table;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw std::invalid_argument("ratings: missing metadata line");
  for (const auto& field : split(line.substr(2), ',')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("ratings: bad metadata field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "checkpoint") table.checkpoint = value;
    else if (key == "view_seed") table.view_seed = std::stoull(value);
    else if (key == "prefix_policy") table.prefix_policy = value;
    else if (key == "digest") table.digest = value;
    else if (key == "lambda") {
      for (const auto& v : split(value, ';')) table.lambda.push_back(parse_double(v, "lambda"));
    } else {
      throw std::invalid_argument("ratings: unknown metadata key '" + key + "'");
    }
  }
  if (!std::getline(in, line)) throw std::invalid_argument("ratings: missing column header");
  const auto header = split(line, ',');
  if (header.size() != table.lambda.size() + 2 || header.front() != "architecture" || header.back() != "total") {
    throw std::invalid_argument("ratings: column header does not match lambda length");
  }
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    const std::string where = "line " + std::to_string(lineno);
    if (cells.size() != header.size()) throw std::invalid_argument("ratings: wrong cell count on " + where);
    table.architectures.push_back(cells.front());
    std::vector<double> losses;
    for (std::size_t k = 1; k + 1 < cells.size(); ++k) losses.push_back(parse_double(cells[k], where));
    table.block_loss.push_back(std::move(losses));
    table.total.push_back(parse_double(cells.back(), where));
  }
  return table;
}

void write_rating_csv(const RatingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_rating_csv(table);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RatingTable read_rating_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_rating_csv(ss.str());
}

}  // namespace boss
