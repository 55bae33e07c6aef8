#include "boss/config.hpp"

#include <thread>

#include "boss/random.hpp"

namespace boss {

namespace {

using nlohmann::json;

json augment_json(const AugmentPolicy& a) {
  return {{"crop", a.crop}, {"flip", a.flip}, {"color", a.color}, {"grayscale", a.grayscale}};
}

std::string schedule_name(MomentumSchedule s) { return s == MomentumSchedule::constant ? "constant" : "cosine"; }
std::string bootstrap_name(Bootstrap b) { return b == Bootstrap::ensemble ? "ensemble" : "naive"; }

std::string join_path(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

std::string type_label(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool type_matches(const json& want, const json& got) {
  if (want.is_number_integer() || want.is_number_unsigned()) return got.is_number_integer() || got.is_number_unsigned();
  if (want.is_number_float()) return got.is_number();
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_array()) return got.is_array();
  if (want.is_object()) return got.is_object();
  return false;
}

void merge_into(json& base, const json& doc, const std::string& path) {
  if (!doc.is_object()) throw ConfigError(path, "config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : doc.items()) {
    const std::string p = join_path(path, key);
    if (!base.contains(key)) throw ConfigError(p, "config: unknown key '" + p + "'");
    json& slot = base[key];
    if (!type_matches(slot, value)) {
      throw ConfigError(p, "config: '" + p + "' expects " + type_label(slot) + ", got " + type_label(value));
    }
    if (slot.is_object()) {
      merge_into(slot, value, p);
    } else if (slot.is_number_float()) {
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

void apply_override(json& doc, const json& defaults, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "config: override '" + assignment + "' is not dotted.key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &doc;
  const json* schema = &defaults;
  std::string path;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    path = join_path(path, part);
    if (schema && schema->is_object() && schema->contains(part)) {
      schema = &schema->at(part);
    } else {
      schema = nullptr;
    }
    if (dot == std::string::npos) {
      json value = json::parse(text, nullptr, false);
      if (value.is_discarded() || (schema && schema->is_string() && !value.is_string())) value = text;
      (*node)[part] = value;
      return;
    }
    json& next = (*node)[part];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError(path, "config: '" + path + "' is not an object");
    node = &next;
    start = dot + 1;
  }
}

class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const std::string& path) const {
    const json* node = &root_;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      node = &node->at(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
      if (dot == std::string::npos) return *node;
      start = dot + 1;
    }
  }
  double number(const std::string& p) const { return at(p).get<double>(); }
  bool flag(const std::string& p) const { return at(p).get<bool>(); }
  std::string text(const std::string& p) const { return at(p).get<std::string>(); }
  std::int64_t integer(const std::string& p) const {
    const json& v = at(p);
    if (v.is_number_unsigned()) {
      const auto u = v.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(INT64_MAX)) throw ConfigError(p, "config: '" + p + "' is out of range");
      return static_cast<std::int64_t>(u);
    }
    return v.get<std::int64_t>();
  }
  std::size_t count(const std::string& p) const {
    const std::int64_t v = integer(p);
    if (v < 0) throw ConfigError(p, "config: '" + p + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }
  std::int64_t seed(const std::string& p) const {
    const std::int64_t v = integer(p);
    if (v < -1) throw ConfigError(p, "config: '" + p + "' must be -1 (derived) or a non-negative seed");
    return v;
  }
  std::string choice(const std::string& p, const std::vector<std::string>& options) const {
    const std::string v = text(p);
    for (const auto& o : options) {
      if (o == v) return v;
    }
    std::string list;
    for (const auto& o : options) list += (list.empty() ? "" : ", ") + o;
    throw ConfigError(p, "config: '" + p + "' has invalid value '" + v + "' (expected " + list + ")");
  }
  AugmentPolicy augment(const std::string& p) const {
    return {flag(p + ".crop"), flag(p + ".flip"), flag(p + ".color"), flag(p + ".grayscale")};
  }

 private:
  const json& root_;
};

RunConfig from_tree(const json& tree) {
  Reader r(tree);
  RunConfig c;
  c.space = r.choice("space", {"mbconv-mini", "hytra-mini", "nats-size-mini"});
  {
    const std::int64_t s = r.integer("seed");
    if (s < 0) throw ConfigError("seed", "config: 'seed' must be non-negative");
    c.seed = static_cast<std::uint64_t>(s);
  }
  c.workers = r.count("workers");
  c.output_dir = r.text("output_dir");
  if (c.output_dir.empty()) throw ConfigError("output_dir", "config: 'output_dir' is empty");

  auto& d = c.dataset;
  d.source = r.choice("dataset.source", {"synthetic", "cifar10"});
  for (const auto& v : r.at("dataset.cifar10_paths")) {
    if (!v.is_string()) throw ConfigError("dataset.cifar10_paths", "config: 'dataset.cifar10_paths' expects strings");
    d.cifar10_paths.push_back(v.get<std::string>());
  }
  if (d.source == "cifar10" && d.cifar10_paths.empty()) {
    throw ConfigError("dataset.cifar10_paths", "config: 'dataset.cifar10_paths' is empty for source cifar10");
  }
  d.classes = static_cast<int>(r.count("dataset.classes"));
  if (d.classes < 2) throw ConfigError("dataset.classes", "config: 'dataset.classes' must be >= 2");
  d.synthetic.amplitude = r.number("dataset.synthetic.amplitude");
  d.synthetic.amplitude_jitter = r.number("dataset.synthetic.amplitude_jitter");
  d.synthetic.orientation_jitter = r.number("dataset.synthetic.orientation_jitter");
  d.synthetic.noise = r.number("dataset.synthetic.noise");
  d.splits.nas_train = r.count("dataset.splits.nas_train");
  d.splits.nas_val = r.count("dataset.splits.nas_val");
  d.splits.oracle_train = r.count("dataset.splits.oracle_train");
  d.splits.oracle_test = r.count("dataset.splits.oracle_test");
  d.seed = r.seed("dataset.seed");

  auto& t = c.trainer;
  t.paths_per_step = r.count("trainer.paths_per_step");
  t.epochs = r.count("trainer.epochs");
  t.warmup_epochs = r.count("trainer.warmup_epochs");
  t.batch_size = r.count("trainer.batch_size");
  t.optimizer.kind = optimizer_from_name(r.choice("trainer.optimizer.kind", {"sgd-momentum", "lars-lite"}));
  t.optimizer.lr = r.number("trainer.optimizer.lr");
  t.optimizer.momentum = r.number("trainer.optimizer.momentum");
  t.optimizer.weight_decay = r.number("trainer.optimizer.weight_decay");
  t.tau = r.number("trainer.tau");
  t.tau_schedule = r.choice("trainer.tau_schedule", {"constant", "cosine"}) == "constant"
                       ? MomentumSchedule::constant
                       : MomentumSchedule::cosine_to_one;
  t.bootstrap = r.choice("trainer.bootstrap", {"ensemble", "naive"}) == "ensemble" ? Bootstrap::ensemble
                                                                                     : Bootstrap::naive;
  t.symmetrize = r.flag("trainer.symmetrize");
  t.softmax_ensemble = r.flag("trainer.softmax_ensemble");
  t.augment = r.augment("trainer.augment");
  t.projection_hidden = static_cast<int>(r.count("trainer.projection_hidden"));
  t.projection_out = static_cast<int>(r.count("trainer.projection_out"));
  t.predictor_hidden = static_cast<int>(r.count("trainer.predictor_hidden"));
  c.trainer_seed = r.seed("trainer.seed");
  try {
    validate_train_config(t);
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.substr(0, msg.find(' ')), std::string("config: ") + msg);
  }

  auto& e = c.evaluator;
  e.view_seed = r.seed("evaluator.view_seed");
  for (const auto& v : r.at("evaluator.lambda")) {
    if (!v.is_number() || v.get<double>() <= 0.0) {
      throw ConfigError("evaluator.lambda", "config: 'evaluator.lambda' expects positive numbers");
    }
    e.lambda.push_back(v.get<double>());
  }
  e.val_subset = r.count("evaluator.val_subset");
  e.traversal_cap = r.count("evaluator.traversal_cap");
  e.chunk = r.count("evaluator.chunk");
  if (e.chunk == 0) throw ConfigError("evaluator.chunk", "config: 'evaluator.chunk' must be positive");
  e.method = r.choice("evaluator.method", {"traversal", "evolution"});
  e.evolution.population = r.count("evaluator.evolution.population");
  e.evolution.generations = r.count("evaluator.evolution.generations");
  e.evolution.mutation_rate = r.number("evaluator.evolution.mutation_rate");
  if (e.evolution.population < 2) {
    throw ConfigError("evaluator.evolution.population", "config: 'evaluator.evolution.population' must be >= 2");
  }
  if (e.evolution.generations < 1) {
    throw ConfigError("evaluator.evolution.generations", "config: 'evaluator.evolution.generations' must be >= 1");
  }
  e.evolution_seed = r.seed("evaluator.evolution.seed");
  e.table_limit = r.count("evaluator.table_limit");
  e.checkpoint = r.text("evaluator.checkpoint");

  auto& o = c.oracle;
  o.architectures = r.count("oracle.architectures");
  o.seeds = r.count("oracle.seeds");
  if (o.seeds == 0) throw ConfigError("oracle.seeds", "config: 'oracle.seeds' must be positive");
  o.seed = r.seed("oracle.seed");
  o.train.epochs = r.count("oracle.epochs");
  o.train.batch_size = r.count("oracle.batch_size");
  o.train.lr = r.number("oracle.lr");
  o.train.momentum = r.number("oracle.momentum");
  o.train.weight_decay = r.number("oracle.weight_decay");
  o.train.augment = r.augment("oracle.augment");
  return c;
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  const auto& t = c.trainer;
  const auto& e = c.evaluator;
  const auto& o = c.oracle;
  json paths = json::array();
  for (const auto& p : d.cifar10_paths) paths.push_back(p);
  json lambda = json::array();
  for (double v : e.lambda) lambda.push_back(v);
  return {
      {"space", c.space},
      {"seed", c.seed},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"source", d.source},
        {"cifar10_paths", paths},
        {"classes", d.classes},
        {"synthetic",
         {{"amplitude", d.synthetic.amplitude},
          {"amplitude_jitter", d.synthetic.amplitude_jitter},
          {"orientation_jitter", d.synthetic.orientation_jitter},
          {"noise", d.synthetic.noise}}},
        {"splits",
         {{"nas_train", d.splits.nas_train},
          {"nas_val", d.splits.nas_val},
          {"oracle_train", d.splits.oracle_train},
          {"oracle_test", d.splits.oracle_test}}},
        {"seed", d.seed}}},
      {"trainer",
       {{"paths_per_step", t.paths_per_step},
        {"epochs", t.epochs},
        {"warmup_epochs", t.warmup_epochs},
        {"batch_size", t.batch_size},
        {"optimizer",
         {{"kind", optimizer_name(t.optimizer.kind)},
          {"lr", t.optimizer.lr},
          {"momentum", t.optimizer.momentum},
          {"weight_decay", t.optimizer.weight_decay}}},
        {"tau", t.tau},
        {"tau_schedule", schedule_name(t.tau_schedule)},
        {"bootstrap", bootstrap_name(t.bootstrap)},
        {"symmetrize", t.symmetrize},
        {"softmax_ensemble", t.softmax_ensemble},
        {"augment", augment_json(t.augment)},
        {"projection_hidden", t.projection_hidden},
        {"projection_out", t.projection_out},
        {"predictor_hidden", t.predictor_hidden},
        {"seed", c.trainer_seed}}},
      {"evaluator",
       {{"view_seed", e.view_seed},
        {"lambda", lambda},
        {"val_subset", e.val_subset},
        {"traversal_cap", e.traversal_cap},
        {"chunk", e.chunk},
        {"method", e.method},
        {"evolution",
         {{"population", e.evolution.population},
          {"generations", e.evolution.generations},
          {"mutation_rate", e.evolution.mutation_rate},
          {"seed", e.evolution_seed}}},
        {"table_limit", e.table_limit},
        {"checkpoint", e.checkpoint}}},
      {"oracle",
       {{"architectures", o.architectures},
        {"seeds", o.seeds},
        {"seed", o.seed},
        {"epochs", o.train.epochs},
        {"batch_size", o.train.batch_size},
        {"lr", o.train.lr},
        {"momentum", o.train.momentum},
        {"weight_decay", o.train.weight_decay},
        {"augment", augment_json(o.train.augment)}}},
  };
}

json default_config_json() { return to_json(RunConfig{}); }

RunConfig parse_config(const json& document, const std::vector<std::string>& overrides) {
  const json defaults = default_config_json();
  json doc = document.is_null() ? json::object() : document;
  for (const auto& o : overrides) apply_override(doc, defaults, o);
  json tree = defaults;
  merge_into(tree, doc, "");
  return from_tree(tree);
}

RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("", std::string("config: ") + e.what());
    }
  }
  return parse_config(doc, overrides);
}

std::string serialize_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

std::string config_digest(const RunConfig& config) {
  json tree = to_json(config);
  tree.erase("output_dir");
  tree.erase("workers");
  return hex_digest(tree.dump());
}

std::uint64_t stage_seed(const RunConfig& config, std::int64_t explicit_seed, const std::string& label) {
  return explicit_seed >= 0 ? static_cast<std::uint64_t>(explicit_seed) : derive_seed(config.seed, label);
}

SearchSpaceDef run_space(const RunConfig& config) {
  SearchSpaceDef space = make_space(config.space);
  space.traversal_cap = config.evaluator.traversal_cap;
  return space;
}

TrainConfig run_train_config(const RunConfig& config) {
  TrainConfig t = config.trainer;
  t.seed = stage_seed(config, config.trainer_seed, "trainer");
  return t;
}

EvolutionConfig run_evolution_config(const RunConfig& config) {
  EvolutionConfig e = config.evaluator.evolution;
  e.seed = stage_seed(config, config.evaluator.evolution_seed, "evolution");
  return e;
}

std::vector<double> run_lambda(const RunConfig& config, std::size_t blocks) {
  if (config.evaluator.lambda.empty()) return std::vector<double>(blocks, 1.0);
  if (config.evaluator.lambda.size() != blocks) {
    throw ConfigError("evaluator.lambda", "config: 'evaluator.lambda' has " +
                                              std::to_string(config.evaluator.lambda.size()) + " entries, space has " +
                                              std::to_string(blocks) + " blocks");
  }
  return config.evaluator.lambda;
}

std::size_t run_workers(const RunConfig& config) {
  if (config.workers > 0) return config.workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace boss
