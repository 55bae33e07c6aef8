#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "boss/evaluator.hpp"
#include "boss/trainer.hpp"

using namespace boss;

namespace {

struct Fixture {
  Dataset data;
  ChannelStats stats;
  FixedViewSet views;

  explicit Fixture(std::size_t val = 24) {
    data = partition(generate_synthetic(5, 64 + val, 8), {64, val, 0, 0}, 2);
    stats = channel_stats(data.split(SplitId::nas_train).images);
    views = build_fixed_views(data.split(SplitId::nas_val), 7, AugmentPolicy{}, stats);
  }
};

// One short epoch so batchnorm statistics and weights move off init.
SiameseState trained(const SearchSpaceDef& space, const Fixture& fx) {
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 1;
  cfg.seed = 3;
  SiameseState st(space, cfg);
  train_supernet(st, cfg, fx.data.split(SplitId::nas_train), fx.stats, std::nullopt);
  return st;
}

}  // namespace

TEST_CASE("fixed views: determinism, identity, distinct pairs") {
  Fixture fx;
  const auto& val = fx.data.split(SplitId::nas_val);
  FixedViewSet again = build_fixed_views(val, 7, AugmentPolicy{}, fx.stats);
  CHECK(again.x1.data == fx.views.x1.data);
  CHECK(again.x2.data == fx.views.x2.data);
  CHECK(build_fixed_views(val, 8, AugmentPolicy{}, fx.stats).x1.data != fx.views.x1.data);

  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < fx.views.size(); ++i) {
    double diff = 0.0;
    for (std::size_t p = 0; p < per; ++p) diff += std::abs(fx.views.x1.data[i * per + p] - fx.views.x2.data[i * per + p]);
    CHECK(diff / per > 0.0);
  }

  FixedViewSet plain = build_fixed_views(val, 7, AugmentPolicy::none(), ChannelStats{});
  CHECK(plain.x1.data == val.images.data);
  CHECK(plain.x2.data == val.images.data);
  CHECK(build_fixed_views(val, 7, AugmentPolicy{}, fx.stats, 5).size() == 5);
}

TEST_CASE("argmin keeps the first of ties") {
  CHECK(argmin_first({0.3, 0.1, 0.2}) == 1);
  CHECK(argmin_first({0.1, 0.5, 0.1}) == 0);
  CHECK_THROWS(argmin_first({}));
}

TEST_CASE("planted vectors: center and hand-computed distances") {
  Tensor e1({1, 3}, {1, 0, 0}), e2({1, 3}, {0, 1, 0});
  std::vector<PathVectors> cands{{e1, e1}, {e2, e2}};
  Tensor c = population_center(cands);
  const double h = 1.0 / std::sqrt(2.0);
  CHECK(c.data[0] == doctest::Approx(h).epsilon(1e-15));
  CHECK(c.data[1] == doctest::Approx(h).epsilon(1e-15));
  auto loss = rate_block_candidates(cands, c);
  // ||e1 - (e1 + e2)/sqrt2||^2 = (1 - h)^2 + h^2 = 2 - sqrt2
  CHECK(loss[0] == doctest::Approx(2.0 - std::sqrt(2.0)).epsilon(1e-14));
  CHECK(loss[1] == doctest::Approx(2.0 - std::sqrt(2.0)).epsilon(1e-14));

  Tensor e3({1, 3}, {0, 0, 1});
  PathVectors third{e3, e1};
  CHECK(rating_loss(third, c) == doctest::Approx(2.0).epsilon(1e-14));
  PathVectors at_center{c, c};
  CHECK(rating_loss(at_center, c) == 0.0);
  CHECK(population_center({third}).data == e1.data);
}

TEST_CASE("population center on a supernet: singleton, recomputation, bounds") {
  Fixture fx;
  SiameseState st = trained(mbconv_mini(), fx);
  BlockInput in = stem_input(st.online, fx.views);
  auto paths = enumerate_block_paths(st.online.space(), 0);
  REQUIRE(paths.size() == 16);

  std::vector<PathVectors> vecs;
  for (const auto& p : paths) vecs.push_back(path_vectors(st.online, 0, p, in));
  CHECK(population_center(st.online, 0, {paths[3]}, in).data == vecs[3].v2.data);

  Tensor center = population_center(st.online, 0, paths, in);
  const std::size_t n = center.dim(0), d = center.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(d, 0.0);
    for (const auto& v : vecs)
      for (std::size_t j = 0; j < d; ++j) m[j] += v.v2.data[i * d + j] / static_cast<double>(vecs.size());
    const double norm = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
    for (std::size_t j = 0; j < d; ++j) REQUIRE(std::abs(center.data[i * d + j] - m[j] / norm) <= 1e-10);
  }
  for (double l : rate_block_candidates(vecs, center)) {
    CHECK(l >= 0.0);
    CHECK(l <= 4.0);
  }

  EvalOptions small{5};
  PathVectors chunked = path_vectors(st.online, 0, paths[5], in, small);
  for (std::size_t i = 0; i < chunked.v1.size(); ++i) CHECK(std::abs(chunked.v1.data[i] - vecs[5].v1.data[i]) <= 1e-12);
}

TEST_CASE("traversal rates the full enumeration, 256 paths for a 4x4 block") {
  Fixture fx(8);
  SearchSpaceDef space = mbconv_mini();
  space.block_sizes = {4, 2};
  Rng rng(1);
  Supernet net(space, rng);
  TraversalResult t = traversal_search(net, fx.views, {1.0, 1.0});
  REQUIRE(t.ratings.size() == 2);
  CHECK(t.ratings[0].paths.size() == 256);
  CHECK(t.ratings[1].paths.size() == 16);
  CHECK(t.best.blocks[0] == t.ratings[0].paths[argmin_first(t.ratings[0].loss)]);
}

TEST_CASE("traversal equals the argmin of the full composite table (mbconv)") {
  Fixture fx;
  SiameseState st = trained(mbconv_mini(), fx);
  const std::vector<double> lambda{1.0, 1.0, 1.0};
  TraversalResult t = traversal_search(st.online, fx.views, lambda);
  auto all = enumerate_architectures(st.online.space(), 4096);
  REQUIRE(all.size() == 4096);
  RatingTable table = rate_architecture_set(st.online.space(), t, all, lambda);
  const std::size_t best = rank_order(table).front();
  CHECK(table.architectures[best] == encode_architecture(st.online.space(), t.best));
  CHECK(table.total[best] == t.best_total);

  for (std::size_t r = 0; r < table.rows(); ++r) {
    double sum = 0.0;
    for (double v : table.block_loss[r]) sum += v;
    REQUIRE(table.total[r] == sum);
  }

  // a lower-rated block choice strictly lowers the total
  Architecture worse = t.best;
  const auto& r1 = t.ratings[1];
  const std::size_t worst = static_cast<std::size_t>(std::max_element(r1.loss.begin(), r1.loss.end()) - r1.loss.begin());
  worse.blocks[1] = r1.paths[worst];
  RatingTable pair = rate_architecture_set(st.online.space(), t, {worse, t.best}, lambda);
  CHECK(pair.total[1] < pair.total[0]);

  Architecture bogus = t.best;
  bogus.blocks[0][0].candidate = 9;
  CHECK_THROWS(rate_architecture_set(st.online.space(), t, {bogus}, lambda));
}

TEST_CASE("traversal equals the argmin of the full composite table (hytra)") {
  Fixture fx(12);
  Rng rng(4);
  Supernet net(hytra_mini(), rng);
  const std::vector<double> lambda{1.0, 0.5, 2.0, 1.0};
  TraversalResult t = traversal_search(net, fx.views, lambda);
  auto all = enumerate_architectures(net.space(), 100000);
  RatingTable table = rate_architecture_set(net.space(), t, all, lambda);
  const std::size_t best = rank_order(table).front();
  CHECK(table.architectures[best] == encode_architecture(net.space(), t.best));
  CHECK(table.total[best] == t.best_total);
  MESSAGE(all.size() << " hytra architectures, " << t.ratings.size() << " (block, entry scale) ratings");
}

TEST_CASE("traversal cap directs to evolution") {
  Fixture fx(4);
  SearchSpaceDef space = nats_size_mini(6);
  space.block_sizes = {1, 5};
  Rng rng(1);
  Supernet net(space, rng);
  try {
    traversal_search(net, fx.views, {1.0, 1.0});
    FAIL("expected cap error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("evolutionary") != std::string::npos);
  }
  CHECK_THROWS(traversal_search(net, fx.views, {1.0}));
}

TEST_CASE("evolution over the full enumeration matches traversal at generation 1") {
  Fixture fx;
  SiameseState st = trained(mbconv_mini(), fx);
  TraversalResult t = traversal_search(st.online, fx.views, {1.0, 1.0, 1.0});
  EvolutionConfig cfg{16, 1, 0.0, 5};
  EvolutionResult e = evolutionary_search(st.online, fx.views, cfg);
  CHECK(e.best == t.best);
  CHECK(e.best_block_loss == t.best_block_loss);
  REQUIRE(e.history.size() == 3);
  CHECK(e.history[0].population == enumerate_block_paths(st.online.space(), 0));
}

TEST_CASE("evolution: determinism and validity on hytra") {
  Fixture fx(8);
  Rng rng(6);
  Supernet net(hytra_mini(), rng);
  EvolutionConfig cfg{6, 3, 0.7, 11};
  EvolutionResult a = evolutionary_search(net, fx.views, cfg);
  EvolutionResult b = evolutionary_search(net, fx.views, cfg);
  CHECK(a.best == b.best);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].population == b.history[i].population);
    CHECK(a.history[i].loss == b.history[i].loss);
  }
  CHECK_NOTHROW(validate_architecture(net.space(), a.best));
  // every member is valid from its block's entry scale
  int scale = net.space().initial_scale;
  for (std::size_t k = 0; k < 4; ++k) {
    for (const auto& g : a.history) {
      if (g.block != k) continue;
      const std::size_t count = count_block_paths(net.space(), k, scale);
      CHECK(g.population.size() == (g.generation == 1 && count < 6 ? count : 6));
      for (const auto& p : g.population) {
        REQUIRE_FALSE(validate_hytra_path(net.space(), p, scale, net.space().first_layer(k)).has_value());
      }
    }
    scale = path_exit_scale(net.space(), a.best.blocks[k], scale);
  }
  CHECK_THROWS(evolutionary_search(net, fx.views, EvolutionConfig{1, 1, 0.0, 0}));
}

TEST_CASE("lambda scaling leaves the ranking unchanged on seeded tables") {
  Rng rng(77);
  for (int t = 0; t < 100; ++t) {
    const std::size_t rows = 24, blocks = 3;
    std::vector<double> lambda(blocks);
    for (double& l : lambda) l = 0.1 + uniform_unit(rng);
    const double c = 0.01 + 10.0 * uniform_unit(rng);
    std::vector<double> scaled = lambda;
    for (double& l : scaled) l *= c;
    RatingTable a, b;
    a.lambda = lambda;
    b.lambda = scaled;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> losses(blocks);
      for (double& l : losses) l = 4.0 * uniform_unit(rng);
      a.architectures.push_back(std::to_string(r));
      b.architectures.push_back(std::to_string(r));
      a.total.push_back(weighted_total(losses, lambda));
      b.total.push_back(weighted_total(losses, scaled));
      a.block_loss.push_back(losses);
      b.block_loss.push_back(losses);
    }
    REQUIRE(rank_order(a) == rank_order(b));
  }
}

TEST_CASE("rating csv: layout, read-back, determinism") {
  Fixture fx;
  Rng rng(2);
  Supernet net(mbconv_mini(), rng);
  Rng arng(3);
  auto archs = sample_architectures(net.space(), 3, arng);
  RatingTable table = rate_architecture_set(net, archs, fx.views, {1.0, 1.0, 1.0});
  table.checkpoint = "epoch_000";
  table.digest = "0123456789abcdef";
  const std::string text = format_rating_csv(table);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  CHECK(text.rfind("# checkpoint=epoch_000,view_seed=7,prefix_policy=best-prefix,lambda=1;1;1,digest=0123456789abcdef\n"
                   "architecture,block1,block2,block3,total\n",
                   0) == 0);

  const auto path = std::filesystem::temp_directory_path() / "boss_test_ratings.csv";
  write_rating_csv(table, path);
  RatingTable back = read_rating_csv(path);
  std::filesystem::remove(path);
  CHECK(back.architectures == table.architectures);
  CHECK(back.block_loss == table.block_loss);
  CHECK(back.view_seed == 7);
  CHECK(back.lambda == table.lambda);
  for (std::size_t r = 0; r < back.rows(); ++r) CHECK(back.total[r] == weighted_total(back.block_loss[r], back.lambda));

  RatingTable again = rate_architecture_set(net, archs, fx.views, {1.0, 1.0, 1.0});
  again.checkpoint = "epoch_000";
  again.digest = "0123456789abcdef";
  CHECK(format_rating_csv(again) == text);

  CHECK_THROWS(parse_rating_csv("architecture,total\n"));
  CHECK_THROWS(parse_rating_csv("# view_seed=1,lambda=1\narchitecture,block1,total\nx,0.1\n"));
}
