#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "boss/ranking.hpp"
#include "boss/trainer.hpp"

using namespace boss;

namespace {

// Textbook definitions for distinct values.
double brute_tau(const std::vector<double>& x, const std::vector<double>& y) {
  int c = 0, d = 0;
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) ((x[i] - x[j]) * (y[i] - y[j]) > 0 ? c : d) += 1;
  return static_cast<double>(c - d) / static_cast<double>(n * (n - 1) / 2);
}

double brute_rho(const std::vector<double>& x, const std::vector<double>& y) {
  // rank by counting smaller elements
  const std::size_t n = x.size();
  long long d2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long long rx = 1, ry = 1;
    for (std::size_t j = 0; j < n; ++j) {
      rx += x[j] < x[i];
      ry += y[j] < y[i];
    }
    d2 += (rx - ry) * (rx - ry);
  }
  const long long m = static_cast<long long>(n * (n * n - 1));
  return static_cast<double>(m - 6 * d2) / static_cast<double>(m);
}

double brute_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// tau-b through the n0, n1, n2 pair counts.
double brute_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double s = 0, n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      s += (dx > 0) - (dx < 0) == 0 || (dy > 0) - (dy < 0) == 0 ? 0 : ((dx > 0) == (dy > 0) ? 1 : -1);
      n1 += dx == 0;
      n2 += dy == 0;
    }
  const double n0 = static_cast<double>(n * (n - 1) / 2);
  return s / std::sqrt((n0 - n1) * (n0 - n2));
}

// Average ranks by explicit counting: 1 + #smaller + #equal-others / 2.
std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double smaller = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      smaller += x[j] < x[i];
      equal += (j != i && x[j] == x[i]);
    }
    r[i] = 1 + smaller + equal / 2;
  }
  return r;
}

}  // namespace

TEST_CASE("worked examples") {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  CHECK(*kendall_tau_b(x, y) == 4.0 / 6.0);
  CHECK(*spearman_rho(x, y) == 0.8);
  CHECK(*kendall_tau_b(x, x) == 1.0);
  CHECK(*kendall_tau_b(x, {4, 3, 2, 1}) == -1.0);
  CHECK(*spearman_rho(x, {10, 20, 30, 1000}) == 1.0);
  CHECK(*pearson_r(x, {3, 5, 7, 9}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_FALSE(pearson_r(x, {2, 2, 2, 2}).has_value());
  CHECK_FALSE(kendall_tau_b(x, {2, 2, 2, 2}).has_value());
  CHECK_FALSE(spearman_rho({1, 1, 1, 1}, x).has_value());
  CHECK_THROWS_AS(kendall_tau_b(x, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(pearson_r({1}, {1}), std::invalid_argument);
}

TEST_CASE("exhaustive permutations, n <= 5, exact") {
  for (std::size_t n = 2; n <= 5; ++n) {
    std::vector<double> x(n);
    std::iota(x.begin(), x.end(), 1.0);
    std::vector<double> y = x;
    std::size_t count = 0;
    do {
      REQUIRE(*kendall_tau_b(x, y) == brute_tau(x, y));
      REQUIRE(*spearman_rho(x, y) == brute_rho(x, y));
      REQUIRE(*pearson_r(x, y) == brute_pearson(x, y));
      ++count;
    } while (std::next_permutation(y.begin(), y.end()));
    CHECK(count == static_cast<std::size_t>(std::tgamma(static_cast<double>(n) + 1.0) + 0.5));
  }
}

TEST_CASE("seeded tied samples") {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + uniform_index(rng, 10);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(uniform_index(rng, 4));
      y[i] = static_cast<double>(uniform_index(rng, 4)) + 0.5 * x[i];
    }
    CHECK(average_ranks(x) == brute_ranks(x));
    const auto tau = kendall_tau_b(x, y), rho = spearman_rho(x, y), r = pearson_r(x, y);
    if (!tau) {
      CHECK((std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
             std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })));
      continue;
    }
    CHECK(std::abs(*tau - brute_tau_b(x, y)) <= 1e-12);
    CHECK(std::abs(*rho - brute_pearson(brute_ranks(x), brute_ranks(y))) <= 1e-12);
    CHECK(std::abs(*r - brute_pearson(x, y)) <= 1e-12);
    for (double v : {*tau, *rho, *r}) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  std::vector<double> a{1, 2, 2, 3}, b{1, 3, 3, 2};
  CHECK(average_ranks(a) == std::vector<double>{1, 2.5, 2.5, 4});
  CHECK(*spearman_rho(a, b) == doctest::Approx(brute_pearson(brute_ranks(a), brute_ranks(b))).epsilon(1e-15));
}

TEST_CASE("six-point pearson against a two-pass oracle; transform invariances") {
  Rng rng(6);
  std::vector<double> x(6), y(6);
  for (std::size_t i = 0; i < 6; ++i) {
    x[i] = standard_normal(rng);
    y[i] = x[i] + standard_normal(rng);
  }
  CHECK(std::abs(*pearson_r(x, y) - brute_pearson(x, y)) <= 1e-12);
  std::vector<double> ex(6), ay(6);
  for (std::size_t i = 0; i < 6; ++i) {
    ex[i] = std::exp(x[i]);
    ay[i] = 3.0 * y[i] + 7.0;
  }
  CHECK(*kendall_tau_b(ex, y) == *kendall_tau_b(x, y));
  CHECK(*spearman_rho(ex, y) == *spearman_rho(x, y));
  CHECK(*pearson_r(x, ay) == doctest::Approx(*pearson_r(x, y)).epsilon(1e-12));
}

TEST_CASE("correlate: sign convention, join, markers") {
  RatingTable t;
  t.lambda = {1.0};
  std::vector<OracleRecord> oracle;
  for (int i = 0; i < 5; ++i) {
    const double acc = 0.5 + 0.1 * i;
    t.architectures.push_back("a" + std::to_string(i));
    t.block_loss.push_back({-acc});
    t.total.push_back(-acc);
    oracle.push_back({"a" + std::to_string(i), 0, acc, 10, ""});
  }
  oracle.push_back({"unrated", 0, 0.9, 10, ""});
  CorrelationReport rep = correlate(t, oracle);
  CHECK(rep.n == 5);
  CHECK(*rep.kendall_tau == 1.0);
  CHECK(*rep.spearman_rho == 1.0);
  CHECK(*rep.pearson_r == doctest::Approx(1.0).epsilon(1e-15));

  for (auto& v : t.total) v = -v;
  CHECK(*correlate(t, oracle).kendall_tau == -1.0);

  // seeds average before correlating
  oracle.push_back({"a0", 1, 0.5, 10, ""});
  CHECK(correlate(t, oracle).n == 5);

  std::vector<OracleRecord> flat;
  for (int i = 0; i < 5; ++i) flat.push_back({"a" + std::to_string(i), 0, 0.25, 10, ""});
  nlohmann::json j = report_json(correlate(t, flat));
  CHECK(j.at("kendall_tau_b") == "undefined");
  CHECK(j.at("pearson_r") == "undefined");
  CHECK(j.at("n") == 5);

  CHECK_THROWS_AS(correlate(t, {oracle[0], oracle[1]}), std::invalid_argument);
}

TEST_CASE("oracle csv round trip") {
  std::vector<OracleRecord> recs{{"m0.m1-m2.m3-m0.m0", 3, 0.625, 10, ""}, {"m1.m1-m1.m1-m1.m1", 4, 1.0 / 3.0, 10, ""}};
  auto back = parse_oracle_csv(format_oracle_csv(recs));
  REQUIRE(back.size() == 2);
  CHECK(back[1].architecture == recs[1].architecture);
  CHECK(back[1].accuracy == recs[1].accuracy);
  CHECK(back[0].seed == 3);
  CHECK_THROWS(parse_oracle_csv("arch,acc\n"));
}

TEST_CASE("oracle training: determinism, chance level untrained, disjointness") {
  RawDataset raw = generate_synthetic(2, 400, 8);
  Dataset ds = partition(raw, {0, 0, 144, 256}, 3);
  const auto& train = ds.split(SplitId::oracle_train);
  const auto& test = ds.split(SplitId::oracle_test);
  ChannelStats stats = channel_stats(train.images);
  SearchSpaceDef space = mbconv_mini();
  Rng rng(1);
  Architecture arch = sample_architecture(space, rng);

  OracleConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 48;
  OracleRecord a = oracle_train(space, arch, train, test, stats, cfg, 9);
  OracleRecord b = oracle_train(space, arch, train, test, stats, cfg, 9);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.architecture == encode_architecture(space, arch));
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 1.0);

  cfg.epochs = 0;
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) mean += oracle_train(space, arch, train, test, stats, cfg, seed).accuracy / 5.0;
  MESSAGE("untrained mean accuracy " << mean);
  CHECK(std::abs(mean - 0.125) <= 0.05);

  CHECK_THROWS_AS(oracle_train(space, arch, train, train, stats, cfg, 0), std::invalid_argument);
}

TEST_CASE("convergence tracking over checkpoints") {
  RawDataset raw = generate_synthetic(4, 96, 8);
  Dataset ds = partition(raw, {64, 16, 8, 8}, 1);
  ChannelStats stats = channel_stats(ds.split(SplitId::nas_train).images);
  FixedViewSet views = build_fixed_views(ds.split(SplitId::nas_val), 1, AugmentPolicy{}, stats);

  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  SiameseState st(mbconv_mini(), cfg);
  const auto dir = std::filesystem::temp_directory_path() / "boss_test_track";
  std::filesystem::remove_all(dir);
  TrainResult tr = train_supernet(st, cfg, ds.split(SplitId::nas_train), stats, dir);
  REQUIRE(tr.checkpoints.size() == 3);

  Rng rng(5);
  std::vector<OracleRecord> oracle;
  for (const auto& a : sample_architectures(st.online.space(), 6, rng)) {
    oracle.push_back({encode_architecture(st.online.space(), a), 0, uniform_unit(rng), 10, ""});
  }
  Rng init(0);
  Supernet net(mbconv_mini(), init);
  auto series = convergence_track(net, tr.checkpoints, views, oracle, {1.0, 1.0, 1.0});
  REQUIRE(series.size() == 3);
  CHECK(series[0].epoch == 0);
  CHECK(series[2].epoch == 2);
  for (const auto& e : series) CHECK(e.report.n == 6);

  auto same = convergence_track(net, {tr.checkpoints[1], tr.checkpoints[1]}, views, oracle, {1.0, 1.0, 1.0});
  CHECK(report_json(same[0].report) == report_json(same[1].report));
  CHECK_THROWS(convergence_track(net, {tr.checkpoints[0]}, views, oracle, {1.0, 1.0, 1.0}));
  std::filesystem::remove_all(dir);
}
