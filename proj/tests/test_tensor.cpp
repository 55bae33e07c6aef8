#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "boss/autodiff.hpp"
#include "boss/blocks.hpp"
#include "boss/checkpoint.hpp"
#include "boss/gradcheck.hpp"
#include "boss/optim.hpp"
#include "boss/random.hpp"

using namespace boss;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = scale * standard_normal(rng);
  return t;
}

// Independent reference: plain triple loop.
std::vector<double> triple_loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
  return c;
}

GradcheckReport check_unary(const std::function<Var(Var)>& op, const Shape& shape, double tol = 1e-4) {
  std::vector<ParameterStore*> none;
  return gradcheck(none, [&](Tape&, Var x) { return op(x); }, shape, tol);
}

GradcheckReport check_binary(const std::function<Var(Var, Var)>& op, const Shape& xs, const Shape& ps,
                             double tol = 1e-4) {
  Rng rng(11);
  ParameterStore store;
  store.add("p", random_tensor(ps, rng));
  std::vector<ParameterStore*> stores{&store};
  return gradcheck(stores, [&](Tape& t, Var x) { return op(x, t.param(store, "p")); }, xs, tol);
}

}  // namespace

TEST_CASE("conv2d with a 1x1 identity kernel reproduces the input") {
  Rng rng(1);
  Tape tape(false);
  Var x = tape.constant(random_tensor({2, 3, 5, 5}, rng));
  Tensor w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.data[c * 3 + c] = 1.0;
  Var y = conv2d(x, tape.constant(w), 1);
  CHECK(y.value().shape == x.value().shape);
  CHECK(y.value().data == x.value().data);
}

TEST_CASE("same padding maps stride 2 to ceil(H/2)") {
  Rng rng(2);
  for (std::size_t side : {7u, 8u, 9u}) {
    for (std::size_t k : {1u, 3u, 5u}) {
      Tape tape(false);
      Var x = tape.constant(random_tensor({1, 2, side, side}, rng));
      Var y = conv2d(x, tape.constant(random_tensor({4, 2, k, k}, rng)), 2);
      CHECK(y.dim(2) == (side + 1) / 2);
      CHECK(y.dim(3) == (side + 1) / 2);
      Var z = depthwise_conv2d(x, tape.constant(random_tensor({2, 1, k, k}, rng)), 2);
      CHECK(z.dim(2) == (side + 1) / 2);
    }
  }
}

TEST_CASE("softmax rows sum to one, relu is nonnegative, pooling keeps N and C") {
  Rng rng(3);
  Tape tape(false);
  Var x = tape.constant(random_tensor({4, 3, 6, 6}, rng, 5.0));
  Var s = softmax_lastdim(x);
  for (std::size_t r = 0; r < 4 * 3 * 6; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) total += s.value()[r * 6 + j];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  for (double v : relu(x).value().data) CHECK(v >= 0.0);
  CHECK(global_avg_pool(x).shape() == Shape{4, 3, 1, 1});
}

TEST_CASE("matmul matches a triple-loop reference") {
  Rng rng(42);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  const auto expected = triple_loop_matmul(a, b);
  Tape tape(false);
  Var c = matmul(tape.constant(a), tape.constant(b));
  REQUIRE(c.shape() == Shape{2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(c.value()[i] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("forward_primitive rejects unknown kinds and mismatched shapes") {
  Tape tape(false);
  Var a = tape.constant(Tensor({2, 3}, 1.0));
  Var b = tape.constant(Tensor({4, 2}, 1.0));
  std::vector<Var> ins{a, b};
  CHECK_THROWS_AS(forward_primitive("warp-drive", ins), std::invalid_argument);
  try {
    forward_primitive("matmul", ins);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
  Var img = tape.constant(Tensor({1, 3, 4, 4}, 1.0));
  Var w = tape.constant(Tensor({2, 5, 3, 3}, 1.0));
  std::vector<Var> conv_ins{img, w};
  CHECK_THROWS_AS(forward_primitive("conv2d", conv_ins), ShapeError);
  std::vector<Var> one{a};
  PrimitiveAttrs attrs;
  attrs.factor = 2.0;
  CHECK(forward_primitive(Primitive::scale, one, attrs).value()[0] == 2.0);
}

TEST_CASE("backward of sum(w * x) yields x exactly") {
  Rng rng(5);
  ParameterStore store;
  store.add("w", random_tensor({3, 4}, rng));
  Tensor x = random_tensor({3, 4}, rng);
  Tape tape;
  Var loss = sum(mul(tape.param(store, "w"), tape.constant(x)));
  tape.backward(loss);
  CHECK(*store.at("w").grad == x.data);
}

TEST_CASE("stop-gradient boundaries give exactly zero gradients upstream") {
  Rng rng(6);
  ParameterStore store;
  store.add("p", random_tensor({2, 2}, rng));
  store.add("q", random_tensor({2, 2}, rng));
  store.add("unused", random_tensor({3}, rng));
  Tape tape;
  Var h = relu(matmul(tape.param(store, "p"), tape.param(store, "q")));
  Var loss = sum(mul(tape.detach(h), tape.param(store, "q")));
  tape.backward(loss);
  for (double g : *store.at("p").grad) CHECK(g == 0.0);
  for (double g : *store.at("unused").grad) CHECK(g == 0.0);
  CHECK(std::any_of(store.at("q").grad->begin(), store.at("q").grad->end(), [](double g) { return g != 0.0; }));
}

TEST_CASE("backward rejects non-scalar losses and consumed tapes") {
  ParameterStore store;
  store.add("w", Tensor({2}, 1.0));
  Tape tape;
  Var w = tape.param(store, "w");
  CHECK_THROWS_AS(tape.backward(w), ShapeError);
  Var loss = sum(w);
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("small conv network gradients agree with central differences") {
  Rng rng(9);
  ParameterStore store;
  store.add("conv", random_tensor({4, 2, 3, 3}, rng, 0.5));
  store.add("dense", random_tensor({4, 3}, rng, 0.5));
  store.add("bias", random_tensor({3}, rng, 0.5));
  std::vector<ParameterStore*> stores{&store};
  auto report = gradcheck(
      stores,
      [&](Tape& t, Var x) {
        Var h = relu(conv2d(x, t.param(store, "conv"), 1));
        h = reshape(global_avg_pool(h), {x.dim(0), 4});
        return add_bias(matmul(h, t.param(store, "dense")), t.param(store, "bias"));
      },
      {2, 2, 6, 6}, 1e-4);
  CHECK(report.passed);
  CHECK(report.max_error() < 1e-4);
}

TEST_CASE("every primitive passes gradcheck at 1e-4") {
  SUBCASE("matmul") { CHECK(check_binary([](Var x, Var p) { return matmul(x, p); }, {3, 4}, {4, 2}).passed); }
  SUBCASE("bmm") {
    CHECK(check_binary([](Var x, Var p) { return bmm(x, p); }, {2, 3, 4}, {2, 4, 5}).passed);
    CHECK(check_binary([](Var x, Var p) { return bmm(x, p, true); }, {2, 3, 4}, {2, 5, 4}).passed);
  }
  SUBCASE("conv2d") {
    for (int stride : {1, 2}) {
      for (std::size_t k : {1u, 3u, 5u}) {
        CHECK(check_binary([&](Var x, Var p) { return conv2d(x, p, stride); }, {2, 3, 7, 7}, {4, 3, k, k}).passed);
      }
    }
  }
  SUBCASE("depthwise-conv2d") {
    for (int stride : {1, 2}) {
      CHECK(check_binary([&](Var x, Var p) { return depthwise_conv2d(x, p, stride); }, {2, 3, 8, 8}, {3, 1, 5, 5})
                .passed);
    }
  }
  SUBCASE("elementwise") {
    CHECK(check_binary([](Var x, Var p) { return add(x, p); }, {2, 5}, {2, 5}).passed);
    CHECK(check_binary([](Var x, Var p) { return sub(x, p); }, {2, 5}, {2, 5}).passed);
    CHECK(check_binary([](Var x, Var p) { return mul(x, p); }, {2, 5}, {2, 5}).passed);
    CHECK(check_binary([](Var x, Var p) { return add_bias(x, p); }, {2, 3, 2, 2}, {3}).passed);
    CHECK(check_unary([](Var x) { return relu(x); }, {3, 7}).passed);
    CHECK(check_unary([](Var x) { return scale(x, -1.7); }, {3, 7}).passed);
  }
  SUBCASE("batchnorm") {
    for (bool train : {true, false}) {
      Rng rng(4);
      ParameterStore store;
      store.add("g", random_tensor({3}, rng));
      store.add("b", random_tensor({3}, rng));
      Tensor mean({3}, 0.2), var({3}, 1.5);
      std::vector<ParameterStore*> stores{&store};
      auto report = gradcheck(
          stores,
          [&](Tape& t, Var x) {
            return batchnorm(x, t.param(store, "g"), t.param(store, "b"), BatchNormStats{&mean, &var}, train);
          },
          {4, 3, 3, 3}, 1e-4);
      CHECK(report.passed);
      auto report2d = gradcheck(
          stores,
          [&](Tape& t, Var x) {
            return batchnorm(x, t.param(store, "g"), t.param(store, "b"), BatchNormStats{&mean, &var}, train);
          },
          {6, 3}, 1e-4);
      CHECK(report2d.passed);
    }
  }
  SUBCASE("shape and reduction ops") {
    CHECK(check_unary([](Var x) { return softmax_lastdim(x); }, {3, 6}).passed);
    CHECK(check_unary([](Var x) { return global_avg_pool(x); }, {2, 3, 4, 4}).passed);
    CHECK(check_unary([](Var x) { return reshape(x, {6, 4}); }, {2, 3, 4}).passed);
    CHECK(check_unary([](Var x) { return transpose_last2(x); }, {2, 3, 4}).passed);
    CHECK(check_unary([](Var x) { return slice_leading(x, {2, 2, 3}); }, {3, 4, 5}).passed);
    CHECK(check_unary([](Var x) { return l2_normalize(x); }, {4, 5}).passed);
    CHECK(check_unary([](Var x) { return sum(x); }, {4, 5}).passed);
    CHECK(check_binary(
              [](Var x, Var p) {
                std::vector<Var> parts{x, p};
                return concat_channels(parts);
              },
              {2, 3, 2, 2}, {2, 1, 2, 2})
              .passed);
    const std::vector<int> labels{0, 2, 1};
    CHECK(check_unary([&](Var x) { return softmax_cross_entropy(x, labels); }, {3, 4}).passed);
  }
}

TEST_CASE("gradcheck: dense layer, depthwise conv, and self-attention") {
  Rng rng(17);
  SUBCASE("dense 4->3, batch 2") {
    ParameterStore store;
    store.add("w", random_tensor({4, 3}, rng));
    store.add("b", random_tensor({3}, rng));
    std::vector<ParameterStore*> stores{&store};
    auto r = gradcheck(
        stores, [&](Tape& t, Var x) { return add_bias(matmul(x, t.param(store, "w")), t.param(store, "b")); }, {2, 4},
        1e-4);
    CHECK(r.passed);
  }
  SUBCASE("depthwise 3x3, 4 channels, 8x8") {
    ParameterStore store;
    store.add("w", random_tensor({4, 1, 3, 3}, rng));
    std::vector<ParameterStore*> stores{&store};
    auto r = gradcheck(
        stores, [&](Tape& t, Var x) { return depthwise_conv2d(x, t.param(store, "w"), 1); }, {1, 4, 8, 8}, 1e-4);
    CHECK(r.passed);
  }
  SUBCASE("self-attention, head dim 4, 16 tokens") {
    ParameterStore store;
    for (const char* n : {"q", "k", "v"}) store.add(n, random_tensor({4, 4, 1, 1}, rng, 0.5));
    std::vector<ParameterStore*> stores{&store};
    auto r = gradcheck(
        stores,
        [&](Tape& t, Var x) {
          return multi_head_self_attention(t, x, t.param(store, "q"), t.param(store, "k"), t.param(store, "v"), 1,
                                           256);
        },
        {1, 4, 4, 4}, 1e-3);
    CHECK(r.passed);
  }
}

TEST_CASE("l2_normalize") {
  Tape tape(false);
  Var v = l2_normalize(tape.constant(Tensor({3, 2}, {3.0, 4.0, 1.0, 0.0, 0.0, 0.0})));
  CHECK(v.value()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v.value()[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(v.value()[2] == 1.0);
  CHECK(v.value()[3] == 0.0);
  CHECK(v.value()[4] == 0.0);
  CHECK(v.value()[5] == 0.0);

  Rng rng(8);
  Tensor r = random_tensor({5, 7}, rng, 3.0);
  Var n = l2_normalize(tape.constant(r));
  for (std::size_t row = 0; row < 5; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += n.value()[row * 7 + j] * n.value()[row * 7 + j];
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
  }
}

TEST_CASE("optimizer_step") {
  SUBCASE("zero gradients leave parameters unchanged") {
    ParameterStore s;
    s.add("w", Tensor({3}, {1.0, -2.0, 3.0}));
    s.zero_grad();
    for (auto kind : {OptimizerKind::sgd_momentum, OptimizerKind::lars_lite}) {
      OptimizerConfig cfg;
      cfg.kind = kind;
      const auto before = s.at("w").data;
      const auto step = s.step();
      optimizer_step(s, cfg);
      CHECK(s.at("w").data == before);
      CHECK(s.step() == step + 1);
    }
  }
  SUBCASE("sgd one step") {
    ParameterStore s;
    s.add("w", Tensor({1}, {1.0})).grad = std::vector<double>{0.5};
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    optimizer_step(s, cfg);
    CHECK(s.at("w")[0] == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("lars trust ratio doubles the step when |w| = 2 |g|") {
    ParameterStore s;
    // |w| = 2, |g| = 1
    s.add("w", Tensor({2}, {1.2, 1.6})).grad = std::vector<double>{0.6, 0.8};
    OptimizerConfig cfg;
    cfg.kind = OptimizerKind::lars_lite;
    cfg.lr = 0.05;
    cfg.momentum = 0.0;
    cfg.trust_eps = 0.0;
    CHECK(lars_trust_ratio(2.0, 1.0, cfg) == 2.0);
    optimizer_step(s, cfg);
    // hand computation: w - (2 * 0.05) * g
    CHECK(s.at("w")[0] == doctest::Approx(1.2 - 0.1 * 0.6).epsilon(1e-15));
    CHECK(s.at("w")[1] == doctest::Approx(1.6 - 0.1 * 0.8).epsilon(1e-15));
  }
  SUBCASE("missing gradient is rejected") {
    ParameterStore s;
    s.add("w", Tensor({1}, 1.0));
    CHECK_THROWS_AS(optimizer_step(s, OptimizerConfig{}), std::invalid_argument);
  }
}

TEST_CASE("identical seeds give bit-identical forwards") {
  auto run = [] {
    Rng rng(123);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({5, 3, 3, 3}, rng);
    Tape tape(false);
    return softmax_lastdim(relu(conv2d(tape.constant(x), tape.constant(w), 2))).value().data;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint manifest and blob restore parameters and buffers") {
  Rng rng(31);
  ParameterStore a;
  a.add("w", random_tensor({2, 3}, rng));
  a.add_buffer("bn.mean", random_tensor({3}, rng));
  a.set_step(17);
  const auto dir = std::filesystem::temp_directory_path() / "boss_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "ckpt", {{"net", &a}}, {{"epoch", 3}});

  ParameterStore b;
  b.add("w", Tensor({2, 3}));
  b.add_buffer("bn.mean", Tensor({3}));
  auto data = load_checkpoint(dir / "ckpt.json");
  restore_checkpoint(data, {{"net", &b}});
  CHECK(b.at("w").data == a.at("w").data);
  CHECK(b.buffer("bn.mean").data == a.buffer("bn.mean").data);
  CHECK(b.step() == 17);
  CHECK(data.meta.at("epoch") == 3);
  CHECK(std::filesystem::file_size(dir / "ckpt.bin") == 9 * sizeof(double));

  ParameterStore c;
  c.add("w", Tensor({3, 2}));
  c.add_buffer("bn.mean", Tensor({3}));
  CHECK_THROWS(restore_checkpoint(data, {{"net", &c}}));
}
