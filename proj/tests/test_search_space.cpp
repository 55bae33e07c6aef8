#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "boss/search_space.hpp"
#include "boss/supernet.hpp"

using namespace boss;

namespace {

// Independent statement of the hytra rules: every gene tuple over
// {conv, att} x {1, 2}, filtered by cumulative downsamples and the
// attention scale set.
bool oracle_valid(const std::vector<std::pair<bool, int>>& genes, int entry, int max_scale,
                  const std::set<int>& att_scales) {
  int scale = entry;
  for (auto [att, stride] : genes) {
    scale += stride - 1;
    if (scale > max_scale) return false;
    if (att && !att_scales.count(scale)) return false;
  }
  return true;
}

std::uint64_t oracle_count(std::size_t layers, int entry, int max_scale, const std::set<int>& att_scales) {
  std::uint64_t n = 0;
  std::vector<std::pair<bool, int>> genes;
  std::function<void()> rec = [&] {
    if (genes.size() == layers) {
      n += oracle_valid(genes, entry, max_scale, att_scales) ? 1 : 0;
      return;
    }
    for (bool att : {false, true}) {
      for (int stride : {1, 2}) {
        genes.push_back({att, stride});
        rec();
        genes.pop_back();
      }
    }
  };
  rec();
  return n;
}

Tensor random_images(std::size_t n, Rng& rng) {
  Tensor t({n, 3, 32, 32});
  for (double& v : t.data) v = standard_normal(rng);
  return t;
}

}  // namespace

TEST_CASE("space definitions are well formed") {
  for (const auto& name : {"hytra-mini", "mbconv-mini", "nats-size-mini"}) {
    auto s = make_space(name);
    CHECK_NOTHROW(validate_space(s));
  }
  auto bad = mbconv_mini();
  bad.block_sizes = {2, 2, 1};
  CHECK_THROWS_AS(validate_space(bad), std::invalid_argument);
  bad = mbconv_mini();
  bad.layers[0].candidates.clear();
  CHECK_THROWS_AS(validate_space(bad), std::invalid_argument);
  CHECK_THROWS_AS(make_space("darts"), std::invalid_argument);
  CHECK(nats_size_mini().block_sizes == std::vector<std::size_t>{1, 2, 2});
}

TEST_CASE("block path counts") {
  auto nats = nats_size_mini();
  CHECK(count_block_paths(nats, 1) == 64);
  CHECK(enumerate_block_paths(nats, 1).size() == 64);

  auto mb = mbconv_mini();
  mb.block_sizes = {3, 3};
  CHECK(count_block_paths(mb, 0) == 64);
  CHECK(enumerate_block_paths(mb, 0).size() == 64);

  auto hy = hytra_mini();
  const std::set<int> att(hy.attention_scales.begin(), hy.attention_scales.end());
  for (std::size_t k = 0; k < hy.block_count(); ++k) {
    for (int entry : reachable_entry_scales(hy, k)) {
      const auto expected = oracle_count(hy.block_sizes[k], entry, hy.max_scale, att);
      CHECK(count_block_paths(hy, k, entry) == expected);
      CHECK(enumerate_block_paths(hy, k, entry).size() == expected);
    }
  }
  // 4-layer block over 2 operators x 2 strides
  hy.block_sizes = {4, 4};
  CHECK(count_block_paths(hy, 0) == oracle_count(4, 0, hy.max_scale, att));
  CHECK(count_architectures(hy) == oracle_count(8, 0, hy.max_scale, att));
  CHECK(enumerate_architectures(hy, 100000).size() == count_architectures(hy));
}

TEST_CASE("enumeration order is lexicographic and duplicate free") {
  auto hy = hytra_mini();
  auto paths = enumerate_block_paths(hy, 1, 1);
  CHECK(std::is_sorted(paths.begin(), paths.end()));
  CHECK(std::set<BlockPath>(paths.begin(), paths.end()).size() == paths.size());
  CHECK(paths.front() == BlockPath{{0, 1}, {0, 1}});
}

TEST_CASE("traversal cap rejects large blocks") {
  auto nats = nats_size_mini(6);
  nats.block_sizes = {1, 5};
  CHECK(count_block_paths(nats, 1) == 32768);
  CHECK_THROWS_WITH_AS(enumerate_block_paths(nats, 1), doctest::Contains("evolutionary"), std::invalid_argument);
}

TEST_CASE("hytra path validation") {
  auto hy = hytra_mini();
  std::vector<Gene> conv_s1(8, Gene{0, 1});
  CHECK_FALSE(validate_hytra_path(hy, conv_s1).has_value());

  auto four_scales = hytra_mini();
  four_scales.max_scale = 3;
  std::vector<Gene> all_s2(8, Gene{0, 2});
  auto v = validate_hytra_path(four_scales, all_s2);
  REQUIRE(v.has_value());
  CHECK(v->find("layer 4") != std::string::npos);

  std::vector<Gene> att_first = conv_s1;
  att_first[0] = {1, 1};
  auto a = validate_hytra_path(hy, att_first);
  REQUIRE(a.has_value());
  CHECK(a->find("scale rule") != std::string::npos);
  CHECK(a->find("layer 1") != std::string::npos);
}

TEST_CASE("codec round trips and rejects malformed strings") {
  Rng rng(3);
  for (const auto& name : {"hytra-mini", "mbconv-mini", "nats-size-mini"}) {
    auto s = make_space(name);
    std::set<std::string> seen;
    std::set<Architecture> archs;
    for (int i = 0; i < 100; ++i) {
      auto arch = sample_architecture(s, rng);
      const auto text = encode_architecture(s, arch);
      CHECK(decode_architecture(s, text) == arch);
      seen.insert(text);
      archs.insert(arch);
    }
    CHECK(seen.size() == archs.size());
  }
  auto hy = hytra_mini();
  CHECK(encode_architecture(hy, decode_architecture(hy, "c0s1.c0s2-a0s1.a0s2-c0s1.c0s1-a0s1.a0s1")) ==
        "c0s1.c0s2-a0s1.a0s2-c0s1.c0s1-a0s1.a0s1");
  CHECK_THROWS_WITH_AS(decode_architecture(hy, "c0s1.c0s2-a0s1.x0s2-c0s1.c0s1-a0s1.a0s1"),
                       doctest::Contains("block 2 gene 2"), std::invalid_argument);
  CHECK_THROWS_AS(decode_architecture(hy, "c0s1.c0s2-a0s1"), std::invalid_argument);
  CHECK_THROWS_AS(decode_architecture(hy, "c0s3.c0s1-c0s1.c0s1-c0s1.c0s1-c0s1.c0s1"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(decode_architecture(hy, "a0s1.c0s1-c0s1.c0s1-c0s1.c0s1-c0s1.c0s1"),
                       doctest::Contains("scale rule"), std::invalid_argument);
  auto mb = mbconv_mini();
  CHECK_THROWS_AS(decode_architecture(mb, "m0.m4-m0.m0-m0.m0"), std::invalid_argument);
  CHECK_THROWS_AS(decode_architecture(mb, "m0.m1s1-m0.m0-m0.m0"), std::invalid_argument);
  CHECK_NOTHROW(decode_architecture(mb, "m0.m3-m2.m1-m0.m0"));
}

TEST_CASE("full space sizes") {
  CHECK(count_architectures(nats_size_mini(5)) == 32768);
  CHECK(enumerate_architectures(nats_size_mini(5), 40000).size() == 32768);
  CHECK(count_architectures(mbconv_mini()) == 4096);
}

TEST_CASE("sampling") {
  auto hy = hytra_mini();
  auto a = sample_paths(hy, 1, 4, 99, 1);
  CHECK(a.size() == 4);
  for (const auto& p : a) CHECK_FALSE(validate_hytra_path(hy, p, 1, hy.first_layer(1)).has_value());
  CHECK(sample_paths(hy, 1, 4, 99, 1) == a);

  auto mb = mbconv_mini();
  const std::size_t draws = 100000;
  auto paths = sample_paths(mb, 0, draws, 5);
  std::map<BlockPath, std::size_t> freq;
  for (const auto& p : paths) ++freq[p];
  CHECK(freq.size() == 16);
  const double p = 1.0 / 16.0;
  const double se = std::sqrt(static_cast<double>(draws) * p * (1 - p));
  for (const auto& [path, n] : freq) CHECK(std::abs(static_cast<double>(n) - draws * p) < 3 * se);
}

TEST_CASE("rejection sampling never leaves the enumeration") {
  auto hy = hytra_mini();
  auto all = enumerate_architectures(hy, 1 << 20);
  std::set<Architecture> known(all.begin(), all.end());
  Rng rng(1234);
  std::size_t outside = 0;
  for (int i = 0; i < 100000; ++i) outside += known.count(sample_architecture(hy, rng)) ? 0 : 1;
  CHECK(outside == 0);
}

TEST_CASE("frozen supernet forwards are deterministic and share prefixes") {
  Rng rng(21);
  for (const auto& name : {"hytra-mini", "mbconv-mini", "nats-size-mini"}) {
    CAPTURE(name);
    Supernet net(make_space(name), rng);
    Tensor x = random_images(2, rng);
    Architecture a = sample_architecture(net.space(), rng);
    Architecture b = sample_architecture(net.space(), rng);
    b.blocks[0] = a.blocks[0];
    if (net.space().kind == SpaceKind::hytra) {
      while (true) {
        b = sample_architecture(net.space(), rng);
        b.blocks[0] = a.blocks[0];
        try {
          validate_architecture(net.space(), b);
          break;
        } catch (const std::invalid_argument&) {
        }
      }
    }
    Tape t1(false), t2(false), t3(false);
    auto o1 = supernet_forward(net, t1, a, t1.constant(x), ForwardMode::frozen);
    auto o2 = supernet_forward(net, t2, a, t2.constant(x), ForwardMode::frozen);
    auto o3 = supernet_forward(net, t3, b, t3.constant(x), ForwardMode::frozen);
    for (std::size_t k = 0; k < o1.size(); ++k) CHECK(o1[k].value().data == o2[k].value().data);
    CHECK(o1[0].value().data == o3[0].value().data);
    CHECK(t1.size() > 0);
  }
  Supernet net(mbconv_mini(), rng);
  Tape rec;
  CHECK_THROWS_AS(supernet_forward(net, rec, sample_architecture(net.space(), rng),
                                   rec.constant(random_images(1, rng)), ForwardMode::frozen),
                  std::invalid_argument);
}

TEST_CASE("hytra block outputs follow the downsample count") {
  Rng rng(22);
  auto space = hytra_mini();
  Supernet net(space, rng);
  Tensor x = random_images(2, rng);
  for (int trial = 0; trial < 10; ++trial) {
    Architecture arch = sample_architecture(space, rng);
    Tape tape(false);
    auto outs = supernet_forward(net, tape, arch, tape.constant(x), ForwardMode::frozen);
    int d = 0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      for (const Gene& g : arch.blocks[k]) d += g.stride == 2 ? 1 : 0;
      // stem halves 32 to 16, then each stride-2 gene halves again
      const std::size_t side = static_cast<std::size_t>(std::ceil(16.0 / std::pow(2.0, d)));
      CHECK(outs[k].dim(2) == side);
      CHECK(outs[k].dim(1) == static_cast<std::size_t>(16 << d));
    }
  }
  Architecture bad = decode_architecture(space, "c0s1.c0s1-c0s1.c0s1-c0s1.c0s1-c0s1.c0s1");
  bad.blocks[0][0] = {1, 1};
  Tape tape(false);
  CHECK_THROWS_AS(supernet_forward(net, tape, bad, tape.constant(x), ForwardMode::frozen), std::invalid_argument);
}

TEST_CASE("projection heads accept every block width") {
  Rng rng(23);
  Supernet net(nats_size_mini(), rng);
  Tensor x = random_images(4, rng);
  Architecture arch = decode_architecture(net.space(), "w0-w3.w7-w1.w2");
  Tape tape(false);
  auto outs = supernet_forward(net, tape, arch, tape.constant(x), ForwardMode::frozen);
  CHECK(outs[0].dim(1) == 8);
  CHECK(outs[2].dim(1) == 24);
  for (std::size_t k = 0; k < outs.size(); ++k) {
    CHECK(net.projection(k).forward(tape, outs[k], false).shape() == Shape{4, 32});
  }
}
