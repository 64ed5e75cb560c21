#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sfmamba/objectives.hpp"
#include "sfmamba/scs.hpp"
#include "sfmamba/ssm.hpp"
#include "sfmamba/tensor_io.hpp"
#include "test_util.hpp"

using namespace sfm;
using namespace sfm::scs;
using sfm::testing::micro_config;
using sfm::testing::random_tensor;

namespace {

ActivationMap map_of(std::size_t h, std::size_t w, std::vector<double> s) { return {Tensor({h, w}, std::move(s)), 0}; }

ShufflePlan plan_of(std::vector<std::size_t> bg, std::vector<std::size_t> perm) { return {std::move(bg), std::move(perm), 0}; }

// Model with non-trivial BN running statistics, so the eval head is not an identity.
Model micro_model(std::uint64_t seed) {
  Model m(micro_config(), seed);
  Rng rng(seed + 100);
  m.buffers()["bn.running_mean"] = random_tensor({4}, rng, -0.3, 0.3);
  m.buffers()["bn.running_var"] = random_tensor({4}, rng, 0.5, 2.0);
  m.params()["bn.b"] = random_tensor({4}, rng, 0.2, 1.0);
  return m;
}

double eval_logit(const Model& m, const Tensor& features, std::size_t c) {
  Tape tape;
  Binding b(tape, m, false);
  auto [pooled, logits] = layers::head(b, tape.constant(features), BnMode::Eval);
  return logits.value()[c];
}

}  // namespace

TEST_CASE("grad-cam") {
  SUBCASE("zero classifier gives zero scores") {
    Model m = micro_model(1);
    m.params()["head.w"] = Tensor::zeros({4, 3});
    Rng rng(2);
    auto maps = grad_cam(m, random_tensor({2, 4, 4}, rng), {0, 2});
    for (const auto& map : maps)
      for (double s : map.scores.values()) CHECK(s == 0.0);
  }
  SUBCASE("single channel, uniform positive gradient") {
    auto fm = Tensor({4, 1}, {0.5, -1.0, 2.0, 0.0});
    auto map = cam_from_gradient(fm, Tensor::full({4, 1}, 0.25), 2, 2, 1);
    CHECK(map.scores.values() == std::vector<double>{0.125, 0.0, 0.5, 0.0});
    CHECK(map.scores.shape() == Shape{2, 2});
    CHECK(map.target_class == 1);
  }
  SUBCASE("finite-difference attribution oracle") {
    const Model m = micro_model(3);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      auto feats = random_tensor({1, 4, 4}, rng);
      const std::size_t c = rng.index(3);
      const auto map = grad_cam(m, feats, {c})[0];
      // d logit_c / dA by central differences, then the same weighting written out.
      std::vector<double> grad(16);
      for (std::size_t i = 0; i < 16; ++i) {
        std::vector<double> up(feats.values()), dn(feats.values());
        up[i] += 1e-5;
        dn[i] -= 1e-5;
        grad[i] = (eval_logit(m, Tensor({1, 4, 4}, up), c) - eval_logit(m, Tensor({1, 4, 4}, dn), c)) / 2e-5;
      }
      for (std::size_t t = 0; t < 4; ++t) {
        double s = 0.0;
        for (std::size_t d = 0; d < 4; ++d) {
          double w = 0.0;
          for (std::size_t u = 0; u < 4; ++u) w += grad[u * 4 + d] / 4.0;
          s += w * feats[t * 4 + d];
        }
        CHECK(map.scores[t] == doctest::Approx(std::max(s, 0.0)).epsilon(1e-8));
      }
    }
  }
  SUBCASE("deterministic and nonnegative") {
    const Model m = micro_model(5);
    Rng rng(6);
    auto feats = random_tensor({3, 4, 4}, rng);
    auto a = grad_cam(m, feats, {0, 1, 2});
    auto b = grad_cam(m, feats, {0, 1, 2});
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a[i].scores == b[i].scores);
      for (double s : a[i].scores.values()) CHECK(s >= 0.0);
    }
  }
  SUBCASE("target out of range") {
    const Model m = micro_model(5);
    CHECK_THROWS_AS(grad_cam(m, Tensor::zeros({1, 4, 4}), {3}), DomainError);
    CHECK_THROWS_AS(grad_cam(m, Tensor::zeros({2, 4, 4}), {0}), ShapeError);
  }
}

TEST_CASE("background selection") {
  auto map = map_of(2, 2, {3.0, 1.0, 2.0, 0.0});
  CHECK(select_background(map, 0.0).empty());
  CHECK(select_background(map, 100.0) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(select_background(map, 50.0) == std::vector<std::size_t>{1, 3});
  CHECK(select_background(map_of(2, 2, {1.0, 0.0, 0.0, 0.0}), 50.0) == std::vector<std::size_t>{1, 2});
  CHECK(select_background(map_of(8, 8, std::vector<double>(64, 0.0)), 20.0).size() == 12);
  CHECK_THROWS_AS(select_background(map, 101.0), DomainError);
}

TEST_CASE("background shuffle") {
  Rng rng(7);
  auto tokens = random_tensor({6, 3}, rng);
  SUBCASE("identity permutation") {
    CHECK(shuffle_background(tokens, plan_of({1, 4, 5}, {0, 1, 2})) == tokens);
  }
  SUBCASE("swap exchanges exactly two tokens") {
    auto out = shuffle_background(tokens, plan_of({1, 4}, {1, 0}));
    for (std::size_t t = 0; t < 6; ++t) {
      const std::size_t from = t == 1 ? 4 : t == 4 ? 1 : t;
      for (std::size_t j = 0; j < 3; ++j) CHECK(out[t * 3 + j] == tokens[from * 3 + j]);
    }
  }
  SUBCASE("random plans preserve the multiset and the foreground") {
    for (int trial = 0; trial < 50; ++trial) {
      auto t = random_tensor({16, 2}, rng);
      auto map = map_of(4, 4, random_tensor({16}, rng, 0.0, 1.0).values());
      const auto plan = make_plan(map, rng.uniform(0.0, 100.0), rng.next_u64());
      auto out = shuffle_background(t, plan);
      std::vector<std::pair<double, double>> a, b;
      for (std::size_t i = 0; i < 16; ++i) {
        a.emplace_back(t[2 * i], t[2 * i + 1]);
        b.emplace_back(out[2 * i], out[2 * i + 1]);
        if (!std::binary_search(plan.background.begin(), plan.background.end(), i)) CHECK(a.back() == b.back());
      }
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
    }
  }
  SUBCASE("out of range plans are rejected") {
    CHECK_THROWS_AS(shuffle_background(tokens, plan_of({2, 9}, {1, 0})), DomainError);
  }
}

TEST_CASE("plan construction") {
  CHECK(make_plan(map_of(2, 2, {1, 2, 3, 4}), 0.0, 42).permutation.empty());
  const auto single = make_plan(map_of(2, 2, {1, 2, 0, 4}), 25.0, 42);
  CHECK(single.background == std::vector<std::size_t>{2});
  CHECK(single.permutation == std::vector<std::size_t>{0});
  const auto p = make_plan(map_of(2, 2, {1, 2, 3, 4}), 100.0, 42);
  CHECK(p.seed == 42);
  CHECK(p.permutation == std::vector<std::size_t>{3, 0, 2, 1});
  CHECK(make_plan(map_of(2, 2, {1, 2, 3, 4}), 100.0, 42).permutation == p.permutation);
}

TEST_CASE("shuffled routes are the original routes with background entries permuted") {
  // 2x2 grid, tokens I0..I3 with one channel holding the index. Background {1, 2} swapped.
  const Tensor tokens({4, 1}, {0.0, 1.0, 2.0, 3.0});
  const Tensor shuffled = shuffle_background(tokens, plan_of({1, 2}, {1, 0}));
  const auto routes = ssm::cross_scan_2d(shuffled.reshaped({1, 2, 2}));
  const std::vector<std::vector<double>> expect = {{0, 2, 1, 3}, {0, 1, 2, 3}, {3, 1, 2, 0}, {3, 2, 1, 0}};
  for (std::size_t r = 0; r < 4; ++r) CHECK(routes[r].values() == expect[r]);
  // Same statement as index algebra: route_r over shuffled = src composed with route_r.
  const auto src = plan_of({1, 2}, {1, 0}).source_index(4);
  const auto order = ssm::cross_scan_routes(2, 2);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t t = 0; t < 4; ++t) CHECK(routes[r][t] == static_cast<double>(src[order[r][t]]));
}

TEST_CASE("identity shuffle leaves the consistency loss at zero") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Model m = micro_model(20 + static_cast<std::uint64_t>(trial));
    Tape tape;
    Binding b(tape, m);
    auto x = tape.constant(random_tensor({3, 4, 3}, rng));
    auto tokens = layers::patch_embed(b, x);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < 3; ++i) {
      const auto src = plan_of({0, 3}, {0, 1}).source_index(4);
      idx.insert(idx.end(), src.begin(), src.end());
    }
    auto orig = forward_tokens(b, tokens, BnMode::Train);
    auto pert = forward_tokens(b, ad::gather_batched(tokens, idx, 4), BnMode::Train);
    CHECK(objectives::kl_consistency(orig.logits, pert.logits, {true, true, true}).value().item() == 0.0);
  }
}

TEST_CASE("heat-map dump") {
  const auto stem = std::filesystem::temp_directory_path() / "sfm_heat";
  write_heatmap(stem, map_of(2, 3, {0.0, 1.0, 2.0, 4.0, 0.5, 3.0}));
  auto stem_t = stem;
  CHECK(load_tensor(stem_t += ".tnsr").values() == std::vector<double>{0.0, 1.0, 2.0, 4.0, 0.5, 3.0});
  auto stem_p = stem;
  std::ifstream in(stem_p += ".pgm");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "P2\n3 2\n255\n0 64 128\n255 32 191\n");
  std::filesystem::remove(stem_t);
  std::filesystem::remove(stem_p);
}
