#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "prevmatch/nn.hpp"
#include "prevmatch/rng.hpp"

using namespace prevmatch;

TEST_CASE("models built from the same seed are parameter-identical") {
  auto a = SegModel::init(3, 5, {8, 8}, 3, CounterRng::seeded(77));
  auto b = SegModel::init(3, 5, {8, 8}, 3, CounterRng::seeded(77));
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i]->data == pb[i]->data);

  auto c = SegModel::init(3, 5, {8, 8}, 3, CounterRng::seeded(78));
  bool any_diff = false;
  auto pc = c.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->data != pc[i]->data) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("forward preserves spatial size and maps channels to classes") {
  auto m = SegModel::init(3, 5, {6}, 3, CounterRng::seeded(1));
  auto x = full({2, 3, 9, 11}, 0.3);
  auto y = m.forward(x);
  REQUIRE(y->shape == std::vector<int>{2, 5, 9, 11});
  for (double v : y->data) REQUIRE(std::isfinite(v));
  REQUIRE_THROWS_AS(m.forward(full({1, 2, 4, 4}, 0.0)), std::invalid_argument);
}

TEST_CASE("clone_detached is a deep constant copy") {
  auto m = SegModel::init(2, 3, {4}, 3, CounterRng::seeded(5));
  auto c = m.clone_detached();
  auto pm = m.parameters();
  auto pc = c.parameters();
  for (std::size_t i = 0; i < pm.size(); ++i) {
    REQUIRE(pm[i]->data == pc[i]->data);
    REQUIRE_FALSE(pc[i]->requires_grad);
    pm[i]->data[0] += 1.0;
    REQUIRE(pm[i]->data != pc[i]->data);
    pm[i]->data[0] -= 1.0;
  }
}

TEST_CASE("full model gradients match central finite differences") {
  auto rng = CounterRng::seeded(9);
  auto model = SegModel::init(2, 3, {5, 4}, 3, CounterRng::seeded(21));
  auto x = oracle::random_tensor(rng, {2, 2, 5, 5}, -1.0, 1.0);
  std::vector<int> targets(2 * 5 * 5);
  for (auto& t : targets) t = static_cast<int>(rng.uniform_int(3));
  std::vector<std::uint8_t> mask(2 * 5 * 5, 1);
  mask[7] = 0;
  mask[20] = 0;
  LabelMap tmap({2, 5, 5}, targets);
  BoolMap mmap({2, 5, 5}, mask);

  auto loss_value = [&]() {
    NoGradGuard g;
    return masked_cross_entropy(softmax_channels(model.forward(x)), tmap, mmap)->data[0];
  };

  model.zero_grad();
  auto loss = masked_cross_entropy(softmax_channels(model.forward(x)), tmap, mmap);
  backward(loss);

  auto params = model.parameters();
  auto names = model.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    INFO(names[i]);
    auto fd = oracle::fd_gradient(params[i], loss_value);
    REQUIRE(oracle::max_rel_error(params[i]->grad, fd) < 1e-4);
  }
}

// --------------------------------------------------------------------------
// poly lr

TEST_CASE("poly_lr endpoints and midpoint") {
  REQUIRE(poly_lr(0.1, 0, 100, 0.9) == Catch::Approx(0.1));
  REQUIRE(poly_lr(0.1, 100, 100, 0.9) == 0.0);
  REQUIRE(poly_lr(0.2, 50, 100, 1.0) == Catch::Approx(0.1));
  REQUIRE(poly_lr(0.1, 150, 100, 0.9) == 0.0);  // clamps
  REQUIRE_THROWS_AS(poly_lr(0.1, -1, 100, 0.9), std::invalid_argument);
}

// --------------------------------------------------------------------------
// sgd

TEST_CASE("sgd without momentum takes a plain gradient step") {
  auto m = SegModel::init(1, 1, {}, 1, CounterRng::seeded(1));
  auto p = m.parameters()[0];  // single 1x1 kernel
  p->data[0] = 1.0;
  p->ensure_grad();
  p->grad[0] = 1.0;
  m.parameters()[1]->ensure_grad();
  auto st = OptimizerState::init(m, 0.1, 0.0, 1.0);
  sgd_step(m, st, 0.1);
  REQUIRE(p->data[0] == Catch::Approx(0.9));
}

TEST_CASE("sgd with lr zero leaves parameters bit-identical") {
  auto m = SegModel::init(2, 3, {4}, 3, CounterRng::seeded(3));
  std::vector<std::vector<double>> before;
  for (const auto& p : m.parameters()) {
    p->ensure_grad();
    for (auto& g : p->grad) g = 0.37;
    before.push_back(p->data);
  }
  auto st = OptimizerState::init(m, 0.1, 0.9, 1.0);
  sgd_step(m, st, 0.0);
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) REQUIRE(params[i]->data == before[i]);
}

TEST_CASE("momentum follows the closed-form recurrence") {
  // v_t = m v_{t-1} + g with g = 1: v_1 = 1, v_2 = 1.9 for m = 0.9
  auto m = SegModel::init(1, 1, {}, 1, CounterRng::seeded(1));
  auto p = m.parameters()[0];
  p->data[0] = 5.0;
  for (const auto& q : m.parameters()) {
    q->ensure_grad();
    std::fill(q->grad.begin(), q->grad.end(), 1.0);
  }
  auto st = OptimizerState::init(m, 0.1, 0.9, 1.0);
  const double lr = 0.1;
  sgd_step(m, st, lr);
  REQUIRE(p->data[0] == Catch::Approx(5.0 - lr * 1.0).epsilon(1e-15));
  for (const auto& q : m.parameters()) std::fill(q->grad.begin(), q->grad.end(), 1.0);
  sgd_step(m, st, lr);
  REQUIRE(p->data[0] == Catch::Approx(5.0 - lr * 1.0 - lr * 1.9).epsilon(1e-15));
}

TEST_CASE("sgd aborts on non-finite gradients naming the parameter") {
  auto m = SegModel::init(1, 2, {3}, 3, CounterRng::seeded(4));
  for (const auto& p : m.parameters()) p->ensure_grad();
  m.parameters()[2]->grad[1] = std::numeric_limits<double>::quiet_NaN();
  auto st = OptimizerState::init(m, 0.1, 0.9, 1.0);
  REQUIRE_THROWS_WITH(sgd_step(m, st, 0.1),
                      Catch::Matchers::ContainsSubstring("layer1.kernel"));
}

TEST_CASE("optimizer state validates hyperparameters") {
  auto m = SegModel::init(1, 2, {}, 3, CounterRng::seeded(4));
  REQUIRE_THROWS_AS(OptimizerState::init(m, 0.0, 0.9, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(OptimizerState::init(m, 0.1, 1.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(OptimizerState::init(m, 0.1, 0.9, 0.0), std::invalid_argument);
}

// --------------------------------------------------------------------------
// argmax helper

TEST_CASE("argmax breaks ties toward the lowest class id") {
  auto probs = make_tensor({1, 3, 1, 2}, {0.4, 0.1, 0.4, 0.8, 0.2, 0.1});
  auto [labels, conf] = argmax_channels(probs);
  REQUIRE(labels.data[0] == 0);  // 0.4 vs 0.4 vs 0.2 -> class 0
  REQUIRE(labels.data[1] == 1);  // 0.1 vs 0.8 vs 0.1 -> class 1
  REQUIRE(conf[0] == Catch::Approx(0.4));
  REQUIRE(conf[1] == Catch::Approx(0.8));
}

TEST_CASE("determinism: identical seeds and op sequences give bit-identical parameters") {
  auto run_once = [](std::uint64_t seed) {
    auto model = SegModel::init(2, 3, {4}, 3, CounterRng::seeded(seed));
    auto st = OptimizerState::init(model, 0.05, 0.9, 0.9);
    auto rng = CounterRng::seeded(seed + 1);
    for (int step = 0; step < 5; ++step) {
      auto x = oracle::random_tensor(rng, {1, 2, 6, 6}, -1.0, 1.0);
      std::vector<int> targets(36);
      for (auto& t : targets) t = static_cast<int>(rng.uniform_int(3));
      model.zero_grad();
      auto loss = masked_cross_entropy(softmax_channels(model.forward(x)),
                                       LabelMap({1, 6, 6}, targets),
                                       BoolMap::filled({1, 6, 6}, true));
      backward(loss);
      sgd_step(model, st, poly_lr(0.05, step, 5, 0.9));
    }
    std::vector<std::vector<double>> params;
    for (const auto& p : model.parameters()) params.push_back(p->data);
    return params;
  };
  REQUIRE(run_once(123) == run_once(123));
}
