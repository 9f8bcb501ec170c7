#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "protgo/tensor.hpp"

using namespace protgo;
using protgo::testing::max_relative_error;
using protgo::testing::numeric_gradient;
using protgo::testing::random_tensor;

namespace {

// Builds `forward` on a fresh tape, backprops, then compares each input's
// gradient with central differences of the same forward evaluated without recording.
void check_gradients(const std::function<Tensor(Tape&)>& forward, std::vector<Tensor> inputs, double tol = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  Tape tape;
  Tensor loss = forward(tape);
  tape.backward(loss);
  auto value = [&]() {
    Tape t;
    t.set_recording(false);
    return forward(t).item();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto numeric = numeric_gradient(value, inputs[k]);
    EXPECT_LT(max_relative_error(inputs[k].grad(), numeric), tol) << "input " << k;
  }
}

// Random weighting so the loss depends on every output element differently.
Tensor weighted_sum(Tape& tape, const Tensor& x, const Tensor& w) { return sum(tape, mul(tape, x, w)); }

}  // namespace

TEST(Tensor, ShapeInvariants) {
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Matmul, Examples) {
  Tape tape;
  const auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const auto m = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(matmul(tape, id, m).values(), m.values());
  const auto r = matmul(tape, Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
  try {
    matmul(tape, Tensor({2, 3}), Tensor({4, 5}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos);
  }
}

TEST(Softmax, Examples) {
  Tape tape;
  const auto u = softmax(tape, Tensor({3}, 0.0));
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const auto big = softmax(tape, Tensor({2}, std::vector<double>{1000.0, 0.0}));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  EXPECT_TRUE(std::isfinite(big[1]));
  const auto logs = softmax(tape, Tensor({3}, std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(logs[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs[2], 3.0 / 6.0, 1e-15);
}

TEST(Softmax, AlongLeadingAxis) {
  Tape tape;
  const auto x = Tensor::matrix(2, 2, {0.0, 1.0, 0.0, 1.0});
  const auto s = softmax(tape, x, 0);
  EXPECT_DOUBLE_EQ(s.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.at(1, 1), 0.5);
}

TEST(SoftmaxProperty, RowsAreDistributions) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    const auto x = random_tensor(rng, {4, 7}, -30, 30, false);
    const auto s = softmax(tape, x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        total += s.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tape tape;
  const Tensor ones({3}, 1.0), zeros({3}, 0.0);
  const auto c = layer_norm(tape, Tensor({3}, 4.0), ones, zeros);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  const auto x = layer_norm(tape, Tensor({3}, std::vector<double>{1, 2, 3}), ones, zeros, 0.0);
  EXPECT_NEAR(x[0], -1.2247, 1e-4);
  EXPECT_NEAR(x[1], 0.0, 1e-12);
  EXPECT_NEAR(x[2], 1.2247, 1e-4);
  const Tensor b({3}, std::vector<double>{0.5, -1.0, 2.0});
  const auto shifted = layer_norm(tape, Tensor({3}, -7.0), ones, b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(shifted[i], b[i], 1e-12);
}

TEST(LayerNormProperty, StandardisesRows) {
  Rng rng(4);
  const Tensor ones({16}, 1.0), zeros({16}, 0.0);
  for (int trial = 0; trial < 30; ++trial) {
    Tape tape;
    const auto x = random_tensor(rng, {5, 16}, -10, 10, false);
    const auto y = layer_norm(tape, x, ones, zeros, 1e-12);
    for (std::size_t r = 0; r < 5; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 16; ++c) mean += y.at(r, c);
      mean /= 16;
      for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
      var /= 16;
      EXPECT_LT(std::abs(mean), 1e-10);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(MiscOps, Examples) {
  Tape tape;
  const auto pooled = mean_pool(tape, Tensor::matrix(2, 2, {1, 3, 3, 5}), Tensor({2}, 1.0));
  EXPECT_EQ(pooled.values(), (std::vector<double>{2, 4}));
  const auto first = mean_pool(tape, Tensor::matrix(2, 2, {1, 3, 3, 5}), Tensor({2}, std::vector<double>{1, 0}));
  EXPECT_EQ(first.values(), (std::vector<double>{1, 3}));
  EXPECT_EQ(gelu(tape, Tensor({1}, 0.0))[0], 0.0);
  EXPECT_NEAR(gelu(tape, Tensor({1}, 1.0))[0], 0.8413447460685429, 1e-15);

  const auto table = Tensor::matrix(3, 2, {0, 1, 10, 11, 20, 21});
  const std::vector<std::int32_t> ids = {2, 0, 2};
  EXPECT_EQ(embedding_lookup(tape, table, ids).values(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
  const std::vector<std::int32_t> bad = {3};
  EXPECT_THROW(embedding_lookup(tape, table, bad), ShapeError);

  const auto cat = concat(tape, {Tensor::matrix(2, 1, {1, 2}), Tensor::matrix(2, 2, {3, 4, 5, 6})}, 1);
  EXPECT_EQ(cat.values(), (std::vector<double>{1, 3, 4, 2, 5, 6}));
  const auto rows = concat(tape, {Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 2, {3, 4})}, 0);
  EXPECT_EQ(rows.values(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_THROW(concat(tape, {Tensor({2, 1}), Tensor({3, 1})}, 1), ShapeError);

  EXPECT_EQ(transpose(tape, Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})).values(),
            (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_THROW(add(tape, Tensor({2}), Tensor({3})), ShapeError);
  EXPECT_THROW(add_bias(tape, Tensor({2, 3}), Tensor({2})), ShapeError);
  EXPECT_THROW(reshape(tape, Tensor({2, 3}), {4}), ShapeError);
}

TEST(Backward, Examples) {
  {
    Tape tape;
    Tensor x({2, 3}, 0.7, true);
    tape.backward(sum(tape, x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  }
  {
    Tape tape;
    Tensor x({2}, std::vector<double>{1, 2}, true);
    tape.backward(sum(tape, mul(tape, x, x)));
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
  }
  {
    Tape tape;
    Tensor x({2}, 1.0, true);
    EXPECT_THROW(tape.backward(scale(tape, x, 2.0)), ShapeError);
    Tape empty;
    EXPECT_THROW(empty.backward(Tensor::scalar(1.0)), Error);
  }
}

TEST(Backward, MultiplePathsAreSummed) {
  Tape tape;
  Tensor x({3}, std::vector<double>{1, -2, 3}, true);
  // loss = sum(x) + sum(3x) + sum(x*x)
  const auto loss = add(tape, add(tape, sum(tape, x), sum(tape, scale(tape, x, 3.0))), sum(tape, mul(tape, x, x)));
  tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4.0 + 2.0 * x[i]);
}

TEST(Backward, ReplayAfterResetIsIdempotent) {
  Rng rng(9);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tape tape;
  const auto loss = sum(tape, gelu(tape, matmul(tape, a, b)));
  tape.backward(loss);
  const std::vector<double> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), first);
}

TEST(Backward, NoRecordingWhenDisabled) {
  Tape tape;
  tape.set_recording(false);
  Tensor x({2}, 1.0, true);
  const auto y = scale(tape, x, 2.0);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
}

// Gradient fidelity for each differentiable op at random inputs in [-2, 2].
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  Rng rng(1000 + static_cast<std::uint64_t>(GetParam()));
  const auto w23 = random_tensor(rng, {2, 3}, -2, 2, false);
  const auto w33 = random_tensor(rng, {3, 3}, -2, 2, false);
  const auto w3 = random_tensor(rng, {3}, -2, 2, false);

  auto a = random_tensor(rng, {2, 4});
  auto b = random_tensor(rng, {4, 3});
  check_gradients([&](Tape& t) { return weighted_sum(t, matmul(t, a, b), w23); }, {a, b});

  auto x = random_tensor(rng, {3, 3});
  auto y = random_tensor(rng, {3, 3});
  check_gradients([&](Tape& t) { return weighted_sum(t, add(t, x, y), w33); }, {x, y});
  check_gradients([&](Tape& t) { return weighted_sum(t, mul(t, x, y), w33); }, {x, y});
  check_gradients([&](Tape& t) { return weighted_sum(t, scale(t, x, -1.7), w33); }, {x});
  check_gradients([&](Tape& t) { return weighted_sum(t, transpose(t, x), w33); }, {x});
  check_gradients([&](Tape& t) { return weighted_sum(t, softmax(t, x, 1), w33); }, {x});
  check_gradients([&](Tape& t) { return weighted_sum(t, softmax(t, x, 0), w33); }, {x});
  check_gradients([&](Tape& t) { return weighted_sum(t, log_softmax(t, x, 1), w33); }, {x});
  check_gradients([&](Tape& t) { return weighted_sum(t, gelu(t, x), w33); }, {x});

  auto bias = random_tensor(rng, {3});
  check_gradients([&](Tape& t) { return weighted_sum(t, add_bias(t, x, bias), w33); }, {x, bias});

  auto gamma = random_tensor(rng, {3});
  auto beta = random_tensor(rng, {3});
  check_gradients([&](Tape& t) { return weighted_sum(t, layer_norm(t, x, gamma, beta, 1e-12), w33); },
                  {x, gamma, beta});

  const Tensor mask({3}, std::vector<double>{1, 0, 1});
  check_gradients([&](Tape& t) { return weighted_sum(t, mean_pool(t, x, mask), w3); }, {x});

  auto table = random_tensor(rng, {5, 3});
  const std::vector<std::int32_t> ids = {4, 1, 4};
  check_gradients([&](Tape& t) { return weighted_sum(t, embedding_lookup(t, table, ids), w33); }, {table});

  auto p = random_tensor(rng, {3, 1});
  auto q = random_tensor(rng, {3, 2});
  check_gradients([&](Tape& t) { return weighted_sum(t, concat(t, {p, q}, 1), w33); }, {p, q});
  const auto w6 = random_tensor(rng, {6}, -2, 2, false);
  check_gradients([&](Tape& t) { return weighted_sum(t, reshape(t, transpose(t, q), {6}), w6); }, {q});
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, OpGradient, ::testing::Range(0, 5));

TEST(Backward, TwoLayerCompositionFiniteDifference) {
  Rng rng(42);
  auto x = random_tensor(rng, {4, 5});
  auto w1 = random_tensor(rng, {5, 6});
  auto b1 = random_tensor(rng, {6});
  auto w2 = random_tensor(rng, {6, 3});
  auto b2 = random_tensor(rng, {3});
  const auto target = random_tensor(rng, {4, 3}, -2, 2, false);
  check_gradients(
      [&](Tape& t) {
        const auto h = gelu(t, add_bias(t, matmul(t, x, w1), b1));
        const auto o = softmax(t, add_bias(t, matmul(t, h, w2), b2), 1);
        return weighted_sum(t, o, target);
      },
      {x, w1, b1, w2, b2});
}

TEST(Dropout, InvertedScalingAndDeterminism) {
  Tape tape;
  Tensor x({1000}, 1.0, true);
  Rng r1(5), r2(5);
  const auto a = dropout(tape, x, 0.25, &r1);
  const auto b = dropout(tape, x, 0.25, &r2);
  EXPECT_EQ(a.values(), b.values());
  std::size_t zeros = 0;
  for (double v : a.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    zeros += v == 0.0;
  }
  EXPECT_GT(zeros, 180u);
  EXPECT_LT(zeros, 320u);
  EXPECT_TRUE(dropout(tape, x, 0.25, nullptr).same_storage(x));
}
