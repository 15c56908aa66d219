#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "rpe2d/errors.hpp"
#include "rpe2d/numerics.hpp"
#include "test_support.hpp"

namespace {

using namespace rpe2d;
using rpe2d::testing::audit_gradients;
using rpe2d::testing::random_tensor;
using TapeD = nn::Tape<double>;
using TensorD = nn::BasicTensor<double>;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  nn::Tensor id({2, 2}, {1, 0, 0, 1});
  nn::Tensor b({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(nn::matmul(id, b), b);
}

TEST(Matmul, Projector) {
  nn::Tensor a({2, 2}, {1, 0, 0, 0});
  nn::Tensor b({2, 1}, {5, 7});
  EXPECT_EQ(nn::matmul(a, b), nn::Tensor({2, 1}, {5, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
  SeededRng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = std::size_t(rng.uniform_int(1, 9)), k = std::size_t(rng.uniform_int(1, 9)),
               n = std::size_t(rng.uniform_int(1, 9));
    const auto a = random_tensor<float>({m, k}, rng);
    const auto b = random_tensor<float>({k, n}, rng);
    const auto c = nn::matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double ref = 0;
        for (std::size_t p = 0; p < k; ++p) ref += double(a.at(i, p)) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), ref, 1e-6);
      }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  nn::Tensor a({2, 3}), b({2, 3});
  try {
    nn::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
  TapeD tape;
  EXPECT_THROW(tape.matmul(tape.constant(TensorD({2, 3})), tape.constant(TensorD({2, 3}))), ShapeError);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(nn::Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  nn::Tensor t({2, 3});
  EXPECT_EQ(t.size(), nn::numel(t.shape));
  t.zero_grad();
  EXPECT_EQ(t.grad.size(), t.data.size());
}

TEST(Softmax, UniformRow) {
  auto s = nn::softmax_lastdim(nn::Tensor({1, 3}, {0, 0, 0}));
  for (float v : s.data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Softmax, StableForLargeLogits) {
  auto s = nn::softmax_lastdim(nn::Tensor({1, 2}, {1000, 1000}));
  EXPECT_FLOAT_EQ(s.data[0], 0.5f);
  EXPECT_FLOAT_EQ(s.data[1], 0.5f);
}

TEST(Softmax, ClosedForm) {
  auto s = nn::softmax_lastdim(nn::Tensor({1, 2}, {0.0f, float(std::log(3.0))}));
  EXPECT_NEAR(s.data[0], 0.25, 1e-6);
  EXPECT_NEAR(s.data[1], 0.75, 1e-6);
}

TEST(Softmax, RowsSumToOne) {
  SeededRng rng(2);
  auto x = random_tensor<float>({7, 13}, rng, -20, 20);
  auto s = nn::softmax_lastdim(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 13; ++c) sum += s.at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

nn::Parameter<float> scalar_param(float w, float g) {
  nn::Parameter<float> p{"w", nn::Tensor({1}, {w})};
  p.tensor.grad = {g};
  return p;
}

TEST(AdamW, ZeroGradientLeavesParametersUnchanged) {
  auto p = scalar_param(0.3f, 0.0f);
  nn::AdamW<float> opt;
  std::vector<nn::Parameter<float>*> ps{&p};
  for (int i = 0; i < 5; ++i) opt.step(ps);
  EXPECT_EQ(p.tensor.data[0], 0.3f);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // m_hat = g and v_hat = g^2 after bias correction, so the step is lr * g/|g|.
  auto p = scalar_param(1.0f, 1.0f);
  nn::AdamWConfig c;
  c.lr = 0.1;
  c.eps = 0;
  nn::AdamW<float> opt(c);
  std::vector<nn::Parameter<float>*> ps{&p};
  opt.step(ps);
  EXPECT_NEAR(p.tensor.data[0], 0.9, 1e-6);
  EXPECT_EQ(opt.state().step_count, 1u);
}

TEST(AdamW, DecoupledWeightDecay) {
  auto p = scalar_param(2.0f, 0.0f);
  nn::AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.1;
  nn::AdamW<float> opt(c);
  std::vector<nn::Parameter<float>*> ps{&p};
  opt.step(ps);
  EXPECT_NEAR(p.tensor.data[0], 2.0 * (1 - 0.01), 1e-6);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto p = scalar_param(1.0f, std::numeric_limits<float>::quiet_NaN());
  p.name = "blocks.0.attn.qkv.w";
  nn::AdamW<float> opt;
  std::vector<nn::Parameter<float>*> ps{&p};
  try {
    opt.step(ps);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.0.attn.qkv.w"), std::string::npos);
  }
}

// Every differentiable op, composed with an MSE against a random target,
// checked at 128 or more coordinates.
class OpGradient : public ::testing::Test {
 protected:
  void audit(std::vector<TensorD> inputs, const std::function<nn::Var(TapeD&, const std::vector<nn::Var>&)>& op,
             nn::Shape out_shape) {
    std::size_t total = 0;
    for (const auto& t : inputs) total += t.size();
    ASSERT_GE(total, 100u);
    SeededRng rng(derive_seed(77, total));
    const auto target = random_tensor(out_shape, rng);
    auto build = [&](TapeD& tape, const std::vector<nn::Var>& v) {
      return tape.mse(op(tape, v), std::span<const double>(target.data));
    };
    const auto a = audit_gradients(std::move(inputs), build, std::max<std::size_t>(100, total), 5);
    EXPECT_GE(a.checked, 100u);
    EXPECT_LT(a.max_rel, 1e-4) << a.worst;
  }
  SeededRng rng_{11};
};

TEST_F(OpGradient, Matmul) {
  audit({random_tensor({6, 10}, rng_), random_tensor({10, 7}, rng_)},
        [](TapeD& t, const auto& v) { return t.matmul(v[0], v[1]); }, {6, 7});
}

TEST_F(OpGradient, MatmulNT) {
  audit({random_tensor({6, 10}, rng_), random_tensor({7, 10}, rng_)},
        [](TapeD& t, const auto& v) { return t.matmul_nt(v[0], v[1]); }, {6, 7});
}

TEST_F(OpGradient, Transpose) {
  audit({random_tensor({9, 12}, rng_)}, [](TapeD& t, const auto& v) { return t.transpose(v[0]); }, {12, 9});
}

TEST_F(OpGradient, Reshape) {
  audit({random_tensor({9, 12}, rng_)}, [](TapeD& t, const auto& v) { return t.reshape(v[0], {4, 27}); },
        {4, 27});
}

TEST_F(OpGradient, Add) {
  audit({random_tensor({8, 8}, rng_), random_tensor({8, 8}, rng_)},
        [](TapeD& t, const auto& v) { return t.add(v[0], v[1]); }, {8, 8});
}

TEST_F(OpGradient, Sub) {
  audit({random_tensor({8, 8}, rng_), random_tensor({8, 8}, rng_)},
        [](TapeD& t, const auto& v) { return t.sub(v[0], v[1]); }, {8, 8});
}

TEST_F(OpGradient, Mul) {
  audit({random_tensor({8, 8}, rng_), random_tensor({8, 8}, rng_)},
        [](TapeD& t, const auto& v) { return t.mul(v[0], v[1]); }, {8, 8});
}

TEST_F(OpGradient, Scale) {
  audit({random_tensor({10, 11}, rng_)}, [](TapeD& t, const auto& v) { return t.scale(v[0], -2.5); },
        {10, 11});
}

TEST_F(OpGradient, RowBroadcasts) {
  audit({random_tensor({10, 12}, rng_), random_tensor({1, 12}, rng_), random_tensor({12}, rng_)},
        [](TapeD& t, const auto& v) { return t.mul_row(t.add_row(v[0], v[1]), v[2]); }, {10, 12});
}

TEST_F(OpGradient, LayerNorm) {
  audit({random_tensor({8, 16}, rng_)}, [](TapeD& t, const auto& v) { return t.layer_norm(v[0]); }, {8, 16});
}

TEST_F(OpGradient, Gelu) {
  audit({random_tensor({10, 12}, rng_)}, [](TapeD& t, const auto& v) { return t.gelu(v[0]); }, {10, 12});
}

TEST_F(OpGradient, Silu) {
  audit({random_tensor({10, 12}, rng_)}, [](TapeD& t, const auto& v) { return t.silu(v[0]); }, {10, 12});
}

TEST_F(OpGradient, SoftmaxWithScale) {
  audit({random_tensor({10, 12}, rng_)}, [](TapeD& t, const auto& v) { return t.softmax_rows(v[0], 1.7); },
        {10, 12});
}

TEST_F(OpGradient, SliceAndConcat) {
  audit({random_tensor({10, 12}, rng_), random_tensor({10, 3}, rng_)},
        [](TapeD& t, const auto& v) {
          return t.concat_cols({t.slice_cols(v[0], 2, 5), v[1], t.slice_cols(v[0], 0, 2)});
        },
        {10, 10});
}

TEST_F(OpGradient, RotatePairs) {
  std::vector<double> cs, sn;
  for (int i = 0; i < 10 * 6; ++i) {
    const double a = rng_.uniform(-3, 3);
    cs.push_back(std::cos(a));
    sn.push_back(std::sin(a));
  }
  audit({random_tensor({10, 12}, rng_)},
        [&](TapeD& t, const auto& v) { return t.rotate_pairs(v[0], cs, sn); }, {10, 12});
}

TEST_F(OpGradient, GatherRow) {
  audit({random_tensor({9, 16}, rng_)},
        [](TapeD& t, const auto& v) { return t.add(t.gather_row(v[0], 3), t.gather_row(v[0], 8)); },
        {1, 16});
}

TEST_F(OpGradient, Linear) {
  audit({random_tensor({5, 8}, rng_), random_tensor({8, 9}, rng_), random_tensor({9}, rng_)},
        [](TapeD& t, const auto& v) { return t.linear(v[0], v[1], v[2]); }, {5, 9});
}

TEST_F(OpGradient, Mse) {
  audit({random_tensor({10, 12}, rng_)}, [](TapeD&, const auto& v) { return v[0]; }, {10, 12});
}

TEST(Tape, GradientsAccumulateIntoParameters) {
  nn::Parameter<double> p{"w", TensorD({2, 2}, {1, 2, 3, 4})};
  for (int rep = 0; rep < 2; ++rep) {
    TapeD tape;
    nn::Var w = tape.parameter(p);
    const std::vector<double> zero(4, 0.0);
    tape.backward(tape.mse(w, zero));
  }
  // d/dw mean(w^2) = 2w/4, twice.
  ASSERT_EQ(p.tensor.grad.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.tensor.grad[i], p.tensor.data[i]);
}

TEST(Tape, ForwardIsDeterministic) {
  SeededRng rng(4);
  const auto a = random_tensor<float>({16, 32}, rng);
  const auto b = random_tensor<float>({32, 24}, rng);
  auto run = [&] {
    nn::Tape<float> tape;
    auto x = tape.gelu(tape.layer_norm(tape.matmul(tape.constant(a), tape.constant(b))));
    return tape.tensor(tape.softmax_rows(x, 0.3f));
  };
  EXPECT_EQ(run(), run());
}

TEST(Gelu, DerivativeMatchesDifference) {
  for (double x = -4; x <= 4; x += 0.37) {
    const double h = 1e-5;
    const double fd = (nn::gelu_value(x + h) - nn::gelu_value(x - h)) / (2 * h);
    EXPECT_NEAR(nn::gelu_derivative(x), fd, 1e-8);
  }
}

}  // namespace
