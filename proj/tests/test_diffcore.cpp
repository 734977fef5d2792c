#include <cmath>

#include <gtest/gtest.h>

#include "pmmrec/gradcheck.hpp"
#include "pmmrec/nn.hpp"
#include "pmmrec/ops.hpp"
#include "test_support.hpp"

using namespace pmmrec;
using pmmrec::testing::random_tensor;

TEST(Diffcore, SquareValueAndGradient) {
  const Program f = [](Tape&, std::span<const Var> in) { return sum(mul(in[0], in[0])); };
  const auto r = forward_backward(f, {Tensor::scalar(3.0)});
  EXPECT_DOUBLE_EQ(r.value.item(), 9.0);
  EXPECT_DOUBLE_EQ(r.gradients[0].item(), 6.0);
}

TEST(Diffcore, UniformSoftmaxCrossEntropy) {
  const Program f = [](Tape&, std::span<const Var> in) {
    return sum(sub(masked_logsumexp(in[0], Mask(3, 1)), pick(in[0], {1})));
  };
  const auto r = forward_backward(f, {Tensor(Shape{1, 3}, 0.7)});
  EXPECT_NEAR(r.value.item(), std::log(3.0), 1e-15);
  const double third = 1.0 / 3.0;
  EXPECT_NEAR(r.gradients[0][0], third, 1e-15);
  EXPECT_NEAR(r.gradients[0][1], third - 1.0, 1e-15);
  EXPECT_NEAR(r.gradients[0][2], third, 1e-15);
}

TEST(Diffcore, RandomThreeLayerGraphMatchesFiniteDifferences) {
  const Program f = [](Tape&, std::span<const Var> in) {
    Var h = gelu(add_bias(matmul(in[0], in[1]), in[2]));
    h = relu(add_bias(matmul(h, in[3]), in[4]));
    h = layer_norm(matmul(h, in[5]), in[6], in[7]);
    return sum(mul(softmax(h), h));
  };
  std::vector<Tensor> point = {
      random_tensor({3, 8}, 1),       random_tensor({8, 8}, 2, 0.5), random_tensor({8}, 3, 0.1),
      random_tensor({8, 8}, 4, 0.5),  random_tensor({8}, 5, 0.1),    random_tensor({8, 8}, 6, 0.5),
      random_tensor({8}, 7, 0.3),     random_tensor({8}, 8, 0.3)};
  for (double& v : point[6].values()) v += 1.0;
  const auto rep = gradient_check(f, point, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed()) << rep.max_relative_error();
}

TEST(Diffcore, PrimitiveGradients) {
  const Mask mask = {1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0};
  const std::vector<std::pair<std::string, Program>> programs = {
      {"bmm", [](Tape&, std::span<const Var> in) {
         return sum(bmm(reshape(in[0], {2, 2, 3}), reshape(in[1], {2, 2, 3}), true));
       }},
      {"softmax_masked", [&mask](Tape&, std::span<const Var> in) {
         return weighted_sum(softmax(in[0], &mask), {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
       }},
      {"logsumexp", [&mask](Tape&, std::span<const Var> in) {
         return sum(masked_logsumexp(reshape(in[0], {3, 4}), mask));
       }},
      {"l2_normalize", [](Tape&, std::span<const Var> in) {
         return weighted_sum(l2_normalize(in[0]), {1, -2, 3, 0.5, 1, 2, -1, 0, 4, 1, 1, 1});
       }},
      {"gather_concat", [](Tape&, std::span<const Var> in) {
         Var c = concat_rows({in[0], in[1]});
         return sum(mul(gather_rows(c, {0, 3, 3, 1}), gather_rows(c, {2, 2, 1, 0})));
       }},
      {"exp_log", [](Tape&, std::span<const Var> in) {
         return sum(log(add(exp(in[0]), exp(in[1]))));
       }},
  };
  for (const auto& [name, f] : programs) {
    std::vector<Tensor> point = {random_tensor({4, 3}, 11), random_tensor({4, 3}, 12)};
    const auto rep = gradient_check(f, point, 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed()) << name << " " << rep.max_relative_error();
  }
}

TEST(Diffcore, LinearMapIsExact) {
  const Program f = [](Tape&, std::span<const Var> in) {
    return weighted_sum(in[0], {2.0, -1.0, 0.5, 3.0});
  };
  const auto rep = gradient_check(f, {random_tensor({4}, 3)}, 1e-5, 1e-4);
  EXPECT_LT(rep.max_relative_error(), 1e-10);
}

TEST(Diffcore, CorruptedGradientRuleIsReported) {
  // y = x², with a backward rule that forgets the factor 2.
  const Program f = [](Tape& t, std::span<const Var> in) {
    Tensor out = in[0].value();
    for (double& v : out.values()) v *= v;
    const std::size_t xid = in[0].id();
    Var y = t.record("bad_square", std::move(out), {in[0]}, [xid](Tape& tp, const Tensor& g) {
      Tensor& gx = tp.grad_buffer(xid);
      const Tensor& x = tp.value(xid);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * x[i];
    });
    return sum(y);
  };
  const auto rep = gradient_check(f, {random_tensor({5}, 9)}, 1e-5, 1e-4);
  EXPECT_FALSE(rep.passed());
}

TEST(Diffcore, L2NormalizeExamples) {
  Tape t;
  EXPECT_EQ(l2_normalize(t.constant(Tensor(Shape{1, 2}, {3.0, 4.0}))).value(),
            Tensor(Shape{1, 2}, {0.6, 0.8}));
  const Tensor unit(Shape{1, 3}, {0.0, 0.6, 0.8});
  const Tensor u = l2_normalize(t.constant(unit)).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(u[i], unit[i], 1e-12);
  const Tensor z = l2_normalize(t.constant(Tensor(Shape{1, 3}, 0.0)), 1e-12).value();
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Diffcore, ShapeErrorsNameTheOperation) {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Diffcore, BackwardNeedsScalarAndRecordingTape) {
  Tape t;
  Var a = t.input(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(t.backward(a), ShapeError);
  Tape frozen(false);
  Var b = frozen.input(Tensor::scalar(1.0));
  EXPECT_THROW(frozen.backward(sum(b)), std::logic_error);
}

TEST(Diffcore, ParameterGradientsAccumulate) {
  Parameter p("w", Tensor(Shape{2}, {1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape t;
    Var w = t.parameter(p);
    t.backward(sum(mul(w, w)));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 8.0);
  p.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad[1], 0.0);
}

TEST(Diffcore, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Tensor(Shape{2}, 1.0));
  Var x = t.input(Tensor(Shape{2}, 2.0));
  t.backward(sum(mul(c, x)));
  EXPECT_FALSE(t.needs_grad(c));
  EXPECT_EQ(t.grad(x), Tensor(Shape{2}, 1.0));
}

TEST(Diffcore, DropoutIsIdentityAtRateZeroAndScalesOtherwise) {
  Tape t;
  Rng rng(1);
  Var x = t.input(Tensor(Shape{1000}, 1.0));
  EXPECT_EQ(dropout(x, 0.0, rng).value(), x.value());
  const Tensor y = dropout(x, 0.5, rng).value();
  for (double v : y.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}
