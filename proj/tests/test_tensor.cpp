#include <gtest/gtest.h>

#include "brivl/ops.hpp"
#include "brivl/tensor.hpp"
#include "test_util.hpp"

using namespace brivl;
using brivl::testing::random_tensor;

TEST(Tensor, FromChecksElementCount) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor::from({2, 0}, {}), ShapeError);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(Tensor, GradientShapeMatchesValue) {
  SplitMix64 rng(1);
  Tensor x = random_tensor({3, 4}, rng, true);
  ops::sum(ops::mul(x, x)).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(x.grad()[i], 2.0f * x.data()[i]);
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_THROW(Tensor::zeros({2}).item(), ShapeError);
  EXPECT_FLOAT_EQ(Tensor::scalar(3.5f).item(), 3.5f);
}

TEST(Tensor, BackwardNeedsScalarLossWithHistory) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(ops::scale(x, 2.0f).backward(), ShapeError);
  EXPECT_THROW(ops::sum(Tensor::from({2}, {1, 2})).backward(), InvalidArgument);
}

TEST(Tensor, SharedInputAccumulates) {
  Tensor x = Tensor::from({1}, {3.0f}, true);
  ops::sum(ops::add(x, x)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
}

TEST(Tensor, DiamondGraphVisitsEachNodeOnce) {
  // y = x * x, z = y + y, loss = sum(z) -> dloss/dx = 4x
  Tensor x = Tensor::from({2}, {1.5f, -2.0f}, true);
  const Tensor y = ops::mul(x, x);
  ops::sum(ops::add(y, y)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -8.0f);
}

TEST(Tensor, RepeatedBackwardAccumulatesUntilZeroed) {
  Tensor x = Tensor::from({1}, {2.0f}, true);
  ops::sum(ops::scale(x, 3.0f)).backward();
  ops::sum(ops::scale(x, 3.0f)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    const Tensor y = ops::scale(x, 2.0f);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node().inputs.empty());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(ops::scale(x, 2.0f).requires_grad());
}

TEST(Tensor, DetachCutsHistory) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor d = ops::scale(x, 2.0f).detach();
  EXPECT_FALSE(d.requires_grad());
  Tensor w = Tensor::from({2}, {1, 1}, true);
  ops::sum(ops::mul(d, w)).backward();
  EXPECT_FALSE(x.has_grad());
  EXPECT_FLOAT_EQ(w.grad()[1], 4.0f);
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = a;
  Tensor c = a.clone();
  a.data()[0] = 9.0f;
  EXPECT_FLOAT_EQ(b.data()[0], 9.0f);
  EXPECT_FLOAT_EQ(c.data()[0], 1.0f);
}

TEST(Tensor, InputsWithoutGradGetNoBuffer) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor c = Tensor::from({2}, {3, 4});
  ops::sum(ops::mul(x, c)).backward();
  EXPECT_FALSE(c.has_grad());
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
}

TEST(Tensor, DoubleInstantiationComputesInDouble) {
  DTensor x = DTensor::from({1}, {1e-9}, true);
  const DTensor y = ops::add_scalar(x, 1.0);
  EXPECT_NE(y.item(), 1.0);  // float would round this away
  ops::sum(ops::mul(y, y)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * (1.0 + 1e-9));
}

TEST(Tensor, DeepChainDoesNotOverflowStack) {
  Tensor x = Tensor::from({1}, {1.0f}, true);
  Tensor y = x;
  for (int i = 0; i < 20000; ++i) y = ops::add_scalar(y, 0.0f);
  ops::sum(y).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
}
