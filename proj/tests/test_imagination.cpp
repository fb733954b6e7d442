#include <gtest/gtest.h>

#include "brivl/imagination.hpp"
#include "test_util.hpp"

using namespace brivl;

namespace {

struct Models {
  ImageEncoder image;
  TextEncoder text;
};

Models make_models(std::uint64_t seed) {
  SplitMix64 r1(seed), r2(seed + 1);
  return {ImageEncoder(EncoderConfig{}, r1), TextEncoder(EncoderConfig{}, r2)};
}

ToyGenerator make_generator(std::uint64_t seed) {
  GeneratorConfig c;
  c.codebook_size = 16;
  c.code_dim = 4;
  SplitMix64 rng(seed);
  return ToyGenerator(c, 32, rng);
}

VisConfig vis(std::size_t iters, std::uint64_t seed = 1) {
  VisConfig c;
  c.iterations = iters;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Visualize, ZeroIterationsReturnsTheSeededNoise) {
  const Models m = make_models(1);
  const auto r = visualize_text("red circle", m.image, m.text, vis(0, 5));
  EXPECT_TRUE(brivl::testing::bit_equal(r.image.data(), noise_image(32, 5).data()));
  EXPECT_EQ(r.cosines.size(), 1u);
}

TEST(Visualize, TraceRangeDeterminismAndFrozenModel) {
  const Models m = make_models(2);
  const std::uint64_t img_sum = m.image.params().checksum(), txt_sum = m.text.params().checksum();
  const auto a = visualize_text("large blue square", m.image, m.text, vis(25, 3));
  const auto b = visualize_text("large blue square", m.image, m.text, vis(25, 3));
  EXPECT_EQ(m.image.params().checksum(), img_sum);
  EXPECT_EQ(m.text.params().checksum(), txt_sum);
  for (const auto& [_, p] : m.image.params()) EXPECT_FALSE(p.has_grad());
  EXPECT_EQ(a.cosines.size(), 26u);
  EXPECT_TRUE(brivl::testing::bit_equal(a.image.data(), b.image.data()));
  EXPECT_EQ(encode_ppm(a.image), encode_ppm(b.image));
  for (float v : a.image.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_GT(a.cosines.back(), a.cosines.front());
  const auto c = visualize_text("large blue square", m.image, m.text, vis(25, 4));
  EXPECT_FALSE(brivl::testing::bit_equal(a.image.data(), c.image.data()));
}

TEST(Visualize, NeuronTermRaisesTheTargetChannel) {
  const Models m = make_models(3);
  std::size_t checked = 0;
  for (std::size_t ch = 0; ch < kBackboneChannels.back() && checked < 3; ++ch) {
    VisConfig plain = vis(30, 7), neuron = vis(30, 7);
    plain.neuron_channel = neuron.neuron_channel = ch;
    plain.neuron_weight = 0.0f;
    neuron.neuron_weight = 1.0f;
    const auto without = visualize_text("green triangle", m.image, m.text, plain);
    if (without.neuron.front() <= 0.0) continue;  // channel is silent on this noise image
    const auto with = visualize_text("green triangle", m.image, m.text, neuron);
    EXPECT_GT(with.neuron.back(), without.neuron.back()) << "channel " << ch;
    ++checked;
  }
  EXPECT_EQ(checked, 3u);
}

TEST(Visualize, RejectsBadArguments) {
  const Models m = make_models(4);
  VisConfig c = vis(1);
  c.neuron_channel = kBackboneChannels.back();
  EXPECT_THROW(visualize_text("red", m.image, m.text, c), InvalidArgument);
  c = vis(1);
  c.lr = 0.0f;
  EXPECT_THROW(visualize_text("red", m.image, m.text, c), InvalidArgument);
  EXPECT_THROW(visualize_text("", m.image, m.text, vis(1)), InvalidArgument);
}

TEST(Generate, ZeroIterationsDecodesTheInitialGrid) {
  const Models m = make_models(5);
  const ToyGenerator g = make_generator(6);
  GeneratorConfig c = g.config();
  c.iterations = 0;
  const auto r = generate_from_text("red circle", m.image, m.text, g, c, 9);
  EXPECT_EQ(r.cosines.size(), 1u);
  NoGradGuard guard;
  EXPECT_TRUE(brivl::testing::bit_equal(g.decode(r.codes).data(), r.image.data()));
}

TEST(Generate, CodesStayOnTheCodebookAndModelsStayFrozen) {
  const Models m = make_models(7);
  const ToyGenerator g = make_generator(8);
  const std::uint64_t gsum = g.params().checksum(), isum = m.image.params().checksum();
  const auto cb_before = g.codebook().entries().values();
  GeneratorConfig c = g.config();
  c.iterations = 10;
  const auto a = generate_from_text("small yellow circle", m.image, m.text, g, c, 2);
  const auto b = generate_from_text("small yellow circle", m.image, m.text, g, c, 2);
  EXPECT_EQ(g.params().checksum(), gsum);
  EXPECT_EQ(m.image.params().checksum(), isum);
  EXPECT_EQ(g.codebook().entries().values(), cb_before);
  EXPECT_EQ(a.cosines.size(), 11u);
  EXPECT_TRUE(brivl::testing::bit_equal(a.codes.data(), b.codes.data()));
  const std::size_t d = g.codebook().dim();
  for (std::size_t cell = 0; cell < g.cells(); ++cell) {
    bool on_book = false;
    for (std::size_t k = 0; k < g.codebook().size() && !on_book; ++k) {
      const auto e = g.codebook().entry(k);
      on_book = std::equal(e.begin(), e.end(), a.codes.data().begin() + cell * d);
    }
    EXPECT_TRUE(on_book) << "cell " << cell;
  }
}

TEST(Generate, RejectsMismatchedGenerator) {
  const Models m = make_models(9);
  GeneratorConfig c;
  c.codebook_size = 4;
  c.code_dim = 2;
  SplitMix64 rng(1);
  const ToyGenerator small(c, 16, rng);
  EXPECT_THROW(generate_from_text("red", m.image, m.text, small, c, 1), ShapeError);
}

TEST(Output, PpmAndTraceFormats) {
  const Tensor img = Tensor::full({1, 3, 2, 2}, 1.0f);
  const auto ppm = encode_ppm(img);
  const std::string header = "P6\n2 2\n255\n";
  EXPECT_EQ(std::string(ppm.begin(), ppm.begin() + header.size()), header);
  EXPECT_EQ(ppm.size(), header.size() + 12);
  EXPECT_EQ(ppm.back(), 255);
  EXPECT_THROW(encode_ppm(Tensor::zeros({2, 2})), ShapeError);
  EXPECT_EQ(format_trace({0.5, 0.25}), "0 0.5\n1 0.25\n");
}
