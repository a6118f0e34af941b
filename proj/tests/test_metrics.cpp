#include "avedit/error.hpp"
#include "avedit/metrics.hpp"
#include "avedit/scene.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace avedit;

namespace {

// Every image and text maps to e0.
class ConstantEmbedder final : public Embedder {
 public:
  torch::Tensor embed_image(const torch::Tensor&) const override { return unit(0); }
  torch::Tensor embed_text(const std::string&) const override { return unit(0); }
  static torch::Tensor unit(int k) {
    auto v = torch::zeros({4}, torch::kFloat64);
    v[k] = 1.0;
    return v;
  }
};

// Images on e0, text on e1.
class OrthogonalEmbedder final : public Embedder {
 public:
  torch::Tensor embed_image(const torch::Tensor&) const override { return ConstantEmbedder::unit(0); }
  torch::Tensor embed_text(const std::string&) const override { return ConstantEmbedder::unit(1); }
};

std::vector<torch::Tensor> random_sequence(int n, uint64_t seed) {
  torch::manual_seed(seed);
  std::vector<torch::Tensor> out;
  for (int i = 0; i < n; ++i) out.push_back(torch::rand({16, 16, 3}));
  return out;
}

}  // namespace

TEST(PixelMse, WorkedCases) {
  const auto a = torch::rand({8, 8, 3});
  EXPECT_EQ(pixel_mse_consistency({a, a, a}), 0.0);
  const auto z = torch::zeros({8, 8, 3}, torch::kFloat64);
  EXPECT_EQ(pixel_mse_consistency({z, z + 0.1}), 0.1 * 0.1);
  EXPECT_THROW(pixel_mse_consistency({a}), ContractError);
  EXPECT_THROW(pixel_mse_consistency({a, torch::rand({4, 8, 3})}), DimensionError);
}

TEST(PixelMse, DuplicateFrameNeverIncreases) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto seq = random_sequence(5, seed);
    const double base = pixel_mse_consistency(seq);
    for (size_t k = 0; k < seq.size(); ++k) {
      auto dup = seq;
      dup.insert(dup.begin() + static_cast<long>(k), seq[k]);
      EXPECT_LE(pixel_mse_consistency(dup), base + 1e-12);
    }
  }
}

TEST(PixelMse, DependsOnOrder) {
  auto seq = random_sequence(4, 3);
  const double ordered = pixel_mse_consistency(seq);
  std::sort(seq.begin(), seq.end(), [](const auto& a, const auto& b) { return a.sum().template item<float>() < b.sum().template item<float>(); });
  bool changed = pixel_mse_consistency(seq) != ordered;
  std::swap(seq[0], seq[2]);
  changed = changed || pixel_mse_consistency(seq) != ordered;
  EXPECT_TRUE(changed);
  EXPECT_GE(ordered, 0.0);
}

TEST(Embedding, UnitNormAndDeterministic) {
  RandomProjectionEmbedder e;
  for (const auto& img : random_sequence(5, 4)) EXPECT_NEAR(e.embed_image(img).norm().item<double>(), 1.0, 1e-6);
  EXPECT_NEAR(e.embed_image(torch::full({32, 32, 3}, 0.5f)).norm().item<double>(), 1.0, 1e-6);
  EXPECT_NEAR(e.embed_text("Turn the hair blue").norm().item<double>(), 1.0, 1e-6);
  EXPECT_TRUE(torch::equal(e.embed_text("Blue"), e.embed_text("blue")));
  EXPECT_FALSE(torch::equal(e.embed_text("blue"), e.embed_text("pink")));
}

TEST(TemporalConsistency, ConstantIsOneAndBounded) {
  RandomProjectionEmbedder e;
  const auto a = torch::rand({16, 16, 3});
  EXPECT_NEAR(temporal_embedding_consistency({a, a, a}, e), 1.0, 1e-6);
  for (uint64_t s = 0; s < 10; ++s) {
    const double v = temporal_embedding_consistency(random_sequence(6, s), e);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(temporal_embedding_consistency({a}, e), ContractError);
}

TEST(TemporalConsistency, SmoothSequenceBeatsShuffled) {
  RandomProjectionEmbedder e;
  const auto ds = synth_sequence(testkit::tiny_scene(20, 32));
  std::vector<torch::Tensor> ordered;
  for (const auto& f : ds.frames) ordered.push_back(f.image_gt);
  auto shuffled = ordered;
  std::mt19937_64 rng(5);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_GE(temporal_embedding_consistency(ordered, e), temporal_embedding_consistency(shuffled, e));
  EXPECT_LE(pixel_mse_consistency(ordered), pixel_mse_consistency(shuffled));
}

TEST(TextAlignment, DegenerateEmbedders) {
  const auto seq = random_sequence(3, 6);
  EXPECT_NEAR(text_alignment(seq, "anything", ConstantEmbedder{}), 1.0, 1e-12);
  EXPECT_NEAR(text_alignment(seq, "anything", OrthogonalEmbedder{}), 0.0, 1e-6);
  EXPECT_THROW(text_alignment({}, "x", ConstantEmbedder{}), ContractError);
}

TEST(TextAlignment, SingleFrameIsItsCosine) {
  RandomProjectionEmbedder e;
  const auto img = torch::rand({16, 16, 3});
  const double cos = torch::dot(e.embed_image(img).to(torch::kFloat64), e.embed_text("blue hair").to(torch::kFloat64))
                         .item<double>();
  EXPECT_NEAR(text_alignment({img}, "blue hair", e), cos, 1e-6);
  for (uint64_t s = 0; s < 5; ++s) {
    const double v = text_alignment(random_sequence(4, s), "prompt", e);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}
