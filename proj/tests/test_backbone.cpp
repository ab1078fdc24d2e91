#include <gtest/gtest.h>

#include <cstring>

#include "crcnn/backbone.hpp"
#include "crcnn/dataio.hpp"
#include "oracles.hpp"

using namespace crcnn;

namespace {

Tensor ramp_clip(std::size_t t, std::size_t h, std::size_t w) {
  Tensor clip({t, h, w, 3});
  for (std::size_t i = 0; i < clip.size(); ++i) clip[i] = static_cast<double>((i * 37) % 101) / 100.0;
  return clip;
}

std::uint64_t tensor_hash(const Tensor& t) {
  std::string bytes(t.size() * 8, '\0');
  std::memcpy(bytes.data(), t.data(), bytes.size());
  return fnv1a(bytes);
}

}  // namespace

TEST(Backbone, SeedDeterminism) {
  BackboneConfig c;
  EXPECT_EQ(init_backbone(c).fingerprint(), init_backbone(c).fingerprint());
  BackboneConfig d = c;
  d.seed = 1;
  EXPECT_NE(init_backbone(c).fingerprint(), init_backbone(d).fingerprint());
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c;
  c.spatial_strides = {2, 2, 2, 1};
  EXPECT_THROW(c.validate(), ValidationError);
  c = BackboneConfig{};
  c.temporal_strides = {1, 1, 1, 1};
  EXPECT_THROW(c.validate(), ValidationError);
  c = BackboneConfig{};
  c.spatial_strides = {2, 2, 2, 2};
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_EQ(BackboneConfig{}.final_channels(), 64u);
}

TEST(Backbone, GoldenForwardChecksum) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  const Tensor out = forward(w, ramp_clip(8, 32, 32));
  EXPECT_EQ(hex64(w.fingerprint()), "759223854a85ef44");
  EXPECT_EQ(hex64(tensor_hash(out)), "81b0a2192918f924");
}

TEST(Backbone, DeskScaleShape) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  EXPECT_EQ(forward(w, ramp_clip(8, 32, 32)).shape(), (Shape{4, 2, 2, 64}));
  EXPECT_EQ(forward(w, ramp_clip(16, 64, 48)).shape(), (Shape{8, 4, 3, 64}));
  EXPECT_THROW(forward(w, ramp_clip(8, 40, 32)), ValidationError);
  EXPECT_THROW(forward(w, ramp_clip(3, 32, 32)), ValidationError);
}

TEST(Backbone, LocalPerturbationChangesOutput) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  const Tensor a = ramp_clip(8, 32, 32);
  Tensor b = a;
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t y = 10; y < 14; ++y)
      for (std::size_t x = 20; x < 24; ++x) b.at(t, y, x, 1) += 0.5;
  EXPECT_GT(max_abs_diff(forward(w, a), forward(w, b)), 1e-6);
}

TEST(NonLocal, ZeroOutputProjectionIsIdentity) {
  Rng rng(41);
  NonLocalWeights nl{oracle::random_tensor({4, 2}, rng), oracle::random_tensor({4, 2}, rng),
                     oracle::random_tensor({4, 2}, rng), Tensor({2, 4})};
  const Tensor x = oracle::random_tensor({2, 2, 2, 4}, rng);
  EXPECT_EQ(nonlocal_block(nl, x), x);
}

TEST(NonLocal, SinglePosition) {
  Rng rng(42);
  NonLocalWeights nl{oracle::random_tensor({4, 2}, rng), oracle::random_tensor({4, 2}, rng),
                     oracle::random_tensor({4, 2}, rng), oracle::random_tensor({2, 4}, rng)};
  const Tensor x = oracle::random_tensor({1, 1, 1, 4}, rng);
  const Tensor g = matmul(x.reshaped({1, 4}), nl.g);
  const Tensor want = add(x, matmul(g, nl.out).reshaped({1, 1, 1, 4}));
  EXPECT_LE(max_abs_diff(nonlocal_block(nl, x), want), 1e-12);
}

TEST(NonLocal, MatchesPairwiseOracle) {
  Rng rng(43);
  for (int i = 0; i < 20; ++i) {
    NonLocalWeights nl{oracle::random_tensor({4, 2}, rng), oracle::random_tensor({4, 2}, rng),
                       oracle::random_tensor({4, 2}, rng), oracle::random_tensor({2, 4}, rng)};
    const Tensor x = oracle::random_tensor({2, 2, 2, 4}, rng, -2, 2);
    EXPECT_LE(max_abs_diff(nonlocal_block(nl, x), oracle::nonlocal(nl, x)), 1e-9);
  }
}

TEST(Features, ActorOnConstantClipEqualsScene) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  const Tensor clip({8, 32, 32, 3}, 0.6);
  EXPECT_LE(max_abs_diff(actor_feature(w, clip, {0.3, 0.1, 0.6, 0.5}, 32, 32),
                         scene_feature(w, clip)),
            1e-9);
}

TEST(Features, FullFrameCropEqualsScene) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  const Tensor clip = ramp_clip(8, 32, 32);
  EXPECT_LE(max_abs_diff(actor_feature(w, clip, {0, 0, 1, 1}, 32, 32), scene_feature(w, clip)),
            1e-9);
  EXPECT_EQ(scene_feature(w, ramp_clip(16, 64, 64)).shape(), (Shape{64}));
}

TEST(Features, DistinctConstantsAndGlyphSensitivity) {
  const BackboneWeights w = init_backbone(BackboneConfig{});
  EXPECT_GT(max_abs_diff(scene_feature(w, Tensor({8, 32, 32, 3}, 0.2)),
                         scene_feature(w, Tensor({8, 32, 32, 3}, 0.7))),
            1e-6);
  const Tensor plain({8, 32, 32, 3}, 0.4);
  Tensor glyph = plain;
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t y = 12; y < 18; ++y)
      for (std::size_t x = 12; x < 18; ++x) glyph.at(t, y, x, 0) = (x + y) % 2 ? 0.95 : 0.1;
  const Box box{0.3, 0.3, 0.6, 0.6};
  EXPECT_GT(max_abs_diff(actor_feature(w, plain, box, 32, 32), actor_feature(w, glyph, box, 32, 32)),
            1e-6);
}

TEST(Backbone, TensorRoundTrip) {
  BackboneConfig c;
  c.seed = 9;
  const BackboneWeights w = init_backbone(c);
  const BackboneWeights r = backbone_from_tensors(decode_container(encode_container(backbone_to_tensors(w))));
  EXPECT_EQ(r.fingerprint(), w.fingerprint());
  EXPECT_EQ(r.config.seed, 9u);
  const Tensor clip = ramp_clip(8, 32, 32);
  EXPECT_EQ(forward(r, clip), forward(w, clip));
}
