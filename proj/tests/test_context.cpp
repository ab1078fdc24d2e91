#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <tuple>

#include "crcnn/context.hpp"
#include "oracles.hpp"

using namespace crcnn;

namespace {

Tensor tagged(double v, std::size_t dim = 3) { return Tensor({dim}, v); }

FeatureBank random_bank(Rng& rng, std::size_t n, std::size_t dim) {
  FeatureBank bank;
  std::set<std::tuple<std::string, std::int64_t, std::int64_t>> used;
  while (bank.size() < n) {
    const std::string vid = rng.below(3) == 0 ? "b" : "a";
    const auto t = static_cast<std::int64_t>(rng.below(200));
    const auto p = static_cast<std::int64_t>(rng.below(4));
    if (!used.insert({vid, t, p}).second) continue;
    bank.add(vid, t, p, oracle::random_tensor({dim}, rng));
  }
  return bank;
}

}  // namespace

TEST(FeatureBank, RejectsDimensionDriftAndDuplicates) {
  FeatureBank bank;
  bank.add("v", 0, 0, tagged(1));
  EXPECT_THROW(bank.add("v", 1, 0, tagged(1, 4)), ValidationError);
  EXPECT_THROW(bank.add("v", 0, 0, tagged(2)), ValidationError);
  EXPECT_EQ(bank.size(), 1u);
}

TEST(Window, CenteredSixtyOneSeconds) {
  FeatureBank bank;
  for (std::int64_t dt : {-31, -30, 0, 30, 31}) bank.add("v", 100 + dt, 0, tagged(static_cast<double>(dt)));
  const auto w = window_features(bank, "v", 100);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[0][0], -30.0);
  EXPECT_EQ(w[2][0], 30.0);
  const auto one = window_features(bank, "v", 100, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0][0], 0.0);
  EXPECT_TRUE(window_features(bank, "missing", 100).empty());
  EXPECT_THROW(window_features(bank, "v", 100, 60), ValidationError);
}

TEST(Window, MatchesFilterAndSortOracle) {
  Rng rng(51);
  const FeatureBank bank = random_bank(rng, 300, 2);
  for (int q = 0; q < 50; ++q) {
    const std::string vid = q % 2 ? "a" : "b";
    const auto t = static_cast<std::int64_t>(rng.below(200));
    const std::int64_t w = 2 * static_cast<std::int64_t>(rng.below(40)) + 1;
    std::vector<std::tuple<std::int64_t, std::int64_t, Tensor>> rows;
    for (const auto& [key, entries] : bank.entries()) {
      for (const auto& e : entries) {
        if (key.first == vid && std::abs(key.second - t) <= w / 2) rows.emplace_back(key.second, e.person_id, e.feature);
      }
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
    });
    const auto got = window_features(bank, vid, t, w);
    ASSERT_EQ(got.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(got[i], std::get<2>(rows[i]));
  }
}

TEST(Window, MonotoneInWindowSize) {
  Rng rng(52);
  const FeatureBank bank = random_bank(rng, 200, 2);
  for (std::int64_t w = 1; w < 120; w += 2) {
    EXPECT_LE(window_features(bank, "a", 100, w).size(), window_features(bank, "a", 100, w + 2).size());
  }
}

TEST(SimplifiedBlock, EmptyBankAndSingleEntry) {
  Rng rng(53);
  const Linear g = init_linear(8, 8, rng);
  const std::vector<Tensor> shortf{oracle::random_tensor({8}, rng), oracle::random_tensor({8}, rng)};
  EXPECT_EQ(simplified_lfb_block(shortf, {}, g), shortf);
  const Tensor entry = oracle::random_tensor({8}, rng);
  const auto out = simplified_lfb_block(shortf, {entry}, g);
  ASSERT_EQ(out.size(), 2u);
  const Tensor summary = relu(layer_norm(g(entry)));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LE(max_abs_diff(out[i], add(shortf[i], summary)), 1e-12);
}

TEST(SimplifiedBlock, EqualsAttentionUnderConstantLogits) {
  Rng rng(54);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t d = 4 + rng.below(12);
    const Linear g = init_linear(d, d, rng);
    std::vector<Tensor> shortf, bank;
    for (std::size_t i = 0, n = 1 + rng.below(4); i < n; ++i) shortf.push_back(oracle::random_tensor({d}, rng));
    for (std::size_t i = 0, n = 1 + rng.below(8); i < n; ++i) bank.push_back(oracle::random_tensor({d}, rng));
    const double c = rng.uniform(-50, 50);
    const auto want = oracle::attention_lfb_block(shortf, bank, g, [c](std::size_t, std::size_t) { return c; });
    const auto got = simplified_lfb_block(shortf, bank, g);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(max_abs_diff(got[i], want[i]), 1e-9);
  }
}

TEST(SimplifiedBlock, DiffersFromAttentionWithRealLogits) {
  Rng rng(55);
  const Linear g = init_linear(6, 6, rng);
  const std::vector<Tensor> shortf{oracle::random_tensor({6}, rng)};
  const std::vector<Tensor> bank{oracle::random_tensor({6}, rng), oracle::random_tensor({6}, rng)};
  const auto att = oracle::attention_lfb_block(shortf, bank, g, [&](std::size_t, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += shortf[0][k] * bank[j][k] * 3.0;
    return s;
  });
  EXPECT_GT(max_abs_diff(att[0], simplified_lfb_block(shortf, bank, g)[0]), 1e-6);
}

TEST(LongTerm, EmptyBankGivesReducedActors) {
  const LfbParams p = init_lfb(6, 1, 0.0, 61, 16);
  Rng rng(56);
  const std::vector<Tensor> actors{oracle::random_tensor({6}, rng), oracle::random_tensor({6}, rng)};
  const auto out = long_term_feature(p, actors, FeatureBank{}, "v", 3);
  ASSERT_EQ(out.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(out[i], p.reduce_actor(actors[i]));
}

TEST(LongTerm, DefaultDimensionAndBlockCount) {
  const LfbParams p = init_lfb(64, 2);
  EXPECT_EQ(p.block_maps.size(), 3u);
  FeatureBank bank;
  Rng rng(57);
  bank.add("v", 0, 0, oracle::random_tensor({64}, rng));
  const std::vector<Tensor> actors(3, oracle::random_tensor({64}, rng));
  const auto out = long_term_feature(p, actors, bank, "v", 0);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& o : out) EXPECT_EQ(o.shape(), (Shape{512}));
}

TEST(LongTerm, MatchesHandComposedBlocks) {
  const LfbParams p = init_lfb(5, 7, 0.0, 5, 12);
  Rng rng(58);
  FeatureBank bank;
  for (std::int64_t t = 0; t < 10; ++t) {
    for (std::int64_t pid = 0; pid < 2; ++pid) bank.add("v", t, pid, oracle::random_tensor({5}, rng));
  }
  const std::vector<Tensor> actors{oracle::random_tensor({5}, rng), oracle::random_tensor({5}, rng)};
  std::vector<Tensor> cur;
  for (const auto& a : actors) cur.push_back(p.reduce_actor(a));
  std::vector<Tensor> reduced;
  for (std::int64_t t = 3; t <= 7; ++t) {
    for (const auto& e : bank.entries().at({"v", t})) reduced.push_back(p.reduce_bank(e.feature));
  }
  for (const Linear& g : p.block_maps) {
    cur = oracle::attention_lfb_block(cur, reduced, g, [](std::size_t, std::size_t) { return 0.0; });
  }
  const auto got = long_term_feature(p, actors, bank, "v", 5);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LE(max_abs_diff(got[i], cur[i]), 1e-9);
}

TEST(LongTerm, InferenceDeterministicTrainingStochastic) {
  const LfbParams p = init_lfb(4, 3, 0.5, 61, 16);
  Rng rng(59);
  FeatureBank bank;
  bank.add("v", 0, 0, oracle::random_tensor({4}, rng));
  const std::vector<Tensor> actors{oracle::random_tensor({4}, rng)};
  EXPECT_EQ(long_term_feature(p, actors, bank, "v", 0), long_term_feature(p, actors, bank, "v", 0));
  Rng a(1), b(2);
  EXPECT_NE(long_term_feature(p, actors, bank, "v", 0, &a), long_term_feature(p, actors, bank, "v", 0, &b));
}

TEST(LongTerm, ParamsRoundTripThroughTensors) {
  const LfbParams p = init_lfb(4, 3, 0.25, 31, 16);
  const LfbParams q = lfb_from_tensors(lfb_to_tensors(p));
  EXPECT_EQ(q.reduce_actor.weight, p.reduce_actor.weight);
  EXPECT_EQ(q.block_maps[2].bias, p.block_maps[2].bias);
  EXPECT_EQ(q.dropout_rate, 0.25);
  EXPECT_EQ(q.window_seconds, 31);
}
