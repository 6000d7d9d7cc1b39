#include <gtest/gtest.h>

#include "trojanlens/attention_analysis.hpp"

namespace trojanlens {
namespace {

// Attention with every row set by `fill(l, h, q, k)`.
template <class F>
AttentionTensor crafted(std::size_t L, std::size_t H, std::size_t n, F fill) {
  AttentionTensor a(L, H, n);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h) {
      auto m = a.head(l, h);
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t k = 0; k < n; ++k) m[q * n + k] = fill(l, h, q, k);
    }
  return a;
}

AttentionTensor random_stochastic(Rng& rng, std::size_t L, std::size_t H, std::size_t n) {
  AttentionTensor a(L, H, n);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h) {
      auto m = a.head(l, h);
      for (std::size_t q = 0; q < n; ++q) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += m[q * n + k] = std::exp(3.0 * rng.normal());
        for (std::size_t k = 0; k < n; ++k) m[q * n + k] /= s;
      }
    }
  return a;
}

std::vector<ModelAttention> random_population(std::uint64_t seed, std::size_t models, std::size_t sentences) {
  Rng rng(seed);
  std::vector<ModelAttention> out(models);
  for (std::size_t m = 0; m < models; ++m) {
    out[m].model_id = "m" + std::to_string(m);
    for (std::size_t s = 0; s < sentences; ++s) out[m].tensors.push_back(random_stochastic(rng, 3, 2, rng.between(3, 9)));
  }
  return out;
}

// Independent nested-loop recomputation of the mean-average-max map.
double naive_mean_avg_max(const std::vector<ModelAttention>& models, std::size_t l, std::size_t h) {
  double mean = 0.0;
  for (const ModelAttention& m : models) {
    double total = 0.0;
    double count = 0.0;
    for (const AttentionTensor& a : m.tensors)
      for (std::size_t q = 0; q < a.n_tokens(); ++q) {
        double best = -1.0;
        for (std::size_t k = 0; k < a.n_tokens(); ++k) best = std::max(best, a.at(l, h, q, k));
        total += best;
        count += 1.0;
      }
    mean += total / count;
  }
  return mean / static_cast<double>(models.size());
}

TEST(MaxAttentionPerToken, UniformRowTiesToFirstKey) {
  const AttentionTensor a = crafted(1, 1, 4, [](auto, auto, auto, auto) { return 0.25; });
  for (const TokenMax& t : max_attention_per_token(a, {0, 0})) {
    EXPECT_DOUBLE_EQ(t.value, 0.25);
    EXPECT_EQ(t.key, 0u);
  }
}

TEST(MaxAttentionPerToken, PeakedRow) {
  const AttentionTensor a = crafted(1, 1, 3, [](auto, auto, auto, std::size_t k) { return k == 1 ? 0.98 : 0.01; });
  const TokenMax t = max_attention_per_token(a, {0, 0})[0];
  EXPECT_DOUBLE_EQ(t.value, 0.98);
  EXPECT_EQ(t.key, 1u);
}

TEST(MaxAttentionPerToken, MatchesLinearScan) {
  Rng rng(3);
  const AttentionTensor a = random_stochastic(rng, 2, 3, 7);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 3; ++h) {
      const auto got = max_attention_per_token(a, {l, h});
      for (std::size_t q = 0; q < 7; ++q) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < 7; ++k)
          if (a.at(l, h, q, k) > a.at(l, h, q, best)) best = k;
        EXPECT_EQ(got[q].key, best);
        EXPECT_EQ(got[q].value, a.at(l, h, q, best));
      }
    }
}

TEST(MaxAttentionPerToken, HeadOutOfRangeThrows) {
  EXPECT_THROW(max_attention_per_token(AttentionTensor(2, 2, 3), {2, 0}), std::out_of_range);
}

TEST(GlobalMaxDistribution, ThresholdOneIsEmpty) {
  const auto models = random_population(1, 2, 3);
  const MaxDistribution d = global_max_distribution(models, 1.0);
  EXPECT_TRUE(d.samples.empty());
}

TEST(GlobalMaxDistribution, SamplesAboveThresholdAndRecountMatches) {
  const auto models = random_population(2, 3, 5);
  const MaxDistribution d = global_max_distribution(models, 0.1);
  std::size_t recount = 0;
  for (const ModelAttention& m : models)
    for (const AttentionTensor& a : m.tensors)
      for (std::size_t l = 0; l < a.layers(); ++l)
        for (std::size_t h = 0; h < a.heads(); ++h)
          for (const TokenMax& t : max_attention_per_token(a, {l, h})) recount += t.value > 0.1;
  EXPECT_EQ(d.samples.size(), recount);
  for (double v : d.samples) EXPECT_GT(v, 0.1);
  std::size_t binned = 0;
  for (std::size_t c : d.histogram) binned += c;
  EXPECT_EQ(binned, recount);
  EXPECT_EQ(d.histogram.size(), 100u);
}

TEST(GlobalMaxDistribution, BinEdges) {
  EXPECT_EQ(histogram_bin(0.1 + 1e-12, 0.1, 100), 0u);
  EXPECT_EQ(histogram_bin(0.109, 0.1, 100), 0u);
  EXPECT_EQ(histogram_bin(0.1095, 0.1, 100), 1u);
  EXPECT_EQ(histogram_bin(1.0, 0.1, 100), 99u);
}

TEST(GlobalMaxDistribution, NoModelsThrows) {
  EXPECT_THROW(global_max_distribution(std::span<const ModelAttention>{}), std::invalid_argument);
}

TEST(HeadwiseMeanAvgMax, IdentityAttentionIsOne) {
  ModelAttention m{"id", {crafted(1, 1, 5, [](auto, auto, std::size_t q, std::size_t k) { return q == k ? 1.0 : 0.0; })}};
  EXPECT_DOUBLE_EQ(headwise_mean_avg_max(std::span(&m, 1)).at({0, 0}), 1.0);
}

TEST(HeadwiseMeanAvgMax, MeanOverModels) {
  std::vector<ModelAttention> ms = {
      {"a", {crafted(1, 1, 4, [](auto, auto, auto, auto) { return 0.25; })}},
      {"b", {crafted(1, 1, 2, [](auto, auto, auto, std::size_t k) { return k == 0 ? 0.75 : 0.25; })}}};
  EXPECT_DOUBLE_EQ(headwise_mean_avg_max(ms).at({0, 0}), (0.25 + 0.75) / 2);
}

TEST(HeadwiseMeanAvgMax, MatchesNaiveRecomputation) {
  const auto models = random_population(7, 4, 6);
  const HeadMap map = headwise_mean_avg_max(models, "pop");
  EXPECT_EQ(map.provenance, "pop");
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_NEAR(map.at({l, h}), naive_mean_avg_max(models, l, h), 1e-12);
      EXPECT_GT(map.at({l, h}), 0.0);
      EXPECT_LE(map.at({l, h}), 1.0);
    }
}

TEST(HeadwiseMeanAvgMax, UniformAttentionHitsLowerBound) {
  for (std::size_t n : {2u, 5u, 9u}) {
    ModelAttention m{"u", {crafted(1, 1, n, [n](auto, auto, auto, auto) { return 1.0 / static_cast<double>(n); })}};
    EXPECT_NEAR(headwise_mean_avg_max(std::span(&m, 1)).at({0, 0}), 1.0 / static_cast<double>(n), 1e-15);
  }
}

TEST(HeadwiseMeanAvgMax, GeometryMismatchThrows) {
  std::vector<ModelAttention> ms = {{"a", {AttentionTensor(2, 2, 3)}}, {"b", {AttentionTensor(3, 2, 3)}}};
  EXPECT_THROW(headwise_mean_avg_max(ms), std::invalid_argument);
}

TEST(DifferingHeads, IdenticalMapsGiveNothing) {
  Rng rng(1);
  HeadMap m(3, 4);
  for (double& v : m.values) v = rng.uniform();
  EXPECT_TRUE(differing_heads(m, m, 0.0).empty());
  EXPECT_TRUE(differing_heads(m, m, 0.1).empty());
}

TEST(DifferingHeads, SingleDifferenceFound) {
  HeadMap benign(2, 2), trojan(2, 2);
  for (double& v : benign.values) v = 0.4;
  trojan = benign;
  trojan.at({1, 0}) = 0.6;
  const auto out = differing_heads(trojan, benign, 0.1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], (HeadId{1, 0}));
}

TEST(DifferingHeads, SortedByDescendingDifferenceAndStrict) {
  HeadMap benign(1, 4), trojan(1, 4);
  trojan.values = {0.15, 0.5, 0.1, 0.3};
  const auto ranked = differing_heads_ranked(trojan, benign, 0.1);
  ASSERT_EQ(ranked.size(), 3u);
  EXPECT_EQ(ranked[0].head.head, 1u);
  EXPECT_EQ(ranked[1].head.head, 3u);
  EXPECT_EQ(ranked[2].head.head, 0u);
  for (const auto& d : ranked) EXPECT_GT(trojan.at(d.head), benign.at(d.head));
}

TEST(DifferingHeads, GeometryMismatchThrows) {
  EXPECT_THROW(differing_heads(HeadMap(2, 2), HeadMap(2, 3)), std::invalid_argument);
}

TEST(HeadValueSamples, SingleModelMatchesMap) {
  const auto models = random_population(5, 1, 4);
  const HeadMap map = headwise_mean_avg_max(models);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto v = head_value_samples(models, {l, h});
      ASSERT_EQ(v.size(), 1u);
      EXPECT_NEAR(v[0], map.at({l, h}), 1e-12);
    }
}

TEST(HeadValueSamples, BoundedByStochasticRowMax) {
  const auto models = random_population(6, 5, 3);
  for (double v : head_value_samples(models, {2, 1})) {
    EXPECT_GE(v, 1.0 / 9.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(CaptureAttention, RealModelRowsAreStochastic) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 8;
  const TransformerModel m = init_model(c, 1);
  const Lexicon lex = build_lexicon(1);
  const Dataset dev = build_dev_set(lex, 1);
  const ModelAttention cap = capture_attention(m, dev.examples);
  ASSERT_EQ(cap.tensors.size(), 80u);
  for (const AttentionTensor& a : cap.tensors)
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t q = 0; q < a.n_tokens(); ++q) {
          double s = 0.0;
          for (double v : a.row(l, h, q)) s += v;
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
}

}  // namespace
}  // namespace trojanlens
