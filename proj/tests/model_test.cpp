#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cram/errors.hpp"
#include "cram/model.hpp"
#include "cram/train.hpp"

namespace cram {
namespace {

ModelConfig tiny_config() {
  return {.n_layers = 1, .n_heads = 2, .d_model = 8, .d_k = 4, .d_v = 4, .d_ff = 16,
          .vocab_size = 12, .max_seq_len = 32, .seed = 3};
}

ModelConfig small_config() {
  return {.n_layers = 2, .n_heads = 2, .d_model = 16, .d_k = 8, .d_v = 8, .d_ff = 32,
          .vocab_size = 20, .max_seq_len = 32, .seed = 5};
}

// Init weights are small enough that attention is nearly uniform; widen them
// so the check exercises non-trivial softmax and GELU regions.
Model sharpened(ModelConfig c, double scale) {
  Model m = init_model(c);
  for (double& p : m.mutable_params()) p *= scale;
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

TEST(GradCheck, OneLayerDModel8) {
  const Model m = init_model(tiny_config());
  const TrainingExample ex{{1, 4, 2, 7, 3}, {5, 9}, {}};
  const auto r = grad_check(m, ex, 1e-4);
  EXPECT_GT(r.n_checked, 0u);
  EXPECT_LE(r.max_relative_error, 1e-4) << "worst tensor " << r.worst_tensor;
}

TEST(GradCheck, SharpenedWeightsAndGappedPositions) {
  const Model m = sharpened(tiny_config(), 4.0);
  const TrainingExample ex{{1, 4, 2, 7, 3}, {5, 9}, {0, 1, 2, 9, 10, 11}};
  const auto r = grad_check(m, ex, 1e-4, 10, 7);
  EXPECT_LE(r.max_relative_error, 1e-4) << "worst tensor " << r.worst_tensor;
}

TEST(GradCheck, RejectsEpsilonOutOfRange) {
  const Model m = init_model(tiny_config());
  const TrainingExample ex{{1, 4}, {5}, {}};
  EXPECT_THROW(grad_check(m, ex, 1e-1), ConfigError);
}

TEST(Model, InitIsDeterministicInSeed) {
  auto c = small_config();
  EXPECT_EQ(init_model(c).checksum(), init_model(c).checksum());
  c.seed = 6;
  EXPECT_NE(init_model(c).checksum(), init_model(small_config()).checksum());
}

TEST(Model, ForwardShapeAndCausality) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> a{1, 5, 6, 7, 8, 9};
  std::vector<TokenId> b = a;
  b.back() = 13;
  const auto fa = forward(m, a);
  const auto fb = forward(m, b);
  ASSERT_EQ(fa.logits.rows(), a.size());
  ASSERT_EQ(fa.logits.cols(), 20u);
  for (std::size_t i = 0; i + 1 < a.size(); ++i)
    for (std::size_t j = 0; j < 20; ++j) EXPECT_EQ(fa.logits(i, j), fb.logits(i, j));
}

TEST(Model, AllOnesPlanIsIdentity) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> t{1, 5, 6, 2, 7, 8, 2, 9};
  ModificationPlan plan{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}, CredibilityMask::ones(t.size())};
  EXPECT_LE(max_abs_diff(forward(m, t).logits, forward(m, t, &plan).logits), 1e-12);
}

TEST(Model, CapturedAttentionIsCausalAndStochastic) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> t{1, 5, 6, 2, 7, 8, 2, 9};
  const auto out = forward(m, t, nullptr, true);
  ASSERT_EQ(out.attention.size(), 4u);
  for (const auto& [head, a] : out.attention) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (j > i) EXPECT_EQ(a(i, j), 0.0);
        EXPECT_GE(a(i, j), 0.0);
        sum += a(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Model, BlackoutColumnsCarryNoAttention) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> t{1, 5, 6, 2, 7, 8, 2, 9, 3};
  CredibilityMask mask = CredibilityMask::ones(t.size());
  mask.values[4] = mask.values[5] = 0.0;
  ModificationPlan plan{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}, mask};
  const auto out = forward(m, t, &plan, true);
  for (const auto& [head, a] : out.attention)
    for (std::size_t i = 0; i < t.size(); ++i) {
      // Rows that only see blacked-out or no keys fall back to the raw row.
      if (i < 4) continue;
      EXPECT_EQ(a(i, 4), 0.0);
      EXPECT_EQ(a(i, 5), 0.0);
    }
}

TEST(Model, PlanValidation) {
  const Model m = init_model(small_config());
  const std::vector<TokenId> t{1, 5, 6};
  ModificationPlan bad_head{{{2, 0}}, CredibilityMask::ones(3)};
  EXPECT_THROW(forward(m, t, &bad_head), PlanError);
  ModificationPlan short_mask{{{0, 0}}, CredibilityMask::ones(2)};
  EXPECT_THROW(forward(m, t, &short_mask), DimensionError);
}

TEST(Model, SequenceTooLongThrows) {
  const Model m = init_model(small_config());
  const std::vector<TokenId> t(33, 5);
  EXPECT_THROW(forward(m, t), DimensionError);
}

TEST(Model, SequenceLogprobMatchesForwardLogits) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> ctx{1, 5, 6, 2, 7};
  const std::vector<TokenId> ans{9, 4};
  std::vector<TokenId> all = ctx;
  all.insert(all.end(), ans.begin(), ans.end());
  const auto out = forward(m, all);
  double expected = 0.0;
  for (std::size_t k = 0; k < ans.size(); ++k) {
    const std::size_t row = ctx.size() - 1 + k;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < 20; ++j) mx = std::max(mx, out.logits(row, j));
    double z = 0.0;
    for (std::size_t j = 0; j < 20; ++j) z += std::exp(out.logits(row, j) - mx);
    expected += out.logits(row, ans[k]) - mx - std::log(z);
  }
  EXPECT_NEAR(sequence_logprob(m, ctx, ans), expected, 1e-10);
}

TEST(Model, ExplicitContiguousPositionsMatchDefault) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> t{1, 5, 6, 2, 7};
  std::vector<std::size_t> pos(t.size());
  std::iota(pos.begin(), pos.end(), 0);
  detail::ForwardCache a, b;
  detail::forward_cached(m, t, nullptr, 0, a);
  detail::forward_cached(m, t, nullptr, 0, b, pos);
  EXPECT_EQ(max_abs_diff(a.logits, b.logits), 0.0);

  pos[3] = 20;
  pos[4] = 21;
  detail::ForwardCache c;
  detail::forward_cached(m, t, nullptr, 0, c, pos);
  EXPECT_GT(max_abs_diff(a.logits, c.logits), 0.0);

  pos[4] = 32;
  EXPECT_THROW(detail::forward_cached(m, t, nullptr, 0, c, pos), DimensionError);
  EXPECT_THROW(detail::forward_cached(m, t, nullptr, 0, c, std::span(pos).first(3)), DimensionError);
}

TEST(Model, GreedyDecodeMatchesArgmaxAndRespectsCap) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> ctx{1, 5, 6, 2, 7};
  const auto out = greedy_decode(m, ctx, nullptr, 3);
  ASSERT_EQ(out.size(), 3u);
  std::vector<TokenId> seq = ctx;
  for (TokenId tok : out) {
    const auto f = forward(m, seq);
    TokenId best = 0;
    for (std::size_t j = 1; j < 20; ++j)
      if (f.logits(seq.size() - 1, j) > f.logits(seq.size() - 1, best)) best = static_cast<TokenId>(j);
    EXPECT_EQ(tok, best);
    seq.push_back(tok);
  }
  const auto stopped = greedy_decode(m, ctx, nullptr, 3, out[0]);
  EXPECT_TRUE(stopped.empty());
}

TEST(Model, CachedDecodeMatchesFullRecomputeUnderPlan) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> ctx{1, 5, 6, 2, 7, 8, 2, 9, 3};
  CredibilityMask mask = CredibilityMask::ones(ctx.size());
  mask.values[4] = 0.0;
  mask.values[5] = 0.25;
  const ModificationPlan plan{{{0, 1}, {1, 0}}, mask};
  const auto out = greedy_decode(m, ctx, &plan, 6);
  ASSERT_EQ(out.size(), 6u);
  std::vector<TokenId> seq = ctx;
  for (TokenId tok : out) {
    ModificationPlan full = plan;
    full.mask.values.resize(seq.size(), 1.0);
    const auto f = forward(m, seq, &full);
    TokenId best = 0;
    for (std::size_t j = 1; j < 20; ++j)
      if (f.logits(seq.size() - 1, j) > f.logits(seq.size() - 1, best)) best = static_cast<TokenId>(j);
    EXPECT_EQ(tok, best);
    seq.push_back(tok);
  }
}

TEST(Model, DecodeStopsAtMaxSeqLen) {
  const Model m = sharpened(small_config(), 5.0);
  const std::vector<TokenId> ctx(30, 5);
  EXPECT_EQ(greedy_decode(m, ctx, nullptr, 10).size(), 3u);
}

TEST(Model, ChecksumTracksParameters) {
  Model m = init_model(small_config());
  const auto before = m.checksum();
  m.mutable_params()[0] += 1e-9;
  EXPECT_NE(m.checksum(), before);
  EXPECT_TRUE(m.all_finite());
  m.mutable_params()[1] = NAN;
  EXPECT_FALSE(m.all_finite());
}

}  // namespace
}  // namespace cram
