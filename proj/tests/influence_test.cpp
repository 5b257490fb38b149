#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "cram/errors.hpp"
#include "cram/influence.hpp"
#include "cram/tensor.hpp"
#include "test_support.hpp"

using namespace cram;
using cram::testing::ToySetup;

namespace {

// Brute-force IE: two full forwards per (instance, head), with the blackout
// mask built straight from document kinds and the log-probability taken from
// raw logits.
double oracle_logprob(const Model& m, const std::vector<TokenId>& ctx, const std::vector<TokenId>& ans,
                      const ModificationPlan* plan) {
  std::vector<TokenId> seq = ctx;
  seq.insert(seq.end(), ans.begin(), ans.end() - 1);
  std::optional<ModificationPlan> ext;
  if (plan) {
    ext = *plan;
    ext->mask.values.resize(seq.size(), 1.0);
  }
  const ForwardOutput out = forward(m, seq, ext ? &*ext : nullptr);
  double lp = 0.0;
  for (std::size_t i = 0; i < ans.size(); ++i) {
    const double* row = out.logits.row(ctx.size() - 1 + i);
    double mx = row[0];
    for (std::size_t c = 1; c < out.logits.cols(); ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < out.logits.cols(); ++c) z += std::exp(row[c] - mx);
    lp += row[ans[i]] - mx - std::log(z);
  }
  return lp;
}

std::vector<double> oracle_mean_ie(const ToySetup& s, const std::vector<QAInstance>& set) {
  const ModelConfig& c = s.model.config();
  std::vector<double> mean(c.total_heads(), 0.0);
  for (const QAInstance& q : set) {
    const std::vector<TokenId> ctx = assemble_prompt(s.vocab, q).tokens;
    const std::vector<TokenId> wrong = s.vocab.tokenize(q.wrong_answer);
    CredibilityMask mask = CredibilityMask::ones(ctx.size());
    for (std::size_t d = 0; d < q.documents.size(); ++d) {
      if (!is_misinformation(q.documents[d].kind)) continue;
      for (std::size_t t = q.token_spans[d].begin; t < q.token_spans[d].end; ++t) mask.values[t] = 0.0;
    }
    const double p0 = std::exp(oracle_logprob(s.model, ctx, wrong, nullptr));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        ModificationPlan plan{{HeadId{l, h}}, mask};
        const double p1 = std::exp(oracle_logprob(s.model, ctx, wrong, &plan));
        mean[l * c.n_heads + h] += (p0 - p1) / static_cast<double>(set.size());
      }
    }
  }
  return mean;
}

IeTable table_of(std::vector<double> ies) {
  IeTable t;
  for (std::size_t i = 0; i < ies.size(); ++i) t.entries.push_back({{i / 2, i % 2}, ies[i], 1});
  return t;
}

}  // namespace

TEST(ComputeIe, RequiresMisinformation) {
  ToySetup s;
  const auto clean = s.instances(1, 0);
  EXPECT_THROW(compute_ie(s.model, s.vocab, clean[0], {0, 0}), InstanceError);
  EXPECT_THROW(compute_ie_table(s.model, s.vocab, clean), InstanceError);
}

TEST(ComputeIe, DifferenceOfProbabilities) {
  ToySetup s;
  const auto set = s.instances(1);
  const IeResult r = compute_ie(s.model, s.vocab, set[0], {1, 0});
  EXPECT_GT(r.p0, 0.0);
  EXPECT_LT(r.p0, 1.0);
  EXPECT_EQ(r.ie, r.p0 - r.p1);
  EXPECT_GE(r.ie, -1.0);
  EXPECT_LE(r.ie, 1.0);
}

TEST(ComputeIe, IdentityMaskGivesZero) {
  ToySetup s;
  // Every document is misinformation, so the blackout scores are uniform and
  // normalize to an all-ones mask.
  const auto set = s.instances(2, 2, 9, 0);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_NEAR(compute_ie(s.model, s.vocab, set[0], {l, h}).ie, 0.0, 1e-9);
    }
  }
}

TEST(ComputeIeTable, MatchesBruteForceOracle) {
  ToySetup s;
  const auto set = s.instances(3);
  const IeTable t = compute_ie_table(s.model, s.vocab, set);
  const std::vector<double> oracle = oracle_mean_ie(s, set);
  ASSERT_EQ(t.entries.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(t.entries[j].mean_ie, oracle[j], 1e-8);
    EXPECT_EQ(t.entries[j].n_instances, 3u);
  }
}

TEST(ComputeIeTable, SingleAndDuplicatedInstance) {
  ToySetup s;
  const auto one = s.instances(1);
  const IeTable t1 = compute_ie_table(s.model, s.vocab, one);
  for (const IeEntry& e : t1.entries) {
    EXPECT_EQ(e.mean_ie, compute_ie(s.model, s.vocab, one[0], e.head).ie);
  }
  const std::vector<QAInstance> two{one[0], one[0]};
  const IeTable t2 = compute_ie_table(s.model, s.vocab, two);
  for (std::size_t j = 0; j < t1.entries.size(); ++j) {
    EXPECT_EQ(t2.entries[j].mean_ie, t1.entries[j].mean_ie);
  }
}

TEST(ComputeIeTable, ParallelMatchesSerialAcrossThreadCounts) {
  ToySetup s(2, 4, 16);
  const auto set = s.instances(5, 2);
  const IeTable ref = serial::compute_ie_table(s.model, s.vocab, set, true);
  for (int threads : {1, 2, 4}) {
    kernels::set_max_threads(threads);
    EXPECT_EQ(compute_ie_table(s.model, s.vocab, set, true), ref);
  }
  kernels::set_max_threads(0);
  ASSERT_EQ(ref.per_instance.size(), 5u);
  EXPECT_EQ(ref.per_instance[0].size(), 8u);
}

TEST(RankHeads, DescendingWithIndexTieBreak) {
  IeTable t;
  t.entries = {{{0, 0}, 0.2, 1}, {{0, 1}, 0.5, 1}};
  EXPECT_EQ(rank_heads(t), (std::vector<HeadId>{{0, 1}, {0, 0}}));
  const IeTable flat = table_of({0.1, 0.1, 0.1, 0.1});
  EXPECT_EQ(rank_heads(flat), (std::vector<HeadId>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
}

TEST(RankHeads, InsertionOrderIrrelevant) {
  IeTable t = table_of({0.3, -0.1, 0.3, 0.7, 0.0, 0.2});
  const auto expected = rank_heads(t);
  std::mt19937 rng(4);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(t.entries.begin(), t.entries.end(), rng);
    EXPECT_EQ(rank_heads(t), expected);
  }
  EXPECT_EQ(expected.front(), (HeadId{1, 1}));
}

TEST(Selection, CandidateCounts) {
  const auto grid = default_multiplier_grid();
  EXPECT_EQ(candidate_counts(50, grid, 100),
            (std::vector<std::size_t>{1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100}));
  EXPECT_EQ(candidate_counts(50, grid, 64), (std::vector<std::size_t>{1, 10, 20, 30, 40, 50, 60, 64}));
  EXPECT_EQ(candidate_counts(1, grid, 32), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(candidate_counts(3, grid, 32), (std::vector<std::size_t>{1, 2, 3, 4, 5, 6}));
}

TEST(Selection, NoPositiveHeadIsSelectionError) {
  ToySetup s;
  const auto val = s.instances(2);
  EXPECT_THROW(select_head_count(s.model, s.vocab, table_of({0.0, -0.1, -0.2, 0.0}), val,
                                 default_multiplier_grid()),
               SelectionError);
}

TEST(Selection, TiesPreferSmallerK) {
  ToySetup s;
  // An untrained model scores zero EM for every candidate, so the smallest k wins.
  const auto val = s.instances(3);
  const HeadSelection sel =
      select_head_count(s.model, s.vocab, table_of({0.4, 0.3, 0.2, 0.1}), val, default_multiplier_grid());
  EXPECT_EQ(sel.m_pos, 4u);
  ASSERT_GE(sel.candidates.size(), 2u);
  for (const CandidateScore& c : sel.candidates) {
    EXPECT_EQ(c.em, sel.candidates.front().em);
    EXPECT_EQ(c.f1, sel.candidates.front().f1);
  }
  EXPECT_EQ(sel.k, 1u);
  EXPECT_EQ(sel.heads, (std::vector<HeadId>{{0, 0}}));
}

TEST(Export, CsvRowsAndDeterminism) {
  const IeTable t = table_of({0.25, -0.5, 1e-3, 0.0});
  const std::string a = cram::testing::temp_path("ie_a.csv"), b = cram::testing::temp_path("ie_b.csv");
  export_ie_distribution(t, a);
  export_ie_distribution(t, b);
  const std::string text = cram::testing::slurp(a);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
  EXPECT_EQ(text.substr(0, text.find('\n')), "layer,head,mean_ie,n_instances");
  EXPECT_EQ(text, cram::testing::slurp(b));
  EXPECT_THROW(export_ie_distribution(t, ""), IoError);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(HeadSet, JsonRoundTrip) {
  HeadSelection sel;
  sel.heads = {{1, 0}, {0, 1}};
  sel.k = 2;
  sel.m_pos = 3;
  sel.multiplier_grid = default_multiplier_grid();
  const std::string p = cram::testing::temp_path("heads.json");
  write_head_selection(sel, p);
  const HeadSelection back = read_head_selection(p);
  EXPECT_EQ(back.heads, sel.heads);
  EXPECT_EQ(back.k, 2u);
  EXPECT_EQ(back.m_pos, 3u);
  EXPECT_EQ(back.multiplier_grid, sel.multiplier_grid);
  std::filesystem::remove(p);
}
