//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#include "moldiff/diffusion.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

namespace moldiff {
namespace {

// --- brute-force oracle ------------------------------------------------
// Numerical matrix products over the single-step kernels; no closed forms.

std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b, int K) {
  std::vector<double> c(static_cast<size_t>(K) * K, 0.0);
  for (int i = 0; i < K; ++i) {
    for (int l = 0; l < K; ++l) {
      double v = a[static_cast<size_t>(i) * K + l];
      if (v == 0.0) continue;
      for (int j = 0; j < K; ++j) {
        c[static_cast<size_t>(i) * K + j] += v * b[static_cast<size_t>(l) * K + j];
      }
    }
  }
  return c;
}

std::vector<double> identity(int K) {
  std::vector<double> m(static_cast<size_t>(K) * K, 0.0);
  for (int i = 0; i < K; ++i) m[static_cast<size_t>(i) * K + i] = 1.0;
  return m;
}

// Product Q^{from} Q^{from+1} ... Q^{to} (inclusive); identity if empty.
std::vector<double> kernel_product(const NoiseSchedule& sched, int from, int to, int K, int z) {
  std::vector<double> m = identity(K);
  for (int s = from; s <= to; ++s) {
    m = mat_mul(m, transition_matrix(sched, s, K, z).entries, K);
  }
  return m;
}

// Posterior by explicit Bayes over the numerical kernels, mixed over p̂.
// x_t must be the mask index; non-mask observations are handled by the
// trivial point-mass rule checked separately.
std::vector<double> oracle_posterior(const NoiseSchedule& sched, std::span<const double> p_hat,
                                     int t, int k) {
  const int K_clean = static_cast<int>(p_hat.size());
  const int K = K_clean + 1;
  const int z = K_clean;
  std::vector<double> marg_tk = kernel_product(sched, 1, t - k, K, z);
  std::vector<double> marg_t = kernel_product(sched, 1, t, K, z);
  std::vector<double> jump = kernel_product(sched, t - k + 1, t, K, z);

  std::vector<double> out(static_cast<size_t>(K), 0.0);
  for (int v = 0; v < K_clean; ++v) {
    if (p_hat[static_cast<size_t>(v)] == 0.0) continue;
    double denom = marg_t[static_cast<size_t>(v) * K + z];
    for (int a = 0; a < K; ++a) {
      double num = marg_tk[static_cast<size_t>(v) * K + a] * jump[static_cast<size_t>(a) * K + z];
      out[static_cast<size_t>(a)] += p_hat[static_cast<size_t>(v)] * num / denom;
    }
  }
  return out;
}

std::vector<double> random_dist(Prng& rng, int n) {
  std::vector<double> p(static_cast<size_t>(n));
  double sum = 0.0;
  for (double& x : p) {
    x = rng.next_double() + 1e-3;
    sum += x;
  }
  for (double& x : p) x /= sum;
  return p;
}

// --- schedule -----------------------------------------------------------

TEST(Schedule, BetaEndpointsAndMonotonicity) {
  NoiseSchedule s(10);
  EXPECT_DOUBLE_EQ(s.beta(10), 1.0);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.1);
  for (int t = 2; t <= 10; ++t) EXPECT_GT(s.beta(t), s.beta(t - 1));
  EXPECT_THROW(s.beta(0), StepOutOfRangeError);
  EXPECT_THROW(s.beta(11), StepOutOfRangeError);
  EXPECT_THROW(NoiseSchedule(0), std::invalid_argument);
}

TEST(Schedule, SurvivalMatchesExplicitProduct) {
  Prng rng(11);
  for (int T : {10, 100, 1000}) {
    NoiseSchedule s(T);
    for (int rep = 0; rep < 20; ++rep) {
      int t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(T)));
      double prod = 1.0;
      for (int u = 1; u <= t; ++u) prod *= 1.0 - s.beta(u);
      EXPECT_NEAR(prod, s.survival(t), 1e-12);
      EXPECT_DOUBLE_EQ(s.survival(t), static_cast<double>(T - t) / T);
      EXPECT_DOUBLE_EQ(s.mask_marginal(t), 1.0 - s.survival(t));
    }
  }
}

// --- transition matrices -------------------------------------------------

TEST(Transition, SmallHorizonHandComputed) {
  NoiseSchedule s(4);
  TransitionMatrix q = transition_matrix(s, 1, 3, 2);
  EXPECT_DOUBLE_EQ(q.at(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(q.at(1, 1), 0.75);
  EXPECT_DOUBLE_EQ(q.at(2, 2), 1.0);
  EXPECT_DOUBLE_EQ(q.at(0, 2), 0.25);
  EXPECT_DOUBLE_EQ(q.at(1, 2), 0.25);
  EXPECT_DOUBLE_EQ(q.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(q.at(2, 0), 0.0);
}

TEST(Transition, FinalStepAbsorbsEverything) {
  NoiseSchedule s(7);
  TransitionMatrix q = transition_matrix(s, 7, 4, 0);
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(q.at(i, 0), 1.0);
    for (int j = 1; j < 4; ++j) EXPECT_DOUBLE_EQ(q.at(i, j), i == j && i == 0 ? 1.0 : 0.0);
  }
}

TEST(Transition, RowStochasticAndAbsorbingRow) {
  Prng rng(21);
  for (int rep = 0; rep < 50; ++rep) {
    int T = 1 + static_cast<int>(rng.next_below(200));
    int t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(T)));
    int K = 2 + static_cast<int>(rng.next_below(6));
    int z = static_cast<int>(rng.next_below(static_cast<uint64_t>(K)));
    TransitionMatrix q = transition_matrix(NoiseSchedule(T), t, K, z);
    for (int i = 0; i < K; ++i) {
      double sum = 0.0;
      for (int j = 0; j < K; ++j) sum += q.at(i, j);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (int j = 0; j < K; ++j) EXPECT_DOUBLE_EQ(q.at(z, j), j == z ? 1.0 : 0.0);
  }
  EXPECT_THROW(transition_matrix(NoiseSchedule(5), 6, 3, 0), StepOutOfRangeError);
  EXPECT_THROW(transition_matrix(NoiseSchedule(5), 3, 3, 3), std::out_of_range);
}

TEST(Transition, ProductDiagonalTelescopes) {
  const int T = 17, K = 4, z = 3;
  NoiseSchedule s(T);
  for (int t = 1; t <= T; ++t) {
    std::vector<double> prod = kernel_product(s, 1, t, K, z);
    for (int i = 0; i < K; ++i) {
      if (i == z) continue;
      EXPECT_NEAR(prod[static_cast<size_t>(i) * K + i], static_cast<double>(T - t) / T, 1e-12);
      EXPECT_NEAR(prod[static_cast<size_t>(i) * K + z], static_cast<double>(t) / T, 1e-12);
    }
  }
}

// --- posterior ------------------------------------------------------------

TEST(Posterior, MatchesBruteForceOracle) {
  Prng rng(31);
  for (int t = 1; t <= 12; ++t) {
    NoiseSchedule s(t + 3);
    for (int k = 1; k <= t; ++k) {
      for (int K_clean = 1; K_clean <= 4; ++K_clean) {
        for (int rep = 0; rep < 5; ++rep) {
          std::vector<double> p_hat = random_dist(rng, K_clean);
          std::vector<double> got = posterior(K_clean, p_hat, t, k);
          std::vector<double> want = oracle_posterior(s, p_hat, t, k);
          ASSERT_EQ(got.size(), want.size());
          for (size_t i = 0; i < got.size(); ++i) {
            ASSERT_NEAR(got[i], want[i], 1e-12)
                << "t=" << t << " k=" << k << " K=" << K_clean << " i=" << i;
          }
        }
      }
    }
  }
}

TEST(Posterior, OneHotExample) {
  std::vector<double> p_hat = {0.0, 1.0, 0.0};
  std::vector<double> post = posterior(3, p_hat, 5, 1);
  EXPECT_DOUBLE_EQ(post[1], 0.2);
  EXPECT_DOUBLE_EQ(post[3], 0.8);
  EXPECT_DOUBLE_EQ(post[0], 0.0);
  EXPECT_DOUBLE_EQ(post[2], 0.0);
}

TEST(Posterior, ObservedCategoryStaysPut) {
  std::vector<double> p_hat = {0.3, 0.3, 0.4};
  for (int t : {1, 7, 100}) {
    std::vector<double> post = posterior(0, p_hat, t, 1);
    EXPECT_DOUBLE_EQ(post[0], 1.0);
    EXPECT_DOUBLE_EQ(post[1] + post[2] + post[3], 0.0);
  }
}

TEST(Posterior, FinalJumpEqualsPHat) {
  std::vector<double> p_hat = {0.5, 0.25, 0.25};
  std::vector<double> post = posterior(3, p_hat, 9, 9);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(post[static_cast<size_t>(j)], p_hat[static_cast<size_t>(j)]);
  EXPECT_DOUBLE_EQ(post[3], 0.0);
}

TEST(Posterior, StrideErrors) {
  std::vector<double> p_hat = {1.0};
  EXPECT_THROW(posterior(1, p_hat, 3, 4), StrideTooLargeError);
  EXPECT_THROW(posterior(1, p_hat, 3, 0), StrideTooLargeError);
  EXPECT_NO_THROW(posterior(1, p_hat, 3, 3));
}

// --- top-k -----------------------------------------------------------------

TEST(TopK, TruncatesAndRenormalizes) {
  std::vector<double> p = {0.1, 0.4, 0.3, 0.2};
  std::vector<double> out = truncate_topk(p, 2);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[3], 0.0);
  EXPECT_NEAR(out[1], 0.4 / 0.7, 1e-15);
  EXPECT_NEAR(out[2], 0.3 / 0.7, 1e-15);
}

TEST(TopK, FullWidthIsIdentity) {
  std::vector<double> p = {0.1, 0.4, 0.3, 0.2};
  for (int top_k : {4, 9}) {
    std::vector<double> out = truncate_topk(p, top_k);
    for (size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(out[i], p[i]);
  }
}

TEST(TopK, ArgmaxAndTies) {
  std::vector<double> p = {0.1, 0.4, 0.3, 0.2};
  std::vector<double> one = truncate_topk(p, 1);
  EXPECT_DOUBLE_EQ(one[1], 1.0);

  std::vector<double> flat = {0.25, 0.25, 0.25, 0.25};
  std::vector<double> two = truncate_topk(flat, 2);
  EXPECT_DOUBLE_EQ(two[0], 0.5);  // ties keep the lowest indices
  EXPECT_DOUBLE_EQ(two[1], 0.5);
  EXPECT_DOUBLE_EQ(two[2], 0.0);
}

// --- forward corruption ------------------------------------------------------

TEST(Forward, FinalStepMasksEverything) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  MolGraph g = parse_smiles("CCO");
  TokenSequence clean = encode_instance(v, "x", nullptr, &g, 4);
  NoiseSchedule s(50);
  Prng rng(5);
  TokenSequence out = forward_sample(v, clean, s, 50, rng);
  for (int slot : out.tgt_slots) {
    EXPECT_EQ(out.token_ids[static_cast<size_t>(slot)], v.mask_id());
  }
  for (int i = 0; i < out.m; ++i) {
    for (int j = 0; j < out.m; ++j) {
      EXPECT_EQ(out.tgt_edge(i, j), i == j ? 0 : kEdgeMaskIndex);
    }
  }
}

TEST(Forward, NeverTouchesTextOrSource) {
  Vocabulary v = Vocabulary::build({"replace the oxygen"}, 1);
  MolGraph src = parse_smiles("CCO");
  MolGraph tgt = parse_smiles("CCN");
  TokenSequence clean = encode_instance(v, "replace the oxygen", &src, &tgt, 5);
  NoiseSchedule s(10);
  Prng rng(7);
  for (int t = 1; t <= 10; ++t) {
    TokenSequence out = forward_sample(v, clean, s, t, rng);
    for (int p = 0; p < clean.length(); ++p) {
      if (clean.segment_tags[static_cast<size_t>(p)] != SegmentTag::TargetGraph) {
        EXPECT_EQ(out.token_ids[static_cast<size_t>(p)], clean.token_ids[static_cast<size_t>(p)]);
      }
    }
    EXPECT_EQ(out.src_edges, clean.src_edges);
    for (int i = 0; i < out.m; ++i) {
      EXPECT_EQ(out.tgt_edge(i, i), 0);
      for (int j = 0; j < out.m; ++j) EXPECT_EQ(out.tgt_edge(i, j), out.tgt_edge(j, i));
    }
  }
}

TEST(Forward, MarginalMatchesClosedForm) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  MolGraph g = parse_smiles("C");
  TokenSequence clean = encode_instance(v, "x", nullptr, &g, 1);
  NoiseSchedule s(100);
  Prng rng(1234);
  const int trials = 10000;
  int masked = 0;
  for (int n = 0; n < trials; ++n) {
    TokenSequence out = forward_sample(v, clean, s, 37, rng);
    if (out.token_ids[static_cast<size_t>(out.tgt_slots[0])] == v.mask_id()) ++masked;
  }
  double rate = static_cast<double>(masked) / trials;
  EXPECT_NEAR(rate, 0.37, 0.015);
}

// --- reverse step --------------------------------------------------------------

CleanPrediction uniform_prediction(const Vocabulary& v, int m) {
  CleanPrediction p;
  p.m = m;
  p.num_node_cats = v.num_node_categories();
  p.node_probs.assign(static_cast<size_t>(m) * p.num_node_cats, 1.0 / p.num_node_cats);
  p.edge_probs.assign(static_cast<size_t>(m) * m * kNumBondCats, 1.0 / kNumBondCats);
  return p;
}

TEST(Reverse, CopiesUnmaskedAndStaysSymmetric) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  MolGraph g = parse_smiles("CCO");
  TokenSequence clean = encode_instance(v, "x", nullptr, &g, 3);
  NoiseSchedule s(20);
  Prng rng(42);
  TokenSequence noised = forward_sample(v, clean, s, 12, rng);
  CleanPrediction pred = uniform_prediction(v, 3);
  TokenSequence out = reverse_step(v, noised, pred, s, 12, 4, 1000, rng);
  for (size_t i = 0; i < noised.tgt_slots.size(); ++i) {
    int slot = noised.tgt_slots[i];
    if (noised.token_ids[static_cast<size_t>(slot)] != v.mask_id()) {
      EXPECT_EQ(out.token_ids[static_cast<size_t>(slot)],
                noised.token_ids[static_cast<size_t>(slot)]);
    }
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (noised.tgt_edge(i, j) != kEdgeMaskIndex) {
        EXPECT_EQ(out.tgt_edge(i, j), noised.tgt_edge(i, j));
      }
      EXPECT_EQ(out.tgt_edge(i, j), out.tgt_edge(j, i));
    }
  }
}

TEST(Reverse, ShapeMismatchRejected) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  TokenSequence seq = encode_instance(v, "x", nullptr, nullptr, 3);
  NoiseSchedule s(20);
  Prng rng(1);
  CleanPrediction pred = uniform_prediction(v, 2);  // wrong m
  EXPECT_THROW(reverse_step(v, seq, pred, s, 10, 1, 5, rng), ShapeMismatchError);
  CleanPrediction bad = uniform_prediction(v, 3);
  bad.node_probs.pop_back();
  EXPECT_THROW(reverse_step(v, seq, bad, s, 10, 1, 5, rng), ShapeMismatchError);
}

TEST(Reverse, TopOneFinalJumpIsArgmaxDecode) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  TokenSequence seq = encode_instance(v, "x", nullptr, nullptr, 2);
  NoiseSchedule s(100);
  CleanPrediction pred = uniform_prediction(v, 2);
  int c_cat = v.table().find("C");
  int o_cat = v.table().find("O");
  for (int i = 0; i < 2; ++i) {
    for (int c = 0; c < pred.num_node_cats; ++c) {
      pred.node_probs[static_cast<size_t>(i) * pred.num_node_cats + c] =
          (c == (i == 0 ? c_cat : o_cat)) ? 0.9 : 0.1 / (pred.num_node_cats - 1);
    }
  }
  for (int c = 0; c < kNumBondCats; ++c) {
    double p = c == edge_category(BondCat::Single) ? 0.6 : 0.1;
    pred.edge_probs[(0 * 2 + 1) * kNumBondCats + c] = p;
    pred.edge_probs[(1 * 2 + 0) * kNumBondCats + c] = p;
  }
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Prng rng(seed);
    TokenSequence out = reverse_step(v, seq, pred, s, 100, 100, 1, rng);
    EXPECT_EQ(out.token_ids[static_cast<size_t>(out.tgt_slots[0])], v.node_id(c_cat));
    EXPECT_EQ(out.token_ids[static_cast<size_t>(out.tgt_slots[1])], v.node_id(o_cat));
    EXPECT_EQ(out.tgt_edge(0, 1), edge_category(BondCat::Single));
  }
}

TEST(Reverse, FullWidthTopKMatchesExactPosterior) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  TokenSequence seq = encode_instance(v, "x", nullptr, nullptr, 1);
  NoiseSchedule s(10);
  Prng rng(77);
  CleanPrediction pred = uniform_prediction(v, 1);
  const int K = pred.num_node_cats;
  Prng mix(3);
  std::vector<double> p_hat = random_dist(mix, K);
  for (int c = 0; c < K; ++c) pred.node_probs[static_cast<size_t>(c)] = p_hat[static_cast<size_t>(c)];

  const int t = 10, k = 3, trials = 20000;
  std::vector<double> want = posterior(K, p_hat, t, k);
  std::vector<int> counts(static_cast<size_t>(K) + 1, 0);
  for (int n = 0; n < trials; ++n) {
    TokenSequence out = reverse_step(v, seq, pred, s, t, k, K, rng);
    int id = out.token_ids[static_cast<size_t>(out.tgt_slots[0])];
    int cat = id == v.mask_id() ? K : id - v.first_node_id();
    ++counts[static_cast<size_t>(cat)];
  }
  double tv = 0.0;
  for (int c = 0; c <= K; ++c) {
    tv += std::abs(static_cast<double>(counts[static_cast<size_t>(c)]) / trials -
                   want[static_cast<size_t>(c)]);
  }
  EXPECT_LT(tv / 2.0, 0.03);
}

// --- full chain -------------------------------------------------------------------

TEST(Chain, TerminatesWithNoResidualMask) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  NoiseSchedule s(1000);
  for (int steps : {1, 10, 100, 1000}) {
    TokenSequence seq = encode_instance(v, "x", nullptr, nullptr, 4);
    int calls = 0;
    DenoiserFn fn = [&](const TokenSequence& q) {
      ++calls;
      return uniform_prediction(v, q.m);
    };
    Prng rng(static_cast<uint64_t>(steps));
    TokenSequence out = run_reverse_chain(v, fn, seq, s, steps, 15, rng);
    EXPECT_EQ(calls, steps);
    for (int slot : out.tgt_slots) {
      EXPECT_NE(out.token_ids[static_cast<size_t>(slot)], v.mask_id());
    }
    for (int i = 0; i < out.m; ++i) {
      for (int j = 0; j < out.m; ++j) {
        EXPECT_NE(out.tgt_edge(i, j), kEdgeMaskIndex);
        EXPECT_EQ(out.tgt_edge(i, j), out.tgt_edge(j, i));
      }
    }
  }
  Prng overflow_rng(1);
  EXPECT_THROW(run_reverse_chain(
                   v, [&](const TokenSequence& q) { return uniform_prediction(v, q.m); },
                   encode_instance(v, "x", nullptr, nullptr, 2), s, 1001, 15, overflow_rng),
               StepOutOfRangeError);
}

TEST(Chain, SingleStepEqualsDirectTopKSampling) {
  // With steps=1 the lone jump has k=t=T, so the chain must consume the
  // random stream exactly like direct sampling from the truncated p̂.
  Vocabulary v = Vocabulary::build({"x"}, 1);
  NoiseSchedule s(1000);
  const int m = 3, top_k = 2;
  CleanPrediction pred = uniform_prediction(v, m);
  Prng mix(9);
  for (int i = 0; i < m; ++i) {
    std::vector<double> row = random_dist(mix, pred.num_node_cats);
    for (int c = 0; c < pred.num_node_cats; ++c) {
      pred.node_probs[static_cast<size_t>(i) * pred.num_node_cats + c] = row[static_cast<size_t>(c)];
    }
  }
  DenoiserFn fn = [&](const TokenSequence&) { return pred; };

  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Prng chain_rng(seed);
    TokenSequence out = run_reverse_chain(v, fn, encode_instance(v, "x", nullptr, nullptr, m),
                                          s, 1, top_k, chain_rng);

    Prng direct_rng(seed);
    for (int i = 0; i < m; ++i) {
      std::vector<double> trunc = truncate_topk(pred.node_row(i), top_k);
      int cat = direct_rng.categorical(trunc);
      EXPECT_EQ(out.token_ids[static_cast<size_t>(out.tgt_slots[static_cast<size_t>(i)])],
                v.first_node_id() + cat);
    }
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        std::vector<double> trunc = truncate_topk(pred.edge_row(i, j), top_k);
        int cat = direct_rng.categorical(trunc);
        EXPECT_EQ(out.tgt_edge(i, j), cat);
      }
    }
  }
}

TEST(Chain, SampleDecodesAMolecule) {
  Vocabulary v = Vocabulary::build({"x"}, 1);
  NoiseSchedule s(100);
  const int m = 3;
  // Stub strongly prefers carbon nodes and single bonds: the decoded
  // graph is almost surely a small alkane fragment.
  CleanPrediction pred;
  pred.m = m;
  pred.num_node_cats = v.num_node_categories();
  pred.node_probs.assign(static_cast<size_t>(m) * pred.num_node_cats, 0.0);
  int c_cat = v.table().find("C");
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < pred.num_node_cats; ++c) {
      pred.node_probs[static_cast<size_t>(i) * pred.num_node_cats + c] =
          c == c_cat ? 0.99 : 0.01 / (pred.num_node_cats - 1);
    }
  }
  pred.edge_probs.assign(static_cast<size_t>(m) * m * kNumBondCats, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      for (int c = 0; c < kNumBondCats; ++c) {
        double p = c == edge_category(BondCat::Single) ? 0.95 : 0.05 / (kNumBondCats - 1);
        pred.edge_probs[(static_cast<size_t>(i) * m + j) * kNumBondCats + c] = p;
      }
    }
  }
  DenoiserFn fn = [&](const TokenSequence&) { return pred; };
  Prng rng(2024);
  MolGraph g = sample(v, fn, encode_instance(v, "x", nullptr, nullptr, m), s, 10, 1, rng);
  EXPECT_GE(g.size(), 1);
  EXPECT_LE(g.size(), m);
  EXPECT_EQ(g.atom_kind(0).symbol, "C");
}

}  // namespace
}  // namespace moldiff
