//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moldiff/errors.hpp"
#include "moldiff/rng.hpp"
#include "moldiff/vocab.hpp"

namespace moldiff {

// ---------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------

class StepOutOfRangeError : public std::out_of_range {
 public:
  StepOutOfRangeError(int t, int T)
      : std::out_of_range("diffusion step " + std::to_string(t) + " outside 1.." +
                          std::to_string(T)) {}
};

class StrideTooLargeError : public std::invalid_argument {
 public:
  StrideTooLargeError(int k, int t)
      : std::invalid_argument("stride " + std::to_string(k) + " exceeds current step " +
                              std::to_string(t)) {}
};

// ---------------------------------------------------------------------
// Noise schedule: beta(t) = 1/(T-t+1). The survival product
// Π_{s≤t}(1-beta(s)) telescopes to (T-t)/T, so the chance a position is
// still unmasked after t steps is exactly 1 - t/T.
// ---------------------------------------------------------------------

struct NoiseSchedule {
  int T;

  explicit NoiseSchedule(int horizon) : T(horizon) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: horizon must be positive");
  }

  double beta(int t) const {
    check_step(t);
    return 1.0 / static_cast<double>(T - t + 1);
  }

  // Closed form of the survival product; exact in floating point.
  double survival(int t) const {
    if (t < 0 || t > T) throw StepOutOfRangeError(t, T);
    return static_cast<double>(T - t) / static_cast<double>(T);
  }

  double mask_marginal(int t) const { return 1.0 - survival(t); }

  void check_step(int t) const {
    if (t < 1 || t > T) throw StepOutOfRangeError(t, T);
  }
};

// ---------------------------------------------------------------------
// Single-step transition matrix over K categories with absorbing index z.
// ---------------------------------------------------------------------

struct TransitionMatrix {
  int K;
  int z;
  std::vector<double> entries;  // row-major K×K

  double at(int i, int j) const { return entries[static_cast<size_t>(i) * K + j]; }
};

inline TransitionMatrix transition_matrix(const NoiseSchedule& sched, int t, int K, int z) {
  sched.check_step(t);
  if (z < 0 || z >= K) throw std::out_of_range("transition_matrix: mask index outside vocab");
  TransitionMatrix q{K, z, std::vector<double>(static_cast<size_t>(K) * K, 0.0)};
  double b = sched.beta(t);
  for (int i = 0; i < K; ++i) {
    if (i == z) {
      q.entries[static_cast<size_t>(i) * K + z] = 1.0;
    } else {
      q.entries[static_cast<size_t>(i) * K + i] = 1.0 - b;
      q.entries[static_cast<size_t>(i) * K + z] = b;
    }
  }
  return q;
}

// ---------------------------------------------------------------------
// Forward corruption: sample the step-t marginal directly. Each target
// node and each unordered target edge pair is independently masked with
// probability t/T; text and source segments are never touched. Draw
// order (nodes in slot order, then edges in upper-triangle row-major
// order) is part of the contract: resumable training replays streams.
// ---------------------------------------------------------------------

inline TokenSequence forward_sample(const Vocabulary& vocab, const TokenSequence& clean,
                                    const NoiseSchedule& sched, int t, Prng& rng) {
  sched.check_step(t);
  TokenSequence seq = clean;
  const double p = sched.mask_marginal(t);
  for (int slot : seq.tgt_slots) {
    if (rng.bernoulli(p)) seq.token_ids[static_cast<size_t>(slot)] = vocab.mask_id();
  }
  for (int i = 0; i < seq.m; ++i) {
    for (int j = i + 1; j < seq.m; ++j) {
      if (rng.bernoulli(p)) seq.set_tgt_edge(i, j, kEdgeMaskIndex);
    }
  }
  return seq;
}

// ---------------------------------------------------------------------
// x0-parameterized posterior for a jump of k steps, from t to t-k.
//
// p_hat is a distribution over the K_clean clean categories; the result
// has K_clean+1 entries with the absorbing [MASK] category last. A
// non-masked observation stays fixed (the absorbing chain never moves
// mass elsewhere); a masked one reveals category j with probability
// (k/t)·p_hat(j) and stays masked with probability (t-k)/t.
// ---------------------------------------------------------------------

inline std::vector<double> posterior(int x_t, std::span<const double> p_hat, int t, int k) {
  const int K_clean = static_cast<int>(p_hat.size());
  const int z = K_clean;
  if (t < 1) throw StepOutOfRangeError(t, t);
  if (k < 1 || k > t) throw StrideTooLargeError(k, t);
  if (x_t < 0 || x_t > z) throw std::out_of_range("posterior: category out of range");

  std::vector<double> out(static_cast<size_t>(K_clean) + 1, 0.0);
  if (x_t != z) {
    out[static_cast<size_t>(x_t)] = 1.0;
    return out;
  }
  const double reveal = static_cast<double>(k) / static_cast<double>(t);
  for (int j = 0; j < K_clean; ++j) {
    out[static_cast<size_t>(j)] = reveal * p_hat[static_cast<size_t>(j)];
  }
  out[static_cast<size_t>(z)] = static_cast<double>(t - k) / static_cast<double>(t);
  return out;
}

// Keep the top_k most probable categories, zero the rest, renormalize.
// Ties break toward the lower index so the result is deterministic.
inline std::vector<double> truncate_topk(std::span<const double> p, int top_k) {
  if (top_k < 1) throw std::invalid_argument("truncate_topk: top_k must be positive");
  const int K = static_cast<int>(p.size());
  std::vector<int> idx(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) idx[static_cast<size_t>(i)] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
  });
  std::vector<double> out(static_cast<size_t>(K), 0.0);
  const int keep = std::min(top_k, K);
  double sum = 0.0;
  for (int r = 0; r < keep; ++r) sum += p[static_cast<size_t>(idx[static_cast<size_t>(r)])];
  for (int r = 0; r < keep; ++r) {
    int i = idx[static_cast<size_t>(r)];
    out[static_cast<size_t>(i)] =
        sum > 0.0 ? p[static_cast<size_t>(i)] / sum : 1.0 / static_cast<double>(keep);
  }
  return out;
}

// ---------------------------------------------------------------------
// Clean-category predictions the reverse chain consumes. The denoiser
// module adapts its logits into this form; tests plug in stubs.
// ---------------------------------------------------------------------

struct CleanPrediction {
  int m = 0;
  int num_node_cats = 0;
  std::vector<double> node_probs;  // m × num_node_cats, rows normalized
  std::vector<double> edge_probs;  // m × m × kNumBondCats, rows normalized

  std::span<const double> node_row(int i) const {
    return {node_probs.data() + static_cast<size_t>(i) * num_node_cats,
            static_cast<size_t>(num_node_cats)};
  }
  std::span<const double> edge_row(int i, int j) const {
    return {edge_probs.data() +
                (static_cast<size_t>(i) * m + static_cast<size_t>(j)) * kNumBondCats,
            static_cast<size_t>(kNumBondCats)};
  }
};

using DenoiserFn = std::function<CleanPrediction(const TokenSequence&)>;

// ---------------------------------------------------------------------
// One reverse jump from step t to step t-k. Masked positions sample
// from the top-k-truncated posterior; everything else is copied. Only
// the upper triangle of the edge matrix is sampled, then mirrored, so
// symmetry holds exactly. Draw order matches forward_sample.
// ---------------------------------------------------------------------

inline TokenSequence reverse_step(const Vocabulary& vocab, const TokenSequence& state,
                                  const CleanPrediction& pred, const NoiseSchedule& sched,
                                  int t, int k, int top_k, Prng& rng) {
  sched.check_step(t);
  if (k < 1 || k > t) throw StrideTooLargeError(k, t);
  const int m = state.m;
  const int num_node_cats = vocab.num_node_categories();
  if (pred.m != m || pred.num_node_cats != num_node_cats) {
    throw ShapeMismatchError("prediction is for a different slot count or vocabulary");
  }
  if (pred.node_probs.size() != static_cast<size_t>(m) * num_node_cats ||
      pred.edge_probs.size() != static_cast<size_t>(m) * m * kNumBondCats) {
    throw ShapeMismatchError("prediction buffers do not match their declared shape");
  }

  TokenSequence next = state;
  for (int i = 0; i < m; ++i) {
    int slot = state.tgt_slots[static_cast<size_t>(i)];
    if (state.token_ids[static_cast<size_t>(slot)] != vocab.mask_id()) continue;
    std::vector<double> p = truncate_topk(pred.node_row(i), top_k);
    std::vector<double> post = posterior(num_node_cats, p, t, k);
    int c = rng.categorical(post);
    next.token_ids[static_cast<size_t>(slot)] =
        c == num_node_cats ? vocab.mask_id() : vocab.first_node_id() + c;
  }
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      if (state.tgt_edge(i, j) != kEdgeMaskIndex) continue;
      std::vector<double> p = truncate_topk(pred.edge_row(i, j), top_k);
      std::vector<double> post = posterior(kNumBondCats, p, t, k);
      int c = rng.categorical(post);
      next.set_tgt_edge(i, j, c == kNumBondCats ? kEdgeMaskIndex : c);
    }
  }
  return next;
}

// ---------------------------------------------------------------------
// Full reverse chain over an evenly spaced descending grid
// round(T·i/steps), i = steps..0. Strides sum to T, so the final jump
// always lands at 0 with unmask probability 1 and no [MASK] survives.
// ---------------------------------------------------------------------

inline TokenSequence run_reverse_chain(const Vocabulary& vocab, const DenoiserFn& denoise,
                                       TokenSequence seq, const NoiseSchedule& sched,
                                       int steps, int top_k, Prng& rng) {
  if (steps < 1 || steps > sched.T) throw StepOutOfRangeError(steps, sched.T);
  std::vector<int> grid(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    grid[static_cast<size_t>(i)] = static_cast<int>(
        std::lround(static_cast<double>(sched.T) * i / static_cast<double>(steps)));
  }
  for (int i = steps; i >= 1; --i) {
    int t = grid[static_cast<size_t>(i)];
    int k = t - grid[static_cast<size_t>(i) - 1];
    CleanPrediction pred = denoise(seq);
    seq = reverse_step(vocab, seq, pred, sched, t, k, top_k, rng);
  }
  return seq;
}

inline MolGraph sample(const Vocabulary& vocab, const DenoiserFn& denoise, TokenSequence seq,
                       const NoiseSchedule& sched, int steps, int top_k, Prng& rng) {
  TokenSequence done = run_reverse_chain(vocab, denoise, std::move(seq), sched, steps, top_k, rng);
  std::vector<int> ids;
  ids.reserve(done.tgt_slots.size());
  for (int slot : done.tgt_slots) ids.push_back(done.token_ids[static_cast<size_t>(slot)]);
  return decode_graph(vocab, ids, done.tgt_edges);
}

}  // namespace moldiff
