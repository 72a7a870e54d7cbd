//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moldiff/diffusion.hpp"
#include "moldiff/rng.hpp"
#include "moldiff/tensor.hpp"
#include "moldiff/vocab.hpp"

namespace moldiff {

// ---------------------------------------------------------------------
// Text-graph transformer. One token stream carries instruction words,
// source nodes, and target node slots; bond structure travels in a
// parallel per-head edge channel that enters attention as an additive
// bias and is re-derived from the attention pattern after every layer.
// Two readouts: a token head over the final hidden rows and an edge
// head over the final edge-channel values.
// ---------------------------------------------------------------------

struct DenoiserConfig {
  int layers = 4;
  int d_hidden = 128;
  int heads = 4;
  int max_positions = 160;
  int token_vocab = 0;
  int edge_vocab = kNumEdgeCategories;
  int max_target = 16;  // largest m the data pipeline will encode

  int d_key() const { return d_hidden / heads; }

  void validate() const {
    if (layers < 1 || d_hidden < 1 || heads < 1 || max_positions < 1 || token_vocab < 1 ||
        edge_vocab < 1 || max_target < 1) {
      throw std::invalid_argument("DenoiserConfig: all dimensions must be positive");
    }
    if (d_hidden % heads != 0) {
      throw std::invalid_argument("DenoiserConfig: d_hidden must be divisible by heads");
    }
  }
};

struct DenoiserLayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections
  Tensor ln1_gain, ln1_bias;              // after the attention residual
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;      // 4×d_hidden feed-forward
  Tensor ln2_gain, ln2_bias;              // after the feed-forward residual
};

// Parameters live outside any tape and persist across forward passes.
// The named order below is a contract: initialization draws, optimizer
// state slots, and checkpoint layout all follow it.
struct DenoiserParams {
  DenoiserConfig config;
  Tensor token_embedding;     // token_vocab × d_hidden
  Tensor position_embedding;  // max_positions × d_hidden
  Tensor edge_bias_table;     // edge_vocab × heads
  std::vector<DenoiserLayerParams> layers;
  Tensor token_head_w, token_head_b;  // d_hidden × token_vocab, token_vocab
  Tensor edge_head_w, edge_head_b;    // heads × edge_vocab, edge_vocab

  DenoiserParams(const DenoiserConfig& cfg, Prng& rng) : config(cfg) {
    config.validate();
    auto normal = [&rng](std::vector<int> shape) {
      Tensor t(std::move(shape), true);
      t.fill_normal(rng, 0.02);
      return t;
    };
    auto zeros = [](std::vector<int> shape) { return Tensor(std::move(shape), true); };
    auto ones = [](std::vector<int> shape) {
      Tensor t(std::move(shape), true);
      std::fill(t.value.begin(), t.value.end(), 1.0);
      return t;
    };
    const int d = cfg.d_hidden;
    token_embedding = normal({cfg.token_vocab, d});
    position_embedding = normal({cfg.max_positions, d});
    edge_bias_table = normal({cfg.edge_vocab, cfg.heads});
    for (int l = 0; l < cfg.layers; ++l) {
      DenoiserLayerParams lp;
      lp.wq = normal({d, d});
      lp.bq = zeros({d});
      lp.wk = normal({d, d});
      lp.bk = zeros({d});
      lp.wv = normal({d, d});
      lp.bv = zeros({d});
      lp.wo = normal({d, d});
      lp.bo = zeros({d});
      lp.ln1_gain = ones({d});
      lp.ln1_bias = zeros({d});
      lp.ff_w1 = normal({d, 4 * d});
      lp.ff_b1 = zeros({4 * d});
      lp.ff_w2 = normal({4 * d, d});
      lp.ff_b2 = zeros({d});
      lp.ln2_gain = ones({d});
      lp.ln2_bias = zeros({d});
      layers.push_back(std::move(lp));
    }
    token_head_w = normal({d, cfg.token_vocab});
    token_head_b = zeros({cfg.token_vocab});
    edge_head_w = normal({cfg.heads, cfg.edge_vocab});
    edge_head_b = zeros({cfg.edge_vocab});
  }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("position_embedding", &position_embedding);
    out.emplace_back("edge_bias_table", &edge_bias_table);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      DenoiserLayerParams& lp = layers[l];
      out.emplace_back(p + "wq", &lp.wq);
      out.emplace_back(p + "bq", &lp.bq);
      out.emplace_back(p + "wk", &lp.wk);
      out.emplace_back(p + "bk", &lp.bk);
      out.emplace_back(p + "wv", &lp.wv);
      out.emplace_back(p + "bv", &lp.bv);
      out.emplace_back(p + "wo", &lp.wo);
      out.emplace_back(p + "bo", &lp.bo);
      out.emplace_back(p + "ln1_gain", &lp.ln1_gain);
      out.emplace_back(p + "ln1_bias", &lp.ln1_bias);
      out.emplace_back(p + "ff_w1", &lp.ff_w1);
      out.emplace_back(p + "ff_b1", &lp.ff_b1);
      out.emplace_back(p + "ff_w2", &lp.ff_w2);
      out.emplace_back(p + "ff_b2", &lp.ff_b2);
      out.emplace_back(p + "ln2_gain", &lp.ln2_gain);
      out.emplace_back(p + "ln2_bias", &lp.ln2_bias);
    }
    out.emplace_back("token_head_w", &token_head_w);
    out.emplace_back("token_head_b", &token_head_b);
    out.emplace_back("edge_head_w", &edge_head_w);
    out.emplace_back("edge_head_b", &edge_head_b);
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
  }

  size_t num_parameters() {
    size_t n = 0;
    for (Tensor* t : parameters()) n += t->value.size();
    return n;
  }
};

// ---------------------------------------------------------------------
// Sequence plumbing
// ---------------------------------------------------------------------

inline void check_sequence_shapes(const DenoiserConfig& cfg, const TokenSequence& seq) {
  const int P = seq.length();
  if (seq.segment_tags.size() != static_cast<size_t>(P) ||
      seq.position_ids.size() != static_cast<size_t>(P)) {
    throw ShapeMismatchError("token, tag, and position arrays differ in length");
  }
  if (P > cfg.max_positions) throw ShapeMismatchError("sequence exceeds max positions");
  if (seq.src_slots.size() != static_cast<size_t>(seq.m_src) ||
      seq.src_edges.size() != static_cast<size_t>(seq.m_src) * static_cast<size_t>(seq.m_src)) {
    throw ShapeMismatchError("source slot/edge arrays do not match m_src");
  }
  if (seq.tgt_slots.size() != static_cast<size_t>(seq.m) ||
      seq.tgt_edges.size() != static_cast<size_t>(seq.m) * static_cast<size_t>(seq.m)) {
    throw ShapeMismatchError("target slot/edge arrays do not match m");
  }
  for (int s : seq.src_slots) {
    if (s < 0 || s >= P) throw ShapeMismatchError("source slot outside sequence");
  }
  for (int s : seq.tgt_slots) {
    if (s < 0 || s >= P) throw ShapeMismatchError("target slot outside sequence");
  }
}

// Row-major P×P map of edge categories over ordered pairs of graph
// tokens that share a segment (source-source or target-target,
// diagonal included as None). -1 marks every other pair: they carry no
// edge channel and zero attention bias.
inline std::shared_ptr<const std::vector<int>> graph_pair_categories(const TokenSequence& seq) {
  const int P = seq.length();
  auto cats = std::make_shared<std::vector<int>>(static_cast<size_t>(P) * P, -1);
  for (int a = 0; a < seq.m_src; ++a) {
    for (int b = 0; b < seq.m_src; ++b) {
      const size_t pa = static_cast<size_t>(seq.src_slots[static_cast<size_t>(a)]);
      const size_t pb = static_cast<size_t>(seq.src_slots[static_cast<size_t>(b)]);
      (*cats)[pa * P + pb] = seq.src_edge(a, b);
    }
  }
  for (int a = 0; a < seq.m; ++a) {
    for (int b = 0; b < seq.m; ++b) {
      const size_t pa = static_cast<size_t>(seq.tgt_slots[static_cast<size_t>(a)]);
      const size_t pb = static_cast<size_t>(seq.tgt_slots[static_cast<size_t>(b)]);
      (*cats)[pa * P + pb] = seq.tgt_edge(a, b);
    }
  }
  return cats;
}

// ---------------------------------------------------------------------
// Forward pass pieces
// ---------------------------------------------------------------------

struct EmbedState {
  Tensor* hidden = nullptr;        // P × d_hidden
  std::vector<Tensor*> edge_bias;  // heads tensors of P × P
  std::shared_ptr<const std::vector<double>> graph_pair_mask;  // P×P, 1 on graph pairs
};

inline EmbedState embed(Tape& tape, DenoiserParams& params, const TokenSequence& seq) {
  check_sequence_shapes(params.config, seq);
  Tensor* tok = tape.embedding_lookup(&params.token_embedding, seq.token_ids);
  Tensor* pos = tape.embedding_lookup(&params.position_embedding, seq.position_ids);
  EmbedState st;
  st.hidden = tape.add(tok, pos);
  auto cats = graph_pair_categories(seq);
  auto mask = std::make_shared<std::vector<double>>(cats->size(), 0.0);
  for (size_t i = 0; i < cats->size(); ++i) (*mask)[i] = (*cats)[i] >= 0 ? 1.0 : 0.0;
  st.graph_pair_mask = std::move(mask);
  for (int h = 0; h < params.config.heads; ++h) {
    st.edge_bias.push_back(tape.edge_bias_init(&params.edge_bias_table, cats, seq.length(), h));
  }
  return st;
}

// One block: per head, scores = QKᵀ/√d_k plus that head's edge-channel
// bias (zero outside graph pairs), softmax over all positions, then the
// usual value mixing; the head's next edge channel is its post-softmax
// attention restricted to graph pairs. Token rows then pass through a
// residual + layer norm, a 4× feed-forward, and a second residual +
// layer norm.
inline std::pair<Tensor*, std::vector<Tensor*>> attention_layer(
    Tape& tape, const DenoiserConfig& cfg, DenoiserLayerParams& lp, Tensor* hidden,
    const std::vector<Tensor*>& edge_bias,
    const std::shared_ptr<const std::vector<double>>& graph_pair_mask) {
  if (static_cast<int>(edge_bias.size()) != cfg.heads) {
    throw ShapeMismatchError("one edge-bias matrix per head required");
  }
  const int dk = cfg.d_key();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor* q = tape.add_row_broadcast(tape.matmul(hidden, &lp.wq), &lp.bq);
  Tensor* k = tape.add_row_broadcast(tape.matmul(hidden, &lp.wk), &lp.bk);
  Tensor* v = tape.add_row_broadcast(tape.matmul(hidden, &lp.wv), &lp.bv);
  std::vector<Tensor*> head_rows;
  std::vector<Tensor*> next_bias;
  for (int h = 0; h < cfg.heads; ++h) {
    Tensor* qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
    Tensor* kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
    Tensor* vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
    Tensor* scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dk);
    Tensor* attn = tape.softmax_rows(tape.add(scores, edge_bias[static_cast<size_t>(h)]));
    head_rows.push_back(tape.matmul(attn, vh));
    next_bias.push_back(tape.mul_mask(attn, graph_pair_mask));
  }
  Tensor* attn_out =
      tape.add_row_broadcast(tape.matmul(tape.concat_cols(head_rows), &lp.wo), &lp.bo);
  Tensor* mid = tape.layer_norm(tape.add(hidden, attn_out), &lp.ln1_gain, &lp.ln1_bias);
  Tensor* ff_in = tape.add_row_broadcast(tape.matmul(mid, &lp.ff_w1), &lp.ff_b1);
  Tensor* ff_out = tape.add_row_broadcast(tape.matmul(tape.gelu(ff_in), &lp.ff_w2), &lp.ff_b2);
  Tensor* next_hidden = tape.layer_norm(tape.add(mid, ff_out), &lp.ln2_gain, &lp.ln2_bias);
  return {next_hidden, std::move(next_bias)};
}

// token_logits: one row per position over the full token vocabulary.
// edge_logits: target-pair logits stored as m×m rows of width
// edge_vocab (row i·m+j is pair (i,j)); exactly symmetric in (i,j).
// nullptr when the sequence has no target slots.
struct DenoiserOutput {
  Tensor* token_logits = nullptr;
  Tensor* edge_logits = nullptr;
  int m = 0;

  double edge_logit(int i, int j, int c) const { return edge_logits->at(i * m + j, c); }
};

inline DenoiserOutput forward(Tape& tape, DenoiserParams& params, const TokenSequence& seq_in) {
  check_sequence_shapes(params.config, seq_in);
  const int m = seq_in.m;
  const int P = seq_in.length();

  // Reductions over positions (softmax denominators, attention-value
  // sums) run in storage order, so inputs differing only by a shuffle
  // of target position ids would round differently. Running the
  // network on a copy whose target slots are sorted by position id and
  // mapping the outputs back makes permutation equivariance exact in
  // 64-bit arithmetic instead of approximate. Training sequences use
  // natural order and skip the remap entirely.
  std::vector<int> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return seq_in.position_ids[static_cast<size_t>(seq_in.tgt_slots[static_cast<size_t>(a)])] <
           seq_in.position_ids[static_cast<size_t>(seq_in.tgt_slots[static_cast<size_t>(b)])];
  });
  bool natural = true;
  for (int i = 0; i < m; ++i) natural = natural && order[static_cast<size_t>(i)] == i;
  std::vector<int> rank(static_cast<size_t>(m));
  for (int k = 0; k < m; ++k) rank[static_cast<size_t>(order[static_cast<size_t>(k)])] = k;

  TokenSequence canon;
  const TokenSequence* seq = &seq_in;
  if (!natural) {
    canon = seq_in;
    for (int k = 0; k < m; ++k) {
      const size_t dst = static_cast<size_t>(canon.tgt_slots[static_cast<size_t>(k)]);
      const size_t src =
          static_cast<size_t>(seq_in.tgt_slots[static_cast<size_t>(order[static_cast<size_t>(k)])]);
      canon.token_ids[dst] = seq_in.token_ids[src];
      canon.position_ids[dst] = seq_in.position_ids[src];
    }
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) {
        canon.tgt_edges[static_cast<size_t>(a) * m + b] =
            seq_in.tgt_edges[static_cast<size_t>(order[static_cast<size_t>(a)]) * m +
                             order[static_cast<size_t>(b)]];
      }
    }
    seq = &canon;
  }

  EmbedState st = embed(tape, params, *seq);
  Tensor* hidden = st.hidden;
  std::vector<Tensor*> bias = std::move(st.edge_bias);
  for (DenoiserLayerParams& lp : params.layers) {
    auto [next_hidden, next_bias] =
        attention_layer(tape, params.config, lp, hidden, bias, st.graph_pair_mask);
    hidden = next_hidden;
    bias = std::move(next_bias);
  }

  DenoiserOutput out;
  out.m = m;
  Tensor* tok =
      tape.add_row_broadcast(tape.matmul(hidden, &params.token_head_w), &params.token_head_b);
  if (!natural) {
    auto back = std::make_shared<std::vector<int>>(static_cast<size_t>(P));
    std::iota(back->begin(), back->end(), 0);
    for (int i = 0; i < m; ++i) {
      (*back)[static_cast<size_t>(seq_in.tgt_slots[static_cast<size_t>(i)])] =
          seq_in.tgt_slots[static_cast<size_t>(rank[static_cast<size_t>(i)])];
    }
    tok = tape.permute_rows(tok, back);
  }
  out.token_logits = tok;

  if (m > 0) {
    auto pairs = std::make_shared<std::vector<std::pair<int, int>>>();
    auto transpose = std::make_shared<std::vector<int>>();
    pairs->reserve(static_cast<size_t>(m) * m);
    transpose->reserve(static_cast<size_t>(m) * m);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j) {
        pairs->emplace_back(seq->tgt_slots[static_cast<size_t>(i)],
                            seq->tgt_slots[static_cast<size_t>(j)]);
        transpose->push_back(j * m + i);
      }
    }
    Tensor* gathered = tape.gather_pair_entries(bias, pairs);
    Tensor* raw =
        tape.add_row_broadcast(tape.matmul(gathered, &params.edge_head_w), &params.edge_head_b);
    // (x+y)/2 with the transposed rows: commutative addition makes the
    // symmetry bitwise.
    Tensor* sym = tape.scale(tape.add(raw, tape.permute_rows(raw, transpose)), 0.5);
    if (!natural) {
      auto back = std::make_shared<std::vector<int>>();
      back->reserve(static_cast<size_t>(m) * m);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
          back->push_back(rank[static_cast<size_t>(i)] * m + rank[static_cast<size_t>(j)]);
        }
      }
      sym = tape.permute_rows(sym, back);
    }
    out.edge_logits = sym;
  }
  return out;
}

// ---------------------------------------------------------------------
// Sampling-side adapters
// ---------------------------------------------------------------------

// Sampling-time position shuffle: target slots get a uniformly random
// permutation of their own position ids; text and source positions
// never move. Training uses natural order, so this is inference-only.
inline TokenSequence permute_positions(const TokenSequence& seq, Prng& rng) {
  TokenSequence out = seq;
  const int m = seq.m;
  if (m <= 1) return out;
  std::vector<int> perm = rng.permutation(m);
  for (int i = 0; i < m; ++i) {
    out.position_ids[static_cast<size_t>(out.tgt_slots[static_cast<size_t>(i)])] =
        seq.position_ids[static_cast<size_t>(
            seq.tgt_slots[static_cast<size_t>(perm[static_cast<size_t>(i)])])];
  }
  return out;
}

// Adapts raw logits into the clean-category distributions the reverse
// chain consumes: node rows softmax over the node-category slice of
// the token vocabulary, edge rows softmax over the real bond
// categories (the masked-edge column is not a clean category). The
// structural diagonal is pinned to None.
inline CleanPrediction to_clean_prediction(const Vocabulary& vocab, const DenoiserOutput& out,
                                           const TokenSequence& seq) {
  const int m = seq.m;
  const int ncats = vocab.num_node_categories();
  const int first = vocab.first_node_id();
  if (out.m != m || out.token_logits == nullptr || (m > 0 && out.edge_logits == nullptr)) {
    throw ShapeMismatchError("denoiser output does not match the sequence");
  }
  if (out.token_logits->cols() < first + ncats ||
      out.token_logits->rows() != seq.length()) {
    throw ShapeMismatchError("token logits do not cover the node-category slice");
  }
  if (m > 0 && (out.edge_logits->rows() != m * m || out.edge_logits->cols() < kNumBondCats)) {
    throw ShapeMismatchError("edge logits do not cover the bond categories");
  }

  auto softmax_into = [](const std::vector<double>& logits, double* dst) {
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    double sum = 0.0;
    for (size_t c = 0; c < logits.size(); ++c) {
      dst[c] = std::exp(logits[c] - mx);
      sum += dst[c];
    }
    for (size_t c = 0; c < logits.size(); ++c) dst[c] /= sum;
  };

  CleanPrediction pred;
  pred.m = m;
  pred.num_node_cats = ncats;
  pred.node_probs.assign(static_cast<size_t>(m) * ncats, 0.0);
  pred.edge_probs.assign(static_cast<size_t>(m) * m * kNumBondCats, 0.0);
  std::vector<double> row;
  for (int i = 0; i < m; ++i) {
    const int slot = seq.tgt_slots[static_cast<size_t>(i)];
    row.assign(static_cast<size_t>(ncats), 0.0);
    for (int c = 0; c < ncats; ++c) row[static_cast<size_t>(c)] = out.token_logits->at(slot, first + c);
    softmax_into(row, pred.node_probs.data() + static_cast<size_t>(i) * ncats);
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      double* dst = pred.edge_probs.data() + (static_cast<size_t>(i) * m + j) * kNumBondCats;
      if (i == j) {
        dst[edge_category(BondCat::None)] = 1.0;
        continue;
      }
      row.assign(static_cast<size_t>(kNumBondCats), 0.0);
      for (int c = 0; c < kNumBondCats; ++c) row[static_cast<size_t>(c)] = out.edge_logit(i, j, c);
      softmax_into(row, dst);
    }
  }
  return pred;
}

// Wraps frozen parameters as the sampler's prediction callback; each
// call is one inference-mode forward pass (no gradient bookkeeping).
inline DenoiserFn make_denoiser_fn(const Vocabulary& vocab, DenoiserParams& params) {
  return [&vocab, &params](const TokenSequence& seq) {
    Tape tape;
    tape.recording = false;
    DenoiserOutput out = forward(tape, params, seq);
    return to_clean_prediction(vocab, out, seq);
  };
}

}  // namespace moldiff
