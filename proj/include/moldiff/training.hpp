//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moldiff/denoiser.hpp"
#include "moldiff/diffusion.hpp"
#include "moldiff/rng.hpp"
#include "moldiff/tensor.hpp"
#include "moldiff/vocab.hpp"

namespace moldiff {

// ---------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------

class EmptyDatasetError : public std::invalid_argument {
 public:
  EmptyDatasetError() : std::invalid_argument("training dataset is empty") {}
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(int64_t step, double value)
      : std::runtime_error("non-finite loss " + std::to_string(value) +
                           " at optimizer step " + std::to_string(step)) {}
};

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error("checkpoint: " + what) {}
};

class BadMagicError : public CheckpointError {
 public:
  BadMagicError() : CheckpointError("file does not start with the expected magic bytes") {}
};

class VersionUnsupportedError : public CheckpointError {
 public:
  explicit VersionUnsupportedError(uint32_t got)
      : CheckpointError("unsupported format version " + std::to_string(got)) {}
};

class DigestMismatchError : public CheckpointError {
 public:
  DigestMismatchError() : CheckpointError("vocabulary digest does not match") {}
};

class TruncatedFileError : public CheckpointError {
 public:
  explicit TruncatedFileError(const std::string& what) : CheckpointError("truncated: " + what) {}
};

class CheckpointFormatError : public CheckpointError {
 public:
  explicit CheckpointFormatError(const std::string& what)
      : CheckpointError("malformed: " + what) {}
};

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

// From `epoch` onward, apply the optimizer every `steps` micro-batches.
struct AccumStage {
  int epoch = 0;
  int steps = 1;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 16;
  std::vector<AccumStage> accumulation = {{0, 1}};
  int T = 1000;
  double text_mask_probability = 0.15;
  uint64_t seed = 42;
  int max_epochs = 1;

  void validate() const {
    if (learning_rate <= 0.0 || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("TrainConfig: learning rate must be positive");
    }
    if (batch_size < 1 || T < 1 || max_epochs < 1) {
      throw std::invalid_argument("TrainConfig: batch size, T, and max epochs must be positive");
    }
    if (text_mask_probability < 0.0 || text_mask_probability > 1.0) {
      throw std::invalid_argument("TrainConfig: text mask probability outside [0,1]");
    }
    if (accumulation.empty()) {
      throw std::invalid_argument("TrainConfig: accumulation schedule is empty");
    }
    for (size_t k = 0; k < accumulation.size(); ++k) {
      if (accumulation[k].steps < 1) {
        throw std::invalid_argument("TrainConfig: accumulation steps must be positive");
      }
      if (k > 0 && (accumulation[k].epoch <= accumulation[k - 1].epoch ||
                    accumulation[k].steps < accumulation[k - 1].steps)) {
        throw std::invalid_argument(
            "TrainConfig: accumulation stages must have increasing epochs and "
            "non-decreasing steps");
      }
    }
  }

  int accumulation_for_epoch(int epoch) const {
    int steps = 1;
    for (const AccumStage& s : accumulation) {
      if (s.epoch <= epoch) steps = s.steps;
    }
    return steps;
  }
};

// ---------------------------------------------------------------------
// Loss terms. The three heads normalize over their own category slices:
// node rows over the node-category columns of the token head (including
// [EMPTY]), edge rows over the five concrete bond categories, text rows
// over the text columns (including [UNK]). The sampler consumes exactly
// the same restricted distributions, so the loss trains what sampling
// uses.
// ---------------------------------------------------------------------

struct LossTerms {
  Tensor* total = nullptr;
  Tensor* node = nullptr;
  Tensor* edge = nullptr;  // nullptr when the instance has no target pairs
  Tensor* text = nullptr;  // nullptr when no text positions are in play

  double value_of(const Tensor* t) const { return t ? t->value[0] : 0.0; }
  double node_value() const { return value_of(node); }
  double edge_value() const { return value_of(edge); }
  double text_value() const { return value_of(text); }
};

namespace training_detail {

// Cross-entropy over a column slice of `logits`, counted at `rows` with
// slice-relative `targets`. Rows outside the list get weight zero.
inline Tensor* sliced_ce(Tape& tape, Tensor* logits, int col_begin, int col_end,
                         const std::vector<int>& rows, const std::vector<int>& targets) {
  Tensor* slice = tape.slice_cols(logits, col_begin, col_end);
  std::vector<int> full_targets(static_cast<size_t>(logits->rows()), 0);
  std::vector<double> weights(static_cast<size_t>(logits->rows()), 0.0);
  for (size_t k = 0; k < rows.size(); ++k) {
    full_targets[static_cast<size_t>(rows[k])] = targets[k];
    weights[static_cast<size_t>(rows[k])] = 1.0;
  }
  return tape.cross_entropy_rows(slice, full_targets, weights);
}

inline void check_out_against(const Vocabulary& vocab, const DenoiserOutput& out,
                              const TokenSequence& clean) {
  if (out.m != clean.m) throw ShapeMismatchError("prediction is for a different slot count");
  if (out.token_logits == nullptr || out.token_logits->rows() != clean.length() ||
      out.token_logits->cols() != vocab.size()) {
    throw ShapeMismatchError("token logits do not cover the sequence");
  }
  if (clean.m > 0 &&
      (out.edge_logits == nullptr || out.edge_logits->rows() != clean.m * clean.m ||
       out.edge_logits->cols() != kNumEdgeCategories)) {
    throw ShapeMismatchError("edge logits do not cover the target pairs");
  }
}

}  // namespace training_detail

// Node + edge cross-entropy against the clean sequence: every target
// slot counts (including [EMPTY] padding), every unordered pair counts
// once.
inline LossTerms diffusion_loss_terms(Tape& tape, const Vocabulary& vocab,
                                      const DenoiserOutput& out, const TokenSequence& clean) {
  training_detail::check_out_against(vocab, out, clean);
  const int m = clean.m;

  std::vector<int> node_rows, node_targets;
  for (int i = 0; i < m; ++i) {
    const int slot = clean.tgt_slots[static_cast<size_t>(i)];
    const int id = clean.token_ids[static_cast<size_t>(slot)];
    if (!vocab.is_node_category(id)) {
      throw ShapeMismatchError("clean target slot does not hold a node category");
    }
    node_rows.push_back(slot);
    node_targets.push_back(id - vocab.first_node_id());
  }

  LossTerms terms;
  terms.node = training_detail::sliced_ce(
      tape, out.token_logits, vocab.first_node_id(),
      vocab.first_node_id() + vocab.num_node_categories(), node_rows, node_targets);
  terms.total = terms.node;

  if (m > 0) {
    std::vector<int> pair_rows, pair_targets;
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        const int cat = clean.tgt_edge(i, j);
        if (cat < 0 || cat >= kNumBondCats) {
          throw ShapeMismatchError("clean target edge is masked or out of range");
        }
        pair_rows.push_back(i * m + j);
        pair_targets.push_back(cat);
      }
    }
    terms.edge = training_detail::sliced_ce(tape, out.edge_logits, 0, kNumBondCats, pair_rows,
                                            pair_targets);
    terms.total = tape.add(terms.total, terms.edge);
  }
  return terms;
}

inline Tensor* diffusion_loss(Tape& tape, const Vocabulary& vocab, const DenoiserOutput& out,
                              const TokenSequence& clean) {
  return diffusion_loss_terms(tape, vocab, out, clean).total;
}

// Replaces true text tokens (words and [UNK], never separators) with
// [MASK], each independently with probability p. Returns the masked
// positions; draws run in position order.
inline std::vector<int> mask_text_positions(const Vocabulary& vocab, TokenSequence& seq, double p,
                                            Prng& rng) {
  std::vector<int> masked;
  for (int pos = 0; pos < seq.length(); ++pos) {
    if (seq.segment_tags[static_cast<size_t>(pos)] != SegmentTag::Text) continue;
    if (seq.token_ids[static_cast<size_t>(pos)] >= vocab.first_node_id()) continue;
    if (rng.bernoulli(p)) {
      seq.token_ids[static_cast<size_t>(pos)] = vocab.mask_id();
      masked.push_back(pos);
    }
  }
  return masked;
}

// diffusion_loss plus text cross-entropy at the positions that were
// masked before the forward pass; targets come from the clean sequence.
inline LossTerms total_loss_terms(Tape& tape, const Vocabulary& vocab, const DenoiserOutput& out,
                                  const TokenSequence& clean,
                                  const std::vector<int>& masked_text) {
  LossTerms terms = diffusion_loss_terms(tape, vocab, out, clean);
  std::vector<int> rows, targets;
  for (int pos : masked_text) {
    const int id = clean.token_ids[static_cast<size_t>(pos)];
    if (pos < 0 || pos >= clean.length() || id >= vocab.first_node_id()) {
      throw ShapeMismatchError("masked text position does not hold a text token");
    }
    rows.push_back(pos);
    targets.push_back(id);
  }
  terms.text = training_detail::sliced_ce(tape, out.token_logits, 0, vocab.first_node_id(), rows,
                                          targets);
  terms.total = tape.add(terms.total, terms.text);
  return terms;
}

inline Tensor* total_loss(Tape& tape, const Vocabulary& vocab, const DenoiserOutput& out,
                          const TokenSequence& clean, const std::vector<int>& masked_text) {
  return total_loss_terms(tape, vocab, out, clean, masked_text).total;
}

// ---------------------------------------------------------------------
// Masked-LM corruption: every text word, source node, target node, and
// unordered target edge is masked independently. One corruption step of
// the absorbing chain; the loss reads only the masked sites.
// ---------------------------------------------------------------------

struct MlmMask {
  TokenSequence corrupted;
  std::vector<int> text_rows, text_targets;
  std::vector<int> node_rows, node_targets;  // slice-relative targets
  std::vector<int> pair_rows, pair_targets;  // i*m+j for i<j
  size_t eligible_sites = 0;

  size_t masked_sites() const { return text_rows.size() + node_rows.size() + pair_rows.size(); }
};

inline MlmMask mlm_mask(const Vocabulary& vocab, const TokenSequence& seq, double p, Prng& rng) {
  MlmMask out;
  out.corrupted = seq;
  for (int pos = 0; pos < seq.length(); ++pos) {
    const int id = seq.token_ids[static_cast<size_t>(pos)];
    const SegmentTag tag = seq.segment_tags[static_cast<size_t>(pos)];
    const bool text_site = tag == SegmentTag::Text && id < vocab.first_node_id();
    const bool node_site = tag != SegmentTag::Text && vocab.is_node_category(id);
    if (!text_site && !node_site) continue;  // separators are structural
    ++out.eligible_sites;
    if (!rng.bernoulli(p)) continue;
    out.corrupted.token_ids[static_cast<size_t>(pos)] = vocab.mask_id();
    if (text_site) {
      out.text_rows.push_back(pos);
      out.text_targets.push_back(id);
    } else {
      out.node_rows.push_back(pos);
      out.node_targets.push_back(id - vocab.first_node_id());
    }
  }
  const int m = seq.m;
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      const int cat = seq.tgt_edge(i, j);
      if (cat < 0 || cat >= kNumBondCats) {
        throw ShapeMismatchError("pretraining corpus edge is masked or out of range");
      }
      ++out.eligible_sites;
      if (!rng.bernoulli(p)) continue;
      out.corrupted.set_tgt_edge(i, j, kEdgeMaskIndex);
      out.pair_rows.push_back(i * m + j);
      out.pair_targets.push_back(cat);
    }
  }
  return out;
}

inline LossTerms mlm_loss_terms(Tape& tape, const Vocabulary& vocab, const DenoiserOutput& out,
                                const MlmMask& mask) {
  LossTerms terms;
  terms.node = training_detail::sliced_ce(
      tape, out.token_logits, vocab.first_node_id(),
      vocab.first_node_id() + vocab.num_node_categories(), mask.node_rows, mask.node_targets);
  terms.total = terms.node;
  if (out.edge_logits != nullptr) {
    terms.edge = training_detail::sliced_ce(tape, out.edge_logits, 0, kNumBondCats,
                                            mask.pair_rows, mask.pair_targets);
    terms.total = tape.add(terms.total, terms.edge);
  }
  terms.text = training_detail::sliced_ce(tape, out.token_logits, 0, vocab.first_node_id(),
                                          mask.text_rows, mask.text_targets);
  terms.total = tape.add(terms.total, terms.text);
  return terms;
}

// ---------------------------------------------------------------------
// Update engine. Epochs shuffle with a stream derived from (seed,
// epoch); each instance corrupts with a stream derived from (seed,
// epoch, position-in-epoch). Both are pure functions of the master
// seed, so a run can resume from any update boundary without replaying
// earlier randomness — and gradient accumulation sees the exact same
// corruption regardless of micro-batch size.
// ---------------------------------------------------------------------

struct TrainState {
  int64_t step = 0;  // optimizer updates applied so far
  int epoch = 0;
  int batch = 0;  // next micro-batch within the epoch; always a group start
};

struct TraceRow {
  int64_t step = 0;
  double loss = 0.0, node_loss = 0.0, edge_loss = 0.0, text_loss = 0.0;

  bool operator==(const TraceRow&) const = default;
};

using InstanceLossFn =
    std::function<LossTerms(Tape&, DenoiserParams&, const TokenSequence&, Prng&)>;

namespace training_detail {

constexpr uint64_t kStreamShuffle = 0x51;
constexpr uint64_t kStreamInstance = 0xC7;

inline std::vector<TraceRow> run_updates(DenoiserParams& params, AdamWState& opt,
                                         const std::vector<TokenSequence>& data,
                                         const TrainConfig& cfg, TrainState& cursor,
                                         int64_t max_steps, const InstanceLossFn& instance_loss,
                                         const std::function<void(const TraceRow&)>& on_row) {
  cfg.validate();
  const int n = static_cast<int>(data.size());
  const int bs = cfg.batch_size;
  const int num_batches = (n + bs - 1) / bs;
  std::vector<Tensor*> plist = params.parameters();
  if (opt.m.size() != plist.size()) opt.init(plist);
  AdamWConfig ocfg;
  ocfg.lr = cfg.learning_rate;

  std::vector<TraceRow> trace;
  for (int epoch = cursor.epoch; epoch < cfg.max_epochs; ++epoch) {
    std::vector<int> perm =
        derive_stream(cfg.seed, {kStreamShuffle, static_cast<uint64_t>(epoch)}).permutation(n);
    const int accum = cfg.accumulation_for_epoch(epoch);
    int batch = epoch == cursor.epoch ? cursor.batch : 0;
    if (batch % accum != 0) {
      throw std::invalid_argument("train state does not sit on an accumulation boundary");
    }
    while (batch < num_batches) {
      const int group_end = std::min(batch + accum, num_batches);
      const int first_i = batch * bs;
      const int last_i = std::min(group_end * bs, n);
      const double inv_group = 1.0 / static_cast<double>(last_i - first_i);

      params.zero_grad();
      double sum_total = 0.0, sum_node = 0.0, sum_edge = 0.0, sum_text = 0.0;
      for (int b = batch; b < group_end; ++b) {
        Tape tape;
        Tensor* batch_loss = nullptr;
        for (int i = b * bs; i < std::min((b + 1) * bs, n); ++i) {
          Prng rng = derive_stream(
              cfg.seed,
              {kStreamInstance, static_cast<uint64_t>(epoch), static_cast<uint64_t>(i)});
          const TokenSequence& clean = data[static_cast<size_t>(perm[static_cast<size_t>(i)])];
          LossTerms terms = instance_loss(tape, params, clean, rng);
          sum_total += terms.total->value[0];
          sum_node += terms.node_value();
          sum_edge += terms.edge_value();
          sum_text += terms.text_value();
          Tensor* scaled = tape.scale(terms.total, inv_group);
          batch_loss = batch_loss == nullptr ? scaled : tape.add(batch_loss, scaled);
        }
        if (!std::isfinite(batch_loss->value[0])) {
          throw NonFiniteLossError(cursor.step, batch_loss->value[0]);
        }
        tape.backward(batch_loss);
      }
      adamw_step(plist, opt, ocfg);

      cursor.step += 1;
      const double inv_n = inv_group;
      TraceRow row{cursor.step, sum_total * inv_n, sum_node * inv_n, sum_edge * inv_n,
                   sum_text * inv_n};
      trace.push_back(row);
      if (on_row) on_row(row);

      batch = group_end;
      if (batch == num_batches) {
        cursor.epoch = epoch + 1;
        cursor.batch = 0;
      } else {
        cursor.epoch = epoch;
        cursor.batch = batch;
      }
      if (max_steps >= 0 && cursor.step >= max_steps) return trace;
    }
  }
  return trace;
}

}  // namespace training_detail

// ---------------------------------------------------------------------
// Finetuning: sample t uniformly per instance, corrupt the target
// segment via the forward process, mask text words, and minimize the
// combined loss.
// ---------------------------------------------------------------------

inline std::vector<TraceRow> train_loop(const Vocabulary& vocab, DenoiserParams& params,
                                        AdamWState& opt,
                                        const std::vector<TokenSequence>& dataset,
                                        const TrainConfig& cfg, TrainState& cursor,
                                        int64_t max_steps = -1,
                                        const std::function<void(const TraceRow&)>& on_row = {}) {
  if (dataset.empty()) throw EmptyDatasetError();
  NoiseSchedule sched{cfg.T};
  InstanceLossFn loss_fn = [&vocab, &cfg, sched](Tape& tape, DenoiserParams& p,
                                                 const TokenSequence& clean, Prng& rng) {
    const int t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.T)));
    TokenSequence corrupt = forward_sample(vocab, clean, sched, t, rng);
    std::vector<int> masked_text =
        mask_text_positions(vocab, corrupt, cfg.text_mask_probability, rng);
    DenoiserOutput out = forward(tape, p, corrupt);
    return total_loss_terms(tape, vocab, out, clean, masked_text);
  };
  return training_detail::run_updates(params, opt, dataset, cfg, cursor, max_steps, loss_fn,
                                      on_row);
}

inline std::vector<TraceRow> train_loop(const Vocabulary& vocab, DenoiserParams& params,
                                        AdamWState& opt,
                                        const std::vector<TokenSequence>& dataset,
                                        const TrainConfig& cfg) {
  TrainState cursor;
  return train_loop(vocab, params, opt, dataset, cfg, cursor);
}

// ---------------------------------------------------------------------
// Masked-LM pretraining: one absorbing step at a flat rate, loss on
// masked sites only.
// ---------------------------------------------------------------------

inline std::vector<TraceRow> pretrain_mlm(const Vocabulary& vocab, DenoiserParams& params,
                                          AdamWState& opt,
                                          const std::vector<TokenSequence>& corpus,
                                          const TrainConfig& cfg, double mask_probability = 0.15,
                                          TrainState* cursor_in = nullptr, int64_t max_steps = -1,
                                          const std::function<void(const TraceRow&)>& on_row = {}) {
  if (corpus.empty()) throw EmptyCorpusError();
  if (mask_probability < 0.0 || mask_probability > 1.0) {
    throw std::invalid_argument("pretrain_mlm: mask probability outside [0,1]");
  }
  InstanceLossFn loss_fn = [&vocab, mask_probability](Tape& tape, DenoiserParams& p,
                                                      const TokenSequence& clean, Prng& rng) {
    MlmMask mask = mlm_mask(vocab, clean, mask_probability, rng);
    DenoiserOutput out = forward(tape, p, mask.corrupted);
    return mlm_loss_terms(tape, vocab, out, mask);
  };
  TrainState local;
  TrainState& cursor = cursor_in ? *cursor_in : local;
  return training_detail::run_updates(params, opt, corpus, cfg, cursor, max_steps, loss_fn,
                                      on_row);
}

// ---------------------------------------------------------------------
// Checkpoints. Layout: 8-byte magic, little-endian u32 version, u64
// header length, JSON header (model config, vocabulary digest, seed,
// cursor, optimizer step, tensor directory with name/shape/offset),
// then raw little-endian f64 arrays. Saving the result of a load
// reproduces the original file byte for byte.
// ---------------------------------------------------------------------

inline constexpr char kCheckpointMagic[9] = "MOLDCKPT";  // 8 bytes on disk
inline constexpr uint32_t kCheckpointVersion = 1;

namespace training_detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline uint32_t get_u32(const std::string& buf, size_t at) {
  uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[at + k])) << (8 * k);
  return v;
}

inline uint64_t get_u64(const std::string& buf, size_t at) {
  uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[at + k])) << (8 * k);
  return v;
}

inline void put_f64_array(std::string& out, const std::vector<double>& v) {
  for (double x : v) put_u64(out, std::bit_cast<uint64_t>(x));
}

inline void get_f64_array(const std::string& buf, size_t at, std::vector<double>& v) {
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::bit_cast<double>(get_u64(buf, at + 8 * i));
}

inline nlohmann::json config_to_json(const DenoiserConfig& c) {
  return {{"layers", c.layers},         {"d_hidden", c.d_hidden},
          {"heads", c.heads},           {"max_positions", c.max_positions},
          {"token_vocab", c.token_vocab}, {"edge_vocab", c.edge_vocab},
          {"max_target", c.max_target}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.layers = j.at("layers").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.token_vocab = j.at("token_vocab").get<int>();
  c.edge_vocab = j.at("edge_vocab").get<int>();
  c.max_target = j.at("max_target").get<int>();
  return c;
}

}  // namespace training_detail

inline void save_checkpoint(const std::string& path, const Vocabulary& vocab,
                            DenoiserParams& params, const AdamWState& opt, uint64_t seed,
                            const TrainState& cursor) {
  using nlohmann::json;
  namespace td = training_detail;

  auto named = params.named_parameters();
  if (opt.m.size() != named.size() || opt.v.size() != named.size()) {
    throw ShapeMismatchError("optimizer state does not cover the parameter list");
  }

  json dir = json::array();
  uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const std::vector<int>& shape, size_t count) {
    dir.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    offset += static_cast<uint64_t>(count) * 8;
  };
  for (auto& [name, t] : named) add_entry(name, t->shape, t->value.size());
  for (size_t k = 0; k < named.size(); ++k) {
    add_entry("opt.m." + named[k].first, {static_cast<int>(opt.m[k].size())}, opt.m[k].size());
  }
  for (size_t k = 0; k < named.size(); ++k) {
    add_entry("opt.v." + named[k].first, {static_cast<int>(opt.v[k].size())}, opt.v[k].size());
  }

  json header = {{"config", td::config_to_json(params.config)},
                 {"vocab_digest", vocab.digest()},
                 {"seed", seed},
                 {"cursor", {{"step", cursor.step}, {"epoch", cursor.epoch}, {"batch", cursor.batch}}},
                 {"optimizer_step", opt.step},
                 {"tensors", dir}};
  const std::string header_text = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 8);
  td::put_u32(out, kCheckpointVersion);
  td::put_u64(out, static_cast<uint64_t>(header_text.size()));
  out += header_text;
  for (auto& [name, t] : named) td::put_f64_array(out, t->value);
  for (const auto& m : opt.m) td::put_f64_array(out, m);
  for (const auto& v : opt.v) td::put_f64_array(out, v);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("short write to " + path);
}

struct RestoredCheckpoint {
  DenoiserParams params;
  AdamWState opt;
  uint64_t seed = 0;
  TrainState cursor;
};

inline RestoredCheckpoint load_checkpoint(const std::string& path, const Vocabulary& vocab) {
  using nlohmann::json;
  namespace td = training_detail;

  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 20) throw TruncatedFileError("shorter than the fixed preamble");
  if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) throw BadMagicError();
  const uint32_t version = td::get_u32(buf, 8);
  if (version != kCheckpointVersion) throw VersionUnsupportedError(version);
  const uint64_t header_len = td::get_u64(buf, 12);
  if (buf.size() < 20 + header_len) throw TruncatedFileError("header extends past end of file");

  json header;
  try {
    header = json::parse(buf.substr(20, header_len));
  } catch (const json::exception& e) {
    throw CheckpointFormatError(e.what());
  }

  uint64_t digest;
  DenoiserConfig cfg;
  try {
    digest = header.at("vocab_digest").get<uint64_t>();
    cfg = td::config_from_json(header.at("config"));
  } catch (const json::exception& e) {
    throw CheckpointFormatError(e.what());
  }
  if (digest != vocab.digest()) throw DigestMismatchError();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointFormatError(e.what());
  }

  const size_t payload = 20 + header_len;
  Prng scratch(0);
  RestoredCheckpoint r{DenoiserParams(cfg, scratch), AdamWState{}, 0, TrainState{}};
  try {
    r.seed = header.at("seed").get<uint64_t>();
    r.cursor.step = header.at("cursor").at("step").get<int64_t>();
    r.cursor.epoch = header.at("cursor").at("epoch").get<int>();
    r.cursor.batch = header.at("cursor").at("batch").get<int>();
  } catch (const json::exception& e) {
    throw CheckpointFormatError(e.what());
  }

  std::map<std::string, std::pair<uint64_t, std::vector<int>>> dir;
  try {
    for (const auto& e : header.at("tensors")) {
      dir[e.at("name").get<std::string>()] = {e.at("offset").get<uint64_t>(),
                                              e.at("shape").get<std::vector<int>>()};
    }
  } catch (const json::exception& e) {
    throw CheckpointFormatError(e.what());
  }

  auto fill = [&](const std::string& name, std::vector<double>& dst,
                  const std::vector<int>* expect_shape) {
    auto it = dir.find(name);
    if (it == dir.end()) throw CheckpointFormatError("missing tensor " + name);
    const auto& [offset, shape] = it->second;
    if (expect_shape && shape != *expect_shape) {
      throw CheckpointFormatError("tensor " + name + " has an unexpected shape");
    }
    size_t count = 1;
    for (int d : shape) count *= static_cast<size_t>(d);
    if (count != dst.size()) throw CheckpointFormatError("tensor " + name + " has the wrong size");
    if (payload + offset + count * 8 > buf.size()) {
      throw TruncatedFileError("tensor " + name + " extends past end of file");
    }
    td::get_f64_array(buf, payload + offset, dst);
  };

  auto named = r.params.named_parameters();
  std::vector<Tensor*> plist = r.params.parameters();
  r.opt.init(plist);
  try {
    r.opt.step = header.at("optimizer_step").get<int64_t>();
  } catch (const json::exception& e) {
    throw CheckpointFormatError(e.what());
  }
  for (size_t k = 0; k < named.size(); ++k) {
    fill(named[k].first, named[k].second->value, &named[k].second->shape);
    fill("opt.m." + named[k].first, r.opt.m[k], nullptr);
    fill("opt.v." + named[k].first, r.opt.v[k], nullptr);
  }
  return r;
}

}  // namespace moldiff
