//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "moldiff/molgraph.hpp"

namespace moldiff {

// ---------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------

class EmptyCorpusError : public std::runtime_error {
 public:
  EmptyCorpusError() : std::runtime_error("vocabulary corpus is empty") {}
};

class TargetTooLongError : public std::runtime_error {
 public:
  TargetTooLongError(int actual, int limit)
      : std::runtime_error("target molecule has " + std::to_string(actual) +
                           " atoms but only " + std::to_string(limit) + " slots") {}
};

class ResidualMaskError : public std::runtime_error {
 public:
  ResidualMaskError() : std::runtime_error("masked entries remain; sampling is incomplete") {}
};

class NoAtomsError : public std::runtime_error {
 public:
  NoAtomsError() : std::runtime_error("every node slot is empty; no molecule to decode") {}
};

class VocabFormatError : public std::runtime_error {
 public:
  explicit VocabFormatError(const std::string& what)
      : std::runtime_error("vocabulary file: " + what) {}
};

// ---------------------------------------------------------------------
// Edge categories: bond categories 0..4 plus a masked-edge index.
// ---------------------------------------------------------------------

inline constexpr int kEdgeMaskIndex = kNumBondCats;           // z_E
inline constexpr int kNumEdgeCategories = kNumBondCats + 1;   // includes z_E

static_assert(static_cast<int>(BondCat::None) == 0);
static_assert(static_cast<int>(BondCat::Aromatic) == 4);

inline int edge_category(BondCat c) { return static_cast<int>(c); }

inline BondCat bond_from_edge_category(int cat) {
  if (cat < 0 || cat >= kNumBondCats) {
    throw std::out_of_range("bond_from_edge_category: " + std::to_string(cat));
  }
  return static_cast<BondCat>(cat);
}

// ---------------------------------------------------------------------
// Word-level tokenizer: lowercased alphanumeric runs; every other
// non-space character stands alone.
// ---------------------------------------------------------------------

inline std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (std::isalnum(c)) {
      std::string word;
      while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) {
        word += static_cast<char>(std::tolower(static_cast<unsigned char>(text[i])));
        ++i;
      }
      out.push_back(std::move(word));
    } else {
      out.emplace_back(1, text[i]);
      ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------
// Vocabulary. Id layout, in order:
//   [UNK], text words (sorted), node tokens (atom-table order), [EMPTY],
//   [MASK], [PAD], [SEP].
// Node tokens and [EMPTY] are adjacent on purpose: together they form
// the contiguous node-category slice the diffusion heads operate on.
// ---------------------------------------------------------------------

class Vocabulary {
 public:
  static Vocabulary build(const std::vector<std::string>& corpus, int min_count,
                          const AtomTable& table = AtomTable::standard()) {
    if (corpus.empty()) throw EmptyCorpusError();
    std::map<std::string, int> counts;
    bool any_token = false;
    for (const std::string& line : corpus) {
      for (std::string& w : tokenize_text(line)) {
        ++counts[std::move(w)];
        any_token = true;
      }
    }
    if (!any_token) throw EmptyCorpusError();

    Vocabulary v(table);
    for (auto& [word, n] : counts) {
      if (n >= min_count) v.words_.push_back(word);  // map order = sorted
    }
    v.assign_ids();
    return v;
  }

  // --- id accessors -------------------------------------------------

  int unk_id() const { return 0; }
  int empty_id() const { return empty_id_; }
  int mask_id() const { return mask_id_; }
  int pad_id() const { return pad_id_; }
  int sep_id() const { return sep_id_; }
  int size() const { return size_; }

  int text_id(std::string_view word) const {
    auto it = word_ids_.find(std::string(word));
    return it == word_ids_.end() ? unk_id() : it->second;
  }

  int node_id(int atom_kind_idx) const {
    if (atom_kind_idx < 0 || atom_kind_idx >= table_->size()) {
      throw std::out_of_range("Vocabulary::node_id: bad atom kind");
    }
    return first_node_id_ + atom_kind_idx;
  }

  // Node-category slice: the contiguous id range the diffusion process
  // runs over (atom kinds followed by [EMPTY]).
  int first_node_id() const { return first_node_id_; }
  int num_node_categories() const { return table_->size() + 1; }
  bool is_node_category(int id) const {
    return id >= first_node_id_ && id < first_node_id_ + num_node_categories();
  }
  int atom_kind_of(int id) const {
    if (id < first_node_id_ || id >= first_node_id_ + table_->size()) {
      throw std::out_of_range("Vocabulary::atom_kind_of: not a node token");
    }
    return id - first_node_id_;
  }

  int num_text_tokens() const { return 1 + static_cast<int>(words_.size()); }  // incl. [UNK]

  const AtomTable& table() const { return *table_; }

  std::string token_name(int id) const {
    if (id == unk_id()) return "[UNK]";
    if (id == empty_id_) return "[EMPTY]";
    if (id == mask_id_) return "[MASK]";
    if (id == pad_id_) return "[PAD]";
    if (id == sep_id_) return "[SEP]";
    if (id >= 1 && id <= static_cast<int>(words_.size())) {
      return words_[static_cast<size_t>(id - 1)];
    }
    if (id >= first_node_id_ && id < first_node_id_ + table_->size()) {
      return "[" + table_->kind(id - first_node_id_).symbol + "]";
    }
    throw std::out_of_range("Vocabulary::token_name: bad id " + std::to_string(id));
  }

  // --- serialization ------------------------------------------------

  std::string to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json text = nlohmann::json::object();
    for (size_t k = 0; k < words_.size(); ++k) {
      text[words_[k]] = static_cast<int>(k) + 1;
    }
    j["text_tokens"] = std::move(text);
    nlohmann::json node = nlohmann::json::object();
    for (int k = 0; k < table_->size(); ++k) {
      node[table_->kind(k).symbol] = first_node_id_ + k;
    }
    j["node_tokens"] = std::move(node);
    j["special"] = {{"[UNK]", unk_id()},
                    {"[EMPTY]", empty_id_},
                    {"[MASK]", mask_id_},
                    {"[PAD]", pad_id_},
                    {"[SEP]", sep_id_}};
    nlohmann::json edges = nlohmann::json::object();
    for (int c = 0; c < kNumBondCats; ++c) {
      edges[bond_cat_name(static_cast<BondCat>(c))] = c;
    }
    edges["[MASK]"] = kEdgeMaskIndex;
    j["edge_categories"] = std::move(edges);
    return j.dump(2);
  }

  static Vocabulary from_json(const std::string& text,
                              const AtomTable& table = AtomTable::standard()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw VocabFormatError(e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1) {
      throw VocabFormatError("missing or unsupported version");
    }
    for (const char* key : {"text_tokens", "node_tokens", "special", "edge_categories"}) {
      if (!j.contains(key)) throw VocabFormatError(std::string("missing field ") + key);
    }

    Vocabulary v(table);
    std::map<int, std::string> by_id;
    for (auto& [word, id] : j["text_tokens"].items()) {
      by_id[id.get<int>()] = word;
    }
    int expect = 1;
    for (auto& [id, word] : by_id) {
      if (id != expect++) throw VocabFormatError("text token ids are not contiguous from 1");
      v.words_.push_back(word);
    }
    v.assign_ids();

    // The node/special blocks are redundant with the layout; verify they
    // agree so a file from a different atom table is rejected loudly.
    for (auto& [sym, id] : j["node_tokens"].items()) {
      int kind = table.find(sym);
      if (kind < 0) throw VocabFormatError("unknown node token element " + sym);
      if (v.node_id(kind) != id.get<int>()) {
        throw VocabFormatError("node token id mismatch for " + sym);
      }
    }
    if (static_cast<int>(j["node_tokens"].size()) != table.size()) {
      throw VocabFormatError("node token count does not match atom table");
    }
    const auto& sp = j["special"];
    if (sp.value("[UNK]", -1) != v.unk_id() || sp.value("[EMPTY]", -1) != v.empty_id_ ||
        sp.value("[MASK]", -1) != v.mask_id_ || sp.value("[PAD]", -1) != v.pad_id_ ||
        sp.value("[SEP]", -1) != v.sep_id_) {
      throw VocabFormatError("special token ids do not match layout");
    }
    return v;
  }

  // FNV-1a over the serialized form; stored in checkpoints so a model is
  // never resumed against a different vocabulary.
  uint64_t digest() const {
    uint64_t h = 1469598103934665603ULL;
    for (char c : to_json()) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  explicit Vocabulary(const AtomTable& table) : table_(&table) {}

  void assign_ids() {
    word_ids_.clear();
    for (size_t k = 0; k < words_.size(); ++k) {
      word_ids_[words_[k]] = static_cast<int>(k) + 1;
    }
    first_node_id_ = 1 + static_cast<int>(words_.size());
    empty_id_ = first_node_id_ + table_->size();
    mask_id_ = empty_id_ + 1;
    pad_id_ = mask_id_ + 1;
    sep_id_ = pad_id_ + 1;
    size_ = sep_id_ + 1;
  }

  const AtomTable* table_;
  std::vector<std::string> words_;  // sorted
  std::map<std::string, int> word_ids_;
  int first_node_id_ = 0, empty_id_ = 0, mask_id_ = 0, pad_id_ = 0, sep_id_ = 0, size_ = 0;
};

// ---------------------------------------------------------------------
// TokenSequence: the flattened text+graph input. Segment order is
// Text, then SourceGraph (editing only), then TargetGraph. Each of the
// first two segments ends with [SEP]; separators carry their segment's
// tag but are not node slots.
// ---------------------------------------------------------------------

enum class SegmentTag : uint8_t { Text, SourceGraph, TargetGraph };

struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<SegmentTag> segment_tags;
  std::vector<int> position_ids;

  std::vector<int> src_slots;  // positions holding source node tokens
  std::vector<int> tgt_slots;  // positions holding target node slots, size m

  int m_src = 0;
  int m = 0;
  std::vector<int> src_edges;  // m_src×m_src edge categories, row-major
  std::vector<int> tgt_edges;  // m×m edge categories, row-major

  int length() const { return static_cast<int>(token_ids.size()); }

  int src_edge(int i, int j) const { return src_edges[static_cast<size_t>(i) * m_src + j]; }
  int tgt_edge(int i, int j) const { return tgt_edges[static_cast<size_t>(i) * m + j]; }
  void set_tgt_edge(int i, int j, int cat) {
    tgt_edges[static_cast<size_t>(i) * m + j] = cat;
    tgt_edges[static_cast<size_t>(j) * m + i] = cat;
  }
};

// Builds the token sequence for one instance.
//   target != nullptr: training layout; slots hold ground-truth node
//     tokens padded with [EMPTY]; edges hold true categories, None at
//     and beyond the padding boundary.
//   target == nullptr: sampling layout; slots all [MASK], off-diagonal
//     edges all masked. The diagonal stays None: it is structural, not
//     part of the diffusion state.
inline TokenSequence encode_instance(const Vocabulary& vocab, const std::string& instruction,
                                     const MolGraph* source, const MolGraph* target, int m) {
  if (m < 1) throw std::invalid_argument("encode_instance: m must be positive");
  std::vector<std::string> words = tokenize_text(instruction);
  if (words.empty()) throw std::invalid_argument("encode_instance: instruction has no tokens");
  if (target && target->size() > m) throw TargetTooLongError(target->size(), m);

  TokenSequence seq;
  seq.m = m;

  for (const std::string& w : words) {
    seq.token_ids.push_back(vocab.text_id(w));
    seq.segment_tags.push_back(SegmentTag::Text);
  }
  seq.token_ids.push_back(vocab.sep_id());
  seq.segment_tags.push_back(SegmentTag::Text);

  if (source) {
    seq.m_src = source->size();
    for (int i = 0; i < source->size(); ++i) {
      seq.src_slots.push_back(seq.length());
      seq.token_ids.push_back(vocab.node_id(source->atom(i)));
      seq.segment_tags.push_back(SegmentTag::SourceGraph);
    }
    seq.token_ids.push_back(vocab.sep_id());
    seq.segment_tags.push_back(SegmentTag::SourceGraph);
    seq.src_edges.assign(static_cast<size_t>(seq.m_src) * seq.m_src, 0);
    for (int i = 0; i < seq.m_src; ++i) {
      for (int j = 0; j < seq.m_src; ++j) {
        if (i != j) {
          seq.src_edges[static_cast<size_t>(i) * seq.m_src + j] =
              edge_category(source->bond(i, j));
        }
      }
    }
  }

  for (int i = 0; i < m; ++i) {
    seq.tgt_slots.push_back(seq.length());
    int id;
    if (!target) {
      id = vocab.mask_id();
    } else if (i < target->size()) {
      id = vocab.node_id(target->atom(i));
    } else {
      id = vocab.empty_id();
    }
    seq.token_ids.push_back(id);
    seq.segment_tags.push_back(SegmentTag::TargetGraph);
  }

  seq.tgt_edges.assign(static_cast<size_t>(m) * m, 0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      int cat;
      if (!target) {
        cat = kEdgeMaskIndex;
      } else if (i < target->size() && j < target->size()) {
        cat = edge_category(target->bond(i, j));
      } else {
        cat = edge_category(BondCat::None);  // padding rows train toward None
      }
      seq.tgt_edges[static_cast<size_t>(i) * m + j] = cat;
    }
  }

  seq.position_ids.resize(static_cast<size_t>(seq.length()));
  for (int p = 0; p < seq.length(); ++p) seq.position_ids[static_cast<size_t>(p)] = p;
  return seq;
}

// Reassembles a molecule from sampled node ids and edge categories.
// [EMPTY] slots vanish along with every edge that touches them.
inline MolGraph decode_graph(const Vocabulary& vocab, const std::vector<int>& node_ids,
                             const std::vector<int>& edges) {
  const int m = static_cast<int>(node_ids.size());
  if (m < 1) throw std::invalid_argument("decode_graph: no slots");
  if (edges.size() != static_cast<size_t>(m) * static_cast<size_t>(m)) {
    throw std::invalid_argument("decode_graph: edge matrix shape mismatch");
  }
  for (int id : node_ids) {
    if (id == vocab.mask_id()) throw ResidualMaskError();
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i != j && edges[static_cast<size_t>(i) * m + j] == kEdgeMaskIndex) {
        throw ResidualMaskError();
      }
    }
  }

  std::vector<int> keep;
  for (int i = 0; i < m; ++i) {
    if (node_ids[static_cast<size_t>(i)] != vocab.empty_id()) keep.push_back(i);
  }
  if (keep.empty()) throw NoAtomsError();

  MolGraph g(static_cast<int>(keep.size()), vocab.table());
  for (size_t a = 0; a < keep.size(); ++a) {
    g.set_atom(static_cast<int>(a),
               vocab.atom_kind_of(node_ids[static_cast<size_t>(keep[a])]));
  }
  for (size_t a = 0; a < keep.size(); ++a) {
    for (size_t b = a + 1; b < keep.size(); ++b) {
      int cat = edges[static_cast<size_t>(keep[a]) * m + keep[b]];
      g.set_bond(static_cast<int>(a), static_cast<int>(b), bond_from_edge_category(cat));
    }
  }
  return g;
}

}  // namespace moldiff
