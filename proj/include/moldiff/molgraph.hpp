//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moldiff {

// ---------------------------------------------------------------------
// Bond categories. The order field is what the valence check sums;
// Aromatic counts 1.5.
// ---------------------------------------------------------------------

enum class BondCat : uint8_t { None = 0, Single = 1, Double = 2, Triple = 3, Aromatic = 4 };

inline constexpr int kNumBondCats = 5;

inline double bond_order(BondCat c) {
  switch (c) {
    case BondCat::None: return 0.0;
    case BondCat::Single: return 1.0;
    case BondCat::Double: return 2.0;
    case BondCat::Triple: return 3.0;
    case BondCat::Aromatic: return 1.5;
  }
  return 0.0;
}

// Twice the bond order is always integral; used where exact arithmetic
// or hashing needs an integer.
inline int bond_order_x2(BondCat c) {
  switch (c) {
    case BondCat::None: return 0;
    case BondCat::Single: return 2;
    case BondCat::Double: return 4;
    case BondCat::Triple: return 6;
    case BondCat::Aromatic: return 3;
  }
  return 0;
}

inline const char* bond_cat_name(BondCat c) {
  switch (c) {
    case BondCat::None: return "None";
    case BondCat::Single: return "Single";
    case BondCat::Double: return "Double";
    case BondCat::Triple: return "Triple";
    case BondCat::Aromatic: return "Aromatic";
  }
  return "?";
}

// ---------------------------------------------------------------------
// Atom table
// ---------------------------------------------------------------------

struct AtomKind {
  std::string symbol;
  std::vector<int> max_valences;  // non-empty, all positive

  int max_valence() const { return *std::max_element(max_valences.begin(), max_valences.end()); }
};

class AtomTable {
 public:
  AtomTable() = default;

  void add(std::string symbol, std::vector<int> max_valences) {
    if (symbol.empty()) throw std::invalid_argument("AtomTable: empty symbol");
    if (index_.count(symbol)) throw std::invalid_argument("AtomTable: duplicate symbol " + symbol);
    if (max_valences.empty()) throw std::invalid_argument("AtomTable: empty valence set for " + symbol);
    for (int v : max_valences) {
      if (v <= 0) throw std::invalid_argument("AtomTable: non-positive valence for " + symbol);
    }
    index_[symbol] = static_cast<int>(kinds_.size());
    kinds_.push_back(AtomKind{std::move(symbol), std::move(max_valences)});
  }

  int find(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    return it == index_.end() ? -1 : it->second;
  }

  const AtomKind& kind(int idx) const { return kinds_.at(static_cast<size_t>(idx)); }
  int size() const { return static_cast<int>(kinds_.size()); }

  // Default desk-scale table. Helium has no chemistry to speak of; it is
  // listed with valence 1 so the table invariant (positive valences)
  // holds while "[He]" still parses and validates as a lone atom.
  static const AtomTable& standard() {
    static const AtomTable table = [] {
      AtomTable t;
      t.add("C", {4});
      t.add("N", {3});
      t.add("O", {2});
      t.add("S", {2, 4, 6});
      t.add("P", {3, 5});
      t.add("F", {1});
      t.add("Cl", {1});
      t.add("Br", {1});
      t.add("I", {1});
      t.add("H", {1});
      t.add("He", {1});
      return t;
    }();
    return table;
  }

 private:
  std::vector<AtomKind> kinds_;
  std::map<std::string, int, std::less<>> index_;
};

// ---------------------------------------------------------------------
// MolGraph: ordered atoms + symmetric bond-category matrix.
// ---------------------------------------------------------------------

class MolGraph {
 public:
  explicit MolGraph(int m, const AtomTable& table = AtomTable::standard())
      : table_(&table), atoms_(static_cast<size_t>(m), 0),
        bonds_(static_cast<size_t>(m) * static_cast<size_t>(m), BondCat::None) {
    if (m < 1) throw std::invalid_argument("MolGraph: must have at least one atom");
  }

  int size() const { return static_cast<int>(atoms_.size()); }
  const AtomTable& table() const { return *table_; }

  void set_atom(int i, int kind_idx) {
    if (kind_idx < 0 || kind_idx >= table_->size()) {
      throw std::out_of_range("MolGraph::set_atom: bad atom kind");
    }
    atoms_.at(static_cast<size_t>(i)) = kind_idx;
  }

  int atom(int i) const { return atoms_.at(static_cast<size_t>(i)); }
  const AtomKind& atom_kind(int i) const { return table_->kind(atom(i)); }

  void set_bond(int i, int j, BondCat c) {
    check_index(i);
    check_index(j);
    if (i == j) throw std::invalid_argument("MolGraph::set_bond: diagonal must stay None");
    bonds_[idx(i, j)] = c;
    bonds_[idx(j, i)] = c;
  }

  BondCat bond(int i, int j) const {
    check_index(i);
    check_index(j);
    return bonds_[idx(i, j)];
  }

  double bond_order_sum(int i) const {
    double s = 0.0;
    for (int j = 0; j < size(); ++j) {
      if (j != i) s += bond_order(bond(i, j));
    }
    return s;
  }

  int degree(int i) const {
    int d = 0;
    for (int j = 0; j < size(); ++j) {
      if (j != i && bond(i, j) != BondCat::None) ++d;
    }
    return d;
  }

  int num_bonds() const {
    int n = 0;
    for (int i = 0; i < size(); ++i) {
      for (int j = i + 1; j < size(); ++j) {
        if (bond(i, j) != BondCat::None) ++n;
      }
    }
    return n;
  }

  bool connected() const {
    const int m = size();
    std::vector<char> seen(static_cast<size_t>(m), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int j = 0; j < m; ++j) {
        if (!seen[static_cast<size_t>(j)] && bond(v, j) != BondCat::None) {
          seen[static_cast<size_t>(j)] = 1;
          ++count;
          stack.push_back(j);
        }
      }
    }
    return count == m;
  }

 private:
  void check_index(int i) const {
    if (i < 0 || i >= size()) throw std::out_of_range("MolGraph: atom index out of range");
  }
  size_t idx(int i, int j) const {
    return static_cast<size_t>(i) * atoms_.size() + static_cast<size_t>(j);
  }

  const AtomTable* table_;
  std::vector<int> atoms_;
  std::vector<BondCat> bonds_;
};

// ---------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------

enum class SmilesErrorKind : uint8_t {
  EmptyInput,
  UnknownElement,
  UnbalancedParenthesis,
  DanglingRingClosure,
  Syntax,
};

class SmilesError : public std::runtime_error {
 public:
  SmilesError(SmilesErrorKind kind, size_t offset, const std::string& what)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        kind_(kind), offset_(offset) {}

  SmilesErrorKind kind() const { return kind_; }
  size_t offset() const { return offset_; }

 private:
  SmilesErrorKind kind_;
  size_t offset_;
};

class DisconnectedGraphError : public std::runtime_error {
 public:
  DisconnectedGraphError() : std::runtime_error("multi-fragment graphs cannot be written") {}
};

// ---------------------------------------------------------------------
// SMILES parsing
//
// Supported subset: organic-subset atoms and bracket atoms, bonds
// - = # :, lowercase aromatic atoms (mapped to their element with
// Aromatic ring bonds), branches ( ), ring closures 1-9 and %nn.
// Charges, isotopes, chirality marks and bracket H counts are parsed
// and discarded with a warning. '.' (multi-fragment) is rejected.
// Implicit hydrogens never become nodes.
// ---------------------------------------------------------------------

namespace smiles_detail {

struct PendingBond {
  bool present = false;
  BondCat cat = BondCat::Single;
  size_t offset = 0;
};

struct RingSlot {
  int atom = -1;
  PendingBond bond;
  size_t offset = 0;
};

inline bool is_organic_subset(std::string_view sym) {
  return sym == "B" || sym == "C" || sym == "N" || sym == "O" || sym == "P" ||
         sym == "S" || sym == "F" || sym == "Cl" || sym == "Br" || sym == "I";
}

// Parsed atoms before the graph is assembled.
struct RawAtom {
  int kind = -1;
  bool aromatic = false;
};

inline BondCat default_bond(const RawAtom& a, const RawAtom& b) {
  return (a.aromatic && b.aromatic) ? BondCat::Aromatic : BondCat::Single;
}

}  // namespace smiles_detail

inline MolGraph parse_smiles(std::string_view text,
                             std::vector<std::string>* warnings = nullptr,
                             const AtomTable& table = AtomTable::standard()) {
  using namespace smiles_detail;

  size_t first_content = text.find_first_not_of(" \t\r\n");
  if (first_content == std::string_view::npos) {
    throw SmilesError(SmilesErrorKind::EmptyInput, 0, "empty SMILES input");
  }

  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };

  std::vector<RawAtom> atoms;
  struct Edge { int a, b; BondCat cat; };
  std::vector<Edge> edges;

  int prev = -1;
  PendingBond pending;
  std::vector<std::pair<int, size_t>> branch_stack;  // (prev atom, '(' offset)
  std::map<int, RingSlot> rings;

  auto add_edge = [&](int a, int b, BondCat cat, size_t off) {
    if (a == b) throw SmilesError(SmilesErrorKind::Syntax, off, "ring bond to the same atom");
    for (const Edge& e : edges) {
      if ((e.a == a && e.b == b) || (e.a == b && e.b == a)) {
        throw SmilesError(SmilesErrorKind::Syntax, off, "duplicate bond between atom pair");
      }
    }
    edges.push_back(Edge{a, b, cat});
  };

  auto finish_atom = [&](RawAtom atom, size_t off) {
    atoms.push_back(atom);
    int cur = static_cast<int>(atoms.size()) - 1;
    if (prev >= 0) {
      BondCat cat = pending.present ? pending.cat : default_bond(atoms[static_cast<size_t>(prev)], atom);
      add_edge(prev, cur, cat, off);
    } else if (pending.present) {
      throw SmilesError(SmilesErrorKind::Syntax, pending.offset, "bond symbol with no preceding atom");
    }
    pending = PendingBond{};
    prev = cur;
  };

  auto handle_ring = [&](int number, size_t off) {
    if (prev < 0) {
      throw SmilesError(SmilesErrorKind::Syntax, off, "ring closure with no preceding atom");
    }
    auto it = rings.find(number);
    if (it == rings.end()) {
      rings[number] = RingSlot{prev, pending, off};
    } else {
      RingSlot slot = it->second;
      rings.erase(it);
      BondCat cat;
      if (pending.present && slot.bond.present) {
        if (pending.cat != slot.bond.cat) {
          throw SmilesError(SmilesErrorKind::Syntax, off, "conflicting ring-closure bond symbols");
        }
        cat = pending.cat;
      } else if (pending.present) {
        cat = pending.cat;
      } else if (slot.bond.present) {
        cat = slot.bond.cat;
      } else {
        cat = default_bond(atoms[static_cast<size_t>(slot.atom)], atoms[static_cast<size_t>(prev)]);
      }
      add_edge(slot.atom, prev, cat, off);
    }
    pending = PendingBond{};
  };

  size_t i = first_content;
  size_t end = text.find_last_not_of(" \t\r\n") + 1;
  while (i < end) {
    char c = text[i];
    switch (c) {
      case '-': case '=': case '#': case ':': {
        if (pending.present) {
          throw SmilesError(SmilesErrorKind::Syntax, i, "two bond symbols in a row");
        }
        pending.present = true;
        pending.offset = i;
        pending.cat = (c == '-')   ? BondCat::Single
                      : (c == '=') ? BondCat::Double
                      : (c == '#') ? BondCat::Triple
                                   : BondCat::Aromatic;
        ++i;
        break;
      }
      case '(': {
        if (prev < 0) throw SmilesError(SmilesErrorKind::Syntax, i, "branch before any atom");
        if (pending.present) {
          throw SmilesError(SmilesErrorKind::Syntax, i, "bond symbol before branch open");
        }
        branch_stack.emplace_back(prev, i);
        ++i;
        break;
      }
      case ')': {
        if (branch_stack.empty()) {
          throw SmilesError(SmilesErrorKind::UnbalancedParenthesis, i, "unmatched ')'");
        }
        if (pending.present) {
          throw SmilesError(SmilesErrorKind::Syntax, pending.offset, "dangling bond symbol before ')'");
        }
        prev = branch_stack.back().first;
        branch_stack.pop_back();
        ++i;
        break;
      }
      case '.': {
        throw SmilesError(SmilesErrorKind::Syntax, i, "multi-fragment SMILES not supported");
      }
      case '%': {
        if (i + 2 >= end || !std::isdigit(static_cast<unsigned char>(text[i + 1])) ||
            !std::isdigit(static_cast<unsigned char>(text[i + 2]))) {
          throw SmilesError(SmilesErrorKind::Syntax, i, "'%' must be followed by two digits");
        }
        int number = (text[i + 1] - '0') * 10 + (text[i + 2] - '0');
        handle_ring(number, i);
        i += 3;
        break;
      }
      case '[': {
        size_t start = i;
        ++i;
        // isotope digits
        size_t iso_start = i;
        while (i < end && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
        if (i > iso_start) {
          warn("isotope label discarded at byte " + std::to_string(iso_start));
        }
        if (i >= end || !std::isalpha(static_cast<unsigned char>(text[i]))) {
          throw SmilesError(SmilesErrorKind::Syntax, i, "expected element symbol in bracket atom");
        }
        size_t sym_off = i;
        RawAtom atom;
        if (std::islower(static_cast<unsigned char>(text[i]))) {
          std::string sym(1, static_cast<char>(std::toupper(static_cast<unsigned char>(text[i]))));
          atom.kind = table.find(sym);
          atom.aromatic = true;
          if (atom.kind < 0) {
            throw SmilesError(SmilesErrorKind::UnknownElement, sym_off,
                              "unknown aromatic element '" + std::string(1, text[i]) + "'");
          }
          ++i;
        } else {
          // longest match: two-letter symbol first
          std::string two, one(1, text[i]);
          if (i + 1 < end && std::islower(static_cast<unsigned char>(text[i + 1]))) {
            two = std::string{text[i], text[i + 1]};
          }
          if (!two.empty() && table.find(two) >= 0) {
            atom.kind = table.find(two);
            i += 2;
          } else if (table.find(one) >= 0) {
            atom.kind = table.find(one);
            ++i;
          } else {
            throw SmilesError(SmilesErrorKind::UnknownElement, sym_off,
                              "unknown element '" + (two.empty() ? one : two) + "'");
          }
        }
        // chirality, hydrogen count, charge: parsed and discarded
        while (i < end && text[i] == '@') {
          warn("chirality mark discarded at byte " + std::to_string(i));
          ++i;
        }
        if (i < end && text[i] == 'H') {
          size_t h_off = i;
          ++i;
          while (i < end && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
          warn("bracket hydrogen count discarded at byte " + std::to_string(h_off));
        }
        while (i < end && (text[i] == '+' || text[i] == '-')) {
          size_t q_off = i;
          char q = text[i];
          ++i;
          while (i < end && (text[i] == q || std::isdigit(static_cast<unsigned char>(text[i])))) ++i;
          warn("charge discarded at byte " + std::to_string(q_off));
        }
        if (i >= end || text[i] != ']') {
          throw SmilesError(SmilesErrorKind::Syntax, i < end ? i : end,
                            "unterminated bracket atom opened at byte " + std::to_string(start));
        }
        ++i;
        finish_atom(atom, start);
        break;
      }
      default: {
        if (std::isdigit(static_cast<unsigned char>(c))) {
          handle_ring(c - '0', i);
          ++i;
          break;
        }
        if (std::isupper(static_cast<unsigned char>(c))) {
          std::string two, one(1, c);
          if (i + 1 < end && std::islower(static_cast<unsigned char>(text[i + 1]))) {
            two = std::string{c, text[i + 1]};
          }
          RawAtom atom;
          // Only organic-subset atoms may appear bare.
          if (!two.empty() && is_organic_subset(two) && table.find(two) >= 0) {
            atom.kind = table.find(two);
            finish_atom(atom, i);
            i += 2;
          } else if (is_organic_subset(one) && table.find(one) >= 0) {
            atom.kind = table.find(one);
            finish_atom(atom, i);
            ++i;
          } else {
            throw SmilesError(SmilesErrorKind::UnknownElement, i,
                              "unknown or non-organic-subset element '" +
                                  (two.empty() ? one : two) + "'");
          }
          break;
        }
        if (std::islower(static_cast<unsigned char>(c))) {
          std::string sym(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
          if (table.find(sym) < 0 || !is_organic_subset(sym)) {
            throw SmilesError(SmilesErrorKind::UnknownElement, i,
                              "unknown aromatic element '" + std::string(1, c) + "'");
          }
          RawAtom atom;
          atom.kind = table.find(sym);
          atom.aromatic = true;
          finish_atom(atom, i);
          ++i;
          break;
        }
        throw SmilesError(SmilesErrorKind::Syntax, i,
                          "unexpected character '" + std::string(1, c) + "'");
      }
    }
  }

  if (!branch_stack.empty()) {
    throw SmilesError(SmilesErrorKind::UnbalancedParenthesis, branch_stack.back().second,
                      "unmatched '('");
  }
  if (!rings.empty()) {
    throw SmilesError(SmilesErrorKind::DanglingRingClosure, rings.begin()->second.offset,
                      "ring closure " + std::to_string(rings.begin()->first) + " never closed");
  }
  if (pending.present) {
    throw SmilesError(SmilesErrorKind::Syntax, pending.offset, "dangling bond symbol at end");
  }
  if (atoms.empty()) {
    throw SmilesError(SmilesErrorKind::EmptyInput, first_content, "no atoms in input");
  }

  MolGraph g(static_cast<int>(atoms.size()), table);
  for (size_t a = 0; a < atoms.size(); ++a) g.set_atom(static_cast<int>(a), atoms[a].kind);
  for (const Edge& e : edges) g.set_bond(e.a, e.b, e.cat);
  return g;
}

// ---------------------------------------------------------------------
// SMILES writing. Atoms are always emitted in elemental (uppercase)
// form with explicit bond symbols, so aromatic bonds round-trip as ':'
// without any kekulization.
// ---------------------------------------------------------------------

inline std::string write_smiles(const MolGraph& g) {
  if (!g.connected()) throw DisconnectedGraphError();
  const int m = g.size();

  auto atom_token = [&](int i) -> std::string {
    const std::string& sym = g.atom_kind(i).symbol;
    if (smiles_detail::is_organic_subset(sym)) return sym;
    return "[" + sym + "]";
  };
  auto bond_token = [](BondCat c) -> std::string {
    switch (c) {
      case BondCat::Single: return "";
      case BondCat::Double: return "=";
      case BondCat::Triple: return "#";
      case BondCat::Aromatic: return ":";
      case BondCat::None: break;
    }
    throw std::logic_error("write_smiles: no bond token for None");
  };

  // DFS spanning tree from atom 0; non-tree edges become ring closures.
  std::vector<int> order;
  std::vector<int> parent(static_cast<size_t>(m), -1);
  std::vector<char> visited(static_cast<size_t>(m), 0);
  std::vector<std::vector<int>> children(static_cast<size_t>(m));
  struct Closure { int open_atom, close_atom, number; BondCat cat; };
  std::vector<Closure> closures;
  {
    std::vector<int> stack{0};
    visited[0] = 1;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      order.push_back(v);
      // Reverse neighbor order so lower indices are emitted first.
      for (int j = m - 1; j >= 0; --j) {
        if (j == v || g.bond(v, j) == BondCat::None) continue;
        if (!visited[static_cast<size_t>(j)]) {
          visited[static_cast<size_t>(j)] = 1;
          parent[static_cast<size_t>(j)] = v;
          children[static_cast<size_t>(v)].push_back(j);
          stack.push_back(j);
        }
      }
      std::reverse(children[static_cast<size_t>(v)].begin(), children[static_cast<size_t>(v)].end());
    }
  }
  std::vector<int> disc(static_cast<size_t>(m), 0);
  for (int k = 0; k < m; ++k) disc[static_cast<size_t>(order[static_cast<size_t>(k)])] = k;
  for (int v = 0; v < m; ++v) {
    for (int j = v + 1; j < m; ++j) {
      if (g.bond(v, j) == BondCat::None) continue;
      if (parent[static_cast<size_t>(v)] == j || parent[static_cast<size_t>(j)] == v) continue;
      int first = disc[static_cast<size_t>(v)] < disc[static_cast<size_t>(j)] ? v : j;
      int second = first == v ? j : v;
      closures.push_back(Closure{first, second, 0, g.bond(v, j)});
    }
  }
  // Assign ring numbers, reusing freed digits the way hand-written
  // SMILES does.
  {
    std::vector<std::vector<Closure*>> opens(static_cast<size_t>(m)), closes(static_cast<size_t>(m));
    for (Closure& c : closures) {
      opens[static_cast<size_t>(c.open_atom)].push_back(&c);
      closes[static_cast<size_t>(c.close_atom)].push_back(&c);
    }
    std::vector<char> in_use(100, 0);
    for (int k = 0; k < m; ++k) {
      int v = order[static_cast<size_t>(k)];
      // Open before freeing so a digit is never reused at the very atom
      // that closes it.
      for (Closure* c : opens[static_cast<size_t>(v)]) {
        int num = 1;
        while (num < 100 && in_use[static_cast<size_t>(num)]) ++num;
        if (num >= 100) throw std::runtime_error("write_smiles: out of ring-closure numbers");
        c->number = num;
        in_use[static_cast<size_t>(num)] = 1;
      }
      for (Closure* c : closes[static_cast<size_t>(v)]) in_use[static_cast<size_t>(c->number)] = 0;
    }
  }

  auto ring_digit = [](int number) -> std::string {
    if (number < 10) return std::to_string(number);
    return "%" + std::to_string(number);
  };

  std::string out;
  // Iterative emit to keep deep chains off the call stack.
  struct Frame { int atom; size_t child_pos; };
  std::vector<Frame> stack;
  auto emit_atom = [&](int v) {
    out += atom_token(v);
    for (const Closure& c : closures) {
      if (c.open_atom == v || c.close_atom == v) {
        out += bond_token(c.cat);
        out += ring_digit(c.number);
      }
    }
  };
  auto emit_bond_to = [&](int parent_atom, int child) {
    out += bond_token(g.bond(parent_atom, child));
  };

  emit_atom(0);
  stack.push_back(Frame{0, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& kids = children[static_cast<size_t>(f.atom)];
    if (f.child_pos >= kids.size()) {
      stack.pop_back();
      if (!stack.empty()) {
        Frame& p = stack.back();
        const auto& pkids = children[static_cast<size_t>(p.atom)];
        if (p.child_pos < pkids.size()) out += ")";
      }
      continue;
    }
    int child = kids[f.child_pos];
    ++f.child_pos;
    bool last = f.child_pos >= kids.size();
    if (!last) out += "(";
    emit_bond_to(f.atom, child);
    emit_atom(child);
    stack.push_back(Frame{child, 0});
  }
  return out;
}

// ---------------------------------------------------------------------
// Valence validity
// ---------------------------------------------------------------------

struct ValenceViolation {
  int atom_index;
  double bond_order_sum;
  int max_valence;
};

struct ValidityResult {
  bool valid;
  std::vector<ValenceViolation> diagnostics;
};

// Valence-only check: an atom is fine when the sum of its incident bond
// orders does not exceed its largest allowed valence (implicit hydrogens
// fill the remainder).
inline ValidityResult is_valid(const MolGraph& g) {
  ValidityResult res{true, {}};
  for (int i = 0; i < g.size(); ++i) {
    double sum = g.bond_order_sum(i);
    int cap = g.atom_kind(i).max_valence();
    if (sum > static_cast<double>(cap) + 1e-9) {
      res.valid = false;
      res.diagnostics.push_back(ValenceViolation{i, sum, cap});
    }
  }
  return res;
}

inline std::string diagnostics_to_json(const ValidityResult& res) {
  std::ostringstream os;
  os << "[";
  for (size_t k = 0; k < res.diagnostics.size(); ++k) {
    const auto& d = res.diagnostics[k];
    if (k) os << ",";
    os << "{\"atom_index\":" << d.atom_index << ",\"bond_order_sum\":" << d.bond_order_sum
       << ",\"max_valence\":" << d.max_valence << "}";
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------
// Canonical form: iterative neighborhood refinement with deterministic
// individualization on ties, emitting a labels+edges string that is
// equal exactly for isomorphic graphs.
// ---------------------------------------------------------------------

namespace canon_detail {

// One refinement sweep: rank atoms by (current rank, sorted multiset of
// (bond category, neighbor rank)) until the partition stops splitting.
inline std::vector<int> refine(const MolGraph& g, std::vector<int> ranks) {
  const int m = g.size();
  for (;;) {
    std::vector<std::pair<std::vector<int>, int>> keys(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      std::vector<int> key;
      key.push_back(ranks[static_cast<size_t>(i)]);
      std::vector<std::pair<int, int>> nbrs;
      for (int j = 0; j < m; ++j) {
        if (j == i) continue;
        BondCat c = g.bond(i, j);
        if (c == BondCat::None) continue;
        nbrs.emplace_back(static_cast<int>(c), ranks[static_cast<size_t>(j)]);
      }
      std::sort(nbrs.begin(), nbrs.end());
      for (auto& [c, r] : nbrs) {
        key.push_back(c);
        key.push_back(r);
      }
      keys[static_cast<size_t>(i)] = {std::move(key), i};
    }
    auto sorted = keys;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> next(static_cast<size_t>(m));
    int rank = -1;
    for (int k = 0; k < m; ++k) {
      if (k == 0 || sorted[static_cast<size_t>(k)].first != sorted[static_cast<size_t>(k - 1)].first) {
        ++rank;
      }
      next[static_cast<size_t>(sorted[static_cast<size_t>(k)].second)] = rank;
    }
    if (next == ranks) return ranks;
    ranks = std::move(next);
  }
}

inline std::vector<int> initial_ranks(const MolGraph& g) {
  const int m = g.size();
  std::vector<std::pair<std::vector<int>, int>> keys(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    int order_sum_x2 = 0;
    for (int j = 0; j < m; ++j) {
      if (j != i) order_sum_x2 += bond_order_x2(g.bond(i, j));
    }
    // symbol is encoded via the atom-kind index within the shared table
    keys[static_cast<size_t>(i)] = {{g.atom(i), g.degree(i), order_sum_x2}, i};
  }
  auto sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> ranks(static_cast<size_t>(m));
  int rank = -1;
  for (int k = 0; k < m; ++k) {
    if (k == 0 || sorted[static_cast<size_t>(k)].first != sorted[static_cast<size_t>(k - 1)].first) {
      ++rank;
    }
    ranks[static_cast<size_t>(sorted[static_cast<size_t>(k)].second)] = rank;
  }
  return ranks;
}

inline std::string string_for_order(const MolGraph& g, const std::vector<int>& ranks) {
  const int m = g.size();
  std::vector<int> pos(static_cast<size_t>(m));  // rank -> atom
  for (int i = 0; i < m; ++i) pos[static_cast<size_t>(ranks[static_cast<size_t>(i)])] = i;
  std::ostringstream os;
  for (int r = 0; r < m; ++r) {
    if (r) os << ",";
    os << g.atom_kind(pos[static_cast<size_t>(r)]).symbol;
  }
  os << "|";
  bool first = true;
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) {
      BondCat c = g.bond(pos[static_cast<size_t>(a)], pos[static_cast<size_t>(b)]);
      if (c == BondCat::None) continue;
      if (!first) os << ",";
      first = false;
      os << a << "-" << b << ":" << static_cast<int>(c);
    }
  }
  return os.str();
}

inline std::string canon_search(const MolGraph& g, std::vector<int> ranks) {
  ranks = refine(g, ranks);
  const int m = g.size();
  // Find the lowest-ranked cell with more than one member.
  int target_rank = -1;
  std::vector<int> members;
  for (int r = 0; r < m && target_rank < 0; ++r) {
    members.clear();
    for (int i = 0; i < m; ++i) {
      if (ranks[static_cast<size_t>(i)] == r) members.push_back(i);
    }
    if (members.size() > 1) target_rank = r;
  }
  if (target_rank < 0) return string_for_order(g, ranks);

  // Branch on every member of the cell; the lexicographically smallest
  // canonical string wins. Cells stay small for molecular graphs.
  std::string best;
  for (int v : members) {
    std::vector<int> forced(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      int r = ranks[static_cast<size_t>(i)];
      forced[static_cast<size_t>(i)] = (r > target_rank || (r == target_rank && i != v)) ? r + 1 : r;
    }
    std::string s = canon_search(g, std::move(forced));
    if (best.empty() || s < best) best = std::move(s);
  }
  return best;
}

}  // namespace canon_detail

inline std::string canonical_form(const MolGraph& g) {
  return canon_detail::canon_search(g, canon_detail::initial_ranks(g));
}

inline bool exact_match(const MolGraph& a, const MolGraph& b) {
  if (a.size() != b.size()) return false;
  return canonical_form(a) == canonical_form(b);
}

}  // namespace moldiff
