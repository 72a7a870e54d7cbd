//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "moldiff/rng.hpp"

namespace moldiff {

// ---------------------------------------------------------------------
// Synthetic instruction corpus: five molecule families whose English
// descriptions each determine the molecule up to isomorphism. Sizes cap
// at twelve heavy atoms. Every molecule comes with three phrasings so a
// model cannot latch onto one fixed sentence shape.
// ---------------------------------------------------------------------

struct ToyCell {
  std::string family;  // alkane | alcohol | ring | ether | amine
  int n = 0;           // family-specific size parameter
  std::string smiles;
  std::vector<std::string> descriptions;
};

struct ToyRecord {
  std::string id;
  std::string smiles;
  std::string description;
};

struct ToyCorpus {
  std::vector<ToyRecord> train;
  std::vector<ToyRecord> test;
};

namespace toygen_detail {

inline std::string number_word(int n) {
  static const char* words[] = {"zero", "one", "two",   "three", "four",  "five", "six",
                                "seven", "eight", "nine", "ten",   "eleven", "twelve"};
  if (n < 0 || n > 12) throw std::invalid_argument("number_word: out of range");
  return words[n];
}

inline std::string counted(int n, const std::string& noun) {
  return number_word(n) + " " + noun + (n == 1 ? "" : "s");
}

inline std::string chain(int n) { return std::string(static_cast<size_t>(n), 'C'); }

}  // namespace toygen_detail

// The 45 molecules in a fixed order: alkanes 1–12, alcohols 1–11,
// rings 3–8, symmetric ethers 1–5 (carbons per side), amines 1–11.
inline std::vector<ToyCell> toy_cells() {
  using toygen_detail::chain;
  using toygen_detail::counted;
  using toygen_detail::number_word;
  std::vector<ToyCell> cells;
  for (int n = 1; n <= 12; ++n) {
    cells.push_back({"alkane", n, chain(n),
                     {"a linear alkane with " + counted(n, "carbon atom"),
                      "an unbranched alkane containing " + counted(n, "carbon atom"),
                      "a saturated linear chain of " + counted(n, "carbon")}});
  }
  for (int n = 1; n <= 11; ++n) {
    cells.push_back({"alcohol", n, chain(n) + "O",
                     {"a primary alcohol with " + counted(n, "carbon atom"),
                      "a straight chain alcohol containing " + counted(n, "carbon"),
                      "an alcohol made of a linear chain of " + counted(n, "carbon atom")}});
  }
  for (int n = 3; n <= 8; ++n) {
    cells.push_back({"ring", n, "C1" + chain(n - 2) + "C1",
                     {"a carbon ring of size " + number_word(n),
                      "a cycloalkane with " + counted(n, "carbon"),
                      "a ring made of " + counted(n, "carbon atom")}});
  }
  for (int n = 1; n <= 5; ++n) {
    cells.push_back({"ether", n, chain(n) + "O" + chain(n),
                     {"a symmetric ether with " + counted(n, "carbon atom") + " on each side",
                      "an ether joining two linear chains of " + counted(n, "carbon"),
                      "a symmetric ether made of two " + number_word(n) + " carbon chains"}});
  }
  for (int n = 1; n <= 11; ++n) {
    cells.push_back({"amine", n, chain(n) + "N",
                     {"a primary amine with " + counted(n, "carbon atom"),
                      "a straight chain amine containing " + counted(n, "carbon"),
                      "an amine made of a linear chain of " + counted(n, "carbon atom")}});
  }
  return cells;
}

// Fixed held-out molecules (9 of 45 ≈ 20%), chosen so every family and
// every size word still occurs somewhere in the training split. The
// split is part of the corpus definition, not a random draw: it keeps
// train and test disjoint by canonical form on every run.
inline bool toy_cell_held_out(const std::string& family, int n) {
  return (family == "alkane" && (n == 5 || n == 10)) ||
         (family == "alcohol" && (n == 4 || n == 8)) || (family == "ring" && n == 6) ||
         (family == "ether" && n == 3) ||
         (family == "amine" && (n == 3 || n == 7 || n == 10));
}

inline ToyCorpus gen_toy(int n_train, int n_test, uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw std::invalid_argument("gen_toy: counts must be positive");
  std::vector<ToyCell> train_cells, test_cells;
  for (ToyCell& c : toy_cells()) {
    (toy_cell_held_out(c.family, c.n) ? test_cells : train_cells).push_back(std::move(c));
  }

  auto draw = [](const std::vector<ToyCell>& cells, int count, Prng rng, const char* tag) {
    std::vector<ToyRecord> out;
    for (int k = 0; k < count; ++k) {
      const ToyCell& cell = cells[rng.next_below(cells.size())];
      const std::string& desc = cell.descriptions[rng.next_below(cell.descriptions.size())];
      char id[32];
      std::snprintf(id, sizeof id, "toy-%s-%05d", tag, k);
      out.push_back({id, cell.smiles, desc});
    }
    return out;
  };
  ToyCorpus corpus;
  corpus.train = draw(train_cells, n_train, derive_stream(seed, {0x70, 0}), "train");
  corpus.test = draw(test_cells, n_test, derive_stream(seed, {0x70, 1}), "test");
  return corpus;
}

}  // namespace moldiff
