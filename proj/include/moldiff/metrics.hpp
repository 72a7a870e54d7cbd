//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moldiff/molgraph.hpp"

namespace moldiff {

class WidthMismatchError : public std::invalid_argument {
 public:
  WidthMismatchError(int a, int b)
      : std::invalid_argument("fingerprint widths differ: " + std::to_string(a) + " vs " +
                              std::to_string(b)) {}
};

class EmptyInputError : public std::invalid_argument {
 public:
  EmptyInputError() : std::invalid_argument("evaluate: no instances") {}
};

// ---------------------------------------------------------------------
// Fixed-width bitset fingerprint. Width must be a power of two so that
// `code mod width` touches every bit position uniformly.
// ---------------------------------------------------------------------

struct Fingerprint {
  int width = 0;
  std::vector<uint64_t> words;

  explicit Fingerprint(int w = 2048) : width(w) {
    if (w < 1 || (w & (w - 1)) != 0) {
      throw std::invalid_argument("Fingerprint: width must be a positive power of two");
    }
    words.assign(static_cast<size_t>((w + 63) / 64), 0);
  }

  void set_code(uint64_t code) {
    const uint64_t bit = code % static_cast<uint64_t>(width);
    words[static_cast<size_t>(bit / 64)] |= uint64_t{1} << (bit % 64);
  }

  bool test(int bit) const {
    return (words[static_cast<size_t>(bit / 64)] >> (bit % 64)) & 1;
  }

  int popcount() const {
    int n = 0;
    for (uint64_t w : words) n += std::popcount(w);
    return n;
  }

  bool operator==(const Fingerprint&) const = default;
};

// ---------------------------------------------------------------------
// Morgan circular fingerprint. Every atom contributes one 64-bit code
// per round; every code sets one bit. Codes hash a fixed byte
// serialization with FNV-1a 64, so fingerprints are identical across
// platforms and implementations that follow the same layout:
//   atom code   : 0x01, u32 symbol length, symbol bytes,
//                 u32 degree, u32 twice-the-bond-order-sum
//   round code  : 0x02, u32 round, u64 own previous code,
//                 u32 neighbor count, then per neighbor in ascending
//                 (u32 bond category, u64 neighbor previous code) order
// All integers little-endian. Doubling the order sum keeps the
// aromatic 1.5 contribution integral.
// ---------------------------------------------------------------------

namespace metrics_detail {

struct Fnv1a64 {
  uint64_t h = 0xcbf29ce484222325ULL;

  void byte(uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  void u32(uint32_t v) {
    for (int k = 0; k < 4; ++k) byte(static_cast<uint8_t>((v >> (8 * k)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int k = 0; k < 8; ++k) byte(static_cast<uint8_t>((v >> (8 * k)) & 0xff));
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    for (char c : s) byte(static_cast<uint8_t>(c));
  }
};

inline uint64_t atom_code(const MolGraph& g, int i) {
  Fnv1a64 f;
  f.byte(0x01);
  f.str(g.atom_kind(i).symbol);
  f.u32(static_cast<uint32_t>(g.degree(i)));
  f.u32(static_cast<uint32_t>(std::lround(2.0 * g.bond_order_sum(i))));
  return f.h;
}

inline uint64_t round_code(int round, uint64_t own,
                           const std::vector<std::pair<uint32_t, uint64_t>>& neighbors) {
  Fnv1a64 f;
  f.byte(0x02);
  f.u32(static_cast<uint32_t>(round));
  f.u64(own);
  f.u32(static_cast<uint32_t>(neighbors.size()));
  for (const auto& [cat, code] : neighbors) {
    f.u32(cat);
    f.u64(code);
  }
  return f.h;
}

}  // namespace metrics_detail

inline Fingerprint morgan_fingerprint(const MolGraph& g, int radius = 2, int width = 2048) {
  if (radius < 0) throw std::invalid_argument("morgan_fingerprint: negative radius");
  Fingerprint fp(width);
  const int n = g.size();
  std::vector<uint64_t> code(static_cast<size_t>(n)), next(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    code[static_cast<size_t>(i)] = metrics_detail::atom_code(g, i);
    fp.set_code(code[static_cast<size_t>(i)]);
  }
  for (int r = 1; r <= radius; ++r) {
    for (int v = 0; v < n; ++v) {
      std::vector<std::pair<uint32_t, uint64_t>> neighbors;
      for (int u = 0; u < n; ++u) {
        const BondCat cat = u == v ? BondCat::None : g.bond(v, u);
        if (cat == BondCat::None) continue;
        neighbors.emplace_back(static_cast<uint32_t>(cat), code[static_cast<size_t>(u)]);
      }
      std::sort(neighbors.begin(), neighbors.end());
      next[static_cast<size_t>(v)] = metrics_detail::round_code(r, code[static_cast<size_t>(v)], neighbors);
    }
    code.swap(next);
    for (int v = 0; v < n; ++v) fp.set_code(code[static_cast<size_t>(v)]);
  }
  return fp;
}

inline double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.width != b.width) throw WidthMismatchError(a.width, b.width);
  int inter = 0, uni = 0;
  for (size_t k = 0; k < a.words.size(); ++k) {
    inter += std::popcount(a.words[k] & b.words[k]);
    uni += std::popcount(a.words[k] | b.words[k]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------
// Report assembly. A generation that failed to parse (or decode) is a
// missing graph; it counts against validity, exactness, and similarity.
// An invalid-but-parseable generation scores zero similarity as well:
// similarity is only meaningful between two valid molecules.
// ---------------------------------------------------------------------

struct EvalPair {
  std::optional<MolGraph> generated;  // nullopt: unparseable or decode failure
  MolGraph reference;
  std::string generated_text;  // verbatim output; empty when absent
  std::string reference_text;  // filled from the reference when empty
};

struct InstanceRecord {
  std::string reference_smiles;
  std::string generated_smiles;
  bool parsed = false;
  bool valid = false;
  bool exact = false;
  double fts = 0.0;
};

struct EvalReport {
  int n_total = 0;
  double valid_fraction = 0.0;
  double exact_fraction = 0.0;
  double morgan_fts_mean = 0.0;
  std::vector<InstanceRecord> records;

  nlohmann::json to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const InstanceRecord& r : records) {
      recs.push_back({{"reference_smiles", r.reference_smiles},
                      {"generated_smiles", r.generated_smiles},
                      {"parsed", r.parsed},
                      {"valid", r.valid},
                      {"exact", r.exact},
                      {"fts", r.fts}});
    }
    // The null slots hold metrics this build does not compute; readers
    // of the report can rely on the keys being present.
    return {{"n_total", n_total},
            {"valid_fraction", valid_fraction},
            {"exact_fraction", exact_fraction},
            {"morgan_fts_mean", morgan_fts_mean},
            {"maccs_fts_mean", nullptr},
            {"rdk_fts_mean", nullptr},
            {"fcd", nullptr},
            {"records", recs}};
  }

  std::string to_csv() const {
    auto field = [](const std::string& s) {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) {
        if (c == '"') q += '"';
        q += c;
      }
      return q + "\"";
    };
    std::ostringstream os;
    os << "reference_smiles,generated_smiles,valid,exact,fts\n";
    for (const InstanceRecord& r : records) {
      os << field(r.reference_smiles) << ',' << field(r.generated_smiles) << ','
         << (r.valid ? 1 : 0) << ',' << (r.exact ? 1 : 0) << ',' << r.fts << '\n';
    }
    return os.str();
  }
};

inline EvalReport evaluate(const std::vector<EvalPair>& pairs, int radius = 2, int width = 2048) {
  if (pairs.empty()) throw EmptyInputError();
  EvalReport report;
  report.n_total = static_cast<int>(pairs.size());
  int n_valid = 0, n_exact = 0;
  double fts_sum = 0.0;
  for (const EvalPair& p : pairs) {
    if (!is_valid(p.reference).valid) {
      throw std::invalid_argument("evaluate: reference molecule violates valence limits");
    }
    InstanceRecord rec;
    rec.reference_smiles = p.reference_text.empty() ? write_smiles(p.reference) : p.reference_text;
    rec.parsed = p.generated.has_value();
    if (rec.parsed) {
      rec.generated_smiles =
          p.generated_text.empty() ? write_smiles(*p.generated) : p.generated_text;
      rec.valid = is_valid(*p.generated).valid;
      rec.exact = exact_match(*p.generated, p.reference);
      if (rec.valid) {
        rec.fts = tanimoto(morgan_fingerprint(*p.generated, radius, width),
                           morgan_fingerprint(p.reference, radius, width));
      }
    } else {
      rec.generated_smiles = p.generated_text;
    }
    n_valid += rec.valid ? 1 : 0;
    n_exact += rec.exact ? 1 : 0;
    fts_sum += rec.fts;
    report.records.push_back(std::move(rec));
  }
  const double n = static_cast<double>(report.n_total);
  report.valid_fraction = n_valid / n;
  report.exact_fraction = n_exact / n;
  report.morgan_fts_mean = fts_sum / n;
  return report;
}

// Text-level convenience: parse each generated line (failures become
// missing graphs), parse references strictly.
inline EvalReport evaluate_smiles(const std::vector<std::pair<std::string, std::string>>& gen_ref,
                                  const AtomTable& table = AtomTable::standard(), int radius = 2,
                                  int width = 2048) {
  std::vector<EvalPair> pairs;
  for (const auto& [gen, ref] : gen_ref) {
    EvalPair p{std::nullopt, parse_smiles(ref, nullptr, table), gen, ref};
    try {
      p.generated = parse_smiles(gen, nullptr, table);
    } catch (const SmilesError&) {
      p.generated = std::nullopt;
    }
    pairs.push_back(std::move(p));
  }
  return evaluate(pairs, radius, width);
}

}  // namespace moldiff
