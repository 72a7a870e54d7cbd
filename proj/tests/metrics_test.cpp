//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#include "moldiff/metrics.hpp"

#include <gtest/gtest.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moldiff/rng.hpp"
#include "test_oracles.hpp"

namespace moldiff {
namespace {

// Independent FNV-1a over an explicit byte list; the tests below spell
// out every byte of the documented code serialization by hand.
uint64_t fnv(const std::vector<uint8_t>& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void push_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int k = 0; k < 4; ++k) v.push_back(static_cast<uint8_t>((x >> (8 * k)) & 0xff));
}

void push_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int k = 0; k < 8; ++k) v.push_back(static_cast<uint8_t>((x >> (8 * k)) & 0xff));
}

uint64_t hand_atom_code(char symbol, uint32_t degree, uint32_t order_x2) {
  std::vector<uint8_t> b{0x01};
  push_u32(b, 1);  // symbol length
  b.push_back(static_cast<uint8_t>(symbol));
  push_u32(b, degree);
  push_u32(b, order_x2);
  return fnv(b);
}

uint64_t hand_round_code(uint32_t round, uint64_t own,
                         std::vector<std::pair<uint32_t, uint64_t>> neighbors) {
  std::sort(neighbors.begin(), neighbors.end());
  std::vector<uint8_t> b{0x02};
  push_u32(b, round);
  push_u64(b, own);
  push_u32(b, static_cast<uint32_t>(neighbors.size()));
  for (auto& [cat, code] : neighbors) {
    push_u32(b, cat);
    push_u64(b, code);
  }
  return fnv(b);
}

Fingerprint from_codes(const std::vector<uint64_t>& codes, int width = 2048) {
  Fingerprint fp(width);
  for (uint64_t c : codes) fp.set_code(c);
  return fp;
}

// --- fingerprints ---------------------------------------------------------

TEST(Fingerprint, DeterministicForIdenticalGraphs) {
  MolGraph a = parse_smiles("CC(O)N");
  MolGraph b = parse_smiles("CC(O)N");
  EXPECT_EQ(morgan_fingerprint(a), morgan_fingerprint(b));
}

TEST(Fingerprint, DistinctSingleAtomsDiffer) {
  Fingerprint c = morgan_fingerprint(parse_smiles("C"));
  Fingerprint o = morgan_fingerprint(parse_smiles("O"));
  EXPECT_NE(c, o);
  // One code per round: the round hash chains the previous code, so an
  // isolated atom still emits radius+1 distinct codes.
  EXPECT_EQ(c.popcount(), 3);
  EXPECT_EQ(o.popcount(), 3);
}

TEST(Fingerprint, WidthMustBePositivePowerOfTwo) {
  MolGraph g = parse_smiles("CC");
  EXPECT_THROW(morgan_fingerprint(g, 2, 1000), std::invalid_argument);
  EXPECT_THROW(morgan_fingerprint(g, 2, 0), std::invalid_argument);
  EXPECT_THROW(morgan_fingerprint(g, -1, 2048), std::invalid_argument);
  EXPECT_NO_THROW(morgan_fingerprint(g, 2, 256));
}

// Ethane and ethanol, every code spelled out at radius 1. The terminal
// carbon's initial code is shared between the two molecules; the full
// code sets match the implementation bit for bit.
TEST(Fingerprint, HandEnumeratedEthaneAndEthanol) {
  const uint32_t kSingle = 1;  // bond-category value used in the serialization

  // CC: two carbons, each degree 1, bond-order sum 1 (stored doubled).
  const uint64_t cc_c = hand_atom_code('C', 1, 2);
  const uint64_t cc_c_r1 = hand_round_code(1, cc_c, {{kSingle, cc_c}});
  Fingerprint cc_expected = from_codes({cc_c, cc_c_r1});
  EXPECT_EQ(morgan_fingerprint(parse_smiles("CC"), 1), cc_expected);

  // CCO: terminal carbon, middle carbon (degree 2), hydroxyl oxygen.
  const uint64_t eth_c_end = hand_atom_code('C', 1, 2);
  const uint64_t eth_c_mid = hand_atom_code('C', 2, 4);
  const uint64_t eth_o = hand_atom_code('O', 1, 2);
  const uint64_t eth_c_end_r1 = hand_round_code(1, eth_c_end, {{kSingle, eth_c_mid}});
  const uint64_t eth_c_mid_r1 =
      hand_round_code(1, eth_c_mid, {{kSingle, eth_c_end}, {kSingle, eth_o}});
  const uint64_t eth_o_r1 = hand_round_code(1, eth_o, {{kSingle, eth_c_mid}});
  Fingerprint eth_expected =
      from_codes({eth_c_end, eth_c_mid, eth_o, eth_c_end_r1, eth_c_mid_r1, eth_o_r1});
  EXPECT_EQ(morgan_fingerprint(parse_smiles("CCO"), 1), eth_expected);

  // Radius-0 code sets share exactly the terminal-carbon code.
  EXPECT_EQ(eth_c_end, cc_c);
  EXPECT_NE(eth_c_mid, cc_c);
  EXPECT_NE(eth_o, cc_c);
}

TEST(Fingerprint, InvariantUnderRelabeling) {
  Prng rng(404);
  for (int iter = 0; iter < 100; ++iter) {
    MolGraph g = moldiff::testing::random_graph(rng, 2 + static_cast<int>(rng.next_below(6)));
    Fingerprint base = morgan_fingerprint(g);
    MolGraph relabeled = moldiff::testing::permute_graph(g, rng.permutation(g.size()));
    EXPECT_EQ(morgan_fingerprint(relabeled), base);
  }
}

// --- Tanimoto ---------------------------------------------------------------

TEST(Tanimoto, KnownSetOverlap) {
  Fingerprint a = from_codes({1, 2, 3});
  Fingerprint b = from_codes({2, 3, 4});
  EXPECT_DOUBLE_EQ(tanimoto(a, b), 0.5);  // |{2,3}| / |{1,2,3,4}|
  EXPECT_DOUBLE_EQ(tanimoto(a, a), 1.0);
  EXPECT_DOUBLE_EQ(tanimoto(from_codes({1, 2}), from_codes({3, 4})), 0.0);
  EXPECT_DOUBLE_EQ(tanimoto(from_codes({}), from_codes({})), 1.0);  // both empty
}

TEST(Tanimoto, SymmetricReflexiveBounded) {
  Prng rng(405);
  for (int iter = 0; iter < 1000; ++iter) {
    std::vector<uint64_t> ca, cb;
    const int na = static_cast<int>(rng.next_below(40));
    const int nb = static_cast<int>(rng.next_below(40));
    for (int k = 0; k < na; ++k) ca.push_back(rng.next_u64());
    for (int k = 0; k < nb; ++k) cb.push_back(rng.next_u64());
    Fingerprint a = from_codes(ca), b = from_codes(cb);
    const double ab = tanimoto(a, b);
    EXPECT_DOUBLE_EQ(ab, tanimoto(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_DOUBLE_EQ(tanimoto(a, a), 1.0);
  }
}

TEST(Tanimoto, WidthMismatchThrows) {
  EXPECT_THROW(tanimoto(Fingerprint(2048), Fingerprint(1024)), WidthMismatchError);
}

// --- evaluation -------------------------------------------------------------

TEST(Eval, IdentityScoresPerfect) {
  std::vector<std::pair<std::string, std::string>> pairs = {
      {"CCO", "CCO"}, {"C1CCCCC1", "C1CCCCC1"}, {"CC(N)O", "CC(N)O"}};
  EvalReport r = evaluate_smiles(pairs);
  EXPECT_EQ(r.n_total, 3);
  EXPECT_DOUBLE_EQ(r.valid_fraction, 1.0);
  EXPECT_DOUBLE_EQ(r.exact_fraction, 1.0);
  EXPECT_DOUBLE_EQ(r.morgan_fts_mean, 1.0);
}

TEST(Eval, ExactMatchSurvivesRewriting) {
  // Same molecule, different SMILES spellings.
  EvalReport r = evaluate_smiles({{"OCC", "CCO"}, {"C(C)(C)C", "CC(C)C"}});
  EXPECT_DOUBLE_EQ(r.exact_fraction, 1.0);
  EXPECT_DOUBLE_EQ(r.morgan_fts_mean, 1.0);
}

TEST(Eval, AllUnparseableScoresZero) {
  EvalReport r = evaluate_smiles({{"", "CCO"}, {"C((", "CC"}, {"xyz", "CCN"}});
  EXPECT_DOUBLE_EQ(r.valid_fraction, 0.0);
  EXPECT_DOUBLE_EQ(r.exact_fraction, 0.0);
  EXPECT_DOUBLE_EQ(r.morgan_fts_mean, 0.0);
  for (const InstanceRecord& rec : r.records) {
    EXPECT_FALSE(rec.parsed);
    EXPECT_FALSE(rec.valid);
  }
}

TEST(Eval, HandCountedMixedSet) {
  // Four instances: two exact, one valid-but-different, one unparseable.
  std::vector<std::pair<std::string, std::string>> pairs = {
      {"CCO", "CCO"},       // exact
      {"OCC", "CCO"},       // exact through a different spelling
      {"CCC", "CCO"},       // valid, not exact
      {"not-a-molecule", "CCO"}};
  EvalReport r = evaluate_smiles(pairs);
  EXPECT_EQ(r.n_total, 4);
  EXPECT_DOUBLE_EQ(r.valid_fraction, 0.75);
  EXPECT_DOUBLE_EQ(r.exact_fraction, 0.5);
  const double cross =
      tanimoto(morgan_fingerprint(parse_smiles("CCC")), morgan_fingerprint(parse_smiles("CCO")));
  EXPECT_DOUBLE_EQ(r.morgan_fts_mean, (1.0 + 1.0 + cross + 0.0) / 4.0);
  EXPECT_GT(cross, 0.0);  // shares the terminal-carbon neighborhoods
  EXPECT_LT(cross, 1.0);
}

TEST(Eval, ParseableButInvalidScoresZeroSimilarity) {
  // Central carbon with two triple bonds: order sum 6 exceeds carbon's 4.
  EvalReport r = evaluate_smiles({{"C#C#C", "CCC"}});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(r.records[0].parsed);
  EXPECT_FALSE(r.records[0].valid);
  EXPECT_DOUBLE_EQ(r.records[0].fts, 0.0);
  EXPECT_DOUBLE_EQ(r.valid_fraction, 0.0);
}

TEST(Eval, ExactImpliesUnitSimilarity) {
  Prng rng(406);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int k = 0; k < 30; ++k) {
    MolGraph g = moldiff::testing::random_graph(rng, 2 + static_cast<int>(rng.next_below(5)));
    if (!is_valid(g).valid) continue;
    std::string s = write_smiles(g);
    pairs.emplace_back(s, s);
    MolGraph other = moldiff::testing::random_graph(rng, 2 + static_cast<int>(rng.next_below(5)));
    if (is_valid(other).valid) pairs.emplace_back(write_smiles(other), s);
  }
  ASSERT_FALSE(pairs.empty());
  EvalReport r = evaluate_smiles(pairs);
  for (const InstanceRecord& rec : r.records) {
    if (rec.exact) EXPECT_DOUBLE_EQ(rec.fts, 1.0);
  }
}

TEST(Eval, EmptyInputThrows) {
  EXPECT_THROW(evaluate({}), EmptyInputError);
  EXPECT_THROW(evaluate_smiles({}), EmptyInputError);
}

TEST(Eval, InvalidReferenceRejected) {
  EXPECT_THROW(evaluate_smiles({{"CCO", "C#C#C"}}), std::invalid_argument);
}

TEST(Eval, JsonAndCsvCarryAllInstances) {
  EvalReport r = evaluate_smiles({{"CCO", "CCO"}, {"bad(", "CC"}});
  nlohmann::json j = r.to_json();
  EXPECT_EQ(j.at("n_total").get<int>(), 2);
  EXPECT_DOUBLE_EQ(j.at("valid_fraction").get<double>(), 0.5);
  EXPECT_TRUE(j.at("maccs_fts_mean").is_null());
  EXPECT_TRUE(j.at("rdk_fts_mean").is_null());
  EXPECT_TRUE(j.at("fcd").is_null());
  EXPECT_EQ(j.at("records").size(), 2u);
  EXPECT_EQ(j.at("records")[1].at("generated_smiles").get<std::string>(), "bad(");

  const std::string csv = r.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);  // header + two rows
  EXPECT_EQ(csv.rfind("reference_smiles,generated_smiles,valid,exact,fts\n", 0), 0u);
  EXPECT_NE(csv.find("CCO,CCO,1,1,1"), std::string::npos);
}

}  // namespace
}  // namespace moldiff
