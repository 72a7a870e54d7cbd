//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#include "moldiff/io.hpp"

#include <gtest/gtest.h>

#include <string>
#include <vector>

#include <json.hpp>

namespace moldiff {
namespace {

std::string tmp(const std::string& name) { return ::testing::TempDir() + "/" + name; }

TEST(Tsv, ReadsGoodRowsAndLogsSkips) {
  const std::string path = tmp("data.tsv");
  write_text(path,
             "r1\tCCO\tan alcohol\n"
             "r2\tC1CCCCC1\ta ring\n"
             "broken-no-tabs\n"
             "r3\tC((\tbad smiles\n"
             "r4\tC#C#C\tvalence violation\n"
             "r5\tCCN\tan amine\n");
  std::vector<std::string> skipped;
  std::vector<DatasetRecord> records = read_tsv_dataset(path, &skipped);
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].id, "r1");
  EXPECT_EQ(records[0].smiles, "CCO");
  EXPECT_EQ(records[0].description, "an alcohol");
  EXPECT_TRUE(records[0].source_smiles.empty());
  EXPECT_EQ(records[2].id, "r5");
  ASSERT_EQ(skipped.size(), 3u);
  EXPECT_NE(skipped[0].find(":3:"), std::string::npos);  // line numbers in reasons
  EXPECT_NE(skipped[1].find("does not parse"), std::string::npos);
  EXPECT_NE(skipped[2].find("valence"), std::string::npos);
}

TEST(Tsv, WriteReadRoundTrip) {
  const std::string path = tmp("round.tsv");
  std::vector<DatasetRecord> in = {{"a", "CCO", "first molecule", ""},
                                   {"b", "CCN", "second molecule", ""}};
  write_tsv_dataset(path, in);
  std::vector<DatasetRecord> out = read_tsv_dataset(path);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].id, "b");
  EXPECT_EQ(out[1].smiles, "CCN");
  EXPECT_EQ(out[1].description, "second molecule");
}

TEST(Tsv, MissingFileThrows) {
  EXPECT_THROW(read_tsv_dataset(tmp("no-such-file.tsv")), FileError);
}

TEST(Jsonl, ReadsEditingRecords) {
  const std::string path = tmp("edit.jsonl");
  write_text(path,
             R"({"instruction":"propose a potential product","input":"CCO","output":"CC=O"})"
             "\n"
             "this is not json\n"
             R"({"instruction":"demethylate","input":"CC(N)C","output":"C(("})"
             "\n"
             R"({"instruction":"no source given","output":"CCN"})"
             "\n");
  std::vector<std::string> skipped;
  std::vector<DatasetRecord> records = read_jsonl_editing(path, &skipped);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].description, "propose a potential product");
  EXPECT_EQ(records[0].source_smiles, "CCO");
  EXPECT_EQ(records[0].smiles, "CC=O");
  EXPECT_TRUE(records[1].source_smiles.empty());
  ASSERT_EQ(skipped.size(), 2u);
  EXPECT_NE(skipped[0].find("malformed"), std::string::npos);
  EXPECT_NE(skipped[1].find("does not parse"), std::string::npos);
}

TEST(Prompt, WrapsDescription) {
  EXPECT_EQ(format_prompt("a carbon ring of size six"),
            "'a carbon ring of size six' is the description of molecule:");
}

TEST(Encode, BuildsInstancesAndSkipsOversizedTargets) {
  std::vector<DatasetRecord> records = {{"a", "CCO", "an alcohol", ""},
                                        {"b", "CCCCCCCCCCCCC", "thirteen carbons", ""},
                                        {"c", "CC=O", "propose a potential product", "CCO"}};
  Vocabulary vocab = Vocabulary::build(
      {"an alcohol thirteen carbons propose a potential product is the description of molecule"},
      1);
  std::vector<std::string> skipped;
  std::vector<TokenSequence> seqs = encode_dataset(vocab, records, 12, &skipped);
  ASSERT_EQ(seqs.size(), 2u);
  ASSERT_EQ(skipped.size(), 1u);
  EXPECT_NE(skipped[0].find("13 atoms"), std::string::npos);

  EXPECT_EQ(seqs[0].m, 12);
  EXPECT_EQ(seqs[0].m_src, 0);  // generation instance: no source graph
  EXPECT_GT(seqs[1].m_src, 0);  // editing instance carries the source
  // The generation prompt is applied to plain records.
  EXPECT_EQ(seqs[0].token_ids[0], vocab.text_id("'"));
}

TEST(Lines, RoundTripPreservesEmptyLines) {
  const std::string path = tmp("lines.txt");
  std::vector<std::string> in = {"CCO", "", "CCN"};
  write_lines(path, in);
  EXPECT_EQ(read_lines(path), in);
}

TEST(Digest, TracksContent) {
  const std::string p1 = tmp("d1.bin"), p2 = tmp("d2.bin"), p3 = tmp("d3.bin");
  write_text(p1, "same bytes");
  write_text(p2, "same bytes");
  write_text(p3, "other bytes");
  EXPECT_EQ(file_digest(p1), file_digest(p2));
  EXPECT_NE(file_digest(p1), file_digest(p3));
  EXPECT_THROW(file_digest(tmp("missing.bin")), FileError);
}

TEST(Manifest, RecordsConfigSeedAndInputDigests) {
  const std::string input = tmp("input.tsv");
  write_text(input, "r1\tCCO\talcohol\n");
  const std::string path = tmp("manifest.json");
  write_manifest(path, "train", {{"epochs", 5}, {"lr", 0.001}}, 42, {input});

  std::string all;
  for (const std::string& l : read_lines(path)) all += l + "\n";
  nlohmann::json j = nlohmann::json::parse(all);
  EXPECT_EQ(j.at("command").get<std::string>(), "train");
  EXPECT_EQ(j.at("version").get<std::string>(), kVersionString);
  EXPECT_EQ(j.at("seed").get<uint64_t>(), 42u);
  EXPECT_EQ(j.at("config").at("epochs").get<int>(), 5);
  char hex[20];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(file_digest(input)));
  EXPECT_EQ(j.at("inputs").at(input).get<std::string>(), hex);
}

TEST(Accum, ParsesSchedules) {
  std::vector<AccumStage> stages = parse_accumulation("0:1,2:4,30:16");
  ASSERT_EQ(stages.size(), 3u);
  EXPECT_EQ(stages[1].epoch, 2);
  EXPECT_EQ(stages[1].steps, 4);
  EXPECT_THROW(parse_accumulation(""), std::invalid_argument);
  EXPECT_THROW(parse_accumulation("0-1"), std::invalid_argument);
  EXPECT_THROW(parse_accumulation("a:b"), std::invalid_argument);
}

TEST(Trace, RowSerializesAllFields) {
  nlohmann::json j = trace_row_to_json({7, 1.5, 1.0, 0.25, 0.25});
  EXPECT_EQ(j.at("step").get<int64_t>(), 7);
  EXPECT_DOUBLE_EQ(j.at("loss").get<double>(), 1.5);
  EXPECT_DOUBLE_EQ(j.at("node_loss").get<double>(), 1.0);
}

}  // namespace
}  // namespace moldiff
