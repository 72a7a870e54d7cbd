//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moldiff/molgraph.hpp"
#include "moldiff/training.hpp"
#include "moldiff/vocab.hpp"

namespace moldiff {

inline constexpr const char* kVersionString = "moldiff 0.1.0";

class FileError : public std::runtime_error {
 public:
  explicit FileError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------
// Datasets. TSV rows are id<TAB>smiles<TAB>description; editing pairs
// arrive as JSONL {instruction, input, output}. Records that do not
// parse (or violate valence) are skipped with a logged reason instead
// of aborting the load.
// ---------------------------------------------------------------------

struct DatasetRecord {
  std::string id;
  std::string smiles;        // target molecule
  std::string description;   // instruction text
  std::string source_smiles; // non-empty only for editing records
};

namespace io_detail {

inline bool record_ok(const DatasetRecord& rec, const AtomTable& table, std::string& reason) {
  auto check = [&](const std::string& smiles, const char* label) {
    try {
      MolGraph g = parse_smiles(smiles, nullptr, table);
      if (!is_valid(g).valid) {
        reason = std::string(label) + " violates valence limits: " + smiles;
        return false;
      }
    } catch (const SmilesError& e) {
      reason = std::string(label) + " does not parse: " + smiles + " (" + e.what() + ")";
      return false;
    }
    return true;
  };
  if (!check(rec.smiles, "target")) return false;
  if (!rec.source_smiles.empty() && !check(rec.source_smiles, "source")) return false;
  return true;
}

}  // namespace io_detail

inline std::vector<DatasetRecord> read_tsv_dataset(const std::string& path,
                                                   std::vector<std::string>* skipped = nullptr,
                                                   const AtomTable& table = AtomTable::standard()) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot open dataset " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      if (skipped) {
        skipped->push_back(path + ":" + std::to_string(lineno) + ": expected three columns");
      }
      continue;
    }
    DatasetRecord rec{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1),
                      ""};
    std::string reason;
    if (!io_detail::record_ok(rec, table, reason)) {
      if (skipped) skipped->push_back(path + ":" + std::to_string(lineno) + ": " + reason);
      continue;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<DatasetRecord> read_jsonl_editing(
    const std::string& path, std::vector<std::string>* skipped = nullptr,
    const AtomTable& table = AtomTable::standard()) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot open dataset " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    DatasetRecord rec;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      rec.id = path + ":" + std::to_string(lineno);
      rec.description = j.at("instruction").get<std::string>();
      rec.source_smiles = j.value("input", std::string{});
      rec.smiles = j.at("output").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      if (skipped) {
        skipped->push_back(path + ":" + std::to_string(lineno) + ": malformed record (" +
                           e.what() + ")");
      }
      continue;
    }
    std::string reason;
    if (!io_detail::record_ok(rec, table, reason)) {
      if (skipped) skipped->push_back(path + ":" + std::to_string(lineno) + ": " + reason);
      continue;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline void write_tsv_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FileError("cannot open " + path + " for writing");
  for (const DatasetRecord& r : records) {
    f << r.id << '\t' << r.smiles << '\t' << r.description << '\n';
  }
  if (!f) throw FileError("short write to " + path);
}

// Generation prompt wrapping a dataset description.
inline std::string format_prompt(const std::string& description) {
  return "'" + description + "' is the description of molecule:";
}

// Encodes records into model instances. Records whose molecules exceed
// the slot budget are skipped with a logged reason.
inline std::vector<TokenSequence> encode_dataset(const Vocabulary& vocab,
                                                 const std::vector<DatasetRecord>& records, int m,
                                                 std::vector<std::string>* skipped = nullptr) {
  std::vector<TokenSequence> out;
  for (const DatasetRecord& rec : records) {
    MolGraph target = parse_smiles(rec.smiles, nullptr, vocab.table());
    if (target.size() > m) {
      if (skipped) {
        skipped->push_back(rec.id + ": target has " + std::to_string(target.size()) +
                           " atoms but only " + std::to_string(m) + " slots");
      }
      continue;
    }
    if (rec.source_smiles.empty()) {
      out.push_back(encode_instance(vocab, format_prompt(rec.description), nullptr, &target, m));
    } else {
      MolGraph source = parse_smiles(rec.source_smiles, nullptr, vocab.table());
      out.push_back(encode_instance(vocab, rec.description, &source, &target, m));
    }
  }
  return out;
}

// ---------------------------------------------------------------------
// Plain line files, digests, manifests, traces.
// ---------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FileError("cannot open " + path + " for writing");
  for (const std::string& l : lines) f << l << '\n';
  if (!f) throw FileError("short write to " + path);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileError("cannot open " + path + " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw FileError("short write to " + path);
}

inline uint64_t file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (f.read(buf, sizeof buf) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// Every run directory gets a manifest carrying everything needed to
// reproduce the run: the resolved configuration, the seed, and digests
// of the input artifacts.
inline void write_manifest(const std::string& path, const std::string& command,
                           const nlohmann::json& config, uint64_t seed,
                           const std::vector<std::string>& input_paths) {
  nlohmann::json inputs = nlohmann::json::object();
  for (const std::string& in : input_paths) {
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(file_digest(in)));
    inputs[in] = hex;
  }
  nlohmann::json manifest = {{"command", command},
                             {"version", kVersionString},
                             {"seed", seed},
                             {"config", config},
                             {"inputs", inputs}};
  write_text(path, manifest.dump(2) + "\n");
}

inline nlohmann::json trace_row_to_json(const TraceRow& row) {
  return {{"step", row.step},
          {"loss", row.loss},
          {"node_loss", row.node_loss},
          {"edge_loss", row.edge_loss},
          {"text_loss", row.text_loss}};
}

// Parses an accumulation schedule of the form "epoch:steps,epoch:steps".
inline std::vector<AccumStage> parse_accumulation(const std::string& text) {
  std::vector<AccumStage> stages;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("accumulation stage '" + item + "' is not epoch:steps");
    }
    try {
      stages.push_back({std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
    } catch (const std::exception&) {
      throw std::invalid_argument("accumulation stage '" + item + "' is not epoch:steps");
    }
  }
  if (stages.empty()) throw std::invalid_argument("empty accumulation schedule");
  return stages;
}

}  // namespace moldiff
