//
// Project moldiff - Copyright 2026 the moldiff authors.
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moldiff/denoiser.hpp"
#include "moldiff/diffusion.hpp"
#include "moldiff/io.hpp"
#include "moldiff/metrics.hpp"
#include "moldiff/molgraph.hpp"
#include "moldiff/rng.hpp"
#include "moldiff/toygen.hpp"
#include "moldiff/training.hpp"
#include "moldiff/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kParamsInitStream = 0xA0;
constexpr uint64_t kChainStream = 0x5A;

moldiff::Vocabulary load_vocab(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw moldiff::FileError("cannot open vocabulary " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return moldiff::Vocabulary::from_json(text);
}

void log_skipped(const std::vector<std::string>& skipped) {
  for (const std::string& s : skipped) std::fprintf(stderr, "skipped: %s\n", s.c_str());
}

std::vector<moldiff::DatasetRecord> load_records(const std::string& path) {
  std::vector<std::string> skipped;
  std::vector<moldiff::DatasetRecord> records =
      path.size() > 6 && path.substr(path.size() - 6) == ".jsonl"
          ? moldiff::read_jsonl_editing(path, &skipped)
          : moldiff::read_tsv_dataset(path, &skipped);
  log_skipped(skipped);
  return records;
}

// Shared options for the two optimization commands.
struct FitOptions {
  std::string corpus, vocab_path, out_dir;
  int epochs = 10;
  int batch_size = 16;
  std::string accumulation = "0:1";
  double learning_rate = 5e-5;
  uint64_t seed = 42;
  int m = 12;
  int layers = 4, d_hidden = 128, heads = 4, max_positions = 64;
  int checkpoint_every = 200;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--corpus", corpus, "dataset (.tsv rows or .jsonl editing pairs)")
        ->required();
    cmd->add_option("--vocab", vocab_path, "vocabulary JSON")->required();
    cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_option("--epochs", epochs, "number of passes over the dataset");
    cmd->add_option("--batch-size", batch_size, "instances per micro-batch");
    cmd->add_option("--accumulation", accumulation,
                    "gradient accumulation schedule, epoch:steps[,epoch:steps...]");
    cmd->add_option("--lr", learning_rate, "AdamW learning rate");
    cmd->add_option("--seed", seed, "master RNG seed");
    cmd->add_option("--m", m, "target slot count (molecule size budget)");
    cmd->add_option("--layers", layers, "transformer layers (ignored when restoring)");
    cmd->add_option("--d-hidden", d_hidden, "hidden width (ignored when restoring)");
    cmd->add_option("--heads", heads, "attention heads (ignored when restoring)");
    cmd->add_option("--max-positions", max_positions, "position budget (ignored when restoring)");
    cmd->add_option("--checkpoint-every", checkpoint_every,
                    "save the checkpoint every N optimizer steps");
  }

  moldiff::DenoiserConfig model_config(const moldiff::Vocabulary& vocab) const {
    moldiff::DenoiserConfig cfg;
    cfg.layers = layers;
    cfg.d_hidden = d_hidden;
    cfg.heads = heads;
    cfg.max_positions = max_positions;
    cfg.token_vocab = vocab.size();
    cfg.max_target = m;
    return cfg;
  }

  json config_json() const {
    return {{"corpus", corpus},       {"vocab", vocab_path},
            {"out", out_dir},         {"epochs", epochs},
            {"batch_size", batch_size}, {"accumulation", accumulation},
            {"lr", learning_rate},    {"seed", seed},
            {"m", m},                 {"layers", layers},
            {"d_hidden", d_hidden},   {"heads", heads},
            {"max_positions", max_positions}, {"checkpoint_every", checkpoint_every}};
  }
};

// Appends trace rows as JSONL and snapshots the run every N updates.
struct RunSink {
  std::ofstream trace;
  std::string checkpoint_path;
  int every;
  const moldiff::Vocabulary& vocab;
  moldiff::DenoiserParams& params;
  moldiff::AdamWState& opt;
  uint64_t seed;
  moldiff::TrainState& cursor;

  std::function<void(const moldiff::TraceRow&)> callback() {
    return [this](const moldiff::TraceRow& row) {
      trace << moldiff::trace_row_to_json(row).dump() << "\n";
      trace.flush();
      if (every > 0 && row.step % every == 0) {
        moldiff::save_checkpoint(checkpoint_path, vocab, params, opt, seed, cursor);
      }
    };
  }
};

int run_gen_toy(const std::string& out_dir, int n_train, int n_test, uint64_t seed) {
  fs::create_directories(out_dir);
  moldiff::ToyCorpus corpus = moldiff::gen_toy(n_train, n_test, seed);
  auto to_dataset = [](const std::vector<moldiff::ToyRecord>& rs) {
    std::vector<moldiff::DatasetRecord> out;
    for (const moldiff::ToyRecord& r : rs) out.push_back({r.id, r.smiles, r.description, ""});
    return out;
  };
  moldiff::write_tsv_dataset(out_dir + "/train.tsv", to_dataset(corpus.train));
  moldiff::write_tsv_dataset(out_dir + "/test.tsv", to_dataset(corpus.test));
  moldiff::write_manifest(out_dir + "/manifest.json", "gen-toy",
                          {{"out", out_dir}, {"n_train", n_train}, {"n_test", n_test},
                           {"seed", seed}},
                          seed, {});
  std::printf("wrote %zu train and %zu test records under %s\n", corpus.train.size(),
              corpus.test.size(), out_dir.c_str());
  return 0;
}

int run_build_vocab(const std::vector<std::string>& corpus_paths, const std::string& out,
                    int min_count) {
  std::vector<std::string> lines;
  for (const std::string& path : corpus_paths) {
    for (const moldiff::DatasetRecord& rec : load_records(path)) {
      lines.push_back(rec.source_smiles.empty() ? moldiff::format_prompt(rec.description)
                                                : rec.description);
    }
  }
  moldiff::Vocabulary vocab = moldiff::Vocabulary::build(lines, min_count);
  moldiff::write_text(out, vocab.to_json() + "\n");
  moldiff::write_manifest(out + ".manifest.json", "build-vocab",
                          {{"corpus", corpus_paths}, {"out", out}, {"min_count", min_count}}, 0,
                          corpus_paths);
  std::printf("vocabulary of %d tokens (%d text) written to %s\n", vocab.size(),
              vocab.num_text_tokens(), out.c_str());
  return 0;
}

int run_fit(bool mlm, const FitOptions& opt_cli, double mask_probability,
            double text_mask_probability, int T, const std::string& resume,
            const std::string& init_from) {
  moldiff::Vocabulary vocab = load_vocab(opt_cli.vocab_path);
  std::vector<std::string> skipped;
  std::vector<moldiff::TokenSequence> data =
      moldiff::encode_dataset(vocab, load_records(opt_cli.corpus), opt_cli.m, &skipped);
  log_skipped(skipped);

  moldiff::TrainConfig tc;
  tc.learning_rate = opt_cli.learning_rate;
  tc.batch_size = opt_cli.batch_size;
  tc.accumulation = moldiff::parse_accumulation(opt_cli.accumulation);
  tc.T = T;
  tc.text_mask_probability = text_mask_probability;
  tc.seed = opt_cli.seed;
  tc.max_epochs = opt_cli.epochs;

  std::optional<moldiff::DenoiserParams> params;
  moldiff::AdamWState opt;
  moldiff::TrainState cursor;
  bool resumed = false;
  if (!resume.empty()) {
    moldiff::RestoredCheckpoint r = moldiff::load_checkpoint(resume, vocab);
    params.emplace(std::move(r.params));
    opt = std::move(r.opt);
    cursor = r.cursor;
    tc.seed = r.seed;  // continue the original randomness
    resumed = true;
  } else if (!init_from.empty()) {
    moldiff::RestoredCheckpoint r = moldiff::load_checkpoint(init_from, vocab);
    params.emplace(std::move(r.params));  // weights only: fresh optimizer and cursor
  } else {
    moldiff::Prng init = moldiff::derive_stream(opt_cli.seed, {kParamsInitStream});
    params.emplace(opt_cli.model_config(vocab), init);
  }

  fs::create_directories(opt_cli.out_dir);
  const std::string ck_path = opt_cli.out_dir + "/checkpoint.bin";
  RunSink sink{std::ofstream(opt_cli.out_dir + "/trace.jsonl",
                             resumed ? std::ios::app : std::ios::trunc),
               ck_path,     opt_cli.checkpoint_every,
               vocab,       *params,
               opt,         tc.seed,
               cursor};

  json config = opt_cli.config_json();
  config["resume"] = resume;
  config["init_from"] = init_from;
  std::vector<moldiff::TraceRow> trace;
  if (mlm) {
    config["mask_probability"] = mask_probability;
    trace = moldiff::pretrain_mlm(vocab, *params, opt, data, tc, mask_probability, &cursor, -1,
                                  sink.callback());
  } else {
    config["T"] = T;
    config["text_mask_probability"] = text_mask_probability;
    trace = moldiff::train_loop(vocab, *params, opt, data, tc, cursor, -1, sink.callback());
  }
  moldiff::save_checkpoint(ck_path, vocab, *params, opt, tc.seed, cursor);

  std::vector<std::string> inputs = {opt_cli.corpus, opt_cli.vocab_path};
  if (!resume.empty()) inputs.push_back(resume);
  if (!init_from.empty()) inputs.push_back(init_from);
  moldiff::write_manifest(opt_cli.out_dir + "/manifest.json", mlm ? "pretrain" : "train", config,
                          tc.seed, inputs);
  if (!trace.empty()) {
    std::printf("%s: %zu updates, final loss %.6f, checkpoint at %s\n",
                mlm ? "pretrain" : "train", trace.size(), trace.back().loss, ck_path.c_str());
  } else {
    std::printf("%s: no updates to run (already past the requested epochs)\n",
                mlm ? "pretrain" : "train");
  }
  return 0;
}

int run_sample(const std::string& checkpoint, const std::string& vocab_path,
               const std::string& input, const std::string& out, int steps, int top_k, int T,
               uint64_t seed) {
  moldiff::Vocabulary vocab = load_vocab(vocab_path);
  moldiff::RestoredCheckpoint r = moldiff::load_checkpoint(checkpoint, vocab);

  std::vector<std::string> descriptions;
  if (input.size() > 4 && input.substr(input.size() - 4) == ".tsv") {
    for (const moldiff::DatasetRecord& rec : load_records(input)) {
      descriptions.push_back(rec.description);
    }
  } else {
    descriptions = moldiff::read_lines(input);
  }

  moldiff::NoiseSchedule sched{T};
  moldiff::DenoiserFn fn = moldiff::make_denoiser_fn(vocab, r.params);
  std::vector<std::string> lines;
  int failures = 0;
  for (size_t i = 0; i < descriptions.size(); ++i) {
    moldiff::Prng rng = moldiff::derive_stream(seed, {kChainStream, i});
    try {
      moldiff::TokenSequence seq =
          moldiff::encode_instance(vocab, moldiff::format_prompt(descriptions[i]), nullptr,
                                   nullptr, r.params.config.max_target);
      moldiff::MolGraph g = moldiff::sample(vocab, fn, std::move(seq), sched, steps, top_k, rng);
      lines.push_back(moldiff::write_smiles(g));
    } catch (const moldiff::ResidualMaskError&) {
      lines.emplace_back();
      ++failures;
    } catch (const moldiff::NoAtomsError&) {
      lines.emplace_back();
      ++failures;
    } catch (const moldiff::DisconnectedGraphError&) {
      lines.emplace_back();
      ++failures;
    } catch (const std::invalid_argument&) {  // e.g. empty description line
      lines.emplace_back();
      ++failures;
    }
  }
  moldiff::write_lines(out, lines);
  moldiff::write_manifest(out + ".manifest.json", "sample",
                          {{"checkpoint", checkpoint},
                           {"vocab", vocab_path},
                           {"input", input},
                           {"out", out},
                           {"steps", steps},
                           {"top_k", top_k},
                           {"T", T},
                           {"seed", seed}},
                          seed, {checkpoint, vocab_path, input});
  std::printf("sampled %zu molecules (%d decode failures) into %s\n", lines.size(), failures,
              out.c_str());
  return 0;
}

int run_eval(const std::string& generated, const std::string& references, const std::string& out,
             const std::string& csv, int radius, int width) {
  std::vector<std::string> gen_lines = moldiff::read_lines(generated);
  std::vector<std::string> ref_lines;
  if (references.size() > 4 && references.substr(references.size() - 4) == ".tsv") {
    for (const moldiff::DatasetRecord& rec : load_records(references)) {
      ref_lines.push_back(rec.smiles);
    }
  } else {
    ref_lines = moldiff::read_lines(references);
  }
  if (gen_lines.size() != ref_lines.size()) {
    throw std::invalid_argument("generated has " + std::to_string(gen_lines.size()) +
                                " lines but references has " + std::to_string(ref_lines.size()));
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  for (size_t i = 0; i < gen_lines.size(); ++i) pairs.emplace_back(gen_lines[i], ref_lines[i]);
  moldiff::EvalReport report = moldiff::evaluate_smiles(pairs, moldiff::AtomTable::standard(),
                                                        radius, width);
  moldiff::write_text(out, report.to_json().dump(2) + "\n");
  if (!csv.empty()) moldiff::write_text(csv, report.to_csv());
  moldiff::write_manifest(out + ".manifest.json", "eval",
                          {{"generated", generated},
                           {"references", references},
                           {"out", out},
                           {"csv", csv},
                           {"radius", radius},
                           {"width", width}},
                          0, {generated, references});
  std::printf("n=%d valid=%.4f exact=%.4f morgan_fts=%.4f\n", report.n_total,
              report.valid_fraction, report.exact_fraction, report.morgan_fts_mean);
  return 0;
}

// Expands "--config FILE" on a subcommand into explicit --key=value tokens so
// file values flow through the same option machinery as flags.  Keys are the
// long option names without the leading dashes; flags given on the command
// line win over file values; unknown keys are rejected.
std::vector<std::string> merge_config_file(CLI::App& app, std::vector<std::string> args) {
  auto trim = [](std::string s) {
    auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && ws(s.front())) s.erase(s.begin());
    while (!s.empty() && ws(s.back())) s.pop_back();
    return s;
  };

  std::size_t sub_at = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!args[i].empty() && args[i][0] != '-') {
      sub_at = i;
      break;
    }
  }
  if (sub_at == args.size()) return args;
  CLI::App* sub = app.get_subcommand_no_throw(args[sub_at]);
  if (sub == nullptr) return args;  // let the parser report the unknown command

  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i > sub_at && args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
      continue;
    }
    if (i > sub_at && args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      continue;
    }
    rest.push_back(args[i]);
  }
  if (path.empty()) return rest;

  std::set<std::string> given;  // long names already present on the command line
  for (std::size_t i = sub_at + 1; i < rest.size(); ++i) {
    if (rest[i].rfind("--", 0) == 0) {
      given.insert(rest[i].substr(2, rest[i].find('=') - 2));
    }
  }

  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open configuration file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || sub->get_option_no_throw("--" + key) == nullptr) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": unknown configuration key '" + key + "' for command '" +
                                  sub->get_name() + "'");
    }
    if (given.count(key) != 0) continue;
    rest.push_back("--" + key + "=" + value);
  }
  return rest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moldiff: instruction-conditioned discrete graph diffusion for molecules",
               "moldiff"};
  app.require_subcommand(1);

  std::string config_path_doc;  // consumed by merge_config_file before parsing
  auto configure = [&config_path_doc](CLI::App* cmd) {
    cmd->add_option("--config", config_path_doc,
                    "key=value configuration file (command line overrides)");
  };

  // gen-toy
  std::string toy_out;
  int n_train = 2000, n_test = 200;
  uint64_t toy_seed = 42;
  CLI::App* gen = app.add_subcommand("gen-toy", "generate the synthetic instruction corpus");
  configure(gen);
  gen->add_option("--out", toy_out, "output directory")->required();
  gen->add_option("--n-train", n_train, "training records");
  gen->add_option("--n-test", n_test, "held-out records");
  gen->add_option("--seed", toy_seed, "sampling seed");

  // build-vocab
  std::vector<std::string> vocab_corpus;
  std::string vocab_out;
  int min_count = 1;
  CLI::App* bv = app.add_subcommand("build-vocab", "build the text+node vocabulary");
  configure(bv);
  bv->add_option("--corpus", vocab_corpus, "dataset files")->required()->expected(-1);
  bv->add_option("--out", vocab_out, "vocabulary JSON path")->required();
  bv->add_option("--min-count", min_count, "minimum word frequency");

  // pretrain
  FitOptions pre;
  double mask_probability = 0.15;
  CLI::App* pt = app.add_subcommand("pretrain", "masked-token pretraining on clean sequences");
  configure(pt);
  pre.add_to(pt);
  pt->add_option("--mask-probability", mask_probability, "per-site masking rate");

  // train
  FitOptions tr;
  double text_mask_probability = 0.15;
  int T = 1000;
  std::string resume, init_from;
  CLI::App* tn = app.add_subcommand("train", "diffusion training");
  configure(tn);
  tr.add_to(tn);
  tn->add_option("--T", T, "diffusion horizon");
  tn->add_option("--text-mask-probability", text_mask_probability,
                 "instruction-word masking rate");
  tn->add_option("--resume", resume, "checkpoint to continue (restores cursor and seed)");
  tn->add_option("--init-from", init_from, "checkpoint providing initial weights only");

  // sample
  std::string s_checkpoint, s_vocab, s_input, s_out;
  int steps = 100, top_k = 15, s_T = 1000;
  uint64_t s_seed = 4242;
  CLI::App* smp = app.add_subcommand("sample", "generate molecules from instructions");
  configure(smp);
  smp->add_option("--checkpoint", s_checkpoint, "trained checkpoint")->required();
  smp->add_option("--vocab", s_vocab, "vocabulary JSON")->required();
  smp->add_option("--input", s_input, "descriptions (.tsv dataset or one per line)")->required();
  smp->add_option("--out", s_out, "output SMILES file, one line per input")->required();
  smp->add_option("--steps", steps, "reverse-chain steps");
  smp->add_option("--top-k", top_k, "keep the k most likely node categories");
  smp->add_option("--T", s_T, "diffusion horizon");
  smp->add_option("--seed", s_seed, "sampling seed (chains derive per-instance streams)");

  // eval
  std::string e_generated, e_references, e_out, e_csv;
  int radius = 2, width = 2048;
  CLI::App* ev = app.add_subcommand("eval", "score generations against references");
  configure(ev);
  ev->add_option("--generated", e_generated, "generated SMILES lines")->required();
  ev->add_option("--references", e_references, "references (.tsv dataset or SMILES lines)")
      ->required();
  ev->add_option("--out", e_out, "report JSON path")->required();
  ev->add_option("--csv", e_csv, "optional per-instance CSV path");
  ev->add_option("--radius", radius, "fingerprint radius");
  ev->add_option("--width", width, "fingerprint width (power of two)");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = merge_config_file(app, std::move(args));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "moldiff: %s\n", e.what());
    return 1;
  }
  std::reverse(args.begin(), args.end());  // the vector overload consumes back to front
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return run_gen_toy(toy_out, n_train, n_test, toy_seed);
    if (bv->parsed()) return run_build_vocab(vocab_corpus, vocab_out, min_count);
    if (pt->parsed()) return run_fit(true, pre, mask_probability, 0.0, 1000, "", "");
    if (tn->parsed()) {
      return run_fit(false, tr, 0.0, text_mask_probability, T, resume, init_from);
    }
    if (smp->parsed()) {
      return run_sample(s_checkpoint, s_vocab, s_input, s_out, steps, top_k, s_T, s_seed);
    }
    if (ev->parsed()) return run_eval(e_generated, e_references, e_out, e_csv, radius, width);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "moldiff: %s\n", e.what());
    return 1;
  }
  return 2;
}
