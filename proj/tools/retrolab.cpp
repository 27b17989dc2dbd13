// retrolab: command-line front end for the corpus -> index -> train -> eval
// pipeline. Every subcommand writes a JSON manifest before doing any work.

#include "retrolab/binary_io.hpp"
#include "retrolab/eval.hpp"
#include "retrolab/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace retrolab;

namespace {

constexpr const char* kToolVersion = "retrolab 0.1.0";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Manifests

json make_manifest(const std::string& subcommand, const std::map<std::string, fs::path>& inputs,
                   const json& config, std::uint64_t seed) {
  json m;
  m["subcommand"] = subcommand;
  m["tool_version"] = kToolVersion;
  m["seed"] = seed;
  m["config"] = config;
  json in = json::object();
  for (const auto& [name, path] : inputs) {
    if (path.empty()) continue;
    in[name] = {{"path", path.string()}, {"digest", hex64(file_digest(path))}};
  }
  m["inputs"] = in;
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes `m` to `path`. An existing manifest for a resumable run must match.
void emit_manifest(const fs::path& path, const json& m, bool resumable) {
  if (resumable && fs::exists(path)) {
    const json old = json::parse(read_text(path));
    if (old != m) {
      std::string what = "configuration";
      if (old.value("inputs", json()) != m["inputs"]) what = "input digests";
      throw Error("manifest mismatch in " + path.string() + " (" + what +
                  " differ); refusing to resume. Use a fresh output directory.");
    }
    return;
  }
  write_text(path, m.dump(2) + "\n");
}

fs::path sidecar(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

// ---------------------------------------------------------------------------
// Corpus directories and files

struct CorpusFile {
  Corpus corpus;
  fs::path vocab_path;
};

CorpusFile load_corpus_file(const fs::path& path) {
  std::string vref;
  CorpusFile c{Corpus::load(path, &vref), {}};
  fs::path v(vref);
  c.vocab_path = v.is_absolute() ? v : path.parent_path() / v;
  return c;
}

std::string corpus_config_text(const LookupCorpusConfig& c) {
  std::ostringstream o;
  o << "n_facts=" << c.n_facts << "\nkey_len=" << c.key_len << "\nval_len=" << c.val_len << "\nn_docs=" << c.n_docs
    << "\ntemplates_per_fact=" << c.templates_per_fact << "\nn_test_docs=" << c.n_test_docs << "\nm=" << c.m
    << "\ndoc_chunks=" << c.doc_chunks << "\nvocab_size=" << c.vocab_size << "\nkey_alphabet=" << c.key_alphabet
    << "\nvalue_alphabet=" << c.value_alphabet << "\necho_filler=" << (c.echo_filler ? 1 : 0) << "\nrng_seed=" << c.rng_seed << "\n";
  return o.str();
}

LookupCorpusConfig parse_corpus_config(const std::string& text) {
  LookupCorpusConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "n_facts") c.n_facts = std::stoi(v);
    else if (k == "key_len") c.key_len = std::stoi(v);
    else if (k == "val_len") c.val_len = std::stoi(v);
    else if (k == "n_docs") c.n_docs = std::stoi(v);
    else if (k == "templates_per_fact") c.templates_per_fact = std::stoi(v);
    else if (k == "n_test_docs") c.n_test_docs = std::stoi(v);
    else if (k == "m") c.m = std::stoi(v);
    else if (k == "doc_chunks") c.doc_chunks = std::stoi(v);
    else if (k == "vocab_size") c.vocab_size = std::stoi(v);
    else if (k == "key_alphabet") c.key_alphabet = std::stoi(v);
    else if (k == "value_alphabet") c.value_alphabet = std::stoi(v);
    else if (k == "echo_filler") c.echo_filler = std::stoi(v) != 0;
    else if (k == "rng_seed") c.rng_seed = std::stoull(v);
    else throw Error("corpus.cfg: unknown key '" + k + "'");
  }
  return c;
}

LookupCorpus load_lookup_dir(const fs::path& dir) {
  LookupCorpus lc;
  lc.config = parse_corpus_config(read_text(dir / "corpus.cfg"));
  lc.vocab = Vocab::load(dir / "vocab.txt");
  lc.alphabets = alphabets_from_vocab(lc.vocab);
  lc.train = Corpus::load(dir / "train.txt");
  lc.test = Corpus::load(dir / "test.txt");
  lc.facts = load_facts(dir / "facts.tsv");
  return lc;
}

std::vector<int> parse_bins(const std::string& text) {
  std::vector<int> bins;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item == "off") bins.push_back(0);
    else {
      const int b = std::stoi(item);
      if (b < 1 || b > 10) throw Error("bins must be in 1..10 or 'off'");
      bins.push_back(b);
    }
  }
  if (bins.empty()) throw Error("no bins given");
  return bins;
}

std::string run_name(int bin) {
  if (bin == 0) return "ret_off";
  char buf[16];
  std::snprintf(buf, sizeof buf, "bin_%02d", bin);
  return buf;
}

// ---------------------------------------------------------------------------
// Run configuration from --config, --set and shorthand flags

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_args(CLI::App* app, ConfigArgs& a) {
  app->add_option("--config", a.file, "key=value run configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", a.sets, "override one config key (key=value), repeatable");
}

TrainConfig resolve_config(TrainConfig cfg, const ConfigArgs& a, const std::vector<std::string>& extra) {
  auto apply = [&](const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  };
  if (!a.file.empty()) {
    std::istringstream raw(read_text(a.file));
    std::string line;
    while (std::getline(raw, line)) {
      const auto b = line.find_first_not_of(" \t");
      if (b == std::string::npos || line[b] == '#') continue;
      apply(line.substr(b));
    }
  }
  for (const auto& kv : extra) apply(kv);
  for (const auto& kv : a.sets) apply(kv);
  return cfg;
}

void echo_config(const TrainConfig& cfg, bool retro = true) {
  std::cout << "config: lr_max=" << cfg.lr_max << " lr_min=" << cfg.lr_min << " warmup_samples=" << cfg.warmup_samples
            << " beta1=" << cfg.beta1 << " beta2=" << cfg.beta2 << " batch=" << cfg.batch << " steps=" << cfg.steps;
  if (retro) std::cout << " policy=" << (cfg.ret_off() ? "off" : std::to_string(cfg.bin)) << " synth=" << cfg.synth;
  std::cout << "\n";
}

void print_record(const std::string& tag, const RunRecord& r) {
  std::printf("%s step=%d loss=%.4f ppl=%.4f avg_overlap=%.3f\n", tag.c_str(), r.step, r.loss, r.ppl, r.avg_overlap);
  std::fflush(stdout);
}

// Training runs keep their resumable state under <dir>/state.
struct RunDir {
  fs::path dir;
  fs::path state() const { return dir / "state"; }
  bool resumable() const { return fs::exists(state() / "state.txt"); }
};

void finish_run(const RunDir& rd, const TrainState& st, bool base_only) {
  write_records_csv(rd.dir / "metrics.csv", st.records);
  save_checkpoint(rd.dir / "model.ckpt", st.params, base_only);
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenCorpusArgs {
  fs::path out;
  LookupCorpusConfig cfg;
};

int cmd_gen_corpus(const GenCorpusArgs& a) {
  fs::create_directories(a.out);
  json c = json::object();
  std::istringstream fields(corpus_config_text(a.cfg));
  for (std::string line; std::getline(fields, line);) {
    const auto eq = line.find('=');
    c[line.substr(0, eq)] = std::stoull(line.substr(eq + 1));
  }
  emit_manifest(a.out / "manifest.json", make_manifest("gen-corpus", {}, c, a.cfg.rng_seed), false);
  const LookupCorpus lc = generate_lookup_corpus(a.cfg);
  lc.vocab.save(a.out / "vocab.txt");
  lc.train.save(a.out / "train.txt", "vocab.txt");
  lc.test.save(a.out / "test.txt", "vocab.txt");
  save_facts(a.out / "facts.tsv", lc.facts);
  write_text(a.out / "corpus.cfg", corpus_config_text(a.cfg));
  std::cout << "wrote " << lc.train.num_documents() << " train / " << lc.test.num_documents() << " test documents, "
            << lc.facts.size() << " facts, vocab " << lc.vocab.size() << "\n";
  return 0;
}

struct GenQaArgs {
  fs::path corpus, out;
  int n = 200;
  int k = 2;
  std::uint64_t seed = 3;
  int facts_from = 0, facts_to = -1;
};

int cmd_gen_qa(const GenQaArgs& a) {
  json c;
  c["n"] = a.n;
  c["k"] = a.k;
  c["facts_from"] = a.facts_from;
  c["facts_to"] = a.facts_to;
  emit_manifest(sidecar(a.out), make_manifest("gen-qa", {{"corpus_cfg", a.corpus / "corpus.cfg"},
                                                         {"train", a.corpus / "train.txt"},
                                                         {"facts", a.corpus / "facts.tsv"}},
                                              c, a.seed),
                false);
  const LookupCorpus lc = load_lookup_dir(a.corpus);
  std::vector<int> pool;
  const int hi = a.facts_to < 0 ? static_cast<int>(lc.facts.size()) : a.facts_to;
  for (int f = a.facts_from; f < hi; ++f) pool.push_back(f);
  const auto qa = generate_qa_set(lc, a.n, a.seed, pool, a.k);
  save_qa(a.out, qa);
  std::cout << "wrote " << qa.size() << " QA records\n";
  return 0;
}

struct BuildIndexArgs {
  fs::path corpus, out;
  int dim = 64;
  int centroids = 64;
  std::string pq = "off";
  int iters = 20;
  std::uint64_t seed = 1;
  std::uint64_t embed_seed = EmbeddingConfig{}.seed;
};

int cmd_build_index(const BuildIndexArgs& a) {
  IndexConfig ic;
  ic.centroids = a.centroids;
  ic.kmeans_iters = a.iters;
  ic.seed = a.seed;
  ic.pq_subquantizers = a.pq == "off" ? 0 : std::stoi(a.pq);
  json c;
  c["dim"] = a.dim;
  c["centroids"] = a.centroids;
  c["pq"] = a.pq;
  c["kmeans_iters"] = a.iters;
  c["embed_seed"] = a.embed_seed;
  emit_manifest(sidecar(a.out), make_manifest("build-index", {{"corpus", a.corpus}}, c, a.seed), false);
  const Corpus corpus = Corpus::load(a.corpus);
  EmbeddingConfig ec{a.dim, a.embed_seed};
  const auto emb = embed_corpus(corpus, ec);
  const auto index = AnnIndex::build(emb.vectors, emb.ids, ic, &emb.valid);
  index.save(a.out);
  std::cout << "indexed " << index.size() << " chunks into " << index.num_centroids() << " lists\n";
  return 0;
}

struct NeighborArgs {
  fs::path queries, db, index, out;
  int pool = 20;
  int nprobe = 8;
  std::uint64_t embed_seed = EmbeddingConfig{}.seed;
  bool same_doc = false;
};

int cmd_precompute(const NeighborArgs& a) {
  json c;
  c["pool"] = a.pool;
  c["nprobe"] = a.nprobe;
  c["embed_seed"] = a.embed_seed;
  c["exclude_same_doc"] = a.same_doc;
  emit_manifest(sidecar(a.out),
                make_manifest("precompute-neighbors", {{"queries", a.queries}, {"db", a.db}, {"index", a.index}}, c, 0),
                false);
  const Corpus queries = Corpus::load(a.queries);
  const Corpus db = Corpus::load(a.db);
  const AnnIndex index = AnnIndex::load(a.index);
  PrecomputeOptions po;
  po.embedding = EmbeddingConfig{index.dim(), a.embed_seed};
  check_index_matches(index, db, po.embedding);
  po.pool = a.pool;
  po.nprobe = a.nprobe;
  po.exclude_self = queries.digest() == db.digest();
  po.exclude_same_doc = a.same_doc && po.exclude_self;
  po.threads = thread_budget();
  const auto table = precompute_neighbors(queries, db, index, po);
  table.save(a.out);
  std::cout << "neighbors for " << queries.total_chunks() << " chunks (pool " << a.pool << ")\n";
  return 0;
}

struct OverlapArgs {
  fs::path corpus, index, csv;
  std::string bins = "1,2,3,4,5,6,7,8,9,10";
  int pool = 20;
  int nprobe = 8;
  int k = 2;
};

int cmd_analyze_overlap(const OverlapArgs& a) {
  json c;
  c["bins"] = a.bins;
  c["pool"] = a.pool;
  c["nprobe"] = a.nprobe;
  c["k"] = a.k;
  emit_manifest(sidecar(a.csv), make_manifest("analyze-overlap", {{"corpus", a.corpus}, {"index", a.index}}, c, 0),
                false);
  const Corpus corpus = Corpus::load(a.corpus);
  const AnnIndex index = AnnIndex::load(a.index);
  PrecomputeOptions po;
  po.embedding.dim = index.dim();
  check_index_matches(index, corpus, po.embedding);
  po.pool = a.pool;
  po.nprobe = a.nprobe;
  po.threads = thread_budget();
  const auto table = precompute_neighbors(corpus, corpus, index, po);
  const int m = corpus.chunk_size();
  const auto all = make_bins(m);
  const auto wanted = parse_bins(a.bins);

  // Histogram of natural top-k overlaps over the bin intervals, plus the mean
  // overlap each training-time policy would select.
  std::vector<long> hist(all.size(), 0);
  std::vector<double> hist_sum(all.size(), 0.0);
  std::vector<OverlapMeter> policy(all.size());
  long total = 0;
  for (const auto& id : corpus.chunk_ids()) {
    const auto& hits = table.at(id);
    if (hits.empty()) continue;
    const auto& input = corpus.chunk(id);
    for (const auto& r : natural_context(corpus, hits, a.k)) {
      if (r.is_zero()) continue;
      const int ov = overlap(input, r);
      for (std::size_t b = 0; b < all.size(); ++b)
        if (all[b].admits(ov)) {
          ++hist[b];
          hist_sum[b] += ov;
          break;
        }
      ++total;
    }
    const auto cands = candidate_records(corpus, hits, a.pool);
    for (int b : wanted)
      policy[b - 1].add(input, filter_neighbors(input, cands, FilterPolicy{all[b - 1], a.k, a.pool}));
  }
  std::ostringstream o;
  o << "bin,label,lower,upper,count,fraction,avg_overlap,policy_avg_overlap\n";
  for (int b : wanted) {
    const auto& bin = all[b - 1];
    const int lower = b == 1 ? 0 : all[b - 2].upper;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%d,%ld,%.6f,%.4f,%.4f\n", b, bin.label.c_str(), lower, bin.upper,
                  hist[b - 1], total ? static_cast<double>(hist[b - 1]) / total : 0.0,
                  hist[b - 1] ? hist_sum[b - 1] / hist[b - 1] : 0.0, policy[b - 1].reported());
    o << buf;
  }
  write_text(a.csv, o.str());
  std::cout << "overlap histogram over " << total << " neighbor records written to " << a.csv.string() << "\n";
  return 0;
}

struct PretrainArgs {
  fs::path train, test, out;
  ConfigArgs config;
  int steps = -1;
  long seed = -1;
  int stop_at = -1;
};

// Interrupts a run at its first record at or after `stop_at` (state kept,
// no final outputs), as a crash would.
bool keep_going(const RunRecord& r, int stop_at) { return stop_at < 0 || r.step < stop_at; }

int cmd_pretrain(const PretrainArgs& a) {
  const CorpusFile train = load_corpus_file(a.train);
  const Vocab vocab = Vocab::load(train.vocab_path);
  std::vector<std::string> extra{"model_vocab=" + std::to_string(vocab.size()),
                                 "model_chunk=" + std::to_string(train.corpus.chunk_size())};
  if (a.steps >= 0) extra.push_back("steps=" + std::to_string(a.steps));
  if (a.seed >= 0) extra.push_back("seed=" + std::to_string(a.seed));
  const TrainConfig cfg = resolve_config(TrainConfig{}, a.config, extra);
  cfg.validate();
  RunDir rd{a.out};
  fs::create_directories(rd.dir);
  json c;
  c["train"] = cfg.to_string();
  emit_manifest(rd.dir / "manifest.json",
                make_manifest("pretrain", {{"train", a.train}, {"test", a.test}, {"vocab", train.vocab_path}}, c,
                              cfg.seed),
                true);
  cfg.save(rd.dir / "config.txt");
  echo_config(cfg, false);
  Corpus test;
  if (!a.test.empty()) test = Corpus::load(a.test);
  TrainState resume;
  TrainState* rp = nullptr;
  if (rd.resumable()) {
    resume = load_train_state(rd.state());
    rp = &resume;
    std::cout << "resuming from step " << resume.step << "\n";
  }
  const auto st = pretrain_base(train.corpus, a.test.empty() ? nullptr : &test, cfg,
                                [&](const RunRecord& r, const TrainState& s) {
                                  print_record("pretrain", r);
                                  save_train_state(rd.state(), s);
                                  return keep_going(r, a.stop_at);
                                },
                                rp);
  if (st.step < cfg.steps) {
    std::cout << "stopped at step " << st.step << "\n";
    return 0;
  }
  finish_run(rd, st, true);
  return 0;
}

struct RetroArgs {
  fs::path base, train, test, train_neighbors, test_neighbors, synonyms, out;
  ConfigArgs config;
  int steps = -1;
  long seed = -1;
  std::string policy;
  bool synth = false;
  double rho = -1;
  int snapshot_every = 0;
  int stop_at = -1;
  std::string bins = "1,2,3,4,5,6,7,8,9,10,off";
};

struct RetroInputs {
  ModelParams<float> base;
  Corpus train, test;
  NeighborTable train_nbrs, test_nbrs;
  SynonymTable synonyms;
  bool has_test = false, has_synonyms = false;

  RetroData data() const {
    return {&train, has_test ? &test : nullptr, &train_nbrs, has_test ? &test_nbrs : nullptr,
            has_synonyms ? &synonyms : nullptr};
  }
};

// The base checkpoint supplies the model shape; the config may still change
// the retro-only keys (cca layers, encoder depth).
TrainConfig retro_config(const RetroArgs& a, const ModelParams<float>& base) {
  TrainConfig defaults;
  defaults.model = base.cfg;
  std::vector<std::string> extra;
  if (a.steps >= 0) extra.push_back("steps=" + std::to_string(a.steps));
  if (a.seed >= 0) extra.push_back("seed=" + std::to_string(a.seed));
  if (!a.policy.empty()) extra.push_back("policy=" + a.policy);
  if (a.synth) extra.push_back("synth=1");
  if (a.rho >= 0) extra.push_back("rho=" + std::to_string(a.rho));
  return resolve_config(defaults, a.config, extra);
}

std::map<std::string, fs::path> retro_input_paths(const RetroArgs& a, const fs::path& vocab) {
  return {{"base", a.base},
          {"train", a.train},
          {"test", a.test},
          {"train_neighbors", a.train_neighbors},
          {"test_neighbors", a.test_neighbors},
          {"synonyms", a.synonyms},
          {"vocab", vocab}};
}

RetroInputs load_retro_inputs(const RetroArgs& a, const fs::path& vocab_path, bool need_synonyms) {
  RetroInputs in;
  in.base = load_checkpoint(a.base);
  in.train = Corpus::load(a.train);
  in.train_nbrs = NeighborTable::load(a.train_neighbors);
  if (!a.test.empty()) {
    if (a.test_neighbors.empty()) throw Error("--test needs --test-neighbors");
    in.test = Corpus::load(a.test);
    in.test_nbrs = NeighborTable::load(a.test_neighbors);
    in.has_test = true;
  }
  if (need_synonyms) {
    const Vocab vocab = Vocab::load(vocab_path);
    in.synonyms = a.synonyms.empty() ? default_synonyms(alphabets_from_vocab(vocab))
                                     : SynonymTable::load(a.synonyms, vocab);
    in.has_synonyms = true;
  }
  return in;
}

TrainState run_retrofit(const RetroInputs& in, const TrainConfig& cfg, const RunDir& rd, int snapshot_every,
                        int stop_at, const std::string& tag, std::mutex* print_mu) {
  TrainState resume;
  TrainState* rp = nullptr;
  if (rd.resumable()) {
    resume = load_train_state(rd.state());
    rp = &resume;
  }
  auto st = retrofit(in.base, in.data(), cfg,
                     [&](const RunRecord& r, const TrainState& s) {
                       {
                         std::unique_lock<std::mutex> lock;
                         if (print_mu) lock = std::unique_lock<std::mutex>(*print_mu);
                         print_record(tag, r);
                       }
                       if (snapshot_every > 0 && r.step > 0 && r.step % snapshot_every == 0) {
                         char name[40];
                         std::snprintf(name, sizeof name, "model_step_%06d.ckpt", r.step);
                         save_checkpoint(rd.dir / name, s.params);
                       }
                       save_train_state(rd.state(), s);
                       return keep_going(r, stop_at);
                     },
                     rp);
  if (st.step < cfg.steps) {
    std::unique_lock<std::mutex> lock;
    if (print_mu) lock = std::unique_lock<std::mutex>(*print_mu);
    std::cout << tag << " stopped at step " << st.step << "\n";
    return st;
  }
  finish_run(rd, st, false);
  return st;
}

int cmd_retrofit(const RetroArgs& a) {
  const fs::path vocab = load_corpus_file(a.train).vocab_path;
  const ModelParams<float> base_probe = load_checkpoint(a.base);
  const TrainConfig cfg = retro_config(a, base_probe);
  cfg.validate();
  RunDir rd{a.out};
  fs::create_directories(rd.dir);
  json c;
  c["train"] = cfg.to_string();
  c["snapshot_every"] = a.snapshot_every;
  emit_manifest(rd.dir / "manifest.json", make_manifest("retrofit", retro_input_paths(a, vocab), c, cfg.seed), true);
  cfg.save(rd.dir / "config.txt");
  echo_config(cfg);
  const RetroInputs in = load_retro_inputs(a, vocab, cfg.synth);
  run_retrofit(in, cfg, rd, a.snapshot_every, a.stop_at, "retrofit", nullptr);
  return 0;
}

int cmd_grid(const RetroArgs& a) {
  const fs::path vocab = load_corpus_file(a.train).vocab_path;
  const ModelParams<float> base_probe = load_checkpoint(a.base);
  const TrainConfig tmpl = retro_config(a, base_probe);
  const auto bins = parse_bins(a.bins);
  std::vector<TrainConfig> cfgs;
  for (int b : bins) {
    TrainConfig c = tmpl;
    c.bin = b;
    c.validate();
    cfgs.push_back(c);
  }
  fs::create_directories(a.out);
  json c;
  c["train"] = tmpl.to_string();
  c["bins"] = a.bins;
  c["snapshot_every"] = a.snapshot_every;
  emit_manifest(a.out / "manifest.json", make_manifest("grid", retro_input_paths(a, vocab), c, tmpl.seed), true);
  echo_config(tmpl);
  const RetroInputs in = load_retro_inputs(a, vocab, tmpl.synth);
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(bins.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < bins.size(); i = next++) {
      try {
        RunDir rd{a.out / run_name(bins[i])};
        fs::create_directories(rd.dir);
        json rc;
        rc["train"] = cfgs[i].to_string();
        rc["snapshot_every"] = a.snapshot_every;
        emit_manifest(rd.dir / "manifest.json", make_manifest("retrofit", retro_input_paths(a, vocab), rc, tmpl.seed),
                      true);
        cfgs[i].save(rd.dir / "config.txt");
        run_retrofit(in, cfgs[i], rd, a.snapshot_every, a.stop_at, run_name(bins[i]), &mu);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n = std::clamp(thread_budget(), 1, static_cast<int>(bins.size()));
  std::vector<std::thread> pool;
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (!errors[i].empty()) throw Error(run_name(bins[i]) + ": " + errors[i]);
  return 0;
}

struct SynthArgs {
  fs::path corpus, out, synonyms, synonyms_out;
  double rho = 0.35;
  std::uint64_t seed = 7;
};

int cmd_synth_augment(const SynthArgs& a) {
  json c;
  c["rho"] = a.rho;
  emit_manifest(sidecar(a.out), make_manifest("synth-augment", {{"corpus", a.corpus}, {"synonyms", a.synonyms}}, c, a.seed),
                false);
  const CorpusFile cf = load_corpus_file(a.corpus);
  const Vocab vocab = Vocab::load(cf.vocab_path);
  const SynonymTable table =
      a.synonyms.empty() ? default_synonyms(alphabets_from_vocab(vocab)) : SynonymTable::load(a.synonyms, vocab);
  if (!a.synonyms_out.empty()) table.save(a.synonyms_out, vocab);
  std::vector<Document> docs;
  ParaphraseStats stats;
  const Corpus& corpus = cf.corpus;
  for (std::size_t d = 0; d < corpus.num_documents(); ++d) {
    Document doc;
    doc.meta = corpus.documents()[d].meta;
    const int nc = corpus.num_chunks(static_cast<std::int32_t>(d));
    for (int u = 0; u < nc; ++u) {
      const ChunkId id{static_cast<std::int32_t>(d), u};
      Rng rng(derive_seed(a.seed, {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(u)}));
      const auto p = paraphrase(corpus.chunk(id), table, a.rho, rng, &stats);
      for (auto t : p.tokens)
        if (t != kPad) doc.tokens.push_back(t);
    }
    docs.push_back(std::move(doc));
  }
  Corpus out(corpus.chunk_size(), std::move(docs));
  fs::path vref = fs::relative(cf.vocab_path, a.out.has_parent_path() ? a.out.parent_path() : fs::path("."));
  out.save(a.out, vref.string());
  std::printf("paraphrased %zu chunks: %d of %d eligible tokens replaced (rate %.4f, rho %.2f)\n",
              corpus.total_chunks(), stats.replaced, stats.eligible,
              stats.eligible ? static_cast<double>(stats.replaced) / stats.eligible : 0.0, a.rho);
  return 0;
}

struct FinetuneArgs {
  fs::path ckpt, qa, corpus, out;
  ConfigArgs config;
  int steps = -1;
  long seed = -1;
};

int cmd_finetune(const FinetuneArgs& a) {
  const ModelParams<float> params = load_checkpoint(a.ckpt);
  TrainConfig defaults;
  defaults.steps = 300;
  defaults.lr_max = 5e-6;
  defaults.lr_min = 5e-7;
  defaults.warmup_samples = 0;
  defaults.weight_decay = 0.01;
  defaults.eval_interval = 50;
  defaults.model = params.cfg;
  std::vector<std::string> extra;
  if (a.steps >= 0) extra.push_back("steps=" + std::to_string(a.steps));
  if (a.seed >= 0) extra.push_back("seed=" + std::to_string(a.seed));
  const TrainConfig cfg = resolve_config(defaults, a.config, extra);
  cfg.validate();
  RunDir rd{a.out};
  fs::create_directories(rd.dir);
  json c;
  c["train"] = cfg.to_string();
  emit_manifest(rd.dir / "manifest.json",
                make_manifest("finetune-qa", {{"ckpt", a.ckpt}, {"qa", a.qa}, {"train", a.corpus / "train.txt"}}, c,
                              cfg.seed),
                false);
  cfg.save(rd.dir / "config.txt");
  echo_config(cfg, false);
  const Corpus train = Corpus::load(a.corpus / "train.txt");
  const Alphabets alphabets = alphabets_from_vocab(Vocab::load(a.corpus / "vocab.txt"));
  const auto qa = load_qa(a.qa);
  const auto st = finetune_qa(params, qa, train, alphabets, cfg, [](const RunRecord& r, const TrainState&) {
    print_record("finetune", r);
    return true;
  });
  finish_run(rd, st, !st.params.has_retro);
  return 0;
}

struct EvalPplArgs {
  fs::path ckpt, test, db, index, neighbors, csv;
  std::string gate = "on";
  int max_docs = 0;
  int nprobe = 8;
};

int cmd_eval_ppl(const EvalPplArgs& a) {
  json c;
  c["gate"] = a.gate;
  c["max_docs"] = a.max_docs;
  c["nprobe"] = a.nprobe;
  emit_manifest(sidecar(a.csv),
                make_manifest("eval-ppl",
                              {{"ckpt", a.ckpt}, {"test", a.test}, {"db", a.db}, {"index", a.index},
                               {"neighbors", a.neighbors}},
                              c, 0),
                false);
  const auto params = load_checkpoint(a.ckpt);
  const Corpus test = Corpus::load(a.test);
  PerplexityResult r;
  const bool gate_on = a.gate == "on";
  if (gate_on && params.has_retro) {
    if (a.db.empty()) throw Error("eval-ppl with the gate on needs --db");
    const Corpus db = Corpus::load(a.db);
    NeighborTable table;
    if (!a.neighbors.empty()) {
      table = NeighborTable::load(a.neighbors);
    } else if (!a.index.empty()) {
      const AnnIndex index = AnnIndex::load(a.index);
      PrecomputeOptions po;
      po.embedding.dim = index.dim();
      check_index_matches(index, db, po.embedding);
      po.nprobe = a.nprobe;
      po.exclude_self = test.digest() == db.digest();
      po.threads = thread_budget();
      table = precompute_neighbors(test, db, index, po);
    } else {
      throw Error("eval-ppl with the gate on needs --index or --neighbors");
    }
    r = eval_perplexity(params, test, db, table, Gate::kOn, a.max_docs);
  } else if (a.gate == "zero") {
    r = eval_perplexity_zeroed(params, test, a.max_docs);
  } else {
    r = eval_perplexity_zeroed(params, test, a.max_docs);
    if (params.has_retro) r = [&] {
        // gate off: cross-attention skipped entirely
        return eval_perplexity(params, test, test, NeighborTable{}, Gate::kOff, a.max_docs);
      }();
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "%s,%s,%ld,%.6f,%.6f\n", a.ckpt.filename().string().c_str(), a.gate.c_str(), r.tokens,
                r.nll_sum, r.ppl);
  write_text(a.csv, std::string("ckpt,gate,tokens,nll_sum,ppl\n") + buf);
  std::printf("ppl=%.4f over %ld tokens\n", r.ppl, r.tokens);
  return 0;
}

struct EvalQaArgs {
  fs::path ckpt, qa, corpus, csv;
  std::string gate = "on";
  int step = 0;
};

int cmd_eval_qa(const EvalQaArgs& a) {
  json c;
  c["gate"] = a.gate;
  c["step"] = a.step;
  emit_manifest(sidecar(a.csv),
                make_manifest("eval-qa", {{"ckpt", a.ckpt}, {"qa", a.qa}, {"train", a.corpus / "train.txt"}}, c, 0),
                false);
  const auto params = load_checkpoint(a.ckpt);
  const Corpus train = Corpus::load(a.corpus / "train.txt");
  const Alphabets alphabets = alphabets_from_vocab(Vocab::load(a.corpus / "vocab.txt"));
  const auto qa = load_qa(a.qa);
  const Gate gate = a.gate == "on" && params.has_retro ? Gate::kOn : Gate::kOff;
  const double em = eval_qa_em(qa, greedy_decoder(params, train, alphabets, gate), alphabets);
  char buf[200];
  std::snprintf(buf, sizeof buf, "%s,%d,%zu,%.4f\n", a.ckpt.filename().string().c_str(), a.step, qa.size(), em);
  write_text(a.csv, std::string("ckpt,step,n,em\n") + buf);
  std::printf("EM=%.2f%% over %zu questions\n", em, qa.size());
  return 0;
}

struct ReportArgs {
  int figure = 1;
  fs::path runs, csv;
  int step = -1;
};

struct RunSummary {
  std::string name;
  TrainConfig cfg;
  std::vector<RunRecord> records;
  std::vector<std::pair<int, double>> em;  // (step, EM)
};

std::vector<RunSummary> scan_runs(const fs::path& root) {
  std::vector<RunSummary> runs;
  std::vector<fs::path> dirs;
  if (fs::exists(root / "metrics.csv")) dirs.push_back(root);
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "metrics.csv")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    RunSummary s;
    s.name = d.filename().string();
    s.cfg = TrainConfig::load(d / "config.txt");
    s.records = read_records_csv(d / "metrics.csv");
    for (const auto& e : fs::directory_iterator(d)) {
      const auto fn = e.path().filename().string();
      if (fn.rfind("em", 0) != 0 || e.path().extension() != ".csv") continue;
      std::istringstream in(read_text(e.path()));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string x;
        while (std::getline(ls, x, ',')) f.push_back(x);
        if (f.size() == 4) s.em.emplace_back(std::stoi(f[1]), std::stod(f[3]));
      }
    }
    std::sort(s.em.begin(), s.em.end());
    runs.push_back(std::move(s));
  }
  if (runs.empty()) throw Error("report: no run directories with metrics.csv under " + root.string());
  std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    auto key = [](const RunSummary& r) { return r.cfg.ret_off() ? 11 : r.cfg.bin; };
    return key(a) < key(b);
  });
  return runs;
}

int cmd_report(const ReportArgs& a) {
  json c;
  c["figure"] = a.figure;
  c["step"] = a.step;
  emit_manifest(sidecar(a.csv), make_manifest("report", {}, c, 0), false);
  const auto runs = scan_runs(a.runs);
  std::ostringstream o;
  char buf[256];
  if (a.figure == 1) {
    o << "bin,upper,avg_overlap,ppl_at_step\n";
    for (const auto& r : runs) {
      const RunRecord* at = nullptr;
      for (const auto& rec : r.records)
        if (a.step < 0 || rec.step <= a.step) at = &rec;
      if (!at) continue;
      OverlapMeter meter;
      double sum = 0;
      int n = 0;
      for (const auto& rec : r.records)
        if (rec.step > 0 && rec.step <= at->step) {
          sum += rec.avg_overlap;
          ++n;
        }
      (void)meter;
      const std::string bin = r.cfg.ret_off() ? "off" : std::to_string(r.cfg.bin);
      const int upper = r.cfg.ret_off() ? 0 : bin_for(r.cfg.model.chunk, r.cfg.bin).upper;
      std::snprintf(buf, sizeof buf, "%s,%d,%.4f,%.4f\n", bin.c_str(), upper, n ? sum / n : 0.0, at->ppl);
      o << buf;
    }
  } else if (a.figure == 2 || a.figure == 4 || a.figure == 3) {
    // Wide table: one column per run, rows are steps.
    std::map<int, std::vector<std::string>> rows;
    o << "step";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      o << ',' << runs[i].name;
      if (a.figure == 3) {
        for (const auto& [step, em] : runs[i].em) {
          auto& row = rows[step];
          row.resize(runs.size());
          std::snprintf(buf, sizeof buf, "%.4f", em);
          row[i] = buf;
        }
      } else {
        for (const auto& rec : runs[i].records) {
          auto& row = rows[rec.step];
          row.resize(runs.size());
          std::snprintf(buf, sizeof buf, "%.4f", rec.ppl);
          row[i] = buf;
        }
      }
    }
    o << '\n';
    for (auto& [step, cells] : rows) {
      cells.resize(runs.size());
      o << step;
      for (const auto& cell : cells) o << ',' << cell;
      o << '\n';
    }
  } else {
    throw Error("report: --figure must be 1, 2, 3 or 4");
  }
  write_text(a.csv, o.str());
  std::cout << "figure " << a.figure << " table for " << runs.size() << " runs written to " << a.csv.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrolab: desk-scale retrieval-augmented language model lab"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenCorpusArgs gc;
  auto* s_gc = app.add_subcommand("gen-corpus", "generate the synthetic key/value lookup corpus");
  s_gc->add_option("--out", gc.out, "output directory")->required();
  s_gc->add_option("--facts", gc.cfg.n_facts, "number of facts")->capture_default_str();
  s_gc->add_option("--docs", gc.cfg.n_docs, "training documents")->capture_default_str();
  s_gc->add_option("--test-docs", gc.cfg.n_test_docs, "test documents")->capture_default_str();
  s_gc->add_option("--key-len", gc.cfg.key_len, "key tokens per fact")->capture_default_str();
  s_gc->add_option("--val-len", gc.cfg.val_len, "value tokens per fact")->capture_default_str();
  s_gc->add_option("--templates", gc.cfg.templates_per_fact, "documents stating each fact")->capture_default_str();
  s_gc->add_option("--chunk", gc.cfg.m, "chunk size m")->capture_default_str();
  s_gc->add_option("--doc-chunks", gc.cfg.doc_chunks, "chunks per document (even)")->capture_default_str();
  s_gc->add_flag("--echo-filler", gc.cfg.echo_filler, "draw value-chunk filler from the key chunk's filler");
  s_gc->add_option("--seed", gc.cfg.rng_seed, "generator seed")->capture_default_str();

  GenQaArgs gq;
  auto* s_gq = app.add_subcommand("gen-qa", "draw a QA set from a generated corpus");
  s_gq->add_option("--corpus", gq.corpus, "corpus directory from gen-corpus")->required()->check(CLI::ExistingDirectory);
  s_gq->add_option("--out", gq.out, "QA file")->required();
  s_gq->add_option("--n", gq.n, "questions")->capture_default_str();
  s_gq->add_option("--k", gq.k, "context pairs per question")->capture_default_str();
  s_gq->add_option("--seed", gq.seed, "seed")->capture_default_str();
  s_gq->add_option("--facts-from", gq.facts_from, "first eligible fact id")->capture_default_str();
  s_gq->add_option("--facts-to", gq.facts_to, "one past the last eligible fact id (-1: all)")->capture_default_str();

  BuildIndexArgs bi;
  auto* s_bi = app.add_subcommand("build-index", "embed a corpus and build the IVF(-PQ) index");
  s_bi->add_option("--corpus", bi.corpus, "corpus file")->required()->check(CLI::ExistingFile);
  s_bi->add_option("--out", bi.out, "index file")->required();
  s_bi->add_option("--dim", bi.dim, "embedding dimension")->capture_default_str();
  s_bi->add_option("--centroids", bi.centroids, "coarse centroids")->capture_default_str();
  s_bi->add_option("--pq", bi.pq, "'off' or number of PQ subquantizers")->capture_default_str();
  s_bi->add_option("--iters", bi.iters, "k-means iterations")->capture_default_str();
  s_bi->add_option("--seed", bi.seed, "k-means seed")->capture_default_str();

  NeighborArgs pn;
  auto* s_pn = app.add_subcommand("precompute-neighbors", "store the top candidates of every query chunk");
  s_pn->add_option("--queries", pn.queries, "query corpus file")->required()->check(CLI::ExistingFile);
  s_pn->add_option("--db", pn.db, "retrieval corpus file (the indexed one)")->required()->check(CLI::ExistingFile);
  s_pn->add_option("--index", pn.index, "index file")->required()->check(CLI::ExistingFile);
  s_pn->add_option("--out", pn.out, "neighbor file")->required();
  s_pn->add_option("--pool", pn.pool, "candidates per chunk")->capture_default_str();
  s_pn->add_option("--nprobe", pn.nprobe, "lists probed per query")->capture_default_str();
  s_pn->add_flag("--exclude-same-doc", pn.same_doc, "also drop candidates from the query's own document");

  OverlapArgs ao;
  auto* s_ao = app.add_subcommand("analyze-overlap", "histogram of input/neighbor overlap per bin");
  s_ao->add_option("--corpus", ao.corpus, "corpus file")->required()->check(CLI::ExistingFile);
  s_ao->add_option("--index", ao.index, "index over the corpus")->required()->check(CLI::ExistingFile);
  s_ao->add_option("--bins", ao.bins, "bins to report")->capture_default_str();
  s_ao->add_option("--csv", ao.csv, "output CSV")->required();
  s_ao->add_option("--pool", ao.pool, "candidate pool")->capture_default_str();
  s_ao->add_option("--nprobe", ao.nprobe, "lists probed")->capture_default_str();

  PretrainArgs pt;
  auto* s_pt = app.add_subcommand("pretrain", "train the base decoder (no retrieval)");
  s_pt->add_option("--train", pt.train, "training corpus file")->required()->check(CLI::ExistingFile);
  s_pt->add_option("--test", pt.test, "test corpus file")->check(CLI::ExistingFile);
  s_pt->add_option("--out", pt.out, "run directory")->required();
  s_pt->add_option("--steps", pt.steps, "training steps");
  s_pt->add_option("--seed", pt.seed, "run seed");
  s_pt->add_option("--stop-at", pt.stop_at, "interrupt at the first record at or after this step");
  add_config_args(s_pt, pt.config);

  RetroArgs rf;
  auto add_retro = [&](CLI::App* s, RetroArgs& r) {
    s->add_option("--base", r.base, "base checkpoint from pretrain")->required()->check(CLI::ExistingFile);
    s->add_option("--train", r.train, "training corpus file")->required()->check(CLI::ExistingFile);
    s->add_option("--train-neighbors", r.train_neighbors, "neighbors of the training chunks")
        ->required()
        ->check(CLI::ExistingFile);
    s->add_option("--test", r.test, "test corpus file")->check(CLI::ExistingFile);
    s->add_option("--test-neighbors", r.test_neighbors, "neighbors of the test chunks")->check(CLI::ExistingFile);
    s->add_option("--synonyms", r.synonyms, "synonym table (default: built from the vocabulary)")
        ->check(CLI::ExistingFile);
    s->add_option("--out", r.out, "run directory")->required();
    s->add_option("--steps", r.steps, "training steps");
    s->add_option("--seed", r.seed, "run seed");
    s->add_flag("--synth", r.synth, "inject a paraphrase of the input into one context slot");
    s->add_option("--rho", r.rho, "paraphrase replacement rate");
    s->add_option("--snapshot-every", r.snapshot_every, "also save model_step_N.ckpt every N steps");
    s->add_option("--stop-at", r.stop_at, "interrupt at the first record at or after this step");
    add_config_args(s, r.config);
  };
  auto* s_rf = app.add_subcommand("retrofit", "add retrieval to a base model and train under one policy");
  add_retro(s_rf, rf);
  s_rf->add_option("--policy", rf.policy, "overlap bin 1..10 or 'off'");

  RetroArgs gr;
  auto* s_gr = app.add_subcommand("grid", "one retrofit per overlap bin");
  add_retro(s_gr, gr);
  s_gr->add_option("--bins", gr.bins, "comma-separated bins, 'off' for Ret[off]")->capture_default_str();

  SynthArgs sa;
  auto* s_sa = app.add_subcommand("synth-augment", "paraphrase every chunk of a corpus");
  s_sa->add_option("--corpus", sa.corpus, "corpus file")->required()->check(CLI::ExistingFile);
  s_sa->add_option("--out", sa.out, "paraphrased corpus file")->required();
  s_sa->add_option("--synonyms", sa.synonyms, "synonym table (default: built from the vocabulary)")
      ->check(CLI::ExistingFile);
  s_sa->add_option("--synonyms-out", sa.synonyms_out, "write the synonym table used");
  s_sa->add_option("--rho", sa.rho, "replacement rate")->capture_default_str();
  s_sa->add_option("--seed", sa.seed, "seed")->capture_default_str();

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune-qa", "answer-masked tuning with the retrieval gate off");
  s_ft->add_option("--ckpt", ft.ckpt, "checkpoint to tune")->required()->check(CLI::ExistingFile);
  s_ft->add_option("--qa", ft.qa, "QA file")->required()->check(CLI::ExistingFile);
  s_ft->add_option("--corpus", ft.corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  s_ft->add_option("--out", ft.out, "run directory")->required();
  s_ft->add_option("--steps", ft.steps, "tuning steps");
  s_ft->add_option("--seed", ft.seed, "run seed");
  add_config_args(s_ft, ft.config);

  EvalPplArgs ep;
  auto* s_ep = app.add_subcommand("eval-ppl", "test perplexity with natural neighbors");
  s_ep->add_option("--ckpt", ep.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  s_ep->add_option("--test", ep.test, "test corpus file")->required()->check(CLI::ExistingFile);
  s_ep->add_option("--db", ep.db, "retrieval corpus file")->check(CLI::ExistingFile);
  s_ep->add_option("--index", ep.index, "index over the retrieval corpus")->check(CLI::ExistingFile);
  s_ep->add_option("--neighbors", ep.neighbors, "precomputed test neighbors")->check(CLI::ExistingFile);
  s_ep->add_option("--gate", ep.gate, "on, off or zero (zeroed contexts)")
      ->check(CLI::IsMember({"on", "off", "zero"}))
      ->capture_default_str();
  s_ep->add_option("--max-docs", ep.max_docs, "only the first N test documents (0: all)");
  s_ep->add_option("--nprobe", ep.nprobe, "lists probed")->capture_default_str();
  s_ep->add_option("--csv", ep.csv, "output CSV")->required();

  EvalQaArgs eq;
  auto* s_eq = app.add_subcommand("eval-qa", "exact match of greedy answers");
  s_eq->add_option("--ckpt", eq.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  s_eq->add_option("--qa", eq.qa, "QA file")->required()->check(CLI::ExistingFile);
  s_eq->add_option("--corpus", eq.corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  s_eq->add_option("--gate", eq.gate, "retrieval gate while decoding")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  s_eq->add_option("--step", eq.step, "training step to record with the score")->capture_default_str();
  s_eq->add_option("--csv", eq.csv, "output CSV")->required();

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "merge run CSVs into figure tables");
  s_rp->add_option("--figure", rp.figure, "1: final ppl per bin, 2/4: ppl vs step, 3: EM vs step")->required();
  s_rp->add_option("--runs", rp.runs, "grid directory")->required()->check(CLI::ExistingDirectory);
  s_rp->add_option("--step", rp.step, "figure 1: use the last record at or before this step");
  s_rp->add_option("--csv", rp.csv, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*s_gc) return cmd_gen_corpus(gc);
    if (*s_gq) return cmd_gen_qa(gq);
    if (*s_bi) return cmd_build_index(bi);
    if (*s_pn) return cmd_precompute(pn);
    if (*s_ao) return cmd_analyze_overlap(ao);
    if (*s_pt) return cmd_pretrain(pt);
    if (*s_rf) return cmd_retrofit(rf);
    if (*s_gr) return cmd_grid(gr);
    if (*s_sa) return cmd_synth_augment(sa);
    if (*s_ft) return cmd_finetune(ft);
    if (*s_ep) return cmd_eval_ppl(ep);
    if (*s_eq) return cmd_eval_qa(eq);
    if (*s_rp) return cmd_report(rp);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
