// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,9]
//
// Criteria 6-8 train the desk-scale grid (about an hour on one core); the
// rest finish in seconds. The exit status is the number of failed criteria.

#include "retrolab/binary_io.hpp"
#include "retrolab/eval.hpp"
#include "retrolab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unistd.h>
#include <string>
#include <vector>

#ifndef RETROLAB_CLI
#error "RETROLAB_CLI must name the retrolab executable"
#endif

namespace fs = std::filesystem;
using namespace retrolab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// 1. Gradient exactness

template <typename S>
void perturb(ModelParams<S>& p, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& t : p.tensors())
    for (Index i = 0; i < t.tensor->size(); ++i) t.tensor->data()[i] += static_cast<S>(n(rng));
}

Batch random_batch(Rng& rng, const ModelConfig& cfg, int batch, int seq_len) {
  auto chunk = [&] {
    TokenChunk c;
    for (int i = 0; i < cfg.chunk; ++i) c.tokens.push_back(static_cast<TokenId>(2 + uniform_index(rng, cfg.vocab - 2)));
    return c;
  };
  Batch b;
  b.seq_len = seq_len;
  for (int i = 0; i < batch; ++i) {
    std::vector<TokenId> seq;
    for (int t = 0; t < seq_len; ++t) seq.push_back(static_cast<TokenId>(2 + uniform_index(rng, cfg.vocab - 2)));
    b.tokens.push_back(seq);
    std::vector<RetrievedContext> ctx(b.num_chunks(cfg.chunk) - 1);
    for (auto& c : ctx)
      for (int r = 0; r < cfg.neighbors; ++r) {
        NeighborRecord rec;
        rec.neighbor = chunk();
        rec.continuation = chunk();
        rec.neighbor_zero = rec.continuation_zero = false;
        c.push_back(rec);
      }
    b.contexts.push_back(ctx);
  }
  return b;
}

Outcome gradient_exactness() {
  ModelConfig cfg;
  cfg.vocab = 32;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.chunk = 8;
  cfg.neighbors = 2;
  cfg.max_chunks = 4;
  cfg.ffn_mult = 2;
  cfg.cca_layers = {1, 2};
  auto p = init_params<double>(cfg, 21);
  perturb(p, 22);
  Rng rng(23);
  const Batch b = random_batch(rng, cfg, 2, cfg.max_tokens());
  const Targets t = next_token_targets(b);
  auto grads = backward(p, forward(p, b, Gate::kOn), t);
  auto pt = p.tensors();
  auto gt = grads.tensors();
  const double eps = 1e-3;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t ti = uniform_index(rng, pt.size());
    const Index ci = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(pt[ti].tensor->size())));
    double& x = pt[ti].tensor->data()[ci];
    const double saved = x;
    x = saved + eps;
    const double up = loss(forward(p, b, Gate::kOn), t);
    x = saved - eps;
    const double down = loss(forward(p, b, Gate::kOn), t);
    x = saved;
    const double fd = (up - down) / (2 * eps);
    const double an = gt[ti].tensor->data()[ci];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}));
  }
  return {worst < 1e-4, fmt("worst relative error %.2e over 50 coordinates (limit 1e-4)", worst)};
}

// ---------------------------------------------------------------------------
// 2. Overlap oracle

int brute_overlap(const std::vector<TokenId>& input, std::vector<TokenId> pool) {
  int n = 0;
  for (TokenId t : input) {
    if (t == kPad) continue;
    auto it = std::find(pool.begin(), pool.end(), t);
    if (it == pool.end()) continue;
    pool.erase(it);
    ++n;
  }
  return n;
}

Outcome overlap_oracle() {
  Rng rng(2);
  int mismatches = 0;
  const int trials = 10000;
  for (int trial = 0; trial < trials; ++trial) {
    const int m = 16;
    const int alphabet = 2 + static_cast<int>(uniform_index(rng, 30));
    auto draw = [&] {
      TokenChunk c;
      for (int i = 0; i < m; ++i) c.tokens.push_back(static_cast<TokenId>(uniform_index(rng, alphabet)));
      return c;
    };
    const TokenChunk input = draw();
    NeighborRecord r;
    r.neighbor = draw();
    r.continuation = draw();
    r.neighbor_zero = r.continuation_zero = false;
    std::vector<TokenId> joined = r.neighbor.tokens;
    joined.insert(joined.end(), r.continuation.tokens.begin(), r.continuation.tokens.end());
    std::erase(joined, kPad);
    mismatches += overlap(input, r) != brute_overlap(input.tokens, joined);
  }
  return {mismatches == 0, fmt("%d of %d pairs disagree with the brute-force oracle", mismatches, trials)};
}

// ---------------------------------------------------------------------------
// 3. Bin fidelity

Outcome bin_fidelity() {
  const auto bins = make_bins(64);
  const std::vector<int> want_upper{6, 12, 19, 25, 32, 38, 44, 51, 57, 64};
  // Labels the figure shows, keyed by bin index.
  const std::vector<std::pair<int, std::string>> want_labels{{4, "< 25"}, {5, "< 32"}, {6, "< 38"},
                                                             {7, "< 44"}, {8, "< 51"}, {10, "≤ 64"}};
  bool ok = bins.size() == 10;
  std::string uppers;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    ok = ok && bins[i].upper == want_upper[i];
    uppers += (i ? "," : "") + std::to_string(bins[i].upper);
  }
  std::string labels;
  for (const auto& [index, label] : want_labels) {
    ok = ok && bins[index - 1].label == label;
    labels += (labels.empty() ? "" : ", ") + bins[index - 1].label;
  }
  return {ok, "uppers [" + uppers + "], labels " + labels};
}

// ---------------------------------------------------------------------------
// 4. Index recall

Outcome index_recall() {
  const int n = 5000, dim = 64, clusters = 100;
  Rng rng(4);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  MatrixF centres(clusters, dim);
  for (Index i = 0; i < centres.size(); ++i) centres.data()[i] = normal(rng);
  centres.rowwise().normalize();
  auto sample = [&](int rows) {
    MatrixF x(rows, dim);
    for (int i = 0; i < rows; ++i) {
      const auto c = static_cast<Index>(uniform_index(rng, clusters));
      for (int j = 0; j < dim; ++j) x(i, j) = centres(c, j) + 0.1F * normal(rng);
      x.row(i).normalize();
    }
    return x;
  };
  const MatrixF x = sample(n);
  const MatrixF queries = sample(500);
  std::vector<ChunkId> ids;
  for (int i = 0; i < n; ++i) ids.push_back({i / 4, i % 4});
  const auto index = AnnIndex::build(x, ids, IndexConfig{64, 0, 20, 1});
  auto recall = [&](int nprobe) {
    int found = 0, total = 0;
    for (Index q = 0; q < queries.rows(); ++q) {
      ChunkEmbedding e{queries.row(q).transpose(), true};
      const auto truth = exact_search(x, ids, e, 2);
      const auto got = index.search(e, SearchOptions{2, nprobe, std::nullopt, false});
      for (const auto& t : truth) {
        ++total;
        found += std::any_of(got.begin(), got.end(), [&](const SearchHit& h) { return h.id == t.id; });
      }
    }
    return static_cast<double>(found) / total;
  };
  const double r8 = recall(8), r64 = recall(64);
  return {r8 >= 0.9 && r64 == 1.0, fmt("recall@2 %.4f at nprobe=8 (>= 0.9), %.4f at nprobe=64 (= 1)", r8, r64)};
}

// ---------------------------------------------------------------------------
// 5. Causality with retrieval recomputed

Outcome causality() {
  LookupCorpusConfig cc;
  cc.n_facts = 100;
  cc.n_docs = 300;
  cc.n_test_docs = 4;
  const auto lc = generate_lookup_corpus(cc);
  const auto emb = embed_corpus(lc.train);
  const auto index = AnnIndex::build(emb.vectors, emb.ids, IndexConfig{16, 0, 10, 1}, &emb.valid);
  ModelConfig mc;
  mc.vocab = lc.vocab.size();
  mc.layers = 2;
  mc.width = 32;
  mc.heads = 2;
  mc.chunk = cc.m;
  mc.cca_layers = {1, 2};
  auto p = init_params<float>(mc, 5);
  perturb(p, 6);

  // Contexts come from retrieving each chunk of the sequence itself.
  auto make_batch = [&](const std::vector<TokenId>& tokens) {
    Batch b;
    b.seq_len = static_cast<int>(tokens.size());
    b.tokens.push_back(tokens);
    std::vector<RetrievedContext> ctx;
    for (int u = 0; u + 1 < mc.max_chunks; ++u) {
      TokenChunk c;
      c.tokens.assign(tokens.begin() + u * mc.chunk, tokens.begin() + (u + 1) * mc.chunk);
      const auto hits = index.search(embed_chunk(c), SearchOptions{mc.neighbors, 8, std::nullopt, false});
      ctx.push_back(natural_context(lc.train, hits, mc.neighbors));
    }
    b.contexts.push_back(ctx);
    return b;
  };
  std::vector<TokenId> tokens;
  for (int u = 0; u < mc.max_chunks; ++u) {
    const auto& c = lc.test.chunk({0, u});
    tokens.insert(tokens.end(), c.tokens.begin(), c.tokens.end());
  }
  const MatrixF base = forward(p, make_batch(tokens), Gate::kOn).logits;
  const int T = static_cast<int>(tokens.size());
  int violations = 0, inert = 0;
  for (int pos = 0; pos < T; ++pos) {
    auto q = tokens;
    q[pos] = static_cast<TokenId>(q[pos] == lc.alphabets.filler[0] ? lc.alphabets.filler[1] : lc.alphabets.filler[0]);
    const MatrixF out = forward(p, make_batch(q), Gate::kOn).logits;
    violations += !(out.topRows(pos) == base.topRows(pos));
    inert += out.row(pos) == base.row(pos);
  }
  return {violations == 0 && inert == 0,
          fmt("%d of %d positions leak into earlier logits (bit-exact); %d perturbations had no effect at p", violations,
              T, inert)};
}

// ---------------------------------------------------------------------------
// 6-8. The desk-scale grid on the default lookup corpus

struct Desk {
  int layers = 2;
  int width = 48;
  int heads = 4;
  int pretrain_steps = 300;
  double pretrain_lr = 1e-3;
  int batch = 16;
  int retrofit_steps = 1500;
  double retrofit_lr = 1e-3;
  int eval_interval = 50;
  int eval_docs = 50;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

class Lab {
 public:
  explicit Lab(Desk d) : desk_(std::move(d)) {}

  // Records of one retrofit run; trained on first use.
  const TrainState& run(std::uint64_t seed, int bin, bool synth = false) {
    const auto key = std::make_tuple(seed, bin, synth);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    prepare();
    TrainConfig cfg = retro_config(seed);
    cfg.bin = bin;
    cfg.synth = synth;
    const auto t0 = std::chrono::steady_clock::now();
    TrainState st = retrofit(base_.params, data(), cfg);
    std::printf("  retrofit seed=%llu %s%s: final ppl %.3f, avg overlap %.2f (%.0f s)\n",
                static_cast<unsigned long long>(seed), bin == 0 ? "ret_off" : ("bin " + std::to_string(bin)).c_str(),
                synth ? " +synth" : "", st.records.back().ppl, st.records.back().avg_overlap, seconds_since(t0));
    std::fflush(stdout);
    return runs_.emplace(key, std::move(st)).first->second;
  }

  const LookupCorpus& corpus() {
    prepare();
    return lc_;
  }
  const Desk& desk() const { return desk_; }
  double base_ppl() const { return base_.records.back().ppl; }

  TrainConfig retro_config(std::uint64_t seed) const {
    TrainConfig cfg = pretrain_config();
    cfg.steps = desk_.retrofit_steps;
    cfg.lr_max = desk_.retrofit_lr;
    cfg.lr_min = desk_.retrofit_lr / 10;
    cfg.warmup_samples = static_cast<long>(desk_.batch) * desk_.retrofit_steps / 20;
    cfg.seed = seed;
    return cfg;
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  TrainConfig pretrain_config() const {
    TrainConfig cfg;
    cfg.model.vocab = lc_.vocab.size();
    cfg.model.layers = desk_.layers;
    cfg.model.width = desk_.width;
    cfg.model.heads = desk_.heads;
    cfg.model.chunk = lc_.config.m;
    cfg.model.cca_layers = ModelConfig::default_cca(desk_.layers);
    cfg.batch = desk_.batch;
    cfg.steps = desk_.pretrain_steps;
    cfg.lr_max = desk_.pretrain_lr;
    cfg.lr_min = desk_.pretrain_lr / 10;
    cfg.warmup_samples = static_cast<long>(desk_.batch) * desk_.pretrain_steps / 10;
    cfg.eval_interval = desk_.eval_interval;
    cfg.eval_docs = desk_.eval_docs;
    return cfg;
  }

  RetroData data() const { return {&lc_.train, &lc_.test, &train_nbrs_, &test_nbrs_, &synonyms_}; }

  void prepare() {
    if (ready_) return;
    const auto t0 = std::chrono::steady_clock::now();
    lc_ = generate_lookup_corpus(LookupCorpusConfig{});
    const auto emb = embed_corpus(lc_.train);
    const auto index = AnnIndex::build(emb.vectors, emb.ids, IndexConfig{}, &emb.valid);
    PrecomputeOptions po;
    po.threads = thread_budget();
    train_nbrs_ = precompute_neighbors(lc_.train, lc_.train, index, po);
    po.exclude_self = false;
    test_nbrs_ = precompute_neighbors(lc_.test, lc_.train, index, po);
    synonyms_ = default_synonyms(lc_.alphabets);
    base_ = pretrain_base(lc_.train, &lc_.test, pretrain_config());
    std::printf("  desk setup: L=%d h=%d B=%d, base pretrain %d steps, test ppl %.3f (%.0f s)\n", desk_.layers,
                desk_.width, desk_.batch, desk_.pretrain_steps, base_ppl(), seconds_since(t0));
    std::fflush(stdout);
    ready_ = true;
  }

  Desk desk_;
  bool ready_ = false;
  LookupCorpus lc_;
  NeighborTable train_nbrs_, test_nbrs_;
  SynonymTable synonyms_;
  TrainState base_;
  std::map<std::tuple<std::uint64_t, int, bool>, TrainState> runs_;
};

constexpr double kNever = std::numeric_limits<double>::infinity();

double activation_step(Lab& lab, std::uint64_t seed, int bin, bool synth = false) {
  const auto rep = detect_activation(lab.run(seed, bin, synth).records, lab.run(seed, 0).records);
  return rep.activated ? rep.step : kNever;
}

Outcome activation_trend(Lab& lab) {
  const auto& seeds = lab.desk().seeds;
  std::map<int, double> final_ppl, act;
  for (int bin = 0; bin <= 10; ++bin) {
    std::vector<double> ppl, steps;
    for (auto s : seeds) {
      ppl.push_back(lab.run(s, bin).records.back().ppl);
      if (bin > 0) steps.push_back(activation_step(lab, s, bin));
    }
    final_ppl[bin] = median(ppl);
    if (bin > 0) act[bin] = median(steps);
  }
  const double off = final_ppl[0];
  std::ostringstream d;
  d << fmt("median final ppl ret_off %.3f;", off);
  bool high = true;
  for (int b = 8; b <= 10; ++b) {
    high = high && final_ppl[b] <= 0.8 * off;
    d << fmt(" bin%d %.3f (x%.3f)", b, final_ppl[b], final_ppl[b] / off);
  }
  bool low = true;
  for (int b = 1; b <= 4; ++b) {
    low = low && std::abs(final_ppl[b] / off - 1.0) <= 0.05;
    d << fmt(" bin%d x%.3f", b, final_ppl[b] / off);
  }
  bool later = false;
  d << "; median activation step:";
  for (int b = 5; b <= 10; ++b) {
    if (b < 10 && std::isfinite(act[b]) && act[b] > act[10]) later = true;
    d << fmt(" bin%d %s", b, std::isfinite(act[b]) ? std::to_string(static_cast<int>(act[b])).c_str() : "never");
  }
  d << fmt(" [high<=0.8x %s, low within 5%% %s, later bin %s]", high ? "ok" : "no", low ? "ok" : "no",
           later ? "ok" : "no");
  return {high && low && later && std::isfinite(act[10]), d.str()};
}

Outcome paraphrase_acceleration(Lab& lab) {
  std::vector<double> nat_steps, syn_steps, nat_ppl, syn_ppl;
  std::ostringstream per_seed;
  for (auto s : lab.desk().seeds) {
    nat_steps.push_back(activation_step(lab, s, 10));
    syn_steps.push_back(activation_step(lab, s, 10, true));
    nat_ppl.push_back(lab.run(s, 10).records.back().ppl);
    syn_ppl.push_back(lab.run(s, 10, true).records.back().ppl);
    per_seed << fmt(" seed%llu %g->%g", static_cast<unsigned long long>(s), nat_steps.back(), syn_steps.back());
  }
  const double nat = median(nat_steps), syn = median(syn_steps);
  const double reduction = std::isfinite(nat) && std::isfinite(syn) ? 1.0 - syn / nat : 0.0;
  const double ratio = median(syn_ppl) / median(nat_ppl);
  return {std::isfinite(nat) && reduction >= 0.2 && ratio <= 1.15,
          fmt("median activation step natural %g, with injection %g (reduction %.1f%%, need >= 20%%); final ppl "
              "ratio %.3f (<= 1.15);",
              nat, syn, 100 * reduction, ratio) +
              per_seed.str()};
}

Outcome downstream_doubling(Lab& lab) {
  const auto& lc = lab.corpus();
  // Tune on questions about the first half of the facts, score the other half.
  std::vector<int> tune_pool, eval_pool;
  for (int f = 0; f < static_cast<int>(lc.facts.size()); ++f) (f % 2 ? eval_pool : tune_pool).push_back(f);
  const auto tune_qa = generate_qa_set(lc, 400, 11, tune_pool);
  const auto eval_qa = generate_qa_set(lc, 200, 12, eval_pool);
  std::vector<double> em_retro, em_off;
  std::ostringstream per_seed;
  for (auto s : lab.desk().seeds) {
    TrainConfig cfg = lab.retro_config(s);
    cfg.steps = 100;
    cfg.lr_max = 5e-6;
    cfg.lr_min = 5e-7;
    cfg.warmup_samples = 0;
    cfg.weight_decay = 0.01;
    cfg.eval_interval = 100;
    auto em = [&](int bin) {
      const auto tuned = finetune_qa(lab.run(s, bin).params, tune_qa, lc.train, lc.alphabets, cfg);
      return eval_qa_em(eval_qa, greedy_decoder(tuned.params, lc.train, lc.alphabets, Gate::kOn), lc.alphabets);
    };
    em_retro.push_back(em(10));
    em_off.push_back(em(0));
    per_seed << fmt(" seed%llu %.1f/%.1f", static_cast<unsigned long long>(s), em_retro.back(), em_off.back());
  }
  const double r = median(em_retro), o = median(em_off);
  return {r > 0.0 && r >= 1.5 * o,
          fmt("median EM bin10 %.2f%%, ret_off %.2f%% (need bin10 >= 1.5x ret_off and > 0);", r, o) +
              per_seed.str()};
}

// ---------------------------------------------------------------------------
// 9. Determinism of every subcommand

int sh(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" RETROLAB_CLI "' " + args + " > log.txt 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("retrolab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<std::string> pipeline{
      "gen-corpus --out c --facts 60 --docs 200 --test-docs 12 --seed 4",
      "gen-qa --corpus c --out qa.txt --n 16 --seed 2",
      "build-index --corpus c/train.txt --out idx.bin --centroids 8 --pq 4",
      "precompute-neighbors --queries c/train.txt --db c/train.txt --index idx.bin --out ntr.bin",
      "precompute-neighbors --queries c/test.txt --db c/train.txt --index idx.bin --out nte.bin",
      "analyze-overlap --corpus c/train.txt --index idx.bin --csv overlap.csv",
      "pretrain --train c/train.txt --test c/test.txt --out base --config run.cfg --steps 12",
      "retrofit --base base/model.ckpt --train c/train.txt --train-neighbors ntr.bin --test c/test.txt "
      "--test-neighbors nte.bin --out r --config run.cfg --steps 12 --policy 10 --synth --snapshot-every 6",
      "grid --base base/model.ckpt --train c/train.txt --train-neighbors ntr.bin --test c/test.txt "
      "--test-neighbors nte.bin --out g --config run.cfg --steps 12 --bins 3,10,off",
      "synth-augment --corpus c/train.txt --out c/para.txt --synonyms-out syn.tsv --seed 3",
      "finetune-qa --ckpt r/model.ckpt --qa qa.txt --corpus c --out ft --steps 6 --set eval_interval=3",
      "eval-ppl --ckpt r/model.ckpt --test c/test.txt --db c/train.txt --index idx.bin --csv ppl.csv",
      "eval-qa --ckpt ft/model.ckpt --qa qa.txt --corpus c --step 6 --csv g/bin_10/em_6.csv",
      "report --figure 1 --runs g --csv fig1.csv",
      "report --figure 2 --runs g --csv fig2.csv",
      "report --figure 3 --runs g --csv fig3.csv",
  };
  const std::string cfg =
      "model_layers=2\nmodel_width=16\nmodel_heads=2\nmodel_ffn_mult=2\nmodel_cca=2\nbatch=4\nlr_max=3e-3\n"
      "warmup_samples=8\neval_interval=4\neval_docs=3\n";
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    write_file(dir / "run.cfg", std::vector<char>(cfg.begin(), cfg.end()));
    for (const auto& step : pipeline)
      if (sh(dir, step) != 0) return {false, "'" + step + "' failed in run " + name};
  }
  int files = 0, differ = 0;
  std::string first_diff;
  std::set<std::string> subcommands;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "log.txt") continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ++files;
    const fs::path other = root / "b" / rel;
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) {
      if (!differ++) first_diff = rel.string();
    }
  }
  for (const auto& step : pipeline) subcommands.insert(step.substr(0, step.find(' ')));
  fs::remove_all(root);
  return {differ == 0 && files > 0,
          fmt("%zu subcommands, %d output files compared, %d differ", subcommands.size(), files, differ) +
              (differ ? " (first: " + first_diff + ")" : "")};
}

// ---------------------------------------------------------------------------
// 10. Paraphrase contract

Outcome paraphrase_contract() {
  const auto lc = generate_lookup_corpus(LookupCorpusConfig{});
  const auto syn = default_synonyms(lc.alphabets);
  const double rho = 0.35;
  Rng pick(10);
  int length_ok = 0, order_ok = 0;
  ParaphraseStats stats;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const ChunkId id{static_cast<std::int32_t>(uniform_index(pick, lc.train.num_documents())),
                     static_cast<std::int32_t>(uniform_index(pick, lc.config.doc_chunks))};
    const auto& c = lc.train.chunk(id);
    Rng rng(derive_seed(99, {static_cast<std::uint64_t>(i)}));
    const auto p = paraphrase(c, syn, rho, rng, &stats);
    length_ok += p.size() == c.size();
    // Unreplaced tokens keep their positions, and every change is a listed synonym.
    bool ok = p.size() == c.size();
    for (int t = 0; ok && t < c.size(); ++t) {
      if (p.tokens[t] == c.tokens[t]) continue;
      const auto* alts = syn.find(c.tokens[t]);
      ok = alts && std::find(alts->begin(), alts->end(), p.tokens[t]) != alts->end();
    }
    order_ok += ok;
  }
  const double rate = static_cast<double>(stats.replaced) / stats.eligible;
  return {length_ok == n && order_ok == n && std::abs(rate - rho) <= 0.05,
          fmt("length preserved %d/%d, order preserved %d/%d, replacement rate %.4f (rho %.2f +- 0.05)", length_ok, n,
              order_ok, n, rate, rho)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::istringstream in(argv[++i]);
      for (std::string x; std::getline(in, x, ',');) only.insert(std::stoi(x));
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,2,...]\n");
      return 2;
    }
  }
  Lab lab{Desk{}};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient exactness", gradient_exactness},
      {"overlap oracle", overlap_oracle},
      {"bin fidelity", bin_fidelity},
      {"index recall", index_recall},
      {"causality", causality},
      {"activation threshold trend", [&] { return activation_trend(lab); }},
      {"paraphrase acceleration", [&] { return paraphrase_acceleration(lab); }},
      {"downstream doubling", [&] { return downstream_doubling(lab); }},
      {"determinism", determinism},
      {"paraphrase contract", paraphrase_contract},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed;
}
