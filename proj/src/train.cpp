#include "retrolab/train.hpp"

#include "retrolab/binary_io.hpp"
#include "retrolab/eval.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

namespace retrolab {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw Error("config: expected a boolean, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

int TrainConfig::warmup_steps() const {
  return static_cast<int>((warmup_samples + batch - 1) / batch);
}

void TrainConfig::validate() const {
  model.validate();
  if (steps < 0) throw Error("config: steps must be >= 0");
  if (batch < 1) throw Error("config: batch must be >= 1");
  if (lr_min < 0 || lr_min > lr_max) throw Error("config: need 0 <= lr_min <= lr_max");
  if (warmup_samples < 0) throw Error("config: warmup_samples must be >= 0");
  if (steps > 0 && warmup_samples >= static_cast<long>(steps) * batch)
    throw Error("config: warmup_samples must be smaller than steps * batch");
  if (eval_interval < 1) throw Error("config: eval_interval must be >= 1");
  if (bin < 0 || bin > 10) throw Error("config: policy must be off or a bin in 1..10");
  if (pool < model.neighbors) throw Error("config: pool must be >= k");
  if (rho < 0 || rho > 1 || injection_probability < 0 || injection_probability > 1)
    throw Error("config: rho and injection_probability must lie in [0, 1]");
  if (synth && model.neighbors != 2) throw Error("config: paraphrase injection needs k=2");
}

std::string TrainConfig::to_string() const {
  std::ostringstream o;
  const auto& c = model;
  o << "model_vocab=" << c.vocab << "\nmodel_layers=" << c.layers << "\nmodel_width=" << c.width
    << "\nmodel_heads=" << c.heads << "\nmodel_chunk=" << c.chunk << "\nmodel_neighbors=" << c.neighbors
    << "\nmodel_max_chunks=" << c.max_chunks << "\nmodel_encoder_layers=" << c.encoder_layers
    << "\nmodel_ffn_mult=" << c.ffn_mult << "\nmodel_cca=";
  for (std::size_t i = 0; i < c.cca_layers.size(); ++i) o << (i ? "," : "") << c.cca_layers[i];
  o << "\nsteps=" << steps << "\nbatch=" << batch << "\nlr_max=" << fmt_double(lr_max)
    << "\nlr_min=" << fmt_double(lr_min) << "\nwarmup_samples=" << warmup_samples
    << "\nbeta1=" << fmt_double(beta1) << "\nbeta2=" << fmt_double(beta2) << "\nadam_eps=" << fmt_double(adam_eps)
    << "\nweight_decay=" << fmt_double(weight_decay) << "\neval_interval=" << eval_interval
    << "\neval_docs=" << eval_docs << "\nseed=" << seed << "\npolicy=" << (bin == 0 ? "off" : std::to_string(bin))
    << "\npool=" << pool << "\nsynth=" << (synth ? 1 : 0) << "\nrho=" << fmt_double(rho)
    << "\ninjection_probability=" << fmt_double(injection_probability) << "\nsynth_seed=" << synth_seed
    << "\nfreeze_paraphrases=" << (freeze_paraphrases ? 1 : 0) << "\nfreeze_retro=" << (freeze_retro ? 1 : 0)
    << "\nwall_clock=" << (wall_clock ? 1 : 0) << "\n";
  return o.str();
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto& m = cfg.model;
  auto as_int = [&] { return std::stoi(value); };
  try {
    if (key == "model_vocab") m.vocab = as_int();
    else if (key == "model_layers") m.layers = as_int();
    else if (key == "model_width") m.width = as_int();
    else if (key == "model_heads") m.heads = as_int();
    else if (key == "model_chunk") m.chunk = as_int();
    else if (key == "model_neighbors") m.neighbors = as_int();
    else if (key == "model_max_chunks") m.max_chunks = as_int();
    else if (key == "model_encoder_layers") m.encoder_layers = as_int();
    else if (key == "model_ffn_mult") m.ffn_mult = as_int();
    else if (key == "model_cca") {
      m.cca_layers.clear();
      std::istringstream in(value);
      std::string item;
      while (std::getline(in, item, ','))
        if (!trim(item).empty()) m.cca_layers.push_back(std::stoi(item));
    } else if (key == "steps") cfg.steps = as_int();
    else if (key == "batch") cfg.batch = as_int();
    else if (key == "lr_max") cfg.lr_max = std::stod(value);
    else if (key == "lr_min") cfg.lr_min = std::stod(value);
    else if (key == "warmup_samples") cfg.warmup_samples = std::stol(value);
    else if (key == "beta1") cfg.beta1 = std::stod(value);
    else if (key == "beta2") cfg.beta2 = std::stod(value);
    else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "eval_interval") cfg.eval_interval = as_int();
    else if (key == "eval_docs") cfg.eval_docs = as_int();
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "policy") cfg.bin = value == "off" ? 0 : as_int();
    else if (key == "pool") cfg.pool = as_int();
    else if (key == "synth") cfg.synth = parse_bool(value);
    else if (key == "rho") cfg.rho = std::stod(value);
    else if (key == "injection_probability") cfg.injection_probability = std::stod(value);
    else if (key == "synth_seed") cfg.synth_seed = std::stoull(value);
    else if (key == "freeze_paraphrases") cfg.freeze_paraphrases = parse_bool(value);
    else if (key == "freeze_retro") cfg.freeze_retro = parse_bool(value);
    else if (key == "wall_clock") cfg.wall_clock = parse_bool(value);
    else throw Error("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw Error("config: bad value '" + value + "' for " + key);
  } catch (const std::out_of_range&) {
    throw Error("config: value out of range for " + key);
  }
}

TrainConfig TrainConfig::from_string(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config: expected key=value, got '" + line + "'");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write config " + path.string());
  out << to_string();
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename S>
void adam_update(S* w, const S* g, S* m, S* v, Index n, long t, double lr, const AdamHyper& h) {
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const S b1 = static_cast<S>(h.beta1), b2 = static_cast<S>(h.beta2);
  const S step = static_cast<S>(lr / c1);
  const S vscale = static_cast<S>(1.0 / std::sqrt(c2));
  const S eps = static_cast<S>(h.eps);
  const S decay = static_cast<S>(lr * h.weight_decay);
  for (Index i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (S(1) - b1) * g[i];
    v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
    w[i] -= step * m[i] / (std::sqrt(v[i]) * vscale + eps) + decay * w[i];
  }
}

template void adam_update<float>(float*, const float*, float*, float*, Index, long, double, const AdamHyper&);
template void adam_update<double>(double*, const double*, double*, double*, Index, long, double, const AdamHyper&);

AdamState adam_init(const ModelParams<float>& params) {
  return AdamState{zeros_like(params), zeros_like(params), 0};
}

void adam_step(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state, double lr,
               const AdamHyper& hyper, const std::vector<bool>& frozen) {
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
    throw Error("adam_step: gradient and parameter layouts differ");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    if (!g[i].tensor->allFinite())
      throw Error("adam_step: non-finite gradient in " + g[i].name + " at step " + std::to_string(state.t + 1));
  }
  ++state.t;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    if (p[i].tensor->size() != g[i].tensor->size()) throw Error("adam_step: shape mismatch in " + p[i].name);
    adam_update(p[i].tensor->data(), g[i].tensor->data(), m[i].tensor->data(), v[i].tensor->data(),
                p[i].tensor->size(), state.t, lr, hyper);
  }
}

namespace {
constexpr char kAdamMagic[8] = {'R', 'A', 'D', 'A', 'M', '0', '1', '\0'};
}

std::vector<char> serialize_adam(const AdamState& state) {
  BinaryWriter w;
  w.bytes(kAdamMagic, sizeof kAdamMagic);
  w.u64(static_cast<std::uint64_t>(state.t));
  w.str(config_to_string(state.m.cfg));
  w.u32(state.m.has_retro ? 1 : 0);
  for (const auto* p : {&state.m, &state.v})
    for (const auto& t : p->tensors()) w.floats(t.tensor->data(), static_cast<std::size_t>(t.tensor->size()));
  return w.take();
}

AdamState deserialize_adam(const std::vector<char>& data) {
  BinaryReader r(data);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kAdamMagic, sizeof magic) != 0) throw Error("optimizer state: bad magic");
  AdamState s;
  s.t = static_cast<long>(r.u64());
  const ModelConfig cfg = config_from_string(r.str());
  const bool retro = r.u32() != 0;
  s.m = zero_params<float>(cfg, retro);
  s.v = zero_params<float>(cfg, retro);
  for (auto* p : {&s.m, &s.v})
    for (auto& t : p->tensors()) r.floats(t.tensor->data(), static_cast<std::size_t>(t.tensor->size()));
  if (!r.done()) throw Error("optimizer state: trailing bytes");
  return s;
}

double lr_schedule(long step, const TrainConfig& cfg) {
  const long warm = cfg.warmup_steps();
  if (step < warm) return cfg.lr_max * static_cast<double>(step) / static_cast<double>(warm);
  const long span = static_cast<long>(cfg.steps) - warm;
  if (span <= 0 || step >= warm + span) return cfg.lr_min;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(span);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Neighbor table

namespace {
constexpr char kNeighborMagic[8] = {'R', 'N', 'B', 'R', 'S', '0', '1', '\0'};
}

const std::vector<SearchHit>& NeighborTable::at(ChunkId id) const {
  if (id.doc < 0 || static_cast<std::size_t>(id.doc) >= hits.size() || id.offset < 0 ||
      static_cast<std::size_t>(id.offset) >= hits[id.doc].size())
    throw Error("neighbor table: chunk id out of range");
  return hits[id.doc][id.offset];
}

std::vector<char> NeighborTable::serialize() const {
  BinaryWriter w;
  w.bytes(kNeighborMagic, sizeof kNeighborMagic);
  w.u32(static_cast<std::uint32_t>(pool));
  w.u64(query_digest);
  w.u64(db_digest);
  w.u32(static_cast<std::uint32_t>(hits.size()));
  for (const auto& doc : hits) {
    w.u32(static_cast<std::uint32_t>(doc.size()));
    for (const auto& chunk : doc) {
      w.u32(static_cast<std::uint32_t>(chunk.size()));
      for (const auto& h : chunk) {
        w.i32(h.id.doc);
        w.i32(h.id.offset);
        w.f32(h.score);
      }
    }
  }
  return w.take();
}

NeighborTable NeighborTable::deserialize(const std::vector<char>& data) {
  BinaryReader r(data);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kNeighborMagic, sizeof magic) != 0) throw Error("neighbor file: bad magic");
  NeighborTable t;
  t.pool = static_cast<int>(r.u32());
  t.query_digest = r.u64();
  t.db_digest = r.u64();
  t.hits.resize(r.u32());
  for (auto& doc : t.hits) {
    doc.resize(r.u32());
    for (auto& chunk : doc) {
      chunk.resize(r.u32());
      for (auto& h : chunk) {
        h.id.doc = r.i32();
        h.id.offset = r.i32();
        h.score = r.f32();
      }
    }
  }
  if (!r.done()) throw Error("neighbor file: trailing bytes");
  return t;
}

void NeighborTable::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

NeighborTable NeighborTable::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

void check_index_matches(const AnnIndex& index, const Corpus& db, const EmbeddingConfig& embedding) {
  if (index.dim() != embedding.dim) throw Error("index/corpus mismatch: embedding dimension differs");
  std::vector<ChunkId> expected;
  for (const auto& id : db.chunk_ids())
    if (embed_chunk(db.chunk(id), embedding).valid) expected.push_back(id);
  std::vector<ChunkId> got = index.ids();
  std::sort(got.begin(), got.end());
  if (got != expected) throw Error("index/corpus mismatch: indexed ids differ from the corpus chunks");
}

NeighborTable precompute_neighbors(const Corpus& queries, const Corpus& db, const AnnIndex& index,
                                   const PrecomputeOptions& opts) {
  if (queries.chunk_size() != db.chunk_size()) throw Error("precompute: chunk sizes differ");
  NeighborTable t;
  t.pool = opts.pool;
  t.query_digest = queries.digest();
  t.db_digest = db.digest();
  t.hits.resize(queries.num_documents());
  for (std::size_t d = 0; d < t.hits.size(); ++d) t.hits[d].resize(queries.num_chunks(static_cast<std::int32_t>(d)));

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t d = next++; d < t.hits.size(); d = next++) {
      for (std::size_t c = 0; c < t.hits[d].size(); ++c) {
        const ChunkId id{static_cast<std::int32_t>(d), static_cast<std::int32_t>(c)};
        const auto q = embed_chunk(queries.chunk(id), opts.embedding);
        if (!q.valid) continue;
        SearchOptions so;
        so.n = opts.pool;
        so.nprobe = opts.nprobe;
        if (opts.exclude_self || opts.exclude_same_doc) so.exclude = id;
        so.exclude_same_doc = opts.exclude_same_doc;
        t.hits[d][c] = index.search(q, so);
      }
    }
  };
  const int n = std::max(1, opts.threads);
  std::vector<std::thread> pool;
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return t;
}

std::vector<NeighborRecord> candidate_records(const Corpus& db, const std::vector<SearchHit>& hits, int pool) {
  std::vector<NeighborRecord> out;
  const std::size_t n = std::min(hits.size(), static_cast<std::size_t>(pool));
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(assemble_record(db, hits[i]));
  return out;
}

RetrievedContext natural_context(const Corpus& db, const std::vector<SearchHit>& hits, int k) {
  RetrievedContext ctx = candidate_records(db, hits, k);
  while (static_cast<int>(ctx.size()) < k) ctx.push_back(zero_record(db.chunk_size()));
  return ctx;
}

// ---------------------------------------------------------------------------
// Windows and records

std::vector<Window> make_windows(const Corpus& corpus, int max_chunks) {
  std::vector<Window> out;
  for (std::size_t d = 0; d < corpus.num_documents(); ++d) {
    const int nc = corpus.num_chunks(static_cast<std::int32_t>(d));
    for (int f = 0; f < nc; f += max_chunks)
      out.push_back({static_cast<std::int32_t>(d), f, std::min(max_chunks, nc - f)});
  }
  return out;
}

void write_records_csv(const std::filesystem::path& path, const std::vector<RunRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,loss,ppl,avg_overlap,wall_ms\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.4f,%ld\n", r.step, r.loss, r.ppl, r.avg_overlap, r.wall_ms);
    out << buf;
  }
}

std::vector<RunRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,", 0) != 0) throw Error("run CSV: missing header in " + path.string());
  std::vector<RunRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string f[5];
    for (auto& x : f)
      if (!std::getline(s, x, ',')) throw Error("run CSV: short row in " + path.string());
    out.push_back({std::stoi(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stol(f[4])});
  }
  return out;
}

void save_train_state(const std::filesystem::path& dir, const TrainState& state) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", state.params);
  write_file(dir / "optimizer.bin", serialize_adam(state.adam));
  write_records_csv(dir / "metrics.csv", state.records);
  std::ofstream out(dir / "state.txt", std::ios::binary);
  out << "step=" << state.step << "\ninput_hash=" << state.input_hash << "\n";
}

TrainState load_train_state(const std::filesystem::path& dir) {
  TrainState s;
  s.params = load_checkpoint(dir / "model.ckpt");
  s.adam = deserialize_adam(read_file(dir / "optimizer.bin"));
  s.records = read_records_csv(dir / "metrics.csv");
  std::ifstream in(dir / "state.txt");
  if (!in) throw Error("cannot read " + (dir / "state.txt").string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("step=", 0) == 0) s.step = std::stoi(line.substr(5));
    else if (line.rfind("input_hash=", 0) == 0) s.input_hash = std::stoull(line.substr(11));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

// Epoch-wise shuffled stream of window indices; position -> window depends
// only on (seed, position), so a resumed run sees the same order.
class DataOrder {
 public:
  DataOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw Error("training: the corpus has no sequences");
  }

  std::size_t at(std::size_t position) {
    const std::size_t epoch = position / n_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, {100, epoch}));
      for (std::size_t i = n_ - 1; i > 0; --i) std::swap(perm_[i], perm_[uniform_index(rng, i + 1)]);
      epoch_ = epoch;
    }
    return perm_[position % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

using ContextFn = std::function<RetrievedContext(ChunkId input, int b, int u)>;

Batch window_batch(const Corpus& corpus, const std::vector<Window>& ws, int k, const ContextFn& context) {
  const int m = corpus.chunk_size();
  int max_chunks = 0;
  for (const auto& w : ws) max_chunks = std::max(max_chunks, w.chunks);
  Batch b;
  b.seq_len = max_chunks * m;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const Window& w = ws[i];
    std::vector<TokenId> seq(static_cast<std::size_t>(b.seq_len), kPad);
    for (int u = 0; u < w.chunks; ++u) {
      const auto& toks = corpus.chunk({w.doc, w.first + u}).tokens;
      std::copy(toks.begin(), toks.end(), seq.begin() + static_cast<std::ptrdiff_t>(u) * m);
    }
    b.tokens.push_back(std::move(seq));
    std::vector<RetrievedContext> ctx;
    if (context) {
      for (int u = 0; u + 1 < max_chunks; ++u) {
        if (u + 1 < w.chunks) ctx.push_back(context({w.doc, w.first + u}, static_cast<int>(i), u));
        else ctx.push_back(ret_off(k, m));
      }
    }
    b.contexts.push_back(std::move(ctx));
  }
  return b;
}

void hash_batch(Fnv1a& h, const Batch& b) {
  for (const auto& seq : b.tokens) h.update(seq.data(), seq.size() * sizeof(TokenId));
}

AdamHyper hyper_of(const TrainConfig& cfg) { return {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}; }

struct IntervalStats {
  double loss_sum = 0.0;
  int loss_count = 0;
  OverlapMeter overlap;
};

class WallClock {
 public:
  explicit WallClock(bool on) : on_(on), start_(std::chrono::steady_clock::now()) {}
  long elapsed_ms() const {
    if (!on_) return 0;
    return static_cast<long>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start_).count());
  }

 private:
  bool on_;
  std::chrono::steady_clock::time_point start_;
};

bool record_due(int step, const TrainConfig& cfg) { return step % cfg.eval_interval == 0 || step == cfg.steps; }

}  // namespace

TrainState pretrain_base(const Corpus& train, const Corpus* test, const TrainConfig& cfg, const ProgressFn& progress,
                         TrainState* resume) {
  cfg.validate();
  if (train.chunk_size() != cfg.model.chunk) throw Error("pretrain: corpus chunk size differs from the model");
  TrainState st;
  if (resume) {
    st = std::move(*resume);
  } else {
    st.params = zero_params<float>(cfg.model, false);
    auto full = init_params<float>(cfg.model, cfg.seed);
    auto dst = st.params.tensors();
    auto src = full.tensors();
    for (auto& t : dst)
      for (auto& s : src)
        if (s.name == t.name) *t.tensor = *s.tensor;
    st.adam = adam_init(st.params);
  }
  const auto windows = make_windows(train, cfg.model.max_chunks);
  DataOrder order(windows.size(), derive_seed(cfg.seed, {1}));
  IntervalStats stats;
  WallClock clock(cfg.wall_clock);
  Fnv1a input_hash(st.input_hash);

  auto emit = [&](int step) {
    RunRecord r;
    r.step = step;
    r.loss = stats.loss_count ? stats.loss_sum / stats.loss_count : std::numeric_limits<double>::quiet_NaN();
    r.ppl = test ? eval_perplexity_zeroed(st.params, *test, cfg.eval_docs).ppl : std::exp(r.loss);
    r.avg_overlap = 0.0;
    r.wall_ms = clock.elapsed_ms();
    st.records.push_back(r);
    stats = IntervalStats{};
    return !progress || progress(r, st);
  };

  if (st.step == 0 && st.records.empty() && !emit(0)) return st;
  while (st.step < cfg.steps) {
    std::vector<Window> ws;
    for (int b = 0; b < cfg.batch; ++b)
      ws.push_back(windows[order.at(static_cast<std::size_t>(st.step) * cfg.batch + b)]);
    Batch batch = window_batch(train, ws, cfg.model.neighbors, {});
    hash_batch(input_hash, batch);
    const Targets t = next_token_targets(batch);
    auto fs = forward(st.params, batch, Gate::kOff);
    const double l = loss(fs, t);
    if (!std::isfinite(l)) throw Error("pretrain: loss diverged at step " + std::to_string(st.step));
    auto g = backward(st.params, fs, t);
    adam_step(st.params, g, st.adam, lr_schedule(st.step, cfg), hyper_of(cfg));
    stats.loss_sum += l;
    ++stats.loss_count;
    ++st.step;
    st.input_hash = input_hash.digest();
    if (record_due(st.step, cfg) && !emit(st.step)) break;
  }
  return st;
}

TrainState retrofit(const ModelParams<float>& base, const RetroData& data, const TrainConfig& cfg,
                    const ProgressFn& progress, TrainState* resume) {
  cfg.validate();
  if (!data.train || !data.train_neighbors) throw Error("retrofit: training corpus and neighbors are required");
  const Corpus& train = *data.train;
  const int m = cfg.model.chunk;
  const int k = cfg.model.neighbors;
  if (train.chunk_size() != m) throw Error("retrofit: corpus chunk size differs from the model");
  if (data.train_neighbors->query_digest != train.digest() || data.train_neighbors->db_digest != train.digest())
    throw Error("retrofit: neighbor table was not computed for this corpus");
  if (data.test && data.test_neighbors &&
      (data.test_neighbors->query_digest != data.test->digest() || data.test_neighbors->db_digest != train.digest()))
    throw Error("retrofit: test neighbor table does not match the test corpus");
  if (cfg.synth && !data.synonyms) throw Error("retrofit: paraphrase injection needs a synonym table");

  TrainState st;
  if (resume) {
    st = std::move(*resume);
  } else {
    ModelConfig mc = base.cfg;
    mc.cca_layers = cfg.model.cca_layers;
    mc.encoder_layers = cfg.model.encoder_layers;
    if (!(mc == cfg.model)) throw Error("retrofit: base checkpoint shapes differ from the configured model");
    st.params = init_params<float>(cfg.model, cfg.seed, &base);
    st.adam = adam_init(st.params);
  }
  const auto windows = make_windows(train, cfg.model.max_chunks);
  DataOrder order(windows.size(), derive_seed(cfg.seed, {1}));
  const FilterPolicy policy{cfg.ret_off() ? OverlapBin{} : bin_for(m, cfg.bin), k, cfg.pool};
  const SynthConfig synth{cfg.rho, cfg.injection_probability, cfg.synth_seed, cfg.freeze_paraphrases};
  IntervalStats stats;
  WallClock clock(cfg.wall_clock);
  Fnv1a input_hash(st.input_hash);

  auto emit = [&](int step) {
    RunRecord r;
    r.step = step;
    r.loss = stats.loss_count ? stats.loss_sum / stats.loss_count : std::numeric_limits<double>::quiet_NaN();
    if (data.test && data.test_neighbors)
      r.ppl = eval_perplexity(st.params, *data.test, train, *data.test_neighbors, Gate::kOn, cfg.eval_docs).ppl;
    else
      r.ppl = std::exp(r.loss);
    r.avg_overlap = stats.overlap.reported();
    r.wall_ms = clock.elapsed_ms();
    st.records.push_back(r);
    stats = IntervalStats{};
    return !progress || progress(r, st);
  };

  if (st.step == 0 && st.records.empty() && !emit(0)) return st;
  while (st.step < cfg.steps) {
    const int step = st.step;
    std::vector<Window> ws;
    for (int b = 0; b < cfg.batch; ++b)
      ws.push_back(windows[order.at(static_cast<std::size_t>(step) * cfg.batch + b)]);
    auto context = [&](ChunkId input_id, int b, int u) {
      const TokenChunk& input = train.chunk(input_id);
      RetrievedContext ctx;
      if (cfg.ret_off()) {
        ctx = ret_off(k, m);
      } else {
        auto cands = candidate_records(train, data.train_neighbors->at(input_id), cfg.pool);
        ctx = filter_neighbors(input, cands, policy);
      }
      if (cfg.synth) {
        Rng rng(cfg.freeze_paraphrases
                    ? derive_seed(cfg.synth_seed, {static_cast<std::uint64_t>(input_id.doc),
                                                   static_cast<std::uint64_t>(input_id.offset)})
                    : derive_seed(cfg.synth_seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b),
                                                   static_cast<std::uint64_t>(u)}));
        if (uniform_real(rng) < cfg.injection_probability) inject(ctx, input, *data.synonyms, synth, rng);
      }
      stats.overlap.add(input, ctx);
      return ctx;
    };
    Batch batch = window_batch(train, ws, k, context);
    hash_batch(input_hash, batch);
    const Targets t = next_token_targets(batch);
    auto fs = forward(st.params, batch, Gate::kOn);
    const double l = loss(fs, t);
    if (!std::isfinite(l)) throw Error("retrofit: loss diverged at step " + std::to_string(step));
    auto g = backward(st.params, fs, t);
    adam_step(st.params, g, st.adam, lr_schedule(step, cfg), hyper_of(cfg));
    stats.loss_sum += l;
    ++stats.loss_count;
    ++st.step;
    st.input_hash = input_hash.digest();
    if (record_due(st.step, cfg) && !emit(st.step)) break;
  }
  return st;
}

std::vector<TrainState> run_grid(const ModelParams<float>& base, const RetroData& data, const TrainConfig& cfg,
                                 const std::vector<int>& bins, int threads) {
  std::vector<TrainState> out(bins.size());
  std::vector<std::string> errors(bins.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < bins.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.bin = bins[i];
        out[i] = retrofit(base, data, c);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(bins.size(), 1)));
  std::vector<std::thread> pool;
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (!errors[i].empty()) throw Error("grid run for bin " + std::to_string(bins[i]) + ": " + errors[i]);
  return out;
}

// ---------------------------------------------------------------------------
// QA tuning

RetrievedContext qa_context(const QaRecord& qa, const Corpus& db, int k) {
  RetrievedContext c;
  for (const auto& id : qa.contexts) {
    if (static_cast<int>(c.size()) == k) break;
    c.push_back(assemble_record(db, SearchHit{id, 0.0F}));
  }
  while (static_cast<int>(c.size()) < k) c.push_back(zero_record(db.chunk_size()));
  return c;
}

QaBatch make_qa_batch(const std::vector<const QaRecord*>& qa, const Corpus& db, const Alphabets& alphabets, int k,
                      int max_chunks) {
  const int m = db.chunk_size();
  std::size_t longest = 0;
  for (const auto* r : qa) longest = std::max(longest, r->question.size() + r->answer.size() + 1);
  const int n_chunks = static_cast<int>((longest + m - 1) / m);
  if (n_chunks > max_chunks) throw Error("QA: question and answer exceed the model context");
  QaBatch out;
  out.batch.seq_len = n_chunks * m;
  const std::size_t T = static_cast<std::size_t>(out.batch.seq_len);
  out.targets.ids.assign(qa.size() * T, kPad);
  out.targets.weights.assign(qa.size() * T, 0.0);
  for (std::size_t b = 0; b < qa.size(); ++b) {
    const QaRecord& r = *qa[b];
    std::vector<TokenId> seq(r.question);
    seq.insert(seq.end(), r.answer.begin(), r.answer.end());
    seq.push_back(alphabets.period);
    const std::size_t q = r.question.size();
    for (std::size_t i = q; i < seq.size(); ++i) {
      out.targets.ids[b * T + i - 1] = seq[i];
      out.targets.weights[b * T + i - 1] = 1.0;
    }
    seq.resize(T, kPad);
    out.batch.tokens.push_back(std::move(seq));
    std::vector<RetrievedContext> ctx;
    for (int u = 0; u + 1 < n_chunks; ++u) {
      ctx.push_back(u == 0 && q >= static_cast<std::size_t>(m) ? qa_context(r, db, k) : ret_off(k, m));
    }
    out.batch.contexts.push_back(std::move(ctx));
  }
  return out;
}

TrainState finetune_qa(const ModelParams<float>& params, const std::vector<QaRecord>& qa, const Corpus& db,
                       const Alphabets& alphabets, const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (qa.empty() && cfg.steps > 0) throw Error("finetune_qa: empty QA set");
  TrainState st;
  st.params = params;
  st.adam = adam_init(st.params);
  std::vector<bool> frozen;
  for (const auto& t : st.params.tensors()) frozen.push_back(cfg.freeze_retro && t.group == TensorGroup::kRetro);
  DataOrder order(std::max<std::size_t>(qa.size(), 1), derive_seed(cfg.seed, {2}));
  IntervalStats stats;
  WallClock clock(cfg.wall_clock);
  Fnv1a input_hash;
  auto emit = [&](int step) {
    RunRecord r;
    r.step = step;
    r.loss = stats.loss_count ? stats.loss_sum / stats.loss_count : std::numeric_limits<double>::quiet_NaN();
    r.ppl = std::exp(r.loss);
    r.wall_ms = clock.elapsed_ms();
    st.records.push_back(r);
    stats = IntervalStats{};
    return !progress || progress(r, st);
  };
  while (st.step < cfg.steps) {
    std::vector<const QaRecord*> rs;
    for (int b = 0; b < cfg.batch; ++b) rs.push_back(&qa[order.at(static_cast<std::size_t>(st.step) * cfg.batch + b)]);
    QaBatch qb = make_qa_batch(rs, db, alphabets, cfg.model.neighbors, st.params.cfg.max_chunks);
    hash_batch(input_hash, qb.batch);
    auto fs = forward(st.params, qb.batch, Gate::kOff);
    const double l = loss(fs, qb.targets);
    if (!std::isfinite(l)) throw Error("finetune_qa: loss diverged at step " + std::to_string(st.step));
    auto g = backward(st.params, fs, qb.targets);
    adam_step(st.params, g, st.adam, lr_schedule(st.step, cfg), hyper_of(cfg), frozen);
    stats.loss_sum += l;
    ++stats.loss_count;
    ++st.step;
    st.input_hash = input_hash.digest();
    if (record_due(st.step, cfg) && !emit(st.step)) break;
  }
  return st;
}

int thread_budget() {
  int n = static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("RETROLAB_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

}  // namespace retrolab
