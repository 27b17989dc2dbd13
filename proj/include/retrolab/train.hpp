#pragma once

#include "retrolab/corpus.hpp"
#include "retrolab/model.hpp"
#include "retrolab/overlap.hpp"
#include "retrolab/retrieval.hpp"
#include "retrolab/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace retrolab {

// ---------------------------------------------------------------------------
// Run configuration

/// Flat run configuration. `bin` selects the training-time filter: 1..10 for
/// an overlap bin, 0 for Ret[off].
struct TrainConfig {
  ModelConfig model;
  int steps = 3000;
  int batch = 16;
  double lr_max = 2.5e-4;
  double lr_min = 2.5e-5;
  long warmup_samples = 5000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int eval_interval = 100;
  int eval_docs = 0;  // 0 evaluates the whole test split
  std::uint64_t seed = 1;
  int bin = 10;
  int pool = 20;
  bool synth = false;
  double rho = 0.35;
  double injection_probability = 1.0;
  std::uint64_t synth_seed = 7;
  bool freeze_paraphrases = false;
  bool freeze_retro = true;  // fine-tuning only
  bool wall_clock = false;   // record real wall_ms; off keeps outputs byte-stable

  bool ret_off() const { return bin == 0; }
  int warmup_steps() const;
  void validate() const;

  std::string to_string() const;
  static TrainConfig from_string(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static TrainConfig load(const std::filesystem::path& path);
};

/// Applies one `key=value` assignment; throws on unknown keys.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// One Adam update with bias correction on a flat parameter block. `t` is the
/// 1-based step count after increment.
template <typename S>
void adam_update(S* w, const S* g, S* m, S* v, Index n, long t, double lr, const AdamHyper& h);

struct AdamState {
  ModelParams<float> m;
  ModelParams<float> v;
  long t = 0;
};

AdamState adam_init(const ModelParams<float>& params);

/// Updates every tensor except those flagged in `frozen` (indexed like
/// params.tensors()). Non-finite gradients throw with the step index.
void adam_step(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state, double lr,
               const AdamHyper& hyper, const std::vector<bool>& frozen = {});

std::vector<char> serialize_adam(const AdamState& state);
AdamState deserialize_adam(const std::vector<char>& data);

/// Linear warmup from 0 to lr_max over the warmup steps, cosine decay to
/// lr_min over the remaining steps, then constant lr_min.
double lr_schedule(long step, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Neighbor precompute

/// For every chunk of a query corpus, the top `pool` hits in a retrieval
/// database, score-descending.
struct NeighborTable {
  int pool = 0;
  std::uint64_t query_digest = 0;
  std::uint64_t db_digest = 0;
  std::vector<std::vector<std::vector<SearchHit>>> hits;  // [doc][chunk]

  const std::vector<SearchHit>& at(ChunkId id) const;
  std::vector<char> serialize() const;
  static NeighborTable deserialize(const std::vector<char>& data);
  void save(const std::filesystem::path& path) const;
  static NeighborTable load(const std::filesystem::path& path);
};

struct PrecomputeOptions {
  EmbeddingConfig embedding;
  int pool = 20;
  int nprobe = 8;
  bool exclude_self = true;  // same (doc, offset); meaningful when queries == db
  bool exclude_same_doc = false;
  int threads = 1;
};

/// Throws when the index ids are not exactly the valid chunks of `db`.
void check_index_matches(const AnnIndex& index, const Corpus& db, const EmbeddingConfig& embedding);

NeighborTable precompute_neighbors(const Corpus& queries, const Corpus& db, const AnnIndex& index,
                                   const PrecomputeOptions& opts);

/// Records for the first `pool` hits of a chunk.
std::vector<NeighborRecord> candidate_records(const Corpus& db, const std::vector<SearchHit>& hits, int pool);

/// Unfiltered top-k by retrieval score, zero-padded to k.
RetrievedContext natural_context(const Corpus& db, const std::vector<SearchHit>& hits, int k);

// ---------------------------------------------------------------------------
// Training

/// A training or evaluation sequence: up to max_chunks consecutive chunks of
/// one document starting at chunk `first`.
struct Window {
  std::int32_t doc = 0;
  std::int32_t first = 0;
  int chunks = 0;
};

std::vector<Window> make_windows(const Corpus& corpus, int max_chunks);

struct RunRecord {
  int step = 0;
  double loss = 0.0;
  double ppl = 0.0;
  double avg_overlap = 0.0;
  long wall_ms = 0;
};

void write_records_csv(const std::filesystem::path& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_records_csv(const std::filesystem::path& path);

/// Everything a run needs to continue; saved at record boundaries.
struct TrainState {
  ModelParams<float> params;
  AdamState adam;
  int step = 0;
  std::vector<RunRecord> records;
  std::uint64_t input_hash = Fnv1a().digest();
};

void save_train_state(const std::filesystem::path& dir, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& dir);

/// Read-only data shared by retrofit runs.
struct RetroData {
  const Corpus* train = nullptr;
  const Corpus* test = nullptr;
  const NeighborTable* train_neighbors = nullptr;
  const NeighborTable* test_neighbors = nullptr;
  const SynonymTable* synonyms = nullptr;
};

/// Called after every record with the state at that boundary (the natural
/// point to checkpoint). Returning false stops the run there.
using ProgressFn = std::function<bool(const RunRecord&, const TrainState&)>;

/// Decoder-only training of a fresh base model on `train`; test perplexity is
/// recorded every eval interval when `test` is given.
TrainState pretrain_base(const Corpus& train, const Corpus* test, const TrainConfig& cfg,
                         const ProgressFn& progress = {}, TrainState* resume = nullptr);

/// Adds freshly initialized retro tensors to `base` and trains under the
/// configured filter policy. Evaluation always uses unfiltered neighbors.
TrainState retrofit(const ModelParams<float>& base, const RetroData& data, const TrainConfig& cfg,
                    const ProgressFn& progress = {}, TrainState* resume = nullptr);

/// One retrofit per entry of `bins` (0 = Ret[off]) with shared base, data
/// order and seed; runs fan out over `threads` workers.
std::vector<TrainState> run_grid(const ModelParams<float>& base, const RetroData& data, const TrainConfig& cfg,
                                 const std::vector<int>& bins, int threads);

/// QA sequences: question, answer and a closing period; the loss covers only
/// the answer and the period.
struct QaBatch {
  Batch batch;
  Targets targets;
};

/// The QA record's statement chunks as neighbor records, zero-padded to k.
RetrievedContext qa_context(const QaRecord& qa, const Corpus& db, int k);

QaBatch make_qa_batch(const std::vector<const QaRecord*>& qa, const Corpus& db, const Alphabets& alphabets,
                      int k, int max_chunks);

/// Answer-masked tuning with the cross-attention gate off. Retro tensors are
/// frozen when cfg.freeze_retro is set.
TrainState finetune_qa(const ModelParams<float>& params, const std::vector<QaRecord>& qa, const Corpus& db,
                       const Alphabets& alphabets, const TrainConfig& cfg, const ProgressFn& progress = {});

/// Worker count: hardware threads, capped by RETROLAB_THREADS.
int thread_budget();

}  // namespace retrolab
