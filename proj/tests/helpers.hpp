#pragma once

#include "retrolab/model.hpp"
#include "retrolab/random.hpp"

namespace retrolab::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab = 24;
  c.layers = 2;
  c.width = 16;
  c.heads = 2;
  c.chunk = 8;
  c.neighbors = 2;
  c.max_chunks = 4;
  c.encoder_layers = 1;
  c.ffn_mult = 2;
  c.cca_layers = {1, 2};
  return c;
}

inline TokenChunk random_chunk(Rng& rng, int m, int vocab, ChunkId id = {}) {
  TokenChunk c;
  c.id = id;
  for (int i = 0; i < m; ++i) c.tokens.push_back(static_cast<TokenId>(2 + uniform_index(rng, vocab - 2)));
  return c;
}

inline NeighborRecord random_record(Rng& rng, int m, int vocab) {
  NeighborRecord r;
  r.neighbor = random_chunk(rng, m, vocab);
  r.continuation = random_chunk(rng, m, vocab);
  r.neighbor_zero = false;
  r.continuation_zero = false;
  r.score = 0.5F;
  return r;
}

/// Random tokens and contexts; every third context record is zero-padded.
inline Batch random_batch(Rng& rng, const ModelConfig& cfg, int batch, int seq_len) {
  Batch b;
  b.seq_len = seq_len;
  const int nc = b.num_chunks(cfg.chunk);
  int counter = 0;
  for (int i = 0; i < batch; ++i) {
    std::vector<TokenId> seq;
    for (int t = 0; t < seq_len; ++t) seq.push_back(static_cast<TokenId>(2 + uniform_index(rng, cfg.vocab - 2)));
    b.tokens.push_back(seq);
    std::vector<RetrievedContext> ctx;
    for (int u = 0; u + 1 < nc; ++u) {
      RetrievedContext c;
      for (int r = 0; r < cfg.neighbors; ++r)
        c.push_back(++counter % 3 == 0 ? zero_record(cfg.chunk) : random_record(rng, cfg.chunk, cfg.vocab));
      ctx.push_back(c);
    }
    b.contexts.push_back(ctx);
  }
  return b;
}

}  // namespace retrolab::testing

namespace retrolab::testing {

/// Unit vectors drawn around `clusters` random unit centres.
inline MatrixF gaussian_mixture(int n, int dim, int clusters, double spread, std::uint64_t seed,
                                std::uint64_t sample_seed = 0) {
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  MatrixF centres(clusters, dim);
  for (Index i = 0; i < centres.size(); ++i) centres.data()[i] = normal(rng);
  centres.rowwise().normalize();
  if (sample_seed) rng.seed(sample_seed);
  MatrixF x(n, dim);
  for (int i = 0; i < n; ++i) {
    const auto c = static_cast<Index>(uniform_index(rng, clusters));
    for (int j = 0; j < dim; ++j) x(i, j) = centres(c, j) + static_cast<float>(spread) * normal(rng);
    x.row(i).normalize();
  }
  return x;
}

inline std::vector<ChunkId> sequential_ids(int n) {
  std::vector<ChunkId> ids;
  for (int i = 0; i < n; ++i) ids.push_back({i / 4, i % 4});
  return ids;
}

}  // namespace retrolab::testing
