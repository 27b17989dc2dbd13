#pragma once

#include "retrolab/corpus.hpp"
#include "retrolab/types.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace retrolab {

struct EmbeddingConfig {
  int dim = 64;
  std::uint64_t seed = 0x5EEDULL;
};

/// Unit-norm bag-of-tokens feature-hash vector. `valid` is false for chunks
/// that carry no tokens (all PAD) or whose hashed counts cancel to zero.
struct ChunkEmbedding {
  VectorF vector;
  bool valid = false;
};

struct TokenHash {
  int bucket = 0;
  float sign = 1.0F;
};

/// Seeded (bucket, sign) of a token: h = splitmix64(seed ^ splitmix64(token)),
/// bucket = h mod dim, sign = -1 when the top bit of h is set.
TokenHash hash_token(TokenId token, const EmbeddingConfig& cfg);

ChunkEmbedding embed_chunk(const TokenChunk& chunk, const EmbeddingConfig& cfg = {});

/// Embeddings of every chunk of `corpus`, one row per entry of `ids`.
/// Rows of invalid embeddings are zero and flagged in `valid`.
struct CorpusEmbeddings {
  MatrixF vectors;
  std::vector<ChunkId> ids;
  std::vector<bool> valid;
};
CorpusEmbeddings embed_corpus(const Corpus& corpus, const EmbeddingConfig& cfg = {});

struct SearchHit {
  ChunkId id;
  float score = 0.0F;
};

struct SearchOptions {
  int n = 20;
  int nprobe = 8;
  std::optional<ChunkId> exclude;
  bool exclude_same_doc = false;
};

struct IndexConfig {
  int centroids = 64;
  int pq_subquantizers = 0;  // 0 disables product quantization
  int kmeans_iters = 20;
  std::uint64_t seed = 1;
};

/// Inverted-file index over unit vectors with optional residual product
/// quantization. Immutable after build; concurrent searches are safe.
class AnnIndex {
 public:
  static constexpr int kCodebookSize = 256;

  AnnIndex() = default;

  /// k-means coarse quantizer (seeded init, fixed iterations); every row is
  /// stored in the list of its nearest centroid. Rows flagged invalid are
  /// skipped.
  static AnnIndex build(const MatrixF& vectors, std::span<const ChunkId> ids, const IndexConfig& cfg,
                        const std::vector<bool>* valid = nullptr);

  /// Inner-product search over the `nprobe` lists nearest to the query.
  /// Results are score-descending with ties broken by ascending chunk id.
  std::vector<SearchHit> search(const ChunkEmbedding& query, const SearchOptions& opts) const;

  int dim() const { return dim_; }
  int num_centroids() const { return static_cast<int>(centroids_.rows()); }
  int num_subquantizers() const { return subquantizers_; }
  std::size_t size() const { return ids_.size(); }
  const MatrixF& centroids() const { return centroids_; }
  const std::vector<std::vector<std::int32_t>>& lists() const { return lists_; }
  const std::vector<ChunkId>& ids() const { return ids_; }

  /// Squared error of the stored PQ reconstruction of entry `i`.
  float reconstruction_error(std::size_t i, const MatrixF& original) const;

  void save(const std::filesystem::path& path) const;
  static AnnIndex load(const std::filesystem::path& path);
  std::vector<char> serialize() const;

 private:
  float score_entry(std::size_t entry, const float* query, int list, const std::vector<float>& table) const;

  int dim_ = 0;
  int subquantizers_ = 0;
  MatrixF centroids_;
  std::vector<std::vector<std::int32_t>> lists_;
  std::vector<std::int32_t> assignment_;
  std::vector<MatrixF> codebooks_;  // one [256, dim/s] matrix per subquantizer
  std::vector<std::uint8_t> codes_;
  MatrixF vectors_;                 // raw vectors when PQ is off
  std::vector<ChunkId> ids_;
};

/// Full scan with exact inner products; same ordering contract as search.
std::vector<SearchHit> exact_search(const MatrixF& vectors, std::span<const ChunkId> ids,
                                    const ChunkEmbedding& query, int n,
                                    std::optional<ChunkId> exclude = std::nullopt, bool exclude_same_doc = false,
                                    const std::vector<bool>* valid = nullptr);

/// Plain sequential dot product shared by every scoring path.
float dot(const float* a, const float* b, int n);

/// A neighbor chunk with its continuation. Either half may be a zero
/// placeholder (all PAD tokens, fed to the model as zero vectors).
struct NeighborRecord {
  TokenChunk neighbor;
  TokenChunk continuation;
  float score = -std::numeric_limits<float>::infinity();
  bool neighbor_zero = true;
  bool continuation_zero = true;
  bool synthetic = false;

  bool is_zero() const { return neighbor_zero && continuation_zero; }
};

/// Ret(C_u): the k neighbor records conditioning the following chunk.
using RetrievedContext = std::vector<NeighborRecord>;

NeighborRecord zero_record(int m);
NeighborRecord assemble_record(const Corpus& corpus, const SearchHit& hit);

}  // namespace retrolab
