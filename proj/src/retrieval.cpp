#include "retrolab/retrieval.hpp"

#include "retrolab/binary_io.hpp"
#include "retrolab/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace retrolab {

namespace {

constexpr char kIndexMagic[8] = {'A', 'N', 'N', 'I', 'D', 'X', '1', '\0'};

bool hit_before(const SearchHit& a, const SearchHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

bool excluded(ChunkId id, const std::optional<ChunkId>& exclude, bool same_doc) {
  if (!exclude) return false;
  if (same_doc) return id.doc == exclude->doc;
  return id == *exclude;
}

void keep_top(std::vector<SearchHit>& hits, int n) {
  const auto keep = std::min<std::size_t>(hits.size(), static_cast<std::size_t>(n));
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(), hit_before);
  hits.resize(keep);
}

float squared_distance(const float* a, const float* b, int n) {
  float s = 0.0F;
  for (int i = 0; i < n; ++i) {
    const float d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Lloyd iterations from a seeded sample of distinct rows. Empty clusters are
// re-seeded by splitting the largest cluster.
MatrixF kmeans(const MatrixF& x, int k, int iters, std::uint64_t seed, std::vector<std::int32_t>* assign_out) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (n < k) throw Error("build_index: fewer vectors than centroids");
  Rng rng(seed);
  std::vector<Index> perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (int i = 0; i < k; ++i) std::swap(perm[i], perm[i + static_cast<Index>(uniform_index(rng, n - i))]);
  MatrixF c(k, d);
  for (int i = 0; i < k; ++i) c.row(i) = x.row(perm[i]);

  std::vector<std::int32_t> assign(n, 0);
  auto assign_all = [&] {
    const VectorF cnorm = c.rowwise().squaredNorm();
    const MatrixF prod = x * c.transpose();
    for (Index i = 0; i < n; ++i) {
      float best = std::numeric_limits<float>::infinity();
      std::int32_t arg = 0;
      for (Index j = 0; j < k; ++j) {
        const float dist = cnorm[j] - 2.0F * prod(i, j);
        if (dist < best) {
          best = dist;
          arg = static_cast<std::int32_t>(j);
        }
      }
      assign[i] = arg;
    }
  };

  for (int it = 0; it < iters; ++it) {
    assign_all();
    MatrixF sum = MatrixF::Zero(k, d);
    std::vector<Index> count(k, 0);
    for (Index i = 0; i < n; ++i) {
      sum.row(assign[i]) += x.row(i);
      ++count[assign[i]];
    }
    for (int j = 0; j < k; ++j)
      if (count[j] > 0) c.row(j) = sum.row(j) / static_cast<float>(count[j]);
    for (int j = 0; j < k; ++j) {
      if (count[j] > 0) continue;
      const auto big = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
      constexpr float eps = 1.0F / 1024.0F;
      c.row(j) = c.row(big) * (1.0F + eps);
      c.row(big) *= (1.0F - eps);
      count[j] = count[big] / 2;
      count[big] -= count[j];
    }
  }
  assign_all();
  if (assign_out) *assign_out = std::move(assign);
  return c;
}

}  // namespace

float dot(const float* a, const float* b, int n) {
  float s = 0.0F;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

TokenHash hash_token(TokenId token, const EmbeddingConfig& cfg) {
  const std::uint64_t h = splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(token)));
  return {static_cast<int>(h % static_cast<std::uint64_t>(cfg.dim)), (h >> 63) ? -1.0F : 1.0F};
}

ChunkEmbedding embed_chunk(const TokenChunk& chunk, const EmbeddingConfig& cfg) {
  ChunkEmbedding e;
  e.vector = VectorF::Zero(cfg.dim);
  int count = 0;
  for (TokenId t : chunk.tokens) {
    if (t == kPad) continue;
    const auto h = hash_token(t, cfg);
    e.vector[h.bucket] += h.sign;
    ++count;
  }
  if (count == 0) return e;
  e.vector /= static_cast<float>(count);
  const float norm = e.vector.norm();
  if (norm == 0.0F) {
    e.vector.setZero();
    return e;
  }
  e.vector /= norm;
  e.valid = true;
  return e;
}

CorpusEmbeddings embed_corpus(const Corpus& corpus, const EmbeddingConfig& cfg) {
  CorpusEmbeddings out;
  out.ids = corpus.chunk_ids();
  out.vectors = MatrixF::Zero(static_cast<Index>(out.ids.size()), cfg.dim);
  out.valid.assign(out.ids.size(), false);
  for (std::size_t i = 0; i < out.ids.size(); ++i) {
    auto e = embed_chunk(corpus.chunk(out.ids[i]), cfg);
    if (e.valid) out.vectors.row(static_cast<Index>(i)) = e.vector.transpose();
    out.valid[i] = e.valid;
  }
  return out;
}

// ---------------------------------------------------------------------------

AnnIndex AnnIndex::build(const MatrixF& vectors, std::span<const ChunkId> ids, const IndexConfig& cfg,
                         const std::vector<bool>* valid) {
  if (static_cast<std::size_t>(vectors.rows()) != ids.size()) throw Error("build_index: ids/vectors size mismatch");
  if (cfg.centroids < 1) throw Error("build_index: need at least one centroid");
  const int d = static_cast<int>(vectors.cols());
  if (cfg.pq_subquantizers < 0 || (cfg.pq_subquantizers > 0 && d % cfg.pq_subquantizers != 0))
    throw Error("build_index: subquantizer count must divide the dimension");

  std::vector<Index> rows;
  for (Index i = 0; i < vectors.rows(); ++i)
    if (!valid || (*valid)[i]) rows.push_back(i);
  if (static_cast<Index>(rows.size()) < cfg.centroids) throw Error("build_index: fewer vectors than centroids");

  AnnIndex idx;
  idx.dim_ = d;
  idx.subquantizers_ = cfg.pq_subquantizers;
  MatrixF x(static_cast<Index>(rows.size()), d);
  idx.ids_.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Index>(i)) = vectors.row(rows[i]);
    idx.ids_.push_back(ids[rows[i]]);
  }

  idx.centroids_ = kmeans(x, cfg.centroids, cfg.kmeans_iters, derive_seed(cfg.seed, {11}), &idx.assignment_);
  idx.lists_.assign(cfg.centroids, {});
  for (std::size_t i = 0; i < idx.assignment_.size(); ++i)
    idx.lists_[idx.assignment_[i]].push_back(static_cast<std::int32_t>(i));

  if (cfg.pq_subquantizers == 0) {
    idx.vectors_ = std::move(x);
    return idx;
  }

  const int s = cfg.pq_subquantizers;
  const int ds = d / s;
  if (x.rows() < kCodebookSize) throw Error("build_index: product quantization needs at least 256 vectors");
  MatrixF residual = x;
  for (Index i = 0; i < x.rows(); ++i) residual.row(i) -= idx.centroids_.row(idx.assignment_[i]);
  idx.codes_.assign(static_cast<std::size_t>(x.rows()) * s, 0);
  for (int j = 0; j < s; ++j) {
    MatrixF sub = residual.middleCols(j * ds, ds);
    std::vector<std::int32_t> codes;
    idx.codebooks_.push_back(kmeans(sub, kCodebookSize, cfg.kmeans_iters, derive_seed(cfg.seed, {12, static_cast<std::uint64_t>(j)}), &codes));
    for (Index i = 0; i < x.rows(); ++i) idx.codes_[static_cast<std::size_t>(i) * s + j] = static_cast<std::uint8_t>(codes[i]);
  }
  return idx;
}

float AnnIndex::score_entry(std::size_t entry, const float* query, int list, const std::vector<float>& table) const {
  if (subquantizers_ == 0) return dot(query, vectors_.row(static_cast<Index>(entry)).data(), dim_);
  float s = dot(query, centroids_.row(list).data(), dim_);
  const std::uint8_t* code = &codes_[entry * subquantizers_];
  for (int j = 0; j < subquantizers_; ++j) s += table[static_cast<std::size_t>(j) * kCodebookSize + code[j]];
  return s;
}

std::vector<SearchHit> AnnIndex::search(const ChunkEmbedding& query, const SearchOptions& opts) const {
  if (!query.valid) throw Error("search: invalid query embedding");
  if (opts.n < 1) throw Error("search: n must be >= 1");
  if (query.vector.size() != dim_) throw Error("search: query dimension mismatch");
  const float* q = query.vector.data();
  const int c = num_centroids();
  const int nprobe = std::clamp(opts.nprobe, 1, c);

  std::vector<std::pair<float, int>> coarse(c);
  for (int j = 0; j < c; ++j) coarse[j] = {squared_distance(q, centroids_.row(j).data(), dim_), j};
  std::partial_sort(coarse.begin(), coarse.begin() + nprobe, coarse.end());

  std::vector<float> table;
  if (subquantizers_ > 0) {
    const int ds = dim_ / subquantizers_;
    table.resize(static_cast<std::size_t>(subquantizers_) * kCodebookSize);
    for (int j = 0; j < subquantizers_; ++j)
      for (int code = 0; code < kCodebookSize; ++code)
        table[static_cast<std::size_t>(j) * kCodebookSize + code] = dot(q + j * ds, codebooks_[j].row(code).data(), ds);
  }

  std::vector<SearchHit> hits;
  for (int p = 0; p < nprobe; ++p) {
    const int list = coarse[p].second;
    for (auto entry : lists_[list]) {
      const ChunkId id = ids_[entry];
      if (excluded(id, opts.exclude, opts.exclude_same_doc)) continue;
      hits.push_back({id, score_entry(static_cast<std::size_t>(entry), q, list, table)});
    }
  }
  keep_top(hits, opts.n);
  return hits;
}

float AnnIndex::reconstruction_error(std::size_t i, const MatrixF& original) const {
  VectorF recon = centroids_.row(assignment_[i]).transpose();
  if (subquantizers_ == 0) {
    recon = vectors_.row(static_cast<Index>(i)).transpose();
  } else {
    const int ds = dim_ / subquantizers_;
    for (int j = 0; j < subquantizers_; ++j)
      recon.segment(j * ds, ds) += codebooks_[j].row(codes_[i * subquantizers_ + j]).transpose();
  }
  return (recon - original.row(static_cast<Index>(i)).transpose()).squaredNorm();
}

std::vector<char> AnnIndex::serialize() const {
  BinaryWriter w;
  w.bytes(kIndexMagic, sizeof kIndexMagic);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(num_centroids()));
  w.u32(static_cast<std::uint32_t>(subquantizers_));
  w.floats(centroids_.data(), static_cast<std::size_t>(centroids_.size()));
  for (const auto& list : lists_) {
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (auto e : list) w.i32(e);
  }
  for (const auto& cb : codebooks_) w.floats(cb.data(), static_cast<std::size_t>(cb.size()));
  w.u32(static_cast<std::uint32_t>(ids_.size()));
  for (const auto& id : ids_) {
    w.i32(id.doc);
    w.i32(id.offset);
  }
  if (subquantizers_ == 0) w.floats(vectors_.data(), static_cast<std::size_t>(vectors_.size()));
  else w.bytes(codes_.data(), codes_.size());
  return w.take();
}

void AnnIndex::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

AnnIndex AnnIndex::load(const std::filesystem::path& path) {
  auto data = read_file(path);
  BinaryReader r(data);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kIndexMagic, sizeof magic) != 0) throw Error("index file: bad magic in " + path.string());
  AnnIndex idx;
  idx.dim_ = static_cast<int>(r.u32());
  const int c = static_cast<int>(r.u32());
  idx.subquantizers_ = static_cast<int>(r.u32());
  if (idx.dim_ < 1 || c < 1 || (idx.subquantizers_ > 0 && idx.dim_ % idx.subquantizers_ != 0))
    throw Error("index file: inconsistent header");
  idx.centroids_.resize(c, idx.dim_);
  r.floats(idx.centroids_.data(), static_cast<std::size_t>(idx.centroids_.size()));
  idx.lists_.resize(c);
  std::size_t total = 0;
  for (auto& list : idx.lists_) {
    list.resize(r.u32());
    for (auto& e : list) e = r.i32();
    total += list.size();
  }
  const int ds = idx.subquantizers_ ? idx.dim_ / idx.subquantizers_ : 0;
  for (int j = 0; j < idx.subquantizers_; ++j) {
    MatrixF cb(kCodebookSize, ds);
    r.floats(cb.data(), static_cast<std::size_t>(cb.size()));
    idx.codebooks_.push_back(std::move(cb));
  }
  idx.ids_.resize(r.u32());
  if (idx.ids_.size() != total) throw Error("index file: inverted lists do not cover the id table");
  for (auto& id : idx.ids_) {
    id.doc = r.i32();
    id.offset = r.i32();
  }
  idx.assignment_.assign(total, 0);
  for (int j = 0; j < c; ++j)
    for (auto e : idx.lists_[j]) {
      if (e < 0 || static_cast<std::size_t>(e) >= total) throw Error("index file: list entry out of range");
      idx.assignment_[e] = j;
    }
  if (idx.subquantizers_ == 0) {
    idx.vectors_.resize(static_cast<Index>(total), idx.dim_);
    r.floats(idx.vectors_.data(), static_cast<std::size_t>(idx.vectors_.size()));
  } else {
    idx.codes_.resize(total * idx.subquantizers_);
    r.bytes(idx.codes_.data(), idx.codes_.size());
  }
  if (!r.done()) throw Error("index file: trailing bytes");
  return idx;
}

std::vector<SearchHit> exact_search(const MatrixF& vectors, std::span<const ChunkId> ids,
                                    const ChunkEmbedding& query, int n, std::optional<ChunkId> exclude,
                                    bool exclude_same_doc, const std::vector<bool>* valid) {
  if (!query.valid) throw Error("exact_search: invalid query embedding");
  std::vector<SearchHit> hits;
  hits.reserve(ids.size());
  const int d = static_cast<int>(vectors.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (valid && !(*valid)[i]) continue;
    if (excluded(ids[i], exclude, exclude_same_doc)) continue;
    hits.push_back({ids[i], dot(query.vector.data(), vectors.row(static_cast<Index>(i)).data(), d)});
  }
  keep_top(hits, n);
  return hits;
}

NeighborRecord zero_record(int m) {
  NeighborRecord r;
  r.neighbor = pad_chunk(m);
  r.continuation = pad_chunk(m);
  return r;
}

NeighborRecord assemble_record(const Corpus& corpus, const SearchHit& hit) {
  NeighborRecord r;
  r.neighbor = corpus.chunk(hit.id);
  r.continuation = corpus.continuation(hit.id);
  r.score = hit.score;
  r.neighbor_zero = false;
  r.continuation_zero = false;
  return r;
}

}  // namespace retrolab
