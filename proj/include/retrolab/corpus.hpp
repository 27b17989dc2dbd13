#pragma once

#include "retrolab/random.hpp"
#include "retrolab/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace retrolab {

/// Closed token vocabulary. Ids are dense 0..size()-1 and ids 0/1 are
/// always the reserved PAD/UNK tokens.
class Vocab {
 public:
  Vocab();

  TokenId add(std::string_view token);
  /// Id of `token`, or kUnk when the token is not in the vocabulary.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

struct Document {
  std::vector<TokenId> tokens;
  std::string meta;
};

struct TokenChunk {
  std::vector<TokenId> tokens;  // exactly m entries
  ChunkId id;

  int size() const { return static_cast<int>(tokens.size()); }
  int pad_count() const;
};

TokenChunk pad_chunk(int m, ChunkId id = {});

/// Splits a document into ceil(len/m) chunks; the last one is right-padded.
std::vector<TokenChunk> chunk_document(const Document& doc, std::int32_t doc_id, int m);

/// Documents plus their chunk table. Chunks are addressed by ChunkId.
class Corpus {
 public:
  Corpus() = default;
  Corpus(int m, std::vector<Document> docs);

  int chunk_size() const { return m_; }
  const std::vector<Document>& documents() const { return docs_; }
  std::size_t num_documents() const { return docs_.size(); }
  int num_chunks(std::int32_t doc) const { return static_cast<int>(chunks_.at(doc).size()); }
  std::size_t total_chunks() const { return total_chunks_; }

  bool contains(ChunkId id) const;
  const TokenChunk& chunk(ChunkId id) const;
  /// Next chunk in the same document, or an all-PAD chunk at offset+1.
  TokenChunk continuation(ChunkId id) const;
  /// All chunk ids, document-major.
  std::vector<ChunkId> chunk_ids() const;

  void save(const std::filesystem::path& path, const std::string& vocab_ref) const;
  static Corpus load(const std::filesystem::path& path, std::string* vocab_ref = nullptr);

  /// Digest of chunk size and all token ids.
  std::uint64_t digest() const;

 private:
  int m_ = 0;
  std::vector<Document> docs_;
  std::vector<std::vector<TokenChunk>> chunks_;
  std::size_t total_chunks_ = 0;
};

/// One synthetic fact: the key tokens predict the value tokens.
struct Fact {
  std::vector<TokenId> key;
  std::vector<TokenId> value;
  std::vector<std::int32_t> docs;  // training documents stating the fact
};

struct LookupCorpusConfig {
  int n_facts = 2000;
  int key_len = 10;
  int val_len = 4;
  int n_docs = 5000;
  int templates_per_fact = 5;
  int n_test_docs = 200;
  int m = 16;
  int doc_chunks = 4;  // must be even; every chunk pair is a fact slot
  int vocab_size = 256;
  int key_alphabet = 96;
  int value_alphabet = 96;
  bool echo_filler = false;  // value-chunk filler is drawn from its key chunk's filler
  std::uint64_t rng_seed = 1;
};

/// Token classes of the generated vocabulary.
struct Alphabets {
  TokenId period = 0;
  TokenId comma = 0;
  TokenId equals = 0;
  std::vector<TokenId> filler;
  std::vector<TokenId> keys;
  std::vector<TokenId> values;

  bool is_punctuation(TokenId t) const { return t == period || t == comma; }
};

struct LookupCorpus {
  LookupCorpusConfig config;
  Vocab vocab;
  Alphabets alphabets;
  Corpus train;
  Corpus test;
  std::vector<Fact> facts;
};

/// Builds the lookup vocabulary for `cfg` (deterministic, independent of seed).
Vocab lookup_vocab(const LookupCorpusConfig& cfg, Alphabets* alphabets = nullptr);

/// Generates documents whose chunk pairs state facts as
/// `[filler.. KEY] [= VALUE . filler..]`. Every fact is stated in
/// `templates_per_fact` distinct training documents with fresh filler, so a
/// key-bearing chunk finds same-key chunks elsewhere whose continuation holds
/// the value. Deterministic given the seed.
LookupCorpus generate_lookup_corpus(const LookupCorpusConfig& cfg);

void save_facts(const std::filesystem::path& path, const std::vector<Fact>& facts);
std::vector<Fact> load_facts(const std::filesystem::path& path);

/// Recovers the token classes of a saved lookup vocabulary.
Alphabets alphabets_from_vocab(const Vocab& vocab);

struct QaRecord {
  int fact = -1;
  std::vector<TokenId> question;   // key chunk followed by '='
  std::vector<TokenId> answer;     // gold value tokens
  std::vector<ChunkId> contexts;   // neighbor chunk ids; continuation is the next chunk
};

/// Draws `n_questions` distinct facts (restricted to `fact_pool` when given)
/// and builds one question per fact with `k` context chunk-pairs taken from
/// training documents that state it.
std::vector<QaRecord> generate_qa_set(const LookupCorpus& corpus, int n_questions, std::uint64_t seed,
                                      std::span<const int> fact_pool = {}, int k = 2);

void save_qa(const std::filesystem::path& path, const std::vector<QaRecord>& qa);
std::vector<QaRecord> load_qa(const std::filesystem::path& path);

}  // namespace retrolab
