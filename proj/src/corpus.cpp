#include "retrolab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace retrolab {

namespace {

std::vector<std::string_view> split_ws(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<TokenId> parse_ids(std::string_view text) {
  std::vector<TokenId> ids;
  for (auto tok : split_ws(text)) ids.push_back(static_cast<TokenId>(std::stol(std::string(tok))));
  return ids;
}

std::string join_ids(std::span<const TokenId> ids, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

// log of the binomial coefficient, for vocabulary capacity checks
double log_choose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

std::vector<TokenId> sample_distinct(Rng& rng, const std::vector<TokenId>& from, int count) {
  std::vector<TokenId> pool = from;
  for (int i = 0; i < count; ++i) {
    std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

std::vector<TokenId> filler_run(Rng& rng, const Alphabets& a, int count) {
  std::vector<TokenId> out(count);
  for (auto& t : out) t = a.filler[uniform_index(rng, a.filler.size())];
  return out;
}

std::vector<TokenId> key_chunk(Rng& rng, const LookupCorpusConfig& cfg, const Alphabets& a, const Fact& f) {
  auto toks = filler_run(rng, a, cfg.m - cfg.key_len);
  toks.insert(toks.end(), f.key.begin(), f.key.end());
  return toks;
}

std::vector<TokenId> value_chunk(Rng& rng, const LookupCorpusConfig& cfg, const Alphabets& a, const Fact& f,
                                 const std::vector<TokenId>& key_toks) {
  std::vector<TokenId> toks{a.equals};
  toks.insert(toks.end(), f.value.begin(), f.value.end());
  toks.push_back(a.period);
  const int n_tail = cfg.m - cfg.val_len - 2;
  std::vector<TokenId> tail;
  const int key_fill = cfg.m - cfg.key_len;
  if (cfg.echo_filler && key_fill > 0) {
    for (int i = 0; i < n_tail; ++i) tail.push_back(key_toks[uniform_index(rng, key_fill)]);
  } else {
    tail = filler_run(rng, a, n_tail);
  }
  toks.insert(toks.end(), tail.begin(), tail.end());
  return toks;
}

void validate(const LookupCorpusConfig& cfg) {
  if (cfg.n_facts < 1) throw Error("lookup corpus: n_facts must be >= 1");
  if (cfg.templates_per_fact < 1) throw Error("lookup corpus: templates_per_fact must be >= 1");
  if (cfg.m < 2) throw Error("lookup corpus: chunk size must be >= 2");
  if (cfg.doc_chunks < 2 || cfg.doc_chunks % 2 != 0) throw Error("lookup corpus: doc_chunks must be even and >= 2");
  if (cfg.key_len < 1 || cfg.key_len > cfg.m) throw Error("lookup corpus: key_len must lie in [1, m]");
  if (cfg.val_len < 1 || cfg.val_len + 2 > cfg.m) throw Error("lookup corpus: val_len must lie in [1, m-2]");
  if (cfg.key_alphabet < cfg.key_len) throw Error("lookup corpus: vocabulary too small, key alphabet < key_len");
  if (cfg.value_alphabet < cfg.val_len) throw Error("lookup corpus: vocabulary too small, value alphabet < val_len");
  const int specials = 5;
  if (cfg.vocab_size - specials - cfg.key_alphabet - cfg.value_alphabet < 2)
    throw Error("lookup corpus: vocabulary too small for the requested alphabets");
  if (log_choose(cfg.key_alphabet, cfg.key_len) < std::log(static_cast<double>(cfg.n_facts)) + std::log(4.0))
    throw Error("lookup corpus: vocabulary too small for the requested number of distinct keys");
  if (cfg.templates_per_fact > cfg.n_docs) throw Error("lookup corpus: templates_per_fact exceeds n_docs");
  const long capacity = static_cast<long>(cfg.n_docs) * (cfg.doc_chunks / 2);
  if (capacity < static_cast<long>(cfg.n_facts) * cfg.templates_per_fact)
    throw Error("lookup corpus: not enough document slots for n_facts * templates_per_fact statements");
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  add("<pad>");
  add("<unk>");
}

TokenId Vocab::add(std::string_view token) {
  std::string key(token);
  if (auto it = ids_.find(key); it != ids_.end()) return it->second;
  auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(key);
  ids_.emplace(std::move(key), id);
  return id;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw Error("vocab: id out of range");
  return tokens_[id];
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocab file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read vocab file " + path.string());
  Vocab v;
  v.tokens_.clear();
  v.ids_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (v.ids_.count(line)) throw Error("vocab file has duplicate token '" + line + "'");
    v.add(line);
  }
  if (v.size() < 2 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<unk>")
    throw Error("vocab file must start with <pad> and <unk>");
  return v;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  if (vocab.size() == 0) throw Error("tokenize: empty vocabulary");
  std::vector<TokenId> ids;
  for (auto tok : split_ws(text)) ids.push_back(vocab.id(tok));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chunks

int TokenChunk::pad_count() const { return static_cast<int>(std::count(tokens.begin(), tokens.end(), kPad)); }

TokenChunk pad_chunk(int m, ChunkId id) { return TokenChunk{std::vector<TokenId>(m, kPad), id}; }

std::vector<TokenChunk> chunk_document(const Document& doc, std::int32_t doc_id, int m) {
  if (m < 2) throw Error("chunk_document: chunk size must be >= 2");
  if (doc.tokens.empty()) throw Error("chunk_document: empty document");
  const std::size_t n = (doc.tokens.size() + m - 1) / m;
  std::vector<TokenChunk> out;
  out.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    TokenChunk chunk = pad_chunk(m, {doc_id, static_cast<std::int32_t>(c)});
    const std::size_t begin = c * m;
    const std::size_t end = std::min(doc.tokens.size(), begin + m);
    std::copy(doc.tokens.begin() + begin, doc.tokens.begin() + end, chunk.tokens.begin());
    out.push_back(std::move(chunk));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(int m, std::vector<Document> docs) : m_(m), docs_(std::move(docs)) {
  chunks_.reserve(docs_.size());
  for (std::size_t d = 0; d < docs_.size(); ++d) {
    chunks_.push_back(chunk_document(docs_[d], static_cast<std::int32_t>(d), m_));
    total_chunks_ += chunks_.back().size();
  }
}

bool Corpus::contains(ChunkId id) const {
  return id.doc >= 0 && static_cast<std::size_t>(id.doc) < chunks_.size() && id.offset >= 0 &&
         static_cast<std::size_t>(id.offset) < chunks_[id.doc].size();
}

const TokenChunk& Corpus::chunk(ChunkId id) const {
  if (!contains(id)) throw Error("corpus: chunk id out of range");
  return chunks_[id.doc][id.offset];
}

TokenChunk Corpus::continuation(ChunkId id) const {
  ChunkId next{id.doc, id.offset + 1};
  if (contains(next)) return chunk(next);
  return pad_chunk(m_, next);
}

std::vector<ChunkId> Corpus::chunk_ids() const {
  std::vector<ChunkId> ids;
  ids.reserve(total_chunks_);
  for (std::size_t d = 0; d < chunks_.size(); ++d)
    for (std::size_t c = 0; c < chunks_[d].size(); ++c)
      ids.push_back({static_cast<std::int32_t>(d), static_cast<std::int32_t>(c)});
  return ids;
}

void Corpus::save(const std::filesystem::path& path, const std::string& vocab_ref) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file " + path.string());
  out << "m=" << m_ << " vocab=" << vocab_ref << '\n';
  for (const auto& d : docs_) out << join_ids(d.tokens) << '\n';
}

Corpus Corpus::load(const std::filesystem::path& path, std::string* vocab_ref) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read corpus file " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw Error("corpus file is empty: " + path.string());
  int m = 0;
  std::string vref;
  for (auto field : split_ws(header)) {
    if (field.starts_with("m=")) m = std::stoi(std::string(field.substr(2)));
    else if (field.starts_with("vocab=")) vref = std::string(field.substr(6));
  }
  if (m < 2) throw Error("corpus header missing m=<int>: " + path.string());
  if (vocab_ref) *vocab_ref = vref;
  std::vector<Document> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    docs.push_back(Document{parse_ids(line), "file"});
  }
  return Corpus(m, std::move(docs));
}

std::uint64_t Corpus::digest() const {
  Fnv1a h;
  h.update_value(m_);
  for (const auto& d : docs_) {
    auto n = static_cast<std::uint64_t>(d.tokens.size());
    h.update_value(n);
    h.update(d.tokens.data(), d.tokens.size() * sizeof(TokenId));
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Lookup corpus

Vocab lookup_vocab(const LookupCorpusConfig& cfg, Alphabets* alphabets) {
  Vocab v;
  Alphabets a;
  a.period = v.add(".");
  a.comma = v.add(",");
  a.equals = v.add("=");
  const int n_filler = cfg.vocab_size - static_cast<int>(v.size()) - cfg.key_alphabet - cfg.value_alphabet;
  char buf[32];
  for (int i = 0; i < n_filler; ++i) {
    std::snprintf(buf, sizeof buf, "w%03d", i);
    a.filler.push_back(v.add(buf));
  }
  for (int i = 0; i < cfg.key_alphabet; ++i) {
    std::snprintf(buf, sizeof buf, "K%03d", i);
    a.keys.push_back(v.add(buf));
  }
  for (int i = 0; i < cfg.value_alphabet; ++i) {
    std::snprintf(buf, sizeof buf, "V%03d", i);
    a.values.push_back(v.add(buf));
  }
  if (alphabets) *alphabets = std::move(a);
  return v;
}

Alphabets alphabets_from_vocab(const Vocab& vocab) {
  Alphabets a;
  a.period = vocab.id(".");
  a.comma = vocab.id(",");
  a.equals = vocab.id("=");
  for (std::size_t i = 2; i < vocab.size(); ++i) {
    const auto& t = vocab.token(static_cast<TokenId>(i));
    if (t.size() < 2) continue;
    if (t[0] == 'w') a.filler.push_back(static_cast<TokenId>(i));
    else if (t[0] == 'K') a.keys.push_back(static_cast<TokenId>(i));
    else if (t[0] == 'V') a.values.push_back(static_cast<TokenId>(i));
  }
  return a;
}

LookupCorpus generate_lookup_corpus(const LookupCorpusConfig& cfg) {
  validate(cfg);
  LookupCorpus out;
  out.config = cfg;
  out.vocab = lookup_vocab(cfg, &out.alphabets);
  const Alphabets& a = out.alphabets;
  Rng rng(derive_seed(cfg.rng_seed, {1}));

  // Facts with pairwise distinct key sets.
  std::set<std::vector<TokenId>> seen;
  out.facts.reserve(cfg.n_facts);
  while (static_cast<int>(out.facts.size()) < cfg.n_facts) {
    Fact f;
    f.key = sample_distinct(rng, a.keys, cfg.key_len);
    auto sorted = f.key;
    std::sort(sorted.begin(), sorted.end());
    if (!seen.insert(sorted).second) continue;
    f.value = sample_distinct(rng, a.values, cfg.val_len);
    out.facts.push_back(std::move(f));
  }

  // Assign statements to documents: each fact goes to distinct documents,
  // always drawing from the documents with the most free slots.
  const int slots = cfg.doc_chunks / 2;
  std::vector<std::vector<std::int32_t>> by_free(slots + 1);
  for (std::int32_t d = 0; d < cfg.n_docs; ++d) by_free[slots].push_back(d);
  std::vector<std::vector<int>> doc_facts(cfg.n_docs);
  for (int f = 0; f < cfg.n_facts; ++f) {
    std::vector<std::pair<std::int32_t, int>> taken;  // (doc, its free count)
    for (int t = 0; t < cfg.templates_per_fact; ++t) {
      int level = slots;
      while (level > 0 && by_free[level].empty()) --level;
      if (level == 0) throw Error("lookup corpus: ran out of document slots");
      auto& bucket = by_free[level];
      std::size_t j = uniform_index(rng, bucket.size());
      std::int32_t d = bucket[j];
      bucket[j] = bucket.back();
      bucket.pop_back();
      taken.emplace_back(d, level);
    }
    for (auto [d, level] : taken) {
      doc_facts[d].push_back(f);
      out.facts[f].docs.push_back(d);
      by_free[level - 1].push_back(d);
    }
  }
  for (auto& f : out.facts) std::sort(f.docs.begin(), f.docs.end());

  auto render = [&](Rng& r, std::vector<int> facts_in_doc) {
    std::vector<int> layout(slots, -1);
    std::copy(facts_in_doc.begin(), facts_in_doc.end(), layout.begin());
    for (int i = slots - 1; i > 0; --i) std::swap(layout[i], layout[uniform_index(r, i + 1)]);
    Document doc;
    doc.meta = "lookup";
    for (int s : layout) {
      if (s < 0) {
        auto fill = filler_run(r, a, 2 * cfg.m);
        doc.tokens.insert(doc.tokens.end(), fill.begin(), fill.end());
      } else {
        auto kc = key_chunk(r, cfg, a, out.facts[s]);
        auto vc = value_chunk(r, cfg, a, out.facts[s], kc);
        doc.tokens.insert(doc.tokens.end(), kc.begin(), kc.end());
        doc.tokens.insert(doc.tokens.end(), vc.begin(), vc.end());
      }
    }
    return doc;
  };

  std::vector<Document> train;
  train.reserve(cfg.n_docs);
  for (int d = 0; d < cfg.n_docs; ++d) train.push_back(render(rng, doc_facts[d]));
  out.train = Corpus(cfg.m, std::move(train));

  // Held-out documents state known facts with the training fill rate.
  const double fill = static_cast<double>(cfg.n_facts) * cfg.templates_per_fact /
                      (static_cast<double>(cfg.n_docs) * slots);
  Rng test_rng(derive_seed(cfg.rng_seed, {2}));
  std::vector<Document> test;
  test.reserve(cfg.n_test_docs);
  for (int d = 0; d < cfg.n_test_docs; ++d) {
    std::vector<int> chosen;
    for (int s = 0; s < slots; ++s) {
      if (uniform_real(test_rng) >= fill) continue;
      int f = static_cast<int>(uniform_index(test_rng, out.facts.size()));
      if (std::find(chosen.begin(), chosen.end(), f) == chosen.end()) chosen.push_back(f);
    }
    test.push_back(render(test_rng, chosen));
  }
  out.test = Corpus(cfg.m, std::move(test));
  return out;
}

void save_facts(const std::filesystem::path& path, const std::vector<Fact>& facts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write facts file " + path.string());
  for (const auto& f : facts) {
    out << join_ids(f.key) << '\t' << join_ids(f.value) << '\t';
    for (std::size_t i = 0; i < f.docs.size(); ++i) out << (i ? " " : "") << f.docs[i];
    out << '\n';
  }
}

std::vector<Fact> load_facts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read facts file " + path.string());
  std::vector<Fact> facts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() != 3) throw Error("facts file: expected 3 tab-separated columns");
    Fact f;
    f.key = parse_ids(cols[0]);
    f.value = parse_ids(cols[1]);
    for (auto d : parse_ids(cols[2])) f.docs.push_back(d);
    facts.push_back(std::move(f));
  }
  return facts;
}

// ---------------------------------------------------------------------------
// QA

std::vector<QaRecord> generate_qa_set(const LookupCorpus& corpus, int n_questions, std::uint64_t seed,
                                      std::span<const int> fact_pool, int k) {
  if (corpus.facts.empty()) throw Error("generate_qa_set: corpus has no fact table");
  std::vector<int> pool(fact_pool.begin(), fact_pool.end());
  if (pool.empty()) {
    pool.resize(corpus.facts.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  }
  if (n_questions < 0 || static_cast<std::size_t>(n_questions) > pool.size())
    throw Error("generate_qa_set: n_questions exceeds the number of available facts");

  const auto& cfg = corpus.config;
  Rng rng(derive_seed(seed, {3}));
  for (int i = 0; i < n_questions; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);

  std::vector<QaRecord> qa;
  qa.reserve(n_questions);
  for (int i = 0; i < n_questions; ++i) {
    const int f = pool[i];
    const Fact& fact = corpus.facts[f];
    QaRecord rec;
    rec.fact = f;
    rec.question = key_chunk(rng, cfg, corpus.alphabets, fact);
    rec.question.push_back(corpus.alphabets.equals);
    rec.answer = fact.value;
    // Statement chunk: the first chunk of the slot whose key matches.
    std::vector<ChunkId> statements;
    for (auto d : fact.docs) {
      const int nc = corpus.train.num_chunks(d);
      for (int c = 0; c + 1 < nc; c += 2) {
        const auto& toks = corpus.train.chunk({d, c}).tokens;
        if (std::equal(fact.key.begin(), fact.key.end(), toks.end() - cfg.key_len)) {
          statements.push_back({d, c});
          break;
        }
      }
    }
    for (int j = 0; j < k && !statements.empty(); ++j) {
      std::size_t pick = uniform_index(rng, statements.size());
      rec.contexts.push_back(statements[pick]);
      statements.erase(statements.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    qa.push_back(std::move(rec));
  }
  return qa;
}

void save_qa(const std::filesystem::path& path, const std::vector<QaRecord>& qa) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write QA file " + path.string());
  for (const auto& r : qa) {
    out << join_ids(r.question) << '\t' << join_ids(r.answer) << '\t';
    for (std::size_t i = 0; i < r.contexts.size(); ++i)
      out << (i ? " " : "") << r.contexts[i].doc << ':' << r.contexts[i].offset;
    out << '\t' << r.fact << '\n';
  }
}

std::vector<QaRecord> load_qa(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read QA file " + path.string());
  std::vector<QaRecord> qa;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() < 3) throw Error("QA file: expected question, answer and contexts columns");
    QaRecord r;
    r.question = parse_ids(cols[0]);
    r.answer = parse_ids(cols[1]);
    for (auto ctx : split_ws(cols[2])) {
      auto colon = ctx.find(':');
      if (colon == std::string_view::npos) throw Error("QA file: context ids must be doc:offset");
      r.contexts.push_back({std::stoi(std::string(ctx.substr(0, colon))), std::stoi(std::string(ctx.substr(colon + 1)))});
    }
    if (cols.size() > 3 && !cols[3].empty()) r.fact = std::stoi(cols[3]);
    qa.push_back(std::move(r));
  }
  return qa;
}

}  // namespace retrolab
