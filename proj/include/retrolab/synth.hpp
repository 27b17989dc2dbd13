#pragma once

#include "retrolab/corpus.hpp"
#include "retrolab/random.hpp"
#include "retrolab/retrieval.hpp"

#include <filesystem>
#include <map>
#include <vector>

namespace retrolab {

/// token -> alternates. Alternates are in-vocabulary and differ from the key.
class SynonymTable {
 public:
  void add(TokenId token, std::vector<TokenId> alternates);
  const std::vector<TokenId>* find(TokenId token) const;
  std::size_t size() const { return table_.size(); }
  const std::map<TokenId, std::vector<TokenId>>& entries() const { return table_; }

  /// Lines of `token<TAB>alt1,alt2,...` using token strings.
  void save(const std::filesystem::path& path, const Vocab& vocab) const;
  static SynonymTable load(const std::filesystem::path& path, const Vocab& vocab);

 private:
  std::map<TokenId, std::vector<TokenId>> table_;
};

/// Pairs neighbouring tokens inside each token class (filler, keys, values),
/// giving every such token exactly one alternate of the same class.
SynonymTable default_synonyms(const Alphabets& alphabets);

struct SynthConfig {
  double rho = 0.35;                 // per-token replacement probability
  double injection_probability = 1.0;
  std::uint64_t seed = 7;
  bool freeze_paraphrases = false;   // seed per chunk rather than per visit
};

struct ParaphraseStats {
  int eligible = 0;  // non-PAD tokens with a synonym entry
  int replaced = 0;
};

/// Same-length, order-preserving substitution: every non-PAD token with a
/// synonym entry is replaced with probability rho by a uniformly chosen
/// alternate; all other positions are copied.
TokenChunk paraphrase(const TokenChunk& chunk, const SynonymTable& synonyms, double rho, Rng& rng,
                      ParaphraseStats* stats = nullptr);

/// Slot indices of a k=2 context: N1, F1, N2, F2.
enum class ContextSlot { kNeighbor1 = 0, kContinuation1 = 1, kNeighbor2 = 2, kContinuation2 = 3 };

/// Replaces one uniformly chosen slot of the four with a paraphrase of the
/// input chunk. Returns the slot used. Throws unless the context has k=2.
ContextSlot inject(RetrievedContext& context, const TokenChunk& input, const SynonymTable& synonyms,
                   const SynthConfig& cfg, Rng& rng);

}  // namespace retrolab
