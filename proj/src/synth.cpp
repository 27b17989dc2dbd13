#include "retrolab/synth.hpp"

#include <fstream>
#include <sstream>

namespace retrolab {

void SynonymTable::add(TokenId token, std::vector<TokenId> alternates) {
  std::erase(alternates, token);
  if (alternates.empty()) return;
  table_[token] = std::move(alternates);
}

const std::vector<TokenId>* SynonymTable::find(TokenId token) const {
  auto it = table_.find(token);
  return it == table_.end() ? nullptr : &it->second;
}

void SynonymTable::save(const std::filesystem::path& path, const Vocab& vocab) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write synonym table " + path.string());
  for (const auto& [tok, alts] : table_) {
    out << vocab.token(tok) << '\t';
    for (std::size_t i = 0; i < alts.size(); ++i) out << (i ? "," : "") << vocab.token(alts[i]);
    out << '\n';
  }
}

SynonymTable SynonymTable::load(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read synonym table " + path.string());
  SynonymTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("synonym table: expected token<TAB>alternates");
    const TokenId tok = vocab.id(line.substr(0, tab));
    if (tok == kUnk) throw Error("synonym table: unknown token '" + line.substr(0, tab) + "'");
    std::vector<TokenId> alts;
    std::istringstream rest(line.substr(tab + 1));
    std::string alt;
    while (std::getline(rest, alt, ',')) {
      const TokenId a = vocab.id(alt);
      if (a == kUnk) throw Error("synonym table: unknown alternate '" + alt + "'");
      alts.push_back(a);
    }
    t.add(tok, std::move(alts));
  }
  return t;
}

SynonymTable default_synonyms(const Alphabets& alphabets) {
  SynonymTable t;
  auto pair_up = [&t](const std::vector<TokenId>& cls) {
    for (std::size_t i = 0; i + 1 < cls.size(); i += 2) {
      t.add(cls[i], {cls[i + 1]});
      t.add(cls[i + 1], {cls[i]});
    }
  };
  pair_up(alphabets.filler);
  pair_up(alphabets.keys);
  pair_up(alphabets.values);
  return t;
}

TokenChunk paraphrase(const TokenChunk& chunk, const SynonymTable& synonyms, double rho, Rng& rng,
                      ParaphraseStats* stats) {
  TokenChunk out = chunk;
  for (auto& t : out.tokens) {
    if (t == kPad) continue;
    const auto* alts = synonyms.find(t);
    if (!alts) continue;
    if (stats) ++stats->eligible;
    if (uniform_real(rng) >= rho) continue;
    t = alts->size() == 1 ? alts->front() : (*alts)[uniform_index(rng, alts->size())];
    if (stats) ++stats->replaced;
  }
  return out;
}

ContextSlot inject(RetrievedContext& context, const TokenChunk& input, const SynonymTable& synonyms,
                   const SynthConfig& cfg, Rng& rng) {
  if (context.size() != 2) throw Error("inject: the four-slot rule needs exactly k=2 neighbor records");
  const auto slot = static_cast<int>(uniform_index(rng, 4));
  NeighborRecord& rec = context[slot / 2];
  TokenChunk para = paraphrase(input, synonyms, cfg.rho, rng);
  if (slot % 2 == 0) {
    para.id = rec.neighbor.id;
    rec.neighbor = std::move(para);
    rec.neighbor_zero = false;
  } else {
    para.id = rec.continuation.id;
    rec.continuation = std::move(para);
    rec.continuation_zero = false;
  }
  rec.synthetic = true;
  return static_cast<ContextSlot>(slot);
}

}  // namespace retrolab
