#include "doctest.h"
#include "helpers.hpp"

#include "retrolab/overlap.hpp"
#include "retrolab/synth.hpp"

#include <filesystem>

using namespace retrolab;

namespace {

SynonymTable pair_table(int vocab) {
  SynonymTable t;
  for (int i = 2; i + 1 < vocab; i += 2) {
    t.add(i, {i + 1});
    t.add(i + 1, {i});
  }
  return t;
}

}  // namespace

TEST_CASE("synonym table") {
  SynonymTable t;
  t.add(5, {5});
  CHECK(t.find(5) == nullptr);
  t.add(5, {5, 6, 7});
  REQUIRE(t.find(5) != nullptr);
  CHECK(*t.find(5) == std::vector<TokenId>{6, 7});

  LookupCorpusConfig cfg;
  Alphabets a;
  Vocab v = lookup_vocab(cfg, &a);
  auto syn = default_synonyms(a);
  for (const auto& [tok, alts] : syn.entries()) {
    CHECK(alts.size() == 1);
    CHECK(alts[0] != tok);
    CHECK(static_cast<std::size_t>(alts[0]) < v.size());
  }
  CHECK(syn.find(a.period) == nullptr);
  const auto path = std::filesystem::temp_directory_path() / "retrolab_syn.tsv";
  syn.save(path, v);
  auto back = SynonymTable::load(path, v);
  CHECK(back.entries() == syn.entries());
  std::filesystem::remove(path);
}

TEST_CASE("paraphrase extremes") {
  Rng rng(1);
  auto syn = pair_table(20);
  TokenChunk c{{2, 4, 25, 6, 0, 0}, {}};
  CHECK(paraphrase(c, syn, 0.0, rng).tokens == c.tokens);
  ParaphraseStats stats;
  auto p = paraphrase(c, syn, 1.0, rng, &stats);
  CHECK(p.tokens == std::vector<TokenId>{3, 5, 25, 7, 0, 0});
  CHECK(stats.eligible == 3);
  CHECK(stats.replaced == 3);
  NeighborRecord r;
  r.neighbor = p;
  r.continuation = pad_chunk(6);
  r.neighbor_zero = r.continuation_zero = false;
  CHECK(overlap(c, r) == 1);
}

TEST_CASE("paraphrase contract over many draws") {
  Rng rng(2);
  auto syn = pair_table(30);
  ParaphraseStats stats;
  for (int trial = 0; trial < 1000; ++trial) {
    TokenChunk c = retrolab::testing::random_chunk(rng, 16, 40);
    auto p = paraphrase(c, syn, 0.35, rng, &stats);
    REQUIRE(p.size() == c.size());
    for (int i = 0; i < c.size(); ++i)
      if (p.tokens[i] != c.tokens[i]) CHECK(syn.find(c.tokens[i]) != nullptr);
  }
  CHECK(static_cast<double>(stats.replaced) / stats.eligible == doctest::Approx(0.35).epsilon(0.1));
}

TEST_CASE("paraphrase overlap band on the default corpus") {
  auto lc = generate_lookup_corpus(LookupCorpusConfig{});
  auto syn = default_synonyms(lc.alphabets);
  Rng rng(3);
  OverlapMeter meter;
  const int m = lc.config.m;
  for (int i = 0; i < 1000; ++i) {
    ChunkId id{static_cast<std::int32_t>(uniform_index(rng, lc.train.num_documents())),
               static_cast<std::int32_t>(uniform_index(rng, 4))};
    const auto& c = lc.train.chunk(id);
    NeighborRecord r;
    r.neighbor = paraphrase(c, syn, 0.35, rng);
    r.continuation = pad_chunk(m);
    r.neighbor_zero = r.continuation_zero = false;
    meter.add_value(overlap(c, r));
  }
  CHECK(meter.mean() >= 0.55 * m);
  CHECK(meter.mean() <= 0.75 * m);
}

TEST_CASE("inject replaces exactly one slot") {
  Rng rng(4);
  auto syn = pair_table(30);
  SynthConfig cfg;
  std::array<int, 4> hist{};
  const int n = 10000;
  for (int trial = 0; trial < n; ++trial) {
    RetrievedContext ctx{retrolab::testing::random_record(rng, 8, 30), zero_record(8)};
    const RetrievedContext before = ctx;
    TokenChunk input = retrolab::testing::random_chunk(rng, 8, 30);
    const int slot = static_cast<int>(inject(ctx, input, syn, cfg, rng));
    ++hist[slot];
    const NeighborRecord& changed = ctx[slot / 2];
    const NeighborRecord& other = ctx[1 - slot / 2];
    CHECK(other.neighbor.tokens == before[1 - slot / 2].neighbor.tokens);
    CHECK(other.is_zero() == before[1 - slot / 2].is_zero());
    CHECK(changed.synthetic);
    const auto& partner = slot % 2 == 0 ? changed.continuation : changed.neighbor;
    const auto& partner_before = slot % 2 == 0 ? before[slot / 2].continuation : before[slot / 2].neighbor;
    CHECK(partner.tokens == partner_before.tokens);
    CHECK((slot % 2 == 0 ? !changed.neighbor_zero : !changed.continuation_zero));
  }
  // Pearson chi-square with 3 degrees of freedom; 16.27 is the 0.001 quantile.
  double chi = 0;
  for (int h : hist) chi += (h - n / 4.0) * (h - n / 4.0) / (n / 4.0);
  CHECK(chi < 16.27);

  RetrievedContext three(3, zero_record(8));
  CHECK_THROWS_AS(inject(three, TokenChunk{std::vector<TokenId>(8, 2), {}}, syn, cfg, rng), Error);
}
