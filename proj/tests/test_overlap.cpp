#include "doctest.h"
#include "helpers.hpp"

#include "retrolab/overlap.hpp"

#include <cmath>
#include <map>

using namespace retrolab;

namespace {

NeighborRecord record(std::vector<TokenId> n, std::vector<TokenId> f, float score = 0.0F, int doc = 0) {
  NeighborRecord r;
  r.neighbor = TokenChunk{std::move(n), {doc, 0}};
  r.continuation = TokenChunk{std::move(f), {doc, 1}};
  r.neighbor_zero = r.continuation_zero = false;
  r.score = score;
  return r;
}

// Counts through a map rather than sort-merge.
int oracle_overlap(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::map<TokenId, int> ca, cb;
  for (auto t : a)
    if (t != kPad) ++ca[t];
  for (auto t : b)
    if (t != kPad) ++cb[t];
  int s = 0;
  for (auto [t, n] : ca)
    if (cb.count(t)) s += std::min(n, cb[t]);
  return s;
}

}  // namespace

TEST_CASE("overlap examples") {
  TokenChunk in{{2, 3, 2, 4}, {}};
  CHECK(overlap(in, record({2, 3, 3, 5}, {6, 7, 8, 9})) == 2);
  CHECK(overlap(in, record({2, 3, 2, 4}, {0, 0, 0, 0})) == 4);
  CHECK(overlap(in, record({5, 6, 7, 8}, {9, 10, 11, 12})) == 0);
  TokenChunk padded{{2, 0, 0, 0}, {}};
  CHECK(overlap(padded, record({2, 0, 0, 0}, {0, 0, 0, 0})) == 1);
  CHECK_THROWS_AS(overlap(in, zero_record(4)), Error);
  NeighborRecord half = record({2, 3, 2, 4}, {2, 2, 2, 2});
  half.continuation_zero = true;
  CHECK(overlap(in, half) == 4);
}

TEST_CASE("overlap matches the multiset oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const int m = 16;
    auto draw = [&](int n) {
      std::vector<TokenId> v;
      for (int i = 0; i < n; ++i) v.push_back(static_cast<TokenId>(uniform_index(rng, 12)));
      return v;
    };
    TokenChunk in{draw(m), {}};
    auto r = record(draw(m), draw(m));
    std::vector<TokenId> joined = r.neighbor.tokens;
    joined.insert(joined.end(), r.continuation.tokens.begin(), r.continuation.tokens.end());
    const int got = overlap(in, r);
    CHECK(got == oracle_overlap(in.tokens, joined));
    CHECK(got == multiset_overlap(joined, in.tokens));
    CHECK(got <= m - in.pad_count());
  }
}

TEST_CASE("bins") {
  auto b64 = make_bins(64);
  std::vector<int> uppers;
  for (const auto& b : b64) uppers.push_back(b.upper);
  CHECK(uppers == std::vector<int>{6, 12, 19, 25, 32, 38, 44, 51, 57, 64});
  CHECK(b64[3].label == "< 25");
  CHECK(b64[4].label == "< 32");
  CHECK(b64[5].label == "< 38");
  CHECK(b64[6].label == "< 44");
  CHECK(b64[7].label == "< 51");
  CHECK(b64[9].label == "≤ 64");
  auto b10 = make_bins(10);
  for (int i = 0; i < 10; ++i) CHECK(b10[i].upper == i + 1);
  CHECK_THROWS_AS(make_bins(9), Error);
  for (int m : {10, 16, 64}) {
    auto bins = make_bins(m);
    for (int v = 0; v <= m; ++v) {
      int owners = 0;
      for (std::size_t i = 0; i < bins.size(); ++i) {
        const int lower = i == 0 ? 0 : bins[i - 1].upper;
        owners += v >= lower && bins[i].admits(v);
      }
      CHECK(owners == 1);
    }
  }
}

TEST_CASE("filter prioritizes overlap and pads") {
  const int m = 64;
  auto rec_with = [&](int ov, float score, int doc) {
    std::vector<TokenId> n(m, 0), f(m, 0);
    for (int i = 0; i < ov; ++i) n[i] = 2 + i;
    n[m - 1] = 200;
    return record(n, f, score, doc);
  };
  TokenChunk in{{}, {}};
  for (int i = 0; i < m; ++i) in.tokens.push_back(2 + i);
  std::vector<NeighborRecord> cands{rec_with(5, 0.9F, 1), rec_with(30, 0.8F, 2), rec_with(12, 0.7F, 3)};
  auto out = filter_neighbors(in, cands, FilterPolicy{bin_for(m, 4), 2, 20});
  REQUIRE(out.size() == 2);
  CHECK(out[0].neighbor.id.doc == 3);
  CHECK(out[1].neighbor.id.doc == 1);

  auto none = filter_neighbors(in, std::span(cands).subspan(1), FilterPolicy{bin_for(m, 2), 2, 20});
  CHECK(none[0].is_zero());
  CHECK(none[1].is_zero());

  auto top = filter_neighbors(in, cands, FilterPolicy{bin_for(m, 10), 2, 20});
  CHECK(top[0].neighbor.id.doc == 2);
  CHECK(top[1].neighbor.id.doc == 3);

  std::vector<NeighborRecord> tie{rec_with(7, 0.1F, 5), rec_with(7, 0.4F, 4), rec_with(7, 0.4F, 2)};
  auto t = filter_neighbors(in, tie, FilterPolicy{bin_for(m, 10), 3, 20});
  CHECK(t[0].neighbor.id.doc == 2);
  CHECK(t[1].neighbor.id.doc == 4);
  CHECK(t[2].neighbor.id.doc == 5);
}

TEST_CASE("relaxing the bin never keeps fewer candidates") {
  Rng rng(8);
  const int m = 16;
  for (int trial = 0; trial < 100; ++trial) {
    TokenChunk in = retrolab::testing::random_chunk(rng, m, 20);
    std::vector<NeighborRecord> cands;
    for (int i = 0; i < 20; ++i) cands.push_back(retrolab::testing::random_record(rng, m, 20));
    int prev = 0;
    for (int b = 1; b <= 10; ++b) {
      auto out = filter_neighbors(in, cands, FilterPolicy{bin_for(m, b), 20, 20});
      CHECK(out.size() == 20);
      const int kept = static_cast<int>(std::count_if(out.begin(), out.end(), [](const auto& r) { return !r.is_zero(); }));
      CHECK(kept >= prev);
      prev = kept;
    }
    CHECK(prev == 20);
  }
}

TEST_CASE("ret_off and the meter") {
  auto z = ret_off(2, 16);
  REQUIRE(z.size() == 2);
  CHECK(z[0].is_zero());
  CHECK(z[1].is_zero());

  OverlapMeter meter;
  CHECK(std::isnan(meter.mean()));
  CHECK(meter.reported() == 0.0);
  meter.add(TokenChunk{std::vector<TokenId>(16, 3), {}}, z);
  CHECK(meter.count() == 0);
  meter.add_value(7);
  CHECK(meter.mean() == 7.0);
  OverlapMeter other;
  TokenChunk c{{2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, {}};
  other.add(c, std::vector<NeighborRecord>{record(c.tokens, std::vector<TokenId>(10, 0))});
  CHECK(other.mean() == 10.0);
  meter.merge(other);
  CHECK(meter.mean() == 8.5);
}
