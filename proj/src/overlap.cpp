#include "retrolab/overlap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace retrolab {

std::vector<OverlapBin> make_bins(int m) {
  if (m < 10) throw Error("make_bins: chunk size must be >= 10");
  std::vector<OverlapBin> bins;
  for (int i = 1; i <= 10; ++i) {
    OverlapBin b;
    b.index = i;
    b.inclusive = i == 10;
    b.upper = b.inclusive ? m : (m * i) / 10;
    b.label = (b.inclusive ? "≤ " : "< ") + std::to_string(b.upper);
    bins.push_back(std::move(b));
  }
  return bins;
}

OverlapBin bin_for(int m, int index) {
  if (index < 1 || index > 10) throw Error("overlap bin index must be in 1..10");
  return make_bins(m)[index - 1];
}

int multiset_overlap(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<TokenId> x, y;
  x.reserve(a.size());
  y.reserve(b.size());
  for (auto t : a)
    if (t != kPad) x.push_back(t);
  for (auto t : b)
    if (t != kPad) y.push_back(t);
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  int shared = 0;
  std::size_t i = 0, j = 0;
  while (i < x.size() && j < y.size()) {
    if (x[i] < y[j]) ++i;
    else if (y[j] < x[i]) ++j;
    else {
      ++shared;
      ++i;
      ++j;
    }
  }
  return shared;
}

int overlap(const TokenChunk& input, const NeighborRecord& record) {
  if (record.is_zero()) throw Error("overlap: zero-padded record has no tokens");
  std::vector<TokenId> joined;
  joined.reserve(record.neighbor.tokens.size() + record.continuation.tokens.size());
  if (!record.neighbor_zero) joined.insert(joined.end(), record.neighbor.tokens.begin(), record.neighbor.tokens.end());
  if (!record.continuation_zero)
    joined.insert(joined.end(), record.continuation.tokens.begin(), record.continuation.tokens.end());
  return multiset_overlap(input.tokens, joined);
}

RetrievedContext filter_neighbors(const TokenChunk& input, std::span<const NeighborRecord> candidates,
                                  const FilterPolicy& policy) {
  struct Kept {
    int overlap;
    const NeighborRecord* rec;
  };
  std::vector<Kept> kept;
  for (const auto& c : candidates) {
    if (c.is_zero()) continue;
    const int ov = overlap(input, c);
    if (policy.bin.admits(ov)) kept.push_back({ov, &c});
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Kept& a, const Kept& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    if (a.rec->score != b.rec->score) return a.rec->score > b.rec->score;
    return a.rec->neighbor.id < b.rec->neighbor.id;
  });
  const int m = input.size();
  RetrievedContext out;
  out.reserve(policy.k);
  for (const auto& k : kept) {
    if (static_cast<int>(out.size()) == policy.k) break;
    out.push_back(*k.rec);
  }
  while (static_cast<int>(out.size()) < policy.k) out.push_back(zero_record(m));
  return out;
}

RetrievedContext ret_off(int k, int m) { return RetrievedContext(static_cast<std::size_t>(k), zero_record(m)); }

void OverlapMeter::add(const TokenChunk& input, std::span<const NeighborRecord> selected) {
  for (const auto& r : selected)
    if (!r.is_zero()) add_value(overlap(input, r));
}

void OverlapMeter::add_value(int overlap) {
  sum_ += overlap;
  ++count_;
}

void OverlapMeter::merge(const OverlapMeter& other) {
  sum_ += other.sum_;
  count_ += other.count_;
}

double OverlapMeter::mean() const {
  return count_ == 0 ? std::numeric_limits<double>::quiet_NaN() : sum_ / static_cast<double>(count_);
}

double OverlapMeter::reported() const { return count_ == 0 ? 0.0 : mean(); }

}  // namespace retrolab
