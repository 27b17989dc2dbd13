#pragma once

#include "retrolab/corpus.hpp"
#include "retrolab/retrieval.hpp"

#include <span>
#include <string>
#include <vector>

namespace retrolab {

/// Overlap interval i in 1..10: admits values < upper, or <= upper for the
/// top bin.
struct OverlapBin {
  int index = 10;
  int upper = 0;
  bool inclusive = true;
  std::string label;

  bool admits(int overlap) const { return inclusive ? overlap <= upper : overlap < upper; }
};

/// Ten bins over [0, m]: upper(i) = floor(m*i/10) for i < 10, upper(10) = m.
std::vector<OverlapBin> make_bins(int m);
OverlapBin bin_for(int m, int index);

struct FilterPolicy {
  OverlapBin bin;
  int k = 2;
  int pool = 20;
};

/// Multiset intersection size between the input chunk and neighbor++continuation,
/// PAD excluded. Throws on an all-zero record.
int overlap(const TokenChunk& input, const NeighborRecord& record);
int multiset_overlap(std::span<const TokenId> a, std::span<const TokenId> b);

/// Keeps candidates the bin admits, orders them by overlap (desc), retrieval
/// score (desc), chunk id (asc), takes the first k and zero-pads to exactly k.
RetrievedContext filter_neighbors(const TokenChunk& input, std::span<const NeighborRecord> candidates,
                                  const FilterPolicy& policy);

/// k zero records (retrieval switched off).
RetrievedContext ret_off(int k, int m);

/// Running mean of overlap over the non-zero selected records.
class OverlapMeter {
 public:
  void add(const TokenChunk& input, std::span<const NeighborRecord> selected);
  void add_value(int overlap);
  void merge(const OverlapMeter& other);
  std::size_t count() const { return count_; }
  /// NaN when nothing has been recorded.
  double mean() const;
  /// mean(), reported as 0 when undefined.
  double reported() const;

 private:
  double sum_ = 0.0;
  std::size_t count_ = 0;
};

}  // namespace retrolab
