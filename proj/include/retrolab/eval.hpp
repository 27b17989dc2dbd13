#pragma once

#include "retrolab/corpus.hpp"
#include "retrolab/model.hpp"
#include "retrolab/train.hpp"

#include <functional>
#include <vector>

namespace retrolab {

struct PerplexityResult {
  double ppl = 0.0;
  double nll_sum = 0.0;
  long tokens = 0;
};

/// exp(mean NLL) over every non-PAD target of the test windows, with the
/// unfiltered top-k neighbors of each chunk. `max_docs` > 0 limits the split
/// to its first documents.
PerplexityResult eval_perplexity(const ModelParams<float>& params, const Corpus& test, const Corpus& db,
                                 const NeighborTable& neighbors, Gate gate, int max_docs = 0, int batch = 16);

/// Same, with every context replaced by zero records.
PerplexityResult eval_perplexity_zeroed(const ModelParams<float>& params, const Corpus& test, int max_docs = 0,
                                        int batch = 16);

struct ActivationReport {
  bool activated = false;
  int step = -1;
  double final_ppl = 0.0;
};

/// First eval step whose perplexity is at most alpha times the Ret[off]
/// perplexity at the same step, for `window` consecutive evals.
ActivationReport detect_activation(const std::vector<RunRecord>& run, const std::vector<RunRecord>& ret_off,
                                   double alpha = 0.9, int window = 3);

/// Maps questions to predicted answer tokens.
using AnswerDecoder = std::function<std::vector<std::vector<TokenId>>(const std::vector<QaRecord>&)>;

/// Greedy decoding after the question until a period or PAD, with the QA
/// contexts as neighbors of the question chunk.
AnswerDecoder greedy_decoder(const ModelParams<float>& params, const Corpus& db, const Alphabets& alphabets,
                             Gate gate = Gate::kOn, int max_new = 6);

/// Drops punctuation tokens (and PAD).
std::vector<TokenId> normalize_answer(const std::vector<TokenId>& tokens, const Alphabets& alphabets);

/// Exact-match percentage after normalization.
double eval_qa_em(const std::vector<QaRecord>& qa, const AnswerDecoder& decode, const Alphabets& alphabets);

}  // namespace retrolab
