#include "retrolab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace retrolab {

namespace {

using ContextFn = std::function<RetrievedContext(ChunkId)>;

PerplexityResult perplexity_over(const ModelParams<float>& params, const Corpus& test, Gate gate, int max_docs,
                                 int batch, const ContextFn& context) {
  if (batch < 1) throw Error("eval: batch must be >= 1");
  const int m = params.cfg.chunk;
  const int k = params.cfg.neighbors;
  if (test.chunk_size() != m) throw Error("eval: test corpus chunk size differs from the model");
  auto windows = make_windows(test, params.cfg.max_chunks);
  if (max_docs > 0)
    std::erase_if(windows, [&](const Window& w) { return w.doc >= max_docs; });
  PerplexityResult r;
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(windows.size(), start + static_cast<std::size_t>(batch));
    int n_chunks = 0;
    for (std::size_t i = start; i < end; ++i) n_chunks = std::max(n_chunks, windows[i].chunks);
    Batch b;
    b.seq_len = n_chunks * m;
    for (std::size_t i = start; i < end; ++i) {
      const Window& w = windows[i];
      std::vector<TokenId> seq(static_cast<std::size_t>(b.seq_len), kPad);
      for (int u = 0; u < w.chunks; ++u) {
        const auto& toks = test.chunk({w.doc, w.first + u}).tokens;
        std::copy(toks.begin(), toks.end(), seq.begin() + static_cast<std::ptrdiff_t>(u) * m);
      }
      b.tokens.push_back(std::move(seq));
      std::vector<RetrievedContext> ctx;
      if (gate == Gate::kOn)
        for (int u = 0; u + 1 < n_chunks; ++u)
          ctx.push_back(u + 1 < w.chunks && context ? context({w.doc, w.first + u}) : ret_off(k, m));
      b.contexts.push_back(std::move(ctx));
    }
    const Targets t = next_token_targets(b);
    long count = 0;
    for (double w : t.weights) count += w > 0 ? 1 : 0;
    if (count == 0) continue;
    const auto fs = forward(params, b, gate);
    r.nll_sum += loss(fs, t) * static_cast<double>(count);
    r.tokens += count;
  }
  if (r.tokens == 0) throw Error("eval: the test split has no targets");
  r.ppl = std::exp(r.nll_sum / static_cast<double>(r.tokens));
  return r;
}

}  // namespace

PerplexityResult eval_perplexity(const ModelParams<float>& params, const Corpus& test, const Corpus& db,
                                 const NeighborTable& neighbors, Gate gate, int max_docs, int batch) {
  if (gate == Gate::kOn && neighbors.query_digest != test.digest())
    throw Error("eval: neighbor table was not computed for this test corpus");
  const int k = params.cfg.neighbors;
  return perplexity_over(params, test, gate, max_docs, batch,
                         [&](ChunkId id) { return natural_context(db, neighbors.at(id), k); });
}

PerplexityResult eval_perplexity_zeroed(const ModelParams<float>& params, const Corpus& test, int max_docs,
                                        int batch) {
  const Gate gate = params.has_retro ? Gate::kOn : Gate::kOff;
  return perplexity_over(params, test, gate, max_docs, batch, {});
}

ActivationReport detect_activation(const std::vector<RunRecord>& run, const std::vector<RunRecord>& ret_off,
                                   double alpha, int window) {
  if (run.size() != ret_off.size()) throw Error("activation: runs have different record counts");
  for (std::size_t i = 0; i < run.size(); ++i)
    if (run[i].step != ret_off[i].step) throw Error("activation: eval steps of the two runs are not aligned");
  ActivationReport rep;
  if (!run.empty()) rep.final_ppl = run.back().ppl;
  int streak = 0;
  for (std::size_t i = 0; i < run.size(); ++i) {
    streak = run[i].ppl <= alpha * ret_off[i].ppl ? streak + 1 : 0;
    if (streak == window) {
      rep.activated = true;
      rep.step = run[i + 1 - static_cast<std::size_t>(window)].step;
      break;
    }
  }
  return rep;
}

AnswerDecoder greedy_decoder(const ModelParams<float>& params, const Corpus& db, const Alphabets& alphabets,
                             Gate gate, int max_new) {
  return [&params, &db, alphabets, gate, max_new](const std::vector<QaRecord>& qa) {
    const int m = params.cfg.chunk;
    const int k = params.cfg.neighbors;
    const int limit = params.cfg.max_tokens();
    std::vector<std::vector<TokenId>> preds(qa.size());
    // Questions of one length decode together.
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < qa.size(); ++i) groups[qa[i].question.size()].push_back(i);
    constexpr std::size_t kBatch = 32;
    for (const auto& [qlen, members] : groups) {
      for (std::size_t start = 0; start < members.size(); start += kBatch) {
        std::vector<std::size_t> ids(members.begin() + static_cast<std::ptrdiff_t>(start),
                                     members.begin() + static_cast<std::ptrdiff_t>(std::min(members.size(), start + kBatch)));
        std::vector<std::vector<TokenId>> seqs;
        std::vector<RetrievedContext> first_ctx;
        for (auto i : ids) {
          seqs.push_back(qa[i].question);
          first_ctx.push_back(qa_context(qa[i], db, k));
        }
        std::vector<bool> done(ids.size(), false);
        for (int step = 0; step < max_new; ++step) {
          const int len = static_cast<int>(seqs.front().size());
          if (len >= limit) break;
          Batch b;
          b.seq_len = len;
          const int n_chunks = (len + m - 1) / m;
          for (std::size_t j = 0; j < ids.size(); ++j) {
            b.tokens.push_back(seqs[j]);
            std::vector<RetrievedContext> ctx;
            if (gate == Gate::kOn)
              for (int u = 0; u + 1 < n_chunks; ++u) ctx.push_back(u == 0 && qlen >= static_cast<std::size_t>(m) ? first_ctx[j] : ret_off(k, m));
            b.contexts.push_back(std::move(ctx));
          }
          const auto fs = forward(params, b, gate);
          bool all_done = true;
          for (std::size_t j = 0; j < ids.size(); ++j) {
            TokenId next = kPad;
            if (!done[j]) {
              Index best;
              fs.logits.row(static_cast<Index>(j) * len + len - 1).maxCoeff(&best);
              next = static_cast<TokenId>(best);
              if (next == alphabets.period || next == kPad) done[j] = true;
              else preds[ids[j]].push_back(next);
            }
            seqs[j].push_back(next);
            all_done = all_done && done[j];
          }
          if (all_done) break;
        }
      }
    }
    return preds;
  };
}

std::vector<TokenId> normalize_answer(const std::vector<TokenId>& tokens, const Alphabets& alphabets) {
  std::vector<TokenId> out;
  for (auto t : tokens)
    if (t != kPad && !alphabets.is_punctuation(t)) out.push_back(t);
  return out;
}

double eval_qa_em(const std::vector<QaRecord>& qa, const AnswerDecoder& decode, const Alphabets& alphabets) {
  if (qa.empty()) throw Error("eval_qa_em: empty QA set");
  const auto preds = decode(qa);
  if (preds.size() != qa.size()) throw Error("eval_qa_em: decoder returned the wrong number of answers");
  int hits = 0;
  for (std::size_t i = 0; i < qa.size(); ++i)
    hits += normalize_answer(preds[i], alphabets) == normalize_answer(qa[i].answer, alphabets) ? 1 : 0;
  return 100.0 * hits / static_cast<double>(qa.size());
}

}  // namespace retrolab
