#include "doctest.h"
#include "helpers.hpp"

#include "retrolab/eval.hpp"

#include <cmath>

using namespace retrolab;

namespace {

std::vector<RunRecord> curve(const std::vector<double>& ppl, int every = 10) {
  std::vector<RunRecord> out;
  for (std::size_t i = 0; i < ppl.size(); ++i) out.push_back({static_cast<int>(i) * every, 0.0, ppl[i], 0.0, 0});
  return out;
}

const LookupCorpus& lookup() {
  static const LookupCorpus lc = [] {
    LookupCorpusConfig c;
    c.n_facts = 20;
    c.n_docs = 60;
    c.n_test_docs = 6;
    return generate_lookup_corpus(c);
  }();
  return lc;
}

ModelConfig lookup_model() {
  ModelConfig m;
  m.vocab = lookup().vocab.size();
  m.layers = 2;
  m.width = 16;
  m.heads = 2;
  m.ffn_mult = 2;
  m.cca_layers = {2};
  return m;
}

}  // namespace

TEST_CASE("activation needs a full window below alpha times Ret[off]") {
  const auto off = curve({100, 100, 100, 100, 100, 100});
  auto rep = detect_activation(curve({100, 95, 89, 88, 95, 80}), off);
  CHECK_FALSE(rep.activated);
  CHECK(rep.step == -1);
  CHECK(rep.final_ppl == 80);
  rep = detect_activation(curve({100, 89, 95, 90, 85, 80}), off);
  CHECK(rep.activated);
  CHECK(rep.step == 30);  // exactly alpha counts
  rep = detect_activation(curve({100, 89, 95, 90, 85, 80}), off, 0.9, 1);
  CHECK(rep.step == 10);
  CHECK_FALSE(detect_activation(curve({100, 50}), curve({100, 100})).activated);
  CHECK_THROWS_AS(detect_activation(curve({100, 90}), curve({100})), Error);
  CHECK_THROWS_AS(detect_activation(curve({100, 90}), curve({100, 90}, 5)), Error);
}

TEST_CASE("a looser alpha activates no later") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> run, off;
    for (int i = 0; i < 12; ++i) {
      off.push_back(50 + 10 * uniform_real(rng));
      run.push_back(off.back() * (0.6 + 0.5 * uniform_real(rng)));
    }
    int prev = -1;
    bool was = false;
    for (double alpha : {0.7, 0.8, 0.9, 1.0}) {
      const auto rep = detect_activation(curve(run), curve(off), alpha);
      if (was) {
        REQUIRE(rep.activated);
        CHECK(rep.step <= prev);
      }
      was = rep.activated;
      prev = rep.step;
    }
  }
}

TEST_CASE("answer normalization and exact match") {
  const auto& a = lookup().alphabets;
  const auto v = a.values;
  CHECK(normalize_answer({v[0], a.period, kPad, a.comma, v[1]}, a) == std::vector<TokenId>{v[0], v[1]});
  const std::vector<TokenId> raw{a.comma, v[2], kPad, v[3], a.period, a.period};
  CHECK(normalize_answer(normalize_answer(raw, a), a) == normalize_answer(raw, a));
  const auto qa = generate_qa_set(lookup(), 8, 2);
  const AnswerDecoder oracle = [&](const std::vector<QaRecord>& q) {
    std::vector<std::vector<TokenId>> out;
    for (const auto& r : q) {
      auto ans = r.answer;
      ans.push_back(a.period);
      out.push_back(ans);
    }
    return out;
  };
  CHECK(eval_qa_em(qa, oracle, a) == 100.0);
  const AnswerDecoder half = [&](const std::vector<QaRecord>& q) {
    auto out = oracle(q);
    for (std::size_t i = 0; i < out.size(); i += 2) out[i][0] = out[i][0] == v[0] ? v[1] : v[0];
    return out;
  };
  CHECK(eval_qa_em(qa, half, a) == 50.0);
  const AnswerDecoder wrong_count = [](const std::vector<QaRecord>&) { return std::vector<std::vector<TokenId>>{}; };
  CHECK_THROWS_AS(eval_qa_em(qa, wrong_count, a), Error);
}

TEST_CASE("perplexity equals exp of the token-weighted mean NLL, independent of batching") {
  const auto& lc = lookup();
  const auto p = init_params<float>(lookup_model(), 9, nullptr);
  const auto one = eval_perplexity_zeroed(p, lc.test, 0, 1);
  const auto many = eval_perplexity_zeroed(p, lc.test, 0, 4);
  CHECK(one.tokens == many.tokens);
  CHECK(one.ppl == doctest::Approx(many.ppl).epsilon(1e-5));
  // oracle: sum per-window losses by hand
  double nll = 0;
  long count = 0;
  for (const auto& w : make_windows(lc.test, p.cfg.max_chunks)) {
    Batch b;
    b.seq_len = w.chunks * p.cfg.chunk;
    std::vector<TokenId> seq;
    std::vector<RetrievedContext> ctx;
    for (int u = 0; u < w.chunks; ++u) {
      const auto& t = lc.test.chunk({w.doc, w.first + u}).tokens;
      seq.insert(seq.end(), t.begin(), t.end());
      if (u + 1 < w.chunks) ctx.push_back(ret_off(2, p.cfg.chunk));
    }
    b.tokens.push_back(seq);
    b.contexts.push_back(ctx);
    const auto tg = next_token_targets(b);
    long n = 0;
    for (double x : tg.weights) n += x > 0;
    nll += loss(forward(p, b, Gate::kOn), tg) * static_cast<double>(n);
    count += n;
  }
  CHECK(one.tokens == count);
  CHECK(one.ppl == doctest::Approx(std::exp(nll / static_cast<double>(count))).epsilon(1e-5));
  const auto first = eval_perplexity_zeroed(p, lc.test, 2);
  CHECK(first.tokens < one.tokens);
}

TEST_CASE("an untrained model is close to uniform on the default vocabulary") {
  LookupCorpusConfig c;
  c.n_facts = 20;
  c.n_docs = 60;
  c.n_test_docs = 20;
  const auto lc = generate_lookup_corpus(c);
  REQUIRE(lc.vocab.size() == 256);
  ModelConfig m;
  m.vocab = 256;
  const auto p = init_params<float>(m, 1);
  const double ppl = eval_perplexity_zeroed(p, lc.test).ppl;
  CHECK(ppl >= 200);
  CHECK(ppl <= 320);
}

TEST_CASE("perplexity rejects a neighbor table of another corpus") {
  const auto& lc = lookup();
  const auto p = init_params<float>(lookup_model(), 9, nullptr);
  NeighborTable t;
  t.query_digest = lc.train.digest();
  CHECK_THROWS_AS(eval_perplexity(p, lc.test, lc.train, t, Gate::kOn), Error);
}

TEST_CASE("greedy decoding follows the argmax of the model") {
  const auto& lc = lookup();
  const auto p = init_params<float>(lookup_model(), 13, nullptr);
  const auto qa = generate_qa_set(lc, 3, 4);
  const auto preds = greedy_decoder(p, lc.train, lc.alphabets, Gate::kOn, 3)(qa);
  REQUIRE(preds.size() == 3);
  for (std::size_t i = 0; i < qa.size(); ++i) {
    std::vector<TokenId> seq = qa[i].question;
    std::vector<TokenId> expect;
    for (int s = 0; s < 3; ++s) {
      Batch b;
      b.seq_len = static_cast<int>(seq.size());
      b.tokens.push_back(seq);
      b.contexts.push_back({qa_context(qa[i], lc.train, 2)});
      const auto fs = forward(p, b, Gate::kOn);
      Index best;
      fs.logits.row(b.seq_len - 1).maxCoeff(&best);
      if (best == lc.alphabets.period || best == kPad) break;
      expect.push_back(static_cast<TokenId>(best));
      seq.push_back(static_cast<TokenId>(best));
    }
    CHECK(preds[i] == expect);
  }
}
