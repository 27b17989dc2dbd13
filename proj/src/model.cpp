#include "retrolab/model.hpp"

#include "retrolab/binary_io.hpp"
#include "retrolab/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace retrolab {

// ---------------------------------------------------------------------------
// Config

std::vector<int> ModelConfig::default_cca(int layers) {
  std::vector<int> out;
  for (int l = 2; l <= layers; l += 2) out.push_back(l);
  return out;
}

bool ModelConfig::has_cca(int layer) const {
  return std::find(cca_layers.begin(), cca_layers.end(), layer + 1) != cca_layers.end();
}

void ModelConfig::validate() const {
  if (vocab < 2 || layers < 1 || width < 1 || heads < 1 || chunk < 1 || neighbors < 1 || max_chunks < 1 ||
      encoder_layers < 0 || ffn_mult < 1)
    throw Error("model config: sizes must be positive");
  if (width % heads != 0) throw Error("model config: width must be divisible by heads");
  for (int l : cca_layers)
    if (l < 1 || l > layers) throw Error("model config: cross-attention layer out of range");
}

std::string config_to_string(const ModelConfig& c) {
  std::ostringstream out;
  out << "vocab=" << c.vocab << " layers=" << c.layers << " width=" << c.width << " heads=" << c.heads
      << " chunk=" << c.chunk << " neighbors=" << c.neighbors << " max_chunks=" << c.max_chunks
      << " encoder_layers=" << c.encoder_layers << " ffn_mult=" << c.ffn_mult << " cca=";
  for (std::size_t i = 0; i < c.cca_layers.size(); ++i) out << (i ? "," : "") << c.cca_layers[i];
  return out.str();
}

ModelConfig config_from_string(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string field;
  while (in >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw Error("model config: malformed field '" + field + "'");
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "cca") {
      c.cca_layers.clear();
      std::istringstream vs(val);
      std::string item;
      while (std::getline(vs, item, ','))
        if (!item.empty()) c.cca_layers.push_back(std::stoi(item));
      continue;
    }
    const int v = std::stoi(val);
    if (key == "vocab") c.vocab = v;
    else if (key == "layers") c.layers = v;
    else if (key == "width") c.width = v;
    else if (key == "heads") c.heads = v;
    else if (key == "chunk") c.chunk = v;
    else if (key == "neighbors") c.neighbors = v;
    else if (key == "max_chunks") c.max_chunks = v;
    else if (key == "encoder_layers") c.encoder_layers = v;
    else if (key == "ffn_mult") c.ffn_mult = v;
    else throw Error("model config: unknown field '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter table

namespace {

template <typename P, typename Fn>
void visit_linear(P& l, const std::string& name, TensorGroup g, Fn& fn) {
  fn(name + ".w", l.w, g);
  fn(name + ".b", l.b, g);
}

template <typename P, typename Fn>
void visit_norm(P& n, const std::string& name, TensorGroup g, Fn& fn) {
  fn(name + ".gain", n.gain, g);
  fn(name + ".bias", n.bias, g);
}

template <typename P, typename Fn>
void visit_attn(P& a, const std::string& name, TensorGroup g, Fn& fn) {
  visit_linear(a.q, name + ".q", g, fn);
  visit_linear(a.k, name + ".k", g, fn);
  visit_linear(a.v, name + ".v", g, fn);
  visit_linear(a.o, name + ".o", g, fn);
}

template <typename P, typename Fn>
void visit_ffn(P& f, const std::string& name, TensorGroup g, Fn& fn) {
  visit_linear(f.up, name + ".up", g, fn);
  visit_linear(f.down, name + ".down", g, fn);
}

// Fixed traversal order; it defines checkpoint layout and init draws.
template <typename P, typename Fn>
void visit_tensors(P& p, Fn&& fn) {
  constexpr auto base = TensorGroup::kBase;
  constexpr auto retro = TensorGroup::kRetro;
  fn(std::string("tok_emb"), p.tok_emb, base);
  fn(std::string("pos_emb"), p.pos_emb, base);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i);
    visit_norm(l.norm_attn, pre + ".norm_attn", base, fn);
    visit_attn(l.self_attn, pre + ".self_attn", base, fn);
    if (p.has_retro && l.cross) {
      visit_norm(l.cross->norm, pre + ".cross.norm", retro, fn);
      visit_attn(l.cross->attn, pre + ".cross.attn", retro, fn);
    }
    visit_norm(l.norm_ffn, pre + ".norm_ffn", base, fn);
    visit_ffn(l.ffn, pre + ".ffn", base, fn);
  }
  visit_norm(p.final_norm, std::string("final_norm"), base, fn);
  visit_linear(p.out, std::string("out"), base, fn);
  if (!p.has_retro) return;
  fn(std::string("enc_pos"), p.enc_pos, retro);
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    auto& l = p.encoder[i];
    const std::string pre = "encoder." + std::to_string(i);
    visit_norm(l.norm_attn, pre + ".norm_attn", retro, fn);
    visit_attn(l.attn, pre + ".attn", retro, fn);
    visit_norm(l.norm_ffn, pre + ".norm_ffn", retro, fn);
    visit_ffn(l.ffn, pre + ".ffn", retro, fn);
  }
  visit_norm(p.enc_norm, std::string("enc_norm"), retro, fn);
}

template <typename S>
void alloc_linear(Linear<S>& l, Index in, Index out) {
  l.w = Matrix<S>::Zero(in, out);
  l.b = Matrix<S>::Zero(1, out);
}

template <typename S>
void alloc_norm(LayerNorm<S>& n, Index h) {
  n.gain = Matrix<S>::Zero(1, h);
  n.bias = Matrix<S>::Zero(1, h);
}

template <typename S>
void alloc_attn(Attention<S>& a, Index h) {
  alloc_linear(a.q, h, h);
  alloc_linear(a.k, h, h);
  alloc_linear(a.v, h, h);
  alloc_linear(a.o, h, h);
}

template <typename S>
void alloc_ffn(FeedForward<S>& f, Index h, Index inner) {
  alloc_linear(f.up, h, inner);
  alloc_linear(f.down, inner, h);
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::size_t n = std::strlen(suffix);
  return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

}  // namespace

template <typename S>
std::vector<TensorRef<S>> ModelParams<S>::tensors() {
  std::vector<TensorRef<S>> out;
  visit_tensors(*this, [&](const std::string& n, Matrix<S>& t, TensorGroup g) { out.push_back({n, &t, g}); });
  return out;
}

template <typename S>
std::vector<ConstTensorRef<S>> ModelParams<S>::tensors() const {
  std::vector<ConstTensorRef<S>> out;
  visit_tensors(*this, [&](const std::string& n, const Matrix<S>& t, TensorGroup g) { out.push_back({n, &t, g}); });
  return out;
}

template <typename S>
std::size_t ModelParams<S>::parameter_count() const {
  std::size_t n = 0;
  visit_tensors(*this, [&](const std::string&, const Matrix<S>& t, TensorGroup) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename S>
bool ModelParams<S>::all_finite() const {
  bool ok = true;
  visit_tensors(*this, [&](const std::string&, const Matrix<S>& t, TensorGroup) { ok = ok && t.allFinite(); });
  return ok;
}

template <typename S>
ModelParams<S> zero_params(const ModelConfig& cfg, bool with_retro) {
  cfg.validate();
  ModelParams<S> p;
  p.cfg = cfg;
  p.has_retro = with_retro;
  const Index h = cfg.width;
  const Index inner = static_cast<Index>(cfg.width) * cfg.ffn_mult;
  p.tok_emb = Matrix<S>::Zero(cfg.vocab, h);
  p.pos_emb = Matrix<S>::Zero(cfg.max_tokens(), h);
  p.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    auto& L = p.layers[l];
    alloc_norm(L.norm_attn, h);
    alloc_attn(L.self_attn, h);
    alloc_norm(L.norm_ffn, h);
    alloc_ffn(L.ffn, h, inner);
    if (with_retro && cfg.has_cca(l)) {
      L.cross.emplace();
      alloc_norm(L.cross->norm, h);
      alloc_attn(L.cross->attn, h);
    }
  }
  alloc_norm(p.final_norm, h);
  alloc_linear(p.out, h, cfg.vocab);
  if (with_retro) {
    p.enc_pos = Matrix<S>::Zero(2 * cfg.chunk, h);
    p.encoder.resize(cfg.encoder_layers);
    for (auto& E : p.encoder) {
      alloc_norm(E.norm_attn, h);
      alloc_attn(E.attn, h);
      alloc_norm(E.norm_ffn, h);
      alloc_ffn(E.ffn, h, inner);
    }
    alloc_norm(p.enc_norm, h);
  }
  return p;
}

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& p) {
  return zero_params<S>(p.cfg, p.has_retro);
}

template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed, const ModelParams<S>* base) {
  ModelParams<S> p = zero_params<S>(cfg, true);
  Rng rng(derive_seed(seed, {21}));
  std::normal_distribution<double> normal(0.0, 0.02);
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
  for (auto& t : p.tensors()) {
    if (ends_with(t.name, ".gain")) {
      t.tensor->setOnes();
    } else if (ends_with(t.name, ".b") || ends_with(t.name, ".bias")) {
      t.tensor->setZero();
    } else {
      const bool resid = ends_with(t.name, ".o.w") || ends_with(t.name, ".down.w");
      const double scale = resid ? resid_scale : 1.0;
      for (Index i = 0; i < t.tensor->size(); ++i) t.tensor->data()[i] = static_cast<S>(normal(rng) * scale);
    }
  }
  if (base) {
    if (!(base->cfg == cfg)) {
      ModelConfig a = base->cfg, b = cfg;
      a.cca_layers = b.cca_layers;
      a.encoder_layers = b.encoder_layers;
      if (!(a == b)) throw Error("init_params: base decoder shapes do not match the config");
    }
    auto dst = p.tensors();
    auto src = base->tensors();
    std::size_t j = 0;
    for (auto& t : dst) {
      if (t.group != TensorGroup::kBase) continue;
      while (j < src.size() && src[j].group != TensorGroup::kBase) ++j;
      if (j == src.size() || src[j].name != t.name || src[j].tensor->rows() != t.tensor->rows() ||
          src[j].tensor->cols() != t.tensor->cols())
        throw Error("init_params: base tensor mismatch at " + t.name);
      *t.tensor = src[j].tensor->template cast<S>();
      ++j;
    }
  }
  return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out = zero_params<To>(p.cfg, p.has_retro);
  auto dst = out.tensors();
  auto src = p.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<To>();
  return out;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

template <typename S>
constexpr S kLnEps = S(1e-5);

struct Segment {
  Index q0, nq, k0, nk;
  bool causal;
};

template <typename S>
void linear_fwd(const Linear<S>& l, const Matrix<S>& x, Matrix<S>& y) {
  y.noalias() = x * l.w;
  y.rowwise() += l.b.row(0);
}

template <typename S>
void linear_bwd(const Linear<S>& l, const Matrix<S>& x, const Matrix<S>& dy, Matrix<S>* dx, Linear<S>& g) {
  g.w.noalias() += x.transpose() * dy;
  g.b += dy.colwise().sum();
  if (dx) dx->noalias() = dy * l.w.transpose();
}

template <typename S>
void ln_fwd(const LayerNorm<S>& ln, const Matrix<S>& x, Matrix<S>& y, LnCache<S>& c) {
  const Index n = x.rows();
  const Index h = x.cols();
  c.xhat.resize(n, h);
  c.rstd.resize(n);
  for (Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S r = S(1) / std::sqrt(var + kLnEps<S>);
    c.rstd[i] = r;
    c.xhat.row(i) = (x.row(i).array() - mean) * r;
  }
  y = (c.xhat.array().rowwise() * ln.gain.row(0).array()).rowwise() + ln.bias.row(0).array();
}

template <typename S>
void ln_bwd(const LayerNorm<S>& ln, const LnCache<S>& c, const Matrix<S>& dy, Matrix<S>& dx, LayerNorm<S>& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  Matrix<S> dxhat = dy.array().rowwise() * ln.gain.row(0).array();
  dx.resize(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const S m1 = dxhat.row(i).mean();
    const S m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd[i] * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
}

template <typename S>
S gelu(S x) {
  const S k = S(0.7978845608028654);
  return S(0.5) * x * (S(1) + std::tanh(k * (x + S(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  const S k = S(0.7978845608028654);
  const S t = std::tanh(k * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * k * (S(1) + S(3 * 0.044715) * x * x);
}

template <typename S>
void ffn_fwd(const FeedForward<S>& f, const Matrix<S>& x, Matrix<S>& y, FfnCache<S>& c) {
  c.x = x;
  linear_fwd(f.up, x, c.pre);
  c.act = c.pre.unaryExpr([](S v) { return gelu(v); });
  linear_fwd(f.down, c.act, y);
}

template <typename S>
void ffn_bwd(const FeedForward<S>& f, const FfnCache<S>& c, const Matrix<S>& dy, Matrix<S>& dx, FeedForward<S>& g) {
  Matrix<S> dact;
  linear_bwd(f.down, c.act, dy, &dact, g.down);
  Matrix<S> dpre = dact.array() * c.pre.unaryExpr([](S v) { return gelu_grad(v); }).array();
  linear_bwd(f.up, c.x, dpre, &dx, g.up);
}

// Multi-head attention of query rows over key rows, restricted to the given
// segments. With `self`, keys and values are projected from the query input.
template <typename S>
void attn_fwd(const Attention<S>& a, const Matrix<S>& xq, const Matrix<S>* xkv, const std::vector<Segment>& segs,
              int heads, Matrix<S>& out, AttnCache<S>& c) {
  c.xq = xq;
  const Matrix<S>& kv_in = xkv ? *xkv : xq;
  if (xkv) c.xkv = *xkv;
  linear_fwd(a.q, xq, c.q);
  linear_fwd(a.k, kv_in, c.k);
  linear_fwd(a.v, kv_in, c.v);
  const Index h = xq.cols();
  const Index dh = h / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  c.ctx = Matrix<S>::Zero(xq.rows(), h);
  c.probs.resize(segs.size() * heads);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& sg = segs[s];
    for (int hd = 0; hd < heads; ++hd) {
      Matrix<S>& p = c.probs[s * heads + hd];
      p.noalias() = c.q.block(sg.q0, hd * dh, sg.nq, dh) * c.k.block(sg.k0, hd * dh, sg.nk, dh).transpose();
      p *= scale;
      for (Index i = 0; i < sg.nq; ++i) {
        const Index lim = sg.causal ? std::min(sg.nk, i + 1 + (sg.nk - sg.nq)) : sg.nk;
        auto row = p.row(i).head(lim);
        const S mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        if (lim < sg.nk) p.row(i).tail(sg.nk - lim).setZero();
      }
      c.ctx.block(sg.q0, hd * dh, sg.nq, dh).noalias() = p * c.v.block(sg.k0, hd * dh, sg.nk, dh);
    }
  }
  linear_fwd(a.o, c.ctx, out);
}

template <typename S>
void attn_bwd(const Attention<S>& a, const AttnCache<S>& c, bool self, const std::vector<Segment>& segs, int heads,
              const Matrix<S>& dout, Matrix<S>& dxq, Matrix<S>* dxkv, Attention<S>& g) {
  Matrix<S> dctx;
  linear_bwd(a.o, c.ctx, dout, &dctx, g.o);
  const Index h = c.q.cols();
  const Index dh = h / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> dq = Matrix<S>::Zero(c.q.rows(), h);
  Matrix<S> dk = Matrix<S>::Zero(c.k.rows(), h);
  Matrix<S> dv = Matrix<S>::Zero(c.v.rows(), h);
  Matrix<S> dp, ds;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& sg = segs[s];
    for (int hd = 0; hd < heads; ++hd) {
      const Matrix<S>& p = c.probs[s * heads + hd];
      const auto dc = dctx.block(sg.q0, hd * dh, sg.nq, dh);
      dv.block(sg.k0, hd * dh, sg.nk, dh).noalias() += p.transpose() * dc;
      dp.noalias() = dc * c.v.block(sg.k0, hd * dh, sg.nk, dh).transpose();
      ds.resize(sg.nq, sg.nk);
      for (Index i = 0; i < sg.nq; ++i) {
        const S rs = (p.row(i).array() * dp.row(i).array()).sum();
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - rs);
      }
      ds *= scale;
      dq.block(sg.q0, hd * dh, sg.nq, dh).noalias() += ds * c.k.block(sg.k0, hd * dh, sg.nk, dh);
      dk.block(sg.k0, hd * dh, sg.nk, dh).noalias() += ds.transpose() * c.q.block(sg.q0, hd * dh, sg.nq, dh);
    }
  }
  const Matrix<S>& kv_in = self ? c.xq : c.xkv;
  Matrix<S> dxk, dxv;
  linear_bwd(a.q, c.xq, dq, &dxq, g.q);
  linear_bwd(a.k, kv_in, dk, &dxk, g.k);
  linear_bwd(a.v, kv_in, dv, &dxv, g.v);
  if (self) {
    dxq += dxk + dxv;
  } else {
    *dxkv = dxk + dxv;
  }
}

// Pre-norm residual sublayers shared by decoder and encoder blocks.
template <typename S>
void self_sublayer_fwd(const LayerNorm<S>& norm, const Attention<S>& attn, Matrix<S>& x,
                       const std::vector<Segment>& segs, int heads, BlockCache<S>& c) {
  Matrix<S> n, a;
  ln_fwd(norm, x, n, c.ln_attn);
  attn_fwd(attn, n, static_cast<const Matrix<S>*>(nullptr), segs, heads, a, c.attn);
  x += a;
}

template <typename S>
void ffn_sublayer_fwd(const LayerNorm<S>& norm, const FeedForward<S>& ffn, Matrix<S>& x, BlockCache<S>& c) {
  Matrix<S> n, f;
  ln_fwd(norm, x, n, c.ln_ffn);
  ffn_fwd(ffn, n, f, c.ffn);
  x += f;
}

template <typename S>
void self_sublayer_bwd(const LayerNorm<S>& norm, const Attention<S>& attn, const std::vector<Segment>& segs,
                       int heads, const BlockCache<S>& c, Matrix<S>& dx, LayerNorm<S>& gnorm, Attention<S>& gattn) {
  Matrix<S> dn, dbranch;
  attn_bwd(attn, c.attn, true, segs, heads, dx, dn, static_cast<Matrix<S>*>(nullptr), gattn);
  ln_bwd(norm, c.ln_attn, dn, dbranch, gnorm);
  dx += dbranch;
}

template <typename S>
void ffn_sublayer_bwd(const LayerNorm<S>& norm, const FeedForward<S>& ffn, const BlockCache<S>& c, Matrix<S>& dx,
                      LayerNorm<S>& gnorm, FeedForward<S>& gffn) {
  Matrix<S> dn, dbranch;
  ffn_bwd(ffn, c.ffn, dx, dn, gffn);
  ln_bwd(norm, c.ln_ffn, dn, dbranch, gnorm);
  dx += dbranch;
}

struct Layout {
  int batch, seq_len, m, n_chunks, k;
  Index cross_rows_per_seq() const { return seq_len - m; }
  Index record_rows() const { return 2 * m; }
  Index records() const { return static_cast<Index>(batch) * (n_chunks - 1) * k; }
};

std::vector<Segment> decoder_segments(const Layout& L) {
  std::vector<Segment> segs;
  for (int b = 0; b < L.batch; ++b) {
    const Index r0 = static_cast<Index>(b) * L.seq_len;
    segs.push_back({r0, L.seq_len, r0, L.seq_len, true});
  }
  return segs;
}

std::vector<Segment> encoder_segments(Index records, Index rows) {
  std::vector<Segment> segs;
  for (Index r = 0; r < records; ++r) segs.push_back({r * rows, rows, r * rows, rows, false});
  return segs;
}

// Chunk u >= 1 of sequence b attends to the encoded context of chunk u-1.
std::vector<Segment> cross_segments(const Layout& L) {
  std::vector<Segment> segs;
  const Index per_ctx = static_cast<Index>(L.k) * L.record_rows();
  for (int b = 0; b < L.batch; ++b)
    for (int u = 1; u < L.n_chunks; ++u) {
      const Index q0 = static_cast<Index>(b) * L.cross_rows_per_seq() + static_cast<Index>(u - 1) * L.m;
      const Index nq = std::min<Index>(L.m, L.seq_len - static_cast<Index>(u) * L.m);
      const Index k0 = (static_cast<Index>(b) * (L.n_chunks - 1) + (u - 1)) * per_ctx;
      segs.push_back({q0, nq, k0, per_ctx, false});
    }
  return segs;
}

template <typename S>
Matrix<S> gather_cross_rows(const Matrix<S>& x, const Layout& L) {
  const Index per = L.cross_rows_per_seq();
  Matrix<S> out(per * L.batch, x.cols());
  for (int b = 0; b < L.batch; ++b)
    out.middleRows(b * per, per) = x.middleRows(static_cast<Index>(b) * L.seq_len + L.m, per);
  return out;
}

template <typename S>
void scatter_add_cross_rows(Matrix<S>& x, const Matrix<S>& rows, const Layout& L) {
  const Index per = L.cross_rows_per_seq();
  for (int b = 0; b < L.batch; ++b)
    x.middleRows(static_cast<Index>(b) * L.seq_len + L.m, per) += rows.middleRows(b * per, per);
}

template <typename S>
void check_record(const NeighborRecord& r, int m) {
  if (r.neighbor.size() != m || r.continuation.size() != m)
    throw Error("encode_neighbors: record length must be 2m tokens");
}

// Runs the neighbor encoder over `records` (each 2m rows) into st.encoded.
template <typename S>
void encoder_fwd(const ModelParams<S>& p, const std::vector<const NeighborRecord*>& records, ForwardState<S>& st) {
  const int m = p.cfg.chunk;
  const Index rows = 2 * m;
  std::vector<const NeighborRecord*> distinct;
  st.enc_slot.assign(records.size(), 0);
  Index zero_slot = -1;
  for (std::size_t r = 0; r < records.size(); ++r) {
    check_record<S>(*records[r], m);
    if (records[r]->is_zero()) {
      if (zero_slot < 0) {
        zero_slot = static_cast<Index>(distinct.size());
        distinct.push_back(records[r]);
      }
      st.enc_slot[r] = zero_slot;
    } else {
      st.enc_slot[r] = static_cast<Index>(distinct.size());
      distinct.push_back(records[r]);
    }
  }
  const Index n = static_cast<Index>(distinct.size());
  st.enc_records = static_cast<int>(n);
  st.enc_tokens.assign(static_cast<std::size_t>(n * rows), kPad);
  st.enc_zero.assign(static_cast<std::size_t>(n * rows), false);
  Matrix<S> x = Matrix<S>::Zero(n * rows, p.cfg.width);
  for (Index r = 0; r < n; ++r) {
    const NeighborRecord& rec = *distinct[r];
    for (int j = 0; j < 2 * m; ++j) {
      const bool first = j < m;
      const bool zero = first ? rec.neighbor_zero : rec.continuation_zero;
      const TokenId t = first ? rec.neighbor.tokens[j] : rec.continuation.tokens[j - m];
      const Index row = r * rows + j;
      st.enc_zero[row] = zero;
      if (zero) continue;
      if (t < 0 || t >= p.cfg.vocab) throw Error("encode_neighbors: token id out of range");
      st.enc_tokens[row] = t;
      x.row(row) = p.tok_emb.row(t) + p.enc_pos.row(j);
    }
  }
  const auto segs = encoder_segments(n, rows);
  st.enc.assign(p.encoder.size(), {});
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& E = p.encoder[l];
    self_sublayer_fwd(E.norm_attn, E.attn, x, segs, p.cfg.heads, st.enc[l]);
    ffn_sublayer_fwd(E.norm_ffn, E.ffn, x, st.enc[l]);
  }
  Matrix<S> out;
  ln_fwd(p.enc_norm, x, out, st.enc_ln);
  st.encoded.resize(static_cast<Index>(records.size()) * rows, p.cfg.width);
  for (std::size_t r = 0; r < records.size(); ++r)
    st.encoded.middleRows(static_cast<Index>(r) * rows, rows) = out.middleRows(st.enc_slot[r] * rows, rows);
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / loss / backward

Targets next_token_targets(const Batch& batch) {
  Targets t;
  const std::size_t T = static_cast<std::size_t>(batch.seq_len);
  t.ids.assign(batch.tokens.size() * T, kPad);
  t.weights.assign(batch.tokens.size() * T, 0.0);
  for (std::size_t b = 0; b < batch.tokens.size(); ++b)
    for (std::size_t i = 0; i + 1 < T; ++i) {
      const TokenId next = batch.tokens[b][i + 1];
      t.ids[b * T + i] = next;
      t.weights[b * T + i] = next == kPad ? 0.0 : 1.0;
    }
  return t;
}

template <typename S>
std::vector<Matrix<S>> encode_neighbors(const ModelParams<S>& params, const RetrievedContext& context) {
  if (!params.has_retro) throw Error("encode_neighbors: model has no retro tensors");
  if (static_cast<int>(context.size()) != params.cfg.neighbors)
    throw Error("encode_neighbors: context must hold exactly k records");
  std::vector<const NeighborRecord*> recs;
  for (const auto& r : context) recs.push_back(&r);
  ForwardState<S> st;
  encoder_fwd(params, recs, st);
  std::vector<Matrix<S>> out;
  const Index rows = 2 * params.cfg.chunk;
  for (std::size_t r = 0; r < context.size(); ++r) out.push_back(st.encoded.middleRows(static_cast<Index>(r) * rows, rows));
  return out;
}

template <typename S>
ForwardState<S> forward(const ModelParams<S>& p, const Batch& batch, Gate gate) {
  const auto& cfg = p.cfg;
  const int B = batch.size();
  const int T = batch.seq_len;
  const int m = cfg.chunk;
  if (B < 1) throw Error("forward: empty batch");
  if (T < 1 || T > cfg.max_tokens()) throw Error("forward: sequence length exceeds max_chunks * m");
  const int nc = (T + m - 1) / m;

  ForwardState<S> st;
  st.batch = B;
  st.seq_len = T;
  st.n_chunks = nc;
  st.gate = gate;
  st.tokens.reserve(static_cast<std::size_t>(B) * T);
  for (const auto& seq : batch.tokens) {
    if (static_cast<int>(seq.size()) != T) throw Error("forward: ragged batch");
    for (TokenId t : seq) {
      if (t < 0 || t >= cfg.vocab) throw Error("forward: token id out of range");
      st.tokens.push_back(t);
    }
  }

  const bool cross = gate == Gate::kOn && nc >= 2 && !cfg.cca_layers.empty();
  if (gate == Gate::kOn && nc >= 2 && !p.has_retro) throw Error("forward: gate on needs retro tensors");
  Layout L{B, T, m, nc, cfg.neighbors};
  if (cross) {
    if (static_cast<int>(batch.contexts.size()) != B) throw Error("forward: missing retrieved contexts");
    std::vector<const NeighborRecord*> recs;
    recs.reserve(static_cast<std::size_t>(L.records()));
    for (int b = 0; b < B; ++b) {
      if (static_cast<int>(batch.contexts[b].size()) < nc - 1)
        throw Error("forward: missing retrieved context for a chunk with gate on");
      for (int u = 0; u + 1 < nc; ++u) {
        const auto& ctx = batch.contexts[b][u];
        if (static_cast<int>(ctx.size()) != cfg.neighbors)
          throw Error("forward: retrieved context must hold exactly k records");
        for (const auto& r : ctx) recs.push_back(&r);
      }
    }
    encoder_fwd(p, recs, st);
  }

  Matrix<S> x(static_cast<Index>(B) * T, cfg.width);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < T; ++i) {
      const Index row = static_cast<Index>(b) * T + i;
      x.row(row) = p.tok_emb.row(st.tokens[row]) + p.pos_emb.row(i);
    }

  const auto dsegs = decoder_segments(L);
  const auto csegs = cross ? cross_segments(L) : std::vector<Segment>{};
  st.dec.assign(cfg.layers, {});
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& D = p.layers[l];
    auto& c = st.dec[l];
    self_sublayer_fwd(D.norm_attn, D.self_attn, x, dsegs, cfg.heads, c);
    if (cross && D.cross) {
      c.has_cross = true;
      Matrix<S> xr = gather_cross_rows(x, L);
      Matrix<S> nr, out;
      ln_fwd(D.cross->norm, xr, nr, c.ln_cross);
      attn_fwd(D.cross->attn, nr, &st.encoded, csegs, cfg.heads, out, c.cross);
      scatter_add_cross_rows(x, out, L);
    }
    ffn_sublayer_fwd(D.norm_ffn, D.ffn, x, c);
  }
  ln_fwd(p.final_norm, x, st.final_out, st.final_ln);
  linear_fwd(p.out, st.final_out, st.logits);
  return st;
}

namespace {

template <typename S>
std::size_t weighted_count(const Targets& t, std::size_t rows) {
  if (t.ids.size() != rows || t.weights.size() != rows) throw Error("loss: targets do not match the forward state");
  std::size_t n = 0;
  for (double w : t.weights)
    if (w > 0.0) ++n;
  if (n == 0) throw Error("loss: mask selects no positions");
  return n;
}

}  // namespace

template <typename S>
double loss(const ForwardState<S>& st, const Targets& t) {
  const std::size_t n = weighted_count<S>(t, static_cast<std::size_t>(st.logits.rows()));
  double sum = 0.0;
  for (Index i = 0; i < st.logits.rows(); ++i) {
    const double w = t.weights[i];
    if (w == 0.0) continue;
    const auto row = st.logits.row(i);
    const double mx = static_cast<double>(row.maxCoeff());
    const double lse = mx + std::log((row.template cast<double>().array() - mx).exp().sum());
    sum += w * (lse - static_cast<double>(row(t.ids[i])));
  }
  return sum / static_cast<double>(n);
}

template <typename S>
ModelParams<S> backward(const ModelParams<S>& p, const ForwardState<S>& st, const Targets& t) {
  const auto& cfg = p.cfg;
  const std::size_t n = weighted_count<S>(t, static_cast<std::size_t>(st.logits.rows()));
  ModelParams<S> g = zeros_like(p);

  Matrix<S> dlogits = Matrix<S>::Zero(st.logits.rows(), st.logits.cols());
  for (Index i = 0; i < st.logits.rows(); ++i) {
    const double w = t.weights[i];
    if (w == 0.0) continue;
    auto row = st.logits.row(i);
    const S mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    const S z = e.sum();
    const S scale = static_cast<S>(w / static_cast<double>(n));
    dlogits.row(i) = e / z * scale;
    dlogits(i, t.ids[i]) -= scale;
  }

  Matrix<S> dfinal, dx;
  linear_bwd(p.out, st.final_out, dlogits, &dfinal, g.out);
  ln_bwd(p.final_norm, st.final_ln, dfinal, dx, g.final_norm);

  Layout L{st.batch, st.seq_len, cfg.chunk, st.n_chunks, cfg.neighbors};
  const auto dsegs = decoder_segments(L);
  const bool any_cross = std::any_of(st.dec.begin(), st.dec.end(), [](const auto& c) { return c.has_cross; });
  const auto csegs = any_cross ? cross_segments(L) : std::vector<Segment>{};
  Matrix<S> dencoded;
  if (any_cross) dencoded = Matrix<S>::Zero(st.encoded.rows(), st.encoded.cols());

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& D = p.layers[l];
    auto& G = g.layers[l];
    const auto& c = st.dec[l];
    ffn_sublayer_bwd(D.norm_ffn, D.ffn, c, dx, G.norm_ffn, G.ffn);
    if (c.has_cross) {
      Matrix<S> dout = gather_cross_rows(dx, L);
      Matrix<S> dnr, denc, dxr;
      attn_bwd(D.cross->attn, c.cross, false, csegs, cfg.heads, dout, dnr, &denc, G.cross->attn);
      dencoded += denc;
      ln_bwd(D.cross->norm, c.ln_cross, dnr, dxr, G.cross->norm);
      scatter_add_cross_rows(dx, dxr, L);
    }
    self_sublayer_bwd(D.norm_attn, D.self_attn, dsegs, cfg.heads, c, dx, G.norm_attn, G.self_attn);
  }
  for (int b = 0; b < st.batch; ++b)
    for (int i = 0; i < st.seq_len; ++i) {
      const Index row = static_cast<Index>(b) * st.seq_len + i;
      g.tok_emb.row(st.tokens[row]) += dx.row(row);
      g.pos_emb.row(i) += dx.row(row);
    }

  if (any_cross) {
    const Index rows = 2 * cfg.chunk;
    Matrix<S> ddistinct = Matrix<S>::Zero(static_cast<Index>(st.enc_records) * rows, cfg.width);
    for (std::size_t r = 0; r < st.enc_slot.size(); ++r)
      ddistinct.middleRows(st.enc_slot[r] * rows, rows) += dencoded.middleRows(static_cast<Index>(r) * rows, rows);
    Matrix<S> dxe;
    ln_bwd(p.enc_norm, st.enc_ln, ddistinct, dxe, g.enc_norm);
    const auto esegs = encoder_segments(st.enc_records, rows);
    for (int l = static_cast<int>(p.encoder.size()) - 1; l >= 0; --l) {
      const auto& E = p.encoder[l];
      auto& G = g.encoder[l];
      ffn_sublayer_bwd(E.norm_ffn, E.ffn, st.enc[l], dxe, G.norm_ffn, G.ffn);
      self_sublayer_bwd(E.norm_attn, E.attn, esegs, cfg.heads, st.enc[l], dxe, G.norm_attn, G.attn);
    }
    for (Index row = 0; row < dxe.rows(); ++row) {
      if (st.enc_zero[row]) continue;
      g.tok_emb.row(st.enc_tokens[row]) += dxe.row(row);
      g.enc_pos.row(row % rows) += dxe.row(row);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[8] = {'R', 'T', 'O', 'Y', 'C', 'K', 'P', 'T'};
}

std::vector<char> serialize_checkpoint(const ModelParams<float>& params, bool base_only) {
  const bool retro = params.has_retro && !base_only;
  BinaryWriter w;
  w.bytes(kCkptMagic, sizeof kCkptMagic);
  w.u32(1);
  w.str(config_to_string(params.cfg));
  w.u32(retro ? 1 : 0);
  auto tensors = params.tensors();
  std::uint32_t count = 0;
  for (const auto& t : tensors)
    if (retro || t.group == TensorGroup::kBase) ++count;
  w.u32(count);
  for (const auto& t : tensors) {
    if (!retro && t.group != TensorGroup::kBase) continue;
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.group));
    w.u32(static_cast<std::uint32_t>(t.tensor->rows()));
    w.u32(static_cast<std::uint32_t>(t.tensor->cols()));
    w.floats(reinterpret_cast<const float*>(t.tensor->data()), static_cast<std::size_t>(t.tensor->size()));
  }
  return w.take();
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, bool base_only) {
  write_file(path, serialize_checkpoint(params, base_only));
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  auto data = read_file(path);
  BinaryReader r(data);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCkptMagic, sizeof magic) != 0) throw Error("checkpoint: bad magic in " + path.string());
  if (r.u32() != 1) throw Error("checkpoint: unsupported version");
  const ModelConfig cfg = config_from_string(r.str());
  const bool retro = r.u32() != 0;
  ModelParams<float> p = zero_params<float>(cfg, retro);
  auto tensors = p.tensors();
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) throw Error("checkpoint: tensor count does not match the config");
  for (auto& t : tensors) {
    const std::string name = r.str();
    const auto group = static_cast<TensorGroup>(r.u32());
    const Index rows = r.u32();
    const Index cols = r.u32();
    if (name != t.name || group != t.group || rows != t.tensor->rows() || cols != t.tensor->cols())
      throw Error("checkpoint: unexpected tensor " + name);
    r.floats(t.tensor->data(), static_cast<std::size_t>(t.tensor->size()));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");
  return p;
}

// ---------------------------------------------------------------------------

#define RETROLAB_INSTANTIATE(S)                                                                            \
  template struct ModelParams<S>;                                                                          \
  template ModelParams<S> zero_params<S>(const ModelConfig&, bool);                                        \
  template ModelParams<S> zeros_like<S>(const ModelParams<S>&);                                            \
  template ModelParams<S> init_params<S>(const ModelConfig&, std::uint64_t, const ModelParams<S>*);        \
  template std::vector<Matrix<S>> encode_neighbors<S>(const ModelParams<S>&, const RetrievedContext&);     \
  template ForwardState<S> forward<S>(const ModelParams<S>&, const Batch&, Gate);                          \
  template double loss<S>(const ForwardState<S>&, const Targets&);                                         \
  template ModelParams<S> backward<S>(const ModelParams<S>&, const ForwardState<S>&, const Targets&);

RETROLAB_INSTANTIATE(float)
RETROLAB_INSTANTIATE(double)

template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);

}  // namespace retrolab
