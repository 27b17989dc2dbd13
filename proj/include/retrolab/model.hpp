#pragma once

#include "retrolab/retrieval.hpp"
#include "retrolab/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace retrolab {

struct ModelConfig {
  int vocab = 256;
  int layers = 4;
  int width = 64;
  int heads = 4;
  int chunk = 16;         // m
  int neighbors = 2;      // k
  int max_chunks = 4;
  int encoder_layers = 1;
  int ffn_mult = 4;
  std::vector<int> cca_layers = default_cca(4);  // 1-based decoder layers with cross-attention

  static std::vector<int> default_cca(int layers);
  int max_tokens() const { return max_chunks * chunk; }
  bool has_cca(int layer) const;  // 0-based layer index
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TensorGroup : std::uint32_t { kBase = 0, kRetro = 1 };
enum class Gate { kOn, kOff };

template <typename S>
struct Linear {
  Matrix<S> w;  // [in, out]
  Matrix<S> b;  // [1, out]
};

template <typename S>
struct LayerNorm {
  Matrix<S> gain;  // [1, h]
  Matrix<S> bias;  // [1, h]
};

template <typename S>
struct Attention {
  Linear<S> q, k, v, o;
};

template <typename S>
struct FeedForward {
  Linear<S> up, down;
};

template <typename S>
struct CrossBlock {
  LayerNorm<S> norm;
  Attention<S> attn;
};

template <typename S>
struct DecoderLayer {
  LayerNorm<S> norm_attn;
  Attention<S> self_attn;
  std::optional<CrossBlock<S>> cross;  // retro
  LayerNorm<S> norm_ffn;
  FeedForward<S> ffn;
};

template <typename S>
struct EncoderLayer {
  LayerNorm<S> norm_attn;
  Attention<S> attn;
  LayerNorm<S> norm_ffn;
  FeedForward<S> ffn;
};

template <typename S>
struct TensorRef {
  std::string name;
  Matrix<S>* tensor;
  TensorGroup group;
};

template <typename S>
struct ConstTensorRef {
  std::string name;
  const Matrix<S>* tensor;
  TensorGroup group;
};

/// Every trainable tensor of the decoder, the neighbor encoder and the
/// cross-attention blocks. Gradients use the same type.
template <typename S>
struct ModelParams {
  ModelConfig cfg;
  bool has_retro = true;

  Matrix<S> tok_emb;  // [V, h], shared with the neighbor encoder
  Matrix<S> pos_emb;  // [max_tokens, h]
  std::vector<DecoderLayer<S>> layers;
  LayerNorm<S> final_norm;
  Linear<S> out;

  Matrix<S> enc_pos;  // [2m, h]
  std::vector<EncoderLayer<S>> encoder;
  LayerNorm<S> enc_norm;

  /// Tensors in a fixed order; retro tensors are omitted when !has_retro.
  std::vector<TensorRef<S>> tensors();
  std::vector<ConstTensorRef<S>> tensors() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
};

/// Allocates every tensor of `cfg`, zero-filled.
template <typename S>
ModelParams<S> zero_params(const ModelConfig& cfg, bool with_retro = true);

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& p);

/// Seeded N(0, 0.02) weights (residual output projections scaled by
/// 1/sqrt(2L)), unit norm gains, zero biases. When `base` is given its
/// base-group tensors are copied verbatim; retro tensors are always drawn
/// from the seed, so they do not depend on `base`.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed, const ModelParams<S>* base = nullptr);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p);

/// Sequences of equal length plus, for every chunk u that is followed by
/// another chunk, its retrieved context Ret(C_u) (0-based: contexts[b][u]
/// conditions chunk u+1; chunk 0 never cross-attends).
struct Batch {
  int seq_len = 0;
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::vector<RetrievedContext>> contexts;

  int size() const { return static_cast<int>(tokens.size()); }
  int num_chunks(int m) const { return (seq_len + m - 1) / m; }
};

/// Per-position targets and loss weights, flattened [B * seq_len].
struct Targets {
  std::vector<TokenId> ids;
  std::vector<double> weights;
};

/// Next-token targets; a position is weighted 1 when its target is a real
/// (non-PAD) token.
Targets next_token_targets(const Batch& batch);

template <typename S>
struct LnCache {
  Matrix<S> xhat;
  Vector<S> rstd;
};

template <typename S>
struct AttnCache {
  Matrix<S> xq, xkv, q, k, v, ctx;
  std::vector<Matrix<S>> probs;
};

template <typename S>
struct FfnCache {
  Matrix<S> x, pre, act;
};

template <typename S>
struct BlockCache {
  LnCache<S> ln_attn, ln_ffn, ln_cross;
  AttnCache<S> attn, cross;
  FfnCache<S> ffn;
  bool has_cross = false;
};

template <typename S>
struct ForwardState {
  int batch = 0;
  int seq_len = 0;
  int n_chunks = 0;
  Gate gate = Gate::kOff;
  Matrix<S> logits;        // [B * seq_len, V]
  std::vector<BlockCache<S>> dec;
  LnCache<S> final_ln;
  Matrix<S> final_out;
  std::vector<TokenId> tokens;  // flattened input ids
  // neighbor encoder; all-zero records share one encoded copy
  int enc_records = 0;                 // distinct records actually encoded
  std::vector<Index> enc_slot;         // per context record: its distinct record
  std::vector<TokenId> enc_tokens;     // [enc_records * 2m], kPad where the half is zero
  std::vector<bool> enc_zero;          // per encoder row
  std::vector<BlockCache<S>> enc;
  LnCache<S> enc_ln;
  Matrix<S> encoded;       // [records * 2m, h], expanded per context record
};

/// Encodes each neighbor++continuation (2m tokens) of one retrieved context.
/// Zero halves enter the encoder as zero vectors. Returns k matrices [2m, h].
template <typename S>
std::vector<Matrix<S>> encode_neighbors(const ModelParams<S>& params, const RetrievedContext& context);

template <typename S>
ForwardState<S> forward(const ModelParams<S>& params, const Batch& batch, Gate gate);

/// Sum of weighted NLL over positions divided by the number of positions
/// with a positive weight.
template <typename S>
double loss(const ForwardState<S>& state, const Targets& targets);

/// Exact gradient of `loss` with respect to every tensor.
template <typename S>
ModelParams<S> backward(const ModelParams<S>& params, const ForwardState<S>& state, const Targets& targets);

/// Checkpoint: magic "RTOYCKPT", config block, then a tensor table of
/// (name, group tag, rows, cols, float32 data). Only base tensors are written
/// when `base_only` is set or the model has no retro tensors.
void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, bool base_only = false);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);
std::vector<char> serialize_checkpoint(const ModelParams<float>& params, bool base_only = false);

std::string config_to_string(const ModelConfig& cfg);
ModelConfig config_from_string(const std::string& text);

}  // namespace retrolab
