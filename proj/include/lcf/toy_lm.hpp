#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lcf/tensor.hpp"

namespace lcf {

using TokenSequence = std::vector<int>;

struct ModelGeometry {
  int layers = 2;
  int hidden = 32;
  int q_heads = 4;
  int kv_heads = 2;
  int head_dim = 8;
  int vocab = 64;
  int max_seq = 256;
  int mlp_inner = 64;

  void validate() const;
  int gqa_group() const { return q_heads / kv_heads; }
};

// Per-layer key/value tensors of a forward pass, each (1, H_kv, N, D) with
// keys stored post-rotary. All layers share N; appending never rewrites
// existing positions.
struct KVCache {
  struct LayerKV {
    Tensor k, v;
  };
  std::vector<LayerKV> layers;

  int seq_len() const { return layers.empty() || !layers[0].k.defined() ? 0 : layers[0].k.dim(2); }
};

// Minimal frozen decoder-only transformer: pre-RMSNorm blocks, grouped-query
// attention with rotary positions, SiLU-gated MLP, untied unembedding.
struct ToyLm {
  ModelGeometry geo;

  struct Layer {
    Tensor attn_norm, wq, wk, wv, wo;
    Tensor mlp_norm, w_gate, w_up, w_down;
  };
  Tensor tok_embed;  // (V, h)
  std::vector<Layer> layers;
  Tensor final_norm;
  Tensor unembed;  // (V, h), zero-initialized so a fresh model has uniform logits

  static ToyLm init(const ModelGeometry& geo, uint64_t seed);

  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;

  // Same weights registered as leaves on a tape; data buffers are shared, so
  // optimizer writes through the view update this model.
  ToyLm tracked_view(Tape& tape) const;

  // FNV-1a over all weight bytes; used by the frozen-model guarantee.
  uint64_t weights_hash() const;
};

struct PrefillResult {
  Tensor final_logits;  // (V)
  KVCache cache;
};

// Runs the prompt through the model, returning the last position's logits and
// the populated cache.
PrefillResult prefill_with_cache(const ToyLm& lm, const TokenSequence& tokens);

// Forwards a block of tokens on top of (and appending to) `cache`, starting
// at position cache.seq_len(). Returns one row of logits per input token.
// Gradients flow through cache tensors when they are tape-tracked.
Tensor forward_block(const ToyLm& lm, KVCache& cache, const TokenSequence& tokens);

// Greedy argmax decoding from the current cache and logits. Stops after
// max_new tokens or when stop_id would be emitted (stop_id excluded from the
// result; pass -1 to disable). The cache is extended in place.
TokenSequence decode_greedy(const ToyLm& lm, KVCache& cache, Tensor last_logits, int max_new,
                            int stop_id);

// Index of the highest logit among the choice ids; ties go to the lowest index.
int mcq_logit_score(const Tensor& final_logits, const std::vector<int>& choice_ids);

int argmax_index(const Tensor& logits);

}  // namespace lcf
