#include "lcf/adapter.hpp"

#include <cstring>

#include "lcf/errors.hpp"

namespace lcf {

void Adapter::track(Tape& tape) {
  for (auto& [name, t] : named_params()) *t = tape.leaf(*t);
}

int64_t Adapter::param_count() const {
  int64_t n = 0;
  for (auto& [name, t] : const_cast<Adapter*>(this)->named_params()) n += t->numel();
  return n;
}

std::vector<std::pair<std::string, const Tensor*>> Adapter::named_params_const() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Adapter*>(this)->named_params()) out.emplace_back(name, t);
  return out;
}

int map_sharer_layer(int recv_layer, int sharer_layers, int recv_layers) {
  if (sharer_layers == recv_layers) return recv_layer;
  return static_cast<int>(static_cast<int64_t>(recv_layer) * sharer_layers / recv_layers);
}

Tensor gather_positions(const Tensor& cache, const std::vector<int>& positions) {
  if (cache.rank() != 4 || cache.dim(0) != 1)
    throw ShapeError("gather_positions: want (1,H,N,D), got " + shape_str(cache.shape));
  int h = cache.dim(1), n = cache.dim(2), d = cache.dim(3);
  Tensor out = Tensor::zeros({1, h, static_cast<int>(positions.size()), d});
  const float* src = cache.ptr();
  float* dst = out.ptr();
  int nr = static_cast<int>(positions.size());
  for (int hh = 0; hh < h; ++hh)
    for (int r = 0; r < nr; ++r) {
      int s = positions[static_cast<size_t>(r)];
      if (s < 0 || s >= n) throw ShapeError("gather_positions: position out of range");
      std::memcpy(dst + (static_cast<int64_t>(hh) * nr + r) * d,
                  src + (static_cast<int64_t>(hh) * n + s) * d, sizeof(float) * static_cast<size_t>(d));
    }
  return out;
}

FusedForward fused_first_token(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                               const TokenSequence& sharer_tokens, const TokenSequence& receiver_prompt,
                               FusePlan plan, AlignStrategy align_strategy,
                               const std::vector<Span>* spans) {
  if (receiver_prompt.size() < 2)
    throw ContractError("fused_first_token: receiver prompt needs at least two tokens");
  PrefillResult sp = prefill_with_cache(sharer, sharer_tokens);
  TokenSequence prefix(receiver_prompt.begin(), receiver_prompt.end() - 1);
  PrefillResult rp = prefill_with_cache(receiver, prefix);

  AlignmentMap align;
  if (adapter.kind() == "lcfx") {
    if (!spans) throw ContractError("fused_first_token: pooled fusion needs spans");
    plan.spans = spans;
  } else if (adapter.kind() != "none") {
    align = build_alignment(static_cast<int>(sharer_tokens.size()), static_cast<int>(prefix.size()),
                            align_strategy);
    plan.align = &align;
  }

  FusedForward out;
  out.cache = adapter.fuse(sp.cache, rp.cache, plan);
  Tensor logits = forward_block(receiver, out.cache, {receiver_prompt.back()});
  out.first_logits = reshape(logits, {receiver.geo.vocab});
  return out;
}

}  // namespace lcf
