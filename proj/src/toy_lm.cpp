#include "lcf/toy_lm.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "lcf/errors.hpp"

namespace lcf {

namespace {
constexpr float kNormEps = 1e-5f;
constexpr float kRopeTheta = 10000.0f;
constexpr float kMaskNegInf = -1e30f;
}  // namespace

void ModelGeometry::validate() const {
  if (layers < 1 || hidden < 1 || q_heads < 1 || kv_heads < 1 || head_dim < 1 || vocab < 2 ||
      max_seq < 1 || mlp_inner < 1)
    throw ContractError("ModelGeometry: all fields must be positive");
  if (q_heads % kv_heads != 0)
    throw ContractError("ModelGeometry: q_heads must be a multiple of kv_heads");
  if (hidden != q_heads * head_dim)
    throw ContractError("ModelGeometry: hidden must equal q_heads * head_dim");
  if (head_dim % 2 != 0) throw ContractError("ModelGeometry: head_dim must be even for rotary positions");
}

ToyLm ToyLm::init(const ModelGeometry& geo, uint64_t seed) {
  geo.validate();
  ToyLm lm;
  lm.geo = geo;
  Rng rng(seed, Rng::kInit);
  const int h = geo.hidden;
  const int kvw = geo.kv_heads * geo.head_dim;
  // Residual-branch outputs get a depth-scaled init; the unembedding starts
  // at zero so an untrained model emits exactly uniform logits.
  const float base = 0.5f;
  const float resid = base / std::sqrt(2.0f * geo.layers);
  lm.tok_embed = init_kaiming_scaled({geo.vocab, h}, h, 1.0f, rng);
  lm.layers.resize(static_cast<size_t>(geo.layers));
  for (auto& l : lm.layers) {
    l.attn_norm = Tensor::full({h}, 1.0f);
    l.wq = init_kaiming_scaled({h, h}, h, base, rng);
    l.wk = init_kaiming_scaled({kvw, h}, h, base, rng);
    l.wv = init_kaiming_scaled({kvw, h}, h, base, rng);
    l.wo = init_kaiming_scaled({h, h}, h, resid, rng);
    l.mlp_norm = Tensor::full({h}, 1.0f);
    l.w_gate = init_kaiming_scaled({geo.mlp_inner, h}, h, base, rng);
    l.w_up = init_kaiming_scaled({geo.mlp_inner, h}, h, base, rng);
    l.w_down = init_kaiming_scaled({h, geo.mlp_inner}, geo.mlp_inner, resid, rng);
  }
  lm.final_norm = Tensor::full({h}, 1.0f);
  lm.unembed = Tensor::zeros({geo.vocab, h});
  return lm;
}

std::vector<std::pair<std::string, Tensor*>> ToyLm::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed", &tok_embed);
  char buf[32];
  for (size_t i = 0; i < layers.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "layer.%02zu.", i);
    std::string p(buf);
    Layer& l = layers[i];
    out.emplace_back(p + "attn_norm", &l.attn_norm);
    out.emplace_back(p + "wq", &l.wq);
    out.emplace_back(p + "wk", &l.wk);
    out.emplace_back(p + "wv", &l.wv);
    out.emplace_back(p + "wo", &l.wo);
    out.emplace_back(p + "mlp_norm", &l.mlp_norm);
    out.emplace_back(p + "w_gate", &l.w_gate);
    out.emplace_back(p + "w_up", &l.w_up);
    out.emplace_back(p + "w_down", &l.w_down);
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("unembed", &unembed);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ToyLm::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ToyLm*>(this)->named_params()) out.emplace_back(name, t);
  return out;
}

ToyLm ToyLm::tracked_view(Tape& tape) const {
  ToyLm view = *this;
  for (auto& [name, t] : view.named_params()) *t = tape.leaf(*t);
  return view;
}

uint64_t ToyLm::weights_hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (auto& [name, t] : named_params()) {
    for (char c : name) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    const auto* bytes = reinterpret_cast<const uint8_t*>(t->ptr());
    size_t n = static_cast<size_t>(t->numel()) * sizeof(float);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

namespace {

// Causal mask for a block of `t` new positions on top of `cached` old ones:
// query row i may see absolute positions <= cached + i.
Tensor causal_mask(int t, int cached) {
  Tensor m = Tensor::zeros({t, cached + t});
  float* p = m.ptr();
  int s = cached + t;
  for (int i = 0; i < t; ++i)
    for (int j = cached + i + 1; j < s; ++j) p[static_cast<int64_t>(i) * s + j] = kMaskNegInf;
  return m;
}

}  // namespace

Tensor forward_block(const ToyLm& lm, KVCache& cache, const TokenSequence& tokens) {
  const ModelGeometry& g = lm.geo;
  if (tokens.empty()) throw ContractError("forward_block: empty token block");
  for (int id : tokens)
    if (id < 0 || id >= g.vocab) throw InputError("forward_block: token id " + std::to_string(id) + " outside vocabulary");
  if (cache.layers.empty()) cache.layers.resize(static_cast<size_t>(g.layers));
  if (static_cast<int>(cache.layers.size()) != g.layers)
    throw ShapeError("forward_block: cache has " + std::to_string(cache.layers.size()) + " layers, model has " +
                     std::to_string(g.layers));
  const int t = static_cast<int>(tokens.size());
  const int cached = cache.seq_len();
  if (cached + t > g.max_seq) throw InputError("forward_block: sequence exceeds max length");
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(g.head_dim));
  Tensor mask = causal_mask(t, cached);

  Tensor x = gather_rows(lm.tok_embed, tokens);  // (T, h)
  for (int li = 0; li < g.layers; ++li) {
    const ToyLm::Layer& l = lm.layers[static_cast<size_t>(li)];
    Tensor xn = rms_norm(x, l.attn_norm, kNormEps);
    Tensor q = rope(seq_to_heads(linear(xn, l.wq), g.q_heads), cached, kRopeTheta);
    Tensor k = rope(seq_to_heads(linear(xn, l.wk), g.kv_heads), cached, kRopeTheta);
    Tensor v = seq_to_heads(linear(xn, l.wv), g.kv_heads);

    KVCache::LayerKV& ckv = cache.layers[static_cast<size_t>(li)];
    Tensor kfull = ckv.k.defined() ? concat({ckv.k, k}, 2) : k;
    Tensor vfull = ckv.v.defined() ? concat({ckv.v, v}, 2) : v;
    ckv.k = kfull;
    ckv.v = vfull;

    Tensor kq = repeat_heads(kfull, g.gqa_group());
    Tensor vq = repeat_heads(vfull, g.gqa_group());
    Tensor scores = add_mask(mul_scalar(matmul_nt(q, kq), inv_sqrt_d), mask);
    Tensor ctx = heads_to_seq(matmul(softmax_lastdim(scores), vq));  // (T, h)
    x = add(x, linear(ctx, l.wo));

    Tensor xm = rms_norm(x, l.mlp_norm, kNormEps);
    Tensor gated = mul(silu(linear(xm, l.w_gate)), linear(xm, l.w_up));
    x = add(x, linear(gated, l.w_down));
  }
  return linear(rms_norm(x, lm.final_norm, kNormEps), lm.unembed);  // (T, V)
}

PrefillResult prefill_with_cache(const ToyLm& lm, const TokenSequence& tokens) {
  if (tokens.empty()) throw ContractError("prefill_with_cache: prompt must be non-empty");
  PrefillResult out;
  Tensor logits = forward_block(lm, out.cache, tokens);
  int t = logits.dim(0);
  out.final_logits = reshape(slice(logits, 0, t - 1, 1), {lm.geo.vocab});
  return out;
}

int argmax_index(const Tensor& logits) {
  const float* p = logits.ptr();
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.numel()); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

TokenSequence decode_greedy(const ToyLm& lm, KVCache& cache, Tensor last_logits, int max_new,
                            int stop_id) {
  if (cache.seq_len() == 0) throw ContractError("decode_greedy: cache is empty");
  TokenSequence out;
  for (int i = 0; i < max_new; ++i) {
    int id = argmax_index(last_logits);
    if (id == stop_id) break;
    out.push_back(id);
    if (i + 1 == max_new) break;
    Tensor logits = forward_block(lm, cache, {id});
    last_logits = reshape(logits, {lm.geo.vocab});
  }
  return out;
}

int mcq_logit_score(const Tensor& final_logits, const std::vector<int>& choice_ids) {
  if (choice_ids.size() < 2) throw ContractError("mcq_logit_score: need at least two choices");
  std::set<int> uniq(choice_ids.begin(), choice_ids.end());
  if (uniq.size() != choice_ids.size()) throw InputError("mcq_logit_score: duplicate choice ids");
  const float* p = final_logits.ptr();
  int v = static_cast<int>(final_logits.numel());
  int best = 0;
  for (size_t i = 0; i < choice_ids.size(); ++i) {
    int id = choice_ids[i];
    if (id < 0 || id >= v) throw InputError("mcq_logit_score: choice id outside vocabulary");
    if (p[id] > p[choice_ids[static_cast<size_t>(best)]]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace lcf
