#include "lcf/lcfx_pool.hpp"

#include <cmath>
#include <cstdio>

#include "lcf/errors.hpp"

namespace lcf {

SpanSchemeKind span_scheme_from(const std::string& name) {
  if (name == "natural") return SpanSchemeKind::kNatural;
  if (name == "token_window") return SpanSchemeKind::kTokenWindow;
  if (name == "halves") return SpanSchemeKind::kHalves;
  if (name == "single") return SpanSchemeKind::kSingle;
  throw InputError("unknown span scheme '" + name + "'");
}

std::string span_scheme_name(SpanSchemeKind k) {
  switch (k) {
    case SpanSchemeKind::kNatural: return "natural";
    case SpanSchemeKind::kTokenWindow: return "token_window";
    case SpanSchemeKind::kHalves: return "halves";
    case SpanSchemeKind::kSingle: return "single";
  }
  return "?";
}

namespace {

void validate_natural(int len, const std::vector<Span>& spans) {
  if (spans.empty()) throw ContractError("partition_spans: natural scheme needs supplied boundaries");
  int cursor = 0;
  for (const Span& s : spans) {
    if (s.len() < 1) throw ContractError("partition_spans: empty span");
    if (s.begin != cursor) throw ContractError("partition_spans: natural spans must tile contiguously");
    cursor = s.end;
  }
  if (cursor != len) throw ContractError("partition_spans: natural spans do not cover the sharer sequence");
}

}  // namespace

SpanScheme partition_spans(int sharer_len, const SpanSchemeSpec& spec,
                           const std::vector<Span>& natural_spans) {
  if (sharer_len < 1) throw ContractError("partition_spans: sharer length must be >= 1");
  SpanScheme out;
  out.spec = spec;
  switch (spec.kind) {
    case SpanSchemeKind::kSingle:
      out.spans.push_back({0, sharer_len});
      break;
    case SpanSchemeKind::kNatural:
      validate_natural(sharer_len, natural_spans);
      out.spans = natural_spans;
      break;
    case SpanSchemeKind::kHalves: {
      validate_natural(sharer_len, natural_spans);
      for (const Span& s : natural_spans) {
        if (s.len() < 2) {
          out.spans.push_back(s);
          continue;
        }
        int mid = s.begin + s.len() / 2;
        out.spans.push_back({s.begin, mid});
        out.spans.push_back({mid, s.end});
      }
      break;
    }
    case SpanSchemeKind::kTokenWindow: {
      if (spec.window < 1) throw ContractError("partition_spans: window must be >= 1");
      if (spec.overlap < 0 || spec.overlap >= spec.window)
        throw ContractError("partition_spans: overlap must be in [0, window)");
      int start = 0;
      while (true) {
        int end = std::min(start + spec.window, sharer_len);
        out.spans.push_back({start, end});
        if (end >= sharer_len) break;
        start += spec.window - spec.overlap;
      }
      break;
    }
  }
  return out;
}

namespace {

// Shared attention-pooling step: a per-head query reads a (H, M, D) block of
// keys and the softmax weights combine keys and values alike.
std::pair<Tensor, Tensor> attn_pool(const Tensor& query, const Tensor& k3, const Tensor& v3) {
  int heads = k3.dim(0), d = k3.dim(2);
  Tensor q3 = reshape(query, {heads, 1, d});
  Tensor scores = mul_scalar(matmul_nt(q3, k3), 1.0f / std::sqrt(static_cast<float>(d)));
  Tensor w = softmax_lastdim(scores);  // (H, 1, M)
  return {matmul(w, k3), matmul(w, v3)};
}

}  // namespace

std::pair<Tensor, Tensor> pool_within_spans(const Tensor& q_base, const Tensor& k, const Tensor& v,
                                            const std::vector<Span>& spans) {
  if (k.rank() != 4 || k.dim(0) != 1) throw ShapeError("pool_within_spans: want (1,H,N,D) cache");
  int heads = k.dim(1), n = k.dim(2), d = k.dim(3);
  if (q_base.shape != Shape{heads, d})
    throw ShapeError("pool_within_spans: query " + shape_str(q_base.shape) + " vs cache heads/dim");
  if (spans.empty()) throw ContractError("pool_within_spans: no spans");
  Tensor k3 = reshape(k, {heads, n, d});
  Tensor v3 = reshape(v, {heads, n, d});
  std::vector<Tensor> ks, vs;
  ks.reserve(spans.size());
  vs.reserve(spans.size());
  for (const Span& s : spans) {
    if (s.len() < 1 || s.begin < 0 || s.end > n)
      throw ContractError("pool_within_spans: span [" + std::to_string(s.begin) + "," +
                          std::to_string(s.end) + ") invalid for cached length " + std::to_string(n));
    auto [kp, vp] = attn_pool(q_base, slice(k3, 1, s.begin, s.len()), slice(v3, 1, s.begin, s.len()));
    ks.push_back(kp);
    vs.push_back(vp);
  }
  int p = static_cast<int>(spans.size());
  return {reshape(concat(ks, 1), {1, heads, p, d}), reshape(concat(vs, 1), {1, heads, p, d})};
}

std::pair<Tensor, Tensor> pool_across_spans(const Tensor& q_layer, const Tensor& k_spans,
                                            const Tensor& v_spans) {
  if (k_spans.rank() != 4 || k_spans.dim(0) != 1)
    throw ShapeError("pool_across_spans: want (1,H,P,D) span summaries");
  int heads = k_spans.dim(1), p = k_spans.dim(2), d = k_spans.dim(3);
  if (p < 1) throw ContractError("pool_across_spans: need at least one span");
  if (q_layer.shape != Shape{heads, d})
    throw ShapeError("pool_across_spans: query " + shape_str(q_layer.shape) + " vs summary heads/dim");
  auto [ks, vs] = attn_pool(q_layer, reshape(k_spans, {heads, p, d}), reshape(v_spans, {heads, p, d}));
  return {reshape(ks, {1, heads, 1, d}), reshape(vs, {1, heads, 1, d})};
}

LcfxAdapter LcfxAdapter::init(const LcfConfig& cfg, uint64_t seed) {
  cfg.validate();
  LcfxAdapter a;
  static_cast<LcfAdapter&>(a) = LcfAdapter::init(cfg, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL, Rng::kInit);
  a.pool_.heads = cfg.sharer_kv_heads;
  a.pool_.head_dim = cfg.sharer_head_dim;
  a.pool_.q_base.resize(static_cast<size_t>(cfg.recv_layers));
  a.pool_.q_layer.resize(static_cast<size_t>(cfg.recv_layers));
  for (int i = 0; i < cfg.recv_layers; ++i) {
    a.pool_.q_base[static_cast<size_t>(i)] = init_kaiming_scaled(
        {cfg.sharer_kv_heads, cfg.sharer_head_dim}, cfg.sharer_head_dim, cfg.pool_query_scale, rng);
    a.pool_.q_layer[static_cast<size_t>(i)] = init_kaiming_scaled(
        {cfg.sharer_kv_heads, cfg.sharer_head_dim}, cfg.sharer_head_dim, cfg.pool_query_scale, rng);
  }
  return a;
}

void LcfxAdapter::drop_layer(int layer) {
  LcfAdapter::drop_layer(layer);
  if (layer >= 0 && layer < static_cast<int>(pool_.q_base.size())) {
    pool_.q_base[static_cast<size_t>(layer)] = Tensor();
    pool_.q_layer[static_cast<size_t>(layer)] = Tensor();
  }
}

std::vector<std::pair<std::string, Tensor*>> LcfxAdapter::named_params() {
  auto out = LcfAdapter::named_params();
  char buf[32];
  for (int i = 0; i < static_cast<int>(pool_.q_base.size()); ++i) {
    if (!layer_present(i)) continue;
    std::snprintf(buf, sizeof(buf), "pool.%02d.", i);
    out.emplace_back(std::string(buf) + "q_base", &pool_.q_base[static_cast<size_t>(i)]);
    out.emplace_back(std::string(buf) + "q_layer", &pool_.q_layer[static_cast<size_t>(i)]);
  }
  return out;
}

std::unique_ptr<Adapter> LcfxAdapter::clone() const { return std::make_unique<LcfxAdapter>(*this); }

std::pair<Tensor, Tensor> LcfxAdapter::pooled_summary(int layer_idx, const KVCache& sharer,
                                                      const std::vector<Span>& spans) const {
  int sl = map_sharer_layer(layer_idx, static_cast<int>(sharer.layers.size()), cfg_.recv_layers);
  const auto& skv = sharer.layers[static_cast<size_t>(sl)];
  auto [kt, vt] = pool_within_spans(pool_.q_base[static_cast<size_t>(layer_idx)], skv.k, skv.v, spans);
  return pool_across_spans(pool_.q_layer[static_cast<size_t>(layer_idx)], kt, vt);
}

KVCache LcfxAdapter::fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const {
  if (static_cast<int>(receiver.layers.size()) != cfg_.recv_layers)
    throw ShapeError("lcfx fuse: receiver cache has " + std::to_string(receiver.layers.size()) +
                     " layers, adapter expects " + std::to_string(cfg_.recv_layers));
  if (!plan.spans || plan.spans->empty()) throw ContractError("lcfx fuse: span list required");
  const int n = receiver.seq_len();
  const int hw = pool_.heads * pool_.head_dim;

  KVCache out;
  out.layers.resize(receiver.layers.size());
  for (int li = 0; li < cfg_.recv_layers; ++li) {
    const auto& rkv = receiver.layers[static_cast<size_t>(li)];
    if (!layer_present(li)) {
      out.layers[static_cast<size_t>(li)] = rkv;
      continue;
    }
    auto [ks, vs] = pooled_summary(li, sharer, *plan.spans);
    Tensor row = concat({reshape(ks, {1, hw}), reshape(vs, {1, hw})}, -1);
    Tensor rows = broadcast_rows(row, n);  // identical summary at every receiver position
    auto [fk, fv] = fuse_layer(li, rows, rkv.k, rkv.v, plan);
    out.layers[static_cast<size_t>(li)] = {fk, fv};
  }
  return out;
}

}  // namespace lcf
