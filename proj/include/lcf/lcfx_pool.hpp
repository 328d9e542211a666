#pragma once

#include "lcf/lcf_projector.hpp"

namespace lcf {

enum class SpanSchemeKind { kNatural, kTokenWindow, kHalves, kSingle };

SpanSchemeKind span_scheme_from(const std::string& name);
std::string span_scheme_name(SpanSchemeKind k);

struct SpanSchemeSpec {
  SpanSchemeKind kind = SpanSchemeKind::kNatural;
  int window = 0;   // token_window only
  int overlap = 0;  // token_window only
};

// Contiguous [begin, end) ranges covering every sharer token at least once;
// overlap occurs only for token windows.
struct SpanScheme {
  SpanSchemeSpec spec;
  std::vector<Span> spans;
  int count() const { return static_cast<int>(spans.size()); }
};

// natural/halves take the task's supplied boundaries; token_window tiles with
// stride window-overlap, last span clamped; single is one span over everything.
SpanScheme partition_spans(int sharer_len, const SpanSchemeSpec& spec,
                           const std::vector<Span>& natural_spans = {});

// Two learned queries per receiver layer, shaped like one head-row of the
// pooled (sharer) cache. Parameter count is independent of the span count.
struct PoolParams {
  int heads = 0;
  int head_dim = 0;
  std::vector<Tensor> q_base;   // per layer, (H, D)
  std::vector<Tensor> q_layer;  // per layer, (H, D)
};

// Stage 1: within each span, one query attends over that span's keys and
// emits a key-value summary; the same query is reused for every span.
// k, v: (1, H, N, D) -> (1, H, P, D) each.
std::pair<Tensor, Tensor> pool_within_spans(const Tensor& q_base, const Tensor& k, const Tensor& v,
                                            const std::vector<Span>& spans);

// Stage 2: aggregates the P span summaries into one per-head summary,
// (1, H, P, D) -> (1, H, 1, D) each.
std::pair<Tensor, Tensor> pool_across_spans(const Tensor& q_layer, const Tensor& k_spans,
                                            const Tensor& v_spans);

// Projector plus sharer-side hierarchical pooling: the position-free summary
// replaces aligned sharer tokens, broadcast to every receiver position.
class LcfxAdapter : public LcfAdapter {
 public:
  LcfxAdapter() = default;
  static LcfxAdapter init(const LcfConfig& cfg, uint64_t seed);

  std::string kind() const override { return "lcfx"; }
  void drop_layer(int layer) override;
  std::vector<std::pair<std::string, Tensor*>> named_params() override;
  std::unique_ptr<Adapter> clone() const override;
  KVCache fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const override;

  PoolParams& pool() { return pool_; }
  const PoolParams& pool() const { return pool_; }

  // Per-layer pooled summary (K*, V*), each (1, H, 1, D).
  std::pair<Tensor, Tensor> pooled_summary(int layer_idx, const KVCache& sharer,
                                           const std::vector<Span>& spans) const;

 private:
  PoolParams pool_;
};

}  // namespace lcf
