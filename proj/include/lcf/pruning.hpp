#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "lcf/adapter.hpp"

namespace lcf {

// Accuracy of the adapter restricted to a retained layer set, on a fixed,
// deterministic eval set.
using PruneEvalFn = std::function<double(const std::vector<int>& retained_layers)>;

struct LayerReport {
  int layer = 0;
  float gate_logit_k = 0.0f;
  float gate_logit_v = 0.0f;
  bool dead = false;       // both gate logits non-positive
  double importance = 0.0; // accuracy(alive) - accuracy(alive minus this layer)
  bool harmful = false;    // importance < 0
  bool retained = false;
};

// Pass 1: layers whose trained gate logits are non-positive for both K and V
// contribute nothing under the hard evaluation gate.
std::vector<int> gate_audit(const Adapter& adapter);

// Single-layer ablation importance against the full alive set. Gate-dead
// layers score exactly 0 without evaluation.
double ablation_importance(const Adapter& adapter, const PruneEvalFn& eval_fn, int layer);

// Passes 1-3: gate audit, harmful-layer removal, top-K by importance
// (ties break to the lower layer index). The leave-one-out sweep fans out
// across layers; results merge in layer order.
std::vector<LayerReport> prune_three_pass(const Adapter& adapter, const PruneEvalFn& eval_fn,
                                          int top_k);

// Applies the selection rule to precomputed reports.
std::vector<int> select_layers(const std::vector<LayerReport>& reports, int top_k);

// Clone with every non-retained layer physically removed.
std::unique_ptr<Adapter> pruned_copy(const Adapter& adapter, const std::vector<int>& retained);

}  // namespace lcf
