#include "lcf/pruning.hpp"

#include <algorithm>

#include "lcf/errors.hpp"
#include "lcf/threading.hpp"

namespace lcf {

std::vector<int> gate_audit(const Adapter& adapter) {
  std::vector<int> dead;
  for (int i = 0; i < adapter.num_layers(); ++i) {
    if (!adapter.layer_present(i)) continue;
    auto [gk, gv] = adapter.gate_logits(i);
    if (gk <= 0.0f && gv <= 0.0f) dead.push_back(i);
  }
  return dead;
}

namespace {

std::vector<int> alive_layers(const Adapter& adapter) {
  std::vector<int> dead = gate_audit(adapter);
  std::vector<int> alive;
  for (int i = 0; i < adapter.num_layers(); ++i) {
    if (!adapter.layer_present(i)) continue;
    if (std::find(dead.begin(), dead.end(), i) == dead.end()) alive.push_back(i);
  }
  return alive;
}

std::vector<int> without(const std::vector<int>& set, int layer) {
  std::vector<int> out;
  out.reserve(set.size());
  for (int l : set)
    if (l != layer) out.push_back(l);
  return out;
}

}  // namespace

double ablation_importance(const Adapter& adapter, const PruneEvalFn& eval_fn, int layer) {
  auto [gk, gv] = adapter.gate_logits(layer);
  if (!adapter.layer_present(layer) || (gk <= 0.0f && gv <= 0.0f)) return 0.0;
  std::vector<int> alive = alive_layers(adapter);
  double base = eval_fn(alive);
  return base - eval_fn(without(alive, layer));
}

std::vector<int> select_layers(const std::vector<LayerReport>& reports, int top_k) {
  if (top_k < 0) throw ContractError("select_layers: top_k must be >= 0");
  std::vector<const LayerReport*> candidates;
  for (const LayerReport& r : reports)
    if (!r.dead && !r.harmful) candidates.push_back(&r);
  std::stable_sort(candidates.begin(), candidates.end(), [](const LayerReport* a, const LayerReport* b) {
    if (a->importance != b->importance) return a->importance > b->importance;
    return a->layer < b->layer;
  });
  std::vector<int> retained;
  for (const LayerReport* r : candidates) {
    if (static_cast<int>(retained.size()) >= top_k) break;
    retained.push_back(r->layer);
  }
  std::sort(retained.begin(), retained.end());
  return retained;
}

std::vector<LayerReport> prune_three_pass(const Adapter& adapter, const PruneEvalFn& eval_fn,
                                          int top_k) {
  std::vector<int> alive = alive_layers(adapter);
  double base = eval_fn(alive);

  std::vector<LayerReport> reports;
  for (int i = 0; i < adapter.num_layers(); ++i) {
    if (!adapter.layer_present(i)) continue;
    LayerReport r;
    r.layer = i;
    auto [gk, gv] = adapter.gate_logits(i);
    r.gate_logit_k = gk;
    r.gate_logit_v = gv;
    r.dead = gk <= 0.0f && gv <= 0.0f;
    reports.push_back(r);
  }

  // Leave-one-out sweep over alive layers; the adapter is read-only here.
  std::vector<double> ablated(alive.size(), 0.0);
  parallel_for(static_cast<int64_t>(alive.size()),
               [&](int64_t i) { ablated[static_cast<size_t>(i)] = eval_fn(without(alive, alive[static_cast<size_t>(i)])); });
  for (size_t i = 0; i < alive.size(); ++i) {
    for (LayerReport& r : reports)
      if (r.layer == alive[i]) {
        r.importance = base - ablated[i];
        r.harmful = r.importance < 0.0;
      }
  }

  std::vector<int> retained = select_layers(reports, top_k);
  for (LayerReport& r : reports)
    r.retained = std::find(retained.begin(), retained.end(), r.layer) != retained.end();
  return reports;
}

std::unique_ptr<Adapter> pruned_copy(const Adapter& adapter, const std::vector<int>& retained) {
  std::unique_ptr<Adapter> out = adapter.clone();
  for (int i = 0; i < out->num_layers(); ++i)
    if (std::find(retained.begin(), retained.end(), i) == retained.end()) out->drop_layer(i);
  return out;
}

}  // namespace lcf
