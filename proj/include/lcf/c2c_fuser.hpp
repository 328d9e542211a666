#pragma once

#include <optional>

#include "lcf/adapter.hpp"
#include "lcf/lcf_projector.hpp"

namespace lcf {

// Baseline fuser: two independent full-width pipelines, one for keys and one
// for values, fusing sharer and receiver caches at aligned positions.
struct C2cConfig {
  int sharer_kv_heads = 2;
  int sharer_head_dim = 64;
  int recv_layers = 4;
  int recv_kv_heads = 2;
  int recv_head_dim = 8;
  int recv_hidden = 16;  // fusion width
  float gate_logit_init = 0.0f;
  float up_proj_scale = 0.06f;
  GateTempSchedule temp;

  int concat_width() const { return sharer_kv_heads * sharer_head_dim + recv_kv_heads * recv_head_dim; }
  void validate() const;
};

// One cache type's pipeline (K or V); the two share no parameters.
struct C2cPipeParams {
  Tensor w_in, b_in;      // (hidden, concat)
  Tensor w_fc1, b_fc1;    // (4*hidden, hidden)
  Tensor w_fc2, b_fc2;    // (hidden, 4*hidden)
  Tensor w_proj, b_proj;  // (H*D, hidden)  -> delta
  Tensor w_alpha, b_alpha;  // (H, hidden)  -> per-head weight
  Tensor gate;              // scalar logit
};

struct C2cLayerParams {
  C2cPipeParams k, v;
};

class C2cAdapter : public Adapter {
 public:
  C2cAdapter() = default;
  static C2cAdapter init(const C2cConfig& cfg, uint64_t seed);

  std::string kind() const override { return "c2c"; }
  int num_layers() const override { return cfg_.recv_layers; }
  bool layer_present(int layer) const override;
  std::pair<float, float> gate_logits(int layer) const override;
  void drop_layer(int layer) override;
  std::vector<std::pair<std::string, Tensor*>> named_params() override;
  std::unique_ptr<Adapter> clone() const override;
  KVCache fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const override;

  const C2cConfig& config() const { return cfg_; }
  C2cLayerParams& layer(int i) { return *layers_[static_cast<size_t>(i)]; }

  // One pipeline's residual update: rows are per-position flattened caches.
  Tensor fuse_pipe(const C2cPipeParams& pipe, const Tensor& sharer_rows, const Tensor& recv_cache,
                   const FusePlan& plan) const;

 private:
  C2cConfig cfg_;
  std::vector<std::optional<C2cLayerParams>> layers_;
};

}  // namespace lcf
