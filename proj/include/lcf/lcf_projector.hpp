#pragma once

#include <optional>

#include "lcf/adapter.hpp"

namespace lcf {

// Gate temperature anneal: geometric interpolation from start to end over
// `steps` optimizer steps, clamped at the end value afterward.
struct GateTempSchedule {
  float start = 1.0f;
  float end = 0.001f;
  int steps = 400;
};

float gate_temperature_at(int step, const GateTempSchedule& schedule);

// Scalar Gumbel-sigmoid gate. Train mode: sigmoid((logit + G1 - G2) / tau)
// with G ~ Gumbel(0,1); a null rng drops the noise (debug). Eval mode: hard
// 1 if logit > 0 else 0.
float gumbel_sigmoid_gate(float logit, float temperature, FuseMode mode, Rng* noise_rng);

struct LcfConfig {
  int latent = 128;  // d; split into z_K, z_V of d/2 each
  int sharer_kv_heads = 2;
  int sharer_head_dim = 64;
  int recv_layers = 28;
  int recv_kv_heads = 8;
  int recv_head_dim = 128;
  float dropout = 0.1f;
  float gate_logit_init = 0.0f;  // +1.0 for the pooled cross-context variant
  float up_proj_scale = 0.06f;
  float pool_query_scale = 0.02f;
  GateTempSchedule temp;

  int joint_width() const {
    return 2 * sharer_kv_heads * sharer_head_dim + 2 * recv_kv_heads * recv_head_dim;
  }
  int mlp_inner() const { return 4 * latent; }
  void validate() const;
};

// One receiver layer's projector: joint KV concat -> latent bottleneck ->
// two MLP blocks -> split -> per-head gates -> dual up-projection -> two
// scalar Gumbel-sigmoid gate logits.
struct LcfLayerParams {
  Tensor w_down, b_down;  // (d, joint), (d)
  struct MlpBlock {
    Tensor w1, b1;  // (4d, d), (4d)
    Tensor w2, b2;  // (d, 4d), (d)
  };
  MlpBlock mlp[2];
  Tensor w_gate_head, b_gate_head;  // (2H, d), (2H) -> alpha_K, alpha_V
  Tensor w_up_k, b_up_k;            // (H*D, d/2), (H*D)
  Tensor w_up_v, b_up_v;
  Tensor gate_k, gate_v;  // scalar logits
};

class LcfAdapter : public Adapter {
 public:
  LcfAdapter() = default;
  static LcfAdapter init(const LcfConfig& cfg, uint64_t seed);

  std::string kind() const override { return "lcf"; }
  int num_layers() const override { return cfg_.recv_layers; }
  bool layer_present(int layer) const override;
  std::pair<float, float> gate_logits(int layer) const override;
  void drop_layer(int layer) override;
  std::vector<std::pair<std::string, Tensor*>> named_params() override;
  std::unique_ptr<Adapter> clone() const override;
  KVCache fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const override;

  const LcfConfig& config() const { return cfg_; }
  LcfLayerParams& layer(int i) { return *layers_[static_cast<size_t>(i)]; }
  const LcfLayerParams& layer(int i) const { return *layers_[static_cast<size_t>(i)]; }

  // Residual update of one receiver layer given per-position sharer rows
  // (N, 2*Hs*Ds): either aligned cache slices or a broadcast pooled summary.
  std::pair<Tensor, Tensor> fuse_layer(int layer_idx, const Tensor& sharer_rows, const Tensor& r_k,
                                       const Tensor& r_v, const FusePlan& plan) const;

 protected:
  LcfConfig cfg_;
  std::vector<std::optional<LcfLayerParams>> layers_;

  void append_layer_params(std::vector<std::pair<std::string, Tensor*>>& out, int layer_idx);
};

}  // namespace lcf
