#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lcf/adapter.hpp"
#include "lcf/lcf_projector.hpp"
#include "lcf/lcfx_pool.hpp"

namespace lcf {

struct TrainConfig {
  float lr = 1e-4f;
  float weight_decay = 0.01f;
  float warmup_ratio = 0.1f;
  float max_grad_norm = 1.0f;
  int max_steps = 300;
  int batch = 10;
  int grad_accum = 1;  // effective batch = batch * grad_accum
  uint64_t seed = 42;
  GateTempSchedule gate_temp;
  float dropout = 0.1f;
  int eval_interval = 50;
  // Adam constants (standard defaults, exposed for completeness).
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
};

// One training example: a prompt whose final token is forwarded after fusion,
// plus teacher-forced continuation targets ending in the stop token.
struct TrainItem {
  TokenSequence sharer_tokens;
  TokenSequence receiver_prompt;
  TokenSequence targets;
  std::vector<Span> natural_spans;  // sharer-side boundaries (pooled fusion)
};

// Linear warmup to peak over warmup_ratio * max_steps, then linear to zero.
float lr_at_step(int step, int max_steps, float peak, float warmup_ratio);

// Decoupled-weight-decay Adam with bias correction; decay is applied to the
// parameter before the moment update. State is keyed by parameter name so it
// survives re-taping between steps.
class AdamW {
 public:
  AdamW(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::string& name, Tensor& param, const Tensor& grad, int step_index, float lr,
            float weight_decay);

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  float beta1_, beta2_, eps_;
  std::unordered_map<std::string, Moments> state_;
};

// Scales all gradients by max_norm/norm when the global norm exceeds
// max_norm. Returns the pre-clip norm.
float clip_global_norm(std::vector<Tensor*>& grads, float max_norm);

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------
// magic "LCF1"; u32-LE length-prefixed UTF-8 header document; then per tensor
// (sorted by name): u32-LE length-prefixed name, u8 dtype (0 = f32), u8 rank,
// rank x u32-LE dims, raw little-endian f32 values.
struct Checkpoint {
  std::string header_json;
  std::vector<std::pair<std::string, Tensor>> tensors;  // sorted by name

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

Checkpoint checkpoint_of_adapter(const Adapter& adapter);
std::unique_ptr<Adapter> adapter_from_checkpoint(const Checkpoint& ck);
Checkpoint checkpoint_of_model(const ToyLm& lm);
ToyLm model_from_checkpoint(const Checkpoint& ck);

// ---------------------------------------------------------------------------
// Losses and loops
// ---------------------------------------------------------------------------

struct LossPlan {
  FuseMode mode = FuseMode::kEval;
  float temperature = 1.0f;
  Rng* gate_rng = nullptr;
  Rng* dropout_rng = nullptr;
  float dropout_rate = 0.0f;
  AlignStrategy align = AlignStrategy::kFirst;
  const SpanSchemeSpec* span_spec = nullptr;  // pooled fusion only
};

// Sharer prefill -> (pooled) sharer KV -> per-layer fusion into the receiver
// cache -> receiver continues over the targets -> token-weighted mean
// cross-entropy. Both base models stay frozen; gradients reach only the
// adapter (when its parameters are tape-tracked).
Tensor fused_ntp_loss(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                      const std::vector<const TrainItem*>& batch, const LossPlan& plan);

struct TrainLogRow {
  int step = 0;
  float lr = 0.0f;
  float temperature = 0.0f;
  float train_loss = 0.0f;
  float eval_loss = 0.0f;
  bool has_eval = false;
};

struct GateLogRow {
  int step = 0;
  int layer = 0;
  float logit_k = 0.0f;
  float logit_v = 0.0f;
};

struct TrainResult {
  std::vector<TrainLogRow> trace;
  std::vector<GateLogRow> gates;
  uint64_t sharer_hash_before = 0, sharer_hash_after = 0;
  uint64_t receiver_hash_before = 0, receiver_hash_after = 0;
};

// Full adapter run: accumulation, global-norm clipping, linear-warmup
// schedule, gate-temperature anneal, periodic held-out eval, save hook.
// Aborts with the step index on a non-finite loss.
TrainResult train_adapter(const TrainConfig& cfg, const ToyLm& sharer, const ToyLm& receiver,
                          Adapter& adapter, const std::vector<TrainItem>& train_set,
                          const std::vector<TrainItem>& eval_set, AlignStrategy align,
                          const SpanSchemeSpec* span_spec,
                          const std::function<void(int, const Adapter&)>& save_hook = {});

double eval_ntp_loss(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                     const std::vector<TrainItem>& items, AlignStrategy align,
                     const SpanSchemeSpec* span_spec);

// Plain LM training on (prompt, targets) items; used to prepare the frozen
// base models for the synthetic tasks.
struct LmItem {
  TokenSequence prompt;
  TokenSequence targets;
};

std::vector<float> train_lm(ToyLm& lm, const std::vector<LmItem>& items, const TrainConfig& cfg);
double eval_lm_loss(const ToyLm& lm, const std::vector<LmItem>& items);

}  // namespace lcf
