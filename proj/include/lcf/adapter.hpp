#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lcf/cache_align.hpp"
#include "lcf/rng.hpp"
#include "lcf/toy_lm.hpp"

namespace lcf {

enum class FuseMode { kTrain, kEval };

struct Span {
  int begin = 0;
  int end = 0;
  int len() const { return end - begin; }
};

// Everything a fuse pass needs beyond the two caches. Alignment applies to
// the position-wise kinds (c2c, lcf); spans apply to the pooled kind (lcfx).
struct FusePlan {
  FuseMode mode = FuseMode::kEval;
  float temperature = 1.0f;
  Rng* gate_rng = nullptr;     // train mode; nullptr = noise-free debug gate
  Rng* dropout_rng = nullptr;  // train mode
  float dropout_rate = 0.0f;
  const AlignmentMap* align = nullptr;
  const std::vector<Span>* spans = nullptr;
};

// A trainable cache adapter between a frozen sharer and a frozen receiver.
// Fusing returns a new receiver cache; layers whose hard gates are closed (or
// that were pruned away) pass the receiver cache through bit-identically.
class Adapter {
 public:
  virtual ~Adapter() = default;

  virtual std::string kind() const = 0;
  virtual int num_layers() const = 0;
  virtual bool layer_present(int layer) const = 0;
  virtual std::pair<float, float> gate_logits(int layer) const = 0;  // (K, V)
  virtual void drop_layer(int layer) = 0;

  virtual std::vector<std::pair<std::string, Tensor*>> named_params() = 0;
  virtual std::unique_ptr<Adapter> clone() const = 0;
  // Re-registers every parameter as a leaf on `tape` (in place; data buffers
  // stay shared with the original, so optimizer writes through either).
  void track(Tape& tape);

  virtual KVCache fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const = 0;

  int64_t param_count() const;
  std::vector<std::pair<std::string, const Tensor*>> named_params_const() const;
};

// Pass-through adapter: the receiver-only baseline under the same interfaces.
class NoneAdapter : public Adapter {
 public:
  std::string kind() const override { return "none"; }
  int num_layers() const override { return 0; }
  bool layer_present(int) const override { return false; }
  std::pair<float, float> gate_logits(int) const override { return {-1.0f, -1.0f}; }
  void drop_layer(int) override {}
  std::vector<std::pair<std::string, Tensor*>> named_params() override { return {}; }
  std::unique_ptr<Adapter> clone() const override { return std::make_unique<NoneAdapter>(); }
  KVCache fuse(const KVCache&, const KVCache& receiver, const FusePlan&) const override { return receiver; }
};

// Receiver layer -> sharer layer for depth-mismatched pairs
// (floor-proportional; identity when depths match).
int map_sharer_layer(int recv_layer, int sharer_layers, int recv_layers);

// Re-indexes a (1, H, Ns, D) cache tensor to receiver positions through an
// alignment map. The sharer side is frozen, so this is grad-free.
Tensor gather_positions(const Tensor& cache, const std::vector<int>& positions);

struct FusedForward {
  Tensor first_logits;  // logits seen by the first generated token (V)
  KVCache cache;        // fused cache, extended with the final prompt token
};

// Shared entry point for evaluation and training: sharer prefill, receiver
// prefill of the prompt minus its final token, cache fusion, then a forward
// of the final prompt token so its logits read the fused cache.
FusedForward fused_first_token(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                               const TokenSequence& sharer_tokens, const TokenSequence& receiver_prompt,
                               FusePlan plan, AlignStrategy align_strategy,
                               const std::vector<Span>* spans);

}  // namespace lcf
