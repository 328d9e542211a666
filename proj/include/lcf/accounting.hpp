#pragma once

#include <cstdint>

namespace lcf {

// Geometry inputs for closed-form adapter sizing; no weights are instantiated.
struct GeometrySpec {
  int sharer_kv_heads = 2;
  int sharer_head_dim = 64;
  int recv_layers = 28;
  int recv_kv_heads = 8;
  int recv_head_dim = 128;

  int joint_width() const {
    return 2 * sharer_kv_heads * sharer_head_dim + 2 * recv_kv_heads * recv_head_dim;
  }
};

// The published baseline totals are inputs, not derived: the baseline's
// internal widths are not reconstructable from its reported sizes.
constexpr int64_t kPublishedC2cTotalParams = 477'850'000;
constexpr int64_t kPublishedC2cParamsPerLayer = 17'100'000;

// Projector parameters for one receiver layer at latent width d:
// down-proj + two (d -> 4d -> d) MLP blocks + gate head + dual up-proj +
// two scalar gate logits, all with biases.
int64_t lcf_params_per_layer(const GeometrySpec& geom, int d);
int64_t lcf_params_total(const GeometrySpec& geom, int d);

// Hierarchical pool: two queries per receiver layer, shaped by the pooled
// cache's head geometry; independent of the span count.
int64_t lcfx_pool_params_per_layer(const GeometrySpec& geom);
int64_t lcfx_pool_params_total(const GeometrySpec& geom);

// Reported footprint: bf16 (2 bytes per parameter), megabytes at one-decimal
// precision rounded to the nearest integer.
int adapter_size_mb(int64_t param_count);

}  // namespace lcf
