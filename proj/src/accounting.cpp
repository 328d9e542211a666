#include "lcf/accounting.hpp"

#include <cmath>

#include "lcf/errors.hpp"

namespace lcf {

int64_t lcf_params_per_layer(const GeometrySpec& geom, int d) {
  if (d < 2 || d % 2 != 0) throw ContractError("lcf_params_per_layer: latent dim must be even");
  const int64_t joint = geom.joint_width();
  const int64_t h = geom.recv_kv_heads;
  const int64_t hd = static_cast<int64_t>(geom.recv_kv_heads) * geom.recv_head_dim;
  const int64_t down = joint * d + d;
  const int64_t mlp = 2 * (static_cast<int64_t>(d) * 4 * d + 4 * d + static_cast<int64_t>(4) * d * d + d);
  const int64_t gate_head = static_cast<int64_t>(d) * 2 * h + 2 * h;
  const int64_t up = 2 * ((static_cast<int64_t>(d) / 2) * hd + hd);
  const int64_t gates = 2;
  return down + mlp + gate_head + up + gates;
}

int64_t lcf_params_total(const GeometrySpec& geom, int d) {
  return lcf_params_per_layer(geom, d) * geom.recv_layers;
}

int64_t lcfx_pool_params_per_layer(const GeometrySpec& geom) {
  return 2LL * geom.sharer_kv_heads * geom.sharer_head_dim;
}

int64_t lcfx_pool_params_total(const GeometrySpec& geom) {
  return lcfx_pool_params_per_layer(geom) * geom.recv_layers;
}

int adapter_size_mb(int64_t param_count) {
  if (param_count < 0) throw ContractError("adapter_size_mb: negative parameter count");
  double mb = static_cast<double>(param_count) * 2.0 / 1e6;
  double tenths = std::floor(mb * 10.0 + 0.5) / 10.0;
  return static_cast<int>(std::floor(tenths + 0.5));
}

}  // namespace lcf
