#include "lcf/lcf_projector.hpp"

#include <cmath>
#include <cstdio>

#include "lcf/errors.hpp"

namespace lcf {

float gate_temperature_at(int step, const GateTempSchedule& schedule) {
  if (step < 0) throw ContractError("gate_temperature_at: step must be >= 0");
  if (schedule.steps < 1 || schedule.start <= 0.0f || schedule.end <= 0.0f)
    throw ContractError("gate_temperature_at: schedule needs positive endpoints and window");
  if (step >= schedule.steps) return schedule.end;
  double frac = static_cast<double>(step) / schedule.steps;
  return static_cast<float>(schedule.start * std::pow(schedule.end / static_cast<double>(schedule.start), frac));
}

float gumbel_sigmoid_gate(float logit, float temperature, FuseMode mode, Rng* noise_rng) {
  if (mode == FuseMode::kEval) return logit > 0.0f ? 1.0f : 0.0f;
  if (temperature <= 0.0f) throw ContractError("gumbel_sigmoid_gate: temperature must be positive");
  float noise = noise_rng ? noise_rng->gumbel() - noise_rng->gumbel() : 0.0f;
  return 1.0f / (1.0f + std::exp(-(logit + noise) / temperature));
}

void LcfConfig::validate() const {
  if (latent < 2 || latent % 2 != 0) throw ContractError("LcfConfig: latent dim must be even and >= 2");
  if (sharer_kv_heads < 1 || sharer_head_dim < 1 || recv_layers < 1 || recv_kv_heads < 1 ||
      recv_head_dim < 1)
    throw ContractError("LcfConfig: geometry fields must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) throw ContractError("LcfConfig: dropout must be in [0, 1)");
}

namespace {

LcfLayerParams init_layer(const LcfConfig& cfg, Rng& rng) {
  const int d = cfg.latent;
  const int inner = cfg.mlp_inner();
  const int joint = cfg.joint_width();
  const int hw = cfg.recv_kv_heads * cfg.recv_head_dim;
  LcfLayerParams p;
  p.w_down = init_kaiming_scaled({d, joint}, joint, 1.0f, rng);
  p.b_down = Tensor::zeros({d});
  for (auto& blk : p.mlp) {
    blk.w1 = init_kaiming_scaled({inner, d}, d, 1.0f, rng);
    blk.b1 = Tensor::zeros({inner});
    blk.w2 = init_kaiming_scaled({d, inner}, inner, 1.0f, rng);
    blk.b2 = Tensor::zeros({d});
  }
  // The per-head weighting starts small for the same reason the up-proj does:
  // a fresh adapter must barely perturb the receiver cache.
  p.w_gate_head = init_kaiming_scaled({2 * cfg.recv_kv_heads, d}, d, cfg.up_proj_scale, rng);
  p.b_gate_head = Tensor::zeros({2 * cfg.recv_kv_heads});
  p.w_up_k = init_kaiming_scaled({hw, d / 2}, d / 2, cfg.up_proj_scale, rng);
  p.b_up_k = Tensor::zeros({hw});
  p.w_up_v = init_kaiming_scaled({hw, d / 2}, d / 2, cfg.up_proj_scale, rng);
  p.b_up_v = Tensor::zeros({hw});
  p.gate_k = Tensor::full({1}, cfg.gate_logit_init);
  p.gate_v = Tensor::full({1}, cfg.gate_logit_init);
  return p;
}

// In-graph training gate: sigmoid((logit + noise) / tau), noise drawn here.
Tensor train_gate(const Tensor& logit, const FusePlan& plan) {
  if (plan.temperature <= 0.0f) throw ContractError("fuse: gate temperature must be positive");
  float noise = plan.gate_rng ? plan.gate_rng->gumbel() - plan.gate_rng->gumbel() : 0.0f;
  return sigmoid_t(mul_scalar(add_scalar(logit, noise), 1.0f / plan.temperature));
}

}  // namespace

LcfAdapter LcfAdapter::init(const LcfConfig& cfg, uint64_t seed) {
  cfg.validate();
  LcfAdapter a;
  a.cfg_ = cfg;
  Rng rng(seed, Rng::kInit);
  a.layers_.resize(static_cast<size_t>(cfg.recv_layers));
  for (auto& l : a.layers_) l = init_layer(cfg, rng);
  return a;
}

bool LcfAdapter::layer_present(int layer) const {
  return layer >= 0 && layer < static_cast<int>(layers_.size()) &&
         layers_[static_cast<size_t>(layer)].has_value();
}

std::pair<float, float> LcfAdapter::gate_logits(int layer) const {
  if (!layer_present(layer)) return {-1.0f, -1.0f};  // absent layers act as permanently closed
  const LcfLayerParams& p = *layers_[static_cast<size_t>(layer)];
  return {p.gate_k.scalar(), p.gate_v.scalar()};
}

void LcfAdapter::drop_layer(int layer) {
  if (layer >= 0 && layer < static_cast<int>(layers_.size())) layers_[static_cast<size_t>(layer)].reset();
}

void LcfAdapter::append_layer_params(std::vector<std::pair<std::string, Tensor*>>& out, int layer_idx) {
  LcfLayerParams& p = *layers_[static_cast<size_t>(layer_idx)];
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer.%02d.", layer_idx);
  std::string pre(buf);
  out.emplace_back(pre + "down.w", &p.w_down);
  out.emplace_back(pre + "down.b", &p.b_down);
  for (int b = 0; b < 2; ++b) {
    std::string mb = pre + "mlp" + std::to_string(b) + ".";
    out.emplace_back(mb + "w1", &p.mlp[b].w1);
    out.emplace_back(mb + "b1", &p.mlp[b].b1);
    out.emplace_back(mb + "w2", &p.mlp[b].w2);
    out.emplace_back(mb + "b2", &p.mlp[b].b2);
  }
  out.emplace_back(pre + "gate_head.w", &p.w_gate_head);
  out.emplace_back(pre + "gate_head.b", &p.b_gate_head);
  out.emplace_back(pre + "up_k.w", &p.w_up_k);
  out.emplace_back(pre + "up_k.b", &p.b_up_k);
  out.emplace_back(pre + "up_v.w", &p.w_up_v);
  out.emplace_back(pre + "up_v.b", &p.b_up_v);
  out.emplace_back(pre + "gate_k", &p.gate_k);
  out.emplace_back(pre + "gate_v", &p.gate_v);
}

std::vector<std::pair<std::string, Tensor*>> LcfAdapter::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (int i = 0; i < static_cast<int>(layers_.size()); ++i)
    if (layers_[static_cast<size_t>(i)]) append_layer_params(out, i);
  return out;
}

std::unique_ptr<Adapter> LcfAdapter::clone() const { return std::make_unique<LcfAdapter>(*this); }

std::pair<Tensor, Tensor> LcfAdapter::fuse_layer(int layer_idx, const Tensor& sharer_rows,
                                                 const Tensor& r_k, const Tensor& r_v,
                                                 const FusePlan& plan) const {
  const LcfLayerParams& p = *layers_[static_cast<size_t>(layer_idx)];
  const bool train = plan.mode == FuseMode::kTrain;
  const bool k_open = train || p.gate_k.scalar() > 0.0f;
  const bool v_open = train || p.gate_v.scalar() > 0.0f;
  if (!k_open && !v_open) return {r_k, r_v};  // hard-closed layer: exact identity

  const int n = r_k.dim(2);
  const int heads = cfg_.recv_kv_heads;
  const int hd = cfg_.recv_head_dim;
  Tensor x = concat({sharer_rows, heads_to_seq(r_k), heads_to_seq(r_v)}, -1);
  if (x.dim(-1) != cfg_.joint_width())
    throw ShapeError("lcf_fuse_layer: joint width " + std::to_string(x.dim(-1)) +
                     " does not match configured " + std::to_string(cfg_.joint_width()));

  Tensor z = linear(x, p.w_down, p.b_down);
  for (const auto& blk : p.mlp) {
    Tensor h = silu(linear(z, blk.w1, blk.b1));
    if (train && plan.dropout_rate > 0.0f && plan.dropout_rng)
      h = dropout(h, plan.dropout_rate, *plan.dropout_rng, true);
    z = linear(h, blk.w2, blk.b2);
  }

  Tensor alpha = linear(z, p.w_gate_head, p.b_gate_head);  // (N, 2H)
  const int half = cfg_.latent / 2;

  auto side = [&](const Tensor& w_up, const Tensor& b_up, int z_off, int a_off,
                  const Tensor& gate_logit, const Tensor& r) -> Tensor {
    Tensor zi = slice(z, -1, z_off, half);
    Tensor delta = reshape(linear(zi, w_up, b_up), {n, heads, hd});
    Tensor ai = slice(alpha, -1, a_off, heads);
    Tensor update = seq_to_heads(reshape(mul_lastdim(delta, ai), {n, heads * hd}), heads);
    if (train) update = scale_by(update, train_gate(gate_logit, plan));
    return add(r, update);
  };

  Tensor out_k = k_open ? side(p.w_up_k, p.b_up_k, 0, 0, p.gate_k, r_k) : r_k;
  Tensor out_v = v_open ? side(p.w_up_v, p.b_up_v, half, heads, p.gate_v, r_v) : r_v;
  return {out_k, out_v};
}

KVCache LcfAdapter::fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const {
  if (static_cast<int>(receiver.layers.size()) != cfg_.recv_layers)
    throw ShapeError("lcf fuse: receiver cache has " + std::to_string(receiver.layers.size()) +
                     " layers, adapter expects " + std::to_string(cfg_.recv_layers));
  if (!plan.align) throw ContractError("lcf fuse: alignment map required for position-wise fusion");
  const int n = receiver.seq_len();
  if (plan.align->receiver_len() != n)
    throw ShapeError("lcf fuse: alignment covers " + std::to_string(plan.align->receiver_len()) +
                     " positions, receiver cache has " + std::to_string(n));
  const int ls = static_cast<int>(sharer.layers.size());

  KVCache out;
  out.layers.resize(receiver.layers.size());
  for (int li = 0; li < cfg_.recv_layers; ++li) {
    const auto& rkv = receiver.layers[static_cast<size_t>(li)];
    if (!layer_present(li)) {
      out.layers[static_cast<size_t>(li)] = rkv;
      continue;
    }
    const auto& skv = sharer.layers[static_cast<size_t>(map_sharer_layer(li, ls, cfg_.recv_layers))];
    Tensor sk = heads_to_seq(gather_positions(skv.k, plan.align->sharer_pos));
    Tensor sv = heads_to_seq(gather_positions(skv.v, plan.align->sharer_pos));
    Tensor rows = concat({sk, sv}, -1);
    auto [fk, fv] = fuse_layer(li, rows, rkv.k, rkv.v, plan);
    out.layers[static_cast<size_t>(li)] = {fk, fv};
  }
  return out;
}

}  // namespace lcf
