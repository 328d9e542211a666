#include "lcf/c2c_fuser.hpp"

#include <cstdio>

#include "lcf/errors.hpp"

namespace lcf {

void C2cConfig::validate() const {
  if (sharer_kv_heads < 1 || sharer_head_dim < 1 || recv_layers < 1 || recv_kv_heads < 1 ||
      recv_head_dim < 1 || recv_hidden < 1)
    throw ContractError("C2cConfig: geometry fields must be positive");
}

namespace {

C2cPipeParams init_pipe(const C2cConfig& cfg, Rng& rng) {
  const int cw = cfg.concat_width();
  const int h = cfg.recv_hidden;
  const int hw = cfg.recv_kv_heads * cfg.recv_head_dim;
  C2cPipeParams p;
  p.w_in = init_kaiming_scaled({h, cw}, cw, 1.0f, rng);
  p.b_in = Tensor::zeros({h});
  p.w_fc1 = init_kaiming_scaled({4 * h, h}, h, 1.0f, rng);
  p.b_fc1 = Tensor::zeros({4 * h});
  p.w_fc2 = init_kaiming_scaled({h, 4 * h}, 4 * h, 1.0f, rng);
  p.b_fc2 = Tensor::zeros({h});
  p.w_proj = init_kaiming_scaled({hw, h}, h, cfg.up_proj_scale, rng);
  p.b_proj = Tensor::zeros({hw});
  p.w_alpha = init_kaiming_scaled({cfg.recv_kv_heads, h}, h, cfg.up_proj_scale, rng);
  p.b_alpha = Tensor::zeros({cfg.recv_kv_heads});
  p.gate = Tensor::full({1}, cfg.gate_logit_init);
  return p;
}

Tensor train_gate_c2c(const Tensor& logit, const FusePlan& plan) {
  if (plan.temperature <= 0.0f) throw ContractError("fuse: gate temperature must be positive");
  float noise = plan.gate_rng ? plan.gate_rng->gumbel() - plan.gate_rng->gumbel() : 0.0f;
  return sigmoid_t(mul_scalar(add_scalar(logit, noise), 1.0f / plan.temperature));
}

void append_pipe_params(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& pre,
                        C2cPipeParams& p) {
  out.emplace_back(pre + "in.w", &p.w_in);
  out.emplace_back(pre + "in.b", &p.b_in);
  out.emplace_back(pre + "fc1.w", &p.w_fc1);
  out.emplace_back(pre + "fc1.b", &p.b_fc1);
  out.emplace_back(pre + "fc2.w", &p.w_fc2);
  out.emplace_back(pre + "fc2.b", &p.b_fc2);
  out.emplace_back(pre + "proj.w", &p.w_proj);
  out.emplace_back(pre + "proj.b", &p.b_proj);
  out.emplace_back(pre + "alpha.w", &p.w_alpha);
  out.emplace_back(pre + "alpha.b", &p.b_alpha);
  out.emplace_back(pre + "gate", &p.gate);
}

}  // namespace

C2cAdapter C2cAdapter::init(const C2cConfig& cfg, uint64_t seed) {
  cfg.validate();
  C2cAdapter a;
  a.cfg_ = cfg;
  Rng rng(seed, Rng::kInit);
  a.layers_.resize(static_cast<size_t>(cfg.recv_layers));
  for (auto& l : a.layers_) l = C2cLayerParams{init_pipe(cfg, rng), init_pipe(cfg, rng)};
  return a;
}

bool C2cAdapter::layer_present(int layer) const {
  return layer >= 0 && layer < static_cast<int>(layers_.size()) &&
         layers_[static_cast<size_t>(layer)].has_value();
}

std::pair<float, float> C2cAdapter::gate_logits(int layer) const {
  if (!layer_present(layer)) return {-1.0f, -1.0f};
  const C2cLayerParams& p = *layers_[static_cast<size_t>(layer)];
  return {p.k.gate.scalar(), p.v.gate.scalar()};
}

void C2cAdapter::drop_layer(int layer) {
  if (layer >= 0 && layer < static_cast<int>(layers_.size())) layers_[static_cast<size_t>(layer)].reset();
}

std::vector<std::pair<std::string, Tensor*>> C2cAdapter::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  char buf[32];
  for (int i = 0; i < static_cast<int>(layers_.size()); ++i) {
    if (!layers_[static_cast<size_t>(i)]) continue;
    std::snprintf(buf, sizeof(buf), "layer.%02d.", i);
    C2cLayerParams& p = *layers_[static_cast<size_t>(i)];
    append_pipe_params(out, std::string(buf) + "k.", p.k);
    append_pipe_params(out, std::string(buf) + "v.", p.v);
  }
  return out;
}

std::unique_ptr<Adapter> C2cAdapter::clone() const { return std::make_unique<C2cAdapter>(*this); }

Tensor C2cAdapter::fuse_pipe(const C2cPipeParams& pipe, const Tensor& sharer_rows,
                             const Tensor& recv_cache, const FusePlan& plan) const {
  const bool train = plan.mode == FuseMode::kTrain;
  if (!train && pipe.gate.scalar() <= 0.0f) return recv_cache;  // hard-closed: exact identity

  const int n = recv_cache.dim(2);
  const int heads = cfg_.recv_kv_heads;
  const int hd = cfg_.recv_head_dim;
  Tensor x = concat({sharer_rows, heads_to_seq(recv_cache)}, -1);
  if (x.dim(-1) != cfg_.concat_width())
    throw ShapeError("c2c_fuse_layer: concat width " + std::to_string(x.dim(-1)) +
                     " does not match configured " + std::to_string(cfg_.concat_width()));

  Tensor h = linear(x, pipe.w_in, pipe.b_in);
  Tensor m = silu(linear(h, pipe.w_fc1, pipe.b_fc1));
  if (train && plan.dropout_rate > 0.0f && plan.dropout_rng)
    m = dropout(m, plan.dropout_rate, *plan.dropout_rng, true);
  m = linear(m, pipe.w_fc2, pipe.b_fc2);

  Tensor delta = reshape(linear(m, pipe.w_proj, pipe.b_proj), {n, heads, hd});
  Tensor alpha = linear(m, pipe.w_alpha, pipe.b_alpha);  // (N, H)
  Tensor update = seq_to_heads(reshape(mul_lastdim(delta, alpha), {n, heads * hd}), heads);
  if (train) update = scale_by(update, train_gate_c2c(pipe.gate, plan));
  return add(recv_cache, update);
}

KVCache C2cAdapter::fuse(const KVCache& sharer, const KVCache& receiver, const FusePlan& plan) const {
  if (static_cast<int>(receiver.layers.size()) != cfg_.recv_layers)
    throw ShapeError("c2c fuse: receiver cache has " + std::to_string(receiver.layers.size()) +
                     " layers, adapter expects " + std::to_string(cfg_.recv_layers));
  if (!plan.align) throw ContractError("c2c fuse: alignment map required");
  const int n = receiver.seq_len();
  if (plan.align->receiver_len() != n)
    throw ShapeError("c2c fuse: alignment covers " + std::to_string(plan.align->receiver_len()) +
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
    const C2cLayerParams& p = *layers_[static_cast<size_t>(li)];
    const auto& skv = sharer.layers[static_cast<size_t>(map_sharer_layer(li, ls, cfg_.recv_layers))];
    Tensor sk = heads_to_seq(gather_positions(skv.k, plan.align->sharer_pos));
    Tensor sv = heads_to_seq(gather_positions(skv.v, plan.align->sharer_pos));
    out.layers[static_cast<size_t>(li)] = {fuse_pipe(p.k, sk, rkv.k, plan),
                                           fuse_pipe(p.v, sv, rkv.v, plan)};
  }
  return out;
}

}  // namespace lcf
