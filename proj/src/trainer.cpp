#include "lcf/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "lcf/c2c_fuser.hpp"
#include "lcf/errors.hpp"

namespace lcf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// schedule and optimizer
// ---------------------------------------------------------------------------

float lr_at_step(int step, int max_steps, float peak, float warmup_ratio) {
  if (step < 0 || step > max_steps) throw ContractError("lr_at_step: step outside [0, max_steps]");
  if (max_steps < 1) throw ContractError("lr_at_step: max_steps must be >= 1");
  int warmup = static_cast<int>(std::lround(warmup_ratio * max_steps));
  if (step <= warmup) return warmup == 0 ? peak : peak * static_cast<float>(step) / warmup;
  if (warmup >= max_steps) return peak;
  return peak * static_cast<float>(max_steps - step) / static_cast<float>(max_steps - warmup);
}

void AdamW::step(const std::string& name, Tensor& param, const Tensor& grad, int step_index,
                 float lr, float weight_decay) {
  if (step_index < 1) throw ContractError("adamw_step: step index starts at 1");
  if (param.shape != grad.shape)
    throw ShapeError("adamw_step: param " + shape_str(param.shape) + " vs grad " + shape_str(grad.shape));
  int64_t n = param.numel();
  Moments& st = state_[name];
  if (st.m.empty()) {
    st.m.assign(static_cast<size_t>(n), 0.0f);
    st.v.assign(static_cast<size_t>(n), 0.0f);
  }
  float* p = param.ptr();
  const float* g = grad.ptr();
  const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(step_index));
  const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(step_index));
  for (int64_t i = 0; i < n; ++i) {
    p[i] -= lr * weight_decay * p[i];  // decoupled decay, before the moment update
    st.m[static_cast<size_t>(i)] = beta1_ * st.m[static_cast<size_t>(i)] + (1.0f - beta1_) * g[i];
    st.v[static_cast<size_t>(i)] = beta2_ * st.v[static_cast<size_t>(i)] + (1.0f - beta2_) * g[i] * g[i];
    float mh = st.m[static_cast<size_t>(i)] / bc1;
    float vh = st.v[static_cast<size_t>(i)] / bc2;
    p[i] -= lr * mh / (std::sqrt(vh) + eps_);
  }
}

float clip_global_norm(std::vector<Tensor*>& grads, float max_norm) {
  double sq = 0.0;
  for (Tensor* g : grads) {
    const float* p = g->ptr();
    for (int64_t i = 0; i < g->numel(); ++i) sq += static_cast<double>(p[i]) * p[i];
  }
  float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    float scale = max_norm / norm;
    for (Tensor* g : grads) {
      float* p = g->ptr();
      for (int64_t i = 0; i < g->numel(); ++i) p[i] *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t& off) {
  if (off + 4 > buf.size()) throw IoError("checkpoint: truncated u32");
  uint32_t v = static_cast<uint8_t>(buf[off]) | (static_cast<uint32_t>(static_cast<uint8_t>(buf[off + 1])) << 8) |
               (static_cast<uint32_t>(static_cast<uint8_t>(buf[off + 2])) << 16) |
               (static_cast<uint32_t>(static_cast<uint8_t>(buf[off + 3])) << 24);
  off += 4;
  return v;
}

constexpr char kMagic[4] = {'L', 'C', 'F', '1'};

}  // namespace

std::string Checkpoint::serialize() const {
  for (size_t i = 1; i < tensors.size(); ++i)
    if (!(tensors[i - 1].first < tensors[i].first))
      throw ContractError("checkpoint: tensors must be in strictly sorted name order");
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, static_cast<uint32_t>(header_json.size()));
  buf.append(header_json);
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.append(name);
    buf.push_back(0);  // dtype f32
    buf.push_back(static_cast<char>(t.rank()));
    for (int d : t.shape) put_u32(buf, static_cast<uint32_t>(d));
    const float* p = t.ptr();
    for (int64_t i = 0; i < t.numel(); ++i) put_u32(buf, std::bit_cast<uint32_t>(p[i]));
  }
  return buf;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic");
  size_t off = 4;
  Checkpoint ck;
  uint32_t hlen = get_u32(bytes, off);
  if (off + hlen > bytes.size()) throw IoError("checkpoint: truncated header");
  ck.header_json = bytes.substr(off, hlen);
  off += hlen;
  std::string prev;
  while (off < bytes.size()) {
    uint32_t nlen = get_u32(bytes, off);
    if (off + nlen > bytes.size()) throw IoError("checkpoint: truncated tensor name");
    std::string name = bytes.substr(off, nlen);
    off += nlen;
    if (!prev.empty() && !(prev < name)) throw IoError("checkpoint: tensor names out of order");
    prev = name;
    if (off + 2 > bytes.size()) throw IoError("checkpoint: truncated tensor meta");
    uint8_t dtype = static_cast<uint8_t>(bytes[off++]);
    if (dtype != 0) throw IoError("checkpoint: unsupported dtype code " + std::to_string(dtype));
    uint8_t rank = static_cast<uint8_t>(bytes[off++]);
    Shape shape(rank);
    int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      shape[static_cast<size_t>(i)] = static_cast<int>(get_u32(bytes, off));
      if (shape[static_cast<size_t>(i)] < 1) throw IoError("checkpoint: non-positive dim");
      numel *= shape[static_cast<size_t>(i)];
    }
    if (off + 4 * static_cast<size_t>(numel) > bytes.size())
      throw IoError("checkpoint: tensor data overruns file (" + name + ")");
    std::vector<float> data(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i) data[static_cast<size_t>(i)] = std::bit_cast<float>(get_u32(bytes, off));
    ck.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  if (off != bytes.size()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  std::string bytes = serialize();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

namespace {

json lcf_config_json(const LcfConfig& c) {
  return json{{"latent", c.latent},
              {"sharer_kv_heads", c.sharer_kv_heads},
              {"sharer_head_dim", c.sharer_head_dim},
              {"recv_layers", c.recv_layers},
              {"recv_kv_heads", c.recv_kv_heads},
              {"recv_head_dim", c.recv_head_dim},
              {"dropout", c.dropout},
              {"gate_logit_init", c.gate_logit_init},
              {"up_proj_scale", c.up_proj_scale},
              {"pool_query_scale", c.pool_query_scale},
              {"temp_start", c.temp.start},
              {"temp_end", c.temp.end},
              {"temp_steps", c.temp.steps}};
}

LcfConfig lcf_config_from_json(const json& j) {
  LcfConfig c;
  c.latent = j.at("latent");
  c.sharer_kv_heads = j.at("sharer_kv_heads");
  c.sharer_head_dim = j.at("sharer_head_dim");
  c.recv_layers = j.at("recv_layers");
  c.recv_kv_heads = j.at("recv_kv_heads");
  c.recv_head_dim = j.at("recv_head_dim");
  c.dropout = j.at("dropout");
  c.gate_logit_init = j.at("gate_logit_init");
  c.up_proj_scale = j.at("up_proj_scale");
  c.pool_query_scale = j.value("pool_query_scale", 0.02f);
  c.temp.start = j.at("temp_start");
  c.temp.end = j.at("temp_end");
  c.temp.steps = j.at("temp_steps");
  return c;
}

json geometry_json(const ModelGeometry& g) {
  return json{{"layers", g.layers},     {"hidden", g.hidden},   {"q_heads", g.q_heads},
              {"kv_heads", g.kv_heads}, {"head_dim", g.head_dim}, {"vocab", g.vocab},
              {"max_seq", g.max_seq},   {"mlp_inner", g.mlp_inner}};
}

ModelGeometry geometry_from_json(const json& j) {
  ModelGeometry g;
  g.layers = j.at("layers");
  g.hidden = j.at("hidden");
  g.q_heads = j.at("q_heads");
  g.kv_heads = j.at("kv_heads");
  g.head_dim = j.at("head_dim");
  g.vocab = j.at("vocab");
  g.max_seq = j.at("max_seq");
  g.mlp_inner = j.at("mlp_inner");
  return g;
}

}  // namespace

Checkpoint checkpoint_of_adapter(const Adapter& adapter) {
  Checkpoint ck;
  json header{{"format", "adapter"}, {"kind", adapter.kind()}};
  if (adapter.kind() == "lcf" || adapter.kind() == "lcfx") {
    const auto& lcf = dynamic_cast<const LcfAdapter&>(adapter);
    header["config"] = lcf_config_json(lcf.config());
  } else if (adapter.kind() == "c2c") {
    const auto& c2c = dynamic_cast<const C2cAdapter&>(adapter);
    const C2cConfig& c = c2c.config();
    header["config"] = json{{"sharer_kv_heads", c.sharer_kv_heads},
                            {"sharer_head_dim", c.sharer_head_dim},
                            {"recv_layers", c.recv_layers},
                            {"recv_kv_heads", c.recv_kv_heads},
                            {"recv_head_dim", c.recv_head_dim},
                            {"recv_hidden", c.recv_hidden},
                            {"gate_logit_init", c.gate_logit_init},
                            {"up_proj_scale", c.up_proj_scale},
                            {"temp_start", c.temp.start},
                            {"temp_end", c.temp.end},
                            {"temp_steps", c.temp.steps}};
  } else {
    throw ContractError("checkpoint_of_adapter: kind '" + adapter.kind() + "' is not checkpointable");
  }
  ck.header_json = header.dump();
  for (auto& [name, t] : adapter.named_params_const()) ck.tensors.emplace_back(name, t->detached());
  std::sort(ck.tensors.begin(), ck.tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return ck;
}

std::unique_ptr<Adapter> adapter_from_checkpoint(const Checkpoint& ck) {
  json header = json::parse(ck.header_json);
  if (header.at("format") != "adapter") throw IoError("checkpoint is not an adapter");
  std::string kind = header.at("kind");
  std::unique_ptr<Adapter> adapter;
  if (kind == "lcf") {
    adapter = std::make_unique<LcfAdapter>(LcfAdapter::init(lcf_config_from_json(header.at("config")), 0));
  } else if (kind == "lcfx") {
    adapter = std::make_unique<LcfxAdapter>(LcfxAdapter::init(lcf_config_from_json(header.at("config")), 0));
  } else if (kind == "c2c") {
    const json& j = header.at("config");
    C2cConfig c;
    c.sharer_kv_heads = j.at("sharer_kv_heads");
    c.sharer_head_dim = j.at("sharer_head_dim");
    c.recv_layers = j.at("recv_layers");
    c.recv_kv_heads = j.at("recv_kv_heads");
    c.recv_head_dim = j.at("recv_head_dim");
    c.recv_hidden = j.at("recv_hidden");
    c.gate_logit_init = j.at("gate_logit_init");
    c.up_proj_scale = j.at("up_proj_scale");
    c.temp.start = j.at("temp_start");
    c.temp.end = j.at("temp_end");
    c.temp.steps = j.at("temp_steps");
    adapter = std::make_unique<C2cAdapter>(C2cAdapter::init(c, 0));
  } else {
    throw IoError("checkpoint: unknown adapter kind '" + kind + "'");
  }

  // Layers with no tensors in the file were pruned away; the loader treats
  // them as permanently closed gates.
  std::vector<bool> present(static_cast<size_t>(adapter->num_layers()), false);
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("layer.", 0) == 0 && name.size() > 8) {
      int li = std::atoi(name.substr(6, 2).c_str());
      if (li >= 0 && li < adapter->num_layers()) present[static_cast<size_t>(li)] = true;
    }
  }
  for (int i = 0; i < adapter->num_layers(); ++i)
    if (!present[static_cast<size_t>(i)]) adapter->drop_layer(i);

  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : adapter->named_params()) by_name[name] = t;
  if (by_name.size() != ck.tensors.size())
    throw IoError("checkpoint: tensor count " + std::to_string(ck.tensors.size()) + " vs expected " +
                  std::to_string(by_name.size()));
  for (const auto& [name, t] : ck.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint: unexpected tensor '" + name + "'");
    if (it->second->shape != t.shape)
      throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape) +
                    ", expected " + shape_str(it->second->shape));
    *it->second = t.detached();
  }
  return adapter;
}

Checkpoint checkpoint_of_model(const ToyLm& lm) {
  Checkpoint ck;
  json header{{"format", "model"}, {"geometry", geometry_json(lm.geo)}};
  ck.header_json = header.dump();
  for (auto& [name, t] : lm.named_params()) ck.tensors.emplace_back(name, t->detached());
  std::sort(ck.tensors.begin(), ck.tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return ck;
}

ToyLm model_from_checkpoint(const Checkpoint& ck) {
  json header = json::parse(ck.header_json);
  if (header.at("format") != "model") throw IoError("checkpoint is not a model");
  ToyLm lm = ToyLm::init(geometry_from_json(header.at("geometry")), 0);
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : lm.named_params()) by_name[name] = t;
  if (by_name.size() != ck.tensors.size()) throw IoError("model checkpoint: tensor count mismatch");
  for (const auto& [name, t] : ck.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("model checkpoint: unexpected tensor '" + name + "'");
    if (it->second->shape != t.shape) throw IoError("model checkpoint: shape mismatch for '" + name + "'");
    *it->second = t.detached();
  }
  return lm;
}

// ---------------------------------------------------------------------------
// fused loss
// ---------------------------------------------------------------------------

namespace {

struct ItemCaches {
  KVCache sharer;
  KVCache receiver;  // prompt minus final token
};

ItemCaches prefill_item(const ToyLm& sharer, const ToyLm& receiver, const TrainItem& item) {
  if (item.receiver_prompt.size() < 2)
    throw ContractError("fused_ntp_loss: receiver prompt needs at least two tokens");
  ItemCaches c;
  c.sharer = prefill_with_cache(sharer, item.sharer_tokens).cache;
  TokenSequence prefix(item.receiver_prompt.begin(), item.receiver_prompt.end() - 1);
  c.receiver = prefill_with_cache(receiver, prefix).cache;
  return c;
}

Tensor item_loss_from_caches(const ToyLm& receiver, const Adapter& adapter, const TrainItem& item,
                             const ItemCaches& caches, const LossPlan& plan) {
  if (item.targets.empty()) throw ContractError("fused_ntp_loss: empty target span");
  FusePlan fp;
  fp.mode = plan.mode;
  fp.temperature = plan.temperature;
  fp.gate_rng = plan.gate_rng;
  fp.dropout_rng = plan.dropout_rng;
  fp.dropout_rate = plan.dropout_rate;

  AlignmentMap align;
  SpanScheme scheme;
  if (adapter.kind() == "lcfx") {
    if (!plan.span_spec) throw ContractError("fused_ntp_loss: pooled fusion needs a span scheme");
    scheme = partition_spans(static_cast<int>(item.sharer_tokens.size()), *plan.span_spec,
                             item.natural_spans);
    fp.spans = &scheme.spans;
  } else if (adapter.kind() != "none") {
    align = build_alignment(static_cast<int>(item.sharer_tokens.size()), caches.receiver.seq_len(),
                            plan.align);
    fp.align = &align;
  }

  KVCache fused = adapter.fuse(caches.sharer, caches.receiver, fp);
  TokenSequence block;
  block.push_back(item.receiver_prompt.back());
  block.insert(block.end(), item.targets.begin(), item.targets.end() - 1);
  Tensor logits = forward_block(receiver, fused, block);
  return cross_entropy_mean(logits, item.targets);
}

}  // namespace

Tensor fused_ntp_loss(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                      const std::vector<const TrainItem*>& batch, const LossPlan& plan) {
  if (batch.empty()) throw ContractError("fused_ntp_loss: empty batch");
  int64_t total_targets = 0;
  for (const TrainItem* it : batch) total_targets += static_cast<int64_t>(it->targets.size());
  Tensor loss;
  for (const TrainItem* it : batch) {
    ItemCaches caches = prefill_item(sharer, receiver, *it);
    Tensor li = item_loss_from_caches(receiver, adapter, *it, caches, plan);
    float w = static_cast<float>(it->targets.size()) / static_cast<float>(total_targets);
    Tensor weighted = mul_scalar(li, w);
    loss = loss.defined() ? add(loss, weighted) : weighted;
  }
  return loss;
}

double eval_ntp_loss(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                     const std::vector<TrainItem>& items, AlignStrategy align,
                     const SpanSchemeSpec* span_spec) {
  LossPlan plan;
  plan.mode = FuseMode::kEval;
  plan.align = align;
  plan.span_spec = span_spec;
  double num = 0.0;
  int64_t den = 0;
  for (const TrainItem& it : items) {
    ItemCaches caches = prefill_item(sharer, receiver, it);
    Tensor li = item_loss_from_caches(receiver, adapter, it, caches, plan);
    num += static_cast<double>(li.scalar()) * static_cast<double>(it.targets.size());
    den += static_cast<int64_t>(it.targets.size());
  }
  return num / static_cast<double>(den);
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace {

// Frozen prefills are recomputed only once per item; the per-step cost is
// fusion plus the short continuation block.
class PrefillCache {
 public:
  PrefillCache(const ToyLm& sharer, const ToyLm& receiver, const std::vector<TrainItem>& items)
      : sharer_(sharer), receiver_(receiver), items_(items), slots_(items.size()) {}

  const ItemCaches& get(size_t i) {
    if (!slots_[i].has_value()) slots_[i] = prefill_item(sharer_, receiver_, items_[i]);
    return *slots_[i];
  }

 private:
  const ToyLm& sharer_;
  const ToyLm& receiver_;
  const std::vector<TrainItem>& items_;
  std::vector<std::optional<ItemCaches>> slots_;
};

}  // namespace

TrainResult train_adapter(const TrainConfig& cfg, const ToyLm& sharer, const ToyLm& receiver,
                          Adapter& adapter, const std::vector<TrainItem>& train_set,
                          const std::vector<TrainItem>& eval_set, AlignStrategy align,
                          const SpanSchemeSpec* span_spec,
                          const std::function<void(int, const Adapter&)>& save_hook) {
  if (train_set.empty()) throw ContractError("train_adapter: empty dataset");
  TrainResult result;
  result.sharer_hash_before = sharer.weights_hash();
  result.receiver_hash_before = receiver.weights_hash();

  PrefillCache cache(sharer, receiver, train_set);
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng shuffle_rng(cfg.seed, Rng::kShuffle);
  Rng gate_rng(cfg.seed, Rng::kGumbel);
  Rng dropout_rng(cfg.seed, Rng::kDropout);

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  for (int step = 1; step <= cfg.max_steps; ++step) {
    float lr = lr_at_step(step, cfg.max_steps, cfg.lr, cfg.warmup_ratio);
    float temp = gate_temperature_at(step - 1, cfg.gate_temp);

    LossPlan plan;
    plan.mode = FuseMode::kTrain;
    plan.temperature = temp;
    plan.gate_rng = &gate_rng;
    plan.dropout_rng = &dropout_rng;
    plan.dropout_rate = cfg.dropout;
    plan.align = align;
    plan.span_spec = span_spec;

    std::map<std::string, Tensor> grad_acc;
    double step_loss = 0.0;
    for (int acc = 0; acc < cfg.grad_accum; ++acc) {
      Tape tape;
      auto view = adapter.clone();
      view->track(tape);

      int64_t total_targets = 0;
      std::vector<size_t> batch_idx;
      for (int b = 0; b < cfg.batch; ++b) batch_idx.push_back(next_index());
      for (size_t i : batch_idx) total_targets += static_cast<int64_t>(train_set[i].targets.size());

      Tensor loss;
      try {
        for (size_t i : batch_idx) {
          Tensor li = item_loss_from_caches(receiver, *view, train_set[i], cache.get(i), plan);
          float w = static_cast<float>(train_set[i].targets.size()) / static_cast<float>(total_targets);
          Tensor weighted = mul_scalar(li, w);
          loss = loss.defined() ? add(loss, weighted) : weighted;
        }
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (train_adapter, step " + std::to_string(step) + ")");
      }
      float lv = loss.scalar();
      if (!std::isfinite(lv))
        throw NumericError("train_adapter: non-finite loss at step " + std::to_string(step));
      step_loss += lv;

      auto grads = tape.gradients(loss);
      float inv_accum = 1.0f / cfg.grad_accum;
      for (auto& [name, t] : view->named_params()) {
        Tensor g = grads.at(t->node);
        auto it = grad_acc.find(name);
        if (it == grad_acc.end()) {
          grad_acc.emplace(name, mul_scalar(g, inv_accum));
        } else {
          Tensor& dst = it->second;
          float* pd = dst.ptr();
          const float* pg = g.ptr();
          for (int64_t k = 0; k < dst.numel(); ++k) pd[k] += pg[k] * inv_accum;
        }
      }
    }
    step_loss /= cfg.grad_accum;

    std::vector<Tensor*> grad_list;
    for (auto& [name, g] : grad_acc) grad_list.push_back(&g);
    clip_global_norm(grad_list, cfg.max_grad_norm);

    for (auto& [name, t] : adapter.named_params())
      opt.step(name, *t, grad_acc.at(name), step, lr, cfg.weight_decay);

    TrainLogRow row;
    row.step = step;
    row.lr = lr;
    row.temperature = temp;
    row.train_loss = static_cast<float>(step_loss);
    if (!eval_set.empty() && (step % cfg.eval_interval == 0 || step == cfg.max_steps)) {
      row.eval_loss = static_cast<float>(eval_ntp_loss(sharer, receiver, adapter, eval_set, align, span_spec));
      row.has_eval = true;
    }
    result.trace.push_back(row);
    for (int li = 0; li < adapter.num_layers(); ++li) {
      if (!adapter.layer_present(li)) continue;
      auto [gk, gv] = adapter.gate_logits(li);
      result.gates.push_back({step, li, gk, gv});
    }
    if (save_hook && (step % cfg.eval_interval == 0 || step == cfg.max_steps)) save_hook(step, adapter);
  }

  result.sharer_hash_after = sharer.weights_hash();
  result.receiver_hash_after = receiver.weights_hash();
  return result;
}

// ---------------------------------------------------------------------------
// plain LM training (frozen-model preparation)
// ---------------------------------------------------------------------------

namespace {

Tensor lm_item_loss(const ToyLm& lm, const LmItem& item) {
  if (item.prompt.empty() || item.targets.empty()) throw ContractError("train_lm: empty prompt or targets");
  TokenSequence tokens = item.prompt;
  tokens.insert(tokens.end(), item.targets.begin(), item.targets.end() - 1);
  KVCache scratch;
  Tensor logits = forward_block(lm, scratch, tokens);
  int p = static_cast<int>(item.prompt.size());
  int t = static_cast<int>(item.targets.size());
  Tensor rows = slice(logits, 0, p - 1, t);
  return cross_entropy_mean(rows, item.targets);
}

}  // namespace

double eval_lm_loss(const ToyLm& lm, const std::vector<LmItem>& items) {
  double num = 0.0;
  int64_t den = 0;
  for (const LmItem& it : items) {
    num += static_cast<double>(lm_item_loss(lm, it).scalar()) * static_cast<double>(it.targets.size());
    den += static_cast<int64_t>(it.targets.size());
  }
  return num / static_cast<double>(den);
}

std::vector<float> train_lm(ToyLm& lm, const std::vector<LmItem>& items, const TrainConfig& cfg) {
  if (items.empty()) throw ContractError("train_lm: empty dataset");
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng shuffle_rng(cfg.seed, Rng::kShuffle);
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  size_t cursor = 0;
  std::vector<float> trace;
  trace.reserve(static_cast<size_t>(cfg.max_steps));

  for (int step = 1; step <= cfg.max_steps; ++step) {
    float lr = lr_at_step(step, cfg.max_steps, cfg.lr, cfg.warmup_ratio);
    Tape tape;
    ToyLm view = lm.tracked_view(tape);

    int64_t total_targets = 0;
    std::vector<size_t> batch_idx;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor >= order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      batch_idx.push_back(order[cursor++]);
    }
    for (size_t i : batch_idx) total_targets += static_cast<int64_t>(items[i].targets.size());

    Tensor loss;
    for (size_t i : batch_idx) {
      Tensor li = lm_item_loss(view, items[i]);
      float w = static_cast<float>(items[i].targets.size()) / static_cast<float>(total_targets);
      Tensor weighted = mul_scalar(li, w);
      loss = loss.defined() ? add(loss, weighted) : weighted;
    }
    float lv = loss.scalar();
    if (!std::isfinite(lv)) throw NumericError("train_lm: non-finite loss at step " + std::to_string(step));
    trace.push_back(lv);

    auto grads = tape.gradients(loss);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : view.named_params()) by_name.emplace(name, grads.at(t->node));
    std::vector<Tensor*> grad_list;
    for (auto& [name, g] : by_name) grad_list.push_back(&g);
    clip_global_norm(grad_list, cfg.max_grad_norm);
    for (auto& [name, t] : lm.named_params()) opt.step(name, *t, by_name.at(name), step, lr, cfg.weight_decay);
  }
  return trace;
}

}  // namespace lcf
