#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "lcf/errors.hpp"
#include "lcf/c2c_fuser.hpp"
#include "lcf/eval_harness.hpp"
#include "lcf/trainer.hpp"

using namespace lcf;

namespace {

ModelGeometry tiny_geo(int vocab) {
  ModelGeometry g;
  g.layers = 2;
  g.hidden = 16;
  g.q_heads = 4;
  g.kv_heads = 2;
  g.head_dim = 4;
  g.vocab = vocab;
  g.max_seq = 64;
  g.mlp_inner = 32;
  return g;
}

LcfConfig tiny_adapter_cfg() {
  LcfConfig c;
  c.latent = 8;
  c.sharer_kv_heads = 2;
  c.sharer_head_dim = 4;
  c.recv_layers = 2;
  c.recv_kv_heads = 2;
  c.recv_head_dim = 4;
  c.dropout = 0.0f;
  c.gate_logit_init = 1.0f;
  return c;
}

std::vector<TrainItem> tiny_items(int n, uint64_t seed) {
  Rng rng(seed, Rng::kData);
  std::vector<TrainItem> items;
  for (int i = 0; i < n; ++i) {
    TrainItem it;
    it.sharer_tokens = {1, static_cast<int>(rng.uniform_int(8)) + 2,
                        static_cast<int>(rng.uniform_int(8)) + 2};
    it.receiver_prompt = {1, static_cast<int>(rng.uniform_int(8)) + 2, 4, 5};
    it.targets = {static_cast<int>(rng.uniform_int(8)) + 2, 6};
    it.natural_spans = {{0, 2}, {2, 3}};
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace

TEST_CASE("linear warmup schedule") {
  CHECK(lr_at_step(15, 300, 1e-4f, 0.1f) == doctest::Approx(0.5e-4));
  CHECK(lr_at_step(30, 300, 1e-4f, 0.1f) == doctest::Approx(1e-4));
  CHECK(lr_at_step(300, 300, 1e-4f, 0.1f) == 0.0f);
  CHECK(lr_at_step(0, 300, 1e-4f, 0.1f) == 0.0f);
  CHECK(lr_at_step(165, 300, 1e-4f, 0.1f) == doctest::Approx(0.5e-4));
  CHECK_THROWS_AS(lr_at_step(301, 300, 1e-4f, 0.1f), ContractError);
}

TEST_CASE("adamw decay-only and first-step behavior") {
  AdamW opt;
  Tensor p = Tensor::from({1}, {1.0f});
  Tensor zero_grad = Tensor::from({1}, {0.0f});
  opt.step("p", p, zero_grad, 1, 1e-4f, 0.01f);
  CHECK(p.ptr()[0] == doctest::Approx(1.0 - 1e-6).epsilon(1e-7));
  CHECK(p.ptr()[0] < 1.0f);

  // first step with a scalar gradient moves by about -lr * sign(g)
  AdamW opt2;
  Tensor q = Tensor::from({1}, {0.0f});
  Tensor g = Tensor::from({1}, {0.37f});
  opt2.step("q", q, g, 1, 1e-3f, 0.0f);
  CHECK(q.ptr()[0] == doctest::Approx(-1e-3).epsilon(1e-3));

  Tensor q2 = Tensor::from({1}, {0.0f});
  Tensor gneg = Tensor::from({1}, {-0.002f});
  AdamW opt3;
  opt3.step("q2", q2, gneg, 1, 1e-3f, 0.0f);
  CHECK(q2.ptr()[0] == doctest::Approx(1e-3).epsilon(1e-3));
}

TEST_CASE("identical runs produce identical parameters") {
  auto run = [&]() {
    ToyLm lm = ToyLm::init(tiny_geo(16), 9);
    std::vector<LmItem> items = {{{1, 2, 3}, {4, 6}}, {{1, 3, 2}, {5, 6}}};
    TrainConfig cfg;
    cfg.lr = 1e-3f;
    cfg.max_steps = 20;
    cfg.batch = 2;
    cfg.seed = 5;
    train_lm(lm, items, cfg);
    return lm.weights_hash();
  };
  CHECK(run() == run());
}

TEST_CASE("global norm clipping") {
  Tensor a = Tensor::from({2}, {3.0f, 0.0f});
  Tensor b = Tensor::from({1}, {4.0f});
  std::vector<Tensor*> grads = {&a, &b};
  float norm = clip_global_norm(grads, 1.0f);
  CHECK(norm == doctest::Approx(5.0));
  double post = std::sqrt(a.ptr()[0] * a.ptr()[0] + a.ptr()[1] * a.ptr()[1] + b.ptr()[0] * b.ptr()[0]);
  CHECK(post == doctest::Approx(1.0).epsilon(1e-6));

  Tensor c = Tensor::from({1}, {0.5f});
  std::vector<Tensor*> g2 = {&c};
  CHECK(clip_global_norm(g2, 1.0f) == doctest::Approx(0.5));
  CHECK(c.ptr()[0] == 0.5f);  // under the cap: untouched
}

TEST_CASE("checkpoint round-trips byte-identically") {
  LcfAdapter a = LcfAdapter::init(tiny_adapter_cfg(), 3);
  Checkpoint ck = checkpoint_of_adapter(a);
  std::string bytes = ck.serialize();
  Checkpoint back = Checkpoint::deserialize(bytes);
  CHECK(back.serialize() == bytes);

  auto restored = adapter_from_checkpoint(back);
  CHECK(restored->kind() == "lcf");
  CHECK(restored->param_count() == a.param_count());
  Checkpoint again = checkpoint_of_adapter(*restored);
  CHECK(again.serialize() == bytes);
}

TEST_CASE("checkpoint validates magic and truncation") {
  LcfAdapter a = LcfAdapter::init(tiny_adapter_cfg(), 3);
  std::string bytes = checkpoint_of_adapter(a).serialize();
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad), IoError);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), IoError);
}

TEST_CASE("pruned checkpoints omit dropped layers and load as closed gates") {
  LcfConfig cfg = tiny_adapter_cfg();
  LcfAdapter a = LcfAdapter::init(cfg, 3);
  a.drop_layer(0);
  Checkpoint ck = checkpoint_of_adapter(a);
  for (const auto& [name, t] : ck.tensors) CHECK(name.rfind("layer.00.", 0) != 0);
  auto restored = adapter_from_checkpoint(ck);
  CHECK_FALSE(restored->layer_present(0));
  CHECK(restored->layer_present(1));
  auto [gk, gv] = restored->gate_logits(0);
  CHECK(gk <= 0.0f);
  CHECK(gv <= 0.0f);
}

TEST_CASE("baseline fuser checkpoints round-trip too") {
  C2cConfig cfg;
  cfg.sharer_kv_heads = 2;
  cfg.sharer_head_dim = 4;
  cfg.recv_layers = 2;
  cfg.recv_kv_heads = 2;
  cfg.recv_head_dim = 4;
  cfg.recv_hidden = 8;
  C2cAdapter a = C2cAdapter::init(cfg, 5);
  std::string bytes = checkpoint_of_adapter(a).serialize();
  auto back = adapter_from_checkpoint(Checkpoint::deserialize(bytes));
  CHECK(back->kind() == "c2c");
  CHECK(checkpoint_of_adapter(*back).serialize() == bytes);
}

TEST_CASE("model checkpoint round-trip preserves weights") {
  ToyLm lm = ToyLm::init(tiny_geo(16), 21);
  Checkpoint ck = checkpoint_of_model(lm);
  ToyLm back = model_from_checkpoint(Checkpoint::deserialize(ck.serialize()));
  CHECK(back.weights_hash() == lm.weights_hash());
}

TEST_CASE("untrained receiver with uniform logits scores ln V") {
  const int vocab = 32;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);  // unembed zero => uniform logits
  NoneAdapter none;
  auto items = tiny_items(4, 7);
  std::vector<const TrainItem*> batch;
  for (auto& it : items) batch.push_back(&it);
  LossPlan plan;
  plan.mode = FuseMode::kEval;
  Tensor loss = fused_ntp_loss(sharer, receiver, none, batch, plan);
  CHECK(loss.scalar() == doctest::Approx(std::log(32.0)).epsilon(1e-5));
}

TEST_CASE("hard-closed gates reproduce the baseline loss exactly") {
  const int vocab = 32;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  receiver.unembed = init_kaiming_scaled({vocab, 16}, 16, 0.5f, *(new Rng(3, Rng::kInit)));
  LcfConfig cfg = tiny_adapter_cfg();
  cfg.gate_logit_init = -2.0f;  // hard gates closed at eval
  LcfAdapter adapter = LcfAdapter::init(cfg, 4);
  NoneAdapter none;
  auto items = tiny_items(4, 9);
  std::vector<const TrainItem*> batch;
  for (auto& it : items) batch.push_back(&it);
  LossPlan plan;
  plan.mode = FuseMode::kEval;
  float fused = fused_ntp_loss(sharer, receiver, adapter, batch, plan).scalar();
  float baseline = fused_ntp_loss(sharer, receiver, none, batch, plan).scalar();
  CHECK(fused == baseline);
}

TEST_CASE("fused loss gradient matches finite differences for the pooled adapter") {
  const int vocab = 24;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  Rng wr(5, Rng::kInit);
  receiver.unembed = init_kaiming_scaled({vocab, 16}, 16, 0.5f, wr);
  LcfConfig cfg = tiny_adapter_cfg();
  LcfxAdapter adapter = LcfxAdapter::init(cfg, 6);
  auto items = tiny_items(2, 13);
  std::vector<const TrainItem*> batch;
  for (auto& it : items) batch.push_back(&it);
  SpanSchemeSpec natural{SpanSchemeKind::kNatural, 0, 0};

  LossPlan plan;
  plan.mode = FuseMode::kTrain;  // differentiable gates, no noise rngs
  plan.temperature = 1.0f;
  plan.span_spec = &natural;

  Tape tape;
  auto view = adapter.clone();
  view->track(tape);
  Tensor loss = fused_ntp_loss(sharer, receiver, *view, batch, plan);
  auto grads = tape.gradients(loss);

  auto loss_value = [&]() {
    auto v = adapter.clone();
    return fused_ntp_loss(sharer, receiver, *v, batch, plan).scalar();
  };

  auto base_params = adapter.named_params();
  auto view_params = view->named_params();
  Rng pick(17);
  int checked = 0;
  for (int rep = 0; rep < 24; ++rep) {
    size_t pi = static_cast<size_t>(pick.uniform_int(base_params.size()));
    Tensor* pt = base_params[pi].second;
    int64_t idx = static_cast<int64_t>(pick.uniform_int(static_cast<uint64_t>(pt->numel())));
    double analytic = grads.at(view_params[pi].second->node).ptr()[idx];
    double fd = gradcheck::fd_grad(loss_value, pt->ptr() + idx);
    CHECK(gradcheck::rel_err(analytic, fd) <= 1e-3);
    ++checked;
  }
  CHECK(checked == 24);
}

TEST_CASE("training is deterministic and keeps the base models frozen") {
  const int vocab = 24;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  auto items = tiny_items(8, 31);
  auto eval_items = tiny_items(3, 32);
  SpanSchemeSpec natural{SpanSchemeKind::kNatural, 0, 0};

  auto run = [&]() {
    LcfxAdapter adapter = LcfxAdapter::init(tiny_adapter_cfg(), 6);
    TrainConfig cfg;
    cfg.lr = 1e-3f;
    cfg.max_steps = 12;
    cfg.batch = 4;
    cfg.grad_accum = 2;
    cfg.seed = 3;
    cfg.eval_interval = 6;
    cfg.dropout = 0.1f;
    TrainResult res = train_adapter(cfg, sharer, receiver, adapter, items, eval_items,
                                    AlignStrategy::kFirst, &natural);
    CHECK(res.sharer_hash_before == res.sharer_hash_after);
    CHECK(res.receiver_hash_before == res.receiver_hash_after);
    CHECK(res.trace.size() == 12);
    CHECK(res.gates.size() == 12 * 2);
    return std::make_pair(checkpoint_of_adapter(adapter).serialize(), res.trace);
  };
  auto [bytes_a, trace_a] = run();
  auto [bytes_b, trace_b] = run();
  CHECK(bytes_a == bytes_b);
  REQUIRE(trace_a.size() == trace_b.size());
  for (size_t i = 0; i < trace_a.size(); ++i) CHECK(trace_a[i].train_loss == trace_b[i].train_loss);
}

TEST_CASE("training moves the loss down on a learnable toy pattern") {
  // sharer context directly encodes the answer; receiver prompt is constant
  const int vocab = 24;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  Rng wr(5, Rng::kInit);
  receiver.unembed = init_kaiming_scaled({vocab, 16}, 16, 0.1f, wr);
  Rng rng(77, Rng::kData);
  std::vector<TrainItem> items;
  for (int i = 0; i < 32; ++i) {
    TrainItem it;
    int answer = 2 + static_cast<int>(rng.uniform_int(6));
    it.sharer_tokens = {1, answer, answer};
    it.receiver_prompt = {1, 9, 4, 5};
    it.targets = {answer, 6};
    it.natural_spans = {{0, 3}};
    items.push_back(std::move(it));
  }
  LcfxAdapter adapter = LcfxAdapter::init(tiny_adapter_cfg(), 6);
  SpanSchemeSpec natural{SpanSchemeKind::kNatural, 0, 0};
  double before = eval_ntp_loss(sharer, receiver, adapter, items, AlignStrategy::kFirst, &natural);
  TrainConfig cfg;
  cfg.lr = 3e-3f;
  cfg.max_steps = 120;
  cfg.batch = 8;
  cfg.seed = 3;
  cfg.eval_interval = 60;
  cfg.dropout = 0.0f;
  train_adapter(cfg, sharer, receiver, adapter, items, {}, AlignStrategy::kFirst, &natural);
  double after = eval_ntp_loss(sharer, receiver, adapter, items, AlignStrategy::kFirst, &natural);
  CHECK(after < before);
}

TEST_CASE("non-finite loss aborts with the step index") {
  const int vocab = 24;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  LcfxAdapter adapter = LcfxAdapter::init(tiny_adapter_cfg(), 6);
  adapter.layer(0).w_down.ptr()[0] = std::numeric_limits<float>::quiet_NaN();
  auto items = tiny_items(4, 41);
  SpanSchemeSpec natural{SpanSchemeKind::kNatural, 0, 0};
  TrainConfig cfg;
  cfg.max_steps = 3;
  cfg.batch = 2;
  CHECK_THROWS_WITH_AS(
      train_adapter(cfg, sharer, receiver, adapter, items, {}, AlignStrategy::kFirst, &natural),
      doctest::Contains("step 1"), NumericError);
}

TEST_CASE("empty target span is rejected") {
  const int vocab = 24;
  ToyLm sharer = ToyLm::init(tiny_geo(vocab), 1);
  ToyLm receiver = ToyLm::init(tiny_geo(vocab), 2);
  NoneAdapter none;
  TrainItem bad;
  bad.sharer_tokens = {1, 2};
  bad.receiver_prompt = {1, 2, 3};
  std::vector<const TrainItem*> batch = {&bad};
  LossPlan plan;
  CHECK_THROWS_AS(fused_ntp_loss(sharer, receiver, none, batch, plan), ContractError);
}
