#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lcf/errors.hpp"
#include "lcf/toy_lm.hpp"
#include "lcf/trainer.hpp"

using namespace lcf;

namespace {

ModelGeometry tiny_geo() {
  ModelGeometry g;
  g.layers = 2;
  g.hidden = 16;
  g.q_heads = 4;
  g.kv_heads = 2;
  g.head_dim = 4;
  g.vocab = 32;
  g.max_seq = 64;
  g.mlp_inner = 32;
  return g;
}

// Naive per-head attention reference with the explicit GQA head map
// q -> floor(q / (H_q / H_kv)).
std::vector<float> gqa_reference(const Tensor& q, const Tensor& k, const Tensor& v, int group) {
  int hq = q.dim(1), t = q.dim(2), d = q.dim(3);
  int s = k.dim(1);  // k, v arrive as (H_kv, S, D)
  std::vector<float> out(static_cast<size_t>(hq) * t * d, 0.0f);
  for (int h = 0; h < hq; ++h) {
    int kvh = h / group;
    for (int i = 0; i < t; ++i) {
      std::vector<double> scores(static_cast<size_t>(s), -1e30);
      double mx = -1e30;
      int allowed = s - t + i;  // causal: cached + current
      for (int j = 0; j <= allowed; ++j) {
        double acc = 0.0;
        for (int dd = 0; dd < d; ++dd)
          acc += static_cast<double>(q.ptr()[(h * t + i) * d + dd]) * k.ptr()[(kvh * s + j) * d + dd];
        scores[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (int j = 0; j <= allowed; ++j) denom += std::exp(scores[static_cast<size_t>(j)] - mx);
      for (int j = 0; j <= allowed; ++j) {
        double w = std::exp(scores[static_cast<size_t>(j)] - mx) / denom;
        for (int dd = 0; dd < d; ++dd)
          out[(static_cast<size_t>(h) * t + i) * d + dd] +=
              static_cast<float>(w * v.ptr()[(kvh * s + j) * d + dd]);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("prefill cache shapes") {
  ModelGeometry g;
  g.layers = 2;
  g.hidden = 8;
  g.q_heads = 2;
  g.kv_heads = 2;
  g.head_dim = 4;
  g.vocab = 16;
  g.max_seq = 32;
  g.mlp_inner = 16;
  ToyLm lm = ToyLm::init(g, 1);
  auto r = prefill_with_cache(lm, {1, 2, 3, 4, 5});
  REQUIRE(r.cache.layers.size() == 2);
  for (const auto& l : r.cache.layers) {
    CHECK(l.k.shape == Shape{1, 2, 5, 4});
    CHECK(l.v.shape == Shape{1, 2, 5, 4});
  }
  CHECK(r.final_logits.shape == Shape{16});
}

TEST_CASE("prefill determinism") {
  ToyLm a = ToyLm::init(tiny_geo(), 42);
  ToyLm b = ToyLm::init(tiny_geo(), 42);
  auto ra = prefill_with_cache(a, {3, 1, 4, 1, 5});
  auto rb = prefill_with_cache(b, {3, 1, 4, 1, 5});
  for (int i = 0; i < 32; ++i) CHECK(ra.final_logits.ptr()[i] == rb.final_logits.ptr()[i]);
}

TEST_CASE("token id out of vocabulary is rejected") {
  ToyLm lm = ToyLm::init(tiny_geo(), 42);
  CHECK_THROWS_AS(prefill_with_cache(lm, {1, 99}), InputError);
}

TEST_CASE("prefix of a longer prefill equals the shorter prefill") {
  ToyLm lm = ToyLm::init(tiny_geo(), 7);
  auto r6 = prefill_with_cache(lm, {2, 7, 1, 8, 2, 8});
  auto r5 = prefill_with_cache(lm, {2, 7, 1, 8, 2});
  for (size_t li = 0; li < r5.cache.layers.size(); ++li) {
    const Tensor& k6 = r6.cache.layers[li].k;
    const Tensor& k5 = r5.cache.layers[li].k;
    for (int h = 0; h < 2; ++h)
      for (int n = 0; n < 5; ++n)
        for (int d = 0; d < 4; ++d) {
          float a = k6.ptr()[(h * 6 + n) * 4 + d];
          float b = k5.ptr()[(h * 5 + n) * 4 + d];
          CHECK(std::fabs(a - b) < 1e-6f);
        }
  }
}

TEST_CASE("appending tokens never rewrites existing cache entries") {
  ToyLm lm = ToyLm::init(tiny_geo(), 7);
  auto r = prefill_with_cache(lm, {2, 7, 1});
  std::vector<float> before(r.cache.layers[0].k.ptr(), r.cache.layers[0].k.ptr() + r.cache.layers[0].k.numel());
  forward_block(lm, r.cache, {5, 9});
  CHECK(r.cache.seq_len() == 5);
  const Tensor& k = r.cache.layers[0].k;
  // first three positions bitwise unchanged
  for (int h = 0; h < 2; ++h)
    for (int n = 0; n < 3; ++n)
      for (int d = 0; d < 4; ++d)
        CHECK(k.ptr()[(h * 5 + n) * 4 + d] == before[static_cast<size_t>((h * 3 + n) * 4 + d)]);
}

TEST_CASE("grouped-query attention matches a per-head reference") {
  // One layer, no MLP interference: compare the attention context directly by
  // reproducing the block computation on the cached K/V.
  ModelGeometry g = tiny_geo();
  ToyLm lm = ToyLm::init(g, 19);
  TokenSequence tokens = {1, 2, 3, 4, 5, 6};
  auto r = prefill_with_cache(lm, tokens);

  // recompute layer-0 q for the last position through public ops
  Tensor x = gather_rows(lm.tok_embed, tokens);
  Tensor xn = rms_norm(x, lm.layers[0].attn_norm, 1e-5f);
  Tensor q = rope(seq_to_heads(linear(xn, lm.layers[0].wq), g.q_heads), 0, 10000.0f);

  Tensor kq = repeat_heads(r.cache.layers[0].k, g.gqa_group());
  Tensor vq = repeat_heads(r.cache.layers[0].v, g.gqa_group());
  Tensor mask = Tensor::zeros({6, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) mask.ptr()[i * 6 + j] = -1e30f;
  Tensor probs = softmax_lastdim(add_mask(mul_scalar(matmul_nt(q, kq), 0.5f), mask));
  Tensor ctx = matmul(probs, vq);

  auto ref = gqa_reference(q, reshape(r.cache.layers[0].k, {2, 6, 4}),
                           reshape(r.cache.layers[0].v, {2, 6, 4}), g.gqa_group());
  for (int64_t i = 0; i < ctx.numel(); ++i)
    CHECK(std::fabs(ctx.ptr()[i] - ref[static_cast<size_t>(i)]) < 1e-5f);
}

TEST_CASE("decode_greedy basics") {
  ToyLm lm = ToyLm::init(tiny_geo(), 3);
  auto r = prefill_with_cache(lm, {1, 2, 3});
  KVCache c1 = r.cache;
  TokenSequence none = decode_greedy(lm, c1, r.final_logits, 0, -1);
  CHECK(none.empty());

  auto r2 = prefill_with_cache(lm, {1, 2, 3});
  auto r3 = prefill_with_cache(lm, {1, 2, 3});
  TokenSequence a = decode_greedy(lm, r2.cache, r2.final_logits, 6, -1);
  TokenSequence b = decode_greedy(lm, r3.cache, r3.final_logits, 6, -1);
  CHECK(a == b);
  CHECK(a.size() == 6);
}

TEST_CASE("a model overfit on one continuation emits it greedily") {
  ModelGeometry g = tiny_geo();
  ToyLm lm = ToyLm::init(g, 5);
  std::vector<LmItem> items = {{{1, 9, 4, 2}, {7, 7, 3, 6}}};
  TrainConfig cfg;
  cfg.lr = 3e-3f;
  cfg.max_steps = 400;
  cfg.batch = 1;
  cfg.weight_decay = 0.0f;
  cfg.seed = 0;
  auto trace = train_lm(lm, items, cfg);
  CHECK(trace.back() < 0.05f);
  auto r = prefill_with_cache(lm, {1, 9, 4, 2});
  TokenSequence out = decode_greedy(lm, r.cache, r.final_logits, 4, -1);
  CHECK(out == TokenSequence{7, 7, 3, 6});
}

TEST_CASE("mcq_logit_score picks the max logit with low-index ties") {
  Tensor logits = Tensor::zeros({16});
  logits.ptr()[7] = 2.0f;
  logits.ptr()[9] = 1.0f;
  CHECK(mcq_logit_score(logits, {7, 9}) == 0);

  Tensor tie = Tensor::zeros({16});
  tie.ptr()[3] = 1.5f;
  tie.ptr()[11] = 1.5f;
  CHECK(mcq_logit_score(tie, {11, 3}) == 0);  // equal logits: first listed wins
  CHECK(mcq_logit_score(tie, {3, 11}) == 0);

  CHECK_THROWS_AS(mcq_logit_score(logits, {7, 7}), InputError);

  // linear-scan oracle on random logits
  Rng rng(21);
  Tensor rl = Tensor::zeros({16});
  for (int i = 0; i < 16; ++i) rl.ptr()[i] = rng.normal();
  std::vector<int> choices = {2, 5, 8, 13};
  int best = 0;
  for (size_t i = 1; i < choices.size(); ++i)
    if (rl.ptr()[choices[i]] > rl.ptr()[choices[static_cast<size_t>(best)]]) best = static_cast<int>(i);
  CHECK(mcq_logit_score(rl, choices) == best);
}

TEST_CASE("fresh unembedding gives exactly uniform logits") {
  ToyLm lm = ToyLm::init(tiny_geo(), 11);
  auto r = prefill_with_cache(lm, {1, 2, 3});
  for (int i = 0; i < 32; ++i) CHECK(r.final_logits.ptr()[i] == 0.0f);
}

TEST_CASE("weights hash is stable and sensitive") {
  ToyLm a = ToyLm::init(tiny_geo(), 42);
  ToyLm b = ToyLm::init(tiny_geo(), 42);
  CHECK(a.weights_hash() == b.weights_hash());
  b.layers[0].wq.ptr()[0] += 1e-3f;
  CHECK(a.weights_hash() != b.weights_hash());
}
