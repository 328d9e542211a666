#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lcf/accounting.hpp"
#include "lcf/errors.hpp"
#include "lcf/lcfx_pool.hpp"

using namespace lcf;

namespace {

Tensor random_cache(int heads, int n, int d, Rng& rng) {
  Tensor t = Tensor::zeros({1, heads, n, d});
  for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("token window partitions") {
  SpanSchemeSpec w30{SpanSchemeKind::kTokenWindow, 3, 0};
  SpanScheme s = partition_spans(8, w30);
  REQUIRE(s.count() == 3);
  CHECK(s.spans[0].begin == 0);
  CHECK(s.spans[0].end == 3);
  CHECK(s.spans[2].begin == 6);
  CHECK(s.spans[2].end == 8);

  SpanSchemeSpec w42{SpanSchemeKind::kTokenWindow, 4, 2};
  SpanScheme o = partition_spans(10, w42);
  REQUIRE(o.count() == 4);
  CHECK(o.spans[0].begin == 0);
  CHECK(o.spans[1].begin == 2);
  CHECK(o.spans[2].begin == 4);
  CHECK(o.spans[3].begin == 6);
  CHECK(o.spans[3].end == 10);

  CHECK_THROWS_AS(partition_spans(10, SpanSchemeSpec{SpanSchemeKind::kTokenWindow, 3, 3}), ContractError);
}

TEST_CASE("single and halves partitions") {
  SpanScheme single = partition_spans(9, SpanSchemeSpec{SpanSchemeKind::kSingle});
  REQUIRE(single.count() == 1);
  CHECK(single.spans[0].begin == 0);
  CHECK(single.spans[0].end == 9);

  std::vector<Span> natural = {{0, 4}, {4, 9}};
  SpanScheme halves = partition_spans(9, SpanSchemeSpec{SpanSchemeKind::kHalves}, natural);
  REQUIRE(halves.count() == 4);
  CHECK(halves.spans[0].end == 2);
  CHECK(halves.spans[1].end == 4);
  CHECK(halves.spans[2].end == 6);
  CHECK(halves.spans[3].end == 9);

  // natural spans must tile the sequence
  CHECK_THROWS_AS(partition_spans(9, SpanSchemeSpec{SpanSchemeKind::kNatural}, {{0, 4}, {5, 9}}),
                  ContractError);
}

TEST_CASE("pool output shapes") {
  Rng rng(3);
  Tensor k = random_cache(2, 7, 4, rng);
  Tensor v = random_cache(2, 7, 4, rng);
  Tensor q = init_kaiming_scaled({2, 4}, 4, 0.5f, rng);
  std::vector<Span> spans = {{0, 3}, {3, 5}, {5, 7}};
  auto [kt, vt] = pool_within_spans(q, k, v, spans);
  CHECK(kt.shape == Shape{1, 2, 3, 4});
  CHECK(vt.shape == Shape{1, 2, 3, 4});

  Tensor ql = init_kaiming_scaled({2, 4}, 4, 0.5f, rng);
  auto [ks, vs] = pool_across_spans(ql, kt, vt);
  CHECK(ks.shape == Shape{1, 2, 1, 4});
  CHECK(vs.shape == Shape{1, 2, 1, 4});
}

TEST_CASE("single-token span returns that token exactly") {
  Rng rng(5);
  Tensor k = random_cache(2, 4, 4, rng);
  Tensor v = random_cache(2, 4, 4, rng);
  Tensor q = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  auto [kt, vt] = pool_within_spans(q, k, v, {{2, 3}});
  for (int h = 0; h < 2; ++h)
    for (int d = 0; d < 4; ++d) {
      CHECK(kt.ptr()[h * 4 + d] == k.ptr()[(h * 4 + 2) * 4 + d]);
      CHECK(vt.ptr()[h * 4 + d] == v.ptr()[(h * 4 + 2) * 4 + d]);
    }
}

TEST_CASE("a span of identical tokens pools to the common value") {
  Rng rng(7);
  Tensor k = Tensor::zeros({1, 2, 5, 4});
  Tensor v = Tensor::zeros({1, 2, 5, 4});
  for (int h = 0; h < 2; ++h)
    for (int n = 0; n < 5; ++n)
      for (int d = 0; d < 4; ++d) {
        k.ptr()[(h * 5 + n) * 4 + d] = 0.3f * (h + 1) + 0.1f * d;
        v.ptr()[(h * 5 + n) * 4 + d] = -0.2f * (h + 1) + 0.05f * d;
      }
  Tensor q = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  auto [kt, vt] = pool_within_spans(q, k, v, {{0, 5}});
  for (int h = 0; h < 2; ++h)
    for (int d = 0; d < 4; ++d) {
      CHECK(kt.ptr()[h * 4 + d] == doctest::Approx(0.3f * (h + 1) + 0.1f * d).epsilon(1e-5));
      CHECK(vt.ptr()[h * 4 + d] == doctest::Approx(-0.2f * (h + 1) + 0.05f * d).epsilon(1e-5));
    }
}

TEST_CASE("pooled coordinates stay inside the per-coordinate input range") {
  Rng rng(9);
  Tensor k = random_cache(2, 9, 4, rng);
  Tensor v = random_cache(2, 9, 4, rng);
  Tensor q = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  std::vector<Span> spans = {{0, 4}, {4, 9}};
  auto [kt, vt] = pool_within_spans(q, k, v, spans);
  for (int h = 0; h < 2; ++h)
    for (size_t p = 0; p < spans.size(); ++p)
      for (int d = 0; d < 4; ++d) {
        float lo = 1e30f, hi = -1e30f;
        for (int n = spans[p].begin; n < spans[p].end; ++n) {
          lo = std::min(lo, k.ptr()[(h * 9 + n) * 4 + d]);
          hi = std::max(hi, k.ptr()[(h * 9 + n) * 4 + d]);
        }
        float got = kt.ptr()[(h * 2 + static_cast<int>(p)) * 4 + d];
        CHECK(got >= lo - 1e-6f);
        CHECK(got <= hi + 1e-6f);
      }
}

TEST_CASE("P=1 cross-span pooling is the identity on the single summary") {
  Rng rng(11);
  Tensor k = random_cache(2, 6, 4, rng);
  Tensor v = random_cache(2, 6, 4, rng);
  Tensor q = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  auto [kt, vt] = pool_within_spans(q, k, v, {{0, 6}});
  Tensor ql = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  auto [ks, vs] = pool_across_spans(ql, kt, vt);
  for (int64_t i = 0; i < ks.numel(); ++i) {
    CHECK(ks.ptr()[i] == doctest::Approx(kt.ptr()[i]).epsilon(1e-6));
    CHECK(vs.ptr()[i] == doctest::Approx(vt.ptr()[i]).epsilon(1e-6));
  }
}

TEST_CASE("pool parameter count is independent of the span count") {
  LcfConfig cfg;
  cfg.latent = 8;
  cfg.sharer_kv_heads = 2;
  cfg.sharer_head_dim = 4;
  cfg.recv_layers = 3;
  cfg.recv_kv_heads = 2;
  cfg.recv_head_dim = 4;
  LcfxAdapter a = LcfxAdapter::init(cfg, 1);

  GeometrySpec geom{cfg.sharer_kv_heads, cfg.sharer_head_dim, cfg.recv_layers, cfg.recv_kv_heads,
                    cfg.recv_head_dim};
  int64_t pool_params = a.param_count() - lcf_params_total(geom, cfg.latent);
  CHECK(pool_params == lcfx_pool_params_total(geom));

  // one checkpoint, several span counts: parameter shapes never change
  Rng rng(13);
  KVCache sharer;
  sharer.layers.resize(3);
  for (auto& l : sharer.layers) {
    l.k = random_cache(2, 12, 4, rng);
    l.v = random_cache(2, 12, 4, rng);
  }
  for (int p : {1, 2, 5, 10}) {
    std::vector<Span> spans;
    int step = 12 / p;
    for (int i = 0; i < p; ++i) spans.push_back({i * step, i == p - 1 ? 12 : (i + 1) * step});
    auto [ks, vs] = a.pooled_summary(0, sharer, spans);
    CHECK(ks.shape == Shape{1, 2, 1, 4});
    CHECK(a.param_count() == lcf_params_total(geom, cfg.latent) + lcfx_pool_params_total(geom));
  }
}

TEST_CASE("broadcast contract: every receiver position sees the same summary") {
  LcfConfig cfg;
  cfg.latent = 8;
  cfg.sharer_kv_heads = 2;
  cfg.sharer_head_dim = 4;
  cfg.recv_layers = 2;
  cfg.recv_kv_heads = 2;
  cfg.recv_head_dim = 4;
  cfg.gate_logit_init = 2.0f;
  LcfxAdapter a = LcfxAdapter::init(cfg, 3);
  Rng rng(15);
  KVCache sharer;
  sharer.layers.resize(2);
  for (auto& l : sharer.layers) {
    l.k = random_cache(2, 8, 4, rng);
    l.v = random_cache(2, 8, 4, rng);
  }
  // receiver cache with identical rows at every position: the fused residual
  // must then be identical across positions too
  KVCache recv;
  recv.layers.resize(2);
  for (auto& l : recv.layers) {
    l.k = Tensor::zeros({1, 2, 5, 4});
    l.v = Tensor::zeros({1, 2, 5, 4});
    for (int h = 0; h < 2; ++h)
      for (int n = 0; n < 5; ++n)
        for (int d = 0; d < 4; ++d) {
          l.k.ptr()[(h * 5 + n) * 4 + d] = 0.1f * (d + 1) * (h + 1);
          l.v.ptr()[(h * 5 + n) * 4 + d] = -0.2f * (d + 1) * (h + 1);
        }
  }
  std::vector<Span> spans = {{0, 4}, {4, 8}};
  FusePlan plan;
  plan.mode = FuseMode::kEval;
  plan.spans = &spans;
  KVCache fused = a.fuse(sharer, recv, plan);
  for (const auto& l : fused.layers)
    for (int h = 0; h < 2; ++h)
      for (int n = 1; n < 5; ++n)
        for (int d = 0; d < 4; ++d)
          CHECK(l.k.ptr()[(h * 5 + n) * 4 + d] == doctest::Approx(l.k.ptr()[(h * 5 + 0) * 4 + d]));
}

TEST_CASE("empty span is rejected") {
  Rng rng(17);
  Tensor k = random_cache(2, 5, 4, rng);
  Tensor v = random_cache(2, 5, 4, rng);
  Tensor q = init_kaiming_scaled({2, 4}, 4, 1.0f, rng);
  CHECK_THROWS_AS(pool_within_spans(q, k, v, {{2, 2}}), ContractError);
  CHECK_THROWS_AS(pool_within_spans(q, k, v, {{3, 7}}), ContractError);
}
