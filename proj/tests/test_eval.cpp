#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "lcf/errors.hpp"
#include "lcf/eval_harness.hpp"
#include "lcf/trainer.hpp"

using namespace lcf;

namespace {

// Exhaustive oracle: p = (# assignments of n discordant coin flips with at
// least b heads) / 2^n, enumerated over all 2^n outcomes.
double mcnemar_enumeration(int b, int c) {
  int n = b + c;
  if (n == 0) return 1.0;
  uint64_t hits = 0;
  for (uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    int heads = 0;
    for (int i = 0; i < n; ++i) heads += (mask >> i) & 1;
    if (heads >= b) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(1ULL << n);
}

}  // namespace

TEST_CASE("mcnemar worked examples") {
  CHECK(mcnemar_exact_p_counts(5, 1) == doctest::Approx(7.0 / 64.0).epsilon(1e-12));
  CHECK(mcnemar_exact_p_counts(0, 0) == 1.0);
  CHECK(mcnemar_exact_p_counts(10, 0) == doctest::Approx(1.0 / 1024.0).epsilon(1e-12));
}

TEST_CASE("mcnemar equals exhaustive enumeration for all b+c <= 20") {
  for (int n = 0; n <= 20; ++n)
    for (int b = 0; b <= n; ++b)
      CHECK(mcnemar_exact_p_counts(b, n - b) == doctest::Approx(mcnemar_enumeration(b, n - b)).epsilon(1e-12));
}

TEST_CASE("mcnemar large-n path is sane") {
  double p = mcnemar_exact_p_counts(60, 40);  // n=100 uses the log-space tail
  CHECK(p > 0.0);
  CHECK(p < 0.05);
  CHECK(mcnemar_exact_p_counts(50, 50) == doctest::Approx(0.5397946).epsilon(1e-4));
}

TEST_CASE("join and paired statistics") {
  std::vector<std::pair<int, int>> a = {{0, 1}, {1, 0}, {2, 1}, {5, 1}};
  std::vector<std::pair<int, int>> b = {{1, 0}, {0, 0}, {2, 1}, {7, 1}};
  PairedOutcomes j = join_outcomes(a, b);
  REQUIRE(j.ids.size() == 3);  // id 5 and 7 unmatched
  CHECK(orf_accuracy(j) == doctest::Approx(2.0 / 3.0));
  // b (A right, B wrong) = 1, c = 0
  CHECK(mcnemar_exact_p(j) == doctest::Approx(0.5));

  std::vector<std::pair<int, int>> dup = {{0, 1}, {0, 0}};
  CHECK_THROWS_AS(join_outcomes(dup, b), InputError);
}

TEST_CASE("orf dominates both methods") {
  PairedOutcomes j;
  j.ids = {0, 1, 2};
  j.correct_a = {1, 0, 1};
  j.correct_b = {0, 0, 1};
  CHECK(orf_accuracy(j) == doctest::Approx(2.0 / 3.0));
  j.correct_a = {0, 0, 0};
  j.correct_b = {0, 0, 0};
  CHECK(orf_accuracy(j) == 0.0);
  j.correct_b = {1, 1, 1};
  CHECK(orf_accuracy(j) == 1.0);
}

TEST_CASE("significance markers") {
  CHECK(significance_marker(0.0005) == "***");
  CHECK(significance_marker(0.005) == "**");
  CHECK(significance_marker(0.03) == "*");
  CHECK(significance_marker(0.2) == "");
}

TEST_CASE("weighted average reproduces the published row") {
  std::vector<double> acc = {42.54, 54.00, 50.80, 19.57};
  std::vector<double> w = {5632, 1150, 500, 12032};
  CHECK(weighted_average(acc, w) == doctest::Approx(29.13).epsilon(0.0004));
  CHECK(weighted_average({3.0, 5.0}, {1.0, 1.0}) == doctest::Approx(4.0));
  CHECK(weighted_average({7.25}, {3.0}) == doctest::Approx(7.25));
  CHECK_THROWS_AS(weighted_average({1.0}, {0.0}), ContractError);
}

TEST_CASE("exact match normalization") {
  Vocab v{16, 16};
  CHECK(exact_match({v.value(3)}, {v.value(3)}, v) == 1);
  CHECK(exact_match({v.value(3)}, {v.value(4)}, v) == 0);
  CHECK(exact_match({v.value(3), Vocab::kSep}, {v.value(3)}, v) == 0);
  CHECK(normalize_tokens({v.key(2), v.value(7)}, v) == "k2 v7");  // lowercased
}

TEST_CASE("token F1") {
  Vocab v{16, 16};
  // pred "a b", gold "b": P = 1/2, R = 1 -> 2/3
  CHECK(token_f1({v.value(1), v.value(2)}, {v.value(2)}, v) == doctest::Approx(2.0 / 3.0));
  CHECK(token_f1({v.value(5)}, {v.value(5)}, v) == 1.0);
  CHECK(token_f1({v.value(5)}, {v.value(6)}, v) == 0.0);
  // multiset behavior: repeated tokens count once per occurrence
  CHECK(token_f1({v.value(1), v.value(1)}, {v.value(1)}, v) == doctest::Approx(2.0 / 3.0));
  CHECK(token_f1({}, {}, v) == 1.0);
}

TEST_CASE("token F1 bounds") {
  Vocab v{16, 16};
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    TokenSequence a, b;
    for (int i = 0; i < static_cast<int>(rng.uniform_int(4)) + 1; ++i)
      a.push_back(v.value(static_cast<int>(rng.uniform_int(4))));
    for (int i = 0; i < static_cast<int>(rng.uniform_int(4)) + 1; ++i)
      b.push_back(v.value(static_cast<int>(rng.uniform_int(4))));
    double f = token_f1(a, b, v);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    std::multiset<int> ma(a.begin(), a.end()), mb(b.begin(), b.end());
    if (ma == mb) CHECK(f == 1.0);
    if (f == 1.0) CHECK(ma == mb);
  }
}

TEST_CASE("lookup task construction invariants") {
  LookupTaskParams p;
  p.n_items = 200;
  p.n_pairs = 5;
  p.n_keys = 16;
  p.n_values = 16;
  p.seed = 12;
  DataSet d = gen_lookup_task(p);
  REQUIRE(d.tasks.size() == 200);
  for (const TaskInstance& t : d.tasks) {
    // query key appears in the sharer context and never in the receiver context
    int q = t.question[1];
    bool in_sharer = false;
    for (int id : t.sharer_ctx) in_sharer |= (id == q);
    CHECK(in_sharer);
    for (int id : t.receiver_ctx) CHECK(id != q);
    // spans tile the sharer context, one per pair
    CHECK(t.spans.size() == 5);
    CHECK(t.spans.front().begin == 0);
    CHECK(t.spans.back().end == static_cast<int>(t.sharer_ctx.size()));
    for (size_t i = 1; i < t.spans.size(); ++i) CHECK(t.spans[i].begin == t.spans[i - 1].end);
    // gold is the value written next to the queried key in the sharer context
    for (size_t i = 0; i + 1 < t.sharer_ctx.size(); ++i)
      if (t.sharer_ctx[i] == q) CHECK(t.sharer_ctx[i + 1] == t.gold.at(0));
  }

  DataSet d2 = gen_lookup_task(p);
  CHECK(d2.tasks.size() == d.tasks.size());
  for (size_t i = 0; i < d.tasks.size(); ++i) {
    CHECK(d2.tasks[i].sharer_ctx == d.tasks[i].sharer_ctx);
    CHECK(d2.tasks[i].receiver_ctx == d.tasks[i].receiver_ctx);
    CHECK(d2.tasks[i].gold == d.tasks[i].gold);
  }

  p.n_keys = 8;
  p.n_receiver_pairs = 5;  // 8 keys cannot host two disjoint 5-pair sets
  CHECK_THROWS_AS(gen_lookup_task(p), ContractError);
}

TEST_CASE("shared mcq task construction") {
  DataSet d = gen_shared_mcq_task(100, 9);
  for (const TaskInstance& t : d.tasks) {
    CHECK(t.sharer_ctx == t.receiver_ctx);
    CHECK(t.choices.size() == 4);
    // gold answer is among the choices and matches the cue digit
    int cue = t.receiver_ctx[1] - Vocab::kDigit0;
    CHECK(t.gold.at(0) == t.choices.at(static_cast<size_t>(cue)));
  }
  DataSet d2 = gen_shared_mcq_task(100, 9);
  for (size_t i = 0; i < d.tasks.size(); ++i) CHECK(d2.tasks[i].receiver_ctx == d.tasks[i].receiver_ctx);
}

TEST_CASE("orf never falls below either method") {
  Rng rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    PairedOutcomes j;
    int n = 1 + static_cast<int>(rng.uniform_int(40));
    double a_acc = 0, b_acc = 0;
    for (int i = 0; i < n; ++i) {
      j.ids.push_back(i);
      j.correct_a.push_back(rng.bernoulli(0.4) ? 1 : 0);
      j.correct_b.push_back(rng.bernoulli(0.6) ? 1 : 0);
      a_acc += j.correct_a.back();
      b_acc += j.correct_b.back();
    }
    a_acc /= n;
    b_acc /= n;
    CHECK(orf_accuracy(j) >= std::max(a_acc, b_acc) - 1e-12);
  }
}

TEST_CASE("copy corpus is deterministic per seed") {
  Vocab v{16, 16};
  auto a = gen_copy_pretrain(50, 4, 9, 12, v);
  auto b = gen_copy_pretrain(50, 4, 9, 12, v);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].targets == b[i].targets);
    // the run after the separator repeats the run before it
    size_t sep = 0;
    for (size_t k = 0; k < a[i].prompt.size(); ++k)
      if (a[i].prompt[k] == Vocab::kSep) sep = k;
    CHECK(a[i].prompt[sep + 1] == a[i].prompt[1]);
  }
}

TEST_CASE("a receiver trained on uninformative labels stays near mcq chance") {
  DataSet d = gen_shared_mcq_task(1000, 41);
  ModelGeometry g;
  g.layers = 2;
  g.hidden = 32;
  g.q_heads = 4;
  g.kv_heads = 4;
  g.head_dim = 8;
  g.vocab = d.vocab.size();
  g.max_seq = 96;
  g.mlp_inner = 64;
  ToyLm receiver = ToyLm::init(g, 12);
  TrainConfig cfg;
  cfg.lr = 3e-3f;
  cfg.max_steps = 400;
  cfg.batch = 32;
  cfg.seed = 2;
  cfg.warmup_ratio = 0.1f;
  train_lm(receiver, gen_mcq_pretrain(6000, 77, d.vocab, /*label_by_cue=*/false), cfg);

  int correct = 0;
  for (const TaskInstance& t : d.tasks) {
    TokenSequence prompt = t.receiver_prompt();
    auto r = prefill_with_cache(receiver, prompt);
    int pick = mcq_logit_score(r.final_logits, t.choices);
    correct += t.choices[static_cast<size_t>(pick)] == t.gold.at(0) ? 1 : 0;
  }
  double acc = correct / 1000.0;
  double sigma = std::sqrt(0.25 * 0.75 / 1000.0);
  CHECK(acc > 0.25 - 4 * sigma);
  CHECK(acc < 0.25 + 4 * sigma);
}

TEST_CASE("dataset files round-trip") {
  LookupTaskParams p;
  p.n_items = 12;
  p.seed = 5;
  DataSet d = gen_lookup_task(p);
  std::string path = "/tmp/lcf_test_tasks.jsonl";
  save_tasks_jsonl(path, d);
  DataSet back = load_tasks_jsonl(path);
  CHECK(back.cross_context == d.cross_context);
  CHECK(back.vocab.n_keys == d.vocab.n_keys);
  REQUIRE(back.tasks.size() == d.tasks.size());
  for (size_t i = 0; i < d.tasks.size(); ++i) {
    CHECK(back.tasks[i].sharer_ctx == d.tasks[i].sharer_ctx);
    CHECK(back.tasks[i].question == d.tasks[i].question);
    CHECK(back.tasks[i].gold == d.tasks[i].gold);
    CHECK(back.tasks[i].spans.size() == d.tasks[i].spans.size());
  }
  std::remove(path.c_str());
}
