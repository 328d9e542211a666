#include "lcf/eval_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "lcf/errors.hpp"
#include "lcf/threading.hpp"

namespace lcf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// generators
// ---------------------------------------------------------------------------

namespace {

// Adjacent "K V" pair block; keeping key and value adjacent makes the lookup
// a one-step induction pattern the toy models pick up quickly.
void append_pair(TokenSequence& seq, const Vocab& v, int key_idx, int value_idx) {
  seq.push_back(v.key(key_idx));
  seq.push_back(v.value(value_idx));
}

}  // namespace

DataSet gen_lookup_task(const LookupTaskParams& p) {
  if (p.n_keys < p.n_pairs + p.n_receiver_pairs)
    throw ContractError("gen_lookup_task: need n_keys >= n_pairs + n_receiver_pairs for disjoint contexts");
  if (p.n_pairs < 1 || p.n_receiver_pairs < 1 || p.n_values < 2)
    throw ContractError("gen_lookup_task: bad sizes");
  DataSet data;
  data.vocab = Vocab{p.n_keys, p.n_values};
  data.cross_context = true;
  data.task_name = "lookup";
  Rng rng(p.seed, Rng::kData);
  const Vocab& v = data.vocab;

  std::vector<int> keys(static_cast<size_t>(p.n_keys));
  for (int i = 0; i < p.n_keys; ++i) keys[static_cast<size_t>(i)] = i;

  for (int i = 0; i < p.n_items; ++i) {
    rng.shuffle(keys);
    TaskInstance t;
    t.id = i;
    t.sharer_ctx.push_back(Vocab::kBos);
    int query_slot = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(p.n_pairs)));
    int gold_value = 0;
    for (int k = 0; k < p.n_pairs; ++k) {
      int begin = static_cast<int>(t.sharer_ctx.size());
      if (k == 0) begin = 0;  // first span absorbs the BOS token
      int value_idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(p.n_values)));
      append_pair(t.sharer_ctx, v, keys[static_cast<size_t>(k)], value_idx);
      if (k == query_slot) gold_value = value_idx;
      t.spans.push_back({begin, static_cast<int>(t.sharer_ctx.size())});
    }
    t.receiver_ctx.push_back(Vocab::kBos);
    for (int k = 0; k < p.n_receiver_pairs; ++k) {
      int value_idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(p.n_values)));
      append_pair(t.receiver_ctx, v, keys[static_cast<size_t>(p.n_pairs + k)], value_idx);
    }
    t.question = {Vocab::kQuery, v.key(keys[static_cast<size_t>(query_slot)]), Vocab::kAnswer};
    t.gold = {v.value(gold_value)};
    data.tasks.push_back(std::move(t));
  }
  return data;
}

DataSet gen_shared_mcq_task(int n_items, uint64_t seed) {
  DataSet data;
  data.vocab = Vocab{16, 16};
  data.cross_context = false;
  data.task_name = "shared_mcq";
  Rng rng(seed, Rng::kData);
  const Vocab& v = data.vocab;
  constexpr int kNoise = 6;

  for (int i = 0; i < n_items; ++i) {
    TaskInstance t;
    t.id = i;
    int gold = static_cast<int>(rng.uniform_int(4));
    t.receiver_ctx.push_back(Vocab::kBos);
    t.receiver_ctx.push_back(v.digit(gold));  // the cue feature
    for (int k = 0; k < kNoise; ++k)
      t.receiver_ctx.push_back(v.key(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(v.n_keys)))));
    t.sharer_ctx = t.receiver_ctx;  // identical prompts
    t.spans.push_back({0, static_cast<int>(t.sharer_ctx.size())});
    t.question = {Vocab::kQuery, Vocab::kAnswer};
    t.gold = {v.value(gold)};
    t.choices = {v.value(0), v.value(1), v.value(2), v.value(3)};
    data.tasks.push_back(std::move(t));
  }
  return data;
}

std::vector<LmItem> gen_lookup_pretrain(int n_items, int n_pairs, int n_keys, int n_values,
                                        uint64_t seed, const Vocab& vocab) {
  if (n_keys > vocab.n_keys || n_values > vocab.n_values)
    throw ContractError("gen_lookup_pretrain: sizes exceed vocabulary");
  Rng rng(seed, Rng::kData);
  std::vector<int> keys(static_cast<size_t>(n_keys));
  for (int i = 0; i < n_keys; ++i) keys[static_cast<size_t>(i)] = i;
  std::vector<LmItem> items;
  items.reserve(static_cast<size_t>(n_items));
  for (int i = 0; i < n_items; ++i) {
    rng.shuffle(keys);
    LmItem it;
    it.prompt.push_back(Vocab::kBos);
    int query_slot = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_pairs)));
    int gold_value = 0;
    for (int k = 0; k < n_pairs; ++k) {
      int value_idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_values)));
      append_pair(it.prompt, vocab, keys[static_cast<size_t>(k)], value_idx);
      if (k == query_slot) gold_value = value_idx;
    }
    it.prompt.push_back(Vocab::kQuery);
    it.prompt.push_back(vocab.key(keys[static_cast<size_t>(query_slot)]));
    it.prompt.push_back(Vocab::kAnswer);
    it.targets = {vocab.value(gold_value), Vocab::kStop};
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<LmItem> gen_mcq_pretrain(int n_items, uint64_t seed, const Vocab& vocab,
                                     bool label_by_cue) {
  Rng rng(seed, Rng::kData);
  constexpr int kNoise = 6;
  std::vector<LmItem> items;
  items.reserve(static_cast<size_t>(n_items));
  for (int i = 0; i < n_items; ++i) {
    LmItem it;
    int cue = static_cast<int>(rng.uniform_int(4));
    it.prompt.push_back(Vocab::kBos);
    it.prompt.push_back(vocab.digit(cue));
    for (int k = 0; k < kNoise; ++k)
      it.prompt.push_back(vocab.key(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab.n_keys)))));
    it.prompt.push_back(Vocab::kQuery);
    it.prompt.push_back(Vocab::kAnswer);
    int label = label_by_cue ? cue : static_cast<int>(rng.uniform_int(4));
    it.targets = {vocab.value(label), Vocab::kStop};
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<LmItem> gen_copy_pretrain(int n_items, int min_len, int max_len, uint64_t seed,
                                      const Vocab& vocab) {
  if (min_len < 2 || max_len < min_len) throw ContractError("gen_copy_pretrain: bad run lengths");
  Rng rng(seed, Rng::kData);
  std::vector<LmItem> items;
  items.reserve(static_cast<size_t>(n_items));
  for (int i = 0; i < n_items; ++i) {
    int len = min_len + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_len - min_len + 1)));
    TokenSequence run;
    for (int j = 0; j < len; ++j) {
      int pick = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab.n_keys + vocab.n_values)));
      run.push_back(pick < vocab.n_keys ? vocab.key(pick) : vocab.value(pick - vocab.n_keys));
    }
    LmItem it;
    it.prompt.push_back(Vocab::kBos);
    it.prompt.insert(it.prompt.end(), run.begin(), run.end());
    it.prompt.push_back(Vocab::kSep);
    it.prompt.push_back(run[0]);
    it.targets.assign(run.begin() + 1, run.end());
    it.targets.push_back(Vocab::kStop);
    items.push_back(std::move(it));
  }
  return items;
}

TrainItem to_train_item(const TaskInstance& task, const Vocab& vocab, bool cross_context) {
  (void)vocab;
  TrainItem it;
  it.receiver_prompt = task.receiver_prompt();
  if (cross_context) {
    it.sharer_tokens = task.sharer_ctx;
    it.natural_spans = task.spans;
  } else {
    // shared context: the sharer reads the same tokens the fusion covers
    it.sharer_tokens.assign(it.receiver_prompt.begin(), it.receiver_prompt.end() - 1);
    it.natural_spans = {{0, static_cast<int>(it.sharer_tokens.size())}};
  }
  it.targets = task.gold;
  it.targets.push_back(Vocab::kStop);
  return it;
}

std::vector<TrainItem> to_train_items(const DataSet& data) {
  std::vector<TrainItem> items;
  items.reserve(data.tasks.size());
  for (const TaskInstance& t : data.tasks) items.push_back(to_train_item(t, data.vocab, data.cross_context));
  return items;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

std::string normalize_tokens(const TokenSequence& tokens, const Vocab& vocab) {
  std::string out;
  for (int id : tokens) {
    std::string name = vocab.token_name(id);
    for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    // whitespace canonicalization: single separator between tokens
    if (!out.empty()) out += ' ';
    out += name;
  }
  return out;
}

int exact_match(const TokenSequence& pred, const TokenSequence& gold, const Vocab& vocab) {
  return normalize_tokens(pred, vocab) == normalize_tokens(gold, vocab) ? 1 : 0;
}

double token_f1(const TokenSequence& pred, const TokenSequence& gold, const Vocab& vocab) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> gold_counts;
  for (int id : gold) gold_counts[normalize_tokens({id}, vocab)]++;
  int overlap = 0;
  for (int id : pred) {
    auto it = gold_counts.find(normalize_tokens({id}, vocab));
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

PairedOutcomes join_outcomes(const std::vector<std::pair<int, int>>& a,
                             const std::vector<std::pair<int, int>>& b) {
  std::unordered_map<int, int> bm;
  for (const auto& [id, c] : b) {
    if (!bm.emplace(id, c).second) throw InputError("join_outcomes: duplicate question id in B");
  }
  PairedOutcomes out;
  std::set<int> seen;
  for (const auto& [id, c] : a) {
    if (!seen.insert(id).second) throw InputError("join_outcomes: duplicate question id in A");
    auto it = bm.find(id);
    if (it == bm.end()) continue;  // joined pairs only
    out.ids.push_back(id);
    out.correct_a.push_back(static_cast<uint8_t>(c != 0));
    out.correct_b.push_back(static_cast<uint8_t>(it->second != 0));
  }
  return out;
}

double mcnemar_exact_p_counts(int64_t b, int64_t c) {
  if (b < 0 || c < 0) throw ContractError("mcnemar_exact_p: negative counts");
  int64_t n = b + c;
  if (n == 0) return 1.0;  // no discordant pairs, no evidence
  if (n <= 62) {
    // exact integer tail: sum_{k >= b} C(n, k) / 2^n
    uint64_t sum = 0;
    // C(n, k) built incrementally
    long double comb = 1.0L;
    std::vector<uint64_t> combs(static_cast<size_t>(n) + 1);
    combs[0] = 1;
    for (int64_t k = 1; k <= n; ++k)
      combs[static_cast<size_t>(k)] = combs[static_cast<size_t>(k - 1)] * static_cast<uint64_t>(n - k + 1) /
                                      static_cast<uint64_t>(k);
    (void)comb;
    for (int64_t k = b; k <= n; ++k) sum += combs[static_cast<size_t>(k)];
    return static_cast<double>(static_cast<long double>(sum) / std::pow(2.0L, static_cast<long double>(n)));
  }
  // log-space tail for large n
  long double log_half_n = -static_cast<long double>(n) * std::log(2.0L);
  long double mx = -1e30L;
  std::vector<long double> terms;
  terms.reserve(static_cast<size_t>(n - b + 1));
  for (int64_t k = b; k <= n; ++k) {
    long double lt = std::lgamma(static_cast<long double>(n) + 1) -
                     std::lgamma(static_cast<long double>(k) + 1) -
                     std::lgamma(static_cast<long double>(n - k) + 1) + log_half_n;
    terms.push_back(lt);
    mx = std::max(mx, lt);
  }
  long double acc = 0.0L;
  for (long double t : terms) acc += std::exp(t - mx);
  long double p = std::exp(mx) * acc;
  return static_cast<double>(std::min(p, 1.0L));
}

double mcnemar_exact_p(const PairedOutcomes& outcomes) {
  if (outcomes.correct_a.size() != outcomes.correct_b.size() ||
      outcomes.correct_a.size() != outcomes.ids.size())
    throw ContractError("mcnemar_exact_p: ragged outcome vectors");
  int64_t b = 0, c = 0;
  for (size_t i = 0; i < outcomes.ids.size(); ++i) {
    if (outcomes.correct_a[i] && !outcomes.correct_b[i]) ++b;
    if (!outcomes.correct_a[i] && outcomes.correct_b[i]) ++c;
  }
  return mcnemar_exact_p_counts(b, c);
}

std::string significance_marker(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

double orf_accuracy(const PairedOutcomes& outcomes) {
  if (outcomes.ids.empty()) return 0.0;
  int64_t correct = 0;
  for (size_t i = 0; i < outcomes.ids.size(); ++i)
    if (outcomes.correct_a[i] || outcomes.correct_b[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(outcomes.ids.size());
}

double weighted_average(const std::vector<double>& values, const std::vector<double>& weights) {
  if (values.size() != weights.size() || values.empty())
    throw ContractError("weighted_average: need matching non-empty vectors");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    if (weights[i] <= 0.0) throw ContractError("weighted_average: weights must be positive");
    num += values[i] * weights[i];
    den += weights[i];
  }
  return num / den;
}

// ---------------------------------------------------------------------------
// runners
// ---------------------------------------------------------------------------

EvalSummary evaluate_tasks(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                           const DataSet& data, const EvalOptions& options) {
  EvalSummary sum;
  sum.n = static_cast<int>(data.tasks.size());
  sum.outcomes.resize(data.tasks.size());
  const bool pooled = adapter.kind() == "lcfx";

  parallel_for(static_cast<int64_t>(data.tasks.size()), [&](int64_t i) {
    const TaskInstance& task = data.tasks[static_cast<size_t>(i)];
    TrainItem item = to_train_item(task, data.vocab, data.cross_context);
    FusePlan plan;
    plan.mode = FuseMode::kEval;
    SpanScheme scheme;
    const std::vector<Span>* spans = nullptr;
    if (pooled) {
      scheme = partition_spans(static_cast<int>(item.sharer_tokens.size()), options.span_spec,
                               item.natural_spans);
      spans = &scheme.spans;
    }
    FusedForward ff = fused_first_token(sharer, receiver, adapter, item.sharer_tokens,
                                        item.receiver_prompt, plan, options.align, spans);
    ItemOutcome& o = sum.outcomes[static_cast<size_t>(i)];
    o.id = task.id;
    if (!task.choices.empty()) {
      int pick = mcq_logit_score(ff.first_logits, task.choices);
      o.correct = task.choices[static_cast<size_t>(pick)] == task.gold.at(0) ? 1 : 0;
      o.f1 = o.correct;
    } else {
      TokenSequence pred =
          decode_greedy(receiver, ff.cache, ff.first_logits, options.max_answer_tokens, Vocab::kStop);
      o.correct = exact_match(pred, task.gold, data.vocab);
      o.f1 = token_f1(pred, task.gold, data.vocab);
    }
  });

  double em = 0.0, f1 = 0.0;
  for (const auto& o : sum.outcomes) {
    em += o.correct;
    f1 += o.f1;
  }
  sum.em = sum.n ? em / sum.n : 0.0;
  sum.f1 = sum.n ? f1 / sum.n : 0.0;
  return sum;
}

namespace {

TokenSequence t2t_receiver_prompt(const TaskInstance& task, const TokenSequence& message) {
  TokenSequence prompt = task.receiver_ctx;
  prompt.insert(prompt.end(), message.begin(), message.end());
  prompt.insert(prompt.end(), task.question.begin(), task.question.end());
  return prompt;
}

}  // namespace

EvalSummary evaluate_t2t(const ToyLm& sharer, const ToyLm& receiver, const DataSet& data,
                         int budget_m, int max_answer_tokens) {
  EvalSummary sum;
  sum.n = static_cast<int>(data.tasks.size());
  sum.outcomes.resize(data.tasks.size());

  parallel_for(static_cast<int64_t>(data.tasks.size()), [&](int64_t i) {
    const TaskInstance& task = data.tasks[static_cast<size_t>(i)];
    TokenSequence message;
    if (budget_m > 0) {
      PrefillResult sp = prefill_with_cache(sharer, task.sharer_ctx);
      message = decode_greedy(sharer, sp.cache, sp.final_logits, budget_m, /*stop_id=*/-1);
    }
    PrefillResult rp = prefill_with_cache(receiver, t2t_receiver_prompt(task, message));
    ItemOutcome& o = sum.outcomes[static_cast<size_t>(i)];
    o.id = task.id;
    if (!task.choices.empty()) {
      int pick = mcq_logit_score(rp.final_logits, task.choices);
      o.correct = task.choices[static_cast<size_t>(pick)] == task.gold.at(0) ? 1 : 0;
      o.f1 = o.correct;
    } else {
      TokenSequence pred = decode_greedy(receiver, rp.cache, rp.final_logits, max_answer_tokens, Vocab::kStop);
      o.correct = exact_match(pred, task.gold, data.vocab);
      o.f1 = token_f1(pred, task.gold, data.vocab);
    }
  });

  double em = 0.0, f1 = 0.0;
  for (const auto& o : sum.outcomes) {
    em += o.correct;
    f1 += o.f1;
  }
  sum.em = sum.n ? em / sum.n : 0.0;
  sum.f1 = sum.n ? f1 / sum.n : 0.0;
  return sum;
}

// ---------------------------------------------------------------------------
// latency
// ---------------------------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

LatencyStats measure_t2t_latency(const ToyLm& sharer, const ToyLm& receiver, const DataSet& data,
                                 int budget_m, int max_answer_tokens, int warmup_items) {
  std::vector<double> ttft, tteoa;
  int n = static_cast<int>(data.tasks.size());
  for (int i = -std::min(warmup_items, n); i < n; ++i) {
    const TaskInstance& task = data.tasks[static_cast<size_t>(i < 0 ? -i - 1 : i)];
    auto t0 = Clock::now();
    TokenSequence message;
    if (budget_m > 0) {
      PrefillResult sp = prefill_with_cache(sharer, task.sharer_ctx);
      message = decode_greedy(sharer, sp.cache, sp.final_logits, budget_m, -1);
    }
    PrefillResult rp = prefill_with_cache(receiver, t2t_receiver_prompt(task, message));
    volatile int first = argmax_index(rp.final_logits);
    (void)first;
    double t_first = ms_since(t0);
    decode_greedy(receiver, rp.cache, rp.final_logits, max_answer_tokens, Vocab::kStop);
    double t_end = ms_since(t0);
    if (i >= 0) {
      ttft.push_back(t_first);
      tteoa.push_back(t_end);
    }
  }
  return {median_of(ttft), median_of(tteoa), n};
}

LatencyStats measure_lcfx_latency(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                                  const DataSet& data, const SpanSchemeSpec& span_spec,
                                  int max_answer_tokens, int warmup_items) {
  std::vector<double> ttft, tteoa;
  int n = static_cast<int>(data.tasks.size());
  for (int i = -std::min(warmup_items, n); i < n; ++i) {
    const TaskInstance& task = data.tasks[static_cast<size_t>(i < 0 ? -i - 1 : i)];
    TrainItem item = to_train_item(task, data.vocab, data.cross_context);
    auto t0 = Clock::now();
    SpanScheme scheme =
        partition_spans(static_cast<int>(item.sharer_tokens.size()), span_spec, item.natural_spans);
    FusePlan plan;
    plan.mode = FuseMode::kEval;
    FusedForward ff = fused_first_token(sharer, receiver, adapter, item.sharer_tokens,
                                        item.receiver_prompt, plan, AlignStrategy::kLongest,
                                        &scheme.spans);
    volatile int first = argmax_index(ff.first_logits);
    (void)first;
    double t_first = ms_since(t0);
    decode_greedy(receiver, ff.cache, ff.first_logits, max_answer_tokens, Vocab::kStop);
    double t_end = ms_since(t0);
    if (i >= 0) {
      ttft.push_back(t_first);
      tteoa.push_back(t_end);
    }
  }
  return {median_of(ttft), median_of(tteoa), n};
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

void save_tasks_jsonl(const std::string& path, const DataSet& data) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  json meta{{"record", "meta"},
            {"task", data.task_name},
            {"cross_context", data.cross_context},
            {"n_keys", data.vocab.n_keys},
            {"n_values", data.vocab.n_values}};
  f << meta.dump() << "\n";
  for (const TaskInstance& t : data.tasks) {
    json spans = json::array();
    for (const Span& s : t.spans) spans.push_back({s.begin, s.end});
    json row{{"id", t.id},
             {"sharer_ctx", t.sharer_ctx},
             {"receiver_ctx", t.receiver_ctx},
             {"question", t.question},
             {"gold", t.gold},
             {"spans", spans}};
    if (!t.choices.empty()) row["choices"] = t.choices;
    f << row.dump() << "\n";
  }
  if (!f) throw IoError("short write to '" + path + "'");
}

DataSet load_tasks_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw IoError("dataset '" + path + "' is empty");
  json meta = json::parse(line);
  if (meta.value("record", "") != "meta") throw IoError("dataset '" + path + "' missing meta record");
  DataSet data;
  data.task_name = meta.at("task");
  data.cross_context = meta.at("cross_context");
  data.vocab = Vocab{meta.at("n_keys"), meta.at("n_values")};
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    TaskInstance t;
    t.id = row.at("id");
    t.sharer_ctx = row.at("sharer_ctx").get<TokenSequence>();
    t.receiver_ctx = row.at("receiver_ctx").get<TokenSequence>();
    t.question = row.at("question").get<TokenSequence>();
    t.gold = row.at("gold").get<TokenSequence>();
    for (const auto& s : row.at("spans")) t.spans.push_back({s.at(0), s.at(1)});
    if (row.contains("choices")) t.choices = row.at("choices").get<std::vector<int>>();
    data.tasks.push_back(std::move(t));
  }
  return data;
}

}  // namespace lcf
