#pragma once

#include <string>
#include <vector>

#include "lcf/adapter.hpp"
#include "lcf/lcfx_pool.hpp"
#include "lcf/trainer.hpp"
#include "lcf/vocab.hpp"

namespace lcf {

// One synthetic evaluation item. The receiver prompt is context + question;
// the question ends with the answer marker, whose logits are computed after
// fusion. In the cross-context variant the gold answer's evidence appears
// only in the sharer context.
struct TaskInstance {
  int id = 0;
  TokenSequence sharer_ctx;
  TokenSequence receiver_ctx;
  TokenSequence question;
  TokenSequence gold;
  std::vector<Span> spans;   // natural sharer-side boundaries
  std::vector<int> choices;  // MCQ choice token ids (empty for free-form)

  TokenSequence receiver_prompt() const {
    TokenSequence p = receiver_ctx;
    p.insert(p.end(), question.begin(), question.end());
    return p;
  }
};

struct DataSet {
  Vocab vocab;
  bool cross_context = true;
  std::string task_name;
  std::vector<TaskInstance> tasks;
};

struct LookupTaskParams {
  int n_items = 1000;
  int n_pairs = 5;           // sharer-side pairs, one natural span each
  int n_receiver_pairs = 2;  // distractor pairs on the receiver side
  int n_keys = 16;
  int n_values = 16;
  uint64_t seed = 0;
};

// Cross-context lookup: the sharer context holds key->value pairs including
// the queried one; the receiver context holds disjoint distractor pairs plus
// the query. One natural span per pair.
DataSet gen_lookup_task(const LookupTaskParams& p);

// Shared-context MCQ: both models see the identical prompt; the answer is
// determined by a cue feature the receiver was never trained to use.
DataSet gen_shared_mcq_task(int n_items, uint64_t seed);

// Pretraining corpora for the frozen base models.
std::vector<LmItem> gen_lookup_pretrain(int n_items, int n_pairs, int n_keys, int n_values,
                                        uint64_t seed, const Vocab& vocab);
std::vector<LmItem> gen_mcq_pretrain(int n_items, uint64_t seed, const Vocab& vocab,
                                     bool label_by_cue);
// Random token runs repeated verbatim; the dense copy signal is what makes
// the in-context lookup circuit form quickly when mixed into pretraining.
std::vector<LmItem> gen_copy_pretrain(int n_items, int min_len, int max_len, uint64_t seed,
                                      const Vocab& vocab);

TrainItem to_train_item(const TaskInstance& task, const Vocab& vocab, bool cross_context);
std::vector<TrainItem> to_train_items(const DataSet& data);

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// Normalization: token names lowercased, single-space joined.
std::string normalize_tokens(const TokenSequence& tokens, const Vocab& vocab);
int exact_match(const TokenSequence& pred, const TokenSequence& gold, const Vocab& vocab);
// Multiset-overlap precision/recall F1 over normalized tokens.
double token_f1(const TokenSequence& pred, const TokenSequence& gold, const Vocab& vocab);

// Per-question correctness of two methods, joined on question id.
struct PairedOutcomes {
  std::vector<int> ids;
  std::vector<uint8_t> correct_a, correct_b;
};

PairedOutcomes join_outcomes(const std::vector<std::pair<int, int>>& a,
                             const std::vector<std::pair<int, int>>& b);

// One-sided exact paired McNemar test: with b = #(A right, B wrong) and
// c = #(A wrong, B right), p = Pr[Binomial(b+c, 0.5) >= b]; p = 1 when there
// are no discordant pairs.
double mcnemar_exact_p(const PairedOutcomes& outcomes);
double mcnemar_exact_p_counts(int64_t b, int64_t c);
std::string significance_marker(double p);  // "***", "**", "*", or ""

// Per-question oracle: correct when either method is correct.
double orf_accuracy(const PairedOutcomes& outcomes);

double weighted_average(const std::vector<double>& values, const std::vector<double>& weights);

// ---------------------------------------------------------------------------
// evaluation runners
// ---------------------------------------------------------------------------

struct EvalOptions {
  AlignStrategy align = AlignStrategy::kLongest;
  SpanSchemeSpec span_spec;  // pooled fusion
  int max_answer_tokens = 4;
};

struct ItemOutcome {
  int id = 0;
  int correct = 0;
  double f1 = 0.0;
};

struct EvalSummary {
  double em = 0.0;
  double f1 = 0.0;
  int n = 0;
  std::vector<ItemOutcome> outcomes;

  std::vector<std::pair<int, int>> id_correct() const {
    std::vector<std::pair<int, int>> v;
    v.reserve(outcomes.size());
    for (const auto& o : outcomes) v.emplace_back(o.id, o.correct);
    return v;
  }
};

// Fused evaluation (adapter may be the pass-through baseline). MCQ items are
// scored from the post-fusion logits over the choice ids; free-form items are
// greedy-decoded until the stop token.
EvalSummary evaluate_tasks(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                           const DataSet& data, const EvalOptions& options);

// Text relay baseline: the sharer decodes budget_m message tokens from its
// context; the message is appended to the receiver prompt before the question.
EvalSummary evaluate_t2t(const ToyLm& sharer, const ToyLm& receiver, const DataSet& data,
                         int budget_m, int max_answer_tokens);

// ---------------------------------------------------------------------------
// latency
// ---------------------------------------------------------------------------

struct LatencyStats {
  double ttft_ms = 0.0;   // median time to the receiver's first token
  double tteoa_ms = 0.0;  // median time to the answer's final token
  int n = 0;
};

// Wall-clock on a single pinned worker; one warm-up batch is discarded.
LatencyStats measure_t2t_latency(const ToyLm& sharer, const ToyLm& receiver, const DataSet& data,
                                 int budget_m, int max_answer_tokens, int warmup_items = 8);
LatencyStats measure_lcfx_latency(const ToyLm& sharer, const ToyLm& receiver, const Adapter& adapter,
                                  const DataSet& data, const SpanSchemeSpec& span_spec,
                                  int max_answer_tokens, int warmup_items = 8);

// ---------------------------------------------------------------------------
// dataset files: one JSON record per line, meta record first
// ---------------------------------------------------------------------------

void save_tasks_jsonl(const std::string& path, const DataSet& data);
DataSet load_tasks_jsonl(const std::string& path);

}  // namespace lcf
