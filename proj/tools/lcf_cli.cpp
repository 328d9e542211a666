// Command-line front end: data generation, adapter training, evaluation,
// layer pruning, parameter accounting, and latency benchmarking, all driven
// by a JSON config with flag overrides. Every run writes its resolved config
// next to its outputs; timestamps go only to run.log so reruns are
// byte-reproducible.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "lcf/accounting.hpp"
#include "lcf/c2c_fuser.hpp"
#include "lcf/errors.hpp"
#include "lcf/eval_harness.hpp"
#include "lcf/pruning.hpp"
#include "lcf/trainer.hpp"

using nlohmann::json;
using namespace lcf;

namespace {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// config schema
// ---------------------------------------------------------------------------

json default_config() {
  return json{
      {"task",
       {{"kind", "lookup"},
        {"n_train", 3000},
        {"n_eval", 400},
        {"n_pairs", 5},
        {"n_keys", 16},
        {"n_values", 16},
        {"seed", 7}}},
      {"sharer",
       {{"geometry",
         {{"layers", 3}, {"hidden", 32}, {"q_heads", 4}, {"kv_heads", 4}, {"head_dim", 8},
          {"max_seq", 96}, {"mlp_inner", 64}}},
        {"init_seed", 11},
        {"checkpoint", ""},
        {"pretrain",
         {{"kind", "lookup_mix"}, {"steps", 4000}, {"lr", 3e-3}, {"batch", 32},
          {"weight_decay", 0.01}, {"warmup_ratio", 0.05}, {"seed", 1}, {"copy_items", 20000},
          {"task_items", 8000}}}}},
      {"receiver",
       {{"reuse_sharer", true},
        {"geometry",
         {{"layers", 3}, {"hidden", 32}, {"q_heads", 4}, {"kv_heads", 4}, {"head_dim", 8},
          {"max_seq", 96}, {"mlp_inner", 64}}},
        {"init_seed", 12},
        {"checkpoint", ""},
        {"pretrain",
         {{"kind", "lookup_mix"}, {"steps", 4000}, {"lr", 3e-3}, {"batch", 32},
          {"weight_decay", 0.01}, {"warmup_ratio", 0.05}, {"seed", 2}, {"copy_items", 20000},
          {"task_items", 8000}}}}},
      {"adapter",
       {{"kind", "lcfx"}, {"latent", 64}, {"dropout", 0.0}, {"gate_logit_init", 1.0},
        {"up_proj_scale", 0.06}, {"pool_query_scale", 0.02}, {"seed", 33}, {"c2c_hidden", 32},
        {"temp", {{"start", 1.0}, {"end", 0.5}, {"steps", 400}}}}},
      {"train",
       {{"steps", 1000}, {"lr", 1e-3}, {"weight_decay", 0.01}, {"warmup_ratio", 0.1},
        {"max_grad_norm", 1.0}, {"batch", 64}, {"grad_accum", 1}, {"dropout", 0.0},
        {"eval_interval", 200}, {"seed", 3}}},
      {"align", {{"train", "first"}, {"eval", "longest"}}},
      {"spans", {{"scheme", "natural"}, {"window", 4}, {"overlap", 0}}},
      {"eval", {{"max_answer_tokens", 3}}},
      {"latency", {{"budgets", json::array({10, 25, 50})}, {"items", 200}, {"max_answer_tokens", 3}}},
      {"data", ""},
      {"out", "runs/default"}};
}

void merge_and_check(json& base, const json& overlay, const std::string& path) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key_path);
    if (base[it.key()].is_object() && it.value().is_object())
      merge_and_check(base[it.key()], it.value(), key_path);
    else
      base[it.key()] = it.value();
  }
}

json resolve_config(const std::string& config_path) {
  json cfg = default_config();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot open config '" + config_path + "'");
    json user = json::parse(f, nullptr, true, true);
    merge_and_check(cfg, user, "");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// pieces assembled from the config
// ---------------------------------------------------------------------------

Vocab vocab_of(const json& cfg) {
  return Vocab{cfg.at("task").at("n_keys"), cfg.at("task").at("n_values")};
}

ModelGeometry geometry_of(const json& g, int vocab_size) {
  ModelGeometry geo;
  geo.layers = g.at("layers");
  geo.hidden = g.at("hidden");
  geo.q_heads = g.at("q_heads");
  geo.kv_heads = g.at("kv_heads");
  geo.head_dim = g.at("head_dim");
  geo.max_seq = g.at("max_seq");
  geo.mlp_inner = g.at("mlp_inner");
  geo.vocab = vocab_size;
  return geo;
}

TrainConfig train_config_of(const json& t) {
  TrainConfig c;
  c.lr = t.at("lr");
  c.weight_decay = t.at("weight_decay");
  c.warmup_ratio = t.at("warmup_ratio");
  c.max_steps = t.at("steps");
  c.batch = t.at("batch");
  c.seed = t.at("seed");
  if (t.contains("grad_accum")) c.grad_accum = t.at("grad_accum");
  if (t.contains("max_grad_norm")) c.max_grad_norm = t.at("max_grad_norm");
  if (t.contains("dropout")) c.dropout = t.at("dropout");
  if (t.contains("eval_interval")) c.eval_interval = t.at("eval_interval");
  return c;
}

std::vector<LmItem> pretrain_corpus(const json& pre, const json& task, const Vocab& vocab) {
  std::string kind = pre.at("kind");
  std::vector<LmItem> items;
  if (kind == "lookup_mix") {
    items = gen_copy_pretrain(pre.at("copy_items"), 6, 12, 55, vocab);
    int per = pre.at("task_items");
    int n_pairs = task.at("n_pairs");
    for (int np = 1; np <= n_pairs; ++np) {
      auto part = gen_lookup_pretrain(per, np, task.at("n_keys"), task.at("n_values"), 100 + np, vocab);
      items.insert(items.end(), part.begin(), part.end());
    }
  } else if (kind == "mcq_cue" || kind == "mcq_random") {
    items = gen_mcq_pretrain(pre.at("task_items"), 77, vocab, kind == "mcq_cue");
  } else {
    throw ConfigError("unknown pretrain kind '" + kind + "'");
  }
  return items;
}

ToyLm build_base_model(const json& role_cfg, const json& task, const Vocab& vocab, std::ostream& log,
                       const char* role) {
  std::string ckpt = role_cfg.value("checkpoint", "");
  if (!ckpt.empty()) {
    if (!fs::exists(ckpt)) throw IoError("missing checkpoint '" + ckpt + "'");
    log << role << ": loaded from " << ckpt << "\n";
    return model_from_checkpoint(Checkpoint::load(ckpt));
  }
  ModelGeometry geo = geometry_of(role_cfg.at("geometry"), vocab.size());
  ToyLm lm = ToyLm::init(geo, role_cfg.at("init_seed"));
  const json& pre = role_cfg.at("pretrain");
  TrainConfig cfg = train_config_of(pre);
  auto corpus = pretrain_corpus(pre, task, vocab);
  auto trace = train_lm(lm, corpus, cfg);
  log << role << ": pretrained " << cfg.max_steps << " steps, final loss " << trace.back() << "\n";
  return lm;
}

struct BasePair {
  ToyLm sharer;
  ToyLm receiver;
};

BasePair build_base_pair(const json& cfg, std::ostream& log) {
  Vocab vocab = vocab_of(cfg);
  BasePair pair{build_base_model(cfg.at("sharer"), cfg.at("task"), vocab, log, "sharer"), ToyLm{}};
  const json& recv = cfg.at("receiver");
  if (recv.value("reuse_sharer", false))
    pair.receiver = pair.sharer;
  else
    pair.receiver = build_base_model(recv, cfg.at("task"), vocab, log, "receiver");
  return pair;
}

std::unique_ptr<Adapter> build_adapter(const json& cfg, const ModelGeometry& sharer_geo,
                                       const ModelGeometry& recv_geo) {
  const json& a = cfg.at("adapter");
  std::string kind = a.at("kind");
  if (kind == "none") return std::make_unique<NoneAdapter>();
  GateTempSchedule temp{a.at("temp").at("start"), a.at("temp").at("end"), a.at("temp").at("steps")};
  if (kind == "lcf" || kind == "lcfx") {
    LcfConfig c;
    c.latent = a.at("latent");
    c.sharer_kv_heads = sharer_geo.kv_heads;
    c.sharer_head_dim = sharer_geo.head_dim;
    c.recv_layers = recv_geo.layers;
    c.recv_kv_heads = recv_geo.kv_heads;
    c.recv_head_dim = recv_geo.head_dim;
    c.dropout = a.at("dropout");
    c.gate_logit_init = a.at("gate_logit_init");
    c.up_proj_scale = a.at("up_proj_scale");
    c.pool_query_scale = a.at("pool_query_scale");
    c.temp = temp;
    if (kind == "lcf") return std::make_unique<LcfAdapter>(LcfAdapter::init(c, a.at("seed")));
    return std::make_unique<LcfxAdapter>(LcfxAdapter::init(c, a.at("seed")));
  }
  if (kind == "c2c") {
    C2cConfig c;
    c.sharer_kv_heads = sharer_geo.kv_heads;
    c.sharer_head_dim = sharer_geo.head_dim;
    c.recv_layers = recv_geo.layers;
    c.recv_kv_heads = recv_geo.kv_heads;
    c.recv_head_dim = recv_geo.head_dim;
    c.recv_hidden = a.at("c2c_hidden");
    c.gate_logit_init = a.at("gate_logit_init");
    c.up_proj_scale = a.at("up_proj_scale");
    c.temp = temp;
    return std::make_unique<C2cAdapter>(C2cAdapter::init(c, a.at("seed")));
  }
  throw ConfigError("unknown adapter kind '" + kind + "'");
}

SpanSchemeSpec span_spec_of(const json& cfg) {
  const json& s = cfg.at("spans");
  SpanSchemeSpec spec;
  spec.kind = span_scheme_from(s.at("scheme"));
  spec.window = s.at("window");
  spec.overlap = s.at("overlap");
  return spec;
}

DataSet generate_tasks(const json& cfg, int n_items, uint64_t seed) {
  const json& t = cfg.at("task");
  std::string kind = t.at("kind");
  if (kind == "lookup") {
    LookupTaskParams p;
    p.n_items = n_items;
    p.n_pairs = t.at("n_pairs");
    p.n_keys = t.at("n_keys");
    p.n_values = t.at("n_values");
    p.seed = seed;
    return gen_lookup_task(p);
  }
  if (kind == "shared_mcq") return gen_shared_mcq_task(n_items, seed);
  throw ConfigError("unknown task kind '" + kind + "'");
}

DataSet load_or_generate(const json& cfg, const std::string& file, int n_items, uint64_t seed) {
  std::string dir = cfg.value("data", "");
  if (!dir.empty()) {
    fs::path p = fs::path(dir) / file;
    if (!fs::exists(p)) throw IoError("missing dataset '" + p.string() + "'");
    return load_tasks_jsonl(p.string());
  }
  return generate_tasks(cfg, n_items, seed);
}

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

void ensure_out(const std::string& out) { fs::create_directories(out); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
}

void persist_config(const json& cfg, const std::string& out) {
  write_text(out + "/resolved_config.json", cfg.dump(2) + "\n");
}

std::ofstream open_log(const std::string& out) {
  std::ofstream log(out + "/run.log", std::ios::app);
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[64];
  std::strftime(buf, sizeof(buf), "%F %T", std::gmtime(&now));
  log << "--- run at " << buf << " UTC\n";
  return log;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const json& cfg) {
  const std::string out = cfg.at("out");
  ensure_out(out);
  uint64_t seed = cfg.at("task").at("seed");
  DataSet train = generate_tasks(cfg, cfg.at("task").at("n_train"), seed);
  DataSet eval = generate_tasks(cfg, cfg.at("task").at("n_eval"), seed + 1);
  save_tasks_jsonl(out + "/train.jsonl", train);
  save_tasks_jsonl(out + "/eval.jsonl", eval);
  persist_config(cfg, out);
  auto log = open_log(out);
  log << "gen-data: " << train.tasks.size() << " train, " << eval.tasks.size() << " eval items\n";
  std::cout << "wrote " << out << "/train.jsonl (" << train.tasks.size() << ") and eval.jsonl ("
            << eval.tasks.size() << ")\n";
  return 0;
}

int cmd_train(const json& cfg) {
  const std::string out = cfg.at("out");
  ensure_out(out);
  auto log = open_log(out);
  BasePair base = build_base_pair(cfg, log);
  checkpoint_of_model(base.sharer).save(out + "/sharer.lcf");
  checkpoint_of_model(base.receiver).save(out + "/receiver.lcf");

  uint64_t seed = cfg.at("task").at("seed");
  DataSet train_data = load_or_generate(cfg, "train.jsonl", cfg.at("task").at("n_train"), seed);
  DataSet eval_data = load_or_generate(cfg, "eval.jsonl", cfg.at("task").at("n_eval"), seed + 1);
  auto train_items = to_train_items(train_data);
  auto eval_items = to_train_items(eval_data);
  if (eval_items.size() > 64) eval_items.resize(64);  // held-out loss probe

  auto adapter = build_adapter(cfg, base.sharer.geo, base.receiver.geo);
  TrainConfig tc = train_config_of(cfg.at("train"));
  tc.gate_temp = GateTempSchedule{cfg.at("adapter").at("temp").at("start"),
                                  cfg.at("adapter").at("temp").at("end"),
                                  cfg.at("adapter").at("temp").at("steps")};
  SpanSchemeSpec spans = span_spec_of(cfg);
  AlignStrategy train_align = align_strategy_from(cfg.at("align").at("train"));

  auto save_hook = [&](int step, const Adapter& a) {
    checkpoint_of_adapter(a).save(out + "/adapter_step" + std::to_string(step) + ".lcf");
  };
  TrainResult res = train_adapter(tc, base.sharer, base.receiver, *adapter, train_items, eval_items,
                                  train_align, adapter->kind() == "lcfx" ? &spans : nullptr, save_hook);
  checkpoint_of_adapter(*adapter).save(out + "/adapter_final.lcf");

  std::string trace = "step,lr,temperature,train_loss,eval_loss\n";
  for (const auto& r : res.trace) {
    trace += std::to_string(r.step) + "," + fmt(r.lr) + "," + fmt(r.temperature) + "," +
             fmt(r.train_loss) + "," + (r.has_eval ? fmt(r.eval_loss) : "") + "\n";
  }
  write_text(out + "/loss_trace.csv", trace);
  std::string gates = "step,layer,logit_k,logit_v\n";
  for (const auto& g : res.gates)
    gates += std::to_string(g.step) + "," + std::to_string(g.layer) + "," + fmt(g.logit_k) + "," +
             fmt(g.logit_v) + "\n";
  write_text(out + "/gates.csv", gates);
  persist_config(cfg, out);
  log << "train: " << res.trace.size() << " steps, final train loss "
      << res.trace.back().train_loss << "\n";
  log << "frozen check: sharer " << (res.sharer_hash_before == res.sharer_hash_after ? "ok" : "CHANGED")
      << ", receiver " << (res.receiver_hash_before == res.receiver_hash_after ? "ok" : "CHANGED") << "\n";
  std::cout << "trained " << adapter->kind() << " adapter: " << out << "/adapter_final.lcf\n";
  return 0;
}

std::unique_ptr<Adapter> load_adapter_arg(const std::string& arg) {
  if (arg == "none") return std::make_unique<NoneAdapter>();
  if (!fs::exists(arg)) throw IoError("missing checkpoint '" + arg + "'");
  return adapter_from_checkpoint(Checkpoint::load(arg));
}

struct EvalArgs {
  std::string adapter = "none";
  std::string baseline;  // outcomes.csv of another method for the paired test
  bool gates_closed = false;
};

int cmd_eval(const json& cfg, const EvalArgs& args) {
  const std::string out = cfg.at("out");
  ensure_out(out);
  auto log = open_log(out);
  BasePair base = build_base_pair(cfg, log);
  uint64_t seed = cfg.at("task").at("seed");
  DataSet eval_data = load_or_generate(cfg, "eval.jsonl", cfg.at("task").at("n_eval"), seed + 1);

  auto adapter = load_adapter_arg(args.adapter);
  if (args.gates_closed)
    for (auto& [name, t] : adapter->named_params())
      if (name.find("gate_k") != std::string::npos || name.find("gate_v") != std::string::npos)
        t->ptr()[0] = -1e9f;

  EvalOptions options;
  options.align = align_strategy_from(cfg.at("align").at("eval"));
  options.span_spec = span_spec_of(cfg);
  options.max_answer_tokens = cfg.at("eval").at("max_answer_tokens");
  EvalSummary sum = evaluate_tasks(base.sharer, base.receiver, *adapter, eval_data, options);

  std::string outcomes = "id,correct\n";
  for (const auto& o : sum.outcomes) outcomes += std::to_string(o.id) + "," + std::to_string(o.correct) + "\n";
  write_text(out + "/outcomes.csv", outcomes);

  std::string p_em;
  if (!args.baseline.empty()) {
    std::ifstream bf(args.baseline);
    if (!bf) throw IoError("missing baseline outcomes '" + args.baseline + "'");
    std::vector<std::pair<int, int>> b;
    std::string line;
    std::getline(bf, line);  // header
    while (std::getline(bf, line)) {
      if (line.empty()) continue;
      size_t comma = line.find(',');
      b.emplace_back(std::atoi(line.substr(0, comma).c_str()), std::atoi(line.substr(comma + 1).c_str()));
    }
    PairedOutcomes joined = join_outcomes(sum.id_correct(), b);
    double p = mcnemar_exact_p(joined);
    p_em = fmt(p);
    std::string stats = "metric,value\nmcnemar_p," + fmt(p) + "\nmarker," + significance_marker(p) +
                        "\norf," + fmt(orf_accuracy(joined)) + "\n";
    write_text(out + "/paired_stats.csv", stats);
  }

  std::string method = args.adapter == "none" ? "receiver_only" : adapter->kind();
  std::string metrics = "method,metric,value,n,p_value\n";
  metrics += method + ",em," + fmt(sum.em) + "," + std::to_string(sum.n) + "," + p_em + "\n";
  metrics += method + ",f1," + fmt(sum.f1) + "," + std::to_string(sum.n) + "," + p_em + "\n";
  write_text(out + "/metrics.csv", metrics);
  persist_config(cfg, out);
  log << "eval: method " << method << " em " << sum.em << " f1 " << sum.f1 << "\n";
  std::cout << method << ": em " << fmt(sum.em) << " f1 " << fmt(sum.f1) << " on " << sum.n << " items\n";
  return 0;
}

int cmd_prune(const json& cfg, const std::string& adapter_path, int top_k) {
  const std::string out = cfg.at("out");
  ensure_out(out);
  auto log = open_log(out);
  BasePair base = build_base_pair(cfg, log);
  uint64_t seed = cfg.at("task").at("seed");
  DataSet eval_data = load_or_generate(cfg, "eval.jsonl", cfg.at("task").at("n_eval"), seed + 1);

  auto adapter = load_adapter_arg(adapter_path);
  EvalOptions options;
  options.align = align_strategy_from(cfg.at("align").at("eval"));
  options.span_spec = span_spec_of(cfg);
  options.max_answer_tokens = cfg.at("eval").at("max_answer_tokens");

  PruneEvalFn eval_fn = [&](const std::vector<int>& retained) {
    auto restricted = pruned_copy(*adapter, retained);
    return evaluate_tasks(base.sharer, base.receiver, *restricted, eval_data, options).em;
  };
  auto reports = prune_three_pass(*adapter, eval_fn, top_k);

  std::string csv = "layer,gate_logit_k,gate_logit_v,dead,importance,harmful,retained\n";
  std::vector<int> retained;
  for (const auto& r : reports) {
    csv += std::to_string(r.layer) + "," + fmt(r.gate_logit_k) + "," + fmt(r.gate_logit_v) + "," +
           std::to_string(r.dead) + "," + fmt(r.importance) + "," + std::to_string(r.harmful) + "," +
           std::to_string(r.retained) + "\n";
    if (r.retained) retained.push_back(r.layer);
  }
  write_text(out + "/layer_report.csv", csv);
  auto pruned = pruned_copy(*adapter, retained);
  checkpoint_of_adapter(*pruned).save(out + "/adapter_pruned.lcf");
  persist_config(cfg, out);
  log << "prune: retained " << retained.size() << " of " << adapter->num_layers() << " layers\n";
  std::cout << "retained " << retained.size() << " layers -> " << out << "/adapter_pruned.lcf\n";
  return 0;
}

int cmd_count_params(const std::string& pair, const std::string& adapter, int d, int retained) {
  GeometrySpec geom;
  if (pair == "paper") {
    geom = GeometrySpec{2, 64, 28, 8, 128};
  } else if (pair == "paper-symmetric") {
    geom = GeometrySpec{8, 128, 28, 8, 128};
  } else if (pair == "toy") {
    geom = GeometrySpec{4, 8, 3, 4, 8};
  } else {
    throw ConfigError("unknown pair '" + pair + "' (paper | paper-symmetric | toy)");
  }
  int layers = retained > 0 ? retained : geom.recv_layers;
  std::cout << "config,params_per_layer,total_params,size_mb\n";
  if (adapter == "lcf" || adapter == "lcfx") {
    int64_t per = lcf_params_per_layer(geom, d);
    int64_t total = per * layers;
    if (adapter == "lcfx") total += lcfx_pool_params_per_layer(geom) * layers;
    std::cout << adapter << "-" << d << "-" << layers << "L," << per << "," << total << ","
              << adapter_size_mb(total) << "\n";
    if (adapter == "lcfx")
      std::cout << "lcfx-pool," << lcfx_pool_params_per_layer(geom) << ","
                << lcfx_pool_params_per_layer(geom) * layers << ","
                << adapter_size_mb(lcfx_pool_params_per_layer(geom) * layers) << "\n";
  } else if (adapter == "c2c") {
    // published totals taken as inputs
    std::cout << "c2c-published," << kPublishedC2cParamsPerLayer << "," << kPublishedC2cTotalParams
              << "," << adapter_size_mb(kPublishedC2cTotalParams) << "\n";
  } else {
    throw ConfigError("unknown adapter '" + adapter + "' (lcf | lcfx | c2c)");
  }
  return 0;
}

int cmd_bench_latency(const json& cfg, const std::string& adapter_path) {
  const std::string out = cfg.at("out");
  ensure_out(out);
  auto log = open_log(out);
  BasePair base = build_base_pair(cfg, log);
  uint64_t seed = cfg.at("task").at("seed");
  DataSet eval_data = load_or_generate(cfg, "eval.jsonl", cfg.at("task").at("n_eval"), seed + 1);
  int items = cfg.at("latency").at("items");
  if (static_cast<int>(eval_data.tasks.size()) > items) eval_data.tasks.resize(static_cast<size_t>(items));
  int max_answer = cfg.at("latency").at("max_answer_tokens");

  auto adapter = load_adapter_arg(adapter_path);
  SpanSchemeSpec spans = span_spec_of(cfg);

  std::string csv = "protocol,budget,ttft_ms,tteoa_ms,n\n";
  LatencyStats lx = measure_lcfx_latency(base.sharer, base.receiver, *adapter, eval_data, spans, max_answer);
  csv += "lcfx,," + fmt(lx.ttft_ms) + "," + fmt(lx.tteoa_ms) + "," + std::to_string(lx.n) + "\n";
  for (int m : cfg.at("latency").at("budgets").get<std::vector<int>>()) {
    LatencyStats t2t = measure_t2t_latency(base.sharer, base.receiver, eval_data, m, max_answer);
    csv += "t2t," + std::to_string(m) + "," + fmt(t2t.ttft_ms) + "," + fmt(t2t.tteoa_ms) + "," +
           std::to_string(t2t.n) + "\n";
  }
  write_text(out + "/latency.csv", csv);
  persist_config(cfg, out);
  log << "bench-latency: done over " << eval_data.tasks.size() << " items\n";
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent KV-cache communication between frozen toy transformers"};
  app.require_subcommand(1);

  std::string config_path, out_override, data_override;
  int64_t seed_override = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out", out_override, "output directory (overrides config)");
    sub->add_option("--seed", seed_override, "task seed override");
    sub->add_option("--data", data_override, "dataset directory (train.jsonl / eval.jsonl)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic task datasets");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "train an adapter against frozen base models");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate an adapter checkpoint");
  add_common(eval);
  EvalArgs eval_args;
  eval->add_option("--adapter", eval_args.adapter, "adapter checkpoint path or 'none'");
  eval->add_option("--baseline", eval_args.baseline, "outcomes.csv of a baseline for the paired test");
  eval->add_flag("--gates-closed", eval_args.gates_closed, "force all hard gates shut");

  CLI::App* prune = app.add_subcommand("prune", "three-pass layer selection");
  add_common(prune);
  std::string prune_adapter;
  int top_k = 0;
  prune->add_option("--adapter", prune_adapter, "trained adapter checkpoint")->required();
  prune->add_option("--top-k", top_k, "layers to retain after the audit passes")->required();

  CLI::App* count = app.add_subcommand("count-params", "closed-form adapter accounting");
  std::string pair = "paper", adapter_kind = "lcf";
  int d = 128, retained = 0;
  count->add_option("--pair", pair, "paper | paper-symmetric | toy");
  count->add_option("--adapter", adapter_kind, "lcf | lcfx | c2c");
  count->add_option("--d", d, "latent width");
  count->add_option("--layers", retained, "retained layer count (default: all)");

  CLI::App* bench = app.add_subcommand("bench-latency", "TTFT/TTEoA for text relay vs pooled fusion");
  add_common(bench);
  std::string bench_adapter;
  bench->add_option("--adapter", bench_adapter, "trained adapter checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (count->parsed()) return cmd_count_params(pair, adapter_kind, d, retained);
    json cfg = resolve_config(config_path);
    if (!out_override.empty()) cfg["out"] = out_override;
    if (!data_override.empty()) cfg["data"] = data_override;
    if (seed_override >= 0) cfg["task"]["seed"] = seed_override;
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, eval_args);
    if (prune->parsed()) return cmd_prune(cfg, prune_adapter, top_k);
    if (bench->parsed()) return cmd_bench_latency(cfg, bench_adapter);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
