// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "moe/bench.hpp"
#include "moe/bytes.hpp"
#include "moe/checkpoint.hpp"
#include "moe/engine.hpp"
#include "moe/error.hpp"
#include "moe/quant.hpp"
#include "moe/replay.hpp"
#include "moe/trace.hpp"
#include "moe/train.hpp"

namespace moe::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Outputs are staged in memory and only written once the run has succeeded,
// so a failing run leaves nothing behind.
class Outputs {
 public:
  void add(std::string path, std::string content) {
    files_.emplace_back(std::move(path), std::move(content));
  }
  void add(std::string path, std::span<const std::uint8_t> bytes) {
    add(std::move(path), std::string(bytes.begin(), bytes.end()));
  }

  void commit() {
    std::vector<std::string> written;
    try {
      for (const auto& [path, content] : files_) {
        write_file_atomic(path, std::string_view(content));
        written.push_back(path);
      }
    } catch (...) {
      for (const auto& p : written) std::remove(p.c_str());
      throw;
    }
  }

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  std::string preset = "none";
};

struct ModelFlags {
  ModelConfig cfg;
  TrainConfig train;
};

struct RunFlags {
  std::string model;
  std::string prompt;
  std::size_t prompt_len = 8;
  std::size_t tokens = 32;
  std::string sampler = "categorical";
  std::string events;
  std::string trace;
  bool binary = false;
  bool record_hidden = true;
};

struct StoreFlags {
  std::string policy = "full";
  std::size_t k = 2;
  std::size_t b = 4;
  std::size_t m = 2;
  bool speculate = true;
  CLI::Option* k_opt = nullptr;
};

struct CostFlags {
  unsigned expert_bits = 2;
  double bandwidth = 0, expert_bytes = 0, attn_time = 0, expert_time = 0;
  bool overlap = true;
  bool pinned = false;
  double pinned_multiplier = 1.0;
  CLI::Option *bandwidth_opt = nullptr, *bytes_opt = nullptr, *attn_opt = nullptr,
              *expert_opt = nullptr;
};

void add_store_flags(CLI::App* sub, StoreFlags& f) {
  sub->add_option("--policy", f.policy, "full, cache_only (lru), no_cache or naive");
  f.k_opt = sub->add_option("--k", f.k, "device-resident experts per layer");
  sub->add_option("--b", f.b, "staging buffers");
  sub->add_option("--m", f.m, "experts speculatively staged per layer");
  sub->add_option("--speculate", f.speculate, "enable speculative loading");
}

EngineConfig engine_config(const StoreFlags& f, std::size_t expert_bytes) {
  EngineConfig c;
  c.policy = policy_from_string(f.policy);
  c.cache = {f.k, f.b, expert_bytes};
  c.spec.enabled = f.speculate;
  c.spec.m = f.m;
  return c;
}

// "a=b" lines of the resolved configuration, reloadable with --config. The
// output path is left out so a report does not depend on where it is written.
std::string resolved_config(const CLI::App& app, const CLI::App& sub) {
  std::ostringstream os;
  std::istringstream root(app.config_to_str(true, false));
  std::string line;
  const std::string prefix = sub.get_name() + ".";
  while (std::getline(root, line)) {
    const auto dot = line.find('.');
    const auto eq = line.find('=');
    const bool nested = dot != std::string::npos && dot < eq;
    if (line.rfind("out=", 0) == 0) continue;
    if (!nested || line.rfind(prefix, 0) == 0) os << line << '\n';
  }
  return os.str();
}

std::string commented(const std::string& config) {
  std::ostringstream os;
  std::istringstream in(config);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
  return os.str();
}

void require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
}

std::vector<std::uint32_t> parse_tokens(const std::string& text) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw UsageError("bad token '" + item + "' in --prompt");
    }
  }
  return out;
}

std::string tokens_line(std::span<const std::uint32_t> tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(tokens[i]);
  }
  return s + '\n';
}

std::vector<std::uint8_t> trace_bytes(const Trace& t, bool binary) {
  if (binary) return to_binary(t);
  const std::string text = to_jsonl(t);
  return {text.begin(), text.end()};
}

void cmd_train(const Globals& g, const ModelFlags& f, const std::string& config, Outputs& out) {
  require_out(g);
  ModelConfig cfg = f.cfg;
  cfg.seed = g.seed;
  const TrainResult r = train_toy(cfg, f.train);
  std::cout << "loss " << r.initial_loss << " -> " << r.final_loss << '\n';
  out.add(g.out, encode_checkpoint(r.model));
  out.add(g.out + ".run.toml", config);
}

// generate and trace share the run; they differ in what --out holds.
void cmd_run(const Globals& g, const RunFlags& f, const StoreFlags& s, bool trace_out,
             const std::string& config, Outputs& out) {
  require_out(g);
  if (f.model.empty()) throw UsageError("--model is required");
  const LoadedModel lm = load_any_checkpoint(f.model);
  const ModelConfig& mc = lm.model.config();
  EngineConfig ec = engine_config(s, lm.expert_bytes);
  ec.record_hidden = f.record_hidden;

  std::vector<std::uint32_t> prompt;
  if (!f.prompt.empty()) {
    prompt = parse_tokens(f.prompt);
  } else {
    Rng rng(g.seed);
    prompt.resize(f.prompt_len);
    for (auto& t : prompt) t = static_cast<std::uint32_t>(rng.below(mc.vocab_size));
  }
  if (prompt.empty()) throw UsageError("empty prompt");
  Sampler sampler = f.sampler == "greedy" ? Sampler::greedy()
                    : f.sampler == "categorical"
                        ? Sampler::categorical(g.seed)
                        : throw UsageError("--sampler must be greedy or categorical");

  Engine engine(lm.model, ec);
  engine.prefill(prompt);
  const auto generated = engine.decode(f.tokens, sampler);
  const auto& events = engine.store().events();
  std::cout << "recall " << recall(events) << " events " << events.size() << '\n';

  if (trace_out) {
    out.add(g.out, trace_bytes(engine.trace(), f.binary));
  } else {
    out.add(g.out, tokens_line(generated));
    if (!f.trace.empty()) out.add(f.trace, trace_bytes(engine.trace(), f.binary));
  }
  if (!f.events.empty()) {
    std::ostringstream os;
    write_events_jsonl(os, events);
    out.add(f.events, os.str());
  }
  out.add(g.out + ".run.toml", config);
}

void cmd_synth(const Globals& g, SyntheticTraceSpec spec, bool binary, const std::string& config,
               Outputs& out) {
  require_out(g);
  spec.seed = g.seed;
  out.add(g.out, trace_bytes(synth(spec), binary));
  out.add(g.out + ".run.toml", config);
}

void cmd_replay(const Globals& g, const std::string& trace_path, const std::string& model_path,
                const std::string& events_path, const StoreFlags& s, const std::string& config,
                Outputs& out) {
  require_out(g);
  const Trace t = load_trace(trace_path);
  std::optional<LoadedModel> lm;
  if (!model_path.empty()) lm = load_any_checkpoint(model_path);
  const EngineConfig ec = engine_config(s, lm ? lm->expert_bytes : 0);
  const ReplayResult r = replay(t, ec, lm ? &lm->model : nullptr);

  std::map<EventKind, std::size_t> n;
  for (const auto& e : r.events) ++n[e.kind];
  const std::size_t acquires = n[EventKind::kHit] + n[EventKind::kStagingHit] +
                               n[EventKind::kMissLoad];
  const EngineConfig res = ec.resolved();
  char rec[32];
  std::snprintf(rec, sizeof rec, "%.9g", r.recall);
  std::ostringstream os;
  os << commented(config)
     << "policy,k,b,m,acquires,hits,staging_hits,misses,speculative_loads,evictions,recall\n"
     << to_string(res.policy) << ',' << res.cache.k << ',' << res.cache.b << ','
     << (res.spec.active() ? res.spec.m : 0) << ',' << acquires << ',' << n[EventKind::kHit]
     << ',' << n[EventKind::kStagingHit] << ',' << n[EventKind::kMissLoad] << ','
     << n[EventKind::kSpeculativeLoad] << ',' << n[EventKind::kEvictToHost] << ',' << rec
     << '\n';
  out.add(g.out, os.str());
  if (!events_path.empty()) {
    std::ostringstream ev;
    write_events_jsonl(ev, r.events);
    out.add(events_path, ev.str());
  }
  std::cout << "recall " << rec << '\n';
}

QuantScheme scheme_from(unsigned bits, CLI::Option* g_opt, std::size_t g, CLI::Option* sg_opt,
                        std::size_t sg, unsigned meta) {
  QuantScheme s = QuantScheme::preset(bits);
  if (bits == 16) return s;
  if (g_opt->count()) s.group_size = g;
  if (sg_opt->count()) s.scale_group_size = sg;
  s.meta_bits = meta;
  s.validate();
  return s;
}

void cmd_quantize(const std::string& in, const std::string& out_path, const QuantScheme& scheme,
                  const std::string& config, Outputs& out) {
  const Model model = load_checkpoint(in);
  const auto bytes = encode_quantized_checkpoint(model, scheme);
  std::cout << scheme.label() << " bits_per_param " << bits_per_param(scheme) << '\n';
  out.add(out_path, bytes);
  out.add(out_path + ".run.toml", config);
}

void cmd_size_report(const Globals& g, const std::string& arch_name, unsigned attn_bits,
                     unsigned expert_bits, bool table, const std::string& config, Outputs& out) {
  if (arch_name != "mixtral8x7b") throw UsageError("unknown --arch '" + arch_name + "'");
  const ArchSpec arch = ArchSpec::mixtral8x7b();
  std::vector<std::pair<unsigned, unsigned>> combos;
  if (table) {
    for (unsigned a : {16u, 4u})
      for (unsigned e : {16u, 4u, 3u, 2u}) combos.emplace_back(a, e);
  } else {
    combos.emplace_back(attn_bits, expert_bits);
  }
  std::ostringstream os;
  os << commented(config) << "attn_quant,expert_quant,size_gib\n";
  for (auto [a, e] : combos) {
    MixedQuantConfig mq;
    mq.attn_scheme = QuantScheme::preset(a);
    mq.expert_scheme = QuantScheme::preset(e);
    const SizeReport r = model_size_report(arch, mq);
    char gib[32];
    std::snprintf(gib, sizeof gib, "%.2f", r.total_gib);
    os << mq.attn_scheme.label() << ',' << mq.expert_scheme.label() << ',' << gib << '\n';
  }
  if (g.out.empty())
    std::cout << os.str();
  else
    out.add(g.out, os.str());
}

CostModel cost_from(const CostFlags& f) {
  CostModel c = CostModel::mixtral_calibration(QuantScheme::preset(f.expert_bits));
  if (f.bandwidth_opt->count()) c.h2d_bandwidth = f.bandwidth;
  if (f.bytes_opt->count()) c.expert_bytes = f.expert_bytes;
  if (f.attn_opt->count()) c.attn_compute_time = f.attn_time;
  if (f.expert_opt->count()) c.expert_compute_time = f.expert_time;
  c.overlap = f.overlap;
  c.pinned = f.pinned;
  c.pinned_bandwidth_multiplier = f.pinned_multiplier;
  c.validate();
  return c;
}

void cmd_bench(const Globals& g, const std::string& trace_path, const std::string& model_path,
               const StoreFlags& s, const CostFlags& cf, const std::vector<std::size_t>& ks,
               const std::vector<std::size_t>& ms, const std::string& config, Outputs& out) {
  require_out(g);
  const Trace t = load_trace(trace_path);
  std::optional<LoadedModel> lm;
  if (!model_path.empty()) lm = load_any_checkpoint(model_path);
  const CostModel cost = cost_from(cf);
  const auto rows =
      ablation_suite(t, lm ? &lm->model : nullptr, cost, engine_config(s, 0), ks, ms);
  std::ostringstream os;
  os << commented(config);
  write_csv(os, std::span<const AblationRow>(rows));
  out.add(g.out, os.str());
}

void cmd_recall_curves(const Globals& g, const std::vector<std::string>& trace_paths,
                       const std::string& model_path, const std::vector<std::size_t>& ks,
                       const std::vector<std::size_t>& las, const std::vector<std::size_t>& ms,
                       const std::string& config, Outputs& out) {
  require_out(g);
  std::vector<Trace> traces;
  for (const auto& p : trace_paths) traces.push_back(load_trace(p));
  std::optional<LoadedModel> lm;
  if (!model_path.empty()) lm = load_any_checkpoint(model_path);
  const auto pts = recall_curves(traces, lm ? &lm->model : nullptr, ks, las, ms);
  std::ostringstream os;
  os << commented(config);
  write_csv(os, std::span<const RecallPoint>(pts));
  out.add(g.out, os.str());
}

bool usage_code(ErrorCode c) {
  return c == ErrorCode::kInvalidArgument || c == ErrorCode::kUnknownKey;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Mixture-of-Experts inference with expert offloading", "moe_offload"};
  app.set_config("--config", "", "flat dotted key = value file; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "seed for every random choice");
  app.add_option("--out", g.out, "output path");
  app.add_option("--preset", g.preset, "k preset: 12gb (k=2) or 16gb (k=4)")
      ->check(CLI::IsMember({"none", "12gb", "16gb"}));

  // train
  ModelFlags mf;
  auto* train = app.add_subcommand("train", "train a toy MoE model");
  train->add_option("--vocab-size", mf.cfg.vocab_size);
  train->add_option("--d-model", mf.cfg.d_model);
  train->add_option("--n-layers", mf.cfg.n_layers);
  train->add_option("--n-heads", mf.cfg.n_heads);
  train->add_option("--d-ffn", mf.cfg.d_ffn);
  train->add_option("--n-experts", mf.cfg.n_experts);
  train->add_option("--top-k", mf.cfg.top_k_gate);
  train->add_option("--max-seq-len", mf.cfg.max_seq_len);
  train->add_option("--steps", mf.train.steps);
  train->add_option("--seq-len", mf.train.seq_len);
  train->add_option("--batch", mf.train.batch);
  train->add_option("--lr", mf.train.learning_rate);
  train->add_option("--grad-clip", mf.train.grad_clip);
  train->add_option("--corpus-seed", mf.train.corpus_seed);

  // generate, trace
  RunFlags gen_f, trace_f;
  StoreFlags gen_s, trace_s;
  auto* generate = app.add_subcommand("generate", "generate tokens with offloading");
  auto* trace = app.add_subcommand("trace", "record a routing trace while generating");
  for (auto [sub, f, s] : {std::tuple{generate, &gen_f, &gen_s}, {trace, &trace_f, &trace_s}}) {
    sub->add_option("--model", f->model, "checkpoint (plain or quantized)");
    sub->add_option("--prompt", f->prompt, "comma-separated prompt tokens");
    sub->add_option("--prompt-len", f->prompt_len, "random prompt length when --prompt is unset");
    sub->add_option("--tokens", f->tokens, "tokens to generate");
    sub->add_option("--sampler", f->sampler, "greedy or categorical");
    sub->add_option("--events", f->events, "also write the store event log (JSONL)");
    sub->add_option("--binary", f->binary, "binary trace format");
    sub->add_option("--record-hidden", f->record_hidden, "store pre-MoE states in the trace");
    add_store_flags(sub, *s);
  }
  generate->add_option("--trace", gen_f.trace, "also write the routing trace");

  // synth
  SyntheticTraceSpec sspec;
  bool synth_binary = false;
  auto* synth_cmd = app.add_subcommand("synth", "synthesize a routing trace");
  synth_cmd->add_option("--tokens", sspec.n_tokens);
  synth_cmd->add_option("--layers", sspec.n_layers);
  synth_cmd->add_option("--experts", sspec.n_experts);
  synth_cmd->add_option("--top-k", sspec.top_k);
  synth_cmd->add_option("--locality", sspec.locality);
  synth_cmd->add_option("--binary", synth_binary);

  // replay
  std::string replay_trace, replay_model, replay_events;
  StoreFlags replay_s;
  auto* replay_cmd = app.add_subcommand("replay", "replay a trace under a cache policy");
  replay_cmd->add_option("--trace", replay_trace)->required();
  replay_cmd->add_option("--model", replay_model, "needed for speculative policies");
  replay_cmd->add_option("--events", replay_events, "also write the event log (JSONL)");
  add_store_flags(replay_cmd, replay_s);

  // quantize
  std::string q_in, q_out;
  unsigned q_bits = 4, q_meta = 8;
  std::size_t q_g = 64, q_sg = 256;
  auto* quantize = app.add_subcommand("quantize", "quantize the experts of a checkpoint");
  quantize->add_option("--bits", q_bits)->check(CLI::IsMember({2u, 3u, 4u, 16u}));
  auto* q_g_opt = quantize->add_option("--group-size", q_g, "default: the preset for --bits");
  auto* q_sg_opt = quantize->add_option("--scale-group-size", q_sg, "default: the preset");
  quantize->add_option("--meta-bits", q_meta);
  quantize->add_option("input", q_in)->required();
  quantize->add_option("output", q_out)->required();

  // size-report
  std::string arch = "mixtral8x7b";
  unsigned attn_bits = 16, expert_bits = 16;
  bool table = false;
  auto* size_report = app.add_subcommand("size-report", "model size under mixed quantization");
  size_report->add_option("--arch", arch);
  size_report->add_option("--attn-bits", attn_bits)->check(CLI::IsMember({2u, 3u, 4u, 16u}));
  size_report->add_option("--expert-bits", expert_bits)->check(CLI::IsMember({2u, 3u, 4u, 16u}));
  size_report->add_flag("--table", table, "every attention/expert combination");

  // bench
  std::string bench_trace, bench_model;
  StoreFlags bench_s;
  CostFlags cf;
  std::vector<std::size_t> bench_ks{0, 1, 2, 4, 8}, bench_ms{0, 1, 2};
  auto* bench = app.add_subcommand("bench", "ablation under the transfer cost model");
  bench->add_option("--trace", bench_trace)->required();
  bench->add_option("--model", bench_model, "needed for the full-policy rows");
  add_store_flags(bench, bench_s);
  bench->add_option("--k-values", bench_ks)->delimiter(',');
  bench->add_option("--m-values", bench_ms)->delimiter(',');
  bench->add_option("--expert-bits", cf.expert_bits, "Mixtral expert size preset")
      ->check(CLI::IsMember({2u, 3u, 4u, 16u}));
  cf.bandwidth_opt = bench->add_option("--bandwidth", cf.bandwidth, "bytes/s");
  cf.bytes_opt = bench->add_option("--expert-bytes", cf.expert_bytes);
  cf.attn_opt = bench->add_option("--attn-time", cf.attn_time, "s per layer");
  cf.expert_opt = bench->add_option("--expert-time", cf.expert_time, "s per expert");
  bench->add_option("--overlap", cf.overlap);
  bench->add_option("--pinned", cf.pinned);
  bench->add_option("--pinned-multiplier", cf.pinned_multiplier);

  // recall-curves
  std::vector<std::string> rc_traces;
  std::string rc_model;
  std::vector<std::size_t> rc_ks{0, 1, 2, 4, 8}, rc_las{1, 2, 10}, rc_ms{1, 2};
  auto* curves = app.add_subcommand("recall-curves", "LRU and speculative recall curves");
  curves->add_option("--trace", rc_traces)->required();
  curves->add_option("--model", rc_model, "needed for the speculative curves");
  curves->add_option("--k-values", rc_ks)->delimiter(',');
  curves->add_option("--lookaheads", rc_las)->delimiter(',');
  curves->add_option("--m-values", rc_ms)->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  // The preset only fills in k when neither a flag nor the config set it.
  if (g.preset != "none") {
    const std::string k = g.preset == "12gb" ? "2" : "4";
    for (StoreFlags* s : {&gen_s, &trace_s, &replay_s, &bench_s}) {
      if (s->k_opt->count() == 0) {
        s->k_opt->add_result(k);
        s->k_opt->run_callback();
      }
    }
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string config = resolved_config(app, *sub);
  try {
    Outputs out;
    if (sub == train) cmd_train(g, mf, config, out);
    else if (sub == generate) cmd_run(g, gen_f, gen_s, false, config, out);
    else if (sub == trace) cmd_run(g, trace_f, trace_s, true, config, out);
    else if (sub == synth_cmd) cmd_synth(g, sspec, synth_binary, config, out);
    else if (sub == replay_cmd)
      cmd_replay(g, replay_trace, replay_model, replay_events, replay_s, config, out);
    else if (sub == quantize)
      cmd_quantize(q_in, q_out, scheme_from(q_bits, q_g_opt, q_g, q_sg_opt, q_sg, q_meta), config,
                   out);
    else if (sub == size_report)
      cmd_size_report(g, arch, attn_bits, expert_bits, table, config, out);
    else if (sub == bench) cmd_bench(g, bench_trace, bench_model, bench_s, cf, bench_ks, bench_ms, config, out);
    else if (sub == curves)
      cmd_recall_curves(g, rc_traces, rc_model, rc_ks, rc_las, rc_ms, config, out);
    out.commit();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return usage_code(e.code()) ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace moe::cli
