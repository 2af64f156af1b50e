#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "falcon/checkpoint.hpp"
#include "falcon/config.hpp"
#include "falcon/corpus.hpp"
#include "falcon/csgd.hpp"
#include "falcon/engine.hpp"
#include "falcon/infotheory.hpp"
#include "falcon/train_target.hpp"
#include "falcon/tree.hpp"

namespace {

using namespace falcon;

uint64_t resolve_seed(const CLI::Option* seed_opt, uint64_t seed_flag) {
  if (seed_opt->count() > 0) return seed_flag;
  if (const char* env = std::getenv("FALCON_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      raise(ErrorKind::Usage, "FALCON_SEED is not an integer");
    }
  }
  return 0;
}

KeyValueConfig merge_config(const std::string& config_path,
                            const std::vector<std::string>& sets) {
  KeyValueConfig kv;
  if (!config_path.empty()) kv.merge_from(KeyValueConfig::parse_file(config_path));
  for (const std::string& s : sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos) {
      raise(ErrorKind::Usage, "--set expects key=value, got '" + s + "'");
    }
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

TokenSeq text_tokens(const std::string& text) {
  return tokenize(std::vector<uint8_t>(text.begin(), text.end()));
}

struct LoadedTarget {
  ModelConfig cfg;
  TargetModel model;
};

LoadedTarget load_target(const std::string& ckpt_path) {
  KeyValueConfig kv = KeyValueConfig::parse_file(ckpt_path + ".cfg");
  ModelConfig cfg = ModelConfig::from_kv(kv);
  return {cfg, TargetModel(cfg, load_checkpoint(ckpt_path))};
}

int cmd_train_target(const std::string& corpus_path, const std::string& config_path,
                     const std::vector<std::string>& sets,
                     const std::string& out_path, uint64_t seed) {
  KeyValueConfig kv = merge_config(config_path, sets);
  ModelConfig mc = ModelConfig::from_kv(kv);
  TargetTrainConfig tc = TargetTrainConfig::from_kv(kv);
  Corpus corpus = ingest_corpus(corpus_path, tc.split_ratio, seed);
  std::cerr << "corpus: " << corpus.bytes.size() << " bytes from "
            << corpus.source_path << "\n";
  TargetModel model = train_target(mc, corpus, tc, seed, nullptr, &std::cerr);
  save_checkpoint(model.to_checkpoint(), out_path);
  mc.to_kv().save(out_path + ".cfg");
  std::cerr << "saved target to " << out_path << "\n";
  return 0;
}

int cmd_train_drafter(const std::string& target_path, const std::string& corpus_path,
                      const std::string& config_path,
                      const std::vector<std::string>& sets,
                      const std::string& out_path, const std::string& metrics_path,
                      bool no_glancing, uint64_t seed) {
  LoadedTarget t = load_target(target_path);
  KeyValueConfig kv = merge_config(config_path, sets);
  // drafter may override k against the same target weights
  ModelConfig mc = t.cfg;
  mc.k = kv.get_int("k", mc.k);
  mc.drafter_mlp_dim = kv.get_int("drafter_mlp_dim", mc.drafter_mlp_dim);
  mc.validate();
  CsgdConfig cc = CsgdConfig::from_kv(kv);
  if (no_glancing) cc.glancing = false;

  Corpus corpus = ingest_corpus(corpus_path, cc.split_ratio, seed);
  // the drafter rebuilt here must pair with the loaded target
  TargetModel target_with_k(mc, load_checkpoint(target_path));
  std::vector<EpochMetrics> metrics;
  DrafterModel drafter =
      train_drafter(target_with_k, corpus, cc, seed, &metrics, &std::cerr);
  save_checkpoint(drafter.to_checkpoint(), out_path);
  mc.to_kv().save(out_path + ".cfg");
  if (!metrics_path.empty()) append_metrics_csv(metrics_path, metrics);
  std::cerr << "saved drafter to " << out_path << "\n";
  return 0;
}

int cmd_generate(const std::string& target_path, const std::string& drafter_path,
                 const std::string& tree_path, const std::string& prompt,
                 const std::string& prompt_file, int64_t max_new, uint64_t seed) {
  std::string prompt_text = prompt;
  if (!prompt_file.empty()) {
    std::ifstream is(prompt_file, std::ios::binary);
    if (!is) raise(ErrorKind::Io, "cannot open prompt file '" + prompt_file + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    prompt_text = buf.str();
  }
  if (prompt_text.empty()) raise(ErrorKind::Usage, "prompt is empty");

  KeyValueConfig dkv = KeyValueConfig::parse_file(drafter_path + ".cfg");
  ModelConfig dc = ModelConfig::from_kv(dkv);
  TargetModel target(dc, load_checkpoint(target_path));
  DrafterModel drafter(dc, target, load_checkpoint(drafter_path));
  TreeShape shape = load_tree_config(tree_path);
  if (shape.k != dc.k) {
    raise(ErrorKind::Config, "tree k=" + std::to_string(shape.k) +
                                 " does not match drafter k=" + std::to_string(dc.k));
  }

  ModelDraftSource source(drafter);
  DecodeSession session;
  session.target = &target;
  session.drafter = &source;
  session.shape = shape;
  session.seed = seed;

  GenerateResult r = speculative_generate(session, text_tokens(prompt_text), max_new);
  auto bytes = detokenize(r.tokens);
  std::cout.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
  std::cout.flush();
  std::cerr << "\n[generate] tokens=" << r.metrics.tokens_total
            << " phases=" << r.metrics.draft_phases
            << " alpha=" << r.metrics.alpha() << " tau=" << r.metrics.tau()
            << (r.truncated ? " (truncated at context)" : "") << "\n";
  return 0;
}

int cmd_bench(const std::string& target_path, const std::string& drafter_path,
              const std::string& tree_path, const std::string& prompts_path,
              int64_t reps, int64_t max_new, const std::string& out_path,
              uint64_t seed) {
  KeyValueConfig dkv = KeyValueConfig::parse_file(drafter_path + ".cfg");
  ModelConfig dc = ModelConfig::from_kv(dkv);
  TargetModel target(dc, load_checkpoint(target_path));
  DrafterModel drafter(dc, target, load_checkpoint(drafter_path));
  TreeShape shape = load_tree_config(tree_path);

  std::ifstream is(prompts_path);
  if (!is) raise(ErrorKind::Io, "cannot open prompts '" + prompts_path + "'");
  std::vector<TokenSeq> prompts;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) prompts.push_back(text_tokens(line));
  }
  if (prompts.empty()) raise(ErrorKind::Usage, "no prompts in '" + prompts_path + "'");

  ModelDraftSource source(drafter);
  DecodeSession session;
  session.target = &target;
  session.drafter = &source;
  session.shape = shape;
  session.seed = seed;

  BenchReport report = bench(session, prompts, reps, max_new);
  if (!out_path.empty()) write_bench_csv(report, out_path);
  std::cout << bench_table(report);
  return 0;
}

int cmd_check_theory(int64_t trials, uint64_t seed) {
  DecompositionReport report = check_decompositions(trials, seed);
  std::cout << format_report(report);
  const Scalar worst =
      std::max({report.max_residual[0], report.max_residual[1],
                report.max_residual[2], report.max_residual[3]});
  if (worst >= 1e-9 || report.max_sanity_violation > 1e-9) {
    raise(ErrorKind::Numeric, "decomposition residuals exceed 1e-9 bits");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-autoregressive speculative decoding engine"};
  app.require_subcommand(1);

  std::string corpus_path, config_path, out_path, target_path, drafter_path;
  std::string tree_path, prompt, prompt_file, prompts_path, metrics_path;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  int64_t max_new = 64, reps = 3, trials = 1000;
  bool no_glancing = false;

  auto* tt = app.add_subcommand("train-target", "train the toy target model");
  tt->add_option("--corpus", corpus_path)->required();
  tt->add_option("--config", config_path);
  tt->add_option("--set", sets, "override config keys, key=value");
  tt->add_option("--out", out_path)->required();
  auto* tt_seed = tt->add_option("--seed", seed);

  auto* td = app.add_subcommand("train-drafter", "distill the draft head");
  td->add_option("--target", target_path)->required();
  td->add_option("--corpus", corpus_path)->required();
  td->add_option("--config", config_path);
  td->add_option("--set", sets, "override config keys, key=value");
  td->add_option("--out", out_path)->required();
  td->add_option("--metrics", metrics_path, "append per-epoch metrics CSV");
  td->add_flag("--no-glancing", no_glancing, "ablation: empty replacement plans");
  auto* td_seed = td->add_option("--seed", seed);

  auto* gen = app.add_subcommand("generate", "speculative greedy decoding");
  gen->add_option("--target", target_path)->required();
  gen->add_option("--drafter", drafter_path)->required();
  gen->add_option("--tree", tree_path)->required();
  auto* gp = gen->add_option("--prompt", prompt);
  auto* gpf = gen->add_option("--prompt-file", prompt_file);
  gp->excludes(gpf);
  gen->add_option("--max-new", max_new);
  auto* gen_seed = gen->add_option("--seed", seed);

  auto* bn = app.add_subcommand("bench", "speculative vs greedy wall-time");
  bn->add_option("--target", target_path)->required();
  bn->add_option("--drafter", drafter_path)->required();
  bn->add_option("--tree", tree_path)->required();
  bn->add_option("--prompts", prompts_path)->required();
  bn->add_option("--reps", reps);
  bn->add_option("--max-new", max_new);
  bn->add_option("--out", out_path);
  auto* bn_seed = bn->add_option("--seed", seed);

  auto* ct = app.add_subcommand("check-theory", "entropy decomposition residuals");
  ct->add_option("--trials", trials);
  auto* ct_seed = ct->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
    if (tt->parsed()) {
      return cmd_train_target(corpus_path, config_path, sets, out_path,
                              resolve_seed(tt_seed, seed));
    }
    if (td->parsed()) {
      return cmd_train_drafter(target_path, corpus_path, config_path, sets,
                               out_path, metrics_path, no_glancing,
                               resolve_seed(td_seed, seed));
    }
    if (gen->parsed()) {
      if (!prompt.empty() && !prompt_file.empty()) {
        raise(ErrorKind::Usage, "--prompt conflicts with --prompt-file");
      }
      return cmd_generate(target_path, drafter_path, tree_path, prompt,
                          prompt_file, max_new, resolve_seed(gen_seed, seed));
    }
    if (bn->parsed()) {
      return cmd_bench(target_path, drafter_path, tree_path, prompts_path, reps,
                       max_new, out_path, resolve_seed(bn_seed, seed));
    }
    if (ct->parsed()) {
      return cmd_check_theory(trials, resolve_seed(ct_seed, seed));
    }
    std::cerr << "error: usage: no subcommand\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: usage: " << e.what() << " (run --help)\n";
    return 2;
  } catch (const falcon::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
