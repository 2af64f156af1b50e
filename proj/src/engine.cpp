#include "falcon/engine.hpp"

#include <chrono>
#include <functional>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace falcon {

namespace {

int64_t argmax_row(const Tensor& logits, int64_t row) {
  const int64_t v = logits.dim(1);
  const auto& lv = logits.values();
  int64_t best = 0;
  for (int64_t j = 1; j < v; ++j) {
    if (lv[row * v + j] > lv[row * v + best]) best = j;
  }
  return best;
}

uint64_t now_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

}  // namespace

DraftTree ModelDraftSource::propose(const Tensor& prefix_features,
                                    const TokenSeq& prefix_tokens,
                                    const TreeShape& shape, int64_t passes) {
  return build_draft_tree(*drafter_, prefix_features, prefix_tokens, shape,
                          passes);
}

DraftTree OracleDraftSource::propose(const Tensor& prefix_features,
                                     const TokenSeq& prefix_tokens,
                                     const TreeShape& shape, int64_t passes) {
  (void)prefix_features;
  NoGradGuard ng;
  shape.validate();
  const int64_t k = shape.k;
  const int64_t h = target_->config().hidden_dim;
  const int64_t vocab = target_->config().vocab_size;
  TokenSeq truth = greedy_ar_generate(*target_, prefix_tokens, k * passes);
  const TokenSeq continuation(truth.begin() + prefix_tokens.size(), truth.end());

  DraftTree tree;
  tree.k = k;
  std::vector<int64_t> prev_level;
  int64_t truth_block = -1;  // block currently carrying the true continuation
  for (int64_t pass = 1; pass <= passes; ++pass) {
    std::vector<int64_t> level;
    std::vector<std::pair<int64_t, int64_t>> expansions;  // parent block, fanout
    if (pass == 1) {
      expansions.push_back({-1, shape.levels[0][0]});
    } else {
      const auto& branching = shape.levels[static_cast<size_t>(pass - 1)];
      for (size_t i = 0; i < prev_level.size(); ++i) {
        if (branching[i] > 0) expansions.push_back({prev_level[i], branching[i]});
      }
    }
    int64_t next_truth_block = -1;
    for (const auto& [parent_block, fanout] : expansions) {
      const bool on_truth_path = parent_block == truth_block;
      for (int64_t c = 0; c < fanout; ++c) {
        const int64_t block_id = tree.block_count();
        tree.block_parent.push_back(parent_block);
        tree.block_level.push_back(pass);
        level.push_back(block_id);
        const bool truthful = on_truth_path && c == 0;
        if (truthful) next_truth_block = block_id;
        for (int64_t d = 0; d < k; ++d) {
          const int64_t depth = (pass - 1) * k + d;
          DraftNode node;
          TokenId t = continuation[static_cast<size_t>(depth)];
          node.token = truthful ? t : (t + c + 1) % vocab;
          node.parent = d == 0 ? (parent_block < 0 ? -1 : parent_block * k + k - 1)
                               : tree.size() - 1;
          node.depth = depth;
          node.block = block_id;
          node.feature.assign(static_cast<size_t>(h), 0.0);
          tree.nodes.push_back(std::move(node));
        }
      }
    }
    truth_block = next_truth_block;
    prev_level = std::move(level);
  }
  return tree;
}

VerifyResult verify_tree_greedy(const TargetModel& target,
                                const TokenSeq& prefix, const DraftTree& tree) {
  NoGradGuard ng;
  if (tree.size() == 0) {
    raise(ErrorKind::Contract, "verify_tree_greedy: empty draft tree");
  }
  if (prefix.empty()) {
    raise(ErrorKind::Contract, "verify_tree_greedy: empty prefix");
  }
  const int64_t p = static_cast<int64_t>(prefix.size());

  TokenSeq tokens = prefix;
  std::vector<int64_t> positions(static_cast<size_t>(p));
  for (int64_t i = 0; i < p; ++i) positions[i] = i;
  for (const DraftNode& n : tree.nodes) {
    tokens.push_back(n.token);
    positions.push_back(p + n.depth);
  }
  ForwardResult fwd = target.forward_masked(
      tokens, positions, tree_verification_mask(tree, p));

  // children per node; -1 keys the anchor
  std::vector<std::vector<int64_t>> children(static_cast<size_t>(tree.size() + 1));
  for (int64_t a = 0; a < tree.size(); ++a) {
    children[static_cast<size_t>(tree.nodes[static_cast<size_t>(a)].parent + 1)]
        .push_back(a);
  }

  // Deepest all-accepted root path. Sibling blocks may repeat a token (rank
  // pairs branch on the second position too), so every matching child is
  // explored; ties keep the first match in node order, and any two tied
  // paths carry identical tokens at temperature 0.
  struct Walk {
    std::vector<int64_t> nodes;
    TokenId bonus = 0;
  };
  std::function<Walk(int64_t, int64_t)> explore = [&](int64_t node,
                                                      int64_t row) -> Walk {
    const TokenId want = argmax_row(fwd.logits, row);
    Walk best;
    best.bonus = want;
    for (int64_t cand : children[static_cast<size_t>(node + 1)]) {
      if (tree.nodes[static_cast<size_t>(cand)].token != want) continue;
      Walk sub = explore(cand, p + cand);
      if (sub.nodes.size() + 1 > best.nodes.size()) {
        best.nodes.assign(1, cand);
        best.nodes.insert(best.nodes.end(), sub.nodes.begin(), sub.nodes.end());
        best.bonus = sub.bonus;
      }
    }
    return best;
  };

  Walk walk = explore(-1, p - 1);
  VerifyResult res;
  res.features = fwd.features;
  res.accepted_nodes = walk.nodes;
  for (int64_t n : walk.nodes) {
    res.accepted_tokens.push_back(tree.nodes[static_cast<size_t>(n)].token);
  }
  res.bonus = walk.bonus;
  return res;
}

GenerateResult speculative_generate(DecodeSession& session,
                                    const TokenSeq& prompt, int64_t max_new) {
  NoGradGuard ng;
  if (session.target == nullptr || session.drafter == nullptr) {
    raise(ErrorKind::Config, "decode session is missing models");
  }
  if (prompt.empty()) raise(ErrorKind::Dimension, "prompt must be nonempty");
  session.shape.validate();
  const ModelConfig& cfg = session.target->config();
  session.target->check_tokens(prompt);
  const int64_t h = cfg.hidden_dim;
  const int64_t k = session.shape.k;
  const int64_t passes = session.shape.passes();
  const int64_t tree_tokens = k * session.shape.nodes_per_level() * passes;

  GenerateResult res;
  TokenSeq& committed = session.committed;
  committed = prompt;
  session.features.assign(committed.size() * static_cast<size_t>(h), 0.0);
  session.feature_rows_valid = 0;

  DecodeMetrics& m = res.metrics;
  int64_t emitted = 0;
  bool have_cur = false;
  Tensor cur_logits;

  auto refresh = [&]() {
    ForwardResult r = session.target->forward(committed);
    session.features = r.features.values();
    session.feature_rows_valid = static_cast<int64_t>(committed.size());
    cur_logits = r.logits;
    have_cur = true;
  };

  auto ar_step = [&]() {
    if (!have_cur) refresh();
    const TokenId tok =
        argmax_row(cur_logits, static_cast<int64_t>(committed.size()) - 1);
    committed.push_back(tok);
    session.features.resize(committed.size() * static_cast<size_t>(h), 0.0);
    ++emitted;
    ++m.tokens_total;
    have_cur = false;
  };

  refresh();
  while (emitted < max_new) {
    const int64_t p = static_cast<int64_t>(committed.size());
    // Drafting starts only on a block boundary: the root expansion reads the
    // last k rows as one complete block, matching the training-time mask.
    const bool tree_fits =
        p >= k && p % k == 0 && p + tree_tokens <= cfg.context_len;
    if (!tree_fits) {
      if (p + 1 > cfg.context_len) {
        res.truncated = true;
        break;
      }
      ar_step();
      continue;
    }

    Tensor prefix_features =
        Tensor::from({p, h}, std::vector<Scalar>(
                                 session.features.begin(),
                                 session.features.begin() + p * h));
    DraftTree tree = session.drafter->propose(prefix_features, committed,
                                              session.shape, passes);
    VerifyResult vr = verify_tree_greedy(*session.target, committed, tree);

    const int64_t room = max_new - emitted;
    const int64_t n_acc =
        std::min<int64_t>(static_cast<int64_t>(vr.accepted_tokens.size()), room);
    const auto& fv = vr.features.values();
    session.features.assign(fv.begin(), fv.begin() + p * h);
    for (int64_t i = 0; i < n_acc; ++i) {
      committed.push_back(vr.accepted_tokens[static_cast<size_t>(i)]);
      const int64_t row = p + vr.accepted_nodes[static_cast<size_t>(i)];
      session.features.insert(session.features.end(), fv.begin() + row * h,
                              fv.begin() + (row + 1) * h);
    }
    emitted += n_acc;
    m.tokens_total += n_acc;
    m.tokens_from_drafter += n_acc;
    ++m.draft_phases;
    m.accepted_per_phase.push_back(n_acc);
    session.feature_rows_valid = static_cast<int64_t>(committed.size());

    if (emitted < max_new) {
      committed.push_back(vr.bonus);
      session.features.resize(committed.size() * static_cast<size_t>(h), 0.0);
      ++emitted;
      ++m.tokens_total;
    }
    have_cur = false;
  }

  res.tokens = committed;
  return res;
}

BenchReport bench(DecodeSession& session, const std::vector<TokenSeq>& prompts,
                  int64_t reps, int64_t max_new) {
  if (reps < 1) raise(ErrorKind::Validation, "bench needs reps >= 1");
  if (prompts.empty()) raise(ErrorKind::Validation, "bench needs prompts");
  BenchReport report;
  for (size_t pi = 0; pi < prompts.size(); ++pi) {
    // warmup pair, excluded from timing
    GenerateResult warm = speculative_generate(session, prompts[pi], max_new);
    TokenSeq warm_ar = greedy_ar_generate(*session.target, prompts[pi], max_new);
    if (warm.tokens != warm_ar) {
      raise(ErrorKind::Contract,
            "bench: speculative output diverged from greedy decoding");
    }
    for (int64_t rep = 0; rep < reps; ++rep) {
      uint64_t t0 = now_ns();
      GenerateResult spec = speculative_generate(session, prompts[pi], max_new);
      uint64_t t1 = now_ns();
      TokenSeq ar = greedy_ar_generate(*session.target, prompts[pi], max_new);
      uint64_t t2 = now_ns();
      if (spec.tokens != ar) {
        raise(ErrorKind::Contract,
              "bench: speculative output diverged from greedy decoding");
      }
      BenchRow row;
      row.prompt_id = static_cast<int64_t>(pi);
      row.rep = rep;
      row.tokens = spec.metrics.tokens_total;
      row.phases = spec.metrics.draft_phases;
      row.alpha = spec.metrics.alpha();
      row.tau = spec.metrics.tau();
      row.wall_ns_spec = t1 - t0;
      row.wall_ns_ar = t2 - t1;
      row.speedup = row.wall_ns_spec == 0
                        ? 0.0
                        : static_cast<Scalar>(row.wall_ns_ar) /
                              static_cast<Scalar>(row.wall_ns_spec);
      row.low_confidence = row.wall_ns_spec < 1000000 || row.wall_ns_ar < 1000000;
      report.any_low_confidence |= row.low_confidence;
      report.rows.push_back(row);
    }
  }
  for (const BenchRow& r : report.rows) {
    report.mean_speedup += r.speedup;
    report.mean_alpha += r.alpha;
    report.mean_tau += r.tau;
  }
  const Scalar n = static_cast<Scalar>(report.rows.size());
  report.mean_speedup /= n;
  report.mean_alpha /= n;
  report.mean_tau /= n;
  return report;
}

void write_bench_csv(const BenchReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) raise(ErrorKind::Io, "cannot write bench report '" + path + "'");
  os << "prompt_id,tokens,phases,alpha,tau,wall_ns_spec,wall_ns_ar,speedup\n";
  os.precision(10);
  for (const BenchRow& r : report.rows) {
    os << r.prompt_id << ',' << r.tokens << ',' << r.phases << ',' << r.alpha
       << ',' << r.tau << ',' << r.wall_ns_spec << ',' << r.wall_ns_ar << ','
       << r.speedup << '\n';
  }
}

std::string bench_table(const BenchReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "prompt  rep  tokens  phases   alpha     tau  speedup\n";
  for (const BenchRow& r : report.rows) {
    os << std::setw(6) << r.prompt_id << std::setw(5) << r.rep << std::setw(8)
       << r.tokens << std::setw(8) << r.phases << std::setw(8) << r.alpha
       << std::setw(8) << r.tau << std::setw(9) << r.speedup
       << (r.low_confidence ? "  (low-confidence timing)" : "") << "\n";
  }
  os << "mean speedup " << report.mean_speedup << ", mean alpha "
     << report.mean_alpha << ", mean tau " << report.mean_tau << "\n";
  if (report.any_low_confidence) {
    os << "warning: some timings fall under 1 ms; treat speedups as "
          "low-confidence\n";
  }
  return os.str();
}

}  // namespace falcon
