#include "falcon/csgd.hpp"

#include <cmath>
#include <fstream>

#include "falcon/adamw.hpp"
#include "falcon/ops.hpp"

namespace falcon {

int64_t hamming_distance(const TokenSeq& a, const TokenSeq& b) {
  if (a.size() != b.size()) {
    raise(ErrorKind::Dimension, "hamming_distance: lengths differ, " +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
  }
  int64_t d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i] ? 1 : 0;
  return d;
}

Scalar glancing_lambda(int64_t ep_c, int64_t ep_t, Scalar scale) {
  if (ep_t <= 0) raise(ErrorKind::Domain, "glancing_lambda: ep_t must be positive");
  if (ep_c < 0 || ep_c > ep_t) {
    raise(ErrorKind::Domain, "glancing_lambda: ep_c outside [0, ep_t]");
  }
  return scale * static_cast<Scalar>(ep_t - ep_c) / static_cast<Scalar>(ep_t);
}

GlancingPlan make_glancing_plan(const TokenSeq& draft_tokens,
                                const TokenSeq& teacher_tokens, Scalar lambda,
                                Rng& rng) {
  const int64_t d = hamming_distance(draft_tokens, teacher_tokens);
  const int64_t len = static_cast<int64_t>(draft_tokens.size());
  GlancingPlan plan;
  plan.n = std::min<int64_t>(
      len, static_cast<int64_t>(std::floor(lambda * static_cast<Scalar>(d))));
  if (plan.n <= 0) {
    plan.n = 0;
    return plan;
  }
  plan.span_start =
      static_cast<int64_t>(rng.next_index(static_cast<uint64_t>(len - plan.n + 1)));
  plan.positions.resize(static_cast<size_t>(plan.n));
  for (int64_t i = 0; i < plan.n; ++i) plan.positions[i] = plan.span_start + i;
  return plan;
}

void apply_coupled_replacement(DrafterInputs& inputs, const GlancingPlan& plan,
                               int64_t row_offset,
                               const TokenSeq& teacher_tokens,
                               const Tensor& teacher_features) {
  const int64_t rows = static_cast<int64_t>(inputs.tokens.size());
  const int64_t h = inputs.features.dim(1);
  if (inputs.features.dim(0) != rows ||
      static_cast<int64_t>(teacher_tokens.size()) != rows ||
      teacher_features.dim(0) != rows || teacher_features.dim(1) != h) {
    raise(ErrorKind::Dimension, "apply_coupled_replacement: row mismatch");
  }
  for (int64_t w : plan.positions) {
    const int64_t row = w + row_offset;
    if (row < 0) raise(ErrorKind::Dimension, "replacement row underflow");
    if (row >= rows) continue;  // window tail past the last input row
    inputs.tokens[static_cast<size_t>(row)] =
        teacher_tokens[static_cast<size_t>(row)];
    const auto& tf = teacher_features.values();
    std::copy(tf.begin() + row * h, tf.begin() + (row + 1) * h,
              inputs.features.values().begin() + row * h);
  }
}

CsgdLossParts csgd_loss(const Tensor& pred_features,
                        const Tensor& teacher_features,
                        const Tensor& teacher_logits,
                        const TokenSeq& teacher_tokens,
                        const TargetModel& target, const CsgdConfig& cfg) {
  if (pred_features.shape() != teacher_features.shape()) {
    raise(ErrorKind::Dimension, "csgd_loss: feature windows disagree, " +
                                    shape_str(pred_features.shape()) + " vs " +
                                    shape_str(teacher_features.shape()));
  }
  if (teacher_logits.dim(0) != pred_features.dim(0) ||
      static_cast<int64_t>(teacher_tokens.size()) != pred_features.dim(0)) {
    raise(ErrorKind::Dimension, "csgd_loss: window row counts disagree");
  }
  CsgdLossParts parts;
  parts.reg = smooth_l1(pred_features, teacher_features);

  Tensor student_logits = target.head(pred_features);
  Tensor teacher_probs;
  {
    NoGradGuard ng;
    teacher_probs = softmax(teacher_logits.detached(), -1);
  }
  parts.soft = kl_divergence(teacher_probs, softmax(student_logits, -1));
  parts.hard = cross_entropy(student_logits, teacher_tokens);

  auto check = [](const Tensor& t, const char* name) {
    if (!std::isfinite(t.at(0))) {
      raise(ErrorKind::Numeric, std::string("csgd_loss: ") + name + " is not finite");
    }
  };
  check(parts.reg, "regression loss");
  check(parts.soft, "soft distillation loss");
  check(parts.hard, "hard distillation loss");

  Tensor dist = add(scale(parts.soft, cfg.alpha), scale(parts.hard, 1.0 - cfg.alpha));
  parts.total = add(parts.reg, scale(dist, cfg.omega_dist));
  return parts;
}

void append_metrics_csv(const std::string& path,
                        const std::vector<EpochMetrics>& rows) {
  const bool fresh = !std::ifstream(path).good();
  std::ofstream os(path, std::ios::app);
  if (!os) raise(ErrorKind::Io, "cannot write metrics '" + path + "'");
  if (fresh) os << "epoch,lambda,L,L_reg,L_soft,L_hard\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.lambda << ',' << r.loss << ',' << r.reg << ','
       << r.soft << ',' << r.hard << '\n';
  }
}

namespace {

// Frozen-teacher pass over one window, cached for every epoch.
struct TeacherWindow {
  TokenSeq tokens;                   // w_0..w_{S-1}
  std::vector<Scalar> features;      // S x H
  std::vector<Scalar> logits;        // S x V
  TokenSeq argmax;                   // teacher pick per row
};

TeacherWindow run_teacher(const TargetModel& target, const TokenSeq& window,
                          int64_t pos_offset) {
  NoGradGuard ng;
  TeacherWindow tw;
  tw.tokens = window;
  ForwardResult r = target.forward(window, pos_offset);
  tw.features = r.features.values();
  tw.logits = r.logits.values();
  const int64_t s = r.logits.dim(0);
  const int64_t v = r.logits.dim(1);
  tw.argmax.resize(static_cast<size_t>(s));
  for (int64_t i = 0; i < s; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < v; ++j) {
      if (tw.logits[i * v + j] > tw.logits[i * v + best]) best = j;
    }
    tw.argmax[static_cast<size_t>(i)] = best;
  }
  return tw;
}

}  // namespace

DrafterModel train_drafter(const TargetModel& target, const Corpus& corpus,
                           const CsgdConfig& cfg, uint64_t seed,
                           std::vector<EpochMetrics>* metrics_out,
                           std::ostream* log,
                           const ReplacementObserver& observer) {
  cfg.validate();
  if (!target.is_frozen()) {
    raise(ErrorKind::Config,
          "train_drafter: target model must be frozen before distillation");
  }
  const ModelConfig& mc = target.config();
  const int64_t k = mc.k;
  const int64_t h = mc.hidden_dim;
  const int64_t v = mc.vocab_size;
  const int64_t s = cfg.seq_len;
  if (s <= k) {
    raise(ErrorKind::Validation, "seq_len must exceed k for a nonempty window");
  }
  if (s > mc.context_len) {
    raise(ErrorKind::Validation, "seq_len exceeds the model context");
  }
  const int64_t window_rows = s - k + 1;  // rows with teacher targets

  Rng root(seed);
  Rng init_rng = root.fork(1);
  GradientTape tape;
  DrafterModel drafter(mc, target, init_rng, &tape);
  AdamW opt(drafter.parameters(),
            {cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  Corpus split_src = corpus;
  split_src.split_ratio = cfg.split_ratio;
  WindowSplit split = split_src.split_windows(s);
  const uint64_t fingerprint_before = target.weight_fingerprint();

  RelaxedCausalMask seq_mask = build_relaxed_mask(s, k);

  for (int64_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const Scalar lambda =
        glancing_lambda(epoch, cfg.total_epochs, cfg.lambda_scale);
    Rng epoch_rng = root.fork(100 + static_cast<uint64_t>(epoch));

    std::vector<int64_t> order = split.train;
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = epoch_rng.next_index(i);
      std::swap(order[i - 1], order[j]);
    }
    int64_t steps = static_cast<int64_t>(order.size()) / cfg.batch_size;
    if (cfg.max_steps_per_epoch > 0) {
      steps = std::min(steps, cfg.max_steps_per_epoch);
    }
    if (steps == 0 && !order.empty()) steps = 1;

    EpochMetrics em;
    em.epoch = epoch;
    em.lambda = lambda;
    int64_t sampled = 0;

    for (int64_t step = 0; step < steps; ++step) {
      opt.zero_grad();
      const int64_t bs =
          std::min<int64_t>(cfg.batch_size,
                            static_cast<int64_t>(order.size()) - step * cfg.batch_size);
      for (int64_t bi = 0; bi < bs; ++bi) {
        // random block-aligned position offset, matching target training
        const int64_t slots = (mc.context_len - s) / k + 1;
        const int64_t pos_offset =
            k * static_cast<int64_t>(
                    epoch_rng.next_index(static_cast<uint64_t>(slots)));
        // frozen teacher, recomputed per sample; cheap next to the two
        // drafter passes and free of any cache memory ceiling
        const TeacherWindow tw = run_teacher(
            target,
            corpus.window(order[static_cast<size_t>(step * cfg.batch_size + bi)], s),
            pos_offset);

        // teacher-fed input rows: token w_i with noised feature F[i-1]
        DrafterInputs teacher_in;
        teacher_in.tokens = tw.tokens;
        std::vector<Scalar> feat(static_cast<size_t>(s * h), 0.0);
        for (int64_t i = 1; i < s; ++i) {
          for (int64_t j = 0; j < h; ++j) {
            Scalar noise = cfg.noise_halfwidth > 0.0
                               ? epoch_rng.next_uniform(-cfg.noise_halfwidth,
                                                        cfg.noise_halfwidth)
                               : 0.0;
            feat[i * h + j] = tw.features[(i - 1) * h + j] + noise;
          }
        }
        teacher_in.features = Tensor::from({s, h}, feat);

        // teacher tokens per row: the argmax the teacher emits at the
        // preceding position (row 0 keeps the corpus token; it is never in
        // a replacement span)
        TokenSeq teacher_row_tokens = tw.tokens;
        for (int64_t i = 1; i < s; ++i) {
          teacher_row_tokens[static_cast<size_t>(i)] =
              tw.argmax[static_cast<size_t>(i - 1)];
        }

        // pass 1: current drafter prediction, no recording
        TokenSeq draft_window(static_cast<size_t>(window_rows));
        TokenSeq teacher_window(static_cast<size_t>(window_rows));
        DrafterInputs second = teacher_in;
        second.features = teacher_in.features.detached();
        {
          NoGradGuard ng;
          DrafterResult first =
              drafter.forward(teacher_in.features, teacher_in.tokens, seq_mask,
                              /*want_logits=*/false, pos_offset);
          Tensor win = slice_rows(first.pred_features, 0, window_rows);
          Tensor logits = target.head(win);
          const auto& lv = logits.values();
          for (int64_t i = 0; i < window_rows; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < v; ++j) {
              if (lv[i * v + j] > lv[i * v + best]) best = j;
            }
            draft_window[static_cast<size_t>(i)] = best;
            teacher_window[static_cast<size_t>(i)] =
                tw.argmax[static_cast<size_t>(i + k - 1)];
          }

          // self-fed second-pass inputs: prediction for row i comes from
          // output row i-k of pass 1
          const auto& fv = first.pred_features.values();
          for (int64_t row = k; row < s; ++row) {
            const int64_t src = row - k;
            second.tokens[static_cast<size_t>(row)] =
                draft_window[static_cast<size_t>(src)];
            std::copy(fv.begin() + src * h, fv.begin() + (src + 1) * h,
                      second.features.values().begin() + row * h);
          }
        }

        GlancingPlan plan;
        const int64_t d = hamming_distance(draft_window, teacher_window);
        if (cfg.glancing) {
          plan = make_glancing_plan(draft_window, teacher_window, lambda,
                                    epoch_rng);
        }
        DrafterInputs before = second;
        before.features = second.features.detached();
        apply_coupled_replacement(second, plan, k, teacher_row_tokens,
                                  teacher_in.features);
        if (observer) {
          ReplacementAudit audit{plan,
                                 k,
                                 before,
                                 second,
                                 teacher_row_tokens,
                                 teacher_in.features,
                                 lambda,
                                 d};
          observer(audit);
        }

        // pass 2 carries the gradient
        DrafterResult out = drafter.forward(second.features, second.tokens,
                                            seq_mask, /*want_logits=*/false,
                                            pos_offset);
        Tensor pred = slice_rows(out.pred_features, 0, window_rows);

        std::vector<Scalar> tf(static_cast<size_t>(window_rows * h));
        std::vector<Scalar> tl(static_cast<size_t>(window_rows * v));
        for (int64_t i = 0; i < window_rows; ++i) {
          std::copy(tw.features.begin() + (i + k - 1) * h,
                    tw.features.begin() + (i + k) * h, tf.begin() + i * h);
          std::copy(tw.logits.begin() + (i + k - 1) * v,
                    tw.logits.begin() + (i + k) * v, tl.begin() + i * v);
        }
        CsgdLossParts parts =
            csgd_loss(pred, Tensor::from({window_rows, h}, std::move(tf)),
                      Tensor::from({window_rows, v}, std::move(tl)),
                      teacher_window, target, cfg);

        em.loss += parts.total.item();
        em.reg += parts.reg.item();
        em.soft += parts.soft.item();
        em.hard += parts.hard.item();
        ++sampled;

        tape.backward(scale(parts.total, 1.0 / static_cast<Scalar>(bs)));
        tape.clear();
      }
      opt.step();
    }
    opt.zero_grad();

    if (sampled > 0) {
      em.loss /= static_cast<Scalar>(sampled);
      em.reg /= static_cast<Scalar>(sampled);
      em.soft /= static_cast<Scalar>(sampled);
      em.hard /= static_cast<Scalar>(sampled);
    }
    if (metrics_out) metrics_out->push_back(em);
    if (log) {
      (*log) << "epoch " << epoch << " lambda " << em.lambda << " loss "
             << em.loss << " reg " << em.reg << " soft " << em.soft << " hard "
             << em.hard << "\n";
    }
  }

  if (target.weight_fingerprint() != fingerprint_before) {
    raise(ErrorKind::Config, "train_drafter: target weights changed during training");
  }
  return drafter;
}

}  // namespace falcon
