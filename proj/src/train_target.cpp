#include "falcon/train_target.hpp"

#include "falcon/adamw.hpp"
#include "falcon/ops.hpp"

namespace falcon {

TargetModel train_target(const ModelConfig& mc, const Corpus& corpus,
                         const TargetTrainConfig& cfg, uint64_t seed,
                         std::vector<TargetEpochMetrics>* metrics_out,
                         std::ostream* log) {
  mc.validate();
  if (cfg.seq_len + 1 > mc.context_len) {
    raise(ErrorKind::Validation, "seq_len + 1 exceeds the model context");
  }
  Rng root(seed);
  Rng init_rng = root.fork(1);
  GradientTape tape;
  TargetModel model(mc, init_rng, &tape);
  AdamW opt(model.parameters(),
            {cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  Corpus src = corpus;
  src.split_ratio = cfg.split_ratio;
  // windows carry one extra byte so every row has a next-token label
  WindowSplit split = src.split_windows(cfg.seq_len + 1);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = root.fork(100 + static_cast<uint64_t>(epoch));
    std::vector<int64_t> order = split.train;
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = epoch_rng.next_index(i);
      std::swap(order[i - 1], order[j]);
    }
    int64_t steps = static_cast<int64_t>(order.size()) / cfg.batch_size;
    if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, cfg.max_steps_per_epoch);
    if (steps == 0 && !order.empty()) steps = 1;

    TargetEpochMetrics em;
    em.epoch = epoch;
    int64_t sampled = 0;
    for (int64_t step = 0; step < steps; ++step) {
      opt.zero_grad();
      const int64_t bs = std::min<int64_t>(
          cfg.batch_size, static_cast<int64_t>(order.size()) - step * cfg.batch_size);
      for (int64_t bi = 0; bi < bs; ++bi) {
        TokenSeq window =
            corpus.window(order[static_cast<size_t>(step * cfg.batch_size + bi)],
                          cfg.seq_len + 1);
        TokenSeq inputs(window.begin(), window.end() - 1);
        TokenSeq labels(window.begin() + 1, window.end());
        // random block-aligned offset trains the whole position table
        const int64_t slots = (mc.context_len - cfg.seq_len) / mc.k + 1;
        const int64_t offset =
            mc.k * static_cast<int64_t>(
                       epoch_rng.next_index(static_cast<uint64_t>(slots)));
        ForwardResult r = model.forward(inputs, offset);
        Tensor loss = cross_entropy(r.logits, labels);
        em.train_loss += loss.item();
        ++sampled;
        tape.backward(scale(loss, 1.0 / static_cast<Scalar>(bs)));
        tape.clear();
      }
      opt.step();
    }
    opt.zero_grad();
    if (sampled > 0) em.train_loss /= static_cast<Scalar>(sampled);

    {
      NoGradGuard ng;
      int64_t vals = 0;
      for (int64_t start : split.val) {
        if (vals >= 4) break;  // a small probe is enough for the log
        TokenSeq window = corpus.window(start, cfg.seq_len + 1);
        TokenSeq inputs(window.begin(), window.end() - 1);
        TokenSeq labels(window.begin() + 1, window.end());
        em.val_loss += cross_entropy(model.forward(inputs).logits, labels).item();
        ++vals;
      }
      if (vals > 0) em.val_loss /= static_cast<Scalar>(vals);
    }

    if (metrics_out) metrics_out->push_back(em);
    if (log) {
      (*log) << "epoch " << epoch << " train " << em.train_loss << " val "
             << em.val_loss << "\n";
    }
  }

  model.freeze();
  return model;
}

}  // namespace falcon
