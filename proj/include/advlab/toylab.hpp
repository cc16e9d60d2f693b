#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "advlab/charvocab.hpp"
#include "advlab/dataset.hpp"
#include "advlab/model.hpp"
#include "advlab/optimizer.hpp"
#include "advlab/parallel.hpp"
#include "advlab/rng.hpp"

namespace advlab {

struct TrainConfig {
  int steps = 400;
  int batch_size = 16;
  double lr = 3e-3;         // constant after warmup
  int warmup_steps = 20;    // linear ramp from zero
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double refusal_gate = 0.9;
  int threads = 1;

  void validate() const {
    if (steps < 1) throw ConfigError("train steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  }
};

struct TrainSequence {
  std::vector<int> tokens;
  std::size_t completion_begin = 0;  // prompt tokens are masked from loss
};

inline TrainSequence make_train_sequence(const CharVocab& vocab,
                                         const ToyRecord& rec) {
  TrainSequence seq;
  seq.tokens.push_back(CharVocab::kBos);
  const std::vector<int> p = vocab.encode(rec.prompt);
  seq.tokens.insert(seq.tokens.end(), p.begin(), p.end());
  seq.completion_begin = seq.tokens.size();
  const std::vector<int> c = vocab.encode(rec.completion);
  seq.tokens.insert(seq.tokens.end(), c.begin(), c.end());
  return seq;
}

// Attack template "Q: <query> <suffix> A: <target>"; the separator space
// before the suffix rides with the query span and the connector " A:"
// plays the role of a chat template's closing tokens.
inline AttackProblem make_attack_problem(const CharVocab& vocab,
                                         const std::string& query,
                                         const std::string& target) {
  AttackProblem p;
  p.prefix.push_back(CharVocab::kBos);
  const std::vector<int> q_tag = vocab.encode("Q: ");
  p.prefix.insert(p.prefix.end(), q_tag.begin(), q_tag.end());
  p.query = vocab.encode(query + " ");
  p.connector = vocab.encode(" A:");
  p.target = vocab.encode(target);
  return p;
}

struct TrainLogRow {
  int step = 0;
  double loss = 0;
  double lr = 0;
};

struct TrainOutput {
  Model<float> model;
  std::vector<TrainLogRow> log;
  double refusal_rate = 0;  // flagged train queries refusing under decode
};

// Greedy-decode refusal rate over the flagged training queries; the build
// gate for any attack experiment.
template <typename T>
double refusal_rate(const Model<T>& model, const CharVocab& vocab,
                    const ToyDataset& ds, int threads) {
  const std::vector<const ToyRecord*> flagged = ds.select(true, false);
  if (flagged.empty()) return 0.0;
  std::vector<char> ok(flagged.size(), 0);
  parallel_for(flagged.size(), threads, [&](std::size_t i) {
    Workspace<T> ws;
    const TrainSequence seq = make_train_sequence(vocab, *flagged[i]);
    const std::vector<int> prompt(seq.tokens.begin(),
                                  seq.tokens.begin() + seq.completion_begin);
    const std::vector<int> completion(
        seq.tokens.begin() + seq.completion_begin, seq.tokens.end());
    const std::vector<int> decoded =
        greedy_decode(model, std::span<const int>(prompt.data(), prompt.size()),
                      completion.size(), ws);
    ok[i] = decoded == completion ? 1 : 0;
  });
  double n = 0;
  for (char c : ok) n += c;
  return n / double(flagged.size());
}

// Next-token cross-entropy training over completion tokens, Adam updates,
// deterministic batch sampling. Gradients are reduced over the batch in
// sequence order, so the checkpoint is bit-reproducible for a fixed seed.
inline TrainOutput train_toy_model(
    const ModelConfig& model_cfg, const ToyDataset& ds, const CharVocab& vocab,
    const TrainConfig& cfg,
    const std::function<void(const TrainLogRow&)>& on_step = nullptr) {
  cfg.validate();
  model_cfg.validate();

  std::vector<TrainSequence> train_seqs;
  for (const ToyRecord& r : ds.records)
    if (!r.heldout) train_seqs.push_back(make_train_sequence(vocab, r));
  if (train_seqs.empty()) throw ConfigError("no training records");
  for (const TrainSequence& s : train_seqs)
    if (int(s.tokens.size()) > model_cfg.max_seq_len)
      throw ConfigError("training sequence exceeds max_seq_len");

  TrainOutput out;
  out.model = Model<float>::random(model_cfg);
  auto named = out.model.named_tensors();

  // Adam moments aligned with the parameter enumeration.
  std::vector<Tensor<float>> mom1, mom2;
  for (auto& [name, t] : named) {
    mom1.emplace_back(t->shape, 0.0f);
    mom2.emplace_back(t->shape, 0.0f);
  }

  RngStream rng(cfg.seed);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch(cfg.batch_size);
    for (auto& b : batch) b = rng.uniform_index(train_seqs.size());

    std::vector<double> seq_loss(batch.size(), 0.0);
    // seq_grads[i][p] aligns with the parameter enumeration.
    std::vector<std::vector<Tensor<float>>> seq_grads(batch.size());
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      const TrainSequence& seq = train_seqs[batch[i]];
      ForwardCached<float> fc = forward_cached_tokens(
          out.model,
          std::span<const int>(seq.tokens.data(), seq.tokens.size()), true);
      std::vector<int> targets(seq.tokens.begin() + seq.completion_begin,
                               seq.tokens.end());
      const int loss_node = fc.tape.ce_mean(
          fc.logits_node, seq.completion_begin - 1, std::move(targets));
      seq_loss[i] = double(fc.tape.value(loss_node).data[0]);
      BackwardRequest req;
      for (auto& [name, t] : named) req.want.push_back("param:" + name);
      BackwardResult<float> res =
          fc.tape.backward(loss_node, nullptr, HookSet<float>{}, req);
      seq_grads[i].reserve(named.size());
      for (auto& [name, t] : named)
        seq_grads[i].push_back(std::move(res.grads.at("param:" + name)));
    });

    double batch_loss = 0;
    for (double l : seq_loss) batch_loss += l;
    batch_loss /= double(batch.size());
    if (!std::isfinite(batch_loss))
      throw NumericError("training diverged at step " + std::to_string(step));

    const double warm =
        cfg.warmup_steps > 0
            ? std::min(1.0, double(step + 1) / double(cfg.warmup_steps))
            : 1.0;
    const double lr_t = cfg.lr * warm;
    const double t = double(step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);

    for (std::size_t p = 0; p < named.size(); ++p) {
      Tensor<float>& w = *named[p].second;
      const float inv_batch = 1.0f / float(batch.size());
      for (std::size_t k = 0; k < w.data.size(); ++k) {
        float g = 0;
        for (std::size_t i = 0; i < batch.size(); ++i)
          g += seq_grads[i][p].data[k];
        g *= inv_batch;
        float& m1 = mom1[p].data[k];
        float& m2 = mom2[p].data[k];
        m1 = float(cfg.beta1) * m1 + float(1.0 - cfg.beta1) * g;
        m2 = float(cfg.beta2) * m2 + float(1.0 - cfg.beta2) * g * g;
        const double mhat = double(m1) / bc1;
        const double vhat = double(m2) / bc2;
        w.data[k] =
            float(double(w.data[k]) -
                  lr_t * mhat / (std::sqrt(vhat) + cfg.adam_eps));
      }
    }

    TrainLogRow row{step, batch_loss, lr_t};
    out.log.push_back(row);
    if (on_step) on_step(row);
  }

  out.refusal_rate = refusal_rate(out.model, vocab, ds, cfg.threads);
  return out;
}

}  // namespace advlab
