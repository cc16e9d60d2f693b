#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <vector>

#include "advlab/model.hpp"
#include "advlab/parallel.hpp"
#include "advlab/rng.hpp"
#include "advlab/surgery.hpp"

namespace advlab {

enum class AttackMethod { Gcg, AutoPrompt };

inline const char* attack_method_name(AttackMethod m) {
  return m == AttackMethod::Gcg ? "gcg" : "autoprompt";
}

// Where the directional guide's "current prompt" endpoint comes from: the
// best suffix found so far, or the working suffix of the iteration.
enum class GuideSource { BestSuffix, CurrentSuffix };

struct AttackConfig {
  AttackMethod method = AttackMethod::Gcg;
  int top_k = 4;
  int candidate_batch = 20;
  int iterations = 500;
  int suffix_len = 20;
  int init_token = 0;
  std::uint64_t seed = 0;
  SurgeryConfig surgery;
  GuideSource guide_source = GuideSource::BestSuffix;
  int match_every = 10;    // exact-match cadence; 1 checks every iteration
  bool early_exit = false; // stop once every optimized query matches
  bool record_batches = false;
  int threads = 1;

  void validate(int n_layers, int vocab_size) const {
    if (top_k < 1 || top_k > vocab_size)
      throw ConfigError("top_k must lie in [1, vocab_size]");
    if (candidate_batch < 1) throw ConfigError("candidate_batch must be >= 1");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (suffix_len < 1) throw ConfigError("suffix_len must be >= 1");
    if (init_token < 0 || init_token >= vocab_size)
      throw ConfigError("init_token out of vocabulary");
    if (match_every < 1) throw ConfigError("match_every must be >= 1");
    surgery.validate(n_layers);
  }
};

// One query as token pieces; the suffix slot is filled by the optimizer.
struct AttackProblem {
  std::vector<int> prefix;     // e.g. bos + "Q: "
  std::vector<int> query;      // query text + trailing separator
  std::vector<int> connector;  // e.g. " A:"
  std::vector<int> target;

  PromptLayout layout(std::span<const int> suffix) const {
    return assemble_layout(prefix, query, suffix, connector, target);
  }
};

struct IterationLog {
  int iter = 0;
  double selected_loss = 0;
  double best_loss = 0;
  double match_fraction = 0;  // optimized-query match rate of the best suffix
  double grad_norm = 0;
  double guide_norm = 0;
  double wall_ms = 0;
};

struct IterationBatch {
  std::vector<std::vector<int>> proposals;   // per-position proposal lists
  std::vector<std::vector<int>> candidates;  // evaluated suffixes
  std::vector<double> losses;                // aggregated candidate losses
  int selected = -1;
};

struct AttackResult {
  std::vector<IterationLog> log;
  std::vector<std::vector<int>> suffix_history;  // current suffix per iter
  std::vector<int> initial_suffix;
  std::vector<int> best_suffix;
  double initial_loss = 0;
  double best_loss = 0;
  bool matched = false;          // every optimized query matches best_suffix
  double train_mr = 0;           // optimized queries
  double eval_mr = 0;            // held-out queries (universal runs)
  std::vector<char> train_matched;
  std::vector<char> eval_matched;
  std::vector<IterationBatch> batches;  // filled when record_batches
};

// Token lists predicted to decrease the loss most, per suffix position:
// the k most-negative gradient entries, ties broken by lowest token id.
template <typename T>
std::vector<std::vector<int>> topk_candidates(const Tensor<T>& grad, int k) {
  if (std::size_t(k) > grad.cols())
    throw ConfigError("top_k exceeds vocabulary size");
  std::vector<std::vector<int>> out(grad.rows());
  std::vector<int> idx(grad.cols());
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    std::iota(idx.begin(), idx.end(), 0);
    std::span<const T> row = grad.row(i);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                      [&](int a, int b) {
                        if (row[a] != row[b]) return row[a] < row[b];
                        return a < b;
                      });
    out[i].assign(idx.begin(), idx.begin() + k);
  }
  return out;
}

// B single-token replacements of the incumbent suffix: position uniform
// over the suffix, token uniform over that position's top-k list minus the
// incumbent token (a candidate always differs in exactly one position).
// Sampling is with replacement; the incumbent suffix itself is never
// injected.
inline std::vector<std::vector<int>> sample_gcg_candidates(
    const std::vector<std::vector<int>>& topk, std::span<const int> incumbent,
    int batch, RngStream& rng) {
  std::vector<std::vector<int>> out;
  out.reserve(batch);
  const std::size_t len = incumbent.size();
  for (int b = 0; b < batch; ++b) {
    std::vector<int> cand(incumbent.begin(), incumbent.end());
    bool replaced = false;
    for (int attempt = 0; attempt < int(16 * len) && !replaced; ++attempt) {
      const std::size_t pos = rng.uniform_index(len);
      std::vector<int> choices;
      for (int t : topk[pos])
        if (t != incumbent[pos]) choices.push_back(t);
      if (choices.empty()) continue;  // k=1 and the incumbent tops the list
      cand[pos] = choices[rng.uniform_index(choices.size())];
      replaced = true;
    }
    out.push_back(std::move(cand));
  }
  return out;
}

// AutoPrompt step: one uniformly chosen coordinate, all k best replacement
// tokens there (ranked by gradient, incumbent excluded so the count stays
// exactly k).
template <typename T>
std::vector<std::vector<int>> autoprompt_candidates(
    const Tensor<T>& grad, int k, std::span<const int> incumbent,
    RngStream& rng, std::vector<std::vector<int>>* proposals_out) {
  const std::size_t pos = rng.uniform_index(incumbent.size());
  std::vector<int> idx(grad.cols());
  std::iota(idx.begin(), idx.end(), 0);
  std::span<const T> row = grad.row(pos);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (row[a] != row[b]) return row[a] < row[b];
    return a < b;
  });
  std::vector<int> picks;
  for (int t : idx) {
    if (t == incumbent[pos]) continue;
    picks.push_back(t);
    if (int(picks.size()) == k) break;
  }
  if (proposals_out != nullptr) {
    proposals_out->assign(incumbent.size(), {});
    (*proposals_out)[pos] = picks;
  }
  std::vector<std::vector<int>> out;
  for (int t : picks) {
    std::vector<int> cand(incumbent.begin(), incumbent.end());
    cand[pos] = t;
    out.push_back(std::move(cand));
  }
  return out;
}

// Candidate losses under Eq.-style mean CE, averaged over the problem set.
// Surgery never alters evaluation; this is always the plain objective.
// Parallel-safe: every (candidate, query) cell is independent.
template <typename T>
std::vector<double> evaluate_candidates(
    const Model<T>& model, const std::vector<AttackProblem>& problems,
    const std::vector<std::vector<int>>& candidates, int threads) {
  const std::size_t nq = problems.size();
  const std::size_t nc = candidates.size();
  std::vector<double> cell(nc * nq, 0.0);
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), nc * nq);
  parallel_for(workers, int(workers), [&](std::size_t w) {
    Workspace<T> ws;
    for (std::size_t task = w; task < nc * nq; task += workers) {
      const std::size_t c = task / nq;
      const std::size_t q = task % nq;
      const PromptLayout lay = problems[q].layout(
          std::span<const int>(candidates[c].data(), candidates[c].size()));
      const Tensor<T>& logits = forward_values_tokens(
          model, std::span<const int>(lay.tokens.data(), lay.tokens.size()),
          ws);
      cell[task] = loss_from_logits(logits, lay.target_begin,
                                    std::span<const int>(lay.tokens.data(),
                                                         lay.tokens.size()))
                       .total;
    }
  });
  std::vector<double> out(nc, 0.0);
  for (std::size_t c = 0; c < nc; ++c) {
    double s = 0;
    for (std::size_t q = 0; q < nq; ++q) s += cell[c * nq + q];
    out[c] = s / double(nq);
  }
  return out;
}

namespace detail {

// Per-iteration gradient pass over all optimized queries: mean one-hot
// gradient aligned by suffix-relative position, with per-query guides
// refreshed from the same forward pass that gets differentiated.
template <typename T>
struct GradPassOut {
  Tensor<T> grad;
  double grad_norm = 0;
  double guide_norm = 0;
};

template <typename T>
GradPassOut<T> mean_onehot_gradient(const Model<T>& model,
                                    const std::vector<AttackProblem>& problems,
                                    std::span<const int> suffix,
                                    std::span<const int> guide_suffix,
                                    const AttackConfig& cfg,
                                    std::vector<std::vector<T>>& ref_h0,
                                    bool capture_reference) {
  const std::size_t nq = problems.size();
  const int r = cfg.surgery.resolved_layer(model.cfg.n_layers);
  const bool wants_guide = cfg.surgery.needs_guide();
  const bool guide_is_current =
      std::equal(suffix.begin(), suffix.end(), guide_suffix.begin(),
                 guide_suffix.end());

  std::vector<Tensor<T>> grads(nq);
  std::vector<double> guide_norms(nq, 0.0);
  parallel_for(nq, cfg.threads, [&](std::size_t q) {
    const PromptLayout lay = problems[q].layout(suffix);
    ForwardCached<T> fc = forward_cached(model, lay);
    DirectionalGuide<T> guide;
    const DirectionalGuide<T>* guide_ptr = nullptr;
    if (wants_guide) {
      const std::size_t n = lay.last_prompt_index();
      if (capture_reference) {
        std::span<const T> h = fc.cache.stream[r].row(n);
        ref_h0[q].assign(h.begin(), h.end());
      }
      if (guide_is_current) {
        guide = compute_guide<T>(
            fc.cache, std::span<const T>(ref_h0[q].data(), ref_h0[q].size()),
            r, n);
      } else {
        // Guide endpoint differs from the differentiated prompt: one extra
        // value forward to read its stream state.
        Workspace<T> ws;
        ActivationCache<T> gcache;
        const PromptLayout glay = problems[q].layout(guide_suffix);
        forward_values_tokens(
            model, std::span<const int>(glay.tokens.data(), glay.tokens.size()),
            ws, nullptr, &gcache);
        guide = compute_guide<T>(
            gcache, std::span<const T>(ref_h0[q].data(), ref_h0[q].size()), r,
            n);
      }
      guide_norms[q] = guide.norm();
      guide_ptr = &guide;
    }
    grads[q] = onehot_gradient_from(fc, lay, cfg.surgery, guide_ptr,
                                    model.cfg.n_layers)
                   .grad;
  });

  GradPassOut<T> out;
  out.grad = Tensor<T>(grads[0].shape, T(0));
  for (std::size_t q = 0; q < nq; ++q)  // fixed order: deterministic mean
    for (std::size_t i = 0; i < out.grad.data.size(); ++i)
      out.grad.data[i] += grads[q].data[i];
  const T inv = T(1) / T(nq);
  for (T& v : out.grad.data) v *= inv;
  out.grad_norm = tensor_norm(out.grad);
  out.guide_norm =
      std::accumulate(guide_norms.begin(), guide_norms.end(), 0.0) /
      double(nq);
  return out;
}

template <typename T>
double match_fraction(const Model<T>& model,
                      const std::vector<AttackProblem>& problems,
                      std::span<const int> suffix, int threads,
                      std::vector<char>* flags_out) {
  if (problems.empty()) return 0.0;
  std::vector<char> flags(problems.size(), 0);
  parallel_for(problems.size(), threads, [&](std::size_t q) {
    Workspace<T> ws;
    const PromptLayout lay = problems[q].layout(suffix);
    flags[q] = exact_match(model, lay, ws) ? 1 : 0;
  });
  if (flags_out != nullptr) *flags_out = flags;
  double m = 0;
  for (char f : flags) m += f;
  return m / double(problems.size());
}

}  // namespace detail

// Shared-suffix coordinate descent over one or more queries. A single-query
// call is exactly the query-specific attack; multi-query calls implement
// the universal protocol (mean gradients, mean candidate losses, held-out
// evaluation). Candidate sampling happens on one sequential RNG stream
// before any parallel evaluation, so results are worker-count independent.
template <typename T>
AttackResult run_attack(const Model<T>& model,
                        const std::vector<AttackProblem>& train,
                        const std::vector<AttackProblem>& eval_set,
                        const AttackConfig& cfg) {
  if (train.empty()) throw ConfigError("run_attack needs at least one query");
  cfg.validate(model.cfg.n_layers, model.cfg.vocab_size);

  AttackResult res;
  std::vector<int> current(cfg.suffix_len, cfg.init_token);
  res.initial_suffix = current;

  // Pre-validate every layout (length, token ids) for early, clear errors.
  for (const AttackProblem& p : train) p.layout(current).validate();
  for (const AttackProblem& p : eval_set) p.layout(current).validate();
  for (const AttackProblem& p : train)
    (void)one_hot_encode<T>(model.cfg,
                            std::span<const int>(p.layout(current).tokens));

  RngStream rng(cfg.seed);
  std::vector<std::vector<T>> ref_h0(train.size());

  res.initial_loss = evaluate_candidates(model, train, {current}, cfg.threads)[0];
  res.best_loss = res.initial_loss;
  res.best_suffix = current;

  double last_match = 0.0;
  using clock = std::chrono::steady_clock;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const auto t0 = clock::now();

    const std::vector<int>& guide_sfx =
        cfg.guide_source == GuideSource::BestSuffix ? res.best_suffix
                                                    : current;
    auto gp = detail::mean_onehot_gradient(
        model, train, std::span<const int>(current.data(), current.size()),
        std::span<const int>(guide_sfx.data(), guide_sfx.size()), cfg, ref_h0,
        /*capture_reference=*/iter == 0);

    std::vector<std::vector<int>> proposals;
    std::vector<std::vector<int>> candidates;
    if (cfg.method == AttackMethod::Gcg) {
      proposals = topk_candidates(gp.grad, cfg.top_k);
      candidates = sample_gcg_candidates(
          proposals, std::span<const int>(current.data(), current.size()),
          cfg.candidate_batch, rng);
    } else {
      candidates = autoprompt_candidates(
          gp.grad, cfg.top_k,
          std::span<const int>(current.data(), current.size()), rng,
          &proposals);
    }

    const std::vector<double> losses =
        evaluate_candidates(model, train, candidates, cfg.threads);
    std::size_t selected = 0;
    for (std::size_t c = 1; c < losses.size(); ++c)
      if (losses[c] < losses[selected]) selected = c;  // ties: first index

    current = candidates[selected];
    if (losses[selected] < res.best_loss) {
      res.best_loss = losses[selected];
      res.best_suffix = current;
    }

    if ((iter + 1) % cfg.match_every == 0 || iter + 1 == cfg.iterations) {
      last_match = detail::match_fraction(
          model, train,
          std::span<const int>(res.best_suffix.data(), res.best_suffix.size()),
          cfg.threads, nullptr);
    }

    IterationLog row;
    row.iter = iter;
    row.selected_loss = losses[selected];
    row.best_loss = res.best_loss;
    row.match_fraction = last_match;
    row.grad_norm = gp.grad_norm;
    row.guide_norm = gp.guide_norm;
    row.wall_ms =
        std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    res.log.push_back(row);
    res.suffix_history.push_back(current);

    if (cfg.record_batches) {
      IterationBatch batch;
      batch.proposals = std::move(proposals);
      batch.candidates = std::move(candidates);
      batch.losses = losses;
      batch.selected = int(selected);
      res.batches.push_back(std::move(batch));
    }

    if (cfg.early_exit && last_match == 1.0) break;
  }

  res.train_mr = detail::match_fraction(
      model, train,
      std::span<const int>(res.best_suffix.data(), res.best_suffix.size()),
      cfg.threads, &res.train_matched);
  res.matched = res.train_mr == 1.0;
  if (!eval_set.empty()) {
    res.eval_mr = detail::match_fraction(
        model, eval_set,
        std::span<const int>(res.best_suffix.data(), res.best_suffix.size()),
        cfg.threads, &res.eval_matched);
  }
  return res;
}

template <typename T>
AttackResult run_attack(const Model<T>& model, const AttackProblem& problem,
                        const AttackConfig& cfg) {
  return run_attack(model, std::vector<AttackProblem>{problem}, {}, cfg);
}

}  // namespace advlab
