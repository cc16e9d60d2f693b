#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/model.hpp"
#include "advlab/parallel.hpp"
#include "advlab/rng.hpp"
#include "advlab/surgery.hpp"

namespace advlab {

// Sample Pearson correlation, streaming co-moment form. Undefined when
// either variance collapses below 1e-24.
inline std::optional<double> pearson(std::span<const double> xs,
                                     std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ConfigError("pearson: length mismatch");
  if (xs.size() < 2) throw ConfigError("pearson: need at least two samples");
  double mx = 0, my = 0, cxx = 0, cyy = 0, cxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double n = double(i + 1);
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    mx += dx / n;
    my += dy / n;
    cxx += dx * (xs[i] - mx);
    cyy += dy * (ys[i] - my);
    cxy += dx * (ys[i] - my);
  }
  const double inv = 1.0 / double(xs.size() - 1);
  const double vx = cxx * inv, vy = cyy * inv;
  if (vx < 1e-24 || vy < 1e-24) return std::nullopt;
  return (cxy * inv) / std::sqrt(vx * vy);
}

// Per-block cosine between the skip-branch adjoint and the residual-branch
// pullback, captured from a single backward pass with no surgery applied.
template <typename T>
struct BlockGradientReport {
  struct Entry {
    std::optional<double> cosine;
    Tensor<T> skip_term;       // adjoint arriving through the skip edge
    Tensor<T> branch_term;     // pullback through the residual module
    Tensor<T> stream_adjoint;  // total adjoint at the block input
  };
  std::vector<Entry> blocks;  // index m-1 for block m in [1, 2l]
};

template <typename T>
BlockGradientReport<T> branch_gradient_cosines(const Model<T>& model,
                                               const PromptLayout& layout) {
  ForwardCached<T> fc = forward_cached(model, layout);
  const int loss = append_loss_node(fc.tape, fc.logits_node, layout);
  BackwardRequest req;
  req.capture_boundary_terms = true;
  const int blocks = model.cfg.n_blocks();
  for (int m = 1; m <= blocks; ++m) req.want.push_back(boundary_label(m));
  BackwardResult<T> res =
      fc.tape.backward(loss, nullptr, HookSet<T>{}, req);

  BlockGradientReport<T> rep;
  for (int m = 1; m <= blocks; ++m) {
    auto it = res.boundary.find(m);
    if (it == res.boundary.end() || !it->second.has_skip ||
        !it->second.has_branch)
      throw NumericError("missing branch capture at block " +
                         std::to_string(m));
    typename BlockGradientReport<T>::Entry e;
    e.skip_term = std::move(it->second.skip);
    e.branch_term = std::move(it->second.branch);
    e.stream_adjoint = res.grads.at(boundary_label(m));
    e.cosine = cosine_similarity(e.skip_term, e.branch_term);
    rep.blocks.push_back(std::move(e));
  }
  return rep;
}

// Causal-tracing branch effects: record both branch outputs under a
// one-token alteration of the prompt, patch them one at a time into the
// clean forward pass, and average the loss changes.
struct BranchEffectReport {
  std::vector<double> mean_skip_effect;   // per block m (index m-1)
  std::vector<double> mean_resid_effect;  // per block m
  int samples = 0;
};

struct TraceOptions {
  int samples = 16;
  bool force_identical = false;  // patch with the clean prompt's own values
  bool alter_any_prompt = false; // alter any prompt token, not just suffix
  int threads = 1;
};

template <typename T>
BranchEffectReport branch_effect_trace(const Model<T>& model,
                                       const PromptLayout& layout,
                                       const TraceOptions& opt,
                                       RngStream& rng) {
  if (opt.samples < 1) throw ConfigError("trace needs samples >= 1");
  const int blocks = model.cfg.n_blocks();

  Workspace<T> ws0;
  const Tensor<T>& clean_logits = forward_values_tokens(
      model, std::span<const int>(layout.tokens.data(), layout.tokens.size()),
      ws0);
  const double clean_loss =
      loss_from_logits(clean_logits, layout.target_begin,
                       std::span<const int>(layout.tokens.data(),
                                            layout.tokens.size()))
          .total;

  // Pre-draw every alteration on the sequential stream.
  const std::size_t alter_begin =
      opt.alter_any_prompt ? 0 : layout.suffix_begin;
  const std::size_t alter_end =
      opt.alter_any_prompt ? layout.target_begin : layout.suffix_end;
  struct Alteration {
    std::size_t pos;
    int token;
  };
  std::vector<Alteration> alts;
  for (int s = 0; s < opt.samples; ++s) {
    const std::size_t pos =
        alter_begin + rng.uniform_index(alter_end - alter_begin);
    int token = layout.tokens[pos];
    if (!opt.force_identical) {
      // Uniform over the vocabulary, excluding the incumbent.
      const int draw = int(rng.uniform_index(model.cfg.vocab_size - 1));
      token = draw >= layout.tokens[pos] ? draw + 1 : draw;
    }
    alts.push_back({pos, token});
  }

  std::vector<std::vector<double>> skip_eff(opt.samples),
      resid_eff(opt.samples);
  parallel_for(opt.samples, opt.threads, [&](std::size_t s) {
    Workspace<T> ws;
    PromptLayout altered = layout;
    altered.tokens[alts[s].pos] = alts[s].token;
    ActivationCache<T> alt_cache;
    forward_values_tokens(
        model,
        std::span<const int>(altered.tokens.data(), altered.tokens.size()), ws,
        nullptr, &alt_cache);

    skip_eff[s].resize(blocks);
    resid_eff[s].resize(blocks);
    Workspace<T> wsp;
    for (int m = 1; m <= blocks; ++m) {
      for (int which = 0; which < 2; ++which) {
        ForwardPatch<T> patch;
        patch.block = m;
        patch.branch = which == 0 ? PatchBranch::Skip : PatchBranch::Resid;
        patch.value = which == 0 ? &alt_cache.branch_skip[m - 1]
                                 : &alt_cache.branch_resid[m - 1];
        std::vector<ForwardPatch<T>> patches = {patch};
        ValueForwardOpts<T> opts;
        opts.patches = &patches;
        const Tensor<T>& logits = forward_values_tokens(
            model,
            std::span<const int>(layout.tokens.data(), layout.tokens.size()),
            wsp, &opts);
        const double patched =
            loss_from_logits(logits, layout.target_begin,
                             std::span<const int>(layout.tokens.data(),
                                                  layout.tokens.size()))
                .total;
        (which == 0 ? skip_eff : resid_eff)[s][m - 1] = patched - clean_loss;
      }
    }
  });

  BranchEffectReport rep;
  rep.samples = opt.samples;
  rep.mean_skip_effect.assign(blocks, 0.0);
  rep.mean_resid_effect.assign(blocks, 0.0);
  for (int s = 0; s < opt.samples; ++s) {
    for (int m = 0; m < blocks; ++m) {
      rep.mean_skip_effect[m] += skip_eff[s][m];
      rep.mean_resid_effect[m] += resid_eff[s][m];
    }
  }
  for (int m = 0; m < blocks; ++m) {
    rep.mean_skip_effect[m] /= double(opt.samples);
    rep.mean_resid_effect[m] /= double(opt.samples);
  }
  return rep;
}

// Scalar-projection / loss correlation grid. Columns cover every suffix and
// connector position, the first (up to) ten target-token positions with
// position-restricted losses, and one whole-representation column. Values
// are negated PCCs: higher means a stronger negative correlation.
struct PccReport {
  std::vector<std::string> column_labels;
  std::vector<int> layers;  // row order, r in [1, l]
  // neg_pcc[row][col]; nullopt marks a degenerate (zero-variance) cell
  std::vector<std::vector<std::optional<double>>> neg_pcc;
  int samples = 0;
  // Raw per-sample pairs, retained only when PccOptions::keep_samples is
  // set (oracle re-checks in tests): [sample][row][col] / [sample][col].
  std::vector<std::vector<std::vector<double>>> raw_projections;
  std::vector<std::vector<double>> raw_losses;
};

struct PccOptions {
  int samples = 64;
  int max_target_columns = 10;
  int threads = 1;
  bool keep_samples = false;
};

template <typename T>
PccReport projection_pcc(const Model<T>& model, const PromptLayout& current,
                         const PromptLayout& reference, const PccOptions& opt,
                         RngStream& rng) {
  if (opt.samples < 2) throw ConfigError("pcc needs samples >= 2");
  if (current.tokens.size() != reference.tokens.size())
    throw ConfigError("pcc: current/reference layouts differ in length");
  const int l = model.cfg.n_layers;
  const std::size_t N = current.tokens.size();
  const std::size_t tb = current.target_begin;

  // Column positions and labels.
  struct Column {
    std::string label;
    std::size_t pos = 0;     // grid position o (ignored for whole-h)
    bool whole = false;
    std::size_t loss_from = 0;  // first per-token index in the restricted mean
  };
  std::vector<Column> cols;
  for (std::size_t i = current.suffix_begin; i < current.suffix_end; ++i)
    cols.push_back({"suffix:" + std::to_string(i - current.suffix_begin), i,
                    false, 0});
  for (std::size_t i = current.connector_begin; i < current.connector_end; ++i)
    cols.push_back({"connector:" + std::to_string(i - current.connector_begin),
                    i, false, 0});
  const std::size_t n_target_cols = std::min<std::size_t>(
      opt.max_target_columns, current.target_len() > 0 ? current.target_len() - 1 : 0);
  for (std::size_t j = 0; j < n_target_cols; ++j)
    cols.push_back({"target:" + std::to_string(j), tb + j, false, j + 1});
  cols.push_back({"whole", 0, true, 0});

  // Guides from the current vs reference prompts, one per grid cell.
  Workspace<T> wsa, wsb;
  ActivationCache<T> cache_cur, cache_ref;
  forward_values_tokens(
      model, std::span<const int>(current.tokens.data(), N), wsa, nullptr,
      &cache_cur);
  forward_values_tokens(
      model, std::span<const int>(reference.tokens.data(), N), wsb, nullptr,
      &cache_ref);

  // guide[row][col] is a flat vector (d for positions, N*d for whole-h).
  std::vector<std::vector<std::vector<double>>> guide(l);
  for (int r = 1; r <= l; ++r) {
    guide[r - 1].resize(cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const Tensor<T>& hc = cache_cur.stream[r];
      const Tensor<T>& hr = cache_ref.stream[r];
      std::vector<double>& v = guide[r - 1][c];
      if (cols[c].whole) {
        v.resize(hc.data.size());
        for (std::size_t i = 0; i < v.size(); ++i)
          v[i] = double(hc.data[i]) - double(hr.data[i]);
      } else {
        std::span<const T> a = hc.row(cols[c].pos);
        std::span<const T> b = hr.row(cols[c].pos);
        v.resize(a.size());
        for (std::size_t i = 0; i < v.size(); ++i)
          v[i] = double(a[i]) - double(b[i]);
      }
    }
  }

  // Pre-drawn suffix alterations; forwards run in parallel.
  struct Alteration {
    std::size_t pos;
    int token;
  };
  std::vector<Alteration> alts;
  for (int s = 0; s < opt.samples; ++s) {
    const std::size_t pos =
        current.suffix_begin +
        rng.uniform_index(current.suffix_len());
    const int draw = int(rng.uniform_index(model.cfg.vocab_size - 1));
    const int token = draw >= current.tokens[pos] ? draw + 1 : draw;
    alts.push_back({pos, token});
  }

  // proj[s][row][col], loss[s][col]
  std::vector<std::vector<std::vector<double>>> proj(opt.samples);
  std::vector<std::vector<double>> loss_col(opt.samples);
  parallel_for(opt.samples, opt.threads, [&](std::size_t s) {
    Workspace<T> ws;
    PromptLayout altered = current;
    altered.tokens[alts[s].pos] = alts[s].token;
    ActivationCache<T> cache;
    const Tensor<T>& logits = forward_values_tokens(
        model, std::span<const int>(altered.tokens.data(), N), ws, nullptr,
        &cache);
    const LossReport rep = loss_from_logits(
        logits, tb, std::span<const int>(altered.tokens.data(), N));

    loss_col[s].resize(cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) {
      double acc = 0;
      for (std::size_t j = cols[c].loss_from; j < rep.per_token.size(); ++j)
        acc += rep.per_token[j];
      loss_col[s][c] = acc / double(rep.per_token.size() - cols[c].loss_from);
    }

    proj[s].assign(l, std::vector<double>(cols.size(), 0.0));
    for (int r = 1; r <= l; ++r) {
      for (std::size_t c = 0; c < cols.size(); ++c) {
        const std::vector<double>& v = guide[r - 1][c];
        double p = 0;
        if (cols[c].whole) {
          const Tensor<T>& h = cache.stream[r];
          for (std::size_t i = 0; i < v.size(); ++i)
            p += v[i] * double(h.data[i]);
        } else {
          std::span<const T> h = cache.stream[r].row(cols[c].pos);
          for (std::size_t i = 0; i < v.size(); ++i)
            p += v[i] * double(h[i]);
        }
        proj[s][r - 1][c] = p;
      }
    }
  });

  PccReport rep;
  rep.samples = opt.samples;
  for (const Column& c : cols) rep.column_labels.push_back(c.label);
  rep.neg_pcc.resize(l);
  for (int r = 1; r <= l; ++r) {
    rep.layers.push_back(r);
    rep.neg_pcc[r - 1].resize(cols.size());
    std::vector<double> xs(opt.samples), ys(opt.samples);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      for (int s = 0; s < opt.samples; ++s) {
        xs[s] = proj[s][r - 1][c];
        ys[s] = loss_col[s][c];
      }
      const std::optional<double> p = pearson(xs, ys);
      rep.neg_pcc[r - 1][c] = p.has_value()
                                  ? std::optional<double>(-*p)
                                  : std::nullopt;
    }
  }
  if (opt.keep_samples) {
    rep.raw_projections = std::move(proj);
    rep.raw_losses = std::move(loss_col);
  }
  return rep;
}

}  // namespace advlab
