#pragma once

#include <algorithm>
#include <deque>
#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/rng.hpp"
#include "advlab/surgery_config.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 97;
  int max_seq_len = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (d_ff < 1 || max_seq_len < 2) throw ConfigError("bad model dimensions");
  }

  int n_blocks() const { return 2 * n_layers; }

  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && d_model == o.d_model &&
           n_heads == o.n_heads && d_ff == o.d_ff &&
           vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
  }
};

// Token sequence with marked spans. All indices are 0-based half-open
// ranges; `last_prompt_index()` is the position whose next-token
// distribution emits the first target token.
struct PromptLayout {
  std::vector<int> tokens;
  std::size_t query_begin = 0, query_end = 0;
  std::size_t suffix_begin = 0, suffix_end = 0;
  std::size_t connector_begin = 0, connector_end = 0;
  std::size_t target_begin = 0;

  std::size_t size() const { return tokens.size(); }
  std::size_t suffix_len() const { return suffix_end - suffix_begin; }
  std::size_t target_len() const { return tokens.size() - target_begin; }
  std::size_t last_prompt_index() const { return target_begin - 1; }

  void validate() const {
    const std::size_t n = tokens.size();
    // Spans partition the sequence in order; the suffix is non-empty and
    // contiguous, the connector may be empty, and the target is non-empty.
    const bool ok = query_begin <= query_end && query_end == suffix_begin &&
                    suffix_begin < suffix_end &&
                    suffix_end == connector_begin &&
                    connector_begin <= connector_end &&
                    connector_end == target_begin && target_begin < n;
    if (!ok) throw ConfigError("prompt layout spans do not partition the sequence");
  }

  std::vector<int> suffix_tokens() const {
    return {tokens.begin() + suffix_begin, tokens.begin() + suffix_end};
  }
  std::vector<int> target_tokens() const {
    return {tokens.begin() + target_begin, tokens.end()};
  }
  std::vector<int> prompt_tokens() const {
    return {tokens.begin(), tokens.begin() + target_begin};
  }

  PromptLayout with_suffix(std::span<const int> s) const {
    PromptLayout out = *this;
    std::copy(s.begin(), s.end(), out.tokens.begin() + suffix_begin);
    return out;
  }
};

// Builds a layout from its span pieces. Any separator between query and
// suffix belongs to the tail of the query span.
inline PromptLayout assemble_layout(std::span<const int> prefix,
                                    std::span<const int> query,
                                    std::span<const int> suffix,
                                    std::span<const int> connector,
                                    std::span<const int> target) {
  PromptLayout lay;
  auto append = [&](std::span<const int> part) {
    lay.tokens.insert(lay.tokens.end(), part.begin(), part.end());
  };
  append(prefix);
  lay.query_begin = lay.tokens.size();
  append(query);
  lay.query_end = lay.tokens.size();
  lay.suffix_begin = lay.tokens.size();
  append(suffix);
  lay.suffix_end = lay.tokens.size();
  lay.connector_begin = lay.tokens.size();
  append(connector);
  lay.connector_end = lay.tokens.size();
  lay.target_begin = lay.tokens.size();
  append(target);
  lay.validate();
  return lay;
}

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm_gain, wq, wk, wv, wo;
  Tensor<T> mlp_norm_gain, w_gate, w_up, w_down;
};

// Decoder-only pre-norm transformer: RMS-normalized causal attention and
// gated MLP blocks, learned absolute positions, untied unembedding. The
// final normalization and the unembedding sit outside the 2l residual
// blocks, so branch-gradient scaling never touches them.
template <typename T>
struct Model {
  ModelConfig cfg;
  Tensor<T> embed;   // [V, d]
  Tensor<T> pos;     // [max_seq, d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm_gain;
  Tensor<T> unembed;  // [d, V]

  static Model zeros(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const std::size_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff;
    m.embed = Tensor<T>::matrix(v, d);
    m.pos = Tensor<T>::matrix(cfg.max_seq_len, d);
    m.layers.resize(cfg.n_layers);
    for (auto& L : m.layers) {
      L.attn_norm_gain = Tensor<T>({d}, T(1));
      L.wq = Tensor<T>::matrix(d, d);
      L.wk = Tensor<T>::matrix(d, d);
      L.wv = Tensor<T>::matrix(d, d);
      L.wo = Tensor<T>::matrix(d, d);
      L.mlp_norm_gain = Tensor<T>({d}, T(1));
      L.w_gate = Tensor<T>::matrix(d, f);
      L.w_up = Tensor<T>::matrix(d, f);
      L.w_down = Tensor<T>::matrix(f, d);
    }
    m.final_norm_gain = Tensor<T>({d}, T(1));
    m.unembed = Tensor<T>::matrix(d, v);
    return m;
  }

  static Model random(const ModelConfig& cfg) {
    Model m = zeros(cfg);
    RngStream rng(cfg.seed);
    auto fill = [&](Tensor<T>& t) {
      for (T& x : t.data) x = T(0.02 * rng.normal());
    };
    fill(m.embed);
    fill(m.pos);
    for (auto& L : m.layers) {
      fill(L.wq);
      fill(L.wk);
      fill(L.wv);
      fill(L.wo);
      fill(L.w_gate);
      fill(L.w_up);
      fill(L.w_down);
    }
    fill(m.unembed);
    return m;
  }

  // Fixed enumeration order; the checkpoint format and the optimizer's
  // parameter census both rely on it.
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("embed.weight", &embed);
    out.emplace_back("pos.weight", &pos);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      LayerWeights<T>& L = layers[i];
      out.emplace_back(p + "attn_norm.gain", &L.attn_norm_gain);
      out.emplace_back(p + "attn.wq", &L.wq);
      out.emplace_back(p + "attn.wk", &L.wk);
      out.emplace_back(p + "attn.wv", &L.wv);
      out.emplace_back(p + "attn.wo", &L.wo);
      out.emplace_back(p + "mlp_norm.gain", &L.mlp_norm_gain);
      out.emplace_back(p + "mlp.w_gate", &L.w_gate);
      out.emplace_back(p + "mlp.w_up", &L.w_up);
      out.emplace_back(p + "mlp.w_down", &L.w_down);
    }
    out.emplace_back("final_norm.gain", &final_norm_gain);
    out.emplace_back("unembed.weight", &unembed);
    return out;
  }
};

// Residual-stream grid and per-block branch outputs recorded during a
// forward pass. stream[r] is the state after layer r's MLP block (r = 0 is
// the embedding output); block m = 2r-1 is layer r's attention block and
// m = 2r its MLP block. branch_skip[m-1] + branch_resid[m-1] reproduces the
// input of block m+1.
template <typename T>
struct ActivationCache {
  std::vector<Tensor<T>> stream;        // l+1 entries, [n*, d]
  std::vector<Tensor<T>> branch_skip;   // 2l entries: I(z_m) = z_m
  std::vector<Tensor<T>> branch_resid;  // 2l entries: R_m(z_m)
  Tensor<T> logits;                     // [n*, V]
};

struct LossReport {
  double total = 0;
  std::vector<double> per_token;  // one entry per target position
};

// --- value-mode forward machinery -----------------------------------------

template <typename T>
struct Workspace {
  std::deque<Tensor<T>> slots;  // stable references across acquires
  std::size_t next = 0;

  void reset() { next = 0; }
  Tensor<T>* acquire(std::vector<std::size_t> shape) {
    if (next == slots.size()) slots.emplace_back();
    Tensor<T>& t = slots[next++];
    t.shape = std::move(shape);
    t.data.resize(t.numel());
    return &t;
  }
};

enum class PatchBranch { Skip, Resid };

// Forward-computation patch: substitute one branch input of one residual
// block with a recorded value (causal-tracing machinery).
template <typename T>
struct ForwardPatch {
  int block = 0;  // 1-based block index m
  PatchBranch branch = PatchBranch::Skip;
  const Tensor<T>* value = nullptr;
};

// Branch blend z' = z + gamma*R(z) + (1-gamma)*R_base for every block.
// Evaluating this forward at perturbed inputs (with R_base frozen) yields
// the function whose true gradient the gamma-scaled backward computes.
template <typename T>
struct GammaUnroll {
  double gamma = 1.0;
  const std::vector<Tensor<T>>* base_resid = nullptr;  // 2l tensors
};

template <typename T>
struct ValueForwardOpts {
  const std::vector<ForwardPatch<T>>* patches = nullptr;
  const GammaUnroll<T>* gamma_unroll = nullptr;
};

namespace detail {

// One forward implementation serves both the recording (tape) and the
// value-only paths; Rec toggles which. This keeps candidate evaluation and
// differentiation on literally the same arithmetic.
template <typename T, bool Rec>
struct GraphBuilder {
  Tape<T>* tape = nullptr;
  Workspace<T>* ws = nullptr;
  bool label_params = false;  // label weight leaves "param:<name>" (training)

  struct H {
    const Tensor<T>* t = nullptr;
    int id = -1;
  };

  H wrap(int id) { return {&tape->value(id), id}; }

  H leaf(const Tensor<T>& v) {
    if constexpr (Rec) return wrap(tape->leaf(v));
    return {&v, -1};
  }
  H matmul_nn(H a, H b) {
    if constexpr (Rec) return wrap(tape->matmul_nn(a.id, b.id));
    Tensor<T>* o = ws->acquire({a.t->rows(), b.t->cols()});
    kern::mm_nn(*a.t, *b.t, *o);
    return {o, -1};
  }
  H matmul_nt(H a, H b) {
    if constexpr (Rec) return wrap(tape->matmul_nt(a.id, b.id));
    Tensor<T>* o = ws->acquire({a.t->rows(), b.t->rows()});
    kern::mm_nt(*a.t, *b.t, *o);
    return {o, -1};
  }
  H add(H a, H b) {
    if constexpr (Rec) return wrap(tape->add(a.id, b.id));
    Tensor<T>* o = ws->acquire(a.t->shape);
    kern::add(*a.t, *b.t, *o);
    return {o, -1};
  }
  H residual_add(H skip, H branch, int block) {
    if constexpr (Rec) return wrap(tape->residual_add(skip.id, branch.id, block));
    Tensor<T>* o = ws->acquire(skip.t->shape);
    kern::add(*skip.t, *branch.t, *o);
    return {o, -1};
  }
  H scale(H a, T s) {
    if constexpr (Rec) return wrap(tape->scale(a.id, s));
    Tensor<T>* o = ws->acquire(a.t->shape);
    kern::axpy(s, *a.t, *o, false);
    return {o, -1};
  }
  H rmsnorm(H x, H gain) {
    if constexpr (Rec) return wrap(tape->rmsnorm(x.id, gain.id));
    Tensor<T>* o = ws->acquire(x.t->shape);
    kern::rmsnorm_fwd(*x.t, *gain.t, *o);
    return {o, -1};
  }
  H causal_softmax(H x) {
    if constexpr (Rec) return wrap(tape->causal_softmax(x.id));
    Tensor<T>* o = ws->acquire(x.t->shape);
    kern::causal_softmax_fwd(*x.t, *o);
    return {o, -1};
  }
  H silu_mul(H a, H b) {
    if constexpr (Rec) return wrap(tape->silu_mul(a.id, b.id));
    Tensor<T>* o = ws->acquire(a.t->shape);
    kern::silu_mul_fwd(*a.t, *b.t, *o);
    return {o, -1};
  }
  H take_rows(H x, std::size_t count) {
    if constexpr (Rec) return wrap(tape->take_rows(x.id, count));
    Tensor<T>* o = ws->acquire({count, x.t->cols()});
    kern::take_rows_fwd(*x.t, count, *o);
    return {o, -1};
  }
  H take_cols(H x, std::size_t c0, std::size_t cc) {
    if constexpr (Rec) return wrap(tape->take_cols(x.id, c0, cc));
    Tensor<T>* o = ws->acquire({x.t->rows(), cc});
    kern::take_cols_fwd(*x.t, c0, cc, *o);
    return {o, -1};
  }
  H concat_cols(const std::vector<H>& parts) {
    if constexpr (Rec) {
      std::vector<int> ids;
      for (const H& p : parts) ids.push_back(p.id);
      return wrap(tape->concat_cols(ids));
    }
    std::size_t dtot = 0;
    for (const H& p : parts) dtot += p.t->cols();
    Tensor<T>* o = ws->acquire({parts[0].t->rows(), dtot});
    std::vector<const Tensor<T>*> ptrs;
    for (const H& p : parts) ptrs.push_back(p.t);
    kern::concat_cols_fwd(std::span<const Tensor<T>* const>(ptrs), *o);
    return {o, -1};
  }
  void label(const char* name, H h) {
    if constexpr (Rec) tape->label(name, h.id);
  }
  void label(const std::string& name, H h) {
    if constexpr (Rec) tape->label(name, h.id);
  }
  void boundary(H h, int idx) {
    if constexpr (Rec) tape->mark_boundary(h.id, idx);
  }
};

template <typename T, bool Rec>
typename GraphBuilder<T, Rec>::H forward_graph(
    const Model<T>& m, const Tensor<T>& onehot, GraphBuilder<T, Rec>& B,
    ActivationCache<T>* cache, const ValueForwardOpts<T>* opts) {
  using H = typename GraphBuilder<T, Rec>::H;
  const std::size_t N = onehot.rows();
  const int l = m.cfg.n_layers;
  const std::size_t dh = std::size_t(m.cfg.d_model) / m.cfg.n_heads;

  if constexpr (Rec) {
    if (opts != nullptr)
      throw ConfigError("forward patches are value-mode only");
  }

  auto find_patch = [&](int block, PatchBranch br) -> const Tensor<T>* {
    if (opts == nullptr || opts->patches == nullptr) return nullptr;
    for (const ForwardPatch<T>& p : *opts->patches)
      if (p.block == block && p.branch == br) return p.value;
    return nullptr;
  };

  if (cache != nullptr) {
    cache->stream.clear();
    cache->branch_skip.clear();
    cache->branch_resid.clear();
  }

  auto param = [&](const std::string& name, const Tensor<T>& t) {
    H h = B.leaf(t);
    if constexpr (Rec) {
      if (B.label_params) B.label("param:" + name, h);
    }
    return h;
  };

  H x = B.leaf(onehot);
  B.label(kOneHotLabel, x);

  H emb = param("embed.weight", m.embed);
  H tok = B.matmul_nn(x, emb);
  H posw = param("pos.weight", m.pos);
  H posn = B.take_rows(posw, N);
  H s = B.add(tok, posn);  // z_1 = h_0
  B.label(stream_label(0), s);
  B.label(boundary_label(1), s);
  B.boundary(s, 1);
  if (cache != nullptr) cache->stream.push_back(*s.t);

  for (int layer = 1; layer <= l; ++layer) {
    const LayerWeights<T>& L = m.layers[layer - 1];
    const std::string lp = "layers." + std::to_string(layer - 1) + ".";
    for (int half = 0; half < 2; ++half) {
      const int block = 2 * (layer - 1) + half + 1;  // m in [1, 2l]
      H branch;
      if (half == 0) {
        H xn = B.rmsnorm(s, param(lp + "attn_norm.gain", L.attn_norm_gain));
        H q = B.matmul_nn(xn, param(lp + "attn.wq", L.wq));
        H k = B.matmul_nn(xn, param(lp + "attn.wk", L.wk));
        H v = B.matmul_nn(xn, param(lp + "attn.wv", L.wv));
        std::vector<H> heads;
        const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
        for (int h = 0; h < m.cfg.n_heads; ++h) {
          H qh = B.take_cols(q, h * dh, dh);
          H kh = B.take_cols(k, h * dh, dh);
          H vh = B.take_cols(v, h * dh, dh);
          H sc = B.scale(B.matmul_nt(qh, kh), inv_sqrt);
          H p = B.causal_softmax(sc);
          heads.push_back(B.matmul_nn(p, vh));
        }
        H att = B.concat_cols(heads);
        branch = B.matmul_nn(att, param(lp + "attn.wo", L.wo));
      } else {
        H xn = B.rmsnorm(s, param(lp + "mlp_norm.gain", L.mlp_norm_gain));
        H gate = B.matmul_nn(xn, param(lp + "mlp.w_gate", L.w_gate));
        H up = B.matmul_nn(xn, param(lp + "mlp.w_up", L.w_up));
        H act = B.silu_mul(gate, up);
        branch = B.matmul_nn(act, param(lp + "mlp.w_down", L.w_down));
      }
      B.label(block_out_label(block), branch);

      H skip_in = s;
      H branch_in = branch;
      if constexpr (!Rec) {
        if (const Tensor<T>* pv = find_patch(block, PatchBranch::Skip))
          skip_in = B.leaf(*pv);
        if (const Tensor<T>* pv = find_patch(block, PatchBranch::Resid))
          branch_in = B.leaf(*pv);
        if (opts != nullptr && opts->gamma_unroll != nullptr) {
          const GammaUnroll<T>& gu = *opts->gamma_unroll;
          Tensor<T>* blend = B.ws->acquire(branch.t->shape);
          kern::axpy(T(gu.gamma), *branch.t, *blend, false);
          kern::axpy(T(1.0 - gu.gamma), (*gu.base_resid)[block - 1], *blend,
                     true);
          branch_in = H{blend, -1};
        }
      }
      if (cache != nullptr) {
        cache->branch_skip.push_back(*skip_in.t);
        cache->branch_resid.push_back(*branch_in.t);
      }

      s = B.residual_add(skip_in, branch_in, block);
      B.label(boundary_label(block + 1), s);
      B.boundary(s, block + 1);
      if (half == 1) {
        B.label(stream_label(layer), s);
        if (cache != nullptr) cache->stream.push_back(*s.t);
      }
    }
  }

  H fin = B.rmsnorm(s, param("final_norm.gain", m.final_norm_gain));
  H logits = B.matmul_nn(fin, param("unembed.weight", m.unembed));
  if (cache != nullptr) cache->logits = *logits.t;
  return logits;
}

}  // namespace detail

// --- public model operations -----------------------------------------------

template <typename T>
Tensor<T> one_hot_encode(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.size() > std::size_t(cfg.max_seq_len))
    throw ConfigError("sequence too long for max_seq_len");
  Tensor<T> x = Tensor<T>::matrix(tokens.size(), cfg.vocab_size);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
      throw ConfigError("invalid token id " + std::to_string(tokens[i]));
    x.at(i, tokens[i]) = T(1);
  }
  return x;
}

template <typename T>
struct ForwardCached {
  ActivationCache<T> cache;
  Tape<T> tape;
  int logits_node = -1;
};

// Recording forward pass over the one-hot encoded prompt. Registers the
// hookable labels (one-hot input, every stream state, every block output)
// and fills the activation cache.
template <typename T>
ForwardCached<T> forward_cached(const Model<T>& m, const PromptLayout& layout) {
  layout.validate();
  ForwardCached<T> out;
  detail::GraphBuilder<T, true> B;
  B.tape = &out.tape;
  const Tensor<T> onehot = one_hot_encode<T>(
      m.cfg, std::span<const int>(layout.tokens.data(), layout.tokens.size()));
  auto logits = detail::forward_graph(
      m, onehot, B, &out.cache, static_cast<const ValueForwardOpts<T>*>(nullptr));
  out.logits_node = logits.id;
  return out;
}

// Same forward pass against an explicit (possibly relaxed, non-one-hot)
// input matrix; used by finite-difference oracles.
template <typename T>
ForwardCached<T> forward_cached_relaxed(const Model<T>& m,
                                        const Tensor<T>& input) {
  ForwardCached<T> out;
  detail::GraphBuilder<T, true> B;
  B.tape = &out.tape;
  auto logits = detail::forward_graph(
      m, input, B, &out.cache, static_cast<const ValueForwardOpts<T>*>(nullptr));
  out.logits_node = logits.id;
  return out;
}

// Recording forward over a bare token sequence (no span structure), with
// weight leaves labeled so the training loop can request their gradients.
template <typename T>
ForwardCached<T> forward_cached_tokens(const Model<T>& m,
                                       std::span<const int> tokens,
                                       bool label_params) {
  ForwardCached<T> out;
  detail::GraphBuilder<T, true> B;
  B.tape = &out.tape;
  B.label_params = label_params;
  const Tensor<T> onehot = one_hot_encode<T>(m.cfg, tokens);
  auto logits = detail::forward_graph(
      m, onehot, B, &out.cache,
      static_cast<const ValueForwardOpts<T>*>(nullptr));
  out.logits_node = logits.id;
  return out;
}

// Value-only forward; returns logits owned by the workspace (valid until
// the next call against the same workspace).
template <typename T>
const Tensor<T>& forward_values(
    const Model<T>& m, const Tensor<T>& onehot, Workspace<T>& ws,
    std::type_identity_t<const ValueForwardOpts<T>*> opts = nullptr,
    std::type_identity_t<ActivationCache<T>*> cache = nullptr) {
  ws.reset();
  detail::GraphBuilder<T, false> B;
  B.ws = &ws;
  auto logits = detail::forward_graph(m, onehot, B, cache, opts);
  return *logits.t;
}

template <typename T>
const Tensor<T>& forward_values_tokens(
    const Model<T>& m, std::span<const int> tokens, Workspace<T>& ws,
    std::type_identity_t<const ValueForwardOpts<T>*> opts = nullptr,
    std::type_identity_t<ActivationCache<T>*> cache = nullptr) {
  const Tensor<T> onehot = one_hot_encode<T>(m.cfg, tokens);
  return forward_values(m, onehot, ws, opts, cache);
}

// Mean cross-entropy of the target span under row-softmax of the logits,
// plus the per-position terms.
template <typename T>
LossReport loss_from_logits(const Tensor<T>& logits, std::size_t target_begin,
                            std::span<const int> tokens) {
  if (target_begin < 1 || target_begin >= tokens.size())
    throw ConfigError("empty target span");
  LossReport rep;
  const std::size_t count = tokens.size() - target_begin;
  rep.per_token.resize(count);
  double total = 0;
  for (std::size_t j = 0; j < count; ++j) {
    std::span<const T> row = logits.row(target_begin - 1 + j);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    double z = 0;
    for (std::size_t c = 0; c < row.size(); ++c) z += std::exp(double(row[c] - mx));
    const double lp =
        double(row[tokens[target_begin + j]] - mx) - std::log(z);
    rep.per_token[j] = -lp;
    total += -lp;
  }
  rep.total = total / double(count);
  if (!std::isfinite(rep.total)) throw NumericError("non-finite loss");
  return rep;
}

template <typename T>
LossReport adversarial_loss(const ActivationCache<T>& cache,
                            const PromptLayout& layout) {
  return loss_from_logits(cache.logits, layout.target_begin,
                          std::span<const int>(layout.tokens.data(),
                                               layout.tokens.size()));
}

template <typename T>
struct OneHotGradient {
  Tensor<T> grad;  // |A| x |V|, rows aligned with the suffix span
  bool replacement_skipped = false;
  double loss = 0;  // CE loss of the differentiated prompt (CE modes only)
};

// Appends the CE loss node for the layout's target span to a recorded tape.
template <typename T>
int append_loss_node(Tape<T>& tape, int logits_node,
                     const PromptLayout& layout) {
  std::vector<int> targets(layout.tokens.begin() + layout.target_begin,
                           layout.tokens.end());
  return tape.ce_mean(logits_node, layout.target_begin - 1, std::move(targets));
}

// Gradient of the configured surgery objective w.r.t. the one-hot input,
// restricted to suffix rows. Reuses an existing recorded forward.
template <typename T>
OneHotGradient<T> onehot_gradient_from(ForwardCached<T>& fc,
                                       const PromptLayout& layout,
                                       const SurgeryConfig& cfg,
                                       const DirectionalGuide<T>* guide,
                                       int n_layers) {
  CompiledSurgery<T> cs = make_hooks<T>(cfg, n_layers, guide);
  BackwardRequest req;
  req.want = {kOneHotLabel};

  BackwardResult<T> res;
  if (cs.objective == GradObjective::CrossEntropy) {
    const int loss_node = append_loss_node(fc.tape, fc.logits_node, layout);
    res = fc.tape.backward(loss_node, nullptr, cs.hooks, req);
  } else {
    const int seed_node = fc.tape.lookup(stream_label(cs.seed_layer));
    Tensor<T> seed(fc.tape.value(seed_node).shape, T(0));
    std::copy(cs.seed_vector.begin(), cs.seed_vector.end(),
              seed.data.begin() + cs.seed_row * seed.cols());
    res = fc.tape.backward(seed_node, &seed, cs.hooks, req);
  }

  const Tensor<T>& full = res.grads[kOneHotLabel];
  OneHotGradient<T> out;
  out.replacement_skipped = res.replacement_skipped;
  out.grad = Tensor<T>::matrix(layout.suffix_len(), full.cols());
  for (std::size_t i = 0; i < layout.suffix_len(); ++i) {
    std::span<const T> src = full.row(layout.suffix_begin + i);
    std::copy(src.begin(), src.end(), out.grad.row(i).begin());
  }
  if (!out.grad.all_finite())
    throw NumericError("non-finite one-hot gradient");
  return out;
}

// Self-contained variant: run the forward pass, build the hooks, return
// suffix-row gradients. The surgery layer must be valid for this model.
template <typename T>
OneHotGradient<T> one_hot_gradient(const Model<T>& m, const PromptLayout& layout,
                                   const SurgeryConfig& cfg,
                                   const DirectionalGuide<T>* guide = nullptr) {
  cfg.validate(m.cfg.n_layers);
  ForwardCached<T> fc = forward_cached(m, layout);
  OneHotGradient<T> out =
      onehot_gradient_from(fc, layout, cfg, guide, m.cfg.n_layers);
  if (cfg.mode != SurgeryMode::Lila)
    out.loss = adversarial_loss(fc.cache, layout).total;
  return out;
}

// Greedy continuation: argmax logits, ties broken toward the lowest id.
template <typename T>
std::vector<int> greedy_decode(const Model<T>& m, std::span<const int> prefix,
                               std::size_t steps, Workspace<T>& ws) {
  if (prefix.size() + steps > std::size_t(m.cfg.max_seq_len))
    throw ConfigError("greedy_decode: length overflow");
  std::vector<int> seq(prefix.begin(), prefix.end());
  std::vector<int> out;
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor<T>& logits = forward_values_tokens(
        m, std::span<const int>(seq.data(), seq.size()), ws);
    std::span<const T> row = logits.row(seq.size() - 1);
    int best = 0;
    for (int c = 1; c < int(row.size()); ++c)
      if (row[c] > row[best]) best = c;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

// True when greedy decoding from the prompt reproduces the target exactly.
template <typename T>
bool exact_match(const Model<T>& m, const PromptLayout& layout,
                 Workspace<T>& ws) {
  const std::vector<int> prompt = layout.prompt_tokens();
  const std::vector<int> target = layout.target_tokens();
  const std::vector<int> decoded = greedy_decode(
      m, std::span<const int>(prompt.data(), prompt.size()), target.size(), ws);
  return decoded == target;
}

}  // namespace advlab
