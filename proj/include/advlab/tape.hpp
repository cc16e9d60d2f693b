#pragma once

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/kernels.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

enum class Op {
  Leaf,
  MatmulNN,
  MatmulNT,
  Add,
  ResidualAdd,
  Scale,
  RmsNorm,
  CausalSoftmax,
  SiluMul,
  TakeRows,
  TakeCols,
  ConcatCols,
  CeMean,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatmulNN: return "matmul_nn";
    case Op::MatmulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::ResidualAdd: return "residual_add";
    case Op::Scale: return "scale";
    case Op::RmsNorm: return "rmsnorm";
    case Op::CausalSoftmax: return "causal_softmax";
    case Op::SiluMul: return "silu_mul";
    case Op::TakeRows: return "take_rows";
    case Op::TakeCols: return "take_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::CeMean: return "ce_mean";
  }
  return "?";
}

// Replacement rule applied to one row of the incoming adjoint at a labeled
// node. `skipped` reports a degenerate denominator; the original row is kept.
template <typename T>
struct RowReplaceOut {
  std::vector<T> value;
  bool skipped = false;
};

template <typename T>
struct RowRule {
  std::string label;
  std::size_t row = 0;
  std::function<RowReplaceOut<T>(std::span<const T>)> fn;
};

// Backward-pass interception rules. An empty HookSet leaves the adjoint
// computation untouched.
template <typename T>
struct HookSet {
  std::optional<T> residual_branch_scale;  // gamma applied on branch edges
  std::vector<RowRule<T>> row_replacements;

  bool empty() const {
    return !residual_branch_scale.has_value() && row_replacements.empty();
  }
};

struct BackwardRequest {
  std::vector<std::string> want;       // labels whose adjoints to return
  bool capture_boundary_terms = false; // split stream adjoints by branch
};

template <typename T>
struct BoundaryTerms {
  Tensor<T> skip;    // contribution arriving through the skip edge
  Tensor<T> branch;  // contribution pulled back through the residual module
  bool has_skip = false;
  bool has_branch = false;
};

template <typename T>
struct BackwardResult {
  std::map<std::string, Tensor<T>> grads;
  std::map<int, BoundaryTerms<T>> boundary;  // keyed by boundary index
  bool replacement_skipped = false;
};

// One forward pass recorded as a flat, topologically ordered op list.
// Rebuilt per pass; node ids double as the topological order.
template <typename T>
class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> in;
    Tensor<T> value;
    T scalar{};            // Scale
    int block = -1;        // ResidualAdd block index m (1-based)
    int boundary = -1;     // stream boundary index, set via mark_boundary
    std::size_t i0 = 0, i1 = 0;    // op-specific (col start/count, row range)
    std::vector<int> targets;      // CeMean target id per loss row
    Tensor<T> saved;               // CeMean probabilities over loss rows
    std::vector<T> per_token;      // CeMean per-position losses
  };

  const std::deque<Node>& nodes() const { return nodes_; }
  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  int leaf(Tensor<T> v) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    return push(std::move(n));
  }

  int matmul_nn(int a, int b) {
    Node n = make(Op::MatmulNN, {a, b});
    n.value = Tensor<T>::matrix(val(a).rows(), val(b).cols());
    kern::mm_nn(val(a), val(b), n.value);
    return push(std::move(n));
  }

  int matmul_nt(int a, int b) {
    Node n = make(Op::MatmulNT, {a, b});
    n.value = Tensor<T>::matrix(val(a).rows(), val(b).rows());
    kern::mm_nt(val(a), val(b), n.value);
    return push(std::move(n));
  }

  int add(int a, int b) {
    Node n = make(Op::Add, {a, b});
    n.value = Tensor<T>(val(a).shape);
    kern::add(val(a), val(b), n.value);
    return push(std::move(n));
  }

  // z' = skip + branch; the branch adjoint edge is the one gamma scales.
  int residual_add(int skip, int branch, int block_index) {
    Node n = make(Op::ResidualAdd, {skip, branch});
    n.block = block_index;
    n.value = Tensor<T>(val(skip).shape);
    kern::add(val(skip), val(branch), n.value);
    return push(std::move(n));
  }

  int scale(int a, T s) {
    Node n = make(Op::Scale, {a});
    n.scalar = s;
    n.value = Tensor<T>(val(a).shape);
    kern::axpy(s, val(a), n.value, false);
    return push(std::move(n));
  }

  int rmsnorm(int x, int gain) {
    Node n = make(Op::RmsNorm, {x, gain});
    n.value = Tensor<T>(val(x).shape);
    kern::rmsnorm_fwd(val(x), val(gain), n.value);
    return push(std::move(n));
  }

  int causal_softmax(int x) {
    Node n = make(Op::CausalSoftmax, {x});
    n.value = Tensor<T>(val(x).shape);
    kern::causal_softmax_fwd(val(x), n.value);
    return push(std::move(n));
  }

  int silu_mul(int a, int b) {
    Node n = make(Op::SiluMul, {a, b});
    n.value = Tensor<T>(val(a).shape);
    kern::silu_mul_fwd(val(a), val(b), n.value);
    return push(std::move(n));
  }

  int take_rows(int x, std::size_t count) {
    Node n = make(Op::TakeRows, {x});
    n.i1 = count;
    n.value = Tensor<T>::matrix(count, val(x).cols());
    kern::take_rows_fwd(val(x), count, n.value);
    return push(std::move(n));
  }

  int take_cols(int x, std::size_t c0, std::size_t cc) {
    Node n = make(Op::TakeCols, {x});
    n.i0 = c0;
    n.i1 = cc;
    n.value = Tensor<T>::matrix(val(x).rows(), cc);
    kern::take_cols_fwd(val(x), c0, cc, n.value);
    return push(std::move(n));
  }

  int concat_cols(const std::vector<int>& parts) {
    Node n = make(Op::ConcatCols, parts);
    std::size_t dtot = 0;
    for (int p : parts) dtot += val(p).cols();
    n.value = Tensor<T>::matrix(val(parts[0]).rows(), dtot);
    std::vector<const Tensor<T>*> ptrs;
    for (int p : parts) ptrs.push_back(&val(p));
    kern::concat_cols_fwd(std::span<const Tensor<T>* const>(ptrs), n.value);
    return push(std::move(n));
  }

  // Mean cross-entropy over logit rows [first, first+count); targets[j] is
  // the token id predicted from row first+j. Keeps the softmax rows and the
  // per-position losses for the backward pass and for loss reports.
  int ce_mean(int logits, std::size_t first, std::vector<int> targets) {
    Node n = make(Op::CeMean, {logits});
    const Tensor<T>& lg = val(logits);
    const std::size_t count = targets.size();
    n.i0 = first;
    n.i1 = count;
    n.targets = std::move(targets);
    n.saved = Tensor<T>::matrix(count, lg.cols());
    n.per_token.resize(count);
    double total = 0;
    for (std::size_t j = 0; j < count; ++j) {
      std::span<const T> row = lg.row(first + j);
      std::span<T> prow = n.saved.row(j);
      T mx = row[0];
      for (T v : row) mx = std::max(mx, v);
      double z = 0;
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double e = std::exp(double(row[c] - mx));
        prow[c] = T(e);
        z += e;
      }
      const double invz = 1.0 / z;
      for (std::size_t c = 0; c < row.size(); ++c) prow[c] = T(prow[c] * invz);
      const double li = -std::log(double(prow[n.targets[j]]));
      n.per_token[j] = T(li);
      total += li;
    }
    n.value = Tensor<T>::scalar(T(total / double(count)));
    return push(std::move(n));
  }

  // Hookable labels are declared by the graph builder; the engine never
  // infers architecture. Each label may appear at most once per pass.
  void label(const std::string& name, int id) {
    auto [it, inserted] = labels_.emplace(name, id);
    if (!inserted) throw ConfigError("duplicate tape label: " + name);
  }

  int lookup(const std::string& name) const {
    auto it = labels_.find(name);
    if (it == labels_.end()) throw ConfigError("unknown tape label: " + name);
    return it->second;
  }

  bool has_label(const std::string& name) const {
    return labels_.find(name) != labels_.end();
  }

  // Marks a stream boundary node so backward can bucket skip vs branch
  // adjoint contributions for the decomposition diagnostics.
  void mark_boundary(int id, int boundary_index) {
    nodes_[id].boundary = boundary_index;
  }

  BackwardResult<T> backward(int seed_node, const Tensor<T>* seed_value,
                             const HookSet<T>& hooks,
                             const BackwardRequest& req) const {
    // Validate hooks up front: unknown labels are configuration errors.
    struct Pending {
      const RowRule<T>* rule;
    };
    std::vector<std::vector<const RowRule<T>*>> rules_by_node(nodes_.size());
    for (const RowRule<T>& r : hooks.row_replacements) {
      const int id = lookup(r.label);  // throws ConfigError when unknown
      if (r.row >= nodes_[id].value.rows())
        throw ConfigError("hook row out of range at label " + r.label);
      rules_by_node[id].push_back(&r);
    }
    std::map<int, std::string> want_by_node;
    for (const std::string& w : req.want) want_by_node[lookup(w)] = w;

    const T gamma = hooks.residual_branch_scale.value_or(T(1));

    // Adjoints only need to flow toward requested labels (and boundary
    // captures); a node is needed when a requested node sits below it.
    // This skips e.g. weight-gradient matmuls when only the input gradient
    // was asked for.
    std::vector<char> needed(nodes_.size(), 0);
    for (const auto& [id, name] : want_by_node) needed[id] = 1;
    if (req.capture_boundary_terms) {
      for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].boundary >= 0) needed[i] = 1;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (needed[i]) continue;
      for (int in : nodes_[i].in) {
        if (needed[in]) {
          needed[i] = 1;
          break;
        }
      }
    }

    std::vector<Tensor<T>> adj(nodes_.size());
    std::vector<char> has_adj(nodes_.size(), 0);

    BackwardResult<T> result;

    auto ensure = [&](int id) -> Tensor<T>& {
      if (!has_adj[id]) {
        adj[id] = Tensor<T>(nodes_[id].value.shape, T(0));
        has_adj[id] = 1;
      }
      return adj[id];
    };

    // Accumulates `contrib` into the adjoint of `dst`, bucketing boundary
    // contributions by whether they arrive through a residual-add skip edge.
    auto accumulate = [&](int dst, const Tensor<T>& contrib, int from) {
      if (!needed[dst]) return;
      Tensor<T>& a = ensure(dst);
      for (std::size_t i = 0; i < a.data.size(); ++i)
        a.data[i] += contrib.data[i];
      if (req.capture_boundary_terms && nodes_[dst].boundary >= 0) {
        BoundaryTerms<T>& bt = result.boundary[nodes_[dst].boundary];
        const bool via_skip = nodes_[from].op == Op::ResidualAdd;
        Tensor<T>& bucket = via_skip ? bt.skip : bt.branch;
        bool& has = via_skip ? bt.has_skip : bt.has_branch;
        if (!has) {
          bucket = Tensor<T>(contrib.shape, T(0));
          has = true;
        }
        for (std::size_t i = 0; i < bucket.data.size(); ++i)
          bucket.data[i] += contrib.data[i];
      }
    };

    // Seed.
    if (seed_value != nullptr) {
      if (seed_value->shape != nodes_[seed_node].value.shape)
        throw ConfigError("backward seed shape mismatch");
      adj[seed_node] = *seed_value;
      has_adj[seed_node] = 1;
    } else {
      if (nodes_[seed_node].value.numel() != 1)
        throw ConfigError("backward without seed requires a scalar node");
      adj[seed_node] = Tensor<T>::scalar(T(1));
      has_adj[seed_node] = 1;
    }

    for (int id = seed_node; id >= 0; --id) {
      if (!has_adj[id]) continue;
      const Node& n = nodes_[id];
      Tensor<T>& g = adj[id];

      if (!g.all_finite())
        throw NumericError(std::string("non-finite adjoint at node ") +
                           std::to_string(id) + " (" + op_name(n.op) + ")");

      // Requested labels observe the incoming adjoint, before replacement.
      if (auto it = want_by_node.find(id); it != want_by_node.end())
        result.grads[it->second] = g;

      // Row replacements substitute the incoming adjoint before propagation
      // continues below this node.
      for (const RowRule<T>* rule : rules_by_node[id]) {
        RowReplaceOut<T> out = rule->fn(std::span<const T>(g.row(rule->row)));
        if (out.skipped) {
          result.replacement_skipped = true;
          continue;
        }
        if (out.value.size() != g.cols())
          throw ConfigError("replacement width mismatch at " + rule->label);
        std::copy(out.value.begin(), out.value.end(),
                  g.data.begin() + rule->row * g.cols());
      }

      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::MatmulNN: {
          const Tensor<T>& a = val(n.in[0]);
          const Tensor<T>& b = val(n.in[1]);
          if (needed[n.in[0]]) {
            Tensor<T> da = Tensor<T>(a.shape);
            kern::mm_nt(g, b, da);
            accumulate(n.in[0], da, id);
          }
          if (needed[n.in[1]]) {
            Tensor<T> db = Tensor<T>(b.shape);
            kern::mm_tn(a, g, db);
            accumulate(n.in[1], db, id);
          }
          break;
        }
        case Op::MatmulNT: {
          const Tensor<T>& a = val(n.in[0]);
          const Tensor<T>& b = val(n.in[1]);
          if (needed[n.in[0]]) {
            Tensor<T> da = Tensor<T>(a.shape);
            kern::mm_nn(g, b, da);
            accumulate(n.in[0], da, id);
          }
          if (needed[n.in[1]]) {
            Tensor<T> db = Tensor<T>(b.shape);
            kern::mm_tn(g, a, db);
            accumulate(n.in[1], db, id);
          }
          break;
        }
        case Op::Add:
          accumulate(n.in[0], g, id);
          accumulate(n.in[1], g, id);
          break;
        case Op::ResidualAdd: {
          accumulate(n.in[0], g, id);  // skip edge, never scaled
          if (gamma == T(1)) {
            accumulate(n.in[1], g, id);
          } else if (needed[n.in[1]]) {
            Tensor<T> gb(g.shape);
            kern::axpy(gamma, g, gb, false);
            accumulate(n.in[1], gb, id);
          }
          break;
        }
        case Op::Scale: {
          Tensor<T> da(g.shape);
          kern::axpy(n.scalar, g, da, false);
          accumulate(n.in[0], da, id);
          break;
        }
        case Op::RmsNorm: {
          const Tensor<T>& x = val(n.in[0]);
          const Tensor<T>& gain = val(n.in[1]);
          Tensor<T> dx(x.shape);
          Tensor<T> dgain(gain.shape);
          kern::rmsnorm_bwd(x, gain, g, dx, dgain);
          accumulate(n.in[0], dx, id);
          accumulate(n.in[1], dgain, id);
          break;
        }
        case Op::CausalSoftmax: {
          Tensor<T> dx(n.value.shape);
          kern::causal_softmax_bwd(n.value, g, dx);
          accumulate(n.in[0], dx, id);
          break;
        }
        case Op::SiluMul: {
          const Tensor<T>& a = val(n.in[0]);
          const Tensor<T>& b = val(n.in[1]);
          Tensor<T> da(a.shape);
          Tensor<T> db(b.shape);
          kern::silu_mul_bwd(a, b, g, da, db);
          accumulate(n.in[0], da, id);
          accumulate(n.in[1], db, id);
          break;
        }
        case Op::TakeRows: {
          const Tensor<T>& x = val(n.in[0]);
          Tensor<T> dx(x.shape);
          kern::take_rows_bwd(g, x.rows(), dx);
          accumulate(n.in[0], dx, id);
          break;
        }
        case Op::TakeCols: {
          const Tensor<T>& x = val(n.in[0]);
          Tensor<T> dx(x.shape);
          kern::take_cols_bwd(g, n.i0, x.cols(), dx);
          accumulate(n.in[0], dx, id);
          break;
        }
        case Op::ConcatCols: {
          std::size_t off = 0;
          for (int p : n.in) {
            const Tensor<T>& x = val(p);
            Tensor<T> dx(x.shape);
            kern::take_cols_fwd(g, off, x.cols(), dx);
            accumulate(p, dx, id);
            off += x.cols();
          }
          break;
        }
        case Op::CeMean: {
          const Tensor<T>& lg = val(n.in[0]);
          Tensor<T> dl(lg.shape, T(0));
          const T gs = g.data[0];
          const T invc = T(1) / T(n.i1);
          for (std::size_t j = 0; j < n.i1; ++j) {
            std::span<const T> prow = n.saved.row(j);
            T* drow = dl.data.data() + (n.i0 + j) * lg.cols();
            for (std::size_t c = 0; c < lg.cols(); ++c)
              drow[c] = gs * invc * prow[c];
            drow[n.targets[j]] -= gs * invc;
          }
          accumulate(n.in[0], dl, id);
          break;
        }
      }
    }

    // Labels never reached (zero adjoint) still get a well-defined gradient.
    for (const auto& [id, name] : want_by_node) {
      if (result.grads.find(name) == result.grads.end())
        result.grads[name] = Tensor<T>(nodes_[id].value.shape, T(0));
    }
    return result;
  }

 private:
  const Tensor<T>& val(int id) const { return nodes_[id].value; }

  Node make(Op op, std::vector<int> in) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    return n;
  }

  int push(Node n) {
    if (!n.value.all_finite())
      throw NumericError(std::string("non-finite value at node ") +
                         std::to_string(nodes_.size()) + " (" +
                         op_name(n.op) + ")");
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  std::deque<Node> nodes_;
  std::map<std::string, int> labels_;
};

// Central-difference gradient oracle. Lives beside the engine but is only
// meant for tests and the gradcheck command; keep it independent of the
// backward pass it is used to check.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T eps) {
  Tensor<T> g(x.shape, T(0));
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const T orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double fp = f(probe);
    probe.data[i] = orig - eps;
    const double fm = f(probe);
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value");
    g.data[i] = T((fp - fm) / (2.0 * double(eps)));
  }
  return g;
}

}  // namespace advlab
