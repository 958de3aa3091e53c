#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "czsl/errors.hpp"
#include "czsl/rng.hpp"
#include "czsl/tensor.hpp"

namespace czsl {

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatmul,
  kRelu,
  kLayerNorm,
  kConcat,
  kCosine,
  kSoftmax,
  kSoftmaxXent,
  kKlDiv,
  kMean,
  kSum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatmul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kConcat: return "concat";
    case Op::kCosine: return "cosine";
    case Op::kSoftmax: return "softmax";
    case Op::kSoftmaxXent: return "softmax_cross_entropy";
    case Op::kKlDiv: return "kl_divergence";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
  }
  return "?";
}

namespace kernels {

// Stable softmax computed in double; shared by the graph ops and by the
// plain evaluation paths so both produce bit-identical values.
inline std::vector<double> softmax64(const Tensor& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (real v : logits.data) mx = std::max(mx, double(v));
  std::vector<double> p(logits.data.size());
  double denom = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(double(logits.data[i]) - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

inline double cosine64(const Tensor& u, const Tensor& v) {
  double nu = norm64(u), nv = norm64(v);
  if (nu == 0.0 || nv == 0.0)
    throw DegenerateInputError("cosine: zero-norm input vector");
  return dot64(u, v) / (nu * nv);
}

}  // namespace kernels

// Reverse-mode tape over eagerly evaluated tensor ops. Nodes are append
// only so inputs always have smaller ids; backward() walks ids in reverse.
class Graph {
 public:
  int leaf(Tensor v) {
    check_finite(v, "leaf");
    return push(Op::kLeaf, {}, std::move(v));
  }

  int add(int a, int b) { return ew(Op::kAdd, a, b); }
  int sub(int a, int b) { return ew(Op::kSub, a, b); }
  int mul(int a, int b) { return ew(Op::kMul, a, b); }

  int scale(int a, real c) {
    Tensor out = val(a);
    for (real& v : out.data) v *= c;
    int id = push(Op::kScale, {a}, std::move(out));
    nodes_[size_t(id)].aux = c;
    carry64(id, a, -1, [c](double x, double) { return double(c) * x; });
    if (!nodes_[size_t(a)].d64.empty()) {
      std::vector<double> d = nodes_[size_t(a)].d64;
      for (double& v : d) v *= double(c);
      nodes_[size_t(id)].d64 = std::move(d);
    }
    return id;
  }

  // (m,k) x (k,n) -> (m,n), or (m,k) x (k,) -> (m,).
  int matmul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() < 1 || B.rank() > 2 || A.shape[1] != B.shape[0])
      throw ShapeError(std::string("matmul: incompatible shapes ") + shape_str(A.shape) + " x " +
                       shape_str(B.shape));
    int m = A.shape[0], k = A.shape[1];
    if (B.rank() == 1) {
      Tensor out = Tensor::zeros({m});
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += double(A.at(i, j)) * double(B.at(j));
        out.at(i) = static_cast<real>(acc);
      }
      return push(Op::kMatmul, {a, b}, std::move(out));
    }
    int n = B.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < k; ++t) acc += double(A.at(i, t)) * double(B.at(t, j));
        out.at(i, j) = static_cast<real>(acc);
      }
    return push(Op::kMatmul, {a, b}, std::move(out));
  }

  int relu(int a) {
    Tensor out = val(a);
    for (real& v : out.data) v = v > real(0) ? v : real(0);
    return push(Op::kRelu, {a}, std::move(out));
  }

  // y = gamma * (x - mean) / sqrt(var + eps) + beta over a rank-1 input.
  int layer_norm(int x, int gamma, int beta, real eps = real(1e-5)) {
    const Tensor& X = val(x);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    if (X.rank() != 1 || X.size() < 1)
      throw ContractError("layer_norm: input must be rank-1 with D >= 1");
    if (!X.same_shape(G) || !X.same_shape(B))
      throw ShapeError(std::string("layer_norm: incompatible shapes ") + shape_str(X.shape) + ", " +
                       shape_str(G.shape) + ", " + shape_str(B.shape));
    int d = X.shape[0];
    double mean = 0.0;
    for (real v : X.data) mean += double(v);
    mean /= d;
    double var = 0.0;
    for (real v : X.data) var += (double(v) - mean) * (double(v) - mean);
    var /= d;
    double inv_std = 1.0 / std::sqrt(var + double(eps));
    Tensor xhat = Tensor::zeros({d});
    Tensor out = Tensor::zeros({d});
    for (int i = 0; i < d; ++i) {
      double h = (double(X.at(i)) - mean) * inv_std;
      xhat.at(i) = static_cast<real>(h);
      out.at(i) = static_cast<real>(double(G.at(i)) * h + double(B.at(i)));
    }
    int id = push(Op::kLayerNorm, {x, gamma, beta}, std::move(out));
    nodes_[size_t(id)].saved = std::move(xhat);
    nodes_[size_t(id)].aux_d = inv_std;
    return id;
  }

  // Flattening concatenation; scalars count as length-1 segments.
  int concat(std::span<const int> ids) {
    if (ids.empty()) throw ContractError("concat: no inputs");
    int64_t total = 0;
    bool any64 = false;
    for (int id : ids) {
      total += val(id).size();
      const Node& n = nodes_[size_t(check_id(id))];
      any64 = any64 || n.has64 || !n.d64.empty();
    }
    Tensor out = Tensor::zeros({static_cast<int>(total)});
    int64_t off = 0;
    for (int id : ids) {
      const Tensor& t = val(id);
      std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
      off += t.size();
    }
    int id = push(Op::kConcat, ids, std::move(out));
    if (any64) {
      std::vector<double>& d = nodes_[size_t(id)].d64;
      for (int in : ids) {
        std::vector<double> e = elems64(in);
        d.insert(d.end(), e.begin(), e.end());
      }
    }
    return id;
  }
  int concat(std::initializer_list<int> ids) {
    return concat(std::span<const int>(ids.begin(), ids.size()));
  }

  int cosine(int a, int b) {
    const Tensor& U = val(a);
    const Tensor& V = val(b);
    if (U.rank() != 1 || !U.same_shape(V))
      throw ShapeError(std::string("cosine: incompatible shapes ") + shape_str(U.shape) + ", " +
                       shape_str(V.shape));
    double c = kernels::cosine64(U, V);
    int id = push64(Op::kCosine, {a, b}, c);
    return id;
  }

  int softmax(int a) {
    const Tensor& X = val(a);
    if (X.rank() != 1) throw ShapeError("softmax: input must be rank-1");
    std::vector<double> x64 = elems64(a);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x64) mx = std::max(mx, v);
    std::vector<double> p(x64.size());
    double denom = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      p[i] = std::exp(x64[i] - mx);
      denom += p[i];
    }
    Tensor out = Tensor::zeros(X.shape);
    for (size_t i = 0; i < p.size(); ++i) {
      p[i] /= denom;
      out.data[i] = static_cast<real>(p[i]);
    }
    int id = push(Op::kSoftmax, {a}, std::move(out));
    nodes_[size_t(id)].d64 = std::move(p);
    return id;
  }

  // loss = -log softmax(logits)[target], max-subtracted for stability.
  int softmax_xent(int logits, int target) {
    const Tensor& X = val(logits);
    if (X.rank() != 1) throw ShapeError("softmax_cross_entropy: logits must be rank-1");
    if (target < 0 || target >= X.shape[0])
      throw ContractError("softmax_cross_entropy: target " + std::to_string(target) +
                          " out of range [0," + std::to_string(X.shape[0]) + ")");
    std::vector<double> x64 = elems64(logits);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x64) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : x64) denom += std::exp(v - mx);
    double loss = -(x64[size_t(target)] - mx - std::log(denom));
    Tensor probs = Tensor::zeros(X.shape);
    for (int i = 0; i < X.shape[0]; ++i)
      probs.at(i) = static_cast<real>(std::exp(x64[size_t(i)] - mx) / denom);
    int id = push64(Op::kSoftmaxXent, {logits}, loss);
    nodes_[size_t(id)].saved = std::move(probs);
    nodes_[size_t(id)].aux_i = target;
    return id;
  }

  // KL(p || q) with 0*log0 = 0 and q clamped below at 1e-12. Gradient
  // flows to q only; p is treated as a constant target.
  int kl_div(int p, int q) {
    const Tensor& P = val(p);
    const Tensor& Q = val(q);
    if (P.rank() != 1 || !P.same_shape(Q))
      throw ShapeError(std::string("kl_divergence: incompatible shapes ") + shape_str(P.shape) +
                       ", " + shape_str(Q.shape));
    validate_prob(P, "p");
    validate_prob(Q, "q");
    std::vector<double> p64 = elems64(p);
    std::vector<double> q64 = elems64(q);
    double loss = 0.0;
    for (size_t i = 0; i < p64.size(); ++i) {
      double pi = p64[i];
      if (pi <= 0.0) continue;
      double qi = std::max(q64[i], 1e-12);
      loss += pi * (std::log(pi) - std::log(qi));
    }
    int id = push64(Op::kKlDiv, {p, q}, loss);
    return id;
  }

  int mean(int a) {
    const Tensor& X = val(a);
    if (X.size() == 0) throw ContractError("mean: empty input");
    double acc = 0.0;
    for (real v : X.data) acc += double(v);
    return push64(Op::kMean, {a}, acc / double(X.size()));
  }

  int sum(int a) {
    const Tensor& X = val(a);
    double acc = 0.0;
    for (real v : X.data) acc += double(v);
    return push64(Op::kSum, {a}, acc);
  }

  // Inverted dropout: mask entries are 0 or 1/keep. Identity in eval mode
  // is expressed by simply not recording the op.
  int dropout(int x, const Tensor& mask) {
    int m = leaf(mask);
    return mul(x, m);
  }

  const Tensor& value(int id) const { return nodes_[size_t(check_id(id))].value; }

  // Double-precision value for reduction outputs (cosine, losses, mean,
  // sum); falls back to the stored real value for other nodes.
  double value64(int id) const {
    const Node& n = nodes_[size_t(check_id(id))];
    if (n.has64) return n.val64;
    if (n.value.size() != 1) throw ContractError("value64: node is not scalar");
    return double(n.value.data[0]);
  }

  // Per-element double view; full precision where the op chain carried it.
  std::vector<double> values64(int id) const { return elems64(check_id(id)); }

  size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

  // Fills gradient slots for every node reachable from root (a scalar).
  void backward(int root) {
    const Node& r = nodes_[size_t(check_id(root))];
    if (r.value.rank() != 0)
      throw ContractError(std::string("backward: root must be scalar, got shape ") +
                          shape_str(r.value.shape));
    grads_.assign(nodes_.size(), Tensor{});
    grads_[size_t(root)] = Tensor::scalar(real(1));
    for (int i = root; i >= 0; --i) {
      if (grads_[size_t(i)].data.empty()) continue;
      dispatch_backward(i);
    }
  }

  bool has_grad(int id) const { return !grads_[size_t(check_id(id))].data.empty(); }

  // Gradient of the last backward root w.r.t. this node; zeros when the
  // node was unreachable.
  Tensor grad(int id) const {
    const Node& n = nodes_[size_t(check_id(id))];
    if (grads_.size() == nodes_.size() && !grads_[size_t(id)].data.empty())
      return grads_[size_t(id)];
    return Tensor::zeros(n.value.shape);
  }

 private:
  struct Node {
    Op kind = Op::kLeaf;
    std::vector<int> inputs;
    Tensor value;
    Tensor saved;       // op-specific (softmax probs, layer-norm xhat)
    std::vector<double> d64;  // per-element doubles for rank-1 reduction chains
    double val64 = 0.0; // exact reduction value
    double aux_d = 0.0; // layer-norm inv_std
    real aux = 0;       // scale factor
    int aux_i = -1;     // cross-entropy target
    bool has64 = false;
  };

  // Best-available double view of a node's elements. Values that came out
  // of reductions keep full precision; everything else upcasts its floats.
  std::vector<double> elems64(int id) const {
    const Node& n = nodes_[size_t(id)];
    if (!n.d64.empty()) return n.d64;
    if (n.has64) return {n.val64};
    std::vector<double> out(n.value.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = double(n.value.data[i]);
    return out;
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;

  int check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw ContractError("graph: unknown node id " + std::to_string(id));
    return id;
  }

  const Tensor& val(int id) const { return nodes_[size_t(check_id(id))].value; }

  int push(Op kind, std::span<const int> ins, Tensor out) {
    check_finite(out, op_name(kind));
    Node n;
    n.kind = kind;
    n.inputs.assign(ins.begin(), ins.end());
    n.value = std::move(out);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  int push(Op kind, std::initializer_list<int> ins, Tensor out) {
    return push(kind, std::span<const int>(ins.begin(), ins.size()), std::move(out));
  }

  int push64(Op kind, std::initializer_list<int> ins, double v) {
    if (!std::isfinite(v)) throw NumericError(std::string(op_name(kind)) + ": non-finite value");
    int id = push(kind, ins, Tensor::scalar(static_cast<real>(v)));
    nodes_[size_t(id)].val64 = v;
    nodes_[size_t(id)].has64 = true;
    return id;
  }

  int ew(Op kind, int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B))
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(A.shape) +
                       " vs " + shape_str(B.shape));
    Tensor out = A;
    switch (kind) {
      case Op::kAdd:
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
        break;
      case Op::kSub:
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
        break;
      case Op::kMul:
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
        break;
      default:
        throw ContractError("ew: bad op");
    }
    int id = push(kind, {a, b}, std::move(out));
    if (kind == Op::kAdd) carry64(id, a, b, [](double x, double y) { return x + y; });
    if (kind == Op::kSub) carry64(id, a, b, [](double x, double y) { return x - y; });
    return id;
  }

  // Scalar nodes keep an exact double alongside the real value; arithmetic
  // on scalars carries it forward so loss reporting stays full precision.
  template <typename Fn>
  void carry64(int id, int a, int b, Fn&& fn) {
    Node& n = nodes_[size_t(id)];
    if (n.value.size() != 1) return;
    const Node& na = nodes_[size_t(a)];
    double va = na.has64 ? na.val64 : double(na.value.data[0]);
    double vb = 0.0;
    if (b >= 0) {
      const Node& nb = nodes_[size_t(b)];
      vb = nb.has64 ? nb.val64 : double(nb.value.data[0]);
    }
    n.val64 = fn(va, vb);
    n.has64 = true;
  }

  static void validate_prob(const Tensor& t, const char* which) {
    double s = 0.0;
    for (real v : t.data) {
      if (v < real(0))
        throw ContractError(std::string("kl_divergence: ") + which + " has negative entry");
      s += double(v);
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ContractError(std::string("kl_divergence: ") + which + " sums to " +
                          std::to_string(s) + ", not 1");
  }

  void accum(int id, const Tensor& g) {
    Tensor& slot = grads_[size_t(id)];
    if (slot.data.empty()) {
      slot = g;
      return;
    }
    for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
  }

  void dispatch_backward(int id) {
    const Node& n = nodes_[size_t(id)];
    const Tensor& g = grads_[size_t(id)];
    switch (n.kind) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        accum(n.inputs[0], g);
        accum(n.inputs[1], g);
        break;
      }
      case Op::kSub: {
        accum(n.inputs[0], g);
        Tensor neg = g;
        for (real& v : neg.data) v = -v;
        accum(n.inputs[1], neg);
        break;
      }
      case Op::kMul: {
        const Tensor& A = val(n.inputs[0]);
        const Tensor& B = val(n.inputs[1]);
        Tensor ga = g, gb = g;
        for (size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] *= B.data[i];
          gb.data[i] *= A.data[i];
        }
        accum(n.inputs[0], ga);
        accum(n.inputs[1], gb);
        break;
      }
      case Op::kScale: {
        Tensor ga = g;
        for (real& v : ga.data) v *= n.aux;
        accum(n.inputs[0], ga);
        break;
      }
      case Op::kMatmul: {
        const Tensor& A = val(n.inputs[0]);
        const Tensor& B = val(n.inputs[1]);
        int m = A.shape[0], k = A.shape[1];
        if (B.rank() == 1) {
          Tensor ga = Tensor::zeros(A.shape);
          Tensor gb = Tensor::zeros(B.shape);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) {
              ga.at(i, j) = g.at(i) * B.at(j);
              gb.at(j) += g.at(i) * A.at(i, j);
            }
          accum(n.inputs[0], ga);
          accum(n.inputs[1], gb);
        } else {
          int nn = B.shape[1];
          Tensor ga = Tensor::zeros(A.shape);
          Tensor gb = Tensor::zeros(B.shape);
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              double acc = 0.0;
              for (int j = 0; j < nn; ++j) acc += double(g.at(i, j)) * double(B.at(t, j));
              ga.at(i, t) = static_cast<real>(acc);
            }
          for (int t = 0; t < k; ++t)
            for (int j = 0; j < nn; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i) acc += double(A.at(i, t)) * double(g.at(i, j));
              gb.at(t, j) = static_cast<real>(acc);
            }
          accum(n.inputs[0], ga);
          accum(n.inputs[1], gb);
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& X = val(n.inputs[0]);
        Tensor ga = g;
        for (size_t i = 0; i < ga.data.size(); ++i)
          if (X.data[i] <= real(0)) ga.data[i] = real(0);
        accum(n.inputs[0], ga);
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& G = val(n.inputs[1]);
        const Tensor& xhat = n.saved;
        int d = xhat.shape[0];
        double inv_std = n.aux_d;
        // dL/dxhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
        double m1 = 0.0, m2 = 0.0;
        std::vector<double> dxhat(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
          dxhat[size_t(i)] = double(g.at(i)) * double(G.at(i));
          m1 += dxhat[size_t(i)];
          m2 += dxhat[size_t(i)] * double(xhat.at(i));
        }
        m1 /= d;
        m2 /= d;
        Tensor gx = Tensor::zeros({d});
        Tensor gg = Tensor::zeros({d});
        Tensor gb = Tensor::zeros({d});
        for (int i = 0; i < d; ++i) {
          gx.at(i) = static_cast<real>((dxhat[size_t(i)] - m1 - double(xhat.at(i)) * m2) * inv_std);
          gg.at(i) = static_cast<real>(double(g.at(i)) * double(xhat.at(i)));
          gb.at(i) = g.at(i);
        }
        accum(n.inputs[0], gx);
        accum(n.inputs[1], gg);
        accum(n.inputs[2], gb);
        break;
      }
      case Op::kConcat: {
        int64_t off = 0;
        for (int in : n.inputs) {
          const Tensor& t = val(in);
          Tensor gi = Tensor::zeros(t.shape);
          std::copy(g.data.begin() + off, g.data.begin() + off + t.size(), gi.data.begin());
          accum(in, gi);
          off += t.size();
        }
        break;
      }
      case Op::kCosine: {
        const Tensor& U = val(n.inputs[0]);
        const Tensor& V = val(n.inputs[1]);
        double nu = norm64(U), nv = norm64(V);
        double c = n.val64;
        double gs = double(g.data[0]);
        Tensor gu = Tensor::zeros(U.shape);
        Tensor gv = Tensor::zeros(V.shape);
        for (int i = 0; i < U.shape[0]; ++i) {
          gu.at(i) = static_cast<real>(gs * (double(V.at(i)) / (nu * nv) - c * double(U.at(i)) / (nu * nu)));
          gv.at(i) = static_cast<real>(gs * (double(U.at(i)) / (nu * nv) - c * double(V.at(i)) / (nv * nv)));
        }
        accum(n.inputs[0], gu);
        accum(n.inputs[1], gv);
        break;
      }
      case Op::kSoftmax: {
        const Tensor& Y = n.value;
        double dot = 0.0;
        for (size_t i = 0; i < Y.data.size(); ++i) dot += double(g.data[i]) * double(Y.data[i]);
        Tensor gx = Tensor::zeros(Y.shape);
        for (size_t i = 0; i < Y.data.size(); ++i)
          gx.data[i] = static_cast<real>(double(Y.data[i]) * (double(g.data[i]) - dot));
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kSoftmaxXent: {
        const Tensor& probs = n.saved;
        double gs = double(g.data[0]);
        Tensor gx = probs;
        gx.at(n.aux_i) -= real(1);
        for (real& v : gx.data) v = static_cast<real>(double(v) * gs);
        accum(n.inputs[0], gx);
        break;
      }
      case Op::kKlDiv: {
        const Tensor& P = val(n.inputs[0]);
        const Tensor& Q = val(n.inputs[1]);
        double gs = double(g.data[0]);
        Tensor gq = Tensor::zeros(Q.shape);
        for (int i = 0; i < Q.shape[0]; ++i) {
          double pi = double(P.at(i));
          double qi = double(Q.at(i));
          if (pi > 0.0 && qi >= 1e-12) gq.at(i) = static_cast<real>(-gs * pi / qi);
        }
        accum(n.inputs[1], gq);
        break;
      }
      case Op::kMean: {
        const Tensor& X = val(n.inputs[0]);
        real s = static_cast<real>(double(g.data[0]) / double(X.size()));
        accum(n.inputs[0], Tensor::full(X.shape, s));
        break;
      }
      case Op::kSum: {
        const Tensor& X = val(n.inputs[0]);
        accum(n.inputs[0], Tensor::full(X.shape, g.data[0]));
        break;
      }
    }
  }
};

// Inverted-scaling dropout mask: entries are 0 with probability `rate`,
// else 1/(1-rate). An all-pass mask is returned for rate <= 0.
inline Tensor make_dropout_mask(int d, double rate, Rng& rng) {
  if (rate <= 0.0) return Tensor::full({d}, real(1));
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  Tensor m = Tensor::zeros({d});
  real keep_inv = static_cast<real>(1.0 / (1.0 - rate));
  for (int i = 0; i < d; ++i) m.at(i) = rng.uniform() < rate ? real(0) : keep_inv;
  return m;
}

}  // namespace czsl
