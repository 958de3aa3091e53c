#pragma once

#include <functional>
#include <string>
#include <vector>

#include "czsl/adversarial.hpp"
#include "czsl/autodiff.hpp"
#include "czsl/model.hpp"
#include "czsl/rng.hpp"

namespace czsl {

// Finite-difference verification of backward(). The oracle side touches
// only forward evaluations, so it stays independent of the gradient code
// it checks.

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-3;
  bool all_pass() const {
    for (const auto& e : entries)
      if (!e.pass) return false;
    return !entries.empty();
  }
};

namespace gradcheck_detail {

inline Tensor central_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           double h) {
  Tensor g = Tensor::zeros(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) {
    Tensor xp = x, xm = x;
    xp.data[i] = static_cast<real>(double(x.data[i]) + h);
    xm.data[i] = static_cast<real>(double(x.data[i]) - h);
    g.data[i] = static_cast<real>((f(xp) - f(xm)) / (2.0 * h));
  }
  return g;
}

// normalized max-norm error
inline double rel_error(const Tensor& a, const Tensor& b) {
  double max_diff = 0.0, max_mag = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(double(a.data[i]) - double(b.data[i])));
    max_mag = std::max({max_mag, std::abs(double(a.data[i])), std::abs(double(b.data[i]))});
  }
  return max_mag < 1e-12 ? max_diff : max_diff / max_mag;
}

inline Tensor randn(int d, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros({d});
  for (real& v : t.data) v = static_cast<real>(scale * rng.gaussian());
  return t;
}

}  // namespace gradcheck_detail

// Checks every differentiable op against central finite differences on
// random inputs.
inline void gradcheck_ops(GradCheckReport& rep, uint64_t seed, double h) {
  using gradcheck_detail::central_diff;
  using gradcheck_detail::randn;
  using gradcheck_detail::rel_error;
  Rng rng(seed);

  auto check = [&](const std::string& name, const Tensor& x,
                   const std::function<double(const Tensor&)>& fwd, const Tensor& analytic) {
    GradCheckEntry e;
    e.name = name;
    e.rel_error = rel_error(analytic, central_diff(fwd, x, h));
    e.pass = e.rel_error <= rep.tolerance;
    rep.entries.push_back(e);
  };

  {  // add / sub / mul / scale through a sum reduction
    Tensor x = randn(6, rng), y = randn(6, rng);
    Graph g;
    int xn = g.leaf(x);
    int root = g.sum(g.scale(g.mul(g.add(xn, g.leaf(y)), g.sub(xn, g.leaf(y))), 0.5f));
    g.backward(root);
    check("add_sub_mul_scale", x,
          [&](const Tensor& t) {
            Graph k;
            int tn = k.leaf(t);
            return k.value64(k.sum(k.scale(k.mul(k.add(tn, k.leaf(y)), k.sub(tn, k.leaf(y))), 0.5f)));
          },
          g.grad(xn));
  }
  {  // matmul (matrix x vector)
    Tensor w = Tensor::zeros({4, 6});
    for (real& v : w.data) v = static_cast<real>(rng.gaussian() * 0.5);
    Tensor x = randn(6, rng);
    Graph g;
    int wn = g.leaf(w), xn = g.leaf(x);
    g.backward(g.sum(g.relu(g.matmul(wn, xn))));
    auto fwd_w = [&](const Tensor& t) {
      Graph k;
      return k.value64(k.sum(k.relu(k.matmul(k.leaf(t), k.leaf(x)))));
    };
    auto fwd_x = [&](const Tensor& t) {
      Graph k;
      return k.value64(k.sum(k.relu(k.matmul(k.leaf(w), k.leaf(t)))));
    };
    check("matmul_weight", w, fwd_w, g.grad(wn));
    check("matmul_input_relu", x, fwd_x, g.grad(xn));
  }
  {  // layer_norm
    Tensor x = randn(7, rng), gm = randn(7, rng), bt = randn(7, rng);
    Graph g;
    int xn = g.leaf(x), gn = g.leaf(gm), bn = g.leaf(bt);
    g.backward(g.sum(g.layer_norm(xn, gn, bn)));
    check("layer_norm_x", x,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.sum(k.layer_norm(k.leaf(t), k.leaf(gm), k.leaf(bt))));
          },
          g.grad(xn));
    check("layer_norm_gamma", gm,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.sum(k.layer_norm(k.leaf(x), k.leaf(t), k.leaf(bt))));
          },
          g.grad(gn));
  }
  {  // dropout in train mode (fixed mask) and eval mode (identity)
    Tensor x = randn(8, rng);
    Rng mask_rng(7);
    Tensor mask = make_dropout_mask(8, 0.25, mask_rng);
    Graph g;
    int xn = g.leaf(x);
    g.backward(g.sum(g.dropout(xn, mask)));
    check("dropout_train_mask", x,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.sum(k.dropout(k.leaf(t), mask)));
          },
          g.grad(xn));
  }
  {  // concat
    Tensor a = randn(3, rng), b = randn(4, rng);
    Graph g;
    int an = g.leaf(a);
    int c = g.concat({an, g.leaf(b)});
    g.backward(g.sum(g.mul(c, c)));
    check("concat", a,
          [&](const Tensor& t) {
            Graph k;
            int cc = k.concat({k.leaf(t), k.leaf(b)});
            return k.value64(k.sum(k.mul(cc, cc)));
          },
          g.grad(an));
  }
  {  // cosine
    Tensor u = randn(5, rng), v = randn(5, rng);
    Graph g;
    int un = g.leaf(u), vn = g.leaf(v);
    g.backward(g.cosine(un, vn));
    check("cosine_u", u,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.cosine(k.leaf(t), k.leaf(v)));
          },
          g.grad(un));
    check("cosine_v", v,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.cosine(k.leaf(u), k.leaf(t)));
          },
          g.grad(vn));
  }
  {  // softmax cross-entropy
    Tensor x = randn(6, rng);
    Graph g;
    int xn = g.leaf(x);
    g.backward(g.softmax_xent(xn, 2));
    check("softmax_cross_entropy", x,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.softmax_xent(k.leaf(t), 2));
          },
          g.grad(xn));
  }
  {  // kl divergence w.r.t. q through softmax
    Tensor p = Tensor::vec({0.2f, 0.5f, 0.3f});
    Tensor x = randn(3, rng);
    Graph g;
    int xn = g.leaf(x);
    g.backward(g.kl_div(g.leaf(p), g.softmax(xn)));
    check("kl_divergence_q", x,
          [&](const Tensor& t) {
            Graph k;
            return k.value64(k.kl_div(k.leaf(p), k.softmax(k.leaf(t))));
          },
          g.grad(xn));
  }
  {  // mean
    Tensor x = randn(9, rng);
    Graph g;
    int xn = g.leaf(x);
    g.backward(g.mean(g.mul(xn, xn)));
    check("mean", x,
          [&](const Tensor& t) {
            Graph k;
            int tn = k.leaf(t);
            return k.value64(k.mean(k.mul(tn, tn)));
          },
          g.grad(xn));
  }
}

// Full pipeline check: decompose -> jitter -> attack -> fuse -> losses.
// The jitter vector, attack offsets and dropout masks are captured once
// and held constant, which is exactly the function the engine
// differentiates (the sign step contributes no gradient). Each loss term
// is checked separately: the consistency term alone spans the whole
// composed chain, and per-term magnitudes keep the finite-difference
// noise well below the tolerance.
inline void gradcheck_composed(GradCheckReport& rep, uint64_t seed, double h) {
  using gradcheck_detail::rel_error;
  Rng rng(seed);

  Vocabulary vocab;
  for (int a = 0; a < 3; ++a) vocab.attributes.push_back("a" + std::to_string(a));
  for (int o = 0; o < 3; ++o) vocab.objects.push_back("o" + std::to_string(o));
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 3; ++o)
      if ((a + o) % 3 != 2)
        vocab.pairs_seen.emplace_back(a, o);
      else
        vocab.pairs_unseen.emplace_back(a, o);
  EmbeddingTable words;
  words.dim = 4;
  for (const auto& tok : vocab.attributes) words.vectors[tok] = gradcheck_detail::randn(4, rng);
  for (const auto& tok : vocab.objects) words.vectors[tok] = gradcheck_detail::randn(4, rng);
  ModelConfig mc;
  mc.feat_dim = 8;
  mc.word_dim = 4;
  mc.embed = 16;
  mc.tau_inv = 20.0;
  mc.init_seed = seed;
  ModelParams params = init_model(mc, vocab, words);

  Tensor f_cls = gradcheck_detail::randn(8, rng);
  int attr = 1, obj = 0, target_pair = -1;
  for (size_t k = 0; k < vocab.pairs_seen.size(); ++k)
    if (vocab.pairs_seen[k] == std::make_pair(attr, obj)) target_pair = static_cast<int>(k);

  Rng mask_rng(seed + 1);
  DropoutMasks masks;
  masks.active = true;
  masks.a = make_dropout_mask(mc.hidden_dim(), 0.1, mask_rng);
  masks.o = make_dropout_mask(mc.hidden_dim(), 0.1, mask_rng);
  masks.f = make_dropout_mask(mc.hidden_dim(), 0.1, mask_rng);

  // capture the perturbation constants once
  Rng jitter_rng(seed + 2);
  Tensor noise_a = gaussian_noise(8, 16.0 / 255.0, jitter_rng);
  Tensor noise_o = gaussian_noise(8, 16.0 / 255.0, jitter_rng);
  Tensor offset_a, offset_o, kl_target;
  {
    ModelParams probe = params;
    Graph g;
    ParamNodes pn = stage_params(g, probe);
    auto [fa, fo] = decompose_nodes(g, pn, g.leaf(f_cls), masks.ptr_a(), masks.ptr_o());
    Tensor fa_p = g.value(g.add(fa, g.leaf(noise_a)));
    Tensor fo_p = g.value(g.add(fo, g.leaf(noise_o)));
    AttackResult atk = attack_primitives(probe, {fa_p}, {fo_p}, {attr}, {obj}, 0.05);
    offset_a = atk.offset_a[0];
    offset_o = atk.offset_o[0];

    // the consistency target is gradient-stopped in the engine, so it is
    // one of the captured constants here
    TextNodes tn = build_text_nodes(g, pn, vocab.pairs_seen);
    int fcp = fuse_node(g, pn, fa, fo, masks.ptr_f());
    int s_cp = score_vector(g, linear_relu_forward(g, pn.vis_cp, fcp), tn.cand_emb_cp, mc.tau_inv);
    std::vector<double> p64 = kernels::softmax64(g.value(s_cp));
    kl_target = Tensor::zeros(g.value(s_cp).shape);
    for (size_t i = 0; i < p64.size(); ++i) kl_target.data[i] = static_cast<real>(p64[i]);
  }

  // pipeline with the captured constants; returns the seven loss terms
  // (L_p, L_a, L_o, L_cp, L_a_adv, L_o_adv, L_cons)
  constexpr int kTerms = 7;
  auto build = [&](Graph& g, ModelParams& p, const Tensor& x, ParamNodes* pn_out, int* x_out) {
    ParamNodes pn = stage_params(g, p);
    TextNodes tn = build_text_nodes(g, pn, vocab.pairs_seen);
    int xn = g.leaf(x);
    auto [fa, fo] = decompose_nodes(g, pn, xn, masks.ptr_a(), masks.ptr_o());
    int fcp = fuse_node(g, pn, fa, fo, masks.ptr_f());
    std::vector<int> losses;
    int s_p = score_vector(g, linear_relu_forward(g, pn.vis_p, xn), tn.cand_emb_p, mc.tau_inv);
    int s_a = score_vector(g, linear_relu_forward(g, pn.vis_a, fa), tn.attr_emb, mc.tau_inv);
    int s_o = score_vector(g, linear_relu_forward(g, pn.vis_o, fo), tn.obj_emb, mc.tau_inv);
    int s_cp = score_vector(g, linear_relu_forward(g, pn.vis_cp, fcp), tn.cand_emb_cp, mc.tau_inv);
    losses.push_back(g.softmax_xent(s_p, target_pair));
    losses.push_back(g.softmax_xent(s_a, attr));
    losses.push_back(g.softmax_xent(s_o, obj));
    losses.push_back(g.softmax_xent(s_cp, target_pair));
    int adv_a = g.add(g.add(fa, g.leaf(noise_a)), g.leaf(offset_a));
    int adv_o = g.add(g.add(fo, g.leaf(noise_o)), g.leaf(offset_o));
    int sa_adv = score_vector(g, linear_relu_forward(g, pn.vis_a, adv_a), tn.attr_emb, mc.tau_inv);
    int so_adv = score_vector(g, linear_relu_forward(g, pn.vis_o, adv_o), tn.obj_emb, mc.tau_inv);
    losses.push_back(g.softmax_xent(sa_adv, attr));
    losses.push_back(g.softmax_xent(so_adv, obj));
    int fcp_adv = fuse_node(g, pn, adv_a, adv_o, masks.ptr_f());
    int scp_adv =
        score_vector(g, linear_relu_forward(g, pn.vis_cp, fcp_adv), tn.cand_emb_cp, mc.tau_inv);
    int ce_adv = g.softmax_xent(scp_adv, target_pair);
    int kl = g.kl_div(g.leaf(kl_target), g.softmax(scp_adv));
    losses.push_back(g.add(ce_adv, kl));
    if (pn_out) *pn_out = pn;
    if (x_out) *x_out = xn;
    return losses;
  };

  // analytic gradients, one backward pass per loss term; tensors with no
  // graph path to a term carry exact zeros by construction, and finite
  // differences of an unrelated loss are pure rounding noise, so those
  // pairs are excluded from the numeric comparison
  std::vector<std::map<std::string, Tensor>> analytic(kTerms);
  std::vector<Tensor> analytic_x(kTerms);
  std::vector<char> x_connected(kTerms, 0);
  {
    Graph g;
    ParamNodes pn;
    int xn = -1;
    std::vector<int> roots = build(g, params, f_cls, &pn, &xn);
    for (int t = 0; t < kTerms; ++t) {
      g.backward(roots[size_t(t)]);
      for (const auto& [name, id] : pn.named)
        if (g.has_grad(id)) analytic[size_t(t)].emplace(name, g.grad(id));
      analytic_x[size_t(t)] = g.grad(xn);
      x_connected[size_t(t)] = g.has_grad(xn) ? 1 : 0;
    }
  }

  // one forward evaluates every term, so the per-term finite differences
  // share the same two evaluations per coordinate
  auto fd_terms = [&](ModelParams& p, const Tensor& x) {
    Graph g;
    std::vector<int> roots = build(g, p, x, nullptr, nullptr);
    std::vector<double> vals(static_cast<size_t>(kTerms));
    for (int t = 0; t < kTerms; ++t) vals[size_t(t)] = g.value64(roots[size_t(t)]);
    return vals;
  };

  params.for_each_param([&](const std::string& name, Tensor& tensor) {
    std::vector<Tensor> fd(size_t(kTerms), Tensor::zeros(tensor.shape));
    for (size_t i = 0; i < tensor.data.size(); ++i) {
      real saved = tensor.data[i];
      tensor.data[i] = static_cast<real>(double(saved) + h);
      std::vector<double> up = fd_terms(params, f_cls);
      tensor.data[i] = static_cast<real>(double(saved) - h);
      std::vector<double> dn = fd_terms(params, f_cls);
      tensor.data[i] = saved;
      for (int t = 0; t < kTerms; ++t)
        fd[size_t(t)].data[i] = static_cast<real>((up[size_t(t)] - dn[size_t(t)]) / (2.0 * h));
    }
    GradCheckEntry e;
    e.name = "composed/" + name;
    for (int t = 0; t < kTerms; ++t) {
      auto it = analytic[size_t(t)].find(name);
      if (it == analytic[size_t(t)].end()) continue;
      e.rel_error = std::max(e.rel_error, rel_error(it->second, fd[size_t(t)]));
    }
    e.pass = e.rel_error <= rep.tolerance;
    rep.entries.push_back(e);
  });
  {
    GradCheckEntry e;
    e.name = "composed/f_cls";
    Tensor x = f_cls;
    std::vector<Tensor> fd(static_cast<size_t>(kTerms), Tensor::zeros(x.shape));
    for (size_t i = 0; i < x.data.size(); ++i) {
      real saved = x.data[i];
      x.data[i] = static_cast<real>(double(saved) + h);
      std::vector<double> up = fd_terms(params, x);
      x.data[i] = static_cast<real>(double(saved) - h);
      std::vector<double> dn = fd_terms(params, x);
      x.data[i] = saved;
      for (int t = 0; t < kTerms; ++t)
        fd[size_t(t)].data[i] = static_cast<real>((up[size_t(t)] - dn[size_t(t)]) / (2.0 * h));
    }
    for (int t = 0; t < kTerms; ++t)
      if (x_connected[size_t(t)])
        e.rel_error = std::max(e.rel_error, rel_error(analytic_x[size_t(t)], fd[size_t(t)]));
    e.pass = e.rel_error <= rep.tolerance;
    rep.entries.push_back(e);
  }
}

inline GradCheckReport run_gradcheck(uint64_t seed = 1, double h = 1e-3, double tol = 1e-3) {
  GradCheckReport rep;
  rep.tolerance = tol;
  gradcheck_ops(rep, seed, h);
  gradcheck_composed(rep, seed + 100, h);
  return rep;
}

}  // namespace czsl
