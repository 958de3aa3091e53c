#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "czsl/autodiff.hpp"
#include "czsl/errors.hpp"
#include "czsl/model.hpp"
#include "czsl/rng.hpp"
#include "czsl/tensor.hpp"

namespace czsl {

// Knobs of the primitive perturbation pipeline: jitter coefficient and the
// candidate step sizes for the one-step sign-gradient attack.
struct PerturbationConfig {
  std::vector<double> epsilon_list{0.0, 0.005, 0.05, 0.5};
  double noise_k = 16.0 / 255.0;
  bool enabled = true;

  void validate() const {
    if (epsilon_list.empty()) throw ContractError("adv.epsilon_list must not be empty");
    for (double e : epsilon_list)
      if (e < 0.0 || !std::isfinite(e)) throw ContractError("adv.epsilon_list entries must be >= 0");
    if (noise_k < 0.0 || !std::isfinite(noise_k)) throw ContractError("adv.noise_k must be >= 0");
  }
};

// f' = f + k * z with z ~ N(0, I). k = 0 reproduces f exactly.
inline Tensor gaussian_jitter(const Tensor& f, double k, Rng& rng) {
  if (k < 0.0) throw ContractError("gaussian_jitter: k must be >= 0");
  Tensor out = f;
  if (k == 0.0) return out;
  for (real& v : out.data) v += static_cast<real>(k * rng.gaussian());
  return out;
}

// The additive noise alone; the trainer records it as a constant leaf so
// that f' = add(f, noise) lives in the graph.
inline Tensor gaussian_noise(int d, double k, Rng& rng) {
  Tensor z = Tensor::zeros({d});
  if (k == 0.0) return z;
  for (real& v : z.data) v = static_cast<real>(k * rng.gaussian());
  return z;
}

// Uniform draw from the configured step-size list.
inline double sample_epsilon(const PerturbationConfig& cfg, Rng& rng) {
  cfg.validate();
  return cfg.epsilon_list[size_t(rng.uniform_int(static_cast<int64_t>(cfg.epsilon_list.size())))];
}

inline real sign_of(real v) { return v > real(0) ? real(1) : (v < real(0) ? real(-1) : real(0)); }

// One sign-gradient step with the infinity-norm bound enforced exactly:
// each offset is eps*sign(grad) nudged toward zero until the rounded sum
// stays within eps of f'. `offsets_out`, when given, receives the exact
// additive offsets so callers can reproduce the result as f' + offset.
inline Tensor fgsm_step(const Tensor& f_prime, const Tensor& grad, double eps,
                        Tensor* offsets_out = nullptr) {
  if (!grad.same_shape(f_prime))
    throw ShapeError("fgsm_step: gradient shape " + shape_str(grad.shape) +
                     " does not match feature shape " + shape_str(f_prime.shape));
  if (eps < 0.0) throw ContractError("fgsm_step: eps must be >= 0");
  Tensor adv = f_prime;
  Tensor offsets = Tensor::zeros(f_prime.shape);
  for (size_t i = 0; i < adv.data.size(); ++i) {
    real s = sign_of(grad.data[i]);
    if (s == real(0) || eps == 0.0) continue;
    real offset = static_cast<real>(eps) * s;
    real v = f_prime.data[i] + offset;
    while (std::abs(double(v) - double(f_prime.data[i])) > eps) {
      offset = std::nextafter(offset, real(0));
      v = f_prime.data[i] + offset;
    }
    adv.data[i] = v;
    offsets.data[i] = offset;
  }
  if (offsets_out != nullptr) *offsets_out = offsets;
  return adv;
}

// Spec-level single-feature attack: scorer builds a logits node from the
// feature leaf inside the provided graph. The gradient is taken w.r.t. the
// feature only; nothing else is updated.
inline Tensor fgsm_attack(const Tensor& f_prime, int label,
                          const std::function<int(Graph&, int)>& scorer, double eps) {
  Graph g;
  int feat = g.leaf(f_prime);
  int logits = scorer(g, feat);
  int loss = g.softmax_xent(logits, label);
  g.backward(loss);
  Tensor grad = g.grad(feat);
  if (!grad.all_finite()) throw NumericError("fgsm_attack: non-finite feature gradient");
  return fgsm_step(f_prime, grad, eps);
}

// Batched attack on both primitives. Builds one dedicated graph (separate
// from the main training graph), sums the attribute and object CE losses
// over the batch, and reads per-sample feature gradients from one backward
// pass. Parameters are staged as constants and never updated here.
struct AttackResult {
  std::vector<Tensor> f_a_adv, f_o_adv;
  std::vector<Tensor> offset_a, offset_o;  // f_adv = f' + offset, exactly
};

inline AttackResult attack_primitives(ModelParams& params,
                                      const std::vector<Tensor>& f_a_prime,
                                      const std::vector<Tensor>& f_o_prime,
                                      const std::vector<int>& attrs, const std::vector<int>& objs,
                                      double eps) {
  size_t n = f_a_prime.size();
  if (f_o_prime.size() != n || attrs.size() != n || objs.size() != n)
    throw ContractError("attack_primitives: batch size mismatch");
  Graph g;
  ParamNodes pn = stage_params(g, params);
  std::vector<int> attr_bank, obj_bank;
  for (int id : pn.word_attr) attr_bank.push_back(linear_relu_forward(g, pn.txt_a, id));
  for (int id : pn.word_obj) obj_bank.push_back(linear_relu_forward(g, pn.txt_o, id));

  double tau_inv = params.cfg.tau_inv;
  std::vector<int> feat_a(n), feat_o(n), losses;
  for (size_t i = 0; i < n; ++i) {
    feat_a[i] = g.leaf(f_a_prime[i]);
    feat_o[i] = g.leaf(f_o_prime[i]);
    int sa = score_vector(g, linear_relu_forward(g, pn.vis_a, feat_a[i]), attr_bank, tau_inv);
    int so = score_vector(g, linear_relu_forward(g, pn.vis_o, feat_o[i]), obj_bank, tau_inv);
    losses.push_back(g.softmax_xent(sa, attrs[i]));
    losses.push_back(g.softmax_xent(so, objs[i]));
  }
  g.backward(g.sum(g.concat(losses)));

  AttackResult res;
  res.f_a_adv.resize(n);
  res.f_o_adv.resize(n);
  res.offset_a.resize(n);
  res.offset_o.resize(n);
  for (size_t i = 0; i < n; ++i) {
    Tensor ga = g.grad(feat_a[i]);
    Tensor go = g.grad(feat_o[i]);
    if (!ga.all_finite()) throw NumericError("attack: non-finite gradient on attribute branch");
    if (!go.all_finite()) throw NumericError("attack: non-finite gradient on object branch");
    res.f_a_adv[i] = fgsm_step(f_a_prime[i], ga, eps, &res.offset_a[i]);
    res.f_o_adv[i] = fgsm_step(f_o_prime[i], go, eps, &res.offset_o[i]);
  }
  return res;
}

// Full single-sample pipeline: decompose -> jitter -> attack -> fuse, with
// one shared epsilon draw for both primitives. Decomposers run in eval
// mode here; the composed feature is rebuilt from the attacked primitives,
// never attacked directly.
struct PerturbedTriple {
  Tensor f_a_adv, f_o_adv, f_cp_adv;
  double epsilon = 0.0;
};

inline PerturbedTriple perturbed_forward(ModelParams& params, const Tensor& f_cls, int attr,
                                         int obj, const PerturbationConfig& cfg, Rng& rng) {
  cfg.validate();
  auto [f_a, f_o] = decompose(params, f_cls);
  double eps = sample_epsilon(cfg, rng);
  Tensor f_a_prime = gaussian_jitter(f_a, cfg.noise_k, rng);
  Tensor f_o_prime = gaussian_jitter(f_o, cfg.noise_k, rng);
  AttackResult atk = attack_primitives(params, {f_a_prime}, {f_o_prime}, {attr}, {obj}, eps);
  PerturbedTriple out;
  out.f_a_adv = atk.f_a_adv[0];
  out.f_o_adv = atk.f_o_adv[0];
  out.f_cp_adv = fuse(params, out.f_a_adv, out.f_o_adv);
  out.epsilon = eps;
  return out;
}

// CE(adv scores, target) + KL(P_clean || P_adv). The clean distribution is
// a constant target: its values are read off the clean score node but no
// gradient flows back through it.
inline int build_consistency(Graph& g, int clean_scores_node, int adv_scores_node,
                             int target_idx) {
  std::vector<double> s64 = g.values64(clean_scores_node);
  if (s64.empty()) throw ContractError("consistency: empty candidate set");
  double mx = *std::max_element(s64.begin(), s64.end());
  std::vector<double> p64(s64.size());
  double denom = 0.0;
  for (size_t i = 0; i < s64.size(); ++i) {
    p64[i] = std::exp(s64[i] - mx);
    denom += p64[i];
  }
  Tensor p = Tensor::zeros({static_cast<int>(s64.size())});
  for (size_t i = 0; i < p64.size(); ++i) p.data[i] = static_cast<real>(p64[i] / denom);
  int ce = g.softmax_xent(adv_scores_node, target_idx);
  int kl = g.kl_div(g.leaf(p), g.softmax(adv_scores_node));
  return g.add(ce, kl);
}

// Standalone value of the consistency loss for two composed features.
// `candidates` lists the pair labels of the training candidate set and
// `target_idx` indexes the true pair within it.
inline double consistency_loss(ModelParams& params, const Tensor& f_cp, const Tensor& f_cp_adv,
                               const std::vector<std::pair<int, int>>& candidates, int target_idx,
                               double tau_inv) {
  if (candidates.empty()) throw ContractError("consistency_loss: empty candidate set");
  if (target_idx < 0 || target_idx >= static_cast<int>(candidates.size()))
    throw ContractError("consistency_loss: target outside candidate set");
  Graph g;
  ParamNodes pn = stage_params(g, params);
  std::vector<int> cp_bank;
  for (auto [a, o] : candidates) {
    int wy = compose_word_node(g, pn.word_attr[size_t(a)], pn.word_obj[size_t(o)]);
    cp_bank.push_back(linear_relu_forward(g, pn.txt_cp, wy));
  }
  int clean = score_vector(g, linear_relu_forward(g, pn.vis_cp, g.leaf(f_cp)), cp_bank, tau_inv);
  int adv = score_vector(g, linear_relu_forward(g, pn.vis_cp, g.leaf(f_cp_adv)), cp_bank, tau_inv);
  int loss = build_consistency(g, clean, adv, target_idx);
  return g.value64(loss);
}

}  // namespace czsl
