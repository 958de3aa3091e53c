#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "czsl/adversarial.hpp"
#include "czsl/autodiff.hpp"
#include "czsl/dataio.hpp"
#include "czsl/errors.hpp"
#include "czsl/model.hpp"
#include "czsl/rng.hpp"
#include "czsl/sampler.hpp"

namespace czsl {

struct TrainConfig {
  double lr = 2e-5;
  double weight_decay = 5e-5;
  int batch_size = 128;
  int epochs = 200;
  uint64_t seed = 1;
  int ckpt_every = 50;
  double adv_weight = 1.0;
  PerturbationConfig adv;
  OspConfig osp;

  void validate() const {
    if (lr <= 0.0) throw ContractError("train.lr must be positive");
    if (weight_decay < 0.0) throw ContractError("train.weight_decay must be >= 0");
    if (batch_size <= 0) throw ContractError("train.batch_size must be positive");
    if (epochs < 0) throw ContractError("train.epochs must be >= 0");
    if (ckpt_every <= 0) throw ContractError("train.ckpt_every must be positive");
    if (adv_weight < 0.0) throw ContractError("train.adv_weight must be >= 0");
    adv.validate();
    osp.validate();
  }
};

// ---------------------------------------------------------------------------
// Adam with decoupled-from-nothing classic L2: decay*theta is added to the
// gradient before the moment updates.

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // first, second
  int64_t step = 0;
};

inline void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
                      AdamState& state, double lr, double weight_decay) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(AdamState::kBeta1, double(state.step));
  double bc2 = 1.0 - std::pow(AdamState::kBeta2, double(state.step));
  params.for_each_param([&](const std::string& name, Tensor& theta) {
    auto it = grads.find(name);
    if (it == grads.end()) return;
    const Tensor& g = it->second;
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for " + name);
    if (!g.same_shape(theta))
      throw ShapeError("adam_step: gradient shape mismatch for " + name);
    auto [mit, inserted] = state.moments.try_emplace(
        name, std::make_pair(Tensor::zeros(theta.shape), Tensor::zeros(theta.shape)));
    Tensor& m = mit->second.first;
    Tensor& v = mit->second.second;
    for (size_t i = 0; i < theta.data.size(); ++i) {
      double gi = double(g.data[i]) + weight_decay * double(theta.data[i]);
      double mi = AdamState::kBeta1 * double(m.data[i]) + (1.0 - AdamState::kBeta1) * gi;
      double vi = AdamState::kBeta2 * double(v.data[i]) + (1.0 - AdamState::kBeta2) * gi * gi;
      m.data[i] = static_cast<real>(mi);
      v.data[i] = static_cast<real>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + AdamState::kEps);
      theta.data[i] = static_cast<real>(double(theta.data[i]) - update);
    }
    check_finite(theta, name.c_str());
  });
}

// ---------------------------------------------------------------------------
// Loss assembly for one batch

struct StepOutput {
  double loss_total = 0, loss_base = 0, loss_adv = 0;
  double mean_lp = 0, mean_la = 0, mean_lo = 0, mean_lcp = 0;  // clean per-branch means
  int correct_pair = 0, correct_attr = 0, correct_obj = 0;
  std::vector<std::pair<int, bool>> fit_records;  // (seen pair idx, ensemble hit)
  int n_virtual = 0;
  int osp_skipped = 0;
};

namespace detail {

inline int argmax(const Tensor& t) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(t.size()); ++i)
    if (t.at(i) > t.at(best)) best = i;
  return best;
}

struct SampleNodes {
  int s_p = -1, s_a = -1, s_o = -1, s_cp = -1;
  int f_a = -1, f_o = -1;
  Tensor mask_f;  // fusion dropout mask, shared with the perturbed path
  int target_pair = -1, attr = -1, obj = -1;
};

}  // namespace detail

// One optimization step over a batch of train-sample indices. Builds the
// clean forward, the perturbed branch (attack runs on its own graph), and
// the oversampling stream, then applies Adam. Parameters change here and
// nowhere else.
inline StepOutput run_train_step(ModelParams& params, const Dataset& ds,
                                 const std::vector<int>& batch, const TrainConfig& cfg,
                                 AdamState& adam, const std::vector<double>* pair_freq,
                                 const SimilarityMap* sim, double* virt_carry, Rng& rng,
                                 bool apply_update = true) {
  if (batch.empty()) throw ContractError("run_train_step: empty batch");
  const Vocabulary& vocab = ds.vocab;
  const auto& candidates = vocab.pairs_seen;
  double tau_inv = params.cfg.tau_inv;
  double drop = params.cfg.dropout;
  int d = params.cfg.feat_dim;
  int h = params.cfg.hidden_dim();

  Graph g;
  ParamNodes pn = stage_params(g, params);
  TextNodes tn = build_text_nodes(g, pn, candidates);

  auto draw_masks = [&]() {
    DropoutMasks m;
    m.active = drop > 0;
    m.a = make_dropout_mask(h, drop, rng);
    m.o = make_dropout_mask(h, drop, rng);
    m.f = make_dropout_mask(h, drop, rng);
    return m;
  };

  StepOutput out;
  std::vector<detail::SampleNodes> sn(batch.size());
  std::vector<int> lp, la, lo, lcp;

  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = ds.samples[size_t(batch[i])];
    int pid = vocab.pair_id(s.attr, s.obj);
    auto pos = ds.seen_pos.find(pid);
    if (pos == ds.seen_pos.end())
      throw ContractError("run_train_step: sample " + s.id + " labels an unseen pair");
    DropoutMasks mk = draw_masks();
    int x = g.leaf(s.feature);
    auto [fa, fo] = decompose_nodes(g, pn, x, mk.ptr_a(), mk.ptr_o());
    int fcp = fuse_node(g, pn, fa, fo, mk.ptr_f());

    detail::SampleNodes& node = sn[i];
    node.f_a = fa;
    node.f_o = fo;
    node.mask_f = mk.f;
    node.target_pair = pos->second;
    node.attr = s.attr;
    node.obj = s.obj;
    node.s_p = score_vector(g, linear_relu_forward(g, pn.vis_p, x), tn.cand_emb_p, tau_inv);
    node.s_a = score_vector(g, linear_relu_forward(g, pn.vis_a, fa), tn.attr_emb, tau_inv);
    node.s_o = score_vector(g, linear_relu_forward(g, pn.vis_o, fo), tn.obj_emb, tau_inv);
    node.s_cp = score_vector(g, linear_relu_forward(g, pn.vis_cp, fcp), tn.cand_emb_cp, tau_inv);
    lp.push_back(g.softmax_xent(node.s_p, node.target_pair));
    la.push_back(g.softmax_xent(node.s_a, s.attr));
    lo.push_back(g.softmax_xent(node.s_o, s.obj));
    lcp.push_back(g.softmax_xent(node.s_cp, node.target_pair));

    // train-branch predictions feed the fit tracker and epoch stats
    const Tensor& sp = g.value(node.s_p);
    const Tensor& sav = g.value(node.s_a);
    const Tensor& sov = g.value(node.s_o);
    const Tensor& scp = g.value(node.s_cp);
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < candidates.size(); ++k) {
      auto [ca, co] = candidates[k];
      double ens = double(sp.at(int(k))) + double(sav.at(ca)) + double(sov.at(co)) +
                   double(scp.at(int(k)));
      if (ens > best_score) {
        best_score = ens;
        best = static_cast<int>(k);
      }
    }
    bool hit = best == node.target_pair;
    out.fit_records.emplace_back(node.target_pair, hit);
    out.correct_pair += hit ? 1 : 0;
    out.correct_attr += detail::argmax(sav) == s.attr ? 1 : 0;
    out.correct_obj += detail::argmax(sov) == s.obj ? 1 : 0;
  }

  // Perturbed branch: one epsilon per step, fresh jitter per sample; the
  // sign gradients come from a separate graph.
  std::vector<int> adv_terms;
  if (cfg.adv.enabled) {
    double eps = sample_epsilon(cfg.adv, rng);
    std::vector<int> fp_a(batch.size()), fp_o(batch.size());
    std::vector<Tensor> fp_a_vals, fp_o_vals;
    std::vector<int> attrs, objs;
    for (size_t i = 0; i < batch.size(); ++i) {
      Tensor za = gaussian_noise(d, cfg.adv.noise_k, rng);
      Tensor zo = gaussian_noise(d, cfg.adv.noise_k, rng);
      fp_a[i] = g.add(sn[i].f_a, g.leaf(za));
      fp_o[i] = g.add(sn[i].f_o, g.leaf(zo));
      fp_a_vals.push_back(g.value(fp_a[i]));
      fp_o_vals.push_back(g.value(fp_o[i]));
      attrs.push_back(sn[i].attr);
      objs.push_back(sn[i].obj);
    }
    AttackResult atk = attack_primitives(params, fp_a_vals, fp_o_vals, attrs, objs, eps);
    for (size_t i = 0; i < batch.size(); ++i) {
      int adv_a = g.add(fp_a[i], g.leaf(atk.offset_a[i]));
      int adv_o = g.add(fp_o[i], g.leaf(atk.offset_o[i]));
      // bounded-perturbation invariant, asserted per step
      const Tensor& va = g.value(adv_a);
      const Tensor& vo = g.value(adv_o);
      for (int c = 0; c < d; ++c) {
        if (std::abs(double(va.at(c)) - double(fp_a_vals[i].at(c))) > eps ||
            std::abs(double(vo.at(c)) - double(fp_o_vals[i].at(c))) > eps)
          throw NumericError("attack: perturbation bound violated");
      }
      int sa_adv = score_vector(g, linear_relu_forward(g, pn.vis_a, adv_a), tn.attr_emb, tau_inv);
      int so_adv = score_vector(g, linear_relu_forward(g, pn.vis_o, adv_o), tn.obj_emb, tau_inv);
      adv_terms.push_back(g.softmax_xent(sa_adv, sn[i].attr));
      adv_terms.push_back(g.softmax_xent(so_adv, sn[i].obj));
      int fcp_adv = fuse_node(g, pn, adv_a, adv_o,
                              params.cfg.dropout > 0 ? &sn[i].mask_f : nullptr);
      int scp_adv =
          score_vector(g, linear_relu_forward(g, pn.vis_cp, fcp_adv), tn.cand_emb_cp, tau_inv);
      adv_terms.push_back(build_consistency(g, sn[i].s_cp, scp_adv, sn[i].target_pair));
    }
  }

  // Oversampling stream: virtual composed features join the L_cp term.
  std::vector<int> lcp_virtual;
  if (cfg.osp.enabled && pair_freq != nullptr && sim != nullptr) {
    double want = cfg.osp.budget_ratio * double(batch.size()) + (virt_carry ? *virt_carry : 0.0);
    int n_virt = static_cast<int>(want);
    if (virt_carry) *virt_carry = want - double(n_virt);
    VirtualPlan plan = plan_virtual_batch(n_virt, *pair_freq, ds, *sim, rng);
    out.osp_skipped = plan.skipped;
    auto virt = realize_virtual_batch(g, pn, ds, plan, draw_masks);
    for (const VirtualFeature& vf : virt) {
      int scp = score_vector(g, linear_relu_forward(g, pn.vis_cp, vf.f_cp_node), tn.cand_emb_cp,
                             tau_inv);
      lcp_virtual.push_back(g.softmax_xent(scp, vf.seen_pair_idx));
    }
    out.n_virtual = static_cast<int>(virt.size());
  }

  // L = mean(L_p + L_a + L_o) + (sum L_cp over real+virtual)/(N_real+N_virt)
  //     + adv_weight * mean(L_a^adv + L_o^adv + L_cons)
  double n_real = double(batch.size());
  std::vector<int> pao;
  pao.insert(pao.end(), lp.begin(), lp.end());
  pao.insert(pao.end(), la.begin(), la.end());
  pao.insert(pao.end(), lo.begin(), lo.end());
  int base_pao = g.scale(g.sum(g.concat(pao)), static_cast<real>(1.0 / n_real));
  std::vector<int> cp_all = lcp;
  cp_all.insert(cp_all.end(), lcp_virtual.begin(), lcp_virtual.end());
  int cp_stream = g.scale(g.sum(g.concat(cp_all)),
                          static_cast<real>(1.0 / (n_real + double(lcp_virtual.size()))));
  int base_node = g.add(base_pao, cp_stream);
  int total_node = base_node;
  int adv_node = -1;
  if (!adv_terms.empty()) {
    adv_node = g.scale(g.sum(g.concat(adv_terms)), static_cast<real>(1.0 / n_real));
    total_node = g.add(base_node, g.scale(adv_node, static_cast<real>(cfg.adv_weight)));
  }

  if (apply_update) {
    g.backward(total_node);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : pn.named) {
      if (!params.is_trainable(name)) continue;
      if (g.has_grad(id)) grads.emplace(name, g.grad(id));
    }
    adam_step(params, grads, adam, cfg.lr, cfg.weight_decay);
  }

  auto mean64 = [&](const std::vector<int>& ids) {
    double acc = 0.0;
    for (int id : ids) acc += g.value64(id);
    return acc / double(ids.size());
  };
  out.mean_lp = mean64(lp);
  out.mean_la = mean64(la);
  out.mean_lo = mean64(lo);
  out.mean_lcp = mean64(lcp);
  out.loss_base = g.value64(base_node);
  out.loss_adv = adv_node >= 0 ? g.value64(adv_node) : 0.0;
  out.loss_total = g.value64(total_node);
  return out;
}

// ---------------------------------------------------------------------------

struct EpochStats {
  double mean_total = 0, mean_base = 0, mean_adv = 0;
  double acc_pair = 0, acc_attr = 0, acc_obj = 0;
  int n_virtual = 0;
  int n_batches = 0;
  int n_samples = 0;
  int osp_skipped = 0;
};

// One pass over the shuffled train split. The fit tracker is updated from
// this epoch's training predictions at the end; the oversampling
// frequencies seen inside the epoch are the previous epoch's.
inline EpochStats train_epoch(ModelParams& params, const Dataset& ds, const TrainConfig& cfg,
                              FitTracker& tracker, const SimilarityMap* sim, AdamState& adam,
                              Rng& rng, double* virt_carry) {
  cfg.validate();
  EpochStats stats;
  std::vector<int> order = rng.permutation(static_cast<int>(ds.train_ids.size()));
  std::vector<double> freq;
  if (cfg.osp.enabled && tracker.num_pairs() > 0)
    freq = oversample_frequencies(tracker, cfg.osp.alpha);

  for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
    size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
    std::vector<int> batch;
    for (size_t i = start; i < end; ++i) batch.push_back(ds.train_ids[size_t(order[i])]);
    StepOutput so;
    try {
      so = run_train_step(params, ds, batch, cfg, adam, freq.empty() ? nullptr : &freq, sim,
                          virt_carry, rng);
    } catch (const NumericError& e) {
      throw NumericError("epoch aborted at batch " + std::to_string(stats.n_batches) + ": " +
                         e.what());
    }
    for (auto [idx, hit] : so.fit_records) tracker.record(idx, hit);
    stats.mean_total += so.loss_total;
    stats.mean_base += so.loss_base;
    stats.mean_adv += so.loss_adv;
    stats.acc_pair += so.correct_pair;
    stats.acc_attr += so.correct_attr;
    stats.acc_obj += so.correct_obj;
    stats.n_virtual += so.n_virtual;
    stats.osp_skipped += so.osp_skipped;
    stats.n_samples += static_cast<int>(batch.size());
    stats.n_batches += 1;
  }
  if (stats.n_batches > 0) {
    stats.mean_total /= stats.n_batches;
    stats.mean_base /= stats.n_batches;
    stats.mean_adv /= stats.n_batches;
    stats.acc_pair /= stats.n_samples;
    stats.acc_attr /= stats.n_samples;
    stats.acc_obj /= stats.n_samples;
  }
  tracker.finish_epoch();
  return stats;
}

// Full training run. The optional callback fires after every epoch with
// (epoch index, stats, params) and may be used for checkpointing.
inline std::vector<EpochStats> train_model(
    ModelParams& params, const Dataset& ds, const TrainConfig& cfg,
    const std::function<void(int, const EpochStats&, ModelParams&)>& on_epoch = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  Rng train_rng = rng.split(1);
  AdamState adam;
  FitTracker tracker(static_cast<int>(ds.vocab.pairs_seen.size()));
  SimilarityMap sim;
  if (cfg.osp.enabled) {
    std::vector<Tensor> obj_vecs;
    for (const Tensor& w : params.word_obj) obj_vecs.push_back(w);
    sim = similarity_map(obj_vecs, ds.vocab.objects);
  }
  double virt_carry = 0.0;
  std::vector<EpochStats> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st = train_epoch(params, ds, cfg, tracker, cfg.osp.enabled ? &sim : nullptr, adam,
                                train_rng, &virt_carry);
    history.push_back(st);
    if (on_epoch) on_epoch(epoch, st, params);
  }
  return history;
}

}  // namespace czsl
