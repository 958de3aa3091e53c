#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "czsl/dataio.hpp"
#include "czsl/errors.hpp"
#include "czsl/model.hpp"
#include "czsl/rng.hpp"
#include "czsl/tensor.hpp"

namespace czsl {

struct OspConfig {
  bool enabled = true;
  double budget_ratio = 0.25;  // virtual features per epoch / real samples per epoch
  double alpha = 0.0;          // frequency sharpness; cancels in the softmax

  void validate() const {
    if (budget_ratio < 0.0) throw ContractError("osp.budget_ratio must be >= 0");
    if (!std::isfinite(alpha)) throw ContractError("osp.alpha must be finite");
  }
};

// Per-seen-pair goodness of fit, double-buffered: the previous epoch's
// accuracies drive sampling while the current epoch accumulates.
class FitTracker {
 public:
  explicit FitTracker(int num_seen_pairs = 0) { reset(num_seen_pairs); }

  void reset(int num_seen_pairs) {
    prev_correct_.assign(size_t(num_seen_pairs), 0);
    prev_total_.assign(size_t(num_seen_pairs), 0);
    cur_correct_.assign(size_t(num_seen_pairs), 0);
    cur_total_.assign(size_t(num_seen_pairs), 0);
  }

  int num_pairs() const { return static_cast<int>(prev_total_.size()); }

  void record(int seen_pair_idx, bool correct) {
    cur_total_[size_t(seen_pair_idx)] += 1;
    if (correct) cur_correct_[size_t(seen_pair_idx)] += 1;
  }

  // Rolls the current epoch's counts into the sampling buffer.
  void finish_epoch() {
    prev_correct_ = cur_correct_;
    prev_total_ = cur_total_;
    std::fill(cur_correct_.begin(), cur_correct_.end(), 0);
    std::fill(cur_total_.begin(), cur_total_.end(), 0);
  }

  // Pairs never observed default to 0 (maximally oversampled).
  double acc(int seen_pair_idx) const {
    int64_t t = prev_total_[size_t(seen_pair_idx)];
    return t == 0 ? 0.0 : double(prev_correct_[size_t(seen_pair_idx)]) / double(t);
  }

 private:
  std::vector<int64_t> prev_correct_, prev_total_, cur_correct_, cur_total_;
};

// Freq(y_k) = exp(alpha - Acc(y_k)) / sum_i exp(alpha - Acc(y_i)).
// alpha cancels analytically but is applied as written.
inline std::vector<double> oversample_frequencies(const FitTracker& tracker, double alpha = 0.0) {
  int k = tracker.num_pairs();
  if (k == 0) throw ContractError("oversample_frequencies: no seen pairs");
  std::vector<double> freq(static_cast<size_t>(k));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i) {
    freq[size_t(i)] = alpha - tracker.acc(i);
    mx = std::max(mx, freq[size_t(i)]);
  }
  double denom = 0.0;
  for (double& v : freq) {
    v = std::exp(v - mx);
    denom += v;
  }
  for (double& v : freq) v /= denom;
  return freq;
}

// n x n cosine-similarity map over object word embeddings. Built from the
// initial (prior) embedding table, not the fine-tuned rows.
struct SimilarityMap {
  int n = 0;
  std::vector<double> s;  // row-major n*n

  double at(int i, int j) const { return s[size_t(i) * size_t(n) + size_t(j)]; }

  void check() const {
    for (int i = 0; i < n; ++i) {
      if (std::abs(at(i, i) - 1.0) > 1e-6)
        throw NumericError("similarity map: diagonal entry " + std::to_string(i) + " != 1");
      for (int j = 0; j < i; ++j) {
        if (std::abs(at(i, j) - at(j, i)) > 1e-6)
          throw NumericError("similarity map: asymmetry at (" + std::to_string(i) + "," +
                             std::to_string(j) + ")");
        if (at(i, j) < -1.0 - 1e-9 || at(i, j) > 1.0 + 1e-9)
          throw NumericError("similarity map: entry out of [-1,1]");
      }
    }
  }
};

inline SimilarityMap similarity_map(const std::vector<Tensor>& object_vectors,
                                    const std::vector<std::string>& object_names = {}) {
  int n = static_cast<int>(object_vectors.size());
  SimilarityMap sm;
  sm.n = n;
  sm.s.assign(size_t(n) * size_t(n), 0.0);
  std::vector<Tensor> unit(object_vectors.begin(), object_vectors.end());
  for (int i = 0; i < n; ++i) {
    double nrm = norm64(unit[size_t(i)]);
    if (nrm == 0.0) {
      std::string name = object_names.empty() ? std::to_string(i) : object_names[size_t(i)];
      throw DegenerateInputError("similarity_map: zero-norm embedding for object " + name);
    }
    for (real& v : unit[size_t(i)].data) v = static_cast<real>(double(v) / nrm);
  }
  for (int i = 0; i < n; ++i) {
    sm.s[size_t(i) * size_t(n) + size_t(i)] = 1.0;
    for (int j = 0; j < i; ++j) {
      double d = dot64(unit[size_t(i)], unit[size_t(j)]);
      sm.s[size_t(i) * size_t(n) + size_t(j)] = d;
      sm.s[size_t(j) * size_t(n) + size_t(i)] = d;
    }
  }
  sm.check();
  return sm;
}

// Row-wise softmax of similarities to the target object, restricted to the
// eligible donors; ineligible objects get probability zero.
inline std::vector<double> donor_distribution(const SimilarityMap& sm, int target,
                                              const std::vector<char>& eligible) {
  if (target < 0 || target >= sm.n) throw ContractError("donor_distribution: bad target object");
  if (static_cast<int>(eligible.size()) != sm.n)
    throw ContractError("donor_distribution: eligibility mask size mismatch");
  bool any = false;
  for (char e : eligible) any = any || (e != 0);
  if (!any) throw ContractError("donor_distribution: empty eligible set");
  std::vector<double> p(size_t(sm.n), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < sm.n; ++j)
    if (eligible[size_t(j)]) mx = std::max(mx, sm.at(target, j));
  double denom = 0.0;
  for (int j = 0; j < sm.n; ++j) {
    if (!eligible[size_t(j)]) continue;
    p[size_t(j)] = std::exp(sm.at(target, j) - mx);
    denom += p[size_t(j)];
  }
  for (double& v : p) v /= denom;
  return p;
}

// One planned virtual composition: the attribute primitive comes from a
// donor image (attribute a, similar object o'), the object primitive from
// any training image of the target object.
struct VirtualDraw {
  int seen_pair_idx = -1;
  int attr = -1, obj = -1;   // label assigned to the synthesized feature
  int donor_obj = -1;        // object of the attribute-donor image
  int attr_sample = -1;      // dataset sample index supplying f_a
  int obj_sample = -1;       // dataset sample index supplying f_o
};

struct VirtualPlan {
  std::vector<VirtualDraw> draws;
  int skipped = 0;  // targets skipped because no train image carried the attribute
};

// Chooses target pairs from the oversampling frequencies and donor images
// from the object-similarity distribution. Pure sampling; no features are
// touched, so the draw statistics can be tested in isolation.
inline VirtualPlan plan_virtual_batch(int count, const std::vector<double>& pair_freq,
                                      const Dataset& ds, const SimilarityMap& sm, Rng& rng) {
  if (count < 0) throw ContractError("plan_virtual_batch: negative count");
  VirtualPlan plan;
  const Vocabulary& vocab = ds.vocab;
  for (int t = 0; t < count; ++t) {
    int k = rng.sample_discrete(pair_freq);
    auto [a, o] = vocab.pairs_seen[size_t(k)];
    const auto& donors = ds.objects_with_attr[size_t(a)];
    if (donors.empty()) {
      // no training image carries this attribute at all; never fabricate
      plan.skipped += 1;
      continue;
    }
    std::vector<char> eligible(size_t(vocab.num_objects()), 0);
    for (int obj : donors) eligible[size_t(obj)] = 1;
    std::vector<double> pdonor = donor_distribution(sm, o, eligible);
    int donor_obj = rng.sample_discrete(pdonor);

    const auto& attr_imgs = ds.train_by_attr_obj[size_t(a)].at(donor_obj);
    const auto& obj_imgs = ds.train_by_object[size_t(o)];
    if (obj_imgs.empty()) {
      plan.skipped += 1;
      continue;
    }
    VirtualDraw d;
    d.seen_pair_idx = k;
    d.attr = a;
    d.obj = o;
    d.donor_obj = donor_obj;
    d.attr_sample = attr_imgs[size_t(rng.uniform_int(static_cast<int64_t>(attr_imgs.size())))];
    d.obj_sample = obj_imgs[size_t(rng.uniform_int(static_cast<int64_t>(obj_imgs.size())))];
    plan.draws.push_back(d);
  }
  return plan;
}

// Materializes planned draws in a training graph: f_cp = fuse(f_a of the
// donor image, f_o of the object image). Gradients flow into the
// decomposers and fusion.
struct VirtualFeature {
  int f_cp_node = -1;
  int attr = -1, obj = -1;
  int seen_pair_idx = -1;
};

template <typename MaskFn>
inline std::vector<VirtualFeature> realize_virtual_batch(Graph& g, const ParamNodes& pn,
                                                         const Dataset& ds,
                                                         const VirtualPlan& plan,
                                                         MaskFn&& next_masks) {
  std::vector<VirtualFeature> out;
  out.reserve(plan.draws.size());
  for (const VirtualDraw& d : plan.draws) {
    DropoutMasks mk = next_masks();
    int attr_feat = g.leaf(ds.samples[size_t(d.attr_sample)].feature);
    int obj_feat = g.leaf(ds.samples[size_t(d.obj_sample)].feature);
    int f_a = mlp_forward(g, pn.dec_a, attr_feat, mk.ptr_a());
    int f_o = mlp_forward(g, pn.dec_o, obj_feat, mk.ptr_o());
    VirtualFeature vf;
    vf.f_cp_node = fuse_node(g, pn, f_a, f_o, mk.ptr_f());
    vf.attr = d.attr;
    vf.obj = d.obj;
    vf.seen_pair_idx = d.seen_pair_idx;
    out.push_back(vf);
  }
  return out;
}

}  // namespace czsl
