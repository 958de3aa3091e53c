#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/dataio.hpp"
#include "czsl/errors.hpp"
#include "czsl/model.hpp"

namespace czsl {

enum class World { kClosed, kOpen };

inline const char* world_name(World w) { return w == World::kClosed ? "closed" : "open"; }

// Vocabulary-level candidate mask: closed world is every declared seen and
// unseen pair, open world the full attribute x object grid.
inline PairMask candidate_set(const Vocabulary& vocab, World world) {
  std::vector<int> ids;
  if (world == World::kOpen) {
    ids.resize(size_t(vocab.num_pairs()));
    for (int i = 0; i < vocab.num_pairs(); ++i) ids[size_t(i)] = i;
  } else {
    for (auto [a, o] : vocab.pairs_seen) ids.push_back(vocab.pair_id(a, o));
    for (auto [a, o] : vocab.pairs_unseen) ids.push_back(vocab.pair_id(a, o));
  }
  return PairMask::from_ids(vocab.num_pairs(), std::move(ids));
}

// Split-aware candidate mask. Closed world admits the pairs that actually
// occur in the split's samples plus the declared unseen pairs of that
// split, so seen candidates are the seen pairs present at test time.
inline PairMask candidate_set(const Dataset& ds, World world, Split split = Split::kTest) {
  const Vocabulary& vocab = ds.vocab;
  if (world == World::kOpen) return candidate_set(vocab, World::kOpen);
  std::vector<int> ids;
  for (const Sample& s : ds.samples)
    if (s.split == split) ids.push_back(vocab.pair_id(s.attr, s.obj));
  const auto& unseen = split == Split::kVal ? vocab.pairs_val_unseen : vocab.pairs_unseen;
  for (auto [a, o] : unseen) ids.push_back(vocab.pair_id(a, o));
  return PairMask::from_ids(vocab.num_pairs(), std::move(ids));
}

// C(y) = s_p[y] + s_a[a] + s_o[o] + s_cp[y] over the candidate pairs;
// non-candidates keep the masked sentinel.
inline std::vector<double> ensemble_from_branches(const BranchScores& bs, const Vocabulary& vocab,
                                                  const PairMask& mask) {
  if (mask.candidates.empty()) throw ContractError("ensemble_scores: empty candidate set");
  std::vector<double> ens(size_t(mask.num_pairs), kMaskedScore);
  for (int pid : mask.candidates) {
    auto [a, o] = vocab.pair_of(pid);
    ens[size_t(pid)] = bs.s_p[size_t(pid)] + bs.s_a[size_t(a)] + bs.s_o[size_t(o)] +
                       bs.s_cp[size_t(pid)];
  }
  return ens;
}

inline std::vector<double> ensemble_scores(ModelParams& params, const Tensor& f_cls,
                                           const Vocabulary& vocab, const PairMask& mask,
                                           double tau_inv, const TextCache& tc) {
  BranchScores bs = branch_scores(params, f_cls, mask, tau_inv, tc);
  return ensemble_from_branches(bs, vocab, mask);
}

// Scores for a set of samples over the full pair grid. Pair ids follow the
// grid layout pid = attr * num_objects + obj.
struct ScoreTable {
  int num_pairs = 0;
  int num_objects = 0;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;  // true pair id per row
};

struct EvalReport {
  std::vector<double> bias_grid;
  std::vector<double> seen_curve, unseen_curve;
  double auc = 0, best_hm = 0;
  double best_seen = 0, best_unseen = 0;
  double best_attr = 0, best_obj = 0;
  int n_samples = 0, n_seen_samples = 0, n_unseen_samples = 0;
  std::map<int, double> per_pair_accuracy;  // at the best-HM bias

  nlohmann::json to_json(const Vocabulary* vocab = nullptr) const {
    nlohmann::json j;
    j["auc"] = auc;
    j["best_hm"] = best_hm;
    j["best_seen"] = best_seen;
    j["best_unseen"] = best_unseen;
    j["best_attr"] = best_attr;
    j["best_obj"] = best_obj;
    j["n_samples"] = n_samples;
    j["n_seen_samples"] = n_seen_samples;
    j["n_unseen_samples"] = n_unseen_samples;
    j["bias_grid"] = bias_grid;
    j["seen_curve"] = seen_curve;
    j["unseen_curve"] = unseen_curve;
    nlohmann::json pp = nlohmann::json::array();
    for (auto [pid, acc] : per_pair_accuracy) {
      nlohmann::json e;
      e["pair_id"] = pid;
      if (vocab != nullptr) {
        auto [a, o] = vocab->pair_of(pid);
        e["attr"] = vocab->attributes[size_t(a)];
        e["obj"] = vocab->objects[size_t(o)];
      }
      e["accuracy"] = acc;
      pp.push_back(e);
    }
    j["per_pair_accuracy"] = pp;
    return j;
  }
};

namespace detail {

struct GroupBest {
  double score = kMaskedScore;
  int pid = -1;
};

// Lowest index wins ties, matching a first-strict-max scan.
inline void consider(GroupBest& g, double score, int pid) {
  if (g.pid < 0 || score > g.score) {
    g.score = score;
    g.pid = pid;
  }
}

}  // namespace detail

// Bias grid: evenly spaced values spanning the per-sample gaps between the
// best seen-pair score and the best unseen-pair score, padded so that both
// all-seen and all-unseen regimes are realized at the extremes.
inline std::vector<double> make_bias_grid(const ScoreTable& table,
                                          const std::vector<char>& seen_pair_mask, int size = 200) {
  if (size < 2) throw ContractError("make_bias_grid: need at least 2 grid points");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& row : table.rows) {
    detail::GroupBest bs, bu;
    for (int pid = 0; pid < table.num_pairs; ++pid) {
      if (row[size_t(pid)] <= kMaskedScore) continue;
      if (seen_pair_mask[size_t(pid)])
        detail::consider(bs, row[size_t(pid)], pid);
      else
        detail::consider(bu, row[size_t(pid)], pid);
    }
    if (bs.pid < 0 || bu.pid < 0) continue;
    double gap = bs.score - bu.score;
    lo = std::min(lo, gap);
    hi = std::max(hi, gap);
  }
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    lo = -1.0;
    hi = 1.0;
  }
  double margin = std::max(1e-3, 0.05 * (hi - lo));
  lo -= margin;
  hi += margin;
  std::vector<double> grid(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i)
    grid[size_t(i)] = lo + (hi - lo) * double(i) / double(size - 1);
  return grid;
}

// Sweeps the calibration bias added to every unseen pair's score and
// reports the seen/unseen accuracy trade-off plus its summary metrics.
inline EvalReport calibration_sweep(const ScoreTable& table,
                                    const std::vector<char>& seen_pair_mask,
                                    const std::vector<double>& bias_grid) {
  if (bias_grid.empty()) throw ContractError("calibration_sweep: empty bias grid");
  if (static_cast<int>(seen_pair_mask.size()) != table.num_pairs)
    throw ContractError("calibration_sweep: seen mask size mismatch");
  size_t n = table.rows.size();
  EvalReport rep;
  rep.bias_grid = bias_grid;
  rep.n_samples = static_cast<int>(n);

  // per-sample group bests; predictions then depend on the bias only
  // through which side wins
  std::vector<detail::GroupBest> best_seen(n), best_unseen(n);
  std::vector<char> label_is_seen(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& row = table.rows[i];
    for (int pid = 0; pid < table.num_pairs; ++pid) {
      if (row[size_t(pid)] <= kMaskedScore) continue;
      if (seen_pair_mask[size_t(pid)])
        detail::consider(best_seen[i], row[size_t(pid)], pid);
      else
        detail::consider(best_unseen[i], row[size_t(pid)], pid);
    }
    label_is_seen[i] = seen_pair_mask[size_t(table.labels[i])];
    rep.n_seen_samples += label_is_seen[i] ? 1 : 0;
    rep.n_unseen_samples += label_is_seen[i] ? 0 : 1;
  }

  auto predict = [&](size_t i, double b) -> int {
    const auto& bs = best_seen[i];
    const auto& bu = best_unseen[i];
    if (bs.pid < 0) return bu.pid;
    if (bu.pid < 0) return bs.pid;
    double u = bu.score + b;
    if (bs.score > u) return bs.pid;
    if (bs.score < u) return bu.pid;
    return std::min(bs.pid, bu.pid);
  };

  if (table.num_objects <= 0)
    throw ContractError("calibration_sweep: score table lacks the grid layout");

  double best_hm_bias = bias_grid.front();
  for (double b : bias_grid) {
    int seen_hit = 0, unseen_hit = 0, attr_hit = 0, obj_hit = 0;
    for (size_t i = 0; i < n; ++i) {
      int pred = predict(i, b);
      bool correct = pred == table.labels[i];
      if (label_is_seen[i]) {
        seen_hit += correct ? 1 : 0;
      } else {
        unseen_hit += correct ? 1 : 0;
        // primitive accuracy, reported for unseen targets only
        attr_hit += pred / table.num_objects == table.labels[i] / table.num_objects ? 1 : 0;
        obj_hit += pred % table.num_objects == table.labels[i] % table.num_objects ? 1 : 0;
      }
    }
    double s = rep.n_seen_samples > 0 ? double(seen_hit) / rep.n_seen_samples : 0.0;
    double u = rep.n_unseen_samples > 0 ? double(unseen_hit) / rep.n_unseen_samples : 0.0;
    rep.seen_curve.push_back(s);
    rep.unseen_curve.push_back(u);
    double hm = (s + u) > 0.0 ? 2.0 * s * u / (s + u) : 0.0;
    if (hm > rep.best_hm) {
      rep.best_hm = hm;
      best_hm_bias = b;
    }
    rep.best_seen = std::max(rep.best_seen, s);
    rep.best_unseen = std::max(rep.best_unseen, u);
    if (rep.n_unseen_samples > 0) {
      rep.best_attr = std::max(rep.best_attr, double(attr_hit) / rep.n_unseen_samples);
      rep.best_obj = std::max(rep.best_obj, double(obj_hit) / rep.n_unseen_samples);
    }
  }

  // AUC: trapezoid over the deduplicated seen-sorted curve, extended left
  // to seen = 0 at the leftmost unseen accuracy (a single swept point thus
  // integrates to seen * unseen).
  {
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < rep.seen_curve.size(); ++i)
      pts.emplace_back(rep.seen_curve[i], rep.unseen_curve[i]);
    std::sort(pts.begin(), pts.end());
    std::vector<std::pair<double, double>> dedup;
    for (const auto& p : pts) {
      if (!dedup.empty() && dedup.back().first == p.first)
        dedup.back().second = std::max(dedup.back().second, p.second);
      else
        dedup.push_back(p);
    }
    rep.auc = dedup.front().first * dedup.front().second;
    for (size_t i = 1; i < dedup.size(); ++i)
      rep.auc += (dedup[i].first - dedup[i - 1].first) *
                 (dedup[i].second + dedup[i - 1].second) / 2.0;
  }

  rep.per_pair_accuracy = {};
  std::map<int, std::pair<int, int>> per_pair;  // label -> (hits, total)
  for (size_t i = 0; i < n; ++i) {
    int pred = predict(i, best_hm_bias);
    auto& [hits, total] = per_pair[table.labels[i]];
    total += 1;
    hits += pred == table.labels[i] ? 1 : 0;
  }
  for (auto& [pid, ht] : per_pair)
    rep.per_pair_accuracy[pid] = ht.second > 0 ? double(ht.first) / ht.second : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------

// Ensemble score table for the given sample indices.
inline ScoreTable build_score_table(ModelParams& params, const Dataset& ds,
                                    const std::vector<int>& sample_ids, const PairMask& mask,
                                    const TextCache& tc) {
  ScoreTable table;
  table.num_pairs = ds.vocab.num_pairs();
  table.num_objects = ds.vocab.num_objects();
  for (int sid : sample_ids) {
    const Sample& s = ds.samples[size_t(sid)];
    table.rows.push_back(
        ensemble_scores(params, s.feature, ds.vocab, mask, params.cfg.tau_inv, tc));
    table.labels.push_back(ds.vocab.pair_id(s.attr, s.obj));
  }
  return table;
}

inline std::vector<char> seen_pair_flags(const Vocabulary& vocab) {
  std::vector<char> flags(size_t(vocab.num_pairs()), 0);
  for (auto [a, o] : vocab.pairs_seen) flags[size_t(vocab.pair_id(a, o))] = 1;
  return flags;
}

// Full evaluation of one split: ensemble scoring, bias sweep, report.
inline EvalReport evaluate(ModelParams& params, const Dataset& ds, World world,
                           Split split = Split::kTest, int grid_size = 200) {
  const std::vector<int>& ids = split == Split::kTest  ? ds.test_ids
                                : split == Split::kVal ? ds.val_ids
                                                       : ds.train_ids;
  if (ids.empty()) throw DataError("evaluate: split has no samples");
  PairMask mask = candidate_set(ds, world, split);
  TextCache tc = build_text_cache(params);
  ScoreTable table = build_score_table(params, ds, ids, mask, tc);
  std::vector<char> seen = seen_pair_flags(ds.vocab);
  std::vector<double> grid = make_bias_grid(table, seen, grid_size);
  return calibration_sweep(table, seen, grid);
}

// ---------------------------------------------------------------------------
// Top-k retrieval. Ties break toward the lower index; k beyond the corpus
// size truncates.

namespace detail {

inline std::vector<int> top_k(const std::vector<double>& scores, int k) {
  std::vector<int> idx(scores.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[size_t(a)] > scores[size_t(b)];
  });
  if (k < static_cast<int>(idx.size())) idx.resize(size_t(k));
  return idx;
}

}  // namespace detail

// image -> text: candidate pair ids ranked by ensemble score.
inline std::vector<int> retrieve_pairs_for_image(ModelParams& params, const Tensor& f_cls,
                                                 const Vocabulary& vocab, const PairMask& mask,
                                                 const TextCache& tc, int k) {
  if (k < 1) throw ContractError("retrieval: k must be >= 1");
  std::vector<double> ens =
      ensemble_scores(params, f_cls, vocab, mask, params.cfg.tau_inv, tc);
  std::vector<double> cand_scores;
  for (int pid : mask.candidates) cand_scores.push_back(ens[size_t(pid)]);
  std::vector<int> order = detail::top_k(cand_scores, k);
  std::vector<int> out;
  for (int i : order) out.push_back(mask.candidates[size_t(i)]);
  return out;
}

// text -> image: corpus sample indices ranked by the queried pair's
// ensemble score.
inline std::vector<int> retrieve_images_for_pair(ModelParams& params, const Dataset& ds,
                                                 const std::vector<int>& corpus_ids, int pair_id,
                                                 const PairMask& mask, const TextCache& tc,
                                                 int k) {
  if (k < 1) throw ContractError("retrieval: k must be >= 1");
  if (corpus_ids.empty()) throw ContractError("retrieval: empty corpus");
  if (!mask.contains(pair_id)) throw ContractError("retrieval: queried pair is not a candidate");
  std::vector<double> scores;
  for (int sid : corpus_ids) {
    std::vector<double> ens = ensemble_scores(params, ds.samples[size_t(sid)].feature, ds.vocab,
                                              mask, params.cfg.tau_inv, tc);
    scores.push_back(ens[size_t(pair_id)]);
  }
  std::vector<int> order = detail::top_k(scores, k);
  std::vector<int> out;
  for (int i : order) out.push_back(corpus_ids[size_t(i)]);
  return out;
}

// primitive retrieval: corpus images ranked by s_a (attribute) or s_o
// (object) alone.
inline std::vector<int> retrieve_images_for_primitive(ModelParams& params, const Dataset& ds,
                                                      const std::vector<int>& corpus_ids,
                                                      bool is_attr, int index,
                                                      const PairMask& mask, const TextCache& tc,
                                                      int k) {
  if (k < 1) throw ContractError("retrieval: k must be >= 1");
  if (corpus_ids.empty()) throw ContractError("retrieval: empty corpus");
  std::vector<double> scores;
  for (int sid : corpus_ids) {
    BranchScores bs = branch_scores(params, ds.samples[size_t(sid)].feature, mask,
                                    params.cfg.tau_inv, tc);
    scores.push_back(is_attr ? bs.s_a[size_t(index)] : bs.s_o[size_t(index)]);
  }
  std::vector<int> order = detail::top_k(scores, k);
  std::vector<int> out;
  for (int i : order) out.push_back(corpus_ids[size_t(i)]);
  return out;
}

}  // namespace czsl

