#include <gtest/gtest.h>

#include <cmath>

#include "czsl/dataio.hpp"
#include "czsl/sampler.hpp"
#include "test_util.hpp"

namespace czsl {
namespace {

// independent softmax oracle used throughout
std::vector<double> softmax_oracle(const std::vector<double>& logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double denom = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

FitTracker tracker_with_accs(const std::vector<double>& accs) {
  FitTracker t(static_cast<int>(accs.size()));
  for (size_t i = 0; i < accs.size(); ++i) {
    int denom = 1000;
    int hits = static_cast<int>(std::lround(accs[i] * denom));
    for (int k = 0; k < denom; ++k) t.record(static_cast<int>(i), k < hits);
  }
  t.finish_epoch();
  return t;
}

TEST(OversampleFrequencies, EqualAccuracyIsUniform) {
  FitTracker t = tracker_with_accs({0.4, 0.4, 0.4});
  auto f = oversample_frequencies(t);
  for (double v : f) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(OversampleFrequencies, DirectSoftmaxOracle) {
  FitTracker t = tracker_with_accs({0.0, 1.0});
  auto f = oversample_frequencies(t, 0.0);
  EXPECT_NEAR(f[0], 0.7310585786, 1e-9);
  EXPECT_NEAR(f[1], 0.2689414214, 1e-9);
}

TEST(OversampleFrequencies, AlphaShiftInvariance) {
  FitTracker t = tracker_with_accs({0.1, 0.5, 0.9, 0.3});
  auto f0 = oversample_frequencies(t, 0.0);
  auto f5 = oversample_frequencies(t, 5.0);
  for (size_t i = 0; i < f0.size(); ++i) EXPECT_NEAR(f0[i], f5[i], 1e-12);
}

TEST(OversampleFrequencies, SumsToOne) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> accs(static_cast<size_t>(2 + rng.uniform_int(20)));
    for (double& a : accs) a = rng.uniform();
    FitTracker t = tracker_with_accs(accs);
    auto f = oversample_frequencies(t);
    double s = 0;
    for (double v : f) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
    // independent oracle: softmax of (alpha - acc) with alpha = 0
    std::vector<double> logits;
    for (size_t i = 0; i < accs.size(); ++i) logits.push_back(-t.acc(static_cast<int>(i)));
    auto oracle = softmax_oracle(logits);
    for (size_t i = 0; i < f.size(); ++i) ASSERT_NEAR(f[i], oracle[i], 1e-9);
  }
}

TEST(OversampleFrequencies, UnobservedPairsDefaultToZeroAccuracy) {
  FitTracker t(3);
  t.record(0, true);
  t.finish_epoch();
  EXPECT_EQ(t.acc(0), 1.0);
  EXPECT_EQ(t.acc(1), 0.0);
  EXPECT_EQ(t.acc(2), 0.0);
  auto f = oversample_frequencies(t);
  EXPECT_GT(f[1], f[0]);  // underfit pairs sampled more
  EXPECT_EQ(f[1], f[2]);
}

TEST(SimilarityMap, IdenticalVectorsScoreOne) {
  Rng rng(2);
  Tensor v = test::random_vec(6, rng);
  SimilarityMap sm = similarity_map({v, v});
  EXPECT_NEAR(sm.at(0, 1), 1.0, 1e-6);
}

TEST(SimilarityMap, OrthogonalVectorsScoreZero) {
  SimilarityMap sm = similarity_map({Tensor::vec({1, 0}), Tensor::vec({0, 1})});
  EXPECT_NEAR(sm.at(0, 1), 0.0, 1e-12);
}

TEST(SimilarityMap, MatchesBruteForceCosineLoop) {
  Rng rng(3);
  std::vector<Tensor> vecs;
  for (int i = 0; i < 4; ++i) vecs.push_back(test::random_vec(300, rng));
  SimilarityMap sm = similarity_map(vecs);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double uu = 0, vv = 0, uv = 0;
      for (int k = 0; k < 300; ++k) {
        uu += double(vecs[size_t(i)].at(k)) * double(vecs[size_t(i)].at(k));
        vv += double(vecs[size_t(j)].at(k)) * double(vecs[size_t(j)].at(k));
        uv += double(vecs[size_t(i)].at(k)) * double(vecs[size_t(j)].at(k));
      }
      EXPECT_NEAR(sm.at(i, j), uv / std::sqrt(uu * vv), 1e-6);
    }
}

TEST(SimilarityMap, SymmetryAndUnitDiagonalAsserted) {
  Rng rng(4);
  std::vector<Tensor> vecs;
  for (int i = 0; i < 7; ++i) vecs.push_back(test::random_vec(12, rng));
  SimilarityMap sm = similarity_map(vecs);
  for (int i = 0; i < 7; ++i) {
    EXPECT_NEAR(sm.at(i, i), 1.0, 1e-6);
    for (int j = 0; j < 7; ++j) EXPECT_NEAR(sm.at(i, j), sm.at(j, i), 1e-6);
  }
}

TEST(SimilarityMap, ZeroNormVectorNamesObject) {
  try {
    similarity_map({Tensor::vec({1, 0}), Tensor::vec({0, 0})}, {"good", "bad"});
    FAIL() << "expected DegenerateInputError";
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
}

TEST(DonorDistribution, SingleEligibleDonorTakesAll) {
  SimilarityMap sm = similarity_map({Tensor::vec({1, 0}), Tensor::vec({0.5f, 0.5f})});
  auto p = donor_distribution(sm, 0, {0, 1});
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 1.0, 1e-12);
}

TEST(DonorDistribution, DirectSoftmaxOracle) {
  // two donors with similarities [1, 0] to the target
  SimilarityMap sm;
  sm.n = 2;
  sm.s = {1.0, 0.0, 0.0, 1.0};
  auto p = donor_distribution(sm, 0, {1, 1});
  EXPECT_NEAR(p[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-9);
  EXPECT_NEAR(p[1], 1.0 / (std::exp(1.0) + 1.0), 1e-9);
  EXPECT_NEAR(p[0], 0.7310585786, 1e-9);
  EXPECT_NEAR(p[1], 0.2689414214, 1e-9);
}

TEST(DonorDistribution, SelfIsMaximalWhenEligible) {
  Rng rng(5);
  std::vector<Tensor> vecs;
  for (int i = 0; i < 5; ++i) vecs.push_back(test::random_vec(16, rng));
  SimilarityMap sm = similarity_map(vecs);
  std::vector<char> all(5, 1);
  auto p = donor_distribution(sm, 2, all);
  for (int j = 0; j < 5; ++j) EXPECT_GE(p[2], p[size_t(j)]);
}

TEST(DonorDistribution, EmptyEligibleSetRejected) {
  SimilarityMap sm = similarity_map({Tensor::vec({1, 0}), Tensor::vec({0, 1})});
  EXPECT_THROW(donor_distribution(sm, 0, {0, 0}), ContractError);
}

// Dataset where attribute a0 only appears with object o0: targeting
// (a0, o0) must fall back to self-resampling.
TEST(PlanVirtualBatch, DegenerateSelfResampling) {
  SynthConfig cfg;
  cfg.num_attrs = 2;
  cfg.num_objects = 2;
  cfg.samples_per_pair = 3;
  cfg.seen_fraction = 0.75;
  SynthData sd = synth_generate(cfg);
  const Dataset& ds = sd.dataset;
  // find an attribute whose train images all share one object
  int attr = -1, only_obj = -1;
  for (int a = 0; a < 2; ++a)
    if (ds.objects_with_attr[size_t(a)].size() == 1) {
      attr = a;
      only_obj = *ds.objects_with_attr[size_t(a)].begin();
    }
  if (attr < 0) GTEST_SKIP() << "split left no degenerate attribute";
  int k = -1;
  for (size_t i = 0; i < ds.vocab.pairs_seen.size(); ++i)
    if (ds.vocab.pairs_seen[i].first == attr) k = static_cast<int>(i);
  ASSERT_GE(k, 0);
  std::vector<double> freq(ds.vocab.pairs_seen.size(), 0.0);
  freq[size_t(k)] = 1.0;
  std::vector<Tensor> obj_vecs;
  for (const std::string& tok : ds.vocab.objects) obj_vecs.push_back(sd.embeddings.get(tok));
  SimilarityMap sm = similarity_map(obj_vecs);
  Rng rng(9);
  VirtualPlan plan = plan_virtual_batch(20, freq, ds, sm, rng);
  for (const VirtualDraw& d : plan.draws) EXPECT_EQ(d.donor_obj, only_obj);
}

TEST(PlanVirtualBatch, ZeroBudgetIsEmpty) {
  SynthConfig cfg;
  cfg.samples_per_pair = 2;
  SynthData sd = synth_generate(cfg);
  std::vector<double> freq(sd.dataset.vocab.pairs_seen.size(),
                           1.0 / double(sd.dataset.vocab.pairs_seen.size()));
  std::vector<Tensor> obj_vecs;
  for (const std::string& tok : sd.dataset.vocab.objects)
    obj_vecs.push_back(sd.embeddings.get(tok));
  SimilarityMap sm = similarity_map(obj_vecs);
  Rng rng(10);
  VirtualPlan plan = plan_virtual_batch(0, freq, sd.dataset, sm, rng);
  EXPECT_TRUE(plan.draws.empty());
  EXPECT_EQ(plan.skipped, 0);
}

// Donor-object draw statistics must match the declared distribution.
TEST(PlanVirtualBatch, DonorFrequenciesMatchDistribution) {
  SynthConfig cfg;
  cfg.num_attrs = 4;
  cfg.num_objects = 6;
  cfg.samples_per_pair = 2;
  cfg.seen_fraction = 0.8;
  SynthData sd = synth_generate(cfg);
  const Dataset& ds = sd.dataset;
  std::vector<Tensor> obj_vecs;
  for (const std::string& tok : ds.vocab.objects) obj_vecs.push_back(sd.embeddings.get(tok));
  SimilarityMap sm = similarity_map(obj_vecs);

  int k = 0;  // fixed target pair
  auto [a, o] = ds.vocab.pairs_seen[size_t(k)];
  std::vector<double> freq(ds.vocab.pairs_seen.size(), 0.0);
  freq[size_t(k)] = 1.0;
  std::vector<char> eligible(size_t(ds.vocab.num_objects()), 0);
  for (int obj : ds.objects_with_attr[size_t(a)]) eligible[size_t(obj)] = 1;
  std::vector<double> expect = donor_distribution(sm, o, eligible);

  Rng rng(11);
  VirtualPlan plan = plan_virtual_batch(1000, freq, ds, sm, rng);
  ASSERT_EQ(plan.draws.size(), 1000u);
  std::vector<double> observed(size_t(ds.vocab.num_objects()), 0.0);
  for (const VirtualDraw& d : plan.draws) observed[size_t(d.donor_obj)] += 1.0 / 1000.0;
  double tv = 0;
  for (size_t i = 0; i < observed.size(); ++i) tv += std::abs(observed[i] - expect[i]);
  EXPECT_LT(tv / 2.0, 0.05);
}

// Label soundness: the attribute label comes from the donor image and the
// object label from the object-source image.
TEST(PlanVirtualBatch, LabelSoundness) {
  SynthConfig cfg;
  cfg.samples_per_pair = 3;
  SynthData sd = synth_generate(cfg);
  const Dataset& ds = sd.dataset;
  std::vector<Tensor> obj_vecs;
  for (const std::string& tok : ds.vocab.objects) obj_vecs.push_back(sd.embeddings.get(tok));
  SimilarityMap sm = similarity_map(obj_vecs);
  FitTracker t(static_cast<int>(ds.vocab.pairs_seen.size()));
  t.finish_epoch();
  auto freq = oversample_frequencies(t);
  Rng rng(12);
  VirtualPlan plan = plan_virtual_batch(500, freq, ds, sm, rng);
  for (const VirtualDraw& d : plan.draws) {
    EXPECT_EQ(ds.samples[size_t(d.attr_sample)].attr, d.attr);
    EXPECT_EQ(ds.samples[size_t(d.attr_sample)].obj, d.donor_obj);
    EXPECT_EQ(ds.samples[size_t(d.obj_sample)].obj, d.obj);
    EXPECT_EQ(ds.samples[size_t(d.attr_sample)].split, Split::kTrain);
    EXPECT_EQ(ds.samples[size_t(d.obj_sample)].split, Split::kTrain);
  }
}

}  // namespace
}  // namespace czsl
