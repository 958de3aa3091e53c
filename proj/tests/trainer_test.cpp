#include <gtest/gtest.h>

#include <cmath>

#include "czsl/trainer.hpp"
#include "test_util.hpp"

namespace czsl {
namespace {

// In-memory dataset builder for trainer tests.
struct Builder {
  Vocabulary vocab;
  EmbeddingTable words;
  std::vector<Sample> samples;
  int feat_dim;
  int word_dim;

  Builder(int m, int n, int d, int w, uint64_t seed) : feat_dim(d), word_dim(w) {
    Rng rng(seed);
    for (int a = 0; a < m; ++a) vocab.attributes.push_back("a" + std::to_string(a));
    for (int o = 0; o < n; ++o) vocab.objects.push_back("o" + std::to_string(o));
    words.dim = w;
    for (const auto& tok : vocab.attributes) words.vectors[tok] = test::random_vec(w, rng);
    for (const auto& tok : vocab.objects) words.vectors[tok] = test::random_vec(w, rng);
  }

  void seen(int a, int o) { vocab.pairs_seen.emplace_back(a, o); }
  void unseen(int a, int o) { vocab.pairs_unseen.emplace_back(a, o); }

  void train_sample(int a, int o, uint64_t seed) {
    Rng rng(seed);
    Sample s;
    s.id = "t" + std::to_string(samples.size());
    s.attr = a;
    s.obj = o;
    s.split = Split::kTrain;
    s.feature = test::random_vec(feat_dim, rng);
    samples.push_back(std::move(s));
  }

  Dataset dataset() {
    Dataset ds;
    ds.vocab = vocab;
    ds.samples = samples;
    ds.feat_dim = feat_dim;
    ds.validate_splits();
    ds.build_index();
    return ds;
  }

  ModelParams model(double tau_inv = 20.0, double dropout = 0.0, uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.feat_dim = feat_dim;
    cfg.word_dim = word_dim;
    cfg.embed = 32;  // wide enough that ReLU embeddings never go all-zero
    cfg.tau_inv = tau_inv;
    cfg.dropout = dropout;
    cfg.init_seed = seed;
    return init_model(cfg, vocab, words);
  }
};

std::vector<real> flatten(ModelParams& p) {
  std::vector<real> out;
  p.for_each_param(
      [&](const std::string&, Tensor& t) { out.insert(out.end(), t.data.begin(), t.data.end()); });
  return out;
}

TEST(Adam, ZeroGradZeroDecayLeavesParamsUnchanged) {
  Builder b(2, 2, 4, 3, 1);
  b.seen(0, 0);
  b.seen(1, 1);
  b.unseen(0, 1);
  ModelParams p = b.model();
  std::vector<real> before = flatten(p);
  AdamState st;
  std::map<std::string, Tensor> grads;
  p.for_each_param([&](const std::string& name, Tensor& t) {
    grads.emplace(name, Tensor::zeros(t.shape));
  });
  adam_step(p, grads, st, 0.1, 0.0);
  std::vector<real> after = flatten(p);
  for (size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], after[i]);
}

// Scalar simulation oracle: Adam on f(theta) = theta^2 from theta = 1.
TEST(Adam, QuadraticConvergence) {
  ModelParams p;
  p.cfg.feat_dim = 1;
  p.word_attr.push_back(Tensor::scalar(1.0f));  // lone trainable scalar
  AdamState st;
  for (int step = 0; step < 200; ++step) {
    std::map<std::string, Tensor> grads;
    grads.emplace("word_attr.0", Tensor::scalar(2.0f * p.word_attr[0].at(0)));
    adam_step(p, grads, st, 0.1, 0.0);
  }
  EXPECT_LT(std::abs(double(p.word_attr[0].at(0))), 0.05);
  EXPECT_EQ(st.step, 200);
}

TEST(Adam, StepCounterIncrementsByOne) {
  ModelParams p;
  p.cfg.feat_dim = 1;
  p.word_attr.push_back(Tensor::scalar(0.5f));
  AdamState st;
  std::map<std::string, Tensor> grads;
  grads.emplace("word_attr.0", Tensor::scalar(1.0f));
  adam_step(p, grads, st, 0.01, 0.0);
  EXPECT_EQ(st.step, 1);
  adam_step(p, grads, st, 0.01, 0.0);
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, NonFiniteGradAbortsStep) {
  ModelParams p;
  p.cfg.feat_dim = 1;
  p.word_attr.push_back(Tensor::scalar(0.5f));
  AdamState st;
  std::map<std::string, Tensor> grads;
  Tensor bad = Tensor::scalar(1.0f);
  bad.at(0) = std::numeric_limits<real>::infinity();
  grads.emplace("word_attr.0", bad);
  EXPECT_THROW(adam_step(p, grads, st, 0.01, 0.0), NumericError);
}

// Single-class vocabulary: every softmax runs over one logit, so every
// cross-entropy term is exactly zero.
TEST(BaseLoss, SingleClassVocabularyGivesZero) {
  Builder b(1, 1, 4, 3, 2);
  b.seen(0, 0);
  b.train_sample(0, 0, 10);
  Dataset ds = b.dataset();
  ModelParams p = b.model();
  TrainConfig cfg;
  cfg.adv.enabled = false;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(3);
  StepOutput out = run_train_step(p, ds, {0}, cfg, st, nullptr, nullptr, nullptr, rng, false);
  EXPECT_EQ(out.loss_base, 0.0);
  EXPECT_EQ(out.loss_total, 0.0);
}

// Untrained model with near-uniform logits: L_p concentrates near ln K.
// tau_inv = 1 keeps the random cosine logits small.
TEST(BaseLoss, UntrainedPairLossNearLogK) {
  Builder b(3, 4, 32, 8, 4);
  int k = 0;
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 4; ++o)
      if (k++ % 6 != 5)
        b.seen(a, o);
      else
        b.unseen(a, o);
  Rng seed_rng(5);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 2; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  double log_k = std::log(double(ds.vocab.pairs_seen.size()));
  for (uint64_t seed = 0; seed < 100; ++seed) {
    ModelParams p = b.model(1.0, 0.0, seed + 1);
    TrainConfig cfg;
    cfg.adv.enabled = false;
    cfg.osp.enabled = false;
    AdamState st;
    Rng rng(6);
    StepOutput out =
        run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
    EXPECT_NEAR(out.mean_lp, log_k, 0.2 * log_k) << "seed " << seed;
  }
}

// Hand-built two-pair instance evaluated against an independent
// reimplementation of the forward pass in test code.
TEST(BaseLoss, HandBuiltTwoPairOracle) {
  Builder b(2, 1, 4, 3, 7);
  b.seen(0, 0);
  b.seen(1, 0);
  b.train_sample(0, 0, 20);
  Dataset ds = b.dataset();
  ModelParams p = b.model(20.0, 0.0, 3);
  TrainConfig cfg;
  cfg.adv.enabled = false;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(8);
  StepOutput out = run_train_step(p, ds, {0}, cfg, st, nullptr, nullptr, nullptr, rng, false);

  // oracle forward, float storage with double accumulation like the engine
  auto matvec = [](const Tensor& w, const Tensor& x, const Tensor& bias) {
    Tensor y = Tensor::zeros({w.shape[0]});
    for (int i = 0; i < w.shape[0]; ++i) {
      double acc = 0;
      for (int j = 0; j < w.shape[1]; ++j) acc += double(w.at(i, j)) * double(x.at(j));
      y.at(i) = static_cast<real>(static_cast<real>(acc) + bias.at(i));
    }
    return y;
  };
  auto relu = [](Tensor x) {
    for (real& v : x.data) v = std::max(v, real(0));
    return x;
  };
  auto layernorm = [](const Tensor& x, const Tensor& gm, const Tensor& bt) {
    int d = x.shape[0];
    double mean = 0;
    for (real v : x.data) mean += double(v);
    mean /= d;
    double var = 0;
    for (real v : x.data) var += (double(v) - mean) * (double(v) - mean);
    var /= d;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    Tensor y = Tensor::zeros({d});
    for (int i = 0; i < d; ++i)
      y.at(i) = static_cast<real>(double(gm.at(i)) * (double(x.at(i)) - mean) * inv +
                                  double(bt.at(i)));
    return y;
  };
  auto mlp = [&](const MlpBlock& blk, const Tensor& x) {
    Tensor h = layernorm(relu(matvec(blk.w1, x, blk.b1)), blk.gamma, blk.beta);
    return matvec(blk.w2, h, blk.b2);
  };
  auto embed = [&](const LinearRelu& lin, const Tensor& x) { return relu(matvec(lin.w, x, lin.b)); };
  auto cosine = [](const Tensor& u, const Tensor& v) {
    double uu = 0, vv = 0, uv = 0;
    for (int i = 0; i < u.size(); ++i) {
      uu += double(u.at(i)) * double(u.at(i));
      vv += double(v.at(i)) * double(v.at(i));
      uv += double(u.at(i)) * double(v.at(i));
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
  };
  auto ce = [](const std::vector<double>& logits, int t) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0;
    for (double v : logits) denom += std::exp(v - mx);
    return -(logits[size_t(t)] - mx - std::log(denom));
  };

  const Sample& s = ds.samples[0];
  Tensor fa = mlp(p.dec_a, s.feature);
  Tensor fo = mlp(p.dec_o, s.feature);
  Tensor fcp = mlp(p.fusion, compose_word(fa, fo));  // concat + MLP
  std::vector<double> sp, scp;
  for (auto [a, o] : ds.vocab.pairs_seen) {
    Tensor wy = compose_word(p.word_attr[size_t(a)], p.word_obj[size_t(o)]);
    sp.push_back(20.0 *
                 double(static_cast<real>(cosine(embed(p.vis_p, s.feature), embed(p.txt_p, wy)))));
    scp.push_back(20.0 *
                  double(static_cast<real>(cosine(embed(p.vis_cp, fcp), embed(p.txt_cp, wy)))));
  }
  std::vector<double> sa, so;
  for (const Tensor& w : p.word_attr)
    sa.push_back(20.0 * double(static_cast<real>(cosine(embed(p.vis_a, fa), embed(p.txt_a, w)))));
  for (const Tensor& w : p.word_obj)
    so.push_back(20.0 * double(static_cast<real>(cosine(embed(p.vis_o, fo), embed(p.txt_o, w)))));
  double oracle = ce(sp, 0) + ce(sa, 0) + ce(so, 0) + ce(scp, 0);
  EXPECT_NEAR(out.loss_base, oracle, 1e-6);
}

// Null perturbation: with eps = {0} and k = 0 the adversarial terms repeat
// the clean ones and the KL vanishes.
TEST(AdvLoss, NullPerturbationDuplicatesCleanTerms) {
  Builder b(3, 3, 8, 4, 9);
  int k = 0;
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 3; ++o)
      if (k++ % 3 != 2)
        b.seen(a, o);
      else
        b.unseen(a, o);
  Rng seed_rng(10);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 3; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model(20.0, 0.1, 4);  // dropout on: masks must be shared
  TrainConfig cfg;
  cfg.adv.enabled = true;
  cfg.adv.epsilon_list = {0.0};
  cfg.adv.noise_k = 0.0;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(11);
  StepOutput out =
      run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
  double dup = out.mean_la + out.mean_lo + out.mean_lcp;
  EXPECT_NEAR(out.loss_adv, dup, 1e-6);
  EXPECT_NEAR(out.loss_total, out.loss_base + dup, 1e-6);
}

TEST(AdvLoss, NonNegative) {
  Builder b(2, 2, 8, 4, 12);
  b.seen(0, 0);
  b.seen(1, 1);
  b.seen(0, 1);
  b.unseen(1, 0);
  Rng seed_rng(13);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 2; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model();
  TrainConfig cfg;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(14);
  StepOutput out =
      run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
  EXPECT_GE(out.loss_adv, -1e-9);
}

TEST(TotalLoss, EqualsBaseWhenAdversarialDisabled) {
  Builder b(2, 2, 8, 4, 15);
  b.seen(0, 0);
  b.seen(1, 1);
  b.unseen(0, 1);
  Rng seed_rng(16);
  for (auto [a, o] : b.vocab.pairs_seen) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model();
  TrainConfig cfg;
  cfg.adv.enabled = false;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(17);
  StepOutput out =
      run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
  EXPECT_EQ(out.loss_total, out.loss_base);
  EXPECT_EQ(out.loss_adv, 0.0);
}

TEST(TotalLoss, RecomposesFromComponents) {
  Builder b(3, 3, 8, 4, 18);
  int k = 0;
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 3; ++o)
      if (k++ % 3 != 1)
        b.seen(a, o);
      else
        b.unseen(a, o);
  Rng seed_rng(19);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 2; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model();
  TrainConfig cfg;
  cfg.osp.enabled = false;
  AdamState st;
  Rng rng(20);
  StepOutput out =
      run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
  EXPECT_NEAR(out.loss_total, out.loss_base + cfg.adv_weight * out.loss_adv, 1e-7);
}

TEST(TrainEpoch, ZeroEpochsLeavesParamsUntouched) {
  Builder b(2, 2, 8, 4, 21);
  b.seen(0, 0);
  b.seen(1, 1);
  b.unseen(0, 1);
  Rng seed_rng(22);
  for (auto [a, o] : b.vocab.pairs_seen) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model();
  std::vector<real> before = flatten(p);
  TrainConfig cfg;
  cfg.epochs = 0;
  auto hist = train_model(p, ds, cfg);
  EXPECT_TRUE(hist.empty());
  std::vector<real> after = flatten(p);
  for (size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], after[i]);
}

TEST(TrainEpoch, FixedSeedGivesBitIdenticalTrajectory) {
  Builder b(3, 3, 8, 4, 23);
  int k = 0;
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 3; ++o)
      if (k++ % 3 != 0)
        b.seen(a, o);
      else
        b.unseen(a, o);
  Rng seed_rng(24);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 4; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.seed = 77;

  ModelParams p1 = b.model(20.0, 0.1, 5);
  ModelParams p2 = b.model(20.0, 0.1, 5);
  auto h1 = train_model(p1, ds, cfg);
  auto h2 = train_model(p2, ds, cfg);
  ASSERT_EQ(h1.size(), h2.size());
  for (size_t e = 0; e < h1.size(); ++e) {
    EXPECT_EQ(h1[e].mean_total, h2[e].mean_total);
    EXPECT_EQ(h1[e].mean_base, h2[e].mean_base);
  }
  std::vector<real> f1 = flatten(p1), f2 = flatten(p2);
  for (size_t i = 0; i < f1.size(); ++i) ASSERT_EQ(f1[i], f2[i]);
}

// Parameters move only inside adam_step: a loss-only pass leaves them
// bit-identical.
TEST(TrainEpoch, ParamsChangeOnlyInAdamStep) {
  Builder b(2, 2, 8, 4, 25);
  b.seen(0, 0);
  b.seen(1, 1);
  b.unseen(1, 0);
  Rng seed_rng(26);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 2; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelParams p = b.model(20.0, 0.1, 6);
  std::vector<real> before = flatten(p);
  TrainConfig cfg;
  AdamState st;
  Rng rng(27);
  run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng, false);
  std::vector<real> after = flatten(p);
  for (size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], after[i]);

  // and the full step does change them
  Rng rng2(27);
  run_train_step(p, ds, ds.train_ids, cfg, st, nullptr, nullptr, nullptr, rng2, true);
  std::vector<real> stepped = flatten(p);
  bool changed = false;
  for (size_t i = 0; i < before.size(); ++i) changed = changed || before[i] != stepped[i];
  EXPECT_TRUE(changed);
}

TEST(TrainEpoch, FrozenWordTablesStayFixed) {
  Builder b(2, 2, 8, 4, 28);
  b.seen(0, 0);
  b.seen(1, 1);
  b.unseen(0, 1);
  Rng seed_rng(29);
  for (auto [a, o] : b.vocab.pairs_seen)
    for (int i = 0; i < 2; ++i) b.train_sample(a, o, seed_rng.next_u64());
  Dataset ds = b.dataset();
  ModelConfig mc;
  mc.feat_dim = 8;
  mc.word_dim = 4;
  mc.embed = 32;
  mc.freeze_words = true;
  ModelParams p = init_model(mc, b.vocab, b.words);
  std::vector<Tensor> words_before = p.word_attr;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  train_model(p, ds, cfg);
  for (size_t i = 0; i < words_before.size(); ++i)
    for (int j = 0; j < words_before[i].size(); ++j)
      ASSERT_EQ(p.word_attr[i].at(j), words_before[i].at(j));
}

}  // namespace
}  // namespace czsl
