#include <gtest/gtest.h>

#include <set>

#include "czsl/dataio.hpp"
#include "test_util.hpp"

namespace czsl {
namespace {

using test::TempDir;

// Manifest with the UT-Zappos-like shape: 16 attrs, 12 objects, 83 seen
// train pairs, 18 test-unseen and 15 val-unseen pairs.
std::pair<Vocabulary, std::vector<Sample>> zappos_shaped() {
  Vocabulary vocab;
  for (int a = 0; a < 16; ++a) vocab.attributes.push_back("attr" + std::to_string(a));
  for (int o = 0; o < 12; ++o) vocab.objects.push_back("obj" + std::to_string(o));
  Rng rng(123);
  std::vector<int> order = rng.permutation(16 * 12);
  for (int i = 0; i < 83; ++i) vocab.pairs_seen.emplace_back(order[size_t(i)] / 12, order[size_t(i)] % 12);
  for (int i = 83; i < 101; ++i)
    vocab.pairs_unseen.emplace_back(order[size_t(i)] / 12, order[size_t(i)] % 12);
  for (int i = 101; i < 116; ++i)
    vocab.pairs_val_unseen.emplace_back(order[size_t(i)] / 12, order[size_t(i)] % 12);
  std::vector<Sample> samples;
  int counter = 0;
  auto add = [&](std::pair<int, int> p, Split split) {
    Sample s;
    s.id = "s" + std::to_string(counter++);
    s.attr = p.first;
    s.obj = p.second;
    s.split = split;
    samples.push_back(s);
  };
  for (auto p : vocab.pairs_seen) add(p, Split::kTrain);
  for (size_t i = 0; i < 18; ++i) add(vocab.pairs_seen[i], Split::kTest);
  for (auto p : vocab.pairs_unseen) add(p, Split::kTest);
  for (auto p : vocab.pairs_val_unseen) add(p, Split::kVal);
  return {vocab, samples};
}

TEST(Manifest, ZapposShapedRoundTrip) {
  TempDir dir("manifest");
  auto [vocab, samples] = zappos_shaped();
  save_manifest(dir.file("m.json"), vocab, samples);
  auto [v2, s2] = load_manifest(dir.file("m.json"));
  EXPECT_EQ(v2.num_attrs(), 16);
  EXPECT_EQ(v2.num_objects(), 12);
  EXPECT_EQ(v2.pairs_seen.size(), 83u);
  EXPECT_EQ(v2.pairs_unseen.size(), 18u);
  EXPECT_EQ(v2.pairs_val_unseen.size(), 15u);
  ASSERT_EQ(s2.size(), samples.size());
  for (size_t i = 0; i < s2.size(); ++i) {
    EXPECT_EQ(s2[i].id, samples[i].id);
    EXPECT_EQ(s2[i].attr, samples[i].attr);
    EXPECT_EQ(s2[i].obj, samples[i].obj);
    EXPECT_EQ(s2[i].split, samples[i].split);
  }
}

TEST(Manifest, MinimalInstance) {
  TempDir dir("manifest_min");
  std::ofstream(dir.file("m.json")) << R"({
    "attributes": ["red"], "objects": ["apple"],
    "pairs_seen": [["red","apple"]], "pairs_unseen": [], "pairs_val_unseen": [],
    "samples": [{"id": "x", "attr": "red", "obj": "apple", "split": "train"}]})";
  auto [vocab, samples] = load_manifest(dir.file("m.json"));
  EXPECT_EQ(vocab.num_pairs(), 1);
  EXPECT_EQ(samples.size(), 1u);
}

TEST(Manifest, TrainSampleWithUnseenPairNamesThePair) {
  TempDir dir("manifest_bad");
  std::ofstream(dir.file("m.json")) << R"({
    "attributes": ["red","green"], "objects": ["apple"],
    "pairs_seen": [["red","apple"]], "pairs_unseen": [["green","apple"]],
    "samples": [{"id": "x", "attr": "green", "obj": "apple", "split": "train"}]})";
  try {
    load_manifest(dir.file("m.json"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("green"), std::string::npos);
    EXPECT_NE(msg.find("apple"), std::string::npos);
  }
}

TEST(Manifest, UnknownTokenNamesTheSample) {
  TempDir dir("manifest_tok");
  std::ofstream(dir.file("m.json")) << R"({
    "attributes": ["red"], "objects": ["apple"],
    "pairs_seen": [["red","apple"]],
    "samples": [{"id": "weird", "attr": "blue", "obj": "apple", "split": "train"}]})";
  try {
    load_manifest(dir.file("m.json"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("weird"), std::string::npos);
  }
}

TEST(Manifest, OverlappingSeenUnseenRejected) {
  TempDir dir("manifest_ovl");
  std::ofstream(dir.file("m.json")) << R"({
    "attributes": ["red"], "objects": ["apple"],
    "pairs_seen": [["red","apple"]], "pairs_unseen": [["red","apple"]],
    "samples": []})";
  EXPECT_THROW(load_manifest(dir.file("m.json")), DataError);
}

TEST(Features, RoundTripBitIdentical) {
  TempDir dir("feat");
  Rng rng(5);
  std::vector<std::pair<std::string, Tensor>> rows;
  for (int i = 0; i < 3; ++i) rows.emplace_back("id" + std::to_string(i), test::random_vec(8, rng));
  save_features(dir.file("f.pbfv"), rows);
  auto loaded = load_features(dir.file("f.pbfv"), {"id0", "id1", "id2"});
  for (const auto& [id, t] : rows) {
    ASSERT_TRUE(loaded.count(id));
    ASSERT_EQ(loaded.at(id).size(), t.size());
    for (int j = 0; j < t.size(); ++j) EXPECT_EQ(loaded.at(id).at(j), t.at(j));
  }
}

TEST(Features, TruncatedFileRejected) {
  TempDir dir("feat_trunc");
  Rng rng(5);
  std::vector<std::pair<std::string, Tensor>> rows{{"a", test::random_vec(8, rng)}};
  save_features(dir.file("f.pbfv"), rows);
  // chop the last 4 bytes off
  std::string bytes = io::read_text_file(dir.file("f.pbfv"));
  std::ofstream(dir.file("g.pbfv"), std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  EXPECT_THROW(load_features(dir.file("g.pbfv"), {"a"}), DataError);
}

TEST(Features, MissingExpectedIdRejected) {
  TempDir dir("feat_missing");
  Rng rng(5);
  save_features(dir.file("f.pbfv"), {{"a", test::random_vec(4, rng)}});
  EXPECT_THROW(load_features(dir.file("f.pbfv"), {"a", "b"}), DataError);
}

TEST(Features, LargeRoundTripSpotChecks) {
  TempDir dir("feat_large");
  Rng rng(7);
  std::vector<std::pair<std::string, Tensor>> rows;
  for (int i = 0; i < 10000; ++i)
    rows.emplace_back("img" + std::to_string(i), test::random_vec(768, rng));
  save_features(dir.file("f.pbfv"), rows);
  std::vector<std::string> ids;
  for (const auto& [id, t] : rows) ids.push_back(id);
  auto loaded = load_features(dir.file("f.pbfv"), ids);
  EXPECT_EQ(loaded.size(), 10000u);
  for (int idx : {0, 1234, 4999, 7777, 9999}) {
    const auto& [id, t] = rows[size_t(idx)];
    for (int j = 0; j < t.size(); ++j) ASSERT_EQ(loaded.at(id).at(j), t.at(j));
  }
}

TEST(Embeddings, BasicLoad) {
  TempDir dir("emb");
  std::ofstream(dir.file("e.txt")) << "red 0.1 0.2\napple 0.3 0.4\n";
  EmbeddingTable t = load_embeddings(dir.file("e.txt"), {"red", "apple"});
  EXPECT_EQ(t.dim, 2);
  EXPECT_FLOAT_EQ(t.get("red").at(0), 0.1f);
  EXPECT_FLOAT_EQ(t.get("apple").at(1), 0.4f);
}

TEST(Embeddings, DottedTokenAveragesParts) {
  TempDir dir("emb_avg");
  std::ofstream(dir.file("e.txt")) << "faux 1.0 3.0\nleather 2.0 5.0\n";
  EmbeddingTable t = load_embeddings(dir.file("e.txt"), {"Faux.Leather"});
  EXPECT_FLOAT_EQ(t.get("Faux.Leather").at(0), 1.5f);
  EXPECT_FLOAT_EQ(t.get("Faux.Leather").at(1), 4.0f);
}

TEST(Embeddings, UnresolvableTokenListed) {
  TempDir dir("emb_missing");
  std::ofstream(dir.file("e.txt")) << "red 0.1 0.2\n";
  try {
    load_embeddings(dir.file("e.txt"), {"red", "zzz"});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
  }
}

TEST(Synth, PairCounts) {
  SynthConfig cfg;
  cfg.num_attrs = 8;
  cfg.num_objects = 10;
  cfg.seen_fraction = 0.75;
  cfg.samples_per_pair = 2;
  SynthData sd = synth_generate(cfg);
  EXPECT_EQ(sd.dataset.vocab.pairs_seen.size(), 60u);
  EXPECT_EQ(sd.dataset.vocab.pairs_unseen.size(), 20u);
}

// With sigma = 0 and gamma = 0 the features are rotated concatenations;
// inverting the known rotation must recover the latents exactly.
TEST(Synth, NoiselessIdentifiability) {
  SynthConfig cfg;
  cfg.sigma = 0.0;
  cfg.gamma = 0.0;
  cfg.samples_per_pair = 1;
  SynthData sd = synth_generate(cfg);
  int half = cfg.feat_dim / 2;
  double max_err = 0.0;
  for (const Sample& s : sd.dataset.samples) {
    // least squares for an orthogonal map is just the transpose
    std::vector<double> rec(size_t(cfg.feat_dim), 0.0);
    for (int i = 0; i < cfg.feat_dim; ++i)
      for (int j = 0; j < cfg.feat_dim; ++j)
        rec[size_t(i)] += double(sd.truth.rotation.at(j, i)) * double(s.feature.at(j));
    for (int i = 0; i < half; ++i) {
      max_err = std::max(max_err, std::abs(rec[size_t(i)] -
                                           double(sd.truth.attr_latents[size_t(s.attr)].at(i))));
      max_err = std::max(max_err, std::abs(rec[size_t(half + i)] -
                                           double(sd.truth.obj_latents[size_t(s.obj)].at(i))));
    }
  }
  EXPECT_LT(max_err, 1e-5);
}

TEST(Synth, Deterministic) {
  SynthConfig cfg;
  cfg.samples_per_pair = 3;
  SynthData a = synth_generate(cfg);
  SynthData b = synth_generate(cfg);
  ASSERT_EQ(a.dataset.samples.size(), b.dataset.samples.size());
  for (size_t i = 0; i < a.dataset.samples.size(); ++i) {
    EXPECT_EQ(a.dataset.samples[i].id, b.dataset.samples[i].id);
    for (int j = 0; j < a.dataset.samples[i].feature.size(); ++j)
      ASSERT_EQ(a.dataset.samples[i].feature.at(j), b.dataset.samples[i].feature.at(j));
  }
}

TEST(Synth, NoUnseenPairsRejected) {
  SynthConfig cfg;
  cfg.num_attrs = 2;
  cfg.num_objects = 2;
  cfg.seen_fraction = 0.999;  // rounds to all four pairs seen
  EXPECT_THROW(synth_generate(cfg), ContractError);
}

TEST(Synth, FullRoundTripThroughFiles) {
  TempDir dir("synth_rt");
  SynthConfig cfg;
  cfg.samples_per_pair = 2;
  SynthData sd = synth_generate(cfg);
  save_synth(sd, dir.str());
  Dataset ds = load_dataset(dir.file("manifest.json"), dir.file("features.pbfv"));
  ASSERT_EQ(ds.samples.size(), sd.dataset.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i)
    for (int j = 0; j < ds.feat_dim; ++j)
      ASSERT_EQ(ds.samples[i].feature.at(j), sd.dataset.samples[i].feature.at(j));
  EXPECT_EQ(ds.vocab.pairs_seen, sd.dataset.vocab.pairs_seen);
  EXPECT_EQ(ds.vocab.pairs_unseen, sd.dataset.vocab.pairs_unseen);

  // embeddings round-trip within text precision
  std::vector<std::string> tokens = ds.vocab.attributes;
  tokens.insert(tokens.end(), ds.vocab.objects.begin(), ds.vocab.objects.end());
  EmbeddingTable emb = load_embeddings(dir.file("embeddings.txt"), tokens);
  EXPECT_EQ(emb.dim, sd.embeddings.dim);
  for (const std::string& tok : tokens)
    for (int j = 0; j < emb.dim; ++j)
      EXPECT_NEAR(emb.get(tok).at(j), sd.embeddings.get(tok).at(j), 1e-6);
}

// Split soundness is asserted on every load.
TEST(Dataset, SplitInvariantsEnforcedOnLoad) {
  TempDir dir("split_check");
  auto [vocab, samples] = zappos_shaped();
  save_manifest(dir.file("m.json"), vocab, samples);
  std::vector<std::pair<std::string, Tensor>> rows;
  Rng rng(3);
  for (const Sample& s : samples) rows.emplace_back(s.id, test::random_vec(4, rng));
  save_features(dir.file("f.pbfv"), rows);
  Dataset ds = load_dataset(dir.file("m.json"), dir.file("f.pbfv"));
  std::set<int> unseen;
  for (auto [a, o] : ds.vocab.pairs_unseen) unseen.insert(ds.vocab.pair_id(a, o));
  for (int sid : ds.train_ids) {
    const Sample& s = ds.samples[size_t(sid)];
    EXPECT_FALSE(unseen.count(ds.vocab.pair_id(s.attr, s.obj)));
  }
}

}  // namespace
}  // namespace czsl
