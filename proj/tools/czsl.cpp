// Command-line front end: synth / train / eval / retrieve / gradcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "czsl/config.hpp"
#include "czsl/dataio.hpp"
#include "czsl/eval.hpp"
#include "czsl/gradcheck.hpp"
#include "czsl/model.hpp"
#include "czsl/trainer.hpp"
#include "czsl/version.hpp"

namespace {

using namespace czsl;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << content;
}

// Written before any long computation; re-running with the same manifest
// reproduces the outputs bit-exactly.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const nlohmann::json& config) {
  nlohmann::json m;
  m["command"] = command;
  m["engine_version"] = kEngineVersion;
  m["out_dir"] = out_dir;
  m["config"] = config;
  write_text(out_dir + "/run_manifest.json", m.dump(2) + "\n");
}

Dataset load_data(const EngineConfig& cfg) {
  if (cfg.data.manifest.empty() || cfg.data.features.empty())
    throw ConfigError("data.manifest and data.features must be set");
  return load_dataset(cfg.data.manifest, cfg.data.features);
}

EmbeddingTable load_words(const EngineConfig& cfg, const Vocabulary& vocab) {
  if (cfg.data.embeddings.empty()) throw ConfigError("data.embeddings must be set");
  std::vector<std::string> tokens = vocab.attributes;
  tokens.insert(tokens.end(), vocab.objects.begin(), vocab.objects.end());
  return load_embeddings(cfg.data.embeddings, tokens);
}

ModelConfig model_config_from(const EngineConfig& cfg, const Dataset& ds, int word_dim) {
  ModelConfig mc;
  mc.feat_dim = ds.feat_dim;
  mc.word_dim = word_dim;
  mc.hidden = cfg.model.hidden;
  mc.embed = cfg.model.embed;
  mc.dropout = cfg.model.dropout;
  mc.tau_inv = cfg.model.tau_inv;
  mc.freeze_words = cfg.model.freeze_words;
  mc.init_seed = cfg.train.seed;
  mc.num_attrs = ds.vocab.num_attrs();
  mc.num_objects = ds.vocab.num_objects();
  return mc;
}

int cmd_synth(const std::string& out_dir, const SynthConfig& sc) {
  std::filesystem::create_directories(out_dir);
  SynthData sd = synth_generate(sc);
  save_synth(sd, out_dir);

  // ready-to-run config pointing at the generated files
  EngineConfig cfg;
  cfg.data.manifest = out_dir + "/manifest.json";
  cfg.data.features = out_dir + "/features.pbfv";
  cfg.data.embeddings = out_dir + "/embeddings.txt";
  write_text(out_dir + "/config.json", config_to_json(cfg).dump(2) + "\n");

  std::printf(
      "wrote synthetic dataset to %s: %d attrs, %d objects, %zu seen / %zu unseen pairs, "
      "%zu samples\n",
      out_dir.c_str(), sd.dataset.vocab.num_attrs(), sd.dataset.vocab.num_objects(),
      sd.dataset.vocab.pairs_seen.size(), sd.dataset.vocab.pairs_unseen.size(),
      sd.dataset.samples.size());
  return 0;
}

int cmd_train(const EngineConfig& cfg, const nlohmann::json& resolved,
              const std::string& out_dir) {
  cfg.train.validate();
  Dataset ds = load_data(cfg);
  EmbeddingTable words = load_words(cfg, ds.vocab);
  ModelParams model = init_model(model_config_from(cfg, ds, words.dim), ds.vocab, words);

  std::filesystem::create_directories(out_dir);
  write_run_manifest(out_dir, "train", resolved);
  std::string echo = resolved.dump();

  std::ofstream stats(out_dir + "/stats.jsonl", std::ios::binary);
  if (!stats) throw DataError("cannot write " + out_dir + "/stats.jsonl");

  double best_val_auc = -1.0;
  auto on_epoch = [&](int epoch, const EpochStats& st, ModelParams& m) {
    nlohmann::json line;
    line["epoch"] = epoch;
    line["loss_total"] = st.mean_total;
    line["loss_base"] = st.mean_base;
    line["loss_adv"] = st.mean_adv;
    line["acc_pair"] = st.acc_pair;
    line["acc_attr"] = st.acc_attr;
    line["acc_obj"] = st.acc_obj;
    line["n_virtual"] = st.n_virtual;
    line["osp_skipped"] = st.osp_skipped;
    bool at_ckpt = (epoch + 1) % cfg.train.ckpt_every == 0 || epoch + 1 == cfg.train.epochs;
    if (at_ckpt) {
      char name[64];
      std::snprintf(name, sizeof name, "/ckpt_epoch%04d.ckpt", epoch + 1);
      save_checkpoint(out_dir + name, m, echo);
      if (cfg.track_val_auc && !ds.val_ids.empty()) {
        EvalReport val = evaluate(m, ds, World::kClosed, Split::kVal, cfg.eval.grid_size);
        line["val_auc"] = val.auc;
        if (val.auc > best_val_auc) {
          best_val_auc = val.auc;
          save_checkpoint(out_dir + "/ckpt_best.ckpt", m, echo);
        }
      }
    }
    stats << line.dump() << "\n";
    stats.flush();
    if ((epoch + 1) % 10 == 0 || epoch + 1 == cfg.train.epochs)
      std::printf("epoch %d/%d loss %.4f (base %.4f adv %.4f) train pair acc %.3f\n", epoch + 1,
                  cfg.train.epochs, st.mean_total, st.mean_base, st.mean_adv, st.acc_pair);
  };

  train_model(model, ds, cfg.train, on_epoch);
  save_checkpoint(out_dir + "/ckpt_final.ckpt", model, echo);
  std::printf("training done; final checkpoint at %s/ckpt_final.ckpt\n", out_dir.c_str());
  return 0;
}

int cmd_eval(const EngineConfig& cfg, const std::string& checkpoint, const std::string& world_str,
             const std::string& split_str, const std::string& out_dir, bool curve_csv) {
  auto [model, echo] = load_checkpoint(checkpoint);
  Dataset ds = load_data(cfg);
  if (model.cfg.feat_dim != ds.feat_dim)
    throw DataError("feature dim mismatch: checkpoint expects D=" +
                    std::to_string(model.cfg.feat_dim) + ", data has D=" +
                    std::to_string(ds.feat_dim));
  if (model.cfg.num_attrs != ds.vocab.num_attrs() ||
      model.cfg.num_objects != ds.vocab.num_objects())
    throw DataError("vocabulary mismatch between checkpoint and manifest");

  World world = world_str == "open" ? World::kOpen : World::kClosed;
  Split split = split_str == "val" ? Split::kVal : Split::kTest;
  EvalReport rep = evaluate(model, ds, world, split, cfg.eval.grid_size);

  std::filesystem::create_directories(out_dir);
  nlohmann::json out = rep.to_json(&ds.vocab);
  out["world"] = world_name(world);
  out["split"] = split_str;
  out["checkpoint"] = checkpoint;
  out["engine_version"] = kEngineVersion;
  out["config_echo"] = echo;
  write_text(out_dir + "/report.json", out.dump(2) + "\n");
  if (curve_csv) {
    std::string csv = "bias,seen,unseen\n";
    for (size_t i = 0; i < rep.bias_grid.size(); ++i)
      csv += std::to_string(rep.bias_grid[i]) + "," + std::to_string(rep.seen_curve[i]) + "," +
             std::to_string(rep.unseen_curve[i]) + "\n";
    write_text(out_dir + "/curve.csv", csv);
  }
  std::printf("%-8s %-8s %-8s %-8s %-8s %-8s\n", "AUC", "HM", "Seen", "Unseen", "Attr", "Obj");
  std::printf("%-8.4f %-8.4f %-8.4f %-8.4f %-8.4f %-8.4f\n", rep.auc, rep.best_hm, rep.best_seen,
              rep.best_unseen, rep.best_attr, rep.best_obj);
  std::printf("report written to %s/report.json\n", out_dir.c_str());
  return 0;
}

int cmd_retrieve(const EngineConfig& cfg, const std::string& checkpoint,
                 const std::string& direction, int k, int queries, uint64_t seed) {
  if (k < 1) throw ConfigError("--k must be >= 1");
  auto [model, echo] = load_checkpoint(checkpoint);
  Dataset ds = load_data(cfg);
  if (model.cfg.feat_dim != ds.feat_dim)
    throw DataError("feature dim mismatch: checkpoint expects D=" +
                    std::to_string(model.cfg.feat_dim) + ", data has D=" +
                    std::to_string(ds.feat_dim));
  PairMask mask = candidate_set(ds, World::kClosed, Split::kTest);
  TextCache tc = build_text_cache(model);
  Rng rng(seed);
  const std::vector<int>& corpus = ds.test_ids.empty() ? ds.train_ids : ds.test_ids;
  if (corpus.empty()) throw DataError("retrieve: dataset has no usable corpus samples");

  auto pair_name = [&](int pid) {
    auto [a, o] = ds.vocab.pair_of(pid);
    return ds.vocab.attributes[size_t(a)] + " " + ds.vocab.objects[size_t(o)];
  };

  if (direction == "image2text") {
    for (int q = 0; q < queries; ++q) {
      int sid = corpus[size_t(rng.uniform_int(int64_t(corpus.size())))];
      const Sample& s = ds.samples[size_t(sid)];
      auto top = retrieve_pairs_for_image(model, s.feature, ds.vocab, mask, tc, k);
      std::printf("query %s [true: %s]\n", s.id.c_str(),
                  pair_name(ds.vocab.pair_id(s.attr, s.obj)).c_str());
      for (size_t r = 0; r < top.size(); ++r) {
        bool hit = top[r] == ds.vocab.pair_id(s.attr, s.obj);
        std::printf("  %zu) %s%s\n", r + 1, pair_name(top[r]).c_str(), hit ? "  <-- correct" : "");
      }
    }
  } else if (direction == "text2image") {
    for (int q = 0; q < queries; ++q) {
      int pid = mask.candidates[size_t(rng.uniform_int(int64_t(mask.candidates.size())))];
      auto top = retrieve_images_for_pair(model, ds, corpus, pid, mask, tc, k);
      std::printf("query (%s)\n", pair_name(pid).c_str());
      for (size_t r = 0; r < top.size(); ++r) {
        const Sample& s = ds.samples[size_t(top[r])];
        bool hit = ds.vocab.pair_id(s.attr, s.obj) == pid;
        std::printf("  %zu) %s [%s]%s\n", r + 1, s.id.c_str(),
                    pair_name(ds.vocab.pair_id(s.attr, s.obj)).c_str(), hit ? "  <-- correct" : "");
      }
    }
  } else if (direction == "primitive") {
    for (int q = 0; q < queries; ++q) {
      bool is_attr = q % 2 == 0;
      int idx = static_cast<int>(
          rng.uniform_int(is_attr ? ds.vocab.num_attrs() : ds.vocab.num_objects()));
      auto top = retrieve_images_for_primitive(model, ds, corpus, is_attr, idx, mask, tc, k);
      std::printf("query %s %s\n", is_attr ? "attribute" : "object",
                  (is_attr ? ds.vocab.attributes[size_t(idx)] : ds.vocab.objects[size_t(idx)])
                      .c_str());
      for (size_t r = 0; r < top.size(); ++r) {
        const Sample& s = ds.samples[size_t(top[r])];
        bool hit = is_attr ? s.attr == idx : s.obj == idx;
        std::printf("  %zu) %s [%s]%s\n", r + 1, s.id.c_str(),
                    pair_name(ds.vocab.pair_id(s.attr, s.obj)).c_str(), hit ? "  <-- correct" : "");
      }
    }
  } else {
    throw ConfigError("unknown retrieval direction '" + direction +
                      "' (use image2text, text2image or primitive)");
  }
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  GradCheckReport rep = run_gradcheck(seed);
  for (const auto& e : rep.entries)
    std::printf("%-32s rel_err %.3e  %s\n", e.name.c_str(), e.rel_error, e.pass ? "ok" : "FAIL");
  if (!rep.all_pass()) {
    std::fprintf(stderr, "gradient check failed\n");
    return kExitNumeric;
  }
  std::printf("all %zu gradient checks passed (tolerance %.1e)\n", rep.entries.size(),
              rep.tolerance);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-space compositional zero-shot learning engine"};
  app.set_version_flag("--version", kEngineVersion);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic compositional dataset");
  SynthConfig sc;
  std::string synth_out = "synth_data";
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--m", sc.num_attrs, "number of attributes");
  synth->add_option("--n", sc.num_objects, "number of objects");
  synth->add_option("--dim", sc.feat_dim, "feature dimension (even)");
  synth->add_option("--word-dim", sc.word_dim, "word embedding dimension");
  synth->add_option("--seen-fraction", sc.seen_fraction, "fraction of pairs marked seen");
  synth->add_option("--samples-per-pair", sc.samples_per_pair, "train samples per seen pair");
  synth->add_option("--sigma", sc.sigma, "feature noise level");
  synth->add_option("--gamma", sc.gamma, "attribute-object interaction strength");
  synth->add_option("--seed", sc.seed, "generator seed");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config, train_out = "run";
  std::vector<std::string> train_sets;
  train->add_option("--config", train_config, "config file (JSON)")->required();
  train->add_option("--set", train_sets, "dotted-path config override, e.g. train.epochs=1");
  train->add_option("--out", train_out, "output directory");
  bool no_adv = false, no_osp = false;
  train->add_flag("--no-adv", no_adv, "disable the adversarial branch (ablation)");
  train->add_flag("--no-osp", no_osp, "disable similarity-guided oversampling (ablation)");
  uint64_t train_seed = 0;
  auto* seed_opt = train->add_option("--seed", train_seed, "override train.seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_config, eval_ckpt, eval_world = "closed", eval_split = "test",
              eval_out = "eval";
  std::vector<std::string> eval_sets;
  bool curve_csv = false;
  eval_cmd->add_option("--config", eval_config, "config file (JSON)")->required();
  eval_cmd->add_option("--set", eval_sets, "dotted-path config override");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--world", eval_world, "closed or open")
      ->check(CLI::IsMember({"closed", "open"}));
  eval_cmd->add_option("--split", eval_split, "test or val")
      ->check(CLI::IsMember({"test", "val"}));
  eval_cmd->add_option("--out", eval_out, "output directory");
  eval_cmd->add_flag("--curve-csv", curve_csv, "also write the calibration curve as CSV");

  // retrieve
  auto* retr = app.add_subcommand("retrieve", "top-k retrieval tables");
  std::string retr_config, retr_ckpt, retr_dir = "image2text";
  std::vector<std::string> retr_sets;
  int retr_k = 3, retr_queries = 5;
  uint64_t retr_seed = 1;
  retr->add_option("--config", retr_config, "config file (JSON)")->required();
  retr->add_option("--set", retr_sets, "dotted-path config override");
  retr->add_option("--checkpoint", retr_ckpt, "checkpoint file")->required();
  retr->add_option("--direction", retr_dir, "image2text, text2image or primitive");
  retr->add_option("--k", retr_k, "results per query");
  retr->add_option("--queries", retr_queries, "number of queries");
  retr->add_option("--seed", retr_seed, "query sampling seed");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  uint64_t gc_seed = 1;
  gc->add_option("--seed", gc_seed, "random seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_out, sc);
    if (train->parsed()) {
      nlohmann::json resolved = load_config_json(train_config);
      for (const std::string& ov : train_sets) apply_override(resolved, ov);
      if (seed_opt->count() > 0) resolved["train"]["seed"] = train_seed;
      if (no_adv) resolved["adv"]["enabled"] = false;
      if (no_osp) resolved["osp"]["enabled"] = false;
      return cmd_train(config_from_json(resolved), resolved, train_out);
    }
    if (eval_cmd->parsed())
      return cmd_eval(resolve_config(eval_config, eval_sets), eval_ckpt, eval_world, eval_split,
                      eval_out, curve_csv);
    if (retr->parsed())
      return cmd_retrieve(resolve_config(retr_config, retr_sets), retr_ckpt, retr_dir, retr_k,
                          retr_queries, retr_seed);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
