#pragma once

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "czsl/errors.hpp"
#include "czsl/io_util.hpp"
#include "czsl/rng.hpp"
#include "czsl/tensor.hpp"

namespace czsl {

enum class Split : uint8_t { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split tag: " + s);
}

// Attribute/object token lists plus the seen/unseen pair structure.
// Indices follow declaration order in the manifest.
struct Vocabulary {
  std::vector<std::string> attributes;
  std::vector<std::string> objects;
  std::vector<std::pair<int, int>> pairs_seen;
  std::vector<std::pair<int, int>> pairs_unseen;      // test-time unseen pairs
  std::vector<std::pair<int, int>> pairs_val_unseen;  // unseen pairs used only in validation

  int num_attrs() const { return static_cast<int>(attributes.size()); }
  int num_objects() const { return static_cast<int>(objects.size()); }
  int num_pairs() const { return num_attrs() * num_objects(); }

  // Dense id over the full attribute x object grid.
  int pair_id(int a, int o) const { return a * num_objects() + o; }
  std::pair<int, int> pair_of(int pid) const { return {pid / num_objects(), pid % num_objects()}; }

  int attr_index(const std::string& tok) const { return find(attributes, tok); }
  int object_index(const std::string& tok) const { return find(objects, tok); }

  bool is_seen(int a, int o) const { return seen_set().count(pair_id(a, o)) > 0; }

  const std::set<int>& seen_set() const {
    if (seen_ids_.empty() && !pairs_seen.empty())
      for (auto [a, o] : pairs_seen) seen_ids_.insert(pair_id(a, o));
    return seen_ids_;
  }

  void validate() const {
    std::set<int> seen, unseen;
    for (auto [a, o] : pairs_seen) {
      check_pair(a, o);
      seen.insert(pair_id(a, o));
    }
    for (auto [a, o] : pairs_unseen) {
      check_pair(a, o);
      unseen.insert(pair_id(a, o));
    }
    for (auto [a, o] : pairs_val_unseen) check_pair(a, o);
    for (int pid : unseen)
      if (seen.count(pid)) {
        auto [a, o] = pair_of(pid);
        throw DataError("pair (" + attributes[size_t(a)] + ", " + objects[size_t(o)] +
                        ") is declared both seen and unseen");
      }
  }

 private:
  mutable std::set<int> seen_ids_;

  static int find(const std::vector<std::string>& v, const std::string& tok) {
    auto it = std::find(v.begin(), v.end(), tok);
    return it == v.end() ? -1 : static_cast<int>(it - v.begin());
  }
  void check_pair(int a, int o) const {
    if (a < 0 || a >= num_attrs() || o < 0 || o >= num_objects())
      throw DataError("pair index out of range: (" + std::to_string(a) + "," + std::to_string(o) + ")");
  }
};

struct Sample {
  std::string id;
  int attr = -1;
  int obj = -1;
  Split split = Split::kTrain;
  Tensor feature;  // empty until features are attached
};

// token -> vector table, all vectors share one dimension.
struct EmbeddingTable {
  int dim = 0;
  std::map<std::string, Tensor> vectors;

  const Tensor& get(const std::string& tok) const {
    auto it = vectors.find(tok);
    if (it == vectors.end()) throw DataError("embedding table: missing token " + tok);
    return it->second;
  }
};

// A loaded dataset plus the index structures the trainer and sampler need.
struct Dataset {
  Vocabulary vocab;
  std::vector<Sample> samples;
  int feat_dim = 0;

  std::vector<int> train_ids, val_ids, test_ids;
  // seen-pair list index: position of each seen pair in vocab.pairs_seen
  std::unordered_map<int, int> seen_pos;                 // pair_id -> index into pairs_seen
  std::vector<std::vector<int>> train_by_seen_pair;      // seen-pair idx -> sample ids
  std::vector<std::vector<int>> train_by_object;         // object -> sample ids
  std::vector<std::set<int>> objects_with_attr;          // attr -> objects having a train image
  std::vector<std::map<int, std::vector<int>>> train_by_attr_obj;  // attr -> (obj -> sample ids)

  void build_index() {
    train_ids.clear();
    val_ids.clear();
    test_ids.clear();
    seen_pos.clear();
    for (size_t k = 0; k < vocab.pairs_seen.size(); ++k) {
      auto [a, o] = vocab.pairs_seen[k];
      seen_pos[vocab.pair_id(a, o)] = static_cast<int>(k);
    }
    train_by_seen_pair.assign(vocab.pairs_seen.size(), {});
    train_by_object.assign(size_t(vocab.num_objects()), {});
    objects_with_attr.assign(size_t(vocab.num_attrs()), {});
    train_by_attr_obj.assign(size_t(vocab.num_attrs()), {});
    for (size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      switch (s.split) {
        case Split::kTrain: train_ids.push_back(static_cast<int>(i)); break;
        case Split::kVal: val_ids.push_back(static_cast<int>(i)); break;
        case Split::kTest: test_ids.push_back(static_cast<int>(i)); break;
      }
      if (s.split == Split::kTrain) {
        int pid = vocab.pair_id(s.attr, s.obj);
        train_by_seen_pair[size_t(seen_pos.at(pid))].push_back(static_cast<int>(i));
        train_by_object[size_t(s.obj)].push_back(static_cast<int>(i));
        objects_with_attr[size_t(s.attr)].insert(s.obj);
        train_by_attr_obj[size_t(s.attr)][s.obj].push_back(static_cast<int>(i));
      }
    }
  }

  // Split soundness: no train sample may carry an unseen pair. Asserted on
  // every load.
  void validate_splits() const {
    std::set<int> unseen;
    for (auto [a, o] : vocab.pairs_unseen) unseen.insert(vocab.pair_id(a, o));
    for (const Sample& s : samples) {
      if (s.split != Split::kTrain) continue;
      int pid = vocab.pair_id(s.attr, s.obj);
      if (unseen.count(pid) || !vocab.seen_set().count(pid))
        throw DataError("train sample " + s.id + " carries pair (" +
                        vocab.attributes[size_t(s.attr)] + ", " + vocab.objects[size_t(s.obj)] +
                        ") which is not a seen training pair");
    }
  }
};

// ---------------------------------------------------------------------------
// Manifest (JSON)

inline nlohmann::json manifest_to_json(const Vocabulary& vocab, const std::vector<Sample>& samples) {
  nlohmann::json j;
  j["attributes"] = vocab.attributes;
  j["objects"] = vocab.objects;
  auto pairs = [&](const std::vector<std::pair<int, int>>& ps) {
    nlohmann::json arr = nlohmann::json::array();
    for (auto [a, o] : ps)
      arr.push_back({vocab.attributes[size_t(a)], vocab.objects[size_t(o)]});
    return arr;
  };
  j["pairs_seen"] = pairs(vocab.pairs_seen);
  j["pairs_unseen"] = pairs(vocab.pairs_unseen);
  j["pairs_val_unseen"] = pairs(vocab.pairs_val_unseen);
  nlohmann::json ss = nlohmann::json::array();
  for (const Sample& s : samples)
    ss.push_back({{"id", s.id},
                  {"attr", vocab.attributes[size_t(s.attr)]},
                  {"obj", vocab.objects[size_t(s.obj)]},
                  {"split", split_name(s.split)}});
  j["samples"] = ss;
  return j;
}

inline void save_manifest(const std::string& path, const Vocabulary& vocab,
                          const std::vector<Sample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write manifest: " + path);
  f << manifest_to_json(vocab, samples).dump(2) << "\n";
}

inline std::pair<Vocabulary, std::vector<Sample>> load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  Vocabulary vocab;
  try {
    vocab.attributes = j.at("attributes").get<std::vector<std::string>>();
    vocab.objects = j.at("objects").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  auto parse_pairs = [&](const char* key) {
    std::vector<std::pair<int, int>> out;
    if (!j.contains(key)) return out;
    for (const auto& p : j.at(key)) {
      std::string at = p.at(0).get<std::string>();
      std::string ot = p.at(1).get<std::string>();
      int a = vocab.attr_index(at), o = vocab.object_index(ot);
      if (a < 0) throw DataError(std::string("manifest ") + key + ": unknown attribute " + at);
      if (o < 0) throw DataError(std::string("manifest ") + key + ": unknown object " + ot);
      out.emplace_back(a, o);
    }
    return out;
  };
  vocab.pairs_seen = parse_pairs("pairs_seen");
  vocab.pairs_unseen = parse_pairs("pairs_unseen");
  vocab.pairs_val_unseen = parse_pairs("pairs_val_unseen");
  vocab.validate();

  std::set<int> seen, test_ok, val_ok;
  for (auto [a, o] : vocab.pairs_seen) {
    seen.insert(vocab.pair_id(a, o));
    test_ok.insert(vocab.pair_id(a, o));
    val_ok.insert(vocab.pair_id(a, o));
  }
  for (auto [a, o] : vocab.pairs_unseen) test_ok.insert(vocab.pair_id(a, o));
  for (auto [a, o] : vocab.pairs_val_unseen) val_ok.insert(vocab.pair_id(a, o));

  std::vector<Sample> samples;
  std::unordered_set<std::string> ids;
  for (const auto& sj : j.at("samples")) {
    Sample s;
    s.id = sj.at("id").get<std::string>();
    std::string at = sj.at("attr").get<std::string>();
    std::string ot = sj.at("obj").get<std::string>();
    s.attr = vocab.attr_index(at);
    s.obj = vocab.object_index(ot);
    if (s.attr < 0) throw DataError("sample " + s.id + ": unknown attribute token " + at);
    if (s.obj < 0) throw DataError("sample " + s.id + ": unknown object token " + ot);
    s.split = parse_split(sj.at("split").get<std::string>());
    int pid = vocab.pair_id(s.attr, s.obj);
    if (s.split == Split::kTrain && !seen.count(pid))
      throw DataError("train sample " + s.id + " uses unseen pair (" + at + ", " + ot + ")");
    if (s.split == Split::kTest && !test_ok.count(pid))
      throw DataError("test sample " + s.id + " uses pair (" + at + ", " + ot +
                      ") outside pairs_seen and pairs_unseen");
    if (s.split == Split::kVal && !val_ok.count(pid))
      throw DataError("val sample " + s.id + " uses pair (" + at + ", " + ot +
                      ") outside pairs_seen and pairs_val_unseen");
    if (!ids.insert(s.id).second) throw DataError("duplicate sample id " + s.id);
    samples.push_back(std::move(s));
  }
  return {std::move(vocab), std::move(samples)};
}

// ---------------------------------------------------------------------------
// Feature file: magic "PBFV", u32 version=1, u32 count, u32 dim, then
// count records of (u16 id-length, id bytes, dim f32 little-endian).

inline void save_features(const std::string& path,
                          const std::vector<std::pair<std::string, Tensor>>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature file: " + path);
  f.write("PBFV", 4);
  io::put_u32(f, 1);
  io::put_u32(f, static_cast<uint32_t>(rows.size()));
  uint32_t dim = rows.empty() ? 0 : static_cast<uint32_t>(rows.front().second.size());
  io::put_u32(f, dim);
  for (const auto& [id, t] : rows) {
    if (static_cast<uint32_t>(t.size()) != dim)
      throw DataError("feature row " + id + " has dim " + std::to_string(t.size()) +
                      ", expected " + std::to_string(dim));
    if (id.size() > 0xffff) throw DataError("feature id too long: " + id);
    io::put_u16(f, static_cast<uint16_t>(id.size()));
    f.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (int i = 0; i < t.size(); ++i) io::put_f32(f, static_cast<float>(t.at(int(i))));
  }
  if (!f) throw DataError("short write on feature file: " + path);
}

inline std::unordered_map<std::string, Tensor> load_features(
    const std::string& path, const std::vector<std::string>& expected_ids) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "PBFV", 4) != 0)
    throw DataError("feature file " + path + ": bad magic");
  uint32_t version = 0, count = 0, dim = 0;
  if (!io::get_u32(f, version) || version != 1)
    throw DataError("feature file " + path + ": unsupported version");
  if (!io::get_u32(f, count) || !io::get_u32(f, dim))
    throw DataError("feature file " + path + ": truncated header");
  std::unordered_map<std::string, Tensor> out;
  out.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    uint16_t len = 0;
    if (!io::get_u16(f, len)) throw DataError("feature file " + path + ": truncated record header");
    std::string id(len, '\0');
    if (!f.read(id.data(), len)) throw DataError("feature file " + path + ": truncated id");
    Tensor t = Tensor::zeros({static_cast<int>(dim)});
    for (uint32_t i = 0; i < dim; ++i) {
      float v;
      if (!io::get_f32(f, v))
        throw DataError("feature file " + path + ": truncated row for id " + id);
      if (!std::isfinite(v))
        throw DataError("feature file " + path + ": non-finite value in row " + id);
      t.at(static_cast<int>(i)) = static_cast<real>(v);
    }
    if (!out.emplace(id, std::move(t)).second)
      throw DataError("feature file " + path + ": duplicate id " + id);
  }
  for (const std::string& id : expected_ids)
    if (!out.count(id)) throw DataError("feature file " + path + ": missing id " + id);
  return out;
}

// Attaches features to samples in place and records the dimension.
inline void attach_features(Dataset& ds, const std::string& path) {
  std::vector<std::string> ids;
  ids.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) ids.push_back(s.id);
  auto rows = load_features(path, ids);
  for (Sample& s : ds.samples) s.feature = rows.at(s.id);
  ds.feat_dim = ds.samples.empty() ? 0 : static_cast<int>(ds.samples.front().feature.size());
}

// ---------------------------------------------------------------------------
// Embedding file: plain text, one `token v1 ... vdim` per line.

inline void save_embeddings(const std::string& path, const EmbeddingTable& table) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write embedding file: " + path);
  f.precision(9);
  for (const auto& [tok, vec] : table.vectors) {
    f << tok;
    for (int i = 0; i < vec.size(); ++i) f << " " << vec.at(int(i));
    f << "\n";
  }
}

inline std::vector<std::string> split_token_parts(const std::string& tok) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : tok) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      parts.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

// Loads exactly the requested tokens. A token absent from the file falls
// back to the mean of its alphanumeric parts (so "Faux.Leather" resolves
// via "faux" and "leather"); tokens that still fail are reported together.
inline EmbeddingTable load_embeddings(const std::string& path,
                                      const std::vector<std::string>& tokens) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open embedding file: " + path);
  std::unordered_map<std::string, Tensor> file_vecs;
  std::string line;
  int dim = -1;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string tok;
    is >> tok;
    std::vector<real> vals;
    double v;
    while (is >> v) vals.push_back(static_cast<real>(v));
    if (vals.empty()) throw DataError("embedding file " + path + ": no values for token " + tok);
    if (dim < 0) dim = static_cast<int>(vals.size());
    if (static_cast<int>(vals.size()) != dim)
      throw DataError("embedding file " + path + ": inconsistent dim for token " + tok);
    Tensor t = Tensor::vec(std::move(vals));
    check_finite(t, "embedding");
    file_vecs.emplace(std::move(tok), std::move(t));
  }
  if (dim < 0) throw DataError("embedding file " + path + " is empty");

  EmbeddingTable table;
  table.dim = dim;
  std::vector<std::string> missing;
  for (const std::string& tok : tokens) {
    auto it = file_vecs.find(tok);
    if (it != file_vecs.end()) {
      table.vectors[tok] = it->second;
      continue;
    }
    std::vector<std::string> parts = split_token_parts(tok);
    bool ok = !parts.empty();
    Tensor acc = Tensor::zeros({dim});
    for (const std::string& p : parts) {
      auto pit = file_vecs.find(p);
      if (pit == file_vecs.end()) {
        ok = false;
        break;
      }
      for (int i = 0; i < dim; ++i) acc.at(i) += pit->second.at(i);
    }
    if (!ok) {
      missing.push_back(tok);
      continue;
    }
    for (int i = 0; i < dim; ++i) acc.at(i) /= static_cast<real>(parts.size());
    table.vectors[tok] = std::move(acc);
  }
  if (!missing.empty()) {
    std::string msg = "embedding file " + path + ": unresolvable tokens:";
    for (const std::string& t : missing) msg += " " + t;
    throw DataError(msg);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generator

struct SynthConfig {
  int num_attrs = 8;
  int num_objects = 10;
  int feat_dim = 32;      // must be even; latents live in feat_dim/2
  int word_dim = 16;
  double seen_fraction = 0.75;
  int samples_per_pair = 20;
  double sigma = 0.1;     // additive feature noise
  double gamma = 0.5;     // attribute-object interaction strength
  double embed_noise = 0.01;
  uint64_t seed = 1;
};

struct SynthGroundTruth {
  std::vector<Tensor> attr_latents;  // unit vectors in R^{D/2}
  std::vector<Tensor> obj_latents;
  Tensor rotation;  // D x D orthogonal
};

struct SynthData {
  Dataset dataset;
  EmbeddingTable embeddings;
  SynthGroundTruth truth;
};

namespace detail {

// Orthogonal matrix via Gram-Schmidt on a random Gaussian matrix.
inline Tensor random_rotation(int d, Rng& rng) {
  std::vector<std::vector<double>> rows(static_cast<size_t>(d),
                                        std::vector<double>(static_cast<size_t>(d)));
  for (auto& r : rows)
    for (double& v : r) v = rng.gaussian();
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < i; ++j) {
      double dp = 0.0;
      for (int k = 0; k < d; ++k) dp += rows[size_t(i)][size_t(k)] * rows[size_t(j)][size_t(k)];
      for (int k = 0; k < d; ++k) rows[size_t(i)][size_t(k)] -= dp * rows[size_t(j)][size_t(k)];
    }
    double nrm = 0.0;
    for (int k = 0; k < d; ++k) nrm += rows[size_t(i)][size_t(k)] * rows[size_t(i)][size_t(k)];
    nrm = std::sqrt(nrm);
    for (int k = 0; k < d; ++k) rows[size_t(i)][size_t(k)] /= nrm;
  }
  Tensor R = Tensor::zeros({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) R.at(i, j) = static_cast<real>(rows[size_t(i)][size_t(j)]);
  return R;
}

inline Tensor unit_gaussian(int d, Rng& rng) {
  Tensor t = rng.gaussian_vec(d);
  double n = norm64(t);
  for (real& v : t.data) v = static_cast<real>(double(v) / n);
  return t;
}

}  // namespace detail

// Draws per-primitive latents, entangles them through an interaction term
// and a fixed rotation, and emits word embeddings as low-noise linear
// projections of the same latents so embedding similarity mirrors latent
// similarity.
inline SynthData synth_generate(const SynthConfig& cfg) {
  if (cfg.num_attrs < 2 || cfg.num_objects < 2)
    throw ContractError("synth_generate: need at least 2 attributes and 2 objects");
  if (cfg.seen_fraction <= 0.0 || cfg.seen_fraction >= 1.0)
    throw ContractError("synth_generate: seen_fraction must be in (0,1)");
  if (cfg.feat_dim % 2 != 0 || cfg.feat_dim < 2)
    throw ContractError("synth_generate: feat_dim must be even and positive");

  int m = cfg.num_attrs, n = cfg.num_objects, d = cfg.feat_dim, half = d / 2;
  int total_pairs = m * n;
  int n_seen = static_cast<int>(std::llround(cfg.seen_fraction * total_pairs));
  if (n_seen >= total_pairs)
    throw ContractError("synth_generate: parameters leave no unseen pairs");
  if (n_seen < std::max(m, n)) n_seen = std::max(m, n);  // room to cover every primitive

  Rng master(cfg.seed);
  Rng rot_rng = master.split(1);
  Rng latent_rng = master.split(2);
  Rng split_rng = master.split(3);
  Rng noise_rng = master.split(4);
  Rng embed_rng = master.split(5);

  SynthData out;
  SynthGroundTruth& gt = out.truth;
  gt.rotation = detail::random_rotation(d, rot_rng);
  for (int a = 0; a < m; ++a) gt.attr_latents.push_back(detail::unit_gaussian(half, latent_rng));
  for (int o = 0; o < n; ++o) gt.obj_latents.push_back(detail::unit_gaussian(half, latent_rng));

  Vocabulary vocab;
  for (int a = 0; a < m; ++a) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "a%02d", a);
    vocab.attributes.emplace_back(buf);
  }
  for (int o = 0; o < n; ++o) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "o%02d", o);
    vocab.objects.emplace_back(buf);
  }

  // Seen/unseen split over the pair grid; every attribute and object must
  // appear in at least one seen pair so all primitives are learnable.
  std::vector<int> order = split_rng.permutation(total_pairs);
  std::set<int> seen_ids;
  std::vector<int> attr_cover(size_t(m), 0), obj_cover(size_t(n), 0);
  for (int idx : order) {
    if (static_cast<int>(seen_ids.size()) >= n_seen) break;
    seen_ids.insert(idx);
    attr_cover[size_t(idx / n)]++;
    obj_cover[size_t(idx % n)]++;
  }
  auto covered = [&]() {
    for (int c : attr_cover)
      if (c == 0) return false;
    for (int c : obj_cover)
      if (c == 0) return false;
    return true;
  };
  for (int idx : order) {
    if (covered()) break;
    if (seen_ids.count(idx)) continue;
    int a = idx / n, o = idx % n;
    if (attr_cover[size_t(a)] == 0 || obj_cover[size_t(o)] == 0) {
      // swap in for some redundantly covered pair
      for (auto it = seen_ids.rbegin(); it != seen_ids.rend(); ++it) {
        int b = *it / n, p = *it % n;
        if (attr_cover[size_t(b)] > 1 && obj_cover[size_t(p)] > 1) {
          seen_ids.erase(*it);
          attr_cover[size_t(b)]--;
          obj_cover[size_t(p)]--;
          seen_ids.insert(idx);
          attr_cover[size_t(a)]++;
          obj_cover[size_t(o)]++;
          break;
        }
      }
    }
  }
  for (int pid = 0; pid < total_pairs; ++pid) {
    int a = pid / n, o = pid % n;
    if (seen_ids.count(pid))
      vocab.pairs_seen.emplace_back(a, o);
    else
      vocab.pairs_unseen.emplace_back(a, o);
  }
  if (vocab.pairs_unseen.empty())
    throw ContractError("synth_generate: parameters leave no unseen pairs");
  vocab.validate();

  // feature = R (concat(u_a, u_o) + gamma*concat(u_a.*u_o, u_a.*u_o) + sigma*z)
  auto make_feature = [&](int a, int o) {
    std::vector<double> base(static_cast<size_t>(d));
    const Tensor& ua = gt.attr_latents[size_t(a)];
    const Tensor& uo = gt.obj_latents[size_t(o)];
    for (int i = 0; i < half; ++i) {
      double inter = cfg.gamma * double(ua.at(i)) * double(uo.at(i));
      base[size_t(i)] = double(ua.at(i)) + inter;
      base[size_t(half + i)] = double(uo.at(i)) + inter;
    }
    if (cfg.sigma > 0.0)
      for (int i = 0; i < d; ++i) base[size_t(i)] += cfg.sigma * noise_rng.gaussian();
    Tensor f = Tensor::zeros({d});
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += double(gt.rotation.at(i, j)) * base[size_t(j)];
      f.at(i) = static_cast<real>(acc);
    }
    return f;
  };

  Dataset& ds = out.dataset;
  ds.vocab = vocab;
  int counter = 0;
  auto emit = [&](int a, int o, Split split, int count) {
    for (int k = 0; k < count; ++k) {
      Sample s;
      char buf[32];
      std::snprintf(buf, sizeof buf, "img%06d", counter++);
      s.id = buf;
      s.attr = a;
      s.obj = o;
      s.split = split;
      s.feature = make_feature(a, o);
      ds.samples.push_back(std::move(s));
    }
  };
  int test_per_seen = std::max(1, cfg.samples_per_pair / 4);
  for (auto [a, o] : vocab.pairs_seen) {
    emit(a, o, Split::kTrain, cfg.samples_per_pair);
    emit(a, o, Split::kVal, 1);
    emit(a, o, Split::kTest, test_per_seen);
  }
  for (auto [a, o] : vocab.pairs_unseen) emit(a, o, Split::kTest, cfg.samples_per_pair);
  ds.feat_dim = d;
  ds.validate_splits();
  ds.build_index();

  // Word embeddings: per-primitive random projection of the latent.
  EmbeddingTable& table = out.embeddings;
  table.dim = cfg.word_dim;
  std::vector<std::vector<double>> proj(static_cast<size_t>(cfg.word_dim),
                                        std::vector<double>(static_cast<size_t>(half)));
  for (auto& row : proj)
    for (double& v : row) v = embed_rng.gaussian() / std::sqrt(double(half));
  auto project = [&](const Tensor& u) {
    Tensor w = Tensor::zeros({cfg.word_dim});
    for (int i = 0; i < cfg.word_dim; ++i) {
      double acc = 0.0;
      for (int j = 0; j < half; ++j) acc += proj[size_t(i)][size_t(j)] * double(u.at(j));
      w.at(i) = static_cast<real>(acc + cfg.embed_noise * embed_rng.gaussian());
    }
    return w;
  };
  for (int a = 0; a < m; ++a) table.vectors[vocab.attributes[size_t(a)]] = project(gt.attr_latents[size_t(a)]);
  for (int o = 0; o < n; ++o) table.vectors[vocab.objects[size_t(o)]] = project(gt.obj_latents[size_t(o)]);

  return out;
}

// Writes manifest/features/embeddings for a generated dataset.
inline void save_synth(const SynthData& sd, const std::string& dir) {
  save_manifest(dir + "/manifest.json", sd.dataset.vocab, sd.dataset.samples);
  std::vector<std::pair<std::string, Tensor>> rows;
  for (const Sample& s : sd.dataset.samples) rows.emplace_back(s.id, s.feature);
  save_features(dir + "/features.pbfv", rows);
  save_embeddings(dir + "/embeddings.txt", sd.embeddings);
}

// Loads a dataset from its three files.
inline Dataset load_dataset(const std::string& manifest_path, const std::string& features_path) {
  Dataset ds;
  auto [vocab, samples] = load_manifest(manifest_path);
  ds.vocab = std::move(vocab);
  ds.samples = std::move(samples);
  attach_features(ds, features_path);
  ds.validate_splits();
  ds.build_index();
  return ds;
}

}  // namespace czsl
