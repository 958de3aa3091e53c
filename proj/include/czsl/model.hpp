#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/autodiff.hpp"
#include "czsl/dataio.hpp"
#include "czsl/errors.hpp"
#include "czsl/io_util.hpp"
#include "czsl/rng.hpp"
#include "czsl/tensor.hpp"

namespace czsl {

// Score assigned to pairs outside the candidate set: the most negative
// finite float, so masked entries lose every argmax and vanish under
// softmax without ever producing NaN.
constexpr double kMaskedScore = -double(std::numeric_limits<float>::max());

struct ModelConfig {
  int feat_dim = 0;   // D: backbone feature width
  int word_dim = 0;   // width of the word-embedding table
  int hidden = 0;     // H: decomposer/fusion hidden width; 0 means D
  int embed = 0;      // E: common embedding width; 0 means D
  int num_attrs = 0;
  int num_objects = 0;
  double dropout = 0.1;
  double tau_inv = 20.0;  // 1/tau applied to every cosine score
  bool freeze_words = false;
  uint64_t init_seed = 1;

  int hidden_dim() const { return hidden > 0 ? hidden : feat_dim; }
  int embed_dim() const { return embed > 0 ? embed : feat_dim; }

  nlohmann::json to_json() const {
    return {{"feat_dim", feat_dim},   {"word_dim", word_dim},
            {"hidden", hidden},       {"embed", embed},
            {"num_attrs", num_attrs}, {"num_objects", num_objects},
            {"dropout", dropout},     {"tau_inv", tau_inv},
            {"freeze_words", freeze_words}, {"init_seed", init_seed}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.feat_dim = j.at("feat_dim").get<int>();
    c.word_dim = j.at("word_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.embed = j.at("embed").get<int>();
    c.num_attrs = j.at("num_attrs").get<int>();
    c.num_objects = j.at("num_objects").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.tau_inv = j.at("tau_inv").get<double>();
    c.freeze_words = j.at("freeze_words").get<bool>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
  }
};

// Two-layer MLP: linear -> ReLU -> LayerNorm -> dropout -> linear.
struct MlpBlock {
  Tensor w1, b1, gamma, beta, w2, b2;
};

// Single linear layer followed by ReLU; used for every embedder.
struct LinearRelu {
  Tensor w, b;
};

struct ModelParams {
  ModelConfig cfg;
  MlpBlock dec_a, dec_o, fusion;
  LinearRelu vis_p, vis_a, vis_o, vis_cp;  // visual embedders (phi)
  LinearRelu txt_p, txt_a, txt_o, txt_cp;  // text embedders (psi)
  std::vector<Tensor> word_attr, word_obj; // trainable word tables

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    auto block = [&](const char* prefix, MlpBlock& b) {
      fn(std::string(prefix) + ".w1", b.w1);
      fn(std::string(prefix) + ".b1", b.b1);
      fn(std::string(prefix) + ".gamma", b.gamma);
      fn(std::string(prefix) + ".beta", b.beta);
      fn(std::string(prefix) + ".w2", b.w2);
      fn(std::string(prefix) + ".b2", b.b2);
    };
    auto lin = [&](const char* prefix, LinearRelu& l) {
      fn(std::string(prefix) + ".w", l.w);
      fn(std::string(prefix) + ".b", l.b);
    };
    block("dec_a", dec_a);
    block("dec_o", dec_o);
    block("fusion", fusion);
    lin("vis_p", vis_p);
    lin("vis_a", vis_a);
    lin("vis_o", vis_o);
    lin("vis_cp", vis_cp);
    lin("txt_p", txt_p);
    lin("txt_a", txt_a);
    lin("txt_o", txt_o);
    lin("txt_cp", txt_cp);
    for (size_t i = 0; i < word_attr.size(); ++i)
      fn("word_attr." + std::to_string(i), word_attr[i]);
    for (size_t i = 0; i < word_obj.size(); ++i)
      fn("word_obj." + std::to_string(i), word_obj[i]);
  }

  bool is_trainable(const std::string& name) const {
    if (cfg.freeze_words && name.rfind("word_", 0) == 0) return false;
    return true;
  }

  void check_all_finite() {
    for_each_param([](const std::string& name, Tensor& t) { check_finite(t, name.c_str()); });
  }
};

namespace detail {

inline Tensor xavier(int rows, int cols, Rng& rng) {
  double limit = std::sqrt(6.0 / double(rows + cols));
  Tensor t = Tensor::zeros({rows, cols});
  for (real& v : t.data) v = static_cast<real>(rng.uniform(-limit, limit));
  return t;
}

inline MlpBlock init_block(int in, int hidden, int out, Rng& rng) {
  MlpBlock b;
  b.w1 = xavier(hidden, in, rng);
  b.b1 = Tensor::zeros({hidden});
  b.gamma = Tensor::full({hidden}, real(1));
  b.beta = Tensor::zeros({hidden});
  b.w2 = xavier(out, hidden, rng);
  b.b2 = Tensor::zeros({out});
  return b;
}

inline LinearRelu init_linear(int in, int out, Rng& rng) {
  return LinearRelu{xavier(out, in, rng), Tensor::zeros({out})};
}

}  // namespace detail

// Builds a model with Xavier-uniform weights (zero biases) and word tables
// initialized from the embedding table rows for the vocabulary tokens.
inline ModelParams init_model(const ModelConfig& cfg, const Vocabulary& vocab,
                              const EmbeddingTable& words) {
  if (cfg.feat_dim <= 0) throw ContractError("init_model: feat_dim must be positive");
  if (words.dim != cfg.word_dim)
    throw ContractError("init_model: word_dim " + std::to_string(cfg.word_dim) +
                        " does not match embedding table dim " + std::to_string(words.dim));
  ModelParams p;
  p.cfg = cfg;
  p.cfg.num_attrs = vocab.num_attrs();
  p.cfg.num_objects = vocab.num_objects();
  int d = cfg.feat_dim, h = cfg.hidden_dim(), e = cfg.embed_dim(), w = cfg.word_dim;
  Rng rng(cfg.init_seed);
  p.dec_a = detail::init_block(d, h, d, rng);
  p.dec_o = detail::init_block(d, h, d, rng);
  p.fusion = detail::init_block(2 * d, h, d, rng);
  p.vis_p = detail::init_linear(d, e, rng);
  p.vis_a = detail::init_linear(d, e, rng);
  p.vis_o = detail::init_linear(d, e, rng);
  p.vis_cp = detail::init_linear(d, e, rng);
  p.txt_p = detail::init_linear(2 * w, e, rng);
  p.txt_a = detail::init_linear(w, e, rng);
  p.txt_o = detail::init_linear(w, e, rng);
  p.txt_cp = detail::init_linear(2 * w, e, rng);
  for (const std::string& tok : vocab.attributes) p.word_attr.push_back(words.get(tok));
  for (const std::string& tok : vocab.objects) p.word_obj.push_back(words.get(tok));
  return p;
}

// ---------------------------------------------------------------------------
// Graph builders (training path)

struct MlpBlockNodes {
  int w1, b1, gamma, beta, w2, b2;
};
struct LinearReluNodes {
  int w, b;
};

// Every parameter staged as a leaf in one graph, in for_each_param order.
struct ParamNodes {
  MlpBlockNodes dec_a, dec_o, fusion;
  LinearReluNodes vis_p, vis_a, vis_o, vis_cp;
  LinearReluNodes txt_p, txt_a, txt_o, txt_cp;
  std::vector<int> word_attr, word_obj;
  std::vector<std::pair<std::string, int>> named;  // name -> leaf id
};

inline ParamNodes stage_params(Graph& g, ModelParams& params) {
  ParamNodes pn;
  std::map<std::string, int> ids;
  params.for_each_param([&](const std::string& name, Tensor& t) {
    int id = g.leaf(t);
    ids[name] = id;
    pn.named.emplace_back(name, id);
  });
  auto block = [&](const char* prefix) {
    std::string p(prefix);
    return MlpBlockNodes{ids.at(p + ".w1"), ids.at(p + ".b1"), ids.at(p + ".gamma"),
                         ids.at(p + ".beta"), ids.at(p + ".w2"), ids.at(p + ".b2")};
  };
  auto lin = [&](const char* prefix) {
    std::string p(prefix);
    return LinearReluNodes{ids.at(p + ".w"), ids.at(p + ".b")};
  };
  pn.dec_a = block("dec_a");
  pn.dec_o = block("dec_o");
  pn.fusion = block("fusion");
  pn.vis_p = lin("vis_p");
  pn.vis_a = lin("vis_a");
  pn.vis_o = lin("vis_o");
  pn.vis_cp = lin("vis_cp");
  pn.txt_p = lin("txt_p");
  pn.txt_a = lin("txt_a");
  pn.txt_o = lin("txt_o");
  pn.txt_cp = lin("txt_cp");
  for (size_t i = 0; i < params.word_attr.size(); ++i)
    pn.word_attr.push_back(ids.at("word_attr." + std::to_string(i)));
  for (size_t i = 0; i < params.word_obj.size(); ++i)
    pn.word_obj.push_back(ids.at("word_obj." + std::to_string(i)));
  return pn;
}

// Per-sample dropout masks for the two decomposers and the fusion block.
// The fusion mask is shared between the clean and perturbed passes of a
// step so that a null perturbation reproduces the clean path exactly.
struct DropoutMasks {
  Tensor a, o, f;
  bool active = false;
  const Tensor* ptr_a() const { return active ? &a : nullptr; }
  const Tensor* ptr_o() const { return active ? &o : nullptr; }
  const Tensor* ptr_f() const { return active ? &f : nullptr; }
};

// linear -> ReLU -> LayerNorm -> optional dropout mask -> linear
inline int mlp_forward(Graph& g, const MlpBlockNodes& b, int x, const Tensor* dropout_mask) {
  int h = g.add(g.matmul(b.w1, x), b.b1);
  h = g.relu(h);
  h = g.layer_norm(h, b.gamma, b.beta);
  if (dropout_mask != nullptr) h = g.dropout(h, *dropout_mask);
  return g.add(g.matmul(b.w2, h), b.b2);
}

inline int linear_relu_forward(Graph& g, const LinearReluNodes& l, int x) {
  return g.relu(g.add(g.matmul(l.w, x), l.b));
}

// f_a = D_a(f_cls), f_o = D_o(f_cls)
inline std::pair<int, int> decompose_nodes(Graph& g, const ParamNodes& pn, int f_cls,
                                           const Tensor* mask_a, const Tensor* mask_o) {
  return {mlp_forward(g, pn.dec_a, f_cls, mask_a), mlp_forward(g, pn.dec_o, f_cls, mask_o)};
}

// f_cp = MLP(concat(f_a, f_o)); attribute first.
inline int fuse_node(Graph& g, const ParamNodes& pn, int f_a, int f_o, const Tensor* mask) {
  return mlp_forward(g, pn.fusion, g.concat({f_a, f_o}), mask);
}

// w_y = concat(w_a, w_o); projected to the common space downstream.
inline int compose_word_node(Graph& g, int w_a, int w_o) { return g.concat({w_a, w_o}); }

// Text-side embedding nodes shared by every sample in a training graph.
struct TextNodes {
  std::vector<int> attr_emb;     // psi_a(w_a) per attribute
  std::vector<int> obj_emb;      // psi_o(w_o) per object
  std::vector<int> cand_emb_p;   // psi_p(w_y) per candidate pair
  std::vector<int> cand_emb_cp;  // psi_cp(w_y) per candidate pair
};

inline TextNodes build_text_nodes(Graph& g, const ParamNodes& pn,
                                  const std::vector<std::pair<int, int>>& candidates) {
  TextNodes tn;
  for (int id : pn.word_attr) tn.attr_emb.push_back(linear_relu_forward(g, pn.txt_a, id));
  for (int id : pn.word_obj) tn.obj_emb.push_back(linear_relu_forward(g, pn.txt_o, id));
  for (auto [a, o] : candidates) {
    int wy = compose_word_node(g, pn.word_attr[size_t(a)], pn.word_obj[size_t(o)]);
    tn.cand_emb_p.push_back(linear_relu_forward(g, pn.txt_p, wy));
    tn.cand_emb_cp.push_back(linear_relu_forward(g, pn.txt_cp, wy));
  }
  return tn;
}

// s[i] = (1/tau) * cos(vis, txt[i]) as one rank-1 node.
inline int score_vector(Graph& g, int vis_emb, const std::vector<int>& txt_bank, double tau_inv) {
  if (txt_bank.empty()) throw ContractError("score_vector: empty candidate bank");
  std::vector<int> cosines;
  cosines.reserve(txt_bank.size());
  for (int t : txt_bank) cosines.push_back(g.cosine(vis_emb, t));
  return g.scale(g.concat(cosines), static_cast<real>(tau_inv));
}

// ---------------------------------------------------------------------------
// Plain (eval) forward path

// Standalone decompose/fuse used by evaluation and the spec-level ops;
// dropout is an identity here.
inline std::pair<Tensor, Tensor> decompose(ModelParams& params, const Tensor& f_cls) {
  Graph g;
  ParamNodes pn = stage_params(g, params);
  auto [fa, fo] = decompose_nodes(g, pn, g.leaf(f_cls), nullptr, nullptr);
  return {g.value(fa), g.value(fo)};
}

inline Tensor fuse(ModelParams& params, const Tensor& f_a, const Tensor& f_o) {
  Graph g;
  ParamNodes pn = stage_params(g, params);
  int id = fuse_node(g, pn, g.leaf(f_a), g.leaf(f_o), nullptr);
  return g.value(id);
}

inline Tensor compose_word(const Tensor& w_a, const Tensor& w_o) {
  Tensor out = Tensor::zeros({static_cast<int>(w_a.size() + w_o.size())});
  std::copy(w_a.data.begin(), w_a.data.end(), out.data.begin());
  std::copy(w_o.data.begin(), w_o.data.end(), out.data.begin() + w_a.size());
  return out;
}

// Embedded text vectors for all primitives and all grid pairs; constant
// during evaluation so computed once and reused across samples.
struct TextCache {
  std::vector<Tensor> attr_emb;     // psi_a(w_a), one per attribute
  std::vector<Tensor> obj_emb;      // psi_o(w_o), one per object
  std::vector<Tensor> pair_emb_p;   // psi_p(w_y), one per grid pair
  std::vector<Tensor> pair_emb_cp;  // psi_cp(w_y), one per grid pair
};

inline TextCache build_text_cache(ModelParams& params) {
  Graph g;
  ParamNodes pn = stage_params(g, params);
  TextCache tc;
  int m = static_cast<int>(params.word_attr.size());
  int n = static_cast<int>(params.word_obj.size());
  for (int a = 0; a < m; ++a)
    tc.attr_emb.push_back(g.value(linear_relu_forward(g, pn.txt_a, pn.word_attr[size_t(a)])));
  for (int o = 0; o < n; ++o)
    tc.obj_emb.push_back(g.value(linear_relu_forward(g, pn.txt_o, pn.word_obj[size_t(o)])));
  for (int a = 0; a < m; ++a)
    for (int o = 0; o < n; ++o) {
      int wy = compose_word_node(g, pn.word_attr[size_t(a)], pn.word_obj[size_t(o)]);
      tc.pair_emb_p.push_back(g.value(linear_relu_forward(g, pn.txt_p, wy)));
      tc.pair_emb_cp.push_back(g.value(linear_relu_forward(g, pn.txt_cp, wy)));
    }
  return tc;
}

// Candidate subset of the attribute x object grid.
struct PairMask {
  int num_pairs = 0;
  std::vector<char> in_mask;    // size num_pairs
  std::vector<int> candidates;  // ascending pair ids

  static PairMask from_ids(int num_pairs, std::vector<int> ids) {
    PairMask m;
    m.num_pairs = num_pairs;
    m.in_mask.assign(size_t(num_pairs), 0);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (int id : ids) {
      if (id < 0 || id >= num_pairs) throw ContractError("pair mask: id out of range");
      m.in_mask[size_t(id)] = 1;
    }
    m.candidates = std::move(ids);
    return m;
  }
  bool contains(int pid) const { return in_mask[size_t(pid)] != 0; }
};

// Per-sample branch scores over the full pair grid (masked-out entries hold
// kMaskedScore) plus the attribute/object branches.
struct BranchScores {
  std::vector<double> s_p;   // size m*n
  std::vector<double> s_a;   // size m
  std::vector<double> s_o;   // size n
  std::vector<double> s_cp;  // size m*n
};

// Visual side of the four branches for one sample, eval mode.
struct VisualEmbeds {
  Tensor phi_p, phi_a, phi_o, phi_cp;
  Tensor f_a, f_o, f_cp;
};

inline VisualEmbeds visual_forward(ModelParams& params, const Tensor& f_cls) {
  Graph g;
  ParamNodes pn = stage_params(g, params);
  int x = g.leaf(f_cls);
  auto [fa, fo] = decompose_nodes(g, pn, x, nullptr, nullptr);
  int fcp = fuse_node(g, pn, fa, fo, nullptr);
  VisualEmbeds ve;
  ve.f_a = g.value(fa);
  ve.f_o = g.value(fo);
  ve.f_cp = g.value(fcp);
  ve.phi_p = g.value(linear_relu_forward(g, pn.vis_p, x));
  ve.phi_a = g.value(linear_relu_forward(g, pn.vis_a, fa));
  ve.phi_o = g.value(linear_relu_forward(g, pn.vis_o, fo));
  ve.phi_cp = g.value(linear_relu_forward(g, pn.vis_cp, fcp));
  return ve;
}

// Temperature-scaled cosine scores for all four branches. Masked-out pairs
// carry kMaskedScore so they never win an argmax and vanish under softmax.
inline BranchScores branch_scores(ModelParams& params, const Tensor& f_cls,
                                  const PairMask& mask, double tau_inv,
                                  const TextCache& tc) {
  if (mask.candidates.empty()) throw ContractError("branch_scores: empty candidate set");
  if (tau_inv <= 0.0) throw ContractError("branch_scores: temperature must be positive");
  VisualEmbeds ve = visual_forward(params, f_cls);
  BranchScores bs;
  int m = static_cast<int>(tc.attr_emb.size());
  int n = static_cast<int>(tc.obj_emb.size());
  bs.s_a.resize(size_t(m));
  bs.s_o.resize(size_t(n));
  bs.s_p.assign(size_t(mask.num_pairs), kMaskedScore);
  bs.s_cp.assign(size_t(mask.num_pairs), kMaskedScore);
  for (int a = 0; a < m; ++a)
    bs.s_a[size_t(a)] = tau_inv * kernels::cosine64(ve.phi_a, tc.attr_emb[size_t(a)]);
  for (int o = 0; o < n; ++o)
    bs.s_o[size_t(o)] = tau_inv * kernels::cosine64(ve.phi_o, tc.obj_emb[size_t(o)]);
  for (int pid : mask.candidates) {
    bs.s_p[size_t(pid)] = tau_inv * kernels::cosine64(ve.phi_p, tc.pair_emb_p[size_t(pid)]);
    bs.s_cp[size_t(pid)] = tau_inv * kernels::cosine64(ve.phi_cp, tc.pair_emb_cp[size_t(pid)]);
  }
  return bs;
}

inline BranchScores branch_scores(ModelParams& params, const Tensor& f_cls,
                                  const PairMask& mask, double tau_inv) {
  TextCache tc = build_text_cache(params);
  return branch_scores(params, f_cls, mask, tau_inv, tc);
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "PBCK", u32 version, config JSON, named f32 tensors.

inline void save_checkpoint(const std::string& path, ModelParams& params,
                            const std::string& config_echo) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write("PBCK", 4);
  io::put_u32(f, 1);
  nlohmann::json meta;
  meta["model"] = params.cfg.to_json();
  meta["config_echo"] = config_echo;
  std::string meta_str = meta.dump();
  io::put_u32(f, static_cast<uint32_t>(meta_str.size()));
  f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  uint32_t count = 0;
  params.for_each_param([&](const std::string&, Tensor&) { ++count; });
  io::put_u32(f, count);
  params.for_each_param([&](const std::string& name, Tensor& t) {
    io::put_u16(f, static_cast<uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put_u32(f, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) io::put_u32(f, static_cast<uint32_t>(d));
    for (real v : t.data) io::put_f32(f, static_cast<float>(v));
  });
  if (!f) throw DataError("short write on checkpoint: " + path);
}

// Returns the parameters plus the config echo stored at save time.
inline std::pair<ModelParams, std::string> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "PBCK", 4) != 0)
    throw DataError("checkpoint " + path + ": bad magic");
  uint32_t version = 0, meta_len = 0, count = 0;
  if (!io::get_u32(f, version) || version != 1)
    throw DataError("checkpoint " + path + ": unsupported version");
  if (!io::get_u32(f, meta_len)) throw DataError("checkpoint " + path + ": truncated");
  std::string meta_str(meta_len, '\0');
  if (!f.read(meta_str.data(), meta_len)) throw DataError("checkpoint " + path + ": truncated meta");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint meta: ") + e.what());
  }
  ModelConfig cfg = ModelConfig::from_json(meta.at("model"));
  if (!io::get_u32(f, count)) throw DataError("checkpoint " + path + ": truncated");

  std::map<std::string, Tensor> tensors;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = 0;
    if (!io::get_u16(f, name_len)) throw DataError("checkpoint " + path + ": truncated record");
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) throw DataError("checkpoint " + path + ": truncated name");
    uint32_t rank = 0;
    if (!io::get_u32(f, rank) || rank > 2) throw DataError("checkpoint " + path + ": bad rank");
    Shape shape;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t d = 0;
      if (!io::get_u32(f, d)) throw DataError("checkpoint " + path + ": truncated shape");
      shape.push_back(static_cast<int>(d));
    }
    Tensor t = Tensor::zeros(shape);
    for (int64_t k = 0; k < t.size(); ++k) {
      float v;
      if (!io::get_f32(f, v)) throw DataError("checkpoint " + path + ": truncated tensor " + name);
      t.data[size_t(k)] = static_cast<real>(v);
    }
    tensors.emplace(std::move(name), std::move(t));
  }

  ModelParams p;
  p.cfg = cfg;
  p.word_attr.resize(size_t(cfg.num_attrs));
  p.word_obj.resize(size_t(cfg.num_objects));
  p.for_each_param([&](const std::string& name, Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint " + path + ": missing tensor " + name);
    t = it->second;
  });
  p.check_all_finite();
  return {std::move(p), meta.at("config_echo").get<std::string>()};
}

}  // namespace czsl
