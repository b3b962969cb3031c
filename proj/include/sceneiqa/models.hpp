#pragma once

// Toy-scale quality models built on the autograd tape:
//  - hyper:  backbone -> hypernetwork -> generated 4-layer target network
//  - sem:    hyper + scene classifier + argmax-scene multiplier/offset rescaling
//  - fhiqa:  hyper + scene classifier + probability-weighted rescaling
//  - monet:  multi-level features -> M multi-view attention blocks -> aggregation block -> score
//  - gated:  global/local embeddings -> scene-adaptive regressor banks -> gated fusion

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sceneiqa/autograd.hpp"
#include "sceneiqa/error.hpp"

namespace sceneiqa::models {

using ad::Matrix;
using ad::Var;
using ad::Vector;

enum class ModelKind { hyper, sem, fhiqa, monet, gated };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::hyper: return "hyper";
    case ModelKind::sem: return "sem";
    case ModelKind::fhiqa: return "fhiqa";
    case ModelKind::monet: return "monet";
    case ModelKind::gated: return "gated";
  }
  return "unknown";
}

inline ModelKind parse_model_kind(const std::string& name) {
  for (auto k : {ModelKind::hyper, ModelKind::sem, ModelKind::fhiqa, ModelKind::monet, ModelKind::gated}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown model '" + name + "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::hyper;
  int input_dim = 16;

  // Backbone and hypernetwork family.
  int backbone_hidden = 32;
  int semantic_dim = 16;
  int content_dim = 8;
  std::array<int, 3> target_hidden{8, 6, 4};
  int hyper_hidden = 16;
  int classifier_hidden = 16;

  // Multi-view attention (MoNet): N levels of C tokens x D channels, M blocks.
  int levels = 4;
  int tokens = 4;
  int token_dim = 4;
  int attention_dim = 4;
  int mal_count = 5;
  std::array<int, 2> head_hidden{16, 8};

  // Gated global/local fusion.
  int embed_dim = 16;
  std::array<int, 2> gate_hidden{128, 64};

  std::vector<std::string> scenes;  // training scenes, index order of every scene head
  std::uint64_t seed = 0;

  int scene_count() const { return static_cast<int>(scenes.size()); }
  int opinion_dim() const { return token_dim * levels; }
  bool has_scene_head() const { return kind != ModelKind::hyper; }

  // Layer widths of the target network: content -> h1 -> h2 -> h3 -> 1.
  std::array<int, 5> target_dims() const {
    return {content_dim, target_hidden[0], target_hidden[1], target_hidden[2], 1};
  }

  void validate() const {
    const auto positive = [](int v, const char* what) {
      if (v < 1) throw ValidationError(std::string(what) + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(backbone_hidden, "backbone_hidden");
    positive(semantic_dim, "semantic_dim");
    positive(content_dim, "content_dim");
    for (int h : target_hidden) positive(h, "target_hidden");
    positive(hyper_hidden, "hyper_hidden");
    positive(classifier_hidden, "classifier_hidden");
    positive(levels, "levels");
    positive(tokens, "tokens");
    positive(token_dim, "token_dim");
    positive(attention_dim, "attention_dim");
    positive(mal_count, "mal_count");
    for (int h : head_hidden) positive(h, "head_hidden");
    positive(embed_dim, "embed_dim");
    for (int h : gate_hidden) positive(h, "gate_hidden");
    if (has_scene_head() && scenes.empty()) {
      throw ValidationError("model '" + to_string(kind) + "' needs at least one training scene");
    }
  }
};

// Named parameter matrices with a group tag (used for per-group learning rates).
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::string group;
    Matrix value;
  };

  void add(std::string name, std::string group, Matrix value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(group), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }

  const Matrix& get(const std::string& name) const { return entries_[index_of(name)].value; }
  Matrix& get(const std::string& name) { return entries_[index_of(name)].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Parameters placed on a tape for one forward pass.
class Bound {
 public:
  Bound(ad::Tape& tape, const ParamStore& store) : store_(&store) {
    vars_.reserve(store.entries().size());
    for (const auto& e : store.entries()) vars_.push_back(tape.leaf(e.value));
  }

  // Binds variables already on a tape, one per store entry in entry order.
  Bound(const ParamStore& store, std::vector<Var> vars) : store_(&store), vars_(std::move(vars)) {
    if (vars_.size() != store.entries().size()) throw ValidationError("Bound: one variable per parameter required");
  }

  Var operator[](const std::string& name) const { return vars_[store_->index_of(name)]; }
  const std::vector<Var>& vars() const { return vars_; }

 private:
  const ParamStore* store_;
  std::vector<Var> vars_;
};

namespace init {

inline Matrix xavier(int rows, int cols, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Matrix zeros(int rows, int cols = 1) { return Matrix::Zero(rows, cols); }

}  // namespace init

// ---------------------------------------------------------------------------
// Parameter layout

namespace layout {

inline void add_dense(ParamStore& p, const std::string& name, const std::string& group, int out, int in,
                      std::mt19937_64& rng) {
  p.add(name + ".w", group, init::xavier(out, in, rng));
  p.add(name + ".b", group, init::zeros(out));
}

inline void add_backbone(ParamStore& p, const ModelConfig& c, std::mt19937_64& rng) {
  add_dense(p, "backbone.hidden", "backbone", c.backbone_hidden, c.input_dim, rng);
  add_dense(p, "backbone.semantic", "backbone", c.semantic_dim, c.backbone_hidden, rng);
  add_dense(p, "backbone.content", "backbone", c.content_dim, c.backbone_hidden, rng);
}

inline void add_hyper(ParamStore& p, const ModelConfig& c, std::mt19937_64& rng) {
  add_dense(p, "hyper.conv1", "hyper", c.hyper_hidden, c.semantic_dim, rng);
  add_dense(p, "hyper.conv2", "hyper", c.hyper_hidden, c.hyper_hidden, rng);
  add_dense(p, "hyper.conv3", "hyper", c.hyper_hidden, c.hyper_hidden, rng);
  const auto dims = c.target_dims();
  for (int l = 0; l < 4; ++l) {
    const int out = dims[l + 1], in = dims[l];
    const std::string prefix = "hyper.fc" + std::to_string(l);
    // Branch biases start at a Xavier draw of the target layer so the generated
    // network is well scaled before the content dependence is learned.
    const Matrix target_init = init::xavier(out, in, rng);
    p.add(prefix + ".weight_gen", "hyper", init::xavier(out * in, c.hyper_hidden, rng, 0.5));
    p.add(prefix + ".weight_base", "hyper", Eigen::Map<const Matrix>(target_init.data(), out * in, 1));
    p.add(prefix + ".bias_gen", "hyper", init::xavier(out, c.hyper_hidden, rng, 0.5));
    p.add(prefix + ".bias_base", "hyper", init::zeros(out));
  }
}

inline void add_classifier(ParamStore& p, const ModelConfig& c, std::mt19937_64& rng) {
  add_dense(p, "classifier.hidden", "classifier", c.classifier_hidden, c.semantic_dim, rng);
  add_dense(p, "classifier.logits", "classifier", c.scene_count(), c.classifier_hidden, rng);
}

inline void add_scale_table(ParamStore& p, const ModelConfig& c) {
  p.add("table.multiplier", "table", Matrix::Ones(c.scene_count(), 1));
  p.add("table.offset", "table", init::zeros(c.scene_count()));
}

inline void add_attention(ParamStore& p, const std::string& name, int features, int key_dim, std::mt19937_64& rng) {
  p.add(name + ".query", "mal", init::xavier(features, key_dim, rng));
  p.add(name + ".key", "mal", init::xavier(features, key_dim, rng));
  p.add(name + ".value", "mal", init::xavier(features, features, rng, 0.5));
}

// One multi-view attention block over `levels` inputs of tokens x dim.
inline void add_mal(ParamStore& p, const std::string& prefix, int levels, int tokens, int dim, int key_dim,
                    std::mt19937_64& rng) {
  for (int n = 0; n < levels; ++n) add_attention(p, prefix + ".sa" + std::to_string(n), dim, key_dim, rng);
  add_attention(p, prefix + ".pixel", dim * levels, key_dim, rng);
  add_attention(p, prefix + ".channel", tokens * levels, key_dim, rng);
}

inline void add_monet(ParamStore& p, const ModelConfig& c, std::mt19937_64& rng) {
  const int level_size = c.tokens * c.token_dim;
  for (int n = 0; n < c.levels; ++n) {
    add_dense(p, "monet.level" + std::to_string(n), "backbone", level_size, n == 0 ? c.input_dim : level_size, rng);
  }
  for (int m = 0; m < c.mal_count; ++m) {
    add_mal(p, "monet.mal" + std::to_string(m), c.levels, c.tokens, c.token_dim, c.attention_dim, rng);
  }
  add_mal(p, "monet.aggregate", 1, c.mal_count, c.opinion_dim(), c.attention_dim, rng);
  add_dense(p, "monet.reduce", "head", c.head_hidden[0], c.opinion_dim(), rng);
  add_dense(p, "monet.fc1", "head", c.head_hidden[1], c.head_hidden[0], rng);
  add_dense(p, "monet.fc2", "head", 1, c.head_hidden[1], rng);
  add_dense(p, "monet.scene", "classifier", c.scene_count(), c.opinion_dim(), rng);
}

inline void add_gated(ParamStore& p, const ModelConfig& c, std::mt19937_64& rng) {
  add_dense(p, "gated.global_embed", "backbone", c.embed_dim, c.input_dim, rng);
  add_dense(p, "gated.local_embed", "backbone", c.embed_dim, c.input_dim, rng);
  add_dense(p, "gated.scene", "classifier", c.scene_count(), c.embed_dim, rng);
  p.add("gated.global_bank.w", "regressors", init::xavier(c.scene_count(), c.embed_dim, rng));
  p.add("gated.global_bank.b", "regressors", init::zeros(c.scene_count()));
  p.add("gated.local_bank.w", "regressors", init::xavier(c.scene_count(), c.embed_dim, rng));
  p.add("gated.local_bank.b", "regressors", init::zeros(c.scene_count()));
  add_dense(p, "gate.fc1", "gate", c.gate_hidden[0], 2 * c.embed_dim, rng);
  add_dense(p, "gate.fc2", "gate", c.gate_hidden[1], c.gate_hidden[0], rng);
  add_dense(p, "gate.out", "gate", 1, c.gate_hidden[1], rng);
}

inline ParamStore build(const ModelConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  ParamStore p;
  switch (c.kind) {
    case ModelKind::hyper:
    case ModelKind::sem:
    case ModelKind::fhiqa:
      add_backbone(p, c, rng);
      add_hyper(p, c, rng);
      if (c.kind != ModelKind::hyper) {
        add_classifier(p, c, rng);
        add_scale_table(p, c);
      }
      break;
    case ModelKind::monet: add_monet(p, c, rng); break;
    case ModelKind::gated: add_gated(p, c, rng); break;
  }
  return p;
}

}  // namespace layout

// ---------------------------------------------------------------------------
// Graph-level building blocks (differentiable through the tape)

namespace graph {

inline Var dense(const Bound& p, const std::string& name, Var x) {
  return ad::add_col(ad::matmul(p[name + ".w"], x), p[name + ".b"]);
}

struct Backbone {
  Var semantic;  // semantic_dim x B
  Var content;   // content_dim x B
};

inline Backbone backbone(const Bound& p, Var x) {
  const Var hidden = ad::tanh(dense(p, "backbone.hidden", x));
  return {ad::tanh(dense(p, "backbone.semantic", hidden)), dense(p, "backbone.content", hidden)};
}

// Generated target network; weights[l] stores out*in x B (column-major per sample).
struct TargetGraph {
  std::array<Var, 4> weights;
  std::array<Var, 4> biases;
};

inline TargetGraph hyper_generate(const Bound& p, Var semantic) {
  Var z = ad::tanh(dense(p, "hyper.conv1", semantic));
  z = ad::tanh(dense(p, "hyper.conv2", z));
  z = ad::tanh(dense(p, "hyper.conv3", z));
  TargetGraph theta;
  for (int l = 0; l < 4; ++l) {
    const std::string prefix = "hyper.fc" + std::to_string(l);
    theta.weights[l] = ad::add_col(ad::matmul(p[prefix + ".weight_gen"], z), p[prefix + ".weight_base"]);
    theta.biases[l] = ad::add_col(ad::matmul(p[prefix + ".bias_gen"], z), p[prefix + ".bias_base"]);
  }
  return theta;
}

// Sigmoid on the three hidden layers, linear output; returns 1 x B.
inline Var target_forward(Var content, const TargetGraph& theta) {
  Var a = content;
  for (int l = 0; l < 4; ++l) {
    const Eigen::Index out = theta.biases[l].rows();
    a = ad::add(ad::batched_matvec(theta.weights[l], a, out), theta.biases[l]);
    if (l < 3) a = ad::sigmoid(a);
  }
  return a;
}

// Log-probabilities over training scenes, scenes x B.
inline Var scene_log_probs(const Bound& p, Var semantic) {
  const Var hidden = ad::tanh(dense(p, "classifier.hidden", semantic));
  return ad::log_softmax_cols(dense(p, "classifier.logits", hidden));
}

// sum_k w_k (m_k * pre + o_k) with weights scenes x B; pre is 1 x B.
inline Var weighted_rescale(Var pre, Var weights, Var multiplier, Var offset) {
  const Var slope = ad::matmul(ad::transpose(multiplier), weights);
  const Var shift = ad::matmul(ad::transpose(offset), weights);
  return ad::add(ad::hadamard(slope, pre), shift);
}

// Single-head scaled dot-product self-attention over the rows of x (tokens x
// features) with a residual path: x + softmax(Q K^T / sqrt(d)) (x W_v).
inline Var self_attention(const Bound& p, const std::string& name, Var x) {
  const Var q = ad::matmul(x, p[name + ".query"]);
  const Var k = ad::matmul(x, p[name + ".key"]);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Var attn = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
  return ad::add(x, ad::matmul(attn, ad::matmul(x, p[name + ".value"])));
}

// Index maps between the token layout (C x D*N, column n*D + d) and the
// channel layout (D x C*N, column n*C + c).
inline std::vector<Eigen::Index> to_channel_index(Eigen::Index tokens, Eigen::Index dim, Eigen::Index levels) {
  std::vector<Eigen::Index> index(static_cast<std::size_t>(tokens * dim * levels));
  for (Eigen::Index n = 0; n < levels; ++n)
    for (Eigen::Index c = 0; c < tokens; ++c)
      for (Eigen::Index d = 0; d < dim; ++d) {
        const Eigen::Index dst = d + dim * (n * tokens + c);     // (d, n*C + c) in D x CN
        const Eigen::Index src = c + tokens * (n * dim + d);     // (c, n*D + d) in C x DN
        index[static_cast<std::size_t>(dst)] = src;
      }
  return index;
}

inline std::vector<Eigen::Index> to_token_index(Eigen::Index tokens, Eigen::Index dim, Eigen::Index levels) {
  const auto forward = to_channel_index(tokens, dim, levels);
  std::vector<Eigen::Index> inverse(forward.size());
  for (std::size_t k = 0; k < forward.size(); ++k) inverse[static_cast<std::size_t>(forward[k])] = static_cast<Eigen::Index>(k);
  return inverse;
}

// Multi-view attention block: per-level self-attention, concatenation, a
// token-wise and a channel-wise attention branch, sum, average pool over tokens.
// Returns an opinion feature of length D*N (column vector).
inline Var mal_forward(const Bound& p, const std::string& prefix, const std::vector<Var>& levels) {
  if (levels.empty()) throw ValidationError("mal_forward: no input features");
  const Eigen::Index tokens = levels.front().rows(), dim = levels.front().cols();
  for (const auto& f : levels) {
    if (f.rows() != tokens || f.cols() != dim) throw ValidationError("mal_forward: input features differ in shape");
  }
  const auto n_levels = static_cast<Eigen::Index>(levels.size());
  std::vector<Var> attended;
  attended.reserve(levels.size());
  for (std::size_t n = 0; n < levels.size(); ++n) {
    attended.push_back(self_attention(p, prefix + ".sa" + std::to_string(n), levels[n]));
  }
  const Var fused = ad::concat_cols(attended);  // C x D*N
  const Var pixel = self_attention(p, prefix + ".pixel", fused);
  const Var channel_in = ad::gather(fused, to_channel_index(tokens, dim, n_levels), dim, tokens * n_levels);
  const Var channel_out = self_attention(p, prefix + ".channel", channel_in);
  const Var channel = ad::gather(channel_out, to_token_index(tokens, dim, n_levels), tokens, dim * n_levels);
  return ad::transpose(ad::mean_rows(ad::add(pixel, channel)));
}

struct MonetHeads {
  Var score;            // 1 x 1
  Var scene_log_probs;  // scenes x 1
};

// Aggregates M opinion features (each D*N x 1) into a score and a scene distribution.
inline MonetHeads monet_heads(const Bound& p, const std::vector<Var>& opinions) {
  std::vector<Var> rows;
  rows.reserve(opinions.size());
  for (const auto& o : opinions) rows.push_back(ad::transpose(o));
  const Var stacked = ad::concat_rows(rows);  // M x D*N
  const Var aggregate = mal_forward(p, "monet.aggregate", {stacked});
  Var h = ad::tanh(dense(p, "monet.reduce", aggregate));
  h = ad::tanh(dense(p, "monet.fc1", h));
  return {dense(p, "monet.fc2", h), ad::log_softmax_cols(dense(p, "monet.scene", aggregate))};
}

// Multi-level token features of one sample (input_dim x 1) -> N matrices C x D.
inline std::vector<Var> monet_levels(const Bound& p, const ModelConfig& c, Var x) {
  std::vector<Var> out;
  Var t = x;
  for (int n = 0; n < c.levels; ++n) {
    t = ad::tanh(dense(p, "monet.level" + std::to_string(n), t));
    out.push_back(ad::reshape(t, c.tokens, c.token_dim));
  }
  return out;
}

// Gate weight in (0, 1): two ReLU hidden layers and a sigmoid output. 1 x B.
inline Var gate_weight(const Bound& p, Var gate_input) {
  Var h = ad::relu(dense(p, "gate.fc1", gate_input));
  h = ad::relu(dense(p, "gate.fc2", h));
  return ad::sigmoid(dense(p, "gate.out", h));
}

// w * local + (1 - w) * global.
inline Var gated_fusion(Var q_global, Var q_local, Var w) {
  return ad::add(q_global, ad::hadamard(w, ad::sub(q_local, q_global)));
}

// Per-scene affine regressors; `selection` (scenes x B) is a one-hot of the
// true scene during training or the predicted scene distribution at test time.
inline Var regressor_bank(const Bound& p, const std::string& name, Var embedding, Var selection) {
  const Var per_scene = ad::add_col(ad::matmul(p[name + ".w"], embedding), p[name + ".b"]);  // S x B
  const Matrix ones = Matrix::Ones(1, per_scene.rows());
  return ad::matmul(ad::constant(*embedding.tape, ones), ad::hadamard(selection, per_scene));
}

}  // namespace graph

// ---------------------------------------------------------------------------
// Model

enum class Mode { train, test };

// Gated-model training presents each sample as global-only, local-only or joint.
inline constexpr std::array<double, 3> kGatedScenarioProbs{0.3, 0.3, 0.4};

struct ForwardContext {
  Mode mode = Mode::test;
  std::span<const int> scene_index;  // true scene per sample (train mode)
  std::mt19937_64* rng = nullptr;    // gated-model scenario sampling (train mode)
};

struct ForwardOutput {
  Var score;                          // 1 x B
  std::optional<Var> scene_log_probs;  // scenes x B
};

inline Matrix one_hot(std::span<const int> index, int classes) {
  Matrix m = Matrix::Zero(classes, static_cast<Eigen::Index>(index.size()));
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] < 0 || index[b] >= classes) throw ValidationError("scene index out of range");
    m(index[b], static_cast<Eigen::Index>(b)) = 1.0;
  }
  return m;
}

// One-hot of the most probable scene per column; ties go to the lowest index.
inline Matrix argmax_one_hot(const Matrix& probs) {
  Matrix m = Matrix::Zero(probs.rows(), probs.cols());
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.rows(); ++k) {
      if (probs(k, b) > probs(best, b)) best = k;
    }
    m(best, b) = 1.0;
  }
  return m;
}

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config) : config_(std::move(config)), params_(layout::build(config_)) {}
  Model(ModelConfig config, ParamStore params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  // inputs: input_dim x B.
  ForwardOutput forward(ad::Tape& tape, const Bound& p, const Matrix& inputs, const ForwardContext& ctx) const {
    if (inputs.rows() != config_.input_dim) {
      throw ValidationError("model input has " + std::to_string(inputs.rows()) + " features, expected " +
                            std::to_string(config_.input_dim));
    }
    const Var x = ad::constant(tape, inputs);
    switch (config_.kind) {
      case ModelKind::hyper:
      case ModelKind::sem:
      case ModelKind::fhiqa: return forward_hyper_family(tape, p, x);
      case ModelKind::monet: return forward_monet(p, x);
      case ModelKind::gated: return forward_gated(tape, p, x, ctx);
    }
    throw ValidationError("unknown model kind");
  }

  // Test-mode scores, one per column of `inputs`.
  std::vector<double> predict(const Matrix& inputs) const {
    ad::Tape tape;
    const Bound p(tape, params_);
    const auto out = forward(tape, p, inputs, {});
    const Matrix& v = out.score.value();
    return std::vector<double>(v.data(), v.data() + v.size());
  }

 private:
  ForwardOutput forward_hyper_family(ad::Tape& tape, const Bound& p, Var x) const {
    const auto features = graph::backbone(p, x);
    const auto theta = graph::hyper_generate(p, features.semantic);
    const Var pre = graph::target_forward(features.content, theta);
    if (config_.kind == ModelKind::hyper) return {pre, std::nullopt};
    const Var log_probs = graph::scene_log_probs(p, features.semantic);
    const Var weights = config_.kind == ModelKind::sem
                            ? ad::constant(tape, argmax_one_hot(log_probs.value()))
                            : ad::exp(log_probs);
    return {graph::weighted_rescale(pre, weights, p["table.multiplier"], p["table.offset"]), log_probs};
  }

  ForwardOutput forward_monet(const Bound& p, Var x) const {
    std::vector<Var> scores, scenes;
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
      const auto levels = graph::monet_levels(p, config_, ad::slice_cols(x, b, 1));
      std::vector<Var> opinions;
      for (int m = 0; m < config_.mal_count; ++m) {
        opinions.push_back(graph::mal_forward(p, "monet.mal" + std::to_string(m), levels));
      }
      const auto heads = graph::monet_heads(p, opinions);
      scores.push_back(heads.score);
      scenes.push_back(heads.scene_log_probs);
    }
    return {ad::concat_cols(scores), ad::concat_cols(scenes)};
  }

  ForwardOutput forward_gated(ad::Tape& tape, const Bound& p, Var x, const ForwardContext& ctx) const {
    const Var global = ad::tanh(graph::dense(p, "gated.global_embed", x));
    const Var local = ad::tanh(graph::dense(p, "gated.local_embed", x));
    const Var log_probs = ad::log_softmax_cols(graph::dense(p, "gated.scene", global));
    Var selection;
    if (ctx.mode == Mode::train) {
      if (ctx.scene_index.size() != static_cast<std::size_t>(x.cols())) {
        throw ValidationError("gated model in train mode needs the true scene of every sample");
      }
      selection = ad::constant(tape, one_hot(ctx.scene_index, config_.scene_count()));
    } else {
      selection = ad::exp(log_probs);
    }
    const Var q_global = graph::regressor_bank(p, "gated.global_bank", global, selection);
    const Var q_local = graph::regressor_bank(p, "gated.local_bank", local, selection);
    const Var w = graph::gate_weight(p, ad::concat_rows({global, local}));
    const Var fused = graph::gated_fusion(q_global, q_local, w);
    if (ctx.mode != Mode::train || ctx.rng == nullptr) return {fused, log_probs};

    Matrix only_global = Matrix::Zero(1, x.cols()), only_local = only_global, joint = only_global;
    std::discrete_distribution<int> scenario(kGatedScenarioProbs.begin(), kGatedScenarioProbs.end());
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
      switch (scenario(*ctx.rng)) {
        case 0: only_global(0, b) = 1.0; break;
        case 1: only_local(0, b) = 1.0; break;
        default: joint(0, b) = 1.0; break;
      }
    }
    Var out = ad::hadamard(ad::constant(tape, only_global), q_global);
    out = ad::add(out, ad::hadamard(ad::constant(tape, only_local), q_local));
    out = ad::add(out, ad::hadamard(ad::constant(tape, joint), fused));
    return {out, log_probs};
  }

  ModelConfig config_;
  ParamStore params_;
};

// ---------------------------------------------------------------------------
// Plain-value entry points for single samples

struct BackboneOutput {
  Vector semantic;
  Vector content;
};

struct TargetParams {
  std::array<Matrix, 4> weights;  // h1 x d_con, h2 x h1, h3 x h2, 1 x h3
  std::array<Vector, 4> biases;
};

struct SceneScaleTable {
  std::vector<double> multiplier;
  std::vector<double> offset;

  std::size_t size() const { return multiplier.size(); }

  static SceneScaleTable from_params(const ParamStore& p) {
    const Matrix& m = p.get("table.multiplier");
    const Matrix& o = p.get("table.offset");
    return {std::vector<double>(m.data(), m.data() + m.size()), std::vector<double>(o.data(), o.data() + o.size())};
  }
};

namespace detail {

inline Matrix column(const Vector& v) { return Matrix(v); }

inline Vector to_vector(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace detail

inline BackboneOutput backbone_forward(const Vector& input, const ParamStore& params) {
  if (input.size() != params.get("backbone.hidden.w").cols()) throw ValidationError("backbone_forward: input dimension mismatch");
  ad::Tape tape;
  const Bound p(tape, params);
  const auto out = graph::backbone(p, ad::constant(tape, detail::column(input)));
  return {detail::to_vector(out.semantic.value()), detail::to_vector(out.content.value())};
}

inline TargetParams hyper_generate(const Vector& semantic, const ParamStore& params, const ModelConfig& config) {
  if (semantic.size() != config.semantic_dim) throw ValidationError("hyper_generate: semantic dimension mismatch");
  ad::Tape tape;
  const Bound p(tape, params);
  const auto theta = graph::hyper_generate(p, ad::constant(tape, detail::column(semantic)));
  const auto dims = config.target_dims();
  TargetParams out;
  for (int l = 0; l < 4; ++l) {
    out.weights[l] = Eigen::Map<const Matrix>(theta.weights[l].value().data(), dims[l + 1], dims[l]);
    out.biases[l] = detail::to_vector(theta.biases[l].value());
  }
  return out;
}

inline double target_forward(const Vector& content, const TargetParams& theta) {
  if (content.size() != theta.weights[0].cols()) throw ValidationError("target_forward: content dimension mismatch");
  Vector a = content;
  for (int l = 0; l < 4; ++l) {
    if (theta.weights[l].cols() != a.size() || theta.weights[l].rows() != theta.biases[l].size()) {
      throw ValidationError("target_forward: inconsistent layer shapes");
    }
    a = theta.weights[l] * a + theta.biases[l];
    if (l < 3) a = (1.0 / (1.0 + (-a.array()).exp())).matrix();
  }
  if (a.size() != 1) throw ValidationError("target_forward: final layer must have one output");
  return a(0);
}

inline Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

inline Vector scene_classify(const Vector& semantic, const ParamStore& params) {
  if (semantic.size() != params.get("classifier.hidden.w").cols()) throw ValidationError("scene_classify: semantic dimension mismatch");
  ad::Tape tape;
  const Bound p(tape, params);
  const auto log_probs = graph::scene_log_probs(p, ad::constant(tape, detail::column(semantic)));
  return detail::to_vector(log_probs.value()).array().exp().matrix();
}

// m_k * pre + o_k for the most probable scene k (lowest index on ties).
inline double sem_rescale(double pre_score, std::span<const double> scene_probs, const SceneScaleTable& table) {
  if (table.size() == 0) throw ValidationError("sem_rescale: empty scene table");
  if (scene_probs.empty() || scene_probs.size() > table.size()) throw ValidationError("sem_rescale: table does not cover the scene vector");
  std::size_t best = 0;
  for (std::size_t k = 1; k < scene_probs.size(); ++k) {
    if (scene_probs[k] > scene_probs[best]) best = k;
  }
  return table.multiplier[best] * pre_score + table.offset[best];
}

// sum_k w_k (m_k * pre + o_k).
inline double fhiqa_rescale(double pre_score, std::span<const double> scene_probs, const SceneScaleTable& table) {
  if (scene_probs.size() != table.size() || table.offset.size() != table.size()) {
    throw ValidationError("fhiqa_rescale: table and probability sizes differ");
  }
  double q = 0.0;
  for (std::size_t k = 0; k < scene_probs.size(); ++k) {
    q += scene_probs[k] * (table.multiplier[k] * pre_score + table.offset[k]);
  }
  return q;
}

inline Vector mal_forward(const std::vector<Matrix>& basic_features, const ParamStore& params, const std::string& prefix) {
  ad::Tape tape;
  const Bound p(tape, params);
  std::vector<Var> levels;
  for (const auto& f : basic_features) levels.push_back(ad::constant(tape, f));
  return detail::to_vector(graph::mal_forward(p, prefix, levels).value());
}

struct MonetScore {
  double score = 0.0;
  Vector scene_probs;
};

inline MonetScore monet_score(const std::vector<Vector>& opinions, const ParamStore& params, const ModelConfig& config) {
  if (static_cast<int>(opinions.size()) != config.mal_count) throw ValidationError("monet_score: wrong number of opinion features");
  ad::Tape tape;
  const Bound p(tape, params);
  std::vector<Var> vars;
  for (const auto& o : opinions) {
    if (o.size() != config.opinion_dim()) throw ValidationError("monet_score: opinion feature length mismatch");
    vars.push_back(ad::constant(tape, detail::column(o)));
  }
  const auto heads = graph::monet_heads(p, vars);
  return {heads.score.value()(0, 0), detail::to_vector(heads.scene_log_probs.value()).array().exp().matrix()};
}

inline double gated_fusion(double q_global, double q_local, const Vector& gate_input, const ParamStore& params) {
  if (gate_input.size() != params.get("gate.fc1.w").cols()) throw ValidationError("gated_fusion: gate input dimension mismatch");
  ad::Tape tape;
  const Bound p(tape, params);
  const double w = graph::gate_weight(p, ad::constant(tape, detail::column(gate_input))).value()(0, 0);
  return w * q_local + (1.0 - w) * q_global;
}

struct RegressorBank {
  Matrix weights;  // scenes x embedding
  Vector bias;     // scenes
};

// Train mode applies the true scene's regressor; test mode returns the
// expectation over the predicted scene distribution.
inline double scene_regressor_bank(const Vector& embedding, std::span<const double> scene_probs, const RegressorBank& bank,
                                   Mode mode, std::optional<int> true_scene = std::nullopt) {
  const auto scenes = bank.weights.rows();
  if (bank.weights.cols() != embedding.size() || bank.bias.size() != scenes) throw ValidationError("scene_regressor_bank: shape mismatch");
  const Vector per_scene = bank.weights * embedding + bank.bias;
  if (mode == Mode::train) {
    if (!true_scene || *true_scene < 0 || *true_scene >= scenes) throw ValidationError("scene_regressor_bank: unknown scene id");
    return per_scene(*true_scene);
  }
  if (static_cast<Eigen::Index>(scene_probs.size()) != scenes) throw ValidationError("scene_regressor_bank: bank does not cover all scenes");
  double q = 0.0;
  for (Eigen::Index s = 0; s < scenes; ++s) q += scene_probs[static_cast<std::size_t>(s)] * per_scene(s);
  return q;
}

}  // namespace sceneiqa::models
