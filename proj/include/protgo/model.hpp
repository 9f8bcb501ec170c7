#pragma once

// Aspect-specific transformer encoder: summed token / positional / segment
// embeddings, a stack of post-norm encoder layers, mean pooling and two heads
// (GO-term classifier and masked-residue predictor).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "protgo/error.hpp"
#include "protgo/ingest.hpp"
#include "protgo/rng.hpp"
#include "protgo/tensor.hpp"

namespace protgo {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = token::kVocabSize;
  std::size_t max_len = 1000;
  std::size_t num_labels = 100;
  double dropout = 0.1;

  std::size_t d_head() const { return d_model / num_heads; }
  std::size_t num_positions() const { return max_len + 2; }

  void validate() const {
    if (num_layers == 0 || d_model == 0 || num_heads == 0 || d_ff == 0 || num_labels == 0) {
      throw Error("model dimensions must be positive");
    }
    if (d_model % num_heads != 0) {
      throw Error("d_model (" + std::to_string(d_model) + ") must be divisible by num_heads (" +
                  std::to_string(num_heads) + ")");
    }
    if (max_len < 1) throw Error("max_len must be at least 1");
    if (vocab_size != static_cast<std::size_t>(token::kVocabSize)) {
      throw Error("vocab_size must be " + std::to_string(token::kVocabSize));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"d_model", c.d_model},   {"num_heads", c.num_heads},
                     {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
                     {"num_labels", c.num_labels}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "num_layers") c.num_layers = value.get<std::size_t>();
    else if (key == "d_model") c.d_model = value.get<std::size_t>();
    else if (key == "num_heads") c.num_heads = value.get<std::size_t>();
    else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
    else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
    else if (key == "max_len") c.max_len = value.get<std::size_t>();
    else if (key == "num_labels") c.num_labels = value.get<std::size_t>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else throw Error("unknown model config field '" + key + "'");
  }
}

// ---------------------------------------------------------------------------
// Freeze masks.

enum class TrainPhase { Pretrain, Finetune };

inline std::string layer_group(std::size_t i) { return "layer_" + std::to_string(i); }

inline std::vector<std::string> parameter_groups(const ModelConfig& cfg) {
  std::vector<std::string> g = {"token_embedding", "positional_embedding", "segment_embedding"};
  for (std::size_t i = 0; i < cfg.num_layers; ++i) g.push_back(layer_group(i));
  g.insert(g.end(), {"pooler", "classifier", "mlm_head"});
  return g;
}

// Group name -> frozen. "pooler" is kept for layout compatibility; mean pooling owns no arrays.
struct FreezeMask {
  std::map<std::string, bool> frozen;

  bool is_frozen(const std::string& group) const {
    const auto it = frozen.find(group);
    return it != frozen.end() && it->second;
  }

  static FreezeMask none(const ModelConfig& cfg) {
    FreezeMask m;
    for (const auto& g : parameter_groups(cfg)) m.frozen[g] = false;
    return m;
  }

  // Embeddings and the lower half of the encoder stay at their pretrained
  // values; the unused masked-LM head is frozen too.
  static FreezeMask default_finetune(const ModelConfig& cfg) {
    FreezeMask m = none(cfg);
    m.frozen["token_embedding"] = m.frozen["positional_embedding"] = m.frozen["segment_embedding"] = true;
    for (std::size_t i = 0; i < cfg.num_layers / 2; ++i) m.frozen[layer_group(i)] = true;
    m.frozen["pooler"] = true;
    m.frozen["mlm_head"] = true;
    return m;
  }

  static FreezeMask all_but_classifier(const ModelConfig& cfg) {
    FreezeMask m;
    for (const auto& g : parameter_groups(cfg)) m.frozen[g] = g != "classifier";
    return m;
  }

  // The classifier is not used while pretraining.
  static FreezeMask default_pretrain(const ModelConfig& cfg) {
    FreezeMask m = none(cfg);
    m.frozen["classifier"] = true;
    return m;
  }

  bool operator==(const FreezeMask&) const = default;
};

inline void to_json(nlohmann::json& j, const FreezeMask& m) { j = m.frozen; }
inline void from_json(const nlohmann::json& j, FreezeMask& m) { m.frozen = j.get<std::map<std::string, bool>>(); }

// ---------------------------------------------------------------------------

struct NamedParameter {
  std::string name;
  std::string group;
  Tensor tensor;
};

struct EncoderLayerParams {
  std::vector<Tensor> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;  // one per head
  Tensor out_weight, out_bias;
  Tensor ln1_gamma, ln1_beta;
  Tensor ff1_weight, ff1_bias, ff2_weight, ff2_bias;
  Tensor ln2_gamma, ln2_beta;
};

inline constexpr double kLayerNormEps = 1e-12;

// Additive attention mask: -inf in every column whose key position is padding.
inline Tensor attention_mask(const Tensor& pad_mask) {
  const std::size_t len = pad_mask.dim(0);
  Tensor m({len, len}, 0.0);
  for (std::size_t j = 0; j < len; ++j) {
    if (pad_mask[j] != 0.0) continue;
    for (std::size_t i = 0; i < len; ++i) m[i * len + j] = -std::numeric_limits<double>::infinity();
  }
  return m;
}

// h = LN(x + MHA(x)); out = LN(h + FFN(h)). pad_mask[i] = 1 for real tokens, 0 for padding.
inline Tensor encoder_layer(Tape& tape, const Tensor& x, const EncoderLayerParams& p, const Tensor& pad_mask,
                            double dropout_rate = 0.0, Rng* dropout_rng = nullptr) {
  const std::size_t heads = p.q_weight.size();
  const std::size_t d_head = p.q_weight.front().dim(1);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d_head));
  const Tensor mask = attention_mask(pad_mask);

  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = add_bias(tape, matmul(tape, x, p.q_weight[h]), p.q_bias[h]);
    const auto k = add_bias(tape, matmul(tape, x, p.k_weight[h]), p.k_bias[h]);
    const auto v = add_bias(tape, matmul(tape, x, p.v_weight[h]), p.v_bias[h]);
    const auto scores = add(tape, scale(tape, matmul(tape, q, transpose(tape, k)), scale_factor), mask);
    const auto weights = softmax(tape, scores, 1);
    contexts.push_back(matmul(tape, weights, v));
  }
  const auto merged = heads == 1 ? contexts.front() : concat(tape, contexts, 1);
  auto attn = add_bias(tape, matmul(tape, merged, p.out_weight), p.out_bias);
  attn = dropout(tape, attn, dropout_rate, dropout_rng);
  const auto h = layer_norm(tape, add(tape, x, attn), p.ln1_gamma, p.ln1_beta, kLayerNormEps);

  const auto inner = gelu(tape, add_bias(tape, matmul(tape, h, p.ff1_weight), p.ff1_bias));
  auto ff = add_bias(tape, matmul(tape, inner, p.ff2_weight), p.ff2_bias);
  ff = dropout(tape, ff, dropout_rate, dropout_rng);
  return layer_norm(tape, add(tape, h, ff), p.ln2_gamma, p.ln2_beta, kLayerNormEps);
}

inline Tensor padding_mask(const TokenSequence& tokens) {
  Tensor m({tokens.size()}, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = tokens.ids[i] != token::kPad ? 1.0 : 0.0;
  return m;
}

struct ParameterSpec {
  std::string name;
  std::string group;
  Shape shape;
  double fill = 0.0;
  bool random = false;  // N(0, 0.02) instead of `fill`
};

// Every parameter array in storage order. Weights are random, biases and
// layer-norm shifts 0, layer-norm scales 1; both output heads start at zero so
// initial predictions are uniform.
inline std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg) {
  std::vector<ParameterSpec> out;
  const auto d = cfg.d_model;
  const auto add = [&](std::string name, const std::string& group, Shape shape, double fill, bool random) {
    out.push_back({std::move(name), group, std::move(shape), fill, random});
  };
  add("token_embedding", "token_embedding", {cfg.vocab_size, d}, 0.0, true);
  add("positional_embedding", "positional_embedding", {cfg.num_positions(), d}, 0.0, true);
  add("segment_embedding", "segment_embedding", {2, d}, 0.0, true);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto g = layer_group(l);
    for (const char* proj : {"q", "k", "v"}) {
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const auto base = g + ".attn." + proj + ".head" + std::to_string(h);
        add(base + ".weight", g, {d, cfg.d_head()}, 0.0, true);
        add(base + ".bias", g, {cfg.d_head()}, 0.0, false);
      }
    }
    add(g + ".attn.out.weight", g, {d, d}, 0.0, true);
    add(g + ".attn.out.bias", g, {d}, 0.0, false);
    add(g + ".ln1.gamma", g, {d}, 1.0, false);
    add(g + ".ln1.beta", g, {d}, 0.0, false);
    add(g + ".ffn.fc1.weight", g, {d, cfg.d_ff}, 0.0, true);
    add(g + ".ffn.fc1.bias", g, {cfg.d_ff}, 0.0, false);
    add(g + ".ffn.fc2.weight", g, {cfg.d_ff, d}, 0.0, true);
    add(g + ".ffn.fc2.bias", g, {d}, 0.0, false);
    add(g + ".ln2.gamma", g, {d}, 1.0, false);
    add(g + ".ln2.beta", g, {d}, 0.0, false);
  }
  add("classifier.weight", "classifier", {d, cfg.num_labels}, 0.0, false);
  add("classifier.bias", "classifier", {cfg.num_labels}, 0.0, false);
  add("mlm_head.weight", "mlm_head", {d, cfg.vocab_size}, 0.0, false);
  add("mlm_head.bias", "mlm_head", {cfg.vocab_size}, 0.0, false);
  return out;
}

class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    for (auto& spec : parameter_layout(config_)) {
      Tensor t(spec.shape, spec.fill, true);
      if (spec.random) {
        for (double& v : t.data()) v = rng.normal(0.0, 0.02);
      }
      params_.push_back({std::move(spec.name), std::move(spec.group), std::move(t)});
    }
    freeze_ = FreezeMask::none(config_);
    rebuild_views();
  }

  Model(const Model& other) : config_(other.config_), freeze_(other.freeze_) {
    for (const auto& p : other.params_) params_.push_back({p.name, p.group, p.tensor.clone()});
    rebuild_views();
  }

  Model& operator=(const Model& other) {
    if (this != &other) {
      Model copy(other);
      *this = std::move(copy);
    }
    return *this;
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

  Tensor& parameter(std::string_view name) { return params_.at(index_of(name)).tensor; }
  const Tensor& parameter(std::string_view name) const { return params_.at(index_of(name)).tensor; }

  const EncoderLayerParams& layer(std::size_t i) const { return layers_.at(i); }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  // Copies parameter values (not structure) from a model with the same config.
  void copy_weights_from(const Model& other) {
    if (other.config_ != config_) throw Error("cannot copy weights between models with different configs");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.values() = other.params_[i].tensor.values();
  }

  const FreezeMask& freeze_mask() const { return freeze_; }

  // Frozen groups stop requiring gradients, so they receive no gradient and the optimiser skips them.
  void apply_freeze(const FreezeMask& mask, TrainPhase phase) {
    const auto groups = parameter_groups(config_);
    for (const auto& g : groups) {
      if (!mask.frozen.count(g)) throw Error("freeze mask is missing group '" + g + "'");
    }
    for (const auto& [g, _] : mask.frozen) {
      if (std::find(groups.begin(), groups.end(), g) == groups.end()) {
        throw Error("freeze mask names unknown group '" + g + "'");
      }
    }
    if (phase == TrainPhase::Finetune && mask.is_frozen("classifier")) {
      throw Error("the classifier cannot be frozen during fine-tuning");
    }
    freeze_ = mask;
    for (auto& p : params_) {
      p.tensor.set_requires_grad(!mask.is_frozen(p.group));
      if (mask.is_frozen(p.group)) p.tensor.drop_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // token_embedding[ids] + positional_embedding[0..L) + segment_embedding[0].
  Tensor embed(Tape& tape, const TokenSequence& tokens) const {
    const std::size_t len = tokens.size();
    if (len == 0) throw Error("cannot embed an empty token sequence");
    if (len > config_.num_positions()) {
      throw Error("sequence of " + std::to_string(len) + " tokens exceeds the " +
                  std::to_string(config_.num_positions()) + " learned positions");
    }
    for (auto id : tokens.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw Error("token id " + std::to_string(id) + " outside vocabulary");
      }
    }
    std::vector<std::int32_t> positions(len);
    std::iota(positions.begin(), positions.end(), 0);
    const std::vector<std::int32_t> segments(len, 0);
    const auto tok = embedding_lookup(tape, token_embedding_, tokens.ids);
    const auto pos = embedding_lookup(tape, positional_embedding_, positions);
    const auto seg = embedding_lookup(tape, segment_embedding_, segments);
    return add(tape, add(tape, tok, pos), seg);
  }

  // Final encoder states [L x d_model]. A null dropout_rng runs in evaluation mode.
  Tensor encode(Tape& tape, const TokenSequence& tokens, Rng* dropout_rng = nullptr) const {
    const Tensor mask = padding_mask(tokens);
    Tensor x = embed(tape, tokens);
    for (const auto& layer : layers_) x = encoder_layer(tape, x, layer, mask, config_.dropout, dropout_rng);
    return x;
  }

  // Pre-sigmoid scores, one per vocabulary term.
  Tensor forward_classify(Tape& tape, const TokenSequence& tokens, Rng* dropout_rng = nullptr) const {
    const auto states = encode(tape, tokens, dropout_rng);
    const auto pooled = mean_pool(tape, states, padding_mask(tokens));
    const auto row = reshape(tape, pooled, {1, config_.d_model});
    const auto logits = add_bias(tape, matmul(tape, row, classifier_weight_), classifier_bias_);
    return reshape(tape, logits, {config_.num_labels});
  }

  // Vocabulary logits at every position [L x vocab_size].
  Tensor forward_mlm(Tape& tape, const TokenSequence& tokens, Rng* dropout_rng = nullptr) const {
    if (std::find(tokens.ids.begin(), tokens.ids.end(), token::kMask) == tokens.ids.end()) {
      throw Error("masked-LM forward needs at least one MASK position");
    }
    const auto states = encode(tape, tokens, dropout_rng);
    return add_bias(tape, matmul(tape, states, mlm_weight_), mlm_bias_);
  }

 private:
  std::size_t index_of(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error("no parameter named '" + std::string(name) + "'");
    return it->second;
  }

  void rebuild_views() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
    token_embedding_ = parameter("token_embedding");
    positional_embedding_ = parameter("positional_embedding");
    segment_embedding_ = parameter("segment_embedding");
    classifier_weight_ = parameter("classifier.weight");
    classifier_bias_ = parameter("classifier.bias");
    mlm_weight_ = parameter("mlm_head.weight");
    mlm_bias_ = parameter("mlm_head.bias");
    layers_.clear();
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto g = layer_group(l);
      EncoderLayerParams p;
      for (std::size_t h = 0; h < config_.num_heads; ++h) {
        const auto head = ".head" + std::to_string(h);
        p.q_weight.push_back(parameter(g + ".attn.q" + head + ".weight"));
        p.q_bias.push_back(parameter(g + ".attn.q" + head + ".bias"));
        p.k_weight.push_back(parameter(g + ".attn.k" + head + ".weight"));
        p.k_bias.push_back(parameter(g + ".attn.k" + head + ".bias"));
        p.v_weight.push_back(parameter(g + ".attn.v" + head + ".weight"));
        p.v_bias.push_back(parameter(g + ".attn.v" + head + ".bias"));
      }
      p.out_weight = parameter(g + ".attn.out.weight");
      p.out_bias = parameter(g + ".attn.out.bias");
      p.ln1_gamma = parameter(g + ".ln1.gamma");
      p.ln1_beta = parameter(g + ".ln1.beta");
      p.ff1_weight = parameter(g + ".ffn.fc1.weight");
      p.ff1_bias = parameter(g + ".ffn.fc1.bias");
      p.ff2_weight = parameter(g + ".ffn.fc2.weight");
      p.ff2_bias = parameter(g + ".ffn.fc2.bias");
      p.ln2_gamma = parameter(g + ".ln2.gamma");
      p.ln2_beta = parameter(g + ".ln2.beta");
      layers_.push_back(std::move(p));
    }
  }

  ModelConfig config_;
  std::vector<NamedParameter> params_;
  std::map<std::string, std::size_t> index_;
  FreezeMask freeze_;
  std::vector<EncoderLayerParams> layers_;
  Tensor token_embedding_, positional_embedding_, segment_embedding_;
  Tensor classifier_weight_, classifier_bias_, mlm_weight_, mlm_bias_;
};

}  // namespace protgo
