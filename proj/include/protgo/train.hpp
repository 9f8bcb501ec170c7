#pragma once

// Masked-LM pretraining and multi-label fine-tuning.
//
// Samples are processed one at a time; each sample's loss is scaled by
// 1/(samples in the optimiser step) before backward, so gradients summed over
// micro-batches equal the gradient of the step's mean loss. Micro-batch size
// and accumulation factor therefore only decide where step boundaries fall.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protgo/checkpoint.hpp"
#include "protgo/error.hpp"
#include "protgo/ingest.hpp"
#include "protgo/model.hpp"
#include "protgo/rng.hpp"
#include "protgo/tensor.hpp"

namespace protgo {

enum class LrSchedule { Constant, Linear };
enum class FinetuneLoss { Binary, Categorical };

inline std::string lr_schedule_name(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "linear"; }

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "linear") return LrSchedule::Linear;
  throw Error("lr_schedule must be \"constant\" or \"linear\", got \"" + s + "\"");
}

inline std::string finetune_loss_name(FinetuneLoss l) { return l == FinetuneLoss::Binary ? "bce" : "categorical"; }

inline FinetuneLoss parse_finetune_loss(const std::string& s) {
  if (s == "bce") return FinetuneLoss::Binary;
  if (s == "categorical") return FinetuneLoss::Categorical;
  throw Error("loss must be \"bce\" or \"categorical\", got \"" + s + "\"");
}

struct PretrainConfig {
  double mask_probability = 0.15;
  std::size_t epochs = 10;
  double learning_rate = 0.002;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::size_t grad_accumulation = 1;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::Constant;

  void validate() const {
    if (!(mask_probability > 0.0 && mask_probability < 1.0)) throw Error("mask_probability out of (0,1)");
    if (epochs == 0) throw Error("epochs must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw Error("weight_decay must be non-negative");
    if (batch_size == 0) throw Error("batch_size must be at least 1");
    if (grad_accumulation == 0) throw Error("grad_accumulation must be at least 1");
  }
};

struct FinetuneConfig {
  std::size_t epochs = 10;
  double learning_rate = 5e-4;
  std::size_t grad_accumulation = 32;
  std::size_t batch_size = 1;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::Constant;
  FinetuneLoss loss = FinetuneLoss::Binary;

  void validate() const {
    if (epochs == 0) throw Error("epochs must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
    if (grad_accumulation == 0) throw Error("grad_accumulation must be at least 1");
    if (batch_size == 0) throw Error("batch_size must be at least 1");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error("threshold out of [0,1]");
  }
};

namespace detail {

template <class T>
T config_field(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error("config field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"mask_probability", c.mask_probability}, {"epochs", c.epochs},
       {"learning_rate", c.learning_rate},       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},             {"grad_accumulation", c.grad_accumulation},
       {"seed", c.seed},                         {"lr_schedule", lr_schedule_name(c.lr_schedule)}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (!j.is_object()) throw Error("pretraining config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    using detail::config_field;
    if (key == "mask_probability") c.mask_probability = config_field<double>(v, key);
    else if (key == "epochs") c.epochs = config_field<std::size_t>(v, key);
    else if (key == "learning_rate") c.learning_rate = config_field<double>(v, key);
    else if (key == "weight_decay") c.weight_decay = config_field<double>(v, key);
    else if (key == "batch_size") c.batch_size = config_field<std::size_t>(v, key);
    else if (key == "grad_accumulation") c.grad_accumulation = config_field<std::size_t>(v, key);
    else if (key == "seed") c.seed = config_field<std::uint64_t>(v, key);
    else if (key == "lr_schedule") c.lr_schedule = parse_lr_schedule(config_field<std::string>(v, key));
    else throw Error("unknown config field '" + key + "'");
  }
  c.validate();
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"epochs", c.epochs},         {"learning_rate", c.learning_rate},
       {"grad_accumulation", c.grad_accumulation}, {"batch_size", c.batch_size},
       {"threshold", c.threshold},   {"seed", c.seed},
       {"lr_schedule", lr_schedule_name(c.lr_schedule)}, {"loss", finetune_loss_name(c.loss)}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  if (!j.is_object()) throw Error("fine-tuning config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    using detail::config_field;
    if (key == "epochs") c.epochs = config_field<std::size_t>(v, key);
    else if (key == "learning_rate") c.learning_rate = config_field<double>(v, key);
    else if (key == "grad_accumulation") c.grad_accumulation = config_field<std::size_t>(v, key);
    else if (key == "batch_size") c.batch_size = config_field<std::size_t>(v, key);
    else if (key == "threshold") c.threshold = config_field<double>(v, key);
    else if (key == "seed") c.seed = config_field<std::uint64_t>(v, key);
    else if (key == "lr_schedule") c.lr_schedule = parse_lr_schedule(config_field<std::string>(v, key));
    else if (key == "loss") c.loss = parse_finetune_loss(config_field<std::string>(v, key));
    else throw Error("unknown config field '" + key + "'");
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Masking and losses.

struct MaskedSequence {
  TokenSequence tokens;
  std::vector<std::size_t> positions;  // ascending
  std::vector<std::int32_t> targets;   // original ids at `positions`
};

inline bool is_residue_token(std::int32_t id) { return id != token::kPad && id != token::kCls && id != token::kSep; }

// Every residue position (not CLS/SEP/PAD) is masked independently with
// probability p; if none is drawn, one uniformly chosen position is forced.
inline MaskedSequence mask_tokens(const TokenSequence& tokens, double p, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (is_residue_token(tokens.ids[i])) candidates.push_back(i);
  }
  if (candidates.empty()) throw Error("sequence has no residue positions to mask");
  MaskedSequence out;
  out.tokens = tokens;
  for (auto i : candidates) {
    if (rng.uniform() < p) out.positions.push_back(i);
  }
  if (out.positions.empty()) out.positions.push_back(candidates[rng.below(candidates.size())]);
  for (auto i : out.positions) {
    out.targets.push_back(tokens.ids[i]);
    out.tokens.ids[i] = token::kMask;
  }
  return out;
}

// Mean over targets of -log softmax(logits[position])[target].
inline Tensor mlm_loss(Tape& tape, const Tensor& logits, const std::vector<std::size_t>& positions,
                       const std::vector<std::int32_t>& targets) {
  if (positions.empty()) throw Error("mlm_loss needs at least one target");
  if (positions.size() != targets.size()) throw ShapeError("mlm_loss: positions and targets differ in length");
  if (logits.rank() != 2) throw ShapeError("mlm_loss expects [L x V] logits, got " + shape_str(logits.shape()));
  const std::size_t len = logits.dim(0), vocab = logits.dim(1);
  const double inv = 1.0 / static_cast<double>(positions.size());
  // softmax rows for the gradient, computed once
  std::vector<double> probs(positions.size() * vocab);
  double total = 0.0;
  for (std::size_t t = 0; t < positions.size(); ++t) {
    const auto r = positions[t];
    const auto y = static_cast<std::size_t>(targets[t]);
    if (r >= len || y >= vocab) throw ShapeError("mlm_loss: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, logits.at(r, v));
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(logits.at(r, v) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t v = 0; v < vocab; ++v) probs[t * vocab + v] = std::exp(logits.at(r, v) - lse);
    total += lse - logits.at(r, y);
  }
  const bool track = detail::tracks(tape, {&logits});
  Tensor out = Tensor::scalar(total * inv, track);
  if (track) {
    tape.record(out, [logits, out, positions, targets, probs = std::move(probs), vocab, inv]() {
      const double g = out.grad()[0] * inv;
      auto gl = logits.grad();
      for (std::size_t t = 0; t < positions.size(); ++t) {
        const auto row = positions[t] * vocab;
        for (std::size_t v = 0; v < vocab; ++v) gl[row + v] += g * probs[t * vocab + v];
        gl[row + static_cast<std::size_t>(targets[t])] -= g;
      }
    });
  }
  return out;
}

inline Tensor mlm_loss(Tape& tape, const Tensor& logits, const MaskedSequence& m) {
  return mlm_loss(tape, logits, m.positions, m.targets);
}

// Per-label binary cross-entropy, averaged over labels:
// mean_j softplus(z_j) - y_j z_j  ==  -[y log s(z) + (1-y) log(1-s(z))].
inline Tensor binary_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::uint8_t>& target) {
  if (logits.numel() != target.size()) {
    throw ShapeError("finetune_loss: " + std::to_string(logits.numel()) + " logits but " +
                     std::to_string(target.size()) + " labels");
  }
  const std::size_t k = target.size();
  const double inv = 1.0 / static_cast<double>(k);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) total += softplus(logits[j]) - (target[j] ? logits[j] : 0.0);
  const bool track = detail::tracks(tape, {&logits});
  Tensor out = Tensor::scalar(total * inv, track);
  if (track) {
    tape.record(out, [logits, out, target, inv]() {
      const double g = out.grad()[0] * inv;
      auto gl = logits.grad();
      for (std::size_t j = 0; j < target.size(); ++j) gl[j] += g * (sigmoid(logits[j]) - (target[j] ? 1.0 : 0.0));
    });
  }
  return out;
}

// -sum_j y_j log softmax(z)_j. A label vector with no positives contributes 0.
inline Tensor categorical_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::uint8_t>& target) {
  if (logits.numel() != target.size()) {
    throw ShapeError("finetune_loss: " + std::to_string(logits.numel()) + " logits but " +
                     std::to_string(target.size()) + " labels");
  }
  const std::size_t k = target.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[j] - mx);
  const double lse = mx + std::log(z);
  double total = 0.0, positives = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (target[j]) {
      total += lse - logits[j];
      positives += 1.0;
    }
  }
  const bool track = detail::tracks(tape, {&logits});
  Tensor out = Tensor::scalar(total, track);
  if (track) {
    tape.record(out, [logits, out, target, lse, positives]() {
      const double g = out.grad()[0];
      auto gl = logits.grad();
      for (std::size_t j = 0; j < target.size(); ++j) {
        gl[j] += g * (positives * std::exp(logits[j] - lse) - (target[j] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

inline Tensor finetune_loss(Tape& tape, const Tensor& logits, const std::vector<std::uint8_t>& target,
                            FinetuneLoss kind = FinetuneLoss::Binary) {
  return kind == FinetuneLoss::Binary ? binary_cross_entropy(tape, logits, target)
                                      : categorical_cross_entropy(tape, logits, target);
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Parameters in frozen groups are skipped entirely; an unfrozen parameter
// without a gradient buffer is treated as having a zero gradient.
inline void adam_step(Model& model, OptimizerState& state, const AdamHyper& h) {
  const auto& mask = model.freeze_mask();
  for (const auto& p : model.parameters()) {
    if (mask.is_frozen(p.group) || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw Error("non-finite gradient in parameter group '" + p.group + "' (" + p.name + ")");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (auto& p : model.parameters()) {
    if (mask.is_frozen(p.group)) continue;
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    const std::size_t n = p.tensor.numel();
    m.resize(n, 0.0);
    v.resize(n, 0.0);
    auto theta = p.tensor.data();
    const bool has_grad = p.tensor.has_grad();
    const auto grad = has_grad ? p.tensor.grad() : std::span<double>();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      theta[i] -= h.learning_rate * h.weight_decay * theta[i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] -= h.learning_rate * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct LossRecord {
  std::uint64_t step = 0;  // 1-based global optimiser step
  std::size_t epoch = 0;   // 1-based
  std::string aspect;
  double loss = 0.0;

  bool operator==(const LossRecord&) const = default;
};

struct LabeledSequence {
  std::string accession;
  TokenSequence tokens;
  std::vector<std::uint8_t> labels;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::string aspect = "-";
  std::optional<FreezeMask> freeze;  // default: the phase's default mask
  std::optional<ModelCheckpoint> resume;
  std::function<void(const Model&, const LossRecord&)> on_step;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<LossRecord> losses;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

struct LoopSettings {
  TrainPhase phase = TrainPhase::Finetune;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 1;
  std::size_t grad_accumulation = 1;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::Constant;
  nlohmann::json config_json;
};

// Stream ids under the run seed.
inline constexpr std::uint64_t kDropoutStream = 0x6d61736b;  // also drives masking
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, std::size_t epoch) { return derive_seed(seed, epoch); }

namespace detail {

inline std::string format_loss(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Keeps the header and rows up to `keep_steps` so a resumed run continues a clean log.
inline void prepare_loss_csv(const std::filesystem::path& path, std::uint64_t keep_steps) {
  std::vector<std::string> kept;
  if (keep_steps > 0 && std::filesystem::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      if (std::stoull(line.substr(0, comma)) <= keep_steps) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,epoch,aspect,loss\n";
  for (const auto& l : kept) out << l << '\n';
}

template <class Example, class SampleLoss>
TrainResult run_training(Model& model, const std::vector<Example>& data, const LoopSettings& s,
                         const TrainOptions& opt, SampleLoss&& sample_loss) {
  if (data.empty()) throw Error("training data is empty");
  const FreezeMask mask = opt.freeze ? *opt.freeze
                          : s.phase == TrainPhase::Pretrain ? FreezeMask::default_pretrain(model.config())
                                                            : FreezeMask::default_finetune(model.config());

  OptimizerState adam;
  Rng rng(derive_seed(s.seed, kDropoutStream));
  TrainingProgress progress;
  if (opt.resume) {
    if (opt.resume->config != model.config()) throw Error("resume checkpoint config differs from the model config");
    restore(model, *opt.resume);
    if (opt.resume->optimizer) adam = *opt.resume->optimizer;
    if (!opt.resume->rng_state.empty()) rng.set_state(opt.resume->rng_state);
    progress = opt.resume->progress;
  }
  model.apply_freeze(mask, s.phase);

  const std::size_t step_size = s.batch_size * s.grad_accumulation;
  const std::size_t steps_per_epoch = (data.size() + step_size - 1) / step_size;
  const double total_steps = static_cast<double>(steps_per_epoch * s.epochs);

  std::ofstream csv;
  const bool writing = !opt.out_dir.empty();
  if (writing) {
    std::filesystem::create_directories(opt.out_dir);
    detail::prepare_loss_csv(opt.out_dir / "loss.csv", progress.global_step);
    csv.open(opt.out_dir / "loss.csv", std::ios::app);
    if (!csv) throw IoError("cannot append to " + (opt.out_dir / "loss.csv").string());
  }

  const auto make_checkpoint = [&] {
    auto ck = snapshot(model);
    ck.optimizer = adam;
    ck.rng_state = rng.state();
    ck.progress = progress;
    ck.metadata = {{"phase", s.phase == TrainPhase::Pretrain ? "pretrain" : "finetune"},
                   {"aspect", opt.aspect},
                   {"train_config", s.config_json}};
    return ck;
  };

  TrainResult result;
  Rng* dropout_rng = model.config().dropout > 0.0 ? &rng : nullptr;
  for (std::size_t epoch = progress.epochs_completed; epoch < s.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(epoch_shuffle_seed(s.seed, epoch));
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += step_size) {
      const std::size_t end = std::min(order.size(), start + step_size);
      const double scale_by = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      double step_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        Tape tape;
        const Tensor loss = sample_loss(tape, data[order[i]], rng, dropout_rng);
        if (!std::isfinite(loss.item())) {
          throw NonFiniteLossError("non-finite loss at step " + std::to_string(progress.global_step + 1) +
                                   "; training aborted, last good checkpoint retained");
        }
        step_loss += loss.item() * scale_by;
        tape.backward(scale(tape, loss, scale_by));
      }
      AdamHyper h;
      h.learning_rate = s.learning_rate;
      if (s.lr_schedule == LrSchedule::Linear) {
        h.learning_rate *= 1.0 - static_cast<double>(progress.global_step) / total_steps;
      }
      h.weight_decay = s.weight_decay;
      adam_step(model, adam, h);
      progress.global_step += 1;

      LossRecord rec{progress.global_step, epoch + 1, opt.aspect, step_loss};
      if (writing) {
        csv << rec.step << ',' << rec.epoch << ',' << rec.aspect << ',' << format_loss(rec.loss) << '\n';
        csv.flush();
      }
      if (opt.on_step) opt.on_step(model, rec);
      result.losses.push_back(std::move(rec));
    }
    progress.epochs_completed = epoch + 1;
    if (writing) {
      const auto ck = make_checkpoint();
      save_checkpoint(ck, opt.out_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"));
      save_checkpoint(ck, opt.out_dir / "model.ckpt");
    }
  }
  model.zero_grad();
  result.checkpoint = make_checkpoint();
  return result;
}

}  // namespace detail

inline TrainResult pretrain(Model& model, const std::vector<TokenSequence>& data, const PretrainConfig& cfg,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  LoopSettings s;
  s.phase = TrainPhase::Pretrain;
  s.epochs = cfg.epochs;
  s.learning_rate = cfg.learning_rate;
  s.weight_decay = cfg.weight_decay;
  s.batch_size = cfg.batch_size;
  s.grad_accumulation = cfg.grad_accumulation;
  s.seed = cfg.seed;
  s.lr_schedule = cfg.lr_schedule;
  s.config_json = cfg;
  const double p = cfg.mask_probability;
  return detail::run_training(model, data, s, opt,
                              [&model, p](Tape& tape, const TokenSequence& seq, Rng& rng, Rng* dropout_rng) {
                                const auto masked = mask_tokens(seq, p, rng);
                                return mlm_loss(tape, model.forward_mlm(tape, masked.tokens, dropout_rng), masked);
                              });
}

inline TrainResult finetune(Model& model, const std::vector<LabeledSequence>& data, const FinetuneConfig& cfg,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  for (const auto& ex : data) {
    if (ex.labels.size() != model.config().num_labels) {
      throw Error("label vector of " + std::to_string(ex.labels.size()) + " entries for a model with " +
                  std::to_string(model.config().num_labels) + " labels");
    }
  }
  LoopSettings s;
  s.phase = TrainPhase::Finetune;
  s.epochs = cfg.epochs;
  s.learning_rate = cfg.learning_rate;
  s.batch_size = cfg.batch_size;
  s.grad_accumulation = cfg.grad_accumulation;
  s.seed = cfg.seed;
  s.lr_schedule = cfg.lr_schedule;
  s.config_json = cfg;
  const auto kind = cfg.loss;
  return detail::run_training(model, data, s, opt,
                              [&model, kind](Tape& tape, const LabeledSequence& ex, Rng&, Rng* dropout_rng) {
                                return finetune_loss(tape, model.forward_classify(tape, ex.tokens, dropout_rng),
                                                     ex.labels, kind);
                              });
}

}  // namespace protgo
