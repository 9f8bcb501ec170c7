#pragma once

// Three aspect classifiers run side by side on one tokenized input; their
// thresholded term sets are unioned. The label spaces are disjoint, so no
// score is ever mixed across aspects.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "protgo/checkpoint.hpp"
#include "protgo/error.hpp"
#include "protgo/ingest.hpp"
#include "protgo/model.hpp"
#include "protgo/tensor.hpp"

namespace protgo {

struct PredictedTerm {
  std::string go_id;
  GoAspect aspect;
  double score;

  bool operator==(const PredictedTerm&) const = default;
};

struct Prediction {
  std::string accession;
  std::array<std::vector<double>, 3> scores;  // indexed by aspect_index
  std::vector<PredictedTerm> terms;           // BP, MF, CC; vocabulary order within an aspect
};

class FusionModel {
 public:
  void set_aspect(GoAspect aspect, std::shared_ptr<const Model> model, LabelVocabulary vocab) {
    if (!model) throw Error("null model for aspect " + std::string(aspect_code(aspect)));
    if (vocab.size() != model->config().num_labels) {
      throw Error("aspect " + std::string(aspect_code(aspect)) + ": checkpoint has " +
                  std::to_string(model->config().num_labels) + " labels but the vocabulary has " +
                  std::to_string(vocab.size()) + " terms");
    }
    vocab.aspect = aspect;
    slots_[aspect_index(aspect)] = Slot{std::move(model), std::move(vocab)};
  }

  bool has_aspect(GoAspect a) const { return slots_[aspect_index(a)].has_value(); }
  const Model& model(GoAspect a) const { return *slot(a).model; }
  const LabelVocabulary& vocabulary(GoAspect a) const { return slot(a).vocab; }

  double threshold() const { return threshold_; }
  void set_threshold(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw Error("threshold must lie in [0, 1]");
    threshold_ = t;
  }

  // All three aspects present and sharing one truncation length.
  std::size_t max_len() const {
    std::optional<std::size_t> len;
    for (auto a : kAllAspects) {
      const auto l = slot(a).model->config().max_len;
      if (len && *len != l) throw Error("aspect models disagree on max_len");
      len = l;
    }
    return *len;
  }

  std::vector<double> aspect_scores(GoAspect a, const TokenSequence& tokens) const {
    Tape tape;
    tape.set_recording(false);
    const auto logits = slot(a).model->forward_classify(tape, tokens);
    std::vector<double> out(logits.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(logits[i]);
    return out;
  }

  Prediction predict(std::string accession, std::string_view sequence) const {
    const auto tokens = tokenize(sequence, max_len());
    Prediction p;
    p.accession = std::move(accession);
    for (auto a : kAllAspects) {
      p.scores[aspect_index(a)] = aspect_scores(a, tokens);
      const auto& s = p.scores[aspect_index(a)];
      const auto& vocab = slot(a).vocab;
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (s[j] >= threshold_) p.terms.push_back({vocab.terms[j], a, s[j]});
      }
    }
    return p;
  }

 private:
  struct Slot {
    std::shared_ptr<const Model> model;
    LabelVocabulary vocab;
  };

  const Slot& slot(GoAspect a) const {
    const auto& s = slots_[aspect_index(a)];
    if (!s) throw Error("missing model for aspect " + std::string(aspect_code(a)));
    return *s;
  }

  std::array<std::optional<Slot>, 3> slots_;
  double threshold_ = 0.5;
};

// models_dir/<BP|MF|CC>/{model.ckpt, vocab.tsv}
inline FusionModel load_fusion(const std::filesystem::path& models_dir) {
  FusionModel f;
  for (auto a : kAllAspects) {
    const auto dir = models_dir / std::string(aspect_code(a));
    const auto ckpt = dir / "model.ckpt";
    const auto vocab = dir / "vocab.tsv";
    if (!std::filesystem::exists(ckpt)) {
      throw IoError("missing checkpoint for aspect " + std::string(aspect_code(a)) + ": " + ckpt.string());
    }
    if (!std::filesystem::exists(vocab)) {
      throw IoError("missing vocabulary for aspect " + std::string(aspect_code(a)) + ": " + vocab.string());
    }
    auto model = std::make_shared<const Model>(model_from_checkpoint(load_checkpoint(ckpt)));
    f.set_aspect(a, std::move(model), read_vocabulary(vocab, a));
  }
  return f;
}

inline void write_prediction(std::ostream& os, const Prediction& p) {
  if (p.terms.empty()) {
    os << p.accession << "\t-\t-\t-\n";
    return;
  }
  char score[32];
  for (const auto& t : p.terms) {
    std::snprintf(score, sizeof score, "%.6f", t.score);
    os << p.accession << '\t' << t.go_id << '\t' << aspect_code(t.aspect) << '\t' << score << '\n';
  }
}

struct BatchSummary {
  std::size_t processed = 0;
  std::size_t failed = 0;
};

namespace detail {

struct RawEntry {
  std::string accession;
  std::string sequence;  // not yet validated
  std::size_t line = 0;
};

// Sequence-only reader for prediction input: the primary TSV (annotation
// column optional and ignored) or FASTA, chosen by the first data line.
// Malformed entries come back with their line so the caller can skip them.
class PredictInputReader {
 public:
  explicit PredictInputReader(std::istream& in) : in_(in) {}

  // nullopt at end of input; `error` is set for a malformed entry.
  std::optional<RawEntry> next(std::optional<ParseError>& error) {
    error.reset();
    std::string line;
    if (fasta_ == Mode::Fasta) return next_fasta(error);
    while (std::getline(in_, line)) {
      ++line_no_;
      std::string_view v = strip_cr(line);
      if (trim(v).empty() || v.front() == '#' || v.front() == ';') continue;
      if (fasta_ == Mode::Unknown) fasta_ = v.front() == '>' ? Mode::Fasta : Mode::Tsv;
      if (fasta_ == Mode::Fasta) {
        pending_ = std::string(v);
        pending_line_ = line_no_;
        return next_fasta(error);
      }
      try {
        auto rec = parse_tsv_line(v, line_no_);
        return RawEntry{rec->accession, rec->sequence, line_no_};
      } catch (const ParseError& e) {
        error = e;
        return RawEntry{"", "", line_no_};
      }
    }
    return std::nullopt;
  }

 private:
  enum class Mode { Unknown, Tsv, Fasta };

  std::optional<RawEntry> next_fasta(std::optional<ParseError>& error) {
    if (!pending_) return std::nullopt;
    RawEntry e;
    e.line = pending_line_;
    auto header = trim(std::string_view(*pending_).substr(1));
    e.accession = std::string(header.substr(0, header.find_first_of(" \t")));
    pending_.reset();
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      std::string_view v = trim(strip_cr(line));
      if (v.empty() || v.front() == ';') continue;
      if (v.front() == '>') {
        pending_ = std::string(v);
        pending_line_ = line_no_;
        break;
      }
      if (!error) {
        try {
          e.sequence += normalize_sequence(v, line_no_);
        } catch (const ParseError& pe) {
          error = pe;
        }
      }
    }
    if (!error && e.accession.empty()) error = ParseError("malformed line: empty FASTA header", e.line);
    if (!error && e.sequence.empty()) error = ParseError("malformed line: empty sequence for '" + e.accession + "'", e.line);
    return e;
  }

  std::istream& in_;
  std::size_t line_no_ = 0;
  Mode fasta_ = Mode::Unknown;
  std::optional<std::string> pending_;
  std::size_t pending_line_ = 0;
};

}  // namespace detail

// One block of output lines per valid record, in input order. Malformed
// records produce a diagnostic and are skipped.
inline BatchSummary predict_stream(std::istream& in, const FusionModel& fusion, std::ostream& out,
                                   std::ostream& diagnostics) {
  BatchSummary summary;
  detail::PredictInputReader reader(in);
  std::optional<ParseError> error;
  while (auto entry = reader.next(error)) {
    if (error) {
      diagnostics << "skipped record: " << error->what() << '\n';
      ++summary.failed;
      continue;
    }
    write_prediction(out, fusion.predict(entry->accession, entry->sequence));
    if (!out) throw IoError("failed writing predictions");
    ++summary.processed;
  }
  return summary;
}

inline BatchSummary predict_batch(const std::filesystem::path& input, const FusionModel& fusion,
                                  const std::filesystem::path& output, std::ostream& diagnostics) {
  std::ifstream in(input);
  if (!in) throw IoError("cannot open " + input.string());
  std::ofstream out(output, std::ios::trunc);
  if (!out) throw IoError("cannot write " + output.string());
  const auto summary = predict_stream(in, fusion, out, diagnostics);
  out.flush();
  if (!out) throw IoError("failed writing " + output.string());
  return summary;
}

}  // namespace protgo
