#pragma once

// Protein records, GO label vocabularies and residue tokenisation.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "protgo/error.hpp"

namespace protgo {

enum class GoAspect : std::uint8_t { BiologicalProcess = 0, MolecularFunction = 1, CellularComponent = 2 };

inline constexpr std::array<GoAspect, 3> kAllAspects = {
    GoAspect::BiologicalProcess, GoAspect::MolecularFunction, GoAspect::CellularComponent};

inline std::string_view aspect_code(GoAspect a) {
  switch (a) {
    case GoAspect::BiologicalProcess: return "BP";
    case GoAspect::MolecularFunction: return "MF";
    case GoAspect::CellularComponent: return "CC";
  }
  return "??";
}

inline std::optional<GoAspect> parse_aspect(std::string_view code) {
  if (code == "BP") return GoAspect::BiologicalProcess;
  if (code == "MF") return GoAspect::MolecularFunction;
  if (code == "CC") return GoAspect::CellularComponent;
  return std::nullopt;
}

inline std::size_t aspect_index(GoAspect a) { return static_cast<std::size_t>(a); }

struct GoAnnotation {
  std::string go_id;
  GoAspect aspect;

  auto operator<=>(const GoAnnotation&) const = default;
};

struct ProteinRecord {
  std::string accession;
  std::string sequence;
  std::set<GoAnnotation> annotations;

  bool has_aspect(GoAspect a) const {
    return std::any_of(annotations.begin(), annotations.end(),
                       [a](const GoAnnotation& g) { return g.aspect == a; });
  }
};

// ---------------------------------------------------------------------------
// Residue alphabet and token ids.

namespace token {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kCls = 1;
inline constexpr std::int32_t kSep = 2;
inline constexpr std::int32_t kMask = 3;
inline constexpr std::int32_t kUnk = 4;
inline constexpr std::int32_t kFirstResidue = 5;
inline constexpr std::int32_t kVocabSize = 30;
}  // namespace token

// 20 standard amino acids plus the ambiguity / rare codes B, O, U, X, Z.
inline constexpr std::string_view kResidueAlphabet = "ABCDEFGHIKLMNOPQRSTUVWXYZ";
static_assert(kResidueAlphabet.size() == 25);
static_assert(token::kFirstResidue + 25 == token::kVocabSize);

inline std::int32_t residue_id(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  const auto pos = kResidueAlphabet.find(u);
  if (pos == std::string_view::npos) return -1;
  return token::kFirstResidue + static_cast<std::int32_t>(pos);
}

inline bool is_residue(char c) { return residue_id(c) >= 0; }

inline char residue_char(std::int32_t id) {
  if (id < token::kFirstResidue || id >= token::kVocabSize) return '?';
  return kResidueAlphabet[static_cast<std::size_t>(id - token::kFirstResidue)];
}

inline bool is_go_id(std::string_view s) {
  if (s.size() != 10 || s.substr(0, 3) != "GO:") return false;
  return std::all_of(s.begin() + 3, s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t original_length = 0;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence tokenize(std::string_view sequence, std::size_t max_len) {
  if (sequence.empty()) throw Error("cannot tokenize an empty sequence");
  if (max_len == 0) throw Error("max_len must be positive");
  TokenSequence out;
  out.original_length = sequence.size();
  const std::size_t kept = std::min(sequence.size(), max_len);
  out.ids.reserve(kept + 2);
  out.ids.push_back(token::kCls);
  for (std::size_t i = 0; i < kept; ++i) {
    const std::int32_t id = residue_id(sequence[i]);
    if (id < 0) throw Error(std::string("unknown residue '") + sequence[i] + "'");
    out.ids.push_back(id);
  }
  out.ids.push_back(token::kSep);
  return out;
}

// Inverse of tokenize for the residue positions; special tokens are skipped and MASK/UNK map to 'X'.
inline std::string detokenize(const TokenSequence& tokens) {
  std::string s;
  for (std::int32_t id : tokens.ids) {
    if (id == token::kPad || id == token::kCls || id == token::kSep) continue;
    s.push_back(id >= token::kFirstResidue ? residue_char(id) : 'X');
  }
  return s;
}

// ---------------------------------------------------------------------------
// Parsing.

enum class InputFormat { Tsv, FastaTsv };

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      break;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return parts;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::string normalize_sequence(std::string_view raw, std::size_t line) {
  std::string seq;
  seq.reserve(raw.size());
  for (char c : raw) {
    if (!is_residue(c)) throw ParseError(std::string("unknown residue '") + c + "'", line);
    seq.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return seq;
}

inline GoAnnotation parse_annotation(std::string_view go_id, std::string_view aspect, std::size_t line) {
  if (!is_go_id(go_id)) throw ParseError("malformed GO id '" + std::string(go_id) + "'", line);
  const auto a = parse_aspect(aspect);
  if (!a) throw ParseError("unknown aspect '" + std::string(aspect) + "'", line);
  return {std::string(go_id), *a};
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace detail

// Parses one line of the primary TSV format. Returns nullopt for blank and comment lines.
inline std::optional<ProteinRecord> parse_tsv_line(std::string_view line, std::size_t line_no) {
  line = detail::strip_cr(line);
  if (detail::trim(line).empty() || line.front() == '#') return std::nullopt;
  const auto fields = detail::split(line, '\t');
  if (fields.size() < 2 || fields.size() > 3) {
    throw ParseError("malformed line: expected 2 or 3 tab-separated fields, got " +
                         std::to_string(fields.size()),
                     line_no);
  }
  ProteinRecord rec;
  rec.accession = std::string(detail::trim(fields[0]));
  if (rec.accession.empty()) throw ParseError("malformed line: empty accession", line_no);
  const auto seq = detail::trim(fields[1]);
  if (seq.empty()) throw ParseError("malformed line: empty sequence", line_no);
  rec.sequence = detail::normalize_sequence(seq, line_no);
  if (fields.size() == 3 && !detail::trim(fields[2]).empty()) {
    for (auto entry : detail::split(detail::trim(fields[2]), ';')) {
      entry = detail::trim(entry);
      if (entry.empty()) continue;
      const auto bar = entry.find('|');
      if (bar == std::string_view::npos) {
        throw ParseError("malformed annotation '" + std::string(entry) + "'", line_no);
      }
      rec.annotations.insert(detail::parse_annotation(entry.substr(0, bar), entry.substr(bar + 1), line_no));
    }
  }
  return rec;
}

inline std::vector<ProteinRecord> parse_tsv_stream(std::istream& in) {
  std::vector<ProteinRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto rec = parse_tsv_line(line, line_no);
    if (!rec) continue;
    if (!seen.insert(rec->accession).second) {
      throw ParseError("duplicate accession '" + rec->accession + "'", line_no);
    }
    out.push_back(std::move(*rec));
  }
  return out;
}

struct FastaEntry {
  std::string accession;
  std::string sequence;
  std::size_t line = 0;  // header line
};

// Streams FASTA entries; bodies may wrap over several lines. The accession is
// the first whitespace-delimited token of the header.
class FastaReader {
 public:
  explicit FastaReader(std::istream& in) : in_(in) {}

  std::optional<FastaEntry> next() {
    FastaEntry entry;
    bool have_header = false;
    if (pending_header_) {
      entry.accession = std::move(*pending_header_);
      entry.line = pending_line_;
      pending_header_.reset();
      have_header = true;
    }
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      std::string_view v = detail::trim(detail::strip_cr(line));
      if (v.empty() || v.front() == ';') continue;
      if (v.front() == '>') {
        auto header = detail::trim(v.substr(1));
        const auto ws = header.find_first_of(" \t");
        std::string acc(header.substr(0, ws));
        if (acc.empty()) throw ParseError("malformed line: empty FASTA header", line_no_);
        if (have_header) {
          pending_header_ = std::move(acc);
          pending_line_ = line_no_;
          return finish(std::move(entry));
        }
        entry.accession = std::move(acc);
        entry.line = line_no_;
        have_header = true;
        continue;
      }
      if (!have_header) throw ParseError("malformed line: sequence data before first header", line_no_);
      entry.sequence += detail::normalize_sequence(v, line_no_);
    }
    if (!have_header) return std::nullopt;
    return finish(std::move(entry));
  }

  std::size_t line() const { return line_no_; }

 private:
  FastaEntry finish(FastaEntry e) const {
    if (e.sequence.empty()) throw ParseError("malformed line: empty sequence for '" + e.accession + "'", e.line);
    return e;
  }

  std::istream& in_;
  std::size_t line_no_ = 0;
  std::optional<std::string> pending_header_;
  std::size_t pending_line_ = 0;
};

// Companion annotation TSV: accession<TAB>GO:NNNNNNN<TAB>ASPECT.
inline std::map<std::string, std::set<GoAnnotation>> parse_annotation_table(std::istream& in) {
  std::map<std::string, std::set<GoAnnotation>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view v = detail::strip_cr(line);
    if (detail::trim(v).empty() || v.front() == '#') continue;
    const auto f = detail::split(v, '\t');
    if (f.size() != 3) {
      throw ParseError("malformed line: expected 3 tab-separated fields, got " + std::to_string(f.size()), line_no);
    }
    out[std::string(detail::trim(f[0]))].insert(
        detail::parse_annotation(detail::trim(f[1]), detail::trim(f[2]), line_no));
  }
  return out;
}

inline std::vector<ProteinRecord> parse_fasta_with_annotations(std::istream& fasta, std::istream& annotations) {
  std::vector<ProteinRecord> out;
  std::unordered_map<std::string, std::size_t> index;
  FastaReader reader(fasta);
  while (auto e = reader.next()) {
    if (index.count(e->accession)) throw ParseError("duplicate accession '" + e->accession + "'", e->line);
    index.emplace(e->accession, out.size());
    out.push_back({std::move(e->accession), std::move(e->sequence), {}});
  }
  for (auto& [acc, annots] : parse_annotation_table(annotations)) {
    const auto it = index.find(acc);
    if (it == index.end()) throw Error("annotation for unknown accession '" + acc + "'");
    out[it->second].annotations = std::move(annots);
  }
  return out;
}

inline std::vector<ProteinRecord> parse_records(const std::filesystem::path& path, InputFormat format,
                                                const std::filesystem::path& annotations = {}) {
  auto in = detail::open_input(path);
  if (format == InputFormat::Tsv) return parse_tsv_stream(in);
  if (annotations.empty()) throw Error("FASTA input requires a companion annotation table");
  auto ann = detail::open_input(annotations);
  return parse_fasta_with_annotations(in, ann);
}

inline void write_records_tsv(std::ostream& os, const std::vector<ProteinRecord>& records) {
  for (const auto& r : records) {
    os << r.accession << '\t' << r.sequence << '\t';
    bool first = true;
    for (const auto& a : r.annotations) {
      if (!first) os << ';';
      os << a.go_id << '|' << aspect_code(a.aspect);
      first = false;
    }
    os << '\n';
  }
}

inline std::vector<ProteinRecord> filter_unannotated(std::vector<ProteinRecord> records) {
  std::erase_if(records, [](const ProteinRecord& r) { return r.annotations.empty(); });
  return records;
}

// ---------------------------------------------------------------------------
// Label vocabularies.

struct LabelVocabulary {
  GoAspect aspect = GoAspect::BiologicalProcess;
  std::vector<std::string> terms;
  std::vector<std::size_t> counts;

  std::size_t size() const { return terms.size(); }

  std::optional<std::size_t> index_of(std::string_view go_id) const {
    const auto it = std::find(terms.begin(), terms.end(), go_id);
    if (it == terms.end()) return std::nullopt;
    return static_cast<std::size_t>(it - terms.begin());
  }

  bool operator==(const LabelVocabulary&) const = default;
};

// Occurrence counts per term of one aspect: number of records annotated with it.
inline std::map<std::string, std::size_t> count_terms(const std::vector<ProteinRecord>& records, GoAspect aspect) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) {
    for (const auto& a : r.annotations) {
      if (a.aspect == aspect) ++counts[a.go_id];
    }
  }
  return counts;
}

inline LabelVocabulary build_vocabulary(const std::vector<ProteinRecord>& records, GoAspect aspect, std::size_t k) {
  if (k == 0) throw Error("vocabulary size must be positive");
  const auto counts = count_terms(records, aspect);
  if (counts.size() < k) {
    throw Error("only " + std::to_string(counts.size()) + " distinct terms available for aspect " +
                std::string(aspect_code(aspect)) + " (requested " + std::to_string(k) + ")");
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is keyed by go_id, so a stable sort on count keeps ties in ascending id order.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  LabelVocabulary vocab;
  vocab.aspect = aspect;
  for (std::size_t i = 0; i < k; ++i) {
    vocab.terms.push_back(ranked[i].first);
    vocab.counts.push_back(ranked[i].second);
  }
  return vocab;
}

inline void write_vocabulary(std::ostream& os, const LabelVocabulary& vocab) {
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    os << (i + 1) << '\t' << vocab.terms[i] << '\t' << vocab.counts[i] << '\n';
  }
}

inline LabelVocabulary read_vocabulary(std::istream& in, GoAspect aspect) {
  LabelVocabulary vocab;
  vocab.aspect = aspect;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view v = detail::strip_cr(line);
    if (detail::trim(v).empty()) continue;
    const auto f = detail::split(v, '\t');
    if (f.size() != 3) throw ParseError("malformed vocabulary line", line_no);
    if (!is_go_id(f[1])) throw ParseError("malformed GO id '" + std::string(f[1]) + "'", line_no);
    std::size_t rank = 0;
    std::size_t count = 0;
    try {
      rank = std::stoul(std::string(f[0]));
      count = std::stoul(std::string(f[2]));
    } catch (const std::exception&) {
      throw ParseError("malformed vocabulary line", line_no);
    }
    if (rank != vocab.size() + 1) throw ParseError("vocabulary ranks must be consecutive from 1", line_no);
    vocab.terms.emplace_back(f[1]);
    vocab.counts.push_back(count);
  }
  return vocab;
}

inline LabelVocabulary read_vocabulary(const std::filesystem::path& path, GoAspect aspect) {
  auto in = detail::open_input(path);
  return read_vocabulary(in, aspect);
}

struct LabelVector {
  GoAspect aspect = GoAspect::BiologicalProcess;
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  bool operator==(const LabelVector&) const = default;
};

inline LabelVector encode_labels(const ProteinRecord& record, const LabelVocabulary& vocab) {
  LabelVector out{vocab.aspect, std::vector<std::uint8_t>(vocab.size(), 0)};
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (record.annotations.count({vocab.terms[i], vocab.aspect})) out.bits[i] = 1;
  }
  return out;
}

inline std::string bits_to_string(const LabelVector& v) {
  std::string s(v.size(), '0');
  for (std::size_t i = 0; i < v.size(); ++i) s[i] = v.bits[i] ? '1' : '0';
  return s;
}

inline LabelVector bits_from_string(std::string_view s, GoAspect aspect) {
  LabelVector v{aspect, std::vector<std::uint8_t>(s.size(), 0)};
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') throw Error("label bit string must contain only 0 and 1");
    v.bits[i] = s[i] == '1';
  }
  return v;
}

}  // namespace protgo
