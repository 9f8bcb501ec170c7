#pragma once

// Command-line driver: preprocess, split, pretrain, finetune, predict, evaluate.
// Exit codes: 0 success, 1 domain error, 2 usage or I/O error.

#include <array>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "protgo/checkpoint.hpp"
#include "protgo/error.hpp"
#include "protgo/fusion.hpp"
#include "protgo/ingest.hpp"
#include "protgo/manifest.hpp"
#include "protgo/metrics.hpp"
#include "protgo/model.hpp"
#include "protgo/splitter.hpp"
#include "protgo/train.hpp"

namespace protgo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::shared_ptr<spdlog::logger> log;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::optional<fs::path> config_path{};
  fs::path out_dir{};
  std::string command_line{};
  unsigned threads = 1;
};

// ---------------------------------------------------------------------------
// Shared helpers.

namespace detail {

inline void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw IoError(what + " not found: " + p.string());
}

inline void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

inline std::ofstream open_write(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline void write_text(const fs::path& p, const std::string& text) {
  auto out = open_write(p);
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline std::vector<GoAspect> select_aspects(const std::string& code) {
  if (code == "all") return {kAllAspects.begin(), kAllAspects.end()};
  const auto a = parse_aspect(code);
  if (!a) throw UsageError("unknown aspect '" + code + "' (expected BP, MF, CC or all)");
  return {*a};
}

inline std::string fmt_threshold(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

inline unsigned thread_cap() {
  const char* env = std::getenv("PROTGO_THREADS");
  if (!env || !*env) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw UsageError(std::string("PROTGO_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<unsigned>(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset directory: records.tsv, vocab_<A>.tsv, dataset_<A>.tsv, dataset.json.
// dataset_<A>.tsv rows: accession, original length, label bits, token ids.

struct DatasetRow {
  std::string accession;
  std::size_t length = 0;
  std::vector<std::uint8_t> labels;
  TokenSequence tokens;
};

struct Dataset {
  fs::path dir;
  std::size_t max_len = 0;
  std::size_t top_k = 0;
  std::vector<ProteinRecord> records;
  std::array<LabelVocabulary, 3> vocabs;
  std::array<std::vector<DatasetRow>, 3> rows;

  const std::vector<DatasetRow>& rows_for(GoAspect a) const { return rows[aspect_index(a)]; }
  const LabelVocabulary& vocab_for(GoAspect a) const { return vocabs[aspect_index(a)]; }

  std::vector<fs::path> files() const {
    std::vector<fs::path> f = {dir / "dataset.json", dir / "records.tsv"};
    for (auto a : kAllAspects) {
      f.push_back(dir / ("vocab_" + std::string(aspect_code(a)) + ".tsv"));
      f.push_back(dir / ("dataset_" + std::string(aspect_code(a)) + ".tsv"));
    }
    return f;
  }
};

inline void write_dataset_rows(std::ostream& os, const std::vector<DatasetRow>& rows) {
  for (const auto& r : rows) {
    os << r.accession << '\t' << r.length << '\t';
    for (auto b : r.labels) os << (b ? '1' : '0');
    os << '\t';
    for (std::size_t i = 0; i < r.tokens.ids.size(); ++i) os << (i ? " " : "") << r.tokens.ids[i];
    os << '\n';
  }
}

inline std::vector<DatasetRow> read_dataset_rows(const fs::path& path, GoAspect aspect, std::size_t num_labels) {
  auto in = protgo::detail::open_input(path);
  std::vector<DatasetRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (protgo::detail::trim(line).empty()) continue;
    const auto f = protgo::detail::split(protgo::detail::strip_cr(line), '\t');
    if (f.size() != 4) throw ParseError("malformed dataset row in " + path.string(), line_no);
    DatasetRow r;
    r.accession = std::string(f[0]);
    try {
      r.length = std::stoul(std::string(f[1]));
      std::istringstream ids{std::string(f[3])};
      for (std::int32_t id; ids >> id;) r.tokens.ids.push_back(id);
    } catch (const std::exception&) {
      throw ParseError("malformed dataset row in " + path.string(), line_no);
    }
    r.tokens.original_length = r.length;
    r.labels = bits_from_string(f[2], aspect).bits;
    if (r.labels.size() != num_labels) {
      throw ParseError("label vector of " + std::to_string(r.labels.size()) + " bits, vocabulary has " +
                           std::to_string(num_labels) + " terms",
                       line_no);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Dataset load_dataset(const fs::path& dir) {
  detail::require_dir(dir, "dataset directory");
  Dataset d;
  d.dir = dir;
  const auto meta = detail::read_json(dir / "dataset.json");
  d.max_len = meta.at("max_len").get<std::size_t>();
  d.top_k = meta.at("top_k").get<std::size_t>();
  d.records = parse_records(dir / "records.tsv", InputFormat::Tsv);
  for (auto a : kAllAspects) {
    const std::string code(aspect_code(a));
    d.vocabs[aspect_index(a)] = read_vocabulary(dir / ("vocab_" + code + ".tsv"), a);
    d.rows[aspect_index(a)] = read_dataset_rows(dir / ("dataset_" + code + ".tsv"), a, d.vocabs[aspect_index(a)].size());
  }
  return d;
}

// Split directory: train.ids, dev.ids, test.ids, split.json (+ clusters.tsv).
struct SplitIds {
  fs::path dir;
  std::map<std::string, std::set<std::string>> parts;

  std::vector<fs::path> files() const { return {dir / "train.ids", dir / "dev.ids", dir / "test.ids"}; }
};

inline SplitIds load_split(const fs::path& dir) {
  detail::require_dir(dir, "split directory");
  SplitIds s;
  s.dir = dir;
  for (const char* part : {"train", "dev", "test"}) {
    auto in = protgo::detail::open_input(dir / (std::string(part) + ".ids"));
    auto& ids = s.parts[part];
    for (std::string line; std::getline(in, line);) {
      const auto v = protgo::detail::trim(line);
      if (!v.empty()) ids.emplace(v);
    }
  }
  return s;
}

inline std::vector<DatasetRow> rows_in(const std::vector<DatasetRow>& rows, const std::set<std::string>* ids) {
  if (!ids) return rows;
  std::vector<DatasetRow> out;
  for (const auto& r : rows) {
    if (ids->count(r.accession)) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// preprocess

struct PreprocessArgs {
  fs::path input;
  fs::path annotations;
  std::size_t top_k = 100;
  std::size_t max_len = 1000;
};

inline bool looks_like_fasta(const fs::path& p) {
  auto in = protgo::detail::open_input(p);
  for (std::string line; std::getline(in, line);) {
    const auto v = protgo::detail::trim(line);
    if (!v.empty()) return v.front() == '>';
  }
  return false;
}

inline void cmd_preprocess(Context& ctx, const PreprocessArgs& a) {
  RunManifest m;
  m.command = ctx.command_line;
  m.started = utc_timestamp();
  m.seed = ctx.seed;
  m.config = {{"top_k", a.top_k}, {"max_len", a.max_len}};
  if (a.top_k == 0) throw UsageError("--top-k must be positive");
  if (a.max_len == 0) throw UsageError("--max-len must be positive");

  const bool fasta = looks_like_fasta(a.input);
  if (fasta && a.annotations.empty()) throw UsageError("FASTA input needs --annotations");
  auto records = parse_records(a.input, fasta ? InputFormat::FastaTsv : InputFormat::Tsv, a.annotations);
  m.add_input(a.input);
  if (fasta) m.add_input(a.annotations);
  const auto parsed = records.size();
  records = filter_unannotated(std::move(records));
  if (records.empty()) throw Error("no annotated records");
  ctx.log->info("{} records parsed, {} annotated", parsed, records.size());

  Dataset d;
  d.dir = ctx.out_dir;
  d.max_len = a.max_len;
  d.top_k = a.top_k;
  json per_aspect = json::object();
  for (auto asp : kAllAspects) {
    const auto i = aspect_index(asp);
    d.vocabs[i] = build_vocabulary(records, asp, a.top_k);
    for (const auto& r : records) {
      const bool has = std::any_of(r.annotations.begin(), r.annotations.end(), [&](const auto& g) { return g.aspect == asp; });
      if (!has) continue;
      d.rows[i].push_back({r.accession, r.sequence.size(), encode_labels(r, d.vocabs[i]).bits, tokenize(r.sequence, a.max_len)});
    }
    per_aspect[std::string(aspect_code(asp))] = {{"records", d.rows[i].size()}, {"labels", d.vocabs[i].size()}};
    ctx.log->info("{}: {} records, {} labels", aspect_code(asp), d.rows[i].size(), d.vocabs[i].size());
  }

  detail::make_dirs(ctx.out_dir);
  {
    auto out = detail::open_write(ctx.out_dir / "records.tsv");
    write_records_tsv(out, records);
  }
  for (auto asp : kAllAspects) {
    const std::string code(aspect_code(asp));
    auto v = detail::open_write(ctx.out_dir / ("vocab_" + code + ".tsv"));
    write_vocabulary(v, d.vocab_for(asp));
    auto r = detail::open_write(ctx.out_dir / ("dataset_" + code + ".tsv"));
    write_dataset_rows(r, d.rows_for(asp));
    if (!v || !r) throw IoError("failed writing dataset files for " + code);
  }
  const json meta = {{"top_k", a.top_k}, {"max_len", a.max_len}, {"records", records.size()}, {"aspects", per_aspect}};
  detail::write_text(ctx.out_dir / "dataset.json", meta.dump(2) + "\n");

  for (const auto& f : d.files()) m.add_output(f);
  m.results = meta;
  write_manifest(m, ctx.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// split

struct SplitArgs {
  fs::path dataset;
  std::string kind = "random";
  double identity_threshold = 0.5;
  std::size_t kmer = 5;
};

inline void cmd_split(Context& ctx, const SplitArgs& a) {
  RunManifest m;
  m.command = ctx.command_line;
  m.started = utc_timestamp();
  m.seed = ctx.seed;
  const auto d = load_dataset(a.dataset);
  for (const auto& f : d.files()) m.add_input(f);

  DatasetSplit split;
  std::optional<ClusterAssignment> clusters;
  json params = {{"kind", a.kind}, {"seed", ctx.seed}};
  if (a.kind == "random") {
    std::vector<std::string> ids;
    for (const auto& r : d.records) ids.push_back(r.accession);
    split = random_split(std::move(ids), ctx.seed);
  } else {
    clusters = cluster_sequences(d.records, a.identity_threshold, a.kmer);
    split = clustered_split(*clusters, {0.8, 0.1, 0.1}, ctx.seed);
    split.identity_threshold = a.identity_threshold;
    split.kmer = a.kmer;
    params["identity_threshold"] = a.identity_threshold;
    params["kmer"] = a.kmer;
    params["clusters"] = clusters->num_clusters();
  }
  m.config = params;

  // Per-aspect counts laid out like the dataset tables: aspect x {train, dev, test}.
  const std::array<std::pair<const char*, const std::vector<std::string>*>, 3> parts = {
      {{"train", &split.train}, {"dev", &split.dev}, {"test", &split.test}}};
  json counts = json::object();
  counts["all"] = {{"train", split.train.size()}, {"dev", split.dev.size()}, {"test", split.test.size()}};
  for (auto asp : kAllAspects) {
    json c = json::object();
    for (const auto& [name, ids] : parts) {
      const std::set<std::string> s(ids->begin(), ids->end());
      c[name] = rows_in(d.rows_for(asp), &s).size();
    }
    counts[std::string(aspect_code(asp))] = c;
  }
  json summary = params;
  summary["counts"] = counts;
  if (clusters) summary["leakage"] = audit_leakage(split, *clusters).count();

  detail::make_dirs(ctx.out_dir);
  std::vector<fs::path> outputs;
  for (const auto& [name, ids] : parts) {
    const auto p = ctx.out_dir / (std::string(name) + ".ids");
    auto out = detail::open_write(p);
    for (const auto& id : *ids) out << id << '\n';
    if (!out) throw IoError("failed writing " + p.string());
    outputs.push_back(p);
  }
  if (clusters) {
    const auto p = ctx.out_dir / "clusters.tsv";
    auto out = detail::open_write(p);
    for (const auto& [acc, c] : clusters->cluster_of) out << acc << '\t' << c << '\n';
    outputs.push_back(p);
  }
  detail::write_text(ctx.out_dir / "split.json", summary.dump(2) + "\n");
  outputs.push_back(ctx.out_dir / "split.json");

  ctx.log->info("{} split: train {}, dev {}, test {}", a.kind, split.train.size(), split.dev.size(), split.test.size());
  if (clusters) ctx.log->info("{} clusters, leakage {}", clusters->num_clusters(), summary["leakage"].get<std::size_t>());
  for (const auto& p : outputs) m.add_output(p);
  m.results = summary;
  write_manifest(m, ctx.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// pretrain / finetune

struct TrainArgs {
  TrainPhase phase = TrainPhase::Finetune;
  fs::path dataset;
  std::optional<fs::path> split;
  std::string aspect = "all";
  std::optional<fs::path> resume;
  std::optional<fs::path> init;
  bool parallel_aspects = false;
};

struct TrainPlan {
  json raw_config = json::object();
  std::optional<json> model_overrides;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::uint64_t master_seed = 0;
};

inline TrainPlan load_train_plan(const Context& ctx, TrainPhase phase) {
  TrainPlan plan;
  json cfg = json::object();
  if (ctx.config_path) cfg = detail::read_json(*ctx.config_path);
  if (!cfg.is_object()) throw Error("config must be a JSON object");
  plan.raw_config = cfg;
  if (cfg.contains("model")) {
    plan.model_overrides = cfg["model"];
    cfg.erase("model");
  }
  if (ctx.seed_given) cfg["seed"] = ctx.seed;
  if (phase == TrainPhase::Pretrain) {
    plan.pretrain = cfg.get<PretrainConfig>();
    plan.master_seed = plan.pretrain.seed;
  } else {
    plan.finetune = cfg.get<FinetuneConfig>();
    plan.master_seed = plan.finetune.seed;
  }
  return plan;
}

inline ModelConfig model_config_for(const TrainPlan& plan, const Dataset& d, GoAspect a) {
  ModelConfig cfg;
  cfg.max_len = d.max_len;
  if (plan.model_overrides) {
    try {
      from_json(*plan.model_overrides, cfg);
    } catch (const json::exception& e) {
      throw Error(std::string("model config: ") + e.what());
    }
    if (plan.model_overrides->contains("num_labels") && cfg.num_labels != d.vocab_for(a).size()) {
      throw Error("model config num_labels is " + std::to_string(cfg.num_labels) + " but the " +
                  std::string(aspect_code(a)) + " vocabulary has " + std::to_string(d.vocab_for(a).size()) + " terms");
    }
  }
  cfg.num_labels = d.vocab_for(a).size();
  if (cfg.max_len < d.max_len) {
    throw Error("model max_len " + std::to_string(cfg.max_len) + " is shorter than the dataset max_len " +
                std::to_string(d.max_len));
  }
  cfg.validate();
  return cfg;
}

// Architecture from the checkpoint, label count from the vocabulary. Arrays that
// still fit are copied; a resized classifier starts from zero.
inline Model model_from_init(const ModelCheckpoint& ck, const Dataset& d, GoAspect a, std::uint64_t seed) {
  ModelConfig cfg = ck.config;
  cfg.num_labels = d.vocab_for(a).size();
  if (cfg.max_len < d.max_len) {
    throw Error("initial checkpoint max_len " + std::to_string(cfg.max_len) + " is shorter than the dataset max_len " +
                std::to_string(d.max_len));
  }
  Model model(cfg, seed);
  for (auto& p : model.parameters()) {
    const auto* arr = ck.find(p.name);
    if (arr && arr->shape == p.tensor.shape()) p.tensor.values() = arr->data;
  }
  return model;
}

inline fs::path init_path_for(const fs::path& init, GoAspect a) {
  if (fs::is_directory(init)) return init / std::string(aspect_code(a)) / "model.ckpt";
  return init;
}

struct AspectRun {
  GoAspect aspect;
  std::size_t records = 0;
  std::uint64_t steps = 0;
  std::optional<double> final_loss;
  std::vector<fs::path> outputs;
};

inline AspectRun train_aspect(const Context& ctx, const TrainArgs& args, const TrainPlan& plan, const Dataset& d,
                              const SplitIds* split, GoAspect a) {
  const std::string code(aspect_code(a));
  const auto seed = derive_seed(plan.master_seed, aspect_index(a));
  const auto rows = rows_in(d.rows_for(a), split ? &split->parts.at("train") : nullptr);
  if (rows.empty()) throw Error("no training records for aspect " + code);

  TrainOptions opt;
  opt.out_dir = ctx.out_dir / code;
  opt.aspect = code;
  std::optional<Model> model;
  if (args.resume) {
    auto ck = load_checkpoint(*args.resume);
    if (ck.config.num_labels != d.vocab_for(a).size()) {
      throw Error("resume checkpoint has " + std::to_string(ck.config.num_labels) + " labels but the " + code +
                  " vocabulary has " + std::to_string(d.vocab_for(a).size()) + " terms");
    }
    model.emplace(model_from_checkpoint(ck));
    opt.resume = std::move(ck);
  } else if (args.init) {
    const auto path = init_path_for(*args.init, a);
    if (!fs::exists(path)) throw IoError("missing initial checkpoint for aspect " + code + ": " + path.string());
    model.emplace(model_from_init(load_checkpoint(path), d, a, seed));
  } else {
    model.emplace(model_config_for(plan, d, a), seed);
  }
  detail::make_dirs(opt.out_dir);
  {
    auto v = detail::open_write(opt.out_dir / "vocab.tsv");
    write_vocabulary(v, d.vocab_for(a));
  }

  double epoch_sum = 0.0;
  std::size_t epoch_steps = 0, current_epoch = 0;
  auto flush_epoch = [&] {
    if (epoch_steps) ctx.log->info("{} epoch {}: mean loss {:.6f} over {} steps", code, current_epoch, epoch_sum / epoch_steps, epoch_steps);
    epoch_sum = 0.0;
    epoch_steps = 0;
  };
  opt.on_step = [&](const Model&, const LossRecord& r) {
    if (r.epoch != current_epoch) {
      flush_epoch();
      current_epoch = r.epoch;
    }
    epoch_sum += r.loss;
    ++epoch_steps;
    ctx.log->debug("{} step {} loss {:.17g}", code, r.step, r.loss);
  };

  ctx.log->info("{}: {} on {} records, {} parameters", code, args.phase == TrainPhase::Pretrain ? "pretraining" : "fine-tuning",
                rows.size(), model->num_parameters());
  TrainResult result;
  if (args.phase == TrainPhase::Pretrain) {
    std::vector<TokenSequence> data;
    for (const auto& r : rows) data.push_back(r.tokens);
    auto cfg = plan.pretrain;
    cfg.seed = seed;
    result = pretrain(*model, data, cfg, opt);
  } else {
    std::vector<LabeledSequence> data;
    for (const auto& r : rows) data.push_back({r.accession, r.tokens, r.labels});
    auto cfg = plan.finetune;
    cfg.seed = seed;
    result = finetune(*model, data, cfg, opt);
  }
  flush_epoch();

  AspectRun run{a, rows.size(), result.checkpoint.progress.global_step, std::nullopt, {}};
  if (!result.losses.empty()) run.final_loss = result.losses.back().loss;
  run.outputs = {opt.out_dir / "model.ckpt", opt.out_dir / "vocab.tsv", opt.out_dir / "loss.csv"};
  for (std::size_t e = 1; e <= result.checkpoint.progress.epochs_completed; ++e) {
    const auto p = opt.out_dir / ("epoch_" + std::to_string(e) + ".ckpt");
    if (fs::exists(p)) run.outputs.push_back(p);
  }
  return run;
}

inline void cmd_train(Context& ctx, const TrainArgs& args) {
  RunManifest m;
  m.command = ctx.command_line;
  m.started = utc_timestamp();
  const auto aspects = detail::select_aspects(args.aspect);
  if (args.resume && aspects.size() != 1) throw UsageError("--resume needs a single --aspect");
  if (args.resume && args.init) throw UsageError("--resume and --init are mutually exclusive");
  if (args.init && !fs::exists(*args.init)) throw IoError("initial checkpoint not found: " + args.init->string());
  if (args.resume && !fs::exists(*args.resume)) throw IoError("resume checkpoint not found: " + args.resume->string());

  const auto plan = load_train_plan(ctx, args.phase);
  if (args.init && plan.model_overrides) throw Error("a \"model\" config object cannot be combined with --init");
  const auto d = load_dataset(args.dataset);
  std::optional<SplitIds> split;
  if (args.split) split = load_split(*args.split);

  m.seed = plan.master_seed;
  m.config = {{"phase", args.phase == TrainPhase::Pretrain ? "pretrain" : "finetune"},
              {"aspect", args.aspect},
              {"train_config", args.phase == TrainPhase::Pretrain ? json(plan.pretrain) : json(plan.finetune)},
              {"config_file", plan.raw_config},
              {"parallel_aspects", args.parallel_aspects},
              {"threads", ctx.threads}};
  if (ctx.config_path) m.add_input(*ctx.config_path);
  for (const auto& f : d.files()) m.add_input(f);
  if (split) {
    for (const auto& f : split->files()) m.add_input(f);
  }
  for (auto a : aspects) {
    if (args.init) m.add_input(init_path_for(*args.init, a));
  }
  if (args.resume) m.add_input(*args.resume);
  detail::make_dirs(ctx.out_dir);

  std::vector<std::optional<AspectRun>> runs(aspects.size());
  const SplitIds* split_ptr = split ? &*split : nullptr;
  const bool parallel = args.parallel_aspects && aspects.size() > 1 && ctx.threads > 1;
  if (parallel) {
    std::vector<std::exception_ptr> errors(aspects.size());
    std::vector<std::thread> pool;
    const std::size_t width = std::min<std::size_t>(ctx.threads, aspects.size());
    for (std::size_t start = 0; start < aspects.size(); start += width) {
      for (std::size_t i = start; i < std::min(start + width, aspects.size()); ++i) {
        pool.emplace_back([&, i] {
          try {
            runs[i] = train_aspect(ctx, args, plan, d, split_ptr, aspects[i]);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      pool.clear();
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < aspects.size(); ++i) runs[i] = train_aspect(ctx, args, plan, d, split_ptr, aspects[i]);
  }

  json results = json::object();
  for (const auto& r : runs) {
    results[std::string(aspect_code(r->aspect))] = {
        {"records", r->records}, {"steps", r->steps}, {"final_loss", r->final_loss ? json(*r->final_loss) : json()}};
    for (const auto& p : r->outputs) m.add_output(p);
  }
  m.results = results;
  write_manifest(m, ctx.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  fs::path input;
  fs::path models;
  double threshold = 0.5;
};

inline void cmd_predict(Context& ctx, const PredictArgs& a) {
  RunManifest m;
  m.command = ctx.command_line;
  m.started = utc_timestamp();
  m.seed = ctx.seed;
  m.config = {{"threshold", a.threshold}, {"models", a.models.string()}};
  if (!(a.threshold >= 0.0 && a.threshold <= 1.0)) throw UsageError("--threshold must lie in [0, 1]");
  detail::require_dir(a.models, "models directory");
  auto fusion = load_fusion(a.models);
  fusion.set_threshold(a.threshold);
  m.add_input(a.input);
  for (auto asp : kAllAspects) {
    m.add_input(a.models / std::string(aspect_code(asp)) / "model.ckpt");
    m.add_input(a.models / std::string(aspect_code(asp)) / "vocab.tsv");
  }
  detail::make_dirs(ctx.out_dir);
  const auto out = ctx.out_dir / "predictions.tsv";
  const auto summary = predict_batch(a.input, fusion, out, ctx.err);
  ctx.log->info("{} records predicted, {} skipped", summary.processed, summary.failed);
  m.add_output(out);
  m.results = {{"processed", summary.processed}, {"skipped", summary.failed}};
  write_manifest(m, ctx.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  fs::path dataset;
  fs::path split;
  std::string part = "test";
  std::optional<fs::path> models;
  std::optional<fs::path> predictions;
  std::vector<double> thresholds = {0.5};
  std::size_t bucket_width = 100;
  std::string aspect = "all";
};

// Prediction TSV back into dense scores. Terms a record does not list score 0.
inline std::map<std::string, std::map<std::pair<GoAspect, std::string>, double>> read_predictions(const fs::path& path) {
  auto in = protgo::detail::open_input(path);
  std::map<std::string, std::map<std::pair<GoAspect, std::string>, double>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto v = protgo::detail::strip_cr(line);
    if (protgo::detail::trim(v).empty()) continue;
    const auto f = protgo::detail::split(v, '\t');
    if (f.size() != 4) throw ParseError("malformed prediction line", line_no);
    auto& row = out[std::string(f[0])];
    if (f[1] == "-") continue;
    const auto asp = parse_aspect(f[2]);
    if (!asp || !is_go_id(f[1])) throw ParseError("malformed prediction line", line_no);
    try {
      row[{*asp, std::string(f[1])}] = std::stod(std::string(f[3]));
    } catch (const std::exception&) {
      throw ParseError("malformed score '" + std::string(f[3]) + "'", line_no);
    }
  }
  return out;
}

inline void cmd_evaluate(Context& ctx, const EvaluateArgs& a) {
  RunManifest m;
  m.command = ctx.command_line;
  m.started = utc_timestamp();
  m.seed = ctx.seed;
  if (a.models.has_value() == a.predictions.has_value()) throw UsageError("give exactly one of --models or --predictions");
  if (a.bucket_width == 0) throw UsageError("--bucket-width must be positive");
  if (a.thresholds.empty()) throw UsageError("at least one --threshold is needed");
  for (double t : a.thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("--threshold must lie in [0, 1]");
  }
  const auto aspects = detail::select_aspects(a.aspect);
  const auto d = load_dataset(a.dataset);
  const auto split = load_split(a.split);
  const auto part_it = split.parts.find(a.part);
  if (part_it == split.parts.end()) throw UsageError("unknown split part '" + a.part + "'");
  for (const auto& f : d.files()) m.add_input(f);
  for (const auto& f : split.files()) m.add_input(f);
  m.config = {{"thresholds", a.thresholds}, {"bucket_width", a.bucket_width}, {"part", a.part}, {"aspect", a.aspect}};

  std::optional<std::map<std::string, std::map<std::pair<GoAspect, std::string>, double>>> predicted;
  if (a.predictions) {
    predicted = read_predictions(*a.predictions);
    m.add_input(*a.predictions);
  }

  struct AspectData {
    GoAspect aspect;
    std::vector<std::size_t> lengths;
    ScoreMatrix scores;
    TargetMatrix targets;
  };
  std::vector<AspectData> data;
  for (auto asp : aspects) {
    const std::string code(aspect_code(asp));
    const auto rows = rows_in(d.rows_for(asp), &part_it->second);
    if (rows.empty()) throw Error("empty " + a.part + " split for aspect " + code);
    const auto& vocab = d.vocab_for(asp);
    AspectData ad{asp, {}, {}, {}};
    if (a.models) {
      const auto dir = *a.models / code;
      if (!fs::exists(dir / "model.ckpt")) throw IoError("missing checkpoint for aspect " + code + ": " + (dir / "model.ckpt").string());
      const auto model = model_from_checkpoint(load_checkpoint(dir / "model.ckpt"));
      const auto mvocab = read_vocabulary(dir / "vocab.tsv", asp);
      if (mvocab.terms != vocab.terms) throw Error("the " + code + " model was trained on a different vocabulary");
      m.add_input(dir / "model.ckpt");
      m.add_input(dir / "vocab.tsv");
      for (const auto& r : rows) {
        Tape tape;
        tape.set_recording(false);
        const auto logits = model.forward_classify(tape, r.tokens);
        std::vector<double> s(logits.numel());
        for (std::size_t j = 0; j < s.size(); ++j) s[j] = sigmoid(logits[j]);
        ad.scores.push_back(std::move(s));
      }
    } else {
      for (const auto& r : rows) {
        const auto it = predicted->find(r.accession);
        if (it == predicted->end()) throw Error("no predictions for accession '" + r.accession + "'");
        std::vector<double> s(vocab.size(), 0.0);
        for (std::size_t j = 0; j < vocab.size(); ++j) {
          const auto t = it->second.find({asp, vocab.terms[j]});
          if (t != it->second.end()) s[j] = t->second;
        }
        ad.scores.push_back(std::move(s));
      }
    }
    for (const auto& r : rows) {
      ad.lengths.push_back(r.length);
      ad.targets.push_back(r.labels);
    }
    data.push_back(std::move(ad));
  }

  detail::make_dirs(ctx.out_dir);
  std::vector<fs::path> outputs;
  json reports = json::array();
  const bool sweep = a.thresholds.size() > 1;
  for (double t : a.thresholds) {
    std::vector<AspectEvaluation> evals;
    json aspects_json = json::array();
    for (const auto& ad : data) {
      const std::string code(aspect_code(ad.aspect));
      evals.push_back(evaluate_aspect(code, ad.lengths, ad.scores, ad.targets, t, a.bucket_width));
      aspects_json.push_back(to_json(evals.back()));
      const auto sla = ctx.out_dir / ("sla_" + code + (sweep ? "_t" + detail::fmt_threshold(t) : "") + ".csv");
      write_sla_csv(evals.back().lengths, sla);
      outputs.push_back(sla);
    }
    reports.push_back({{"threshold", t}, {"aspects", aspects_json}});
    if (sweep) ctx.out << "threshold " << detail::fmt_threshold(t) << '\n';
    ctx.out << format_table(evals);
  }
  // ROC does not depend on the threshold.
  for (const auto& ad : data) {
    const std::string code(aspect_code(ad.aspect));
    try {
      const auto roc = micro_roc(ad.scores, ad.targets);
      const auto p = ctx.out_dir / ("roc_" + code + ".csv");
      write_roc_csv(roc, p);
      outputs.push_back(p);
    } catch (const Error& e) {
      ctx.log->warn("{}: {}", code, e.what());
    }
  }
  const json report = {{"part", a.part}, {"bucket_width", a.bucket_width}, {"reports", reports}};
  detail::write_text(ctx.out_dir / "report.json", report.dump(2) + "\n");
  outputs.push_back(ctx.out_dir / "report.json");
  for (const auto& p : outputs) m.add_output(p);
  write_manifest(m, ctx.out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Entry point.

inline int verify(Context& ctx, const fs::path& manifest_path) {
  const auto m = read_manifest(manifest_path);
  const auto drifted = verify_manifest(m);
  for (const auto& p : drifted) ctx.err << "input drifted: " << p << '\n';
  if (!drifted.empty()) return 1;
  ctx.log->info("{} inputs match {}", m.inputs.size(), manifest_path.string());
  return 0;
}

inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"protgo: GO-term annotation with three aspect-specific transformer classifiers", "protgo"};
  app.set_version_flag("--version", kVersion);
  app.fallthrough();
  app.require_subcommand(0, 1);

  std::uint64_t seed = 0;
  std::string config, out_dir, verify_path;
  bool quiet = false;
  auto* seed_opt = app.add_option("--seed", seed, "Master seed");
  app.add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--quiet", quiet, "Only warnings and errors");
  app.add_option("--verify", verify_path, "Re-hash the inputs listed in a run manifest and fail on drift")
      ->check(CLI::ExistingFile);

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "Parse, filter, build vocabularies and encode per-aspect datasets");
  c_pre->add_option("input", pre.input, "Primary TSV or FASTA file")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--annotations", pre.annotations, "Annotation TSV for FASTA input")->check(CLI::ExistingFile);
  c_pre->add_option("--top-k", pre.top_k, "Terms kept per aspect")->capture_default_str();
  c_pre->add_option("--max-len", pre.max_len, "Residues kept before truncation")->capture_default_str();

  SplitArgs sp;
  auto* c_split = app.add_subcommand("split", "Random or clustered train/dev/test split");
  c_split->add_option("dataset", sp.dataset, "Dataset directory")->required();
  c_split->add_option("--kind", sp.kind)->check(CLI::IsMember({"random", "clustered"}))->capture_default_str();
  c_split->add_option("--identity-threshold", sp.identity_threshold)->capture_default_str();
  c_split->add_option("--kmer", sp.kmer)->capture_default_str();

  TrainArgs pt, ft;
  pt.phase = TrainPhase::Pretrain;
  ft.phase = TrainPhase::Finetune;
  std::string pt_split, pt_resume, pt_init, ft_split, ft_resume, ft_init;
  auto add_train = [&](CLI::App* c, TrainArgs& t, std::string& split, std::string& resume, std::string& init) {
    c->add_option("dataset", t.dataset, "Dataset directory")->required();
    c->add_option("--split", split, "Split directory; trains on train.ids only");
    c->add_option("--aspect", t.aspect)->check(CLI::IsMember({"BP", "MF", "CC", "all"}))->capture_default_str();
    c->add_option("--resume", resume, "Checkpoint to resume from");
    c->add_option("--init", init, "Starting checkpoint, or a directory holding <ASPECT>/model.ckpt");
    c->add_flag("--parallel-aspects", t.parallel_aspects, "Train the aspects on separate threads");
  };
  auto* c_pt = app.add_subcommand("pretrain", "Masked-LM pretraining");
  add_train(c_pt, pt, pt_split, pt_resume, pt_init);
  auto* c_ft = app.add_subcommand("finetune", "Multi-label fine-tuning");
  add_train(c_ft, ft, ft_split, ft_resume, ft_init);

  PredictArgs pr;
  auto* c_pr = app.add_subcommand("predict", "Fused prediction with all three aspect models");
  c_pr->add_option("input", pr.input, "Sequences (TSV or FASTA)")->required()->check(CLI::ExistingFile);
  c_pr->add_option("--models", pr.models, "Directory holding BP/, MF/, CC/")->required();
  c_pr->add_option("--threshold", pr.threshold)->capture_default_str();

  EvaluateArgs ev;
  std::string ev_models, ev_predictions;
  auto* c_ev = app.add_subcommand("evaluate", "Metrics, ROC and length analysis on a split part");
  c_ev->add_option("dataset", ev.dataset, "Dataset directory")->required();
  c_ev->add_option("--split", ev.split, "Split directory")->required();
  c_ev->add_option("--part", ev.part)->check(CLI::IsMember({"train", "dev", "test"}))->capture_default_str();
  c_ev->add_option("--models", ev_models, "Directory holding per-aspect checkpoints");
  c_ev->add_option("--predictions", ev_predictions, "Prediction TSV")->check(CLI::ExistingFile);
  c_ev->add_option("--threshold", ev.thresholds, "Decision threshold; repeat or comma-separate for a sweep")
      ->delimiter(',')
      ->capture_default_str();
  c_ev->add_option("--bucket-width", ev.bucket_width)->capture_default_str();
  c_ev->add_option("--aspect", ev.aspect)->check(CLI::IsMember({"BP", "MF", "CC", "all"}))->capture_default_str();

  std::vector<const char*> args;
  for (const auto& s : argv) args.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  sink->set_pattern("[%l] %v");
  Context ctx{out, err, std::make_shared<spdlog::logger>("protgo", sink)};
  ctx.log->set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  ctx.seed = seed;
  ctx.seed_given = seed_opt->count() > 0;
  if (!config.empty()) ctx.config_path = config;
  ctx.out_dir = out_dir;
  for (std::size_t i = 0; i < argv.size(); ++i) ctx.command_line += (i ? " " : "") + argv[i];

  auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
  try {
    ctx.threads = detail::thread_cap();
    if (!verify_path.empty()) {
      if (!app.get_subcommands().empty()) throw UsageError("--verify runs on its own");
      return verify(ctx, verify_path);
    }
    if (app.get_subcommands().empty()) {
      err << app.help();
      return 2;
    }
    if (out_dir.empty()) throw UsageError("--out is required");
    if (*c_pre) cmd_preprocess(ctx, pre);
    else if (*c_split) cmd_split(ctx, sp);
    else if (*c_pt || *c_ft) {
      const bool is_pt = static_cast<bool>(*c_pt);
      auto& t = is_pt ? pt : ft;
      t.split = opt_path(is_pt ? pt_split : ft_split);
      t.resume = opt_path(is_pt ? pt_resume : ft_resume);
      t.init = opt_path(is_pt ? pt_init : ft_init);
      cmd_train(ctx, t);
    } else if (*c_pr) cmd_predict(ctx, pr);
    else if (*c_ev) {
      ev.models = opt_path(ev_models);
      ev.predictions = opt_path(ev_predictions);
      cmd_evaluate(ctx, ev);
    }
    return 0;
  } catch (const UsageError& e) {
    ctx.log->error("{}", e.what());
    return 2;
  } catch (const IoError& e) {
    ctx.log->error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    ctx.log->error("{}", e.what());
    return 1;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace protgo::cli
