#pragma once

// Command-line driver: synth, trace, identify, lens, curves, deviate, report,
// dump and pipeline. Exit codes: 0 ok, 2 usage or input error, 3 format error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmnt/dape.hpp"
#include "mmnt/error.hpp"
#include "mmnt/lens.hpp"
#include "mmnt/perturb.hpp"
#include "mmnt/refmodel.hpp"
#include "mmnt/stats.hpp"
#include "mmnt/synth.hpp"
#include "mmnt/text_io.hpp"
#include "mmnt/trace_store.hpp"

namespace mmnt::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFormat = 3;

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

class Logger {
 public:
  Logger(std::ostream& sink, LogLevel level) : sink_(sink), level_(level) {}

  static LogLevel level_from_env() {
    const char* v = std::getenv("MMNT_LOG_LEVEL");
    if (!v) return LogLevel::Warn;
    const std::string s(v);
    if (s == "error") return LogLevel::Error;
    if (s == "warn") return LogLevel::Warn;
    if (s == "info") return LogLevel::Info;
    if (s == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
  }

  void log(LogLevel lvl, const std::string& msg) const {
    static constexpr const char* names[] = {"error", "warn", "info", "debug"};
    if (lvl <= level_) sink_ << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
  }
  void error(const std::string& m) const { log(LogLevel::Error, m); }
  void warn(const std::string& m) const { log(LogLevel::Warn, m); }
  void info(const std::string& m) const { log(LogLevel::Info, m); }

 private:
  std::ostream& sink_;
  LogLevel level_;
};

// ---------------------------------------------------------------------------
// Option structs, one per command.

struct SynthOptions {
  fs::path out;
  std::uint64_t seed = 1;
  double plant_fraction = 0.02;
  double w2_scale = 1.0;
  double embedding_radius = 2.0;
  std::uint16_t domains = 5;
  std::uint32_t samples = 100;
  std::uint32_t tokens = 32;
  std::uint32_t vocab = 64;
  std::uint32_t dim = 32;
  std::uint32_t layers = 4;
  std::uint32_t ffn = 256;
  std::string activation = "relu";
};

struct TraceOptions {
  fs::path model;
  fs::path corpus;
  fs::path out;
  std::string format = "raw";
  std::size_t samples_per_domain = 0;  // 0 = all
};

struct IdentifyOptions {
  fs::path traces;
  fs::path out;
  std::optional<fs::path> csv;
  std::optional<fs::path> silent;
  double percentile = 1.0;
  double tau = 0.2;
  std::string scope = "per_module";
  std::uint64_t seed = 0;
};

struct LensOptions {
  fs::path model;
  fs::path out;
  std::optional<fs::path> corpus;
  std::optional<fs::path> vocab;
  std::vector<std::uint32_t> tokens;
  std::uint16_t domain = 0;
  std::size_t sample = 0;
  std::optional<std::size_t> position;
  std::size_t k = 5;
};

struct CurvesOptions {
  fs::path model;
  fs::path corpus;
  fs::path out;
  std::size_t samples_per_domain = 0;
};

struct DeviateOptions {
  fs::path model;
  fs::path selection;
  fs::path corpus;
  fs::path out;
  std::size_t trials = 5;
  std::uint64_t seed = 0;
  std::size_t samples_per_domain = 0;
};

struct ReportOptions {
  fs::path artifacts;
  std::optional<fs::path> out;
};

struct DumpOptions {
  fs::path model;
  fs::path corpus;
  fs::path out;
  std::uint16_t domain = 0;
  std::size_t sample = 0;
  std::uint32_t layer = 0;
};

struct PipelineOptions {
  fs::path model;
  fs::path corpus;
  fs::path out;
  std::optional<fs::path> planted;
  std::string format = "raw";
  double percentile = 1.0;
  double tau = 0.2;
  std::string scope = "per_module";
  std::size_t trials = 5;
  std::uint64_t seed = 0;
  std::size_t samples_per_domain = 0;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ValidationError(what + " not found: " + p.string());
}

inline void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw ValidationError(what + " directory not found: " + p.string());
}

inline void require_parent(const fs::path& out) {
  auto parent = out.parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw ValidationError("output directory does not exist: " + parent.string());
  }
}

inline ModelParams read_model(const fs::path& p) { return decode_model(read_file(p)); }

inline std::string model_id(const ModelConfig& c) {
  return "refmodel-v" + std::to_string(c.vocab_size) + "-d" + std::to_string(c.dim) + "-l" +
         std::to_string(c.layers) + "-s" + std::to_string(c.ffn_size) + "-seed" +
         std::to_string(c.seed);
}

inline std::span<const ModelInput> domain_samples(const Corpus& c, std::uint16_t d,
                                                  std::size_t limit) {
  const auto& all = c.domains.at(d);
  const auto n = limit == 0 ? all.size() : std::min(limit, all.size());
  return {all.data(), n};
}

inline void check_corpus_fits(const Corpus& c, const ModelConfig& m) {
  if (c.spec.vocab_size > m.vocab_size) {
    throw ValidationError("corpus vocabulary (" + std::to_string(c.spec.vocab_size) +
                          ") exceeds model vocabulary (" + std::to_string(m.vocab_size) + ")");
  }
  if (c.spec.patch_count != m.patch_count || c.spec.patch_dim != m.patch_dim) {
    throw ValidationError("corpus patch shape does not match the model encoder");
  }
}

inline SelectionScope parse_scope(const std::string& s) {
  if (s == "per_module") return SelectionScope::PerModule;
  if (s == "global") return SelectionScope::Global;
  throw ValidationError("unknown scope '" + s + "' (expected per_module or global)");
}

inline Json optional_array(const std::vector<std::optional<double>>& v) {
  Json a = Json::array();
  for (const auto& x : v) a.push_back(x ? Json(*x) : Json(nullptr));
  return a;
}

inline std::vector<std::string> read_vocab(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth(const SynthOptions& o, const Logger& log) {
  ModelConfig cfg;
  cfg.vocab_size = o.vocab;
  cfg.dim = o.dim;
  cfg.layers = o.layers;
  cfg.ffn_size = o.ffn;
  cfg.seed = o.seed;
  if (o.activation == "relu") {
    cfg.activation = Activation::Relu;
  } else if (o.activation == "gelu") {
    cfg.activation = Activation::Gelu;
  } else {
    throw ValidationError("unknown activation '" + o.activation + "' (expected relu or gelu)");
  }
  cfg.validate();
  SynthCorpusSpec spec;
  spec.domains = o.domains;
  spec.vocab_size = o.vocab;
  spec.samples_per_domain = o.samples;
  spec.tokens_per_sample = o.tokens;
  spec.patch_count = cfg.patch_count;
  spec.patch_dim = cfg.patch_dim;
  spec.seed = o.seed;
  spec.validate();
  if (spec.patch_count + spec.tokens_per_sample > cfg.context_length) {
    throw ValidationError("samples exceed the model context length");
  }

  log.info("synth: seed " + std::to_string(o.seed));
  const auto corpus = generate_corpus(spec);
  auto planted = build_planted_model(cfg, corpus, o.plant_fraction, o.w2_scale, o.embedding_radius);

  Json pj = plant_spec_json(planted.plants, planted.checks);
  pj["seed"] = o.seed;
  pj["fraction"] = o.plant_fraction;
  pj["embedding_radius"] = o.embedding_radius;

  std::string vocab;
  for (const auto& t : synth_vocabulary(spec)) vocab += t + "\n";

  fs::create_directories(o.out);
  write_file_atomic(o.out / "model.bin", encode_model(planted.params));
  save_corpus(o.out / "corpus", corpus);
  write_file_atomic(o.out / "vocab.txt", vocab);
  write_file_atomic(o.out / "planted.json", pj.dump(1) + "\n");
  log.info("synth: planted " + std::to_string(planted.plants.neurons.size()) + " neurons");
  return kExitOk;
}

inline int cmd_trace(const TraceOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_dir(o.corpus, "corpus");
  if (o.format != "raw" && o.format != "agg") {
    throw ValidationError("unknown trace format '" + o.format + "' (expected raw or agg)");
  }
  const auto params = read_model(o.model);
  const auto corpus = load_corpus(o.corpus);
  check_corpus_fits(corpus, params.config);
  const auto manifest = make_manifest(corpus, params.config, model_id(params.config));

  std::vector<std::string> files;
  for (std::uint16_t d = 0; d < corpus.spec.domains; ++d) {
    std::vector<TraceRecord> records;
    // agg: one summed record per (layer, token type) for the whole domain
    std::map<std::pair<std::uint32_t, std::uint8_t>, TraceRecord> summed;
    for (const auto& s : domain_samples(corpus, d, o.samples_per_domain)) {
      for (auto& r : emit_trace(forward(params, s), d)) {
        if (o.format == "raw") {
          records.push_back(std::move(r));
          continue;
        }
        auto agg = to_aggregate(r);
        auto [it, fresh] = summed.try_emplace({r.layer, r.token_type}, agg);
        if (fresh) continue;
        auto& into = std::get<AggCounts>(it->second.payload);
        const auto& add = std::get<AggCounts>(agg.payload);
        into.token_total = detail::checked_add(into.token_total, add.token_total);
        for (std::size_t j = 0; j < add.counts.size(); ++j) into.counts[j] += add.counts[j];
      }
    }
    for (auto& [key, r] : summed) records.push_back(std::move(r));
    files.push_back(encode_trace(records, manifest));
  }
  Json run;
  run["command"] = "trace";
  run["seed"] = params.config.seed;
  run["format"] = o.format;
  run["samples_per_domain"] = o.samples_per_domain;

  fs::create_directories(o.out);
  write_file_atomic(o.out / "manifest.json", save_manifest(manifest));
  for (std::size_t d = 0; d < files.size(); ++d) {
    write_file_atomic(o.out / ("domain_" + std::to_string(d) + ".mmnt"), files[d]);
  }
  write_file_atomic(o.out / "run.json", run.dump(1) + "\n");
  log.info("trace: wrote " + std::to_string(files.size()) + " trace files");
  return kExitOk;
}

// Merges every *.mmnt file under `dir` (sorted by name) into one counter set.
inline ActivationCounters read_trace_dir(const fs::path& dir, const CorpusManifest& manifest,
                                         const Logger& log) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".mmnt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no .mmnt trace files in " + dir.string());
  ActivationCounters total(manifest);
  std::set<std::uint16_t> seen;
  for (const auto& f : files) {
    std::istringstream in(read_file(f), std::ios::binary);
    ActivationCounters shard(manifest);
    try {
      for (const auto& r : read_trace(in, manifest)) {
        shard.accumulate(r);
        seen.insert(r.domain_id);
      }
    } catch (const FormatError& e) {
      throw FormatError(f.filename().string() + ": " + e.what());
    }
    total.merge(shard);
    log.info("identify: merged " + f.filename().string());
  }
  std::string missing;
  for (const auto& d : manifest.domains) {
    if (!seen.count(d.id)) missing += (missing.empty() ? "" : ", ") + std::to_string(d.id) + " (" + d.name + ")";
  }
  if (!missing.empty()) throw ValidationError("incomplete domain coverage, no trace records for domain(s): " + missing);
  return total;
}

inline int cmd_identify(const IdentifyOptions& o, const Logger& log) {
  require_dir(o.traces, "trace");
  require_file(o.traces / "manifest.json", "trace manifest");
  require_parent(o.out);
  if (o.csv) require_parent(*o.csv);
  const auto scope = parse_scope(o.scope);
  if (!(o.percentile > 0.0 && o.percentile <= 100.0)) {
    throw ValidationError("percentile must lie in (0, 100]");
  }
  if (!(o.tau > 0.0 && o.tau < 1.0)) throw ValidationError("tau must lie in (0, 1)");

  const auto manifest = load_manifest(read_file(o.traces / "manifest.json"));
  const auto counters = read_trace_dir(o.traces, manifest, log);
  const auto probs = activation_probabilities(counters);
  const auto silent = detect_silent(counters);
  const auto table = score_dape(probs);
  SelectionFile file;
  file.selection = select_bottom(table, o.percentile, scope);
  file.assignment = assign_domains(file.selection, probs, o.tau);
  file.domains = manifest.domains;
  file.seed = o.seed;
  log.info("identify: percentile " + std::to_string(o.percentile) + ", tau " +
           std::to_string(o.tau) + ", selected " + std::to_string(file.selection.neurons.size()));

  auto silent_json = silent_report_json(silent);
  silent_json["seed"] = o.seed;
  const auto silent_path = o.silent ? *o.silent : o.out.parent_path() / "silent.json";
  std::string csv;
  if (o.csv) {
    std::ostringstream ss;
    write_probability_csv(ss, probs);
    csv = ss.str();
  }
  write_file_atomic(o.out, save_selection(file));
  write_file_atomic(silent_path, silent_json.dump(1) + "\n");
  if (o.csv) write_file_atomic(*o.csv, csv);
  return kExitOk;
}

inline int cmd_lens(const LensOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_parent(o.out);
  if (o.vocab) require_file(*o.vocab, "vocabulary file");
  if (o.corpus && !o.tokens.empty()) throw ValidationError("give either --corpus or --tokens, not both");
  if (!o.corpus && o.tokens.empty()) throw ValidationError("lens needs --corpus or --tokens");
  if (o.corpus) require_dir(*o.corpus, "corpus");
  const auto params = read_model(o.model);
  ModelInput input;
  std::vector<std::string> vocab;
  if (o.corpus) {
    const auto corpus = load_corpus(*o.corpus);
    check_corpus_fits(corpus, params.config);
    if (o.domain >= corpus.domains.size() || o.sample >= corpus.domains[o.domain].size()) {
      throw ValidationError("domain/sample out of range for corpus");
    }
    input = corpus.domains[o.domain][o.sample];
    vocab = synth_vocabulary(corpus.spec);
  } else {
    input.tokens = o.tokens;
  }
  if (o.vocab) vocab = read_vocab(*o.vocab);
  const auto tr = forward(params, input);
  const auto pos = o.position.value_or(tr.positions() - 1);
  const auto rows = heatmap_rows(heatmap(params, tr, pos, o.k), vocab);
  log.info("lens: position " + std::to_string(pos) + ", top-" + std::to_string(o.k));
  std::ostringstream ss;
  write_heatmap(ss, rows);
  write_file_atomic(o.out, ss.str());
  return kExitOk;
}

inline Json curves_json(const ModelParams& params, const Corpus& corpus, std::size_t limit) {
  const auto layers = params.config.layers + 1;
  EntropyCurveAccumulator overall(layers);
  Json j;
  j["format"] = "mmnt-curves";
  j["version"] = 1;
  j["seed"] = params.config.seed;
  j["unit"] = "nats";
  j["max_entropy"] = std::log(static_cast<double>(params.config.vocab_size));
  j["domains"] = Json::array();
  const auto names = corpus.spec.names();
  for (std::uint16_t d = 0; d < corpus.spec.domains; ++d) {
    EntropyCurveAccumulator acc(layers);
    for (const auto& s : domain_samples(corpus, d, limit)) {
      const auto tr = forward(params, s);
      acc.add(params, tr);
      overall.add(params, tr);
    }
    const auto c = acc.curve();
    j["domains"].push_back({{"domain", d},
                            {"name", names[d]},
                            {"image_positions", c.image_positions},
                            {"text_positions", c.text_positions},
                            {"image_mean", optional_array(c.image_mean)},
                            {"text_mean", optional_array(c.text_mean)}});
  }
  const auto c = overall.curve();
  j["overall"] = {{"image_positions", c.image_positions},
                  {"text_positions", c.text_positions},
                  {"image_mean", optional_array(c.image_mean)},
                  {"text_mean", optional_array(c.text_mean)}};
  return j;
}

inline int cmd_curves(const CurvesOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_dir(o.corpus, "corpus");
  require_parent(o.out);
  const auto params = read_model(o.model);
  const auto corpus = load_corpus(o.corpus);
  check_corpus_fits(corpus, params.config);
  const auto j = curves_json(params, corpus, o.samples_per_domain);
  log.info("curves: " + std::to_string(params.config.layers + 1) + " layers");
  write_file_atomic(o.out, j.dump(1) + "\n");
  return kExitOk;
}

inline DeactivationMask domain_mask(const SelectionFile& f, std::uint16_t d) {
  DeactivationMask mask(f.selection.modules);
  for (const auto& [id, doms] : f.assignment.domains) {
    if (std::find(doms.begin(), doms.end(), d) != doms.end()) mask.set(id);
  }
  return mask;
}

inline int cmd_deviate(const DeviateOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_file(o.selection, "selection file");
  require_dir(o.corpus, "corpus");
  require_parent(o.out);
  if (o.trials < 1) throw ValidationError("trials must be >= 1");
  const auto params = read_model(o.model);
  const auto sel = load_selection(read_file(o.selection));
  const auto corpus = load_corpus(o.corpus);
  check_corpus_fits(corpus, params.config);
  if (sel.selection.modules != model_modules(params.config)) {
    throw ValidationError("selection modules do not match the model configuration");
  }
  if (sel.domains.size() != corpus.spec.domains) {
    throw ValidationError("selection has " + std::to_string(sel.domains.size()) +
                          " domains, corpus has " + std::to_string(corpus.spec.domains));
  }
  DeviationReport report;
  report.seed = o.seed;
  report.trials = o.trials;
  log.info("deviate: seed " + std::to_string(o.seed) + ", trials " + std::to_string(o.trials));
  for (std::uint16_t d = 0; d < corpus.spec.domains; ++d) {
    auto r = deviation_experiment(params, domain_samples(corpus, d, o.samples_per_domain),
                                  domain_mask(sel, d), o.trials, o.seed, d);
    r.domain = d;
    report.domains.push_back(std::move(r));
  }
  write_file_atomic(o.out, deviation_report_json(report, sel.domains).dump(1) + "\n");
  return kExitOk;
}

inline int cmd_dump(const DumpOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_dir(o.corpus, "corpus");
  require_parent(o.out);
  const auto params = read_model(o.model);
  const auto corpus = load_corpus(o.corpus);
  check_corpus_fits(corpus, params.config);
  if (o.domain >= corpus.domains.size() || o.sample >= corpus.domains[o.domain].size()) {
    throw ValidationError("domain/sample out of range for corpus");
  }
  const auto dump = hidden_states(forward(params, corpus.domains[o.domain][o.sample]), o.layer);
  std::ostringstream ss(std::ios::binary);
  write_hidden_dump(ss, dump);
  log.info("dump: layer " + std::to_string(o.layer) + ", " + std::to_string(dump.token_len) + " tokens");
  write_file_atomic(o.out, ss.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline std::optional<Json> load_artifact(const fs::path& p) {
  if (!fs::is_regular_file(p)) return std::nullopt;
  return parse_json(read_file(p), p.filename().string());
}

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

inline std::string cell(const Json& v) { return v.is_null() ? "-" : fixed(v.get<double>()); }

}  // namespace detail

inline int cmd_report(const ReportOptions& o, const Logger& log) {
  require_dir(o.artifacts, "artifact");
  const auto out_dir = o.out.value_or(o.artifacts);
  require_dir(out_dir, "report output");
  const auto selection = detail::load_artifact(o.artifacts / "selection.json");
  const auto deviation = detail::load_artifact(o.artifacts / "deviation.json");
  const auto curves = detail::load_artifact(o.artifacts / "curves.json");
  const auto planted = detail::load_artifact(o.artifacts / "planted.json");
  if (!selection && !deviation && !curves) {
    throw ValidationError("no artifacts (selection.json, deviation.json, curves.json) in " +
                          o.artifacts.string());
  }

  Json rj;
  rj["format"] = "mmnt-report";
  rj["version"] = 1;
  std::ostringstream md;
  md << "# Domain-specific neuron report\n";

  if (selection) {
    const auto sel = load_selection(selection->dump());
    rj["seed"] = sel.seed;
    Json t = Json::array();
    md << "\n## Selected neurons per domain\n\n"
       << "percentile " << sel.selection.percentile << ", tau " << sel.assignment.tau
       << ", scope " << (sel.selection.scope == SelectionScope::Global ? "global" : "per_module")
       << "\n\n| module | scored | selected |";
    for (const auto& d : sel.domains) md << ' ' << d.name << " |";
    md << " unassigned |\n|---|---|---|";
    for (std::size_t d = 0; d < sel.domains.size(); ++d) md << "---|";
    md << "---|\n";
    for (std::size_t m = 0; m < sel.selection.modules.size(); ++m) {
      const auto& counts = sel.assignment.per_module_domain_counts[m];
      std::uint64_t unassigned = 0;
      for (const auto& n : sel.selection.neurons) {
        if (n.id.module == m && sel.assignment.domains.at(n.id).empty()) ++unassigned;
      }
      Json row = {{"module", sel.selection.modules[m].name},
                  {"scored", sel.selection.scored_per_module[m]},
                  {"selected", sel.selection.selected_per_module[m]},
                  {"domain_counts", counts},
                  {"unassigned", unassigned}};
      md << "| " << sel.selection.modules[m].name << " | " << sel.selection.scored_per_module[m]
         << " | " << sel.selection.selected_per_module[m] << " |";
      for (auto c : counts) md << ' ' << c << " |";
      md << ' ' << unassigned << " |\n";
      t.push_back(std::move(row));
    }
    rj["selection"] = {{"percentile", sel.selection.percentile},
                       {"tau", sel.assignment.tau},
                       {"modules", t},
                       {"multi_assigned", sel.assignment.multi_assigned}};

    if (planted) {
      std::set<NeuronId> truth;
      for (const auto& n : planted->at("neurons")) {
        truth.insert({n.at("module").get<std::uint16_t>(), n.at("layer").get<std::uint32_t>(),
                      n.at("index").get<std::uint32_t>()});
      }
      std::size_t hit = 0;
      for (const auto& n : sel.selection.neurons) hit += truth.count(n.id);
      const auto nsel = sel.selection.neurons.size();
      Json rec = {{"planted", truth.size()}, {"selected", nsel}, {"recovered", hit}};
      rec["precision"] = nsel ? Json(static_cast<double>(hit) / nsel) : Json(nullptr);
      rec["recall"] = truth.empty() ? Json(nullptr) : Json(static_cast<double>(hit) / truth.size());
      md << "\n## Planted neuron recovery\n\n| planted | selected | recovered | precision | recall |\n"
         << "|---|---|---|---|---|\n| " << truth.size() << " | " << nsel << " | " << hit << " | "
         << detail::cell(rec["precision"]) << " | " << detail::cell(rec["recall"]) << " |\n";
      rj["planted_recovery"] = std::move(rec);
    }
  } else {
    md << "\n## Selected neurons per domain\n\nselection.json missing\n";
  }

  if (deviation) {
    rj["seed"] = deviation->at("seed");
    Json rows = Json::array();
    md << "\n## Hidden-state deviation\n\ntrials " << deviation->at("trials").get<std::uint64_t>()
       << ", seed " << deviation->at("seed").get<std::uint64_t>()
       << "\n\n| domain | neurons | target | random mean | random std |\n|---|---|---|---|---|\n";
    for (const auto& d : deviation->at("domains")) {
      std::uint64_t n = 0;
      for (const auto& c : d.at("neurons_per_module")) n += c.get<std::uint64_t>();
      md << "| " << d.at("name").get<std::string>() << " | " << n << " | "
         << detail::cell(d.at("target_deviation")) << " | " << detail::cell(d.at("random_mean"))
         << " | " << detail::cell(d.at("random_std")) << " |\n";
      rows.push_back({{"domain", d.at("domain")},
                      {"name", d.at("name")},
                      {"neurons", n},
                      {"target_deviation", d.at("target_deviation")},
                      {"random_mean", d.at("random_mean")},
                      {"random_std", d.at("random_std")}});
    }
    rj["deviation"] = std::move(rows);
  } else {
    md << "\n## Hidden-state deviation\n\ndeviation.json missing\n";
  }

  if (curves) {
    rj["seed"] = curves->at("seed");
    const auto& ov = curves->at("overall");
    md << "\n## Logit-lens entropy by layer (nats)\n\n| layer | image | text |\n|---|---|---|\n";
    for (std::size_t l = 0; l < ov.at("image_mean").size(); ++l) {
      md << "| " << l << " | " << detail::cell(ov.at("image_mean")[l]) << " | "
         << detail::cell(ov.at("text_mean")[l]) << " |\n";
    }
    rj["entropy_curves"] = {{"max_entropy", curves->at("max_entropy")},
                            {"image_mean", ov.at("image_mean")},
                            {"text_mean", ov.at("text_mean")}};
  } else {
    md << "\n## Logit-lens entropy by layer (nats)\n\ncurves.json missing\n";
  }

  write_file_atomic(out_dir / "report.json", rj.dump(1) + "\n");
  write_file_atomic(out_dir / "report.md", md.str());
  log.info("report: wrote " + (out_dir / "report.md").string());
  return kExitOk;
}

inline int cmd_pipeline(const PipelineOptions& o, const Logger& log) {
  require_file(o.model, "model file");
  require_dir(o.corpus, "corpus");
  if (o.planted) require_file(*o.planted, "planted file");
  parse_scope(o.scope);
  fs::create_directories(o.out);
  cmd_trace({o.model, o.corpus, o.out / "traces", o.format, o.samples_per_domain}, log);
  cmd_identify({o.out / "traces", o.out / "selection.json", o.out / "probabilities.csv",
                o.out / "silent.json", o.percentile, o.tau, o.scope, o.seed},
               log);
  cmd_deviate({o.model, o.out / "selection.json", o.corpus, o.out / "deviation.json", o.trials,
               o.seed, o.samples_per_domain},
              log);
  cmd_curves({o.model, o.corpus, o.out / "curves.json", o.samples_per_domain}, log);
  if (o.planted) write_file_atomic(o.out / "planted.json", read_file(*o.planted));
  return cmd_report({o.out, std::nullopt}, log);
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-specific neuron toolkit", "mmnt"};
  app.require_subcommand(1);
  Logger log(err, Logger::level_from_env());

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "Build a planted reference model and synthetic corpus");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Seed for model and corpus")->capture_default_str();
  s->add_option("--plant-fraction", synth.plant_fraction, "Fraction of neurons to plant")->capture_default_str();
  s->add_option("--w2-scale", synth.w2_scale, "Output scale of planted neurons")->capture_default_str();
  s->add_option("--embedding-radius", synth.embedding_radius, "Domain centroid norm")->capture_default_str();
  s->add_option("--domains", synth.domains)->capture_default_str();
  s->add_option("--samples", synth.samples, "Samples per domain")->capture_default_str();
  s->add_option("--tokens", synth.tokens, "Text tokens per sample")->capture_default_str();
  s->add_option("--vocab", synth.vocab)->capture_default_str();
  s->add_option("--dim", synth.dim)->capture_default_str();
  s->add_option("--layers", synth.layers)->capture_default_str();
  s->add_option("--ffn", synth.ffn)->capture_default_str();
  s->add_option("--activation", synth.activation, "relu or gelu")->capture_default_str();

  TraceOptions trace;
  auto* t = app.add_subcommand("trace", "Record activation traces for a corpus");
  t->add_option("--model", trace.model)->required();
  t->add_option("--corpus", trace.corpus)->required();
  t->add_option("--out", trace.out, "Trace directory")->required();
  t->add_option("--format", trace.format, "raw or agg")->capture_default_str();
  t->add_option("--samples-per-domain", trace.samples_per_domain, "0 = all")->capture_default_str();

  IdentifyOptions ident;
  std::string csv, silent;
  auto* i = app.add_subcommand("identify", "Score and select domain-specific neurons");
  i->add_option("--traces", ident.traces)->required();
  i->add_option("--out", ident.out, "Selection file")->required();
  i->add_option("--csv", csv, "Probability table CSV");
  i->add_option("--silent", silent, "Silent-neuron report (default: silent.json beside --out)");
  i->add_option("--percentile", ident.percentile)->capture_default_str();
  i->add_option("--tau", ident.tau)->capture_default_str();
  i->add_option("--scope", ident.scope, "per_module or global")->capture_default_str();
  i->add_option("--seed", ident.seed)->capture_default_str();

  LensOptions lens;
  std::string lens_corpus, lens_vocab;
  std::size_t lens_pos = 0;
  auto* l = app.add_subcommand("lens", "Logit-lens heatmap for one input position");
  l->add_option("--model", lens.model)->required();
  l->add_option("--out", lens.out, "Heatmap CSV")->required();
  l->add_option("--corpus", lens_corpus);
  l->add_option("--domain", lens.domain)->capture_default_str();
  l->add_option("--sample", lens.sample)->capture_default_str();
  l->add_option("--tokens", lens.tokens, "Text token ids")->delimiter(',');
  auto* pos_opt = l->add_option("--position", lens_pos, "Sequence position (default: last)");
  l->add_option("--k", lens.k, "Top-k")->capture_default_str();
  l->add_option("--vocab", lens_vocab, "Vocabulary file, one token per line");

  CurvesOptions curves;
  auto* c = app.add_subcommand("curves", "Per-layer logit-lens entropy curves");
  c->add_option("--model", curves.model)->required();
  c->add_option("--corpus", curves.corpus)->required();
  c->add_option("--out", curves.out)->required();
  c->add_option("--samples-per-domain", curves.samples_per_domain, "0 = all")->capture_default_str();

  DeviateOptions dev;
  auto* d = app.add_subcommand("deviate", "Deactivation deviation against random baselines");
  d->add_option("--model", dev.model)->required();
  d->add_option("--selection", dev.selection)->required();
  d->add_option("--corpus", dev.corpus)->required();
  d->add_option("--out", dev.out)->required();
  d->add_option("--trials", dev.trials)->capture_default_str();
  d->add_option("--seed", dev.seed)->capture_default_str();
  d->add_option("--samples-per-domain", dev.samples_per_domain, "0 = all")->capture_default_str();

  ReportOptions rep;
  std::string rep_out;
  auto* r = app.add_subcommand("report", "Summarize artifacts into report.json and report.md");
  r->add_option("--artifacts", rep.artifacts)->required();
  r->add_option("--out", rep_out, "Output directory (default: --artifacts)");

  DumpOptions dump;
  auto* u = app.add_subcommand("dump", "Dump hidden states of one sample at one layer");
  u->add_option("--model", dump.model)->required();
  u->add_option("--corpus", dump.corpus)->required();
  u->add_option("--out", dump.out)->required();
  u->add_option("--domain", dump.domain)->capture_default_str();
  u->add_option("--sample", dump.sample)->capture_default_str();
  u->add_option("--layer", dump.layer)->capture_default_str();

  PipelineOptions pipe;
  std::string planted;
  auto* p = app.add_subcommand("pipeline", "trace, identify, deviate, curves and report");
  p->add_option("--model", pipe.model)->required();
  p->add_option("--corpus", pipe.corpus)->required();
  p->add_option("--out", pipe.out)->required();
  p->add_option("--planted", planted, "planted.json from synth, for recovery scores");
  p->add_option("--format", pipe.format)->capture_default_str();
  p->add_option("--percentile", pipe.percentile)->capture_default_str();
  p->add_option("--tau", pipe.tau)->capture_default_str();
  p->add_option("--scope", pipe.scope)->capture_default_str();
  p->add_option("--trials", pipe.trials)->capture_default_str();
  p->add_option("--seed", pipe.seed)->capture_default_str();
  p->add_option("--samples-per-domain", pipe.samples_per_domain, "0 = all")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, log);
    if (*t) return cmd_trace(trace, log);
    if (*i) {
      if (!csv.empty()) ident.csv = csv;
      if (!silent.empty()) ident.silent = silent;
      return cmd_identify(ident, log);
    }
    if (*l) {
      if (!lens_corpus.empty()) lens.corpus = lens_corpus;
      if (!lens_vocab.empty()) lens.vocab = lens_vocab;
      if (pos_opt->count()) lens.position = lens_pos;
      return cmd_lens(lens, log);
    }
    if (*c) return cmd_curves(curves, log);
    if (*d) return cmd_deviate(dev, log);
    if (*r) {
      if (!rep_out.empty()) rep.out = rep_out;
      return cmd_report(rep, log);
    }
    if (*u) return cmd_dump(dump, log);
    if (*p) {
      if (!planted.empty()) pipe.planted = planted;
      return cmd_pipeline(pipe, log);
    }
  } catch (const FormatError& e) {
    log.error(e.what());
    return kExitFormat;
  } catch (const Json::exception& e) {
    log.error(e.what());
    return kExitFormat;
  } catch (const PlantError& e) {
    log.error(std::string(e.what()) + " (neuron " + to_string(e.neuron()) + ")");
    return kExitUsage;
  } catch (const ValidationError& e) {
    log.error(e.what());
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    log.error(e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    log.error(e.what());
    return 1;
  }
  return kExitUsage;
}

}  // namespace mmnt::cli
