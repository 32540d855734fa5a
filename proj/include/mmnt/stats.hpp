#pragma once

#include <compare>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mmnt/error.hpp"
#include "mmnt/trace_store.hpp"

namespace mmnt {

// Address of one FFN activation unit. Ordered lexicographically
// (module, layer, index); that order is the tie-break everywhere.
struct NeuronId {
  std::uint16_t module = 0;
  std::uint32_t layer = 0;
  std::uint32_t index = 0;

  auto operator<=>(const NeuronId&) const = default;
};

inline std::string to_string(const NeuronId& id) {
  return std::to_string(id.module) + ":" + std::to_string(id.layer) + ":" +
         std::to_string(id.index);
}

namespace detail {

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_add_overflow(a, b, &out)) {
    throw std::overflow_error("64-bit activation counter overflow");
  }
  return out;
}

}  // namespace detail

// Dense per-neuron, per-domain counts: M (activations) and N (tokens seen).
// Storage per module is [(layer * s + index) * k + domain].
class ActivationCounters {
 public:
  explicit ActivationCounters(CorpusManifest manifest) : manifest_(std::move(manifest)) {
    manifest_.validate();
    for (const auto& m : manifest_.modules) {
      const auto cells = m.population() * manifest_.domain_count();
      active_.emplace_back(cells, 0);
      tokens_.emplace_back(cells, 0);
    }
  }

  const CorpusManifest& manifest() const noexcept { return manifest_; }
  std::size_t domain_count() const noexcept { return manifest_.domain_count(); }

  std::uint64_t activations(const NeuronId& u, std::size_t domain) const {
    return active_.at(u.module).at(cell(u, domain));
  }
  std::uint64_t tokens(const NeuronId& u, std::size_t domain) const {
    return tokens_.at(u.module).at(cell(u, domain));
  }

  void accumulate(const TraceRecord& record) {
    detail::check_against_manifest(record, manifest_, std::nullopt);
    detail::check_payload(record, std::nullopt);
    const auto s = manifest_.modules[record.module_id].neurons_per_layer;
    const auto k = domain_count();
    auto& m = active_[record.module_id];
    auto& n = tokens_[record.module_id];
    const std::size_t base = std::size_t{record.layer} * s * k + record.domain_id;
    if (auto* raw = std::get_if<RawBitmap>(&record.payload)) {
      std::vector<std::uint64_t> counts(s, 0);
      const auto row = RawBitmap::row_bytes(s);
      for (std::uint64_t t = 0; t < raw->token_count; ++t) {
        const std::uint8_t* bits = raw->bits.data() + t * row;
        for (std::uint32_t j = 0; j < s; ++j) counts[j] += (bits[j / 8] >> (j % 8)) & 1u;
      }
      add_layer(m, n, base, k, counts, raw->token_count);
    } else {
      const auto& agg = std::get<AggCounts>(record.payload);
      add_layer(m, n, base, k, agg.counts, agg.token_total);
    }
  }

  void merge(const ActivationCounters& other) {
    if (!(manifest_.modules == other.manifest_.modules) ||
        domain_count() != other.domain_count()) {
      throw ValidationError("cannot merge counters bound to different manifests");
    }
    for (std::size_t mod = 0; mod < active_.size(); ++mod) {
      for (std::size_t c = 0; c < active_[mod].size(); ++c) {
        active_[mod][c] = detail::checked_add(active_[mod][c], other.active_[mod][c]);
        tokens_[mod][c] = detail::checked_add(tokens_[mod][c], other.tokens_[mod][c]);
      }
    }
  }

  // Direct cell write, for tests and tooling that synthesize counters.
  void set(const NeuronId& u, std::size_t domain, std::uint64_t active, std::uint64_t total) {
    if (active > total) throw ValidationError("activation count exceeds token total");
    active_.at(u.module).at(cell(u, domain)) = active;
    tokens_.at(u.module).at(cell(u, domain)) = total;
  }

  bool operator==(const ActivationCounters&) const = default;

 private:
  std::size_t cell(const NeuronId& u, std::size_t domain) const {
    const auto& mod = manifest_.modules.at(u.module);
    if (u.layer >= mod.layer_count || u.index >= mod.neurons_per_layer ||
        domain >= domain_count()) {
      throw ValidationError("neuron " + to_string(u) + " / domain out of range");
    }
    return (std::size_t{u.layer} * mod.neurons_per_layer + u.index) * domain_count() + domain;
  }

  static void add_layer(std::vector<std::uint64_t>& m, std::vector<std::uint64_t>& n,
                        std::size_t base, std::size_t k,
                        const std::vector<std::uint64_t>& counts, std::uint64_t total) {
    for (std::size_t j = 0; j < counts.size(); ++j) {
      auto& mc = m[base + j * k];
      auto& nc = n[base + j * k];
      mc = detail::checked_add(mc, counts[j]);
      nc = detail::checked_add(nc, total);
    }
  }

  CorpusManifest manifest_;
  std::vector<std::vector<std::uint64_t>> active_;
  std::vector<std::vector<std::uint64_t>> tokens_;
};

inline ActivationCounters accumulate(ActivationCounters counters, const TraceRecord& record) {
  counters.accumulate(record);
  return counters;
}

inline ActivationCounters merge(ActivationCounters a, const ActivationCounters& b) {
  a.merge(b);
  return a;
}

// p_{u,i} = M/N per cell; std::nullopt marks an ABSENT cell (N = 0).
class ProbabilityTable {
 public:
  ProbabilityTable(std::vector<ModuleSpec> modules, std::size_t domains)
      : modules_(std::move(modules)), domains_(domains) {
    for (const auto& m : modules_) cells_.emplace_back(m.population() * domains_);
  }

  const std::vector<ModuleSpec>& modules() const noexcept { return modules_; }
  std::size_t domain_count() const noexcept { return domains_; }

  std::optional<double> at(const NeuronId& u, std::size_t domain) const {
    return cells_.at(u.module).at(offset(u) + domain);
  }

  void set(const NeuronId& u, std::size_t domain, std::optional<double> p) {
    if (p && !(*p >= 0.0 && *p <= 1.0)) {
      throw ValidationError("activation probability outside [0,1] for " + to_string(u));
    }
    cells_.at(u.module).at(offset(u) + domain) = p;
  }

  std::vector<std::optional<double>> row(const NeuronId& u) const {
    const auto& c = cells_.at(u.module);
    const auto o = offset(u);
    return {c.begin() + static_cast<std::ptrdiff_t>(o),
            c.begin() + static_cast<std::ptrdiff_t>(o + domains_)};
  }

  // Calls f(NeuronId) for every neuron in (module, layer, index) order.
  template <typename F>
  void for_each_neuron(F&& f) const {
    for (std::size_t mod = 0; mod < modules_.size(); ++mod) {
      for (std::uint32_t l = 0; l < modules_[mod].layer_count; ++l) {
        for (std::uint32_t j = 0; j < modules_[mod].neurons_per_layer; ++j) {
          f(NeuronId{static_cast<std::uint16_t>(mod), l, j});
        }
      }
    }
  }

  bool operator==(const ProbabilityTable&) const = default;

 private:
  std::size_t offset(const NeuronId& u) const {
    const auto& mod = modules_.at(u.module);
    if (u.layer >= mod.layer_count || u.index >= mod.neurons_per_layer) {
      throw ValidationError("neuron " + to_string(u) + " out of range");
    }
    return (std::size_t{u.layer} * mod.neurons_per_layer + u.index) * domains_;
  }

  std::vector<ModuleSpec> modules_;
  std::size_t domains_;
  std::vector<std::vector<std::optional<double>>> cells_;
};

inline ProbabilityTable activation_probabilities(const ActivationCounters& counters) {
  const auto& man = counters.manifest();
  ProbabilityTable table(man.modules, counters.domain_count());
  table.for_each_neuron([&](const NeuronId& u) {
    for (std::size_t d = 0; d < counters.domain_count(); ++d) {
      const auto n = counters.tokens(u, d);
      if (n > 0) {
        table.set(u, d, static_cast<double>(counters.activations(u, d)) /
                            static_cast<double>(n));
      }
    }
  });
  return table;
}

struct ModuleSilence {
  std::string module;
  std::uint64_t population = 0;
  std::uint64_t silent = 0;
  std::vector<std::uint64_t> silent_per_layer;
  double ratio = 0.0;
};

struct SilentReport {
  std::vector<NeuronId> neurons;
  std::vector<ModuleSilence> modules;
};

// Neurons that saw tokens (total N > 0) but never fired (total M = 0).
inline SilentReport detect_silent(const ActivationCounters& counters) {
  const auto& man = counters.manifest();
  SilentReport report;
  for (std::size_t mod = 0; mod < man.modules.size(); ++mod) {
    const auto& spec = man.modules[mod];
    ModuleSilence ms{spec.name, spec.population(), 0,
                     std::vector<std::uint64_t>(spec.layer_count, 0), 0.0};
    for (std::uint32_t l = 0; l < spec.layer_count; ++l) {
      for (std::uint32_t j = 0; j < spec.neurons_per_layer; ++j) {
        NeuronId u{static_cast<std::uint16_t>(mod), l, j};
        std::uint64_t m = 0, n = 0;
        for (std::size_t d = 0; d < counters.domain_count(); ++d) {
          m = detail::checked_add(m, counters.activations(u, d));
          n = detail::checked_add(n, counters.tokens(u, d));
        }
        if (n > 0 && m == 0) {
          report.neurons.push_back(u);
          ++ms.silent;
          ++ms.silent_per_layer[l];
        }
      }
    }
    ms.ratio = static_cast<double>(ms.silent) / static_cast<double>(ms.population);
    report.modules.push_back(std::move(ms));
  }
  return report;
}

inline Json silent_report_json(const SilentReport& report) {
  Json j;
  j["modules"] = Json::array();
  for (const auto& m : report.modules) {
    j["modules"].push_back({{"module", m.module},
                            {"population", m.population},
                            {"silent", m.silent},
                            {"ratio", m.ratio},
                            {"silent_per_layer", m.silent_per_layer}});
  }
  j["neurons"] = Json::array();
  for (const auto& u : report.neurons) {
    j["neurons"].push_back({{"module", u.module}, {"layer", u.layer}, {"index", u.index}});
  }
  return j;
}

inline std::string format_sig10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// CSV: module,layer,index,p_domain0..p_domain{k-1}; ABSENT cells are empty.
inline void write_probability_csv(std::ostream& out, const ProbabilityTable& table) {
  out << "module,layer,index";
  for (std::size_t d = 0; d < table.domain_count(); ++d) out << ",p_domain" << d;
  out << '\n';
  table.for_each_neuron([&](const NeuronId& u) {
    out << table.modules()[u.module].name << ',' << u.layer << ',' << u.index;
    for (std::size_t d = 0; d < table.domain_count(); ++d) {
      out << ',';
      if (auto p = table.at(u, d)) out << format_sig10(*p);
    }
    out << '\n';
  });
}

}  // namespace mmnt
