#pragma once

// Domain activation probability entropy: normalize each neuron's per-domain
// activation probabilities, score by entropy, select the lowest-entropy tail
// per module and map selected neurons onto the domains they fire for.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmnt/entropy.hpp"
#include "mmnt/error.hpp"
#include "mmnt/stats.hpp"
#include "mmnt/text_io.hpp"

namespace mmnt {

enum class NormalizeStatus { Ok, Silent, Incomplete };

struct Normalized {
  NormalizeStatus status = NormalizeStatus::Ok;
  std::vector<double> values;  // empty unless status == Ok
};

// L1 normalization of a raw probability vector. Vectors summing to zero are
// SILENT, vectors with an ABSENT cell are INCOMPLETE; neither is scored.
inline Normalized normalize(std::span<const std::optional<double>> raw) {
  double sum = 0.0;
  for (const auto& p : raw) {
    if (!p) return {NormalizeStatus::Incomplete, {}};
    if (*p < 0.0) throw std::domain_error("negative activation probability");
    sum += *p;
  }
  if (sum == 0.0) return {NormalizeStatus::Silent, {}};
  Normalized out;
  out.values.reserve(raw.size());
  for (const auto& p : raw) out.values.push_back(*p / sum);
  return out;
}

inline Normalized normalize(std::span<const double> raw) {
  std::vector<std::optional<double>> cells(raw.begin(), raw.end());
  return normalize(std::span<const std::optional<double>>(cells));
}

inline double dape_score(std::span<const double> normalized) {
  double sum = 0.0;
  for (double x : normalized) {
    if (x < 0.0) throw std::domain_error("negative cell in normalized distribution");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("dape_score input sums to " + std::to_string(sum) + ", not 1");
  }
  return entropy_nats(normalized);
}

struct ScoredNeuron {
  NeuronId id;
  std::vector<double> normalized;
  double dape = 0.0;
  bool operator==(const ScoredNeuron&) const = default;
};

struct DapeTable {
  std::vector<ModuleSpec> modules;
  std::size_t domain_count = 0;
  std::vector<ScoredNeuron> scored;  // ascending NeuronId
  std::vector<NeuronId> silent;
  std::vector<NeuronId> incomplete;

  const ScoredNeuron* find(const NeuronId& id) const {
    auto it = std::lower_bound(scored.begin(), scored.end(), id,
                               [](const ScoredNeuron& s, const NeuronId& v) { return s.id < v; });
    return it != scored.end() && it->id == id ? &*it : nullptr;
  }
};

inline DapeTable score_dape(const ProbabilityTable& probs) {
  DapeTable table{probs.modules(), probs.domain_count(), {}, {}, {}};
  probs.for_each_neuron([&](const NeuronId& u) {
    auto row = probs.row(u);
    auto n = normalize(std::span<const std::optional<double>>(row));
    switch (n.status) {
      case NormalizeStatus::Silent: table.silent.push_back(u); break;
      case NormalizeStatus::Incomplete: table.incomplete.push_back(u); break;
      case NormalizeStatus::Ok: {
        const double h = dape_score(n.values);
        table.scored.push_back({u, std::move(n.values), h});
        break;
      }
    }
  });
  return table;
}

enum class SelectionScope { PerModule, Global };

inline constexpr const char* kTieBreakRule = "dape_asc_then_neuron_id";

struct SelectedNeuron {
  NeuronId id;
  double dape = 0.0;
  bool operator==(const SelectedNeuron&) const = default;
};

struct NeuronSelection {
  double percentile = 1.0;
  SelectionScope scope = SelectionScope::PerModule;
  std::string tie_break = kTieBreakRule;
  std::vector<ModuleSpec> modules;
  std::vector<std::uint64_t> scored_per_module;
  std::vector<std::uint64_t> selected_per_module;
  std::vector<SelectedNeuron> neurons;  // ascending NeuronId

  bool contains(const NeuronId& id) const {
    return std::binary_search(neurons.begin(), neurons.end(), SelectedNeuron{id, 0.0},
                              [](const SelectedNeuron& a, const SelectedNeuron& b) {
                                return a.id < b.id;
                              });
  }
  bool operator==(const NeuronSelection&) const = default;
};

inline std::uint64_t bottom_count(double percentile, std::uint64_t population) {
  // p * n is exact for the percentages in use; one rounding in the division.
  return static_cast<std::uint64_t>(
      std::floor(percentile * static_cast<double>(population) / 100.0));
}

// Picks the floor(percentile% x scored) lowest-DAPE neurons of each module
// (or of the whole table for Global scope). Ties go to the smaller NeuronId.
inline NeuronSelection select_bottom(const DapeTable& dape, double percentile,
                                     SelectionScope scope = SelectionScope::PerModule) {
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw ValidationError("percentile must lie in (0, 100], got " + std::to_string(percentile));
  }
  NeuronSelection sel;
  sel.percentile = percentile;
  sel.scope = scope;
  sel.modules = dape.modules;
  sel.scored_per_module.assign(dape.modules.size(), 0);
  sel.selected_per_module.assign(dape.modules.size(), 0);

  auto by_score = [](const ScoredNeuron* a, const ScoredNeuron* b) {
    if (a->dape != b->dape) return a->dape < b->dape;
    return a->id < b->id;
  };
  std::vector<std::vector<const ScoredNeuron*>> groups(
      scope == SelectionScope::PerModule ? dape.modules.size() : 1);
  for (const auto& s : dape.scored) {
    ++sel.scored_per_module[s.id.module];
    groups[scope == SelectionScope::PerModule ? s.id.module : 0].push_back(&s);
  }
  for (auto& g : groups) {
    const auto take = bottom_count(percentile, g.size());
    std::partial_sort(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(take), g.end(),
                      by_score);
    for (std::uint64_t i = 0; i < take; ++i) {
      sel.neurons.push_back({g[i]->id, g[i]->dape});
      ++sel.selected_per_module[g[i]->id.module];
    }
  }
  std::sort(sel.neurons.begin(), sel.neurons.end(),
            [](const SelectedNeuron& a, const SelectedNeuron& b) { return a.id < b.id; });
  return sel;
}

struct DomainAssignment {
  double tau = 0.2;
  std::map<NeuronId, std::vector<std::uint16_t>> domains;
  // [module][domain] -> number of selected neurons assigned to that domain.
  std::vector<std::vector<std::uint64_t>> per_module_domain_counts;
  std::vector<std::uint64_t> per_domain_counts;
  std::uint64_t unassigned = 0;
  std::uint64_t multi_assigned = 0;

  bool operator==(const DomainAssignment&) const = default;
};

// Domain j is assigned to neuron u iff its raw p_{u,j} > tau.
inline DomainAssignment assign_domains(const NeuronSelection& selection,
                                       const ProbabilityTable& probs, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) {
    throw ValidationError("tau must lie in (0, 1), got " + std::to_string(tau));
  }
  const auto k = probs.domain_count();
  DomainAssignment out;
  out.tau = tau;
  out.per_module_domain_counts.assign(selection.modules.size(),
                                      std::vector<std::uint64_t>(k, 0));
  out.per_domain_counts.assign(k, 0);
  for (const auto& s : selection.neurons) {
    if (s.id.module >= probs.modules().size()) {
      throw ValidationError("selected neuron " + to_string(s.id) + " missing from probabilities");
    }
    std::vector<std::uint16_t> hits;
    for (std::size_t d = 0; d < k; ++d) {
      auto p = probs.at(s.id, d);
      if (p && *p > tau) {
        hits.push_back(static_cast<std::uint16_t>(d));
        ++out.per_module_domain_counts[s.id.module][d];
        ++out.per_domain_counts[d];
      }
    }
    if (hits.empty()) ++out.unassigned;
    if (hits.size() > 1) ++out.multi_assigned;
    out.domains.emplace(s.id, std::move(hits));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection file: JSON with a stable field order.

struct SelectionFile {
  NeuronSelection selection;
  DomainAssignment assignment;
  std::vector<DomainSpec> domains;
  std::uint64_t seed = 0;
  bool operator==(const SelectionFile&) const = default;
};

inline std::string save_selection(const SelectionFile& f) {
  const auto& sel = f.selection;
  Json j;
  j["format"] = "mmnt-selection";
  j["version"] = 1;
  j["seed"] = f.seed;
  j["percentile"] = sel.percentile;
  j["tau"] = f.assignment.tau;
  j["scope"] = sel.scope == SelectionScope::PerModule ? "per_module" : "global";
  j["tie_break"] = sel.tie_break;
  j["domains"] = Json::array();
  for (const auto& d : f.domains) j["domains"].push_back({{"id", d.id}, {"name", d.name}});
  j["modules"] = Json::array();
  for (std::size_t m = 0; m < sel.modules.size(); ++m) {
    Json counts = Json::array();
    for (auto c : f.assignment.per_module_domain_counts.at(m)) counts.push_back(c);
    j["modules"].push_back({{"name", sel.modules[m].name},
                            {"layer_count", sel.modules[m].layer_count},
                            {"neurons_per_layer", sel.modules[m].neurons_per_layer},
                            {"scored", sel.scored_per_module[m]},
                            {"selected", sel.selected_per_module[m]},
                            {"domain_counts", counts}});
  }
  j["unassigned"] = f.assignment.unassigned;
  j["multi_assigned"] = f.assignment.multi_assigned;
  j["neurons"] = Json::array();
  for (const auto& s : sel.neurons) {
    const auto& doms = f.assignment.domains.at(s.id);
    j["neurons"].push_back({{"module", s.id.module},
                            {"layer", s.id.layer},
                            {"index", s.id.index},
                            {"dape", s.dape},
                            {"domains", doms}});
  }
  return j.dump(1) + "\n";
}

inline SelectionFile load_selection(std::string_view text) {
  constexpr std::string_view ctx = "selection";
  auto j = parse_json(text, ctx);
  expect_keys(j, {"format", "version", "seed", "percentile", "tau", "scope", "tie_break", "domains",
                  "modules", "unassigned", "multi_assigned", "neurons"},
              ctx);
  if (field<std::string>(j, "format", ctx) != "mmnt-selection" ||
      field<int>(j, "version", ctx) != 1) {
    throw FormatError("not a version-1 selection file");
  }
  SelectionFile f;
  f.seed = field<std::uint64_t>(j, "seed", ctx);
  auto& sel = f.selection;
  sel.percentile = field<double>(j, "percentile", ctx);
  f.assignment.tau = field<double>(j, "tau", ctx);
  auto scope = field<std::string>(j, "scope", ctx);
  if (scope != "per_module" && scope != "global") throw FormatError("unknown scope " + scope);
  sel.scope = scope == "global" ? SelectionScope::Global : SelectionScope::PerModule;
  sel.tie_break = field<std::string>(j, "tie_break", ctx);
  for (const auto& d : array_field(j, "domains", ctx)) {
    expect_keys(d, {"id", "name"}, "selection domain");
    f.domains.push_back({field<std::uint16_t>(d, "id", ctx), field<std::string>(d, "name", ctx)});
  }
  const auto k = f.domains.size();
  f.assignment.per_domain_counts.assign(k, 0);
  for (const auto& m : array_field(j, "modules", ctx)) {
    expect_keys(m, {"name", "layer_count", "neurons_per_layer", "scored", "selected",
                    "domain_counts"},
                "selection module");
    sel.modules.push_back({field<std::string>(m, "name", ctx),
                           field<std::uint32_t>(m, "layer_count", ctx),
                           field<std::uint32_t>(m, "neurons_per_layer", ctx)});
    sel.scored_per_module.push_back(field<std::uint64_t>(m, "scored", ctx));
    sel.selected_per_module.push_back(field<std::uint64_t>(m, "selected", ctx));
    auto counts = field<std::vector<std::uint64_t>>(m, "domain_counts", ctx);
    if (counts.size() != k) throw FormatError("selection module domain_counts length mismatch");
    for (std::size_t d = 0; d < k; ++d) f.assignment.per_domain_counts[d] += counts[d];
    f.assignment.per_module_domain_counts.push_back(std::move(counts));
  }
  f.assignment.unassigned = field<std::uint64_t>(j, "unassigned", ctx);
  f.assignment.multi_assigned = field<std::uint64_t>(j, "multi_assigned", ctx);
  for (const auto& n : array_field(j, "neurons", ctx)) {
    expect_keys(n, {"module", "layer", "index", "dape", "domains"}, "selection neuron");
    NeuronId id{field<std::uint16_t>(n, "module", ctx), field<std::uint32_t>(n, "layer", ctx),
                field<std::uint32_t>(n, "index", ctx)};
    if (id.module >= sel.modules.size() || id.layer >= sel.modules[id.module].layer_count ||
        id.index >= sel.modules[id.module].neurons_per_layer) {
      throw FormatError("selection neuron " + to_string(id) + " outside its module");
    }
    auto doms = field<std::vector<std::uint16_t>>(n, "domains", ctx);
    for (auto d : doms) {
      if (d >= k) throw FormatError("selection neuron assigned to unknown domain");
    }
    sel.neurons.push_back({id, field<double>(n, "dape", ctx)});
    f.assignment.domains.emplace(id, std::move(doms));
  }
  if (!std::is_sorted(sel.neurons.begin(), sel.neurons.end(),
                      [](const SelectedNeuron& a, const SelectedNeuron& b) { return a.id < b.id; })) {
    throw FormatError("selection neurons must be listed in ascending id order");
  }
  return f;
}

}  // namespace mmnt
