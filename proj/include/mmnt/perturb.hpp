#pragma once

// Causal effect of deactivating neuron sets: relative Frobenius deviation of
// the final hidden states against equal-cardinality random baselines, plus the
// top-1 / ANLS task metrics.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmnt/error.hpp"
#include "mmnt/refmodel.hpp"
#include "mmnt/rng.hpp"

namespace mmnt {

// ||normal - deactivated||_F / ||normal||_F
inline double deviation(const Matrix& normal, const Matrix& deactivated) {
  if (normal.rows() != deactivated.rows() || normal.cols() != deactivated.cols()) {
    throw ValidationError("deviation: hidden-state shapes differ");
  }
  const double base = normal.norm();
  if (base == 0.0) throw ValidationError("deviation: reference hidden states have zero norm");
  return (normal - deactivated).norm() / base;
}

// Uniform draw of a mask with the same per-module cardinality as `target`.
inline DeactivationMask random_mask_like(const DeactivationMask& target, std::uint64_t seed) {
  DeactivationMask out(target.modules());
  Rng rng(seed);
  for (std::size_t m = 0; m < target.modules().size(); ++m) {
    const auto& spec = target.modules()[m];
    const auto want = target.count_in_module(static_cast<std::uint16_t>(m));
    for (auto flat : rng.sample_without_replacement(spec.population(), want)) {
      out.set({static_cast<std::uint16_t>(m),
               static_cast<std::uint32_t>(flat / spec.neurons_per_layer),
               static_cast<std::uint32_t>(flat % spec.neurons_per_layer)});
    }
  }
  return out;
}

struct DomainDeviation {
  std::uint16_t domain = 0;
  std::vector<std::uint64_t> neurons_per_module;
  double target = 0.0;
  std::vector<double> trials;
  double random_mean = 0.0;
  double random_std = 0.0;  // sample standard deviation; 0 for a single trial
  std::uint64_t samples = 0;
  std::uint64_t positions = 0;
  bool operator==(const DomainDeviation&) const = default;
};

namespace detail {

// Frobenius deviation over the row-wise concatenation of every sample's h_L.
class DeviationSum {
 public:
  void add(const Matrix& normal, const Matrix& deactivated) {
    diff_ += (normal - deactivated).squaredNorm();
    base_ += normal.squaredNorm();
  }
  double value() const {
    if (base_ == 0.0) throw ValidationError("deviation: reference hidden states have zero norm");
    return std::sqrt(diff_) / std::sqrt(base_);
  }

 private:
  double diff_ = 0.0;
  double base_ = 0.0;
};

inline double masked_deviation(const ModelParams& params, std::span<const ModelInput> samples,
                               std::span<const Matrix> reference, const DeactivationMask& mask) {
  DeviationSum sum;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    sum.add(reference[i], forward(params, samples[i], mask).hidden.back());
  }
  return sum.value();
}

}  // namespace detail

// Target deviation of `mask` over the samples plus `trials` random masks of
// matching per-module cardinality, trial t seeded from (seed, stream, t).
inline DomainDeviation deviation_experiment(const ModelParams& params,
                                            std::span<const ModelInput> samples,
                                            const DeactivationMask& mask, std::size_t trials,
                                            std::uint64_t seed, std::uint64_t stream = 0) {
  if (samples.empty()) throw ValidationError("deviation experiment needs a non-empty corpus");
  if (trials < 1) throw ValidationError("deviation experiment needs at least one trial");
  std::vector<Matrix> reference;
  DomainDeviation out;
  for (const auto& s : samples) {
    reference.push_back(forward(params, s).hidden.back());
    out.positions += static_cast<std::uint64_t>(reference.back().rows());
  }
  out.samples = samples.size();
  for (std::size_t m = 0; m < mask.modules().size(); ++m) {
    out.neurons_per_module.push_back(mask.count_in_module(static_cast<std::uint16_t>(m)));
  }
  out.target = detail::masked_deviation(params, samples, reference, mask);
  for (std::size_t t = 0; t < trials; ++t) {
    auto random = random_mask_like(mask, derive_seed({seed, stream, t}));
    for (std::size_t m = 0; m < mask.modules().size(); ++m) {
      if (random.count_in_module(static_cast<std::uint16_t>(m)) != out.neurons_per_module[m]) {
        throw std::logic_error("random baseline mask cardinality mismatch");
      }
    }
    out.trials.push_back(detail::masked_deviation(params, samples, reference, random));
  }
  double sum = 0.0;
  for (double d : out.trials) sum += d;
  out.random_mean = sum / static_cast<double>(trials);
  if (trials > 1) {
    double ss = 0.0;
    for (double d : out.trials) ss += (d - out.random_mean) * (d - out.random_mean);
    out.random_std = std::sqrt(ss / static_cast<double>(trials - 1));
  }
  return out;
}

struct DeviationReport {
  std::uint64_t seed = 0;
  std::uint64_t trials = 0;
  std::string positions = "all";
  std::vector<DomainDeviation> domains;
};

inline Json deviation_report_json(const DeviationReport& r,
                                  const std::vector<DomainSpec>& domain_names) {
  Json j;
  j["format"] = "mmnt-deviation";
  j["version"] = 1;
  j["seed"] = r.seed;
  j["trials"] = r.trials;
  j["hidden_state"] = "final layer, pre final LayerNorm";
  j["positions"] = r.positions;
  j["norm"] = "frobenius";
  j["domains"] = Json::array();
  for (const auto& d : r.domains) {
    j["domains"].push_back({{"domain", d.domain},
                            {"name", d.domain < domain_names.size() ? domain_names[d.domain].name
                                                                    : std::string()},
                            {"neurons_per_module", d.neurons_per_module},
                            {"samples", d.samples},
                            {"positions", d.positions},
                            {"target_deviation", d.target},
                            {"random_trials", d.trials},
                            {"random_mean", d.random_mean},
                            {"random_std", d.random_std}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Task metrics

struct EvalResult {
  std::string metric;
  double value = 0.0;
  std::uint64_t samples = 0;
  std::string normalization;
};

inline EvalResult top1_accuracy(std::span<const std::uint32_t> predictions,
                                std::span<const std::uint32_t> gold) {
  if (predictions.size() != gold.size()) {
    throw ValidationError("top1_accuracy: prediction and gold lengths differ");
  }
  if (predictions.empty()) throw ValidationError("top1_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i] == gold[i];
  return {"top1_accuracy", static_cast<double>(hits) / static_cast<double>(gold.size()),
          gold.size(), "none"};
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Lower-case and trim surrounding whitespace.
inline std::string normalize_answer(std::string_view s) {
  auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  auto last = s.find_last_not_of(" \t\r\n");
  std::string out(s.substr(first, last - first + 1));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline constexpr double kAnlsThreshold = 0.5;

inline double normalized_similarity(std::string_view pred, std::string_view gold) {
  const auto longest = std::max(pred.size(), gold.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(pred, gold)) / static_cast<double>(longest);
}

inline EvalResult anls(std::span<const std::string> predictions,
                       std::span<const std::vector<std::string>> golds) {
  if (predictions.size() != golds.size()) {
    throw ValidationError("anls: prediction and gold lengths differ");
  }
  if (predictions.empty()) throw ValidationError("anls: no samples");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (golds[i].empty()) throw ValidationError("anls: empty gold set for sample " + std::to_string(i));
    const auto pred = normalize_answer(predictions[i]);
    double best = 0.0;
    for (const auto& g : golds[i]) best = std::max(best, normalized_similarity(pred, normalize_answer(g)));
    total += best < kAnlsThreshold ? 0.0 : best;
  }
  return {"anls", total / static_cast<double>(predictions.size()), predictions.size(),
          "lowercase+trim"};
}

}  // namespace mmnt
