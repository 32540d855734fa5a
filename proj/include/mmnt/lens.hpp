#pragma once

// Logit lens: decode any residual-stream state through the final LayerNorm
// and the unembedding, ignoring the residual updates of later layers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mmnt/entropy.hpp"
#include "mmnt/error.hpp"
#include "mmnt/refmodel.hpp"

namespace mmnt {

struct TokenProb {
  std::uint32_t token = 0;
  double probability = 0.0;
  bool operator==(const TokenProb&) const = default;
};

struct LensDistribution {
  std::uint32_t layer = 0;
  std::size_t position = 0;
  std::vector<double> probabilities;  // empty once truncated for a heatmap
  std::vector<TokenProb> top;         // descending probability, ties by token id
  double entropy = 0.0;               // nats, of the full distribution
};

// Subtract-max softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& p : out) p /= z;
  return out;
}

inline std::vector<TokenProb> top_k(std::span<const double> probs, std::size_t k) {
  std::vector<std::uint32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0u);
  k = std::min(k, probs.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return probs[a] != probs[b] ? probs[a] > probs[b] : a < b;
                    });
  std::vector<TokenProb> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], probs[order[i]]});
  return out;
}

// softmax(LayerNorm(h) W_U). Reads only the state, the final norm and W_U.
inline LensDistribution logit_lens(std::span<const double> h, const LayerNormParams& final_norm,
                                   const Matrix& unembedding, std::size_t k = 5) {
  if (static_cast<Eigen::Index>(h.size()) != unembedding.rows()) {
    throw ValidationError("hidden vector has dimension " + std::to_string(h.size()) +
                          ", unembedding expects " + std::to_string(unembedding.rows()));
  }
  for (double x : h) {
    if (!std::isfinite(x)) throw ValidationError("non-finite value in hidden state");
  }
  Matrix row(1, static_cast<Eigen::Index>(h.size()));
  std::copy(h.begin(), h.end(), row.data());
  const Matrix logits = layer_norm(row, final_norm) * unembedding;
  LensDistribution out;
  out.probabilities = softmax(std::span<const double>(logits.data(), logits.size()));
  out.top = top_k(out.probabilities, k);
  out.entropy = entropy_nats(out.probabilities);
  return out;
}

inline std::span<const double> row_span(const Matrix& m, std::size_t row) {
  return {m.data() + row * static_cast<std::size_t>(m.cols()), static_cast<std::size_t>(m.cols())};
}

// One top-k distribution per layer 0..L at a sequence position.
inline std::vector<LensDistribution> heatmap(const ModelParams& params, const ForwardTrace& tr,
                                             std::size_t position, std::size_t k) {
  if (position >= tr.positions()) {
    throw ValidationError("position " + std::to_string(position) + " out of range for a " +
                          std::to_string(tr.positions()) + "-token sequence");
  }
  if (k == 0) throw ValidationError("top-k must be >= 1");
  std::vector<LensDistribution> rows;
  for (std::uint32_t l = 0; l < tr.hidden.size(); ++l) {
    auto dist = logit_lens(row_span(tr.hidden[l], position), params.final_norm,
                           params.unembedding, k);
    dist.layer = l;
    dist.position = position;
    if (k < dist.probabilities.size()) dist.probabilities.clear();
    rows.push_back(std::move(dist));
  }
  return rows;
}

// Per-layer mean lens entropy, split by token type. A group with no positions
// has std::nullopt means.
struct EntropyCurve {
  std::vector<std::optional<double>> image_mean;
  std::vector<std::optional<double>> text_mean;
  std::uint64_t image_positions = 0;
  std::uint64_t text_positions = 0;
};

// Running sums so curves can be averaged over a whole corpus.
class EntropyCurveAccumulator {
 public:
  explicit EntropyCurveAccumulator(std::size_t layers)
      : image_sum_(layers, 0.0), text_sum_(layers, 0.0) {}

  void add(const ModelParams& params, const ForwardTrace& tr) {
    if (tr.hidden.size() != image_sum_.size()) {
      throw ValidationError("forward trace layer count does not match accumulator");
    }
    for (std::size_t pos = 0; pos < tr.positions(); ++pos) {
      const bool image = tr.token_types[pos] == kImageTokenType;
      (image ? image_count_ : text_count_) += 1;
      for (std::size_t l = 0; l < tr.hidden.size(); ++l) {
        const double h =
            logit_lens(row_span(tr.hidden[l], pos), params.final_norm, params.unembedding, 1)
                .entropy;
        (image ? image_sum_ : text_sum_)[l] += h;
      }
    }
  }

  EntropyCurve curve() const {
    EntropyCurve c;
    c.image_positions = image_count_;
    c.text_positions = text_count_;
    for (std::size_t l = 0; l < image_sum_.size(); ++l) {
      c.image_mean.push_back(image_count_ ? std::optional(image_sum_[l] / image_count_)
                                          : std::nullopt);
      c.text_mean.push_back(text_count_ ? std::optional(text_sum_[l] / text_count_)
                                        : std::nullopt);
    }
    return c;
  }

 private:
  std::vector<double> image_sum_, text_sum_;
  std::uint64_t image_count_ = 0, text_count_ = 0;
};

inline EntropyCurve entropy_curves(const ModelParams& params, const ForwardTrace& tr) {
  EntropyCurveAccumulator acc(tr.hidden.size());
  acc.add(params, tr);
  return acc.curve();
}

// ---------------------------------------------------------------------------
// Heatmap text: CSV "layer,rank,token_id,token_text,probability".

struct HeatmapRow {
  std::uint32_t layer = 0;
  std::uint32_t rank = 0;
  std::uint32_t token_id = 0;
  std::string token_text;
  std::string probability;  // 10 significant digits, kept verbatim
  bool operator==(const HeatmapRow&) const = default;
};

inline std::string token_label(const std::vector<std::string>& vocab, std::uint32_t id) {
  return id < vocab.size() ? vocab[id] : "<" + std::to_string(id) + ">";
}

inline std::vector<HeatmapRow> heatmap_rows(const std::vector<LensDistribution>& layers,
                                            const std::vector<std::string>& vocab) {
  std::vector<HeatmapRow> rows;
  for (const auto& dist : layers) {
    for (std::size_t r = 0; r < dist.top.size(); ++r) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.10g", dist.top[r].probability);
      rows.push_back({dist.layer, static_cast<std::uint32_t>(r), dist.top[r].token,
                      token_label(vocab, dist.top[r].token), buf});
    }
  }
  return rows;
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV line");
  return out;
}

}  // namespace detail

inline constexpr const char* kHeatmapHeader = "layer,rank,token_id,token_text,probability";

inline void write_heatmap(std::ostream& out, const std::vector<HeatmapRow>& rows) {
  out << kHeatmapHeader << '\n';
  for (const auto& r : rows) {
    out << r.layer << ',' << r.rank << ',' << r.token_id << ',' << detail::csv_quote(r.token_text)
        << ',' << r.probability << '\n';
  }
}

inline std::vector<HeatmapRow> read_heatmap(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kHeatmapHeader) {
    throw FormatError("heatmap: missing or wrong header line");
  }
  std::vector<HeatmapRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    auto cells = detail::csv_split(line);
    if (cells.size() != 5) {
      throw FormatError("heatmap line " + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      rows.push_back({static_cast<std::uint32_t>(std::stoul(cells[0])),
                      static_cast<std::uint32_t>(std::stoul(cells[1])),
                      static_cast<std::uint32_t>(std::stoul(cells[2])), cells[3], cells[4]});
      (void)std::stod(cells[4]);
    } catch (const std::logic_error&) {
      throw FormatError("heatmap line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

}  // namespace mmnt
