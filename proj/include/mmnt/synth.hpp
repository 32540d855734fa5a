#pragma once

// Seeded multi-domain synthetic corpora and planted domain-exclusive neurons:
// the ground truth the trace -> counters -> DAPE pipeline must recover.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmnt/binary_io.hpp"
#include "mmnt/error.hpp"
#include "mmnt/refmodel.hpp"
#include "mmnt/rng.hpp"
#include "mmnt/stats.hpp"
#include "mmnt/text_io.hpp"
#include "mmnt/trace_store.hpp"

namespace mmnt {

inline std::vector<std::string> default_domain_names(std::size_t k) {
  static const std::vector<std::string> names = {"common", "medical", "document", "driving",
                                                 "remote-sensing"};
  std::vector<std::string> out;
  for (std::size_t d = 0; d < k; ++d) {
    out.push_back(d < names.size() ? names[d] : "domain" + std::to_string(d));
  }
  return out;
}

struct TokenRange {
  std::uint32_t begin = 0;
  std::uint32_t end = 0;  // exclusive
  bool contains(std::uint32_t t) const { return t >= begin && t < end; }
  std::uint32_t size() const { return end - begin; }
  bool operator==(const TokenRange&) const = default;
};

// Vocabulary layout: [reserved | shared | domain 0 exclusive | domain 1 ... ].
struct SynthCorpusSpec {
  std::uint16_t domains = 5;
  std::vector<std::string> domain_names;  // defaults when empty
  std::uint32_t vocab_size = 64;
  std::uint32_t shared_tokens = 20;
  std::uint32_t exclusive_per_domain = 8;
  std::uint32_t samples_per_domain = 100;
  std::uint32_t tokens_per_sample = 32;
  double exclusive_rate = 0.5;
  std::uint32_t patch_count = 8;
  std::uint32_t patch_dim = 16;
  double patch_scale = 10.0;  // magnitude of each domain's mean patch
  double patch_noise = 1.0;   // per-element uniform noise half-width
  std::uint64_t seed = 7;

  TokenRange shared_range() const { return {kReservedTokens, kReservedTokens + shared_tokens}; }
  TokenRange exclusive_range(std::uint16_t d) const {
    const auto b = kReservedTokens + shared_tokens + d * exclusive_per_domain;
    return {b, b + exclusive_per_domain};
  }

  std::vector<std::string> names() const {
    return domain_names.empty() ? default_domain_names(domains) : domain_names;
  }

  void validate() const {
    if (domains < 2) throw ValidationError("synthetic corpus needs at least 2 domains");
    if (!domain_names.empty() && domain_names.size() != domains) {
      throw ValidationError("domain_names must list one name per domain");
    }
    if (shared_tokens == 0 || exclusive_per_domain == 0) {
      throw ValidationError("token ranges must be non-empty");
    }
    const std::uint64_t needed =
        std::uint64_t{kReservedTokens} + shared_tokens + std::uint64_t{domains} * exclusive_per_domain;
    if (needed > vocab_size) {
      throw ValidationError("vocabulary ranges overlap: layout needs " + std::to_string(needed) +
                            " ids but vocab_size is " + std::to_string(vocab_size));
    }
    if (samples_per_domain == 0 || tokens_per_sample == 0) {
      throw ValidationError("corpus must contain tokens");
    }
    if (!(exclusive_rate > 0.0 && exclusive_rate <= 1.0)) {
      throw ValidationError("exclusive_rate must lie in (0, 1]");
    }
    if (patch_count == 0 || patch_dim == 0) throw ValidationError("patch shape must be non-empty");
  }

  bool operator==(const SynthCorpusSpec&) const = default;
};

struct Corpus {
  SynthCorpusSpec spec;
  std::vector<std::vector<ModelInput>> domains;  // [domain][sample]

  std::uint64_t token_total(std::uint16_t d) const {
    std::uint64_t n = 0;
    for (const auto& s : domains.at(d)) {
      n += s.tokens.size() + (s.patches ? static_cast<std::uint64_t>(s.patches->rows()) : 0);
    }
    return n;
  }

  bool operator==(const Corpus&) const = default;
};

inline Corpus generate_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  Corpus c{spec, {}};
  c.spec.domain_names = spec.names();
  const auto shared = spec.shared_range();
  for (std::uint16_t d = 0; d < spec.domains; ++d) {
    const auto excl = spec.exclusive_range(d);
    Rng mean_rng(derive_seed({spec.seed, 100, d}));
    std::vector<double> mean(spec.patch_dim);
    for (auto& m : mean) m = mean_rng.uniform(-1.0, 1.0);
    // Rescale so every domain's mean patch has the same norm.
    double norm = 0.0;
    for (double m : mean) norm += m * m;
    norm = std::sqrt(norm);
    for (auto& m : mean) m *= spec.patch_scale / norm;

    Rng rng(derive_seed({spec.seed, 200, d}));
    std::vector<ModelInput> samples;
    for (std::uint32_t s = 0; s < spec.samples_per_domain; ++s) {
      ModelInput in;
      Matrix patches(spec.patch_count, spec.patch_dim);
      for (Eigen::Index i = 0; i < patches.rows(); ++i) {
        for (Eigen::Index j = 0; j < patches.cols(); ++j) {
          patches(i, j) = mean[j] + rng.uniform(-spec.patch_noise, spec.patch_noise);
        }
      }
      in.patches = std::move(patches);
      bool has_exclusive = false;
      for (std::uint32_t t = 0; t < spec.tokens_per_sample; ++t) {
        if (rng.uniform01() < spec.exclusive_rate) {
          in.tokens.push_back(excl.begin + static_cast<std::uint32_t>(rng.below(excl.size())));
          has_exclusive = true;
        } else {
          in.tokens.push_back(shared.begin + static_cast<std::uint32_t>(rng.below(shared.size())));
        }
      }
      if (!has_exclusive) {
        in.tokens[rng.below(in.tokens.size())] =
            excl.begin + static_cast<std::uint32_t>(rng.below(excl.size()));
      }
      samples.push_back(std::move(in));
    }
    c.domains.push_back(std::move(samples));
  }
  return c;
}

inline CorpusManifest make_manifest(const Corpus& corpus, const ModelConfig& model,
                                    std::string model_id) {
  CorpusManifest m;
  m.model_id = std::move(model_id);
  m.modules = model_modules(model);
  const auto names = corpus.spec.names();
  for (std::uint16_t d = 0; d < corpus.spec.domains; ++d) m.domains.push_back({d, names[d]});
  m.validate();
  return m;
}

// Token strings for heatmaps: <pad> <bos> <eos> <unk>, s<i> shared, <domain>_<i>.
inline std::vector<std::string> synth_vocabulary(const SynthCorpusSpec& spec) {
  std::vector<std::string> vocab = {"<pad>", "<bos>", "<eos>", "<unk>"};
  vocab.resize(spec.vocab_size);
  const auto names = spec.names();
  for (std::uint32_t t = kReservedTokens; t < spec.vocab_size; ++t) {
    vocab[t] = "<" + std::to_string(t) + ">";
    if (spec.shared_range().contains(t)) vocab[t] = "s" + std::to_string(t - spec.shared_range().begin);
    for (std::uint16_t d = 0; d < spec.domains; ++d) {
      const auto r = spec.exclusive_range(d);
      if (r.contains(t)) vocab[t] = names[d] + "_" + std::to_string(t - r.begin);
    }
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Corpus directory: corpus.json (spec + token lists) and one patch payload file
// per domain (length-prefixed JSON header + f64 little-endian patches).

inline Json corpus_spec_json(const SynthCorpusSpec& s) {
  Json j;
  j["domains"] = s.domains;
  j["domain_names"] = s.names();
  j["vocab_size"] = s.vocab_size;
  j["shared_tokens"] = s.shared_tokens;
  j["exclusive_per_domain"] = s.exclusive_per_domain;
  j["samples_per_domain"] = s.samples_per_domain;
  j["tokens_per_sample"] = s.tokens_per_sample;
  j["exclusive_rate"] = s.exclusive_rate;
  j["patch_count"] = s.patch_count;
  j["patch_dim"] = s.patch_dim;
  j["patch_scale"] = s.patch_scale;
  j["patch_noise"] = s.patch_noise;
  j["seed"] = s.seed;
  return j;
}

inline SynthCorpusSpec corpus_spec_from_json(const Json& j) {
  constexpr std::string_view ctx = "corpus spec";
  expect_keys(j, {"domains", "domain_names", "vocab_size", "shared_tokens",
                  "exclusive_per_domain", "samples_per_domain", "tokens_per_sample",
                  "exclusive_rate", "patch_count", "patch_dim", "patch_scale", "patch_noise",
                  "seed"},
              ctx);
  SynthCorpusSpec s;
  s.domains = field<std::uint16_t>(j, "domains", ctx);
  s.domain_names = field<std::vector<std::string>>(j, "domain_names", ctx);
  s.vocab_size = field<std::uint32_t>(j, "vocab_size", ctx);
  s.shared_tokens = field<std::uint32_t>(j, "shared_tokens", ctx);
  s.exclusive_per_domain = field<std::uint32_t>(j, "exclusive_per_domain", ctx);
  s.samples_per_domain = field<std::uint32_t>(j, "samples_per_domain", ctx);
  s.tokens_per_sample = field<std::uint32_t>(j, "tokens_per_sample", ctx);
  s.exclusive_rate = field<double>(j, "exclusive_rate", ctx);
  s.patch_count = field<std::uint32_t>(j, "patch_count", ctx);
  s.patch_dim = field<std::uint32_t>(j, "patch_dim", ctx);
  s.patch_scale = field<double>(j, "patch_scale", ctx);
  s.patch_noise = field<double>(j, "patch_noise", ctx);
  s.seed = field<std::uint64_t>(j, "seed", ctx);
  try {
    s.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("corpus spec: ") + e.what());
  }
  return s;
}

inline std::string patch_file_name(std::uint16_t d) {
  return "patches_d" + std::to_string(d) + ".bin";
}

inline void save_corpus(const std::filesystem::path& dir, const Corpus& c) {
  std::filesystem::create_directories(dir);
  Json j;
  j["format"] = "mmnt-corpus";
  j["version"] = 1;
  j["spec"] = corpus_spec_json(c.spec);
  j["domains"] = Json::array();
  for (std::uint16_t d = 0; d < c.domains.size(); ++d) {
    Json samples = Json::array();
    for (const auto& s : c.domains[d]) samples.push_back(s.tokens);
    j["domains"].push_back({{"id", d}, {"patch_file", patch_file_name(d)}, {"samples", samples}});

    std::ostringstream out(std::ios::binary);
    ByteWriter w(out);
    Json header;
    header["format"] = "mmnt-patches";
    header["version"] = 1;
    header["domain"] = d;
    header["samples"] = c.domains[d].size();
    header["patch_count"] = c.spec.patch_count;
    header["patch_dim"] = c.spec.patch_dim;
    header["dtype"] = "f64le";
    write_text_header(w, header);
    for (const auto& s : c.domains[d]) {
      for (Eigen::Index i = 0; i < s.patches->size(); ++i) w.put_f64(s.patches->data()[i]);
    }
    write_file_atomic(dir / patch_file_name(d), out.str());
  }
  write_file_atomic(dir / "corpus.json", j.dump(1) + "\n");
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  constexpr std::string_view ctx = "corpus";
  auto j = parse_json(read_file(dir / "corpus.json"), ctx);
  expect_keys(j, {"format", "version", "spec", "domains"}, ctx);
  if (field<std::string>(j, "format", ctx) != "mmnt-corpus" || field<int>(j, "version", ctx) != 1) {
    throw FormatError("not a version-1 corpus");
  }
  Corpus c{corpus_spec_from_json(j.at("spec")), {}};
  const auto& doms = array_field(j, "domains", ctx);
  if (doms.size() != c.spec.domains) throw FormatError("corpus domain count mismatch");
  for (std::uint16_t d = 0; d < doms.size(); ++d) {
    const auto& e = doms[d];
    expect_keys(e, {"id", "patch_file", "samples"}, "corpus domain");
    if (field<std::uint16_t>(e, "id", ctx) != d) throw FormatError("corpus domains out of order");
    auto token_lists = field<std::vector<std::vector<std::uint32_t>>>(e, "samples", ctx);

    std::istringstream in(read_file(dir / field<std::string>(e, "patch_file", ctx)), std::ios::binary);
    ByteReader r(in);
    auto header = read_text_header(r, "patch header");
    expect_keys(header, {"format", "version", "domain", "samples", "patch_count", "patch_dim", "dtype"},
                "patch header");
    if (field<std::string>(header, "format", ctx) != "mmnt-patches" ||
        field<std::uint16_t>(header, "domain", ctx) != d ||
        field<std::size_t>(header, "samples", ctx) != token_lists.size() ||
        field<std::uint32_t>(header, "patch_count", ctx) != c.spec.patch_count ||
        field<std::uint32_t>(header, "patch_dim", ctx) != c.spec.patch_dim ||
        field<std::string>(header, "dtype", ctx) != "f64le") {
      throw FormatError("patch file for domain " + std::to_string(d) + " does not match corpus");
    }
    std::vector<ModelInput> samples;
    for (auto& toks : token_lists) {
      ModelInput in_sample;
      Matrix patches(c.spec.patch_count, c.spec.patch_dim);
      for (Eigen::Index i = 0; i < patches.size(); ++i) patches.data()[i] = r.get_f64("patch payload");
      in_sample.patches = std::move(patches);
      in_sample.tokens = std::move(toks);
      samples.push_back(std::move(in_sample));
    }
    if (!r.at_end()) throw FormatError("trailing bytes in patch file", r.offset());
    c.domains.push_back(std::move(samples));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Planted neurons

struct PlantedNeuron {
  NeuronId id;
  std::uint16_t domain = 0;
  bool operator==(const PlantedNeuron&) const = default;
};

struct PlantSpec {
  std::vector<PlantedNeuron> neurons;
  double w1_norm = 1.0;   // norm of each rewritten W1 column
  double w2_scale = 1.0;  // > 1 gives the "loud" variant (W2 rows scaled)
  bool operator==(const PlantSpec&) const = default;
};

class PlantError : public std::runtime_error {
 public:
  PlantError(const std::string& what, NeuronId neuron)
      : std::runtime_error(what), neuron_(neuron) {}
  NeuronId neuron() const noexcept { return neuron_; }

 private:
  NeuronId neuron_;
};

// floor(fraction x population) neurons of the language module, dealt
// round-robin over domains and over layers [first_layer, L). Indices within a
// layer are drawn without replacement from the seed.
inline PlantSpec choose_plants(const ModelConfig& config, std::uint16_t domains, double fraction,
                               std::uint64_t seed, std::uint32_t first_layer = 0) {
  config.validate();
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("plant fraction must lie in [0, 1]");
  if (first_layer >= config.layers) first_layer = 0;
  const auto population = std::uint64_t{config.layers} * config.ffn_size;
  const auto count = static_cast<std::uint64_t>(std::floor(fraction * 100.0 * population / 100.0));
  const std::uint32_t span = config.layers - first_layer;
  std::vector<std::uint64_t> per_layer(span, 0);
  for (std::uint64_t i = 0; i < count; ++i) ++per_layer[i % span];
  std::vector<std::vector<std::uint64_t>> picks;
  for (std::uint32_t l = 0; l < span; ++l) {
    if (per_layer[l] > config.ffn_size) throw ValidationError("plant fraction too large for layer");
    Rng rng(derive_seed({seed, 300, l}));
    picks.push_back(rng.sample_without_replacement(config.ffn_size, per_layer[l]));
  }
  PlantSpec spec;
  std::vector<std::size_t> used(span, 0);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto l = static_cast<std::uint32_t>(i % span);
    spec.neurons.push_back({NeuronId{0, first_layer + l, static_cast<std::uint32_t>(picks[l][used[l]++])},
                            static_cast<std::uint16_t>(i % domains)});
  }
  std::sort(spec.neurons.begin(), spec.neurons.end(),
            [](const PlantedNeuron& a, const PlantedNeuron& b) { return a.id < b.id; });
  return spec;
}

// k + 1 orthonormal, zero-mean directions of the residual stream: rows
// 0..k-1 carry domain identity, row k is a constant offset shared by every
// position. Zero mean keeps them intact under LayerNorm centering.
inline Matrix domain_basis(std::uint32_t dim, std::uint16_t domains, std::uint64_t seed) {
  if (dim < domains + 2u) {
    throw ValidationError("model dim " + std::to_string(dim) + " too small for " +
                          std::to_string(domains) + " domain directions (needs >= k + 2)");
  }
  Rng rng(derive_seed({seed, 400}));
  Matrix basis(domains + 1, dim);
  for (Eigen::Index r = 0; r < basis.rows(); ++r) {
    Eigen::RowVectorXd v(dim);
    for (Eigen::Index c = 0; c < v.size(); ++c) v[c] = rng.uniform(-1.0, 1.0);
    v.array() -= v.mean();
    for (Eigen::Index q = 0; q < r; ++q) v -= v.dot(basis.row(q)) * basis.row(q);
    basis.row(r) = v / v.norm();
  }
  return basis;
}

// Reserves the domain_basis subspace as a private channel. Every residual
// write (embeddings, positions, encoder, attention and FFN outputs) and every
// reader (Wq, Wk, Wv, W1, W_U) is projected off it, then exclusive tokens of
// domain t add radius * e_t and every position adds offset * e_k. Domain
// identity is then exactly linearly readable from the FFN input at any layer,
// while the rest of the model only feels the channel through LayerNorm scale.
inline ModelParams shape_domain_embeddings(ModelParams params, const SynthCorpusSpec& spec,
                                           double radius = 2.0, double offset = 1.0) {
  spec.validate();
  if (spec.vocab_size != params.config.vocab_size) {
    throw ValidationError("corpus vocabulary does not match the model");
  }
  if (!(radius > 0.0) || !(offset > 0.0)) throw ValidationError("embedding radius and offset must be positive");
  const auto d = params.config.dim;
  const Matrix basis = domain_basis(d, spec.domains, spec.seed);
  const Matrix keep = Matrix::Identity(d, d) - basis.transpose() * basis;
  params.token_embedding = params.token_embedding * keep;
  params.position_embedding = params.position_embedding * keep;
  params.position_embedding.rowwise() += offset * basis.row(spec.domains);
  params.encoder.projector = params.encoder.projector * keep;
  for (auto& layer : params.layers) {
    layer.wq = keep * layer.wq;
    layer.wk = keep * layer.wk;
    layer.wv = keep * layer.wv;
    layer.wo = layer.wo * keep;
    layer.w1 = keep * layer.w1;
    layer.w2 = layer.w2 * keep;
  }
  params.unembedding = keep * params.unembedding;
  for (std::uint16_t t = 0; t < spec.domains; ++t) {
    const auto r = spec.exclusive_range(t);
    for (auto tok = r.begin; tok < r.end; ++tok) params.token_embedding.row(tok) += radius * basis.row(t);
  }
  return params;
}

namespace detail {

// Position classes used by planting: image position, or the text token id.
inline constexpr std::int64_t kImageClass = -1;

struct LayerInputs {
  Matrix rows;                       // FFN inputs LayerNorm(h + attn), one row per position
  std::vector<std::int64_t> classes;  // kImageClass or token id
};

inline LayerInputs collect_ffn_inputs(const ModelParams& params, const Corpus& corpus,
                                      std::uint32_t layer) {
  std::vector<Matrix> blocks;
  LayerInputs out;
  Eigen::Index total = 0;
  for (const auto& domain : corpus.domains) {
    for (const auto& s : domain) {
      auto tr = forward(params, s);
      blocks.push_back(layer_norm(tr.hidden[layer] + tr.layers[layer].attn_residual,
                                  params.layers[layer].ffn_norm));
      total += blocks.back().rows();
      const auto image_rows = s.patches ? s.patches->rows() : 0;
      for (Eigen::Index i = 0; i < image_rows; ++i) out.classes.push_back(kImageClass);
      for (auto t : s.tokens) out.classes.push_back(t);
    }
  }
  out.rows.resize(total, params.config.dim);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.rows.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

// Homogeneous margin perceptron: a direction w with w.x > 0 on positives and
// w.x < 0 on negatives, margins measured in cosine. When the data is not
// separable at the margin, the best iterate is kept (fewest negatives firing,
// then most positives firing) and then pushed off every firing negative.
inline Eigen::RowVectorXd fit_separator(const Matrix& rows, const std::vector<bool>& positive,
                                        double margin = 0.05, int max_epochs = 2000) {
  const auto d = rows.cols();
  Eigen::RowVectorXd pos_mean = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd neg_mean = Eigen::RowVectorXd::Zero(d);
  std::size_t np = 0, nn = 0;
  Matrix unit = rows;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double n = rows.row(i).norm();
    if (n > 0.0) unit.row(i) /= n;
    if (positive[i]) {
      pos_mean += unit.row(i);
      ++np;
    } else {
      neg_mean += unit.row(i);
      ++nn;
    }
  }
  Eigen::RowVectorXd w = (np ? pos_mean / double(np) : pos_mean) - (nn ? neg_mean / double(nn) : neg_mean);
  if (w.norm() == 0.0) w.setOnes();
  w.normalize();

  auto score = [&](const Eigen::RowVectorXd& v) {
    const Eigen::VectorXd z = unit * v.transpose();
    std::size_t neg_fire = 0, pos_fire = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      if (z[i] > 0.0) (positive[i] ? pos_fire : neg_fire) += 1;
    }
    return std::pair<std::size_t, std::size_t>{neg_fire, pos_fire};
  };
  auto better = [](std::pair<std::size_t, std::size_t> a, std::pair<std::size_t, std::size_t> b) {
    return a.first != b.first ? a.first < b.first : a.second > b.second;
  };

  Eigen::RowVectorXd best = w;
  auto best_score = score(w);
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    bool clean = true;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      const double y = positive[i] ? 1.0 : -1.0;
      if (y * unit.row(i).dot(w) < margin) {
        w += 0.1 * y * unit.row(i);
        w.normalize();
        clean = false;
      }
    }
    if (clean) return w;
    if (auto sc = score(w); better(sc, best_score)) {
      best = w;
      best_score = sc;
    }
  }
  w = best;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    bool clean = true;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      if (!positive[i] && unit.row(i).dot(w) > -margin) {
        w -= 0.1 * unit.row(i);
        w.normalize();
        clean = false;
      }
    }
    if (clean) break;
  }
  return w;
}

}  // namespace detail

struct PlantCheck {
  PlantedNeuron neuron;
  double target_rate = 0.0;      // fires on the target domain's exclusive tokens
  double off_domain_rate = 0.0;  // fires on other domains' exclusive tokens
  double background_rate = 0.0;  // fires on shared-token and image positions
  bool passed() const { return target_rate >= 0.9 && off_domain_rate == 0.0; }
};

// Exhaustive forward over the corpus, measuring each planted neuron's firing.
inline std::vector<PlantCheck> verify_plants(const ModelParams& params, const PlantSpec& spec,
                                             const Corpus& corpus) {
  struct Tally {
    std::uint64_t target = 0, target_hits = 0, off = 0, off_hits = 0, bg = 0, bg_hits = 0;
  };
  std::vector<Tally> tally(spec.neurons.size());
  for (const auto& domain : corpus.domains) {
    for (const auto& s : domain) {
      auto tr = forward(params, s);
      const auto image_rows = s.patches ? static_cast<std::size_t>(s.patches->rows()) : 0;
      for (std::size_t n = 0; n < spec.neurons.size(); ++n) {
        const auto& pn = spec.neurons[n];
        const auto& act = tr.layers[pn.id.layer].activations;
        const auto target = corpus.spec.exclusive_range(pn.domain);
        for (std::size_t pos = 0; pos < tr.positions(); ++pos) {
          const bool fired = act(static_cast<Eigen::Index>(pos), pn.id.index) > 0.0;
          auto& t = tally[n];
          if (pos < image_rows) {
            ++t.bg;
            t.bg_hits += fired;
            continue;
          }
          const auto tok = s.tokens[pos - image_rows];
          if (target.contains(tok)) {
            ++t.target;
            t.target_hits += fired;
          } else if (tok >= corpus.spec.exclusive_range(0).begin &&
                     tok < corpus.spec.exclusive_range(corpus.spec.domains - 1).end) {
            ++t.off;
            t.off_hits += fired;
          } else {
            ++t.bg;
            t.bg_hits += fired;
          }
        }
      }
    }
  }
  auto rate = [](std::uint64_t hits, std::uint64_t n) { return n ? double(hits) / double(n) : 0.0; };
  std::vector<PlantCheck> out;
  for (std::size_t n = 0; n < spec.neurons.size(); ++n) {
    const auto& t = tally[n];
    out.push_back({spec.neurons[n], rate(t.target_hits, t.target), rate(t.off_hits, t.off),
                   rate(t.bg_hits, t.bg)});
  }
  return out;
}

// Rewrites the W1 column of every planted neuron (and scales its W2 row for
// the loud variant) so it fires on its domain's exclusive tokens only. Layers
// are processed bottom-up so each fit sees the edits below it. Fails with
// PlantError if the empirical check does not pass.
inline ModelParams plant_neurons(ModelParams params, const PlantSpec& spec, const Corpus& corpus) {
  const auto& cfg = params.config;
  std::map<std::uint32_t, std::vector<PlantedNeuron>> by_layer;
  std::vector<NeuronId> seen;
  for (const auto& pn : spec.neurons) {
    if (pn.id.module != 0 || pn.id.layer >= cfg.layers || pn.id.index >= cfg.ffn_size) {
      throw ValidationError("planted neuron " + to_string(pn.id) + " outside the model");
    }
    if (pn.domain >= corpus.spec.domains) {
      throw ValidationError("planted neuron " + to_string(pn.id) + " targets an unknown domain");
    }
    if (std::find(seen.begin(), seen.end(), pn.id) != seen.end()) {
      throw ValidationError("neuron " + to_string(pn.id) + " planted twice");
    }
    seen.push_back(pn.id);
    by_layer[pn.id.layer].push_back(pn);
  }
  if (spec.neurons.empty()) return params;
  if (!(spec.w1_norm > 0.0) || !(spec.w2_scale > 0.0)) {
    throw ValidationError("plant magnitudes must be positive");
  }

  for (const auto& [layer, plants] : by_layer) {
    const auto inputs = detail::collect_ffn_inputs(params, corpus, layer);
    for (const auto& pn : plants) {
      const auto target = corpus.spec.exclusive_range(pn.domain);
      std::vector<bool> positive(inputs.classes.size());
      for (std::size_t i = 0; i < positive.size(); ++i) {
        positive[i] = inputs.classes[i] != detail::kImageClass &&
                      target.contains(static_cast<std::uint32_t>(inputs.classes[i]));
      }
      const auto w = detail::fit_separator(inputs.rows, positive);
      params.layers[layer].w1.col(pn.id.index) = spec.w1_norm * w.transpose();
      params.layers[layer].w2.row(pn.id.index) *= spec.w2_scale;
    }
  }

  for (const auto& check : verify_plants(params, spec, corpus)) {
    if (!check.passed()) {
      throw PlantError("planted neuron " + to_string(check.neuron.id) + " failed verification: "
                           "target rate " + std::to_string(check.target_rate) +
                           ", off-domain rate " + std::to_string(check.off_domain_rate),
                       check.neuron.id);
    }
  }
  return params;
}

struct PlantedModel {
  ModelParams params;
  PlantSpec plants;
  std::vector<PlantCheck> checks;
};

// build_model -> domain-clustered embeddings -> planted neurons.
inline PlantedModel build_planted_model(const ModelConfig& config, const Corpus& corpus,
                                        double fraction, double w2_scale = 1.0,
                                        double embedding_radius = 2.0) {
  auto base = shape_domain_embeddings(build_model(config), corpus.spec, embedding_radius);
  auto plants = choose_plants(config, corpus.spec.domains, fraction, config.seed);
  plants.w2_scale = w2_scale;
  auto params = plant_neurons(std::move(base), plants, corpus);
  auto checks = verify_plants(params, plants, corpus);
  return {std::move(params), std::move(plants), std::move(checks)};
}

inline Json plant_spec_json(const PlantSpec& spec, const std::vector<PlantCheck>& checks) {
  Json j;
  j["w1_norm"] = spec.w1_norm;
  j["w2_scale"] = spec.w2_scale;
  j["neurons"] = Json::array();
  for (std::size_t i = 0; i < spec.neurons.size(); ++i) {
    const auto& pn = spec.neurons[i];
    Json e = {{"module", pn.id.module}, {"layer", pn.id.layer}, {"index", pn.id.index},
              {"domain", pn.domain}};
    if (i < checks.size()) {
      e["target_rate"] = checks[i].target_rate;
      e["off_domain_rate"] = checks[i].off_domain_rate;
      e["background_rate"] = checks[i].background_rate;
    }
    j["neurons"].push_back(std::move(e));
  }
  return j;
}

}  // namespace mmnt
