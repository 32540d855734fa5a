#pragma once

// Deterministic decoder-only reference transformer with a linear pseudo vision
// front end. Single causal head, learned positions, pre-norm blocks and a
// non-gated FFN act(h W1) W2 whose activations can be masked and traced.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mmnt/binary_io.hpp"
#include "mmnt/error.hpp"
#include "mmnt/rng.hpp"
#include "mmnt/stats.hpp"
#include "mmnt/text_io.hpp"
#include "mmnt/trace_store.hpp"

namespace mmnt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { Relu, Gelu };

inline constexpr std::uint32_t kPadToken = 0;
inline constexpr std::uint32_t kBosToken = 1;
inline constexpr std::uint32_t kEosToken = 2;
inline constexpr std::uint32_t kUnkToken = 3;
inline constexpr std::uint32_t kReservedTokens = 4;

inline constexpr const char* kLanguageModule = "language_model";

struct ModelConfig {
  std::uint32_t vocab_size = 64;
  std::uint32_t dim = 32;
  std::uint32_t layers = 4;
  std::uint32_t ffn_size = 256;
  Activation activation = Activation::Relu;
  std::uint32_t patch_count = 8;
  std::uint32_t patch_dim = 16;
  std::uint32_t context_length = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < kReservedTokens) {
      throw ValidationError("vocab_size must be >= 4 (pad, bos, eos, unk are reserved)");
    }
    if (dim == 0 || layers == 0 || ffn_size == 0 || patch_count == 0 || patch_dim == 0 ||
        context_length == 0) {
      throw ValidationError("model dimensions must all be >= 1");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline std::vector<ModuleSpec> model_modules(const ModelConfig& c) {
  return {{kLanguageModule, c.layers, c.ffn_size}};
}

struct LayerNormParams {
  Matrix gain;  // 1 x d
  Matrix bias;  // 1 x d
  double eps = 1e-5;
  bool operator==(const LayerNormParams&) const = default;
};

struct LayerParams {
  LayerNormParams attn_norm;
  Matrix wq, wk, wv, wo;  // d x d
  LayerNormParams ffn_norm;
  Matrix w1;  // d x s
  Matrix w2;  // s x d
  bool operator==(const LayerParams&) const = default;
};

// Stand-in for a vision encoder and projector: patch (q) -> feature (q) -> d.
struct PseudoEncoder {
  Matrix feature;    // q x q
  Matrix projector;  // q x d

  Matrix encode(const Matrix& patches) const { return (patches * feature) * projector; }
  bool operator==(const PseudoEncoder&) const = default;
};

struct ModelParams {
  ModelConfig config;
  Matrix token_embedding;     // V x d
  Matrix position_embedding;  // context x d
  PseudoEncoder encoder;
  std::vector<LayerParams> layers;
  LayerNormParams final_norm;
  Matrix unembedding;  // d x V

  bool operator==(const ModelParams&) const = default;
};

// Visits every tensor in serialization order.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
  f("token_embedding", p.token_embedding);
  f("position_embedding", p.position_embedding);
  f("encoder.feature", p.encoder.feature);
  f("encoder.projector", p.encoder.projector);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "attn_norm.gain", L.attn_norm.gain);
    f(pre + "attn_norm.bias", L.attn_norm.bias);
    f(pre + "wq", L.wq);
    f(pre + "wk", L.wk);
    f(pre + "wv", L.wv);
    f(pre + "wo", L.wo);
    f(pre + "ffn_norm.gain", L.ffn_norm.gain);
    f(pre + "ffn_norm.bias", L.ffn_norm.bias);
    f(pre + "w1", L.w1);
    f(pre + "w2", L.w2);
  }
  f("final_norm.gain", p.final_norm.gain);
  f("final_norm.bias", p.final_norm.bias);
  f("unembedding", p.unembedding);
}

inline std::uint64_t parameter_count(const ModelParams& p) {
  std::uint64_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

namespace detail {

inline Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

inline LayerNormParams unit_layer_norm(std::uint32_t d) {
  return {Matrix::Ones(1, d), Matrix::Zero(1, d), 1e-5};
}

}  // namespace detail

inline constexpr double kInitBound = 0.08;

// Weights ~ uniform(-0.08, 0.08) from the config seed; LayerNorms start at
// gain 1, bias 0.
inline ModelParams build_model(const ModelConfig& config) {
  config.validate();
  const auto V = config.vocab_size, d = config.dim, s = config.ffn_size;
  const auto q = config.patch_dim;
  Rng rng(derive_seed({config.seed, 1}));
  ModelParams p;
  p.config = config;
  p.token_embedding = detail::uniform_matrix(rng, V, d, kInitBound);
  p.position_embedding = detail::uniform_matrix(rng, config.context_length, d, kInitBound);
  for (std::uint32_t l = 0; l < config.layers; ++l) {
    LayerParams L;
    L.attn_norm = detail::unit_layer_norm(d);
    L.wq = detail::uniform_matrix(rng, d, d, kInitBound);
    L.wk = detail::uniform_matrix(rng, d, d, kInitBound);
    L.wv = detail::uniform_matrix(rng, d, d, kInitBound);
    L.wo = detail::uniform_matrix(rng, d, d, kInitBound);
    L.ffn_norm = detail::unit_layer_norm(d);
    L.w1 = detail::uniform_matrix(rng, d, s, kInitBound);
    L.w2 = detail::uniform_matrix(rng, s, d, kInitBound);
    p.layers.push_back(std::move(L));
  }
  p.final_norm = detail::unit_layer_norm(d);
  p.unembedding = detail::uniform_matrix(rng, d, V, kInitBound);
  Rng enc_rng(derive_seed({config.seed, 2}));
  p.encoder.feature = detail::uniform_matrix(enc_rng, q, q, kInitBound);
  p.encoder.projector = detail::uniform_matrix(enc_rng, q, d, kInitBound);
  return p;
}

// ---------------------------------------------------------------------------
// Deactivation masks

class DeactivationMask {
 public:
  DeactivationMask() = default;
  explicit DeactivationMask(std::vector<ModuleSpec> modules) : modules_(std::move(modules)) {
    for (const auto& m : modules_) bits_.emplace_back(m.population(), false);
  }

  static DeactivationMask from_neurons(std::vector<ModuleSpec> modules,
                                       std::span<const NeuronId> neurons) {
    DeactivationMask mask(std::move(modules));
    for (const auto& u : neurons) mask.set(u);
    return mask;
  }

  const std::vector<ModuleSpec>& modules() const noexcept { return modules_; }

  void set(const NeuronId& u) { bits_.at(u.module).at(offset(u)) = true; }
  bool test(const NeuronId& u) const { return bits_.at(u.module).at(offset(u)); }

  void set_layer(std::uint16_t module, std::uint32_t layer) {
    for (std::uint32_t j = 0; j < modules_.at(module).neurons_per_layer; ++j) {
      set({module, layer, j});
    }
  }

  std::uint64_t count_in_module(std::uint16_t module) const {
    return static_cast<std::uint64_t>(
        std::count(bits_.at(module).begin(), bits_.at(module).end(), true));
  }
  std::uint64_t count() const {
    std::uint64_t n = 0;
    for (std::size_t m = 0; m < bits_.size(); ++m) n += count_in_module(static_cast<std::uint16_t>(m));
    return n;
  }
  bool empty() const { return count() == 0; }

  std::vector<NeuronId> neurons() const {
    std::vector<NeuronId> out;
    for (std::size_t m = 0; m < modules_.size(); ++m) {
      const auto s = modules_[m].neurons_per_layer;
      for (std::size_t i = 0; i < bits_[m].size(); ++i) {
        if (bits_[m][i]) {
          out.push_back({static_cast<std::uint16_t>(m), static_cast<std::uint32_t>(i / s),
                         static_cast<std::uint32_t>(i % s)});
        }
      }
    }
    return out;
  }

  bool operator==(const DeactivationMask&) const = default;

 private:
  std::size_t offset(const NeuronId& u) const {
    const auto& m = modules_.at(u.module);
    if (u.layer >= m.layer_count || u.index >= m.neurons_per_layer) {
      throw ValidationError("mask neuron " + to_string(u) + " out of range");
    }
    return std::size_t{u.layer} * m.neurons_per_layer + u.index;
  }

  std::vector<ModuleSpec> modules_;
  std::vector<std::vector<bool>> bits_;
};

// ---------------------------------------------------------------------------
// Forward pass

struct ModelInput {
  std::optional<Matrix> patches;  // m x q
  std::vector<std::uint32_t> tokens;
  bool operator==(const ModelInput&) const = default;
};

struct LayerTrace {
  Matrix attn_residual;  // tokens x d
  Matrix ffn_residual;   // tokens x d
  Matrix activations;    // tokens x s, post-mask
};

struct ForwardTrace {
  std::vector<Matrix> hidden;  // L + 1 entries; hidden[0] is the embedded input
  std::vector<LayerTrace> layers;
  std::vector<std::uint8_t> token_types;
  Matrix logits;  // tokens x V

  std::size_t positions() const noexcept { return token_types.size(); }
};

// Row-wise LayerNorm with population variance.
inline Matrix layer_norm(const Matrix& x, const LayerNormParams& ln) {
  Matrix y(x.rows(), x.cols());
  const auto d = x.cols();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) mean += x(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + ln.eps);
    for (Eigen::Index c = 0; c < d; ++c) {
      y(r, c) = (x(r, c) - mean) * inv * ln.gain(0, c) + ln.bias(0, c);
    }
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double activate(Activation kind, double x) {
  return kind == Activation::Relu ? (x > 0.0 ? x : 0.0) : gelu(x);
}

namespace detail {

inline Matrix causal_attention(const Matrix& x, const LayerParams& L) {
  const Matrix q = x * L.wq;
  const Matrix k = x * L.wk;
  const Matrix v = x * L.wv;
  const auto T = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Matrix mixed = Matrix::Zero(T, x.cols());
  std::vector<double> w(static_cast<std::size_t>(T));
  for (Eigen::Index i = 0; i < T; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= i; ++j) {
      w[j] = q.row(i).dot(k.row(j)) * scale;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (Eigen::Index j = 0; j <= i; ++j) mixed.row(i) += (w[j] / z) * v.row(j);
  }
  return mixed * L.wo;
}

inline ForwardTrace forward_impl(const ModelParams& p, const ModelInput& input,
                                 const DeactivationMask* mask) {
  const auto& cfg = p.config;
  const std::size_t image_rows = input.patches ? static_cast<std::size_t>(input.patches->rows()) : 0;
  if (input.patches && (input.patches->rows() != cfg.patch_count ||
                        input.patches->cols() != cfg.patch_dim)) {
    throw ValidationError("pseudo-image patches must be " + std::to_string(cfg.patch_count) +
                          " x " + std::to_string(cfg.patch_dim));
  }
  for (auto t : input.tokens) {
    if (t >= cfg.vocab_size) {
      throw ValidationError("token id " + std::to_string(t) + " out of vocabulary range");
    }
  }
  const std::size_t T = image_rows + input.tokens.size();
  if (T == 0) throw ValidationError("empty model input");
  if (T > cfg.context_length) {
    throw ValidationError("sequence of " + std::to_string(T) + " exceeds context length " +
                          std::to_string(cfg.context_length));
  }
  if (mask && !(mask->modules() == model_modules(cfg))) {
    throw ValidationError("deactivation mask does not match the model configuration");
  }

  ForwardTrace tr;
  tr.token_types.assign(image_rows, kImageTokenType);
  tr.token_types.resize(T, kTextTokenType);

  Matrix h(static_cast<Eigen::Index>(T), cfg.dim);
  if (input.patches) h.topRows(static_cast<Eigen::Index>(image_rows)) = p.encoder.encode(*input.patches);
  for (std::size_t i = 0; i < input.tokens.size(); ++i) {
    h.row(static_cast<Eigen::Index>(image_rows + i)) = p.token_embedding.row(input.tokens[i]);
  }
  h += p.position_embedding.topRows(static_cast<Eigen::Index>(T));
  tr.hidden.push_back(h);

  for (std::uint32_t l = 0; l < cfg.layers; ++l) {
    const auto& L = p.layers[l];
    LayerTrace lt;
    lt.attn_residual = causal_attention(layer_norm(h, L.attn_norm), L);
    const Matrix mid = h + lt.attn_residual;
    Matrix act = layer_norm(mid, L.ffn_norm) * L.w1;
    for (Eigen::Index i = 0; i < act.size(); ++i) {
      act.data()[i] = activate(cfg.activation, act.data()[i]);
    }
    if (mask) {
      for (std::uint32_t j = 0; j < cfg.ffn_size; ++j) {
        if (mask->test({0, l, j})) act.col(j).setZero();
      }
    }
    lt.ffn_residual = act * L.w2;
    lt.activations = std::move(act);
    h = mid + lt.ffn_residual;
    tr.hidden.push_back(h);
    tr.layers.push_back(std::move(lt));
  }
  tr.logits = layer_norm(h, p.final_norm) * p.unembedding;
  return tr;
}

}  // namespace detail

inline ForwardTrace forward(const ModelParams& params, const ModelInput& input) {
  return detail::forward_impl(params, input, nullptr);
}

// Masked neurons have their activation zeroed before the W2 projection.
inline ForwardTrace forward(const ModelParams& params, const ModelInput& input,
                            const DeactivationMask& mask) {
  return detail::forward_impl(params, input, &mask);
}

inline std::uint32_t greedy_token(const ForwardTrace& tr, std::size_t position) {
  Eigen::Index best;
  tr.logits.row(static_cast<Eigen::Index>(position)).maxCoeff(&best);
  return static_cast<std::uint32_t>(best);
}

// One RAW_BITMAP record per (layer, token type present); bit j set iff the
// recorded activation is strictly positive.
inline std::vector<TraceRecord> emit_trace(const ForwardTrace& tr, std::uint16_t domain_id,
                                           std::uint16_t module_id = 0) {
  std::vector<TraceRecord> out;
  for (std::uint32_t l = 0; l < tr.layers.size(); ++l) {
    const auto& act = tr.layers[l].activations;
    const auto s = static_cast<std::uint32_t>(act.cols());
    for (std::uint8_t type : {kImageTokenType, kTextTokenType}) {
      std::vector<Eigen::Index> rows;
      for (std::size_t i = 0; i < tr.positions(); ++i) {
        if (tr.token_types[i] == type) rows.push_back(static_cast<Eigen::Index>(i));
      }
      if (rows.empty()) continue;
      auto bitmap = RawBitmap::zeros(s, rows.size());
      for (std::size_t t = 0; t < rows.size(); ++t) {
        for (std::uint32_t j = 0; j < s; ++j) {
          if (act(rows[t], j) > 0.0) bitmap.set(t, j);
        }
      }
      out.push_back({domain_id, module_id, l, type, std::move(bitmap)});
    }
  }
  return out;
}

inline HiddenStateDump hidden_states(const ForwardTrace& tr, std::uint32_t layer) {
  if (layer >= tr.hidden.size()) {
    throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(tr.hidden.size() - 1) + "]");
  }
  const auto& h = tr.hidden[layer];
  HiddenStateDump dump{layer, 0, static_cast<std::uint64_t>(h.rows()),
                       static_cast<std::uint32_t>(h.cols()), {}};
  dump.values.reserve(static_cast<std::size_t>(h.size()));
  for (Eigen::Index i = 0; i < h.size(); ++i) dump.values.push_back(static_cast<float>(h.data()[i]));
  return dump;
}

// ---------------------------------------------------------------------------
// Model file: length-prefixed JSON header (config + tensor table) followed by
// f64 little-endian tensors, row-major, in header order.

inline Json config_to_json(const ModelConfig& c) {
  Json j;
  j["vocab_size"] = c.vocab_size;
  j["dim"] = c.dim;
  j["layers"] = c.layers;
  j["ffn_size"] = c.ffn_size;
  j["activation"] = c.activation == Activation::Relu ? "relu" : "gelu";
  j["patch_count"] = c.patch_count;
  j["patch_dim"] = c.patch_dim;
  j["context_length"] = c.context_length;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const Json& j) {
  constexpr std::string_view ctx = "model config";
  expect_keys(j, {"vocab_size", "dim", "layers", "ffn_size", "activation", "patch_count",
                  "patch_dim", "context_length", "seed"},
              ctx);
  ModelConfig c;
  c.vocab_size = field<std::uint32_t>(j, "vocab_size", ctx);
  c.dim = field<std::uint32_t>(j, "dim", ctx);
  c.layers = field<std::uint32_t>(j, "layers", ctx);
  c.ffn_size = field<std::uint32_t>(j, "ffn_size", ctx);
  auto act = field<std::string>(j, "activation", ctx);
  if (act != "relu" && act != "gelu") throw FormatError("unknown activation '" + act + "'");
  c.activation = act == "relu" ? Activation::Relu : Activation::Gelu;
  c.patch_count = field<std::uint32_t>(j, "patch_count", ctx);
  c.patch_dim = field<std::uint32_t>(j, "patch_dim", ctx);
  c.context_length = field<std::uint32_t>(j, "context_length", ctx);
  c.seed = field<std::uint64_t>(j, "seed", ctx);
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

inline void save_model(std::ostream& sink, const ModelParams& p) {
  Json header;
  header["format"] = "mmnt-model";
  header["version"] = 1;
  header["config"] = config_to_json(p.config);
  header["dtype"] = "f64le";
  header["tensors"] = Json::array();
  for_each_tensor(p, [&](const std::string& name, const Matrix& m) {
    header["tensors"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  });
  ByteWriter w(sink);
  write_text_header(w, header);
  for_each_tensor(p, [&](const std::string&, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) w.put_f64(m.data()[i]);
  });
}

inline ModelParams load_model(std::istream& source) {
  ByteReader r(source);
  constexpr std::string_view ctx = "model header";
  auto header = read_text_header(r, ctx);
  expect_keys(header, {"format", "version", "config", "dtype", "tensors"}, ctx);
  if (field<std::string>(header, "format", ctx) != "mmnt-model" ||
      field<int>(header, "version", ctx) != 1) {
    throw FormatError("not a version-1 model file", 0);
  }
  if (field<std::string>(header, "dtype", ctx) != "f64le") {
    throw FormatError("unsupported model dtype");
  }
  // Shapes come from the config; the tensor table must agree exactly.
  ModelParams p = build_model(config_from_json(header.at("config")));
  const auto& table = array_field(header, "tensors", ctx);
  std::size_t i = 0;
  for_each_tensor(p, [&](const std::string& name, Matrix& m) {
    if (i >= table.size()) throw FormatError("model tensor table is missing '" + name + "'");
    const auto& t = table[i++];
    expect_keys(t, {"name", "shape"}, "model tensor");
    auto shape = field<std::vector<std::int64_t>>(t, "shape", "model tensor");
    if (field<std::string>(t, "name", "model tensor") != name || shape.size() != 2 ||
        shape[0] != m.rows() || shape[1] != m.cols()) {
      throw FormatError("model tensor table entry " + std::to_string(i - 1) +
                        " does not match expected '" + name + "'");
    }
  });
  if (i != table.size()) throw FormatError("model tensor table has extra entries");
  for_each_tensor(p, [&](const std::string&, Matrix& m) {
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.get_f64("model tensor payload");
  });
  if (!r.at_end()) throw FormatError("trailing bytes after model payload", r.offset());
  return p;
}

inline std::string encode_model(const ModelParams& p) {
  std::ostringstream out(std::ios::binary);
  save_model(out, p);
  return std::move(out).str();
}

inline ModelParams decode_model(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return load_model(in);
}

}  // namespace mmnt
