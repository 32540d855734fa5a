#pragma once

// On-disk formats: corpus manifests (JSON), activation trace streams
// ("MMNT" binary records) and hidden-state dumps (JSON header + f32 payload).

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "mmnt/binary_io.hpp"
#include "mmnt/error.hpp"
#include "mmnt/text_io.hpp"

namespace mmnt {

struct ModuleSpec {
  std::string name;
  std::uint32_t layer_count = 0;
  std::uint32_t neurons_per_layer = 0;

  std::uint64_t population() const noexcept {
    return std::uint64_t{layer_count} * neurons_per_layer;
  }
  bool operator==(const ModuleSpec&) const = default;
};

struct DomainSpec {
  std::uint16_t id = 0;
  std::string name;
  bool operator==(const DomainSpec&) const = default;
};

struct TokenTypeSpec {
  std::uint8_t id = 0;
  std::string name;
  bool operator==(const TokenTypeSpec&) const = default;
};

inline constexpr std::uint8_t kImageTokenType = 0;
inline constexpr std::uint8_t kTextTokenType = 1;

inline std::vector<TokenTypeSpec> default_token_types() {
  return {{kImageTokenType, "image"}, {kTextTokenType, "text"}};
}

struct CorpusManifest {
  std::uint32_t format_version = 1;
  std::string model_id;
  std::vector<ModuleSpec> modules;
  std::vector<DomainSpec> domains;
  std::vector<TokenTypeSpec> token_types = default_token_types();

  std::size_t domain_count() const noexcept { return domains.size(); }

  bool has_token_type(std::uint8_t id) const {
    return std::any_of(token_types.begin(), token_types.end(),
                       [id](const TokenTypeSpec& t) { return t.id == id; });
  }

  // Throws ValidationError on any broken invariant.
  void validate() const {
    if (format_version != 1) {
      throw ValidationError("unsupported manifest format_version " +
                            std::to_string(format_version));
    }
    std::set<std::uint16_t> ids;
    for (const auto& d : domains) {
      if (!ids.insert(d.id).second) {
        throw ValidationError("duplicate domain id " + std::to_string(d.id));
      }
    }
    if (domains.size() < 2) {
      throw ValidationError("manifest needs at least 2 domains, got " +
                            std::to_string(domains.size()));
    }
    for (std::size_t i = 0; i < domains.size(); ++i) {
      if (domains[i].id != i) {
        throw ValidationError("domain ids must be contiguous from 0 in listing order");
      }
    }
    if (modules.empty()) throw ValidationError("manifest lists no modules");
    std::set<std::string> names;
    for (const auto& m : modules) {
      if (!names.insert(m.name).second) {
        throw ValidationError("duplicate module name '" + m.name + "'");
      }
      if (m.layer_count < 1 || m.neurons_per_layer < 1) {
        throw ValidationError("module '" + m.name + "' has an empty neuron population");
      }
    }
    std::set<std::uint8_t> types;
    for (const auto& t : token_types) {
      if (!types.insert(t.id).second) {
        throw ValidationError("duplicate token type id " + std::to_string(t.id));
      }
    }
    if (modules.size() > 0xFFFF) throw ValidationError("too many modules");
  }

  bool operator==(const CorpusManifest&) const = default;
};

inline std::string save_manifest(const CorpusManifest& m) {
  m.validate();
  Json j;
  j["format_version"] = m.format_version;
  j["model_id"] = m.model_id;
  j["modules"] = Json::array();
  for (const auto& mod : m.modules) {
    j["modules"].push_back({{"name", mod.name},
                            {"layer_count", mod.layer_count},
                            {"neurons_per_layer", mod.neurons_per_layer}});
  }
  j["domains"] = Json::array();
  for (const auto& d : m.domains) j["domains"].push_back({{"id", d.id}, {"name", d.name}});
  j["token_types"] = Json::array();
  for (const auto& t : m.token_types) j["token_types"].push_back({{"id", t.id}, {"name", t.name}});
  return j.dump(2) + "\n";
}

inline CorpusManifest manifest_from_json(const Json& j) {
  constexpr std::string_view ctx = "manifest";
  expect_keys(j, {"format_version", "model_id", "modules", "domains", "token_types"}, ctx);
  CorpusManifest m;
  m.format_version = field<std::uint32_t>(j, "format_version", ctx);
  m.model_id = field<std::string>(j, "model_id", ctx);
  m.modules.clear();
  for (const auto& e : array_field(j, "modules", ctx)) {
    expect_keys(e, {"name", "layer_count", "neurons_per_layer"}, "manifest module");
    m.modules.push_back({field<std::string>(e, "name", "manifest module"),
                         field<std::uint32_t>(e, "layer_count", "manifest module"),
                         field<std::uint32_t>(e, "neurons_per_layer", "manifest module")});
  }
  m.domains.clear();
  for (const auto& e : array_field(j, "domains", ctx)) {
    expect_keys(e, {"id", "name"}, "manifest domain");
    m.domains.push_back({field<std::uint16_t>(e, "id", "manifest domain"),
                         field<std::string>(e, "name", "manifest domain")});
  }
  m.token_types.clear();
  for (const auto& e : array_field(j, "token_types", ctx)) {
    expect_keys(e, {"id", "name"}, "manifest token type");
    m.token_types.push_back({field<std::uint8_t>(e, "id", "manifest token type"),
                             field<std::string>(e, "name", "manifest token type")});
  }
  m.validate();
  return m;
}

inline CorpusManifest load_manifest(std::string_view text) {
  return manifest_from_json(parse_json(text, "manifest"));
}

// ---------------------------------------------------------------------------
// Trace records

enum class RecordKind : std::uint8_t { RawBitmap = 0, AggCounts = 1 };

// One bitmap of ceil(s/8) bytes per token; bit j of a token's row is set iff
// neuron j fired on that token. Padding bits are always zero.
struct RawBitmap {
  std::uint32_t neuron_count = 0;
  std::uint64_t token_count = 0;
  std::vector<std::uint8_t> bits;

  static std::size_t row_bytes(std::uint32_t neurons) { return (neurons + 7u) / 8u; }

  static RawBitmap zeros(std::uint32_t neurons, std::uint64_t tokens) {
    return {neurons, tokens, std::vector<std::uint8_t>(row_bytes(neurons) * tokens, 0)};
  }

  bool test(std::uint64_t token, std::uint32_t neuron) const {
    return (bits[token * row_bytes(neuron_count) + neuron / 8] >> (neuron % 8)) & 1u;
  }
  void set(std::uint64_t token, std::uint32_t neuron) {
    bits[token * row_bytes(neuron_count) + neuron / 8] |=
        static_cast<std::uint8_t>(1u << (neuron % 8));
  }

  bool operator==(const RawBitmap&) const = default;
};

struct AggCounts {
  std::uint64_t token_total = 0;
  std::vector<std::uint64_t> counts;  // one per neuron
  bool operator==(const AggCounts&) const = default;
};

struct TraceRecord {
  std::uint16_t domain_id = 0;
  std::uint16_t module_id = 0;
  std::uint32_t layer = 0;
  std::uint8_t token_type = 0;
  std::variant<RawBitmap, AggCounts> payload;

  RecordKind kind() const noexcept {
    return std::holds_alternative<RawBitmap>(payload) ? RecordKind::RawBitmap
                                                      : RecordKind::AggCounts;
  }

  std::uint32_t neuron_count() const {
    if (auto* raw = std::get_if<RawBitmap>(&payload)) return raw->neuron_count;
    return static_cast<std::uint32_t>(std::get<AggCounts>(payload).counts.size());
  }

  bool operator==(const TraceRecord&) const = default;
};

inline AggCounts aggregate(const RawBitmap& raw) {
  AggCounts agg{raw.token_count, std::vector<std::uint64_t>(raw.neuron_count, 0)};
  for (std::uint64_t t = 0; t < raw.token_count; ++t) {
    for (std::uint32_t j = 0; j < raw.neuron_count; ++j) agg.counts[j] += raw.test(t, j);
  }
  return agg;
}

inline TraceRecord to_aggregate(const TraceRecord& r) {
  TraceRecord out = r;
  if (auto* raw = std::get_if<RawBitmap>(&r.payload)) out.payload = aggregate(*raw);
  return out;
}

namespace detail {

inline constexpr char kTraceMagic[4] = {'M', 'M', 'N', 'T'};
inline constexpr std::uint8_t kTraceVersion = 0x01;
// kind u8, domain u16, module u16, layer u32, token_type u8, neurons u32, payload_len u64
inline constexpr std::uint64_t kRecordHeaderBytes = 1 + 2 + 2 + 4 + 1 + 4 + 8;

inline std::uint64_t payload_bytes(const TraceRecord& r) {
  if (auto* raw = std::get_if<RawBitmap>(&r.payload)) return 8 + raw->bits.size();
  return 8 + 8 * std::get<AggCounts>(r.payload).counts.size();
}

// Checks the payload's internal invariants. `offset` locates the record in a stream.
inline void check_payload(const TraceRecord& r, std::optional<std::uint64_t> offset) {
  if (auto* raw = std::get_if<RawBitmap>(&r.payload)) {
    const auto row = RawBitmap::row_bytes(raw->neuron_count);
    if (raw->neuron_count == 0) throw FormatError("bitmap record with zero neurons", offset);
    if (raw->bits.size() != row * raw->token_count) {
      throw FormatError("bitmap payload is " + std::to_string(raw->bits.size()) +
                            " bytes, expected " + std::to_string(row * raw->token_count),
                        offset);
    }
    const unsigned used = raw->neuron_count % 8;
    if (used != 0) {
      const auto pad_mask = static_cast<std::uint8_t>(0xFFu << used);
      for (std::uint64_t t = 0; t < raw->token_count; ++t) {
        if (raw->bits[t * row + row - 1] & pad_mask) {
          throw FormatError("nonzero bitmap padding bits in token " + std::to_string(t),
                            offset);
        }
      }
    }
  } else {
    const auto& agg = std::get<AggCounts>(r.payload);
    if (agg.counts.empty()) throw FormatError("count record with zero neurons", offset);
    for (std::size_t j = 0; j < agg.counts.size(); ++j) {
      if (agg.counts[j] > agg.token_total) {
        throw FormatError("neuron " + std::to_string(j) + " count " +
                              std::to_string(agg.counts[j]) + " exceeds token_total " +
                              std::to_string(agg.token_total),
                          offset);
      }
    }
  }
}

inline void check_against_manifest(const TraceRecord& r, const CorpusManifest& m,
                                   std::optional<std::uint64_t> offset) {
  if (r.domain_id >= m.domain_count()) {
    throw FormatError("domain id " + std::to_string(r.domain_id) + " out of manifest range",
                      offset);
  }
  if (r.module_id >= m.modules.size()) {
    throw FormatError("module id " + std::to_string(r.module_id) + " out of manifest range",
                      offset);
  }
  const auto& mod = m.modules[r.module_id];
  if (r.layer >= mod.layer_count) {
    throw FormatError("layer " + std::to_string(r.layer) + " out of range for module '" +
                          mod.name + "'",
                      offset);
  }
  if (!m.has_token_type(r.token_type)) {
    throw FormatError("token type " + std::to_string(r.token_type) + " not in manifest",
                      offset);
  }
  if (r.neuron_count() != mod.neurons_per_layer) {
    throw FormatError("record carries " + std::to_string(r.neuron_count()) +
                          " neurons, module '" + mod.name + "' has " +
                          std::to_string(mod.neurons_per_layer),
                      offset);
  }
}

}  // namespace detail

// Writes magic + version followed by every record. Returns the byte count.
inline std::uint64_t write_trace(std::ostream& sink, std::span<const TraceRecord> records,
                                 const CorpusManifest& manifest) {
  for (const auto& r : records) {
    detail::check_against_manifest(r, manifest, std::nullopt);
    detail::check_payload(r, std::nullopt);
  }
  ByteWriter w(sink);
  w.put_string(std::string(detail::kTraceMagic, 4));
  w.put(detail::kTraceVersion);
  for (const auto& r : records) {
    w.put(static_cast<std::uint8_t>(r.kind()));
    w.put(r.domain_id);
    w.put(r.module_id);
    w.put(r.layer);
    w.put(r.token_type);
    w.put(r.neuron_count());
    w.put(detail::payload_bytes(r));
    if (auto* raw = std::get_if<RawBitmap>(&r.payload)) {
      w.put(raw->token_count);
      w.put_bytes(raw->bits);
    } else {
      const auto& agg = std::get<AggCounts>(r.payload);
      w.put(agg.token_total);
      for (auto c : agg.counts) w.put(c);
    }
  }
  return w.written();
}

// Decodes a full trace stream. Every record's payload invariants are checked.
inline std::vector<TraceRecord> read_trace(std::istream& source) {
  ByteReader r(source);
  if (r.get_string(4, "magic") != std::string(detail::kTraceMagic, 4)) {
    throw FormatError("bad trace magic", 0);
  }
  if (auto v = r.get<std::uint8_t>("version"); v != detail::kTraceVersion) {
    throw FormatError("unsupported trace version " + std::to_string(v), 4);
  }
  std::vector<TraceRecord> out;
  while (!r.at_end()) {
    const auto start = r.offset();
    TraceRecord rec;
    auto kind = r.get<std::uint8_t>("record kind");
    rec.domain_id = r.get<std::uint16_t>("domain id");
    rec.module_id = r.get<std::uint16_t>("module id");
    rec.layer = r.get<std::uint32_t>("layer");
    rec.token_type = r.get<std::uint8_t>("token type");
    auto neurons = r.get<std::uint32_t>("neuron count");
    auto payload_len = r.get<std::uint64_t>("payload length");
    if (neurons == 0) throw FormatError("record with zero neurons", start);
    if (kind == static_cast<std::uint8_t>(RecordKind::RawBitmap)) {
      RawBitmap raw;
      raw.neuron_count = neurons;
      raw.token_count = r.get<std::uint64_t>("token count");
      const auto row = RawBitmap::row_bytes(neurons);
      if (payload_len < 8 || (payload_len - 8) / row < raw.token_count ||
          payload_len - 8 != row * raw.token_count) {
        throw FormatError("bitmap payload length " + std::to_string(payload_len) +
                              " inconsistent with " + std::to_string(raw.token_count) +
                              " tokens of " + std::to_string(neurons) + " neurons",
                          start);
      }
      raw.bits.resize(payload_len - 8);
      r.get_bytes(raw.bits, "bitmap payload");
      rec.payload = std::move(raw);
    } else if (kind == static_cast<std::uint8_t>(RecordKind::AggCounts)) {
      if (payload_len != 8 + 8ull * neurons) {
        throw FormatError("count payload length " + std::to_string(payload_len) +
                              " inconsistent with " + std::to_string(neurons) + " neurons",
                          start);
      }
      AggCounts agg;
      agg.token_total = r.get<std::uint64_t>("token total");
      agg.counts.resize(neurons);
      for (auto& c : agg.counts) c = r.get<std::uint64_t>("activation count");
      rec.payload = std::move(agg);
    } else {
      throw FormatError("unknown record kind " + std::to_string(kind), start);
    }
    detail::check_payload(rec, start);
    out.push_back(std::move(rec));
  }
  return out;
}

// Decodes and additionally checks every record's ids against `manifest`.
inline std::vector<TraceRecord> read_trace(std::istream& source, const CorpusManifest& manifest) {
  auto records = read_trace(source);
  for (const auto& rec : records) detail::check_against_manifest(rec, manifest, std::nullopt);
  return records;
}

inline std::string encode_trace(std::span<const TraceRecord> records,
                                const CorpusManifest& manifest) {
  std::ostringstream out(std::ios::binary);
  write_trace(out, records, manifest);
  return std::move(out).str();
}

inline std::vector<TraceRecord> decode_trace(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_trace(in);
}

// ---------------------------------------------------------------------------
// Hidden-state dumps

struct HiddenStateDump {
  std::uint32_t layer = 0;
  std::uint64_t token_start = 0;
  std::uint64_t token_len = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;  // token-major, token_len x dim

  float at(std::uint64_t token, std::uint32_t k) const { return values[token * dim + k]; }
  bool operator==(const HiddenStateDump&) const = default;
};

inline void write_hidden_dump(std::ostream& sink, const HiddenStateDump& dump) {
  if (dump.values.size() != dump.token_len * dump.dim) {
    throw ValidationError("hidden dump holds " + std::to_string(dump.values.size()) +
                          " values, expected token_len x dim");
  }
  ByteWriter w(sink);
  Json header;
  header["format"] = "mmnt-hidden";
  header["version"] = 1;
  header["layer"] = dump.layer;
  header["token_start"] = dump.token_start;
  header["token_len"] = dump.token_len;
  header["dim"] = dump.dim;
  header["dtype"] = "f32le";
  write_text_header(w, header);
  for (float v : dump.values) w.put_f32(v);
}

inline HiddenStateDump read_hidden_dump(std::istream& source) {
  ByteReader r(source);
  constexpr std::string_view ctx = "hidden-state header";
  auto header = read_text_header(r, ctx);
  expect_keys(header, {"format", "version", "layer", "token_start", "token_len", "dim", "dtype"},
              ctx);
  if (field<std::string>(header, "format", ctx) != "mmnt-hidden" ||
      field<int>(header, "version", ctx) != 1) {
    throw FormatError("not a version-1 hidden-state dump", 0);
  }
  if (field<std::string>(header, "dtype", ctx) != "f32le") {
    throw FormatError("unsupported hidden-state dtype");
  }
  HiddenStateDump dump;
  dump.layer = field<std::uint32_t>(header, "layer", ctx);
  dump.token_start = field<std::uint64_t>(header, "token_start", ctx);
  dump.token_len = field<std::uint64_t>(header, "token_len", ctx);
  dump.dim = field<std::uint32_t>(header, "dim", ctx);
  dump.values.resize(dump.token_len * dump.dim);
  for (auto& v : dump.values) v = r.get_f32("hidden-state payload");
  if (!r.at_end()) throw FormatError("trailing bytes after hidden-state payload", r.offset());
  return dump;
}

}  // namespace mmnt
