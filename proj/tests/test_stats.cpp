#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "mmnt/refmodel.hpp"
#include "mmnt/stats.hpp"
#include "mmnt/synth.hpp"
#include "test_support.hpp"

using namespace mmnt;
using mmnt::testing::agg_record;
using mmnt::testing::five_domain_manifest;
using mmnt::testing::random_record;

namespace {

CorpusManifest small_manifest() { return five_domain_manifest({{"lm", 2, 3}}); }

// "1010" -> bit j set iff character j is '1'.
RawBitmap bitmap_from_strings(const std::vector<std::string>& tokens) {
  auto raw = RawBitmap::zeros(static_cast<std::uint32_t>(tokens[0].size()), tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    for (std::size_t j = 0; j < tokens[t].size(); ++j) {
      if (tokens[t][j] == '1') raw.set(t, static_cast<std::uint32_t>(j));
    }
  }
  return raw;
}

// Scalar count oracle straight from the strings.
std::vector<std::uint64_t> count_ones(const std::vector<std::string>& tokens) {
  std::vector<std::uint64_t> m(tokens[0].size(), 0);
  for (const auto& t : tokens) {
    for (std::size_t j = 0; j < t.size(); ++j) m[j] += t[j] == '1';
  }
  return m;
}

}  // namespace

TEST(Counters, AccumulateAggRecord) {
  ActivationCounters c(small_manifest());
  c.accumulate(agg_record(0, 1, 4, {2, 0, 1}));
  for (std::uint32_t j = 0; j < 3; ++j) {
    EXPECT_EQ(c.tokens({0, 1, j}, 0), 4u);
    EXPECT_EQ(c.tokens({0, 0, j}, 0), 0u);
    EXPECT_EQ(c.tokens({0, 1, j}, 1), 0u);
  }
  EXPECT_EQ(c.activations({0, 1, 0}, 0), 2u);
  EXPECT_EQ(c.activations({0, 1, 1}, 0), 0u);
  EXPECT_EQ(c.activations({0, 1, 2}, 0), 1u);
}

TEST(Counters, AccumulateTwiceDoubles) {
  const auto rec = agg_record(2, 0, 4, {2, 0, 1});
  const auto once = accumulate(ActivationCounters(small_manifest()), rec);
  const auto twice = accumulate(once, rec);
  for (std::uint32_t j = 0; j < 3; ++j) {
    EXPECT_EQ(twice.activations({0, 0, j}, 2), 2 * once.activations({0, 0, j}, 2));
    EXPECT_EQ(twice.tokens({0, 0, j}, 2), 2 * once.tokens({0, 0, j}, 2));
  }
}

TEST(Counters, BitmapCountsMatchScalarOracle) {
  const std::vector<std::string> tokens = {"1010", "0110"};
  const auto want = count_ones(tokens);
  EXPECT_EQ(want, (std::vector<std::uint64_t>{1, 1, 2, 0}));
  ActivationCounters c(five_domain_manifest({{"lm", 1, 4}}));
  c.accumulate({0, 0, 0, kTextTokenType, bitmap_from_strings(tokens)});
  for (std::uint32_t j = 0; j < 4; ++j) {
    EXPECT_EQ(c.activations({0, 0, j}, 0), want[j]) << j;
    EXPECT_EQ(c.tokens({0, 0, j}, 0), 2u);
  }
}

TEST(Counters, RawAndAggEquivalent) {
  const auto m = five_domain_manifest({{"lm", 3, 13}, {"v", 1, 8}});
  Rng rng(3);
  ActivationCounters raw(m), agg(m);
  for (int i = 0; i < 200; ++i) {
    const auto r = random_record(rng, m);
    raw.accumulate(r);
    agg.accumulate(to_aggregate(r));
  }
  EXPECT_EQ(raw, agg);
}

TEST(Counters, MergeIdentityAndCommutativity) {
  const auto m = small_manifest();
  Rng rng(11);
  ActivationCounters a(m), b(m);
  for (int i = 0; i < 40; ++i) a.accumulate(random_record(rng, m));
  for (int i = 0; i < 40; ++i) b.accumulate(random_record(rng, m));
  EXPECT_EQ(merge(a, ActivationCounters(m)), a);
  EXPECT_EQ(merge(a, b), merge(b, a));
}

TEST(Counters, ShardedMergeEqualsSinglePass) {
  const auto m = five_domain_manifest({{"lm", 4, 16}});
  Rng rng(21);
  std::vector<TraceRecord> recs;
  for (int i = 0; i < 400; ++i) recs.push_back(random_record(rng, m));
  ActivationCounters single(m);
  for (const auto& r : recs) single.accumulate(r);
  std::vector<ActivationCounters> shards(4, ActivationCounters(m));
  for (std::size_t i = 0; i < recs.size(); ++i) shards[i % 4].accumulate(recs[i]);
  auto merged = shards[0];
  for (int s = 1; s < 4; ++s) merged.merge(shards[s]);
  EXPECT_EQ(merged, single);
}

TEST(Counters, OrderIndependentAndBounded) {
  const auto m = small_manifest();
  Rng rng(8);
  std::vector<TraceRecord> recs;
  for (int i = 0; i < 100; ++i) recs.push_back(random_record(rng, m));
  ActivationCounters fwd(m), rev(m);
  for (const auto& r : recs) fwd.accumulate(r);
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) rev.accumulate(*it);
  EXPECT_EQ(fwd, rev);
  activation_probabilities(fwd).for_each_neuron([&](const NeuronId& u) {
    for (std::size_t d = 0; d < 5; ++d) EXPECT_LE(fwd.activations(u, d), fwd.tokens(u, d));
  });
}

TEST(Counters, MismatchedManifestsRefuseToMerge) {
  ActivationCounters a(small_manifest());
  ActivationCounters b(five_domain_manifest({{"lm", 2, 4}}));
  EXPECT_THROW(a.merge(b), ValidationError);
}

TEST(Counters, OverflowDetected) {
  ActivationCounters c(small_manifest());
  c.set({0, 0, 0}, 0, 1, ~std::uint64_t{0});
  EXPECT_THROW(c.accumulate(agg_record(0, 0, 1, {1, 0, 0})), std::overflow_error);
}

TEST(Probabilities, QuotientAndAbsent) {
  ActivationCounters c(small_manifest());
  c.set({0, 0, 0}, 0, 3, 10);
  c.set({0, 0, 1}, 0, 0, 10);
  const auto p = activation_probabilities(c);
  EXPECT_DOUBLE_EQ(*p.at({0, 0, 0}, 0), 0.3);
  EXPECT_EQ(*p.at({0, 0, 1}, 0), 0.0);
  EXPECT_FALSE(p.at({0, 0, 2}, 0).has_value());
  EXPECT_FALSE(p.at({0, 0, 0}, 1).has_value());
}

TEST(Silent, AllActiveGivesEmptyReport) {
  ActivationCounters c(small_manifest());
  for (std::uint32_t l = 0; l < 2; ++l) {
    for (std::uint16_t d = 0; d < 5; ++d) c.accumulate(agg_record(d, l, 5, {1, 2, 5}));
  }
  const auto r = detect_silent(c);
  EXPECT_TRUE(r.neurons.empty());
  ASSERT_EQ(r.modules.size(), 1u);
  EXPECT_EQ(r.modules[0].ratio, 0.0);
}

TEST(Silent, NeverFiringNeuronListed) {
  ActivationCounters c(small_manifest());
  for (std::uint16_t d = 0; d < 5; ++d) {
    c.accumulate(agg_record(d, 0, 1000, {10, 0, 7}));
    c.accumulate(agg_record(d, 1, 1000, {1, 1, 1}));
  }
  const auto r = detect_silent(c);
  ASSERT_EQ(r.neurons.size(), 1u);
  EXPECT_EQ(r.neurons[0], (NeuronId{0, 0, 1}));
  EXPECT_EQ(r.modules[0].silent_per_layer, (std::vector<std::uint64_t>{1, 0}));
  EXPECT_DOUBLE_EQ(r.modules[0].ratio, 1.0 / 6.0);
  const auto j = silent_report_json(r);
  EXPECT_EQ(j["neurons"].size(), 1u);
  EXPECT_EQ(j["modules"][0]["silent"], 1);
}

TEST(Silent, GatedNeuronsOfReferenceModel) {
  ModelConfig cfg;
  cfg.vocab_size = 40;
  cfg.dim = 16;
  cfg.layers = 3;
  cfg.ffn_size = 32;
  cfg.seed = 4;
  auto params = build_model(cfg);
  const std::vector<NeuronId> gated = {{0, 0, 3}, {0, 1, 0}, {0, 1, 31}, {0, 2, 17}};
  for (const auto& u : gated) params.layers[u.layer].w1.col(u.index).setZero();

  SynthCorpusSpec spec;
  spec.vocab_size = 40;
  spec.shared_tokens = 12;
  spec.exclusive_per_domain = 4;
  spec.samples_per_domain = 10;
  spec.tokens_per_sample = 12;
  const auto corpus = generate_corpus(spec);
  ActivationCounters c(make_manifest(corpus, cfg, "gated"));
  for (std::uint16_t d = 0; d < corpus.spec.domains; ++d) {
    for (const auto& s : corpus.domains[d]) {
      for (const auto& r : emit_trace(forward(params, s), d)) c.accumulate(r);
    }
  }
  const auto report = detect_silent(c);
  // exhaustive check: the reported set is exactly the neurons that never fired
  std::vector<NeuronId> never;
  for (std::uint32_t l = 0; l < cfg.layers; ++l) {
    for (std::uint32_t j = 0; j < cfg.ffn_size; ++j) {
      std::uint64_t m = 0;
      for (std::uint16_t d = 0; d < 5; ++d) m += c.activations({0, l, j}, d);
      if (m == 0) never.push_back({0, l, j});
    }
  }
  EXPECT_EQ(report.neurons, never);
  EXPECT_EQ(report.neurons, gated);
}

TEST(ProbabilityCsv, LayoutAndAbsentCells) {
  ActivationCounters c(five_domain_manifest({{"lm", 1, 2}}));
  c.set({0, 0, 0}, 0, 1, 3);
  c.set({0, 0, 0}, 1, 0, 3);
  std::ostringstream out;
  write_probability_csv(out, activation_probabilities(c));
  EXPECT_EQ(out.str(),
            "module,layer,index,p_domain0,p_domain1,p_domain2,p_domain3,p_domain4\n"
            "lm,0,0,0.3333333333,0,,,\n"
            "lm,0,1,,,,,\n");
}
