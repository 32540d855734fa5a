#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mmnt/lens.hpp"

using namespace mmnt;

namespace {

ModelConfig lens_config(std::uint64_t seed = 11) {
  ModelConfig c;
  c.vocab_size = 24;
  c.dim = 12;
  c.layers = 3;
  c.ffn_size = 32;
  c.patch_count = 3;
  c.patch_dim = 5;
  c.context_length = 20;
  c.seed = seed;
  return c;
}

ModelInput lens_input(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix patches(c.patch_count, c.patch_dim);
  for (Eigen::Index i = 0; i < patches.size(); ++i) patches.data()[i] = rng.uniform(-3, 3);
  ModelInput in{patches, {}};
  for (int i = 0; i < 6; ++i) in.tokens.push_back(static_cast<std::uint32_t>(rng.below(c.vocab_size)));
  return in;
}

// Independent lens entropy: explicit LayerNorm and log-sum-exp.
double brute_entropy(const ModelParams& p, const Matrix& h, Eigen::Index pos) {
  const auto d = h.cols();
  std::vector<double> x(d);
  double mean = 0;
  for (Eigen::Index k = 0; k < d; ++k) mean += h(pos, k);
  mean /= d;
  double var = 0;
  for (Eigen::Index k = 0; k < d; ++k) var += (h(pos, k) - mean) * (h(pos, k) - mean);
  var /= d;
  for (Eigen::Index k = 0; k < d; ++k) {
    x[k] = (h(pos, k) - mean) / std::sqrt(var + p.final_norm.eps) * p.final_norm.gain(0, k) +
           p.final_norm.bias(0, k);
  }
  std::vector<double> z(p.unembedding.cols(), 0.0);
  for (std::size_t v = 0; v < z.size(); ++v) {
    for (Eigen::Index k = 0; k < d; ++k) z[v] += x[k] * p.unembedding(k, v);
  }
  double mx = -1e300;
  for (double v : z) mx = std::max(mx, v);
  double s = 0;
  for (double v : z) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  double ez = 0;
  for (double v : z) ez += std::exp(v - lse) * v;
  return lse - ez;
}

}  // namespace

TEST(LogitLens, HandComputedTwoDimensional) {
  LayerNormParams ln{Matrix::Ones(1, 2), Matrix::Zero(1, 2), 0.0};
  const Matrix wu = Matrix::Identity(2, 2);
  const std::vector<double> h = {1.0, -1.0};
  const auto dist = logit_lens(h, ln, wu, 2);
  // 1 / (1 + e^-2), frozen from a 50-digit evaluation
  EXPECT_NEAR(dist.probabilities[0], 0.88079707797788244406, 1e-15);
  EXPECT_NEAR(dist.probabilities[1], 0.11920292202211755594, 1e-15);
  EXPECT_EQ(dist.top[0].token, 0u);
}

TEST(LogitLens, ZeroUnembeddingIsUniform) {
  LayerNormParams ln{Matrix::Ones(1, 3), Matrix::Zero(1, 3), 1e-5};
  const Matrix wu = Matrix::Zero(3, 7);
  const std::vector<double> h = {0.3, -2.0, 5.0};
  const auto dist = logit_lens(h, ln, wu, 3);
  for (double p : dist.probabilities) EXPECT_NEAR(p, 1.0 / 7.0, 1e-15);
  EXPECT_NEAR(dist.entropy, std::log(7.0), 1e-12);
  // ties broken by token id
  EXPECT_EQ(dist.top[0].token, 0u);
  EXPECT_EQ(dist.top[2].token, 2u);
}

TEST(LogitLens, RejectsBadInput) {
  LayerNormParams ln{Matrix::Ones(1, 2), Matrix::Zero(1, 2), 1e-5};
  const Matrix wu = Matrix::Identity(2, 2);
  EXPECT_THROW(logit_lens(std::vector<double>{1, 2, 3}, ln, wu), ValidationError);
  EXPECT_THROW(logit_lens(std::vector<double>{1, std::numeric_limits<double>::infinity()}, ln, wu),
               ValidationError);
  EXPECT_THROW(logit_lens(std::vector<double>{std::nan(""), 0}, ln, wu), ValidationError);
}

TEST(LogitLens, FinalLayerMatchesModelOutput) {
  const auto c = lens_config();
  const auto p = build_model(c);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto tr = forward(p, lens_input(c, s));
    for (std::size_t pos = 0; pos < tr.positions(); ++pos) {
      const auto lens = logit_lens(row_span(tr.hidden.back(), pos), p.final_norm, p.unembedding, 1);
      const auto out = softmax(row_span(tr.logits, pos));
      for (std::size_t v = 0; v < out.size(); ++v) EXPECT_NEAR(lens.probabilities[v], out[v], 1e-6);
      EXPECT_EQ(lens.top[0].token, greedy_token(tr, pos));
    }
  }
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> z(10), shifted(10);
    const double c = rng.uniform(-500, 500);
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = rng.uniform(-5, 5);
      shifted[k] = z[k] + c;
    }
    const auto a = softmax(z), b = softmax(shifted);
    for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
  const auto big = softmax(std::vector<double>{1000.0, 999.0});
  EXPECT_NEAR(big[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Heatmap, TopKRowsPerLayer) {
  const auto c = lens_config();
  const auto p = build_model(c);
  const auto tr = forward(p, lens_input(c, 3));
  const auto rows = heatmap(p, tr, 4, 5);
  ASSERT_EQ(rows.size(), c.layers + 1);
  for (const auto& r : rows) {
    EXPECT_EQ(r.top.size(), 5u);
    EXPECT_TRUE(r.probabilities.empty());
    for (std::size_t i = 1; i < r.top.size(); ++i) EXPECT_GE(r.top[i - 1].probability, r.top[i].probability);
    EXPECT_GE(r.entropy, 0.0);
    EXPECT_LE(r.entropy, std::log(static_cast<double>(c.vocab_size)));
  }
  const auto full = heatmap(p, tr, 4, c.vocab_size);
  double sum = 0;
  for (double q : full.back().probabilities) sum += q;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(heatmap(p, tr, 4, 1).back().top.size(), 1u);
  EXPECT_THROW(heatmap(p, tr, tr.positions(), 5), ValidationError);
  EXPECT_THROW(heatmap(p, tr, 0, 0), ValidationError);
}

TEST(HeatmapCsv, RoundTrip) {
  const auto c = lens_config();
  const auto p = build_model(c);
  const auto tr = forward(p, lens_input(c, 5));
  std::vector<std::string> vocab(c.vocab_size);
  for (std::uint32_t t = 0; t < c.vocab_size; ++t) vocab[t] = "tok" + std::to_string(t);
  vocab[3] = "a,\"b\"";
  auto rows = heatmap_rows(heatmap(p, tr, 2, c.vocab_size), vocab);
  std::ostringstream out;
  write_heatmap(out, rows);
  std::istringstream in(out.str());
  EXPECT_EQ(read_heatmap(in), rows);
  std::istringstream bad("layer,rank\n");
  EXPECT_THROW(read_heatmap(bad), FormatError);
  std::istringstream short_row(std::string(kHeatmapHeader) + "\n1,2,3\n");
  EXPECT_THROW(read_heatmap(short_row), FormatError);
}

TEST(EntropyCurves, ZeroUnembeddingIsFlatAtLnV) {
  const auto c = lens_config();
  auto p = build_model(c);
  p.unembedding.setZero();
  const auto curve = entropy_curves(p, forward(p, lens_input(c, 1)));
  for (std::size_t l = 0; l <= c.layers; ++l) {
    EXPECT_NEAR(*curve.image_mean[l], std::log(24.0), 1e-12);
    EXPECT_NEAR(*curve.text_mean[l], std::log(24.0), 1e-12);
  }
}

TEST(EntropyCurves, SinglePositionGroupsAreExact) {
  auto c = lens_config();
  c.patch_count = 1;
  const auto p = build_model(c);
  Matrix patch = Matrix::Constant(1, c.patch_dim, 0.7);
  const auto tr = forward(p, {patch, {9}});
  const auto curve = entropy_curves(p, tr);
  EXPECT_EQ(curve.image_positions, 1u);
  EXPECT_EQ(curve.text_positions, 1u);
  for (std::uint32_t l = 0; l <= c.layers; ++l) {
    EXPECT_EQ(*curve.image_mean[l], logit_lens(row_span(tr.hidden[l], 0), p.final_norm, p.unembedding).entropy);
    EXPECT_EQ(*curve.text_mean[l], logit_lens(row_span(tr.hidden[l], 1), p.final_norm, p.unembedding).entropy);
  }
  const auto text_only = entropy_curves(p, forward(p, {std::nullopt, {4, 5}}));
  EXPECT_FALSE(text_only.image_mean[0].has_value());
}

TEST(EntropyCurves, MatchBruteForce) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto c = lens_config(seed);
    const auto p = build_model(c);
    EntropyCurveAccumulator acc(c.layers + 1);
    std::vector<double> img(c.layers + 1, 0), txt(c.layers + 1, 0);
    std::size_t ni = 0, nt = 0;
    for (std::uint64_t s = 0; s < 6; ++s) {
      const auto tr = forward(p, lens_input(c, 100 * seed + s));
      acc.add(p, tr);
      for (std::size_t pos = 0; pos < tr.positions(); ++pos) {
        const bool image = pos < c.patch_count;
        (image ? ni : nt) += 1;
        for (std::uint32_t l = 0; l <= c.layers; ++l) {
          (image ? img : txt)[l] += brute_entropy(p, tr.hidden[l], static_cast<Eigen::Index>(pos));
        }
      }
    }
    const auto curve = acc.curve();
    for (std::uint32_t l = 0; l <= c.layers; ++l) {
      EXPECT_NEAR(*curve.image_mean[l], img[l] / ni, 1e-9);
      EXPECT_NEAR(*curve.text_mean[l], txt[l] / nt, 1e-9);
    }
  }
}
