#include <gtest/gtest.h>

#include <algorithm>

#include "mmnt/perturb.hpp"

using namespace mmnt;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.dim = 8;
  c.layers = 3;
  c.ffn_size = 16;
  c.patch_count = 2;
  c.patch_dim = 3;
  c.context_length = 16;
  c.seed = 6;
  return c;
}

std::vector<ModelInput> tiny_samples(const ModelConfig& c, int n) {
  Rng rng(12);
  std::vector<ModelInput> out;
  for (int i = 0; i < n; ++i) {
    Matrix patches(c.patch_count, c.patch_dim);
    for (Eigen::Index k = 0; k < patches.size(); ++k) patches.data()[k] = rng.uniform(-1, 1);
    ModelInput in{patches, {}};
    for (int t = 0; t < 5; ++t) in.tokens.push_back(static_cast<std::uint32_t>(rng.below(c.vocab_size)));
    out.push_back(in);
  }
  return out;
}

}  // namespace

TEST(Deviation, ReferenceCases) {
  const Matrix h = row({3, 4});
  EXPECT_EQ(deviation(h, h), 0.0);
  EXPECT_EQ(deviation(h, Matrix::Zero(1, 2)), 1.0);
  EXPECT_DOUBLE_EQ(deviation(h, row({3, 0})), 0.8);
  EXPECT_THROW(deviation(Matrix::Zero(1, 2), h), ValidationError);
  EXPECT_THROW(deviation(h, Matrix::Zero(2, 2)), ValidationError);
}

TEST(Deviation, ScaleAware) {
  Rng rng(1);
  Matrix a(4, 5), b(4, 5);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.uniform(-1, 1);
    b.data()[i] = rng.uniform(-1, 1);
  }
  for (double c : {-3.0, 0.5, 1e4}) {
    EXPECT_NEAR(deviation(c * a, c * b), deviation(a, b), 1e-12);
  }
}

TEST(RandomMask, MatchesCardinalityPerModule) {
  const std::vector<ModuleSpec> mods = {{"a", 3, 10}, {"b", 2, 7}};
  const std::vector<NeuronId> ids = {{0, 0, 1}, {0, 2, 9}, {0, 1, 4}, {1, 1, 6}};
  const auto target = DeactivationMask::from_neurons(mods, ids);
  std::set<std::vector<NeuronId>> seen;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto m = random_mask_like(target, s);
    EXPECT_EQ(m.count_in_module(0), 3u);
    EXPECT_EQ(m.count_in_module(1), 1u);
    seen.insert(m.neurons());
  }
  EXPECT_GT(seen.size(), 40u);
  EXPECT_EQ(random_mask_like(target, 7), random_mask_like(target, 7));
}

TEST(Experiment, EmptyMaskGivesZero) {
  const auto c = tiny_config();
  const auto p = build_model(c);
  const auto samples = tiny_samples(c, 4);
  const auto r = deviation_experiment(p, samples, DeactivationMask(model_modules(c)), 5, 1);
  EXPECT_EQ(r.target, 0.0);
  EXPECT_EQ(r.trials, std::vector<double>(5, 0.0));
  EXPECT_EQ(r.random_mean, 0.0);
  EXPECT_EQ(r.samples, 4u);
  EXPECT_EQ(r.positions, 4u * 7u);
}

TEST(Experiment, ReproducibleAndSeeded) {
  const auto c = tiny_config();
  const auto p = build_model(c);
  const auto samples = tiny_samples(c, 3);
  const std::vector<NeuronId> ids = {{0, 1, 2}, {0, 1, 3}, {0, 2, 0}};
  const auto mask = DeactivationMask::from_neurons(model_modules(c), ids);
  const auto a = deviation_experiment(p, samples, mask, 1, 42);
  const auto b = deviation_experiment(p, samples, mask, 1, 42);
  EXPECT_EQ(a, b);
  const std::vector<DomainSpec> names = {{0, "x"}, {1, "y"}};
  DeviationReport ra{42, 1, "all", {a}}, rb{42, 1, "all", {b}};
  EXPECT_EQ(deviation_report_json(ra, names).dump(), deviation_report_json(rb, names).dump());
  EXPECT_EQ(deviation_report_json(ra, names)["trials"], 1);
  const auto other = deviation_experiment(p, samples, mask, 5, 43);
  EXPECT_EQ(other.trials.size(), 5u);
  EXPECT_EQ(other.target, a.target);
  EXPECT_NE(other.trials[0], a.trials[0]);
  EXPECT_GT(a.target, 0.0);
}

TEST(Experiment, LayerZeroUntouchedByAnyMask) {
  const auto c = tiny_config();
  const auto p = build_model(c);
  Rng rng(3);
  for (const auto& s : tiny_samples(c, 5)) {
    DeactivationMask mask(model_modules(c));
    for (int i = 0; i < 10; ++i) {
      mask.set({0, static_cast<std::uint32_t>(rng.below(3)), static_cast<std::uint32_t>(rng.below(16))});
    }
    EXPECT_EQ(deviation(forward(p, s).hidden[0], forward(p, s, mask).hidden[0]), 0.0);
  }
}

TEST(Experiment, Preconditions) {
  const auto c = tiny_config();
  const auto p = build_model(c);
  const DeactivationMask mask(model_modules(c));
  EXPECT_THROW(deviation_experiment(p, {}, mask, 5, 0), ValidationError);
  const auto samples = tiny_samples(c, 1);
  EXPECT_THROW(deviation_experiment(p, samples, mask, 0, 0), ValidationError);
}

TEST(Top1, Accuracy) {
  const std::vector<std::uint32_t> gold = {1, 2, 3, 4};
  EXPECT_EQ(top1_accuracy(gold, gold).value, 1.0);
  EXPECT_EQ(top1_accuracy(std::vector<std::uint32_t>{0, 0, 0, 0}, gold).value, 0.0);
  EXPECT_EQ(top1_accuracy(std::vector<std::uint32_t>{1, 2, 3, 0}, gold).value, 0.75);
  EXPECT_THROW(top1_accuracy(std::vector<std::uint32_t>{1}, gold), ValidationError);
  EXPECT_THROW(top1_accuracy({}, {}), ValidationError);
}

TEST(Anls, ReferenceCases) {
  using Golds = std::vector<std::vector<std::string>>;
  EXPECT_EQ(levenshtein("abc", "abd"), 1u);
  EXPECT_EQ(levenshtein("kitten", "sitting"), 3u);
  EXPECT_EQ(levenshtein("", "abc"), 3u);
  const std::vector<std::string> same = {"Paris"};
  EXPECT_EQ(anls(same, Golds{{"paris "}}).value, 1.0);
  const std::vector<std::string> near = {"abc"};
  EXPECT_NEAR(anls(near, Golds{{"abd"}}).value, 2.0 / 3.0, 1e-15);
  const std::vector<std::string> far = {"xyz"};
  EXPECT_EQ(anls(far, Golds{{"abc"}}).value, 0.0);
  // best of several gold answers
  EXPECT_EQ(anls(far, Golds{{"abc", "XYZ"}}).value, 1.0);
  EXPECT_EQ(anls(std::vector<std::string>{""}, Golds{{""}}).value, 1.0);
  EXPECT_THROW(anls(far, Golds{{}}), ValidationError);
  EXPECT_THROW(anls(far, Golds{}), ValidationError);
}

TEST(Anls, OrderInvariant) {
  std::vector<std::string> pred = {"alpha", "bet", "gamma ray", "d"};
  std::vector<std::vector<std::string>> gold = {{"alpha"}, {"beta"}, {"gamma"}, {"delta"}};
  const double v = anls(pred, gold).value;
  std::reverse(pred.begin(), pred.end());
  std::reverse(gold.begin(), gold.end());
  EXPECT_DOUBLE_EQ(anls(pred, gold).value, v);
  std::vector<std::uint32_t> p = {1, 5, 2}, g = {1, 4, 2};
  const double t = top1_accuracy(p, g).value;
  std::swap(p[0], p[2]);
  std::swap(g[0], g[2]);
  EXPECT_EQ(top1_accuracy(p, g).value, t);
}
