#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmnt/dape.hpp"
#include "mmnt/text_io.hpp"

namespace fs = std::filesystem;

namespace {

fs::path root() { return fs::temp_directory_path() / "mmnt_cli_test"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Result {
  int code = -1;
  std::string err;
};

Result cli(const std::string& args) {
  const auto err = root() / "stderr.txt";
  const std::string cmd = std::string(MMNT_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::string p(const fs::path& x) { return x.string(); }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    const auto r = cli("synth --out " + p(synth()) + " --seed 3 --samples 30");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = cli("trace --model " + p(model()) + " --corpus " + p(corpus()) + " --out " +
                       p(root() / "traces"));
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static fs::path synth() { return root() / "synth"; }
  static fs::path model() { return synth() / "model.bin"; }
  static fs::path corpus() { return synth() / "corpus"; }
  static fs::path traces() { return root() / "traces"; }
};

}  // namespace

TEST_F(Cli, SynthWritesArtifacts) {
  for (const char* f : {"model.bin", "vocab.txt", "planted.json", "corpus/corpus.json"}) {
    EXPECT_TRUE(fs::exists(synth() / f)) << f;
  }
  const auto planted = mmnt::parse_json(slurp(synth() / "planted.json"), "planted");
  EXPECT_EQ(planted["seed"], 3);
  EXPECT_EQ(planted["neurons"].size(), 20u);
}

TEST_F(Cli, TraceIsByteIdenticalOnRerun) {
  const auto again = root() / "traces_again";
  ASSERT_EQ(cli("trace --model " + p(model()) + " --corpus " + p(corpus()) + " --out " + p(again)).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(traces())) {
    if (e.path().extension() != ".mmnt" && e.path().filename() != "manifest.json") continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(again / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 6u);
}

TEST_F(Cli, AggTracesGiveTheSameSelection) {
  const auto agg = root() / "traces_agg";
  ASSERT_EQ(cli("trace --model " + p(model()) + " --corpus " + p(corpus()) + " --out " + p(agg) +
                " --format agg").code, 0);
  ASSERT_EQ(cli("identify --traces " + p(traces()) + " --out " + p(root() / "raw_sel.json")).code, 0);
  ASSERT_EQ(cli("identify --traces " + p(agg) + " --out " + p(root() / "agg_sel.json")).code, 0);
  EXPECT_EQ(slurp(root() / "raw_sel.json"), slurp(root() / "agg_sel.json"));
  EXPECT_LT(fs::file_size(agg / "domain_0.mmnt"), fs::file_size(traces() / "domain_0.mmnt"));
}

TEST_F(Cli, WiderPercentileIsASuperset) {
  const auto one = root() / "sel1.json", five = root() / "sel5.json";
  ASSERT_EQ(cli("identify --traces " + p(traces()) + " --out " + p(one) + " --percentile 1").code, 0);
  ASSERT_EQ(cli("identify --traces " + p(traces()) + " --out " + p(five) + " --percentile 5 --csv " +
                p(root() / "probs.csv")).code, 0);
  const auto a = mmnt::load_selection(slurp(one));
  const auto b = mmnt::load_selection(slurp(five));
  EXPECT_EQ(a.selection.neurons.size(), 10u);
  EXPECT_EQ(b.selection.neurons.size(), 51u);
  for (const auto& n : a.selection.neurons) EXPECT_TRUE(b.selection.contains(n.id));
  EXPECT_TRUE(fs::exists(root() / "silent.json"));
  EXPECT_TRUE(fs::exists(root() / "probs.csv"));
}

TEST_F(Cli, IncompleteCoverageNamesMissingDomains) {
  const auto partial = root() / "partial";
  fs::create_directories(partial);
  for (const char* f : {"manifest.json", "domain_0.mmnt", "domain_1.mmnt", "domain_2.mmnt"}) {
    fs::copy_file(traces() / f, partial / f, fs::copy_options::overwrite_existing);
  }
  const auto out = root() / "partial_sel.json";
  const auto r = cli("identify --traces " + p(partial) + " --out " + p(out));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("3 (driving)"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("4 (remote-sensing)"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, CorruptTraceExitsThree) {
  const auto bad = root() / "corrupt";
  fs::create_directories(bad);
  for (const auto& e : fs::directory_iterator(traces())) {
    fs::copy_file(e.path(), bad / e.path().filename(), fs::copy_options::overwrite_existing);
  }
  auto bytes = slurp(bad / "domain_2.mmnt");
  bytes[0] = 'X';
  std::ofstream(bad / "domain_2.mmnt", std::ios::binary) << bytes;
  const auto r = cli("identify --traces " + p(bad) + " --out " + p(root() / "corrupt_sel.json"));
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("domain_2.mmnt"), std::string::npos) << r.err;

  bytes = slurp(traces() / "domain_2.mmnt");
  std::ofstream(bad / "domain_2.mmnt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_EQ(cli("identify --traces " + p(bad) + " --out " + p(root() / "corrupt_sel.json")).code, 3);
}

TEST_F(Cli, MissingInputsExitTwoWithoutOutputs) {
  const auto out = root() / "never";
  auto r = cli("trace --model " + p(root() / "nope.bin") + " --corpus " + p(corpus()) + " --out " + p(out));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nope.bin"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(cli("identify --traces " + p(root() / "missing") + " --out " + p(out / "s.json")).code, 2);
  EXPECT_EQ(cli("curves --model " + p(root() / "nope.bin") + " --corpus " + p(corpus()) + " --out " +
                p(out / "c.json")).code, 2);
  EXPECT_EQ(cli("deviate --model " + p(model()) + " --selection " + p(root() / "none.json") +
                " --corpus " + p(corpus()) + " --out " + p(out / "d.json")).code, 2);
  EXPECT_EQ(cli("lens --model " + p(root() / "nope.bin") + " --tokens 1,2 --out " + p(out / "h.csv")).code, 2);
  EXPECT_EQ(cli("dump --model " + p(root() / "nope.bin") + " --corpus " + p(corpus()) + " --out " +
                p(out / "h.bin")).code, 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("bogus").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("synth").code, 2);
  EXPECT_EQ(cli("identify --traces " + p(traces()) + " --out " + p(root() / "x.json") +
                " --percentile 0").code, 2);
  EXPECT_EQ(cli("trace --model " + p(model()) + " --corpus " + p(corpus()) + " --out " +
                p(root() / "tfmt") + " --format zip").code, 2);
}

TEST_F(Cli, CorruptModelExitsThree) {
  const auto bad = root() / "bad_model.bin";
  std::ofstream(bad, std::ios::binary) << "not a model";
  EXPECT_EQ(cli("lens --model " + p(bad) + " --tokens 5,6 --out " + p(root() / "h.csv")).code, 3);
}

TEST_F(Cli, LensCurvesDumpAndDeviate) {
  const auto h = root() / "heat.csv";
  ASSERT_EQ(cli("lens --model " + p(model()) + " --corpus " + p(corpus()) + " --domain 1 --k 3 --vocab " +
                p(synth() / "vocab.txt") + " --out " + p(h)).code, 0);
  const auto heat = slurp(h);
  EXPECT_EQ(heat.rfind("layer,rank,token_id,token_text,probability\n", 0), 0u);
  EXPECT_EQ(std::count(heat.begin(), heat.end(), '\n'), 1 + 5 * 3);

  EXPECT_EQ(cli("lens --model " + p(model()) + " --tokens 5,6 --position 9 --out " + p(h)).code, 2);

  const auto c = root() / "curves.json";
  ASSERT_EQ(cli("curves --model " + p(model()) + " --corpus " + p(corpus()) +
                " --samples-per-domain 5 --out " + p(c)).code, 0);
  const auto curves = mmnt::parse_json(slurp(c), "curves");
  EXPECT_EQ(curves["unit"], "nats");

  ASSERT_EQ(cli("dump --model " + p(model()) + " --corpus " + p(corpus()) + " --layer 2 --out " +
                p(root() / "h.bin")).code, 0);
  EXPECT_GT(fs::file_size(root() / "h.bin"), 0u);
  EXPECT_EQ(cli("dump --model " + p(model()) + " --corpus " + p(corpus()) + " --layer 9 --out " +
                p(root() / "h9.bin")).code, 2);

  const auto sel = root() / "dev_sel.json";
  ASSERT_EQ(cli("identify --traces " + p(traces()) + " --out " + p(sel) + " --percentile 2").code, 0);
  const auto dev = root() / "deviation.json";
  ASSERT_EQ(cli("deviate --model " + p(model()) + " --selection " + p(sel) + " --corpus " + p(corpus()) +
                " --trials 3 --samples-per-domain 5 --out " + p(dev)).code, 0);
  const auto first = slurp(dev);
  ASSERT_EQ(cli("deviate --model " + p(model()) + " --selection " + p(sel) + " --corpus " + p(corpus()) +
                " --trials 3 --samples-per-domain 5 --out " + p(dev)).code, 0);
  EXPECT_EQ(slurp(dev), first);
  const auto j = mmnt::parse_json(first, "deviation");
  ASSERT_EQ(j["domains"].size(), 5u);
  for (const auto& d : j["domains"]) {
    EXPECT_EQ(d["random_trials"].size(), 3u);
    EXPECT_GT(d["target_deviation"].get<double>(), d["random_mean"].get<double>());
  }
}

TEST_F(Cli, PipelineAndReport) {
  const auto out = root() / "pipe";
  const auto r = cli("pipeline --model " + p(model()) + " --corpus " + p(corpus()) + " --planted " +
                     p(synth() / "planted.json") + " --percentile 2 --trials 2 --samples-per-domain 5 --out " +
                     p(out));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"selection.json", "deviation.json", "curves.json", "report.json", "report.md",
                        "probabilities.csv", "silent.json", "traces/manifest.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto report = mmnt::parse_json(slurp(out / "report.json"), "report");
  EXPECT_EQ(report.dump().find("precision") != std::string::npos, true);
  const auto md = slurp(out / "report.md");
  const auto js = slurp(out / "report.json");
  ASSERT_EQ(cli("report --artifacts " + p(out)).code, 0);
  EXPECT_EQ(slurp(out / "report.md"), md);
  EXPECT_EQ(slurp(out / "report.json"), js);

  const auto empty = root() / "empty";
  fs::create_directories(empty);
  EXPECT_EQ(cli("report --artifacts " + p(empty)).code, 2);
  EXPECT_FALSE(fs::exists(empty / "report.md"));
}
