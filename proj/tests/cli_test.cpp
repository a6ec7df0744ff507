#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "retr/cli.hpp"
#include "retr/eval.hpp"

namespace retr::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("retr_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    auto r = run_cli({"synth", "--out", (root_ / "data").string(), "--users", "150", "--items", "120",
                      "--categories", "4", "--min-length", "8", "--max-length", "16", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data() { return (root_ / "data" / "interactions.tsv").string(); }
  static std::string labels() { return (root_ / "data" / "pivotal.tsv").string(); }
  static fs::path dir(const std::string& name) { return root_ / name; }

  static Result train(const std::string& name, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--data", data(), "--out", dir(name).string(), "--dim", "8",
                                  "--heads", "2", "--max-len", "16", "--epochs", "2", "--min-count", "1"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  }

  static fs::path root_;
};

fs::path Cli::root_;

TEST_F(Cli, SynthIsDeterministic) {
  for (const char* name : {"a", "b"}) {
    auto r = run_cli({"synth", "--archetype", "drifted", "--users", "100", "--seed", "7", "--out",
                      dir(std::string("synth_") + name).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir("synth_a") / "interactions.tsv"), slurp(dir("synth_b") / "interactions.tsv"));
  EXPECT_EQ(slurp(dir("synth_a") / "pivotal.tsv"), slurp(dir("synth_b") / "pivotal.tsv"));
}

TEST_F(Cli, SynthLineCountMatchesGeneratedLengths) {
  data::SyntheticSpec spec;
  spec.users = 150;
  spec.items = 120;
  spec.categories = 4;
  spec.min_length = 8;
  spec.max_length = 16;
  spec.seed = 3;
  std::size_t total = 0, tokens = 0;
  for (const auto& u : data::synth_generate(spec)) {
    total += u.items.size();
    tokens += u.items.size() - 1;
  }
  EXPECT_EQ(count_lines(data()), total);
  EXPECT_EQ(count_lines(labels()), tokens);
}

TEST_F(Cli, InvalidNoiseRateIsAUsageError) {
  auto r = run_cli({"synth", "--out", dir("bad").string(), "--noise-rate", "1.5"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("noise rate"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownFlagAndMissingSubcommandAreUsageErrors) {
  EXPECT_EQ(run_cli({"synth", "--out", dir("x").string(), "--bogus", "1"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST_F(Cli, TrainWritesArtifactsAndRecordsTau) {
  auto r = train("train_tau", {"--tau", "0.8"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"manifest.txt", "checkpoint.bin", "epochs.csv", "eval.csv"}) {
    EXPECT_TRUE(fs::exists(dir("train_tau") / f)) << f;
  }
  const auto manifest = slurp(dir("train_tau") / "manifest.txt");
  EXPECT_NE(manifest.find("\ntau = 0.8\n"), std::string::npos) << manifest;
  EXPECT_NE(manifest.find("# build: " + std::string(build_id())), std::string::npos);
  EXPECT_EQ(count_lines(dir("train_tau") / "epochs.csv"), 3u);
}

TEST_F(Cli, RerunFromManifestIsByteIdentical) {
  ASSERT_EQ(train("run1").code, 0);
  auto r = run_cli({"train", "--config", (dir("run1") / "manifest.txt").string(), "--out", dir("run2").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir("run1") / "epochs.csv"), slurp(dir("run2") / "epochs.csv"));
  EXPECT_EQ(slurp(dir("run1") / "checkpoint.bin"), slurp(dir("run2") / "checkpoint.bin"));
}

TEST_F(Cli, ConfigFileValuesYieldToFlags) {
  const auto cfg = dir("cfg.txt");
  std::ofstream(cfg) << "# comment\ndim = 8\nheads = 2\nmax-len = 16\nepochs = 1\ntau = 2\nmin-count = 1\n";
  auto r = run_cli({"train", "--config", cfg.string(), "--data", data(), "--out", dir("cfg_run").string(),
                    "--tau", "0.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = slurp(dir("cfg_run") / "manifest.txt");
  EXPECT_NE(manifest.find("\ntau = 0.5\n"), std::string::npos) << manifest;
  EXPECT_NE(manifest.find("\ndim = 8\n"), std::string::npos) << manifest;
  EXPECT_NE(manifest.find("\nepochs = 1\n"), std::string::npos) << manifest;

  std::ofstream(dir("bad_cfg.txt")) << "dimension = 8\n";
  auto bad = run_cli({"train", "--config", dir("bad_cfg.txt").string(), "--data", data(), "--out",
                      dir("bad_cfg_run").string()});
  EXPECT_EQ(bad.code, 2);
}

TEST_F(Cli, EmptyAfterFilteringIsARuntimeError) {
  auto r = run_cli({"train", "--data", data(), "--out", dir("empty").string(), "--min-count", "1000"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no interactions left"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingDatasetOrCheckpointNamesThePath) {
  auto r = run_cli({"train", "--data", (root_ / "nope.tsv").string(), "--out", dir("nope").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nope.tsv"), std::string::npos);
  auto e = run_cli({"eval", "--data", data(), "--checkpoint", (root_ / "missing.bin").string()});
  EXPECT_EQ(e.code, 2);
  EXPECT_NE(e.err.find("missing.bin"), std::string::npos) << e.err;
}

TEST_F(Cli, EvalReportsRequestedCutoffs) {
  ASSERT_EQ(train("eval_src").code, 0);
  auto r = run_cli({"eval", "--data", data(), "--checkpoint", (dir("eval_src") / "checkpoint.bin").string(),
                    "--out", dir("eval_out").string(), "--k", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(dir("eval_out") / "eval.csv");
  for (const char* row : {"\nhr@10,", "\nndcg@10,", "\nmrr,"}) EXPECT_NE(csv.find(row), std::string::npos) << row;
  // Training reports the same test evaluation it saved.
  EXPECT_EQ(csv, slurp(dir("eval_src") / "eval.csv"));

  auto on_train = run_cli({"eval", "--data", data(), "--checkpoint",
                           (dir("eval_src") / "checkpoint.bin").string(), "--split", "train"});
  EXPECT_EQ(on_train.code, 0);
  std::cout << "train split vs test split:\n" << on_train.out << r.out;
}

TEST_F(Cli, MismatchedConfigListsFields) {
  ASSERT_EQ(train("mismatch_src").code, 0);
  auto r = run_cli({"eval", "--data", data(), "--checkpoint",
                    (dir("mismatch_src") / "checkpoint.bin").string(), "--heads", "4", "--blocks", "3"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("heads: 2 vs 4"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("blocks: 2 vs 3"), std::string::npos) << r.err;
}

TEST_F(Cli, AblatedCheckpointEqualsLearnedCheckpointForcedToOnes) {
  ASSERT_EQ(train("ablated", {"--routing", "all-ones"}).code, 0);
  auto archive = read_archive(dir("ablated") / "checkpoint.bin");
  for (auto& [k, v] : archive.metadata) {
    if (k == "model.routing") v = "learned";
  }
  write_archive(dir("relabeled.bin"), archive);
  auto a = run_cli({"eval", "--data", data(), "--checkpoint", (dir("ablated") / "checkpoint.bin").string()});
  auto learned = run_cli({"eval", "--data", data(), "--checkpoint", dir("relabeled.bin").string()});
  auto forced = run_cli({"eval", "--data", data(), "--checkpoint", dir("relabeled.bin").string(), "--routing",
                         "all-ones"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(forced.code, 0) << forced.err;
  EXPECT_EQ(a.out, forced.out);
  EXPECT_NE(a.out, learned.out);
}

// Rows of the inspect-routes table: pos, item, one column per block, pivotal.
std::vector<std::vector<std::string>> route_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  bool table = false;
  while (std::getline(in, line)) {
    if (line.rfind("pos\t", 0) == 0) {
      table = true;
      continue;
    }
    if (!table) continue;
    if (line.rfind("keep rate", 0) == 0) break;
    std::vector<std::string> cells;
    std::istringstream cs(line);
    for (std::string c; std::getline(cs, c, '\t');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

TEST_F(Cli, InspectAblatedRoutesAreAllOnes) {
  ASSERT_EQ(train("inspect_ablated", {"--routing", "all-ones"}).code, 0);
  auto r = run_cli({"inspect-routes", "--data", data(), "--checkpoint",
                    (dir("inspect_ablated") / "checkpoint.bin").string(), "--users", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = route_rows(r.out);
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) {
    ASSERT_EQ(row.size(), 4u);
    EXPECT_EQ(row[2], "1");
    EXPECT_EQ(row[3], "1");
  }
}

TEST_F(Cli, InspectUnknownUserFails) {
  ASSERT_EQ(train("inspect_unknown").code, 0);
  auto r = run_cli({"inspect-routes", "--data", data(), "--checkpoint",
                    (dir("inspect_unknown") / "checkpoint.bin").string(), "--users", "no-such-user"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no-such-user"), std::string::npos);
}

TEST_F(Cli, InspectAgreesWithRouteRecovery) {
  auto s = run_cli({"synth", "--archetype", "drifted", "--users", "60", "--items", "120", "--categories", "4",
                    "--min-length", "8", "--max-length", "16", "--out", dir("drift").string()});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto ddata = (dir("drift") / "interactions.tsv").string();
  const auto dlabels = (dir("drift") / "pivotal.tsv").string();
  auto t = run_cli({"train", "--data", ddata, "--out", dir("drift_model").string(), "--dim", "8", "--heads", "2",
                    "--max-len", "16", "--epochs", "2", "--min-count", "1"});
  ASSERT_EQ(t.code, 0) << t.err;
  const auto ckpt = dir("drift_model") / "checkpoint.bin";
  auto r = run_cli({"inspect-routes", "--data", ddata, "--labels", dlabels, "--checkpoint", ckpt.string(),
                    "--users", "4"});
  ASSERT_EQ(r.code, 0) << r.err;

  auto rows = route_rows(r.out);
  ASSERT_FALSE(rows.empty());
  std::size_t agree = 0;
  for (const auto& row : rows) {
    ASSERT_EQ(row.size(), 5u);
    EXPECT_LE(std::stoi(row[3]), std::stoi(row[2])) << "block 2 keeps a position block 1 dropped";
    agree += row[3] == row[4];
  }

  // Independent recomputation through the library.
  auto archive = read_archive(ckpt);
  auto config = model::ModelConfig::from_metadata(archive.metadata);
  auto params = model::ModelParams<float>::from_archive(archive, config);
  auto split = data::leave_one_out_split(data::load_interactions(ddata, 1), config.max_len);
  auto labels = data::load_pivotal_labels(dlabels);
  const data::BehaviorSequence* seq = nullptr;
  for (const auto& s2 : split.test) {
    if (split.user_ids[static_cast<std::size_t>(s2.user)] == "4") seq = &s2;
  }
  ASSERT_NE(seq, nullptr);
  const data::BehaviorSequence* one[] = {seq};
  auto batch = model::Batch::from(one);
  Rng rng = make_stream(eval::EvalConfig{}.seed, "eval-gumbel");
  auto trace = model::forward(batch, params, config, {.rng = &rng});
  auto rec = eval::route_recovery(trace, batch, {data::align_pivotal(*seq, labels.at("4"))});

  auto value_of = [&](const std::string& key) {
    const auto at = r.out.find(key);
    EXPECT_NE(at, std::string::npos) << key;
    return std::stod(r.out.substr(at + key.size()));
  };
  EXPECT_NEAR(value_of("pivotal keep rate: "), rec.pivotal_rate(), 5e-5);
  EXPECT_NEAR(value_of("non-pivotal keep rate: "), rec.other_rate(), 5e-5);
  EXPECT_NEAR(value_of("pivotal agreement: "), static_cast<double>(agree) / static_cast<double>(rows.size()), 5e-5);
}

TEST_F(Cli, ExportRoutesWritesBothSchemas) {
  ASSERT_EQ(train("export_src").code, 0);
  auto r = run_cli({"eval", "--data", data(), "--checkpoint", (dir("export_src") / "checkpoint.bin").string(),
                    "--out", dir("export_out").string(), "--export-routes", "--users", "2,9"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* user : {"2", "9"}) {
    const auto base = dir("export_out") / "routes" / (std::string("user_") + user);
    const auto routes = slurp(base.string() + "_routes.csv");
    const auto attention = slurp(base.string() + "_attention.csv");
    EXPECT_EQ(routes.rfind("layer,pos,hard,soft\n", 0), 0u);
    EXPECT_EQ(attention.rfind("layer,head,query_pos,key_pos,weight\n", 0), 0u);
    // Attention rows of each query sum to one.
    std::map<std::tuple<int, int, int>, double> sums;
    std::istringstream in(attention);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      int layer, head, q, k;
      double w;
      char c;
      std::istringstream ls(line);
      ls >> layer >> c >> head >> c >> q >> c >> k >> c >> w;
      EXPECT_LE(k, q);
      sums[{layer, head, q}] += w;
    }
    ASSERT_FALSE(sums.empty());
    for (const auto& [key, s] : sums) EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_EQ(run_cli({"eval", "--data", data(), "--checkpoint", (dir("export_src") / "checkpoint.bin").string(),
                     "--export-routes", "--users", "2"})
                .code,
            2);
}

}  // namespace
}  // namespace retr::cli
