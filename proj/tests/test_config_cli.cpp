#include <gtest/gtest.h>

#include <json.hpp>

#include "cli_runner.hpp"
#include "helpers.hpp"
#include "steerfair/cli.hpp"
#include "steerfair/config.hpp"

using namespace steerfair;
namespace fs = std::filesystem;

namespace {

const std::string kSmall = runner::source_path("configs/ci_small.toml").string();

config::RunConfig parse(const std::string& text) { return config::from_key_values(config::KeyValues::parse(text)); }

void write(const fs::path& p, const std::string& s) { io::write_file_atomic(p, s); }

nlohmann::json error_line(const runner::Outcome& o) {
  auto nl = o.err.find('\n');
  return nlohmann::json::parse(o.err.substr(0, nl));
}

}  // namespace

TEST(KeyValues, SectionsArraysAndComments) {
  auto kv = config::KeyValues::parse(
      "seed = 4  # trailing comment\n"
      "out_dir = \"runs/x # not a comment\"\n"
      "\n"
      "[sweep]\n"
      "alphas = [0.5, 1, 2]\n"
      "[data]\n"
      "train_themes = [\"A\", \"B\"]\n");
  EXPECT_EQ(kv.count("seed", 0), 4u);
  EXPECT_EQ(kv.str("out_dir", ""), "runs/x # not a comment");
  EXPECT_EQ(kv.reals("sweep.alphas", {}), (std::vector<double>{0.5, 1, 2}));
  EXPECT_EQ(kv.strs("data.train_themes", {}), (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(kv.real("missing", 7.5), 7.5);
}

TEST(KeyValues, MalformedInputIsConfigParse) {
  EXPECT_ERRC(config::KeyValues::parse("seed 4\n"), errc::config_parse);
  EXPECT_ERRC(config::KeyValues::parse("seed = 1\nseed = 2\n"), errc::config_parse);
  EXPECT_ERRC(config::KeyValues::parse("[data\n"), errc::config_parse);
  EXPECT_ERRC(config::KeyValues::parse("x = \"open\n"), errc::config_parse);
  EXPECT_ERRC(config::KeyValues::parse("x = [1, 2\n"), errc::config_parse);
}

TEST(RunConfig, SeedIsMandatory) { EXPECT_ERRC(parse("out_dir = \"x\"\n"), errc::config_parse); }

TEST(RunConfig, UnknownKeyRejected) {
  EXPECT_ERRC(parse("seed = 1\n[train]\nstepz = 3\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\ncolour = 3\n"), errc::config_parse);
}

TEST(RunConfig, TypeErrorsAreConfigParse) {
  EXPECT_ERRC(parse("seed = -1\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\n[train]\nlr = \"fast\"\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\n[train]\noptimizer = \"rmsprop\"\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\n[steer]\nk = \"0\"\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\n[steer]\nalpha = -1\n"), errc::config_parse);
  EXPECT_ERRC(parse("seed = 1\n[data]\ntheme = \"Z\"\n"), errc::config_parse);
}

TEST(RunConfig, DefaultsWhenKeysAbsent) {
  auto c = parse("seed = 9\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.model.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.model.n_heads, 4u);
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.data.m, 2u);
  EXPECT_DOUBLE_EQ(c.data.p_bias, 0.9);
  EXPECT_DOUBLE_EQ(c.alpha, 1.0);
  EXPECT_EQ(c.k, steering::HeadCount::all());
  EXPECT_EQ(c.study_ns, (std::vector<std::size_t>{2, 10, 50, 100, 500}));
  EXPECT_EQ(c.sweep_alphas, eval::default_alphas());
}

TEST(RunConfig, ThemesGetDistinctGenerationSeeds) {
  auto c = parse("seed = 5\n");
  EXPECT_NE(c.spec_for("A").seed, c.spec_for("B").seed);
  EXPECT_EQ(c.spec_for("B").theme, "B");
}

TEST(RunConfig, OverridesWinOverFile) {
  auto dir = th::work_dir("overrides");
  write(dir / "c.toml", "seed = 1\n[steer]\nalpha = 2\n");
  config::KeyValues ov;
  ov.set_text("seed", "8");
  ov.set_text("steer.alpha", "0.25");
  auto c = config::load(dir / "c.toml", ov);
  EXPECT_EQ(c.seed, 8u);
  EXPECT_DOUBLE_EQ(c.alpha, 0.25);
}

TEST(RunConfig, MissingFileIsMissingInput) {
  EXPECT_ERRC(config::load(fs::path(STEERFAIR_TEST_WORK_DIR) / "nope.toml"), errc::missing_input);
}

TEST(RunConfig, ShippedConfigsParse) {
  for (auto name : {"configs/default.toml", "configs/theme_a.toml", "configs/ci_small.toml", "configs/ci_small_b.toml"}) {
    auto c = config::load(runner::source_path(name));
    EXPECT_EQ(c.model.total_heads(), 8u) << name;
  }
  auto a = config::load(runner::source_path("configs/theme_a.toml"));
  auto b = config::load(runner::source_path("configs/default.toml"));
  // same corpus and model, only the evaluated theme differs
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(a.train_themes, b.train_themes);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_NE(a.directions, b.directions);
  EXPECT_NE(a.data.theme, b.data.theme);
}

TEST(ExitCodes, MappingTable) {
  EXPECT_EQ(cli::exit_code_for(errc::config_parse), 2);
  EXPECT_EQ(cli::exit_code_for(errc::invalid_k), 2);
  EXPECT_EQ(cli::exit_code_for(errc::invalid_argument), 2);
  EXPECT_EQ(cli::exit_code_for(errc::missing_input), 3);
  EXPECT_EQ(cli::exit_code_for(errc::model_signature_mismatch), 4);
  EXPECT_EQ(cli::exit_code_for(errc::degenerate_data), 5);
  EXPECT_EQ(cli::exit_code_for(errc::diverged_loss), 5);
  EXPECT_EQ(cli::exit_code_for(errc::corrupt_file), 6);
  EXPECT_EQ(cli::exit_code_for(errc::format_version_mismatch), 6);
}

TEST(Cli, NoSubcommandIsUsageError) {
  auto o = runner::cli({}, th::work_dir("cli_usage"));
  EXPECT_EQ(o.exit_code, 2);
}

TEST(Cli, MissingConfigFileExitsThree) {
  auto dir = th::work_dir("cli_missing_cfg");
  auto o = runner::cli({"gen-data", "--config", (dir / "absent.toml").string()}, dir);
  EXPECT_EQ(o.exit_code, 3);
  auto j = error_line(o);
  EXPECT_EQ(j["exit_code"], 3);
  EXPECT_EQ(j["error"], "MissingInput");
  EXPECT_TRUE(j.contains("message"));
}

TEST(Cli, BadConfigExitsTwoWithJsonError) {
  auto dir = th::work_dir("cli_bad_cfg");
  write(dir / "bad.toml", "seed = 1\nbogus = 2\n");
  auto o = runner::cli({"gen-data", "--config", (dir / "bad.toml").string()}, dir);
  EXPECT_EQ(o.exit_code, 2);
  auto j = error_line(o);
  EXPECT_EQ(j["exit_code"], 2);
  EXPECT_EQ(j["error"], "ConfigParse");
}

TEST(Cli, InvalidKFlagExitsTwo) {
  auto dir = th::work_dir("cli_bad_k");
  auto o = runner::cli({"gen-data", "--config", kSmall, "--out", dir.string(), "--k", "0"}, dir);
  EXPECT_EQ(o.exit_code, 2);
}

TEST(Cli, EvalWithoutModelExitsThree) {
  auto dir = th::work_dir("cli_no_model");
  auto o = runner::cli({"eval", "--vanilla", "--config", kSmall, "--out", dir.string()}, dir);
  EXPECT_EQ(o.exit_code, 3);
}

TEST(Cli, CorruptCheckpointExitsSix) {
  auto dir = th::work_dir("cli_corrupt");
  ASSERT_EQ(runner::cli({"gen-data", "--config", kSmall, "--out", dir.string()}, dir).exit_code, 0);
  write(dir / "model.json", "{\"format_version\": ");
  auto o = runner::cli({"eval", "--vanilla", "--config", kSmall, "--out", dir.string()}, dir);
  EXPECT_EQ(o.exit_code, 6);
  EXPECT_EQ(error_line(o)["exit_code"], 6);
}

// The small pipeline is run once into `first` and once into `second`.
class Pipeline : public ::testing::Test {
 protected:
  static fs::path first, second;

  static runner::Outcome run_in(const fs::path& dir, std::vector<std::string> args) {
    args.insert(args.end(), {"--config", kSmall, "--out", dir.string()});
    return runner::cli(args, dir.parent_path() / (dir.filename().string() + "_io"));
  }

  static void full_pipeline(const fs::path& dir) {
    for (const auto& cmd : std::vector<std::vector<std::string>>{{"gen-data"},
                                                                 {"train"},
                                                                 {"find-directions"},
                                                                 {"eval", "--vanilla"},
                                                                 {"eval"},
                                                                 {"sweep"},
                                                                 {"study-n"},
                                                                 {"projections"}}) {
      auto o = run_in(dir, cmd);
      ASSERT_EQ(o.exit_code, 0) << cmd[0] << ": " << o.err;
    }
  }

  static void SetUpTestSuite() {
    first = th::work_dir("pipeline_first");
    second = th::work_dir("pipeline_second");
    full_pipeline(first);
    full_pipeline(second);
  }
};
fs::path Pipeline::first, Pipeline::second;

TEST_F(Pipeline, ProducesExpectedFiles) {
  for (auto rel : {"data/A/train.jsonl", "data/A/val.jsonl", "data/A/eval.jsonl", "data/A/unlabeled.jsonl",
                   "data/B/train.jsonl", "model.json", "train_log.csv", "directions_A.json", "eval_A.csv",
                   "eval_A.json", "eval_A_vanilla.csv", "sweep_A.csv", "sweep_A_val.csv", "sweep_A.json",
                   "study_n_A.csv"})
    EXPECT_TRUE(fs::exists(first / rel)) << rel;
  EXPECT_FALSE(fs::is_empty(first / "projections_A"));
}

TEST_F(Pipeline, EveryCommandIsByteDeterministic) {
  auto a = runner::snapshot(first), b = runner::snapshot(second);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [rel, bytes] : a) {
    ASSERT_TRUE(b.count(rel)) << rel;
    EXPECT_TRUE(bytes == b.at(rel)) << rel;
  }
}

TEST_F(Pipeline, RerunningFindDirectionsIsIdentical) {
  auto before = io::read_file(first / "directions_A.json");
  ASSERT_EQ(run_in(first, {"find-directions"}).exit_code, 0);
  EXPECT_EQ(io::read_file(first / "directions_A.json"), before);
}

TEST_F(Pipeline, AlphaZeroEvalMatchesVanillaBytes) {
  auto dir = th::work_dir("pipeline_alpha0");
  fs::copy(first, dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  ASSERT_EQ(run_in(dir, {"eval", "--alpha", "0"}).exit_code, 0);
  EXPECT_EQ(io::read_file(dir / "eval_A.csv"), io::read_file(dir / "eval_A_vanilla.csv"));
  auto j = nlohmann::json::parse(io::read_file(dir / "eval_A.json"));
  EXPECT_EQ(j["config"]["alpha"], 0.0);
}

TEST_F(Pipeline, UnlabeledFileCarriesNoLabels) {
  for (auto theme : {"A", "B"}) {
    auto bytes = io::read_file(first / "data" / theme / "unlabeled.jsonl");
    EXPECT_FALSE(bytes.empty());
    EXPECT_EQ(bytes.find("golden_index"), std::string::npos) << theme;
  }
}

TEST_F(Pipeline, SweepCsvCoversGrid) {
  auto csv = io::read_file(first / "sweep_A.csv");
  auto lines = std::count(csv.begin(), csv.end(), '\n');
  auto c = config::load(kSmall);
  auto ks = eval::default_k_list(8, c.sweep_ks);
  EXPECT_EQ(std::size_t(lines), 1 + c.sweep_alphas.size() * ks.size());
}

TEST_F(Pipeline, StudyCsvHasRowPerNAndSeed) {
  auto csv = io::read_file(first / "study_n_A.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "n,seed,avg,std,mean_evr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2);
}

TEST_F(Pipeline, SignatureMismatchExitsFour) {
  auto dir = th::work_dir("pipeline_sig");
  // a 2-head model pointed at the 4-head directions file
  write(dir / "narrow.toml", io::read_file(kSmall) + "\n[model]\nheads = 2\n");
  auto narrow = (dir / "narrow.toml").string();
  std::string cfg = io::read_file(narrow);
  cfg.replace(cfg.find("directions = \"directions_A.json\""), std::string("directions = \"directions_A.json\"").size(),
              "directions = \"" + (first / "directions_A.json").string() + "\"");
  write(narrow, cfg);
  auto io_dir = dir / "io";
  ASSERT_EQ(runner::cli({"gen-data", "--config", narrow, "--out", dir.string()}, io_dir).exit_code, 0);
  ASSERT_EQ(runner::cli({"train", "--config", narrow, "--out", dir.string()}, io_dir).exit_code, 0);
  auto o = runner::cli({"eval", "--config", narrow, "--out", dir.string()}, io_dir);
  EXPECT_EQ(o.exit_code, 4) << o.err;
  EXPECT_EQ(error_line(o)["error"], "ModelSignatureMismatch");
}

TEST_F(Pipeline, TransferRunsBetweenThemes) {
  auto dir = th::work_dir("pipeline_transfer");
  fs::copy(first, dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  auto io_dir = dir / "io";
  auto small_b = runner::source_path("configs/ci_small_b.toml").string();
  ASSERT_EQ(runner::cli({"find-directions", "--config", small_b, "--out", dir.string()}, io_dir).exit_code, 0);
  auto o = runner::cli({"transfer", "--config", kSmall, "--config-b", small_b, "--out", dir.string()}, io_dir);
  ASSERT_EQ(o.exit_code, 0) << o.err;
  auto j = nlohmann::json::parse(io::read_file(dir / "transfer_A_to_B.json"));
  for (auto key : {"vanilla", "own_dataset", "other_dataset"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(fs::exists(dir / "transfer_A_to_B.csv"));
}
