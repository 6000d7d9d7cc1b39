#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "trojanlens/cli_report.hpp"

namespace trojanlens {
namespace {

namespace fs = std::filesystem;

RunConfig small_run() {
  RunConfig r;
  r.seed = 5;
  r.zoo.n_benign = 4;
  r.zoo.n_trojan = 4;
  r.zoo.trigger_mix = {0.0, 1.0, 0.0};
  r.zoo.train_examples = 1000;
  r.zoo.model.n_layers = 1;
  r.zoo.model.n_heads = 2;
  r.zoo.model.d_model = 16;
  r.zoo.model.d_ff = 32;
  r.zoo.clean_gate = 0.0;
  r.zoo.asr_gate = 0.0;
  r.zoo.seed = r.seed;
  r.detector.folds = 2;
  r.detector.reverse.steps = 5;
  r.attribution_sentences = 2;
  r.attribution_steps = 4;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

TEST(RunConfigTest, JsonRoundTripKeepsTheHash) {
  RunConfig r = small_run();
  r.criteria.majority_ratio = 0.6;
  r.detector.reverse.lengths = {1, 2};
  const RunConfig back = parse_run_config(nlohmann::json(r).dump());
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(r));
  EXPECT_EQ(run_config_hash(back), run_config_hash(r));
  r.criteria.majority_ratio = 0.7;
  EXPECT_NE(run_config_hash(back), run_config_hash(r));
}

TEST(RunConfigTest, MasterSeedDrivesTheZooSeed) {
  const RunConfig r = parse_run_config(R"({"seed": 77, "zoo": {"seed": 3}})");
  EXPECT_EQ(r.zoo.seed, 77u);
}

TEST(RunConfigTest, BadInputIsAConfigError) {
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"zoo": {"model": {"readout": "sideways"}}})"), ConfigError);
  RunConfig r = small_run();
  r.detector.method = "guess";
  EXPECT_THROW(r.validate(), ConfigError);
  r = small_run();
  r.criteria.large_attention = 0.0;
  EXPECT_THROW(r.validate(), ConfigError);
  r = small_run();
  r.detector.reverse.lengths = {40};
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(RunConfigTest, InvalidGeometryFailsBeforeTraining) {
  RunConfig r = small_run();
  r.zoo.model.d_model = 10;
  r.zoo.model.n_heads = 4;
  const fs::path dir = fs::temp_directory_path() / "trojanlens_cli_badgeom";
  fs::remove_all(dir);
  EXPECT_THROW(cmd_generate_zoo(r, dir), ConfigError);
  EXPECT_FALSE(fs::exists(dir / kManifestFile));
}

TEST(Kde, SilvermanMatchesHandFormula) {
  const std::vector<double> x = {0.1, 0.2, 0.4, 0.8, 0.9};
  // sd = 0.35355..., IQR = 0.8 − 0.2 = 0.6 → 0.6/1.34 = 0.4478 > sd
  double mean = 0.48, var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 4.0);
  EXPECT_NEAR(silverman_bandwidth(x), 0.9 * sd * std::pow(5.0, -0.2), 1e-12);
}

TEST(Kde, DensityIntegratesToOne) {
  const std::vector<double> x = {0.3, 0.35, 0.5, 0.52, 0.9};
  std::vector<double> grid;
  for (int i = -2000; i <= 3000; ++i) grid.push_back(i * 1e-3);
  const auto d = gaussian_kde(x, grid, silverman_bandwidth(x));
  double area = 0.0;
  for (double v : d) area += v * 1e-3;
  EXPECT_NEAR(area, 1.0, 1e-3);
}

TEST(Schema, ReportsMissingFields) {
  EXPECT_FALSE(validate_report(nlohmann::json::array()).empty());
  nlohmann::json j = {{"kind", "detect"}, {"tool_version", "x"}, {"run_config_hash", "y"}, {"method", "naive"}, {"results", 3}};
  const auto errs = validate_report(j);
  ASSERT_EQ(errs.size(), 2u);  // results has the wrong type, metrics is missing
  j["kind"] = "mystery";
  EXPECT_FALSE(validate_report(j).empty());
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / "trojanlens_cli_pipeline");
    fs::remove_all(*root_);
    cmd_generate_zoo(small_run(), *root_ / "zoo");
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};
fs::path* Pipeline::root_ = nullptr;

TEST_F(Pipeline, GenerateWritesModelsManifestAndRunConfig) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  EXPECT_EQ(zoo.members().size(), 8u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(*root_ / "zoo" / "models")) files += e.path().extension() == ".tlm";
  EXPECT_EQ(files, 8u);
  const nlohmann::json rc = read_json_file(*root_ / "zoo" / "run_config.json");
  EXPECT_EQ(rc.at("run_config_hash"), run_config_hash(small_run()));
  EXPECT_EQ(rc.at("run_config").get<RunConfig>().zoo.n_benign, 4u);
}

TEST_F(Pipeline, RegeneratingGivesTheSameManifest) {
  cmd_generate_zoo(small_run(), *root_ / "zoo2");
  EXPECT_EQ(slurp(*root_ / "zoo" / kManifestFile), slurp(*root_ / "zoo2" / kManifestFile));
}

TEST_F(Pipeline, AnalyzeEmitsConsistentMaps) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  RunConfig r = small_run();
  r.differing_delta = 0.0;
  const fs::path out = *root_ / "analyze";
  const nlohmann::json j = cmd_analyze(r, zoo, out);
  EXPECT_TRUE(validate_report(j).empty());
  const auto& tm = j.at("head_map_trojan");
  const auto& bm = j.at("head_map_benign");
  ASSERT_EQ(tm.size(), 1u);
  ASSERT_EQ(tm.at(0).size(), 2u);
  // Recheck the differing heads against the emitted maps.
  std::size_t expected = 0;
  for (std::size_t h = 0; h < 2; ++h) expected += tm[0][h].get<double>() - bm[0][h].get<double>() > 0.0;
  EXPECT_EQ(j.at("differing_heads").size(), expected);
  for (const auto& d : j.at("differing_heads")) {
    const HeadId h = d.at("head").get<HeadId>();
    EXPECT_GT(tm[h.layer][h.head].get<double>(), bm[h.layer][h.head].get<double>());
  }
  EXPECT_GT(j.at("distribution").at("trojan").at("min").get<double>(), 0.1);
  // CSV grid: comment, header, one row per layer.
  const std::string csv = slurp(out / "head_map_trojan.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("run_config_hash="), std::string::npos);
  std::istringstream lines(slurp(out / "distribution_benign.csv"));
  std::string line;
  std::getline(lines, line);
  std::getline(lines, line);
  while (std::getline(lines, line)) EXPECT_GT(std::stod(line.substr(0, line.find(','))), 0.1 - 1e-12);
}

TEST_F(Pipeline, CharacterizeReportValidatesAndRecounts) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  const fs::path out = *root_ / "characterize";
  const nlohmann::json j = cmd_characterize(small_run(), zoo, out);
  EXPECT_TRUE(validate_report(j).empty()) << validate_report(j).front();
  EXPECT_TRUE(validate_report(read_json_file(out / "characterize.json")).empty());
  for (const char* cls : {"semantic", "specific"}) {
    for (const char* pop : {"benign", "trojan"}) {
      std::size_t n = 0, with = 0;
      for (const auto& m : j.at("models"))
        if (m.at("population") == pop) {
          ++n;
          with += std::string(cls) == "semantic" ? !m.at("semantic_heads").empty() : !m.at("specific_heads").empty();
        }
      EXPECT_EQ(j.at(cls).at(pop).at("models").get<std::size_t>(), n);
      EXPECT_EQ(j.at(cls).at(pop).at("with_heads").get<std::size_t>(), with);
    }
    EXPECT_TRUE(j.at(cls).contains("chi_square"));
  }
  EXPECT_EQ(j.at("attribution").at("trojans").get<std::size_t>(), 4u);
}

TEST_F(Pipeline, DetectEmitsMetricRows) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  RunConfig r = small_run();
  for (const std::string method : {"naive", "enumerate", "reverse"}) {
    r.detector.method = method;
    const nlohmann::json j = cmd_detect(r, zoo, *root_ / "detect");
    EXPECT_TRUE(validate_report(j).empty());
    EXPECT_EQ(j.at("results").size(), 8u);
    EXPECT_EQ(j.at("metrics").size(), method == "naive" ? 4u : 1u);
    for (const auto& m : j.at("metrics"))
      for (const char* k : {"acc", "auc", "recall", "precision", "f1"}) {
        EXPECT_GE(m.at(k).get<double>(), 0.0);
        EXPECT_LE(m.at(k).get<double>(), 1.0);
      }
    for (const auto& res : j.at("results"))
      EXPECT_EQ(res.at("verdict") == "trojan", res.at("score").get<double>() >= res.at("threshold").get<double>());
    if (method == "reverse") {
      for (const auto& res : j.at("results")) EXPECT_EQ(res.at("runs").get<std::size_t>(), 18u);
    }
    EXPECT_TRUE(fs::exists(*root_ / "detect" / ("detect_" + method + ".csv")));
  }
  r.detector.method = "enumerate";
  cmd_detect(r, zoo, *root_ / "single.json");
  EXPECT_TRUE(fs::exists(*root_ / "single.json"));
  EXPECT_TRUE(fs::exists(*root_ / "single.csv"));
}

TEST_F(Pipeline, RerunsAreByteIdentical) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  RunConfig r = small_run();
  r.detector.method = "enumerate";
  for (const char* dir : {"rerun_a", "rerun_b"}) {
    cmd_analyze(r, zoo, *root_ / dir);
    cmd_characterize(r, zoo, *root_ / dir);
    cmd_detect(r, zoo, *root_ / dir);
    cmd_report(r, *root_ / dir);
  }
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(*root_ / "rerun_a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), *root_ / "rerun_a");
    EXPECT_EQ(slurp(e.path()), slurp(*root_ / "rerun_b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 9u);
}

TEST_F(Pipeline, ReportSummarisesAndEmitsKde) {
  const Zoo zoo = load_zoo(*root_ / "zoo");
  const RunConfig r = small_run();
  const fs::path out = *root_ / "report";
  const nlohmann::json a = cmd_analyze(r, zoo, out);
  // Put every head in the differing list to exercise KDE emission.
  nlohmann::json all = a;
  all["differing_heads"] = nlohmann::json::array();
  for (std::size_t h = 0; h < 2; ++h) all["differing_heads"].push_back({{"head", HeadId{0, h}}, {"difference", 0.0}});
  write_json_file(out / "analysis.json", all);
  const nlohmann::json c = cmd_characterize(r, zoo, out);
  const std::string text = cmd_report(r, out);
  EXPECT_TRUE(fs::exists(out / "summary.txt"));
  EXPECT_TRUE(fs::exists(out / "kde" / "kde_L0H0.csv"));
  EXPECT_TRUE(fs::exists(out / "kde" / "kde_L0H1.csv"));
  // The summary's model_s matches the stored population rows.
  const auto& row = c.at("semantic").at("benign");
  std::ostringstream expect;
  expect << std::fixed << std::setprecision(4) << "benign: model_s " << 100.0 * row.at("model_s").get<double>() << "% ("
         << row.at("with_heads").get<std::size_t>() << "/" << row.at("models").get<std::size_t>() << ")";
  EXPECT_NE(text.find(expect.str()), std::string::npos) << text;
}

TEST(ReportCommand, EmptyDirectoryIsADescriptiveError) {
  const fs::path dir = fs::temp_directory_path() / "trojanlens_cli_empty";
  fs::remove_all(dir);
  fs::create_directories(dir);
  try {
    cmd_report(RunConfig{}, dir);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("no analysis.json"), std::string::npos);
  }
  fs::remove_all(dir);
}

#ifdef TROJANLENS_CLI_PATH
int run_cli(const std::string& args) {
  const int status = std::system((std::string(TROJANLENS_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliBinary, ExitCodes) {
  const fs::path dir = fs::temp_directory_path() / "trojanlens_cli_exit";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig bad = small_run();
  bad.zoo.model.d_model = 10;
  bad.zoo.model.n_heads = 4;
  write_json_file(dir / "bad.json", bad);
  EXPECT_EQ(run_cli("generate-zoo --config " + (dir / "bad.json").string() + " --zoo " + (dir / "z").string()), 2);
  EXPECT_NE(run_cli("detect --method psychic --zoo " + dir.string()), 0);
  EXPECT_EQ(run_cli("analyze --zoo " + dir.string() + " --out " + (dir / "o").string()), 3);  // no manifest
  EXPECT_NE(run_cli("report --out " + dir.string()), 0);
  EXPECT_EQ(run_cli("--help"), 0);
  fs::remove_all(dir);
}
#endif

}  // namespace
}  // namespace trojanlens
