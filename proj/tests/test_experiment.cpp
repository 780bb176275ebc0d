#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "watervib/config.hpp"
#include "watervib/experiment.hpp"
#include "watervib/image.hpp"

using namespace watervib;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

const char* kSmokeConfig = R"(
# smoke configuration
[run]
name = smoke
seed = 7
out_dir = {OUT}

[model]
image_size = 16
message_bits = 8
latent_dim = 8

[train]
epochs = 1
batch_size = 8
covers = 24
val_fraction = 0.25
val_subset = 4

[attacks]
train_pool = identity
eval = identity
)";

std::string smoke_config(const std::string& out_dir) {
  std::string s = kSmokeConfig;
  s.replace(s.find("{OUT}"), 5, out_dir);
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config defaults and overrides") {
  const ExperimentConfig c = parse_config("[run]\nname = x\n");
  CHECK(c.name == "x");
  CHECK(c.seed == 1);
  CHECK(c.image_size == 32);
  CHECK(c.message_bits == 16);
  CHECK(c.latent_dim == 32);
  CHECK(c.alpha == Approx(0.007));
  CHECK(c.beta == Approx(1.5e-4));
  CHECK(c.epochs == 20);
  CHECK(c.covers == 2000);
  CHECK(c.out_dir == "runs/x");
  // default pool: the five standard channels plus the purification proxy
  REQUIRE(c.train_pool.size() == 6);
  CHECK(c.train_pool.back().name() == "purify(gamma=0.3,sigma=0.02)");
  CHECK(c.eval_attacks.size() == c.train_pool.size());
}

TEST_CASE("config rejects unknown keys with line numbers") {
  try {
    parse_config("[run]\nname = x\n\n[train]\nepochz = 3\n");
    FAIL("expected a parse error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 5") != std::string::npos);
    CHECK(msg.find("epochz") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("[nope]\nx = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("x = 1\n"), std::invalid_argument);       // key outside section
  CHECK_THROWS_AS(parse_config("[train]\nepochs = ten\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[run]\nseed 7\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[attacks]\ntrain_pool = warp(x=1)\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[model]\nimage_size = 33\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[train]\nval_fraction = 1.5\n"), std::invalid_argument);
}

TEST_CASE("config parses attack lists with nested parentheses") {
  const ExperimentConfig c = parse_config(
      "[attacks]\ntrain_pool = identity, dropout(keep=0.65..0.75), purify(gamma=0.5,sigma=0.02)\n");
  REQUIRE(c.train_pool.size() == 3);
  CHECK(c.train_pool[1].name() == "dropout(keep=0.65..0.75)");
  CHECK(c.train_pool[2].name() == "purify(gamma=0.5,sigma=0.02)");
}

TEST_CASE("smoke run emits the full artifact set") {
  TempDir tmp("watervib-smoke");
  const ExperimentConfig cfg = parse_config(smoke_config((tmp.path / "run").string()));
  const RunArtifacts art = run_experiment(cfg);

  CHECK(fs::exists(tmp.path / "run" / "checkpoint.json"));
  CHECK(fs::exists(tmp.path / "run" / "report.json"));
  CHECK(fs::exists(tmp.path / "run" / "plots" / "loss_total.dat"));
  CHECK(fs::exists(tmp.path / "run" / "plots" / "val_ber.dat"));

  const std::string csv = slurp(tmp.path / "run" / "metrics.csv");
  std::istringstream is(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);  // header + 1 training row + 1 eval row
  CHECK(lines[0] == kMetricsHeader);
  CHECK(lines[1].find("smoke,epoch:1,pool,") == 0);
  CHECK(lines[2].find("smoke,eval,identity,") == 0);
  CHECK(art.history.epochs.size() == 1);
  CHECK(art.eval.count("identity") == 1);
}

TEST_CASE("same config and seed give byte-identical metrics") {
  TempDir tmp("watervib-determinism");
  const ExperimentConfig cfg_a = parse_config(smoke_config((tmp.path / "a").string()));
  const ExperimentConfig cfg_b = parse_config(smoke_config((tmp.path / "b").string()));
  run_experiment(cfg_a);
  run_experiment(cfg_b);
  CHECK(slurp(tmp.path / "a" / "metrics.csv") == slurp(tmp.path / "b" / "metrics.csv"));
  CHECK(slurp(tmp.path / "a" / "checkpoint.json") == slurp(tmp.path / "b" / "checkpoint.json"));
  CHECK(slurp(tmp.path / "a" / "plots" / "loss_total.dat") ==
        slurp(tmp.path / "b" / "plots" / "loss_total.dat"));
}

TEST_CASE("compare_runs on identical runs reports zero deltas") {
  TempDir tmp("watervib-compare");
  const ExperimentConfig cfg_a = parse_config(smoke_config((tmp.path / "a").string()));
  const ExperimentConfig cfg_b = parse_config(smoke_config((tmp.path / "b").string()));
  run_experiment(cfg_a);
  run_experiment(cfg_b);
  const nlohmann::json cmp = compare_runs((tmp.path / "a").string(), (tmp.path / "b").string());
  for (const auto& [name, row] : cmp.at("attacks").items()) {
    CHECK(row.at("ber_delta").get<double>() == 0.0);
    CHECK(row.at("rho_delta").get<double>() == 0.0);
  }
}

TEST_CASE("compare_runs rejects mismatched attack sets") {
  TempDir tmp("watervib-mismatch");
  std::string cfg_a_text = smoke_config((tmp.path / "a").string());
  std::string cfg_b_text = smoke_config((tmp.path / "b").string());
  cfg_b_text.replace(cfg_b_text.find("eval = identity"), 15, "eval = jpeg(keep_y=25)");
  run_experiment(parse_config(cfg_a_text));
  run_experiment(parse_config(cfg_b_text));
  CHECK_THROWS_AS(compare_runs((tmp.path / "a").string(), (tmp.path / "b").string()),
                  std::runtime_error);
}

TEST_CASE("beta sweep writes one plot row per beta and per-point checkpoints") {
  TempDir tmp("watervib-sweep");
  std::string text = smoke_config((tmp.path / "sweep").string());
  text += "\n[sweep]\nbetas = 0, 1e-4, 1e-3\n";
  const auto curve = run_sweep(parse_config(text));
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].first == 0.0);
  const std::string dat = slurp(tmp.path / "sweep" / "ber_vs_beta.dat");
  int rows = 0;
  for (char c : dat) rows += c == '\n';
  CHECK(rows == 3);
  for (int k = 0; k < 3; ++k)
    CHECK(fs::exists(tmp.path / "sweep" / ("beta_" + std::to_string(k)) / "checkpoint.json"));
}

TEST_CASE("pgm round-trips through a file") {
  TempDir tmp("watervib-pgm");
  const CoverImage im = generate_covers(1, 16, 16, 91)[0];
  const auto path = (tmp.path / "img.pgm").string();
  write_pgm_file(path, im);
  const CoverImage back = read_pgm_file(path);
  REQUIRE(back.h == 16);
  REQUIRE(back.w == 16);
  for (std::size_t i = 0; i < im.px.size(); ++i)
    CHECK(back.px[i] == Approx(im.px[i]).margin(0.5 / 65535.0 + 1e-9));
  // quantize-requantize is exact
  write_pgm_file(path, back);
  const CoverImage again = read_pgm_file(path);
  CHECK(again.px == back.px);
}

TEST_CASE("pgm reader rejects malformed headers") {
  std::istringstream p2("P2\n4 4\n65535\n");
  CHECK_THROWS_AS(read_pgm(p2), std::runtime_error);
  std::istringstream maxval("P5\n4 4\n255\n");
  CHECK_THROWS_AS(read_pgm(maxval), std::runtime_error);
  std::istringstream truncated("P5\n4 4\n65535\nxx");
  CHECK_THROWS_AS(read_pgm(truncated), std::runtime_error);
}
