#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "flowvi/experiment.hpp"
#include "json.hpp"

using namespace flowvi;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowvi_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Exit {
  int code;
  std::string err;
};

Exit cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(FLOWVI_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

ExperimentConfig tiny(const std::string& model, const std::string& variant, std::uint64_t seed) {
  ExperimentConfig c = ExperimentConfig::desk();
  c.model.name = model;
  c.model.dim = 4;
  c.model.dprime = 3;
  c.model.n = 20;
  c.model.data_seed = seed;
  c.variant = variant;
  c.layers = 2;
  c.hidden = 8;
  c.train.iterations = 40;
  c.train.batch = 16;
  c.train.seed = seed;
  c.train.log_every = 10;
  c.eval.samples = 200;
  c.eval.repeats = 3;
  c.eval.projections = 8;
  c.eval.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("variant registry matches the documented configurations") {
  CHECK(variant_names().size() == 8);
  const auto standard = lookup_variant("standard");
  CHECK(standard.base == BaseKind::Gaussian);
  CHECK(standard.clamp.kind == ClampMode::Kind::None);
  CHECK(standard.ordering == Ordering::Classic);
  const auto ataf = lookup_variant("ataf");
  CHECK(ataf.base == BaseKind::StudentT);
  CHECK(ataf.clamp.kind == ClampMode::Kind::Tanh);
  CHECK(lookup_variant("symclip").clamp.kind == ClampMode::Kind::ArcTanSym);
  const auto p = lookup_variant("proposed-student-loft");
  CHECK(p.base == BaseKind::StudentT);
  CHECK(p.loft);
  CHECK(p.ordering == Ordering::Proposed);
  CHECK(p.clamp.alpha_neg == 2.0);
  CHECK(p.clamp.alpha_pos == 0.1);
  CHECK_FALSE(lookup_variant("proposed-gauss-noloft").loft);
  CHECK(lookup_variant("meanfield").meanfield);
  try {
    (void)lookup_variant("realnvp");
    FAIL("unknown variant must throw");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("proposed-gauss-loft") != std::string::npos);
  }
  ModelSpec bad;
  bad.name = "banana";
  CHECK_THROWS_AS(make_target(bad), UsageError);
}

TEST_CASE("targets built from model specs") {
  ModelSpec s;
  s.name = "horseshoe";
  s.dprime = 5;
  s.n = 30;
  CHECK(make_target(s)->dim() == 12);
  s.name = "conjlr";
  CHECK(make_target(s)->dim() == 6);
  CHECK(make_target(s)->true_log_marginal().has_value());
  s.name = "mvt";
  s.dim = 7;
  CHECK(make_target(s)->dim() == 7);
}

TEST_CASE("config JSON round trip yields the same plan") {
  ExperimentConfig c = tiny("conjlr", "proposed-gauss-noloft", 5);
  c.train.anneal = Annealing::geometric(20);
  c.train.gradient = GradientMode::Standard;
  c.train.snapshot = SnapshotMode::Last;
  c.tau = 50.0;
  const json j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.run_id() == c.run_id());
  CHECK(c.run_id() == "proposed-gauss-noloft_conjlr_dp3n20_r2_s5");
  json broken = j;
  broken["train"]["gradient"] = "sideways";
  CHECK_THROWS_AS(ExperimentConfig::from_json(broken), UsageError);
  broken = j;
  broken["train"]["anneal"] = "geometric:x";
  CHECK_THROWS_AS(ExperimentConfig::from_json(broken), UsageError);
  const auto paper = ExperimentConfig::paper();
  CHECK(paper.layers == 64);
  CHECK(paper.train.iterations == 60000);
  CHECK(paper.train.batch == 256);
}

TEST_CASE("run writes every artifact and they parse") {
  ExperimentConfig c = tiny("conjlr", "proposed-student-loft", 2);
  c.out = scratch("artifacts");
  const RunResult r = run_experiment(c, true);
  for (const char* f : {"config.json", "run.jsonl", "snapshot.bin", "report.json", "row.csv", "dataset.csv"}) {
    CHECK(fs::exists(c.out / f));
  }
  const json cfg = json::parse(slurp(c.out / "config.json"));
  CHECK(ExperimentConfig::from_json(cfg).to_json() == c.to_json());
  const json report = json::parse(slurp(c.out / "report.json"));
  CHECK(report["run_id"] == r.run_id);
  CHECK(report["true_log_marginal"].is_number());
  std::istringstream lines(slurp(c.out / "run.jsonl"));
  std::string line, last;
  while (std::getline(lines, line)) {
    (void)json::parse(line);
    last = line;
  }
  CHECK(json::parse(last).contains("summary"));
  const std::string row = slurp(c.out / "row.csv");
  CHECK(row.rfind(std::string(kCsvHeader) + "\n", 0) == 0);
  CHECK(row.find(r.csv) != std::string::npos);
  const auto reloaded = read_dataset_csv(c.out / "dataset.csv", DataKind::Regression);
  CHECK(reloaded.n() == 20);

  const SnapshotFile snap = load_snapshot(c.out / "snapshot.bin");
  CHECK(snap.meta["run_id"] == r.run_id);
  FlowModel fresh = make_model(c, r.dim, 999);
  apply_snapshot(snap, fresh);
  EvalConfig e = c.eval;
  const auto again = evaluate(fresh, *make_target(c.model), e);
  CHECK(again.elbo.mean == r.report.elbo.mean);
  fs::remove_all(c.out);
}

TEST_CASE("snapshot files reject corruption and mismatches") {
  const fs::path dir = scratch("snap");
  ExperimentConfig c = tiny("funnel", "standard", 1);
  FlowModel m = make_model(c, 4, 3);
  Rng rng(1);
  m.randomize(rng, 0.5);
  save_snapshot(dir / "s.bin", m, {{"k", 1}});
  const SnapshotFile f = load_snapshot(dir / "s.bin");
  CHECK(f.entries.size() == m.parameters().size());
  FlowModel other = make_model(c, 4, 4);
  apply_snapshot(f, other);
  const auto a = m.snapshot().values;
  const auto b = other.snapshot().values;
  CHECK(a == b);

  std::string bytes = slurp(dir / "s.bin");
  bytes[0] = 'X';
  std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
  CHECK_THROWS(load_snapshot(dir / "bad.bin"));
  std::ofstream(dir / "short.bin", std::ios::binary) << slurp(dir / "s.bin").substr(0, 40);
  CHECK_THROWS(load_snapshot(dir / "short.bin"));
  FlowModel wider = make_model(c, 6, 1);
  CHECK_THROWS(apply_snapshot(f, wider));
  fs::remove_all(dir);
}

TEST_CASE("identical seeds give identical CSV rows") {
  const auto a = run_experiment(tiny("mixture", "symclip", 3), false);
  const auto b = run_experiment(tiny("mixture", "symclip", 3), false);
  CHECK(a.csv == b.csv);
  const auto c = run_experiment(tiny("mixture", "symclip", 4), false);
  CHECK(a.csv != c.csv);
}

TEST_CASE("threaded sweep matches serial sweep row for row") {
  const fs::path dir = scratch("sweep");
  json defaults = tiny("funnel", "standard", 0).to_json();
  json runs = json::array();
  for (const char* v : {"standard", "ataf", "proposed-gauss-loft", "meanfield"}) {
    runs.push_back({{"variant", v}, {"train", {{"seed", 1}}}});
  }
  runs.push_back({{"variant", "nope"}});
  json manifest = {{"out", (dir / "serial").string()}, {"defaults", defaults}, {"runs", runs}};
  const auto serial = sweep(manifest, 1);
  manifest["out"] = (dir / "threaded").string();
  const auto threaded = sweep(manifest, 3);
  REQUIRE(serial.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(serial[i].ok == threaded[i].ok);
    if (serial[i].ok) CHECK(serial[i].result->csv == threaded[i].result->csv);
  }
  CHECK_FALSE(serial[4].ok);
  CHECK(slurp(dir / "serial" / "results.csv") == slurp(dir / "threaded" / "results.csv"));
  const json failures = json::parse(slurp(dir / "serial" / "failures.json"));
  CHECK(failures.size() == 1);
  for (const char* f : {"loss_curves.csv", "max_abs.csv", "elbo_vs_error.csv", "elbo_vs_error_rho.json",
                        "clamp.csv", "loft.csv"}) {
    CHECK(fs::exists(dir / "serial" / "figures" / f));
  }
  const json rho = json::parse(slurp(dir / "serial" / "figures" / "elbo_vs_error_rho.json"));
  CHECK(rho.contains("funnel"));
  fs::remove_all(dir);
}

TEST_CASE("function tabulations") {
  const fs::path dir = scratch("tables");
  write_clamp_table(dir / "clamp.csv", -20.0, 20.0, 401);
  write_loft_table(dir / "loft.csv", 2.0, -10.0, 10.0, 401);
  std::istringstream clamp(slurp(dir / "clamp.csv"));
  std::string line;
  std::getline(clamp, line);
  CHECK(line == "s,asymsoft_2_0.1,tanh,arctan_2");
  double prev = -2.0;
  std::size_t rows = 0;
  while (std::getline(clamp, line)) {
    const double v = std::stod(line.substr(line.find(',') + 1));
    CHECK(v > prev);
    CHECK(v < 0.1);
    prev = v;
    ++rows;
  }
  CHECK(rows == 401);
  std::istringstream loft(slurp(dir / "loft.csv"));
  std::getline(loft, line);
  while (std::getline(loft, line)) {
    const double z = std::stod(line);
    const double g = std::stod(line.substr(line.find(',') + 1));
    if (std::abs(z) <= 2.0) CHECK(g == doctest::Approx(z).epsilon(1e-9));
    else CHECK(std::abs(g) < std::abs(z));
  }
  CHECK(loft_value(2.0 + std::numbers::e - 1.0, 2.0) == doctest::Approx(3.0));
  fs::remove_all(dir);
}

TEST_CASE("command-line binary: errors are machine readable") {
  const fs::path dir = scratch("binary_errors");
  auto e = cli("run --variant nope --out " + (dir / "x").string(), dir);
  CHECK(e.code == 2);
  const json err = json::parse(e.err);
  CHECK(err["error"]["type"] == "usage");
  CHECK(std::string(err["error"]["message"]).find("proposed-student-loft") != std::string::npos);
  CHECK(cli("run --model banana", dir).code == 2);
  CHECK(cli("run --gradient sideways --dry-run", dir).code == 2);
  CHECK(cli("frobnicate", dir).code == 2);
  // an output path beneath a regular file cannot be created
  std::ofstream(dir / "file") << "x";
  const auto io = cli("run --model funnel --dim 2 --layers 1 --iters 2 --batch 2 --eval-samples 10 "
                      "--eval-repeats 2 --out " + (dir / "file" / "sub").string(), dir);
  CHECK(io.code != 0);
  CHECK(json::parse(io.err).contains("error"));
  CHECK(cli("sweep " + (dir / "missing.json").string(), dir).code == 3);
  fs::remove_all(dir);
}

TEST_CASE("command-line binary: dry run, generate and tabulate") {
  const fs::path dir = scratch("binary_misc");
  REQUIRE(cli("run --model conjlr --dprime 4 --seed 7 --anneal geometric:100 --dry-run", dir).code == 0);
  const json cfg = json::parse(slurp(dir / "stdout.txt"));
  CHECK(cfg["model"]["dprime"] == 4);
  CHECK(cfg["train"]["seed"] == 7);
  CHECK(cfg["model"]["data_seed"] == 7);
  CHECK(cfg["train"]["anneal"] == "geometric:100");
  REQUIRE(cli("generate --kind logistic --dprime 3 --n 12 --seed 1 --out " + (dir / "d.csv").string(), dir).code == 0);
  CHECK(read_dataset_csv(dir / "d.csv", DataKind::Logistic).n() == 12);
  REQUIRE(cli("tabulate --out " + (dir / "fig").string(), dir).code == 0);
  CHECK(fs::exists(dir / "fig" / "clamp.csv"));
  CHECK(fs::exists(dir / "fig" / "loft.csv"));
  fs::remove_all(dir);
}

TEST_CASE("command-line binary: documented funnel run writes parseable artifacts") {
  const fs::path dir = scratch("binary_run");
  const auto r = cli("run --model funnel --dim 10 --variant proposed-student-loft --layers 8 --iters 5000 --seed 1 "
                     "--eval-samples 4000 --eval-repeats 5 --out " + (dir / "run").string(), dir);
  REQUIRE(r.code == 0);
  for (const char* f : {"config.json", "report.json"}) (void)json::parse(slurp(dir / "run" / f));
  CHECK(load_snapshot(dir / "run" / "snapshot.bin").entries.size() > 0);
  CHECK(slurp(dir / "run" / "row.csv").find("proposed-student-loft_funnel_d10_r8_s1") != std::string::npos);
  std::istringstream lines(slurp(dir / "run" / "run.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    (void)json::parse(line);
    ++n;
  }
  CHECK(n == 5000 / 100 + 2);  // rows at every 100th iteration, the last iteration, then the summary
  const json report = json::parse(slurp(dir / "run" / "report.json"));
  CHECK(std::abs(report["log_marginal_is"]["mean"].get<double>()) < 0.5);
  fs::remove_all(dir);
}

TEST_CASE("command-line binary: conjugate regression log marginal near the closed form") {
  const fs::path dir = scratch("binary_conjlr");
  const auto r = cli("run --model conjlr --dprime 10 --n 100 --variant standard --seed 1 "
                     "--eval-samples 4000 --eval-repeats 5 --out " + (dir / "run").string(), dir);
  REQUIRE(r.code == 0);
  const json report = json::parse(slurp(dir / "run" / "report.json"));
  const double truth = report["true_log_marginal"].get<double>();
  CHECK(std::abs(report["log_marginal_is"]["mean"].get<double>() - truth) < 0.5);
  fs::remove_all(dir);
}
