// flowvi: train, evaluate and sweep flow variants from the command line.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "flowvi/experiment.hpp"

using nlohmann::json;
namespace fv = flowvi;

namespace {

int fail(const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << '\n';
  return code;
}

struct RunFlags {
  std::string preset = "desk";
  std::string model, variant, gradient, anneal, snapshot, out, data;
  std::size_t dim = 0, dprime = 0, n = 0, layers = 0, iters = 0, batch = 0, hidden = 0;
  std::size_t eval_samples = 0, eval_repeats = 0, projections = 0, log_every = 0;
  std::uint64_t seed = 0, data_seed = 0;
  double lr = 0, tau = 0, alpha_neg = 0, alpha_pos = 0;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--preset", f.preset, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--model", f.model, "funnel | mvt | mixture | conjlr | horseshoe | stdnormal");
  cmd->add_option("--dim", f.dim, "dimension for funnel/mvt/mixture/stdnormal");
  cmd->add_option("--dprime", f.dprime, "covariate count for conjlr/horseshoe");
  cmd->add_option("--n", f.n, "observations for generated data");
  cmd->add_option("--variant", f.variant);
  cmd->add_option("--layers", f.layers, "coupling layers r");
  cmd->add_option("--hidden", f.hidden, "conditioner width");
  cmd->add_option("--iters", f.iters);
  cmd->add_option("--batch", f.batch);
  cmd->add_option("--lr", f.lr);
  cmd->add_option("--seed", f.seed, "training, evaluation and (by default) data seed");
  cmd->add_option("--data-seed", f.data_seed);
  cmd->add_option("--gradient", f.gradient, "standard | path");
  cmd->add_option("--anneal", f.anneal, "off | geometric:T");
  cmd->add_option("--snapshot", f.snapshot, "best | last");
  cmd->add_option("--tau", f.tau, "LOFT threshold");
  cmd->add_option("--alpha-neg", f.alpha_neg);
  cmd->add_option("--alpha-pos", f.alpha_pos);
  cmd->add_option("--eval-samples", f.eval_samples);
  cmd->add_option("--eval-repeats", f.eval_repeats);
  cmd->add_option("--projections", f.projections);
  cmd->add_option("--log-every", f.log_every);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--data", f.data, "CSV dataset (x_1..x_d,y) instead of generated data");
}

fv::ExperimentConfig resolve(const CLI::App* cmd, const RunFlags& f) {
  json j = (f.preset == "paper" ? fv::ExperimentConfig::paper() : fv::ExperimentConfig::desk()).to_json();
  auto given = [&](const char* name) { return cmd->count(name) > 0; };
  if (given("--model")) j["model"]["name"] = f.model;
  if (given("--dim")) j["model"]["dim"] = f.dim;
  if (given("--dprime")) j["model"]["dprime"] = f.dprime;
  if (given("--n")) j["model"]["n"] = f.n;
  if (given("--data")) j["model"]["data"] = f.data;
  if (given("--seed")) {
    j["train"]["seed"] = f.seed;
    j["eval"]["seed"] = f.seed;
    j["model"]["data_seed"] = f.seed;
  }
  if (given("--data-seed")) j["model"]["data_seed"] = f.data_seed;
  if (given("--variant")) j["variant"] = f.variant;
  if (given("--layers")) j["layers"] = f.layers;
  if (given("--hidden")) j["hidden"] = f.hidden;
  if (given("--tau")) j["tau"] = f.tau;
  if (given("--alpha-neg")) j["alpha_neg"] = f.alpha_neg;
  if (given("--alpha-pos")) j["alpha_pos"] = f.alpha_pos;
  if (given("--iters")) j["train"]["iterations"] = f.iters;
  if (given("--batch")) j["train"]["batch"] = f.batch;
  if (given("--lr")) j["train"]["lr"] = f.lr;
  if (given("--gradient")) j["train"]["gradient"] = f.gradient;
  if (given("--anneal")) j["train"]["anneal"] = f.anneal;
  if (given("--snapshot")) j["train"]["snapshot"] = f.snapshot;
  if (given("--log-every")) j["train"]["log_every"] = f.log_every;
  if (given("--eval-samples")) j["eval"]["samples"] = f.eval_samples;
  if (given("--eval-repeats")) j["eval"]["repeats"] = f.eval_repeats;
  if (given("--projections")) j["eval"]["projections"] = f.projections;
  if (given("--out")) j["out"] = f.out;
  auto config = fv::ExperimentConfig::from_json(j);
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow variational inference experiments"};
  app.require_subcommand(1);

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "train, evaluate and write artifacts for one configuration");
  add_run_flags(run, run_flags);
  bool dry_run = false;
  run->add_flag("--dry-run", dry_run, "print the resolved config and exit");

  std::string manifest_path;
  std::size_t threads = 0;
  auto* sweep = app.add_subcommand("sweep", "run every configuration of a manifest");
  sweep->add_option("manifest", manifest_path, "manifest JSON")->required();
  sweep->add_option("--threads", threads, "worker cap (default FLOWVI_THREADS or hardware)");

  std::string tab_out = "figures";
  double tab_tau = 2.0;
  auto* tabulate = app.add_subcommand("tabulate", "write clamp and LOFT function tables");
  tabulate->add_option("--out", tab_out);
  tabulate->add_option("--tau", tab_tau);

  std::string gen_kind = "regression", gen_out = "dataset.csv";
  std::size_t gen_d = 10, gen_n = 100;
  std::uint64_t gen_seed = 0;
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset as CSV");
  generate->add_option("--kind", gen_kind)->check(CLI::IsMember({"regression", "logistic"}));
  generate->add_option("--dprime", gen_d);
  generate->add_option("--n", gen_n);
  generate->add_option("--seed", gen_seed);
  generate->add_option("--out", gen_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*run) {
      const auto config = resolve(run, run_flags);
      if (dry_run) {
        std::cout << config.to_json().dump(2) << '\n';
        return 0;
      }
      const auto result = fv::run_experiment(config, true);
      std::cout << fv::kCsvHeader << '\n' << result.csv << '\n';
    } else if (*sweep) {
      std::ifstream in(manifest_path);
      if (!in) return fail("io", "cannot read manifest " + manifest_path, 3);
      const json manifest = json::parse(in);
      const std::size_t workers = threads ? threads : fv::worker_count_from_env();
      const auto rows = fv::sweep(manifest, workers);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += r.ok ? 0 : 1;
      std::cout << json{{"runs", rows.size()}, {"failed", failed}}.dump() << '\n';
      return failed ? 4 : 0;
    } else if (*tabulate) {
      std::filesystem::create_directories(tab_out);
      fv::write_clamp_table(std::filesystem::path(tab_out) / "clamp.csv", -20.0, 20.0, 401);
      fv::write_loft_table(std::filesystem::path(tab_out) / "loft.csv", tab_tau, -10.0, 10.0, 401);
    } else if (*generate) {
      const auto kind = gen_kind == "logistic" ? fv::DataKind::Logistic : fv::DataKind::Regression;
      fv::write_dataset_csv(fv::generate_synthetic(kind, gen_d, gen_n, gen_seed), gen_out);
    }
  } catch (const fv::UsageError& e) {
    return fail("usage", e.what(), 2);
  } catch (const json::exception& e) {
    return fail("usage", e.what(), 2);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("io", e.what(), 3);
  } catch (const fv::ContractViolation& e) {
    return fail("contract", e.what(), 2);
  } catch (const fv::DomainError& e) {
    return fail("domain", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
