#include "flowvi/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace flowvi {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "snapshot files assume a little-endian host");

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

bool uses_dataset(const std::string& model) { return model == "conjlr" || model == "horseshoe"; }

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

GradientMode parse_gradient(const std::string& s) {
  if (s == "standard") return GradientMode::Standard;
  if (s == "path") return GradientMode::Path;
  throw UsageError("unknown gradient mode '" + s + "' (valid: standard, path)");
}

SnapshotMode parse_snapshot(const std::string& s) {
  if (s == "best") return SnapshotMode::LowestLossSecondHalf;
  if (s == "last") return SnapshotMode::Last;
  throw UsageError("unknown snapshot mode '" + s + "' (valid: best, last)");
}

Annealing parse_anneal(const std::string& s) {
  if (s == "off") return Annealing::off();
  const std::string prefix = "geometric:";
  if (s.rfind(prefix, 0) == 0) {
    const std::string rest = s.substr(prefix.size());
    std::size_t used = 0;
    unsigned long long steps = 0;
    try {
      steps = std::stoull(rest, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == rest.size() && !rest.empty() && steps > 0) return Annealing::geometric(steps);
  }
  throw UsageError("bad annealing '" + s + "' (valid: off, geometric:T with T > 0)");
}

template <typename T>
void read_if(const json& j, const char* key, T& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<T>();
}

}  // namespace

// ---- registry ---------------------------------------------------------------------------------

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "standard",           "ataf",                  "symclip",
      "proposed-gauss-loft", "proposed-student-loft", "proposed-gauss-noloft",
      "proposed-student-noloft", "meanfield"};
  return names;
}

const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names = {"funnel", "mvt",       "mixture",
                                                 "conjlr", "horseshoe", "stdnormal"};
  return names;
}

VariantInfo lookup_variant(const std::string& name, double alpha_neg, double alpha_pos) {
  VariantInfo v;
  v.name = name;
  if (name == "standard") return v;
  if (name == "ataf") {
    v.base = BaseKind::StudentT;
    v.clamp = ClampMode::tanh();
    return v;
  }
  if (name == "symclip") {
    v.clamp = ClampMode::arctan_sym(2.0);
    return v;
  }
  if (name == "meanfield") {
    v.meanfield = true;
    return v;
  }
  const std::string prefix = "proposed-";
  if (name.rfind(prefix, 0) == 0) {
    const std::string rest = name.substr(prefix.size());
    const std::map<std::string, std::pair<BaseKind, bool>> table = {
        {"gauss-loft", {BaseKind::Gaussian, true}},
        {"student-loft", {BaseKind::StudentT, true}},
        {"gauss-noloft", {BaseKind::Gaussian, false}},
        {"student-noloft", {BaseKind::StudentT, false}}};
    if (auto it = table.find(rest); it != table.end()) {
      v.base = it->second.first;
      v.loft = it->second.second;
      v.ordering = Ordering::Proposed;
      v.clamp = ClampMode::asym_soft(alpha_neg, alpha_pos);
      return v;
    }
  }
  throw UsageError("unknown variant '" + name + "' (valid: " + join(variant_names()) + ")");
}

std::optional<SyntheticDataset> model_dataset(const ModelSpec& spec) {
  if (!uses_dataset(spec.name)) return std::nullopt;
  const DataKind kind = spec.name == "conjlr" ? DataKind::Regression : DataKind::Logistic;
  if (spec.data) return read_dataset_csv(*spec.data, kind);
  return generate_synthetic(kind, spec.dprime, spec.n, spec.data_seed);
}

std::unique_ptr<TargetModel> make_target(const ModelSpec& spec) {
  if (spec.name == "funnel") return std::make_unique<FunnelTarget>(spec.dim);
  if (spec.name == "mvt") return std::make_unique<MultivariateTTarget>(spec.dim);
  if (spec.name == "mixture") return std::make_unique<GaussianMixtureTarget>(spec.dim);
  if (spec.name == "stdnormal") return std::make_unique<StandardNormalTarget>(spec.dim);
  if (spec.name == "conjlr") return std::make_unique<ConjugateLinearRegression>(*model_dataset(spec));
  if (spec.name == "horseshoe") return std::make_unique<HorseshoeLogistic>(*model_dataset(spec));
  throw UsageError("unknown model '" + spec.name + "' (valid: " + join(model_names()) + ")");
}

// ---- config ------------------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::desk() { return {}; }

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.layers = 64;
  c.train = TrainConfig{};
  return c;
}

std::string ExperimentConfig::run_id() const {
  std::string size = uses_dataset(model.name)
                         ? "dp" + std::to_string(model.dprime) + "n" + std::to_string(model.n)
                         : "d" + std::to_string(model.dim);
  return variant + "_" + model.name + "_" + size + "_r" + std::to_string(layers) + "_s" +
         std::to_string(train.seed);
}

void ExperimentConfig::validate() const {
  lookup_variant(variant, alpha_neg, alpha_pos);
  if (std::find(model_names().begin(), model_names().end(), model.name) == model_names().end()) {
    throw UsageError("unknown model '" + model.name + "' (valid: " + join(model_names()) + ")");
  }
  if (layers == 0 && variant != "meanfield") throw UsageError("--layers must be positive");
  if (hidden == 0) throw UsageError("hidden width must be positive");
  if (!(tau > 0.0)) throw UsageError("--tau must be positive");
  train.validate();
  eval.validate();
}

json ExperimentConfig::to_json() const {
  json j;
  j["model"] = {{"name", model.name},
                {"dim", model.dim},
                {"dprime", model.dprime},
                {"n", model.n},
                {"data", model.data ? json(model.data->string()) : json(nullptr)},
                {"data_seed", model.data_seed}};
  j["variant"] = variant;
  j["layers"] = layers;
  j["hidden"] = hidden;
  j["tau"] = tau;
  j["alpha_neg"] = alpha_neg;
  j["alpha_pos"] = alpha_pos;
  j["symclip_alpha"] = symclip_alpha;
  j["train"] = {{"gradient", to_string(train.gradient)},
                {"batch", train.batch},
                {"lr", train.learning_rate},
                {"iterations", train.iterations},
                {"anneal", train.anneal.describe()},
                {"snapshot", to_string(train.snapshot)},
                {"seed", train.seed},
                {"log_every", train.log_every}};
  j["eval"] = {{"samples", eval.samples},
               {"repeats", eval.repeats},
               {"projections", eval.projections},
               {"seed", eval.seed},
               {"chunk", eval.chunk}};
  j["out"] = out.string();
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c = desk();
  if (j.contains("model")) {
    const json& m = j.at("model");
    read_if(m, "name", c.model.name);
    read_if(m, "dim", c.model.dim);
    read_if(m, "dprime", c.model.dprime);
    read_if(m, "n", c.model.n);
    read_if(m, "data_seed", c.model.data_seed);
    if (m.contains("data") && !m.at("data").is_null()) c.model.data = m.at("data").get<std::string>();
  }
  read_if(j, "variant", c.variant);
  read_if(j, "layers", c.layers);
  read_if(j, "hidden", c.hidden);
  read_if(j, "tau", c.tau);
  read_if(j, "alpha_neg", c.alpha_neg);
  read_if(j, "alpha_pos", c.alpha_pos);
  read_if(j, "symclip_alpha", c.symclip_alpha);
  if (j.contains("train")) {
    const json& t = j.at("train");
    if (t.contains("gradient")) c.train.gradient = parse_gradient(t.at("gradient").get<std::string>());
    read_if(t, "batch", c.train.batch);
    read_if(t, "lr", c.train.learning_rate);
    read_if(t, "iterations", c.train.iterations);
    if (t.contains("anneal")) c.train.anneal = parse_anneal(t.at("anneal").get<std::string>());
    if (t.contains("snapshot")) c.train.snapshot = parse_snapshot(t.at("snapshot").get<std::string>());
    read_if(t, "seed", c.train.seed);
    read_if(t, "log_every", c.train.log_every);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    read_if(e, "samples", c.eval.samples);
    read_if(e, "repeats", c.eval.repeats);
    read_if(e, "projections", c.eval.projections);
    read_if(e, "seed", c.eval.seed);
    read_if(e, "chunk", c.eval.chunk);
  }
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  return c;
}

FlowModel make_model(const ExperimentConfig& config, std::size_t dim, std::uint64_t init_seed) {
  const VariantInfo v = lookup_variant(config.variant, config.alpha_neg, config.alpha_pos);
  if (v.meanfield) return make_meanfield(dim);
  FlowSpec spec;
  spec.dim = dim;
  spec.couplings = config.layers;
  spec.hidden = config.hidden;
  spec.clamp = config.variant == "symclip" ? ClampMode::arctan_sym(config.symclip_alpha) : v.clamp;
  spec.ordering = v.ordering;
  spec.loft = v.loft;
  spec.tau = config.tau;
  Rng rng(init_seed);
  BaseDistribution base =
      v.base == BaseKind::StudentT ? BaseDistribution::student_t(dim) : BaseDistribution::gaussian(dim);
  return FlowModel(std::move(base), spec, rng);
}

std::string csv_row(const ExperimentConfig& config, std::size_t dim, const EvalReport& report) {
  std::string row = config.run_id() + "," + config.variant + "," + config.model.name + "," +
                    std::to_string(dim) + "," + std::to_string(config.layers) + "," +
                    fmt(report.elbo.mean) + "," + fmt(report.elbo.std) + "," +
                    fmt(report.log_marginal.mean) + "," + fmt(report.log_marginal.std) + ",";
  if (report.swd) {
    row += fmt(report.swd->mean) + "," + fmt(report.swd->std);
  } else {
    row += ",";
  }
  return row;
}

RunResult run_experiment(const ExperimentConfig& config, bool write_files) {
  config.validate();
  const auto target = make_target(config.model);
  const std::size_t dim = target->dim();
  FlowModel model = make_model(config, dim, derive_seed(config.train.seed, 0x1417));

  RunResult result;
  result.run_id = config.run_id();
  result.dim = dim;
  result.record = train(config.train, model, *target);
  result.report = evaluate(model, *target, config.eval);
  result.csv = csv_row(config, dim, result.report);
  if (!write_files) return result;

  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + config.out.string() + ": " + ec.message());
  {
    auto out = open_out(config.out / "config.json");
    out << config.to_json().dump(2) << '\n';
  }
  if (uses_dataset(config.model.name) && !config.model.data) {
    write_dataset_csv(*model_dataset(config.model), config.out / "dataset.csv");
  }
  {
    auto out = open_out(config.out / "run.jsonl");
    result.record.write_jsonl(out);
  }
  json meta = {{"run_id", result.run_id}, {"variant", config.variant}, {"model", config.model.name},
               {"dim", dim}, {"layers", config.layers},
               {"selected", to_string(config.train.snapshot)},
               {"best_iteration", result.record.best_iteration ? json(*result.record.best_iteration)
                                                               : json(nullptr)}};
  save_snapshot(config.out / "snapshot.bin", model, meta);
  {
    json report = result.report.to_json();
    report["run_id"] = result.run_id;
    report["skipped_steps"] = result.record.skipped;
    auto out = open_out(config.out / "report.json");
    out << report.dump(2) << '\n';
  }
  {
    auto out = open_out(config.out / "row.csv");
    out << kCsvHeader << '\n' << result.csv << '\n';
  }
  return result;
}

// ---- snapshot files ------------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'V', 'S', 'N', 'A', 'P', '0', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error(path.string() + ": truncated snapshot");
  }
  return v;
}

std::string get_string(std::istream& in, std::size_t n, const fs::path& path) {
  if (n > (1u << 30)) throw std::runtime_error(path.string() + ": corrupt length field");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw std::runtime_error(path.string() + ": truncated snapshot");
  }
  return s;
}

}  // namespace

void save_snapshot(const fs::path& path, FlowModel& model, const json& meta) {
  auto out = open_out(path, std::ios::out | std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  const std::string m = meta.dump();
  put<std::uint64_t>(out, m.size());
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor->rank()));
    for (std::size_t d : p.tensor->shape()) put<std::uint64_t>(out, d);
    const auto v = p.tensor->values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

SnapshotFile load_snapshot(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error(path.string() + ": not a snapshot file");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw std::runtime_error(path.string() + ": unsupported snapshot version");
  SnapshotFile file;
  file.meta = json::parse(get_string(in, get<std::uint64_t>(in, path), path));
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 2) throw std::runtime_error(path.string() + ": rank > 2 in entry " + name);
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(get<std::uint64_t>(in, path));
      n *= shape.back();
    }
    std::vector<double> data(n);
    if (n && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw std::runtime_error(path.string() + ": truncated payload for " + name);
    }
    file.entries.emplace_back(std::move(name), Tensor(shape, std::move(data)));
  }
  return file;
}

void apply_snapshot(const SnapshotFile& file, FlowModel& model) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : file.entries) by_name[name] = &t;
  for (auto& p : model.parameters()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ContractViolation("snapshot lacks parameter " + p.name);
    if (!it->second->same_shape(*p.tensor)) throw ContractViolation("snapshot shape mismatch for " + p.name);
    *p.tensor = *it->second;
  }
}

// ---- sweeps -----------------------------------------------------------------------------------------

std::size_t worker_count_from_env() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FLOWVI_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return std::min<std::size_t>(static_cast<std::size_t>(v), hw);
    } catch (const std::exception&) {
    }
  }
  return hw;
}

std::vector<SweepRow> sweep(const json& manifest, std::size_t threads) {
  if (!manifest.contains("runs") || !manifest.at("runs").is_array()) {
    throw UsageError("manifest needs a \"runs\" array");
  }
  const fs::path out_dir = manifest.value("out", std::string("sweep"));
  const json defaults = manifest.value("defaults", json::object());
  const json& runs = manifest.at("runs");

  std::vector<SweepRow> rows(runs.size());
  std::vector<ExperimentConfig> configs(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    json merged = defaults;
    merged.merge_patch(runs[i]);
    try {
      configs[i] = ExperimentConfig::from_json(merged);
      configs[i].out = out_dir / configs[i].run_id();
      rows[i].run_id = configs[i].run_id();
    } catch (const std::exception& e) {
      rows[i].run_id = "run" + std::to_string(i);
      rows[i].error = e.what();
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      if (!rows[i].error.empty()) continue;
      try {
        rows[i].result = run_experiment(configs[i], true);
        rows[i].ok = true;
      } catch (const std::exception& e) {
        rows[i].error = e.what();
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(threads, rows.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }

  fs::create_directories(out_dir);
  const fs::path fig = out_dir / "figures";
  fs::create_directories(fig);
  {
    auto out = open_out(out_dir / "results.csv");
    out << kCsvHeader << ",status\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].ok) {
        out << rows[i].result->csv << ",ok\n";
      } else {
        out << rows[i].run_id << "," << configs[i].variant << "," << configs[i].model.name
            << ",,," << "nan,nan,nan,nan,,,failed\n";
      }
    }
  }
  {
    json failures = json::array();
    for (const auto& r : rows) {
      if (!r.ok) failures.push_back({{"run_id", r.run_id}, {"error", r.error}});
    }
    auto out = open_out(out_dir / "failures.json");
    out << failures.dump(2) << '\n';
  }
  {
    auto loss = open_out(fig / "loss_curves.csv");
    auto trace = open_out(fig / "max_abs.csv");
    loss << "run-id,iteration,loss\n";
    trace << "run-id,iteration,layer,max_abs\n";
    for (const auto& r : rows) {
      if (!r.ok) continue;
      const RunRecord& rec = r.result->record;
      for (std::size_t t = 0; t < rec.losses.size(); ++t) {
        loss << r.run_id << ',' << t << ',' << fmt(rec.losses[t]) << '\n';
      }
      for (const auto& row : rec.trace) {
        for (std::size_t l : rec.traced) {
          if (l - 1 < row.coupling_max_abs.size()) {
            trace << r.run_id << ',' << row.iteration << ',' << l << ',' << fmt(row.coupling_max_abs[l - 1])
                  << '\n';
          }
        }
      }
    }
  }
  {
    auto scatter = open_out(fig / "elbo_vs_error.csv");
    scatter << "run-id,model,elbo,is_error\n";
    std::map<std::string, std::vector<EvalReport>> by_model;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i].ok || !rows[i].result->report.true_log_marginal) continue;
      const EvalReport& rep = rows[i].result->report;
      scatter << rows[i].run_id << ',' << configs[i].model.name << ',' << fmt(rep.elbo.mean) << ','
              << fmt(rep.log_marginal.mean - *rep.true_log_marginal) << '\n';
      if (std::isfinite(rep.elbo.mean) && std::isfinite(rep.log_marginal.mean)) {
        by_model[configs[i].model.name].push_back(rep);
      }
    }
    json rho = json::object();
    for (const auto& [model, reps] : by_model) {
      if (reps.size() < 3) continue;
      const auto c = elbo_vs_error_correlation(reps, 10000, 0);
      rho[model] = {{"points", reps.size()},
                    {"signed_error", {{"rho", c.signed_error.rho}, {"ci95", {c.signed_error.lower, c.signed_error.upper}}}},
                    {"neg_abs_error", {{"rho", c.neg_abs_error.rho}, {"ci95", {c.neg_abs_error.lower, c.neg_abs_error.upper}}}}};
    }
    auto out = open_out(fig / "elbo_vs_error_rho.json");
    out << rho.dump(2) << '\n';
  }
  write_clamp_table(fig / "clamp.csv", -20.0, 20.0, 401);
  write_loft_table(fig / "loft.csv", 2.0, -10.0, 10.0, 401);
  return rows;
}

void write_clamp_table(const fs::path& path, double lo, double hi, std::size_t points) {
  if (points < 2) throw ContractViolation("tabulation needs at least 2 points");
  const ClampMode modes[] = {ClampMode::asym_soft(2.0, 0.1), ClampMode::tanh(), ClampMode::arctan_sym(2.0)};
  auto out = open_out(path);
  out << "s,asymsoft_2_0.1,tanh,arctan_2\n";
  for (std::size_t i = 0; i < points; ++i) {
    const double s = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    out << fmt(s);
    for (const auto& m : modes) out << ',' << fmt(clamp_value(s, m));
    out << '\n';
  }
}

void write_loft_table(const fs::path& path, double tau, double lo, double hi, std::size_t points) {
  if (points < 2) throw ContractViolation("tabulation needs at least 2 points");
  auto out = open_out(path);
  out << "z,loft\n";
  for (std::size_t i = 0; i < points; ++i) {
    const double z = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    out << fmt(z) << ',' << fmt(loft_value(z, tau)) << '\n';
  }
}

}  // namespace flowvi
