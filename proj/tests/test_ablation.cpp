// Desk-scale depth ablation: more coupling layers should not hurt the ELBO.

#include <algorithm>
#include <filesystem>

#include "doctest.h"
#include "flowvi/experiment.hpp"

using namespace flowvi;
using nlohmann::json;

TEST_CASE("deeper proposed flows reach at least the shallow ELBO on the funnel") {
  const auto dir = std::filesystem::temp_directory_path() / "flowvi_depth_ablation";
  std::filesystem::remove_all(dir);
  ExperimentConfig base = ExperimentConfig::desk();
  base.model.name = "funnel";
  base.model.dim = 10;
  base.variant = "proposed-student-loft";
  base.eval.samples = 5000;
  base.eval.repeats = 5;
  json runs = json::array();
  for (std::size_t r : {4u, 8u}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      runs.push_back({{"layers", r}, {"train", {{"seed", seed}}}, {"eval", {{"seed", seed}}}});
    }
  }
  const json manifest = {{"out", dir.string()}, {"defaults", base.to_json()}, {"runs", runs}};
  const auto rows = sweep(manifest, worker_count_from_env());
  std::vector<double> shallow, deep;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].ok);
    (i < 5 ? shallow : deep).push_back(rows[i].result->report.elbo.mean);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  MESSAGE("median ELBO r=4: " << median(shallow) << ", r=8: " << median(deep));
  CHECK(median(deep) >= median(shallow));
  std::filesystem::remove_all(dir);
}
