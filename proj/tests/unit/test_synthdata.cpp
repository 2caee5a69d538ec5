#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "lungrisk/errors.hpp"
#include "lungrisk/eval.hpp"
#include "lungrisk/synthdata.hpp"

using namespace lungrisk;

namespace {

PhantomSpec small_spec(std::size_t n, std::uint64_t seed) {
  PhantomSpec s;
  s.n_scans = n;
  s.seed = seed;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Long-axis length measured on the rendered volume: walk outward along x
// from the center until the intensity drops below the half-contrast level,
// interpolating between voxels.
double measured_x_extent(const Volume& v, const TruthNodule& n, double background, double level) {
  const Vec3 c = v.world_to_voxel(n.center);
  const double half = 0.5 * (background + level);
  auto sample = [&](double x) {
    // trilinear sample along the x line through the center
    const double fx = std::floor(x), fy = std::floor(c[1]), fz = std::floor(c[2]);
    const double tx = x - fx, ty = c[1] - fy, tz = c[2] - fz;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          acc += (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz) *
                 v.voxels.at(static_cast<std::size_t>(fx) + dx, static_cast<std::size_t>(fy) + dy,
                             static_cast<std::size_t>(fz) + dz);
    return acc;
  };
  double ends[2];
  for (int side = 0; side < 2; ++side) {
    const double dir = side ? 1.0 : -1.0;
    double x = c[0];
    while (sample(x + dir * 0.05) > half) x += dir * 0.05;
    ends[side] = x;
  }
  return (ends[1] - ends[0]) * v.spacing[0];
}

}  // namespace

TEST_CASE("spec validation") {
  PhantomSpec s = small_spec(10, 1);
  CHECK_NOTHROW(s.validate());
  s.prevalence = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec(10, 1);
  s.dims = {40, 96, 96};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec(10, 1);
  s.min_nodules = 3;
  s.max_nodules = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("intercept calibration hits the target prevalence") {
  for (double prev : {0.05, 0.2, 0.5}) {
    PhantomSpec s = small_spec(10, 1);
    s.prevalence = prev;
    CHECK(std::abs(expected_prevalence(s, calibrate_intercept(s)) - prev) < 1e-9);
  }
}

TEST_CASE("scans are deterministic and self-consistent") {
  const PhantomSpec s = small_spec(10, 5);
  const double b0 = calibrate_intercept(s);
  const PhantomScan a = generate_scan(s, 3, b0);
  const PhantomScan b = generate_scan(s, 3, b0);
  CHECK(a.volume == b.volume);
  CHECK(a.candidates == b.candidates);
  CHECK(a.label == b.label);
  CHECK_FALSE(generate_scan(s, 4, b0).volume == a.volume);

  for (std::size_t i = 0; i < 10; ++i) {
    const PhantomScan p = generate_scan(s, i, b0);
    bool any = false;
    double survive = 1.0;
    for (const TruthNodule& n : p.nodules) {
      any = any || n.malignant;
      survive *= 1 - n.malignancy_probability;
      for (int a = 0; a < 3; ++a) {
        CHECK(n.center[a] - p.volume.origin[a] >= kNoduleEdgeMarginMm);
        CHECK(p.volume.origin[a] + 96.0 - n.center[a] >= kNoduleEdgeMarginMm);
      }
      CHECK(n.upper_lobe == (n.center[2] >= 0.0));
    }
    CHECK(p.label == (any ? 1 : 0));
    CHECK(p.risk == doctest::Approx(1 - survive).epsilon(1e-14));
    REQUIRE(p.pancan.size() == p.nodules.size());
    for (const PanCanFeatures& f : p.pancan) CHECK(f.nodule_count == static_cast<int>(p.candidates.size()));
  }
}

TEST_CASE("prevalence and oracle separability for the documented seed") {
  const PhantomSpec s = small_spec(100, 20240101);
  const double b0 = calibrate_intercept(s);
  std::vector<double> risk;
  std::vector<int> label;
  for (std::size_t i = 0; i < s.n_scans; ++i) {
    const PhantomScan p = generate_scan(s, i, b0);
    risk.push_back(p.risk);
    label.push_back(p.label);
  }
  const int positives = static_cast<int>(std::count(label.begin(), label.end(), 1));
  CHECK(positives >= 9);
  CHECK(positives <= 32);
  CHECK(auc(risk, label) >= 0.90);
}

TEST_CASE("rendered long axes match the reported diameters") {
  const PhantomSpec s = small_spec(30, 9);
  const double b0 = calibrate_intercept(s);
  int measured = 0;
  for (std::size_t i = 0; i < s.n_scans; ++i) {
    const PhantomScan p = generate_scan(s, i, b0);
    for (std::size_t k = 0; k < p.nodules.size(); ++k) {
      const TruthNodule& n = p.nodules[k];
      if (n.spiculated) continue;  // spikes may lie on the measurement line
      const double level = n.type == NoduleType::Solid ? s.nodule_hu : -450.0;
      CHECK(std::abs(measured_x_extent(p.volume, n, s.background_hu, level) - p.pancan[k].diameter_mm) <= 1.0);
      ++measured;
    }
  }
  CHECK(measured > 20);
}

TEST_CASE("dataset files are byte-identical across runs and thread counts") {
  const auto root = std::filesystem::temp_directory_path() / "lungrisk_synth_test";
  std::filesystem::remove_all(root);
  const PhantomSpec s = small_spec(6, 77);
  const DatasetSummary a = write_dataset(s, root / "a", 1);
  const DatasetSummary b = write_dataset(s, root / "b", 3);
  CHECK(a.manifest == b.manifest);
  CHECK(a.manifest_hash == b.manifest_hash);
  for (const char* f : {"candidates.csv", "labels.csv", "pancan_features.csv", "volumes/scan0003.lrvol"})
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));

  const CandidateTable cands = read_candidates(root / "a" / "candidates.csv");
  const PanCanTable feats = read_pancan_features(root / "a" / "pancan_features.csv");
  std::size_t rows = 0;
  for (const auto& [id, list] : feats) {
    rows += list.size();
    CHECK(list.front().nodule_count == static_cast<int>(cands.at(id).size()));
  }
  CHECK(rows == a.nodules);
  CHECK(read_labels(root / "a" / "labels.csv").size() == 6);
  CHECK_NOTHROW(read_pancan_weights(root / "a" / "pancan_weights.txt"));
  CHECK(read_volume(root / "a" / "volumes" / "scan0000.lrvol").dims() == Index3{96, 96, 96});
  std::filesystem::remove_all(root);
}

TEST_CASE("generative PanCan weights reproduce nodule probabilities") {
  const PhantomSpec s = small_spec(5, 3);
  const double b0 = calibrate_intercept(s);
  const PanCanWeights w = generative_pancan_weights(s, b0);
  for (std::size_t i = 0; i < 5; ++i) {
    const PhantomScan p = generate_scan(s, i, b0);
    for (std::size_t k = 0; k < p.nodules.size(); ++k)
      CHECK(nodule_score(p.pancan[k], w) == doctest::Approx(p.nodules[k].malignancy_probability).epsilon(1e-12));
  }
  CHECK(lungrads_from_diameter(5.9) == 2);
  CHECK(lungrads_from_diameter(6.0) == 3);
  CHECK(lungrads_from_diameter(8.0) == 4);
}
