#include "lungrisk/synthdata.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "lungrisk/byte_io.hpp"
#include "lungrisk/csv.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/ops.hpp"
#include "lungrisk/preprocess.hpp"
#include "lungrisk/rng.hpp"

namespace lungrisk {

namespace {

constexpr double kEdgeWidthMm = 0.5;
constexpr double kSpikeEdgeMm = 0.3;
constexpr double kGroundGlassHu = -450.0;

double extent_mm(const PhantomSpec& s, int axis) { return static_cast<double>(s.dims[axis]) * s.spacing_mm; }

bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

}  // namespace

void PhantomSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("phantom spec: " + m); };
  if (n_scans == 0) fail("n_scans must be at least 1");
  if (!(prevalence > 0.0 && prevalence < 1.0)) fail("prevalence must lie strictly between 0 and 1");
  if (!(spacing_mm > 0.0)) fail("spacing must be positive");
  if (min_nodules < 1 || max_nodules < min_nodules || max_nodules > static_cast<int>(kMaxNodules))
    fail("nodule count range must satisfy 1 <= min <= max <= 10");
  if (!(min_diameter_mm > 0.0) || max_diameter_mm < min_diameter_mm) fail("diameter range is invalid");
  if (noise_sigma_hu < 0.0) fail("noise sigma must be non-negative");
  for (double p : {spiculation_probability, upper_lobe_probability})
    if (!(p >= 0.0 && p <= 1.0)) fail("probabilities must lie in [0, 1]");
  for (int a = 0; a < 3; ++a) {
    // centers need the edge margin on both sides plus room for one nodule
    const double need = 2.0 * kNoduleEdgeMarginMm + max_diameter_mm;
    if (extent_mm(*this, a) < need)
      fail("volume extent " + format_double(extent_mm(*this, a)) + " mm on axis " + std::to_string(a) +
           " is too small for " + format_double(max_diameter_mm) + " mm nodules (need " + format_double(need) + " mm)");
  }
}

std::string PhantomSpec::to_text() const {
  std::ostringstream os;
  os << "n_scans = " << n_scans << '\n'
     << "prevalence = " << format_double(prevalence) << '\n'
     << "dims = " << dims[0] << 'x' << dims[1] << 'x' << dims[2] << '\n'
     << "spacing_mm = " << format_double(spacing_mm) << '\n'
     << "nodules_per_scan = " << min_nodules << ".." << max_nodules << '\n'
     << "diameter_mm = " << format_double(min_diameter_mm) << ".." << format_double(max_diameter_mm) << '\n'
     << "noise_sigma_hu = " << format_double(noise_sigma_hu) << '\n'
     << "seed = " << seed << '\n'
     << "background_hu = " << format_double(background_hu) << '\n'
     << "nodule_hu = " << format_double(nodule_hu) << '\n'
     << "spiculation_probability = " << format_double(spiculation_probability) << '\n'
     << "upper_lobe_probability = " << format_double(upper_lobe_probability) << '\n'
     << "size_coef = " << format_double(size_coef) << '\n'
     << "size_ref_mm = " << format_double(size_ref_mm) << '\n'
     << "spic_coef = " << format_double(spic_coef) << '\n'
     << "upper_coef = " << format_double(upper_coef) << '\n';
  return os.str();
}

// --- generative rule ------------------------------------------------------------

namespace {

double diameter_from_uniform(const PhantomSpec& s, double u) {
  return s.min_diameter_mm + (s.max_diameter_mm - s.min_diameter_mm) * u * u;
}

double malignancy_logit(const PhantomSpec& s, double intercept, double d, bool spic, bool upper) {
  return intercept + s.size_coef * (d - s.size_ref_mm) + s.spic_coef * (spic ? 1.0 : 0.0) +
         s.upper_coef * (upper ? 1.0 : 0.0);
}

}  // namespace

double expected_prevalence(const PhantomSpec& s, double intercept) {
  // E[1 - p] over the nodule distribution, midpoint rule in u
  constexpr int kGrid = 4000;
  double q = 0.0;
  for (int i = 0; i < kGrid; ++i) {
    const double d = diameter_from_uniform(s, (i + 0.5) / kGrid);
    for (int spic = 0; spic < 2; ++spic)
      for (int upper = 0; upper < 2; ++upper) {
        const double w = (spic ? s.spiculation_probability : 1.0 - s.spiculation_probability) *
                         (upper ? s.upper_lobe_probability : 1.0 - s.upper_lobe_probability);
        q += w * (1.0 - sigmoid(malignancy_logit(s, intercept, d, spic, upper)));
      }
  }
  q /= kGrid;
  double none = 0.0;
  for (int n = s.min_nodules; n <= s.max_nodules; ++n) none += std::pow(q, n);
  return 1.0 - none / static_cast<double>(s.max_nodules - s.min_nodules + 1);
}

double calibrate_intercept(const PhantomSpec& s) {
  s.validate();
  double lo = -80.0, hi = 80.0;
  if (expected_prevalence(s, lo) > s.prevalence || expected_prevalence(s, hi) < s.prevalence)
    throw NumericError("cannot reach prevalence " + format_double(s.prevalence) + " with this generative rule");
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (expected_prevalence(s, mid) < s.prevalence ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

PanCanWeights generative_pancan_weights(const PhantomSpec& s, double intercept) {
  PanCanWeights w;
  w.intercept = intercept - s.size_coef * s.size_ref_mm;
  for (const std::string& k : PanCanWeights::required_keys(NoduleType::Solid)) w.weights[k] = 0.0;
  w.weights["diameter_mm"] = s.size_coef;
  w.weights["spiculation"] = s.spic_coef;
  w.weights["upper_lobe"] = s.upper_coef;
  return w;
}

int lungrads_from_diameter(double d) {
  if (d < 6.0) return 2;
  if (d < 8.0) return 3;
  return 4;
}

std::string phantom_scan_id(const PhantomSpec& s, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return s.id_prefix + buf;
}

// --- rendering ---------------------------------------------------------------------

namespace {

struct Spike {
  Vec3 from, to;  // world mm
};

Vec3 random_direction(Rng& rng) {
  for (;;) {
    const Vec3 v{normal01(rng), normal01(rng), normal01(rng)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-9) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Ellipsoid radius along unit direction u.
double radius_along(const Vec3& axes, const Vec3& u) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) s += (u[a] / axes[a]) * (u[a] / axes[a]);
  return 1.0 / std::sqrt(s);
}

double soft_step(double signed_distance, double width) { return 1.0 / (1.0 + std::exp(signed_distance / width)); }

double segment_distance(const Vec3& p, const Spike& s, double& t) {
  Vec3 ab, ap;
  double len2 = 0.0, dot = 0.0;
  for (int a = 0; a < 3; ++a) {
    ab[a] = s.to[a] - s.from[a];
    ap[a] = p[a] - s.from[a];
    len2 += ab[a] * ab[a];
    dot += ab[a] * ap[a];
  }
  t = std::clamp(dot / len2, 0.0, 1.0);
  double d2 = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double r = ap[a] - t * ab[a];
    d2 += r * r;
  }
  return std::sqrt(d2);
}

void render_nodule(Volume& v, const TruthNodule& n, const std::vector<Spike>& spikes, const PhantomSpec& s) {
  const double core = n.type == NoduleType::Nonsolid ? kGroundGlassHu : s.nodule_hu;
  const double halo = n.type == NoduleType::Solid ? s.nodule_hu : kGroundGlassHu;
  double reach = n.semi_axes[0];
  for (const Spike& sp : spikes)
    for (int a = 0; a < 3; ++a) reach = std::max(reach, std::abs(sp.to[a] - n.center[a]));
  reach += 3.0;
  const Vec3 lo = v.world_to_voxel({n.center[0] - reach, n.center[1] - reach, n.center[2] - reach});
  const Vec3 hi = v.world_to_voxel({n.center[0] + reach, n.center[1] + reach, n.center[2] + reach});
  const Index3& dims = v.dims();
  std::size_t from[3], to[3];
  for (int a = 0; a < 3; ++a) {
    from[a] = static_cast<std::size_t>(std::clamp(std::floor(lo[a]), 0.0, static_cast<double>(dims[a] - 1)));
    to[a] = static_cast<std::size_t>(std::clamp(std::ceil(hi[a]), 0.0, static_cast<double>(dims[a] - 1)));
  }
  for (std::size_t z = from[2]; z <= to[2]; ++z)
    for (std::size_t y = from[1]; y <= to[1]; ++y)
      for (std::size_t x = from[0]; x <= to[0]; ++x) {
        const Vec3 p = v.voxel_to_world({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
        const Vec3 rel{p[0] - n.center[0], p[1] - n.center[1], p[2] - n.center[2]};
        const double dist = std::sqrt(rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]);
        double body = 1.0, inner = 1.0;
        if (dist > 1e-12) {
          const Vec3 u{rel[0] / dist, rel[1] / dist, rel[2] / dist};
          const double r = radius_along(n.semi_axes, u);
          body = soft_step(dist - r, kEdgeWidthMm);
          inner = soft_step(dist - 0.5 * r, kEdgeWidthMm);
        }
        double spike = 0.0;
        for (const Spike& sp : spikes) {
          double t = 0.0;
          const double d = segment_distance(p, sp, t);
          spike = std::max(spike, soft_step(d - (0.9 - 0.6 * t), kSpikeEdgeMm));
        }
        // part-solid: solid inner half inside a ground-glass halo
        const double level = n.type == NoduleType::PartSolid ? halo + (core - halo) * inner : core;
        const double w = std::max(body, spike);
        float& voxel = v.voxels.at(x, y, z);
        voxel = static_cast<float>(voxel + (level - s.background_hu) * w);
      }
}

NoduleType draw_type(Rng& rng) {
  const double u = uniform01(rng);
  if (u < 0.8) return NoduleType::Solid;
  if (u < 0.92) return NoduleType::PartSolid;
  return NoduleType::Nonsolid;
}

}  // namespace

PhantomScan generate_scan(const PhantomSpec& s, std::size_t index, double intercept) {
  s.validate();
  const std::uint64_t scan_seed = derive_seed(s.seed, static_cast<std::uint64_t>(index));
  Rng layout(derive_seed(scan_seed, "layout"));
  Rng noise(derive_seed(scan_seed, "noise"));
  Rng outcome(derive_seed(scan_seed, "malignancy"));
  Rng detector(derive_seed(scan_seed, "candidates"));
  Rng patient(derive_seed(scan_seed, "demographics"));

  PhantomScan scan;
  scan.scan_id = phantom_scan_id(s, index);
  Volume& v = scan.volume;
  v.spacing = {s.spacing_mm, s.spacing_mm, s.spacing_mm};
  // centered on the world origin; +z is toward the head
  for (int a = 0; a < 3; ++a) v.origin[a] = -0.5 * extent_mm(s, a);
  v.voxels = Grid3(s.dims, static_cast<float>(s.background_hu));
  for (float& x : v.voxels.values) x = static_cast<float>(s.background_hu + s.noise_sigma_hu * normal01(noise));

  const int count = uniform_int(layout, s.min_nodules, s.max_nodules);
  std::vector<std::vector<Spike>> spikes;
  for (int k = 0; k < count; ++k) {
    TruthNodule n;
    n.diameter_mm = diameter_from_uniform(s, uniform01(layout));
    const double rx = n.diameter_mm / 2.0;
    n.semi_axes = {rx, rx * (0.75 + 0.25 * uniform01(layout)), rx * (0.75 + 0.25 * uniform01(layout))};
    n.spiculated = bernoulli(layout, s.spiculation_probability);
    n.upper_lobe = bernoulli(layout, s.upper_lobe_probability);
    n.type = draw_type(layout);
    const double spike_room = n.spiculated ? 2.0 * rx : rx;
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Vec3 c;
      for (int a = 0; a < 3; ++a) {
        const double lo = v.origin[a] + kNoduleEdgeMarginMm, hi = v.origin[a] + extent_mm(s, a) - kNoduleEdgeMarginMm;
        double l = lo, h = hi;
        if (a == 2) (n.upper_lobe ? l : h) = 0.5 * (lo + hi);
        c[a] = l + (h - l) * uniform01(layout);
      }
      placed = true;
      for (std::size_t j = 0; j < scan.nodules.size() && placed; ++j) {
        const TruthNodule& o = scan.nodules[j];
        const double other_room = o.spiculated ? 2.0 * o.semi_axes[0] : o.semi_axes[0];
        const double dx = c[0] - o.center[0], dy = c[1] - o.center[1], dz = c[2] - o.center[2];
        placed = std::sqrt(dx * dx + dy * dy + dz * dz) > spike_room + other_room + 2.0;
      }
      if (placed) n.center = c;
    }
    if (!placed) throw ConfigError("phantom spec: could not place " + std::to_string(count) + " non-overlapping nodules");

    std::vector<Spike> sp;
    if (n.spiculated) {
      const int n_spikes = uniform_int(layout, 6, 10);
      for (int i = 0; i < n_spikes; ++i) {
        const Vec3 u = random_direction(layout);
        const double r = radius_along(n.semi_axes, u);
        const double len = r * (0.5 + 0.5 * uniform01(layout));
        Spike spike;
        for (int a = 0; a < 3; ++a) {
          spike.from[a] = n.center[a] + u[a] * 0.8 * r;
          spike.to[a] = n.center[a] + u[a] * (r + len);
        }
        sp.push_back(spike);
      }
    }
    spikes.push_back(std::move(sp));

    n.malignancy_probability = sigmoid(malignancy_logit(s, intercept, n.diameter_mm, n.spiculated, n.upper_lobe));
    n.malignant = bernoulli(outcome, n.malignancy_probability);
    scan.nodules.push_back(n);
  }
  for (std::size_t k = 0; k < scan.nodules.size(); ++k) render_nodule(v, scan.nodules[k], spikes[k], s);

  double survive = 1.0;
  for (const TruthNodule& n : scan.nodules) {
    survive *= 1.0 - n.malignancy_probability;
    if (n.malignant) scan.label = 1;
  }
  scan.risk = 1.0 - survive;

  PanCanFeatures person;
  person.age = std::round(55.0 + 20.0 * uniform01(patient));
  person.sex = bernoulli(patient, 0.5) ? Sex::Male : Sex::Female;
  person.family_history = bernoulli(patient, 0.15);
  person.emphysema = bernoulli(patient, 0.3);
  person.nodule_count = count;

  const double span = s.max_diameter_mm - s.min_diameter_mm;
  for (const TruthNodule& n : scan.nodules) {
    NoduleCandidate c;
    for (int a = 0; a < 3; ++a) c.center[a] = n.center[a] + 0.5 * normal01(detector);
    c.radius_mm = std::max(0.5 * n.diameter_mm / 2.0, n.diameter_mm / 2.0 * (1.0 + 0.05 * normal01(detector)));
    const double size_rank = span > 0.0 ? (n.diameter_mm - s.min_diameter_mm) / span : 0.5;
    c.confidence = std::clamp(0.55 + 0.35 * size_rank + 0.08 * normal01(detector), 0.05, 0.99);
    const double round = (n.semi_axes[1] + n.semi_axes[2]) / (2.0 * n.semi_axes[0]);
    c.sphericity = std::clamp(round - (n.spiculated ? 0.15 : 0.0) + 0.03 * normal01(detector), 0.05, 1.0);
    c.lungrads_category = lungrads_from_diameter(n.diameter_mm);
    scan.candidates.push_back(c);

    PanCanFeatures f = person;
    f.diameter_mm = n.diameter_mm;
    f.nodule_type = n.type;
    f.upper_lobe = n.upper_lobe;
    f.spiculation = n.spiculated;
    scan.pancan.push_back(f);
  }
  return scan;
}

// --- dataset on disk -----------------------------------------------------------------

namespace {

struct ScanRecord {
  std::string scan_id;
  int label = 0;
  double risk = 0.0;
  std::vector<TruthNodule> nodules;
  std::vector<NoduleCandidate> candidates;
  std::vector<PanCanFeatures> pancan;
};

std::uint32_t file_crc(const std::filesystem::path& p, std::size_t& size) {
  const auto bytes = read_file_bytes(p);
  size = bytes.size();
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

DatasetSummary write_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir, std::size_t threads,
                             const std::function<void(std::size_t)>& progress) {
  spec.validate();
  const double intercept = calibrate_intercept(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  std::vector<ScanRecord> records(spec.n_scans);
  std::vector<std::exception_ptr> errors(spec.n_scans);
  std::atomic<std::size_t> next{0}, done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < spec.n_scans; i = next++) {
      try {
        PhantomScan scan = generate_scan(spec, i, intercept);
        write_lrvol(out_dir / "volumes" / (scan.scan_id + ".lrvol"), scan.volume);
        records[i] = {scan.scan_id, scan.label, scan.risk, std::move(scan.nodules), std::move(scan.candidates),
                      std::move(scan.pancan)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
      const std::size_t d = ++done;
      if (progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        progress(d);
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, spec.n_scans);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  DatasetSummary summary;
  summary.n_scans = spec.n_scans;
  summary.intercept = intercept;
  CandidateTable candidates;
  LabelTable labels;
  PanCanTable pancan;
  std::string truth_scans = "scan_id,label,risk,nodules\n";
  std::string truth_nodules =
      "scan_id,nodule,x_mm,y_mm,z_mm,diameter_mm,semi_x_mm,semi_y_mm,semi_z_mm,spiculated,upper_lobe,nodule_type,"
      "malignancy_probability,malignant\n";
  for (const ScanRecord& r : records) {
    candidates[r.scan_id] = r.candidates;
    labels[r.scan_id] = r.label;
    pancan[r.scan_id] = r.pancan;
    summary.positives += static_cast<std::size_t>(r.label);
    summary.nodules += r.nodules.size();
    truth_scans += r.scan_id + "," + std::to_string(r.label) + "," + format_double(r.risk) + "," +
                   std::to_string(r.nodules.size()) + "\n";
    for (std::size_t k = 0; k < r.nodules.size(); ++k) {
      const TruthNodule& n = r.nodules[k];
      truth_nodules += r.scan_id + "," + std::to_string(k) + "," + format_double(n.center[0]) + "," +
                       format_double(n.center[1]) + "," + format_double(n.center[2]) + "," +
                       format_double(n.diameter_mm) + "," + format_double(n.semi_axes[0]) + "," +
                       format_double(n.semi_axes[1]) + "," + format_double(n.semi_axes[2]) + "," +
                       std::to_string(n.spiculated) + "," + std::to_string(n.upper_lobe) + "," + to_string(n.type) +
                       "," + format_double(n.malignancy_probability) + "," + std::to_string(n.malignant) + "\n";
    }
  }
  write_candidates(out_dir / "candidates.csv", candidates, true, true);
  write_labels(out_dir / "labels.csv", labels);
  write_pancan_features(out_dir / "pancan_features.csv", pancan);
  write_pancan_weights(out_dir / "pancan_weights.txt", generative_pancan_weights(spec, intercept));
  write_text_file(out_dir / "ground_truth_scans.csv", truth_scans);
  write_text_file(out_dir / "ground_truth_nodules.csv", truth_nodules);

  std::ostringstream m;
  m << "# lungrisk synthetic dataset\n"
    << spec.to_text() << "intercept = " << format_double(intercept) << '\n'
    << "scans = " << summary.n_scans << '\n'
    << "positives = " << summary.positives << '\n'
    << "observed_prevalence = " << format_fixed(static_cast<double>(summary.positives) / summary.n_scans, 4) << '\n'
    << "nodules = " << summary.nodules << '\n';
  std::vector<std::filesystem::path> files{"candidates.csv",        "labels.csv",
                                           "pancan_features.csv",   "pancan_weights.txt",
                                           "ground_truth_scans.csv", "ground_truth_nodules.csv"};
  for (const ScanRecord& r : records) files.push_back(std::filesystem::path("volumes") / (r.scan_id + ".lrvol"));
  for (const auto& f : files) {
    std::size_t size = 0;
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", file_crc(out_dir / f, size));
    m << "file " << crc << ' ' << size << ' ' << f.generic_string() << '\n';
  }
  summary.manifest = m.str();
  summary.manifest_hash = hash_string(summary.manifest);
  write_text_file(out_dir / "manifest.txt", summary.manifest);
  return summary;
}

}  // namespace lungrisk
