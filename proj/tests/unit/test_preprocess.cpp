#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lungrisk/candidates.hpp"
#include "lungrisk/errors.hpp"
#include "lungrisk/preprocess.hpp"
#include "lungrisk/volume.hpp"

using namespace lungrisk;
namespace fs = std::filesystem;

namespace {

Volume random_volume(Index3 dims, Vec3 spacing, std::uint64_t seed) {
  Rng rng(seed);
  Volume v;
  v.voxels = Grid3(dims, 0.0f);
  v.spacing = spacing;
  v.origin = {-12.5, 4.0, 100.0};
  for (float& f : v.voxels.values) f = static_cast<float>(std::round(-1000 + 1400 * uniform01(rng)));
  return v;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lungrisk_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

NoduleCandidate candidate(double r, double conf, Vec3 c = {0, 0, 0}) {
  NoduleCandidate n;
  n.center = c;
  n.radius_mm = r;
  n.confidence = conf;
  return n;
}

}  // namespace

TEST_CASE("resample_isotropic") {
  SUBCASE("identity at 1 mm") {
    const Volume v = random_volume({7, 5, 6}, {1, 1, 1}, 1);
    CHECK(resample_isotropic(v) == v);
  }
  SUBCASE("constant volume at 2 mm doubles dims") {
    Volume v;
    v.voxels = Grid3({4, 3, 5}, 42.0f);
    v.spacing = {2, 2, 2};
    const Volume r = resample_isotropic(v);
    CHECK(r.dims() == Index3{8, 6, 10});
    CHECK(r.spacing == Vec3{1, 1, 1});
    for (float f : r.voxels.values) CHECK(f == 42.0f);
  }
  SUBCASE("z ramp at 2 mm") {
    Volume v;
    v.voxels = Grid3({1, 1, 3}, 0.0f);
    v.voxels.values = {0, 10, 20};
    v.spacing = {1, 1, 2};
    const Volume r = resample_isotropic(v);
    REQUIRE(r.dims() == Index3{1, 1, 6});
    // voxel z at 1 mm sits at source index z / 2
    CHECK(r.voxels.at(0, 0, 0) == 0.0f);
    CHECK(r.voxels.at(0, 0, 1) == 5.0f);
    CHECK(r.voxels.at(0, 0, 2) == 10.0f);
    CHECK(r.voxels.at(0, 0, 3) == 15.0f);
    CHECK(r.voxels.at(0, 0, 4) == 20.0f);
  }
  SUBCASE("nearest neighbour") {
    Volume v;
    v.voxels = Grid3({1, 1, 3}, 0.0f);
    v.voxels.values = {0, 10, 20};
    v.spacing = {1, 1, 2};
    const Volume r = resample_isotropic(v, Interpolation::Nearest);
    for (float f : r.voxels.values) CHECK((f == 0.0f || f == 10.0f || f == 20.0f));
  }
  SUBCASE("world position preserved") {
    Volume v = random_volume({5, 5, 5}, {0.7, 1.3, 2.5}, 2);
    const Volume r = resample_isotropic(v);
    CHECK(r.origin == v.origin);
    CHECK(r.dims() == Index3{4, 7, 13});
  }
  SUBCASE("bad spacing") {
    Volume v = random_volume({2, 2, 2}, {1, 0, 1}, 3);
    CHECK_THROWS_AS(resample_isotropic(v), FormatError);
  }
}

TEST_CASE("world/voxel round trip") {
  Rng rng(4);
  Volume v = random_volume({10, 10, 10}, {0.8, 1.0, 2.5}, 4);
  for (int i = 0; i < 100; ++i) {
    const Vec3 idx{std::floor(10 * uniform01(rng)), std::floor(10 * uniform01(rng)), std::floor(10 * uniform01(rng))};
    const Vec3 back = v.world_to_voxel(v.voxel_to_world(idx));
    for (int a = 0; a < 3; ++a) CHECK(std::abs(back[a] - idx[a]) < 0.5);
  }
}

TEST_CASE("extract_cube") {
  Volume v = random_volume({64, 64, 64}, {1, 1, 1}, 5);
  v.origin = {0, 0, 0};
  SUBCASE("interior copy") {
    const Grid3 c = extract_cube(v, {30, 31, 32});
    REQUIRE(c.dims == Index3{32, 32, 32});
    for (std::size_t z = 0; z < 32; ++z)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) CHECK(c.at(x, y, z) == v.voxels.at(14 + x, 15 + y, 16 + z));
  }
  SUBCASE("corner pads with air") {
    const Grid3 c = extract_cube(v, {0, 0, 0});
    std::size_t air = 0;
    for (std::size_t z = 0; z < 32; ++z)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          if (x < 16 || y < 16 || z < 16) {
            CHECK(c.at(x, y, z) == kAirHu);
            ++air;
          } else {
            CHECK(c.at(x, y, z) == v.voxels.at(x - 16, y - 16, z - 16));
          }
        }
    CHECK(air == 32 * 32 * 32 - 16 * 16 * 16);
  }
  SUBCASE("constant volume") {
    Volume k;
    k.voxels = Grid3({40, 40, 40}, 100.0f);
    const Grid3 c = extract_cube(k, {20, 20, 20});
    for (float f : c.values) CHECK(f == 100.0f);
  }
  SUBCASE("far outside") {
    CHECK_THROWS_AS(extract_cube(v, {-17, 10, 10}), OutOfBoundsError);
    CHECK_THROWS_AS(extract_cube(v, {10, 10, 64 + 16}), OutOfBoundsError);
    CHECK_NOTHROW(extract_cube(v, {-15, 10, 10}));
  }
  SUBCASE("requires 1 mm") {
    Volume a = v;
    a.spacing = {2, 2, 2};
    CHECK_THROWS_AS(extract_cube(a, {10, 10, 10}), FormatError);
  }
}

TEST_CASE("crop28") {
  Grid3 cube({32, 32, 32}, 0.0f);
  for (std::size_t i = 0; i < cube.size(); ++i) cube.values[i] = static_cast<float>(i);
  Rng rng(6);
  SUBCASE("inference crop is centred and deterministic") {
    const Grid3 a = crop28(cube, Mode::Infer, rng), b = crop28(cube, Mode::Infer, rng);
    CHECK(a == b);
    CHECK(a.dims == Index3{28, 28, 28});
    CHECK(a.at(0, 0, 0) == cube.at(2, 2, 2));
  }
  SUBCASE("corner marker excluded by the centre crop") {
    Grid3 marked({32, 32, 32}, 0.0f);
    marked.at(0, 0, 0) = 999.0f;
    const Grid3 c = crop28(marked, Mode::Infer, rng);
    for (float f : c.values) CHECK(f != 999.0f);
  }
  SUBCASE("train offsets reproducible and in range") {
    Rng r1(77), r2(77);
    bool saw_non_centre = false;
    for (int i = 0; i < 50; ++i) {
      const Index3 o1 = crop_offsets(Mode::Train, r1), o2 = crop_offsets(Mode::Train, r2);
      CHECK(o1 == o2);
      for (auto o : o1) CHECK(o <= 4);
      if (o1 != Index3{2, 2, 2}) saw_non_centre = true;
    }
    CHECK(saw_non_centre);
  }
  SUBCASE("wrong shape") { CHECK_THROWS_AS(crop28(Grid3({30, 32, 32}, 0.0f), Mode::Infer, rng), DimensionError); }
}

TEST_CASE("triplanar") {
  SUBCASE("constant cube") {
    const Tensor t = triplanar(Grid3({28, 28, 28}, 7.0f));
    CHECK(t.shape() == Shape{3, 28, 28});
    for (double v : t.values()) CHECK(v == 7.0);
  }
  SUBCASE("field depending on x only") {
    Grid3 c({28, 28, 28}, 0.0f);
    for (std::size_t z = 0; z < 28; ++z)
      for (std::size_t y = 0; y < 28; ++y)
        for (std::size_t x = 0; x < 28; ++x) c.at(x, y, z) = static_cast<float>(3 * x);
    const Tensor t = triplanar(c);
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t col = 0; col < 28; ++col) {
        CHECK(t.at(1, r, col) == 42.0);              // sagittal: x fixed at 14
        CHECK(t.at(0, r, col) == 3.0 * col);         // coronal shows the ramp
        CHECK(t.at(2, r, col) == 3.0 * col);         // transverse shows the ramp
      }
  }
  SUBCASE("swapping x and y swaps coronal and sagittal") {
    Rng rng(9);
    Grid3 c({28, 28, 28}, 0.0f), s({28, 28, 28}, 0.0f);
    for (float& f : c.values) f = static_cast<float>(uniform01(rng));
    for (std::size_t z = 0; z < 28; ++z)
      for (std::size_t y = 0; y < 28; ++y)
        for (std::size_t x = 0; x < 28; ++x) s.at(x, y, z) = c.at(y, x, z);
    const Tensor a = triplanar(c), b = triplanar(s);
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t col = 0; col < 28; ++col) {
        CHECK(b.at(0, r, col) == a.at(1, r, col));
        CHECK(b.at(1, r, col) == a.at(0, r, col));
        CHECK(b.at(2, r, col) == a.at(2, col, r));
      }
  }
  SUBCASE("maximum intensity projection") {
    Grid3 c({28, 28, 28}, -800.0f);
    c.at(3, 5, 7) = 60.0f;
    const Tensor t = triplanar(c, Projection::MaxIntensity);
    CHECK(t.at(0, 7, 3) == 60.0);
    CHECK(t.at(1, 7, 5) == 60.0);
    CHECK(t.at(2, 5, 3) == 60.0);
    CHECK(t.at(0, 0, 0) == -800.0);
  }
}

TEST_CASE("normalize_hu") {
  CHECK(normalize_hu(-1000.0) == 0.0);
  CHECK(normalize_hu(400.0) == 1.0);
  CHECK(normalize_hu(-300.0) == 0.5);
  CHECK(normalize_hu(2000.0) == 1.0);
  CHECK(normalize_hu(-3000.0) == 0.0);
}

TEST_CASE("select_top_nodules") {
  SUBCASE("twelve candidates") {
    std::vector<NoduleCandidate> c;
    for (int i = 0; i < 12; ++i) c.push_back(candidate(1.0 + (i * 7) % 12, 0.5));
    const auto top = select_top_nodules(c);
    REQUIRE(top.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(top[i].radius_mm == 12.0 - static_cast<double>(i));
  }
  SUBCASE("fewer than ten") {
    std::vector<NoduleCandidate> c{candidate(2, .1), candidate(5, .1), candidate(3, .1)};
    CHECK(select_top_nodules(c).size() == 3);
  }
  SUBCASE("ties by confidence then coordinates") {
    std::vector<NoduleCandidate> c{candidate(5.0, 0.4), candidate(5.0, 0.9), candidate(5.0, 0.4, {-1, 0, 0})};
    const auto top = select_top_nodules(c);
    CHECK(top[0].confidence == 0.9);
    CHECK(top[1].center[0] == -1.0);
  }
  SUBCASE("property: non-increasing radii, subset of input") {
    Rng rng(10);
    for (int rep = 0; rep < 100; ++rep) {
      std::vector<NoduleCandidate> c;
      const int n = uniform_int(rng, 0, 20);
      for (int i = 0; i < n; ++i) c.push_back(candidate(std::round(1 + 10 * uniform01(rng)), uniform01(rng)));
      const auto top = select_top_nodules(c);
      CHECK(top.size() == std::min<std::size_t>(10, c.size()));
      for (std::size_t i = 1; i < top.size(); ++i) CHECK(top[i - 1].radius_mm >= top[i].radius_mm);
      for (const auto& t : top) CHECK(std::find(c.begin(), c.end(), t) != c.end());
    }
  }
}

TEST_CASE("build_scan_example") {
  Volume v = random_volume({64, 64, 64}, {1, 1, 1}, 12);
  v.origin = {0, 0, 0};
  MetadataStats stats = compute_metadata_stats({}, 5);
  Rng rng(13);
  SUBCASE("zero candidates") {
    const ScanExample ex = build_scan_example("s0", v, {}, 0, Mode::Infer, rng, stats);
    CHECK(ex.patches.size() == 10);
    CHECK(ex.no_nodules());
    for (const auto& p : ex.patches) {
      CHECK(p.masked);
      for (double x : p.planes.values()) CHECK(x == 0.0);
      for (double x : p.metadata) CHECK(x == 0.0);
    }
  }
  SUBCASE("one candidate") {
    const ScanExample ex = build_scan_example("s1", v, {candidate(4, .8, {30, 30, 30})}, 1, Mode::Infer, rng, stats);
    CHECK(ex.unmasked_count() == 1);
    CHECK_FALSE(ex.patches[0].masked);
    CHECK(ex.patches[0].planes.shape() == Shape{3, 28, 28});
    for (double x : ex.patches[0].planes.values()) CHECK((x >= 0.0 && x <= 1.0));
    for (std::size_t i = 1; i < 10; ++i) CHECK(ex.patches[i].masked);
  }
  SUBCASE("inference is deterministic, training is seeded") {
    std::vector<NoduleCandidate> c{candidate(4, .8, {30, 30, 30}), candidate(6, .7, {20, 40, 25})};
    CHECK(build_scan_example("s", v, c, 1, Mode::Infer, rng, stats) ==
          build_scan_example("s", v, c, 1, Mode::Infer, rng, stats));
    Rng a(5), b(5);
    CHECK(build_scan_example("s", v, c, 1, Mode::Train, a, stats) ==
          build_scan_example("s", v, c, 1, Mode::Train, b, stats));
    const ScanExample ex = build_scan_example("s", v, c, 1, Mode::Infer, rng, stats);
    CHECK(ex.patches[0].metadata[0] == 6.0);  // largest first
  }
  SUBCASE("metadata is standardized with the supplied statistics") {
    MetadataStats s{{1, 2, 3, 4, 5}, {2, 2, 2, 2, 2}};
    const ScanExample ex = build_scan_example("s", v, {candidate(5, .5, {30, 31, 32})}, 0, Mode::Infer, rng, s);
    CHECK(ex.patches[0].metadata == std::vector<double>{2.0, 14.0, 14.0, 14.0, -2.25});
  }
  SUBCASE("sphericity required for six features") {
    PreprocessOptions opt;
    opt.metadata_dim = 6;
    CHECK_THROWS_AS(prepare_scan("s", v, {candidate(4, .5, {30, 30, 30})}, 0, opt), DataConsistencyError);
  }
  SUBCASE("output shape independent of candidate count") {
    for (int n = 0; n < 14; ++n) {
      std::vector<NoduleCandidate> c;
      for (int i = 0; i < n; ++i) c.push_back(candidate(1 + i, .5, {20.0 + i, 30, 30}));
      const ScanExample ex = build_scan_example("s", v, c, 0, Mode::Infer, rng, stats);
      CHECK(ex.patches.size() == 10);
      CHECK(ex.unmasked_count() == std::min(n, 10));
      for (const auto& p : ex.patches) CHECK(p.planes.shape() == Shape{3, 28, 28});
    }
  }
}

TEST_CASE("metadata stats") {
  const MetadataStats s = compute_metadata_stats({{1, 5}, {3, 5}}, 2);
  CHECK(s.mean == std::vector<double>{2, 5});
  CHECK(s.stddev == std::vector<double>{1, 1});
}

TEST_CASE("volume files") {
  const fs::path dir = temp_dir("volumes");
  const Volume v = random_volume({9, 7, 5}, {0.75, 0.75, 2.5}, 14);
  SUBCASE("lrvol round trip") {
    write_lrvol(dir / "a.lrvol", v);
    CHECK(fs::file_size(dir / "a.lrvol") == kLrvolHeaderBytes + 2 * 9 * 7 * 5);
    CHECK(read_volume(dir / "a.lrvol") == v);
  }
  SUBCASE("metaimage round trip") {
    write_metaimage(dir / "b.mhd", v, MetaElementType::Short);
    CHECK(read_volume(dir / "b.mhd") == v);
    write_metaimage(dir / "c.mhd", v, MetaElementType::Float);
    CHECK(read_volume(dir / "c.mhd") == v);
  }
  SUBCASE("bad files") {
    std::ofstream(dir / "bad.lrvol") << "NOTAVOLUME-----------------------------------------------------------------------";
    CHECK_THROWS_AS(read_volume(dir / "bad.lrvol"), FormatError);
    CHECK_THROWS_AS(read_volume(dir / "missing.lrvol"), IoError);
    CHECK_THROWS_AS(read_volume(dir / "x.nii"), FormatError);
    write_lrvol(dir / "t.lrvol", v);
    fs::resize_file(dir / "t.lrvol", 100);
    CHECK_THROWS_AS(read_volume(dir / "t.lrvol"), FormatError);
  }
}

TEST_CASE("candidate and label files") {
  const fs::path dir = temp_dir("csv");
  {
    std::ofstream f(dir / "cand.csv");
    f << "scan_id,x_mm,y_mm,z_mm,radius_mm,confidence,sphericity,lungrads\n"
      << "a,1,2,3,4.5,0.9,0.8,3\n"
      << "a,5,6,7,2,0.4,,\n"
      << "b,0,0,0,1,0.1,0.5,4\n";
  }
  const CandidateTable t = read_candidates(dir / "cand.csv");
  REQUIRE(t.at("a").size() == 2);
  CHECK(t.at("a")[0].lungrads_category == 3);
  CHECK_FALSE(t.at("a")[1].sphericity.has_value());
  write_candidates(dir / "out.csv", t, true, true);
  CHECK(read_candidates(dir / "out.csv") == t);

  {
    std::ofstream f(dir / "neg.csv");
    f << "scan_id,x_mm,y_mm,z_mm,radius_mm,confidence\na,1,2,3,-4,0.9\n";
  }
  CHECK_THROWS_AS(read_candidates(dir / "neg.csv"), FormatError);
  {
    std::ofstream f(dir / "nocol.csv");
    f << "scan_id,x_mm,y_mm,radius_mm,confidence\n";
  }
  CHECK_THROWS_AS(read_candidates(dir / "nocol.csv"), FormatError);

  {
    std::ofstream f(dir / "labels.csv");
    f << "scan_id,label\na,1\nb,0\n";
  }
  const LabelTable labels = read_labels(dir / "labels.csv");
  CHECK(labels.at("a") == 1);
  {
    std::ofstream f(dir / "badlabels.csv");
    f << "scan_id,label\na,2\n";
  }
  CHECK_THROWS_AS(read_labels(dir / "badlabels.csv"), FormatError);
}
