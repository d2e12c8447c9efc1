#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "tdl/camera.hpp"
#include "tdl/data.hpp"
#include "tdl/world.hpp"

using namespace tdl;
namespace fs = std::filesystem;

TEST_CASE("normalize maps the frame corners to the unit square") {
  CHECK(data::normalize({0.0, 0.0}, 224, 224)[0] == doctest::Approx(-1.0));
  CHECK(data::normalize({223.0, 223.0}, 224, 224)[0] == doctest::Approx(1.0));
  CHECK(data::normalize({111.5, 111.5}, 224, 224)[1] == doctest::Approx(0.0));
  for (double u : {0.0, 17.3, 111.5, 223.0}) {
    const auto p = data::normalize({u, 223.0 - u}, 224, 224);
    const auto back = data::denormalize(p, 224, 224);
    CHECK(back[0] == doctest::Approx(u).epsilon(1e-12));
    CHECK(back[1] == doctest::Approx(223.0 - u).epsilon(1e-12));
  }
}

TEST_CASE("resample_fixed spaces points uniformly by arc length") {
  // straight segment: resampled points must be the linear interpolation
  const std::vector<cam::Pixel> line{{0.0, 0.0}, {10.0, 0.0}};
  const auto r = data::resample_fixed(line, 5);
  REQUIRE(r.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(r[i][0] == doctest::Approx(10.0 * i / 4.0).epsilon(1e-12));
    CHECK(r[i][1] == doctest::Approx(0.0));
  }

  // L-shaped path, legs 3 and 1: arc-length positions 0,1,2,3,4 of total 4
  const std::vector<cam::Pixel> ell{{0, 0}, {3, 0}, {3, 1}};
  const auto q = data::resample_fixed(ell, 5);
  CHECK(q[0][0] == doctest::Approx(0.0));
  CHECK(q[1][0] == doctest::Approx(1.0));
  CHECK(q[2][0] == doctest::Approx(2.0));
  CHECK(q[3][0] == doctest::Approx(3.0));
  CHECK(q[3][1] == doctest::Approx(0.0));
  CHECK(q[4][0] == doctest::Approx(3.0));
  CHECK(q[4][1] == doctest::Approx(1.0));

  // arc-length spacing ignores how densely the polyline is sampled
  const std::vector<cam::Pixel> uneven{{0, 0}, {0.1, 0}, {10, 0}};
  const auto u = data::resample_fixed(uneven, 5);
  for (int i = 0; i < 5; ++i)
    CHECK(u[i][0] == doctest::Approx(10.0 * i / 4.0).epsilon(1e-9));
}

TEST_CASE("resample_fixed endpoints, degenerate paths and errors") {
  const std::vector<cam::Pixel> single{{4.0, 7.0}};
  const auto r = data::resample_fixed(single, data::kTrajectoryPoints);
  for (const auto& p : r) {
    CHECK(p[0] == 4.0);
    CHECK(p[1] == 7.0);
  }
  const std::vector<cam::Pixel> stuck{{4.0, 7.0}, {4.0, 7.0}};
  for (const auto& p : data::resample_fixed(stuck, 8)) CHECK(p[0] == 4.0);
  CHECK_THROWS_AS(data::resample_fixed({}, 4), data::DataError);
  CHECK_THROWS_AS(data::resample_fixed(single, 1), data::DataError);
}

TEST_CASE("label_trajectory anchors the projected suffix path") {
  const auto camera = cam::default_camera();
  data::Demonstration demo;
  demo.steps.resize(6);
  for (int t = 0; t < 6; ++t)
    demo.steps[t].ee = {0.3 + 0.06 * t, 0.2 + 0.04 * t, 0.1};
  for (int anchor : {0, 3, 5}) {
    const auto traj = data::label_trajectory(demo, camera, anchor);
    CHECK(traj.anchor == anchor);
    const auto first = data::normalize(
        cam::project(demo.steps[anchor].ee, camera), 224, 224);
    const auto last =
        data::normalize(cam::project(demo.steps[5].ee, camera), 224, 224);
    CHECK(traj.points.front()[0] == doctest::Approx(first[0]).epsilon(1e-9));
    CHECK(traj.points.front()[1] == doctest::Approx(first[1]).epsilon(1e-9));
    CHECK(traj.points.back()[0] == doctest::Approx(last[0]).epsilon(1e-9));
    CHECK(traj.points.back()[1] == doctest::Approx(last[1]).epsilon(1e-9));
    for (const auto& p : traj.points) {
      CHECK(p[0] >= -1.0);
      CHECK(p[0] <= 1.0);
    }
  }
  CHECK_THROWS_AS(data::label_trajectory(demo, camera, 6), data::DataError);
  CHECK_THROWS_AS(data::label_trajectory(demo, camera, -1), data::DataError);
}

TEST_CASE("label_trajectory counts out-of-frame points as clamped") {
  auto camera = cam::default_camera();
  data::Demonstration demo;
  demo.steps.resize(4);
  // walk far past the table edge so the projection leaves the frame
  for (int t = 0; t < 4; ++t) demo.steps[t].ee = {0.5 + 1.5 * t, 0.3, 0.1};
  data::LabelStats stats;
  const auto traj = data::label_trajectory(demo, camera, 0, &stats);
  CHECK(stats.total_points == 2 * data::kTrajectoryPoints);
  CHECK(stats.clamped_points > 0);
  for (const auto& p : traj.points) {
    CHECK(p[0] <= 1.0);
    CHECK(p[0] >= -1.0);
  }
}

TEST_CASE("record_demo produces a successful, consistent episode") {
  const auto camera = cam::default_camera();
  const world::TaskSpec task{world::TaskKind::place_block_in_zone, 0};
  auto demo = data::record_demo(task, 3, 1, camera);
  REQUIRE(demo.has_value());
  CHECK(demo->length() >= 2);
  CHECK(demo->length() <= 201);
  // replay: applying the recorded actions reproduces the recorded states
  auto s = world::reset(3, task, 1);
  for (int t = 0; t < demo->length(); ++t) {
    const auto& rec = demo->steps[t];
    CHECK(rec.state[0] == doctest::Approx(s.gx));
    CHECK(rec.state[1] == doctest::Approx(s.gy));
    CHECK(rec.state[2] == doctest::Approx(s.gz));
    CHECK(rec.ee[0] == doctest::Approx(s.gx));
    if (t + 1 < demo->length()) {
      world::Action a{rec.action[0], rec.action[1], rec.action[2],
                      rec.action[3] > 0.5};
      s = world::step(s, a);
    }
  }
  CHECK(world::success(s, task));
  // the final record carries a zero displacement
  const auto& fin = demo->steps.back();
  CHECK(fin.action[0] == 0.0);
  CHECK(fin.action[1] == 0.0);
  CHECK(fin.action[2] == 0.0);
}

TEST_CASE("record_demo reports failure with a reason") {
  const auto camera = cam::default_camera();
  std::string reason;
  const auto demo = data::record_demo(
      {world::TaskKind::place_block_in_zone, 0}, 3, 1, camera, &reason, 3);
  CHECK_FALSE(demo.has_value());
  CHECK(reason.find("3 steps") != std::string::npos);
}

TEST_CASE("dataset round-trips episodes bit-exactly") {
  const auto camera = cam::default_camera();
  const std::string path = "roundtrip_dataset.bin";
  std::vector<data::Demonstration> demos;
  for (int k = 0; k < 3; ++k) {
    world::TaskSpec task;
    task.kind = static_cast<world::TaskKind>(k * 2);
    task.color = k == 0 ? 1 : -1;
    auto d = data::record_demo(task, 10 + k, k, camera);
    REQUIRE(d.has_value());
    demos.push_back(std::move(*d));
  }
  {
    data::DatasetWriter writer(path, camera);
    for (const auto& d : demos) writer.add(d);
    writer.finalize();
  }
  CHECK(fs::exists(path + ".json"));
  auto ds = data::Dataset::open(path);
  REQUIRE(ds.count() == 3);
  CHECK(ds.manifest().camera.fx == camera.fx);
  CHECK(ds.manifest().vocab == world::vocabulary());
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& meta = ds.manifest().episodes[i];
    CHECK(meta.task == demos[i].task);
    CHECK(meta.layout_id == demos[i].layout_id);
    CHECK(static_cast<int>(meta.length) == demos[i].length());
    const auto loaded = ds.load_episode(i);
    for (int t = 0; t < demos[i].length(); ++t) {
      CHECK(loaded.steps[t].obs.data == demos[i].steps[t].obs.data);
      CHECK(loaded.steps[t].state == demos[i].steps[t].state);
      CHECK(loaded.steps[t].action == demos[i].steps[t].action);
      CHECK(loaded.steps[t].ee == demos[i].steps[t].ee);
    }
    // random access agrees with sequential access
    const auto rec = ds.load_step(i, demos[i].length() - 1);
    CHECK(rec.ee == demos[i].steps.back().ee);
  }
  CHECK_THROWS_AS(ds.load_step(0, 9999), data::DataError);
  CHECK_THROWS_AS(ds.load_step(99, 0), data::DataError);
  fs::remove(path);
  fs::remove(path + ".json");
}

TEST_CASE("dataset reader distinguishes corruption modes") {
  const auto camera = cam::default_camera();
  const std::string path = "corrupt_dataset.bin";
  {
    data::DatasetWriter writer(path, camera);
    auto d = data::record_demo({world::TaskKind::switch_on, -1}, 5, 0, camera);
    REQUIRE(d.has_value());
    writer.add(*d);
    writer.finalize();
  }

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXXXXXX", 8);
    f.close();
    try {
      data::Dataset::open(path);
      FAIL("expected DataError");
    } catch (const data::DataError& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.close();
    try {
      data::Dataset::open(path);
      FAIL("expected DataError");
    } catch (const data::DataError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("unfinalized file") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);
    const std::uint64_t zero = 0;
    f.write(reinterpret_cast<const char*>(&zero), 8);
    f.close();
    CHECK_THROWS_AS(data::Dataset::open(path), data::DataError);
  }
  SUBCASE("truncation is detected and names the episode") {
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 40);
    try {
      data::Dataset::open(path);
      FAIL("expected DataError");
    } catch (const data::DataError& e) {
      CHECK(std::string(e.what()).find("truncat") != std::string::npos);
    }
  }
  fs::remove(path);
  fs::remove(path + ".json");
}

namespace {

data::DatasetManifest fake_manifest(int per_layout) {
  data::DatasetManifest m;
  for (int layout = 0; layout < world::kNumLayouts; ++layout)
    for (int i = 0; i < per_layout; ++i) {
      data::EpisodeMeta e;
      e.layout_id = layout;
      e.length = 10;
      m.episodes.push_back(e);
    }
  return m;
}

}  // namespace

TEST_CASE("unseen split trains on layouts 0-2 and tests on layout 3") {
  const auto m = fake_manifest(10);
  const auto s = data::split(m, {data::SplitScheme::unseen, 0.1}, 1);
  CHECK(s.train.size() == 30);
  CHECK(s.test.size() == 10);
  for (auto id : s.train) CHECK(m.episodes[id].layout_id != 3);
  for (auto id : s.test) CHECK(m.episodes[id].layout_id == 3);
}

TEST_CASE("seen split is a deterministic 80/20 partition of layout 3") {
  const auto m = fake_manifest(10);
  const auto s1 = data::split(m, {data::SplitScheme::seen, 0.1}, 7);
  const auto s2 = data::split(m, {data::SplitScheme::seen, 0.1}, 7);
  CHECK(s1.train == s2.train);
  CHECK(s1.test == s2.test);
  CHECK(s1.train.size() == 8);
  CHECK(s1.test.size() == 2);
  std::set<std::size_t> seen;
  for (auto id : s1.train) {
    CHECK(m.episodes[id].layout_id == 3);
    seen.insert(id);
  }
  for (auto id : s1.test) {
    CHECK(m.episodes[id].layout_id == 3);
    CHECK_FALSE(seen.count(id));
  }
  const auto s3 = data::split(m, {data::SplitScheme::seen, 0.1}, 8);
  CHECK(s3.train != s1.train);  // different seed reshuffles
}

TEST_CASE("fraction split subsamples the seen training set") {
  const auto m = fake_manifest(50);  // 40 train episodes after the 80/20 cut
  const auto full = data::split(m, {data::SplitScheme::seen, 0.1}, 3);
  const auto frac = data::split(m, {data::SplitScheme::fraction, 0.1}, 3);
  CHECK(frac.test == full.test);
  CHECK(frac.train.size() == 4);
  for (auto id : frac.train)
    CHECK(std::find(full.train.begin(), full.train.end(), id) !=
          full.train.end());
}

TEST_CASE("split rejects an empty dataset") {
  data::DatasetManifest empty;
  CHECK_THROWS_AS(data::split(empty, {data::SplitScheme::seen, 0.1}, 1),
                  data::DataError);
}
