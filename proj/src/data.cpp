#include "tdl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "json.hpp"

namespace tdl::data {

namespace {

constexpr char kMagic[8] = {'T', 'D', 'L', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kRasterFloats = static_cast<std::size_t>(
    world::Observation::kChannels * world::Observation::kSize *
    world::Observation::kSize);
constexpr std::size_t kStepBytes = kRasterFloats * 4 + (4 + 4 + 3) * 8;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("dataset: truncated reading " + what);
  return v;
}

void write_camera(std::ostream& os, const cam::CameraParams& c) {
  write_pod(os, c.fx);
  write_pod(os, c.fy);
  write_pod(os, c.cx);
  write_pod(os, c.cy);
  for (double r : c.rotation) write_pod(os, r);
  for (double t : c.translation) write_pod(os, t);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.width));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.height));
}

cam::CameraParams read_camera(std::istream& is) {
  cam::CameraParams c;
  c.fx = read_pod<double>(is, "camera");
  c.fy = read_pod<double>(is, "camera");
  c.cx = read_pod<double>(is, "camera");
  c.cy = read_pod<double>(is, "camera");
  for (double& r : c.rotation) r = read_pod<double>(is, "camera");
  for (double& t : c.translation) t = read_pod<double>(is, "camera");
  c.width = static_cast<int>(read_pod<std::uint32_t>(is, "camera"));
  c.height = static_cast<int>(read_pod<std::uint32_t>(is, "camera"));
  return c;
}

}  // namespace

std::array<double, 2> normalize(const cam::Pixel& px, int width, int height) {
  return {2.0 * px[0] / (width - 1) - 1.0, 2.0 * px[1] / (height - 1) - 1.0};
}

cam::Pixel denormalize(const std::array<double, 2>& p, int width, int height) {
  return {(p[0] + 1.0) * (width - 1) / 2.0, (p[1] + 1.0) * (height - 1) / 2.0};
}

std::vector<cam::Pixel> resample_fixed(const std::vector<cam::Pixel>& path,
                                       int n) {
  if (path.empty()) throw DataError("resample_fixed: empty path");
  if (n < 2) throw DataError("resample_fixed: need at least 2 output points");
  std::vector<cam::Pixel> out(static_cast<std::size_t>(n));
  std::vector<double> cum(path.size(), 0.0);
  for (std::size_t i = 1; i < path.size(); ++i)
    cum[i] = cum[i - 1] + std::hypot(path[i][0] - path[i - 1][0],
                                     path[i][1] - path[i - 1][1]);
  const double total = cum.back();
  if (path.size() == 1 || total == 0.0) {
    std::fill(out.begin(), out.end(), path[0]);
    out.back() = path.back();
    return out;
  }
  std::size_t seg = 0;
  for (int i = 0; i < n; ++i) {
    const double s = total * i / (n - 1);
    while (seg + 2 < path.size() && cum[seg + 1] < s) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double t = seg_len > 0 ? (s - cum[seg]) / seg_len : 0.0;
    out[i] = {path[seg][0] + t * (path[seg + 1][0] - path[seg][0]),
              path[seg][1] + t * (path[seg + 1][1] - path[seg][1])};
  }
  out.front() = path.front();
  out.back() = path.back();
  return out;
}

Trajectory2D label_trajectory(const Demonstration& demo,
                              const cam::CameraParams& camera, int t,
                              LabelStats* stats) {
  if (t < 0 || t >= demo.length())
    throw DataError("label_trajectory: step " + std::to_string(t) +
                    " out of range [0," + std::to_string(demo.length()) + ")");
  std::vector<cam::Vec3> pts;
  pts.reserve(demo.steps.size() - t);
  for (int i = t; i < demo.length(); ++i) pts.push_back(demo.steps[i].ee);
  const auto pixels = cam::project_path(pts, camera);
  const auto fixed = resample_fixed(pixels, kTrajectoryPoints);
  Trajectory2D traj;
  traj.anchor = t;
  for (int i = 0; i < kTrajectoryPoints; ++i) {
    auto p = normalize(fixed[i], camera.width, camera.height);
    if (stats) {
      stats->total_points += 2;
      if (p[0] < -1 || p[0] > 1) ++stats->clamped_points;
      if (p[1] < -1 || p[1] > 1) ++stats->clamped_points;
    }
    traj.points[i] = {std::clamp(p[0], -1.0, 1.0), std::clamp(p[1], -1.0, 1.0)};
  }
  return traj;
}

std::optional<Demonstration> record_demo(const world::TaskSpec& task,
                                         std::uint64_t seed, int layout_id,
                                         const cam::CameraParams& camera,
                                         std::string* fail_reason,
                                         int max_steps) {
  Demonstration demo;
  demo.task = task;
  demo.seed = seed;
  demo.layout_id = layout_id;
  world::WorldState s = world::reset(seed, task, layout_id);
  for (int t = 0; t < max_steps; ++t) {
    const world::Action a = world::expert_action(s, task);
    StepRecord rec;
    rec.obs = world::render_features(s, camera);
    rec.state = {s.gx, s.gy, s.gz, s.gripper_closed ? 1.0 : 0.0};
    rec.action = {a.dx, a.dy, a.dz, a.close ? 1.0 : 0.0};
    rec.ee = s.gripper();
    demo.steps.push_back(std::move(rec));
    s = world::step(s, a);
    if (world::success(s, task)) {
      StepRecord fin;
      fin.obs = world::render_features(s, camera);
      fin.state = {s.gx, s.gy, s.gz, s.gripper_closed ? 1.0 : 0.0};
      fin.action = {0.0, 0.0, 0.0, s.gripper_closed ? 1.0 : 0.0};
      fin.ee = s.gripper();
      demo.steps.push_back(std::move(fin));
      return demo;
    }
  }
  if (fail_reason)
    *fail_reason = "expert did not reach success within " +
                   std::to_string(max_steps) + " steps on '" +
                   task.instruction() + "' (seed " + std::to_string(seed) +
                   ", layout " + std::to_string(layout_id) + ")";
  return std::nullopt;
}

// ---------------------------------------------------------------- writing

DatasetWriter::DatasetWriter(const std::string& path,
                             const cam::CameraParams& camera)
    : path_(path), os_(path, std::ios::binary) {
  if (!os_) throw DataError("dataset: cannot open for write: " + path);
  manifest_.version = kVersion;
  manifest_.camera = camera;
  manifest_.vocab = world::vocabulary();
  os_.write(kMagic, 8);
  write_pod<std::uint32_t>(os_, kVersion);
  write_pod<std::uint64_t>(os_, 0);  // index offset, patched in finalize()
  write_camera(os_, camera);
  write_pod<std::uint32_t>(os_, kTrajectoryPoints);
  write_pod<std::uint32_t>(os_,
                           static_cast<std::uint32_t>(manifest_.vocab.size()));
  for (const auto& w : manifest_.vocab) {
    write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(w.size()));
    os_.write(w.data(), static_cast<std::streamsize>(w.size()));
  }
}

void DatasetWriter::add(const Demonstration& demo) {
  if (finalized_) throw DataError("dataset: add after finalize");
  EpisodeMeta meta;
  meta.offset = static_cast<std::uint64_t>(os_.tellp());
  meta.length = static_cast<std::uint32_t>(demo.steps.size());
  meta.task = demo.task;
  meta.layout_id = demo.layout_id;
  meta.seed = demo.seed;
  for (const auto& st : demo.steps) {
    os_.write(reinterpret_cast<const char*>(st.obs.data.data()),
              static_cast<std::streamsize>(kRasterFloats * 4));
    for (double v : st.state) write_pod(os_, v);
    for (double v : st.action) write_pod(os_, v);
    for (double v : st.ee) write_pod(os_, v);
  }
  if (!os_) throw DataError("dataset: write failed for " + path_);
  metas_.push_back(meta);
}

void DatasetWriter::finalize() {
  if (finalized_) return;
  const auto index_offset = static_cast<std::uint64_t>(os_.tellp());
  write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(metas_.size()));
  for (const auto& m : metas_) {
    write_pod(os_, m.offset);
    write_pod(os_, m.length);
    write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(m.task.kind));
    write_pod<std::int32_t>(os_, m.task.color);
    write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(m.layout_id));
    write_pod(os_, m.seed);
  }
  os_.seekp(12);
  write_pod(os_, index_offset);
  os_.flush();
  if (!os_) throw DataError("dataset: finalize failed for " + path_);
  finalized_ = true;

  nlohmann::json j;
  j["format"] = "TDLDATA1";
  j["version"] = kVersion;
  j["trajectory_points"] = kTrajectoryPoints;
  j["camera"] = {{"fx", manifest_.camera.fx},
                 {"fy", manifest_.camera.fy},
                 {"cx", manifest_.camera.cx},
                 {"cy", manifest_.camera.cy},
                 {"rotation", manifest_.camera.rotation},
                 {"translation", manifest_.camera.translation},
                 {"width", manifest_.camera.width},
                 {"height", manifest_.camera.height}};
  j["vocabulary"] = manifest_.vocab;
  j["episodes"] = nlohmann::json::array();
  for (const auto& m : metas_)
    j["episodes"].push_back({{"offset", m.offset},
                             {"length", m.length},
                             {"task", world::task_kind_name(m.task.kind)},
                             {"color", m.task.color},
                             {"layout", m.layout_id},
                             {"seed", m.seed}});
  std::ofstream js(path_ + ".json");
  js << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- reading

Dataset Dataset::open(const std::string& path) {
  Dataset ds;
  ds.path_ = path;
  ds.is_.open(path, std::ios::binary);
  if (!ds.is_) throw DataError("dataset: cannot open: " + path);
  char magic[8];
  ds.is_.read(magic, 8);
  if (!ds.is_ || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("dataset: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(ds.is_, "version");
  if (version != kVersion)
    throw DataError("dataset: version mismatch in " + path + ": got " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kVersion));
  const auto index_offset = read_pod<std::uint64_t>(ds.is_, "index offset");
  ds.manifest_.version = version;
  ds.manifest_.camera = read_camera(ds.is_);
  ds.manifest_.trajectory_points =
      static_cast<int>(read_pod<std::uint32_t>(ds.is_, "trajectory points"));
  const auto vocab_count = read_pod<std::uint32_t>(ds.is_, "vocab count");
  for (std::uint32_t i = 0; i < vocab_count; ++i) {
    const auto len = read_pod<std::uint32_t>(ds.is_, "vocab entry");
    std::string w(len, '\0');
    ds.is_.read(w.data(), len);
    if (!ds.is_) throw DataError("dataset: truncated vocabulary in " + path);
    ds.manifest_.vocab.push_back(std::move(w));
  }
  if (index_offset == 0)
    throw DataError("dataset: missing index (unfinalized file?) in " + path);
  ds.is_.seekg(static_cast<std::streamoff>(index_offset));
  const auto count = read_pod<std::uint32_t>(ds.is_, "episode count");
  std::uint64_t prev_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    EpisodeMeta m;
    m.offset = read_pod<std::uint64_t>(ds.is_, "episode index");
    m.length = read_pod<std::uint32_t>(ds.is_, "episode index");
    m.task.kind = static_cast<world::TaskKind>(
        read_pod<std::uint32_t>(ds.is_, "episode index"));
    m.task.color = read_pod<std::int32_t>(ds.is_, "episode index");
    m.layout_id =
        static_cast<int>(read_pod<std::uint32_t>(ds.is_, "episode index"));
    m.seed = read_pod<std::uint64_t>(ds.is_, "episode index");
    if (i > 0 && m.offset <= prev_offset)
      throw DataError("dataset: episode offsets not strictly increasing");
    prev_offset = m.offset;
    if (m.offset + static_cast<std::uint64_t>(m.length) * kStepBytes >
        index_offset)
      throw DataError("dataset: file truncated mid-episode " +
                      std::to_string(i));
    ds.manifest_.episodes.push_back(m);
  }
  return ds;
}

StepRecord Dataset::load_step(std::size_t id, int t) const {
  if (id >= manifest_.episodes.size())
    throw DataError("dataset: episode id out of range: " + std::to_string(id));
  const EpisodeMeta& m = manifest_.episodes[id];
  if (t < 0 || t >= static_cast<int>(m.length))
    throw DataError("dataset: step " + std::to_string(t) +
                    " out of range for episode " + std::to_string(id));
  is_.clear();
  is_.seekg(static_cast<std::streamoff>(m.offset + t * kStepBytes));
  StepRecord rec;
  rec.obs.data.resize(kRasterFloats);
  is_.read(reinterpret_cast<char*>(rec.obs.data.data()), kRasterFloats * 4);
  for (double& v : rec.state) v = read_pod<double>(is_, "step state");
  for (double& v : rec.action) v = read_pod<double>(is_, "step action");
  for (double& v : rec.ee) v = read_pod<double>(is_, "step ee");
  if (!is_)
    throw DataError("dataset: file truncated mid-episode " +
                    std::to_string(id));
  return rec;
}

Demonstration Dataset::load_episode(std::size_t id) const {
  if (id >= manifest_.episodes.size())
    throw DataError("dataset: episode id out of range: " + std::to_string(id));
  const EpisodeMeta& m = manifest_.episodes[id];
  Demonstration demo;
  demo.task = m.task;
  demo.seed = m.seed;
  demo.layout_id = m.layout_id;
  demo.steps.reserve(m.length);
  for (int t = 0; t < static_cast<int>(m.length); ++t)
    demo.steps.push_back(load_step(id, t));
  return demo;
}

// ----------------------------------------------------------------- splits

Split split(const DatasetManifest& manifest, const SplitSpec& spec,
            std::uint64_t seed) {
  const int eval_layout = world::kNumLayouts - 1;
  std::vector<std::size_t> eval_ids, other_ids;
  for (std::size_t i = 0; i < manifest.episodes.size(); ++i) {
    if (manifest.episodes[i].layout_id == eval_layout)
      eval_ids.push_back(i);
    else
      other_ids.push_back(i);
  }
  if (eval_ids.empty())
    throw DataError("split: no layout-" + std::to_string(eval_layout) +
                    " episodes in the dataset");
  Split out;
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5A5A5A5A5ull);
  switch (spec.scheme) {
    case SplitScheme::unseen:
      out.train = other_ids;
      out.test = eval_ids;
      break;
    case SplitScheme::seen:
    case SplitScheme::fraction: {
      std::vector<std::size_t> shuffled = eval_ids;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const std::size_t n_test =
          std::max<std::size_t>(1, shuffled.size() / 5);
      out.test.assign(shuffled.begin(), shuffled.begin() + n_test);
      out.train.assign(shuffled.begin() + n_test, shuffled.end());
      if (spec.scheme == SplitScheme::fraction) {
        const auto keep = static_cast<std::size_t>(
            std::llround(spec.fraction * static_cast<double>(out.train.size())));
        std::shuffle(out.train.begin(), out.train.end(), rng);
        out.train.resize(std::max<std::size_t>(1, keep));
      }
      std::sort(out.train.begin(), out.train.end());
      std::sort(out.test.begin(), out.test.end());
      break;
    }
  }
  if (out.train.empty() || out.test.empty())
    throw DataError("split: empty train or test set");
  return out;
}

}  // namespace tdl::data
