#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynprop/geometry.hpp"
#include "dynprop/rng.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneObject {
  int cls = 0;
  Box box;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  std::size_t count() const { return objects.size(); }
  std::vector<Box> boxes() const {
    std::vector<Box> b;
    for (auto& o : objects) b.push_back(o.box);
    return b;
  }
  std::vector<int> classes() const {
    std::vector<int> c;
    for (auto& o : objects) c.push_back(o.cls);
    return c;
  }
  bool operator==(const Scene&) const = default;
};

struct SceneOptions {
  int max_objects = 10;
  int num_classes = 3;
  double min_size = 0.08;
  double max_size = 0.25;
  double max_iou = 0.3;
  // Largest fraction of either box that another object may cover.
  double max_cover = 0.1;
  int max_tries = 1000;
};

namespace detail {
inline constexpr double kCoordScale = 1e6;  // coordinates live on a 1e-6 grid

inline double grid_coord(std::int64_t v) { return static_cast<double>(v) / kCoordScale; }
}  // namespace detail

// Object count uniform in {0..max_objects}; boxes rejection-sampled on a
// 1e-6 coordinate grid so they serialize exactly with six decimals.
inline Scene generate_scene(std::uint64_t seed, const SceneOptions& opt = {}) {
  if (opt.max_objects < 1) throw std::invalid_argument("max_objects must be >= 1");
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  const auto target = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(opt.max_objects) + 1));
  const auto lo = static_cast<std::int64_t>(std::llround(opt.min_size * detail::kCoordScale));
  const auto hi = static_cast<std::int64_t>(std::llround(opt.max_size * detail::kCoordScale));
  const auto full = static_cast<std::int64_t>(detail::kCoordScale);
  for (int k = 0; k < target; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < opt.max_tries && !placed; ++attempt) {
      const auto w = lo + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
      const auto h = lo + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
      const auto x = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(full - w + 1)));
      const auto y = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(full - h + 1)));
      const Box b{detail::grid_coord(x), detail::grid_coord(y), detail::grid_coord(x + w),
                  detail::grid_coord(y + h)};
      const int cls = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(opt.num_classes)));
      bool ok = true;
      for (auto& o : scene.objects) {
        const double inter = intersection_area(b, o.box);
        if (iou(b, o.box) > opt.max_iou || inter > opt.max_cover * std::min(b.area(), o.box.area())) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.objects.push_back({cls, b});
        placed = true;
      }
    }
    if (!placed) break;
  }
  return scene;
}

inline constexpr double kPixelNoise = 0.05;

// [3 x H x W] image: each object paints its pixels with a one-hot color in
// channel (class mod 3), later objects on top, plus Gaussian noise.
inline Tensor rasterize(const Scene& scene, std::size_t height = 64, std::size_t width = 64) {
  std::vector<double> img(3 * height * width, 0.0);
  const std::size_t plane = height * width;
  for (auto& o : scene.objects) {
    const std::size_t ch = static_cast<std::size_t>(o.cls % 3);
    for (std::size_t y = 0; y < height; ++y) {
      const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
      if (cy < o.box.y1 || cy >= o.box.y2) continue;
      for (std::size_t x = 0; x < width; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
        if (cx < o.box.x1 || cx >= o.box.x2) continue;
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * width + x] = c == ch ? 1.0 : 0.0;
      }
    }
  }
  Rng noise(derive_seed(scene.seed, 0x6e6f697365ULL));
  for (auto& v : img) v += kPixelNoise * noise.normal();
  return Tensor({3, height, width}, std::move(img));
}

// ---------------------------------------------------------------------------
// Persistence: JSON lines, one scene per line.

inline std::string scene_to_json_line(const Scene& s) {
  std::string out = "{\"seed\":" + std::to_string(s.seed) + ",\"objects\":[";
  char buf[160];
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    std::snprintf(buf, sizeof(buf), "%s[%d,%.6f,%.6f,%.6f,%.6f]", i ? "," : "", o.cls, o.box.x1,
                  o.box.y1, o.box.x2, o.box.y2);
    out += buf;
  }
  out += "]}";
  return out;
}

inline Scene scene_from_json_line(const std::string& line, std::size_t line_no) {
  auto fail = [&](const std::string& why) {
    return DataError("line " + std::to_string(line_no) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed scene (") + e.what() + ")");
  }
  if (!j.is_object() || !j.contains("seed") || !j.contains("objects") || !j["objects"].is_array())
    throw fail("expected {\"seed\":..,\"objects\":[..]}");
  if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) throw fail("seed must be an integer");
  Scene s;
  s.seed = j["seed"].get<std::uint64_t>();
  for (auto& o : j["objects"]) {
    if (!o.is_array() || o.size() != 5 || !o[0].is_number_integer())
      throw fail("object must be [class,x1,y1,x2,y2]");
    for (int k = 1; k < 5; ++k)
      if (!o[k].is_number()) throw fail("box coordinates must be numbers");
    SceneObject obj{o[0].get<int>(), {o[1].get<double>(), o[2].get<double>(), o[3].get<double>(),
                                      o[4].get<double>()}};
    if (obj.cls < 0) throw fail("negative class id");
    if (obj.box.x2 < obj.box.x1 || obj.box.y2 < obj.box.y1) throw fail("inverted box");
    s.objects.push_back(obj);
  }
  return s;
}

inline void write_split(const std::filesystem::path& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (auto& s : scenes) out << scene_to_json_line(s) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::vector<Scene> read_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Scene> scenes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    try {
      scenes.push_back(scene_from_json_line(line, line_no));
    } catch (const DataError& e) {
      throw DataError(path.filename().string() + " " + e.what());
    }
  }
  return scenes;
}

struct DatasetManifest {
  int format_version = 1;
  std::uint64_t seed = 0;
  std::size_t train = 2000;
  std::size_t val = 500;
  int max_objects = 10;
  int num_classes = 3;
  std::size_t image_size = 64;

  nlohmann::json to_json() const {
    return {{"format_version", format_version}, {"seed", seed},       {"train", train},
            {"val", val},                       {"max_objects", max_objects},
            {"num_classes", num_classes},       {"image_size", image_size},
            {"generator", "xoshiro256**/splitmix64"}};
  }
  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
      m.format_version = j.at("format_version").get<int>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.train = j.at("train").get<std::size_t>();
      m.val = j.at("val").get<std::size_t>();
      m.max_objects = j.at("max_objects").get<int>();
      m.num_classes = j.at("num_classes").get<int>();
      m.image_size = j.at("image_size").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
  }
};

// Scene seeds for split `split_id` (0 train, 1 val).
inline std::uint64_t scene_seed(std::uint64_t dataset_seed, int split_id, std::size_t index) {
  return derive_seed(dataset_seed, (static_cast<std::uint64_t>(split_id) << 40) + index);
}

inline std::vector<Scene> generate_split(const DatasetManifest& m, int split_id) {
  SceneOptions opt;
  opt.max_objects = m.max_objects;
  opt.num_classes = m.num_classes;
  const std::size_t n = split_id == 0 ? m.train : m.val;
  std::vector<Scene> scenes;
  scenes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) scenes.push_back(generate_scene(scene_seed(m.seed, split_id, i), opt));
  return scenes;
}

inline void write_dataset(const std::filesystem::path& dir, const DatasetManifest& m) {
  std::filesystem::create_directories(dir);
  write_split(dir / "train.jsonl", generate_split(m, 0));
  write_split(dir / "val.jsonl", generate_split(m, 1));
  std::ofstream(dir / "manifest.json", std::ios::binary | std::ios::trunc) << m.to_json().dump(2) << '\n';
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing manifest.json in " + dir.string());
  try {
    return DatasetManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
}

}  // namespace dynprop
