#pragma once

// Synthetic multi-view line-drawing benchmark and the JSON-lines manifest that
// describes any drawing dataset (synthetic or real).
//
// Each synthetic ID is a random composite of boxes, prisms and cylinders.
// Views are orthographic projections of the same wireframe from a fixed set of
// camera angles (front, side, top, oblique...), drawn with a constant stroke
// width and a view-independent scale, so views differ by viewpoint only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patentret/image.hpp"
#include "patentret/rng.hpp"

namespace patentret {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, val };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw DatasetError("unknown split '" + s + "' (expected train or val)");
}

struct ManifestEntry {
  std::string image_path;  // relative to the manifest root
  std::string patent_id;
  int view_index = 0;
  Split split = Split::train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root_dir;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root_dir / e.image_path; }

  std::vector<ManifestEntry> of_split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }

  /// Distinct patent IDs in order of first appearance.
  std::vector<std::string> patent_ids(std::optional<Split> s = std::nullopt) const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& e : entries)
      if ((!s || e.split == *s) && seen.insert(e.patent_id).second) out.push_back(e.patent_id);
    return out;
  }
};

/// Checks the manifest invariants that do not touch the filesystem: unique
/// (patent_id, view_index), each ID in one split, >= 2 images per val ID.
inline void validate_manifest(const DatasetManifest& m) {
  std::map<std::string, Split> split_of;
  std::map<std::string, std::size_t> count;
  std::set<std::pair<std::string, int>> keys;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string where = "entry " + std::to_string(i + 1);
    if (!keys.insert({e.patent_id, e.view_index}).second)
      throw DatasetError(where + ": duplicate (patent_id, view_index) = (" + e.patent_id + ", " +
                         std::to_string(e.view_index) + ")");
    auto [it, fresh] = split_of.emplace(e.patent_id, e.split);
    if (!fresh && it->second != e.split)
      throw DatasetError(where + ": patent_id " + e.patent_id + " appears in both train and val splits");
    ++count[e.patent_id];
  }
  std::vector<std::string> lonely;
  for (const auto& [id, s] : split_of)
    if (s == Split::val && count[id] < 2) lonely.push_back(id);
  if (!lonely.empty()) {
    std::string msg = "val patent_ids with fewer than 2 images:";
    for (const auto& id : lonely) msg += " " + id;
    throw DatasetError(msg);
  }
}

inline nlohmann::json to_json_line(const ManifestEntry& e) {
  return {{"image_path", e.image_path},
          {"patent_id", e.patent_id},
          {"view_index", e.view_index},
          {"split", to_string(e.split)}};
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write manifest " + path.string());
  for (const auto& e : m.entries) out << to_json_line(e).dump() << '\n';
}

/// Reads a JSON-lines manifest; image paths resolve against the manifest's
/// directory. Errors name the offending line.
inline DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    ManifestEntry e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.image_path = j.at("image_path").get<std::string>();
      e.patent_id = j.at("patent_id").get<std::string>();
      e.view_index = j.at("view_index").get<int>();
      e.split = split_from_string(j.at("split").get<std::string>());
    } catch (const std::exception& ex) {
      throw DatasetError(where + ": " + ex.what());
    }
    if (check_files && !std::filesystem::exists(m.root_dir / e.image_path))
      throw DatasetError(where + ": image file not found: " + (m.root_dir / e.image_path).string());
    m.entries.push_back(std::move(e));
  }
  try {
    validate_manifest(m);
  } catch (const DatasetError& ex) {
    throw DatasetError(path.string() + ": " + ex.what());
  }
  return m;
}

/// Partitions patent IDs (not images) into train/val. Deterministic in seed.
inline DatasetManifest split_by_id(DatasetManifest m, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw DatasetError("val_fraction must lie strictly between 0 and 1");
  auto ids = m.patent_ids();
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ids.size())));
  if (n_val == 0 || n_val >= ids.size())
    throw DatasetError("split of " + std::to_string(ids.size()) + " IDs at fraction " +
                       std::to_string(val_fraction) + " leaves a split with zero IDs");
  Rng rng = Rng::derive(seed, 0x5e11);
  rng.shuffle(ids.begin(), ids.end());
  const std::set<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  for (auto& e : m.entries) e.split = val.count(e.patent_id) ? Split::val : Split::train;
  validate_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// Procedural wireframes

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }

struct Segment3 {
  Vec3 a, b;
};

struct Wireframe {
  std::vector<Segment3> segments;
};

struct SyntheticSpec {
  std::size_t num_ids = 200;
  std::size_t views_per_id = 5;
  std::size_t image_size = 64;
  double stroke_width = 1.5;
  std::uint64_t seed = 7;
  double val_fraction = 0.25;
};

namespace detail {

// y is up; yaw rotates about y.
inline Vec3 yaw(Vec3 p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p.x + s * p.z, p.y, -s * p.x + c * p.z};
}

inline void add_polygon_prism(Wireframe& w, Vec3 center, double radius, double height, int sides,
                              double rotation, bool cap_lines) {
  std::vector<Vec3> bottom, top;
  for (int k = 0; k < sides; ++k) {
    const double a = rotation + 2.0 * std::numbers::pi * k / sides;
    const Vec3 off{radius * std::cos(a), 0, radius * std::sin(a)};
    bottom.push_back(center + off + Vec3{0, -height / 2, 0});
    top.push_back(center + off + Vec3{0, height / 2, 0});
  }
  for (int k = 0; k < sides; ++k) {
    const int n = (k + 1) % sides;
    w.segments.push_back({bottom[k], bottom[n]});
    w.segments.push_back({top[k], top[n]});
    if (cap_lines) w.segments.push_back({bottom[k], top[k]});
  }
  if (!cap_lines)  // cylinder: four generator lines
    for (int k = 0; k < sides; k += sides / 4) w.segments.push_back({bottom[k], top[k]});
}

inline void add_box(Wireframe& w, Vec3 center, Vec3 half, double rotation, int grid_lines, Rng& rng) {
  std::array<Vec3, 8> v;
  for (int i = 0; i < 8; ++i) {
    const Vec3 local{(i & 1 ? 1 : -1) * half.x, (i & 2 ? 1 : -1) * half.y, (i & 4 ? 1 : -1) * half.z};
    v[i] = center + yaw(local, rotation);
  }
  for (int i = 0; i < 8; ++i)
    for (int bit : {1, 2, 4})
      if (!(i & bit)) w.segments.push_back({v[i], v[i | bit]});
  // Surface pattern: parallel lines on the front (+z) face.
  for (int g = 1; g <= grid_lines; ++g) {
    const double t = static_cast<double>(g) / (grid_lines + 1);
    const bool horizontal = rng.bernoulli(0.5);
    Vec3 a, b;
    if (horizontal) {
      const double y = -half.y + 2 * half.y * t;
      a = {-half.x, y, half.z};
      b = {half.x, y, half.z};
    } else {
      const double x = -half.x + 2 * half.x * t;
      a = {x, -half.y, half.z};
      b = {x, half.y, half.z};
    }
    w.segments.push_back({center + yaw(a, rotation), center + yaw(b, rotation)});
  }
}

/// Camera (azimuth, elevation) in degrees for a view index: oblique, front,
/// side, top, rear oblique, then golden-angle spread.
inline std::pair<double, double> canonical_view(std::size_t v) {
  static constexpr std::array<std::pair<double, double>, 8> kViews{{
      {35, 25}, {0, 0}, {90, 0}, {0, 88}, {215, 25}, {180, 0}, {270, 0}, {125, -25}}};
  if (v < kViews.size()) return kViews[v];
  const double az = std::fmod(137.50776 * static_cast<double>(v), 360.0);
  const double el = -30.0 + std::fmod(47.0 * static_cast<double>(v), 60.0);
  return {az, el};
}

inline void draw_segment(DrawingImage& img, double x0, double y0, double x1, double y1, double width) {
  const double r = width / 2.0;
  const long minx = std::max(0L, static_cast<long>(std::floor(std::min(x0, x1) - r - 1)));
  const long maxx = std::min(static_cast<long>(img.width) - 1, static_cast<long>(std::ceil(std::max(x0, x1) + r + 1)));
  const long miny = std::max(0L, static_cast<long>(std::floor(std::min(y0, y1) - r - 1)));
  const long maxy = std::min(static_cast<long>(img.height) - 1, static_cast<long>(std::ceil(std::max(y0, y1) + r + 1)));
  const double dx = x1 - x0, dy = y1 - y0, len2 = dx * dx + dy * dy;
  for (long py = miny; py <= maxy; ++py)
    for (long px = minx; px <= maxx; ++px) {
      const double cx = px + 0.5, cy = py + 0.5;
      double t = len2 > 0 ? ((cx - x0) * dx + (cy - y0) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = x0 + t * dx - cx, ey = y0 + t * dy - cy;
      if (ex * ex + ey * ey <= r * r) img.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py)) = kInk;
    }
}

}  // namespace detail

/// Random composite object for one ID.
inline Wireframe make_wireframe(Rng& rng) {
  Wireframe w;
  const int parts = static_cast<int>(rng.uniform_int(2, 4));
  double base_y = -0.6;
  for (int p = 0; p < parts; ++p) {
    const int kind = static_cast<int>(rng.uniform_int(0, 2));
    const double h = rng.uniform(0.2, 0.6);
    const Vec3 c{rng.uniform(-0.35, 0.35), base_y + h / 2, rng.uniform(-0.3, 0.3)};
    const double rot = rng.uniform(0, std::numbers::pi);
    switch (kind) {
      case 0:
        detail::add_box(w, c, {rng.uniform(0.15, 0.55), h / 2, rng.uniform(0.15, 0.45)}, rot,
                        static_cast<int>(rng.uniform_int(0, 3)), rng);
        break;
      case 1:
        detail::add_polygon_prism(w, c, rng.uniform(0.15, 0.45), h, static_cast<int>(rng.uniform_int(3, 6)),
                                  rot, true);
        break;
      default:
        detail::add_polygon_prism(w, c, rng.uniform(0.12, 0.4), h, 24, rot, false);
        break;
    }
    // Parts stack upward with some overlap.
    base_y += h * rng.uniform(0.6, 1.0);
  }
  return w;
}

/// Orthographic rendering at camera (azimuth, elevation). The scale fits the
/// object's bounding sphere, which does not depend on the view.
inline DrawingImage render_view(const Wireframe& w, double azimuth_deg, double elevation_deg,
                                std::size_t image_size, double stroke_width) {
  Vec3 lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (const auto& s : w.segments)
    for (const Vec3& p : {s.a, s.b}) {
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
  const Vec3 center = 0.5 * (lo + hi);
  double radius = 1e-9;
  for (const auto& s : w.segments)
    for (const Vec3& p : {s.a, s.b}) {
      const Vec3 d = p - center;
      radius = std::max(radius, std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z));
    }
  const double az = azimuth_deg * std::numbers::pi / 180.0, el = elevation_deg * std::numbers::pi / 180.0;
  const double half = static_cast<double>(image_size) / 2.0;
  const double scale = (half - stroke_width - 2.0) / radius;
  auto project = [&](Vec3 p) {
    Vec3 q = detail::yaw(p - center, -az);
    // Tilt about x by elevation: camera looks down for positive elevation.
    const double y = std::cos(el) * q.y - std::sin(el) * q.z;
    return std::pair{half + scale * q.x, half - scale * y};
  };
  DrawingImage img(image_size, image_size);
  for (const auto& s : w.segments) {
    auto [x0, y0] = project(s.a);
    auto [x1, y1] = project(s.b);
    detail::draw_segment(img, x0, y0, x1, y1, stroke_width);
  }
  return img;
}

inline std::string synthetic_patent_id(std::size_t i) {
  std::ostringstream os;
  os << 'D' << std::setw(6) << std::setfill('0') << i + 1;
  return os.str();
}

/// All views of one synthetic ID, in view order. Views that would coincide
/// pixel-for-pixel with an earlier view are re-rendered at a nudged azimuth.
inline std::vector<DrawingImage> render_synthetic_id(const SyntheticSpec& spec, std::size_t id_index) {
  Rng rng = Rng::derive(spec.seed, id_index);
  const Wireframe w = make_wireframe(rng);
  const double jitter_az = rng.uniform(-6, 6), jitter_el = rng.uniform(-4, 4);
  std::vector<DrawingImage> views;
  for (std::size_t v = 0; v < spec.views_per_id; ++v) {
    auto [az, el] = detail::canonical_view(v);
    DrawingImage img;
    for (int attempt = 0;; ++attempt) {
      img = render_view(w, az + jitter_az + 7.0 * attempt, std::clamp(el + jitter_el, -89.0, 89.0),
                        spec.image_size, spec.stroke_width);
      const bool dup = std::any_of(views.begin(), views.end(), [&](const auto& o) { return o.same_pixels(img); });
      if (!dup || attempt == 16) break;
    }
    img.patent_id = synthetic_patent_id(id_index);
    img.view_index = static_cast<int>(v);
    views.push_back(std::move(img));
  }
  return views;
}

inline void validate_synthetic_spec(const SyntheticSpec& spec) {
  if (spec.num_ids < 2) throw DatasetError("num_ids must be >= 2");
  if (spec.views_per_id < 2) throw DatasetError("views_per_id must be >= 2");
  if (!(spec.stroke_width > 0)) throw DatasetError("stroke_width must be positive");
  if (spec.image_size < 16 || spec.stroke_width * 8 > static_cast<double>(spec.image_size))
    throw DatasetError("image_size " + std::to_string(spec.image_size) + " too small for stroke width " +
                       std::to_string(spec.stroke_width) + " (need >= 16 px and >= 8 strokes across)");
}

/// Writes `images/<id>_v<k>.png` and `manifest.jsonl` under out_dir, with IDs
/// split into train/val by spec.val_fraction.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  validate_synthetic_spec(spec);
  std::filesystem::create_directories(out_dir / "images");
  DatasetManifest m;
  m.root_dir = out_dir;
  for (std::size_t i = 0; i < spec.num_ids; ++i)
    for (const auto& img : render_synthetic_id(spec, i)) {
      const std::string rel = "images/" + img.patent_id + "_v" + std::to_string(img.view_index) + ".png";
      save_image(img, out_dir / rel);
      m.entries.push_back({rel, img.patent_id, img.view_index, Split::train});
    }
  m = split_by_id(std::move(m), spec.val_fraction, spec.seed);
  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace patentret
