#pragma once

// Ground-truth scenes of simple glyphs, their rasters, captions in several
// distractor modes, and a noisy detector oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "countlab/caption_numerics.hpp"
#include "countlab/errors.hpp"
#include "countlab/rng.hpp"

namespace countlab {

enum class Layout { grid, scatter };

inline std::string to_string(Layout l) { return l == Layout::grid ? "grid" : "scatter"; }

inline Layout layout_from_string(std::string_view s) {
  if (s == "grid") return Layout::grid;
  if (s == "scatter") return Layout::scatter;
  throw DataError("unknown layout: " + std::string(s));
}

/// One object. (cx, cy) is the center pixel; the glyph occupies the box
/// [cx - size/2, cx - size/2 + size) on both axes.
struct Placement {
  int class_id = 0;
  int cx = 0;
  int cy = 0;
  int size = 0;

  bool operator==(const Placement&) const = default;
};

struct SceneSpec {
  std::string id;
  std::map<int, int> counts;  // class_id -> count, positive entries only
  Layout layout = Layout::scatter;
  int height = 32;
  int width = 32;
  std::vector<Placement> placements;
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

/// Class with the largest count, lowest id on ties. Returns {-1, 0} when empty.
inline std::pair<int, int> dominant_class(const std::map<int, int>& counts) {
  int best = -1;
  int best_count = 0;
  for (const auto& [cls, n] : counts) {
    if (best < 0 || n > best_count) {
      best = cls;
      best_count = n;
    }
  }
  return {best, best_count};
}

struct SceneConfig {
  int num_classes = 5;
  int count_min = 2;
  int count_max = 10;
  /// Relative weight of count c is count_decay^(c - count_min); 1 is uniform.
  double count_decay = 1.0;
  /// P(grid) = clamp(grid_base + grid_slope * (c - count_min) / (count_max - count_min)).
  double grid_base = 0.3;
  double grid_slope = 0.4;
  int height = 32;
  int width = 32;
  int glyph_size = 5;
  double distractor_prob = 0.3;
  int max_distractor_count = 3;
};

namespace detail {

inline int lattice_slots(int extent, int size) { return extent < size ? 0 : (extent - size) / (size + 1) + 1; }

inline bool place_grid(int total, const SceneConfig& cfg, Rng& rng, std::vector<std::pair<int, int>>& centers) {
  const int nx = lattice_slots(cfg.width, cfg.glyph_size);
  const int ny = lattice_slots(cfg.height, cfg.glyph_size);
  if (total == 0) return true;
  int cols = std::min(nx, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(total)))));
  if (cols <= 0) return false;
  const int rows = (total + cols - 1) / cols;
  if (rows > ny) return false;
  const int pitch = cfg.glyph_size + 1;
  auto spacing = [&](int n, int extent) {
    if (n <= 1) return 0;
    return std::min((extent - cfg.glyph_size) / (n - 1), 2 * pitch);
  };
  const int sx = spacing(cols, cfg.width);
  const int sy = spacing(rows, cfg.height);
  const int ox = rng.uniform_int(0, cfg.width - cfg.glyph_size - sx * (cols - 1));
  const int oy = rng.uniform_int(0, cfg.height - cfg.glyph_size - sy * (rows - 1));
  const int half = cfg.glyph_size / 2;
  centers.clear();
  for (int i = 0; i < total; ++i) {
    centers.emplace_back(ox + half + (i % cols) * sx, oy + half + (i / cols) * sy);
  }
  return true;
}

inline bool place_scatter(int total, const SceneConfig& cfg, Rng& rng, std::vector<std::pair<int, int>>& centers) {
  constexpr int kAttempts = 200;
  constexpr int kRestarts = 20;
  const int half = cfg.glyph_size / 2;
  for (int restart = 0; restart < kRestarts; ++restart) {
    centers.clear();
    bool ok = true;
    for (int i = 0; i < total && ok; ++i) {
      ok = false;
      for (int a = 0; a < kAttempts; ++a) {
        const int x = rng.uniform_int(0, cfg.width - cfg.glyph_size);
        const int y = rng.uniform_int(0, cfg.height - cfg.glyph_size);
        bool clear = true;
        for (const auto& [cx, cy] : centers) {
          if (std::abs(cx - half - x) <= cfg.glyph_size && std::abs(cy - half - y) <= cfg.glyph_size) {
            clear = false;
            break;
          }
        }
        if (clear) {
          centers.emplace_back(x + half, y + half);
          ok = true;
          break;
        }
      }
    }
    if (ok) return true;
  }
  return false;
}

}  // namespace detail

/// Samples a scene: one dominant class from `class_pool` with a count drawn
/// from [count_min, count_max], plus optional distractor classes whose counts
/// are strictly smaller than the dominant count.
inline SceneSpec sample_scene(const std::vector<int>& class_pool, const SceneConfig& cfg, std::string id,
                              std::uint64_t seed) {
  if (class_pool.empty()) throw UsageError("sample_scene: empty class pool");
  if (cfg.count_min < 1 || cfg.count_max > 10 || cfg.count_min > cfg.count_max) {
    throw UsageError("sample_scene: count range must lie within [1,10]");
  }
  Rng rng(seed);
  SceneSpec scene;
  scene.id = std::move(id);
  scene.height = cfg.height;
  scene.width = cfg.width;
  scene.seed = seed;

  std::vector<double> weights;
  for (int c = cfg.count_min; c <= cfg.count_max; ++c) weights.push_back(std::pow(cfg.count_decay, c - cfg.count_min));
  const int dominant_count = cfg.count_min + static_cast<int>(rng.weighted(weights));
  const int dominant = class_pool[rng.below(class_pool.size())];
  scene.counts[dominant] = dominant_count;

  if (dominant_count > 1 && class_pool.size() > 1 && rng.bernoulli(cfg.distractor_prob)) {
    std::vector<int> others;
    for (int c : class_pool) {
      if (c != dominant) others.push_back(c);
    }
    const int cls = others[rng.below(others.size())];
    const int cap = std::min(dominant_count - 1, cfg.max_distractor_count);
    if (cap >= 1) scene.counts[cls] = rng.uniform_int(1, cap);
  }

  int total = 0;
  for (const auto& [cls, n] : scene.counts) total += n;

  const double span = cfg.count_max > cfg.count_min ? cfg.count_max - cfg.count_min : 1;
  const double p_grid = std::clamp(cfg.grid_base + cfg.grid_slope * (dominant_count - cfg.count_min) / span, 0.0, 1.0);
  scene.layout = rng.bernoulli(p_grid) ? Layout::grid : Layout::scatter;

  std::vector<std::pair<int, int>> centers;
  bool placed = scene.layout == Layout::grid ? detail::place_grid(total, cfg, rng, centers)
                                             : detail::place_scatter(total, cfg, rng, centers);
  if (!placed && scene.layout == Layout::scatter) {
    scene.layout = Layout::grid;
    placed = detail::place_grid(total, cfg, rng, centers);
  }
  if (!placed) {
    throw UsageError("sample_scene: canvas " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                     " cannot fit " + std::to_string(total) + " glyphs of size " + std::to_string(cfg.glyph_size));
  }

  std::vector<int> labels;
  for (const auto& [cls, n] : scene.counts) labels.insert(labels.end(), n, cls);
  rng.shuffle(labels);
  for (int i = 0; i < total; ++i) {
    scene.placements.push_back({labels[i], centers[i].first, centers[i].second, cfg.glyph_size});
  }
  return scene;
}

/// Grayscale image, row-major, intensities in [0, 1].
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Raster&) const = default;
};

inline constexpr int kGlyphShapes = 5;

/// Glyph intensity for a class: 1.0, 0.85, 0.7, 0.55, 0.4 repeating.
inline double glyph_intensity(int class_id) { return 1.0 - 0.15 * (class_id % kGlyphShapes); }

/// Whether offset (dx, dy) inside a size x size box belongs to the glyph.
/// Shapes by class_id mod 5: disc, square, triangle, cross, ring.
inline bool glyph_covers(int class_id, int size, int dx, int dy) {
  const double c = (size - 1) / 2.0;
  const double rx = dx - c;
  const double ry = dy - c;
  const double r2 = rx * rx + ry * ry;
  const double radius = size / 2.0;
  switch (class_id % kGlyphShapes) {
    case 0:
      return r2 <= radius * radius;
    case 1:
      return true;
    case 2: {
      // apex at the top row, full width at the bottom row
      const double halfwidth = (dy + 1) * (size / 2.0) / size;
      return std::abs(rx) <= halfwidth;
    }
    case 3:
      return std::abs(rx) < 1.0 || std::abs(ry) < 1.0;
    default:
      return r2 <= radius * radius && r2 >= (radius - 1.2) * (radius - 1.2);
  }
}

inline Raster render(const SceneSpec& scene) {
  Raster r{scene.height, scene.width, std::vector<double>(static_cast<std::size_t>(scene.height) * scene.width, 0.0)};
  for (const auto& p : scene.placements) {
    const int x0 = p.cx - p.size / 2;
    const int y0 = p.cy - p.size / 2;
    const double v = glyph_intensity(p.class_id);
    for (int dy = 0; dy < p.size; ++dy) {
      for (int dx = 0; dx < p.size; ++dx) {
        const int x = x0 + dx;
        const int y = y0 + dy;
        if (x < 0 || y < 0 || x >= r.width || y >= r.height) continue;
        if (glyph_covers(p.class_id, p.size, dx, dy)) r.pixels[static_cast<std::size_t>(y) * r.width + x] = v;
      }
    }
  }
  return r;
}

/// Binary portable graymap (P5, maxval 255).
inline void write_pgm(const Raster& raster, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "P5\n" << raster.width << ' ' << raster.height << "\n255\n";
  for (double v : raster.pixels) {
    const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  if (!out) throw DataError("write failed: " + path);
}

struct DetectorNoise {
  double miss_rate = 0.0;
  double false_positive_rate = 0.0;
  std::uint64_t seed = 0;

  bool is_zero() const { return miss_rate == 0.0 && false_positive_rate == 0.0; }
};

struct DetectionResult {
  std::map<int, int> per_class_counts;
  int max_class = -1;
  int max_count = 0;
};

/// Oracle detector: exact counts without noise; otherwise each instance is
/// missed with `miss_rate` and Poisson(false_positive_rate) spurious
/// detections of uniform classes are added.
inline DetectionResult detect(const SceneSpec& scene, const DetectorNoise& noise, int num_classes = kGlyphShapes) {
  DetectionResult out;
  if (noise.is_zero()) {
    out.per_class_counts = scene.counts;
  } else {
    Rng rng(splitmix64(noise.seed) ^ fnv1a64(scene.id));
    for (const auto& [cls, n] : scene.counts) {
      int kept = 0;
      for (int i = 0; i < n; ++i) {
        if (!rng.bernoulli(noise.miss_rate)) ++kept;
      }
      out.per_class_counts[cls] = kept;
    }
    const int spurious = rng.poisson(noise.false_positive_rate);
    for (int i = 0; i < spurious; ++i) {
      ++out.per_class_counts[static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)))];
    }
  }
  const auto [cls, n] = dominant_class(out.per_class_counts);
  out.max_class = cls;
  out.max_count = n;
  return out;
}

struct ClassName {
  std::string singular;
  std::string plural;
};

inline std::vector<ClassName> default_class_names() {
  return {{"disc", "discs"}, {"square", "squares"}, {"triangle", "triangles"}, {"cross", "crosses"}, {"ring", "rings"}};
}

enum class CaptionMode {
  true_count,
  wrong_count,
  digit_distractor,
  non_count_number,
  amount_modifier,
  multiple_numbers,
  no_number,
};

inline constexpr std::array<CaptionMode, 7> kCaptionModes = {
    CaptionMode::true_count,       CaptionMode::wrong_count,     CaptionMode::digit_distractor,
    CaptionMode::non_count_number, CaptionMode::amount_modifier, CaptionMode::multiple_numbers,
    CaptionMode::no_number};

inline std::string to_string(CaptionMode m) {
  switch (m) {
    case CaptionMode::true_count: return "true_count";
    case CaptionMode::wrong_count: return "wrong_count";
    case CaptionMode::digit_distractor: return "digit_distractor";
    case CaptionMode::non_count_number: return "non_count_number";
    case CaptionMode::amount_modifier: return "amount_modifier";
    case CaptionMode::multiple_numbers: return "multiple_numbers";
    case CaptionMode::no_number: return "no_number";
  }
  return "unknown";
}

inline CaptionMode caption_mode_from_string(std::string_view s) {
  for (CaptionMode m : kCaptionModes) {
    if (to_string(m) == s) return m;
  }
  throw DataError("unknown caption mode: " + std::string(s));
}

namespace detail {

inline std::string fill(std::string_view tmpl, std::string_view number, std::string_view cls) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
      const char key = tmpl[i + 1];
      if (key == 'n') out += number;
      else if (key == 'N') out += apply_case(number, CasePattern::capitalized);
      else if (key == 'c') out += cls;
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& v, Rng& rng) {
  return v[rng.below(N)];
}

/// Uniform number word different from `avoid`; any of the nine if `avoid`
/// is outside [2, 10].
inline NumberWord other_number(int avoid, Rng& rng) {
  const bool excluded = avoid >= kMinNumber && avoid <= kMaxNumber;
  int pick = static_cast<int>(rng.below(excluded ? kNumberCount - 1 : kNumberCount)) + kMinNumber;
  if (excluded && pick >= avoid) ++pick;
  return static_cast<NumberWord>(pick);
}

}  // namespace detail

/// Caption for a scene's dominant class. `{n}`/`{N}` is the number word,
/// `{c}` the plural class name.
inline std::string caption_for_scene(const SceneSpec& scene, const std::vector<ClassName>& class_names, Rng& rng,
                                     CaptionMode mode) {
  static constexpr std::array<std::string_view, 4> kCountTemplates = {
      "a photo of {n} {c}", "{N} {c} on a plain background", "there are {n} {c} in this picture", "{n} {c}"};
  static constexpr std::array<std::string_view, 4> kDigitTemplates = {
      "{c} wallpaper 2019", "{c} photo, version 2", "iphone 11 case with {c}", "{c} at 10:30"};
  static constexpr std::array<std::string_view, 3> kNonCountTemplates = {
      "{c} drawn by a {n} year old", "{c} on day {n} of the trip", "chapter {n}: {c}"};
  static constexpr std::array<std::string_view, 3> kModifierTemplates = {
      "a couple of {n} {c}", "a pair of {n} {c}", "a few {n} {c}"};
  static constexpr std::array<std::string_view, 3> kNoNumberTemplates = {
      "a photo of {c}", "some {c} on a plain background", "{c}"};

  const auto [dominant, count] = dominant_class(scene.counts);
  if (dominant < 0) throw UsageError("caption_for_scene: scene " + scene.id + " has no objects");
  const std::string& cls = class_names.at(static_cast<std::size_t>(dominant) % class_names.size()).plural;

  switch (mode) {
    case CaptionMode::true_count:
      return detail::fill(detail::pick(kCountTemplates, rng), spelling_of(number_from_value(count)), cls);
    case CaptionMode::wrong_count:
      return detail::fill(detail::pick(kCountTemplates, rng), spelling_of(detail::other_number(count, rng)), cls);
    case CaptionMode::digit_distractor:
      return detail::fill(detail::pick(kDigitTemplates, rng), "", cls);
    case CaptionMode::non_count_number:
      return detail::fill(detail::pick(kNonCountTemplates, rng), spelling_of(detail::other_number(count, rng)), cls);
    case CaptionMode::amount_modifier:
      return detail::fill(detail::pick(kModifierTemplates, rng), spelling_of(number_from_value(std::clamp(count, 2, 10))),
                          cls);
    case CaptionMode::multiple_numbers: {
      const NumberWord first = number_from_value(std::clamp(count, 2, 10));
      const NumberWord second = detail::other_number(-1, rng);
      return std::string(spelling_of(first)) + " " + cls + " next to " + std::string(spelling_of(second)) + " " +
             class_names.at(static_cast<std::size_t>(dominant + 1) % class_names.size()).plural;
    }
    case CaptionMode::no_number:
      return detail::fill(detail::pick(kNoNumberTemplates, rng), "", cls);
  }
  return {};
}

}  // namespace countlab
