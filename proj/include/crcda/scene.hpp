#pragma once

// Procedural street scenes: a label layout generator plus a per-domain renderer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

enum Class : std::uint8_t {
  kRoad = 0,
  kSidewalk = 1,
  kBuilding = 2,
  kSky = 3,
  kPole = 4,
  kCar = 5,
  kPerson = 6,
  kVegetation = 7,
};

inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"road", "sidewalk", "building", "sky",
                                                                     "pole", "car",      "person",   "vegetation"};

/// H x W class-id map, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Image as [3, H, W] in [0, 1].
using RenderedImage = Tensor<float>;

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 128;
  std::size_t num_classes = kNumClasses;
  // Object boundaries (except poles) snap to this grid.
  std::size_t cell = 4;
  std::size_t sky_rows_min = 8;
  std::size_t sky_rows_max = 16;
  std::size_t road_start_min = 40;
  std::size_t road_start_max = 48;
  std::size_t sidewalk_rows = 8;
  std::size_t segment_width_min = 16;
  std::size_t segment_width_max = 48;
  std::size_t cars_min = 1, cars_max = 3;
  std::size_t poles_min = 1, poles_max = 3;
  std::size_t persons_min = 1, persons_max = 3;

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

/// Throws ConfigError if the bands or object sizes cannot fit the frame.
inline void validate(const SceneConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("scene config: " + m); };
  if (c.num_classes != kNumClasses) fail("num_classes must be " + std::to_string(kNumClasses));
  if (c.cell == 0 || c.height % c.cell || c.width % c.cell)
    fail("height and width must be multiples of the cell size " + std::to_string(c.cell));
  if (c.sky_rows_min == 0 || c.sky_rows_min > c.sky_rows_max) fail("need 0 < sky_rows_min <= sky_rows_max");
  if (static_cast<double>(c.sky_rows_max) > 0.3 * static_cast<double>(c.height))
    fail("sky band exceeds the top 30% of the frame");
  if (c.road_start_min > c.road_start_max) fail("road_start_min > road_start_max");
  if (static_cast<double>(c.road_start_min) < 0.6 * static_cast<double>(c.height))
    fail("road must start in the bottom 40% of the frame");
  if (c.road_start_max + 2 * c.cell > c.height) fail("road band exceeds the frame height");
  if (c.sidewalk_rows < 2 * c.cell) fail("sidewalk_rows must be at least two cells");
  if (c.road_start_min < c.sidewalk_rows + c.sky_rows_max + c.cell)
    fail("sidewalk band overlaps the sky band");
  if (c.segment_width_min < c.cell || c.segment_width_min > c.segment_width_max)
    fail("segment widths must satisfy cell <= min <= max");
  if (c.cars_min > c.cars_max || c.poles_min > c.poles_max || c.persons_min > c.persons_max)
    fail("object count ranges must satisfy min <= max");
  for (auto v : {c.sky_rows_min, c.sky_rows_max, c.road_start_min, c.road_start_max, c.sidewalk_rows,
                 c.segment_width_min, c.segment_width_max})
    if (v % c.cell) fail("band and segment sizes must be multiples of the cell size");
}

/// Default geometry carried over to another frame size. Vertical bands scale with
/// the height and segment widths with the width, snapped to the cell grid in the
/// direction that keeps the band rules satisfied.
inline SceneConfig scaled_scene(std::size_t height, std::size_t width) {
  const SceneConfig d;
  SceneConfig c;
  c.height = height;
  c.width = width;
  const std::size_t g = c.cell;
  auto down = [g](double v) { return std::max<std::size_t>(g, static_cast<std::size_t>(v / static_cast<double>(g)) * g); };
  auto up = [g](double v) { return static_cast<std::size_t>(std::ceil(v / static_cast<double>(g))) * g; };
  const double sy = static_cast<double>(height) / static_cast<double>(d.height);
  const double sx = static_cast<double>(width) / static_cast<double>(d.width);
  c.sky_rows_min = down(static_cast<double>(d.sky_rows_min) * sy);
  c.sky_rows_max = std::max(c.sky_rows_min, down(static_cast<double>(d.sky_rows_max) * sy));
  c.road_start_min = up(static_cast<double>(d.road_start_min) * sy);
  c.road_start_max = std::max(c.road_start_min, down(static_cast<double>(d.road_start_max) * sy));
  c.sidewalk_rows = std::max(2 * g, down(static_cast<double>(d.sidewalk_rows) * sy));
  c.segment_width_min = down(static_cast<double>(d.segment_width_min) * sx);
  c.segment_width_max = std::max(c.segment_width_min, down(static_cast<double>(d.segment_width_max) * sx));
  return c;
}

namespace detail {

inline std::size_t pick_on_grid(std::mt19937_64& rng, std::size_t lo, std::size_t hi, std::size_t step) {
  std::uniform_int_distribution<std::size_t> d(0, (hi - lo) / step);
  return lo + d(rng) * step;
}

}  // namespace detail

/// Generates a label layout: sky over building/vegetation segments, a sidewalk
/// band above the road, cars on the road, persons and poles on the sidewalk.
/// Deterministic in (seed, config).
inline LabelMap generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  const std::size_t H = cfg.height, W = cfg.width, cell = cfg.cell;
  LabelMap m(H, W, kRoad);

  const std::size_t road0 = detail::pick_on_grid(rng, cfg.road_start_min, cfg.road_start_max, cell);
  const std::size_t walk0 = road0 - cfg.sidewalk_rows;

  // Background segments.
  struct Segment {
    std::size_t x0, x1, top;
    Class kind;
  };
  std::vector<Segment> segs;
  for (std::size_t x = 0; x < W;) {
    std::size_t w = detail::pick_on_grid(rng, cfg.segment_width_min, cfg.segment_width_max, cell);
    if (W - x - std::min(w, W - x) < cfg.segment_width_min) w = W - x;  // absorb a too-narrow tail
    const std::size_t top = detail::pick_on_grid(rng, cfg.sky_rows_min, cfg.sky_rows_max, cell);
    const Class kind = std::bernoulli_distribution(0.5)(rng) ? kBuilding : kVegetation;
    segs.push_back({x, x + w, top, kind});
    x += w;
  }
  const bool has_building = std::any_of(segs.begin(), segs.end(), [](auto& s) { return s.kind == kBuilding; });
  const bool has_vegetation = std::any_of(segs.begin(), segs.end(), [](auto& s) { return s.kind == kVegetation; });
  if (segs.size() > 1 && (!has_building || !has_vegetation)) {
    std::uniform_int_distribution<std::size_t> d(0, segs.size() - 1);
    auto& s = segs[d(rng)];
    s.kind = has_building ? kVegetation : kBuilding;
  }
  for (const auto& s : segs)
    for (std::size_t y = 0; y < walk0; ++y)
      for (std::size_t x = s.x0; x < s.x1; ++x) m.at(y, x) = y < s.top ? kSky : s.kind;
  for (std::size_t y = walk0; y < road0; ++y)
    for (std::size_t x = 0; x < W; ++x) m.at(y, x) = kSidewalk;

  // Cars sit entirely inside the road band.
  const std::size_t cars = detail::pick_on_grid(rng, cfg.cars_min, cfg.cars_max, 1);
  for (std::size_t i = 0; i < cars; ++i) {
    const std::size_t cw = std::min(W, detail::pick_on_grid(rng, 4 * cell, 6 * cell, cell));
    const std::size_t ch = std::min(H - road0, detail::pick_on_grid(rng, 2 * cell, 3 * cell, cell));
    const std::size_t y0 = detail::pick_on_grid(rng, road0, H - ch, cell);
    const std::size_t x0 = detail::pick_on_grid(rng, 0, W - cw, cell);
    for (std::size_t y = y0; y < y0 + ch; ++y)
      for (std::size_t x = x0; x < x0 + cw; ++x) m.at(y, x) = kCar;
  }

  // Persons and poles share the sidewalk; each claims one cell column plus a free
  // neighbour on both sides, so poles stay flanked by sidewalk and persons keep
  // sidewalk beneath them.
  const std::size_t columns = W / cell;
  std::vector<bool> claimed(columns, false);
  auto claim = [&](std::size_t& col) {
    std::uniform_int_distribution<std::size_t> d(0, columns - 1);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t c = d(rng);
      const bool free = !claimed[c] && (c == 0 || !claimed[c - 1]) && (c + 1 == columns || !claimed[c + 1]);
      if (free) {
        claimed[c] = true;
        col = c;
        return true;
      }
    }
    return false;
  };

  const std::size_t persons = detail::pick_on_grid(rng, cfg.persons_min, cfg.persons_max, 1);
  for (std::size_t i = 0; i < persons; ++i) {
    std::size_t col = 0;
    if (!claim(col)) break;
    const std::size_t feet = road0 - cell;  // sidewalk rows [feet, road0) stay below the person
    const std::size_t ph = std::min(feet, detail::pick_on_grid(rng, 2 * cell, 4 * cell, cell));
    for (std::size_t y = feet - ph; y < feet; ++y)
      for (std::size_t x = col * cell; x < (col + 1) * cell; ++x) m.at(y, x) = kPerson;
  }

  const std::size_t poles = detail::pick_on_grid(rng, cfg.poles_min, cfg.poles_max, 1);
  for (std::size_t i = 0; i < poles; ++i) {
    std::size_t col = 0;
    if (!claim(col)) break;
    // Two pixels wide, centred in the cell, spanning the sidewalk band.
    const std::size_t x0 = col * cell + (cell - 2) / 2;
    for (std::size_t y = walk0; y < road0; ++y)
      for (std::size_t x = x0; x < x0 + 2; ++x) m.at(y, x) = kPole;
  }
  return m;
}

/// Returns human-readable violations of the layout rules; empty when the map conforms.
inline std::vector<std::string> check_layout(const LabelMap& m) {
  std::vector<std::string> bad;
  const double H = static_cast<double>(m.height);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const auto c = m.at(y, x);
      const auto where = " at (" + std::to_string(y) + "," + std::to_string(x) + ")";
      if (c >= kNumClasses) bad.push_back("class id out of range" + where);
      if (c == kSky && static_cast<double>(y) >= 0.3 * H) bad.push_back("sky below the top 30%" + where);
      if (c == kRoad && static_cast<double>(y) < 0.6 * H) bad.push_back("road above the bottom 40%" + where);
      if (c == kPole) {
        bool touches = false;
        for (int dy = -1; dy <= 1 && !touches; ++dy)
          for (int dx = -1; dx <= 1 && !touches; ++dx) {
            const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
            if ((dy || dx) && yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(m.height) &&
                xx < static_cast<std::ptrdiff_t>(m.width)) {
              const auto n = m.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              touches = n == kSidewalk || n == kRoad;
            }
          }
        if (!touches) bad.push_back("pole pixel not adjacent to sidewalk or road" + where);
      }
      if (c == kPerson) {
        bool sidewalk_below = false;
        for (std::size_t yy = y + 1; yy < m.height && !sidewalk_below; ++yy) sidewalk_below = m.at(yy, x) == kSidewalk;
        if (!sidewalk_below) bad.push_back("person pixel without sidewalk below" + where);
      }
    }
  }
  return bad;
}

using Color = std::array<double, 3>;

/// Appearance of one domain.
struct DomainParams {
  std::array<Color, kNumClasses> palette{};
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double texture_amplitude = 0.0;
  double texture_frequency = 1.0;

  friend bool operator==(const DomainParams&, const DomainParams&) = default;
};

inline std::array<Color, kNumClasses> default_palette() {
  return {{{0.50, 0.25, 0.50},
           {0.96, 0.14, 0.91},
           {0.27, 0.27, 0.27},
           {0.27, 0.51, 0.71},
           {0.60, 0.60, 0.60},
           {0.00, 0.00, 0.56},
           {0.86, 0.08, 0.24},
           {0.42, 0.56, 0.14}}};
}

/// Rotates a colour about the grey axis (a hue rotation in RGB space), clipped to [0, 1].
inline Color rotate_hue(const Color& c, double degrees) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th), k = 1.0 / std::sqrt(3.0);
  const double u[3] = {k, k, k};
  const double dot = u[0] * c[0] + u[1] * c[1] + u[2] * c[2];
  const double cross[3] = {u[1] * c[2] - u[2] * c[1], u[2] * c[0] - u[0] * c[2], u[0] * c[1] - u[1] * c[0]};
  Color out{};
  for (int i = 0; i < 3; ++i)
    out[static_cast<std::size_t>(i)] =
        std::clamp(c[static_cast<std::size_t>(i)] * cs + cross[i] * sn + u[i] * dot * (1 - cs), 0.0, 1.0);
  return out;
}

/// Which appearance components differ between source and target.
enum class ShiftKind { kPalette, kGamma, kNoise, kAll };

inline ShiftKind parse_shift(const std::string& s) {
  if (s == "palette") return ShiftKind::kPalette;
  if (s == "gamma") return ShiftKind::kGamma;
  if (s == "noise") return ShiftKind::kNoise;
  if (s == "all") return ShiftKind::kAll;
  throw ConfigError("unknown shift '" + s + "' (expected palette, gamma, noise or all)");
}

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::kPalette: return "palette";
    case ShiftKind::kGamma: return "gamma";
    case ShiftKind::kNoise: return "noise";
    case ShiftKind::kAll: return "all";
  }
  return "all";
}

inline constexpr double kTargetHueRotation = 35.0;

inline DomainParams source_domain() {
  DomainParams p;
  p.palette = default_palette();
  p.gamma = 1.0;
  p.noise_sigma = 0.02;
  p.texture_amplitude = 0.04;
  p.texture_frequency = 4.0;
  return p;
}

inline DomainParams target_domain(ShiftKind shift = ShiftKind::kAll) {
  DomainParams p = source_domain();
  const bool all = shift == ShiftKind::kAll;
  if (all || shift == ShiftKind::kPalette)
    for (auto& c : p.palette) c = rotate_hue(c, kTargetHueRotation);
  if (all || shift == ShiftKind::kGamma) p.gamma = 1.4;
  if (all || shift == ShiftKind::kNoise) {
    p.noise_sigma = 0.05;
    p.texture_frequency = 9.0;
  }
  return p;
}

/// Smallest pairwise L2 distance between palette entries.
inline double min_palette_distance(const DomainParams& p) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < kNumClasses; ++a)
    for (std::size_t b = a + 1; b < kNumClasses; ++b) {
      double d = 0;
      for (std::size_t i = 0; i < 3; ++i) d += (p.palette[a][i] - p.palette[b][i]) * (p.palette[a][i] - p.palette[b][i]);
      best = std::min(best, std::sqrt(d));
    }
  return best;
}

/// pixel = clip(palette[c]^gamma + texture + noise, 0, 1). Deterministic in all inputs.
inline RenderedImage render_domain(const LabelMap& m, const DomainParams& p, std::uint64_t seed) {
  RenderedImage img({3, m.height, m.width});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const auto c = m.at(y, x);
      require(c < kNumClasses, "render_domain: class id out of range");
      double tex = 0.0;
      if (p.texture_amplitude != 0.0) {
        const double u = static_cast<double>(x) / static_cast<double>(m.width);
        const double v = static_cast<double>(y) / static_cast<double>(m.height);
        tex = p.texture_amplitude * std::sin(two_pi * p.texture_frequency * (u + 0.5 * v) + 0.7 * c);
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = p.gamma == 1.0 ? p.palette[c][ch] : std::pow(p.palette[c][ch], p.gamma);
        v += tex;
        if (p.noise_sigma > 0.0) v += p.noise_sigma * noise(rng);
        img[(ch * m.height + y) * m.width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace crcda
