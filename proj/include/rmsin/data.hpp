#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rmsin/metrics.hpp"
#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/tensor.hpp"

// Synthetic referring-segmentation scenes: a few filled, rotated shapes on a
// textured background, one of which is described by a generated expression
// that singles it out. Plus the PPM/PGM + TSV on-disk format.
namespace rmsin {

// ---------------------------------------------------------------------------
// vocabulary

class Vocab {
 public:
  static const Vocab& instance() {
    static const Vocab v;
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw UsageError("token id " + std::to_string(id) + " is not in the vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }
  int id(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    if (it == ids_.end()) throw UsageError("unknown word '" + std::string(w) + "'");
    return it->second;
  }
  bool contains(std::string_view w) const { return ids_.count(std::string(w)) != 0; }

 private:
  Vocab() {
    words_ = {"<pad>",
              // kinds
              "rectangle", "ellipse", "triangle",
              // sizes
              "tiny", "small", "medium", "large", "huge",
              // orientation
              "horizontal", "vertical", "rising", "falling",
              // position
              "top", "middle", "bottom", "left", "center", "right",
              // intensity
              "dark", "gray", "bright",
              // relative order
              "largest", "smallest",
              // glue and synonyms
              "the", "in", "on", "at", "of", "a", "an", "shape", "object", "one", "that", "is", "with", "side",
              "part", "image", "corner", "which", "near", "area", "region", "and", "to", "upper", "lower", "box",
              "oval", "square", "circle", "wedge", "tilted", "slanted", "straight", "light", "black", "white",
              "big", "little"};
    for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

/// Whitespace split and vocabulary lookup, padded with 0 or truncated to
/// `length`. A zero `length` returns the unpadded ids.
inline std::vector<int> tokenize(std::string_view expression, int length = 0) {
  std::vector<int> ids;
  std::istringstream in{std::string(expression)};
  for (std::string w; in >> w;) ids.push_back(Vocab::instance().id(w));
  if (length > 0) ids.resize(static_cast<std::size_t>(length), 0);
  return ids;
}

/// Inverse of tokenize; padding is dropped.
inline std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id == 0) continue;
    if (!out.empty()) out += ' ';
    out += Vocab::instance().word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// shapes and rasterization

enum class ShapeKind { rectangle, ellipse, triangle };
enum class Intensity { dark, gray, bright };

inline const char* kind_word(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::ellipse: return "ellipse";
    default: return "triangle";
  }
}

inline const char* intensity_word(Intensity i) {
  switch (i) {
    case Intensity::dark: return "dark";
    case Intensity::gray: return "gray";
    default: return "bright";
  }
}

/// One filled shape in pixel units; x is the column axis, y the row axis,
/// orientation is counter-clockwise as seen on screen.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  double cx = 0.0, cy = 0.0;
  double area_fraction = 0.0;  // nominal area / H^2
  double aspect = 1.0;         // length along the major axis over the cross extent
  double orientation = 0.0;    // radians in [0, 2 pi)
  Intensity intensity = Intensity::gray;
  std::array<double, 3> color{};

  /// Major-axis length and cross extent in pixels for an H x H canvas.
  std::pair<double, double> extents(int size) const {
    const double area = area_fraction * size * size;
    switch (kind) {
      case ShapeKind::rectangle: {
        const double cross = std::sqrt(area / aspect);
        return {aspect * cross, cross};
      }
      case ShapeKind::ellipse: {
        const double cross = 2.0 * std::sqrt(area / (std::numbers::pi * aspect));
        return {aspect * cross, cross};
      }
      default: {
        const double cross = std::sqrt(2.0 * area / aspect);
        return {aspect * cross, cross};
      }
    }
  }

  /// Point test in pixel coordinates.
  bool contains(double x, double y, int size) const {
    const auto [len, cross] = extents(size);
    const double c = std::cos(orientation), s = std::sin(orientation);
    const double dx = x - cx, dy = y - cy;
    // screen y grows downwards, so a counter-clockwise axis is (c, -s)
    const double u = dx * c - dy * s;
    const double v = dx * s + dy * c;
    switch (kind) {
      case ShapeKind::rectangle: return std::abs(u) <= len / 2 && std::abs(v) <= cross / 2;
      case ShapeKind::ellipse: {
        const double a = u / (len / 2), b = v / (cross / 2);
        return a * a + b * b <= 1.0;
      }
      default: {
        // apex at u = 2L/3, base at u = -L/3; centroid at the origin
        if (u > 2 * len / 3 || u < -len / 3) return false;
        const double half = (cross / 2) * (2 * len / 3 - u) / len;
        return std::abs(v) <= half;
      }
    }
  }
};

/// Hard rasterization by pixel-centre sampling, clipped to the canvas.
inline Mask rasterize(const ShapeSpec& shape, int size) {
  Mask m(static_cast<std::size_t>(size) * size, 0);
  for (int r = 0; r < size; ++r)
    for (int col = 0; col < size; ++col)
      m[static_cast<std::size_t>(r) * size + col] = shape.contains(col + 0.5, r + 0.5, size);
  return m;
}

// ---------------------------------------------------------------------------
// attributes and expressions

enum class Slot { size, orientation, vertical, horizontal, intensity, order };

struct Attributes {
  ShapeKind kind;
  int size;         // 0 tiny .. 4 huge
  int orientation;  // 0 horizontal, 1 rising, 2 vertical, 3 falling
  int vertical;     // 0 top, 1 middle, 2 bottom
  int horizontal;   // 0 left, 1 center, 2 right
  Intensity intensity;
  int order;  // -1 none, 0 largest, 1 smallest (among shapes of the same kind)

  int value(Slot s) const {
    switch (s) {
      case Slot::size: return size;
      case Slot::orientation: return orientation;
      case Slot::vertical: return vertical;
      case Slot::horizontal: return horizontal;
      case Slot::intensity: return static_cast<int>(intensity);
      default: return order;
    }
  }
};

inline int size_class(double area_fraction) {
  static constexpr double bounds[] = {0.01, 0.03, 0.08, 0.2};
  int c = 0;
  while (c < 4 && area_fraction >= bounds[c]) ++c;
  return c;
}

inline int orientation_class(double phi) {
  double a = std::fmod(phi, std::numbers::pi);
  if (a < 0) a += std::numbers::pi;
  return static_cast<int>(std::floor(a / (std::numbers::pi / 4) + 0.5)) % 4;
}

inline int third(double coord, int size) { return std::clamp(static_cast<int>(3.0 * coord / size), 0, 2); }

inline std::vector<Attributes> scene_attributes(const std::vector<ShapeSpec>& shapes, int size) {
  std::vector<Attributes> out;
  for (const auto& s : shapes)
    out.push_back({s.kind, size_class(s.area_fraction), orientation_class(s.orientation), third(s.cy, size),
                   third(s.cx, size), s.intensity, -1});
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    int same = 0;
    bool largest = true, smallest = true;
    for (std::size_t j = 0; j < shapes.size(); ++j) {
      if (shapes[j].kind != shapes[i].kind) continue;
      ++same;
      if (j == i) continue;
      if (shapes[j].area_fraction >= shapes[i].area_fraction) largest = false;
      if (shapes[j].area_fraction <= shapes[i].area_fraction) smallest = false;
    }
    if (same >= 2) out[i].order = largest ? 0 : smallest ? 1 : -1;
  }
  return out;
}

/// Indices of shapes whose attributes agree with `target` on the kind and on
/// every slot in `slots`.
inline std::vector<int> matching_shapes(const std::vector<Attributes>& attrs, const Attributes& target,
                                        const std::vector<Slot>& slots) {
  std::vector<int> hits;
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    bool ok = attrs[i].kind == target.kind;
    for (Slot s : slots) ok = ok && attrs[i].value(s) == target.value(s);
    if (ok) hits.push_back(static_cast<int>(i));
  }
  return hits;
}

inline std::string render_expression(const Attributes& a, const std::vector<Slot>& slots) {
  auto has = [&](Slot s) { return std::find(slots.begin(), slots.end(), s) != slots.end(); };
  static const char* sizes[] = {"tiny", "small", "medium", "large", "huge"};
  static const char* orients[] = {"horizontal", "rising", "vertical", "falling"};
  static const char* verticals[] = {"top", "middle", "bottom"};
  static const char* horizontals[] = {"left", "center", "right"};
  std::string e = "the";
  if (has(Slot::order)) e += a.order == 0 ? " largest" : " smallest";
  if (has(Slot::size)) e += std::string(" ") + sizes[a.size];
  if (has(Slot::intensity)) e += std::string(" ") + intensity_word(a.intensity);
  if (has(Slot::orientation)) e += std::string(" ") + orients[a.orientation];
  e += std::string(" ") + kind_word(a.kind);
  const bool v = has(Slot::vertical), h = has(Slot::horizontal);
  if (v && h)
    e += std::string(" in the ") + verticals[a.vertical] + " " + horizontals[a.horizontal];
  else if (v)
    e += std::string(" at the ") + verticals[a.vertical];
  else if (h)
    e += std::string(" on the ") + horizontals[a.horizontal];
  return e;
}

/// Inverse of render_expression: the attributes named by an expression and
/// the slots it uses. Attributes not mentioned are left at zero.
inline std::pair<Attributes, std::vector<Slot>> parse_expression(std::string_view expression) {
  std::vector<std::string> w;
  {
    std::istringstream in{std::string(expression)};
    for (std::string t; in >> t;) w.push_back(t);
  }
  auto fail = [&] { return UsageError("expression '" + std::string(expression) + "' does not follow the template"); };
  auto index_of = [](const std::string& word, std::initializer_list<const char*> options) {
    int i = 0;
    for (const char* o : options) {
      if (word == o) return i;
      ++i;
    }
    return -1;
  };
  Attributes a{ShapeKind::rectangle, 0, 0, 0, 0, Intensity::dark, -1};
  std::vector<Slot> slots;
  std::size_t i = 0;
  if (w.empty() || w[i++] != "the") throw fail();
  bool kind_seen = false;
  for (; i < w.size() && !kind_seen; ++i) {
    int k = -1;
    if ((k = index_of(w[i], {"largest", "smallest"})) >= 0) {
      a.order = k;
      slots.push_back(Slot::order);
    } else if ((k = index_of(w[i], {"tiny", "small", "medium", "large", "huge"})) >= 0) {
      a.size = k;
      slots.push_back(Slot::size);
    } else if ((k = index_of(w[i], {"dark", "gray", "bright"})) >= 0) {
      a.intensity = static_cast<Intensity>(k);
      slots.push_back(Slot::intensity);
    } else if ((k = index_of(w[i], {"horizontal", "rising", "vertical", "falling"})) >= 0) {
      a.orientation = k;
      slots.push_back(Slot::orientation);
    } else if ((k = index_of(w[i], {"rectangle", "ellipse", "triangle"})) >= 0) {
      a.kind = static_cast<ShapeKind>(k);
      kind_seen = true;
    } else {
      throw fail();
    }
  }
  if (!kind_seen) throw fail();
  const std::size_t rest = w.size() - i;
  if (rest == 0) return {a, slots};
  if (w[i + 1] != "the") throw fail();
  if (rest == 4 && w[i] == "in") {
    a.vertical = index_of(w[i + 2], {"top", "middle", "bottom"});
    a.horizontal = index_of(w[i + 3], {"left", "center", "right"});
    if (a.vertical < 0 || a.horizontal < 0) throw fail();
    slots.push_back(Slot::vertical);
    slots.push_back(Slot::horizontal);
  } else if (rest == 3 && w[i] == "at") {
    if ((a.vertical = index_of(w[i + 2], {"top", "middle", "bottom"})) < 0) throw fail();
    slots.push_back(Slot::vertical);
  } else if (rest == 3 && w[i] == "on") {
    if ((a.horizontal = index_of(w[i + 2], {"left", "center", "right"})) < 0) throw fail();
    slots.push_back(Slot::horizontal);
  } else {
    throw fail();
  }
  return {a, slots};
}

/// One of the eight symmetries of the square: transpose first (when set),
/// then mirror columns, then mirror rows.
struct SquareSymmetry {
  bool transpose = false, mirror_columns = false, mirror_rows = false;

  static SquareSymmetry from_code(int code) { return {(code & 4) != 0, (code & 1) != 0, (code & 2) != 0}; }

  /// Source pixel (row, col) of output pixel (r, c) on an n x n grid.
  std::pair<int, int> source(int r, int c, int n) const {
    if (mirror_rows) r = n - 1 - r;
    if (mirror_columns) c = n - 1 - c;
    return transpose ? std::pair{c, r} : std::pair{r, c};
  }

  /// A transpose turns a row position into a column position.
  std::vector<Slot> apply(std::vector<Slot> slots) const {
    if (transpose)
      for (Slot& s : slots)
        if (s == Slot::vertical || s == Slot::horizontal) s = s == Slot::vertical ? Slot::horizontal : Slot::vertical;
    return slots;
  }

  Attributes apply(Attributes a) const {
    if (transpose) {
      std::swap(a.vertical, a.horizontal);
      if (a.orientation % 2 == 0) a.orientation = 2 - a.orientation;
    }
    if (mirror_columns) a.horizontal = 2 - a.horizontal;
    if (mirror_rows) a.vertical = 2 - a.vertical;
    if (mirror_columns != mirror_rows && a.orientation % 2 == 1) a.orientation = 4 - a.orientation;
    return a;
  }

  /// The same map on continuous shape geometry (used to cross-check).
  ShapeSpec apply(ShapeSpec s, int size) const {
    const double two_pi = 2 * std::numbers::pi;
    auto wrap = [two_pi](double phi) {
      phi = std::fmod(phi, two_pi);
      return phi < 0 ? phi + two_pi : phi;
    };
    if (transpose) {
      std::swap(s.cx, s.cy);
      s.orientation = wrap(1.5 * std::numbers::pi - s.orientation);
    }
    if (mirror_columns) {
      s.cx = size - s.cx;
      s.orientation = wrap(std::numbers::pi - s.orientation);
    }
    if (mirror_rows) {
      s.cy = size - s.cy;
      s.orientation = wrap(-s.orientation);
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// scenes

struct Scene {
  int size = 0;
  std::vector<std::uint8_t> image;  // H x W x 3, row-major, 8-bit
  std::vector<ShapeSpec> shapes;    // empty when read from disk without shapes.tsv
  int referred = -1;
  std::string expression;
  std::vector<int> tokens;  // unpadded
  Mask mask;                // H x W, 0/1

  double mask_fraction() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return static_cast<double>(n) / static_cast<double>(mask.size());
  }
};

struct GeneratorOptions {
  double min_area = 0.005, max_area = 0.4;
  int min_shapes = 2, max_shapes = 5;
  double min_mask_fraction = 0.004, max_mask_fraction = 0.45;
  int placement_retries = 40;
  /// The referred shape is drawn with weight area^-referral_bias.
  double referral_bias = 0.25;
};

namespace detail {

inline bool try_place(ShapeSpec& s, int size, const Mask& occupied, const GeneratorOptions& opt, Rng& rng,
                      Mask& out) {
  const double nominal = s.area_fraction * size * size;
  for (int attempt = 0; attempt < opt.placement_retries; ++attempt) {
    s.cx = rng.uniform(0.0, size);
    s.cy = rng.uniform(0.0, size);
    out = rasterize(s, size);
    std::size_t count = 0;
    bool overlap = false;
    for (std::size_t i = 0; i < out.size() && !overlap; ++i) {
      count += out[i];
      overlap = out[i] && occupied[i];
    }
    const double frac = static_cast<double>(count) / static_cast<double>(out.size());
    if (overlap || count < 0.9 * nominal || frac < opt.min_mask_fraction || frac > opt.max_mask_fraction) continue;
    return true;
  }
  return false;
}

/// Occupancy grown by one pixel so neighbouring shapes never touch.
inline void mark_occupied(Mask& occupied, const Mask& m, int size) {
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      if (!m[static_cast<std::size_t>(r) * size + c]) continue;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < size && cc >= 0 && cc < size) occupied[static_cast<std::size_t>(rr) * size + cc] = 1;
        }
    }
}

inline ShapeSpec sample_shape(const GeneratorOptions& opt, Rng& rng) {
  ShapeSpec s;
  s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  s.area_fraction = std::exp(rng.uniform(std::log(opt.min_area), std::log(opt.max_area)));
  s.aspect = rng.uniform(1.5, 3.0);
  s.orientation = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.intensity = static_cast<Intensity>(rng.uniform_int(0, 2));
  static constexpr double levels[] = {0.08, 0.6, 0.93};
  for (auto& ch : s.color)
    ch = std::clamp(levels[static_cast<int>(s.intensity)] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  return s;
}

/// Slots drawn in random order until the expression singles out `referred`;
/// nothing when even all slots leave a tie.
inline std::optional<std::vector<Slot>> choose_slots(const std::vector<Attributes>& attrs, int referred, Rng& rng) {
  std::vector<Slot> pool{Slot::size, Slot::orientation, Slot::vertical, Slot::horizontal, Slot::intensity};
  if (attrs[referred].order >= 0) pool.push_back(Slot::order);
  std::shuffle(pool.begin(), pool.end(), rng.engine());
  std::vector<Slot> slots;
  for (Slot s : pool) {
    if (matching_shapes(attrs, attrs[referred], slots).size() == 1) break;
    if (s == Slot::order) slots.erase(std::remove(slots.begin(), slots.end(), Slot::size), slots.end());
    if (s == Slot::size && std::find(slots.begin(), slots.end(), Slot::order) != slots.end()) continue;
    slots.push_back(s);
  }
  if (matching_shapes(attrs, attrs[referred], slots).size() != 1) return std::nullopt;
  return slots;
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Scene `index` of the dataset with the given seed; a pure function of its
/// arguments, so scenes can be generated independently.
inline Scene generate_scene(std::uint64_t seed, std::uint64_t index, int size, const GeneratorOptions& opt = {}) {
  if (size < 8) throw UsageError("scene size must be at least 8");
  Rng rng(seed ^ mix_seed(index + 0x5ce9e));
  const std::size_t pixels = static_cast<std::size_t>(size) * size;
  for (;;) {
    const int count = rng.uniform_int(opt.min_shapes, opt.max_shapes);
    std::vector<ShapeSpec> shapes;
    std::vector<Mask> masks;
    Mask occupied(pixels, 0);
    bool placed = true;
    for (int k = 0; k < count && placed; ++k) {
      ShapeSpec s = detail::sample_shape(opt, rng);
      Mask m;
      placed = detail::try_place(s, size, occupied, opt, rng, m);
      if (!placed) break;
      detail::mark_occupied(occupied, m, size);
      shapes.push_back(s);
      masks.push_back(std::move(m));
    }
    if (!placed) continue;

    const auto attrs = scene_attributes(shapes, size);
    std::vector<double> weights;
    for (const auto& s : shapes) weights.push_back(std::pow(s.area_fraction, -opt.referral_bias));
    const int referred = std::discrete_distribution<int>(weights.begin(), weights.end())(rng.engine());
    const auto slots = detail::choose_slots(attrs, referred, rng);
    if (!slots) continue;

    Scene scene;
    scene.size = size;
    scene.shapes = std::move(shapes);
    scene.referred = referred;
    scene.expression = render_expression(attrs[referred], *slots);
    scene.tokens = tokenize(scene.expression);
    scene.mask = masks[static_cast<std::size_t>(referred)];

    // background: a gentle linear ramp plus pixel noise, shapes painted flat
    const double base = rng.uniform(0.25, 0.4);
    const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
    const std::array<double, 3> tint{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)};
    scene.image.resize(pixels * 3);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        const std::size_t p = static_cast<std::size_t>(r) * size + c;
        std::array<double, 3> rgb;
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = base + tint[ch] + gx * (c / double(size) - 0.5) + gy * (r / double(size) - 0.5);
        for (std::size_t k = 0; k < scene.shapes.size(); ++k)
          if (masks[k][p]) rgb = scene.shapes[k].color;
        const double noise = rng.normal(0.0, 0.02);
        for (int ch = 0; ch < 3; ++ch) scene.image[p * 3 + ch] = detail::quantize(rgb[ch] + noise);
      }
    return scene;
  }
}

inline std::vector<Scene> generate(std::uint64_t seed, int count, int size, const GeneratorOptions& opt = {}) {
  if (count < 1) throw UsageError("scene count must be at least 1");
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(seed, static_cast<std::uint64_t>(i), size, opt));
  return scenes;
}

// ---------------------------------------------------------------------------
// binary PNM

struct PnmImage {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("pnm images have 1 or 3 channels");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw DimensionError("pixel buffer does not match " + std::to_string(img.width) + "x" + std::to_string(img.height));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// Reads binary P5 or P6 with maxval 255; header comments are allowed.
inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string name = path.string();
  auto fail = [&](const std::string& what) -> IoError { return IoError(name + ": " + what); };
  auto token = [&]() {
    std::string t;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    if (t.empty()) throw fail("truncated header");
    return t;
  };
  auto number = [&]() {
    const std::string t = token();
    if (t.size() > 6 || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw fail("malformed header field '" + t + "'");
    return std::stoi(t);
  };
  PnmImage img;
  const std::string magic = token();
  if (magic == "P6")
    img.channels = 3;
  else if (magic == "P5")
    img.channels = 1;
  else
    throw fail("not a binary PPM/PGM (magic '" + magic + "')");
  img.width = number();
  img.height = number();
  const int maxval = number();
  if (img.width < 1 || img.height < 1) throw fail("empty image");
  if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " is not supported");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw fail("truncated pixel data");
  return img;
}

inline void write_mask_pgm(const std::filesystem::path& path, const Mask& mask, int width, int height) {
  PnmImage img{width, height, 1, {}};
  img.pixels.reserve(mask.size());
  for (auto v : mask) img.pixels.push_back(v ? 255 : 0);
  write_pnm(path, img);
}

inline Mask read_mask_pgm(const std::filesystem::path& path) {
  const PnmImage img = read_pnm(path);
  if (img.channels != 1) throw IoError(path.string() + ": mask must be a PGM");
  Mask m(img.pixels.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (img.pixels[i] != 0 && img.pixels[i] != 255) throw IoError(path.string() + ": mask values must be 0 or 255");
    m[i] = img.pixels[i] != 0;
  }
  return m;
}

// ---------------------------------------------------------------------------
// dataset directories

inline constexpr const char* kAnnotationFile = "annotations.tsv";
inline constexpr const char* kShapeFile = "shapes.tsv";

namespace detail {

inline std::string shape_record(const ShapeSpec& s) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g,%.17g,%.17g", static_cast<int>(s.kind), s.cx,
                s.cy, s.area_fraction, s.aspect, s.orientation, static_cast<int>(s.intensity), s.color[0], s.color[1],
                s.color[2]);
  return buf;
}

inline ShapeSpec parse_shape_record(const std::string& text) {
  std::vector<double> v;
  std::istringstream in(text);
  for (std::string f; std::getline(in, f, ',');) {
    std::size_t used = 0;
    v.push_back(std::stod(f, &used));
    if (used != f.size()) throw std::invalid_argument(f);
  }
  if (v.size() != 10) throw std::invalid_argument(text);
  auto category = [](double x, int count) {
    const int k = static_cast<int>(x);
    if (k != x || k < 0 || k >= count) throw std::invalid_argument("category");
    return k;
  };
  ShapeSpec s;
  s.kind = static_cast<ShapeKind>(category(v[0], 3));
  s.cx = v[1];
  s.cy = v[2];
  s.area_fraction = v[3];
  s.aspect = v[4];
  s.orientation = v[5];
  s.intensity = static_cast<Intensity>(category(v[6], 3));
  s.color = {v[7], v[8], v[9]};
  return s;
}

}  // namespace detail

/// `scene` seen through a symmetry of the square: pixels and mask are
/// permuted and the expression is re-rendered with the position and
/// orientation words that now describe the referred shape. Any shape list is
/// transformed along.
inline Scene transform_scene(const Scene& scene, SquareSymmetry t) {
  const int n = scene.size;
  Scene out;
  out.size = n;
  out.referred = scene.referred;
  out.image.resize(scene.image.size());
  out.mask.resize(scene.mask.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const auto [sr, sc] = t.source(r, c, n);
      const std::size_t dst = static_cast<std::size_t>(r) * n + c, src = static_cast<std::size_t>(sr) * n + sc;
      out.mask[dst] = scene.mask[src];
      for (int ch = 0; ch < 3; ++ch) out.image[dst * 3 + ch] = scene.image[src * 3 + ch];
    }
  for (const auto& s : scene.shapes) out.shapes.push_back(t.apply(s, n));
  const auto [attrs, slots] = parse_expression(scene.expression);
  out.expression = render_expression(t.apply(attrs), t.apply(slots));
  out.tokens = tokenize(out.expression);
  return out;
}

/// The same picture with shape `target` as the referent, described by a
/// fresh expression drawn like the generator's; nothing when every
/// expression would leave a tie. Needs the scene's shape list.
inline std::optional<Scene> refer_to(const Scene& scene, int target, Rng& rng) {
  if (scene.shapes.empty()) throw UsageError("re-referring needs the scene's shape list");
  if (target < 0 || target >= static_cast<int>(scene.shapes.size()))
    throw UsageError("shape " + std::to_string(target) + " is not in the scene");
  const auto attrs = scene_attributes(scene.shapes, scene.size);
  const auto slots = detail::choose_slots(attrs, target, rng);
  if (!slots) return std::nullopt;
  Scene out = scene;
  out.referred = target;
  out.expression = render_expression(attrs[target], *slots);
  out.tokens = tokenize(out.expression);
  out.mask = rasterize(scene.shapes[target], scene.size);
  return out;
}

/// Writes images/<id>.ppm, masks/<id>.pgm and annotations.tsv with one
/// tab-separated record per scene: id, image path, mask path, comma-separated
/// token ids, expression.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream ann(dir / kAnnotationFile);
  if (!ann) throw IoError("cannot write " + (dir / kAnnotationFile).string());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    char id[16];
    std::snprintf(id, sizeof id, "%06zu", i);
    const std::string image = std::string("images/") + id + ".ppm", mask = std::string("masks/") + id + ".pgm";
    write_pnm(dir / image, PnmImage{s.size, s.size, 3, s.image});
    write_mask_pgm(dir / mask, s.mask, s.size, s.size);
    ann << id << '\t' << image << '\t' << mask << '\t';
    for (std::size_t k = 0; k < s.tokens.size(); ++k) ann << (k ? "," : "") << s.tokens[k];
    ann << '\t' << s.expression << '\n';
  }
  if (!ann) throw IoError("failed writing " + (dir / kAnnotationFile).string());
  const bool with_shapes = std::all_of(scenes.begin(), scenes.end(), [](const Scene& s) { return !s.shapes.empty(); });
  if (!with_shapes) {
    fs::remove(dir / kShapeFile);
    return;
  }
  std::ofstream shp(dir / kShapeFile);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "%06zu", i);
    shp << id << '\t' << scenes[i].referred;
    for (const auto& sh : scenes[i].shapes) shp << '\t' << detail::shape_record(sh);
    shp << '\n';
  }
  if (!shp) throw IoError("failed writing " + (dir / kShapeFile).string());
}

/// FNV-1a hash over every image, mask and token id, as 16 hex digits.
inline std::string dataset_fingerprint(const std::vector<Scene>& scenes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : scenes) {
    mix(static_cast<std::uint64_t>(s.size));
    for (auto v : s.image) mix(v);
    for (auto v : s.mask) mix(v);
    for (int t : s.tokens) mix(static_cast<std::uint64_t>(t));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Fills in shape lists from the optional shapes.tsv of `dir`. Each
/// record must describe the scene's mask exactly.
inline void load_shapes(const std::filesystem::path& dir, std::vector<Scene>& scenes) {
  const auto path = dir / kShapeFile;
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      return IoError(path.string() + ":" + std::to_string(n + 1) + ": " + what);
    };
    if (n >= scenes.size()) throw fail("more records than scenes");
    std::vector<std::string> fields;
    std::istringstream fs_in(line);
    for (std::string f; std::getline(fs_in, f, '\t');) fields.push_back(f);
    if (fields.size() < 3) throw fail("expected id, referred index and at least one shape");
    Scene& s = scenes[n];
    try {
      s.referred = std::stoi(fields[1]);
      for (std::size_t k = 2; k < fields.size(); ++k) s.shapes.push_back(detail::parse_shape_record(fields[k]));
    } catch (const std::exception&) {
      throw fail("malformed shape record");
    }
    if (s.referred < 0 || s.referred >= static_cast<int>(s.shapes.size())) throw fail("referred index out of range");
    if (rasterize(s.shapes[static_cast<std::size_t>(s.referred)], s.size) != s.mask)
      throw fail("referred shape does not match the mask");
    ++n;
  }
  if (n != scenes.size())
    throw IoError(path.string() + ": " + std::to_string(n) + " records for " + std::to_string(scenes.size()) + " scenes");
}

inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  const auto ann_path = dir / kAnnotationFile;
  std::ifstream ann(ann_path);
  if (!ann) throw IoError("cannot open " + ann_path.string());
  std::vector<Scene> scenes;
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto fail = [&](const std::string& what) {
      return IoError(ann_path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) throw fail("expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    Scene s;
    const PnmImage img = read_pnm(dir / fields[1]);
    if (img.channels != 3) throw IoError((dir / fields[1]).string() + ": image must be a PPM");
    if (img.width != img.height)
      throw IoError((dir / fields[1]).string() + ": image must be square, got " + std::to_string(img.width) + "x" +
                    std::to_string(img.height));
    s.size = img.width;
    s.image = img.pixels;
    s.mask = read_mask_pgm(dir / fields[2]);
    if (s.mask.size() != static_cast<std::size_t>(s.size) * s.size)
      throw IoError((dir / fields[2]).string() + ": extents differ from " + fields[1]);
    if (!scenes.empty() && s.size != scenes.front().size)
      throw IoError((dir / fields[1]).string() + ": extent " + std::to_string(s.size) + " differs from the dataset's " +
                    std::to_string(scenes.front().size));
    std::istringstream ids(fields[3]);
    for (std::string t; std::getline(ids, t, ',');) {
      try {
        s.tokens.push_back(std::stoi(t));
      } catch (const std::exception&) {
        throw fail("bad token id '" + t + "'");
      }
    }
    s.expression = fields[4];
    try {
      if (tokenize(s.expression) != s.tokens) throw fail("token ids do not match the expression");
    } catch (const UsageError& e) {
      throw fail(e.what());
    }
    scenes.push_back(std::move(s));
  }
  if (scenes.empty()) throw IoError(ann_path.string() + ": no records");
  load_shapes(dir, scenes);
  return scenes;
}

// ---------------------------------------------------------------------------
// batches

template <typename T>
struct Batch {
  Tensor<T> images;     // [B,3,H,W] in [0,1]
  std::vector<int> ids;  // B rows of max_tokens ids
  std::vector<int> labels;  // B*H*W
};

template <typename T>
Batch<T> make_batch(const std::vector<Scene>& scenes, std::span<const std::size_t> indices, int max_tokens) {
  if (indices.empty()) throw UsageError("empty batch");
  const int h = scenes.at(indices[0]).size;
  const std::size_t hw = static_cast<std::size_t>(h) * h;
  std::vector<T> img(indices.size() * 3 * hw);
  Batch<T> b;
  for (std::size_t bi = 0; bi < indices.size(); ++bi) {
    const Scene& s = scenes.at(indices[bi]);
    if (s.size != h) throw DimensionError("scenes in a batch must share one extent");
    for (std::size_t p = 0; p < hw; ++p)
      for (int ch = 0; ch < 3; ++ch)
        img[(bi * 3 + static_cast<std::size_t>(ch)) * hw + p] = static_cast<T>(s.image[p * 3 + ch] / 255.0);
    if (static_cast<int>(s.tokens.size()) > max_tokens)
      throw UsageError("expression '" + s.expression + "' exceeds " + std::to_string(max_tokens) + " tokens");
    std::vector<int> ids = s.tokens;
    ids.resize(static_cast<std::size_t>(max_tokens), 0);
    b.ids.insert(b.ids.end(), ids.begin(), ids.end());
    b.labels.insert(b.labels.end(), s.mask.begin(), s.mask.end());
  }
  b.images = Tensor<T>({static_cast<int>(indices.size()), 3, h, h}, std::move(img));
  return b;
}

}  // namespace rmsin
