#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "rmsin/data.hpp"

using namespace rmsin;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = RMSIN_FIXTURE_DIR;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rmsin_data_test_" + name);
  fs::remove_all(p);
  return p;
}

// Independent attribute computation from the raw shape parameters.
struct Described {
  std::string kind, size, intensity, orientation, vertical, horizontal, order;
};

Described describe(const std::vector<ShapeSpec>& shapes, std::size_t i, int h) {
  const ShapeSpec& s = shapes[i];
  Described d;
  d.kind = s.kind == ShapeKind::rectangle ? "rectangle" : s.kind == ShapeKind::ellipse ? "ellipse" : "triangle";
  const double a = s.area_fraction;
  d.size = a < 0.01 ? "tiny" : a < 0.03 ? "small" : a < 0.08 ? "medium" : a < 0.2 ? "large" : "huge";
  d.intensity = s.intensity == Intensity::dark ? "dark" : s.intensity == Intensity::gray ? "gray" : "bright";
  const double deg = std::fmod(s.orientation * 180.0 / std::numbers::pi, 180.0);
  d.orientation = deg < 22.5 || deg >= 157.5 ? "horizontal" : deg < 67.5 ? "rising" : deg < 112.5 ? "vertical" : "falling";
  const char* v[] = {"top", "middle", "bottom"};
  const char* hz[] = {"left", "center", "right"};
  d.vertical = v[std::min(2, int(s.cy * 3 / h))];
  d.horizontal = hz[std::min(2, int(s.cx * 3 / h))];
  int same = 0, bigger = 0, smaller = 0;
  for (const auto& o : shapes) {
    if (o.kind != s.kind) continue;
    ++same;
    bigger += o.area_fraction > a;
    smaller += o.area_fraction < a;
  }
  if (same >= 2 && bigger == 0) d.order = "largest";
  if (same >= 2 && smaller == 0) d.order = "smallest";
  return d;
}

bool satisfies(const Described& d, const std::string& expression) {
  std::istringstream in(expression);
  for (std::string w; in >> w;) {
    if (w == "the" || w == "in" || w == "at" || w == "on") continue;
    if (w == d.kind || w == d.size || w == d.intensity || w == d.orientation || w == d.vertical ||
        w == d.horizontal || w == d.order)
      continue;
    return false;
  }
  return true;
}

}  // namespace

TEST(Vocab, PaddingIsZeroAndIdsAreDense) {
  const auto& v = Vocab::instance();
  EXPECT_EQ(v.word(0), "<pad>");
  EXPECT_GE(v.size(), 55);
  EXPECT_LE(v.size(), 70);
  for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.word(i)), i);
}

TEST(Tokenize, PaddingRoundTripAndErrors) {
  EXPECT_EQ(tokenize("", 5), (std::vector<int>{0, 0, 0, 0, 0}));
  const std::string s = "the small dark rising rectangle in the top left";
  const auto ids = tokenize(s, 12);
  EXPECT_EQ(ids.size(), 12u);
  EXPECT_EQ(ids[9], 0);
  EXPECT_EQ(detokenize(ids), s);
  EXPECT_EQ(tokenize(s, 3).size(), 3u);
  EXPECT_EQ(detokenize(tokenize(s, 3)), "the small dark");
  EXPECT_THROW(tokenize("the purple rectangle"), UsageError);
}

TEST(Rasterize, AxisAlignedRectangleBoundingBox) {
  for (double area : {0.01, 0.05, 0.2}) {
    ShapeSpec s;
    s.kind = ShapeKind::rectangle;
    s.area_fraction = area;
    s.aspect = 2.0;
    s.orientation = 0.0;
    s.cx = 31.3;
    s.cy = 30.6;
    const int h = 64;
    const Mask m = rasterize(s, h);
    int r0 = h, r1 = -1, c0 = h, c1 = -1;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < h; ++c)
        if (m[r * h + c]) {
          r0 = std::min(r0, r), r1 = std::max(r1, r);
          c0 = std::min(c0, c), c1 = std::max(c1, c);
        }
    const double len = std::sqrt(area * h * h * 2.0), cross = len / 2.0;
    EXPECT_NEAR(c1 - c0 + 1, len, 1.0) << area;
    EXPECT_NEAR(r1 - r0 + 1, cross, 1.0) << area;
  }
}

TEST(Rasterize, AreaMatchesNominalForEveryKind) {
  for (ShapeKind k : {ShapeKind::rectangle, ShapeKind::ellipse, ShapeKind::triangle}) {
    ShapeSpec s;
    s.kind = k;
    s.area_fraction = 0.1;
    s.aspect = 1.7;
    s.orientation = 0.7;
    s.cx = s.cy = 64;
    std::size_t n = 0;
    for (auto v : rasterize(s, 128)) n += v;
    EXPECT_NEAR(n / (128.0 * 128.0), 0.1, 0.004) << kind_word(k);
  }
}

TEST(Rasterize, OrientationIsCounterClockwiseOnScreen) {
  ShapeSpec s;
  s.kind = ShapeKind::rectangle;
  s.area_fraction = 0.03;
  s.aspect = 3.0;
  s.orientation = std::numbers::pi / 4;
  s.cx = s.cy = 32;
  const Mask m = rasterize(s, 64);
  // rising diagonal: up-right and down-left of the centre are inside
  EXPECT_TRUE(m[(32 - 5) * 64 + 32 + 5]);
  EXPECT_TRUE(m[(32 + 5) * 64 + 32 - 5]);
  EXPECT_FALSE(m[(32 + 5) * 64 + 32 + 5]);
}

TEST(Generate, DeterministicPerSeed) {
  const auto a = generate(5, 20, 64), b = generate(5, 20, 64), c = generate(6, 20, 64);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].expression, b[i].expression);
    differs = differs || a[i].image != c[i].image;
  }
  EXPECT_TRUE(differs);
  // scene i does not depend on how many scenes are generated
  EXPECT_EQ(generate(5, 3, 64)[2].image, a[2].image);
  EXPECT_THROW(generate(5, 0, 64), UsageError);
}

TEST(Generate, ScenesHonourTheirContracts) {
  const int h = 64;
  const auto scenes = generate(21, 300, h);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    ASSERT_GE(s.shapes.size(), 2u);
    ASSERT_LE(s.shapes.size(), 5u);
    EXPECT_GE(s.mask_fraction(), 0.004) << i;
    EXPECT_LE(s.mask_fraction(), 0.45) << i;
    EXPECT_EQ(s.mask, rasterize(s.shapes[static_cast<std::size_t>(s.referred)], h)) << i;
    EXPECT_EQ(s.tokens, tokenize(s.expression));
    EXPECT_LE(s.tokens.size(), 12u);
    for (const auto& sh : s.shapes) {
      EXPECT_GE(sh.area_fraction, 0.005);
      EXPECT_LE(sh.area_fraction, 0.4);
    }
    // exactly one shape satisfies every attribute in the expression
    int matches = 0, which = -1;
    for (std::size_t k = 0; k < s.shapes.size(); ++k)
      if (satisfies(describe(s.shapes, k, h), s.expression)) ++matches, which = static_cast<int>(k);
    EXPECT_EQ(matches, 1) << s.expression;
    EXPECT_EQ(which, s.referred) << s.expression;
  }
}

TEST(Generate, SmallObjectsDominate) {
  const auto scenes = generate(3, 1000, 64);
  int small = 0;
  for (const auto& s : scenes) small += s.mask_fraction() < 0.02;
  EXPECT_GE(small, 400);
}

TEST(Pnm, HandWrittenFixtureIsRowMajor) {
  const PnmImage img = read_pnm(kFixtures + "/ramp_2x2.pgm");
  EXPECT_EQ(img.width, 2);
  EXPECT_EQ(img.height, 2);
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{10, 20, 30, 40}));  // (0,0) (0,1) (1,0) (1,1)
  EXPECT_EQ(read_mask_pgm(kFixtures + "/diagonal_2x2.pgm"), (Mask{1, 0, 0, 1}));
  EXPECT_THROW(read_mask_pgm(kFixtures + "/ramp_2x2.pgm"), IoError);
}

TEST(Pnm, ErrorsNameTheFile) {
  const std::string truncated = kFixtures + "/truncated_2x2.pgm";
  try {
    read_pnm(truncated);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated_2x2.pgm"), std::string::npos);
  }
  const fs::path dir = scratch_dir("pnm");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  EXPECT_THROW(read_pnm(dir / "bad.pgm"), IoError);
  std::ofstream(dir / "hdr.pgm") << "P5\n2 x\n255\n";
  EXPECT_THROW(read_pnm(dir / "hdr.pgm"), IoError);
  std::ofstream(dir / "max.pgm") << "P5\n1 1\n65535\n\x01\x02";
  EXPECT_THROW(read_pnm(dir / "max.pgm"), IoError);
  EXPECT_THROW(read_pnm(dir / "missing.pgm"), IoError);
  fs::remove_all(dir);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = scratch_dir("roundtrip");
  const auto scenes = generate(9, 12, 32);
  save_dataset(dir, scenes);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(back[i].size, 32);
    EXPECT_EQ(back[i].image, scenes[i].image);
    EXPECT_EQ(back[i].mask, scenes[i].mask);
    EXPECT_EQ(back[i].tokens, scenes[i].tokens);
    EXPECT_EQ(back[i].expression, scenes[i].expression);
    EXPECT_EQ(back[i].referred, scenes[i].referred);
    ASSERT_EQ(back[i].shapes.size(), scenes[i].shapes.size());
    for (std::size_t k = 0; k < scenes[i].shapes.size(); ++k) {
      EXPECT_EQ(back[i].shapes[k].cx, scenes[i].shapes[k].cx);
      EXPECT_EQ(back[i].shapes[k].orientation, scenes[i].shapes[k].orientation);
      EXPECT_EQ(back[i].shapes[k].kind, scenes[i].shapes[k].kind);
      EXPECT_EQ(back[i].shapes[k].color, scenes[i].shapes[k].color);
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, ShapeRecordsAreOptionalButChecked) {
  const fs::path dir = scratch_dir("shapes");
  save_dataset(dir, generate(9, 3, 32));
  std::ifstream in(dir / kShapeFile);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  ASSERT_EQ(lines.size(), 3u);

  std::ofstream(dir / kShapeFile) << lines[1] << "\n" << lines[0] << "\n" << lines[2] << "\n";
  try {
    load_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match the mask"), std::string::npos) << e.what();
  }
  std::ofstream(dir / kShapeFile) << lines[0] << "\n";
  EXPECT_THROW(load_dataset(dir), IoError);
  std::ofstream(dir / kShapeFile) << "000000\t0\t1,2,3\n";
  EXPECT_THROW(load_dataset(dir), IoError);

  fs::remove(dir / kShapeFile);
  for (const auto& s : load_dataset(dir)) EXPECT_TRUE(s.shapes.empty());
  fs::remove_all(dir);
}

TEST(Dataset, LoadRejectsInconsistentFiles) {
  const fs::path dir = scratch_dir("broken");
  save_dataset(dir, generate(9, 2, 32));
  write_mask_pgm(dir / "masks/000001.pgm", Mask(64 * 64, 0), 64, 64);
  try {
    load_dataset(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("000001.pgm"), std::string::npos) << e.what();
  }
  std::ofstream(dir / kAnnotationFile) << "000000\timages/000000.ppm\tmasks/000000.pgm\t1,2\tthe ellipse\n";
  EXPECT_THROW(load_dataset(dir), IoError);
  std::ofstream(dir / kAnnotationFile) << "000000\timages/000000.ppm\n";
  EXPECT_THROW(load_dataset(dir), IoError);
  EXPECT_THROW(load_dataset(dir / "nowhere"), IoError);
  fs::remove_all(dir);
}

TEST(Batch, AssemblesImagesIdsAndLabels) {
  const auto scenes = generate(4, 3, 32);
  const std::vector<std::size_t> idx{2, 0};
  const auto b = make_batch<float>(scenes, idx, 12);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.ids.size(), 24u);
  EXPECT_EQ(b.labels.size(), 2u * 32 * 32);
  EXPECT_FLOAT_EQ(b.images[1 * 32 + 5], scenes[2].image[(1 * 32 + 5) * 3] / 255.0f);
  EXPECT_FLOAT_EQ(b.images[3 * 1024 + 2 * 1024 + 7], scenes[0].image[7 * 3 + 2] / 255.0f);
  EXPECT_EQ(b.ids[12], scenes[0].tokens[0]);
  EXPECT_EQ(b.labels[1024 + 100], scenes[0].mask[100]);
  EXPECT_THROW(make_batch<float>(scenes, idx, 2), UsageError);
}

TEST(Expression, ParseInvertsRender) {
  for (int i = 0; i < 300; ++i) {
    const Scene s = generate_scene(41, static_cast<std::uint64_t>(i), 64);
    const auto [a, slots] = parse_expression(s.expression);
    EXPECT_EQ(render_expression(a, slots), s.expression);
    const auto attrs = scene_attributes(s.shapes, 64);
    EXPECT_EQ(matching_shapes(attrs, a, slots), std::vector<int>{s.referred}) << s.expression;
  }
  EXPECT_THROW(parse_expression("the"), UsageError);
  EXPECT_THROW(parse_expression("a triangle"), UsageError);
  EXPECT_THROW(parse_expression("the triangle at the left"), UsageError);
  EXPECT_THROW(parse_expression("the triangle in the top"), UsageError);
}

TEST(Referral, FreshExpressionsSingleOutAnyShape) {
  Rng rng(5);
  int described = 0, ties = 0;
  for (int i = 0; i < 150; ++i) {
    const Scene s = generate_scene(44, static_cast<std::uint64_t>(i), 64);
    for (int t = 0; t < static_cast<int>(s.shapes.size()); ++t) {
      const auto r = refer_to(s, t, rng);
      if (!r) {
        ++ties;
        continue;
      }
      ++described;
      EXPECT_EQ(r->referred, t);
      EXPECT_EQ(r->image, s.image);
      EXPECT_EQ(r->tokens, tokenize(r->expression));
      if (t == s.referred) EXPECT_EQ(r->mask, s.mask);
      for (int o = 0; o < static_cast<int>(s.shapes.size()); ++o)
        EXPECT_EQ(satisfies(describe(s.shapes, static_cast<std::size_t>(o), 64), r->expression), o == t)
            << r->expression << " shape " << o;
    }
  }
  EXPECT_GT(described, 20 * ties);
  Scene bare = generate_scene(44, 0, 64);
  bare.shapes.clear();
  EXPECT_THROW(refer_to(bare, 0, rng), UsageError);
  EXPECT_THROW(refer_to(generate_scene(44, 0, 64), 9, rng), UsageError);
}

TEST(Symmetry, ImagePermutationsMatchTheirGeometry) {
  const SquareSymmetry quarter{true, false, true};  // transpose then mirror rows: a quarter turn
  const Scene s = generate_scene(42, 0, 16);
  const Scene q = transform_scene(s, quarter);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) EXPECT_EQ(q.mask[r * 16 + c], s.mask[c * 16 + (15 - r)]);
  Scene back = s;
  for (int k = 0; k < 4; ++k) back = transform_scene(back, quarter);
  EXPECT_EQ(back.image, s.image);
  EXPECT_EQ(back.expression, s.expression);
  const Scene same = transform_scene(s, SquareSymmetry{});
  EXPECT_EQ(same.image, s.image);
  EXPECT_EQ(same.mask, s.mask);
  EXPECT_EQ(same.tokens, s.tokens);
}

TEST(Symmetry, ExpressionsFollowTransformedShapes) {
  // Oracle: move the shapes themselves, rasterize and describe them afresh.
  std::size_t pixels = 0, mismatched = 0;
  for (int i = 0; i < 120; ++i) {
    const Scene s = generate_scene(43, static_cast<std::uint64_t>(i), 64);
    for (int code = 0; code < 8; ++code) {
      const auto sym = SquareSymmetry::from_code(code);
      const auto slots = sym.apply(parse_expression(s.expression).second);
      const Scene t = transform_scene(s, sym);
      const auto attrs = scene_attributes(t.shapes, 64);
      EXPECT_EQ(t.expression, render_expression(attrs[s.referred], slots)) << s.expression << " code " << code;
      EXPECT_EQ(matching_shapes(attrs, attrs[s.referred], slots).size(), 1u);
      const Mask direct = rasterize(t.shapes[s.referred], 64);
      for (std::size_t p = 0; p < direct.size(); ++p) mismatched += direct[p] != t.mask[p];
      pixels += direct.size();
    }
  }
  // only pixel centres lying on a shape boundary may round differently
  EXPECT_LT(static_cast<double>(mismatched) / static_cast<double>(pixels), 1e-5);
}
