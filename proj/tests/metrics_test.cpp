#include <gtest/gtest.h>

#include <random>

#include "rmsin/metrics.hpp"

using namespace rmsin;

namespace {

Mask random_mask(std::mt19937& gen, int n, double density) {
  std::bernoulli_distribution d(density);
  Mask m(static_cast<std::size_t>(n));
  for (auto& v : m) v = d(gen);
  return m;
}

// Independent brute-force recomputation from raw pixel counts.
struct Brute {
  double miou, oiou;
  std::array<double, 5> precision;
};

Brute brute_force(const std::vector<MaskPair>& pairs) {
  long long inter_total = 0, union_total = 0;
  std::vector<double> ious;
  for (const auto& p : pairs) {
    long long i = 0, u = 0;
    for (std::size_t k = 0; k < p.truth.size(); ++k) {
      if (p.prediction[k] == 1 && p.truth[k] == 1) ++i;
      if (p.prediction[k] == 1 || p.truth[k] == 1) ++u;
    }
    inter_total += i;
    union_total += u;
    ious.push_back(u ? double(i) / double(u) : 1.0);
  }
  Brute b{};
  for (double v : ious) b.miou += v;
  b.miou /= double(ious.size());
  b.oiou = double(inter_total) / double(union_total);
  const double th[5] = {0.5, 0.6, 0.7, 0.8, 0.9};
  for (int t = 0; t < 5; ++t) {
    int hits = 0;
    for (double v : ious)
      if (v > th[t]) ++hits;
    b.precision[t] = 100.0 * hits / double(ious.size());
  }
  return b;
}

}  // namespace

TEST(Iou, TrivialCases) {
  const Mask a{1, 1, 0, 0}, b{0, 0, 1, 1}, empty{0, 0, 0, 0};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, b), 0.0);
  EXPECT_EQ(iou(empty, empty), 1.0);
  EXPECT_EQ(iou(empty, a), 0.0);
  EXPECT_THROW(iou(a, Mask{1, 0}), DimensionError);
}

TEST(Iou, HalfCoverageBySubset) {
  Mask g(64, 0), p(64, 0);
  for (int i = 10; i < 30; ++i) g[i] = 1;
  for (int i = 10; i < 20; ++i) p[i] = 1;
  EXPECT_EQ(iou(p, g), 0.5);
}

TEST(Iou, Symmetric) {
  std::mt19937 gen(3);
  for (int t = 0; t < 50; ++t) {
    const Mask a = random_mask(gen, 40, 0.3), b = random_mask(gen, 40, 0.5);
    EXPECT_EQ(iou(a, b), iou(b, a));
  }
}

TEST(Evaluate, ThresholdsAreStrict) {
  // IoU 0.55: 11 of 20 union pixels shared
  Mask g(20, 1), p(20, 0);
  for (int i = 0; i < 11; ++i) p[i] = 1;
  const auto r = evaluate({{p, g}});
  EXPECT_DOUBLE_EQ(r.per_sample[0], 0.55);
  EXPECT_EQ(r.precision[0], 100.0);
  EXPECT_EQ(r.precision[1], 0.0);

  Mask half(20, 0);
  for (int i = 0; i < 10; ++i) half[i] = 1;
  EXPECT_EQ(evaluate({{half, g}}).precision[0], 0.0);
}

TEST(Evaluate, MeanAndOverallWithEqualUnions) {
  const Mask a{1, 1, 0, 0}, b{1, 0, 0, 0}, c{0, 1, 0, 0};
  const auto r = evaluate({{a, a}, {b, c}});
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
  EXPECT_DOUBLE_EQ(r.oiou, 0.5);
}

TEST(Evaluate, EmptyListIsAUsageError) { EXPECT_THROW(evaluate({}), UsageError); }

TEST(Evaluate, MatchesPixelCountingOracle) {
  std::mt19937 gen(11);
  std::uniform_real_distribution<double> dens(0.02, 0.8);
  for (int n : {50, 200}) {
    std::vector<MaskPair> pairs;
    for (int i = 0; i < n; ++i) pairs.push_back({random_mask(gen, 256, dens(gen)), random_mask(gen, 256, dens(gen))});
    const auto r = evaluate(pairs);
    const auto b = brute_force(pairs);
    EXPECT_EQ(r.miou, b.miou);
    EXPECT_EQ(r.oiou, b.oiou);
    for (int t = 0; t < 5; ++t) EXPECT_EQ(r.precision[t], b.precision[t]);
    for (int t = 1; t < 5; ++t) EXPECT_LE(r.precision[t], r.precision[t - 1]);
    EXPECT_GE(r.miou, 0.0);
    EXPECT_LE(r.miou, 1.0);
  }
}

TEST(Evaluate, DuplicatingASampleMovesMeanTowardIt) {
  const Mask g{1, 1, 1, 1, 0, 0}, p{1, 0, 0, 0, 0, 0}, q{1, 1, 1, 1, 1, 0};
  const auto base = evaluate({{p, g}, {q, g}});
  const auto dup = evaluate({{p, g}, {q, g}, {q, g}});
  EXPECT_GT(dup.miou, base.miou);
  EXPECT_EQ(dup.per_sample[1], base.per_sample[1]);
  EXPECT_EQ(dup.per_sample[2], base.per_sample[1]);
}

TEST(EvalReport, SerializesAsKeyValueLines) {
  const Mask a{1, 1, 0, 0};
  const auto r = evaluate({{a, a}});
  const std::string text = r.to_text();
  EXPECT_NE(text.find("mIoU = 1\n"), std::string::npos);
  EXPECT_NE(text.find("P@0.9 = 100\n"), std::string::npos);
  std::ostringstream table;
  r.print_table(table);
  EXPECT_NE(table.str().find("100.00"), std::string::npos);
}

TEST(EvalReport, SaveLoadRoundTrip) {
  std::mt19937 gen(5);
  std::vector<MaskPair> pairs;
  for (int i = 0; i < 7; ++i) pairs.push_back({random_mask(gen, 64, 0.3), random_mask(gen, 64, 0.4)});
  const auto r = evaluate(pairs);
  const std::string path = ::testing::TempDir() + "rmsin_report.txt";
  r.save(path);
  const auto back = EvalReport::load(path);
  EXPECT_EQ(back.miou, r.miou);
  EXPECT_EQ(back.oiou, r.oiou);
  EXPECT_EQ(back.precision, r.precision);
  EXPECT_EQ(back.per_sample, r.per_sample);
  EXPECT_THROW(EvalReport::load(path + ".missing"), IoError);
}
