#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rmsin/tensor/tensor.hpp"

namespace rmsin {

/// Binary masks as 0/1 bytes in row-major order.
using Mask = std::vector<std::uint8_t>;

struct PixelCounts {
  std::int64_t intersection = 0;
  std::int64_t union_ = 0;
};

inline PixelCounts count_pixels(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size())
    throw DimensionError("mask extents differ: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + " pixels");
  PixelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = truth[i] != 0;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

/// |P n G| / |P u G|, with two empty masks scoring 1.
inline double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  const PixelCounts c = count_pixels(pred, truth);
  return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

inline constexpr std::array<double, 5> kPrecisionThresholds{0.5, 0.6, 0.7, 0.8, 0.9};
inline constexpr std::array<const char*, 5> kPrecisionKeys{"P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9"};

struct EvalReport {
  double miou = 0.0;
  double oiou = 0.0;
  std::array<double, 5> precision{};  // percent of samples with IoU strictly above each threshold
  std::vector<double> per_sample;

  std::size_t count() const { return per_sample.size(); }

  /// Flat `key = value` lines.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "samples = " << count() << "\n";
    os << "mIoU = " << miou << "\n";
    os << "oIoU = " << oiou << "\n";
    for (std::size_t i = 0; i < kPrecisionThresholds.size(); ++i)
      os << kPrecisionKeys[i] << " = " << precision[i] << "\n";
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path);
    out.precision(17);
    out << to_text();
    for (std::size_t i = 0; i < per_sample.size(); ++i) out << "iou." << i << " = " << per_sample[i] << "\n";
    if (!out) throw IoError("failed writing report " + path);
  }

  /// Inverse of save().
  static EvalReport load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report " + path);
    EvalReport r;
    std::size_t samples = 0;
    bool seen_miou = false, seen_oiou = false;
    std::array<bool, 5> seen_p{};
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw IoError(path + ": malformed line '" + line + "'");
      const std::string key = line.substr(0, eq);
      double value = 0;
      try {
        value = std::stod(line.substr(eq + 3));
      } catch (const std::exception&) {
        throw IoError(path + ": bad value in '" + line + "'");
      }
      if (key == "samples") {
        samples = static_cast<std::size_t>(value);
      } else if (key == "mIoU") {
        r.miou = value;
        seen_miou = true;
      } else if (key == "oIoU") {
        r.oiou = value;
        seen_oiou = true;
      } else if (key.rfind("iou.", 0) == 0) {
        r.per_sample.push_back(value);
      } else {
        bool known = false;
        for (std::size_t i = 0; i < kPrecisionKeys.size(); ++i)
          if (key == kPrecisionKeys[i]) {
            r.precision[i] = value;
            seen_p[i] = known = true;
          }
        if (!known) throw IoError(path + ": unknown key '" + key + "'");
      }
    }
    const bool all_p = std::all_of(seen_p.begin(), seen_p.end(), [](bool b) { return b; });
    if (!seen_miou || !seen_oiou || !all_p) throw IoError(path + ": incomplete report");
    if (!r.per_sample.empty() && r.per_sample.size() != samples)
      throw IoError(path + ": sample count does not match the listed IoUs");
    return r;
  }

  void print_table(std::ostream& os) const {
    char line[160];
    os << "  P@0.5   P@0.6   P@0.7   P@0.8   P@0.9    oIoU    mIoU\n";
    std::snprintf(line, sizeof line, "%7.2f %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f\n", precision[0], precision[1],
                  precision[2], precision[3], precision[4], 100.0 * oiou, 100.0 * miou);
    os << line;
  }
};

/// Accumulates per-sample counts; `report()` aggregates in insertion order.
class MetricAccumulator {
 public:
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    const PixelCounts c = count_pixels(pred, truth);
    inter_ += c.intersection;
    union_ += c.union_;
    ious_.push_back(c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_));
  }

  std::size_t count() const { return ious_.size(); }

  EvalReport report() const {
    if (ious_.empty()) throw UsageError("evaluate: no samples");
    EvalReport r;
    r.per_sample = ious_;
    double total = 0.0;
    for (double v : ious_) total += v;
    r.miou = total / static_cast<double>(ious_.size());
    r.oiou = union_ == 0 ? 1.0 : static_cast<double>(inter_) / static_cast<double>(union_);
    for (std::size_t t = 0; t < kPrecisionThresholds.size(); ++t) {
      std::size_t hits = 0;
      for (double v : ious_) hits += v > kPrecisionThresholds[t];
      r.precision[t] = 100.0 * static_cast<double>(hits) / static_cast<double>(ious_.size());
    }
    return r;
  }

 private:
  std::int64_t inter_ = 0, union_ = 0;
  std::vector<double> ious_;
};

struct MaskPair {
  Mask prediction, truth;
};

inline EvalReport evaluate(const std::vector<MaskPair>& pairs) {
  MetricAccumulator acc;
  for (const auto& p : pairs) acc.add(p.prediction, p.truth);
  return acc.report();
}

}  // namespace rmsin
