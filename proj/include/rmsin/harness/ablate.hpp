#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rmsin/harness/train.hpp"

namespace rmsin {

/// One row of an ablation grid: a name, the table it belongs to and the
/// config switches it flips relative to the base config.
struct Variant {
  std::string name;
  std::string table;  // "modules", "decoder" or "angles"
  bool use_iim = true, use_cim = true, use_arc = true;
  int arc_angles = 4, arc_depth = 3;

  ModelConfig apply(ModelConfig m) const {
    m.use_iim = use_iim;
    m.use_cim = use_cim;
    m.use_arc = use_arc;
    m.arc_angles = arc_angles;
    m.arc_depth = arc_depth;
    return m;
  }
};

/// Full model, static decoder, and neither interaction module.
inline std::vector<Variant> core_grid() {
  return {{"full", "modules"},
          {"no-arc", "modules", true, true, false},
          {"no-iim-cim", "modules", false, false, true}};
}

/// Core grid plus single-module, ARC depth and angle-count rows.
inline std::vector<Variant> extended_grid() {
  auto g = core_grid();
  g.push_back({"iim-only", "modules", true, false, true});
  g.push_back({"cim-only", "modules", false, true, true});
  g.push_back({"arc-depth-1", "decoder", true, true, true, 4, 1});
  g.push_back({"arc-depth-2", "decoder", true, true, true, 4, 2});
  g.push_back({"angles-2", "angles", true, true, true, 2, 3});
  g.push_back({"angles-6", "angles", true, true, true, 6, 3});
  return g;
}

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  EvalReport best;  // validation report of the best epoch
};

struct AblationResult {
  std::vector<Variant> grid;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRun> runs;

  /// Seed-averaged report of one variant (per_sample left empty).
  EvalReport mean(const std::string& variant) const {
    EvalReport m;
    m.miou = m.oiou = 0;
    m.precision.fill(0.0);
    int n = 0;
    for (const auto& r : runs)
      if (r.variant == variant) {
        m.miou += r.best.miou;
        m.oiou += r.best.oiou;
        for (std::size_t k = 0; k < m.precision.size(); ++k) m.precision[k] += r.best.precision[k];
        ++n;
      }
    if (n == 0) throw UsageError("no runs for variant " + variant);
    m.miou /= n;
    m.oiou /= n;
    for (auto& p : m.precision) p /= n;
    return m;
  }

  const AblationRun& run(const std::string& variant, std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.variant == variant && r.seed == seed) return r;
    throw UsageError("no run for " + variant + " seed " + std::to_string(seed));
  }

  /// Mean mIoU margin of `full` over `other`, in points.
  double margin(const std::string& other) const { return 100.0 * (mean("full").miou - mean(other).miou); }

  /// Seeds where `other` scored at least as high as `full`.
  std::vector<std::string> inversions() const {
    std::vector<std::string> out;
    for (const auto& v : grid) {
      if (v.name == "full") continue;
      for (auto s : seeds) {
        const double f = run("full", s).best.miou, o = run(v.name, s).best.miou;
        if (o >= f) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "seed %llu: %s mIoU %.2f >= full %.2f", static_cast<unsigned long long>(s),
                        v.name.c_str(), 100 * o, 100 * f);
          out.push_back(buf);
        }
      }
    }
    return out;
  }

  /// Both core margins reach `points`.
  bool ordering_holds(double points = 1.0) const { return margin("no-arc") >= points && margin("no-iim-cim") >= points; }

  /// Rows grouped by table, columns IIM / CIM / ARC flags then metrics.
  void print_report(std::ostream& os) const {
    char buf[256];
    std::map<std::string, std::vector<const Variant*>> tables;
    for (const auto& v : grid) tables[v.table].push_back(&v);
    for (const char* table : {"modules", "decoder", "angles"}) {
      auto it = tables.find(table);
      if (it == tables.end()) continue;
      os << "[" << table << "]  mean of " << seeds.size() << " seeds, best validation epoch\n";
      std::snprintf(buf, sizeof buf, "%-12s %3s %3s %3s %2s %2s %7s %7s %7s %7s %7s %7s %7s\n", "variant", "IIM", "CIM",
                    "ARC", "n", "L", "P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU");
      os << buf;
      for (const Variant* v : it->second) {
        const EvalReport m = mean(v->name);
        auto mark = [](bool on) { return on ? "x" : "-"; };
        std::snprintf(buf, sizeof buf, "%-12s %3s %3s %3s %2d %2d %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f\n",
                      v->name.c_str(), mark(v->use_iim), mark(v->use_cim), mark(v->use_arc), v->arc_angles,
                      v->use_arc ? v->arc_depth : 0, m.precision[0], m.precision[1], m.precision[2], m.precision[3],
                      m.precision[4], 100 * m.oiou, 100 * m.miou);
        os << buf;
      }
      os << "\n";
    }
    os << "per-seed mIoU\n";
    for (const auto& v : grid) {
      std::snprintf(buf, sizeof buf, "%-12s", v.name.c_str());
      os << buf;
      for (auto s : seeds) {
        std::snprintf(buf, sizeof buf, "  s%llu %6.2f", static_cast<unsigned long long>(s), 100 * run(v.name, s).best.miou);
        os << buf;
      }
      os << "\n";
    }
    os << "\n";
    for (const char* other : {"no-arc", "no-iim-cim"}) {
      std::snprintf(buf, sizeof buf, "full - %-10s %+6.2f mIoU points\n", other, margin(other));
      os << buf;
    }
    const auto inv = inversions();
    os << "single-seed inversions: " << inv.size() << "\n";
    for (const auto& line : inv) os << "  " << line << "\n";
    os << "ordering (each margin >= 1 point): " << (ordering_holds() ? "holds" : "violated") << "\n";
  }
};

inline std::string run_name(const std::string& variant, std::uint64_t seed) {
  return variant + "_seed" + std::to_string(seed);
}

/// Trains every (variant, seed) pair under `out_dir`/<variant>_seed<s>.
/// Finished runs are recognized by their done marker and skipped; an
/// interrupted run resumes from its last checkpoint. Writes report.txt.
inline AblationResult ablate(const TrainConfig& base, const std::vector<Scene>& scenes,
                             const std::filesystem::path& out_dir, const std::vector<Variant>& grid,
                             const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  if (grid.empty() || seeds.empty()) throw UsageError("ablation grid and seed list must not be empty");
  bool has_full = false;
  for (const auto& v : grid) has_full |= v.name == "full";
  if (!has_full) throw UsageError("ablation grid needs a 'full' row");
  fs::create_directories(out_dir);
  const std::string fingerprint = dataset_fingerprint(scenes);
  const fs::path fp_path = out_dir / "dataset.txt";
  if (fs::exists(fp_path)) {
    std::string stored;
    std::ifstream(fp_path) >> stored;
    if (stored != fingerprint)
      throw UsageError(out_dir.string() + " holds runs on a different dataset (fingerprint " + stored + ", now " +
                       fingerprint + ")");
  } else {
    std::ofstream(fp_path) << fingerprint << "\n";
  }
  AblationResult result{grid, seeds, {}};
  for (auto seed : seeds)
    for (const auto& v : grid) {
      TrainConfig cfg = base;
      cfg.model = v.apply(base.model);
      cfg.model.seed = seed;
      const fs::path dir = out_dir / run_name(v.name, seed);
      const fs::path done = dir / "done.txt";
      if (!fs::exists(done)) {
        if (log) *log << "== " << run_name(v.name, seed) << "\n" << std::flush;
        TrainOptions opt;
        opt.log = log;
        train(cfg, scenes, dir, opt);
        fs::copy_file(dir / "best_report.txt", done, fs::copy_options::overwrite_existing);
      }
      std::ifstream cfg_in(dir / "config.txt");
      std::stringstream stored;
      stored << cfg_in.rdbuf();
      if (stored.str() != config_text(cfg))
        throw UsageError(dir.string() + " was trained with a different config (" +
                         config_difference(config_text(cfg), stored.str()) + ")");
      result.runs.push_back({v.name, seed, EvalReport::load(done.string())});
    }
  std::ofstream report(out_dir / "report.txt");
  result.print_report(report);
  return result;
}

}  // namespace rmsin
