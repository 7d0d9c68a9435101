#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rmsin/rmsin.hpp"

namespace fs = std::filesystem;
using namespace rmsin;

namespace {

constexpr int kUsageExit = 2;
constexpr int kFailureExit = 1;

TrainConfig config_from(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  std::string extra;
  for (const auto& o : overrides) extra += o + "\n";
  return parse_config(extra, "--set", cfg);
}

std::vector<std::size_t> select_split(std::size_t n, double val_fraction, const std::string& split) {
  if (split == "all") {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  const Split s = split_dataset(n, val_fraction);
  return split == "train" ? s.train : s.val;
}

int cmd_gen_data(std::uint64_t seed, int count, int size, const std::string& out) {
  if (count < 1) throw UsageError("--count must be positive");
  const auto scenes = generate(seed, count, size);
  save_dataset(out, scenes);
  std::size_t small = 0;
  for (const auto& s : scenes) small += s.mask_fraction() < 0.02;
  std::printf("wrote %d scenes of %dx%d to %s (%.1f%% with masks under 2%% of the image)\n", count, size, size,
              out.c_str(), 100.0 * static_cast<double>(small) / count);
  return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, const std::string& data,
              const std::string& out, bool fresh) {
  const TrainConfig cfg = config_from(config, sets);
  cfg.validate();
  const auto scenes = load_dataset(data);
  if (fresh) fs::remove_all(out);
  TrainOptions opt;
  opt.log = &std::cout;
  const TrainResult r = train(cfg, scenes, out, opt);
  std::printf("best validation mIoU %.4f at epoch %d; checkpoint %s\n", r.best_miou, r.best_epoch,
              (fs::path(out) / "best.ckpt").c_str());
  return 0;
}

int cmd_init(const std::string& config, const std::vector<std::string>& sets, const std::string& out) {
  const TrainConfig cfg = config_from(config, sets);
  Rmsin<float> model(cfg.model);
  save_checkpoint(out, cfg.model, model.params());
  std::printf("wrote untrained checkpoint %s (%zu parameters)\n", out.c_str(), model.params().trainable_count());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, double val_fraction,
             const std::string& report) {
  Rmsin<float> model = load_model(ckpt);
  const auto scenes = load_dataset(data);
  const auto r = evaluate_model(model, scenes, select_split(scenes.size(), val_fraction, split));
  std::cout << r.to_text();
  r.print_table(std::cout);
  if (!report.empty()) r.save(report);
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& expression, const std::string& out) {
  Rmsin<float> model = load_model(ckpt);
  const PnmImage img = read_pnm(image);
  if (img.channels != 3) throw UsageError(image + ": expected an RGB (P6) image");
  if (img.width != img.height) throw UsageError(image + ": expected a square image");
  const Mask m = predict_mask(model, img.pixels, img.width, expression);
  write_mask_pgm(out, m, img.width, img.height);
  std::size_t fg = 0;
  for (auto v : m) fg += v;
  std::printf("wrote %s (%dx%d, %zu foreground pixels)\n", out.c_str(), img.width, img.height, fg);
  return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed, int seeds) {
  const auto groups = gradsuite::groups();
  if (module != "all" && std::find(groups.begin(), groups.end(), module) == groups.end())
    throw UsageError("unknown module '" + module + "'");
  bool ok = true;
  double worst = 0.0;
  for (const auto& c : gradsuite::all_cases()) {
    if (module != "all" && c.group != module) continue;
    for (int k = 0; k < seeds; ++k) {
      const auto r = c.run(seed + static_cast<std::uint64_t>(k));
      const bool pass = r.max_rel_error < c.tolerance;
      ok &= pass;
      worst = std::max(worst, r.max_rel_error);
      std::printf("%-7s %-16s seed %-4llu max rel error %.3e  (tol %.0e, %zu entries, %zu kinks) %s\n", c.group.c_str(),
                  c.name.c_str(), static_cast<unsigned long long>(seed + k), r.max_rel_error, c.tolerance, r.checked,
                  r.kinks, pass ? "ok" : ("FAIL at " + r.worst_input).c_str());
    }
  }
  std::printf("max relative error %.3e\n", worst);
  return ok ? 0 : kFailureExit;
}

int cmd_dump(const std::string& ckpt, const std::string& data, std::size_t sample, const std::string& out) {
  Rmsin<float> model = load_model(ckpt);
  const auto scenes = load_dataset(data);
  if (sample >= scenes.size())
    throw UsageError("sample " + std::to_string(sample) + " out of range (dataset has " +
                     std::to_string(scenes.size()) + ")");
  const auto files = dump_features(model, scenes[sample], out);
  std::printf("wrote %zu files to %s for \"%s\"\n", files.size(), out.c_str(), scenes[sample].expression.c_str());
  return 0;
}

int cmd_ablate(const std::string& config, const std::vector<std::string>& sets, const std::string& data,
               const std::string& out, const std::vector<std::uint64_t>& seeds, const std::string& grid) {
  const TrainConfig cfg = config_from(config, sets);
  cfg.validate();
  const auto scenes = load_dataset(data);
  const auto result = ablate(cfg, scenes, out, grid == "extended" ? extended_grid() : core_grid(), seeds, &std::cout);
  result.print_report(std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring segmentation with rotated multi-scale interaction on synthetic scenes"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::uint64_t seed = 0;
  int count = 1000, size = 64, seeds_n = 1;
  std::string out, data, config, ckpt, image, expression, split = "val", report, module, grid = "core";
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t sample = 0;
  double val_fraction = 0.2;
  bool fresh = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic referring-segmentation dataset");
  gen->add_option("--seed", seed, "Generator seed")->default_val(0);
  gen->add_option("--count", count, "Number of scenes")->default_val(1000);
  gen->add_option("--size", size, "Image extent in pixels")->default_val(64);
  gen->add_option("--out", out, "Output directory")->required();

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", config, "key = value config file (defaults when omitted)")->check(CLI::ExistingFile);
    c->add_option("--set", sets, "Override one config entry, e.g. --set epochs=5");
  };

  auto* tr = app.add_subcommand("train", "Train a model, keeping the best validation checkpoint");
  add_config(tr);
  tr->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_flag("--fresh", fresh, "Discard an existing run directory instead of resuming it");

  auto* init = app.add_subcommand("init", "Write an untrained checkpoint");
  add_config(init);
  init->add_option("--out", out, "Checkpoint path")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "Scenes to score")->check(CLI::IsMember({"val", "train", "all"}))->default_val("val");
  ev->add_option("--val-fraction", val_fraction, "Trailing fraction used for validation")->default_val(0.2);
  ev->add_option("--report", report, "Also write the report (with per-sample IoU) here");

  auto* inf = app.add_subcommand("infer", "Segment the object an expression refers to");
  inf->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", image, "RGB PPM image")->required()->check(CLI::ExistingFile);
  inf->add_option("--expression", expression, "Referring expression")->required();
  inf->add_option("--out", out, "Output PGM mask")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--module", module, "tensor, arc, iim, cim, decode, model or all")->required();
  gc->add_option("--seed", seed, "First seed")->default_val(0);
  gc->add_option("--seeds", seeds_n, "Number of consecutive seeds")->default_val(1)->check(CLI::PositiveNumber);

  auto* dump = app.add_subcommand("dump-features", "Write intermediate feature maps of one sample as PGM images");
  dump->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  dump->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  dump->add_option("--sample", sample, "Sample index")->default_val(0);
  dump->add_option("--out", out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train the ablation grid over several seeds and report");
  add_config(ab);
  ab->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", out, "Output directory (resumed when it exists)")->required();
  ab->add_option("--seeds", seeds, "Model seeds")->delimiter(',')->default_str("1,2,3");
  ab->add_option("--grid", grid, "core or extended")->check(CLI::IsMember({"core", "extended"}))->default_val("core");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageExit;
  }

  try {
    if (*gen) return cmd_gen_data(seed, count, size, out);
    if (*tr) return cmd_train(config, sets, data, out, fresh);
    if (*init) return cmd_init(config, sets, out);
    if (*ev) return cmd_eval(ckpt, data, split, val_fraction, report);
    if (*inf) return cmd_infer(ckpt, image, expression, out);
    if (*gc) return cmd_gradcheck(module, seed, seeds_n);
    if (*dump) return cmd_dump(ckpt, data, sample, out);
    if (*ab) return cmd_ablate(config, sets, data, out, seeds, grid);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailureExit;
  }
  return kFailureExit;
}
