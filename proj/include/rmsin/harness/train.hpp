#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rmsin/data.hpp"
#include "rmsin/harness/checkpoint.hpp"
#include "rmsin/harness/config.hpp"
#include "rmsin/harness/optim.hpp"
#include "rmsin/metrics.hpp"
#include "rmsin/model.hpp"

namespace rmsin {

struct Split {
  std::vector<std::size_t> train, val;
};

/// Leading scenes train, the trailing `val_fraction` validate.
inline Split split_dataset(std::size_t n, double val_fraction) {
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n < 2 || n_val == 0 || n_val >= n)
    throw UsageError("dataset of " + std::to_string(n) + " scenes cannot be split with val_fraction " +
                     std::to_string(val_fraction));
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_val ? s.train : s.val).push_back(i);
  return s;
}

/// Foreground where the class-1 logit beats the class-0 logit.
inline std::vector<Mask> logits_to_masks(const Tensor<float>& logits) {
  const int b = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  std::vector<Mask> out(static_cast<std::size_t>(b), Mask(static_cast<std::size_t>(hw)));
  const float* p = logits.ptr();
  for (int i = 0; i < b; ++i)
    for (int k = 0; k < hw; ++k)
      out[i][k] = p[(static_cast<std::size_t>(i) * 2 + 1) * hw + k] > p[(static_cast<std::size_t>(i) * 2) * hw + k];
  return out;
}

inline EvalReport evaluate_model(Rmsin<float>& model, const std::vector<Scene>& scenes,
                                 const std::vector<std::size_t>& indices, int batch_size = 8) {
  if (indices.empty()) throw UsageError("evaluate: no samples");
  NoGrad<float> off;
  MetricAccumulator acc;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> idx(indices.data() + start, end - start);
    const auto batch = make_batch<float>(scenes, idx, model.config().max_tokens);
    const auto masks = logits_to_masks(model.forward(batch.images, batch.ids, false));
    for (std::size_t i = 0; i < idx.size(); ++i) acc.add(masks[i], scenes[idx[i]].mask);
  }
  return acc.report();
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  EvalReport val;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;  // only epochs run by this call
  double best_miou = -1.0;
  int best_epoch = -1;
  EvalReport best_report;
};

struct TrainOptions {
  bool resume = true;     // continue from last.ckpt when it exists
  std::ostream* log = nullptr;
  int stop_after_epochs = -1;  // run at most this many epochs in this call
};

namespace detail {

inline std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order = train;
  Rng rng(mix_seed(seed * 1000003ULL + static_cast<std::uint64_t>(epoch) + 17));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

/// Symmetry codes for every sample position of an epoch.
inline std::vector<int> epoch_symmetries(std::size_t count, std::uint64_t seed, int epoch) {
  Rng rng(mix_seed(seed * 1000003ULL + static_cast<std::uint64_t>(epoch) + 0xa5a5));
  std::vector<int> codes(count);
  for (auto& c : codes) c = rng.uniform_int(0, 7);
  return codes;
}

/// The epoch's samples in order, each pointed at a shape drawn with the
/// generator's small-shape bias and given a fresh expression for it.
inline std::vector<Scene> epoch_views(const std::vector<Scene>& scenes, const std::vector<std::size_t>& order,
                                      std::uint64_t seed, int epoch) {
  Rng rng(mix_seed(seed * 1000003ULL + static_cast<std::uint64_t>(epoch) + 0x3c3c));
  const double bias = GeneratorOptions{}.referral_bias;
  std::vector<Scene> views;
  views.reserve(order.size());
  for (std::size_t i : order) {
    const Scene& s = scenes[i];
    std::vector<double> weights;
    for (const auto& sh : s.shapes) weights.push_back(std::pow(sh.area_fraction, -bias));
    const int target = std::discrete_distribution<int>(weights.begin(), weights.end())(rng.engine());
    auto v = refer_to(s, target, rng);
    views.push_back(v ? std::move(*v) : s);
  }
  return views;
}

inline std::string report_line(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%.9g\t%.9g\t%.6f\t%.6f\t%.2f\t%.2f\t%.2f\t%.2f\t%.2f", r.epoch, r.lr,
                r.train_loss, r.val.miou, r.val.oiou, r.val.precision[0], r.val.precision[1], r.val.precision[2],
                r.val.precision[3], r.val.precision[4]);
  return buf;
}

}  // namespace detail

/// Trains on the leading part of `scenes`, validating on the rest after
/// every epoch. Writes into `out_dir`: config.txt, train_log.tsv,
/// best.ckpt (highest validation mIoU), best_report.txt and last.ckpt
/// (with optimizer state, used to resume).
inline TrainResult train(const TrainConfig& cfg, const std::vector<Scene>& scenes, const std::filesystem::path& out_dir,
                         const TrainOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (scenes.empty()) throw UsageError("training dataset is empty");
  for (const auto& s : scenes)
    if (s.size != cfg.model.image_size)
      throw UsageError("scene extent " + std::to_string(s.size) + " differs from image_size " +
                       std::to_string(cfg.model.image_size));
  if (cfg.rerefer)
    for (const auto& s : scenes)
      if (s.shapes.empty()) throw UsageError("rerefer needs the scenes' shape lists (shapes.tsv); this dataset has none");
  const Split split = split_dataset(scenes.size(), cfg.val_fraction);
  fs::create_directories(out_dir);

  Rmsin<float> model(cfg.model);
  AdamW<float> optimizer(model.params(), cfg.adamw);
  const auto per_epoch =
      static_cast<std::uint64_t>((split.train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size);
  const std::uint64_t total_steps = per_epoch * static_cast<std::uint64_t>(cfg.epochs);

  const std::string cfg_text = config_text(cfg);
  TrainResult result;
  int start_epoch = 0;
  const fs::path last = out_dir / "last.ckpt", best = out_dir / "best.ckpt", log_path = out_dir / "train_log.tsv";
  if (opt.resume && fs::exists(last)) {
    const Checkpoint ck = read_checkpoint(last);
    auto it = ck.meta.find("train_config");
    if (it == ck.meta.end() || it->second != cfg_text)
      throw UsageError(last.string() + " was written with a different training config (" +
                       config_difference(cfg_text, it == ck.meta.end() ? "" : it->second) + ")");
    restore_checkpoint(ck, last.string(), model, &optimizer);
    start_epoch = std::stoi(ck.meta.at("epochs_done"));
    result.best_miou = std::stod(ck.meta.at("best_miou"));
    result.best_epoch = std::stoi(ck.meta.at("best_epoch"));
    if (opt.log) *opt.log << "resuming " << out_dir.string() << " after epoch " << start_epoch << "\n";
  } else {
    std::ofstream(out_dir / "config.txt") << cfg_text;
    std::ofstream(log_path) << "epoch\tlr\ttrain_loss\tmIoU\toIoU\tP@0.5\tP@0.6\tP@0.7\tP@0.8\tP@0.9\n";
  }

  int ran = 0;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    if (opt.stop_after_epochs >= 0 && ran >= opt.stop_after_epochs) break;
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = detail::epoch_order(split.train, cfg.model.seed, epoch);
    const auto symmetries = detail::epoch_symmetries(order.size(), cfg.model.seed, epoch);
    std::vector<Scene> referred;
    if (cfg.rerefer) referred = detail::epoch_views(scenes, order, cfg.model.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Scene> views;
      for (std::size_t k = start; k < end; ++k) {
        const Scene& s = cfg.rerefer ? referred[k] : scenes[order[k]];
        views.push_back(cfg.augment ? transform_scene(s, SquareSymmetry::from_code(symmetries[k])) : s);
      }
      std::vector<std::size_t> idx(views.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      const auto batch = make_batch<float>(views, idx, cfg.model.max_tokens);
      optimizer.zero_grad();
      Tape<float> tape;
      Tensor<float> loss;
      {
        Tape<float>::Scope scope(tape);
        loss = model.loss(model.forward(batch.images, batch.ids, true), batch.labels);
        tape.backward(loss);
      }
      const double l = loss.item();
      if (!std::isfinite(l)) throw NonFiniteGradient("training loss became non-finite at epoch " + std::to_string(epoch + 1));
      loss_sum += l;
      ++batches;
      lr = poly_lr(cfg.lr, optimizer.steps(), total_steps, cfg.poly_power);
      optimizer.step(lr);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val = evaluate_model(model, scenes, split.val, cfg.batch_size);
    result.epochs.push_back(rec);
    if (rec.val.miou > result.best_miou) {
      result.best_miou = rec.val.miou;
      result.best_epoch = rec.epoch;
      save_checkpoint(best, cfg.model, model.params(), nullptr,
                      {{"epoch", std::to_string(rec.epoch)}, {"val_miou", detail::format_double(rec.val.miou)}});
      rec.val.save((out_dir / "best_report.txt").string());
    }
    save_checkpoint(last, cfg.model, model.params(), &optimizer,
                    {{"train_config", cfg_text},
                     {"epochs_done", std::to_string(rec.epoch)},
                     {"best_miou", detail::format_double(result.best_miou)},
                     {"best_epoch", std::to_string(result.best_epoch)}});
    std::ofstream(log_path, std::ios::app) << detail::report_line(rec) << "\n";
    ++ran;
    if (opt.log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[200];
      std::snprintf(buf, sizeof buf, "epoch %2d/%d  loss %.4f  val mIoU %.4f  oIoU %.4f  lr %.3g  (%.1fs)\n", rec.epoch,
                    cfg.epochs, rec.train_loss, rec.val.miou, rec.val.oiou, rec.lr, secs);
      *opt.log << buf << std::flush;
    }
  }
  return result;
}

/// Repeated steps on one fixed batch at a constant learning rate; returns
/// the loss before each step. Stops early once a loss drops below
/// `stop_below` (when positive).
inline std::vector<double> overfit_batch(const ModelConfig& mc, const std::vector<Scene>& scenes,
                                         const std::vector<std::size_t>& indices, int steps, double lr,
                                         AdamWOptions adamw = {}, double stop_below = -1.0) {
  Rmsin<float> model(mc);
  AdamW<float> optimizer(model.params(), adamw);
  const auto batch = make_batch<float>(scenes, indices, mc.max_tokens);
  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    optimizer.zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    const Tensor<float> loss = model.loss(model.forward(batch.images, batch.ids, true), batch.labels);
    tape.backward(loss);
    losses.push_back(loss.item());
    if (losses.back() < stop_below) break;
    optimizer.step(lr);
  }
  return losses;
}

/// Predicted mask for one image ([3,H,W] as 8-bit HWC) and expression.
inline Mask predict_mask(Rmsin<float>& model, const std::vector<std::uint8_t>& image_hwc, int size,
                         const std::string& expression) {
  if (size != model.config().image_size)
    throw UsageError("image is " + std::to_string(size) + "x" + std::to_string(size) + ", the model expects " +
                     std::to_string(model.config().image_size));
  Scene s;
  s.size = size;
  s.image = image_hwc;
  s.tokens = tokenize(expression);
  if (static_cast<int>(s.tokens.size()) > model.config().max_tokens)
    throw UsageError("expression has more than " + std::to_string(model.config().max_tokens) + " words");
  if (std::all_of(s.tokens.begin(), s.tokens.end(), [](int t) { return t == 0; }))
    throw UsageError("expression is empty");
  s.mask.assign(static_cast<std::size_t>(size) * size, 0);
  const std::vector<Scene> one{s};
  const std::vector<std::size_t> idx{0};
  NoGrad<float> off;
  const auto b = make_batch<float>(one, idx, model.config().max_tokens);
  return logits_to_masks(model.forward(b.images, b.ids, false))[0];
}

/// Channel mean of a [1,C,h,w] map, min-max scaled to 8 bits.
inline std::vector<std::uint8_t> feature_to_gray(const Tensor<float>& map) {
  if (map.rank() != 4 || map.dim(0) != 1) throw DimensionError("feature dump expects a [1,C,h,w] map");
  const int c = map.dim(1), hw = map.dim(2) * map.dim(3);
  std::vector<double> mean(static_cast<std::size_t>(hw), 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int k = 0; k < hw; ++k) mean[k] += map[static_cast<std::size_t>(ch) * hw + k] / c;
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  std::vector<std::uint8_t> out(mean.size(), 0);
  const double range = *hi - *lo;
  if (range > 0)
    for (std::size_t k = 0; k < mean.size(); ++k) out[k] = static_cast<std::uint8_t>(std::lround(255.0 * (mean[k] - *lo) / range));
  return out;
}

/// Writes every traced map of one scene as <name>.pgm plus the input,
/// ground truth and prediction; returns the written file names.
inline std::vector<std::string> dump_features(Rmsin<float>& model, const Scene& scene,
                                              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::vector<Scene> one{scene};
  const std::vector<std::size_t> idx{0};
  const auto b = make_batch<float>(one, idx, model.config().max_tokens);
  NoGrad<float> off;
  ForwardTrace<float> trace;
  const auto logits = model.forward(b.images, b.ids, false, &trace);
  std::vector<std::string> written;
  for (const auto& [name, map] : trace.maps) {
    if (map.rank() != 4) continue;
    write_pnm(out_dir / (name + ".pgm"), PnmImage{map.dim(3), map.dim(2), 1, feature_to_gray(map)});
    written.push_back(name + ".pgm");
  }
  write_pnm(out_dir / "input.ppm", PnmImage{scene.size, scene.size, 3, scene.image});
  write_mask_pgm(out_dir / "truth.pgm", scene.mask, scene.size, scene.size);
  write_mask_pgm(out_dir / "prediction.pgm", logits_to_masks(logits)[0], scene.size, scene.size);
  std::ofstream(out_dir / "expression.txt") << scene.expression << "\n";
  for (const char* f : {"input.ppm", "truth.pgm", "prediction.pgm", "expression.txt"}) written.push_back(f);
  return written;
}

}  // namespace rmsin
