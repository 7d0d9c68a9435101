#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rmsin/arc.hpp"
#include "rmsin/cim.hpp"
#include "rmsin/gradcheck.hpp"
#include "rmsin/iim.hpp"
#include "rmsin/model.hpp"

// Seeded finite-difference checks for every differentiable operation and
// composed module, shared by the command line and the acceptance run.
namespace rmsin::gradsuite {

using T64 = Tensor<double>;

struct Case {
  std::string group;  // tensor, arc, iim, cim, decode, model
  std::string name;
  double tolerance;
  std::function<GradCheckReport(std::uint64_t)> run;
};

inline T64 random64(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(v));
}

/// Scalar probe sum(y * r) with a fixed random r of y's shape.
inline T64 probe(const T64& y, const T64& r) { return sum(mul(y, r)); }

inline void randomize(T64 t, Rng& rng, double scale) {
  for (auto& v : t.mutable_data()) v = rng.uniform(-scale, scale);
}

/// Gives zero-initialised gates, angle heads and gate branches random values
/// so their gradients are not trivially zero.
inline void open_zero_paths(ParamSet<double>& ps, Rng& rng, double scale = 0.3) {
  for (const auto& e : ps.entries()) {
    const auto& n = e.name;
    if (n.find("outer") != std::string::npos || n.find("angle") != std::string::npos ||
        n.find(".w2") != std::string::npos)
      randomize(e.tensor, rng, scale);
  }
}

inline std::vector<GradCheckInput> with_prefix(std::vector<GradCheckInput> in, const std::vector<std::string>& prefixes) {
  std::vector<GradCheckInput> out;
  for (auto& i : in)
    for (const auto& p : prefixes)
      if (i.name.rfind(p, 0) == 0) {
        out.push_back(std::move(i));
        break;
      }
  return out;
}

inline TextFeatures<double> text_of(const T64& feats, std::vector<int> ids) {
  const int b = feats.dim(0), n = feats.dim(1);
  T64 bias = pad_key_bias<double>(ids, b, n);
  return TextFeatures<double>{feats, std::move(ids), bias};
}

inline ModelConfig tiny_model(std::uint64_t seed) {
  ModelConfig c;
  c.image_size = 32;
  c.stem_channels = 4;
  c.text_channels = 8;
  c.decoder_channels = 8;
  c.vocab_size = 20;
  c.max_tokens = 5;
  c.seed = seed;
  return c;
}

namespace ops {

inline GradCheckReport conv(std::uint64_t seed) {
  Rng rng(seed);
  const int c = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3), h = rng.uniform_int(3, 6);
  const int k = rng.uniform_int(0, 1) ? 3 : 1, stride = rng.uniform_int(1, 2), pad = k == 3 ? rng.uniform_int(0, 1) : 0;
  T64 x = random64({2, c, h, h + 1}, rng), w = random64({co, c, k, k}, rng), b = random64({co}, rng);
  const T64 r = random64(conv2d(x, w, b, stride, pad).shape(), rng);
  return gradcheck([&] { return probe(conv2d(x, w, b, stride, pad), r); }, {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}});
}

inline GradCheckReport depthwise(std::uint64_t seed) {
  Rng rng(seed);
  const int c = rng.uniform_int(1, 3), h = rng.uniform_int(3, 7), k = rng.uniform_int(0, 1) ? 3 : 5;
  const int stride = rng.uniform_int(1, 3), pad = k / 2;
  T64 x = random64({2, c, h, h}, rng), w = random64({c, k, k}, rng), b = random64({c}, rng);
  const T64 r = random64(depthwise_conv2d(x, w, b, stride, pad).shape(), rng);
  return gradcheck([&] { return probe(depthwise_conv2d(x, w, b, stride, pad), r); },
                   {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}});
}

inline GradCheckReport linear_matmul(std::uint64_t seed) {
  Rng rng(seed);
  const int m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
  T64 x = random64({2, m, k}, rng), w = random64({k, n}, rng), b = random64({n}, rng), o = random64({2, k, n}, rng);
  const T64 r = random64({2, m, n}, rng);
  return gradcheck([&] { return add(probe(linear(x, w, b), r), probe(matmul(x, o), r)); },
                   {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}, {"other", o, {}}});
}

inline GradCheckReport softmax_axis(std::uint64_t seed) {
  Rng rng(seed);
  T64 x = random64({3, rng.uniform_int(1, 5), 4}, rng, -4, 4);
  const T64 r = random64(x.shape(), rng);
  const int axis = rng.uniform_int(0, 2);
  return gradcheck([&] { return probe(softmax(x, axis), r); }, {{"x", x, {}}});
}

inline GradCheckReport activations(std::uint64_t seed) {
  Rng rng(seed);
  T64 x = random64({3, 5, 4}, rng, -4, 4);
  const T64 r1 = random64(x.shape(), rng), r2 = random64(x.shape(), rng), r3 = random64(x.shape(), rng),
            r4 = random64(x.shape(), rng);
  return gradcheck(
      [&] {
        return add(add(probe(relu(x), r1), probe(tanh(x), r2)), add(probe(sigmoid(x), r3), probe(hardswish(x), r4)));
      },
      {{"x", x, {}}});
}

inline GradCheckReport bilinear(std::uint64_t seed) {
  Rng rng(seed);
  T64 g = random64({2, 4, 4}, rng), pts = random64({6, 2}, rng, -0.9, 3.9);
  const T64 r = random64({2, 6}, rng);
  return gradcheck([&] { return probe(bilinear_sample(g, pts), r); }, {{"grid", g, {}}, {"points", pts, {}}});
}

inline GradCheckReport pool_resize(std::uint64_t seed) {
  Rng rng(seed);
  const int h = rng.uniform_int(2, 6);
  T64 x = random64({2, 2, h, h}, rng);
  const int k = rng.uniform_int(1, h), s = rng.uniform_int(1, 2);
  const int oh = h + rng.uniform_int(0, 5), ow = h + rng.uniform_int(0, 5);
  const T64 rp = random64(avg_pool2d(x, k, s).shape(), rng), ru = random64({2, 2, oh, ow}, rng);
  return gradcheck([&] { return add(probe(avg_pool2d(x, k, s), rp), probe(upsample_bilinear(x, oh, ow), ru)); },
                   {{"x", x, {}}});
}

inline GradCheckReport normalization(std::uint64_t seed) {
  Rng rng(seed);
  const int c = rng.uniform_int(2, 5);
  T64 x = random64({2, c, 2, 4}, rng, -2, 2), gamma = random64({c}, rng), beta = random64({c}, rng);
  T64 g4 = random64({4}, rng), b4 = random64({4}, rng);
  T64 rm = T64::zeros({c}), rv = T64::ones({c});
  const T64 r1 = random64(x.shape(), rng), r2 = random64(x.shape(), rng);
  return gradcheck(
      [&] { return add(probe(batch_norm(x, gamma, beta, rm, rv, true), r1), probe(layer_norm(x, g4, b4), r2)); },
      {{"x", x, {}}, {"bn.gamma", gamma, {}}, {"bn.beta", beta, {}}, {"ln.gamma", g4, {}}, {"ln.beta", b4, {}}});
}

inline GradCheckReport plumbing(std::uint64_t seed) {
  Rng rng(seed);
  const int c = rng.uniform_int(2, 5);
  T64 x = random64({2, c, 2, 4}, rng), y = random64({2, 1, 2, 4}, rng), bc = random64({1, c, 1, 1}, rng);
  const T64 rc = random64({2, c + 1, 2, 4}, rng), rs = random64({2, 1, 2, 4}, rng), rp = random64({2, 4, 2, c}, rng),
            rr = random64({2 * c, 8}, rng), rb = random64(x.shape(), rng), rm = random64({2, 1, 2, 4}, rng),
            rd = random64({2, 4 * c, 1, 2}, rng);
  return gradcheck(
      [&] {
        T64 l = probe(concat<double>({x, y}, 1), rc);
        l = add(l, probe(slice(x, 1, c - 1, 1), rs));
        l = add(l, probe(permute(x, {0, 3, 2, 1}), rp));
        l = add(l, probe(reshape(x, {2 * c, 8}), rr));
        l = add(l, probe(mul(add(x, bc), sub(x, bc)), rb));
        l = add(l, probe(mean(x, 1), rm));
        l = add(l, probe(space_to_depth(x), rd));
        return add(l, scale(sum(x), 0.5));
      },
      {{"x", x, {}}, {"y", y, {}}, {"broadcast", bc, {}}});
}

inline GradCheckReport embedding_ce(std::uint64_t seed) {
  Rng rng(seed);
  T64 table = random64({6, 3}, rng), logits = random64({2, 3, 2, 2}, rng, -3, 3);
  std::vector<int> ids(4), labels(8);
  for (auto& i : ids) i = rng.uniform_int(0, 5);
  for (auto& l : labels) l = rng.uniform_int(0, 2);
  const T64 r = random64({2, 2, 3}, rng);
  return gradcheck([&] { return add(probe(embedding(table, ids, {2, 2}), r), cross_entropy(logits, labels, 1)); },
                   {{"table", table, {}}, {"logits", logits, {}}});
}

inline GradCheckReport attention(std::uint64_t seed) {
  Rng rng(seed);
  const int lq = rng.uniform_int(1, 5), lk = rng.uniform_int(2, 5), d = rng.uniform_int(1, 4);
  T64 q = random64({2, lq, d}, rng, -2, 2), k = random64({2, lk, d}, rng, -2, 2), v = random64({2, lk, 3}, rng);
  std::vector<int> ids(static_cast<std::size_t>(2 * lk), 1);
  ids[static_cast<std::size_t>(lk - 1)] = 0;
  const T64 bias = pad_key_bias<double>(ids, 2, lk);
  const T64 r = random64({2, lq, 3}, rng);
  return gradcheck([&] { return probe(scaled_dot_attention(q, k, v, &bias), r); },
                   {{"q", q, {}}, {"k", k, {}}, {"v", v, {}}});
}

}  // namespace ops

namespace modules {

inline GradCheckReport rotate(std::uint64_t seed) {
  Rng rng(seed);
  const int k = rng.uniform_int(0, 1) ? 3 : 5;
  T64 w = random64({2, 2, k, k}, rng), th = random64({1}, rng, -3.1, 3.1);
  const T64 r = random64(w.shape(), rng);
  return gradcheck([&] { return probe(rotate_kernel(w, th), r); }, {{"w", w, {}}, {"theta", th, {}}});
}

inline GradCheckReport combine(std::uint64_t seed) {
  Rng rng(seed);
  T64 a = random64({2, 1, 3, 3}, rng), b = random64({2, 1, 3, 3}, rng), lam = random64({2}, rng);
  const T64 r = random64(a.shape(), rng);
  return gradcheck([&] { return probe(combine_kernels<double>({a, b}, lam), r); },
                   {{"a", a, {}}, {"b", b, {}}, {"lambda", lam, {}}});
}

inline GradCheckReport arc_forward(std::uint64_t seed) {
  Rng rng(seed);
  ParamSet<double> ps;
  AdaptiveRotatedConv<double> arc(ps, "arc", 4, 2, 3, 3, rng);
  randomize(arc.routing.angle_head.w, rng, 0.5);
  randomize(arc.routing.angle_head.b, rng, 1.0);
  T64 x = random64({2, 4, 5, 5}, rng);
  const T64 r = random64({2, 2, 5, 5}, rng);
  auto inputs = sample_parameters(ps, 1.0, rng);
  inputs.push_back({"x", x, {}});
  return gradcheck([&] { return probe(arc(x), r); }, inputs);
}

inline GradCheckReport iim_stage(std::uint64_t seed) {
  Rng rng(seed);
  ParamSet<double> ps;
  IimStage<double> st(ps, "stage", 1, 4, {1, 3, 5}, true, rng);
  for (auto* l : {&st.visual_gate.outer, &st.linguistic_gate.outer, &st.visual_gate.inner, &st.linguistic_gate.inner,
                  &st.align.wq, &st.align.wk, &st.align.wv, &st.align.proj}) {
    randomize(l->w, rng, 1.0);
    randomize(l->b, rng, 1.0);
  }
  T64 x = random64({1, 1, 8, 8}, rng), t = random64({1, 3, 4}, rng, -2, 2);
  const std::vector<int> ids{3, 1, seed % 2 ? 0 : 2};
  const T64 r = random64({1, 2, 4, 4}, rng);
  auto inputs = sample_parameters(ps, 0.3, rng);
  inputs.push_back({"image", x, {}});
  inputs.push_back({"text", t, {}});
  return gradcheck([&] { return probe(st(x, text_of(t, ids)), r); }, inputs);
}

inline GradCheckReport cim_forward(std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<int> ch{2, 4, 8, 16};
  ParamSet<double> ps;
  Cim<double> cim(ps, "cim", ch, 3, rng);
  for (const auto& e : ps.entries())
    if (e.trainable) randomize(e.tensor, rng, 0.5);
  std::vector<T64> p, probes;
  int extent = 8;
  for (int c : ch) {
    p.push_back(random64({1, c, extent, extent}, rng));
    probes.push_back(random64({1, c, extent, extent}, rng));
    extent /= 2;
  }
  auto inputs = sample_parameters(ps, 0.05, rng);
  for (int i = 0; i < 4; ++i) inputs.push_back({"stage" + std::to_string(i + 1), p[static_cast<std::size_t>(i)], {}});
  return gradcheck(
      [&] {
        const auto out = cim(p);
        T64 loss = probe(out[0], probes[0]);
        for (std::size_t i = 1; i < 4; ++i) loss = add(loss, probe(out[i], probes[i]));
        return loss;
      },
      inputs);
}

inline GradCheckReport decode(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig c = tiny_model(seed);
  c.decoder_channels = 4;
  Rmsin<double> model(c);
  open_zero_paths(model.params(), rng);
  std::vector<T64> pyr;
  for (int i = 1; i <= 4; ++i) pyr.push_back(random64({2, c.stage_channels(i), c.stage_extent(i), c.stage_extent(i)}, rng));
  const T64 r = random64({2, 2, c.image_size, c.image_size}, rng);
  auto inputs = with_prefix(sample_parameters(model.params(), 0.05, rng), {"dec", "head"});
  for (int i = 0; i < 4; ++i) inputs.push_back({"pyramid" + std::to_string(i + 1), pyr[static_cast<std::size_t>(i)], {}});
  return gradcheck([&] { return probe(model.decode(pyr, true), r); }, inputs);
}

inline GradCheckReport full_forward(std::uint64_t seed) {
  Rng rng(seed);
  Rmsin<double> model(tiny_model(seed));
  open_zero_paths(model.params(), rng);
  const int h = model.config().image_size;
  const T64 img = random64({2, 3, h, h}, rng, 0, 1);
  std::vector<int> ids;
  for (int b = 0; b < 2; ++b)
    for (int n = 0; n < 5; ++n) ids.push_back(n < 2 || rng.uniform() < 0.6 ? rng.uniform_int(1, 19) : 0);
  std::vector<int> labels(static_cast<std::size_t>(2 * h * h));
  for (auto& l : labels) l = rng.uniform() < 0.3;
  auto inputs = sample_parameters(model.params(), 0.01, rng);
  return gradcheck([&] { return model.loss(model.forward(img, ids, true), labels); }, inputs);
}

}  // namespace modules

inline std::vector<Case> all_cases() {
  return {
      {"tensor", "conv2d", 1e-4, ops::conv},
      {"tensor", "depthwise_conv2d", 1e-4, ops::depthwise},
      {"tensor", "linear+matmul", 1e-4, ops::linear_matmul},
      {"tensor", "softmax", 1e-4, ops::softmax_axis},
      {"tensor", "activations", 1e-4, ops::activations},
      {"tensor", "bilinear_sample", 1e-4, ops::bilinear},
      {"tensor", "avg_pool+upsample", 1e-4, ops::pool_resize},
      {"tensor", "batch_norm+layer_norm", 1e-4, ops::normalization},
      {"tensor", "concat/slice/permute/reshape/broadcast/reduce", 1e-4, ops::plumbing},
      {"tensor", "embedding+cross_entropy", 1e-4, ops::embedding_ce},
      {"tensor", "masked attention", 1e-4, ops::attention},
      {"arc", "rotate_kernel", 1e-4, modules::rotate},
      {"arc", "combine_kernels", 1e-4, modules::combine},
      {"arc", "arc_forward", 1e-4, modules::arc_forward},
      {"iim", "iim_stage", 1e-4, modules::iim_stage},
      {"cim", "cim_forward", 1e-4, modules::cim_forward},
      {"decode", "decode", 1e-4, modules::decode},
      {"model", "full forward", 1e-3, modules::full_forward},
  };
}

inline std::vector<std::string> groups() { return {"tensor", "arc", "iim", "cim", "decode", "model"}; }

}  // namespace rmsin::gradsuite
