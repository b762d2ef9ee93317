#pragma once

// The full gradient-check suite: every differentiable op plus the composed
// encoder/PMG/PMA/loss paths, all in double on small fixtures.

#include <functional>
#include <string>
#include <vector>

#include "sgp/gradcheck.hpp"
#include "sgp/loss.hpp"
#include "sgp/model.hpp"

namespace sgp::gcsuite {

inline constexpr double kTolerance = 1e-3;

struct CaseResult {
  std::string name;
  GradcheckReport report;
  bool passed() const { return report.max_rel_error < kTolerance; }
};

using Inputs = std::vector<Tensor<double>>;

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Tensor<double>(const Inputs&)> f;
};

inline Tensor<double> random_tensor(const Shape& dims, Rng& rng, double sd = 1.0) {
  std::vector<double> v(numel(dims));
  for (auto& x : v) x = rng.normal() * sd;
  return Tensor<double>(dims, std::move(v));
}

inline Tensor<double> random_unit(const Shape& dims, Rng& rng, double lo, double hi) {
  std::vector<double> v(numel(dims));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(dims, std::move(v));
}

inline void randomize(const nn::ParamList<double>& ps, Rng rng, double sd) {
  for (auto p : ps)
    for (auto& x : p.tensor.mutable_data()) x = rng.normal() * sd;
}

// A fixed random projection turns an op output into a scalar with non-uniform sensitivity.
inline Tensor<double> probe(const Tensor<double>& y) {
  Rng r(99);
  return sum(mul(y, random_tensor(y.dims(), r)));
}

inline std::vector<OpCase> op_cases() {
  using V = Inputs;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](const V& x) { return probe(matmul(x[0], x[1])); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](const V& x) { return probe(matmul_nt(x[0], x[1])); }},
      {"transpose", {{3, 4}}, [](const V& x) { return probe(transpose(x[0])); }},
      {"add", {{2, 3}, {2, 3}}, [](const V& x) { return probe(add(x[0], x[1])); }},
      {"mul", {{2, 3}, {2, 3}}, [](const V& x) { return probe(mul(x[0], x[1])); }},
      {"scale", {{2, 3}}, [](const V& x) { return probe(scale(x[0], 1.7)); }},
      {"add_bias_rows", {{3, 4}, {4}}, [](const V& x) { return probe(add_bias_rows(x[0], x[1])); }},
      {"scale_rows", {{3, 4}, {3}}, [](const V& x) { return probe(scale_rows(x[0], x[1])); }},
      {"softmax_rows", {{3, 5}}, [](const V& x) { return probe(softmax_rows(x[0])); }},
      {"layer_norm_rows", {{3, 5}, {5}, {5}}, [](const V& x) { return probe(layer_norm_rows(x[0], x[1], x[2])); }},
      {"gelu", {{3, 4}}, [](const V& x) { return probe(gelu(x[0])); }},
      {"sigmoid", {{3, 4}}, [](const V& x) { return probe(sigmoid(x[0])); }},
      {"conv2d_s1", {{2, 5, 5}, {3, 2, 3, 3}, {3}}, [](const V& x) { return probe(conv2d(x[0], x[1], x[2], 1)); }},
      {"conv2d_s2", {{2, 6, 7}, {2, 2, 3, 3}, {2}}, [](const V& x) { return probe(conv2d(x[0], x[1], x[2], 2)); }},
      {"conv2d_s4k5", {{1, 8, 8}, {3, 1, 5, 5}, {3}}, [](const V& x) { return probe(conv2d(x[0], x[1], x[2], 4)); }},
      {"resize_up", {{2, 3, 4}}, [](const V& x) { return probe(resize_bilinear(x[0], 7, 9)); }},
      {"resize_down", {{1, 8, 8}}, [](const V& x) { return probe(resize_bilinear(x[0], 2, 3)); }},
      {"reshape", {{2, 6}}, [](const V& x) { return probe(reshape(x[0], {3, 4})); }},
      {"grid_tokens", {{3, 2, 2}}, [](const V& x) { return probe(tokens_to_grid(grid_to_tokens(x[0]), 2, 2)); }},
      {"concat0", {{2, 3}, {1, 3}}, [](const V& x) { return probe(concat0<double>({x[0], x[1]})); }},
      {"slice0", {{4, 3}}, [](const V& x) { return probe(slice0(x[0], 1, 3)); }},
      {"sum", {{3, 3}}, [](const V& x) { return sum(mul(x[0], x[0])); }},
      {"mean", {{3, 3}}, [](const V& x) { return mean(mul(x[0], x[0])); }},
      {"mean_rows", {{4, 3}}, [](const V& x) { return probe(mean_rows(x[0])); }},
  };
}

inline ModelConfig tiny_model(std::size_t classes = 1) {
  ModelConfig c;
  c.dim = 8;
  c.blocks = 1;
  c.patch = 4;
  c.lora_rank = 2;
  c.lora_alpha = 2.0;
  c.skip_channels = 4;
  c.up_channels = 4;
  c.classes = classes;
  return c;
}

struct PathFixture {
  Tensor<double> query, support, support_mask, target;
};

inline PathFixture path_fixture() {
  Rng rng(42);
  PathFixture f;
  f.query = random_tensor({1, 8, 8}, rng);
  f.support = random_tensor({1, 8, 8}, rng);
  f.support_mask = Tensor<double>({1, 8, 8});
  f.target = Tensor<double>({1, 8, 8});
  for (std::size_t i = 0; i < 64; ++i) {
    f.support_mask.mutable_data()[i] = (i / 8 >= 2 && i / 8 < 6 && i % 8 >= 3) ? 1.0 : 0.0;
    f.target.mutable_data()[i] = (i / 8 >= 1 && i / 8 < 5 && i % 8 >= 2) ? 1.0 : 0.0;
  }
  return f;
}

// Encoder + PMG + PMA + final decoder + total loss, all trainable parameters.
// The KL target is a stop-gradient, so finite differences hold it at its
// unperturbed value.
inline GradcheckReport pmg_path(std::size_t per_tensor = 6) {
  Sam2Sgp<double> m(tiny_model(), 40);
  for (auto* l : m.encoder().lora_layers()) {
    Rng r(41);
    for (auto& b : l->lora_b().mutable_data()) b = 0.1 * r.normal();
  }
  const auto fx = path_fixture();
  auto run = [&] {
    pmg::SupportMemorySet<double> set;
    set.entries.push_back(m.support_entry(fx.support, fx.support_mask));
    return m.forward_slice(fx.query, set);
  };
  Tensor<double> fixed;
  {
    NoGradGuard ng;
    fixed = run().final;
  }
  const LossConfig lc;
  LossConfig no_kl = lc;
  no_kl.kl = 0;
  Inputs inputs;
  for (auto& p : m.trainable_params()) inputs.push_back(p.tensor);
  return gradcheck_params<double>(
      [&] {
        auto r = run();
        return add(total_loss(r.final, r.pseudo, fx.target, no_kl).total, scale(kl_loss(r.pseudo, fixed), lc.kl));
      },
      inputs, 1e-5, per_tensor, 43);
}

// F~ and the pseudo-mask through mask attention, the box-prompted final decoder and
// the total loss; the box itself is held fixed.
inline GradcheckReport pma_path(std::size_t per_tensor = 8) {
  Sam2Sgp<double> m(tiny_model(), 36);
  nn::ParamList<double> ps;
  m.mask_attention().collect(ps, "m");
  randomize(ps, Rng(37), 0.5);
  m.final_decoder().collect(ps, "d");
  Rng rng(38);
  auto feats = m.encode(random_tensor({1, 8, 8}, rng));
  auto f_tilde = random_tensor({8, 2, 2}, rng);
  auto pm = random_unit({1, 8, 8}, rng, 0.05, 0.95);
  const auto fx = path_fixture();
  const auto box = pma::bbox_from_mask(pm.data(), 8, 8).box;
  Inputs inputs = {f_tilde, pm};
  for (auto& p : ps) inputs.push_back(p.tensor);
  return gradcheck_params<double>(
      [&] {
        auto f_hat = m.mask_attention()(f_tilde, pm);
        auto pred = sigmoid(m.final_decoder().decode(f_hat, feats.skip, m.prompt_encoder().box(box, 8, 8)));
        return total_loss(pred, Tensor<double>(), fx.target, LossConfig{}).total;
      },
      inputs, 1e-5, per_tensor, 39);
}

inline std::vector<CaseResult> run(const std::function<void(const CaseResult&)>& on_case = {}) {
  std::vector<CaseResult> out;
  auto record = [&](std::string name, GradcheckReport rep) {
    out.push_back({std::move(name), rep});
    if (on_case) on_case(out.back());
  };
  Rng rng(2024);
  for (const auto& c : op_cases()) {
    GradcheckReport worst;
    for (int point = 0; point < 3; ++point) {
      Inputs xs;
      for (const auto& s : c.shapes) xs.push_back(random_tensor(s, rng));
      auto rep = gradcheck_params<double>([&] { return c.f(xs); }, xs, 1e-5);
      if (point == 0 || rep.max_rel_error > worst.max_rel_error) worst = rep;
    }
    record("op." + c.name, worst);
  }

  {
    Rng r(5);
    auto z = random_tensor({1, 8, 8}, r), zq = random_tensor({1, 8, 8}, r);
    auto t = random_unit({1, 8, 8}, r, 0, 1);
    for (auto& v : t.mutable_data()) v = v > 0.5 ? 1.0 : 0.0;
    auto fixed = sigmoid(random_tensor({1, 8, 8}, r));
    record("loss.dice", gradcheck_params<double>([&] { return dice_loss(sigmoid(z), t); }, {z}));
    record("loss.bce", gradcheck_params<double>([&] { return bce_loss(sigmoid(z), t); }, {z}));
    record("loss.bce_with_logits", gradcheck_params<double>([&] { return bce_with_logits(z, t); }, {z}));
    record("loss.kl", gradcheck_params<double>([&] { return kl_loss(sigmoid(zq), fixed); }, {zq}));
  }

  for (auto res : {nn::Residual::Input, nn::Residual::Value}) {
    nn::AttentionOptions so, co;
    so.residual = co.residual = res;
    co.cross = true;
    nn::AttentionBlock<double> sa(4, 4, so, nn::dense_factory<double>(Rng(19)));
    nn::AttentionBlock<double> ca(4, 4, co, nn::dense_factory<double>(Rng(20)));
    nn::ParamList<double> ps;
    sa.collect(ps, "sa");
    ca.collect(ps, "ca");
    randomize(ps, Rng(21), 0.4);
    Rng r(22);
    auto x = random_tensor({4, 4}, r), mem = random_tensor({4, 4}, r);
    Inputs inputs = {x, mem};
    for (auto& p : ps) inputs.push_back(p.tensor);
    record(std::string("attention.") + (res == nn::Residual::Input ? "input_residual" : "value_residual"),
           gradcheck_params<double>([&] { return probe(ca.cross_attention(sa.self_attention(x), mem)); }, inputs));
  }

  {
    Rng r(30);
    nn::LoraLinear<double> l(6, 5, 3, 3.0, r);
    for (auto& b : l.lora_b().mutable_data()) b = r.normal();
    nn::ParamList<double> ps;
    l.collect(ps, "l");
    auto x = random_tensor({4, 6}, r);
    Inputs inputs = {x};
    for (auto& p : ps) inputs.push_back(p.tensor);
    record("lora_linear", gradcheck_params<double>([&] { return probe(l(x)); }, inputs));
  }

  {
    nn::MaskDownsampler<double> phi(2, 8, 4, Rng(31));
    nn::ParamList<double> ps;
    phi.collect(ps, "phi");
    Rng r(32);
    auto mask = random_unit({2, 8, 8}, r, 0, 1);
    Inputs inputs = {mask};
    for (auto& p : ps) inputs.push_back(p.tensor);
    record("mask_downsampler", gradcheck_params<double>([&] { return probe(phi(mask)); }, inputs));
  }

  {
    pma::MaskAttention<double> ma(6, Rng(33));
    nn::ParamList<double> ps;
    ma.collect(ps, "m");
    Rng r(34);
    auto f = random_tensor({6, 2, 2}, r);
    auto pm = random_unit({1, 8, 8}, r, 0.05, 0.95);
    Inputs inputs = {f, pm};
    for (auto& p : ps) inputs.push_back(p.tensor);
    record("mask_attention", gradcheck_params<double>([&] { return probe(ma(f, pm)); }, inputs));
  }

  record("path.pmg_total_loss", pmg_path());
  record("path.pma_total_loss", pma_path());
  return out;
}

}  // namespace sgp::gcsuite
