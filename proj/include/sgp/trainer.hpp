#pragma once

// Episode training loop, evaluation, checkpoints and the metrics log.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sgp/config.hpp"
#include "sgp/data.hpp"
#include "sgp/loss.hpp"
#include "sgp/metrics.hpp"
#include "sgp/model.hpp"
#include "sgp/optim.hpp"

namespace sgp {

inline constexpr const char* kMetricsHeader =
    "step,split,class,dice,iou,loss_total,loss_dice,loss_ce,loss_kl,fallback_box_count";

struct EvalResult {
  std::vector<OverlapCounts> per_class;
  OverlapCounts pooled;  // over every class, slice and sample
  double loss_total = 0, loss_dice = 0, loss_ce = 0, loss_kl = 0;  // per-sample means
  std::size_t fallback_boxes = 0;
  std::size_t samples = 0;

  double mean_dice() const { return pooled.dice(); }
  double mean_iou() const { return pooled.iou(); }
};

struct TrainResult {
  double best_dice = -1;
  std::size_t best_step = 0;
  std::vector<double> step_loss;  // loss_total per step
  EvalResult final_eval;
  std::string metrics_csv;
};

namespace detail {

inline std::size_t image_channels(const data::Dataset& ds) {
  const auto& img = ds.samples.at(0).image;
  return img.rank() == 4 ? img.dim(1) : img.dim(0);
}

inline std::string metrics_row(std::size_t step, const std::string& split, const std::string& cls, double dice,
                               double iou, double lt, double ld, double lc, double lk, std::size_t fb) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%s,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%zu\n", step, split.c_str(), cls.c_str(),
                dice, iou, lt, ld, lc, lk, fb);
  return buf;
}

inline std::string eval_rows(std::size_t step, const std::string& split, const EvalResult& r) {
  std::string out;
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    out += metrics_row(step, split, std::to_string(k), r.per_class[k].dice(), r.per_class[k].iou(), r.loss_total,
                       r.loss_dice, r.loss_ce, r.loss_kl, r.fallback_boxes);
  }
  out += metrics_row(step, split, "mean", r.mean_dice(), r.mean_iou(), r.loss_total, r.loss_dice, r.loss_ce,
                     r.loss_kl, r.fallback_boxes);
  return out;
}

}  // namespace detail

inline ModelConfig model_config_for(const TrainConfig& cfg, const data::Dataset& ds) {
  ModelConfig m = cfg.model;
  m.classes = ds.classes;
  m.in_channels = detail::image_channels(ds);
  return m;
}

template <typename T>
std::vector<pmg::MemoryEntry<T>> support_entries(const Sam2Sgp<T>& model, const data::Dataset& ds,
                                                 const data::Episode& ep) {
  std::vector<pmg::MemoryEntry<T>> out;
  for (const auto& ref : ep.support) {
    const auto& s = ds.samples.at(ref.sample);
    out.push_back(model.support_entry(as<T>(s.image_slice(ref.slice)), as<T>(s.mask_slice(ref.slice))));
  }
  return out;
}

template <typename T>
struct EpisodeOutcome {
  Tensor<T> loss;  // on the tape when gradients are enabled
  double dice = 0, ce = 0, kl = 0;
  std::vector<OverlapCounts> counts;
  std::size_t fallback_boxes = 0;
  Tensor<T> prediction;  // probabilities [K x H x W] or [D x K x H x W]
  Tensor<T> pseudo;      // same layout; empty when PMG is off
  std::vector<std::vector<BBox>> boxes;  // per slice, per class
};

// Forward (and loss) for one episode. Volumes are propagated slice by slice and the
// slice losses averaged into one scalar.
template <typename T>
EpisodeOutcome<T> run_episode(const Sam2Sgp<T>& model, const data::Dataset& ds, const data::Episode& ep,
                              const TrainConfig& cfg) {
  EpisodeOutcome<T> out;
  const auto& q = ds.samples.at(ep.query);
  const std::size_t K = model.config().classes;
  out.counts.assign(K, {});
  auto statics = support_entries(model, ds, ep);
  std::vector<T> pred, pseudo;
  Shape slice_dims;
  Tensor<T> loss_sum;
  std::size_t slices = 0;
  auto consume = [&](std::size_t z, SliceResult<T>& r) {
    auto target = as<T>(q.mask_slice(z));
    auto parts = total_loss(r.final, model.config().pmg ? r.pseudo : Tensor<T>(), target, cfg.loss);
    loss_sum = loss_sum.numel() ? add(loss_sum, parts.total) : parts.total;
    out.dice += parts.dice;
    out.ce += parts.ce;
    out.kl += parts.kl;
    const std::size_t n = r.final.numel() / K;
    for (std::size_t k = 0; k < K; ++k) {
      out.counts[k].add(overlap(r.final.data().subspan(k * n, n), target.data().subspan(k * n, n)));
    }
    out.fallback_boxes += r.fallback_boxes;
    pred.insert(pred.end(), r.final.data().begin(), r.final.data().end());
    if (r.pseudo.numel()) pseudo.insert(pseudo.end(), r.pseudo.data().begin(), r.pseudo.data().end());
    out.boxes.push_back(r.boxes);
    slice_dims = r.final.dims();
    ++slices;
  };
  if (q.image.rank() == 4) {
    model.propagate(as<T>(q.image), statics, cfg.capacity(), consume);
  } else {
    pmg::SupportMemorySet<T> mem;
    mem.entries = std::move(statics);
    auto r = model.forward_slice(as<T>(q.image), mem);
    consume(0, r);
  }
  const double inv = 1.0 / double(slices);
  out.loss = slices == 1 ? loss_sum : scale(loss_sum, T(inv));
  out.dice *= inv;
  out.ce *= inv;
  out.kl *= inv;
  Shape dims = slice_dims;
  if (q.image.rank() == 4) dims.insert(dims.begin(), slices);
  out.prediction = Tensor<T>(dims, std::move(pred));
  if (!pseudo.empty()) out.pseudo = Tensor<T>(dims, std::move(pseudo));
  return out;
}

template <typename T>
EvalResult evaluate(const Sam2Sgp<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                    const TrainConfig& cfg, const pmg::EmbeddingIndex& emb) {
  NoGradGuard ng;
  EvalResult r;
  r.per_class.assign(model.config().classes, {});
  for (auto i : indices) {
    auto ep = pmg::build_episode(i, ds, cfg.support_k, emb);
    auto o = run_episode(model, ds, ep, cfg);
    for (std::size_t k = 0; k < o.counts.size(); ++k) {
      r.per_class[k].add(o.counts[k]);
      r.pooled.add(o.counts[k]);
    }
    r.loss_total += double(o.loss.item());
    r.loss_dice += o.dice;
    r.loss_ce += o.ce;
    r.loss_kl += o.kl;
    r.fallback_boxes += o.fallback_boxes;
    ++r.samples;
  }
  if (r.samples) {
    const double inv = 1.0 / double(r.samples);
    r.loss_total *= inv;
    r.loss_dice *= inv;
    r.loss_ce *= inv;
    r.loss_kl *= inv;
  }
  return r;
}

// Auxiliary task for the encoder analog of pretrained weights: reconstruct the
// image from the token grid and stem features, base weights trainable, adapters off.
template <typename T>
void pretrain_encoder(Sam2Sgp<T>& model, const data::Dataset& ds, std::size_t steps, double lr, std::uint64_t seed) {
  if (steps == 0) return;
  auto& enc = model.encoder();
  const auto& ec = enc.config();
  Rng rng = Rng(seed).split(0xae);
  auto wg = nn::make_param<T>({ec.in_channels, ec.dim, 1, 1}, rng.split(0), 1.0 / std::sqrt(double(ec.dim)), true);
  auto bg = nn::make_const_param<T>({ec.in_channels}, T(0), true);
  auto ws = nn::make_param<T>({ec.in_channels, ec.skip_channels, 3, 3}, rng.split(1),
                              1.0 / std::sqrt(double(ec.skip_channels * 9)), true);
  enc.set_adapters_enabled(false);
  enc.set_base_trainable(true);
  nn::ParamList<T> ps;
  enc.collect(ps, "encoder");
  nn::ParamList<T> train;
  for (auto& p : ps)
    if (p.tensor.requires_grad()) train.push_back(p);
  train.push_back({"recon.grid", wg, true});
  train.push_back({"recon.bias", bg, true});
  train.push_back({"recon.skip", ws, true});
  Adam<T> opt(train, {lr});
  std::vector<data::SliceRef> pool;
  std::vector<std::size_t> members = ds.support;
  members.insert(members.end(), ds.query.begin(), ds.query.end());
  for (auto i : members)
    for (std::size_t z = 0; z < ds.samples[i].depth(); ++z) pool.push_back({i, z});
  for (std::size_t s = 0; s < steps; ++s) {
    const auto ref = pool[std::size_t(rng.below(pool.size()))];
    auto img = as<T>(ds.samples[ref.sample].image_slice(ref.slice));
    auto f = enc.encode(img);
    auto coarse = conv2d(f.grid, wg, bg, 1);
    auto recon = add(resize_bilinear(coarse, img.dim(1), img.dim(2)), conv2d(f.skip, ws, Tensor<T>(), 1));
    auto diff = add(recon, scale(img, T(-1)));
    auto loss = mean(mul(diff, diff));
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  enc.set_base_trainable(false);
  enc.set_adapters_enabled(true);
  for (auto& p : ps) p.tensor.zero_grad();
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_bytes_atomic(path, {text.begin(), text.end()});
}

template <typename T>
void save_run_checkpoint(const std::filesystem::path& dir, const Sam2Sgp<T>& model, const TrainConfig& cfg) {
  nn::save_checkpoint(dir, model.params());
  write_text_atomic(dir / "config.txt", to_text(cfg));
}

// Rebuilds the model described by a checkpoint directory for `ds`.
inline Sam2Sgp<float> load_run_checkpoint(const std::filesystem::path& dir, const data::Dataset& ds,
                                          TrainConfig* cfg_out = nullptr) {
  if (!std::filesystem::exists(dir / "config.txt")) throw IoError("checkpoint config missing: " + (dir / "config.txt").string());
  auto cfg = load_config(dir / "config.txt");
  Sam2Sgp<float> model(model_config_for(cfg, ds), cfg.seed);
  auto ps = model.params();
  nn::load_checkpoint(dir, ps);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

// Trains on S_qry episodes with supports from S_sup, evaluating S_test once per pass
// over the query set (or every cfg.eval_every steps). With an output directory, the
// best test checkpoint goes to <out>/ckpt and the log to <out>/metrics.csv.
template <typename T = float>
TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                  Sam2Sgp<T>* model_out = nullptr) {
  validate(cfg);
  if (ds.query.empty()) throw ConfigError("train: the query split is empty");
  if (ds.support.empty()) throw ConfigError("train: the support split is empty");
  Sam2Sgp<T> model(model_config_for(cfg, ds), cfg.seed);
  pretrain_encoder(model, ds, cfg.pretrain_steps, cfg.lr, cfg.seed);
  pmg::EmbeddingIndex emb;
  try {
    emb = build_embedding_index(model, ds);
  } catch (const NumericError& e) {
    throw NumericError(std::string("support-selection embeddings: ") + e.what());
  }
  Adam<T> opt(model.trainable_params(), {cfg.lr});
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : ds.query.size();
  const bool save = !out_dir.empty();
  if (save) std::filesystem::create_directories(out_dir);

  TrainResult res;
  std::string csv = std::string(kMetricsHeader) + "\n";
  std::vector<std::size_t> order;
  std::vector<double> last_norms;
  Rng order_rng = Rng(cfg.seed).split(0x0dd);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t pos = (step - 1) % ds.query.size();
    if (pos == 0) {
      order = ds.query;
      Rng r = order_rng.split((step - 1) / ds.query.size());
      r.shuffle(order);
    }
    auto ep = pmg::build_episode(order[pos], ds, cfg.support_k, emb);
    // Reports the gradients of this step when they exist, else those of the previous one.
    auto diagnostics = [&](const std::string& what) {
      std::ostringstream msg;
      msg << what << " at step " << step << " (lr " << cfg.lr << ", query " << ep.query << ")";
      auto norms = opt.grad_norms();
      std::size_t norm_step = step;
      if (std::all_of(norms.begin(), norms.end(), [](double v) { return v == 0; })) {
        norms = last_norms;
        norm_step = step - 1;
      }
      msg << "; grad norms at step " << norm_step << ":";
      for (std::size_t i = 0; i < norms.size(); ++i) msg << ' ' << opt.params()[i].name << '=' << norms[i];
      double big = 0;
      std::string big_name;
      for (const auto& p : opt.params())
        for (auto v : p.tensor.data())
          if (!(std::abs(double(v)) <= big)) {
            big = std::abs(double(v));
            big_name = p.name;
          }
      msg << "; largest |parameter| " << big << " in " << big_name;
      return msg.str();
    };
    EpisodeOutcome<T> o;
    try {
      o = run_episode(model, ds, ep, cfg);
      backward(o.loss);
    } catch (const NumericError& e) {
      throw NumericError(diagnostics(e.what()));
    }
    const double lt = double(o.loss.item());
    if (!std::isfinite(lt)) {
      std::ostringstream what;
      what << "non-finite loss " << lt;
      throw NumericError(diagnostics(what.str()));
    }
    last_norms = opt.grad_norms();
    opt.step();
    opt.zero_grad();
    res.step_loss.push_back(lt);
    OverlapCounts all;
    for (const auto& c : o.counts) all.add(c);
    csv += detail::metrics_row(step, "train", "mean", all.dice(), all.iou(), lt, o.dice, o.ce, o.kl, o.fallback_boxes);

    if (step % eval_every == 0 || step == cfg.steps) {
      if (!ds.test.empty()) {
        auto ev = evaluate(model, ds, ds.test, cfg, emb);
        csv += detail::eval_rows(step, "test", ev);
        if (ev.mean_dice() > res.best_dice) {
          res.best_dice = ev.mean_dice();
          res.best_step = step;
          if (save) save_run_checkpoint(out_dir / "ckpt", model, cfg);
        }
        res.final_eval = ev;
      }
    }
  }
  if (save) {
    if (ds.test.empty()) save_run_checkpoint(out_dir / "ckpt", model, cfg);
    write_text_atomic(out_dir / "metrics.csv", csv);
    write_text_atomic(out_dir / "config.txt", to_text(cfg));
    char buf[128];
    std::snprintf(buf, sizeof buf, "best_step=%zu\nbest_dice=%.8f\n", res.best_step, res.best_dice);
    write_text_atomic(out_dir / "summary.txt", buf);
  }
  res.metrics_csv = std::move(csv);
  if (model_out) *model_out = model;
  return res;
}

}  // namespace sgp
