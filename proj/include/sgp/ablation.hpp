#pragma once

// Ablation studies: several training variants, each over several seeds, run on
// independent worker threads and reported in a fixed order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "sgp/trainer.hpp"

namespace sgp::ablation {

struct Variant {
  std::string name;
  TrainConfig cfg;
  data::Dataset ds;
};

struct Run {
  std::string variant;
  std::uint64_t seed = 0;
  double test_dice = 0, test_iou = 0;  // after the last step
  double best_dice = 0;
  std::size_t best_step = 0;
};

struct Summary {
  std::string variant;
  std::size_t n = 0;
  double mean_dice = 0, std_dice = 0;  // over seeds, sample standard deviation
  double mean_best = 0, std_best = 0;
};

struct Study {
  std::string name;
  std::vector<Run> runs;  // variant-major, then seed
  std::vector<Summary> summary;

  const Summary& of(const std::string& variant) const {
    for (const auto& s : summary)
      if (s.variant == variant) return s;
    throw ContractError("study " + name + " has no variant '" + variant + "'");
  }
  std::string runs_csv() const;
  std::string summary_csv() const;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0};
}

inline std::string Study::runs_csv() const {
  std::string out = "study,variant,seed,test_dice,test_iou,best_dice,best_step\n";
  char buf[256];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.8f,%.8f,%.8f,%zu\n", name.c_str(), r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.test_dice, r.test_iou, r.best_dice, r.best_step);
    out += buf;
  }
  return out;
}

inline std::string Study::summary_csv() const {
  std::string out = "study,variant,seeds,mean_dice,std_dice,mean_best_dice,std_best_dice\n";
  char buf[256];
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.8f,%.8f,%.8f,%.8f\n", name.c_str(), s.variant.c_str(), s.n,
                  s.mean_dice, s.std_dice, s.mean_best, s.std_best);
    out += buf;
  }
  return out;
}

// SGP_THREADS caps the worker count; default is the hardware concurrency.
inline std::size_t worker_limit() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SGP_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = std::size_t(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string("SGP_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

// Runs every variant for seeds base, base+1, ... ; per-run artifacts go to
// <out>/runs/<variant>_s<seed>/ when `out` is given.
inline Study run_variants(const std::string& name, const std::vector<Variant>& variants, std::size_t seeds,
                          std::uint64_t base_seed, const std::filesystem::path& out = {},
                          std::size_t threads = worker_limit()) {
  Study st;
  st.name = name;
  const std::size_t total = variants.size() * seeds;
  st.runs.resize(total);
  std::vector<std::exception_ptr> errors(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job; (job = next++) < total;) {
      const auto& v = variants[job / seeds];
      TrainConfig cfg = v.cfg;
      cfg.seed = base_seed + job % seeds;
      try {
        std::filesystem::path dir;
        if (!out.empty()) dir = out / "runs" / (v.name + "_s" + std::to_string(cfg.seed));
        auto res = train<float>(v.ds, cfg, dir);
        st.runs[job] = {v.name, cfg.seed, res.final_eval.mean_dice(), res.final_eval.mean_iou(), res.best_dice,
                        res.best_step};
      } catch (...) {
        errors[job] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, total); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<double> d, b;
    for (std::size_t s = 0; s < seeds; ++s) {
      d.push_back(st.runs[vi * seeds + s].test_dice);
      b.push_back(st.runs[vi * seeds + s].best_dice);
    }
    Summary sm;
    sm.variant = variants[vi].name;
    sm.n = seeds;
    std::tie(sm.mean_dice, sm.std_dice) = mean_std(d);
    std::tie(sm.mean_best, sm.std_best) = mean_std(b);
    st.summary.push_back(sm);
  }
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_text_atomic(out / "runs.csv", st.runs_csv());
    write_text_atomic(out / "summary.csv", st.summary_csv());
  }
  return st;
}

// Full model against PMG off and against slice memory off.
inline std::vector<Variant> components_variants(const data::Dataset& ds, const TrainConfig& cfg) {
  std::vector<Variant> v(3, Variant{"", cfg, ds});
  v[0].name = "pmg_off";
  v[0].cfg.model.pmg = false;
  v[1].name = "mem3d_off";
  v[1].cfg.model.mem3d = false;
  v[2].name = "full";
  return v;
}

// The training pool (S_sup and S_qry) is re-partitioned so that S_sup holds k samples
// that also keep serving as queries; S_test is untouched. Every size uses the same
// mode, so the sizes differ only in k.
inline data::Dataset with_duplicated_support(data::Dataset ds, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> pool = ds.support;
  pool.insert(pool.end(), ds.query.begin(), ds.query.end());
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  if (k < 1 || k > pool.size()) {
    throw ConfigError("support size " + std::to_string(k) + " needs 1.." + std::to_string(pool.size()) +
                      " training samples");
  }
  Rng rng = Rng(seed).split(0x5ee);
  std::vector<std::size_t> perm = pool;
  rng.shuffle(perm);
  ds.support.assign(perm.begin(), perm.begin() + std::ptrdiff_t(k));
  std::sort(ds.support.begin(), ds.support.end());
  ds.query = pool;
  ds.duplicated_support = true;
  return ds;
}

inline std::vector<Variant> support_size_variants(const data::Dataset& ds, const TrainConfig& cfg,
                                                  const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw ConfigError("support-size study needs at least one size");
  std::vector<Variant> v;
  for (auto k : sizes) {
    Variant x{"k" + std::to_string(k), cfg, with_duplicated_support(ds, k, cfg.seed)};
    x.cfg.support_k = k;
    x.cfg.bank_capacity = 0;
    v.push_back(std::move(x));
  }
  return v;
}

// Encoder trained from its random initialisation only through the adapters, against
// one first pretrained on the autoencoding task.
inline std::vector<Variant> pretrained_variants(const data::Dataset& ds, const TrainConfig& cfg,
                                                std::size_t pretrain_steps) {
  std::vector<Variant> v(2, Variant{"", cfg, ds});
  v[0].name = "scratch";
  v[0].cfg.pretrain_steps = 0;
  v[1].name = "pretrained";
  v[1].cfg.pretrain_steps = pretrain_steps;
  return v;
}

struct Verdict {
  std::string against;
  double gap = 0;      // mean(full) - mean(other)
  double spread = 0;   // sqrt(std_full^2 + std_other^2)
  bool pass = false;   // gap >= margin
};

inline std::vector<Verdict> components_verdicts(const Study& st, double margin = 0.01) {
  std::vector<Verdict> out;
  const auto& full = st.of("full");
  for (const char* other : {"pmg_off", "mem3d_off"}) {
    const auto& o = st.of(other);
    Verdict v;
    v.against = other;
    v.gap = full.mean_dice - o.mean_dice;
    v.spread = std::sqrt(full.std_dice * full.std_dice + o.std_dice * o.std_dice);
    v.pass = v.gap >= margin;
    out.push_back(v);
  }
  return out;
}

inline std::string verdict_text(const std::vector<Verdict>& vs, double margin = 0.01) {
  std::string out;
  char buf[256];
  for (const auto& v : vs) {
    std::snprintf(buf, sizeof buf, "full vs %s: gap %+.4f (spread %.4f, margin %.2f) %s\n", v.against.c_str(), v.gap,
                  v.spread, margin, v.pass ? "pass" : "inconclusive");
    out += buf;
  }
  return out;
}

}  // namespace sgp::ablation
