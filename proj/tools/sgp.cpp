#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sgp/ablation.hpp"
#include "sgp/gradcheck_suite.hpp"
#include "sgp/trainer.hpp"

namespace fs = std::filesystem;
using namespace sgp;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

TrainConfig config_from(const std::string& path, const std::vector<std::string>& sets) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  for (const auto& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  validate(cfg);
  return cfg;
}

// A run directory is accepted as well as the checkpoint directory inside it.
fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "ckpt" / "config.txt")) return p / "ckpt";
  return p;
}

void write_pgm(const fs::path& path, std::size_t rows, std::size_t cols, const std::vector<float>& v) {
  std::ostringstream os;
  os << "P5\n" << cols << ' ' << rows << "\n255\n";
  std::string bytes = os.str();
  for (float p : v) bytes.push_back(char(std::uint8_t(std::lround(std::clamp(double(p), 0.0, 1.0) * 255.0))));
  write_text_atomic(path, bytes);
}

int cmd_gen_data(const std::string& kind, std::size_t n, std::size_t size, std::size_t depth, std::size_t classes,
                 std::uint64_t seed, std::size_t support, double test_frac, const data::CorpusKnobs& knobs,
                 const fs::path& out) {
  data::Dataset ds;
  switch (data::parse_kind(kind)) {
    case data::Kind::Shapes2d:
      ds = data::gen_shapes2d(n, size, classes, seed, knobs);
      break;
    case data::Kind::Tubes3d:
      if (classes != 1) throw ConfigError("tubes3d volumes carry one class, got --classes " + std::to_string(classes));
      ds = data::gen_tubes3d(n, depth, size, seed, knobs);
      break;
  }
  data::split(ds, support, test_frac, seed);
  data::write_dataset(ds, out);
  std::printf("wrote %zu %s samples to %s (support %zu, query %zu, test %zu)\n", ds.samples.size(), kind.c_str(),
              out.string().c_str(), ds.support.size(), ds.query.size(), ds.test.size());
  return kOk;
}

int cmd_train(const fs::path& data_dir, const TrainConfig& cfg, const fs::path& out) {
  auto ds = data::read_dataset(data_dir);
  auto t0 = std::chrono::steady_clock::now();
  auto res = train<float>(ds, cfg, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("best test dice %.8f at step %zu\n", res.best_dice, res.best_step);
  std::printf("final test dice %.8f iou %.8f\n", res.final_eval.mean_dice(), res.final_eval.mean_iou());
  std::printf("trained %zu steps in %.1f s; artifacts in %s\n", cfg.steps, secs, out.string().c_str());
  return kOk;
}

int cmd_eval(const fs::path& data_dir, const fs::path& ckpt, const std::string& split, const fs::path& metrics) {
  auto ds = data::read_dataset(data_dir);
  const auto& idx = ds.split_indices(split);
  if (idx.empty()) throw ConfigError("split '" + split + "' is empty in " + data_dir.string());
  TrainConfig cfg;
  auto model = load_run_checkpoint(checkpoint_dir(ckpt), ds, &cfg);
  auto emb = build_embedding_index(model, ds);
  auto r = evaluate(model, ds, idx, cfg, emb);
  std::printf("split %s samples %zu\n", split.c_str(), r.samples);
  for (std::size_t k = 0; k < r.per_class.size(); ++k)
    std::printf("class %zu dice %.8f iou %.8f\n", k, r.per_class[k].dice(), r.per_class[k].iou());
  std::printf("pooled dice %.8f iou %.8f\n", r.mean_dice(), r.mean_iou());
  std::printf("mean dice %.4f\n", r.mean_dice());
  std::printf("mean iou %.4f\n", r.mean_iou());
  if (!metrics.empty()) {
    if (metrics.has_parent_path()) fs::create_directories(metrics.parent_path());
    write_text_atomic(metrics, std::string(kMetricsHeader) + "\n" + detail::eval_rows(0, split, r));
  }
  return kOk;
}

int cmd_predict(const fs::path& data_dir, const fs::path& ckpt, std::size_t index, const fs::path& out) {
  auto ds = data::read_dataset(data_dir);
  if (index >= ds.samples.size())
    throw ConfigError("--index " + std::to_string(index) + " out of range for " + std::to_string(ds.samples.size()) +
                      " samples");
  TrainConfig cfg;
  auto model = load_run_checkpoint(checkpoint_dir(ckpt), ds, &cfg);
  auto emb = build_embedding_index(model, ds);
  auto ep = pmg::build_episode(index, ds, cfg.support_k, emb);
  EpisodeOutcome<float> o;
  {
    NoGradGuard ng;
    o = run_episode(model, ds, ep, cfg);
  }
  fs::create_directories(out);
  write_sgt(out / "prediction.sgt", o.prediction);
  if (o.pseudo.numel()) write_sgt(out / "pseudo.sgt", o.pseudo);

  // One preview per class; the slices of a volume are stacked top to bottom.
  const auto& p = o.prediction;
  const bool vol = p.rank() == 4;
  const std::size_t D = vol ? p.dim(0) : 1, K = vol ? p.dim(1) : p.dim(0);
  const std::size_t H = p.dim(p.rank() - 2), W = p.dim(p.rank() - 1);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<float> img;
    for (std::size_t z = 0; z < D; ++z) {
      auto base = p.data().begin() + std::ptrdiff_t((z * K + k) * H * W);
      img.insert(img.end(), base, base + std::ptrdiff_t(H * W));
    }
    char name[32];
    std::snprintf(name, sizeof name, "class_%zu.pgm", k);
    write_pgm(out / name, D * H, W, img);
  }

  std::string boxes = "slice class r0 c0 r1 c1\n";
  for (std::size_t z = 0; z < o.boxes.size(); ++z)
    for (std::size_t k = 0; k < o.boxes[z].size(); ++k) {
      const auto& b = o.boxes[z][k];
      boxes += std::to_string(z) + ' ' + std::to_string(k) + ' ' + std::to_string(b.r0) + ' ' +
               std::to_string(b.c0) + ' ' + std::to_string(b.r1) + ' ' + std::to_string(b.c1) + '\n';
    }
  write_text_atomic(out / "bbox.txt", boxes);
  std::string sup = "support";
  for (const auto& s : ep.support) sup += ' ' + std::to_string(s.sample) + ':' + std::to_string(s.slice);
  write_text_atomic(out / "episode.txt", "query " + std::to_string(index) + "\n" + sup + "\n");
  OverlapCounts all;
  for (const auto& c : o.counts) all.add(c);
  std::printf("sample %zu dice %.8f iou %.8f; wrote %zu previews to %s\n", index, all.dice(), all.iou(), K,
              out.string().c_str());
  return kOk;
}

int cmd_gradcheck() {
  auto t0 = std::chrono::steady_clock::now();
  std::size_t failed = 0, total = 0;
  gcsuite::run([&](const gcsuite::CaseResult& c) {
    ++total;
    failed += !c.passed();
    std::printf("%-26s max rel %.3e over %zu entries  %s\n", c.name.c_str(), c.report.max_rel_error,
                c.report.entries, c.passed() ? "ok" : "FAIL");
    std::fflush(stdout);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu of %zu cases below %.0e in %.1f s\n", total - failed, total, gcsuite::kTolerance, secs);
  return failed ? kNumeric : kOk;
}

int cmd_ablate(const std::string& study, const fs::path& data_dir, TrainConfig cfg, std::size_t seeds,
               std::optional<std::uint64_t> seed, const std::vector<std::size_t>& sizes, std::size_t pretrain_steps,
               const fs::path& out) {
  if (study != "components" && study != "support-size" && study != "pretrained")
    throw ConfigError("unknown study '" + study + "' (expected components, support-size or pretrained)");
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  if (seed) cfg.seed = *seed;
  auto ds = data::read_dataset(data_dir);
  std::vector<ablation::Variant> variants;
  if (study == "components") variants = ablation::components_variants(ds, cfg);
  if (study == "support-size") variants = ablation::support_size_variants(ds, cfg, sizes);
  if (study == "pretrained") variants = ablation::pretrained_variants(ds, cfg, pretrain_steps);
  fs::create_directories(out);
  write_text_atomic(out / "config.txt", to_text(cfg));
  auto st = ablation::run_variants(study, variants, seeds, cfg.seed, out);
  std::fputs(st.summary_csv().c_str(), stdout);
  if (study == "components") {
    auto text = ablation::verdict_text(ablation::components_verdicts(st));
    write_text_atomic(out / "verdict.txt", text);
    std::fputs(text.c_str(), stdout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sgp: few-shot segmentation with pseudo-mask guided memory"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::string kind = "shapes2d", out, data_dir, config_path, ckpt, split = "test", study, sizes_text = "1,2,4,8,16";
  std::string metrics;
  std::size_t n = 104, size = 64, depth = 8, classes = 1, support = 4, index = 0, seeds = 3, pretrain_steps = 500;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> ablate_seed;
  double test_frac = 0.2;
  data::CorpusKnobs knobs;
  std::vector<std::string> sets;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen->add_option("--kind", kind, "shapes2d or tubes3d")->capture_default_str();
  gen->add_option("--n", n, "Number of samples")->capture_default_str();
  gen->add_option("--size", size, "Image side length")->capture_default_str();
  gen->add_option("--depth", depth, "Slices per volume (tubes3d)")->capture_default_str();
  gen->add_option("--classes", classes, "Foreground classes (shapes2d)")->capture_default_str();
  gen->add_option("--seed", seed, "Generation and split seed")->capture_default_str();
  gen->add_option("--support", support, "Support-set size of the split")->capture_default_str();
  gen->add_option("--test-frac", test_frac, "Fraction of samples held out for testing")->capture_default_str();
  gen->add_option("--fg-scale", knobs.fg_scale, "Structure size multiplier")->capture_default_str();
  gen->add_option("--noise", knobs.noise, "White-noise standard deviation")->capture_default_str();
  gen->add_option("--drift", knobs.drift, "Per-slice displacement multiplier (tubes3d)")->capture_default_str();
  gen->add_option("--contrast", knobs.contrast, "Foreground contrast multiplier")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train on a dataset directory");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--set", sets, "Override one config key (key=value), repeatable");
  tr->add_option("--out", out, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint or run directory")->required();
  ev->add_option("--split", split, "sup, qry or test")->capture_default_str();
  ev->add_option("--metrics", metrics, "Also write the rows in metrics-log format to this file");

  auto* pr = app.add_subcommand("predict", "Predict one sample and write previews");
  pr->add_option("--data", data_dir, "Dataset directory")->required();
  pr->add_option("--ckpt", ckpt, "Checkpoint or run directory")->required();
  pr->add_option("--index", index, "Sample index")->required();
  pr->add_option("--out", out, "Output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");

  auto* ab = app.add_subcommand("ablate", "Run an ablation study over several seeds");
  ab->add_option("--study", study, "components, support-size or pretrained")->required();
  ab->add_option("--data", data_dir, "Dataset directory")->required();
  ab->add_option("--config", config_path, "key=value config file");
  ab->add_option("--set", sets, "Override one config key (key=value), repeatable");
  ab->add_option("--sizes", sizes_text, "Support sizes for the support-size study")->capture_default_str();
  ab->add_option("--seeds", seeds, "Seeds per variant")->capture_default_str();
  ab->add_option("--seed", ablate_seed, "First training seed (default: the config seed)");
  ab->add_option("--pretrain-steps", pretrain_steps, "Autoencoding steps for the pretrained variant")
      ->capture_default_str();
  ab->add_option("--out", out, "Study directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = &app;
    for (auto* s : app.get_subcommands()) sub = s;
    std::cerr << sub->help();
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(kind, n, size, depth, classes, seed, support, test_frac, knobs, out);
    if (*tr) return cmd_train(data_dir, config_from(config_path, sets), out);
    if (*ev) return cmd_eval(data_dir, ckpt, split, metrics);
    if (*pr) return cmd_predict(data_dir, ckpt, index, out);
    if (*gc) return cmd_gradcheck();
    if (*ab) {
      std::vector<std::size_t> sizes;
      std::stringstream ss(sizes_text);
      for (std::string tok; std::getline(ss, tok, ',');) sizes.push_back(detail::parse_size("--sizes", tok));
      return cmd_ablate(study, data_dir, config_from(config_path, sets), seeds, ablate_seed, sizes, pretrain_steps,
                        out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}
