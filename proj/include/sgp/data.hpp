#pragma once

// Synthetic corpora (2-D shapes, 3-D drifting tubes), support/query/test splits
// and the on-disk dataset layout.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sgp/error.hpp"
#include "sgp/rng.hpp"
#include "sgp/sgt_io.hpp"
#include "sgp/tensor.hpp"

namespace sgp::data {

enum class Kind { Shapes2d, Tubes3d };

inline std::string kind_name(Kind k) { return k == Kind::Shapes2d ? "shapes2d" : "tubes3d"; }

inline Kind parse_kind(const std::string& s) {
  if (s == "shapes2d") return Kind::Shapes2d;
  if (s == "tubes3d") return Kind::Tubes3d;
  throw ConfigError("unknown dataset kind '" + s + "' (expected shapes2d or tubes3d)");
}

// Difficulty knobs shared by both generators.
struct CorpusKnobs {
  double fg_scale = 1.0;  // multiplies structure radii
  double noise = 0.05;    // white-noise standard deviation
  double drift = 1.0;     // 3-D: per-slice displacement multiplier
  double contrast = 1.0;  // foreground/background intensity gap multiplier
};

// image [C x H x W] and mask [K x H x W] (2-D) or [D x C x H x W] / [D x K x H x W] (3-D).
struct Sample {
  Tensor<float> image;
  Tensor<float> mask;

  std::size_t depth() const { return image.rank() == 4 ? image.dim(0) : 1; }
  Tensor<float> image_slice(std::size_t z) const { return slice_of(image, z); }
  Tensor<float> mask_slice(std::size_t z) const { return slice_of(mask, z); }

 private:
  static Tensor<float> slice_of(const Tensor<float>& t, std::size_t z) {
    if (t.rank() == 3) {
      if (z != 0) throw ContractError("slice index out of range for a 2-D sample");
      return t;
    }
    const std::size_t st = t.numel() / t.dim(0);
    Shape dims(t.dims().begin() + 1, t.dims().end());
    return Tensor<float>(dims, std::vector<float>(t.data().begin() + z * st, t.data().begin() + (z + 1) * st));
  }
};

struct Dataset {
  Kind kind = Kind::Shapes2d;
  std::vector<Sample> samples;
  std::vector<std::size_t> support;  // S_sup
  std::vector<std::size_t> query;    // S_qry
  std::vector<std::size_t> test;     // S_test
  std::size_t classes = 1;
  std::size_t hw = 64;
  std::size_t depth = 1;
  std::uint64_t seed = 0;
  bool duplicated_support = false;  // support samples also serve as queries

  const std::vector<std::size_t>& split_indices(const std::string& name) const {
    if (name == "sup" || name == "support") return support;
    if (name == "qry" || name == "query" || name == "train") return query;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected sup, qry or test)");
  }
};

// A support element: one 2-D slice of one sample.
struct SliceRef {
  std::size_t sample = 0;
  std::size_t slice = 0;
  bool operator==(const SliceRef&) const = default;
};

struct Episode {
  std::size_t query = 0;
  std::vector<SliceRef> support;
};

namespace detail {

struct Shape2d {
  bool ellipse;
  double cy, cx, ry, rx, angle;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
    if (ellipse) return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    return std::abs(u) <= rx && std::abs(v) <= ry;
  }
};

// Smooth texture: a few random plane waves around a base level.
inline std::vector<double> background(std::size_t hw, Rng& rng, double base) {
  std::vector<double> bg(hw * hw, base);
  for (int wave = 0; wave < 3; ++wave) {
    const double fy = rng.uniform(-6, 6) / double(hw), fx = rng.uniform(-6, 6) / double(hw);
    const double ph = rng.uniform(0, 6.283185307179586), amp = rng.uniform(0.02, 0.06);
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t j = 0; j < hw; ++j)
        bg[i * hw + j] += amp * std::sin(6.283185307179586 * (fy * double(i) + fx * double(j)) + ph);
  }
  return bg;
}

// Paints `s` with intensity `val` using 4x4 supersampled coverage; the mask uses pixel centres.
inline void paint(const Shape2d& s, double val, std::size_t hw, std::vector<double>& img, std::vector<int>& label,
                  int cls) {
  const int lo_r = std::max(0, int(std::floor(s.cy - std::max(s.ry, s.rx) * 1.5)) - 1);
  const int hi_r = std::min(int(hw) - 1, int(std::ceil(s.cy + std::max(s.ry, s.rx) * 1.5)) + 1);
  const int lo_c = std::max(0, int(std::floor(s.cx - std::max(s.ry, s.rx) * 1.5)) - 1);
  const int hi_c = std::min(int(hw) - 1, int(std::ceil(s.cx + std::max(s.ry, s.rx) * 1.5)) + 1);
  for (int i = lo_r; i <= hi_r; ++i) {
    for (int j = lo_c; j <= hi_c; ++j) {
      int inside = 0;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) inside += s.contains(i + (a + 0.5) / 4.0, j + (b + 0.5) / 4.0);
      if (inside == 0) continue;
      const double cov = inside / 16.0;
      auto& p = img[std::size_t(i) * hw + std::size_t(j)];
      p = p * (1 - cov) + val * cov;
      if (s.contains(i + 0.5, j + 0.5)) label[std::size_t(i) * hw + std::size_t(j)] = cls;
    }
  }
}

inline std::string index_name(std::size_t i, std::size_t n) {
  const int width = n > 10000 ? int(std::to_string(n - 1).size()) : 4;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return buf;
}

}  // namespace detail

inline Sample make_shapes2d_sample(std::size_t hw, std::size_t classes, Rng rng, const CorpusKnobs& knobs) {
  for (int attempt = 0;; ++attempt) {
    Rng r = rng.split(std::uint64_t(attempt));
    auto img = detail::background(hw, r, 0.2);
    std::vector<int> label(hw * hw, -1);
    for (std::size_t c = 0; c < classes; ++c) {
      const int count = r.range(1, 3);
      const double level = 0.2 + knobs.contrast * (0.35 + 0.3 * double(c) / double(classes));
      for (int s = 0; s < count; ++s) {
        detail::Shape2d sh;
        sh.ellipse = r.uniform() < 0.5;
        sh.cy = r.uniform(0.15, 0.85) * double(hw);
        sh.cx = r.uniform(0.15, 0.85) * double(hw);
        sh.ry = r.uniform(0.08, 0.18) * double(hw) * knobs.fg_scale;
        sh.rx = r.uniform(0.08, 0.18) * double(hw) * knobs.fg_scale;
        sh.angle = r.uniform(0, 3.141592653589793);
        detail::paint(sh, level + r.uniform(-0.04, 0.04), hw, img, label, int(c));
      }
    }
    std::vector<std::size_t> counts(classes, 0);
    for (int l : label)
      if (l >= 0) ++counts[std::size_t(l)];
    if (std::any_of(counts.begin(), counts.end(), [](std::size_t n) { return n == 0; })) continue;
    std::vector<float> pix(hw * hw), m(classes * hw * hw, 0.0f);
    for (std::size_t i = 0; i < hw * hw; ++i) {
      pix[i] = float(img[i] + knobs.noise * r.normal());
      if (label[i] >= 0) m[std::size_t(label[i]) * hw * hw + i] = 1.0f;
    }
    return {Tensor<float>({1, hw, hw}, std::move(pix)), Tensor<float>({classes, hw, hw}, std::move(m))};
  }
}

inline Dataset gen_shapes2d(std::size_t n, std::size_t hw, std::size_t classes, std::uint64_t seed,
                            const CorpusKnobs& knobs = {}) {
  if (classes < 1) throw ConfigError("gen_shapes2d: classes must be >= 1");
  if (hw < 8) throw ConfigError("gen_shapes2d: image size must be >= 8");
  Dataset ds;
  ds.kind = Kind::Shapes2d;
  ds.classes = classes;
  ds.hw = hw;
  ds.depth = 1;
  ds.seed = seed;
  Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(make_shapes2d_sample(hw, classes, root.split(i), knobs));
  return ds;
}

inline Sample make_tube_volume(std::size_t d, std::size_t hw, Rng r, const CorpusKnobs& knobs) {
  const double H = double(hw);
  double cy = r.uniform(0.3, 0.7) * H, cx = r.uniform(0.3, 0.7) * H;
  const double heading = r.uniform(0, 6.283185307179586);
  const double speed = r.uniform(0.6, 1.2) * knobs.drift * H / 48.0;
  double vy = speed * std::sin(heading), vx = speed * std::cos(heading);
  const double r0 = r.uniform(0.10, 0.16) * H * knobs.fg_scale;
  const double wobble = r.uniform(0, 6.283185307179586);
  const bool has_blob = r.uniform() < 0.6;
  const double bz = r.uniform(0, double(d)), bextent = r.uniform(1.5, std::max(2.0, double(d) / 3));
  const double by = r.uniform(0.2, 0.8) * H, bx = r.uniform(0.2, 0.8) * H;
  const double br = r.uniform(0.07, 0.11) * H * knobs.fg_scale;

  std::vector<float> pix(d * hw * hw), m(d * hw * hw, 0.0f);
  for (std::size_t z = 0; z < d; ++z) {
    Rng rs = r.split(1000 + z);
    auto img = detail::background(hw, rs, 0.2);
    std::vector<int> label(hw * hw, -1);
    const double contrast = knobs.contrast * rs.uniform(0.25, 0.5);
    detail::Shape2d tube{true, cy, cx, r0 * (1 + 0.2 * std::sin(wobble + 0.5 * double(z))),
                         r0 * (1 + 0.2 * std::cos(wobble + 0.4 * double(z))), 0.0};
    detail::paint(tube, 0.2 + contrast, hw, img, label, 0);
    if (has_blob) {
      const double dz = (double(z) - bz) / bextent;
      if (std::abs(dz) < 1) {
        const double rad = br * std::sqrt(1 - dz * dz);
        if (rad > 1.0) detail::paint({true, by, bx, rad, rad, 0.0}, 0.2 + contrast, hw, img, label, 0);
      }
    }
    for (std::size_t i = 0; i < hw * hw; ++i) {
      pix[z * hw * hw + i] = float(img[i] + knobs.noise * rs.normal());
      if (label[i] >= 0) m[z * hw * hw + i] = 1.0f;
    }
    cy = std::clamp(cy + vy, 0.2 * H, 0.8 * H);
    cx = std::clamp(cx + vx, 0.2 * H, 0.8 * H);
    vy += rs.normal() * 0.1 * speed;
    vx += rs.normal() * 0.1 * speed;
  }
  return {Tensor<float>({d, 1, hw, hw}, std::move(pix)), Tensor<float>({d, 1, hw, hw}, std::move(m))};
}

inline Dataset gen_tubes3d(std::size_t n, std::size_t d, std::size_t hw, std::uint64_t seed,
                           const CorpusKnobs& knobs = {}) {
  if (d < 4) throw ConfigError("gen_tubes3d: depth must be >= 4");
  if (hw < 8) throw ConfigError("gen_tubes3d: image size must be >= 8");
  Dataset ds;
  ds.kind = Kind::Tubes3d;
  ds.classes = 1;
  ds.hw = hw;
  ds.depth = d;
  ds.seed = seed;
  Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(make_tube_volume(d, hw, root.split(i), knobs));
  return ds;
}

// Random support/query/test partition. |S_test| = round(test_frac * n); the first
// `support_size` training samples of the permutation form S_sup. With `duplicate`,
// S_sup is a subset of the training set that keeps serving as queries.
inline void split(Dataset& ds, std::size_t support_size, double test_frac, std::uint64_t seed,
                  bool duplicate = false) {
  const std::size_t n = ds.samples.size();
  if (support_size < 1) throw ConfigError("split: support size must be >= 1");
  if (!(test_frac >= 0 && test_frac < 1)) throw ConfigError("split: test fraction must lie in [0, 1)");
  const std::size_t n_test = std::size_t(std::floor(test_frac * double(n) + 0.5));
  if (n_test >= n) throw ConfigError("split: no training samples left");
  const std::size_t n_train = n - n_test;
  if (support_size > n_train) {
    throw ConfigError("split: support size " + std::to_string(support_size) + " exceeds " +
                      std::to_string(n_train) + " training samples");
  }
  if (!duplicate && n_train - support_size <= support_size) {
    throw ConfigError("split: query set (" + std::to_string(n_train - support_size) +
                      ") must be larger than the support set (" + std::to_string(support_size) + ")");
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = Rng(seed).split(0x5b11);
  rng.shuffle(perm);
  ds.test.assign(perm.begin(), perm.begin() + std::ptrdiff_t(n_test));
  std::vector<std::size_t> train(perm.begin() + std::ptrdiff_t(n_test), perm.end());
  ds.support.assign(train.begin(), train.begin() + std::ptrdiff_t(support_size));
  if (duplicate) {
    ds.query = train;
  } else {
    ds.query.assign(train.begin() + std::ptrdiff_t(support_size), train.end());
  }
  for (auto* v : {&ds.test, &ds.support, &ds.query}) std::sort(v->begin(), v->end());
  ds.duplicated_support = duplicate;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const std::size_t n = ds.samples.size();
  std::map<std::size_t, std::vector<std::string>> splits;
  for (auto i : ds.support) splits[i].push_back("sup");
  for (auto i : ds.query) splits[i].push_back("qry");
  for (auto i : ds.test) splits[i].push_back("test");
  std::ostringstream manifest;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = detail::index_name(i, n);
    const std::string img = "images/" + name + ".sgt", msk = "masks/" + name + ".sgt";
    write_sgt(dir / img, ds.samples[i].image);
    write_sgt(dir / msk, ds.samples[i].mask);
    for (const auto& s : splits[i]) manifest << i << ' ' << s << ' ' << img << ' ' << msk << '\n';
  }
  std::ostringstream meta;
  meta << "kind=" << kind_name(ds.kind) << '\n'
       << "classes=" << ds.classes << '\n'
       << "hw=" << ds.hw << '\n'
       << "depth=" << ds.depth << '\n'
       << "seed=" << ds.seed << '\n';
  const std::string m = manifest.str(), t = meta.str();
  write_bytes_atomic(dir / "manifest.txt", {m.begin(), m.end()});
  write_bytes_atomic(dir / "meta.txt", {t.begin(), t.end()});
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw IoError("cannot read " + (dir / "meta.txt").string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(meta, line);) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"classes", "hw", "depth", "seed"}) {
    if (!kv.count(key)) throw IoError("meta.txt in " + dir.string() + " lacks '" + key + "'");
  }
  ds.classes = std::stoul(kv["classes"]);
  ds.hw = std::stoul(kv["hw"]);
  ds.depth = std::stoul(kv["depth"]);
  ds.seed = std::stoull(kv["seed"]);
  ds.kind = kv.count("kind") ? parse_kind(kv["kind"]) : (ds.depth > 1 ? Kind::Tubes3d : Kind::Shapes2d);

  std::ifstream man(dir / "manifest.txt");
  if (!man) throw IoError("cannot read " + (dir / "manifest.txt").string());
  std::map<std::size_t, std::pair<std::string, std::string>> files;
  std::size_t idx;
  std::string split_name, img, msk;
  while (man >> idx >> split_name >> img >> msk) {
    files[idx] = {img, msk};
    if (split_name == "sup") ds.support.push_back(idx);
    else if (split_name == "qry") ds.query.push_back(idx);
    else if (split_name == "test") ds.test.push_back(idx);
    else throw IoError("unknown split '" + split_name + "' in manifest of " + dir.string());
  }
  if (files.empty()) throw IoError("empty manifest in " + dir.string());
  if (files.rbegin()->first + 1 != files.size()) throw IoError("manifest indices are not contiguous in " + dir.string());
  for (const auto& [i, f] : files) ds.samples.push_back({read_sgt<float>(dir / f.first), read_sgt<float>(dir / f.second)});
  for (auto s : ds.support) {
    if (std::binary_search(ds.query.begin(), ds.query.end(), s)) ds.duplicated_support = true;
  }
  return ds;
}

}  // namespace sgp::data
