#pragma once

// Flat key=value run configuration.

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sgp/error.hpp"
#include "sgp/loss.hpp"
#include "sgp/model.hpp"

namespace sgp {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t support_k = 4;
  std::size_t bank_capacity = 0;  // 0: equal to support_k
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;      // 0: once per pass over the query set
  std::size_t pretrain_steps = 0;  // auxiliary autoencoding steps before fine-tuning

  std::size_t capacity() const { return bank_capacity ? bank_capacity : support_k; }
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || x < 0) throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + v + "'");
  return std::size_t(x);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || !std::isfinite(x)) throw ConfigError("config key '" + key + "' needs a real number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config key '" + key + "' needs true/false, got '" + v + "'");
}

inline std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline const std::vector<ConfigKey>& config_keys() {
  using C = TrainConfig;
  using S = const std::string&;
  auto sz = [](const char* k, std::size_t C::*f) {
    return ConfigKey{k, [k, f](C& c, S v) { c.*f = parse_size(k, v); },
                     [f](const C& c) { return std::to_string(c.*f); }};
  };
  auto msz = [](const char* k, std::size_t ModelConfig::*f) {
    return ConfigKey{k, [k, f](C& c, S v) { c.model.*f = parse_size(k, v); },
                     [f](const C& c) { return std::to_string(c.model.*f); }};
  };
  auto mb = [](const char* k, bool ModelConfig::*f) {
    return ConfigKey{k, [k, f](C& c, S v) { c.model.*f = parse_bool(k, v); },
                     [f](const C& c) { return std::string(c.model.*f ? "true" : "false"); }};
  };
  auto lw = [](const char* k, double LossConfig::*f) {
    return ConfigKey{k, [k, f](C& c, S v) { c.loss.*f = parse_real(k, v); },
                     [f](const C& c) { return fmt_real(c.loss.*f); }};
  };
  static const std::vector<ConfigKey> keys = {
      msz("model.dim", &ModelConfig::dim),
      msz("model.blocks", &ModelConfig::blocks),
      msz("model.patch", &ModelConfig::patch),
      msz("model.skip_channels", &ModelConfig::skip_channels),
      msz("model.up_channels", &ModelConfig::up_channels),
      mb("model.pmg", &ModelConfig::pmg),
      mb("model.mem3d", &ModelConfig::mem3d),
      mb("model.memory_norm", &ModelConfig::memory_pre_norm),
      msz("model.box_margin", &ModelConfig::box_margin),
      {"model.box_tau", [](C& c, S v) { c.model.box_tau = parse_real("model.box_tau", v); },
       [](const C& c) { return fmt_real(c.model.box_tau); }},
      msz("lora.rank", &ModelConfig::lora_rank),
      {"lora.alpha", [](C& c, S v) { c.model.lora_alpha = parse_real("lora.alpha", v); },
       [](const C& c) { return fmt_real(c.model.lora_alpha); }},
      sz("support.k", &C::support_k),
      sz("bank.capacity", &C::bank_capacity),
      lw("loss.dice", &LossConfig::dice),
      lw("loss.ce", &LossConfig::ce),
      lw("loss.kl", &LossConfig::kl),
      {"train.lr", [](C& c, S v) { c.lr = parse_real("train.lr", v); }, [](const C& c) { return fmt_real(c.lr); }},
      sz("train.steps", &C::steps),
      sz("train.eval_every", &C::eval_every),
      sz("train.pretrain_steps", &C::pretrain_steps),
      {"seed", [](C& c, S v) { c.seed = parse_size("seed", v); }, [](const C& c) { return std::to_string(c.seed); }},
  };
  return keys;
}

}  // namespace detail

inline void validate(const TrainConfig& c) {
  if (c.model.dim < 4 || c.model.dim % 4) throw ConfigError("model.dim must be a positive multiple of 4");
  if (c.model.patch < 1) throw ConfigError("model.patch must be >= 1");
  if (c.model.skip_channels < 1 || c.model.up_channels < 1) throw ConfigError("model.skip_channels and model.up_channels must be >= 1");
  if (!(c.model.box_tau > 0 && c.model.box_tau < 1)) throw ConfigError("model.box_tau must lie in (0, 1)");
  if (c.support_k < 1) throw ConfigError("support.k must be >= 1");
  if (c.lr < 0) throw ConfigError("train.lr must be non-negative");
  c.loss.validate();
}

// Applies one key=value pair; unknown keys are rejected.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      k.set(c, value);
      return;
    }
  }
  std::string known;
  for (const auto& k : detail::config_keys()) known += std::string(known.empty() ? "" : ", ") + k.name;
  throw ConfigError("unknown config key '" + key + "' (known keys: " + known + ")");
}

inline TrainConfig parse_config(const std::string& text, TrainConfig c = {}) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Every key, in a fixed order; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + "=" + k.get(c) + "\n";
  return out;
}

}  // namespace sgp
