#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rmsin/harness/optim.hpp"
#include "rmsin/model.hpp"

namespace rmsin {

/// Everything a training run depends on besides the data.
struct TrainConfig {
  ModelConfig model;
  double lr = 3e-4;  // desk-scale default; 3e-5 is the full-scale value for pretrained backbones
  int epochs = 30;   // 40 at full scale
  int batch_size = 8;
  double poly_power = 0.9;
  double val_fraction = 0.2;
  bool augment = false;  // random symmetry of the square per training sample
  bool rerefer = false;  // point each training sample at a freshly drawn shape of its scene
  AdamWOptions adamw;

  void validate() const {
    model.validate();
    auto fail = [](const std::string& m) { throw UsageError("invalid training config: " + m); };
    if (!(lr > 0)) fail("lr must be positive");
    if (epochs < 1) fail("epochs must be at least 1");
    if (batch_size < 1) fail("batch_size must be at least 1");
    if (!(poly_power > 0)) fail("poly_power must be positive");
    if (!(val_fraction > 0 && val_fraction < 1)) fail("val_fraction must lie in (0, 1)");
    if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(adamw.eps > 0)) fail("eps must be positive");
    if (adamw.weight_decay < 0) fail("weight_decay must be non-negative");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Field table shared by parsing and printing.
struct ConfigField {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
  bool model;  // part of the architecture echoed in checkpoints
};

template <typename V>
V parse_value(const std::string& key, const std::string& text);

template <>
inline int parse_value<int>(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("config key '" + key + "' expects an integer, got '" + text + "'");
  return v;
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("config key '" + key + "' expects a number, got '" + text + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw UsageError("config key '" + key + "' expects true or false, got '" + text + "'");
}

template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& text) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
    throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + text + "'");
  return std::stoull(text);
}

template <>
inline std::vector<int> parse_value<std::vector<int>>(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) out.push_back(parse_value<int>(key, trim(item)));
  if (out.empty()) throw UsageError("config key '" + key + "' expects a comma-separated list");
  return out;
}

inline std::string show(int v) { return std::to_string(v); }
inline std::string show(std::uint64_t v) { return std::to_string(v); }
inline std::string show(double v) { return format_double(v); }
inline std::string show(bool v) { return v ? "true" : "false"; }
inline std::string show(const std::vector<int>& v) { return join_ints(v); }

template <typename V>
ConfigField field(const std::string& key, V TrainConfig::*outer, bool model = false) {
  return {key, [outer](const TrainConfig& c) { return show(c.*outer); },
          [outer, key](TrainConfig& c, const std::string& t) { c.*outer = parse_value<V>(key, t); }, model};
}

template <typename V>
ConfigField model_field(const std::string& key, V ModelConfig::*member) {
  return {key, [member](const TrainConfig& c) { return show(c.model.*member); },
          [member, key](TrainConfig& c, const std::string& t) { c.model.*member = parse_value<V>(key, t); }, true};
}

template <typename V>
ConfigField adam_field(const std::string& key, V AdamWOptions::*member) {
  return {key, [member](const TrainConfig& c) { return show(c.adamw.*member); },
          [member, key](TrainConfig& c, const std::string& t) { c.adamw.*member = parse_value<V>(key, t); }, false};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      model_field("image_size", &ModelConfig::image_size),
      model_field("stem_channels", &ModelConfig::stem_channels),
      model_field("vocab_size", &ModelConfig::vocab_size),
      model_field("text_channels", &ModelConfig::text_channels),
      model_field("max_tokens", &ModelConfig::max_tokens),
      model_field("branch_kernels", &ModelConfig::branch_kernels),
      model_field("scales", &ModelConfig::scales),
      model_field("arc_angles", &ModelConfig::arc_angles),
      model_field("arc_depth", &ModelConfig::arc_depth),
      model_field("decoder_channels", &ModelConfig::decoder_channels),
      model_field("ffn_expansion", &ModelConfig::ffn_expansion),
      model_field("use_iim", &ModelConfig::use_iim),
      model_field("use_cim", &ModelConfig::use_cim),
      model_field("use_arc", &ModelConfig::use_arc),
      model_field("seed", &ModelConfig::seed),
      field("lr", &TrainConfig::lr),
      field("epochs", &TrainConfig::epochs),
      field("batch_size", &TrainConfig::batch_size),
      field("poly_power", &TrainConfig::poly_power),
      field("val_fraction", &TrainConfig::val_fraction),
      field("augment", &TrainConfig::augment),
      field("rerefer", &TrainConfig::rerefer),
      adam_field("beta1", &AdamWOptions::beta1),
      adam_field("beta2", &AdamWOptions::beta2),
      adam_field("eps", &AdamWOptions::eps),
      adam_field("weight_decay", &AdamWOptions::weight_decay),
  };
  return fields;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`. Blank lines and `#`
/// comments are skipped; unknown keys and malformed values are usage errors.
inline TrainConfig parse_config(const std::string& text, const std::string& source = "config", TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw UsageError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    bool known = false;
    for (const auto& f : detail::config_fields())
      if (f.key == key) {
        try {
          f.set(base, value);
        } catch (const UsageError& e) {
          throw UsageError(where + e.what());
        }
        known = true;
      }
    if (!known) throw UsageError(where + "unknown config key '" + key + "'");
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Every field as `key = value`; with `model_only` just the architecture.
inline std::string config_text(const TrainConfig& c, bool model_only = false) {
  std::string out;
  for (const auto& f : detail::config_fields())
    if (f.model || !model_only) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

inline std::string model_config_text(const ModelConfig& m) {
  TrainConfig c;
  c.model = m;
  return config_text(c, true);
}

inline ModelConfig parse_model_config(const std::string& text, const std::string& source) {
  TrainConfig c = parse_config(text, source);
  return c.model;
}

/// The documented desk defaults as a commented config file.
inline std::string default_config_file() {
  std::string s =
      "# Desk-scale training defaults. The full-scale reference run used lr = 3e-5\n"
      "# for 40 epochs with pretrained backbones; from-scratch training here uses\n"
      "# lr = 3e-4 for 30 epochs.\n";
  return s + config_text(TrainConfig{});
}

}  // namespace rmsin
