#pragma once

// Run configuration: a flat TOML-style file ([section] headers, key = value,
// strings, numbers, booleans, flat arrays, # comments) plus flag overrides.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "steerfair/error.hpp"
#include "steerfair/io.hpp"
#include "steerfair/model.hpp"
#include "steerfair/steering.hpp"
#include "steerfair/taskgen.hpp"

namespace steerfair::config {

struct Value {
  bool quoted = false;
  std::string text;          // scalar
  std::vector<Value> items;  // arrays
  bool is_array = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] inline void fail(std::size_t line, const std::string& why) {
  throw error(errc::config_parse, "line " + std::to_string(line) + ": " + why);
}

inline std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

inline Value parse_scalar(const std::string& raw, std::size_t line) {
  auto t = trim(raw);
  if (t.empty()) fail(line, "missing value");
  Value v;
  if (t.front() == '"') {
    if (t.size() < 2 || t.back() != '"') fail(line, "unterminated string");
    v.quoted = true;
    v.text = t.substr(1, t.size() - 2);
    if (v.text.find('"') != std::string::npos) fail(line, "embedded quotes are not supported");
  } else {
    v.text = t;
  }
  return v;
}

inline Value parse_value(const std::string& raw, std::size_t line) {
  auto t = trim(raw);
  if (!t.empty() && t.front() == '[') {
    if (t.back() != ']') fail(line, "unterminated array");
    Value v;
    v.is_array = true;
    auto body = trim(t.substr(1, t.size() - 2));
    if (body.empty()) return v;
    std::string item;
    bool in_str = false;
    for (char ch : body) {
      if (ch == '"') in_str = !in_str;
      if (ch == ',' && !in_str) {
        v.items.push_back(parse_scalar(item, line));
        item.clear();
      } else {
        item += ch;
      }
    }
    if (!trim(item).empty()) v.items.push_back(parse_scalar(item, line));
    return v;
  }
  return parse_scalar(t, line);
}

}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string raw, section;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
      ++line;
      auto s = detail::trim(detail::strip_comment(raw));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') detail::fail(line, "bad section header");
        section = detail::trim(s.substr(1, s.size() - 2));
        if (section.empty()) detail::fail(line, "empty section name");
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos) detail::fail(line, "expected key = value");
      auto key = detail::trim(s.substr(0, eq));
      if (key.empty()) detail::fail(line, "empty key");
      auto full = section.empty() ? key : section + "." + key;
      if (kv.entries_.count(full)) detail::fail(line, "duplicate key " + full);
      kv.entries_[full] = detail::parse_value(s.substr(eq + 1), line);
    }
    return kv;
  }

  bool has(const std::string& k) const { return entries_.count(k) > 0; }
  void set(const std::string& k, Value v) { entries_[k] = std::move(v); }
  void set_text(const std::string& k, const std::string& text, bool quoted = false) {
    Value v;
    v.text = text;
    v.quoted = quoted;
    entries_[k] = v;
  }
  const std::map<std::string, Value>& entries() const { return entries_; }

  std::string str(const std::string& k, const std::string& def) const {
    auto it = entries_.find(k);
    if (it == entries_.end()) return def;
    if (it->second.is_array) throw error(errc::config_parse, k + ": expected a scalar");
    return it->second.text;
  }
  double real(const std::string& k, double def) const {
    if (!has(k)) return def;
    return to_real(k, entries_.at(k));
  }
  std::uint64_t count(const std::string& k, std::uint64_t def) const {
    if (!has(k)) return def;
    return to_count(k, entries_.at(k));
  }
  bool boolean(const std::string& k, bool def) const {
    auto s = str(k, def ? "true" : "false");
    if (s == "true") return true;
    if (s == "false") return false;
    throw error(errc::config_parse, k + ": expected true or false");
  }
  std::vector<double> reals(const std::string& k, std::vector<double> def) const {
    if (!has(k)) return def;
    std::vector<double> out;
    for (const auto& v : array(k)) out.push_back(to_real(k, v));
    return out;
  }
  std::vector<std::uint64_t> counts(const std::string& k, std::vector<std::uint64_t> def) const {
    if (!has(k)) return def;
    std::vector<std::uint64_t> out;
    for (const auto& v : array(k)) out.push_back(to_count(k, v));
    return out;
  }
  std::vector<std::string> strs(const std::string& k, std::vector<std::string> def) const {
    if (!has(k)) return def;
    std::vector<std::string> out;
    for (const auto& v : array(k)) out.push_back(v.text);
    return out;
  }

 private:
  const std::vector<Value>& array(const std::string& k) const {
    const auto& v = entries_.at(k);
    if (!v.is_array) throw error(errc::config_parse, k + ": expected an array");
    return v.items;
  }
  static double to_real(const std::string& k, const Value& v) {
    try {
      std::size_t pos = 0;
      double x = std::stod(v.text, &pos);
      if (pos != v.text.size() || v.quoted) throw 0;
      return x;
    } catch (...) {
      throw error(errc::config_parse, k + ": expected a number, got '" + v.text + "'");
    }
  }
  static std::uint64_t to_count(const std::string& k, const Value& v) {
    try {
      std::size_t pos = 0;
      if (v.quoted || v.text.empty() || v.text[0] == '-') throw 0;
      auto x = std::stoull(v.text, &pos);
      if (pos != v.text.size()) throw 0;
      return x;
    } catch (...) {
      throw error(errc::config_parse, k + ": expected a non-negative integer, got '" + v.text + "'");
    }
  }

  std::map<std::string, Value> entries_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";

  taskgen::DatasetSpec data;  // theme = the dataset this run evaluates / finds directions on
  std::vector<std::string> train_themes;
  model::ModelConfig model;
  model::TrainOptions train;
  double alpha = 1.0;
  steering::HeadCount k = steering::HeadCount::all();
  steering::FindOptions find;
  std::size_t n_questions = 500;  // unlabeled questions used for demonstrations
  std::vector<double> sweep_alphas;
  std::vector<std::size_t> sweep_ks;
  std::vector<std::size_t> study_ns;
  std::vector<std::uint64_t> study_seeds;
  double best_cell_avg_tolerance = 0.02;

  std::string data_dir = "data";
  std::string checkpoint = "model.json";
  std::string directions = "directions.json";

  std::filesystem::path data_path(const std::string& theme, const std::string& split) const {
    return out_dir / data_dir / theme / (split + ".jsonl");
  }
  std::filesystem::path checkpoint_path() const { return out_dir / checkpoint; }
  std::filesystem::path directions_path() const { return out_dir / directions; }
  std::filesystem::path output(const std::string& name) const { return out_dir / name; }

  // generation seed per theme, so themes sharing a run seed still differ
  taskgen::DatasetSpec spec_for(const std::string& theme) const {
    auto s = data;
    s.theme = theme;
    std::uint64_t idx = 0;
    const auto& themes = taskgen::builtin_themes();
    for (std::size_t i = 0; i < themes.size(); ++i)
      if (themes[i].name == theme) idx = i;
    s.seed = seed + 1000 * idx;
    return s;
  }
};

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> k{
      "seed", "out_dir",
      "data.task_kind", "data.options", "data.n_train", "data.n_eval", "data.n_val", "data.n_unlabeled", "data.p_bias",
      "data.zipf", "data.theme", "data.train_themes",
      "model.layers", "model.heads", "model.d_model", "model.max_seq_len",
      "train.optimizer", "train.schedule", "train.lr", "train.steps", "train.batch_size", "train.log_every",
      "steer.alpha", "steer.k", "steer.scoring", "steer.orientation", "steer.n_questions", "steer.probe_questions",
      "steer.probe_alpha",
      "sweep.alphas", "sweep.ks", "sweep.avg_tolerance",
      "study.ns", "study.seeds",
      "paths.data_dir", "paths.checkpoint", "paths.directions"};
  return k;
}

// Value errors surface as config-parse failures so the CLI maps them to one exit code.
inline RunConfig from_key_values(const KeyValues& kv) {
  for (const auto& [k, v] : kv.entries())
    if (!known_keys().count(k)) throw error(errc::config_parse, "unknown key '" + k + "'");
  if (!kv.has("seed")) throw error(errc::config_parse, "seed is mandatory");
  RunConfig c;
  try {
    c.seed = kv.count("seed", 0);
    c.out_dir = kv.str("out_dir", "runs/default");

    c.data.task_kind = taskgen::task_kind_from_string(kv.str("data.task_kind", "mcq"));
    c.data.m = kv.count("data.options", 2);
    c.data.n_train = kv.count("data.n_train", 4000);
    c.data.n_eval = kv.count("data.n_eval", 300);
    c.data.n_val = kv.count("data.n_val", 200);
    c.data.n_unlabeled = kv.count("data.n_unlabeled", 500);
    c.data.p_bias = kv.real("data.p_bias", 0.9);
    c.data.zipf = kv.real("data.zipf", 0.0);
    c.data.theme = kv.str("data.theme", "A");
    taskgen::find_theme(c.data.theme);
    c.train_themes = kv.strs("data.train_themes", {c.data.theme});
    for (const auto& t : c.train_themes) taskgen::find_theme(t);

    c.model.n_layers = kv.count("model.layers", 2);
    c.model.n_heads = kv.count("model.heads", 4);
    c.model.d_model = kv.count("model.d_model", 64);
    c.model.max_seq_len = kv.count("model.max_seq_len", 64);
    c.model.vocab_size = taskgen::Vocabulary::builtin().size();
    c.model.seed = c.seed;
    c.model.validate();

    auto opt = kv.str("train.optimizer", "sgd");
    if (opt != "sgd" && opt != "adam") throw error(errc::config_parse, "train.optimizer must be sgd or adam");
    c.train.optimizer = opt == "adam" ? model::Optimizer::adam : model::Optimizer::sgd;
    auto sch = kv.str("train.schedule", "constant");
    if (sch != "constant" && sch != "cosine") throw error(errc::config_parse, "train.schedule must be constant or cosine");
    c.train.schedule = sch == "cosine" ? model::Schedule::cosine : model::Schedule::constant;
    c.train.lr = kv.real("train.lr", 0.1);
    c.train.steps = kv.count("train.steps", 1000);
    c.train.batch_size = kv.count("train.batch_size", 32);
    c.train.log_every = std::max<std::uint64_t>(1, kv.count("train.log_every", 50));
    c.train.seed = c.seed;

    c.alpha = kv.real("steer.alpha", 1.0);
    if (!(c.alpha >= 0)) throw error(errc::config_parse, "steer.alpha must be >= 0");
    c.k = steering::head_count_from_string(kv.str("steer.k", "all"));
    c.find.scoring = steering::scoring_from_string(kv.str("steer.scoring", "proj"));
    c.find.orientation = steering::orientation_from_string(kv.str("steer.orientation", "probe"));
    c.find.probe_questions = kv.count("steer.probe_questions", 100);
    c.find.probe_alpha = kv.real("steer.probe_alpha", 1.0);
    c.n_questions = kv.count("steer.n_questions", 500);

    c.sweep_alphas = kv.reals("sweep.alphas", {0.1, 0.5, 1, 2, 5, 10, 15, 20, 25});
    for (auto k : kv.counts("sweep.ks", {10, 30, 50, 100, 200, 500})) c.sweep_ks.push_back(std::size_t(k));
    c.best_cell_avg_tolerance = kv.real("sweep.avg_tolerance", 0.02);
    for (auto n : kv.counts("study.ns", {2, 10, 50, 100, 500})) c.study_ns.push_back(std::size_t(n));
    c.study_seeds = kv.counts("study.seeds", {1, 2, 3});

    c.data_dir = kv.str("paths.data_dir", "data");
    c.checkpoint = kv.str("paths.checkpoint", "model.json");
    c.directions = kv.str("paths.directions", "directions.json");
  } catch (const error& e) {
    if (e.code() == errc::config_parse) throw;
    throw error(errc::config_parse, e.what());
  }
  return c;
}

inline RunConfig load(const std::filesystem::path& path, const KeyValues& overrides = {}) {
  if (!std::filesystem::exists(path)) throw error(errc::missing_input, "config file " + path.string() + " not found");
  auto kv = KeyValues::parse(io::read_file(path));
  for (const auto& [k, v] : overrides.entries()) kv.set(k, v);
  return from_key_values(kv);
}

}  // namespace steerfair::config
