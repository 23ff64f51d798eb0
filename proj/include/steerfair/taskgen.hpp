#pragma once

// Synthetic category-membership QA with controllable golden-position skew.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "steerfair/error.hpp"
#include "steerfair/model.hpp"

namespace steerfair::taskgen {

enum class TaskKind { yes_no, mcq };

inline std::string to_string(TaskKind k) { return k == TaskKind::mcq ? "mcq" : "yes_no"; }
inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "mcq") return TaskKind::mcq;
  if (s == "yes_no") return TaskKind::yes_no;
  throw error(errc::invalid_argument, "unknown task kind '" + std::string(s) + "'");
}

inline constexpr std::size_t max_options = 8;
inline const std::vector<std::string>& option_letters() {
  static const std::vector<std::string> l{"A", "B", "C", "D", "E", "F", "G", "H"};
  return l;
}

struct Category {
  std::string name;
  std::vector<std::string> words;  // most frequent first (matters for the zipf skew)
};

struct Theme {
  std::string name;
  std::vector<Category> categories;
};

// The two vocabulary themes share no words, so directions can be moved between them.
inline const std::vector<Theme>& builtin_themes() {
  static const std::vector<Theme> themes{
      {"A",
       {{"color", {"red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "gray", "black", "white", "cyan"}},
        {"animal", {"dog", "cat", "horse", "cow", "sheep", "goat", "lion", "tiger", "bear", "wolf", "fox", "mouse"}},
        {"fruit", {"apple", "banana", "cherry", "grape", "lemon", "mango", "melon", "peach", "pear", "plum", "kiwi", "lime"}},
        {"number", {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "zero", "dozen"}}}},
      {"B",
       {{"tool", {"hammer", "saw", "drill", "wrench", "pliers", "chisel", "file", "axe", "rake", "shovel", "ladder", "clamp"}},
        {"country", {"france", "spain", "italy", "japan", "china", "india", "brazil", "chile", "peru", "egypt", "kenya", "ghana"}},
        {"body", {"arm", "leg", "hand", "foot", "head", "neck", "knee", "elbow", "ankle", "wrist", "chest", "back"}},
        {"vehicle", {"car", "bus", "truck", "train", "plane", "boat", "ship", "bike", "tram", "van", "taxi", "jeep"}}}},
  };
  return themes;
}

inline const Theme& find_theme(std::string_view name) {
  for (const auto& t : builtin_themes())
    if (t.name == name) return t;
  throw error(errc::invalid_argument, "unknown theme '" + std::string(name) + "'");
}

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  // structural tokens, identifiers, then every theme's categories and words
  static const Vocabulary& builtin() {
    static const Vocabulary v = [] {
      Vocabulary x;
      for (const char* w : {"<pad>", "which", "is", "a", "?", "(", ")", "Answer", ":", "answer", "with", "or", ".", "yes", "no"})
        x.add(w);
      for (const auto& l : option_letters()) x.add(l);
      for (const auto& t : builtin_themes())
        for (const auto& c : t.categories) x.add(c.name);
      for (const auto& t : builtin_themes())
        for (const auto& c : t.categories)
          for (const auto& w : c.words) x.add(w);
      return x;
    }();
    return v;
  }

  Vocabulary with_extra(const std::vector<std::string>& words) const {
    Vocabulary v = *this;
    for (const auto& w : words) v.add(w);
    return v;
  }

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& w) const { return ids_.count(w) > 0; }
  int id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw error(errc::unknown_token, "'" + w + "' is not in the vocabulary");
    return it->second;
  }
  const std::string& word(int id) const { return words_.at(std::size_t(id)); }

 private:
  void add(const std::string& w) {
    if (ids_.count(w)) return;
    ids_[w] = int(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// What the direction-finding pipeline is allowed to see: no golden label.
struct UnlabeledQuestion {
  std::string id;
  std::string stem;
  std::vector<std::string> options;
  TaskKind task_kind = TaskKind::mcq;
  bool operator==(const UnlabeledQuestion&) const = default;
};

struct Question {
  std::string id;
  std::string stem;
  std::vector<std::string> options;
  std::size_t golden_index = 0;
  TaskKind task_kind = TaskKind::mcq;

  UnlabeledQuestion unlabeled() const { return {id, stem, options, task_kind}; }
  bool operator==(const Question&) const = default;
};

inline std::vector<UnlabeledQuestion> strip_labels(std::span<const Question> qs) {
  std::vector<UnlabeledQuestion> out;
  out.reserve(qs.size());
  for (const auto& q : qs) out.push_back(q.unlabeled());
  return out;
}

struct PromptVariant {
  std::string base_id;
  std::size_t shift = 0;                 // cyclic shift applied to the base order
  std::vector<std::size_t> permutation;  // old position -> new position
  std::string stem;
  std::vector<std::string> options;  // rendered order
  TaskKind task_kind = TaskKind::mcq;

  std::string id() const { return base_id + "#" + std::to_string(shift); }
  bool operator==(const PromptVariant&) const = default;
};

inline PromptVariant identity_variant(const UnlabeledQuestion& q) {
  PromptVariant v{q.id, 0, {}, q.stem, q.options, q.task_kind};
  for (std::size_t i = 0; i < q.options.size(); ++i) v.permutation.push_back(i);
  return v;
}

// Identity plus the m-1 cyclic shifts; shift k moves option j to (j + k) mod m.
inline std::vector<PromptVariant> permute_options(const UnlabeledQuestion& q) {
  const std::size_t m = q.options.size();
  if (m < 2) throw error(errc::invalid_argument, "permute_options needs at least 2 options");
  std::vector<PromptVariant> out;
  for (std::size_t k = 0; k < m; ++k) {
    PromptVariant v{q.id, k, std::vector<std::size_t>(m), q.stem, std::vector<std::string>(m), q.task_kind};
    for (std::size_t j = 0; j < m; ++j) {
      v.permutation[j] = (j + k) % m;
      v.options[(j + k) % m] = q.options[j];
    }
    out.push_back(std::move(v));
  }
  return out;
}
inline std::vector<PromptVariant> permute_options(const Question& q) { return permute_options(q.unlabeled()); }

enum class AnswerStyle {
  identifier,           // "A" (or "yes"/"no")
  identifier_and_text,  // "( A ) London"
  text,                 // "London"
};

struct Template {
  std::string pattern = "[QUESTION] Answer : [ANSWER]";
  AnswerStyle answer_style = AnswerStyle::identifier;
};

inline std::string join_tokens(const std::string& text) {
  std::istringstream in(text);
  std::string tok, out;
  while (in >> tok) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

inline std::string render_question_body(const PromptVariant& v) {
  std::string s = v.stem;
  if (v.task_kind == TaskKind::mcq) {
    if (v.options.size() > max_options) throw error(errc::invalid_argument, "too many options for letter identifiers");
    for (std::size_t i = 0; i < v.options.size(); ++i) s += " ( " + option_letters()[i] + " ) " + v.options[i];
  } else {
    if (v.options.size() != 2) throw error(errc::invalid_argument, "yes/no questions have exactly 2 options");
    s += " answer with a " + v.options[0] + " or " + v.options[1] + " .";
  }
  return s;
}

inline std::string render_answer(const PromptVariant& v, std::size_t position, AnswerStyle style) {
  if (position >= v.options.size()) throw error(errc::invalid_argument, "answer position out of range");
  if (v.task_kind == TaskKind::yes_no) return v.options[position];
  switch (style) {
    case AnswerStyle::identifier: return option_letters()[position];
    case AnswerStyle::identifier_and_text: return "( " + option_letters()[position] + " ) " + v.options[position];
    case AnswerStyle::text: return v.options[position];
  }
  return {};
}

inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::istringstream in(text);
  std::string tok;
  std::vector<int> ids;
  while (in >> tok) ids.push_back(vocab.id(tok));
  return ids;
}

namespace detail {
inline std::string fill(const Template& t, const std::string& body, const std::string& answer) {
  std::string s = t.pattern;
  auto q = s.find("[QUESTION]");
  if (q == std::string::npos) throw error(errc::invalid_argument, "template lacks [QUESTION]");
  s.replace(q, 10, body);
  auto a = s.find("[ANSWER]");
  if (a != std::string::npos) s.replace(a, 8, answer);
  return join_tokens(s);
}
}  // namespace detail

// Prompt with an empty answer slot; ends at the answer cue.
inline std::string render_prompt(const PromptVariant& v, const Template& t, const Vocabulary* vocab = nullptr) {
  auto s = detail::fill(t, render_question_body(v), "");
  if (vocab) tokenize(s, *vocab);
  return s;
}
inline std::string render_prompt(const Question& q, const Template& t, const Vocabulary* vocab = nullptr) {
  return render_prompt(identity_variant(q.unlabeled()), t, vocab);
}

// Prompt plus an answer claiming the option at `position`.
inline std::string render_with_answer(const PromptVariant& v, const Template& t, std::size_t position,
                                      const Vocabulary* vocab = nullptr) {
  auto s = detail::fill(t, render_question_body(v), render_answer(v, position, t.answer_style));
  if (vocab) tokenize(s, *vocab);
  return s;
}

// Token ids the model answers with, indexed by rendered position.
inline std::vector<int> answer_token_ids(const PromptVariant& v, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < v.options.size(); ++i)
    ids.push_back(vocab.id(v.task_kind == TaskKind::mcq ? option_letters()[i] : v.options[i]));
  return ids;
}

// Forces the golden option to position p by swapping it with whatever sits there.
inline std::vector<Question> answer_moving_attack(std::span<const Question> qs, std::size_t p) {
  std::vector<Question> out(qs.begin(), qs.end());
  for (auto& q : out) {
    if (p >= q.options.size()) throw error(errc::invalid_argument, "attack position out of range");
    if (q.golden_index == p) continue;
    std::swap(q.options[q.golden_index], q.options[p]);
    q.golden_index = p;
  }
  return out;
}

struct DatasetSpec {
  TaskKind task_kind = TaskKind::mcq;
  std::size_t m = 2;
  std::size_t n_train = 4000;
  std::size_t n_eval = 300;
  std::size_t n_val = 200;
  std::size_t n_unlabeled = 500;
  double p_bias = 0.9;
  double zipf = 0.0;  // frequency skew of golden words in the train split
  std::string theme = "A";
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Question> train, val, eval;
  std::vector<UnlabeledQuestion> unlabeled;
};

// content identity used for train/held-out disjointness
inline std::string content_key(const std::string& stem, std::vector<std::string> options) {
  std::sort(options.begin(), options.end());
  std::string k = stem;
  for (const auto& o : options) k += "|" + o;
  return k;
}

namespace detail {

class QuestionSampler {
 public:
  QuestionSampler(const DatasetSpec& spec, std::mt19937_64& gen) : spec_(spec), theme_(find_theme(spec.theme)), gen_(gen) {
    if (spec.task_kind == TaskKind::mcq) {
      if (spec.m < 2 || spec.m > max_options) throw error(errc::invalid_argument, "m must be in 2..8");
      if (theme_.categories.size() < 2) throw error(errc::invalid_argument, "theme needs at least 2 categories");
    } else if (spec.m != 2) {
      throw error(errc::invalid_argument, "yes/no datasets have m = 2");
    }
  }

  Question make(std::size_t golden_pos, bool skewed) {
    std::uniform_int_distribution<std::size_t> cat_pick(0, theme_.categories.size() - 1);
    std::size_t c = cat_pick(gen_);
    const auto& cat = theme_.categories[c];
    Question q;
    q.task_kind = spec_.task_kind;
    q.golden_index = golden_pos;
    if (spec_.task_kind == TaskKind::mcq) {
      q.stem = "which is a " + cat.name + " ?";
      std::string golden = pick_word(cat, skewed);
      std::vector<std::string> others;
      std::size_t guard = 0;
      while (others.size() + 1 < spec_.m) {
        if (++guard > 10000) throw error(errc::vocabulary_exhausted, "cannot find distinct distractors");
        std::size_t oc = cat_pick(gen_);
        if (oc == c) continue;
        auto w = pick_word(theme_.categories[oc], false);
        if (std::find(others.begin(), others.end(), w) == others.end()) others.push_back(w);
      }
      others.insert(others.begin() + std::ptrdiff_t(golden_pos), golden);
      q.options = std::move(others);
    } else {
      bool truth = std::bernoulli_distribution(0.5)(gen_);
      std::string word;
      if (truth) {
        word = pick_word(cat, skewed);
      } else {
        std::size_t oc;
        do oc = cat_pick(gen_);
        while (oc == c);
        word = pick_word(theme_.categories[oc], false);
      }
      q.stem = "is " + word + " a " + cat.name + " ?";
      std::string right = truth ? "yes" : "no", wrong = truth ? "no" : "yes";
      q.options = golden_pos == 0 ? std::vector<std::string>{right, wrong} : std::vector<std::string>{wrong, right};
    }
    return q;
  }

 private:
  std::string pick_word(const Category& cat, bool skewed) {
    if (!skewed || spec_.zipf <= 0) {
      return cat.words[std::uniform_int_distribution<std::size_t>(0, cat.words.size() - 1)(gen_)];
    }
    std::vector<double> w;
    for (std::size_t i = 0; i < cat.words.size(); ++i) w.push_back(1.0 / std::pow(double(i + 1), spec_.zipf));
    std::discrete_distribution<std::size_t> d(w.begin(), w.end());
    return cat.words[d(gen_)];
  }

  const DatasetSpec& spec_;
  const Theme& theme_;
  std::mt19937_64& gen_;
};

inline std::string make_id(const std::string& theme, const char* split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return theme + "-" + split + "-" + buf;
}

}  // namespace detail

// Held-out splits (eval, val, unlabeled) come first, are position-balanced and
// pairwise distinct; training questions avoid every held-out content key.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  if (!(spec.p_bias >= 0 && spec.p_bias <= 1)) throw error(errc::invalid_argument, "p_bias must be in [0,1]");
  std::mt19937_64 gen(spec.seed);
  detail::QuestionSampler sampler(spec, gen);
  const std::size_t m = spec.m;
  std::set<std::string> held;
  const std::size_t max_tries = 2000;

  auto held_out = [&](std::size_t n, const char* split) {
    std::vector<Question> out;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t tries = 0;
      for (;;) {
        if (++tries > max_tries)
          throw error(errc::vocabulary_exhausted, std::string("cannot draw enough distinct questions for split ") + split);
        auto q = sampler.make(i % m, false);
        if (!held.insert(content_key(q.stem, q.options)).second) continue;
        q.id = detail::make_id(spec.theme, split, i);
        out.push_back(std::move(q));
        break;
      }
    }
    return out;
  };

  Dataset ds;
  ds.eval = held_out(spec.n_eval, "eval");
  ds.val = held_out(spec.n_val, "val");
  auto unl = held_out(spec.n_unlabeled, "unl");
  ds.unlabeled = strip_labels(unl);

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> other_pos(1, m - 1);
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    std::size_t pos = u01(gen) < spec.p_bias ? 0 : other_pos(gen);
    std::size_t tries = 0;
    for (;;) {
      if (++tries > max_tries) throw error(errc::vocabulary_exhausted, "training questions collide with held-out splits");
      auto q = sampler.make(pos, true);
      if (held.count(content_key(q.stem, q.options))) continue;
      q.id = detail::make_id(spec.theme, "train", i);
      ds.train.push_back(std::move(q));
      break;
    }
  }
  return ds;
}

// Prompt tokens with one target: the golden option's identifier at the last position.
inline std::vector<model::TrainingExample> to_training_examples(std::span<const Question> qs, const Template& t,
                                                                const Vocabulary& vocab) {
  std::vector<model::TrainingExample> out;
  out.reserve(qs.size());
  for (const auto& q : qs) {
    auto v = identity_variant(q.unlabeled());
    model::TrainingExample ex;
    ex.tokens = tokenize(render_prompt(v, t), vocab);
    ex.targets.emplace_back(ex.tokens.size() - 1, answer_token_ids(v, vocab)[q.golden_index]);
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- JSON lines ------------------------------------------------------------

inline nlohmann::ordered_json to_json(const Question& q) {
  nlohmann::ordered_json j;
  j["id"] = q.id;
  j["stem"] = q.stem;
  j["options"] = q.options;
  j["golden_index"] = q.golden_index;
  j["task_kind"] = to_string(q.task_kind);
  return j;
}

inline nlohmann::ordered_json to_json(const UnlabeledQuestion& q) {
  nlohmann::ordered_json j;
  j["id"] = q.id;
  j["stem"] = q.stem;
  j["options"] = q.options;
  j["task_kind"] = to_string(q.task_kind);
  return j;
}

template <class Q>
std::string to_jsonl(std::span<const Q> qs) {
  std::string out;
  for (const auto& q : qs) out += to_json(q).dump() + "\n";
  return out;
}

namespace detail {
template <class F>
void for_each_line(const std::string& text, F&& f) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw error(errc::corrupt_file, "line " + std::to_string(n) + ": " + e.what());
    }
    try {
      f(j, n);
    } catch (const nlohmann::json::exception& e) {
      throw error(errc::corrupt_file, "line " + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void check_options(const std::vector<std::string>& opts, std::size_t line) {
  if (opts.size() < 2) throw error(errc::corrupt_file, "line " + std::to_string(line) + ": fewer than 2 options");
  std::set<std::string> s(opts.begin(), opts.end());
  if (s.size() != opts.size()) throw error(errc::corrupt_file, "line " + std::to_string(line) + ": duplicate options");
}
}  // namespace detail

inline std::vector<Question> questions_from_jsonl(const std::string& text) {
  std::vector<Question> out;
  detail::for_each_line(text, [&](const nlohmann::json& j, std::size_t n) {
    Question q;
    q.id = j.at("id").get<std::string>();
    q.stem = j.at("stem").get<std::string>();
    q.options = j.at("options").get<std::vector<std::string>>();
    q.golden_index = j.at("golden_index").get<std::size_t>();
    q.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
    detail::check_options(q.options, n);
    if (q.golden_index >= q.options.size()) throw error(errc::corrupt_file, "golden_index out of range");
    out.push_back(std::move(q));
  });
  return out;
}

// Refuses labeled input: the unlabeled view must never carry the answer.
inline std::vector<UnlabeledQuestion> unlabeled_from_jsonl(const std::string& text) {
  std::vector<UnlabeledQuestion> out;
  detail::for_each_line(text, [&](const nlohmann::json& j, std::size_t n) {
    if (j.contains("golden_index"))
      throw error(errc::corrupt_file, "line " + std::to_string(n) + ": unlabeled file carries golden_index");
    UnlabeledQuestion q;
    q.id = j.at("id").get<std::string>();
    q.stem = j.at("stem").get<std::string>();
    q.options = j.at("options").get<std::vector<std::string>>();
    q.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
    detail::check_options(q.options, n);
    out.push_back(std::move(q));
  });
  return out;
}

}  // namespace steerfair::taskgen
