#pragma once

// Label-free bias direction finding: rules -> demonstrations -> per-head
// activations -> per-rule principal directions -> combined direction per head
// -> head ranking -> steering plan.

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerfair/error.hpp"
#include "steerfair/io.hpp"
#include "steerfair/model.hpp"
#include "steerfair/numerics.hpp"
#include "steerfair/parallel.hpp"
#include "steerfair/taskgen.hpp"

namespace steerfair::steering {

using model::HeadId;
using numerics::Matrix;
using taskgen::UnlabeledQuestion;

struct BiasRule {
  std::size_t index = 1;  // 1-based option position the rule always picks
  std::string description;
};

inline std::vector<BiasRule> enumerate_rules(std::size_t m) {
  if (m < 1) throw error(errc::invalid_argument, "need at least one option");
  std::vector<BiasRule> rules;
  for (std::size_t j = 1; j <= m; ++j)
    rules.push_back({j, "always answer with the option at position " + std::to_string(j)});
  return rules;
}

struct Demonstration {
  std::size_t rule = 1;
  std::string variant_id;
  std::string text;
};

// One demonstration per cyclic variant of every question, each answering position j.
inline std::vector<Demonstration> build_demonstrations(std::span<const UnlabeledQuestion> questions, std::size_t rule,
                                                       const taskgen::Template& tmpl,
                                                       const taskgen::Vocabulary* vocab = nullptr) {
  std::vector<Demonstration> out;
  for (const auto& q : questions) {
    if (rule < 1 || rule > q.options.size()) throw error(errc::invalid_argument, "rule index outside 1..m");
    for (const auto& v : taskgen::permute_options(q))
      out.push_back({rule, v.id(), taskgen::render_with_answer(v, tmpl, rule - 1, vocab)});
  }
  return out;
}

struct ActivationBank {
  std::size_t layers = 0, heads = 0, head_dim = 0;
  std::map<std::size_t, std::vector<Matrix>> by_rule;  // rule -> [layer * heads + head], N x D

  const Matrix& at(HeadId id, std::size_t rule) const { return by_rule.at(rule).at(id.layer * heads + id.head); }
  std::size_t rule_count() const { return by_rule.size(); }
};

// Last-token attention output of every head for each demonstration; no hooks.
inline std::vector<Matrix> collect_activations(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                               std::span<const Demonstration> demos) {
  const auto& c = w.config;
  const std::size_t D = c.head_dim(), n = demos.size();
  std::vector<std::vector<int>> tokens(n);
  for (std::size_t i = 0; i < n; ++i) {
    tokens[i] = taskgen::tokenize(demos[i].text, vocab);
    if (tokens[i].size() > c.max_seq_len) throw error(errc::sequence_too_long, "demonstration " + demos[i].variant_id);
  }
  std::vector<Matrix> out(c.total_heads(), Matrix(n, D));
  const auto capture = model::all_heads(c);
  parallel_for(n, [&](std::size_t i) {
    auto tr = model::forward(tokens[i], w, nullptr, &capture);
    for (const auto& [id, vec] : tr.captured) std::copy(vec.begin(), vec.end(), out[id.layer * c.n_heads + id.head].row_ptr(i));
  });
  return out;
}

inline ActivationBank build_activation_bank(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                            std::span<const UnlabeledQuestion> questions, const taskgen::Template& tmpl) {
  if (questions.empty()) throw error(errc::invalid_argument, "no questions for demonstrations");
  const std::size_t m = questions.front().options.size();
  for (const auto& q : questions)
    if (q.options.size() != m) throw error(errc::invalid_argument, "questions disagree on option count");
  ActivationBank bank{w.config.n_layers, w.config.n_heads, w.config.head_dim(), {}};
  for (const auto& rule : enumerate_rules(m)) {
    auto demos = build_demonstrations(questions, rule.index, tmpl);
    bank.by_rule[rule.index] = collect_activations(w, vocab, demos);
  }
  return bank;
}

struct RuleDirection {
  std::size_t rule = 1;
  std::optional<numerics::PcaResult> pca;  // empty when the activations are degenerate
};

struct HeadDirections {
  HeadId id;
  std::vector<RuleDirection> rules;
  std::vector<double> combined;  // zero vector for degenerate heads
  double score = -std::numeric_limits<double>::infinity();
  int orientation = 1;  // -1 when the label-free probe flipped the combined direction

  bool degenerate() const {
    for (const auto& r : rules)
      if (!r.pca) return true;
    return rules.empty();
  }
  double mean_evr() const {
    if (degenerate()) return 0;
    double s = 0;
    for (const auto& r : rules) s += r.pca->explained_variance_ratio;
    return s / double(rules.size());
  }
};

enum class Scoring { mean_abs_projection, evr };
inline std::string to_string(Scoring s) { return s == Scoring::evr ? "evr" : "proj"; }
inline Scoring scoring_from_string(const std::string& s) {
  if (s == "proj") return Scoring::mean_abs_projection;
  if (s == "evr") return Scoring::evr;
  throw error(errc::invalid_argument, "scoring must be proj or evr, got '" + s + "'");
}

enum class Orientation { pca, probe };
inline std::string to_string(Orientation o) { return o == Orientation::pca ? "pca" : "probe"; }
inline Orientation orientation_from_string(const std::string& s) {
  if (s == "pca") return Orientation::pca;
  if (s == "probe") return Orientation::probe;
  throw error(errc::invalid_argument, "orientation must be pca or probe, got '" + s + "'");
}

struct Provenance {
  std::string dataset;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  bool operator==(const Provenance&) const = default;
};

struct DirectionBank {
  std::size_t layers = 0, heads = 0, head_dim = 0;
  std::vector<HeadDirections> per_head;  // layer-major
  Provenance provenance;
  Scoring scoring = Scoring::mean_abs_projection;
  Orientation orientation = Orientation::pca;

  const HeadDirections& at(HeadId id) const { return per_head.at(id.layer * heads + id.head); }
  HeadDirections& at(HeadId id) { return per_head.at(id.layer * heads + id.head); }
  std::size_t total_heads() const { return layers * heads; }
};

inline DirectionBank identify_directions(const ActivationBank& bank) {
  DirectionBank db{bank.layers, bank.heads, bank.head_dim, {}, {}, {}, {}};
  for (std::size_t l = 0; l < bank.layers; ++l)
    for (std::size_t h = 0; h < bank.heads; ++h) {
      HeadDirections hd;
      hd.id = {l, h};
      for (const auto& [j, mats] : bank.by_rule) {
        RuleDirection rd{j, std::nullopt};
        try {
          rd.pca = numerics::pca_first_component(mats.at(l * bank.heads + h));
        } catch (const error& e) {
          if (e.code() != errc::degenerate_data) throw;
        }
        hd.rules.push_back(std::move(rd));
      }
      db.per_head.push_back(std::move(hd));
    }
  return db;
}

inline void combine_head_directions(DirectionBank& db) {
  for (auto& hd : db.per_head) {
    if (hd.degenerate()) {
      hd.combined.assign(db.head_dim, 0.0);
      continue;
    }
    Matrix dirs(hd.rules.size(), db.head_dim);
    for (std::size_t r = 0; r < hd.rules.size(); ++r) {
      const auto& c = hd.rules[r].pca->direction.components();
      std::copy(c.begin(), c.end(), dirs.row_ptr(r));
    }
    hd.combined = numerics::combine_directions(dirs);
    if (hd.orientation < 0)
      for (double& x : hd.combined) x = -x;
  }
}

// proj: mean over rules of the mean |<row - rule mean, rule direction>|; evr: mean ratio.
inline void compute_head_scores(DirectionBank& db, const ActivationBank& bank, Scoring scoring) {
  db.scoring = scoring;
  for (auto& hd : db.per_head) {
    if (hd.degenerate()) {
      hd.score = -std::numeric_limits<double>::infinity();
      continue;
    }
    if (scoring == Scoring::evr) {
      hd.score = hd.mean_evr();
      continue;
    }
    double total = 0;
    for (const auto& rd : hd.rules) {
      const auto& H = bank.at(hd.id, rd.rule);
      const auto& v = rd.pca->direction.components();
      const auto& mu = rd.pca->mean;
      double s = 0;
      for (std::size_t i = 0; i < H.rows(); ++i) {
        double p = 0;
        for (std::size_t e = 0; e < H.cols(); ++e) p += (H(i, e) - mu[e]) * v[e];
        s += std::abs(p);
      }
      total += s / double(H.rows());
    }
    hd.score = total / double(hd.rules.size());
  }
}

struct HeadCount {
  std::optional<std::size_t> k;  // empty = all heads
  static HeadCount all() { return {}; }
  static HeadCount of(std::size_t k) { return {k}; }
  std::string str() const { return k ? std::to_string(*k) : "all"; }
  bool operator==(const HeadCount&) const = default;
};

inline HeadCount head_count_from_string(const std::string& s) {
  if (s == "all") return HeadCount::all();
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (...) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw error(errc::invalid_argument, "K must be a count or 'all'");
  if (v == 0) throw error(errc::invalid_k, "K must be >= 1");
  return HeadCount::of(std::size_t(v));
}

// Top-K by score; ties go to the lower (layer, head). Degenerate heads score -inf
// and sort last; their zero direction makes steering them a no-op.
inline std::vector<HeadId> select_heads(const DirectionBank& db, HeadCount K) {
  if (K.k && *K.k == 0) throw error(errc::invalid_k, "K must be >= 1");
  std::vector<const HeadDirections*> order;
  for (const auto& hd : db.per_head) order.push_back(&hd);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->score > b->score; });
  std::size_t take = K.k ? std::min(*K.k, order.size()) : order.size();
  std::vector<HeadId> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(order[i]->id);
  return out;
}

inline std::vector<HeadId> score_and_select_heads(DirectionBank& db, const ActivationBank& bank, HeadCount K,
                                                  Scoring scoring) {
  if (K.k && *K.k == 0) throw error(errc::invalid_k, "K must be >= 1");
  compute_head_scores(db, bank, scoring);
  return select_heads(db, K);
}

struct SteeringPlan {
  double alpha = 0;
  HeadCount k;
  std::map<HeadId, std::vector<double>> directions;
  bool operator==(const SteeringPlan&) const = default;
};

inline SteeringPlan build_steering_plan(const DirectionBank& db, std::span<const HeadId> selected, double alpha,
                                        HeadCount k = HeadCount::all()) {
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw error(errc::invalid_argument, "alpha must be finite and >= 0");
  SteeringPlan plan{alpha, k, {}};
  for (auto id : selected) plan.directions[id] = db.at(id).combined;
  return plan;
}

inline SteeringPlan plan_for(const DirectionBank& db, double alpha, HeadCount k) {
  auto sel = select_heads(db, k);
  return build_steering_plan(db, sel, alpha, k);
}

inline model::SteeringHook to_hook(const SteeringPlan& plan) {
  model::SteeringHook hook;
  for (const auto& [id, dir] : plan.directions) hook[id] = {dir, plan.alpha};
  return hook;
}

inline SteeringPlan plan_from_hook(const model::SteeringHook& hook, HeadCount k) {
  SteeringPlan plan{0, k, {}};
  for (const auto& [id, s] : hook) {
    plan.alpha = s.alpha;
    plan.directions[id] = s.direction;
  }
  return plan;
}

// ---- label-free orientation --------------------------------------------------

// Mean over prompts of the softmax over the option identifiers, by position.
inline std::vector<double> position_preference(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                               std::span<const taskgen::PromptVariant> prompts,
                                               const taskgen::Template& tmpl, const model::SteeringHook* hook) {
  const std::size_t m = prompts.empty() ? 0 : prompts.front().options.size();
  std::vector<std::vector<double>> probs(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    auto toks = taskgen::tokenize(taskgen::render_prompt(prompts[i], tmpl), vocab);
    auto tr = model::forward(toks, w, hook);
    auto ids = taskgen::answer_token_ids(prompts[i], vocab);
    std::vector<double> lg;
    for (int id : ids) lg.push_back(tr.logits[std::size_t(id)]);
    double mx = *std::max_element(lg.begin(), lg.end()), s = 0;
    for (double& x : lg) s += (x = std::exp(x - mx));
    for (double& x : lg) x /= s;
    probs[i] = std::move(lg);
  });
  std::vector<double> mean(m, 0.0);
  for (const auto& p : probs)
    for (std::size_t j = 0; j < m; ++j) mean[j] += p[j];
  for (double& x : mean) x /= double(std::max<std::size_t>(1, probs.size()));
  return mean;
}

inline double preference_skew(std::span<const double> pref) {
  double s = 0, u = 1.0 / double(pref.size());
  for (double p : pref) s += (p - u) * (p - u);
  return s;
}

// For each head, keeps whichever sign of its combined direction makes the model's
// average preference over option positions more uniform when that head alone is
// steered. Uses only unanswered prompts, no labels.
inline void orient_by_preference_probe(DirectionBank& db, const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                       std::span<const UnlabeledQuestion> questions, const taskgen::Template& tmpl,
                                       double probe_alpha) {
  std::vector<taskgen::PromptVariant> prompts;
  for (const auto& q : questions)
    for (auto& v : taskgen::permute_options(q)) prompts.push_back(std::move(v));
  if (prompts.empty()) return;
  db.orientation = Orientation::probe;
  for (auto& hd : db.per_head) {
    if (hd.degenerate() || numerics::norm(hd.combined) < 1e-12) continue;
    model::SteeringHook plus{{hd.id, {hd.combined, probe_alpha}}};
    auto neg = hd.combined;
    for (double& x : neg) x = -x;
    model::SteeringHook minus{{hd.id, {neg, probe_alpha}}};
    double sp = preference_skew(position_preference(w, vocab, prompts, tmpl, &plus));
    double sm = preference_skew(position_preference(w, vocab, prompts, tmpl, &minus));
    if (sm < sp) {
      hd.combined = std::move(neg);
      hd.orientation = -hd.orientation;
    }
  }
}

struct FindOptions {
  Scoring scoring = Scoring::mean_abs_projection;
  Orientation orientation = Orientation::probe;
  std::size_t probe_questions = 100;
  double probe_alpha = 1.0;
};

struct FindResult {
  ActivationBank bank;
  DirectionBank directions;
};

// Full identification pipeline over unlabeled questions.
inline FindResult find_directions(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                  std::span<const UnlabeledQuestion> questions, const taskgen::Template& tmpl,
                                  const FindOptions& opt, Provenance prov) {
  FindResult r;
  r.bank = build_activation_bank(w, vocab, questions, tmpl);
  r.directions = identify_directions(r.bank);
  combine_head_directions(r.directions);
  compute_head_scores(r.directions, r.bank, opt.scoring);
  if (opt.orientation == Orientation::probe) {
    auto probe = questions.subspan(0, std::min(opt.probe_questions, questions.size()));
    orient_by_preference_probe(r.directions, w, vocab, probe, tmpl, opt.probe_alpha);
  }
  prov.n = questions.size();
  r.directions.provenance = prov;
  return r;
}

// ---- directions file -------------------------------------------------------

inline constexpr const char* directions_format_version = "1";

inline void check_signature(const DirectionBank& db, const model::ModelConfig& c) {
  if (db.layers != c.n_layers || db.heads != c.n_heads || db.head_dim != c.head_dim())
    throw error(errc::model_signature_mismatch,
                "directions built for (layers " + std::to_string(db.layers) + ", heads " + std::to_string(db.heads) +
                    ", head_dim " + std::to_string(db.head_dim) + ") but the model has (" + std::to_string(c.n_layers) +
                    ", " + std::to_string(c.n_heads) + ", " + std::to_string(c.head_dim()) + ")");
}

inline std::string directions_to_string(const DirectionBank& db) {
  using oj = nlohmann::ordered_json;
  oj j;
  j["format_version"] = directions_format_version;
  j["model_sig"] = {{"layers", db.layers}, {"heads", db.heads}, {"head_dim", db.head_dim}};
  j["provenance"] = {{"dataset", db.provenance.dataset}, {"N", db.provenance.n}, {"seed", db.provenance.seed}};
  j["scoring"] = to_string(db.scoring);
  j["orientation"] = to_string(db.orientation);
  oj heads = oj::array();
  for (const auto& hd : db.per_head) {
    oj h;
    h["layer"] = hd.id.layer;
    h["head"] = hd.id.head;
    h["score"] = std::isfinite(hd.score) ? oj(hd.score) : oj(nullptr);
    h["orientation"] = hd.orientation;
    oj rules = oj::array();
    for (const auto& rd : hd.rules) {
      oj r;
      r["j"] = rd.rule;
      if (rd.pca) {
        r["direction"] = rd.pca->direction.components();
        r["evr"] = rd.pca->explained_variance_ratio;
        r["mean"] = rd.pca->mean;
      } else {
        r["direction"] = nullptr;
        r["evr"] = nullptr;
        r["mean"] = nullptr;
      }
      rules.push_back(std::move(r));
    }
    h["rules"] = std::move(rules);
    h["combined"] = hd.combined;
    heads.push_back(std::move(h));
  }
  j["heads"] = std::move(heads);
  return j.dump() + "\n";
}

inline DirectionBank directions_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw error(errc::corrupt_file, std::string("directions file is not valid JSON: ") + e.what());
  }
  try {
    auto ver = j.at("format_version").get<std::string>();
    if (ver != directions_format_version)
      throw error(errc::format_version_mismatch, "directions version " + ver + ", reader expects " + directions_format_version);
    DirectionBank db;
    db.layers = j.at("model_sig").at("layers").get<std::size_t>();
    db.heads = j.at("model_sig").at("heads").get<std::size_t>();
    db.head_dim = j.at("model_sig").at("head_dim").get<std::size_t>();
    db.provenance.dataset = j.at("provenance").at("dataset").get<std::string>();
    db.provenance.n = j.at("provenance").at("N").get<std::size_t>();
    db.provenance.seed = j.at("provenance").at("seed").get<std::uint64_t>();
    db.scoring = scoring_from_string(j.at("scoring").get<std::string>());
    db.orientation = orientation_from_string(j.at("orientation").get<std::string>());
    const auto& heads = j.at("heads");
    if (heads.size() != db.layers * db.heads) throw error(errc::corrupt_file, "head count does not match model_sig");
    for (const auto& h : heads) {
      HeadDirections hd;
      hd.id = {h.at("layer").get<std::size_t>(), h.at("head").get<std::size_t>()};
      if (hd.id.layer * db.heads + hd.id.head != db.per_head.size())
        throw error(errc::corrupt_file, "heads are not in layer-major order");
      hd.score = h.at("score").is_null() ? -std::numeric_limits<double>::infinity() : h.at("score").get<double>();
      hd.orientation = h.at("orientation").get<int>();
      for (const auto& r : h.at("rules")) {
        RuleDirection rd{r.at("j").get<std::size_t>(), std::nullopt};
        if (!r.at("direction").is_null()) {
          numerics::PcaResult p;
          auto comps = r.at("direction").get<std::vector<double>>();
          if (comps.size() != db.head_dim) throw error(errc::corrupt_file, "direction has the wrong dimension");
          p.direction = numerics::UnitVector::from_unit(std::move(comps));
          p.explained_variance_ratio = r.at("evr").get<double>();
          p.mean = r.at("mean").get<std::vector<double>>();
          rd.pca = std::move(p);
        }
        hd.rules.push_back(std::move(rd));
      }
      hd.combined = h.at("combined").get<std::vector<double>>();
      if (hd.combined.size() != db.head_dim) throw error(errc::corrupt_file, "combined direction has the wrong dimension");
      db.per_head.push_back(std::move(hd));
    }
    return db;
  } catch (const nlohmann::json::exception& e) {
    throw error(errc::corrupt_file, std::string("directions structure: ") + e.what());
  }
}

inline void save_directions(const DirectionBank& db, const std::filesystem::path& path) {
  io::write_file_atomic(path, directions_to_string(db));
}
inline DirectionBank load_directions(const std::filesystem::path& path) {
  return directions_from_string(io::read_file(path));
}

}  // namespace steerfair::steering
