#pragma once

// Order-bias metrics, answer-moving evaluation, hyperparameter sweeps,
// sample-count and transfer studies, projection export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerfair/error.hpp"
#include "steerfair/io.hpp"
#include "steerfair/model.hpp"
#include "steerfair/numerics.hpp"
#include "steerfair/parallel.hpp"
#include "steerfair/steering.hpp"
#include "steerfair/taskgen.hpp"

namespace steerfair::eval {

using steering::HeadCount;
using steering::SteeringPlan;
using taskgen::Question;

struct ConfigEcho {
  double alpha = 0;
  std::string k = "none";
  std::string dataset;
  std::uint64_t seed = 0;
  std::string scoring = "none";
  bool operator==(const ConfigEcho&) const = default;
};

struct EvalReport {
  std::vector<double> accuracies;  // one per ordering
  double avg = 0;
  double std = 0;  // population
  ConfigEcho echo;
  bool operator==(const EvalReport&) const = default;
};

inline void summarize(EvalReport& r) {
  if (r.accuracies.empty()) throw error(errc::invalid_argument, "no orderings");
  double n = double(r.accuracies.size());
  double s = 0;
  for (double a : r.accuracies) s += a;
  r.avg = s / n;
  double v = 0;
  for (double a : r.accuracies) v += (a - r.avg) * (a - r.avg);
  r.std = std::sqrt(v / n);
}

// Argmax over the option-identifier logits at the last prompt token; ties to the lower position.
inline std::size_t score_question(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                  const SteeringPlan* plan, const taskgen::PromptVariant& v, const taskgen::Template& tmpl) {
  auto toks = taskgen::tokenize(taskgen::render_prompt(v, tmpl), vocab);
  model::SteeringHook hook;
  if (plan) hook = steering::to_hook(*plan);
  auto tr = model::forward(toks, w, plan ? &hook : nullptr);
  auto ids = taskgen::answer_token_ids(v, vocab);
  std::size_t best = 0;
  for (std::size_t i = 1; i < ids.size(); ++i)
    if (tr.logits[std::size_t(ids[i])] > tr.logits[std::size_t(ids[best])]) best = i;
  return best;
}

namespace detail {
inline double accuracy(const model::ModelWeights& w, const taskgen::Vocabulary& vocab, const SteeringPlan* plan,
                       std::span<const taskgen::PromptVariant> prompts, std::span<const std::size_t> golden,
                       const taskgen::Template& tmpl) {
  std::vector<char> ok(prompts.size(), 0);
  parallel_for(prompts.size(), [&](std::size_t i) { ok[i] = score_question(w, vocab, plan, prompts[i], tmpl) == golden[i]; });
  std::size_t c = 0;
  for (char x : ok) c += std::size_t(x);
  return prompts.empty() ? 0.0 : double(c) / double(prompts.size());
}
}  // namespace detail

// MCQ: one answer-moving attack per golden position. Yes/no: the two option orders.
inline EvalReport evaluate_orderings(const model::ModelWeights& w, const taskgen::Vocabulary& vocab, const SteeringPlan* plan,
                                     std::span<const Question> eval_set, const taskgen::Template& tmpl,
                                     ConfigEcho echo = {}) {
  if (eval_set.empty()) throw error(errc::invalid_argument, "empty eval set");
  EvalReport r;
  r.echo = echo;
  const std::size_t m = eval_set.front().options.size();
  if (eval_set.front().task_kind == taskgen::TaskKind::mcq) {
    for (std::size_t p = 0; p < m; ++p) {
      auto attacked = taskgen::answer_moving_attack(eval_set, p);
      std::vector<taskgen::PromptVariant> prompts;
      std::vector<std::size_t> golden;
      for (const auto& q : attacked) {
        prompts.push_back(taskgen::identity_variant(q.unlabeled()));
        golden.push_back(q.golden_index);
      }
      r.accuracies.push_back(detail::accuracy(w, vocab, plan, prompts, golden, tmpl));
    }
  } else {
    const std::vector<std::vector<std::string>> orders{{"yes", "no"}, {"no", "yes"}};
    for (const auto& order : orders) {
      std::vector<taskgen::PromptVariant> prompts;
      std::vector<std::size_t> golden;
      for (const auto& q : eval_set) {
        auto v = taskgen::identity_variant(q.unlabeled());
        const auto& answer = q.options[q.golden_index];
        v.options = order;
        golden.push_back(order[0] == answer ? 0 : 1);
        prompts.push_back(std::move(v));
      }
      r.accuracies.push_back(detail::accuracy(w, vocab, plan, prompts, golden, tmpl));
    }
  }
  summarize(r);
  return r;
}

// Pools reports over runs with different option counts, weighting by question count.
inline EvalReport weighted_average(std::span<const EvalReport> reports, std::span<const std::size_t> counts) {
  if (reports.size() != counts.size() || reports.empty()) throw error(errc::invalid_argument, "weighted_average inputs");
  EvalReport out;
  double total = 0, avg = 0, var = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    total += double(counts[i]);
    avg += double(counts[i]) * reports[i].avg;
  }
  avg /= total;
  for (std::size_t i = 0; i < reports.size(); ++i) var += double(counts[i]) * reports[i].std * reports[i].std;
  out.avg = avg;
  out.std = std::sqrt(var / total);
  out.echo = reports.front().echo;
  return out;
}

struct SweepGrid {
  std::vector<double> alphas;
  std::vector<HeadCount> ks;
  std::vector<EvalReport> cells;  // alpha-major
  const EvalReport& at(std::size_t ai, std::size_t ki) const { return cells.at(ai * ks.size() + ki); }
};

inline ConfigEcho echo_for(const steering::DirectionBank& db, double alpha, HeadCount k, const std::string& dataset,
                           std::uint64_t seed) {
  return {alpha, k.str(), dataset, seed, steering::to_string(db.scoring)};
}

// The direction bank is built once and reused by every cell.
inline SweepGrid sweep(const model::ModelWeights& w, const taskgen::Vocabulary& vocab, const steering::DirectionBank& db,
                       std::span<const double> alphas, std::span<const HeadCount> ks, std::span<const Question> eval_set,
                       const taskgen::Template& tmpl, const std::string& dataset = "", std::uint64_t seed = 0) {
  steering::check_signature(db, w.config);
  SweepGrid g{{alphas.begin(), alphas.end()}, {ks.begin(), ks.end()}, {}};
  for (double a : alphas)
    for (auto k : ks) {
      auto plan = steering::plan_for(db, a, k);
      g.cells.push_back(evaluate_orderings(w, vocab, &plan, eval_set, tmpl, echo_for(db, a, k, dataset, seed)));
    }
  return g;
}

// Sweep K list: 1..total heads merged with the given list clipped to total heads.
inline std::vector<HeadCount> default_k_list(std::size_t total_heads, std::span<const std::size_t> requested) {
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= total_heads; ++k) ks.push_back(k);
  for (auto k : requested) ks.push_back(std::min(k, total_heads));
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<HeadCount> out;
  for (auto k : ks) out.push_back(HeadCount::of(k));
  return out;
}

inline const std::vector<double>& default_alphas() {
  static const std::vector<double> a{0.1, 0.5, 1, 2, 5, 10, 15, 20, 25};
  return a;
}
inline const std::vector<std::size_t>& reference_k_values() {
  static const std::vector<std::size_t> k{10, 30, 50, 100, 200, 500};
  return k;
}

struct BestCell {
  double alpha = 0;
  HeadCount k;
  EvalReport report;
  bool found = false;
};

// Lowest Std among cells whose Avg stays within avg_tolerance of the baseline.
inline BestCell select_best_cell(const SweepGrid& g, const EvalReport& baseline, double avg_tolerance = 0.02) {
  BestCell best;
  for (std::size_t ai = 0; ai < g.alphas.size(); ++ai)
    for (std::size_t ki = 0; ki < g.ks.size(); ++ki) {
      const auto& r = g.at(ai, ki);
      if (r.avg < baseline.avg - avg_tolerance) continue;
      if (!best.found || r.std < best.report.std) best = {g.alphas[ai], g.ks[ki], r, true};
    }
  return best;
}

struct SampleCountRow {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double avg = 0, std = 0;
  double mean_evr = 0;  // over the selected heads
};

// Random subsample of size N (original order kept), rebuilt directions, fixed alpha/K.
inline std::vector<std::size_t> subsample_indices(std::size_t pool, std::size_t n, std::uint64_t seed) {
  if (n > pool) throw error(errc::invalid_argument, "N exceeds the unlabeled pool");
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  if (n == pool) return idx;
  std::mt19937_64 gen(seed);
  std::shuffle(idx.begin(), idx.end(), gen);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<SampleCountRow> sample_count_study(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                                      std::span<const taskgen::UnlabeledQuestion> pool,
                                                      std::span<const Question> eval_set, std::span<const std::size_t> ns,
                                                      std::span<const std::uint64_t> seeds, double alpha, HeadCount k,
                                                      const taskgen::Template& tmpl, const steering::FindOptions& opt,
                                                      const std::string& dataset,
                                                      std::vector<steering::DirectionBank>* banks_out = nullptr) {
  std::vector<SampleCountRow> rows;
  for (auto n : ns) {
    if (n < 1) throw error(errc::invalid_argument, "N must be >= 1");
    for (auto seed : seeds) {
      std::vector<taskgen::UnlabeledQuestion> sub;
      for (auto i : subsample_indices(pool.size(), n, seed)) sub.push_back(pool[i]);
      auto found = steering::find_directions(w, vocab, sub, tmpl, opt, {dataset, n, seed});
      auto sel = steering::select_heads(found.directions, k);
      auto plan = steering::build_steering_plan(found.directions, sel, alpha, k);
      auto rep = evaluate_orderings(w, vocab, &plan, eval_set, tmpl);
      double evr = 0;
      for (auto id : sel) evr += found.directions.at(id).mean_evr();
      evr /= double(std::max<std::size_t>(1, sel.size()));
      rows.push_back({n, seed, rep.avg, rep.std, evr});
      if (banks_out) banks_out->push_back(std::move(found.directions));
    }
  }
  return rows;
}

struct TransferReport {
  EvalReport vanilla, own_dataset, other_dataset;
};

// Evaluates on B: no steering, B's own directions, and directions found on A.
inline TransferReport transfer_study(const model::ModelWeights& w, const taskgen::Vocabulary& vocab,
                                     const steering::DirectionBank& dirs_a, const steering::DirectionBank& dirs_b,
                                     std::span<const Question> eval_b, double alpha, HeadCount k,
                                     const taskgen::Template& tmpl) {
  steering::check_signature(dirs_a, w.config);
  steering::check_signature(dirs_b, w.config);
  TransferReport r;
  r.vanilla = evaluate_orderings(w, vocab, nullptr, eval_b, tmpl, {0, "none", dirs_b.provenance.dataset, 0, "none"});
  auto od = steering::plan_for(dirs_b, alpha, k);
  r.own_dataset = evaluate_orderings(w, vocab, &od, eval_b, tmpl,
                                     echo_for(dirs_b, alpha, k, dirs_b.provenance.dataset, dirs_b.provenance.seed));
  auto td = steering::plan_for(dirs_a, alpha, k);
  r.other_dataset = evaluate_orderings(w, vocab, &td, eval_b, tmpl,
                                       echo_for(dirs_a, alpha, k, dirs_a.provenance.dataset, dirs_a.provenance.seed));
  return r;
}

struct ProjectionRow {
  std::size_t rule = 1;
  double pc1 = 0, pc2 = 0;
};

// Pools every rule's demonstrations at one head and projects them onto the
// first two principal components (second one by deflating the first).
inline std::vector<ProjectionRow> export_projections(const steering::DirectionBank& db, const steering::ActivationBank& bank,
                                                     model::HeadId head) {
  if (head.layer >= db.layers || head.head >= db.heads) throw error(errc::invalid_argument, "head out of range");
  std::size_t rows = 0, D = bank.head_dim;
  for (const auto& [j, mats] : bank.by_rule) rows += bank.at(head, j).rows();
  numerics::Matrix pooled(rows, D);
  std::vector<std::size_t> labels;
  std::size_t r = 0;
  for (const auto& [j, mats] : bank.by_rule) {
    const auto& H = bank.at(head, j);
    for (std::size_t i = 0; i < H.rows(); ++i, ++r) {
      std::copy(H.row(i).begin(), H.row(i).end(), pooled.row_ptr(r));
      labels.push_back(j);
    }
  }
  auto first = numerics::pca_first_component(pooled);
  const auto& v1 = first.direction.components();
  numerics::Matrix centered(rows, D), deflated(rows, D);
  double total = 0, rest = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    double p = 0;
    for (std::size_t e = 0; e < D; ++e) {
      centered(i, e) = pooled(i, e) - first.mean[e];
      p += centered(i, e) * v1[e];
    }
    for (std::size_t e = 0; e < D; ++e) {
      deflated(i, e) = centered(i, e) - p * v1[e];
      total += centered(i, e) * centered(i, e);
      rest += deflated(i, e) * deflated(i, e);
    }
  }
  if (!(rest > 1e-12 * total)) throw error(errc::degenerate_data, "head has fewer than 2 nondegenerate components");
  auto second = numerics::pca_first_component(deflated);
  const auto& v2 = second.direction.components();
  std::vector<ProjectionRow> out;
  for (std::size_t i = 0; i < rows; ++i)
    out.push_back({labels[i], numerics::dot(centered.row(i), v1), numerics::dot(centered.row(i), v2)});
  return out;
}

// ---- report serialization ---------------------------------------------------

inline nlohmann::ordered_json to_json(const ConfigEcho& e) {
  return {{"alpha", e.alpha}, {"k", e.k}, {"dataset", e.dataset}, {"seed", e.seed}, {"scoring", e.scoring}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["accuracies"] = r.accuracies;
  j["avg"] = r.avg;
  j["std"] = r.std;
  j["config"] = to_json(r.echo);
  return j;
}

// metric,value rows: acc_0..acc_{m-1}, avg, std (no config echo, so steered and
// unsteered runs with equal numbers compare byte-for-byte)
inline std::string report_csv(const EvalReport& r) {
  std::string s = "metric,value\n";
  for (std::size_t i = 0; i < r.accuracies.size(); ++i) s += "acc_" + std::to_string(i) + "," + io::fmt_double(r.accuracies[i]) + "\n";
  s += "avg," + io::fmt_double(r.avg) + "\n";
  s += "std," + io::fmt_double(r.std) + "\n";
  return s;
}

inline std::string sweep_csv(const SweepGrid& g) {
  std::size_t m = g.cells.empty() ? 0 : g.cells.front().accuracies.size();
  std::string s = "alpha,k,avg,std";
  for (std::size_t i = 0; i < m; ++i) s += ",acc_" + std::to_string(i);
  s += "\n";
  for (std::size_t ai = 0; ai < g.alphas.size(); ++ai)
    for (std::size_t ki = 0; ki < g.ks.size(); ++ki) {
      const auto& r = g.at(ai, ki);
      s += io::fmt_double(g.alphas[ai]) + "," + g.ks[ki].str() + "," + io::fmt_double(r.avg) + "," + io::fmt_double(r.std);
      for (double a : r.accuracies) s += "," + io::fmt_double(a);
      s += "\n";
    }
  return s;
}

inline std::string sample_count_csv(std::span<const SampleCountRow> rows) {
  std::string s = "n,seed,avg,std,mean_evr\n";
  for (const auto& r : rows)
    s += std::to_string(r.n) + "," + std::to_string(r.seed) + "," + io::fmt_double(r.avg) + "," + io::fmt_double(r.std) +
         "," + io::fmt_double(r.mean_evr) + "\n";
  return s;
}

inline std::string transfer_csv(const TransferReport& t) {
  std::size_t m = t.vanilla.accuracies.size();
  std::string s = "condition,avg,std";
  for (std::size_t i = 0; i < m; ++i) s += ",acc_" + std::to_string(i);
  s += "\n";
  auto row = [&](const char* name, const EvalReport& r) {
    s += std::string(name) + "," + io::fmt_double(r.avg) + "," + io::fmt_double(r.std);
    for (double a : r.accuracies) s += "," + io::fmt_double(a);
    s += "\n";
  };
  row("vanilla", t.vanilla);
  row("own_dataset", t.own_dataset);
  row("other_dataset", t.other_dataset);
  return s;
}

inline std::string projections_csv(std::span<const ProjectionRow> rows) {
  std::string s = "rule,pc1,pc2\n";
  for (const auto& r : rows) s += std::to_string(r.rule) + "," + io::fmt_double(r.pc1) + "," + io::fmt_double(r.pc2) + "\n";
  return s;
}

}  // namespace steerfair::eval
