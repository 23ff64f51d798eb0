#pragma once

// Command-line front end. Every command is a pure function of its config and
// input files; outputs go through temp-file + rename.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerfair/config.hpp"
#include "steerfair/error.hpp"
#include "steerfair/eval.hpp"
#include "steerfair/io.hpp"
#include "steerfair/model.hpp"
#include "steerfair/steering.hpp"
#include "steerfair/taskgen.hpp"

namespace steerfair::cli {

namespace fs = std::filesystem;

enum exit_code : int {
  ok = 0,
  internal_failure = 1,
  config_failure = 2,
  missing_input = 3,
  signature_mismatch = 4,
  numerical_failure = 5,
  corrupt_input = 6,
};

inline int exit_code_for(errc c) {
  switch (c) {
    case errc::config_parse:
    case errc::invalid_argument:
    case errc::invalid_k:
      return config_failure;
    case errc::missing_input: return missing_input;
    case errc::model_signature_mismatch: return signature_mismatch;
    case errc::degenerate_data:
    case errc::zero_vector:
    case errc::diverged_loss:
    case errc::dimension_error:
    case errc::dimension_mismatch:
      return numerical_failure;
    case errc::corrupt_file:
    case errc::format_version_mismatch:
    case errc::unknown_token:
    case errc::sequence_too_long:
    case errc::vocabulary_exhausted:
    case errc::empty_batch:
      return corrupt_input;
  }
  return internal_failure;
}

inline void report_error(std::ostream& err, const std::string& code, int exit, const std::string& msg) {
  nlohmann::ordered_json j;
  j["error"] = code;
  j["exit_code"] = exit;
  j["message"] = msg;
  err << j.dump() << "\n";
}

struct Flags {
  std::string config, config_b;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<std::string> k, scoring, out, theme;
  bool vanilla = false;
};

namespace detail {

inline void require(const fs::path& p) {
  if (!fs::exists(p)) throw error(errc::missing_input, p.string() + " does not exist");
}

inline config::RunConfig load_config(const std::string& path, const Flags& f) {
  config::KeyValues ov;
  if (f.seed) ov.set_text("seed", std::to_string(*f.seed));
  if (f.alpha) ov.set_text("steer.alpha", io::fmt_double(*f.alpha));
  if (f.k) ov.set_text("steer.k", *f.k, true);
  if (f.scoring) ov.set_text("steer.scoring", *f.scoring, true);
  if (f.out) ov.set_text("out_dir", *f.out, true);
  if (f.theme) ov.set_text("data.theme", *f.theme, true);
  return config::load(path, ov);
}

inline taskgen::Template default_template() { return {}; }

inline std::vector<taskgen::UnlabeledQuestion> load_unlabeled(const config::RunConfig& c, const std::string& theme) {
  auto p = c.data_path(theme, "unlabeled");
  require(p);
  return taskgen::unlabeled_from_jsonl(io::read_file(p));
}

inline std::vector<taskgen::Question> load_split(const config::RunConfig& c, const std::string& theme,
                                                 const std::string& split) {
  auto p = c.data_path(theme, split);
  require(p);
  return taskgen::questions_from_jsonl(io::read_file(p));
}

inline model::ModelWeights load_model(const config::RunConfig& c) {
  require(c.checkpoint_path());
  return model::load_checkpoint(c.checkpoint_path());
}

inline std::string dataset_id(const config::RunConfig& c) {
  return "theme-" + c.data.theme + "/seed-" + std::to_string(c.seed);
}

inline void write_json(const fs::path& p, const nlohmann::ordered_json& j) { io::write_file_atomic(p, j.dump(2) + "\n"); }

}  // namespace detail

inline void cmd_gen_data(const config::RunConfig& c, std::ostream& log) {
  std::vector<std::string> themes = c.train_themes;
  if (std::find(themes.begin(), themes.end(), c.data.theme) == themes.end()) themes.push_back(c.data.theme);
  for (const auto& theme : themes) {
    auto ds = taskgen::generate_dataset(c.spec_for(theme));
    io::write_file_atomic(c.data_path(theme, "train"), taskgen::to_jsonl<taskgen::Question>(ds.train));
    io::write_file_atomic(c.data_path(theme, "val"), taskgen::to_jsonl<taskgen::Question>(ds.val));
    io::write_file_atomic(c.data_path(theme, "eval"), taskgen::to_jsonl<taskgen::Question>(ds.eval));
    io::write_file_atomic(c.data_path(theme, "unlabeled"), taskgen::to_jsonl<taskgen::UnlabeledQuestion>(ds.unlabeled));
    log << "theme " << theme << ": " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.eval.size()
        << " eval, " << ds.unlabeled.size() << " unlabeled\n";
  }
}

inline void cmd_train(const config::RunConfig& c, std::ostream& log) {
  const auto& vocab = taskgen::Vocabulary::builtin();
  auto tmpl = detail::default_template();
  std::vector<model::TrainingExample> corpus;
  for (const auto& theme : c.train_themes) {
    auto qs = detail::load_split(c, theme, "train");
    auto ex = taskgen::to_training_examples(qs, tmpl, vocab);
    corpus.insert(corpus.end(), ex.begin(), ex.end());
  }
  auto res = model::train(corpus, c.model, c.train);
  nlohmann::ordered_json meta;
  meta["steps"] = c.train.steps;
  meta["initial_loss"] = res.initial_loss;
  meta["final_loss"] = res.final_loss;
  model::save_checkpoint(res.weights, c.checkpoint_path(), meta);
  std::string csv = "step,loss\n";
  for (auto [s, l] : res.log) csv += std::to_string(s) + "," + io::fmt_double(l) + "\n";
  io::write_file_atomic(c.output("train_log.csv"), csv);
  log << "trained " << c.train.steps << " steps, loss " << res.initial_loss << " -> " << res.final_loss << "\n";
}

inline steering::FindResult find_for(const config::RunConfig& c, const model::ModelWeights& w) {
  auto pool = detail::load_unlabeled(c, c.data.theme);
  if (c.n_questions > pool.size()) throw error(errc::config_parse, "steer.n_questions exceeds the unlabeled pool");
  pool.resize(c.n_questions);
  return steering::find_directions(w, taskgen::Vocabulary::builtin(), pool, detail::default_template(), c.find,
                                   {detail::dataset_id(c), c.n_questions, c.seed});
}

inline void cmd_find_directions(const config::RunConfig& c, std::ostream& log) {
  auto w = detail::load_model(c);
  auto found = find_for(c, w);
  steering::save_directions(found.directions, c.directions_path());
  log << "directions for " << found.directions.total_heads() << " heads -> " << c.directions_path().string() << "\n";
}

inline void cmd_eval(const config::RunConfig& c, bool vanilla, std::ostream& log) {
  auto w = detail::load_model(c);
  auto qs = detail::load_split(c, c.data.theme, "eval");
  const auto& vocab = taskgen::Vocabulary::builtin();
  eval::EvalReport rep;
  std::string stem = "eval_" + c.data.theme;
  if (vanilla) {
    rep = eval::evaluate_orderings(w, vocab, nullptr, qs, detail::default_template(),
                                   {0, "none", detail::dataset_id(c), c.seed, "none"});
    stem += "_vanilla";
  } else {
    detail::require(c.directions_path());
    auto db = steering::load_directions(c.directions_path());
    steering::check_signature(db, w.config);
    auto plan = steering::plan_for(db, c.alpha, c.k);
    rep = eval::evaluate_orderings(w, vocab, &plan, qs, detail::default_template(),
                                   eval::echo_for(db, c.alpha, c.k, detail::dataset_id(c), c.seed));
  }
  detail::write_json(c.output(stem + ".json"), eval::to_json(rep));
  io::write_file_atomic(c.output(stem + ".csv"), eval::report_csv(rep));
  log << stem << ": avg " << rep.avg << " std " << rep.std << "\n";
}

inline void cmd_sweep(const config::RunConfig& c, std::ostream& log) {
  auto w = detail::load_model(c);
  detail::require(c.directions_path());
  auto db = steering::load_directions(c.directions_path());
  steering::check_signature(db, w.config);
  auto ev = detail::load_split(c, c.data.theme, "eval");
  auto val = detail::load_split(c, c.data.theme, "val");
  const auto& vocab = taskgen::Vocabulary::builtin();
  auto tmpl = detail::default_template();
  auto ks = eval::default_k_list(w.config.total_heads(), c.sweep_ks);
  auto id = detail::dataset_id(c);

  auto van_eval = eval::evaluate_orderings(w, vocab, nullptr, ev, tmpl, {0, "none", id, c.seed, "none"});
  auto van_val = eval::evaluate_orderings(w, vocab, nullptr, val, tmpl, {0, "none", id, c.seed, "none"});
  auto grid_val = eval::sweep(w, vocab, db, c.sweep_alphas, ks, val, tmpl, id, c.seed);
  auto grid_eval = eval::sweep(w, vocab, db, c.sweep_alphas, ks, ev, tmpl, id, c.seed);
  auto best = eval::select_best_cell(grid_val, van_val, c.best_cell_avg_tolerance);

  std::string stem = "sweep_" + c.data.theme;
  io::write_file_atomic(c.output(stem + ".csv"), eval::sweep_csv(grid_eval));
  io::write_file_atomic(c.output(stem + "_val.csv"), eval::sweep_csv(grid_val));
  nlohmann::ordered_json j;
  j["vanilla_eval"] = eval::to_json(van_eval);
  j["vanilla_val"] = eval::to_json(van_val);
  if (best.found) {
    std::size_t ai = std::find(grid_val.alphas.begin(), grid_val.alphas.end(), best.alpha) - grid_val.alphas.begin();
    std::size_t ki = std::find(grid_val.ks.begin(), grid_val.ks.end(), best.k) - grid_val.ks.begin();
    j["best_cell"] = {{"alpha", best.alpha},
                      {"k", best.k.str()},
                      {"val", eval::to_json(best.report)},
                      {"eval", eval::to_json(grid_eval.at(ai, ki))}};
  } else {
    j["best_cell"] = nullptr;
  }
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& r : grid_eval.cells) cells.push_back(eval::to_json(r));
  j["cells"] = std::move(cells);
  detail::write_json(c.output(stem + ".json"), j);
  log << stem << ": vanilla std " << van_eval.std;
  if (best.found) log << ", best cell by validation alpha=" << best.alpha << " k=" << best.k.str();
  log << "\n";
}

inline void cmd_study_n(const config::RunConfig& c, std::ostream& log) {
  auto w = detail::load_model(c);
  auto pool = detail::load_unlabeled(c, c.data.theme);
  auto ev = detail::load_split(c, c.data.theme, "eval");
  std::vector<steering::DirectionBank> banks;
  auto rows = eval::sample_count_study(w, taskgen::Vocabulary::builtin(), pool, ev, c.study_ns, c.study_seeds, c.alpha,
                                       c.k, detail::default_template(), c.find, detail::dataset_id(c), &banks);
  std::string stem = "study_n_" + c.data.theme;
  io::write_file_atomic(c.output(stem + ".csv"), eval::sample_count_csv(rows));
  for (std::size_t i = 0; i < rows.size(); ++i)
    steering::save_directions(banks[i], c.output(stem) / ("directions_n" + std::to_string(rows[i].n) + "_seed" +
                                                          std::to_string(rows[i].seed) + ".json"));
  log << stem << ": " << rows.size() << " rows\n";
}

inline void cmd_transfer(const config::RunConfig& a, const config::RunConfig& b, std::ostream& log) {
  auto w = detail::load_model(b);
  detail::require(a.directions_path());
  detail::require(b.directions_path());
  auto dirs_a = steering::load_directions(a.directions_path());
  auto dirs_b = steering::load_directions(b.directions_path());
  auto ev = detail::load_split(b, b.data.theme, "eval");
  if (a.data.task_kind != b.data.task_kind || a.data.m != b.data.m)
    throw error(errc::config_parse, "transfer needs the same task kind and option count");
  auto rep = eval::transfer_study(w, taskgen::Vocabulary::builtin(), dirs_a, dirs_b, ev, b.alpha, b.k,
                                  detail::default_template());
  std::string stem = "transfer_" + a.data.theme + "_to_" + b.data.theme;
  nlohmann::ordered_json j;
  j["vanilla"] = eval::to_json(rep.vanilla);
  j["own_dataset"] = eval::to_json(rep.own_dataset);
  j["other_dataset"] = eval::to_json(rep.other_dataset);
  detail::write_json(b.output(stem + ".json"), j);
  io::write_file_atomic(b.output(stem + ".csv"), eval::transfer_csv(rep));
  log << stem << ": vanilla std " << rep.vanilla.std << ", own " << rep.own_dataset.std << ", other "
      << rep.other_dataset.std << "\n";
}

inline void cmd_projections(const config::RunConfig& c, std::ostream& log) {
  auto w = detail::load_model(c);
  detail::require(c.directions_path());
  auto db = steering::load_directions(c.directions_path());
  steering::check_signature(db, w.config);
  auto pool = detail::load_unlabeled(c, c.data.theme);
  pool.resize(std::min(pool.size(), c.n_questions));
  auto bank = steering::build_activation_bank(w, taskgen::Vocabulary::builtin(), pool, detail::default_template());
  std::size_t written = 0;
  for (std::size_t l = 0; l < w.config.n_layers; ++l)
    for (std::size_t h = 0; h < w.config.n_heads; ++h) {
      try {
        auto rows = eval::export_projections(db, bank, {l, h});
        io::write_file_atomic(c.output("projections_" + c.data.theme) /
                                  ("layer" + std::to_string(l) + "_head" + std::to_string(h) + ".csv"),
                              eval::projections_csv(rows));
        ++written;
      } catch (const error& e) {
        if (e.code() != errc::degenerate_data) throw;
        log << "skipping degenerate head (" << l << ", " << h << ")\n";
      }
    }
  log << "projections for " << written << " heads\n";
}

// Returns the process exit code; never throws.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"steerfair: label-free order-bias steering on a toy transformer"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "run config file")->required();
    sub->add_option("--seed", f.seed, "override the run seed");
    sub->add_option("--alpha", f.alpha, "steering strength");
    sub->add_option("--k", f.k, "number of steered heads, or 'all'");
    sub->add_option("--scoring", f.scoring, "head scoring: proj or evr");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--theme", f.theme, "dataset theme to work on");
  };
  auto* gen = app.add_subcommand("gen-data", "generate train/val/eval/unlabeled splits");
  auto* trn = app.add_subcommand("train", "train the toy model");
  auto* fnd = app.add_subcommand("find-directions", "identify bias directions from unlabeled questions");
  auto* evl = app.add_subcommand("eval", "evaluate across option orderings");
  auto* swp = app.add_subcommand("sweep", "alpha x K grid");
  auto* stn = app.add_subcommand("study-n", "sample-count study");
  auto* trf = app.add_subcommand("transfer", "directions from one dataset applied to another");
  auto* prj = app.add_subcommand("projections", "per-head 2-D principal coordinates of the demonstrations");
  for (auto* s : {gen, trn, fnd, evl, swp, stn, trf, prj}) add_common(s);
  evl->add_flag("--vanilla", f.vanilla, "ignore directions and evaluate the unsteered model");
  trf->add_option("--config-b", f.config_b, "config of the target dataset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    if (code == 0) return ok;
    report_error(err, "Usage", config_failure, e.what());
    return config_failure;
  }

  try {
    auto c = detail::load_config(f.config, f);
    if (gen->parsed()) cmd_gen_data(c, out);
    if (trn->parsed()) cmd_train(c, out);
    if (fnd->parsed()) cmd_find_directions(c, out);
    if (evl->parsed()) cmd_eval(c, f.vanilla, out);
    if (swp->parsed()) cmd_sweep(c, out);
    if (stn->parsed()) cmd_study_n(c, out);
    if (trf->parsed()) cmd_transfer(c, detail::load_config(f.config_b, f), out);
    if (prj->parsed()) cmd_projections(c, out);
  } catch (const error& e) {
    int code = exit_code_for(e.code());
    report_error(err, std::string(errc_name(e.code())), code, e.what());
    return code;
  } catch (const std::exception& e) {
    report_error(err, "Internal", internal_failure, e.what());
    return internal_failure;
  }
  return ok;
}

}  // namespace steerfair::cli
