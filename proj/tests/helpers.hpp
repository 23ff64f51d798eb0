#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "steerfair/eval.hpp"
#include "steerfair/model.hpp"
#include "steerfair/numerics.hpp"
#include "steerfair/taskgen.hpp"

namespace th {

using namespace steerfair;

// Fails unless `expr` throws steerfair::error with the given code.
#define EXPECT_ERRC(expr, code_)                                               \
  do {                                                                         \
    try {                                                                      \
      (void)(expr);                                                            \
      ADD_FAILURE() << "expected " << steerfair::errc_name(code_);             \
    } catch (const steerfair::error& e_) {                                     \
      EXPECT_EQ(e_.code(), code_) << e_.what();                                \
    }                                                                          \
  } while (0)

inline numerics::Matrix to_matrix(const oracle::Mat& m) { return numerics::Matrix::from_rows(m); }

inline double abs_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return std::abs(oracle::dot(a, b)) / (oracle::norm(a) * oracle::norm(b));
}

inline taskgen::DatasetSpec small_spec(const std::string& theme = "A", std::uint64_t seed = 7) {
  taskgen::DatasetSpec s;
  s.theme = theme;
  s.seed = seed;
  s.n_train = 600;
  s.n_eval = 60;
  s.n_val = 40;
  s.n_unlabeled = 40;
  s.zipf = 2.0;
  return s;
}

inline model::ModelConfig default_config(std::uint64_t seed = 3) {
  model::ModelConfig c;
  c.vocab_size = taskgen::Vocabulary::builtin().size();
  c.seed = seed;
  return c;
}

// A briefly trained default-size model, shared by tests that need non-random weights.
inline const model::ModelWeights& quick_model() {
  static const model::ModelWeights w = [] {
    auto d = taskgen::generate_dataset(small_spec());
    auto corpus = taskgen::to_training_examples(d.train, taskgen::Template{}, taskgen::Vocabulary::builtin());
    model::TrainOptions o;
    o.optimizer = model::Optimizer::adam;
    o.lr = 3e-3;
    o.steps = 60;
    o.batch_size = 8;
    o.seed = 5;
    return model::train(corpus, default_config(), o).weights;
  }();
  return w;
}

inline std::filesystem::path work_dir(const std::string& name) {
  auto p = std::filesystem::path(STEERFAIR_TEST_WORK_DIR) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace th
