#pragma once

// Small pre-LN decoder-only transformer in f64 with per-head hook points
// between the attention output and the output projection.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "steerfair/error.hpp"
#include "steerfair/io.hpp"
#include "steerfair/numerics.hpp"

namespace steerfair::model {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t mlp_dim() const { return 4 * d_model; }
  std::size_t total_heads() const { return n_layers * n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || vocab_size < 1 || max_seq_len < 1)
      throw error(errc::invalid_argument, "model config: all sizes must be >= 1");
    if (d_model % n_heads != 0) throw error(errc::invalid_argument, "model config: d_model must be divisible by n_heads");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    std::size_t n = 1;
    for (auto x : shape) n *= x;
    data.assign(n, 0.0);
  }
  std::size_t size() const { return data.size(); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  bool operator==(const Tensor&) const = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v;  // [H, D, d_model]
  Tensor w_o;            // [H, d_model, D], one output block per head
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_in, mlp_in_bias;    // [4d, d], [4d]
  Tensor mlp_out, mlp_out_bias;  // [d, 4d], [d]
  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  Tensor tok_emb;  // [V, d]
  Tensor pos_emb;  // [T, d]
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor unembed;  // [d, V]

  static ModelWeights zeros(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.d_model, D = c.head_dim(), H = c.n_heads, F = c.mlp_dim();
    ModelWeights w;
    w.config = c;
    w.tok_emb = Tensor({c.vocab_size, d});
    w.pos_emb = Tensor({c.max_seq_len, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      LayerWeights L;
      L.ln1_gain = Tensor({d});
      L.ln1_bias = Tensor({d});
      L.w_q = Tensor({H, D, d});
      L.w_k = Tensor({H, D, d});
      L.w_v = Tensor({H, D, d});
      L.w_o = Tensor({H, d, D});
      L.ln2_gain = Tensor({d});
      L.ln2_bias = Tensor({d});
      L.mlp_in = Tensor({F, d});
      L.mlp_in_bias = Tensor({F});
      L.mlp_out = Tensor({d, F});
      L.mlp_out_bias = Tensor({d});
      w.layers.push_back(std::move(L));
    }
    w.lnf_gain = Tensor({d});
    w.lnf_bias = Tensor({d});
    w.unembed = Tensor({d, c.vocab_size});
    return w;
  }

  // fixed traversal order; checkpoint names and optimizer state follow it
  template <class F>
  void visit(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "ln1.gain", L.ln1_gain);
      f(p + "ln1.bias", L.ln1_bias);
      f(p + "attn.w_q", L.w_q);
      f(p + "attn.w_k", L.w_k);
      f(p + "attn.w_v", L.w_v);
      f(p + "attn.w_o", L.w_o);
      f(p + "ln2.gain", L.ln2_gain);
      f(p + "ln2.bias", L.ln2_bias);
      f(p + "mlp.w_in", L.mlp_in);
      f(p + "mlp.b_in", L.mlp_in_bias);
      f(p + "mlp.w_out", L.mlp_out);
      f(p + "mlp.b_out", L.mlp_out_bias);
    }
    f(std::string("ln_f.gain"), lnf_gain);
    f(std::string("ln_f.bias"), lnf_bias);
    f(std::string("unembed"), unembed);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<ModelWeights*>(this)->visit([&](const std::string& n, Tensor& t) { f(n, static_cast<const Tensor&>(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  bool operator==(const ModelWeights&) const = default;
};

// Gaussian(0, 0.02) for matrices and embeddings; gains 1, biases 0.
inline ModelWeights init_weights(const ModelConfig& c) {
  auto w = ModelWeights::zeros(c);
  std::mt19937_64 gen(c.seed);
  std::normal_distribution<double> nd(0.0, 0.02);
  w.visit([&](const std::string& name, Tensor& t) {
    if (name.ends_with(".gain")) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (name.ends_with(".bias") || name.ends_with(".b_in") || name.ends_with(".b_out")) {
      // zeros
    } else {
      for (double& x : t.data) x = nd(gen);
    }
  });
  return w;
}

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadId&) const = default;
};

struct HeadSteer {
  std::vector<double> direction;  // dim D
  double alpha = 0;
  bool operator==(const HeadSteer&) const = default;
};

using SteeringHook = std::map<HeadId, HeadSteer>;
using CaptureSet = std::set<HeadId>;

inline CaptureSet all_heads(const ModelConfig& c) {
  CaptureSet s;
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) s.insert({l, h});
  return s;
}

struct ForwardTrace {
  std::vector<double> logits;  // last position
  std::map<HeadId, std::vector<double>> captured;            // what W_O sees (post-steering)
  std::map<HeadId, std::vector<double>> captured_pre_steer;  // raw attention output
};

// theta' = ||theta|| (theta - alpha v) / ||theta - alpha v||
inline std::vector<double> steer_head_output(std::span<const double> theta, std::span<const double> dir, double alpha) {
  if (theta.size() != dir.size()) throw error(errc::dimension_mismatch, "steering direction dim differs from head dim");
  std::vector<double> upd(theta.begin(), theta.end());
  if (alpha == 0) return upd;
  for (std::size_t i = 0; i < upd.size(); ++i) upd[i] -= alpha * dir[i];
  return numerics::l2_renormalize(upd, numerics::norm(theta));
}

struct TrainingExample {
  std::vector<int> tokens;
  std::vector<std::pair<std::size_t, int>> targets;  // (position, next token id)
};

namespace detail {

constexpr double ln_eps = 1e-5;
const double gelu_c = std::sqrt(2.0 / 3.14159265358979323846);

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(gelu_c * (x + 0.044715 * x * x * x))); }
inline double gelu_grad(double x) {
  double u = gelu_c * (x + 0.044715 * x * x * x);
  double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * gelu_c * (1.0 + 3.0 * 0.044715 * x * x);
}

inline void layer_norm(const double* x, const double* g, const double* b, std::size_t d, double* out, double* xhat,
                       double* rstd) {
  double mu = 0;
  for (std::size_t i = 0; i < d; ++i) mu += x[i];
  mu /= double(d);
  double var = 0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= double(d);
  double rs = 1.0 / std::sqrt(var + ln_eps);
  *rstd = rs;
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mu) * rs;
    out[i] = xhat[i] * g[i] + b[i];
  }
}

// accumulates into dx
inline void layer_norm_backward(const double* dy, const double* xhat, double rstd, const double* g, std::size_t d,
                                double* dx, double* dg, double* db) {
  double m1 = 0, m2 = 0;
  for (std::size_t i = 0; i < d; ++i) {
    double dxh = dy[i] * g[i];
    m1 += dxh;
    m2 += dxh * xhat[i];
    dg[i] += dy[i] * xhat[i];
    db[i] += dy[i];
  }
  m1 /= double(d);
  m2 /= double(d);
  for (std::size_t i = 0; i < d; ++i) dx[i] += rstd * (dy[i] * g[i] - m1 - xhat[i] * m2);
}

struct LayerCache {
  std::vector<double> x_in, ln1, ln1_xhat, ln1_rstd;
  std::vector<double> q, k, v, p, z;  // q,k,v,z: [H][n][D]; p: [H][n][n]
  std::vector<double> x_mid, ln2, ln2_xhat, ln2_rstd, hpre, act;
};

struct Cache {
  std::size_t n = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, lnf, lnf_xhat, lnf_rstd;
};

inline void check_tokens(std::span<const int> tokens, const ModelConfig& c) {
  if (tokens.empty()) throw error(errc::invalid_argument, "empty token sequence");
  if (tokens.size() > c.max_seq_len)
    throw error(errc::sequence_too_long,
                std::to_string(tokens.size()) + " tokens exceed max_seq_len " + std::to_string(c.max_seq_len));
  for (int t : tokens)
    if (t < 0 || std::size_t(t) >= c.vocab_size) throw error(errc::unknown_token, "token id out of range");
}

inline void check_hooks(const SteeringHook& hooks, const ModelConfig& c) {
  for (const auto& [id, s] : hooks) {
    if (id.layer >= c.n_layers || id.head >= c.n_heads) throw error(errc::dimension_mismatch, "hooked head out of range");
    if (s.direction.size() != c.head_dim()) throw error(errc::dimension_mismatch, "hook direction dim != head_dim");
    if (!std::isfinite(s.alpha) || s.alpha < 0) throw error(errc::invalid_argument, "alpha must be finite and >= 0");
  }
}

// Full forward through the final layer norm. Steering touches only the last position.
inline void run_forward(std::span<const int> tokens, const ModelWeights& w, const SteeringHook* hooks,
                        const CaptureSet* capture, ForwardTrace* trace, Cache& cache) {
  const auto& c = w.config;
  const std::size_t n = tokens.size(), d = c.d_model, H = c.n_heads, D = c.head_dim(), F = c.mlp_dim();
  const double scale = 1.0 / std::sqrt(double(D));
  cache.n = n;
  cache.layers.resize(c.n_layers);

  std::vector<double> x(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const double* te = w.tok_emb.ptr() + std::size_t(tokens[t]) * d;
    const double* pe = w.pos_emb.ptr() + t * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  std::vector<double> scores(n);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    auto& C = cache.layers[l];
    C.x_in = x;
    C.ln1.resize(n * d);
    C.ln1_xhat.resize(n * d);
    C.ln1_rstd.resize(n);
    for (std::size_t t = 0; t < n; ++t)
      layer_norm(&x[t * d], L.ln1_gain.ptr(), L.ln1_bias.ptr(), d, &C.ln1[t * d], &C.ln1_xhat[t * d], &C.ln1_rstd[t]);

    C.q.assign(H * n * D, 0.0);
    C.k.assign(H * n * D, 0.0);
    C.v.assign(H * n * D, 0.0);
    C.p.assign(H * n * n, 0.0);
    C.z.assign(H * n * D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const double* a = &C.ln1[t * d];
        for (std::size_t e = 0; e < D; ++e) {
          std::size_t wi = (h * D + e) * d, ci = (h * n + t) * D + e;
          C.q[ci] = numerics::dot(L.w_q.ptr() + wi, a, d);
          C.k[ci] = numerics::dot(L.w_k.ptr() + wi, a, d);
          C.v[ci] = numerics::dot(L.w_v.ptr() + wi, a, d);
        }
      }
      for (std::size_t t = 0; t < n; ++t) {
        const double* qt = &C.q[(h * n + t) * D];
        double mx = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = numerics::dot(qt, &C.k[(h * n + u) * D], D) * scale;
          mx = std::max(mx, scores[u]);
        }
        double sum = 0;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - mx);
          sum += scores[u];
        }
        double* pt = &C.p[(h * n + t) * n];
        double* zt = &C.z[(h * n + t) * D];
        for (std::size_t u = 0; u <= t; ++u) {
          pt[u] = scores[u] / sum;
          const double* vu = &C.v[(h * n + u) * D];
          for (std::size_t e = 0; e < D; ++e) zt[e] += pt[u] * vu[e];
        }
      }
      // hook site: last position, after attention, before the output projection
      HeadId id{l, h};
      double* zl = &C.z[(h * n + n - 1) * D];
      bool want = capture && capture->count(id);
      if (want && trace) trace->captured_pre_steer[id].assign(zl, zl + D);
      if (hooks) {
        auto it = hooks->find(id);
        if (it != hooks->end() && it->second.alpha != 0) {
          auto steered = steer_head_output({zl, D}, it->second.direction, it->second.alpha);
          std::copy(steered.begin(), steered.end(), zl);
        }
      }
      if (want && trace) trace->captured[id].assign(zl, zl + D);
    }

    // residual + per-head output blocks
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        const double* zt = &C.z[(h * n + t) * D];
        const double* wo = L.w_o.ptr() + h * d * D;
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] += numerics::dot(wo + i * D, zt, D);
      }
    C.x_mid = x;

    C.ln2.resize(n * d);
    C.ln2_xhat.resize(n * d);
    C.ln2_rstd.resize(n);
    C.hpre.resize(n * F);
    C.act.resize(n * F);
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm(&x[t * d], L.ln2_gain.ptr(), L.ln2_bias.ptr(), d, &C.ln2[t * d], &C.ln2_xhat[t * d], &C.ln2_rstd[t]);
      const double* b = &C.ln2[t * d];
      for (std::size_t f = 0; f < F; ++f) {
        double hv = numerics::dot(L.mlp_in.ptr() + f * d, b, d) + L.mlp_in_bias.data[f];
        C.hpre[t * F + f] = hv;
        C.act[t * F + f] = gelu(hv);
      }
      const double* g = &C.act[t * F];
      for (std::size_t i = 0; i < d; ++i)
        x[t * d + i] += numerics::dot(L.mlp_out.ptr() + i * F, g, F) + L.mlp_out_bias.data[i];
    }
  }

  cache.x_final = x;
  cache.lnf.resize(n * d);
  cache.lnf_xhat.resize(n * d);
  cache.lnf_rstd.resize(n);
  for (std::size_t t = 0; t < n; ++t)
    layer_norm(&x[t * d], w.lnf_gain.ptr(), w.lnf_bias.ptr(), d, &cache.lnf[t * d], &cache.lnf_xhat[t * d],
               &cache.lnf_rstd[t]);
}

inline std::vector<double> logits_at(const ModelWeights& w, const Cache& cache, std::size_t t) {
  const std::size_t d = w.config.d_model, V = w.config.vocab_size;
  std::vector<double> out(V, 0.0);
  const double* xf = &cache.lnf[t * d];
  for (std::size_t i = 0; i < d; ++i) {
    const double* u = w.unembed.ptr() + i * V;
    double xi = xf[i];
    for (std::size_t v = 0; v < V; ++v) out[v] += xi * u[v];
  }
  return out;
}

}  // namespace detail

inline ForwardTrace forward(std::span<const int> tokens, const ModelWeights& weights, const SteeringHook* hooks = nullptr,
                            const CaptureSet* capture = nullptr) {
  detail::check_tokens(tokens, weights.config);
  if (hooks) detail::check_hooks(*hooks, weights.config);
  ForwardTrace trace;
  detail::Cache cache;
  detail::run_forward(tokens, weights, hooks, capture, &trace, cache);
  trace.logits = detail::logits_at(weights, cache, tokens.size() - 1);
  return trace;
}

struct LossAndGrads {
  double loss = 0;
  ModelWeights grads;
};

namespace detail {

// Adds d(loss)/d(weights) for one example into g. dlogit_scale = 1 / total target count.
inline double backprop_example(const ModelWeights& w, const TrainingExample& ex, double dlogit_scale, ModelWeights& g,
                               bool want_grads) {
  const auto& c = w.config;
  const std::size_t n = ex.tokens.size(), d = c.d_model, H = c.n_heads, D = c.head_dim(), F = c.mlp_dim(),
                    V = c.vocab_size;
  const double scale = 1.0 / std::sqrt(double(D));
  Cache cache;
  run_forward(ex.tokens, w, nullptr, nullptr, nullptr, cache);

  double loss = 0;
  std::vector<double> dlnf(n * d, 0.0);
  for (auto [pos, target] : ex.targets) {
    auto lg = logits_at(w, cache, pos);
    double mx = *std::max_element(lg.begin(), lg.end());
    double sum = 0;
    for (double v : lg) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    loss += lse - lg[std::size_t(target)];
    if (!want_grads) continue;
    std::vector<double> dl(V);
    for (std::size_t v = 0; v < V; ++v) dl[v] = std::exp(lg[v] - lse) * dlogit_scale;
    dl[std::size_t(target)] -= dlogit_scale;
    const double* xf = &cache.lnf[pos * d];
    for (std::size_t i = 0; i < d; ++i) {
      double* gu = g.unembed.ptr() + i * V;
      const double* u = w.unembed.ptr() + i * V;
      for (std::size_t v = 0; v < V; ++v) gu[v] += xf[i] * dl[v];
      dlnf[pos * d + i] += numerics::dot(u, dl.data(), V);
    }
  }
  if (!want_grads) return loss;

  std::vector<double> dx(n * d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    layer_norm_backward(&dlnf[t * d], &cache.lnf_xhat[t * d], cache.lnf_rstd[t], w.lnf_gain.ptr(), d, &dx[t * d],
                        g.lnf_gain.ptr(), g.lnf_bias.ptr());

  std::vector<double> dact(F), dh(F), dln(n * d), dz(D), dq(n * D), dk(n * D), dv(n * D), dp(n);
  for (std::size_t l = c.n_layers; l-- > 0;) {
    const auto& L = w.layers[l];
    auto& G = g.layers[l];
    const auto& C = cache.layers[l];

    // MLP branch; dx currently holds d(x_out), which also flows straight to x_mid
    std::fill(dln.begin(), dln.end(), 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double* dy = &dx[t * d];
      const double* a = &C.act[t * F];
      std::fill(dact.begin(), dact.end(), 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        double di = dy[i];
        G.mlp_out_bias.data[i] += di;
        if (di == 0) continue;
        double* gw = G.mlp_out.ptr() + i * F;
        const double* wr = L.mlp_out.ptr() + i * F;
        for (std::size_t f = 0; f < F; ++f) {
          gw[f] += di * a[f];
          dact[f] += di * wr[f];
        }
      }
      const double* b = &C.ln2[t * d];
      double* dlt = &dln[t * d];
      for (std::size_t f = 0; f < F; ++f) {
        double df = dact[f] * gelu_grad(C.hpre[t * F + f]);
        G.mlp_in_bias.data[f] += df;
        if (df == 0) continue;
        double* gw = G.mlp_in.ptr() + f * d;
        const double* wr = L.mlp_in.ptr() + f * d;
        for (std::size_t i = 0; i < d; ++i) {
          gw[i] += df * b[i];
          dlt[i] += df * wr[i];
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t)
      layer_norm_backward(&dln[t * d], &C.ln2_xhat[t * d], C.ln2_rstd[t], L.ln2_gain.ptr(), d, &dx[t * d],
                          G.ln2_gain.ptr(), G.ln2_bias.ptr());
    // dx is now d(x_mid)

    std::fill(dln.begin(), dln.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      std::fill(dq.begin(), dq.end(), 0.0);
      std::fill(dk.begin(), dk.end(), 0.0);
      std::fill(dv.begin(), dv.end(), 0.0);
      const double* wo = L.w_o.ptr() + h * d * D;
      double* gwo = G.w_o.ptr() + h * d * D;
      for (std::size_t t = 0; t < n; ++t) {
        const double* dy = &dx[t * d];
        const double* zt = &C.z[(h * n + t) * D];
        std::fill(dz.begin(), dz.end(), 0.0);
        for (std::size_t i = 0; i < d; ++i) {
          double di = dy[i];
          if (di == 0) continue;
          for (std::size_t e = 0; e < D; ++e) {
            gwo[i * D + e] += di * zt[e];
            dz[e] += di * wo[i * D + e];
          }
        }
        const double* pt = &C.p[(h * n + t) * n];
        double acc = 0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* vu = &C.v[(h * n + u) * D];
          dp[u] = numerics::dot(dz.data(), vu, D);
          acc += pt[u] * dp[u];
          for (std::size_t e = 0; e < D; ++e) dv[u * D + e] += pt[u] * dz[e];
        }
        const double* qt = &C.q[(h * n + t) * D];
        for (std::size_t u = 0; u <= t; ++u) {
          double ds = pt[u] * (dp[u] - acc) * scale;
          if (ds == 0) continue;
          const double* ku = &C.k[(h * n + u) * D];
          for (std::size_t e = 0; e < D; ++e) {
            dq[t * D + e] += ds * ku[e];
            dk[u * D + e] += ds * qt[e];
          }
        }
      }
      // projections q = Wq a, k = Wk a, v = Wv a
      for (std::size_t t = 0; t < n; ++t) {
        const double* a = &C.ln1[t * d];
        double* dlt = &dln[t * d];
        for (std::size_t e = 0; e < D; ++e) {
          std::size_t wi = (h * D + e) * d;
          double gq = dq[t * D + e], gk = dk[t * D + e], gv = dv[t * D + e];
          double* Gq = G.w_q.ptr() + wi;
          double* Gk = G.w_k.ptr() + wi;
          double* Gv = G.w_v.ptr() + wi;
          const double* Wq = L.w_q.ptr() + wi;
          const double* Wk = L.w_k.ptr() + wi;
          const double* Wv = L.w_v.ptr() + wi;
          for (std::size_t i = 0; i < d; ++i) {
            Gq[i] += gq * a[i];
            Gk[i] += gk * a[i];
            Gv[i] += gv * a[i];
            dlt[i] += gq * Wq[i] + gk * Wk[i] + gv * Wv[i];
          }
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t)
      layer_norm_backward(&dln[t * d], &C.ln1_xhat[t * d], C.ln1_rstd[t], L.ln1_gain.ptr(), d, &dx[t * d],
                          G.ln1_gain.ptr(), G.ln1_bias.ptr());
    // dx is now d(x_in)
  }

  for (std::size_t t = 0; t < n; ++t) {
    double* te = g.tok_emb.ptr() + std::size_t(ex.tokens[t]) * d;
    double* pe = g.pos_emb.ptr() + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += dx[t * d + i];
      pe[i] += dx[t * d + i];
    }
  }
  return loss;
}

inline std::size_t count_targets(std::span<const TrainingExample> batch, const ModelConfig& c) {
  std::size_t total = 0;
  for (const auto& ex : batch) {
    check_tokens(ex.tokens, c);
    for (auto [pos, tok] : ex.targets) {
      if (pos >= ex.tokens.size()) throw error(errc::invalid_argument, "target position outside sequence");
      if (tok < 0 || std::size_t(tok) >= c.vocab_size) throw error(errc::unknown_token, "target id out of range");
    }
    total += ex.targets.size();
  }
  if (total == 0) throw error(errc::empty_batch, "batch has no targets");
  return total;
}

}  // namespace detail

// Mean next-token cross-entropy over the designated targets, with analytic gradients.
inline LossAndGrads loss_and_grads(const ModelWeights& weights, std::span<const TrainingExample> batch) {
  if (batch.empty()) throw error(errc::empty_batch, "empty batch");
  std::size_t total = detail::count_targets(batch, weights.config);
  LossAndGrads out;
  out.grads = ModelWeights::zeros(weights.config);
  double scale = 1.0 / double(total);
  for (const auto& ex : batch) out.loss += detail::backprop_example(weights, ex, scale, out.grads, true);
  out.loss *= scale;
  return out;
}

inline double mean_loss(const ModelWeights& weights, std::span<const TrainingExample> batch) {
  if (batch.empty()) throw error(errc::empty_batch, "empty batch");
  std::size_t total = detail::count_targets(batch, weights.config);
  double loss = 0;
  ModelWeights unused;
  for (const auto& ex : batch) loss += detail::backprop_example(weights, ex, 0, unused, false);
  return loss / double(total);
}

enum class Optimizer { sgd, adam };
enum class Schedule { constant, cosine };

struct TrainOptions {
  Optimizer optimizer = Optimizer::sgd;
  Schedule schedule = Schedule::constant;
  double lr = 0.1;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  std::size_t probe_size = 512;  // examples used for initial/final loss
};

struct TrainResult {
  ModelWeights weights;
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<std::pair<std::size_t, double>> log;  // (step, batch loss)
};

// Single-threaded and deterministic for a given (config.seed, options.seed).
inline TrainResult train(std::span<const TrainingExample> corpus, const ModelConfig& config, const TrainOptions& opt) {
  if (corpus.empty()) throw error(errc::empty_batch, "empty training corpus");
  if (opt.batch_size < 1) throw error(errc::invalid_argument, "batch_size must be >= 1");
  TrainResult res;
  res.weights = init_weights(config);
  auto probe = corpus.subspan(0, std::min(opt.probe_size, corpus.size()));
  res.initial_loss = mean_loss(res.weights, probe);
  if (opt.steps == 0) {
    res.final_loss = res.initial_loss;
    return res;
  }

  std::mt19937_64 gen(opt.seed ^ 0x5eedba7c4e5ull);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  ModelWeights m1, m2;
  if (opt.optimizer == Optimizer::adam) {
    m1 = ModelWeights::zeros(config);
    m2 = ModelWeights::zeros(config);
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<TrainingExample> batch(opt.batch_size);

  for (std::size_t step = 1; step <= opt.steps; ++step) {
    for (auto& ex : batch) ex = corpus[pick(gen)];
    auto lg = loss_and_grads(res.weights, batch);
    if (!std::isfinite(lg.loss)) throw error(errc::diverged_loss, "loss became non-finite at step " + std::to_string(step));
    if (step == 1 || step % opt.log_every == 0 || step == opt.steps) res.log.emplace_back(step, lg.loss);

    double lr = opt.lr;
    if (opt.schedule == Schedule::cosine)
      lr = opt.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step - 1) / double(opt.steps)));

    if (opt.optimizer == Optimizer::sgd) {
      std::vector<Tensor*> params;
      res.weights.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
      std::size_t i = 0;
      lg.grads.visit([&](const std::string&, Tensor& gt) {
        auto& p = *params[i++];
        for (std::size_t k = 0; k < p.size(); ++k) p.data[k] -= lr * gt.data[k];
      });
    } else {
      std::vector<Tensor*> params, mom, vel;
      res.weights.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
      m1.visit([&](const std::string&, Tensor& t) { mom.push_back(&t); });
      m2.visit([&](const std::string&, Tensor& t) { vel.push_back(&t); });
      double c1 = 1.0 - std::pow(b1, double(step)), c2 = 1.0 - std::pow(b2, double(step));
      std::size_t i = 0;
      lg.grads.visit([&](const std::string&, Tensor& gt) {
        auto& p = *params[i];
        auto& m = *mom[i];
        auto& v = *vel[i];
        ++i;
        for (std::size_t k = 0; k < p.size(); ++k) {
          double gk = gt.data[k];
          m.data[k] = b1 * m.data[k] + (1 - b1) * gk;
          v.data[k] = b2 * v.data[k] + (1 - b2) * gk * gk;
          p.data[k] -= lr * (m.data[k] / c1) / (std::sqrt(v.data[k] / c2) + eps);
        }
      });
    }
  }
  res.final_loss = mean_loss(res.weights, probe);
  if (!std::isfinite(res.final_loss)) throw error(errc::diverged_loss, "final loss is non-finite");
  return res;
}

// ---- checkpoint ------------------------------------------------------------

inline constexpr const char* checkpoint_format_version = "1";

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["head_dim"] = c.head_dim();
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// extra: optional object stored under "training" (loss history etc.)
inline std::string checkpoint_to_string(const ModelWeights& w, const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j;
  j["format_version"] = checkpoint_format_version;
  j["config"] = config_to_json(w.config);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
  w.visit([&](const std::string& name, const Tensor& t) {
    nlohmann::ordered_json tj;
    tj["shape"] = t.shape;
    tj["data"] = t.data;
    tensors[name] = std::move(tj);
  });
  j["tensors"] = std::move(tensors);
  if (!extra.is_null()) j["training"] = extra;
  return j.dump() + "\n";
}

inline void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path,
                            const nlohmann::ordered_json& extra = {}) {
  io::write_file_atomic(path, checkpoint_to_string(w, extra));
}

inline ModelWeights checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw error(errc::corrupt_file, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    auto ver = j.at("format_version").get<std::string>();
    if (ver != checkpoint_format_version)
      throw error(errc::format_version_mismatch, "checkpoint version " + ver + ", reader expects " + checkpoint_format_version);
    auto w = ModelWeights::zeros(config_from_json(j.at("config")));
    const auto& tj = j.at("tensors");
    w.visit([&](const std::string& name, Tensor& t) {
      const auto& e = tj.at(name);
      if (e.at("shape").get<std::vector<std::size_t>>() != t.shape)
        throw error(errc::corrupt_file, "tensor " + name + " has the wrong shape");
      const auto& data = e.at("data");
      if (!data.is_array() || data.size() != t.size())
        throw error(errc::corrupt_file, "tensor " + name + " has the wrong element count");
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = data[i].get<double>();
    });
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw error(errc::corrupt_file, std::string("checkpoint structure: ") + e.what());
  }
}

inline ModelWeights load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_string(io::read_file(path)); }

}  // namespace steerfair::model
