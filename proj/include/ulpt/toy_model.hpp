#pragma once

// A small frozen transformer encoder classifier used to exercise prompt
// tuning end to end. Weights are drawn once from a seed and never updated;
// the backward pass only produces gradients with respect to the input rows.
//
// Block (pre-LN, no affine LN parameters):
//   H += MultiHeadAttention(LN(H))
//   H += tanh(LN(H) W1 + c1) W2
// Classifier: mean over all positions of LN(H), then a linear head.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ulpt/numerics.hpp"

namespace ulpt::toy {

struct ToyModelConfig {
  std::size_t vocab = 64;
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t seq_len = 12;
  std::size_t num_classes = 4;
  Seed seed{1};
  // Magnitude of the fixed per-dimension offset added to every input token
  // embedding. Zero gives the plain task; a large value makes the embedding
  // distribution sit far from the origin ("shifted" task).
  double embed_offset = 0.0;
  // Scale of the marker (class) token embeddings relative to filler tokens.
  double marker_scale = 3.0;

  void validate() const {
    if (vocab <= num_classes) throw ConfigError("toy model: vocab must exceed num_classes");
    if (d == 0 || layers == 0 || heads == 0 || ffn == 0 || seq_len == 0 || num_classes < 2)
      throw ConfigError("toy model: zero dimension");
    if (d % heads != 0) throw ConfigError("toy model: d must be divisible by heads");
  }
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w1;              // d x ffn
  Vector c1;              // ffn
  Matrix w2;              // ffn x d
};

struct ToyWeights {
  Matrix embed;     // vocab x d
  Matrix position;  // seq_len x d
  Vector offset;    // d, added to every token embedding
  std::vector<LayerWeights> layers;
  Matrix head;  // d x num_classes
  Vector head_bias;

  friend bool operator==(const ToyWeights& a, const ToyWeights& b) {
    if (!(a.embed == b.embed && a.position == b.position && a.offset == b.offset && a.head == b.head &&
          a.head_bias == b.head_bias && a.layers.size() == b.layers.size()))
      return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& x = a.layers[i];
      const auto& y = b.layers[i];
      if (!(x.wq == y.wq && x.wk == y.wk && x.wv == y.wv && x.wo == y.wo && x.w1 == y.w1 && x.c1 == y.c1 &&
            x.w2 == y.w2))
        return false;
    }
    return true;
  }
};

struct Example {
  std::vector<std::uint32_t> tokens;
  std::uint32_t label = 0;
};

namespace detail {

constexpr double kLnEps = 1e-5;

struct LnCache {
  Matrix y;
  Vector rstd;
};

inline LnCache layer_norm(const Matrix& x) {
  LnCache c{Matrix(x.rows(), x.cols()), Vector(x.rows())};
  const double inv = 1.0 / static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    double mean = 0.0;
    for (double v : xi) mean += v;
    mean *= inv;
    double var = 0.0;
    for (double v : xi) var += (v - mean) * (v - mean);
    var *= inv;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    c.rstd[i] = rstd;
    auto yi = c.y.row(i);
    for (std::size_t j = 0; j < xi.size(); ++j) yi[j] = (xi[j] - mean) * rstd;
  }
  return c;
}

// dx = rstd (dy - mean(dy) - y mean(dy y)), accumulated into dx.
inline void layer_norm_backward(const LnCache& c, const Matrix& dy, Matrix& dx) {
  const double inv = 1.0 / static_cast<double>(dy.cols());
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto g = dy.row(i);
    auto y = c.y.row(i);
    double mg = 0.0, mgy = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      mg += g[j];
      mgy += g[j] * y[j];
    }
    mg *= inv;
    mgy *= inv;
    auto out = dx.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) out[j] += c.rstd[i] * (g[j] - mg - y[j] * mgy);
  }
}

struct LayerCache {
  LnCache ln1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix attn_out;            // concatenated heads, T x d
  LnCache ln2;
  Matrix act;  // tanh(F W1 + c1), T x ffn
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  LnCache final_ln;
  Vector pooled;
  Vector logits;
};

inline Vector softmax(std::span<const double> z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  Vector p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace detail

class ToyModel {
 public:
  explicit ToyModel(ToyModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const double dd = static_cast<double>(cfg_.d);
    std::uint64_t k = 0;
    auto next = [&] { return derive_seed(cfg_.seed, k++); };
    w_.embed = gaussian_matrix(next(), cfg_.vocab, cfg_.d, 1.0);
    for (std::size_t c = 0; c < cfg_.num_classes; ++c)
      for (double& x : w_.embed.row(c)) x *= cfg_.marker_scale;
    w_.position = gaussian_matrix(next(), cfg_.seq_len, cfg_.d, 0.25);
    w_.offset = gaussian_vector(next(), cfg_.d, 1.0);
    for (double& x : w_.offset) x *= cfg_.embed_offset;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerWeights lw;
      lw.wq = gaussian_matrix(next(), cfg_.d, cfg_.d, 1.0 / dd);
      lw.wk = gaussian_matrix(next(), cfg_.d, cfg_.d, 1.0 / dd);
      lw.wv = gaussian_matrix(next(), cfg_.d, cfg_.d, 1.0 / dd);
      lw.wo = gaussian_matrix(next(), cfg_.d, cfg_.d, 1.0 / dd);
      lw.w1 = gaussian_matrix(next(), cfg_.d, cfg_.ffn, 1.0 / dd);
      lw.c1 = gaussian_vector(next(), cfg_.ffn, 0.01);
      lw.w2 = gaussian_matrix(next(), cfg_.ffn, cfg_.d, 1.0 / static_cast<double>(cfg_.ffn));
      w_.layers.push_back(std::move(lw));
    }
    w_.head = gaussian_matrix(next(), cfg_.d, cfg_.num_classes, 1.0 / dd);
    w_.head_bias.assign(cfg_.num_classes, 0.0);
  }

  const ToyModelConfig& config() const { return cfg_; }
  const ToyWeights& weights() const { return w_; }

  // Token embeddings (with position and offset) of one example, seq_len x d.
  Matrix embed(std::span<const std::uint32_t> tokens) const {
    if (tokens.size() != cfg_.seq_len) throw DimensionError("toy model: wrong sequence length");
    Matrix out(tokens.size(), cfg_.d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] >= cfg_.vocab) throw DomainError("toy model: token out of range");
      auto row = out.row(i);
      for (std::size_t j = 0; j < cfg_.d; ++j)
        row[j] = w_.embed(tokens[i], j) + w_.position(i, j) + w_.offset[j];
    }
    return out;
  }

  // Class logits for an assembled input (prompt rows then token rows).
  Vector logits(const Matrix& input) const {
    detail::ForwardCache cache;
    run_forward(input, cache);
    return cache.logits;
  }

  // Cross-entropy of `label` and its gradient with respect to every input row.
  double loss_and_input_grad(const Matrix& input, std::uint32_t label, Matrix& d_input) const {
    detail::ForwardCache cache;
    const Matrix h = run_forward(input, cache);
    const Vector p = detail::softmax(cache.logits);
    const double loss = -std::log(p[label]);

    Vector dlogits = p;
    dlogits[label] -= 1.0;
    d_input = run_backward(h, cache, dlogits);
    return loss;
  }

 private:
  Matrix run_forward(const Matrix& input, detail::ForwardCache& cache) const {
    if (input.cols() != cfg_.d) throw DimensionError("toy model: input width != d");
    const std::size_t T = input.rows();
    const std::size_t dh = cfg_.d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix h = input;
    cache.layers.clear();
    for (const auto& lw : w_.layers) {
      detail::LayerCache lc;
      lc.ln1 = detail::layer_norm(h);
      lc.q = matmul(lc.ln1.y, lw.wq);
      lc.k = matmul(lc.ln1.y, lw.wk);
      lc.v = matmul(lc.ln1.y, lw.wv);
      lc.attn_out = Matrix(T, cfg_.d);
      for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
        const std::size_t off = hd * dh;
        Matrix probs(T, T);
        Vector srow(T);
        for (std::size_t i = 0; i < T; ++i) {
          for (std::size_t j = 0; j < T; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += lc.q(i, off + c) * lc.k(j, off + c);
            srow[j] = acc * scale;
          }
          const Vector p = detail::softmax(srow);
          for (std::size_t j = 0; j < T; ++j) {
            probs(i, j) = p[j];
            for (std::size_t c = 0; c < dh; ++c) lc.attn_out(i, off + c) += p[j] * lc.v(j, off + c);
          }
        }
        lc.probs.push_back(std::move(probs));
      }
      h = h + matmul(lc.attn_out, lw.wo);

      lc.ln2 = detail::layer_norm(h);
      lc.act = matmul(lc.ln2.y, lw.w1);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < cfg_.ffn; ++j) lc.act(i, j) = std::tanh(lc.act(i, j) + lw.c1[j]);
      h = h + matmul(lc.act, lw.w2);
      cache.layers.push_back(std::move(lc));
    }

    cache.final_ln = detail::layer_norm(h);
    cache.pooled.assign(cfg_.d, 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < cfg_.d; ++j) cache.pooled[j] += cache.final_ln.y(i, j);
    for (double& x : cache.pooled) x /= static_cast<double>(T);
    cache.logits = w_.head_bias;
    for (std::size_t j = 0; j < cfg_.d; ++j)
      for (std::size_t c = 0; c < cfg_.num_classes; ++c) cache.logits[c] += cache.pooled[j] * w_.head(j, c);
    return h;
  }

  Matrix run_backward(const Matrix& h_final, const detail::ForwardCache& cache, const Vector& dlogits) const {
    const std::size_t T = h_final.rows();
    const std::size_t dh = cfg_.d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dy(T, cfg_.d);
    for (std::size_t j = 0; j < cfg_.d; ++j) {
      double g = 0.0;
      for (std::size_t c = 0; c < cfg_.num_classes; ++c) g += w_.head(j, c) * dlogits[c];
      g /= static_cast<double>(T);
      for (std::size_t i = 0; i < T; ++i) dy(i, j) = g;
    }
    Matrix dh_res(T, cfg_.d);
    detail::layer_norm_backward(cache.final_ln, dy, dh_res);

    for (std::size_t l = w_.layers.size(); l-- > 0;) {
      const auto& lw = w_.layers[l];
      const auto& lc = cache.layers[l];

      // FFN branch
      Matrix du = matmul_nt(dh_res, lw.w2);  // d act
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < cfg_.ffn; ++j) du(i, j) *= 1.0 - lc.act(i, j) * lc.act(i, j);
      const Matrix dln2 = matmul_nt(du, lw.w1);
      detail::layer_norm_backward(lc.ln2, dln2, dh_res);

      // attention branch
      const Matrix dattn = matmul_nt(dh_res, lw.wo);
      Matrix dq(T, cfg_.d), dk(T, cfg_.d), dv(T, cfg_.d);
      Vector dp(T);
      for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
        const std::size_t off = hd * dh;
        const Matrix& probs = lc.probs[hd];
        for (std::size_t i = 0; i < T; ++i) {
          double weighted = 0.0;
          for (std::size_t j = 0; j < T; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += dattn(i, off + c) * lc.v(j, off + c);
            dp[j] = acc;
            weighted += acc * probs(i, j);
          }
          for (std::size_t j = 0; j < T; ++j) {
            const double pij = probs(i, j);
            const double ds = pij * (dp[j] - weighted) * scale;
            for (std::size_t c = 0; c < dh; ++c) {
              dv(j, off + c) += pij * dattn(i, off + c);
              dq(i, off + c) += ds * lc.k(j, off + c);
              dk(j, off + c) += ds * lc.q(i, off + c);
            }
          }
        }
      }
      Matrix dln1 = matmul_nt(dq, lw.wq);
      dln1 = dln1 + matmul_nt(dk, lw.wk);
      dln1 = dln1 + matmul_nt(dv, lw.wv);
      detail::layer_norm_backward(lc.ln1, dln1, dh_res);
    }
    return dh_res;
  }

  ToyModelConfig cfg_;
  ToyWeights w_;
};

// Sequences of filler tokens from [num_classes, vocab) with one marker token
// equal to the label planted at a uniformly random position. Labels cycle
// through the classes so every split is balanced.
inline std::vector<Example> make_dataset(const ToyModelConfig& cfg, std::size_t count, Seed seed) {
  cfg.validate();
  Rng rng(seed);
  std::vector<Example> out(count);
  for (std::size_t e = 0; e < count; ++e) {
    Example& ex = out[e];
    ex.label = static_cast<std::uint32_t>(e % cfg.num_classes);
    ex.tokens.resize(cfg.seq_len);
    for (auto& t : ex.tokens)
      t = static_cast<std::uint32_t>(cfg.num_classes + rng.below(cfg.vocab - cfg.num_classes));
    ex.tokens[rng.below(cfg.seq_len)] = ex.label;
  }
  return out;
}

}  // namespace ulpt::toy
