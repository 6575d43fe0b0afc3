#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coe/error.hpp"
#include "coe/rng.hpp"

namespace coe {

struct PromptLayout;

struct PolicyConfig {
  int vocab = 0;
  int d_model = 32;
  int heads = 2;
  int layers = 2;
  int context = 256;
  int ffn_mult = 4;
  double init_scale = 1.0;

  void validate() const {
    if (vocab < 1) throw Error(ErrorKind::kConfigError, "policy vocab must be >= 1");
    if (d_model < 1 || heads < 1 || d_model % heads != 0) {
      throw Error(ErrorKind::kConfigError, "d_model must be a positive multiple of heads");
    }
    if (layers < 1 || context < 2 || ffn_mult < 1) throw Error(ErrorKind::kConfigError, "bad policy shape");
  }
  int head_dim() const { return d_model / heads; }
  int ffn_dim() const { return d_model * ffn_mult; }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// One attention block followed by a GELU feed-forward block, both residual
/// and each behind a layer norm. Gains and biases are stored as 1 x n
/// matrices so every tensor has the same type.
template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> ln1_g, ln1_b, wq, wk, wv, wo;
  Matrix<Scalar> ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Parameters of the causal-attention policy. A zero-initialized instance
/// with the same config doubles as the gradient buffer.
template <typename Scalar>
struct PolicyParamsT {
  PolicyConfig config;
  Matrix<Scalar> token_embedding;     // vocab x d
  Matrix<Scalar> position_embedding;  // context x d
  std::vector<LayerParams<Scalar>> layers;
  Matrix<Scalar> lnf_g, lnf_b;  // 1 x d
  Matrix<Scalar> w_out;  // d x vocab
  Matrix<Scalar> b_out;  // 1 x vocab

  static PolicyParamsT zeros(const PolicyConfig& c) {
    c.validate();
    PolicyParamsT p;
    p.config = c;
    const int d = c.d_model, f = c.ffn_dim();
    p.token_embedding = Matrix<Scalar>::Zero(c.vocab, d);
    p.position_embedding = Matrix<Scalar>::Zero(c.context, d);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& l : p.layers) {
      l.ln1_g = l.ln1_b = l.ln2_g = l.ln2_b = Matrix<Scalar>::Zero(1, d);
      l.wq = l.wk = l.wv = l.wo = Matrix<Scalar>::Zero(d, d);
      l.w1 = Matrix<Scalar>::Zero(d, f);
      l.b1 = Matrix<Scalar>::Zero(1, f);
      l.w2 = Matrix<Scalar>::Zero(f, d);
      l.b2 = Matrix<Scalar>::Zero(1, d);
    }
    p.lnf_g = p.lnf_b = Matrix<Scalar>::Zero(1, d);
    p.w_out = Matrix<Scalar>::Zero(d, c.vocab);
    p.b_out = Matrix<Scalar>::Zero(1, c.vocab);
    return p;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  void set_zero() {
    for_each_tensor([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  }

  /// this += scale * other (shapes must match).
  void add_scaled(const PolicyParamsT& other, Scalar scale) {
    std::vector<const Matrix<Scalar>*> src;
    other.for_each_tensor([&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    for_each_tensor([&](const std::string&, Matrix<Scalar>& m) { m += scale * *src[i++]; });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const Matrix<Scalar>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  /// FNV-1a over the raw parameter bytes; used to assert the reference
  /// policy stays frozen.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each_tensor([&](const std::string&, const Matrix<Scalar>& m) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(Scalar); ++i) {
        h = (h ^ bytes[i]) * 0x100000001b3ULL;
      }
    });
    return h;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f("token_embedding", self.token_embedding);
    f("position_embedding", self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      f(p + "ln1_g", l.ln1_g);
      f(p + "ln1_b", l.ln1_b);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "ln2_g", l.ln2_g);
      f(p + "ln2_b", l.ln2_b);
      f(p + "w1", l.w1);
      f(p + "b1", l.b1);
      f(p + "w2", l.w2);
      f(p + "b2", l.b2);
    }
    f("lnf_g", self.lnf_g);
    f("lnf_b", self.lnf_b);
    f("w_out", self.w_out);
    f("b_out", self.b_out);
  }
};

using PolicyParams = PolicyParamsT<double>;
using GradientBuffer = PolicyParamsT<double>;

template <typename Scalar>
PolicyParamsT<Scalar> init_params(const PolicyConfig& c, std::uint64_t seed) {
  auto p = PolicyParamsT<Scalar>::zeros(c);
  Rng rng(derive_seed(seed, 0x1417ULL));
  auto fill = [&](Matrix<Scalar>& m, double std) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(std * rng.normal());
    }
  };
  const double s = c.init_scale;
  const double proj = s / std::sqrt(static_cast<double>(c.d_model));
  const double resid = proj / std::sqrt(2.0 * c.layers);
  fill(p.token_embedding, 0.3 * s);
  fill(p.position_embedding, 0.3 * s);
  for (auto& l : p.layers) {
    l.ln1_g.setOnes();
    l.ln2_g.setOnes();
    fill(l.wq, proj);
    fill(l.wk, proj);
    fill(l.wv, proj);
    fill(l.wo, resid);
    fill(l.w1, proj);
    fill(l.w2, resid / std::sqrt(static_cast<double>(c.ffn_mult)));
  }
  p.lnf_g.setOnes();
  fill(p.w_out, 0.3 * proj);
  return p;
}

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename Scalar>
Scalar gelu(Scalar x) {
  using std::tanh;
  return Scalar(0.5) * x * (Scalar(1) + tanh(Scalar(kGeluC) * (x + Scalar(kGeluA) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  using std::tanh;
  const Scalar t = tanh(Scalar(kGeluC) * (x + Scalar(kGeluA) * x * x * x));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * Scalar(kGeluC) * (Scalar(1) + Scalar(3 * kGeluA) * x * x);
}

}  // namespace detail

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm. Keeps the normalized rows and reciprocal standard
/// deviations for the backward pass.
template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> hat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& g, const Matrix<Scalar>& b,
                          LayerNormCache<Scalar>& cache) {
  const Scalar n = Scalar(x.cols());
  const auto mean = (x.rowwise().sum() / n).eval();
  cache.hat = x.colwise() - mean;
  cache.rstd = ((cache.hat.array().square().rowwise().sum() / n) + Scalar(kLayerNormEps)).rsqrt().matrix();
  cache.hat = cache.rstd.asDiagonal() * cache.hat;
  Matrix<Scalar> y = cache.hat * g.row(0).asDiagonal();
  y.rowwise() += b.row(0);
  return y;
}

/// Given dLoss/dy, accumulates the gain and bias gradients and returns dLoss/dx.
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& g, const LayerNormCache<Scalar>& cache,
                                   Matrix<Scalar>& dg, Matrix<Scalar>& db) {
  const Scalar n = Scalar(dy.cols());
  dg += dy.cwiseProduct(cache.hat).colwise().sum();
  db += dy.colwise().sum();
  const Matrix<Scalar> dhat = dy * g.row(0).asDiagonal();
  const auto m1 = (dhat.rowwise().sum() / n).eval();
  const auto m2 = (dhat.cwiseProduct(cache.hat).rowwise().sum() / n).eval();
  Matrix<Scalar> dx = dhat.colwise() - m1;
  dx -= cache.hat.cwiseProduct(m2.replicate(1, dy.cols()));
  return cache.rstd.asDiagonal() * dx;
}

/// Key j is visible to query i iff j <= i, and padding keys are hidden from
/// non-padding queries.
inline bool attention_visible(std::span<const char> is_pad, int query, int key) {
  if (key > query) return false;
  return !(is_pad[static_cast<std::size_t>(key)] && !is_pad[static_cast<std::size_t>(query)]);
}

template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> a, q, k, v, ctx, f, h_pre, h_act;  // a, f: normed inputs of the two blocks
  LayerNormCache<Scalar> ln1, ln2;
  std::vector<Matrix<Scalar>> attn;  // per head, T x T, rows sum to 1
};

template <typename Scalar>
struct ForwardCache {
  std::vector<int> tokens;
  std::vector<char> is_pad;
  std::vector<LayerCache<Scalar>> layers;
  Matrix<Scalar> z;  // final normed residual stream
  LayerNormCache<Scalar> lnf;
  Matrix<Scalar> logits;  // T x vocab; row t predicts token t+1
};

/// Causal forward pass. `pad_token` < 0 disables padding masks.
template <typename Scalar>
ForwardCache<Scalar> forward(const PolicyParamsT<Scalar>& p, std::span<const int> tokens, int pad_token = 0) {
  const auto& c = p.config;
  const int T = static_cast<int>(tokens.size());
  if (T > c.context) throw Error(ErrorKind::kContextOverflow, std::to_string(T) + " tokens > context " + std::to_string(c.context));
  if (T == 0) throw Error(ErrorKind::kInvariantViolation, "empty token sequence");
  ForwardCache<Scalar> fc;
  fc.tokens.assign(tokens.begin(), tokens.end());
  fc.is_pad.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= c.vocab) throw Error(ErrorKind::kInvariantViolation, "token id out of range");
    fc.is_pad[static_cast<std::size_t>(t)] = (pad_token >= 0 && tok == pad_token) ? 1 : 0;
  }

  const int d = c.d_model, dh = c.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  Matrix<Scalar> x(T, d);
  for (int t = 0; t < T; ++t) {
    x.row(t) = p.token_embedding.row(tokens[static_cast<std::size_t>(t)]) + p.position_embedding.row(t);
  }

  fc.layers.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    auto& lc = fc.layers[li];
    lc.a = layer_norm(x, L.ln1_g, L.ln1_b, lc.ln1);
    lc.q.noalias() = lc.a * L.wq;
    lc.k.noalias() = lc.a * L.wk;
    lc.v.noalias() = lc.a * L.wv;
    lc.ctx.setZero(T, d);
    lc.attn.resize(static_cast<std::size_t>(c.heads));
    for (int h = 0; h < c.heads; ++h) {
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      // column i holds the scores of query i, so the softmax runs over contiguous memory
      Matrix<Scalar> S;
      S.noalias() = (kh * qh.transpose()) * scale;
      for (int i = 0; i < T; ++i) {
        auto col = S.col(i);
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (int j = 0; j <= i; ++j) {
          if (attention_visible(fc.is_pad, i, j)) mx = std::max(mx, col(j));
        }
        col.head(i + 1) = (col.head(i + 1).array() - mx).exp().matrix();
        for (int j = 0; j <= i; ++j) {
          if (!attention_visible(fc.is_pad, i, j)) col(j) = 0;
        }
        col.tail(T - i - 1).setZero();
        col /= col.sum();
      }
      Matrix<Scalar>& A = lc.attn[static_cast<std::size_t>(h)];
      A = S.transpose();
      lc.ctx.middleCols(h * dh, dh).noalias() = A * vh;
    }
    x.noalias() += lc.ctx * L.wo;
    lc.f = layer_norm(x, L.ln2_g, L.ln2_b, lc.ln2);
    lc.h_pre = lc.f * L.w1;
    lc.h_pre.rowwise() += L.b1.row(0);
    lc.h_act = lc.h_pre.unaryExpr([](Scalar v) { return detail::gelu(v); });
    x.noalias() += lc.h_act * L.w2;
    x.rowwise() += L.b2.row(0);
  }
  fc.z = layer_norm(x, p.lnf_g, p.lnf_b, fc.lnf);
  fc.logits.noalias() = fc.z * p.w_out;
  fc.logits.rowwise() += p.b_out.row(0);
  return fc;
}

/// Reverse-mode gradient of a scalar loss given dLoss/dlogits (T x vocab).
/// Accumulates into `grad` (which must have the params' shapes).
template <typename Scalar>
void backward(const PolicyParamsT<Scalar>& p, const ForwardCache<Scalar>& fc, const Matrix<Scalar>& dlogits,
              PolicyParamsT<Scalar>& grad) {
  const auto& c = p.config;
  const int T = static_cast<int>(fc.tokens.size());
  if (dlogits.rows() != T || dlogits.cols() != c.vocab) throw Error(ErrorKind::kInvariantViolation, "dlogits shape");
  if (!dlogits.allFinite()) throw Error(ErrorKind::kNonFiniteLoss, "non-finite loss gradient");
  const int dh = c.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

  grad.w_out.noalias() += fc.z.transpose() * dlogits;
  grad.b_out += dlogits.colwise().sum();
  Matrix<Scalar> dx = layer_norm_backward<Scalar>(dlogits * p.w_out.transpose(), p.lnf_g, fc.lnf, grad.lnf_g, grad.lnf_b);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = grad.layers[li];
    const auto& lc = fc.layers[li];

    // feed-forward
    G.w2.noalias() += lc.h_act.transpose() * dx;
    G.b2 += dx.colwise().sum();
    Matrix<Scalar> dh_pre = (dx * L.w2.transpose()).cwiseProduct(lc.h_pre.unaryExpr([](Scalar v) { return detail::gelu_grad(v); }));
    G.w1.noalias() += lc.f.transpose() * dh_pre;
    G.b1 += dh_pre.colwise().sum();
    const Matrix<Scalar> df = dh_pre * L.w1.transpose();
    const Matrix<Scalar> dx_mid = dx + layer_norm_backward(df, L.ln2_g, lc.ln2, G.ln2_g, G.ln2_b);

    // attention
    G.wo.noalias() += lc.ctx.transpose() * dx_mid;
    const Matrix<Scalar> dctx = dx_mid * L.wo.transpose();
    Matrix<Scalar> dq(T, c.d_model), dk(T, c.d_model), dv(T, c.d_model);
    for (int h = 0; h < c.heads; ++h) {
      const Matrix<Scalar>& A = lc.attn[static_cast<std::size_t>(h)];
      auto dctx_h = dctx.middleCols(h * dh, dh);
      Matrix<Scalar> dA = dctx_h * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = A.transpose() * dctx_h;
      const auto row_dot = (dA.cwiseProduct(A)).rowwise().sum();
      Matrix<Scalar> dS = A.cwiseProduct(dA.colwise() - row_dot) * scale;
      dq.middleCols(h * dh, dh).noalias() = dS * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * lc.q.middleCols(h * dh, dh);
    }
    G.wq.noalias() += lc.a.transpose() * dq;
    G.wk.noalias() += lc.a.transpose() * dk;
    G.wv.noalias() += lc.a.transpose() * dv;
    Matrix<Scalar> da = dq * L.wq.transpose();
    da.noalias() += dk * L.wk.transpose();
    da.noalias() += dv * L.wv.transpose();
    dx = dx_mid + layer_norm_backward(da, L.ln1_g, lc.ln1, G.ln1_g, G.ln1_b);
  }

  for (int t = 0; t < T; ++t) {
    grad.token_embedding.row(fc.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    grad.position_embedding.row(t) += dx.row(t);
  }
}

/// Row-wise log-softmax.
template <typename Scalar>
RowVector<Scalar> log_softmax(const Eigen::Ref<const RowVector<Scalar>>& z) {
  const Scalar mx = z.maxCoeff();
  const Scalar lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

/// Incremental decoder with a key/value cache, for autoregressive sampling.
template <typename Scalar>
class Decoder {
 public:
  Decoder(const PolicyParamsT<Scalar>& params, int pad_token) : p_(&params), pad_token_(pad_token) {
    const auto& c = params.config;
    keys_.assign(params.layers.size(), Matrix<Scalar>(c.context, c.d_model));
    values_.assign(params.layers.size(), Matrix<Scalar>(c.context, c.d_model));
  }

  int length() const { return len_; }

  /// Appends one token and returns the next-token logits.
  RowVector<Scalar> step(int token) {
    const auto& p = *p_;
    const auto& c = p.config;
    if (len_ >= c.context) throw Error(ErrorKind::kContextOverflow, "decoder context exhausted");
    if (token < 0 || token >= c.vocab) throw Error(ErrorKind::kInvariantViolation, "token id out of range");
    is_pad_.push_back((pad_token_ >= 0 && token == pad_token_) ? 1 : 0);
    const int t = len_++;
    const int dh = c.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    Matrix<Scalar> x = p.token_embedding.row(token) + p.position_embedding.row(t);
    RowVector<Scalar> weights(t + 1);
    LayerNormCache<Scalar> scratch;
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
      const auto& L = p.layers[li];
      const Matrix<Scalar> a = layer_norm(x, L.ln1_g, L.ln1_b, scratch);
      const RowVector<Scalar> q = a * L.wq;
      keys_[li].row(t).noalias() = a * L.wk;
      values_[li].row(t).noalias() = a * L.wv;
      RowVector<Scalar> ctx(c.d_model);
      for (int h = 0; h < c.heads; ++h) {
        weights.noalias() = (q.middleCols(h * dh, dh) * keys_[li].block(0, h * dh, t + 1, dh).transpose()) * scale;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (int j = 0; j <= t; ++j) {
          if (attention_visible(is_pad_, t, j)) mx = std::max(mx, weights(j));
        }
        Scalar sum = 0;
        for (int j = 0; j <= t; ++j) {
          weights(j) = attention_visible(is_pad_, t, j) ? std::exp(weights(j) - mx) : Scalar(0);
          sum += weights(j);
        }
        weights /= sum;
        ctx.middleCols(h * dh, dh).noalias() = weights * values_[li].block(0, h * dh, t + 1, dh);
      }
      x.noalias() += ctx * L.wo;
      const Matrix<Scalar> f = layer_norm(x, L.ln2_g, L.ln2_b, scratch);
      RowVector<Scalar> h_pre = f * L.w1 + L.b1;
      x.noalias() += h_pre.unaryExpr([](Scalar v) { return detail::gelu(v); }) * L.w2;
      x += L.b2;
    }
    return layer_norm(x, p.lnf_g, p.lnf_b, scratch) * p.w_out + p.b_out;
  }

 private:
  const PolicyParamsT<Scalar>* p_;
  int pad_token_;
  int len_ = 0;
  std::vector<char> is_pad_;
  std::vector<Matrix<Scalar>> keys_, values_;
};

/// Categorical draw from softmax(logits / temperature); temperature 0 is argmax.
template <typename Scalar>
int sample_token(const RowVector<Scalar>& logits, double temperature, Rng& rng) {
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  if (temperature == 0.0) return static_cast<int>(best);
  const Scalar mx = logits(best);
  RowVector<Scalar> w = ((logits.array() - mx) / Scalar(temperature)).exp().matrix();
  double u = rng.uniform() * static_cast<double>(w.sum());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    u -= static_cast<double>(w(i));
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(best);
}

/// Sampling controls for `sample_completion`.
struct SampleOptions {
  double temperature = 1.0;
  int max_new = 64;
  int stop_token = -1;
  int pad_token = 0;
};

/// Autoregressive sampling; stops after `stop_token` or `max_new` tokens.
/// Deterministic in (params, prompt, options, seed).
template <typename Scalar>
std::vector<int> sample_completion(const PolicyParamsT<Scalar>& params, std::span<const int> prompt,
                                   const SampleOptions& opt, std::uint64_t seed) {
  if (!(opt.temperature >= 0.0)) throw Error(ErrorKind::kInvariantViolation, "temperature must be >= 0");
  if (prompt.empty()) throw Error(ErrorKind::kInvariantViolation, "empty prompt");
  if (static_cast<int>(prompt.size()) + opt.max_new > params.config.context) {
    throw Error(ErrorKind::kContextOverflow, "prompt + max_new exceeds context");
  }
  Decoder<Scalar> dec(params, opt.pad_token);
  RowVector<Scalar> logits;
  for (int tok : prompt) logits = dec.step(tok);
  Rng rng(seed);
  std::vector<int> out;
  for (int i = 0; i < opt.max_new; ++i) {
    const int tok = sample_token<Scalar>(logits, opt.temperature, rng);
    out.push_back(tok);
    if (tok == opt.stop_token || i + 1 == opt.max_new) break;
    logits = dec.step(tok);
  }
  return out;
}

/// Samples `seeds.size()` completions sharing one prompt prefill. When
/// `log_probs` is given it receives log pi(token) under the untempered
/// policy for every sampled token.
template <typename Scalar>
std::vector<std::vector<int>> sample_group(const PolicyParamsT<Scalar>& params, std::span<const int> prompt,
                                           const SampleOptions& opt, std::span<const std::uint64_t> seeds,
                                           std::vector<std::vector<Scalar>>* log_probs = nullptr) {
  if (!(opt.temperature >= 0.0)) throw Error(ErrorKind::kInvariantViolation, "temperature must be >= 0");
  if (prompt.empty()) throw Error(ErrorKind::kInvariantViolation, "empty prompt");
  if (static_cast<int>(prompt.size()) + opt.max_new > params.config.context) {
    throw Error(ErrorKind::kContextOverflow, "prompt + max_new exceeds context");
  }
  Decoder<Scalar> base(params, opt.pad_token);
  RowVector<Scalar> first;
  for (int tok : prompt) first = base.step(tok);
  std::vector<std::vector<int>> out;
  if (log_probs) log_probs->clear();
  for (std::uint64_t seed : seeds) {
    Decoder<Scalar> dec = base;
    RowVector<Scalar> logits = first;
    Rng rng(seed);
    std::vector<int> completion;
    std::vector<Scalar> lps;
    for (int i = 0; i < opt.max_new; ++i) {
      const int tok = sample_token<Scalar>(logits, opt.temperature, rng);
      completion.push_back(tok);
      if (log_probs) lps.push_back(log_softmax<Scalar>(logits)(tok));
      if (tok == opt.stop_token || i + 1 == opt.max_new) break;
      logits = dec.step(tok);
    }
    out.push_back(std::move(completion));
    if (log_probs) log_probs->push_back(std::move(lps));
  }
  return out;
}

template <typename Scalar>
std::vector<int> concat_tokens(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// log pi(completion_t | prompt, completion_<t) for every completion token.
template <typename Scalar>
std::vector<Scalar> per_token_log_probs(const PolicyParamsT<Scalar>& params, std::span<const int> prompt,
                                        std::span<const int> completion, int pad_token = 0) {
  if (prompt.empty()) throw Error(ErrorKind::kInvariantViolation, "empty prompt");
  const auto seq = concat_tokens<Scalar>(prompt, completion);
  const auto fc = forward(params, seq, pad_token);
  std::vector<Scalar> out;
  const int P = static_cast<int>(prompt.size());
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const int row = P - 1 + static_cast<int>(i);
    out.push_back(log_softmax<Scalar>(fc.logits.row(row))(completion[i]));
  }
  return out;
}

/// Exact categorical KL(p || q) between two logit rows.
template <typename Scalar>
Scalar categorical_kl(const RowVector<Scalar>& logits_p, const RowVector<Scalar>& logits_q) {
  const RowVector<Scalar> lp = log_softmax<Scalar>(logits_p);
  const RowVector<Scalar> lq = log_softmax<Scalar>(logits_q);
  const Scalar kl = (lp.array().exp() * (lp - lq).array()).sum();
  return kl < Scalar(0) ? Scalar(0) : kl;
}

/// Mean over completion positions of KL(pi_a || pi_b) for the next-token
/// distributions. Empty completion -> 0.
template <typename Scalar>
Scalar exact_kl(const PolicyParamsT<Scalar>& a, const PolicyParamsT<Scalar>& b, std::span<const int> prompt,
                std::span<const int> completion, int pad_token = 0) {
  if (completion.empty()) return Scalar(0);
  const auto seq = concat_tokens<Scalar>(prompt, completion);
  const auto fa = forward(a, seq, pad_token);
  const auto fb = forward(b, seq, pad_token);
  const int P = static_cast<int>(prompt.size());
  Scalar total = 0;
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const int row = P - 1 + static_cast<int>(i);
    total += categorical_kl<Scalar>(fa.logits.row(row), fb.logits.row(row));
  }
  return total / Scalar(completion.size());
}

/// Attention mass that option-segment queries place on each prompt segment,
/// averaged over layers, heads and option positions.
struct AttentionMasses {
  double visual = 0.0;
  double question = 0.0;
  double option = 0.0;
};

/// Averages the given attention rows (one T x T matrix per layer/head) over
/// option-segment queries. Throws kEmptyOptionSegment when there are none.
AttentionMasses aggregate_option_attention(const std::vector<Eigen::MatrixXd>& attention, const PromptLayout& layout);

AttentionMasses attention_profile(const PolicyParams& params, const PromptLayout& layout, int pad_token = 0);

/// Loss value and dLoss/dlogits for next-token cross-entropy averaged over
/// the rows listed in `target_rows` (row t is scored against token t+1).
struct CrossEntropyResult {
  double loss = 0.0;
  Eigen::MatrixXd dlogits;
};
CrossEntropyResult cross_entropy(const ForwardCache<double>& fc, std::span<const int> target_rows, double weight);

void save_checkpoint(const PolicyParams& params, const std::string& path);
PolicyParams load_checkpoint(const std::string& path);

/// Shape manifest: config plus one {name, rows, cols} entry per tensor.
std::string shape_manifest_json(const PolicyParams& params);

extern template struct PolicyParamsT<double>;
extern template ForwardCache<double> forward(const PolicyParamsT<double>&, std::span<const int>, int);
extern template void backward(const PolicyParamsT<double>&, const ForwardCache<double>&, const Matrix<double>&,
                              PolicyParamsT<double>&);

}  // namespace coe
