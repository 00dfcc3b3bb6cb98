#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/token_streams.hpp"
#include "pslm/vocab.hpp"

namespace pslm {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_size = 128;
  std::size_t max_context = 2048;
  // 0 selects the single-stream baseline over the union vocabulary.
  std::size_t num_speech_streams = 1;
  VocabSpec vocab;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  void validate() const {
    vocab.validate();
    detail::require(hidden_size > 0 && num_heads > 0, "hidden_size and num_heads must be positive");
    detail::require(hidden_size % num_heads == 0, "hidden_size must be divisible by num_heads");
    detail::require(ffn_size > 0, "ffn_size must be positive");
    detail::require(max_context >= 1, "max_context must be >= 1");
    detail::require(init_std > 0.0, "init_std must be positive");
  }

  bool single_stream() const { return num_speech_streams == 0; }

  // Vocabulary of the text stream (the union space in single-stream mode).
  std::size_t text_stream_vocab() const {
    return single_stream() ? static_cast<std::size_t>(vocab.union_vocab_size())
                           : static_cast<std::size_t>(vocab.text_vocab_size);
  }
  std::size_t speech_vocab() const { return static_cast<std::size_t>(vocab.speech_vocab_size); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
  std::string name;
  // Parameter group: "trunk", "text_embedding", "speech_embedding.<s>",
  // "text_head", "speech_head.<s>".
  std::string group;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Offsets of every tensor in the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_gain, ln1_bias;
    std::size_t wq, bq, wk, wv, bv, wo, bo;
    std::size_t ln2_gain, ln2_bias;
    std::size_t w1, b1, w2, b2;
  };

  std::vector<TensorInfo> tensors;
  std::size_t total = 0;

  std::size_t text_embedding = 0;
  std::vector<std::size_t> speech_embedding;
  std::vector<Layer> layers;
  std::size_t final_gain = 0, final_bias = 0;
  std::size_t text_head_w = 0, text_head_b = 0;
  std::vector<std::size_t> speech_head_w, speech_head_b;

  explicit ParamLayout(const ModelConfig& cfg) {
    const std::size_t d = cfg.hidden_size, f = cfg.ffn_size;
    const std::size_t vt = cfg.text_stream_vocab(), vs = cfg.speech_vocab();
    const std::size_t S = cfg.num_speech_streams;

    text_embedding = add("text_embedding", "text_embedding", vt, d);
    for (std::size_t s = 0; s < S; ++s)
      speech_embedding.push_back(add("speech_embedding." + std::to_string(s),
                                     "speech_embedding." + std::to_string(s), vs, d));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_gain = add(p + "ln1.gain", "trunk", 1, d);
      L.ln1_bias = add(p + "ln1.bias", "trunk", 1, d);
      L.wq = add(p + "attn.wq", "trunk", d, d);
      L.bq = add(p + "attn.bq", "trunk", 1, d);
      L.wk = add(p + "attn.wk", "trunk", d, d);
      L.wv = add(p + "attn.wv", "trunk", d, d);
      L.bv = add(p + "attn.bv", "trunk", 1, d);
      L.wo = add(p + "attn.wo", "trunk", d, d);
      L.bo = add(p + "attn.bo", "trunk", 1, d);
      L.ln2_gain = add(p + "ln2.gain", "trunk", 1, d);
      L.ln2_bias = add(p + "ln2.bias", "trunk", 1, d);
      L.w1 = add(p + "ffn.w1", "trunk", d, f);
      L.b1 = add(p + "ffn.b1", "trunk", 1, f);
      L.w2 = add(p + "ffn.w2", "trunk", f, d);
      L.b2 = add(p + "ffn.b2", "trunk", 1, d);
      layers.push_back(L);
    }
    final_gain = add("final_ln.gain", "trunk", 1, d);
    final_bias = add("final_ln.bias", "trunk", 1, d);
    text_head_w = add("text_head.w", "text_head", d, vt);
    text_head_b = add("text_head.b", "text_head", 1, vt);
    for (std::size_t s = 0; s < S; ++s) {
      const std::string g = "speech_head." + std::to_string(s);
      speech_head_w.push_back(add(g + ".w", g, d, vs));
      speech_head_b.push_back(add(g + ".b", g, 1, vs));
    }
  }

  const TensorInfo& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw InvalidArgument("no parameter tensor named " + name);
  }

 private:
  std::size_t add(std::string name, std::string group, std::size_t rows, std::size_t cols) {
    tensors.push_back(TensorInfo{std::move(name), std::move(group), total, rows, cols});
    total += rows * cols;
    return tensors.back().offset;
  }
};

template <typename Real>
struct FrameLogits {
  std::vector<Real> text;
  std::vector<std::vector<Real>> speech;
};

namespace kernels {

// y = b + x W, W row-major [in x out].
template <typename Real>
inline void affine_row(const Real* x, const Real* w, const Real* b, Real* y, std::size_t in,
                       std::size_t out) {
  std::copy(b, b + out, y);
  for (std::size_t k = 0; k < in; ++k) {
    const Real a = x[k];
    const Real* wr = w + k * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += a * wr[j];
  }
}

// y = x W. Keys use this: a key bias only shifts every score of a query by
// the same amount and cancels in the softmax.
template <typename Real>
inline void linear_row(const Real* x, const Real* w, Real* y, std::size_t in, std::size_t out) {
  std::fill(y, y + out, Real(0));
  for (std::size_t k = 0; k < in; ++k) {
    const Real a = x[k];
    const Real* wr = w + k * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += a * wr[j];
  }
}

template <typename Real>
constexpr Real kLayerNormEps = Real(1e-5);

template <typename Real>
inline void layer_norm_row(const Real* x, const Real* gain, const Real* bias, Real* xhat, Real* y,
                           Real& rstd, std::size_t d) {
  Real mean = 0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= Real(d);
  Real var = 0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= Real(d);
  rstd = Real(1) / std::sqrt(var + kLayerNormEps<Real>);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * gain[i] + bias[i];
  }
}

template <typename Real>
inline void layer_norm_backward_row(const Real* dy, const Real* xhat, const Real* gain, Real rstd,
                                    Real* dx, Real* dgain, Real* dbias, std::size_t d) {
  Real mean_dxhat = 0, mean_dxhat_xhat = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const Real g = dy[i] * gain[i];
    mean_dxhat += g;
    mean_dxhat_xhat += g * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
  }
  mean_dxhat /= Real(d);
  mean_dxhat_xhat /= Real(d);
  for (std::size_t i = 0; i < d; ++i)
    dx[i] += rstd * (dy[i] * gain[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
}

template <typename Real>
constexpr Real kGeluC = Real(0.7978845608028654);  // sqrt(2/pi)

template <typename Real>
inline Real gelu(Real x) {
  const Real u = kGeluC<Real> * (x + Real(0.044715) * x * x * x);
  return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <typename Real>
inline Real gelu_grad(Real x) {
  const Real u = kGeluC<Real> * (x + Real(0.044715) * x * x * x);
  const Real t = std::tanh(u);
  const Real du = kGeluC<Real> * (Real(1) + Real(3 * 0.044715) * x * x);
  return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
}

// Causal attention for one query row against keys/values at rows 0..t.
// k and v are row-major with row stride d; probs receives H x (t+1) weights.
template <typename Real>
inline void attend_row(const Real* q, const Real* k, const Real* v, std::size_t t, std::size_t d,
                       std::size_t num_heads, Real* out, Real* probs) {
  const std::size_t dh = d / num_heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  const std::size_t n = t + 1;
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Real* qh = q + h * dh;
    Real* p = probs + h * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const Real* kj = k + j * d + h * dh;
      Real s = 0;
      for (std::size_t i = 0; i < dh; ++i) s += qh[i] * kj[i];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    Real sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
    Real* oh = out + h * dh;
    std::fill(oh, oh + dh, Real(0));
    for (std::size_t j = 0; j < n; ++j) {
      const Real* vj = v + j * d + h * dh;
      const Real pj = p[j];
      for (std::size_t i = 0; i < dh; ++i) oh[i] += pj * vj[i];
    }
  }
}

// Fixed sinusoidal position code, added to the summed token embeddings.
template <typename Real>
inline void add_position_encoding(Real* x, std::size_t pos, std::size_t d) {
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    x[i] += static_cast<Real>(std::sin(static_cast<double>(pos) * freq));
    if (i + 1 < d) x[i + 1] += static_cast<Real>(std::cos(static_cast<double>(pos) * freq));
  }
}

}  // namespace kernels

// Token ids of one frame: one text-stream id plus S speech ids.
struct FrameTokens {
  TokenId text = 0;
  std::span<const TokenId> speech;
};

// Activations of a full forward pass, kept for the backward pass.
template <typename Real>
struct ForwardCache {
  struct Layer {
    std::vector<Real> x_in, ln1_xhat, ln1_out, ln1_rstd;
    std::vector<Real> q, k, v;
    std::vector<std::vector<Real>> probs;  // per row t: H x (t+1)
    std::vector<Real> attn, x_mid;
    std::vector<Real> ln2_xhat, ln2_out, ln2_rstd;
    std::vector<Real> ffn_pre, ffn_act;
  };
  std::size_t length = 0;
  std::vector<TokenId> text;
  std::vector<std::vector<TokenId>> speech;
  std::vector<Layer> layers;
  std::vector<Real> x_final, lnf_xhat, lnf_out, lnf_rstd;
  std::vector<FrameLogits<Real>> logits;
};

template <typename Real>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), layout_((cfg_.validate(), cfg_)) {
    params_.assign(layout_.total, Real(0));
  }

  // Deterministic scaled-normal init; layer-norm gains start at 1.
  static Model init(const ModelConfig& cfg) {
    Model m(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, cfg.init_std);
    for (const auto& t : m.layout_.tensors) {
      Real* p = m.params_.data() + t.offset;
      const bool is_gain = t.name.ends_with(".gain");
      const bool is_bias = t.rows == 1 && !is_gain;
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (is_gain)
          p[i] = Real(1);
        else if (is_bias)
          p[i] = Real(0);
        else
          p[i] = static_cast<Real>(normal(rng));
      }
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }

  std::span<Real> tensor(const std::string& name) {
    const auto& t = layout_.find(name);
    return std::span<Real>(params_.data() + t.offset, t.size());
  }
  std::span<const Real> tensor(const std::string& name) const {
    const auto& t = layout_.find(name);
    return std::span<const Real>(params_.data() + t.offset, t.size());
  }

  // Summed input vector of one frame (token embeddings + position code).
  void embed(const FrameTokens& frame, std::size_t pos, Real* x) const {
    const std::size_t d = cfg_.hidden_size;
    check_frame(frame);
    const Real* te = params_.data() + layout_.text_embedding + static_cast<std::size_t>(frame.text) * d;
    std::copy(te, te + d, x);
    for (std::size_t s = 0; s < cfg_.num_speech_streams; ++s) {
      const Real* se = params_.data() + layout_.speech_embedding[s] +
                       static_cast<std::size_t>(frame.speech[s]) * d;
      for (std::size_t i = 0; i < d; ++i) x[i] += se[i];
    }
    kernels::add_position_encoding(x, pos, d);
  }

  // Full forward pass keeping every activation.
  ForwardCache<Real> forward_train(const MultiStreamSequence& seq) const {
    detail::require(!cfg_.single_stream(), "forward_train: model is single-stream; use forward_train_com");
    detail::require(seq.num_speech_streams() == cfg_.num_speech_streams,
                    "forward_train: stream count does not match the model");
    return run_full(seq.text(), seq.speech_streams());
  }

  ForwardCache<Real> forward_train_com(std::span<const TokenId> tokens) const {
    detail::require(cfg_.single_stream(), "forward_train_com: model has speech streams");
    return run_full(TokenList(tokens.begin(), tokens.end()), {});
  }

  // Accumulates dLoss/dparams into grad given dLoss/dlogits.
  void backward(const ForwardCache<Real>& c, const std::vector<FrameLogits<Real>>& dlogits,
                std::span<Real> grad) const;

  const std::vector<Real>& raw() const { return params_; }
  std::vector<Real>& raw() { return params_; }

 private:
  template <typename>
  friend class IncrementalDecoder;

  void check_frame(const FrameTokens& f) const {
    const std::size_t vt = cfg_.text_stream_vocab(), vs = cfg_.speech_vocab();
    detail::require(f.text >= 0 && static_cast<std::size_t>(f.text) < vt, "text-stream token id out of range");
    detail::require(f.speech.size() == cfg_.num_speech_streams, "frame has wrong number of speech tokens");
    for (TokenId id : f.speech)
      detail::require(id >= 0 && static_cast<std::size_t>(id) < vs, "speech token id out of range");
  }

  void heads_row(const Real* z, FrameLogits<Real>& out) const {
    const std::size_t d = cfg_.hidden_size, vt = cfg_.text_stream_vocab(), vs = cfg_.speech_vocab();
    const Real* p = params_.data();
    out.text.resize(vt);
    kernels::affine_row(z, p + layout_.text_head_w, p + layout_.text_head_b, out.text.data(), d, vt);
    out.speech.resize(cfg_.num_speech_streams);
    for (std::size_t s = 0; s < cfg_.num_speech_streams; ++s) {
      out.speech[s].resize(vs);
      kernels::affine_row(z, p + layout_.speech_head_w[s], p + layout_.speech_head_b[s],
                          out.speech[s].data(), d, vs);
    }
  }

  ForwardCache<Real> run_full(TokenList text, std::vector<TokenList> speech) const;

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<Real> params_;
};

template <typename Real>
ForwardCache<Real> Model<Real>::run_full(TokenList text, std::vector<TokenList> speech) const {
  const std::size_t L = text.size();
  if (L > cfg_.max_context)
    throw ContextOverflow("sequence of " + std::to_string(L) + " frames exceeds max_context " +
                          std::to_string(cfg_.max_context));
  const std::size_t d = cfg_.hidden_size, f = cfg_.ffn_size, H = cfg_.num_heads;
  const Real* p = params_.data();

  ForwardCache<Real> c;
  c.length = L;
  c.text = std::move(text);
  c.speech = std::move(speech);

  std::vector<Real> x(L * d);
  std::vector<TokenId> frame_speech(cfg_.num_speech_streams);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t s = 0; s < cfg_.num_speech_streams; ++s) frame_speech[s] = c.speech[s][t];
    embed(FrameTokens{c.text[t], frame_speech}, t, x.data() + t * d);
  }

  c.layers.resize(cfg_.num_layers);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const auto& W = layout_.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    lc.ln1_xhat.resize(L * d);
    lc.ln1_out.resize(L * d);
    lc.ln1_rstd.resize(L);
    lc.q.resize(L * d);
    lc.k.resize(L * d);
    lc.v.resize(L * d);
    for (std::size_t t = 0; t < L; ++t) {
      kernels::layer_norm_row(x.data() + t * d, p + W.ln1_gain, p + W.ln1_bias, lc.ln1_xhat.data() + t * d,
                              lc.ln1_out.data() + t * d, lc.ln1_rstd[t], d);
      const Real* h = lc.ln1_out.data() + t * d;
      kernels::affine_row(h, p + W.wq, p + W.bq, lc.q.data() + t * d, d, d);
      kernels::linear_row(h, p + W.wk, lc.k.data() + t * d, d, d);
      kernels::affine_row(h, p + W.wv, p + W.bv, lc.v.data() + t * d, d, d);
    }
    lc.probs.resize(L);
    lc.attn.resize(L * d);
    lc.x_mid.resize(L * d);
    lc.ln2_xhat.resize(L * d);
    lc.ln2_out.resize(L * d);
    lc.ln2_rstd.resize(L);
    lc.ffn_pre.resize(L * f);
    lc.ffn_act.resize(L * f);
    std::vector<Real> tmp(std::max(d, f));
    for (std::size_t t = 0; t < L; ++t) {
      lc.probs[t].resize(H * (t + 1));
      kernels::attend_row(lc.q.data() + t * d, lc.k.data(), lc.v.data(), t, d, H, lc.attn.data() + t * d,
                          lc.probs[t].data());
      kernels::affine_row(lc.attn.data() + t * d, p + W.wo, p + W.bo, tmp.data(), d, d);
      Real* xm = lc.x_mid.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) xm[i] = x[t * d + i] + tmp[i];
      kernels::layer_norm_row(xm, p + W.ln2_gain, p + W.ln2_bias, lc.ln2_xhat.data() + t * d,
                              lc.ln2_out.data() + t * d, lc.ln2_rstd[t], d);
      Real* pre = lc.ffn_pre.data() + t * f;
      Real* act = lc.ffn_act.data() + t * f;
      kernels::affine_row(lc.ln2_out.data() + t * d, p + W.w1, p + W.b1, pre, d, f);
      for (std::size_t i = 0; i < f; ++i) act[i] = kernels::gelu(pre[i]);
      kernels::affine_row(act, p + W.w2, p + W.b2, tmp.data(), f, d);
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] = xm[i] + tmp[i];
    }
  }

  c.x_final = x;
  c.lnf_xhat.resize(L * d);
  c.lnf_out.resize(L * d);
  c.lnf_rstd.resize(L);
  c.logits.resize(L);
  for (std::size_t t = 0; t < L; ++t) {
    kernels::layer_norm_row(x.data() + t * d, p + layout_.final_gain, p + layout_.final_bias,
                            c.lnf_xhat.data() + t * d, c.lnf_out.data() + t * d, c.lnf_rstd[t], d);
    heads_row(c.lnf_out.data() + t * d, c.logits[t]);
  }
  return c;
}

template <typename Real>
void Model<Real>::backward(const ForwardCache<Real>& c, const std::vector<FrameLogits<Real>>& dlogits,
                           std::span<Real> grad) const {
  detail::require(grad.size() == params_.size(), "backward: gradient buffer has wrong size");
  detail::require(dlogits.size() == c.length, "backward: dlogits length mismatch");
  const std::size_t L = c.length, d = cfg_.hidden_size, f = cfg_.ffn_size, H = cfg_.num_heads;
  const std::size_t vt = cfg_.text_stream_vocab(), vs = cfg_.speech_vocab();
  const std::size_t S = cfg_.num_speech_streams;
  const std::size_t dh = d / H;
  const Real* p = params_.data();
  Real* g = grad.data();

  // Heads.
  std::vector<Real> dz(L * d, Real(0));
  auto head_back = [&](const Real* z, const std::vector<Real>& dy, std::size_t w_off, std::size_t b_off,
                       std::size_t vocab, Real* dzr) {
    if (dy.empty()) return;
    const Real* w = p + w_off;
    Real* gw = g + w_off;
    Real* gb = g + b_off;
    for (std::size_t j = 0; j < vocab; ++j) gb[j] += dy[j];
    for (std::size_t k = 0; k < d; ++k) {
      const Real zk = z[k];
      const Real* wr = w + k * vocab;
      Real* gwr = gw + k * vocab;
      Real acc = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        gwr[j] += zk * dy[j];
        acc += dy[j] * wr[j];
      }
      dzr[k] += acc;
    }
  };
  for (std::size_t t = 0; t < L; ++t) {
    const Real* z = c.lnf_out.data() + t * d;
    head_back(z, dlogits[t].text, layout_.text_head_w, layout_.text_head_b, vt, dz.data() + t * d);
    for (std::size_t s = 0; s < S && s < dlogits[t].speech.size(); ++s)
      head_back(z, dlogits[t].speech[s], layout_.speech_head_w[s], layout_.speech_head_b[s], vs,
                dz.data() + t * d);
  }

  // Final layer norm.
  std::vector<Real> dx(L * d, Real(0));
  for (std::size_t t = 0; t < L; ++t)
    kernels::layer_norm_backward_row(dz.data() + t * d, c.lnf_xhat.data() + t * d, p + layout_.final_gain,
                                     c.lnf_rstd[t], dx.data() + t * d, g + layout_.final_gain,
                                     g + layout_.final_bias, d);

  std::vector<Real> dtmp(std::max(d, f));
  for (std::size_t li = cfg_.num_layers; li-- > 0;) {
    const auto& W = layout_.layers[li];
    const auto& lc = c.layers[li];

    // Feed-forward block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2.
    std::vector<Real> dxm = dx;  // residual path
    std::vector<Real> dln2(L * d, Real(0));
    for (std::size_t t = 0; t < L; ++t) {
      const Real* dy = dx.data() + t * d;
      const Real* act = lc.ffn_act.data() + t * f;
      const Real* pre = lc.ffn_pre.data() + t * f;
      for (std::size_t i = 0; i < d; ++i) g[W.b2 + i] += dy[i];
      // d act = dy W2^T ; dW2 += act^T dy
      for (std::size_t k = 0; k < f; ++k) {
        const Real* wr = p + W.w2 + k * d;
        Real* gwr = g + W.w2 + k * d;
        Real acc = 0;
        const Real a = act[k];
        for (std::size_t j = 0; j < d; ++j) {
          gwr[j] += a * dy[j];
          acc += dy[j] * wr[j];
        }
        dtmp[k] = acc * kernels::gelu_grad(pre[k]);
      }
      const Real* h = lc.ln2_out.data() + t * d;
      for (std::size_t j = 0; j < f; ++j) g[W.b1 + j] += dtmp[j];
      for (std::size_t k = 0; k < d; ++k) {
        const Real* wr = p + W.w1 + k * f;
        Real* gwr = g + W.w1 + k * f;
        Real acc = 0;
        const Real hk = h[k];
        for (std::size_t j = 0; j < f; ++j) {
          gwr[j] += hk * dtmp[j];
          acc += dtmp[j] * wr[j];
        }
        dln2[t * d + k] = acc;
      }
      kernels::layer_norm_backward_row(dln2.data() + t * d, lc.ln2_xhat.data() + t * d, p + W.ln2_gain,
                                       lc.ln2_rstd[t], dxm.data() + t * d, g + W.ln2_gain, g + W.ln2_bias, d);
    }

    // Attention block: x_mid = x_in + Wo attn + bo.
    std::vector<Real> dxin = dxm;  // residual path
    std::vector<Real> dattn(L * d, Real(0));
    for (std::size_t t = 0; t < L; ++t) {
      const Real* dy = dxm.data() + t * d;
      const Real* a = lc.attn.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) g[W.bo + i] += dy[i];
      for (std::size_t k = 0; k < d; ++k) {
        const Real* wr = p + W.wo + k * d;
        Real* gwr = g + W.wo + k * d;
        Real acc = 0;
        const Real ak = a[k];
        for (std::size_t j = 0; j < d; ++j) {
          gwr[j] += ak * dy[j];
          acc += dy[j] * wr[j];
        }
        dattn[t * d + k] = acc;
      }
    }
    std::vector<Real> dq(L * d, Real(0)), dk(L * d, Real(0)), dv(L * d, Real(0));
    const Real scale = Real(1) / std::sqrt(Real(dh));
    std::vector<Real> dp(L);
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t n = t + 1;
      for (std::size_t h = 0; h < H; ++h) {
        const Real* pr = lc.probs[t].data() + h * n;
        const Real* dout = dattn.data() + t * d + h * dh;
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const Real* vj = lc.v.data() + j * d + h * dh;
          Real* dvj = dv.data() + j * d + h * dh;
          Real acc = 0;
          for (std::size_t i = 0; i < dh; ++i) {
            acc += dout[i] * vj[i];
            dvj[i] += pr[j] * dout[i];
          }
          dp[j] = acc;
          dot += pr[j] * acc;
        }
        const Real* qt = lc.q.data() + t * d + h * dh;
        Real* dqt = dq.data() + t * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const Real ds = pr[j] * (dp[j] - dot) * scale;
          const Real* kj = lc.k.data() + j * d + h * dh;
          Real* dkj = dk.data() + j * d + h * dh;
          for (std::size_t i = 0; i < dh; ++i) {
            dqt[i] += ds * kj[i];
            dkj[i] += ds * qt[i];
          }
        }
      }
    }
    // q/k/v projections back into ln1 output.
    std::vector<Real> dln1(L * d, Real(0));
    auto proj_back = [&](const std::vector<Real>& dy_all, std::size_t w_off, std::optional<std::size_t> b_off) {
      for (std::size_t t = 0; t < L; ++t) {
        const Real* dy = dy_all.data() + t * d;
        const Real* h = lc.ln1_out.data() + t * d;
        if (b_off)
          for (std::size_t i = 0; i < d; ++i) g[*b_off + i] += dy[i];
        for (std::size_t k = 0; k < d; ++k) {
          const Real* wr = p + w_off + k * d;
          Real* gwr = g + w_off + k * d;
          Real acc = 0;
          const Real hk = h[k];
          for (std::size_t j = 0; j < d; ++j) {
            gwr[j] += hk * dy[j];
            acc += dy[j] * wr[j];
          }
          dln1[t * d + k] += acc;
        }
      }
    };
    proj_back(dq, W.wq, W.bq);
    proj_back(dk, W.wk, std::nullopt);
    proj_back(dv, W.wv, W.bv);
    for (std::size_t t = 0; t < L; ++t)
      kernels::layer_norm_backward_row(dln1.data() + t * d, lc.ln1_xhat.data() + t * d, p + W.ln1_gain,
                                       lc.ln1_rstd[t], dxin.data() + t * d, g + W.ln1_gain, g + W.ln1_bias, d);
    dx = std::move(dxin);
  }

  // Embeddings.
  for (std::size_t t = 0; t < L; ++t) {
    const Real* dxt = dx.data() + t * d;
    Real* te = g + layout_.text_embedding + static_cast<std::size_t>(c.text[t]) * d;
    for (std::size_t i = 0; i < d; ++i) te[i] += dxt[i];
    for (std::size_t s = 0; s < S; ++s) {
      Real* se = g + layout_.speech_embedding[s] + static_cast<std::size_t>(c.speech[s][t]) * d;
      for (std::size_t i = 0; i < d; ++i) se[i] += dxt[i];
    }
  }
}

// Frame-by-frame forward with a key/value cache. Uses the same row kernels
// as the full pass, so its logits are bit-identical to forward_train.
template <typename Real>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Model<Real>& model) : model_(&model) {
    const auto& cfg = model.config();
    keys_.resize(cfg.num_layers);
    values_.resize(cfg.num_layers);
  }

  std::size_t position() const { return pos_; }

  FrameLogits<Real> step(TokenId text, std::span<const TokenId> speech) {
    const auto& cfg = model_->cfg_;
    const auto& layout = model_->layout_;
    if (pos_ >= cfg.max_context)
      throw ContextOverflow("incremental decode exceeds max_context " + std::to_string(cfg.max_context));
    const std::size_t d = cfg.hidden_size, f = cfg.ffn_size, H = cfg.num_heads;
    const Real* p = model_->params_.data();

    std::vector<Real> x(d), xhat(d), h(d), q(d), tmp(std::max(d, f)), attn(d), xm(d), pre(f), act(f);
    std::vector<Real> probs(H * (pos_ + 1));
    Real rstd = 0;
    model_->embed(FrameTokens{text, speech}, pos_, x.data());
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const auto& W = layout.layers[l];
      auto& K = keys_[l];
      auto& V = values_[l];
      kernels::layer_norm_row(x.data(), p + W.ln1_gain, p + W.ln1_bias, xhat.data(), h.data(), rstd, d);
      K.resize((pos_ + 1) * d);
      V.resize((pos_ + 1) * d);
      kernels::affine_row(h.data(), p + W.wq, p + W.bq, q.data(), d, d);
      kernels::linear_row(h.data(), p + W.wk, K.data() + pos_ * d, d, d);
      kernels::affine_row(h.data(), p + W.wv, p + W.bv, V.data() + pos_ * d, d, d);
      kernels::attend_row(q.data(), K.data(), V.data(), pos_, d, H, attn.data(), probs.data());
      kernels::affine_row(attn.data(), p + W.wo, p + W.bo, tmp.data(), d, d);
      for (std::size_t i = 0; i < d; ++i) xm[i] = x[i] + tmp[i];
      kernels::layer_norm_row(xm.data(), p + W.ln2_gain, p + W.ln2_bias, xhat.data(), h.data(), rstd, d);
      kernels::affine_row(h.data(), p + W.w1, p + W.b1, pre.data(), d, f);
      for (std::size_t i = 0; i < f; ++i) act[i] = kernels::gelu(pre[i]);
      kernels::affine_row(act.data(), p + W.w2, p + W.b2, tmp.data(), f, d);
      for (std::size_t i = 0; i < d; ++i) x[i] = xm[i] + tmp[i];
    }
    kernels::layer_norm_row(x.data(), p + layout.final_gain, p + layout.final_bias, xhat.data(), h.data(), rstd,
                            d);
    FrameLogits<Real> out;
    model_->heads_row(h.data(), out);
    ++pos_;
    return out;
  }

 private:
  const Model<Real>* model_;
  std::vector<std::vector<Real>> keys_, values_;
  std::size_t pos_ = 0;
};

// Logits for every frame of a parallel sequence (inference path).
template <typename Real>
std::vector<FrameLogits<Real>> forward(const Model<Real>& model, const MultiStreamSequence& seq) {
  const auto& cfg = model.config();
  detail::require(!cfg.single_stream(), "forward: model is single-stream; use forward_com");
  detail::require(seq.num_speech_streams() == cfg.num_speech_streams,
                  "forward: stream count does not match the model");
  if (seq.length() > cfg.max_context)
    throw ContextOverflow("sequence of " + std::to_string(seq.length()) + " frames exceeds max_context " +
                          std::to_string(cfg.max_context));
  IncrementalDecoder<Real> dec(model);
  std::vector<FrameLogits<Real>> out;
  out.reserve(seq.length());
  std::vector<TokenId> frame(cfg.num_speech_streams);
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (std::size_t s = 0; s < frame.size(); ++s) frame[s] = seq.speech_at(s, t);
    out.push_back(dec.step(seq.text_at(t), frame));
  }
  return out;
}

// Single-stream baseline: one logit vector over the union vocabulary per token.
template <typename Real>
std::vector<std::vector<Real>> forward_com(const Model<Real>& model, std::span<const TokenId> tokens) {
  const auto& cfg = model.config();
  detail::require(cfg.single_stream(), "forward_com: model has speech streams");
  if (tokens.size() > cfg.max_context)
    throw ContextOverflow("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                          std::to_string(cfg.max_context));
  IncrementalDecoder<Real> dec(model);
  std::vector<std::vector<Real>> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(dec.step(t, {}).text);
  return out;
}

}  // namespace pslm
