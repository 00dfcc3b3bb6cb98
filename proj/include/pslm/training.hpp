#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/model.hpp"
#include "pslm/token_streams.hpp"

namespace pslm {

struct LossBreakdown {
  double text_loss = 0.0;
  std::vector<double> speech_losses;
  double total = 0.0;
  double speech_weight = 1.0;
};

namespace detail {

// Cross-entropy of one logit row against a target id; writes
// scale * (softmax - onehot) into grad when non-null.
template <typename Real>
inline double cross_entropy_row(std::span<const Real> logits, TokenId target, double scale, Real* grad) {
  detail::require(target >= 0 && static_cast<std::size_t>(target) < logits.size(), "target id out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (Real v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double log_z = mx + std::log(sum);
  if (grad != nullptr) {
    for (std::size_t i = 0; i < logits.size(); ++i)
      grad[i] = static_cast<Real>(scale * std::exp(static_cast<double>(logits[i]) - log_z));
    grad[target] -= static_cast<Real>(scale);
  }
  return log_z - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

}  // namespace detail

// Per-stream mean next-token cross-entropy (logits at frame t score the
// tokens at frame t+1, prompt and pad frames included), with the speech
// streams scaled by 1/S when weighted. Optionally fills dLoss/dlogits.
template <typename Real>
LossBreakdown weighted_loss(std::span<const FrameLogits<Real>> logits, const MultiStreamSequence& targets,
                            bool weighted, std::vector<FrameLogits<Real>>* dlogits = nullptr) {
  const std::size_t L = targets.length(), S = targets.num_speech_streams();
  detail::require(logits.size() == L, "weighted_loss: logits/targets length mismatch");
  detail::require(L >= 2, "weighted_loss: need at least two frames");
  const double n = static_cast<double>(L - 1);

  LossBreakdown out;
  out.speech_weight = weighted ? 1.0 / static_cast<double>(S) : 1.0;
  out.speech_losses.assign(S, 0.0);
  if (dlogits != nullptr) {
    dlogits->assign(L, FrameLogits<Real>{});
    for (std::size_t t = 0; t < L; ++t) {
      (*dlogits)[t].text.assign(logits[t].text.size(), Real(0));
      (*dlogits)[t].speech.resize(S);
      for (std::size_t s = 0; s < S; ++s) (*dlogits)[t].speech[s].assign(logits[t].speech.at(s).size(), Real(0));
    }
  }
  for (std::size_t t = 0; t + 1 < L; ++t) {
    const auto& lg = logits[t];
    detail::require(lg.speech.size() == S, "weighted_loss: logits have wrong stream count");
    out.text_loss += detail::cross_entropy_row<Real>(lg.text, targets.text_at(t + 1), 1.0 / n,
                                                     dlogits ? (*dlogits)[t].text.data() : nullptr);
    for (std::size_t s = 0; s < S; ++s)
      out.speech_losses[s] +=
          detail::cross_entropy_row<Real>(lg.speech[s], targets.speech_at(s, t + 1), out.speech_weight / n,
                                          dlogits ? (*dlogits)[t].speech[s].data() : nullptr);
  }
  out.text_loss /= n;
  for (auto& v : out.speech_losses) v /= n;
  out.total = out.text_loss + out.speech_weight * std::accumulate(out.speech_losses.begin(),
                                                                  out.speech_losses.end(), 0.0);
  return out;
}

// Single-stream next-token loss for the baseline layout.
template <typename Real>
double com_loss(const std::vector<FrameLogits<Real>>& logits, std::span<const TokenId> tokens,
                std::vector<FrameLogits<Real>>* dlogits = nullptr) {
  const std::size_t L = tokens.size();
  detail::require(logits.size() == L, "com_loss: logits/targets length mismatch");
  detail::require(L >= 2, "com_loss: need at least two tokens");
  const double n = static_cast<double>(L - 1);
  if (dlogits != nullptr) {
    dlogits->assign(L, FrameLogits<Real>{});
    for (std::size_t t = 0; t < L; ++t) (*dlogits)[t].text.assign(logits[t].text.size(), Real(0));
  }
  double loss = 0.0;
  for (std::size_t t = 0; t + 1 < L; ++t)
    loss += detail::cross_entropy_row<Real>(logits[t].text, tokens[t + 1], 1.0 / n,
                                            dlogits ? (*dlogits)[t].text.data() : nullptr);
  return loss / n;
}

struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  bool weighted_loss = true;
  std::uint64_t seed = 0;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;

  void validate() const {
    detail::require(batch_size > 0, "batch_size must be positive");
    detail::require(learning_rate > 0.0, "learning_rate must be positive");
    detail::require(clip_norm >= 0.0, "clip_norm must be non-negative");
  }
};

struct TrainResult {
  std::vector<LossBreakdown> history;
};

// Loss and gradient of one example, accumulated into grad with weight `scale`.
template <typename Real>
LossBreakdown example_loss_and_grad(const Model<Real>& model, const MultiStreamSequence& ex, bool weighted,
                                    std::span<Real> grad, Real scale = Real(1)) {
  auto cache = model.forward_train(ex);
  std::vector<FrameLogits<Real>> dlogits;
  LossBreakdown lb = weighted_loss<Real>(cache.logits, ex, weighted, &dlogits);
  if (scale != Real(1))
    for (auto& fl : dlogits) {
      for (auto& v : fl.text) v *= scale;
      for (auto& sp : fl.speech)
        for (auto& v : sp) v *= scale;
    }
  model.backward(cache, dlogits, grad);
  return lb;
}

template <typename Real>
LossBreakdown example_loss_and_grad(const Model<Real>& model, const TokenList& ex, bool /*weighted*/,
                                    std::span<Real> grad, Real scale = Real(1)) {
  auto cache = model.forward_train_com(ex);
  std::vector<FrameLogits<Real>> dlogits;
  LossBreakdown lb;
  lb.text_loss = com_loss<Real>(cache.logits, ex, &dlogits);
  lb.total = lb.text_loss;
  if (scale != Real(1))
    for (auto& fl : dlogits)
      for (auto& v : fl.text) v *= scale;
  model.backward(cache, dlogits, grad);
  return lb;
}

template <typename Real>
LossBreakdown example_loss(const Model<Real>& model, const MultiStreamSequence& ex, bool weighted) {
  return weighted_loss<Real>(model.forward_train(ex).logits, ex, weighted);
}

template <typename Real>
LossBreakdown example_loss(const Model<Real>& model, const TokenList& ex, bool /*weighted*/) {
  LossBreakdown lb;
  lb.text_loss = com_loss<Real>(model.forward_train_com(ex).logits, ex);
  lb.total = lb.text_loss;
  return lb;
}

namespace detail {

inline void accumulate_breakdown(LossBreakdown& acc, const LossBreakdown& x, double w) {
  if (acc.speech_losses.size() < x.speech_losses.size()) acc.speech_losses.resize(x.speech_losses.size(), 0.0);
  acc.text_loss += w * x.text_loss;
  for (std::size_t s = 0; s < x.speech_losses.size(); ++s) acc.speech_losses[s] += w * x.speech_losses[s];
  acc.total += w * x.total;
  acc.speech_weight = x.speech_weight;
}

inline bool finite(const LossBreakdown& lb) {
  if (!std::isfinite(lb.total) || !std::isfinite(lb.text_loss)) return false;
  for (double v : lb.speech_losses)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

// Mean loss over a set of examples.
template <typename Real, typename Example>
LossBreakdown mean_loss(const Model<Real>& model, std::span<const Example> corpus, bool weighted) {
  detail::require(!corpus.empty(), "mean_loss: empty corpus");
  LossBreakdown acc;
  const double w = 1.0 / static_cast<double>(corpus.size());
  for (const auto& ex : corpus) detail::accumulate_breakdown(acc, example_loss(model, ex, weighted), w);
  return acc;
}

// Adam over minibatches drawn from per-epoch shuffles. Examples are either
// MultiStreamSequence (parallel model) or TokenList (single-stream model).
template <typename Real, typename Example>
TrainResult train(Model<Real>& model, std::span<const Example> corpus, const TrainConfig& cfg,
                  const std::function<void(std::size_t, const LossBreakdown&)>& on_step = {}) {
  cfg.validate();
  detail::require(!corpus.empty(), "train: empty corpus");

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const std::size_t P = model.num_params();
  std::vector<Real> grad(P), m(P, Real(0)), v(P, Real(0));
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainResult result;
  result.history.reserve(cfg.steps);
  auto params = model.params();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), Real(0));
    const std::size_t B = std::min(cfg.batch_size, corpus.size());
    const Real scale = Real(1) / static_cast<Real>(B);
    LossBreakdown batch;
    for (std::size_t b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& ex = corpus[order[cursor++]];
      auto lb = example_loss_and_grad(model, ex, cfg.weighted_loss, std::span<Real>(grad), scale);
      detail::accumulate_breakdown(batch, lb, 1.0 / static_cast<double>(B));
    }
    if (!detail::finite(batch)) throw TrainingDiverged(step, "non-finite loss");

    double norm2 = 0.0;
    for (Real gval : grad) norm2 += static_cast<double>(gval) * static_cast<double>(gval);
    if (!std::isfinite(norm2)) throw TrainingDiverged(step, "non-finite gradient");
    const double norm = std::sqrt(norm2);
    const Real clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? static_cast<Real>(cfg.clip_norm / norm)
                                                                    : Real(1);

    const double t = static_cast<double>(step + 1);
    const Real lr_t = static_cast<Real>(cfg.learning_rate * std::sqrt(1.0 - std::pow(kBeta2, t)) /
                                        (1.0 - std::pow(kBeta1, t)));
    for (std::size_t i = 0; i < P; ++i) {
      const Real gi = grad[i] * clip;
      m[i] = Real(kBeta1) * m[i] + Real(1 - kBeta1) * gi;
      v[i] = Real(kBeta2) * v[i] + Real(1 - kBeta2) * gi * gi;
      params[i] -= lr_t * m[i] / (std::sqrt(v[i]) + Real(kEps));
    }
    result.history.push_back(batch);
    if (on_step) on_step(step, batch);
  }
  return result;
}

// CSV: step,text_loss,speech_loss_1..S,total
inline void write_loss_csv(std::ostream& os, const std::vector<LossBreakdown>& history) {
  const std::size_t S = history.empty() ? 0 : history.front().speech_losses.size();
  os << "step,text_loss";
  for (std::size_t s = 0; s < S; ++s) os << ",speech_loss_" << (s + 1);
  os << ",total\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    os << i << ',' << h.text_loss;
    for (double v : h.speech_losses) os << ',' << v;
    os << ',' << h.total << '\n';
  }
}

struct GradcheckOptions {
  double epsilon = 1e-4;
  std::size_t num_coords = 240;
  std::uint64_t seed = 0;
  bool weighted = true;
  // Denominator floor of the relative error; 0 derives it from the
  // central-difference roundoff, kRoundoffMultiple * eps_mach * |L| / epsilon.
  double abs_floor = 0.0;
  // Applied to the analytic gradient before comparison (mutation testing).
  std::function<void(const ParamLayout&, std::span<double>)> corrupt;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  double floor = 0.0;
  std::set<std::string> groups_covered;
  std::vector<std::pair<std::string, double>> worst_by_group;
};

// Analytic gradient of the weighted loss against central differences on a
// sampled subset of coordinates covering every parameter group. Embedding
// rows are sampled among the ids present in the example (other rows have
// identically zero gradient). Relative error is
// |a - n| / max(|a|, |n|, floor); gradients below the floor are at the level
// of finite-difference roundoff and are compared on an absolute scale.
inline GradcheckReport gradcheck(Model<double>& model, const MultiStreamSequence& example,
                                 const GradcheckOptions& opt = {}) {
  const auto& layout = model.layout();
  std::vector<double> grad(model.num_params(), 0.0);
  const double loss0 = example_loss_and_grad(model, example, opt.weighted, std::span<double>(grad)).total;
  constexpr double kRoundoffMultiple = 1e5;
  const double floor =
      opt.abs_floor > 0.0
          ? opt.abs_floor
          : std::max(1e-10, kRoundoffMultiple * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss0)) /
                                opt.epsilon);
  if (opt.corrupt) opt.corrupt(layout, grad);

  // Candidate coordinates per group.
  std::vector<std::string> groups;
  std::vector<std::vector<std::size_t>> candidates;
  auto group_index = [&](const std::string& g) {
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == g) return i;
    groups.push_back(g);
    candidates.emplace_back();
    return groups.size() - 1;
  };
  const std::size_t d = model.config().hidden_size;
  for (const auto& t : layout.tensors) {
    const std::size_t gi = group_index(t.group);
    if (t.group == "text_embedding" || t.group.starts_with("speech_embedding.")) {
      std::set<TokenId> ids;
      if (t.group == "text_embedding") {
        ids.insert(example.text().begin(), example.text().end());
      } else {
        const std::size_t s = std::stoul(t.group.substr(std::string("speech_embedding.").size()));
        ids.insert(example.speech(s).begin(), example.speech(s).end());
      }
      for (TokenId id : ids)
        for (std::size_t i = 0; i < d; ++i) candidates[gi].push_back(t.offset + static_cast<std::size_t>(id) * d + i);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) candidates[gi].push_back(t.offset + i);
    }
  }

  std::mt19937_64 rng(opt.seed);
  const std::size_t per_group = std::max<std::size_t>(8, (opt.num_coords + groups.size() - 1) / groups.size());
  GradcheckReport report;
  report.floor = floor;
  auto params = model.params();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& cand = candidates[gi];
    if (cand.empty()) continue;
    std::shuffle(cand.begin(), cand.end(), rng);
    const std::size_t n = std::min(per_group, cand.size());
    double worst = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = cand[k];
      const double orig = params[idx];
      params[idx] = orig + opt.epsilon;
      const double lp = example_loss(model, example, opt.weighted).total;
      params[idx] = orig - opt.epsilon;
      const double lm = example_loss(model, example, opt.weighted).total;
      params[idx] = orig;
      const double numeric = (lp - lm) / (2.0 * opt.epsilon);
      const double analytic = grad[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    report.coords_checked += n;
    report.groups_covered.insert(groups[gi]);
    report.worst_by_group.emplace_back(groups[gi], worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace pslm
