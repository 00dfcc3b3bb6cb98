#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/model.hpp"
#include "pslm/token_streams.hpp"

namespace pslm {

struct SamplingParams {
  double temperature = 0.8;
  std::size_t top_k = 60;
  double top_p = 0.8;
  std::uint64_t seed = 0;
  std::size_t max_total_len = 2048;

  void validate() const {
    detail::require(temperature > 0.0, "temperature must be > 0");
    detail::require(top_k >= 1, "top_k must be >= 1");
    detail::require(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
  }
};

// Below this temperature sampling degenerates to argmax.
inline constexpr double kGreedyTemperature = 1e-6;

class TokenRng {
 public:
  explicit TokenRng(std::uint64_t seed) : engine_(seed) {}
  TokenRng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  // Uniform in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 engine_;
};

struct FilteredDistribution {
  std::vector<TokenId> ids;    // descending probability, ties by lower id
  std::vector<double> probs;   // renormalized, sums to 1
};

// Temperature softmax, then top-k, then the smallest prefix whose
// cumulative (top-k renormalized) mass reaches top_p. top_k larger than
// the vocabulary keeps everything.
template <typename Real>
FilteredDistribution filter_distribution(std::span<const Real> logits, const SamplingParams& params) {
  params.validate();
  detail::require(!logits.empty(), "filter_distribution: empty logits");
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) {
    detail::require(!std::isnan(static_cast<double>(v)), "filter_distribution: NaN logit");
    detail::require(static_cast<double>(v) != std::numeric_limits<double>::infinity(),
                    "filter_distribution: +inf logit");
    mx = std::max(mx, static_cast<double>(v));
  }
  detail::require(std::isfinite(mx), "filter_distribution: all logits are -inf");

  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / params.temperature);

  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return p[a] > p[b]; });

  const std::size_t k = std::min(params.top_k, order.size());
  double mass = 0.0;
  for (std::size_t i = 0; i < k; ++i) mass += p[order[i]];

  FilteredDistribution out;
  double cum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double q = p[order[i]] / mass;
    if (q <= 0.0) break;
    out.ids.push_back(order[i]);
    out.probs.push_back(q);
    cum += q;
    if (params.top_p < 1.0 && cum >= params.top_p) break;
  }
  const double kept = std::accumulate(out.probs.begin(), out.probs.end(), 0.0);
  for (auto& q : out.probs) q /= kept;
  return out;
}

template <typename Real>
TokenId argmax_token(std::span<const Real> logits) {
  detail::require(!logits.empty(), "argmax_token: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  detail::require(std::isfinite(static_cast<double>(logits[best])), "argmax_token: no finite logit");
  return static_cast<TokenId>(best);
}

template <typename Real>
TokenId sample_token(std::span<const Real> logits, const SamplingParams& params, TokenRng& rng) {
  if (params.temperature < kGreedyTemperature) return argmax_token(logits);
  const auto dist = filter_distribution(logits, params);
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < dist.ids.size(); ++i) {
    cum += dist.probs[i];
    if (u < cum) return dist.ids[i];
  }
  return dist.ids.back();
}

enum class Failure { kNone, kNoEos, kWrongModality };

inline const char* to_string(Failure f) {
  switch (f) {
    case Failure::kNone: return "none";
    case Failure::kNoEos: return "no-eos";
    case Failure::kWrongModality: return "wrong-modality";
  }
  return "unknown";
}

inline Failure failure_from_string(const std::string& s) {
  if (s == "none") return Failure::kNone;
  if (s == "no-eos") return Failure::kNoEos;
  if (s == "wrong-modality") return Failure::kWrongModality;
  throw FormatError("unknown failure kind: " + s);
}

struct DecodeOutcome {
  TokenList text_answer;
  TokenList speech_answer;
  // Generated TQ; only filled by speech-only single-stream decoding.
  TokenList text_question;
  std::size_t frames_generated = 0;
  Failure failure = Failure::kNone;
  friend bool operator==(const DecodeOutcome&, const DecodeOutcome&) = default;
};

// Parallel decoding: every frame draws one text token and S speech tokens
// independently from the same forward pass. The text stream is forced to
// pad after text_eos, each speech stream to pad after its speech_eos, and
// decoding stops once all speech streams have ended or the total sequence
// length reaches the cap.
template <typename Real>
DecodeOutcome decode_pslm(const Model<Real>& model, const MultiStreamSequence& prompt,
                          const SamplingParams& params) {
  params.validate();
  const auto& cfg = model.config();
  const auto& vocab = cfg.vocab;
  detail::require(!cfg.single_stream(), "decode_pslm: model is single-stream");
  detail::require(prompt.num_speech_streams() == cfg.num_speech_streams,
                  "decode_pslm: prompt stream count does not match the model");
  detail::require(prompt.length() >= 1, "decode_pslm: empty prompt");
  const std::size_t S = cfg.num_speech_streams;
  const std::size_t cap = std::min(params.max_total_len, cfg.max_context);

  DecodeOutcome out;
  if (prompt.length() >= cap) {
    out.failure = Failure::kNoEos;
    return out;
  }

  TokenRng text_rng(params.seed, 0);
  std::vector<TokenRng> speech_rng;
  for (std::size_t s = 0; s < S; ++s) speech_rng.emplace_back(params.seed, s + 1);

  IncrementalDecoder<Real> dec(model);
  std::vector<TokenId> frame(S);
  FrameLogits<Real> logits;
  for (std::size_t t = 0; t < prompt.length(); ++t) {
    for (std::size_t s = 0; s < S; ++s) frame[s] = prompt.speech_at(s, t);
    logits = dec.step(prompt.text_at(t), frame);
  }

  bool text_done = false;
  std::vector<bool> speech_done(S, false);
  std::vector<TokenList> generated(S);
  std::size_t total = prompt.length();
  while (total < cap) {
    TokenId text = vocab.text_pad_id;
    if (!text_done) {
      text = sample_token<Real>(logits.text, params, text_rng);
      if (text == vocab.text_eos_id)
        text_done = true;
      else if (vocab.is_text_content(text))
        out.text_answer.push_back(text);
    }
    for (std::size_t s = 0; s < S; ++s) {
      frame[s] = vocab.speech_pad_id;
      if (speech_done[s]) continue;
      frame[s] = sample_token<Real>(logits.speech[s], params, speech_rng[s]);
      if (frame[s] == vocab.speech_eos_id) {
        speech_done[s] = true;
        frame[s] = vocab.speech_pad_id;
      }
    }
    for (std::size_t s = 0; s < S; ++s) generated[s].push_back(frame[s]);
    ++total;
    ++out.frames_generated;
    if (std::all_of(speech_done.begin(), speech_done.end(), [](bool b) { return b; })) break;
    if (total < cap) logits = dec.step(text, frame);
  }

  const bool finished = std::all_of(speech_done.begin(), speech_done.end(), [](bool b) { return b; });
  out.failure = finished ? Failure::kNone : Failure::kNoEos;
  for (TokenId t : deinterleave_speech(generated, vocab))
    if (t != vocab.speech_pad_id) out.speech_answer.push_back(t);
  return out;
}

// Segment tracker for single-stream generation in the union id space. Text
// segments (TQ, TA) accept only text ids and the speech segment only speech
// ids; anything else is a wrong-modality failure.
class ComSegmenter {
 public:
  enum class Segment { kQuestion, kAnswerText, kAnswerSpeech, kDone, kFailed };

  ComSegmenter(const VocabSpec& vocab, bool starts_after_question)
      : vocab_(vocab), segment_(starts_after_question ? Segment::kAnswerText : Segment::kQuestion) {}

  Segment segment() const { return segment_; }
  bool finished() const { return segment_ == Segment::kDone || segment_ == Segment::kFailed; }

  void feed(TokenId u) {
    switch (segment_) {
      case Segment::kQuestion:
      case Segment::kAnswerText:
        if (!vocab_.union_is_text(u)) {
          segment_ = Segment::kFailed;
        } else if (u == vocab_.com_speech_marker_id) {
          segment_ = Segment::kAnswerSpeech;
        } else if (u == vocab_.text_eos_id && segment_ == Segment::kQuestion) {
          segment_ = Segment::kAnswerText;
        } else if (vocab_.is_text_content(u)) {
          (segment_ == Segment::kQuestion ? question_ : answer_text_).push_back(u);
        }
        break;
      case Segment::kAnswerSpeech: {
        if (!vocab_.union_is_speech(u)) {
          segment_ = Segment::kFailed;
          break;
        }
        const TokenId sp = vocab_.union_to_speech(u);
        if (sp == vocab_.speech_eos_id)
          segment_ = Segment::kDone;
        else if (sp != vocab_.speech_pad_id)
          answer_speech_.push_back(sp);
        break;
      }
      case Segment::kDone:
      case Segment::kFailed:
        break;
    }
  }

  DecodeOutcome outcome(std::size_t frames) const {
    DecodeOutcome o;
    o.text_question = question_;
    o.text_answer = answer_text_;
    o.speech_answer = answer_speech_;
    o.frames_generated = frames;
    o.failure = segment_ == Segment::kDone     ? Failure::kNone
                : segment_ == Segment::kFailed ? Failure::kWrongModality
                                               : Failure::kNoEos;
    return o;
  }

 private:
  VocabSpec vocab_;
  Segment segment_;
  TokenList question_, answer_text_, answer_speech_;
};

// Classifies an already generated continuation.
inline DecodeOutcome segment_com_generation(std::span<const TokenId> generated, const VocabSpec& vocab,
                                            bool prompt_has_question) {
  ComSegmenter seg(vocab, prompt_has_question);
  std::size_t n = 0;
  for (TokenId u : generated) {
    if (seg.finished()) break;
    seg.feed(u);
    ++n;
  }
  return seg.outcome(n);
}

// Single-stream decoding over the union vocabulary. With prompt_has_question
// the prompt already ends with TQ and text_eos; otherwise it ends with the
// text marker and the model must produce TQ itself.
template <typename Real>
DecodeOutcome decode_com(const Model<Real>& model, std::span<const TokenId> prompt, const SamplingParams& params,
                         bool prompt_has_question) {
  params.validate();
  const auto& cfg = model.config();
  detail::require(cfg.single_stream(), "decode_com: model has speech streams");
  detail::require(!prompt.empty(), "decode_com: empty prompt");
  const std::size_t cap = std::min(params.max_total_len, cfg.max_context);

  ComSegmenter seg(cfg.vocab, prompt_has_question);
  if (prompt.size() >= cap) return seg.outcome(0);

  TokenRng rng(params.seed, 0);
  IncrementalDecoder<Real> dec(model);
  FrameLogits<Real> logits;
  for (TokenId t : prompt) logits = dec.step(t, {});

  std::size_t total = prompt.size(), frames = 0;
  while (total < cap && !seg.finished()) {
    const TokenId u = sample_token<Real>(logits.text, params, rng);
    seg.feed(u);
    ++total;
    ++frames;
    if (total < cap && !seg.finished()) logits = dec.step(u, {});
  }
  return seg.outcome(frames);
}

}  // namespace pslm
