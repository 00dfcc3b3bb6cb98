#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/vocab.hpp"

namespace pslm {

// Which prompt modalities a parallel example carries. The reduced variants
// correspond to the no-TQ / no-SQ ablations.
enum class PromptInputs { kSpeechAndText, kSpeechOnly, kTextOnly };

struct StreamLayoutReport {
  std::size_t original_speech_len = 0;
  std::size_t per_stream_len = 0;
  std::size_t padded_tail = 0;
};

struct InterleavedSpeech {
  std::vector<TokenList> streams;
  StreamLayoutReport report;
};

// One text stream and S speech streams, frame aligned. Frames
// [0, prompt_len) are the prompt; the rest is the answer.
class MultiStreamSequence {
 public:
  MultiStreamSequence() = default;

  MultiStreamSequence(TokenList text, std::vector<TokenList> speech, std::size_t prompt_len)
      : text_(std::move(text)), speech_(std::move(speech)), prompt_len_(prompt_len) {
    detail::require(!speech_.empty(), "MultiStreamSequence needs at least one speech stream");
    for (const auto& s : speech_)
      detail::require(s.size() == text_.size(), "all streams must have identical length");
    detail::require(prompt_len_ <= text_.size(), "prompt_len exceeds stream length");
  }

  // Empty sequence with S speech streams.
  static MultiStreamSequence empty(std::size_t num_speech_streams) {
    detail::require(num_speech_streams >= 1, "S must be >= 1");
    return MultiStreamSequence(TokenList{}, std::vector<TokenList>(num_speech_streams), 0);
  }

  std::size_t length() const { return text_.size(); }
  std::size_t num_speech_streams() const { return speech_.size(); }
  std::size_t prompt_len() const { return prompt_len_; }

  const TokenList& text() const { return text_; }
  const TokenList& speech(std::size_t s) const { return speech_.at(s); }
  const std::vector<TokenList>& speech_streams() const { return speech_; }

  TokenId text_at(std::size_t t) const { return text_[t]; }
  TokenId speech_at(std::size_t s, std::size_t t) const { return speech_[s][t]; }

  void append_frame(TokenId text, std::span<const TokenId> speech) {
    detail::require(speech.size() == speech_.size(), "frame has wrong number of speech tokens");
    text_.push_back(text);
    for (std::size_t s = 0; s < speech_.size(); ++s) speech_[s].push_back(speech[s]);
  }

  // First n frames, with the prompt boundary clamped.
  MultiStreamSequence prefix(std::size_t n) const {
    n = std::min(n, length());
    std::vector<TokenList> sp;
    sp.reserve(speech_.size());
    for (const auto& s : speech_) sp.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
    return MultiStreamSequence(TokenList(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(n)),
                               std::move(sp), std::min(prompt_len_, n));
  }

  friend bool operator==(const MultiStreamSequence&, const MultiStreamSequence&) = default;

 private:
  TokenList text_;
  std::vector<TokenList> speech_;
  std::size_t prompt_len_ = 0;
};

inline std::size_t ceil_div(std::size_t n, std::size_t d) { return (n + d - 1) / d; }

// Stream s (0-based) takes tokens s, s+S, s+2S, ... of the flat sequence;
// with 1-based positions that is p = s, s+S, ... for s in 1..S. A length not
// divisible by S is right-padded with speech_pad_id first.
inline InterleavedSpeech interleave_speech(std::span<const TokenId> tokens, std::size_t num_streams,
                                           const VocabSpec& vocab) {
  detail::require(num_streams >= 1, "interleave_speech: S must be >= 1");
  for (TokenId t : tokens)
    detail::require(t != vocab.speech_pad_id, "interleave_speech: input contains pad tokens");

  InterleavedSpeech out;
  out.report.original_speech_len = tokens.size();
  out.report.per_stream_len = ceil_div(tokens.size(), num_streams);
  out.report.padded_tail = out.report.per_stream_len * num_streams - tokens.size();

  out.streams.assign(num_streams, TokenList(out.report.per_stream_len, vocab.speech_pad_id));
  for (std::size_t p = 0; p < tokens.size(); ++p) out.streams[p % num_streams][p / num_streams] = tokens[p];
  return out;
}

// Round-robin merge, trailing pads removed.
inline TokenList deinterleave_speech(const std::vector<TokenList>& streams, const VocabSpec& vocab) {
  detail::require(!streams.empty(), "deinterleave_speech: no streams");
  const std::size_t len = streams.front().size();
  for (const auto& s : streams)
    detail::require(s.size() == len, "deinterleave_speech: unequal stream lengths");

  TokenList out;
  out.reserve(len * streams.size());
  for (std::size_t i = 0; i < len; ++i)
    for (const auto& s : streams) out.push_back(s[i]);
  while (!out.empty() && out.back() == vocab.speech_pad_id) out.pop_back();
  return out;
}

inline TokenList pad_text_to_length(std::span<const TokenId> text, std::size_t target_len,
                                    const VocabSpec& vocab) {
  if (text.size() > target_len)
    throw TextTooLong("text of length " + std::to_string(text.size()) +
                      " does not fit in " + std::to_string(target_len) + " frames");
  TokenList out(text.begin(), text.end());
  out.resize(target_len, vocab.text_pad_id);
  return out;
}

// Prompt region only: TQ over the interleaved SQ frames. Used both for
// training examples and as the decoding prompt.
inline MultiStreamSequence build_pslm_prompt(std::span<const TokenId> tq, std::span<const TokenId> sq,
                                             std::size_t num_streams, const VocabSpec& vocab,
                                             PromptInputs inputs = PromptInputs::kSpeechAndText) {
  detail::require(num_streams >= 1, "build_pslm_prompt: S must be >= 1");
  const bool use_tq = inputs != PromptInputs::kSpeechOnly;
  const bool use_sq = inputs != PromptInputs::kTextOnly;
  const std::span<const TokenId> tq_used = use_tq ? tq : std::span<const TokenId>{};
  const std::span<const TokenId> sq_used = use_sq ? sq : std::span<const TokenId>{};
  detail::require(!tq_used.empty() || !sq_used.empty(), "build_pslm_prompt: empty prompt");

  std::vector<TokenList> speech;
  std::size_t len = 0;
  if (!sq_used.empty()) {
    auto inter = interleave_speech(sq_used, num_streams, vocab);
    len = inter.report.per_stream_len;
    speech = std::move(inter.streams);
  } else {
    len = tq_used.size();
    speech.assign(num_streams, TokenList(len, vocab.speech_pad_id));
  }
  TokenList text = pad_text_to_length(tq_used, len, vocab);
  return MultiStreamSequence(std::move(text), std::move(speech), len);
}

// Full parallel training example: prompt region followed by the answer
// region, where every speech stream ends with speech_eos and the text
// stream carries TA, text_eos, then pads.
inline MultiStreamSequence build_pslm_example(std::span<const TokenId> tq, std::span<const TokenId> ta,
                                              std::span<const TokenId> sq, std::span<const TokenId> sa,
                                              std::size_t num_streams, const VocabSpec& vocab,
                                              PromptInputs inputs = PromptInputs::kSpeechAndText) {
  detail::require(!sa.empty(), "build_pslm_example: empty speech answer");
  MultiStreamSequence prompt = build_pslm_prompt(tq, sq, num_streams, vocab, inputs);

  auto answer = interleave_speech(sa, num_streams, vocab);
  const std::size_t answer_len = answer.report.per_stream_len + 1;
  TokenList answer_text(ta.begin(), ta.end());
  if (answer_text.size() + 1 > answer_len)
    throw TextTooLong("text answer of length " + std::to_string(ta.size()) +
                      " does not fit in speech answer of " + std::to_string(answer_len) + " frames");
  answer_text.push_back(vocab.text_eos_id);
  answer_text = pad_text_to_length(answer_text, answer_len, vocab);

  TokenList text = prompt.text();
  text.insert(text.end(), answer_text.begin(), answer_text.end());
  std::vector<TokenList> speech = prompt.speech_streams();
  for (std::size_t s = 0; s < num_streams; ++s) {
    speech[s].insert(speech[s].end(), answer.streams[s].begin(), answer.streams[s].end());
    speech[s].push_back(vocab.speech_eos_id);
  }
  return MultiStreamSequence(std::move(text), std::move(speech), prompt.length());
}

// Single-stream chain-of-modality layout over the union id space:
//   SQ, <text>, TQ, text_eos, TA, <speech>, SA, speech_eos
// text_eos separates TQ from TA so an SQ-only decode can recover TA.
inline TokenList build_com_example(std::span<const TokenId> tq, std::span<const TokenId> ta,
                                   std::span<const TokenId> sq, std::span<const TokenId> sa,
                                   const VocabSpec& vocab) {
  TokenList out;
  out.reserve(sq.size() + tq.size() + ta.size() + sa.size() + 4);
  for (TokenId t : sq) out.push_back(vocab.speech_to_union(t));
  out.push_back(vocab.com_text_marker_id);
  out.insert(out.end(), tq.begin(), tq.end());
  out.push_back(vocab.text_eos_id);
  out.insert(out.end(), ta.begin(), ta.end());
  out.push_back(vocab.com_speech_marker_id);
  for (TokenId t : sa) out.push_back(vocab.speech_to_union(t));
  out.push_back(vocab.speech_to_union(vocab.speech_eos_id));
  return out;
}

// Decoding prompt with a given (gold or transcribed) TQ: SQ, <text>, TQ, text_eos.
inline TokenList build_com_prompt_with_tq(std::span<const TokenId> sq, std::span<const TokenId> tq,
                                          const VocabSpec& vocab) {
  TokenList out;
  for (TokenId t : sq) out.push_back(vocab.speech_to_union(t));
  out.push_back(vocab.com_text_marker_id);
  out.insert(out.end(), tq.begin(), tq.end());
  out.push_back(vocab.text_eos_id);
  return out;
}

// Decoding prompt from speech alone: SQ, <text>.
inline TokenList build_com_prompt_sq_only(std::span<const TokenId> sq, const VocabSpec& vocab) {
  TokenList out;
  for (TokenId t : sq) out.push_back(vocab.speech_to_union(t));
  out.push_back(vocab.com_text_marker_id);
  return out;
}

}  // namespace pslm
