#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pslm/corpus.hpp"
#include "pslm/decoding.hpp"
#include "pslm/errors.hpp"
#include "pslm/latency.hpp"
#include "pslm/model.hpp"
#include "pslm/token_streams.hpp"

namespace pslm {

// Unit-cost Levenshtein distance, two-row dynamic program.
template <typename T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Character error rate in percent; symbols are text tokens.
template <typename T>
double cer(std::span<const T> reference, std::span<const T> hypothesis) {
  detail::require(!reference.empty(), "cer: empty reference");
  return 100.0 * static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

inline double cer(const std::string& reference, const std::string& hypothesis) {
  return cer(std::span<const char>(reference), std::span<const char>(hypothesis));
}

struct EvalReport {
  double cer = 0.0;
  double failure_rate = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_failed = 0;
  std::size_t n_no_eos = 0;
  std::size_t n_wrong_modality = 0;
  // Non-failed samples entering the CER, with their summed edits and
  // reference lengths.
  std::size_t cer_samples = 0;
  std::size_t cer_edits = 0;
  std::size_t cer_ref_len = 0;
};

inline EvalReport failure_rate(std::span<const DecodeOutcome> outcomes) {
  detail::require(!outcomes.empty(), "failure_rate: no outcomes");
  EvalReport r;
  r.n_samples = outcomes.size();
  for (const auto& o : outcomes) {
    if (o.failure == Failure::kNoEos) ++r.n_no_eos;
    if (o.failure == Failure::kWrongModality) ++r.n_wrong_modality;
  }
  r.n_failed = r.n_no_eos + r.n_wrong_modality;
  r.failure_rate = 100.0 * static_cast<double>(r.n_failed) / static_cast<double>(r.n_samples);
  return r;
}

// Adds CER over non-failed outcomes: generated TA is the reference and the
// toy transcription of the generated speech the hypothesis. Each unmatched
// speech run counts as one unknown symbol. Corpus-level rate: summed edits
// over summed reference lengths.
inline void add_alignment_cer(EvalReport& r, std::span<const DecodeOutcome> outcomes, const ToyTTS& tts) {
  for (const auto& o : outcomes) {
    if (o.failure != Failure::kNone) continue;
    const auto tr = tts.invert(o.speech_answer);
    r.cer_edits += edit_distance(std::span<const TokenId>(o.text_answer), std::span<const TokenId>(tr.with_unknowns));
    r.cer_ref_len += o.text_answer.size();
    ++r.cer_samples;
  }
  // Empty references with non-empty transcripts still count as errors.
  r.cer = 100.0 * static_cast<double>(r.cer_edits) / static_cast<double>(std::max<std::size_t>(r.cer_ref_len, 1));
}

enum class DecodeMode { kPslm, kCom };

struct EvalOptions {
  DecodeMode mode = DecodeMode::kPslm;
  ComInput input = ComInput::kGold;
  PromptInputs prompt_inputs = PromptInputs::kSpeechAndText;
  SamplingParams sampling;
};

struct EvalResult {
  EvalReport report;
  std::vector<DecodeOutcome> outcomes;
};

// Decodes every pair from its prompt and scores the outcomes. The ASR input
// uses the toy transcription of SQ; sampling seeds are offset by pair id.
template <typename Real>
EvalResult evaluate(const Model<Real>& model, std::span<const QAPair> pairs, const ToyTTS& tts,
                    const EvalOptions& opt) {
  detail::require(!pairs.empty(), "evaluate: empty corpus");
  const auto& vocab = model.config().vocab;
  EvalResult res;
  res.outcomes.reserve(pairs.size());
  for (const auto& p : pairs) {
    SamplingParams sp = opt.sampling;
    sp.seed = opt.sampling.seed + static_cast<std::uint64_t>(p.id);
    const TokenList tq = opt.input == ComInput::kAsr ? tts.invert(p.sq).text : p.tq;
    if (opt.mode == DecodeMode::kPslm) {
      const auto prompt =
          build_pslm_prompt(tq, p.sq, model.config().num_speech_streams, vocab, opt.prompt_inputs);
      res.outcomes.push_back(decode_pslm(model, prompt, sp));
    } else {
      const bool with_tq = opt.input != ComInput::kSpeechOnly;
      const TokenList prompt = with_tq ? build_com_prompt_with_tq(p.sq, tq, vocab) : build_com_prompt_sq_only(p.sq, vocab);
      res.outcomes.push_back(decode_com(model, prompt, sp, with_tq));
    }
  }
  res.report = failure_rate(res.outcomes);
  add_alignment_cer(res.report, res.outcomes, tts);
  return res;
}

inline void write_report_csv(std::ostream& os, const EvalReport& r, bool header = true) {
  if (header) os << "n_samples,cer,failure_rate,n_failed,n_no_eos,n_wrong_modality,cer_samples\n";
  os << r.n_samples << ',' << r.cer << ',' << r.failure_rate << ',' << r.n_failed << ',' << r.n_no_eos << ','
     << r.n_wrong_modality << ',' << r.cer_samples << '\n';
}

}  // namespace pslm
