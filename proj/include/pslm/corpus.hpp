#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/vocab.hpp"

namespace pslm {

// Placeholder emitted into a transcript for each unmatched speech run.
inline constexpr TokenId kUnknownTextToken = -1;

struct UnmatchedRun {
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const UnmatchedRun&, const UnmatchedRun&) = default;
};

struct Transcription {
  TokenList text;
  std::vector<UnmatchedRun> unmatched;
  // text with one kUnknownTextToken per unmatched run, in speech order.
  TokenList with_unknowns;
};

// Deterministic text -> speech-token mapping. Every text content id owns a
// fixed signature of speech content tokens; no two signatures share their
// first two tokens, so the signature set is prefix-free and greedy matching
// inverts concatenations exactly.
class ToyTTS {
 public:
  ToyTTS(const VocabSpec& vocab, double expansion_mean = 11.1, std::uint64_t seed = 1234)
      : vocab_(vocab), expansion_mean_(expansion_mean), seed_(seed) {
    vocab_.validate();
    detail::require(expansion_mean >= 1.0, "expansion_mean must be >= 1");
    const auto speech_ids = vocab_.speech_content_ids();
    detail::require(speech_ids.size() >= 2, "speech vocabulary too small for toy TTS");
    const auto text_ids = vocab_.text_content_ids();
    detail::require(text_ids.size() <= speech_ids.size() * speech_ids.size(),
                    "text vocabulary too large for unique signature prefixes");

    const long center = std::max(2L, std::lround(expansion_mean));
    const long lo = std::max(2L, center - 3);
    const long hi = center + 3;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<long> len_dist(lo, hi);
    std::uniform_int_distribution<std::size_t> tok_dist(0, speech_ids.size() - 1);

    signatures_.assign(static_cast<std::size_t>(vocab_.text_vocab_size), TokenList{});
    std::set<std::pair<TokenId, TokenId>> used_prefixes;
    for (TokenId id : text_ids) {
      const auto len = static_cast<std::size_t>(len_dist(rng));
      TokenList sig;
      std::pair<TokenId, TokenId> prefix;
      do {
        prefix = {speech_ids[tok_dist(rng)], speech_ids[tok_dist(rng)]};
      } while (used_prefixes.count(prefix) != 0);
      used_prefixes.insert(prefix);
      sig.push_back(prefix.first);
      sig.push_back(prefix.second);
      while (sig.size() < len) sig.push_back(speech_ids[tok_dist(rng)]);
      by_prefix_[prefix] = id;
      signatures_[static_cast<std::size_t>(id)] = std::move(sig);
    }
  }

  const VocabSpec& vocab() const { return vocab_; }
  double expansion_mean() const { return expansion_mean_; }
  std::uint64_t seed() const { return seed_; }

  const TokenList& signature(TokenId text_id) const {
    detail::require(vocab_.is_text_content(text_id), "toy_tts: not a text content id");
    return signatures_[static_cast<std::size_t>(text_id)];
  }

  // Mean signature length over the text content vocabulary.
  double mean_expansion() const {
    const auto ids = vocab_.text_content_ids();
    double sum = 0.0;
    for (TokenId id : ids) sum += static_cast<double>(signature(id).size());
    return sum / static_cast<double>(ids.size());
  }

  TokenList synthesize(std::span<const TokenId> text) const {
    TokenList out;
    for (TokenId t : text) {
      const auto& sig = signature(t);
      out.insert(out.end(), sig.begin(), sig.end());
    }
    return out;
  }

  // Greedy signature matching; tokens that start no signature are
  // collected into unmatched runs.
  Transcription invert(std::span<const TokenId> speech) const {
    Transcription tr;
    std::size_t p = 0;
    std::size_t run_start = 0, run_len = 0;
    auto close_run = [&] {
      if (run_len == 0) return;
      tr.unmatched.push_back({run_start, run_len});
      tr.with_unknowns.push_back(kUnknownTextToken);
      run_len = 0;
    };
    while (p < speech.size()) {
      const TokenId match = match_at(speech, p);
      if (match >= 0) {
        close_run();
        tr.text.push_back(match);
        tr.with_unknowns.push_back(match);
        p += signatures_[static_cast<std::size_t>(match)].size();
      } else {
        if (run_len == 0) run_start = p;
        ++run_len;
        ++p;
      }
    }
    close_run();
    return tr;
  }

 private:
  TokenId match_at(std::span<const TokenId> speech, std::size_t p) const {
    if (p + 2 > speech.size()) return -1;
    auto it = by_prefix_.find({speech[p], speech[p + 1]});
    if (it == by_prefix_.end()) return -1;
    const auto& sig = signatures_[static_cast<std::size_t>(it->second)];
    if (p + sig.size() > speech.size()) return -1;
    if (!std::equal(sig.begin(), sig.end(), speech.begin() + static_cast<std::ptrdiff_t>(p))) return -1;
    return it->second;
  }

  VocabSpec vocab_;
  double expansion_mean_;
  std::uint64_t seed_;
  std::vector<TokenList> signatures_;
  std::map<std::pair<TokenId, TokenId>, TokenId> by_prefix_;
};

struct QAPair {
  std::int64_t id = 0;
  bool heldout = false;
  TokenList tq, ta, sq, sa;
  friend bool operator==(const QAPair&, const QAPair&) = default;
};

struct CorpusConfig {
  std::size_t n_pairs = 32;
  std::size_t n_heldout = 4;
  double expansion_mean = 11.1;
  std::size_t max_text_len = 6;
  std::uint64_t seed = 0;
  std::uint64_t tts_seed = 1234;
  VocabSpec vocab;

  void validate() const {
    vocab.validate();
    detail::require(n_pairs > 0, "n_pairs must be positive");
    detail::require(expansion_mean >= 1.0, "expansion_mean must be >= 1");
    detail::require(max_text_len >= 1, "max_text_len must be >= 1");
  }
};

// Length quantiles (min, 25%, 50%, 75%, max) of training-set text questions
// and answers, in tokens.
inline constexpr std::array<double, 5> kQuestionLengthQuantiles{2, 19, 32, 51, 148};
inline constexpr std::array<double, 5> kAnswerLengthQuantiles{1, 15, 29, 50, 147};

// Piecewise-linear inverse CDF through the quantile knots, rescaled so the
// maximum maps to max_len; result clamped to [1, max_len].
inline std::size_t quantile_length(const std::array<double, 5>& knots, double u, std::size_t max_len) {
  u = std::clamp(u, 0.0, 1.0);
  const double pos = u * 4.0;
  const auto seg = std::min<std::size_t>(3, static_cast<std::size_t>(pos));
  const double frac = pos - static_cast<double>(seg);
  const double raw = knots[seg] + frac * (knots[seg + 1] - knots[seg]);
  const double scaled = raw * static_cast<double>(max_len) / knots[4];
  const long len = std::lround(scaled);
  return static_cast<std::size_t>(std::clamp<long>(len, 1, static_cast<long>(max_len)));
}

// n_pairs training pairs followed by n_heldout held-out pairs. Questions are
// unique so every answer is a function of its prompt.
inline std::vector<QAPair> generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const ToyTTS tts(cfg.vocab, cfg.expansion_mean, cfg.tts_seed);
  const auto content = cfg.vocab.text_content_ids();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);

  auto draw_text = [&](const std::array<double, 5>& knots) {
    const std::size_t len = quantile_length(knots, unit(rng), cfg.max_text_len);
    TokenList t(len);
    for (auto& x : t) x = content[pick(rng)];
    return t;
  };

  std::set<TokenList> questions;
  std::vector<QAPair> out;
  const std::size_t total = cfg.n_pairs + cfg.n_heldout;
  std::size_t attempts = 0;
  while (out.size() < total) {
    detail::require(++attempts < 1000 * total + 1000, "generate_corpus: cannot draw enough unique questions");
    TokenList tq = draw_text(kQuestionLengthQuantiles);
    if (!questions.insert(tq).second) continue;
    QAPair p;
    p.id = static_cast<std::int64_t>(out.size());
    p.heldout = out.size() >= cfg.n_pairs;
    p.tq = std::move(tq);
    p.ta = draw_text(kAnswerLengthQuantiles);
    p.sq = tts.synthesize(p.tq);
    p.sa = tts.synthesize(p.ta);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<QAPair> training_split(const std::vector<QAPair>& corpus) {
  std::vector<QAPair> out;
  std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out), [](const QAPair& p) { return !p.heldout; });
  return out;
}

inline std::vector<QAPair> heldout_split(const std::vector<QAPair>& corpus) {
  std::vector<QAPair> out;
  std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out), [](const QAPair& p) { return p.heldout; });
  return out;
}

}  // namespace pslm
