#pragma once

#include <random>
#include <vector>

#include "pslm/pslm.hpp"

namespace pslm::fixtures {

// Small vocabularies keep gradient checks and memorization runs fast.
inline VocabSpec tiny_vocab() {
  VocabSpec v;
  v.text_vocab_size = 12;
  v.speech_vocab_size = 20;
  v.speech_pad_id = 18;
  v.speech_eos_id = 19;
  return v;
}

inline ModelConfig tiny_config(std::size_t streams, std::uint64_t seed = 7) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.ffn_size = 32;
  c.num_speech_streams = streams;
  c.vocab = tiny_vocab();
  c.seed = seed;
  c.init_std = 0.3;
  return c;
}

inline TokenList random_speech(std::mt19937_64& rng, const VocabSpec& v, std::size_t n) {
  const auto ids = v.speech_content_ids();
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
  TokenList out(n);
  for (auto& t : out) t = ids[pick(rng)];
  return out;
}

inline TokenList random_text(std::mt19937_64& rng, const VocabSpec& v, std::size_t n) {
  const auto ids = v.text_content_ids();
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
  TokenList out(n);
  for (auto& t : out) t = ids[pick(rng)];
  return out;
}

// A short parallel example built from random content.
inline MultiStreamSequence random_example(std::mt19937_64& rng, const VocabSpec& v, std::size_t streams) {
  const auto tq = random_text(rng, v, 2), ta = random_text(rng, v, 2);
  const auto sq = random_speech(rng, v, 7), sa = random_speech(rng, v, 8);
  return build_pslm_example(tq, ta, sq, sa, streams, v);
}

}  // namespace pslm::fixtures
