#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "pslm/errors.hpp"

namespace pslm {

using TokenId = std::int32_t;
using TokenList = std::vector<TokenId>;

// Text and speech tokens live in separate id spaces. In the single-stream
// (chain-of-modality) layout both are mapped into one union space where
// speech ids are shifted up by text_vocab_size.
struct VocabSpec {
  std::int32_t text_vocab_size = 64;
  std::int32_t speech_vocab_size = 130;

  TokenId text_pad_id = 0;
  TokenId text_eos_id = 1;
  TokenId com_text_marker_id = 2;
  TokenId com_speech_marker_id = 3;

  TokenId speech_pad_id = 128;
  TokenId speech_eos_id = 129;

  void validate() const {
    detail::require(text_vocab_size > 0 && speech_vocab_size > 0, "vocab sizes must be positive");
    const std::vector<TokenId> text_specials{text_pad_id, text_eos_id, com_text_marker_id,
                                             com_speech_marker_id};
    for (TokenId id : text_specials)
      detail::require(id >= 0 && id < text_vocab_size, "text special id out of range");
    detail::require(std::set<TokenId>(text_specials.begin(), text_specials.end()).size() == 4,
                    "text special ids must be distinct");
    for (TokenId id : {speech_pad_id, speech_eos_id})
      detail::require(id >= 0 && id < speech_vocab_size, "speech special id out of range");
    detail::require(speech_pad_id != speech_eos_id, "speech special ids must be distinct");
  }

  bool is_text_special(TokenId id) const {
    return id == text_pad_id || id == text_eos_id || id == com_text_marker_id ||
           id == com_speech_marker_id;
  }
  bool is_speech_special(TokenId id) const { return id == speech_pad_id || id == speech_eos_id; }

  bool is_text_content(TokenId id) const {
    return id >= 0 && id < text_vocab_size && !is_text_special(id);
  }
  bool is_speech_content(TokenId id) const {
    return id >= 0 && id < speech_vocab_size && !is_speech_special(id);
  }

  std::vector<TokenId> text_content_ids() const {
    std::vector<TokenId> out;
    for (TokenId id = 0; id < text_vocab_size; ++id)
      if (!is_text_special(id)) out.push_back(id);
    return out;
  }
  std::vector<TokenId> speech_content_ids() const {
    std::vector<TokenId> out;
    for (TokenId id = 0; id < speech_vocab_size; ++id)
      if (!is_speech_special(id)) out.push_back(id);
    return out;
  }

  // Union id space used by the single-stream baseline.
  std::int32_t union_vocab_size() const { return text_vocab_size + speech_vocab_size; }
  TokenId speech_to_union(TokenId speech_id) const { return speech_id + text_vocab_size; }
  TokenId union_to_speech(TokenId union_id) const { return union_id - text_vocab_size; }
  bool union_is_speech(TokenId union_id) const {
    return union_id >= text_vocab_size && union_id < union_vocab_size();
  }
  bool union_is_text(TokenId union_id) const {
    return union_id >= 0 && union_id < text_vocab_size;
  }

  friend bool operator==(const VocabSpec&, const VocabSpec&) = default;
};

}  // namespace pslm
