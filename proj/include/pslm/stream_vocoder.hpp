#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/vocab.hpp"

namespace pslm {

struct VocoderSpec {
  // Receptive field in tokens. 26 for 24 kHz output from 50 Hz tokens.
  std::size_t receptive_field = 26;
  // Samples per token: product of the upsampling rates [8, 6, 5, 2].
  std::size_t upsample = 8 * 6 * 5 * 2;
  std::size_t sample_rate = 24000;

  void validate() const {
    detail::require(receptive_field >= 1, "receptive field must be >= 1");
    detail::require(upsample >= 1, "upsample must be >= 1");
    detail::require(sample_rate >= 1, "sample_rate must be >= 1");
  }
  std::size_t half_window() const { return receptive_field / 2; }
};

// Tokens needed before the first fragment: floor(R/2) + 1.
inline std::size_t n_offset(std::size_t receptive_field) {
  detail::require(receptive_field >= 1, "n_offset: receptive field must be >= 1");
  return receptive_field / 2 + 1;
}

struct FragmentPlan {
  std::size_t index = 0;
  // Inclusive token window [first, last], clamped to the sequence.
  std::size_t window_first = 0;
  std::size_t window_last = 0;
  std::size_t ready_after = 0;
  std::size_t sample_begin = 0;
  std::size_t sample_end = 0;
  friend bool operator==(const FragmentPlan&, const FragmentPlan&) = default;
};

inline FragmentPlan plan_fragment(std::size_t i, std::size_t n_tokens, const VocoderSpec& spec) {
  const std::size_t h = spec.half_window();
  FragmentPlan p;
  p.index = i;
  p.window_first = i >= h ? i - h : 0;
  p.window_last = std::min(n_tokens - 1, i + h);
  p.ready_after = std::min(i + h + 1, n_tokens);
  p.sample_begin = i * spec.upsample;
  p.sample_end = (i + 1) * spec.upsample;
  return p;
}

inline std::vector<FragmentPlan> fragment_schedule(std::size_t n_tokens, const VocoderSpec& spec) {
  spec.validate();
  detail::require(n_tokens >= 1, "fragment_schedule: need at least one token");
  std::vector<FragmentPlan> out;
  out.reserve(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) out.push_back(plan_fragment(i, n_tokens, spec));
  return out;
}

inline std::vector<FragmentPlan> fragment_schedule(std::size_t n_tokens, std::size_t receptive_field) {
  VocoderSpec spec;
  spec.receptive_field = receptive_field;
  return fragment_schedule(n_tokens, spec);
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Stand-in synthesizer: every token owns a hash-derived oscillator, and
// the fragment for the center token blends the oscillators of the window
// with triangular weights. The result is a weighted mean of sines, so it
// stays in [-1, 1], and it reads nothing outside the window.
inline std::vector<double> toy_waveform(std::span<const TokenId> window, std::size_t center, std::size_t upsample,
                                        std::size_t sample_rate = 24000) {
  detail::require(!window.empty(), "toy_waveform: empty window");
  detail::require(center < window.size(), "toy_waveform: center outside window");
  detail::require(upsample >= 1, "toy_waveform: upsample must be >= 1");

  struct Osc {
    double freq, phase, weight;
  };
  std::vector<Osc> osc;
  osc.reserve(window.size());
  double wsum = 0.0;
  const double span = static_cast<double>(window.size());
  for (std::size_t j = 0; j < window.size(); ++j) {
    const std::uint64_t h = detail::mix64(static_cast<std::uint64_t>(static_cast<std::uint32_t>(window[j])));
    const double freq = 80.0 + static_cast<double>(h % 4000) / 10.0;
    const double phase = static_cast<double>((h >> 16) % 6283) / 1000.0;
    const double dist = std::abs(static_cast<double>(j) - static_cast<double>(center));
    const double w = 1.0 - dist / (span + 1.0);
    osc.push_back({freq, phase, w});
    wsum += w;
  }
  std::vector<double> out(upsample);
  for (std::size_t n = 0; n < upsample; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(sample_rate);
    double acc = 0.0;
    for (const auto& o : osc) acc += o.weight * std::sin(2.0 * std::numbers::pi * o.freq * t + o.phase);
    out[n] = std::clamp(acc / wsum, -1.0, 1.0);
  }
  return out;
}

struct Fragment {
  std::size_t index = 0;
  // Tokens received when the fragment was emitted.
  std::size_t tokens_seen = 0;
  std::vector<double> samples;
};

// Synthesis of the whole sequence at once.
inline std::vector<double> offline_synthesize(std::span<const TokenId> tokens, const VocoderSpec& spec) {
  spec.validate();
  std::vector<double> out;
  if (tokens.empty()) return out;
  out.reserve(tokens.size() * spec.upsample);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto p = plan_fragment(i, tokens.size(), spec);
    const auto win = tokens.subspan(p.window_first, p.window_last - p.window_first + 1);
    const auto frag = toy_waveform(win, i - p.window_first, spec.upsample, spec.sample_rate);
    out.insert(out.end(), frag.begin(), frag.end());
  }
  return out;
}

// Incremental synthesis: fragment i is emitted as soon as tokens
// [.., i + floor(R/2)] have arrived; the last floor(R/2) fragments are
// released by finish(), when the sequence length is known.
class StreamingSynthesizer {
 public:
  explicit StreamingSynthesizer(VocoderSpec spec) : spec_(spec) { spec_.validate(); }

  std::vector<Fragment> push(TokenId token) {
    detail::require(!finished_, "StreamingSynthesizer: push after finish");
    tokens_.push_back(token);
    std::vector<Fragment> out;
    const std::size_t h = spec_.half_window();
    while (next_ + h + 1 <= tokens_.size()) out.push_back(emit(next_++, /*n_known=*/0));
    return out;
  }

  std::vector<Fragment> finish() {
    finished_ = true;
    std::vector<Fragment> out;
    while (next_ < tokens_.size()) out.push_back(emit(next_++, tokens_.size()));
    return out;
  }

  std::size_t tokens_seen() const { return tokens_.size(); }

 private:
  Fragment emit(std::size_t i, std::size_t n_known) {
    const std::size_t h = spec_.half_window();
    const std::size_t first = i >= h ? i - h : 0;
    // Before finish() the window end is i + h, which is available.
    const std::size_t last = n_known == 0 ? i + h : std::min(n_known - 1, i + h);
    const std::span<const TokenId> win(tokens_.data() + first, last - first + 1);
    return Fragment{i, tokens_.size(), toy_waveform(win, i - first, spec_.upsample, spec_.sample_rate)};
  }

  VocoderSpec spec_;
  std::vector<TokenId> tokens_;
  std::size_t next_ = 0;
  bool finished_ = false;
};

// Convenience driver: streams `tokens` one at a time.
inline std::vector<Fragment> streaming_synthesize(std::span<const TokenId> tokens, const VocoderSpec& spec) {
  StreamingSynthesizer synth(spec);
  std::vector<Fragment> out;
  for (TokenId t : tokens) {
    auto f = synth.push(t);
    out.insert(out.end(), std::make_move_iterator(f.begin()), std::make_move_iterator(f.end()));
  }
  auto f = synth.finish();
  out.insert(out.end(), std::make_move_iterator(f.begin()), std::make_move_iterator(f.end()));
  return out;
}

// Ordered, bounded single-producer/single-consumer channel.
template <typename T>
class BoundedChannel {
 public:
  explicit BoundedChannel(std::size_t capacity) : capacity_(capacity) {
    detail::require(capacity >= 1, "BoundedChannel: capacity must be >= 1");
  }

  void send(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return queue_.size() < capacity_; });
    detail::require(!closed_, "BoundedChannel: send after close");
    queue_.push_back(std::move(value));
    not_empty_.notify_one();
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
  }

  // Empty optional once the channel is closed and drained.
  std::optional<T> receive() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) return std::nullopt;
    T v = std::move(queue_.front());
    queue_.pop_front();
    not_full_.notify_one();
    return v;
  }

 private:
  std::size_t capacity_;
  std::deque<T> queue_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

// 16-bit PCM mono RIFF/WAVE.
inline void write_wav(std::ostream& os, std::span<const double> samples, std::uint32_t sample_rate = 24000) {
  auto put16 = [&](std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
  };
  auto put32 = [&](std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
  };
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  put32(36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put32(16);
  put16(1);  // PCM
  put16(1);  // mono
  put32(sample_rate);
  put32(sample_rate * 2);
  put16(2);
  put16(16);
  os.write("data", 4);
  put32(data_bytes);
  for (double s : samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0))));
  }
}

}  // namespace pslm
