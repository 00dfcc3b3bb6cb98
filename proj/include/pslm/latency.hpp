#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pslm/errors.hpp"
#include "pslm/stream_vocoder.hpp"

namespace pslm {

// Delays in seconds; tps is decode-phase tokens per second.
struct LatencyParams {
  double d_s2t = 0.05;   // speech tokenization
  double d_sq = 0.05;    // prefill
  double d_asr = 0.2;    // external ASR
  double d_t2s = 0.01;   // speech detokenization
  double tps = 50.0;
  std::size_t streams = 1;
  std::size_t receptive_field = 26;

  void validate() const {
    detail::require(d_s2t >= 0 && d_sq >= 0 && d_asr >= 0 && d_t2s >= 0, "delays must be non-negative");
    detail::require(tps > 0, "tokens per second must be positive");
    detail::require(streams >= 1, "streams must be >= 1");
    detail::require(receptive_field >= 1, "receptive field must be >= 1");
  }
};

struct LengthRecord {
  std::size_t n_tq = 0, n_ta = 0, n_sq = 0, n_sa = 0;
};

// How the baseline obtains TQ: generated from SQ, transcribed by ASR, or given.
enum class ComInput { kSpeechOnly, kAsr, kGold };

enum class Method { kComSQ, kComASR, kComGold, kPslmASR, kPslmGold };

struct MethodSpec {
  Method method = Method::kPslmGold;
  // Speech streams (parallel methods only).
  std::size_t streams = 1;

  bool parallel() const { return method == Method::kPslmASR || method == Method::kPslmGold; }

  std::string name() const {
    switch (method) {
      case Method::kComSQ: return "CoM-SQ";
      case Method::kComASR: return "CoM-ASR";
      case Method::kComGold: return "CoM-Gold";
      case Method::kPslmASR:
      case Method::kPslmGold: {
        std::string n = "PSLM";
        if (streams > 1) n += "-" + std::to_string(streams) + "x";
        return n + (method == Method::kPslmASR ? "-ASR" : "-Gold");
      }
    }
    return "unknown";
  }
};

// Baseline pipeline: tokenize, prefill, then decode TQ (speech-only input),
// TA and the first detokenizer window before audio starts. ASR input adds
// the ASR delay on top; gold input skips generating TQ.
inline double latency_com(const LengthRecord& rec, const LatencyParams& p, ComInput input) {
  p.validate();
  std::size_t n_dec = n_offset(p.receptive_field) + rec.n_ta;
  if (input == ComInput::kSpeechOnly) n_dec += rec.n_tq;
  double lat = p.d_s2t + p.d_sq + static_cast<double>(n_dec) / p.tps + p.d_t2s;
  if (input == ComInput::kAsr) lat += p.d_asr;
  return lat;
}

// Parallel pipeline: speech tokenization overlaps ASR, and the first
// detokenizer window arrives S times faster. Independent of TA length.
inline double latency_pslm(const LatencyParams& p, bool asr) {
  p.validate();
  return (asr ? p.d_asr : 0.0) + p.d_sq +
         static_cast<double>(n_offset(p.receptive_field)) / (p.tps * static_cast<double>(p.streams)) + p.d_t2s;
}

inline double latency_for(const LengthRecord& rec, const LatencyParams& base, const MethodSpec& m) {
  LatencyParams p = base;
  switch (m.method) {
    case Method::kComSQ: return latency_com(rec, p, ComInput::kSpeechOnly);
    case Method::kComASR: return latency_com(rec, p, ComInput::kAsr);
    case Method::kComGold: return latency_com(rec, p, ComInput::kGold);
    case Method::kPslmASR:
      p.streams = m.streams;
      return latency_pslm(p, true);
    case Method::kPslmGold:
      p.streams = m.streams;
      return latency_pslm(p, false);
  }
  return 0.0;
}

// Lower-middle element for even counts.
inline double lower_median(std::vector<double> v) {
  detail::require(!v.empty(), "median of empty list");
  const std::size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

struct SimulationResult {
  double median = 0.0;
  std::vector<double> all;
};

inline SimulationResult simulate_dataset(std::span<const LengthRecord> records, const LatencyParams& params,
                                         const MethodSpec& method) {
  detail::require(!records.empty(), "simulate_dataset: no records");
  SimulationResult r;
  r.all.reserve(records.size());
  for (const auto& rec : records) r.all.push_back(latency_for(rec, params, method));
  r.median = lower_median(r.all);
  return r;
}

struct CurvePoint {
  std::string method;
  double tps = 0.0;
  std::size_t n_ta = 0;
  double seconds = 0.0;
};

// Latency as a function of TA length. Each method carries its own TPS;
// the TQ length only matters for the speech-only baseline and is held fixed.
struct CurveMethod {
  MethodSpec spec;
  double tps = 50.0;
};

inline std::vector<CurvePoint> latency_curve(std::span<const std::size_t> n_ta_values, const LatencyParams& params,
                                             std::span<const CurveMethod> methods, std::size_t n_tq = 0) {
  detail::require(!n_ta_values.empty(), "latency_curve: empty TA grid");
  std::vector<CurvePoint> out;
  for (const auto& m : methods) {
    LatencyParams p = params;
    p.tps = m.tps;
    for (std::size_t n_ta : n_ta_values) {
      LengthRecord rec;
      rec.n_ta = n_ta;
      rec.n_tq = n_tq;
      out.push_back({m.spec.name(), m.tps, n_ta, latency_for(rec, p, m.spec)});
    }
  }
  return out;
}

// The method rows of the automatic-evaluation latency column.
inline std::vector<MethodSpec> table_methods() {
  return {{Method::kComGold, 1}, {Method::kPslmGold, 1}, {Method::kComSQ, 1},   {Method::kComASR, 1},
          {Method::kPslmASR, 1}, {Method::kPslmGold, 2}, {Method::kPslmGold, 3}};
}

inline void write_curve_csv(std::ostream& os, std::span<const CurvePoint> pts) {
  os << "method,tps,n_ta,latency_s\n";
  for (const auto& p : pts) os << p.method << ',' << p.tps << ',' << p.n_ta << ',' << p.seconds << '\n';
}

}  // namespace pslm
