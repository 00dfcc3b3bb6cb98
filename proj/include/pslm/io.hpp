#pragma once

#include <fstream>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pslm/corpus.hpp"
#include "pslm/decoding.hpp"
#include "pslm/errors.hpp"
#include "pslm/latency.hpp"
#include "pslm/metrics.hpp"
#include "pslm/model.hpp"
#include "pslm/training.hpp"

namespace pslm::io {

using nlohmann::json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kCorpusVersion = 1;

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  if (!j.is_object()) throw FormatError(what + ": expected an object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [k, _] : j.items())
    if (allowed.count(k) == 0) throw FormatError(what + ": unknown key '" + k + "'");
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline json to_json(const VocabSpec& v) {
  return {{"text_vocab_size", v.text_vocab_size},     {"speech_vocab_size", v.speech_vocab_size},
          {"text_pad_id", v.text_pad_id},             {"text_eos_id", v.text_eos_id},
          {"com_text_marker_id", v.com_text_marker_id}, {"com_speech_marker_id", v.com_speech_marker_id},
          {"speech_pad_id", v.speech_pad_id},         {"speech_eos_id", v.speech_eos_id}};
}

inline void from_json(const json& j, VocabSpec& v) {
  detail::reject_unknown_keys(j,
                              {"text_vocab_size", "speech_vocab_size", "text_pad_id", "text_eos_id",
                               "com_text_marker_id", "com_speech_marker_id", "speech_pad_id", "speech_eos_id"},
                              "vocab");
  detail::get_if(j, "text_vocab_size", v.text_vocab_size);
  detail::get_if(j, "speech_vocab_size", v.speech_vocab_size);
  detail::get_if(j, "text_pad_id", v.text_pad_id);
  detail::get_if(j, "text_eos_id", v.text_eos_id);
  detail::get_if(j, "com_text_marker_id", v.com_text_marker_id);
  detail::get_if(j, "com_speech_marker_id", v.com_speech_marker_id);
  detail::get_if(j, "speech_pad_id", v.speech_pad_id);
  detail::get_if(j, "speech_eos_id", v.speech_eos_id);
}

inline json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},   {"hidden_size", c.hidden_size}, {"num_heads", c.num_heads},
          {"ffn_size", c.ffn_size},       {"max_context", c.max_context}, {"num_speech_streams", c.num_speech_streams},
          {"vocab", to_json(c.vocab)},    {"seed", c.seed},               {"init_std", c.init_std}};
}

inline void from_json(const json& j, ModelConfig& c) {
  detail::reject_unknown_keys(j,
                              {"num_layers", "hidden_size", "num_heads", "ffn_size", "max_context",
                               "num_speech_streams", "vocab", "seed", "init_std"},
                              "model");
  detail::get_if(j, "num_layers", c.num_layers);
  detail::get_if(j, "hidden_size", c.hidden_size);
  detail::get_if(j, "num_heads", c.num_heads);
  detail::get_if(j, "ffn_size", c.ffn_size);
  detail::get_if(j, "max_context", c.max_context);
  detail::get_if(j, "num_speech_streams", c.num_speech_streams);
  if (j.contains("vocab")) from_json(j.at("vocab"), c.vocab);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "init_std", c.init_std);
}

inline json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},   {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"weighted_loss", c.weighted_loss}, {"seed", c.seed}, {"clip_norm", c.clip_norm}};
}

inline void from_json(const json& j, TrainConfig& c) {
  detail::reject_unknown_keys(j, {"steps", "batch_size", "learning_rate", "weighted_loss", "seed", "clip_norm"},
                              "train");
  detail::get_if(j, "steps", c.steps);
  detail::get_if(j, "batch_size", c.batch_size);
  detail::get_if(j, "learning_rate", c.learning_rate);
  detail::get_if(j, "weighted_loss", c.weighted_loss);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "clip_norm", c.clip_norm);
}

inline json to_json(const SamplingParams& s) {
  return {{"temperature", s.temperature}, {"top_k", s.top_k}, {"top_p", s.top_p},
          {"seed", s.seed}, {"max_total_len", s.max_total_len}};
}

inline void from_json(const json& j, SamplingParams& s) {
  detail::reject_unknown_keys(j, {"temperature", "top_k", "top_p", "seed", "max_total_len"}, "sampling");
  detail::get_if(j, "temperature", s.temperature);
  detail::get_if(j, "top_k", s.top_k);
  detail::get_if(j, "top_p", s.top_p);
  detail::get_if(j, "seed", s.seed);
  detail::get_if(j, "max_total_len", s.max_total_len);
}

inline json to_json(const LatencyParams& p) {
  return {{"d_s2t", p.d_s2t}, {"d_sq", p.d_sq}, {"d_asr", p.d_asr}, {"d_t2s", p.d_t2s},
          {"tps", p.tps},     {"streams", p.streams}, {"receptive_field", p.receptive_field}};
}

inline void from_json(const json& j, LatencyParams& p) {
  detail::reject_unknown_keys(j, {"d_s2t", "d_sq", "d_asr", "d_t2s", "tps", "streams", "receptive_field"},
                              "latency");
  detail::get_if(j, "d_s2t", p.d_s2t);
  detail::get_if(j, "d_sq", p.d_sq);
  detail::get_if(j, "d_asr", p.d_asr);
  detail::get_if(j, "d_t2s", p.d_t2s);
  detail::get_if(j, "tps", p.tps);
  detail::get_if(j, "streams", p.streams);
  detail::get_if(j, "receptive_field", p.receptive_field);
}

inline json to_json(const CorpusConfig& c) {
  return {{"n_pairs", c.n_pairs},   {"n_heldout", c.n_heldout}, {"expansion_mean", c.expansion_mean},
          {"max_text_len", c.max_text_len}, {"seed", c.seed}, {"tts_seed", c.tts_seed},
          {"vocab", to_json(c.vocab)}};
}

inline void from_json(const json& j, CorpusConfig& c) {
  detail::reject_unknown_keys(j, {"n_pairs", "n_heldout", "expansion_mean", "max_text_len", "seed", "tts_seed", "vocab"},
                              "corpus");
  detail::get_if(j, "n_pairs", c.n_pairs);
  detail::get_if(j, "n_heldout", c.n_heldout);
  detail::get_if(j, "expansion_mean", c.expansion_mean);
  detail::get_if(j, "max_text_len", c.max_text_len);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "tts_seed", c.tts_seed);
  if (j.contains("vocab")) from_json(j.at("vocab"), c.vocab);
}

// ---- checkpoint ----------------------------------------------------------
// One JSON document: {"format", "version", "config", "params"}; parameters
// are stored as doubles so float and double models round-trip exactly.

template <typename Real>
void save_checkpoint(std::ostream& os, const Model<Real>& model) {
  json j;
  j["format"] = "pslm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(model.config());
  std::vector<double> p(model.params().begin(), model.params().end());
  j["params"] = std::move(p);
  os << j.dump() << '\n';
}

inline ModelConfig read_checkpoint_config(const json& j) {
  if (j.value("format", "") != "pslm-checkpoint") throw FormatError("not a pslm checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  ModelConfig cfg;
  from_json(j.at("config"), cfg);
  return cfg;
}

template <typename Real>
Model<Real> load_checkpoint(std::istream& is) {
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint parse error: ") + e.what());
  }
  Model<Real> m(read_checkpoint_config(j));
  const auto& arr = j.at("params");
  if (arr.size() != m.num_params())
    throw FormatError("checkpoint has " + std::to_string(arr.size()) + " parameters, config implies " +
                      std::to_string(m.num_params()));
  auto p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<Real>(arr[i].get<double>());
  return m;
}

// Loads and checks the stored config against the expected one.
template <typename Real>
Model<Real> load_checkpoint(std::istream& is, const ModelConfig& expected) {
  Model<Real> m = load_checkpoint<Real>(is);
  ModelConfig got = m.config();
  got.seed = expected.seed;  // the init seed does not affect stored weights
  if (!(got == expected)) throw FormatError("checkpoint config does not match the requested model config");
  return m;
}

// ---- corpus --------------------------------------------------------------
// Line-delimited JSON: a header line {"format","version","config"} and one
// record {"id","split","tq","ta","sq","sa"} per pair.

inline void write_corpus(std::ostream& os, const CorpusConfig& cfg, const std::vector<QAPair>& pairs) {
  json header{{"format", "pslm-corpus"}, {"version", kCorpusVersion}, {"config", to_json(cfg)}};
  os << header.dump() << '\n';
  for (const auto& p : pairs) {
    json r{{"id", p.id}, {"split", p.heldout ? "heldout" : "train"}, {"tq", p.tq}, {"ta", p.ta}, {"sq", p.sq}, {"sa", p.sa}};
    os << r.dump() << '\n';
  }
}

struct CorpusFile {
  CorpusConfig config;
  std::vector<QAPair> pairs;
};

inline CorpusFile read_corpus(std::istream& is) {
  CorpusFile out;
  std::string line;
  if (!std::getline(is, line)) throw FormatError("corpus: missing header");
  try {
    const json header = json::parse(line);
    if (header.value("format", "") != "pslm-corpus") throw FormatError("corpus: bad format tag");
    if (header.value("version", 0) != kCorpusVersion) throw FormatError("corpus: unsupported version");
    from_json(header.at("config"), out.config);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const json r = json::parse(line);
      detail::reject_unknown_keys(r, {"id", "split", "tq", "ta", "sq", "sa"}, "corpus record");
      QAPair p;
      p.id = r.at("id").get<std::int64_t>();
      p.heldout = r.at("split").get<std::string>() == "heldout";
      r.at("tq").get_to(p.tq);
      r.at("ta").get_to(p.ta);
      r.at("sq").get_to(p.sq);
      r.at("sa").get_to(p.sa);
      out.pairs.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus parse error: ") + e.what());
  }
  return out;
}

// ---- decode records and reports -----------------------------------------

inline json to_json(const DecodeOutcome& o, std::int64_t id, const std::string& mode) {
  json j{{"id", id},
         {"mode", mode},
         {"text_answer", o.text_answer},
         {"speech_answer", o.speech_answer},
         {"frames", o.frames_generated},
         {"failure", to_string(o.failure)}};
  if (!o.text_question.empty()) j["text_question"] = o.text_question;
  return j;
}

inline DecodeOutcome outcome_from_json(const json& j) {
  DecodeOutcome o;
  j.at("text_answer").get_to(o.text_answer);
  j.at("speech_answer").get_to(o.speech_answer);
  if (j.contains("text_question")) j.at("text_question").get_to(o.text_question);
  o.frames_generated = j.at("frames").get<std::size_t>();
  o.failure = failure_from_string(j.at("failure").get<std::string>());
  return o;
}

inline json to_json(const EvalReport& r) {
  return {{"n_samples", r.n_samples},   {"cer", r.cer},
          {"failure_rate", r.failure_rate}, {"n_failed", r.n_failed},
          {"n_no_eos", r.n_no_eos},     {"n_wrong_modality", r.n_wrong_modality},
          {"cer_samples", r.cer_samples}, {"cer_edits", r.cer_edits},
          {"cer_ref_len", r.cer_ref_len}};
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace pslm::io
