// pslm_cli: corpus generation, training, decoding, evaluation, latency
// simulation and verification commands.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pslm/pslm.hpp"

namespace {

using namespace pslm;
using nlohmann::json;

// Exit codes, one per error class.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kMissingFile = 3,
  kBadConfig = 4,
  kDiverged = 5,
  kBadInput = 6,
  kCheckFailed = 7,
};

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplingParams sampling;
  CorpusConfig corpus;
  LatencyParams latency;
};

json to_json(const RunConfig& c) {
  return {{"model", io::to_json(c.model)},
          {"train", io::to_json(c.train)},
          {"sampling", io::to_json(c.sampling)},
          {"corpus", io::to_json(c.corpus)},
          {"latency", io::to_json(c.latency)}};
}

void load_config_file(const std::string& path, RunConfig& c) {
  if (!std::filesystem::exists(path)) throw MissingFile("config file not found: " + path);
  // Schema problems in a config file are config errors, not input errors.
  try {
    const json j = io::read_json_file(path);
    io::detail::reject_unknown_keys(j, {"model", "train", "sampling", "corpus", "latency"}, "config");
    if (j.contains("model")) io::from_json(j.at("model"), c.model);
    if (j.contains("train")) io::from_json(j.at("train"), c.train);
    if (j.contains("sampling")) io::from_json(j.at("sampling"), c.sampling);
    if (j.contains("corpus")) io::from_json(j.at("corpus"), c.corpus);
    if (j.contains("latency")) io::from_json(j.at("latency"), c.latency);
  } catch (const FormatError& e) {
    throw InvalidArgument(e.what());
  } catch (const json::exception& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open " + path);
  return in;
}

// "-" writes to stdout.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*file_) throw MissingFile("cannot write " + path);
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

// Flags shared by every subcommand; resolved into a RunConfig in apply().
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> streams;
  std::optional<double> tps;
  std::optional<std::size_t> receptive_field;
  std::string mode = "pslm";
  std::string input = "gold";
  std::string ablation = "none";
  std::string out = "-";
  bool quiet = false;

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) load_config_file(config_path, c);
    if (seed) {
      c.model.seed = *seed;
      c.train.seed = *seed;
      c.sampling.seed = *seed;
      c.corpus.seed = *seed;
    }
    if (streams) {
      c.model.num_speech_streams = *streams;
      c.latency.streams = *streams;
    }
    if (tps) c.latency.tps = *tps;
    if (receptive_field) c.latency.receptive_field = *receptive_field;
    if (mode == "com") c.model.num_speech_streams = 0;
    if (ablation == "no-wl") c.train.weighted_loss = false;
    c.model.vocab = c.corpus.vocab;
    c.model.validate();
    c.train.validate();
    c.sampling.validate();
    c.corpus.validate();
    c.latency.validate();
    return c;
  }

  PromptInputs prompt_inputs() const {
    if (ablation == "no-tq" || input == "sq") return PromptInputs::kSpeechOnly;
    if (ablation == "no-sq") return PromptInputs::kTextOnly;
    return PromptInputs::kSpeechAndText;
  }

  ComInput com_input() const {
    if (input == "asr") return ComInput::kAsr;
    if (input == "sq") return ComInput::kSpeechOnly;
    return ComInput::kGold;
  }

  void log(const RunConfig& c, const std::string& cmd) const {
    if (quiet) return;
    json j = to_json(c);
    j["command"] = cmd;
    j["mode"] = mode;
    j["input"] = input;
    j["ablation"] = ablation;
    std::cerr << "resolved config: " << j.dump() << '\n';
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config with model/train/sampling/corpus/latency sections");
  app->add_option("--seed", c.seed, "Seed for every random source");
  app->add_option("--streams", c.streams, "Number of speech streams S");
  app->add_option("--tps", c.tps, "Decode tokens per second");
  app->add_option("--receptive-field", c.receptive_field, "Detokenizer receptive field in tokens");
  app->add_option("--mode", c.mode, "pslm or com")->check(CLI::IsMember({"pslm", "com"}));
  app->add_option("--input", c.input, "Question input: gold, asr or sq")->check(CLI::IsMember({"gold", "asr", "sq"}));
  app->add_option("--ablation", c.ablation, "none, no-tq, no-sq or no-wl")
      ->check(CLI::IsMember({"none", "no-tq", "no-sq", "no-wl"}));
  app->add_option("--out", c.out, "Output path ('-' for stdout)");
  app->add_flag("--quiet", c.quiet, "Do not log the resolved config");
}

io::CorpusFile read_corpus_file(const std::string& path) {
  auto in = open_in(path);
  return io::read_corpus(in);
}

std::vector<QAPair> select_split(const std::vector<QAPair>& pairs, const std::string& split) {
  if (split == "train") return training_split(pairs);
  if (split == "heldout") return heldout_split(pairs);
  return pairs;
}

// ---- commands --------------------------------------------------------------

int cmd_gen_corpus(const Common& common, std::optional<std::size_t> n_pairs, std::optional<std::size_t> max_len) {
  RunConfig c = common.resolve();
  if (n_pairs) c.corpus.n_pairs = *n_pairs;
  if (max_len) c.corpus.max_text_len = *max_len;
  common.log(c, "gen-corpus");
  const auto pairs = generate_corpus(c.corpus);
  Output out(common.out);
  io::write_corpus(out.stream(), c.corpus, pairs);
  return kOk;
}

int cmd_train(const Common& common, const std::string& corpus_path, std::optional<std::size_t> steps,
              const std::string& loss_csv) {
  RunConfig c = common.resolve();
  if (steps) c.train.steps = *steps;
  const auto corpus = read_corpus_file(corpus_path);
  c.model.vocab = corpus.config.vocab;
  common.log(c, "train");
  const auto pairs = training_split(corpus.pairs);
  if (pairs.empty()) throw InvalidArgument("corpus has no training pairs");

  auto model = Model<float>::init(c.model);
  auto report = [&](std::size_t step, const LossBreakdown& lb) {
    if (!common.quiet && (step % 50 == 0 || step + 1 == c.train.steps))
      std::cerr << "step " << step << " loss " << lb.total << " text " << lb.text_loss << '\n';
  };
  TrainResult res;
  if (c.model.single_stream()) {
    std::vector<TokenList> examples;
    for (const auto& p : pairs) examples.push_back(build_com_example(p.tq, p.ta, p.sq, p.sa, c.model.vocab));
    res = train<float, TokenList>(model, examples, c.train, report);
  } else {
    std::vector<MultiStreamSequence> examples;
    for (const auto& p : pairs)
      examples.push_back(build_pslm_example(p.tq, p.ta, p.sq, p.sa, c.model.num_speech_streams, c.model.vocab,
                                            common.prompt_inputs()));
    res = train<float, MultiStreamSequence>(model, examples, c.train, report);
  }
  Output out(common.out);
  io::save_checkpoint(out.stream(), model);
  if (!loss_csv.empty()) {
    Output csv(loss_csv);
    write_loss_csv(csv.stream(), res.history);
  }
  return kOk;
}

// The checkpoint carries its own architecture; explicit flags may not contradict it.
Model<float> load_model(const std::string& path, const Common& common) {
  auto in = open_in(path);
  auto model = io::load_checkpoint<float>(in);
  const std::size_t S = model.config().num_speech_streams;
  if (common.streams && *common.streams != S)
    throw std::invalid_argument("--streams " + std::to_string(*common.streams) + " but checkpoint has " +
                                std::to_string(S) + " speech streams");
  if (common.mode == "com" && S != 0) throw std::invalid_argument("--mode com but checkpoint is a parallel model");
  return model;
}

EvalOptions eval_options(const Common& common, const RunConfig& c, const Model<float>& model) {
  EvalOptions opt;
  opt.mode = model.config().single_stream() ? DecodeMode::kCom : DecodeMode::kPslm;
  opt.input = common.com_input();
  opt.prompt_inputs = common.prompt_inputs();
  opt.sampling = c.sampling;
  return opt;
}

int cmd_decode(const Common& common, const std::string& ckpt, const std::string& corpus_path,
               const std::string& split, bool eval_only) {
  const RunConfig c = common.resolve();
  const auto model = load_model(ckpt, common);
  const auto corpus = read_corpus_file(corpus_path);
  if (!(corpus.config.vocab == model.config().vocab))
    throw InvalidArgument("corpus vocabulary does not match the checkpoint");
  RunConfig logged = c;
  logged.model = model.config();
  common.log(logged, eval_only ? "eval" : "decode");

  const auto pairs = select_split(corpus.pairs, split);
  if (pairs.empty()) throw InvalidArgument("selected split is empty");
  const ToyTTS tts(corpus.config.vocab, corpus.config.expansion_mean, corpus.config.tts_seed);
  const auto res = evaluate(model, std::span<const QAPair>(pairs), tts, eval_options(common, c, model));

  Output out(common.out);
  if (eval_only) {
    std::cout << io::to_json(res.report).dump() << '\n';
    if (common.out != "-") write_report_csv(out.stream(), res.report);
  } else {
    const std::string mode = model.config().single_stream() ? "com" : "pslm";
    for (std::size_t i = 0; i < pairs.size(); ++i)
      out.stream() << io::to_json(res.outcomes[i], pairs[i].id, mode).dump() << '\n';
  }
  return kOk;
}

std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

// Long-answer length caps for the latency corpus when none is given.
constexpr std::size_t kLatencyCorpusPairs = 500;
constexpr std::size_t kLatencyMaxTextLen = 70;

int cmd_latency(const Common& common, const std::string& corpus_path) {
  RunConfig c = common.resolve();
  std::vector<QAPair> pairs;
  if (!corpus_path.empty()) {
    pairs = read_corpus_file(corpus_path).pairs;
  } else {
    c.corpus.n_pairs = kLatencyCorpusPairs;
    c.corpus.n_heldout = 0;
    c.corpus.max_text_len = kLatencyMaxTextLen;
    pairs = generate_corpus(c.corpus);
  }
  common.log(c, "latency");
  if (pairs.empty()) throw InvalidArgument("latency: empty corpus");
  std::vector<LengthRecord> recs;
  for (const auto& p : pairs) recs.push_back({p.tq.size(), p.ta.size(), p.sq.size(), p.sa.size()});

  Output out(common.out);
  out.stream() << "method,input,streams,latency_s,latency_rounded\n";
  for (const auto& m : table_methods()) {
    const auto r = simulate_dataset(recs, c.latency, m);
    const char* input = m.method == Method::kComSQ                                        ? "SQ"
                        : (m.method == Method::kComASR || m.method == Method::kPslmASR) ? "SQ+TQ(ASR)"
                                                                                         : "SQ+TQ(Gold)";
    out.stream() << m.name() << ',' << input << ',' << (m.parallel() ? m.streams : 1) << ',' << std::setprecision(6)
                 << r.median << ',' << fixed2(r.median) << '\n';
  }
  return kOk;
}

int cmd_latency_curve(const Common& common, std::size_t max_ta, std::size_t n_tq) {
  const RunConfig c = common.resolve();
  common.log(c, "latency-curve");
  std::vector<std::size_t> grid(max_ta + 1);
  std::iota(grid.begin(), grid.end(), 0);
  std::vector<double> rates{50.0, 100.0};
  if (common.tps) rates = {*common.tps};
  std::vector<CurveMethod> methods;
  for (double p : rates) {
    methods.push_back({{Method::kComSQ, 1}, p});
    methods.push_back({{Method::kComASR, 1}, p});
    methods.push_back({{Method::kPslmASR, 1}, p});
    methods.push_back({{Method::kPslmASR, 2}, p});
  }
  const auto pts = latency_curve(grid, c.latency, methods, n_tq);
  Output out(common.out);
  write_curve_csv(out.stream(), pts);
  return kOk;
}

int cmd_gradcheck(const Common& common, std::size_t coords, double epsilon, const std::string& corpus_path) {
  RunConfig c = common.resolve();
  if (c.model.single_stream()) throw InvalidArgument("gradcheck covers the parallel model; use --mode pslm");
  std::vector<QAPair> pairs = corpus_path.empty() ? generate_corpus(c.corpus) : read_corpus_file(corpus_path).pairs;
  common.log(c, "gradcheck");
  const auto& p = pairs.front();
  const auto ex = build_pslm_example(p.tq, p.ta, p.sq, p.sa, c.model.num_speech_streams, c.model.vocab,
                                     common.prompt_inputs());
  auto model = Model<double>::init(c.model);
  GradcheckOptions opt;
  opt.num_coords = coords;
  opt.epsilon = epsilon;
  opt.seed = c.train.seed;
  opt.weighted = c.train.weighted_loss;
  const auto rep = gradcheck(model, ex, opt);
  constexpr double kTol = 1e-4;
  Output out(common.out);
  for (const auto& [group, err] : rep.worst_by_group) out.stream() << "group " << group << " max_rel_err " << err << '\n';
  out.stream() << "denominator floor " << rep.floor << '\n';
  const bool ok = rep.max_rel_error < kTol;
  out.stream() << (ok ? "PASS" : "FAIL") << " max_rel_err " << (ok ? "< " : ">= ") << kTol << " (" << rep.max_rel_error
               << " over " << rep.coords_checked << " coordinates)\n";
  return ok ? kOk : kCheckFailed;
}

int cmd_stream_demo(const Common& common, const std::string& corpus_path, const std::string& wav_path,
                    std::size_t channel_capacity) {
  const RunConfig c = common.resolve();
  std::vector<QAPair> pairs = corpus_path.empty() ? generate_corpus(c.corpus) : read_corpus_file(corpus_path).pairs;
  common.log(c, "stream-demo");
  const TokenList& tokens = pairs.front().sa;
  VocoderSpec spec;
  spec.receptive_field = c.latency.receptive_field;

  // Producer emits tokens at the decode rate; consumer runs the detokenizer.
  BoundedChannel<TokenId> chan(channel_capacity);
  std::thread producer([&] {
    for (TokenId t : tokens) chan.send(t);
    chan.close();
  });
  StreamingSynthesizer synth(spec);
  std::vector<Fragment> frags;
  while (auto t = chan.receive()) {
    auto f = synth.push(*t);
    frags.insert(frags.end(), f.begin(), f.end());
  }
  producer.join();
  auto tail = synth.finish();
  frags.insert(frags.end(), tail.begin(), tail.end());

  Output out(common.out);
  out.stream() << "fragment,tokens_seen,ready_s,sample_begin,sample_end\n";
  std::vector<double> audio;
  for (const auto& f : frags) {
    const double ready = c.latency.d_sq + static_cast<double>(f.tokens_seen) / c.latency.tps + c.latency.d_t2s;
    out.stream() << f.index << ',' << f.tokens_seen << ',' << std::setprecision(6) << ready << ','
                 << f.index * spec.upsample << ',' << (f.index + 1) * spec.upsample << '\n';
    audio.insert(audio.end(), f.samples.begin(), f.samples.end());
  }
  const bool same = audio == offline_synthesize(tokens, spec);
  std::cerr << "tokens " << tokens.size() << " fragments " << frags.size() << " first fragment after "
            << (frags.empty() ? 0 : frags.front().tokens_seen) << " tokens; streamed "
            << (same ? "==" : "!=") << " offline\n";
  if (!wav_path.empty()) {
    std::ofstream wav(wav_path, std::ios::binary);
    if (!wav) throw MissingFile("cannot write " + wav_path);
    write_wav(wav, audio, static_cast<std::uint32_t>(spec.sample_rate));
  }
  return same ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel speech/text token language model toolkit"};
  app.require_subcommand(1);

  Common common;

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic QA corpus (JSONL)");
  add_common(gen, common);
  std::optional<std::size_t> n_pairs, max_len;
  gen->add_option("--pairs", n_pairs, "Number of training pairs");
  gen->add_option("--max-text-len", max_len, "Longest TQ/TA in tokens");

  std::string corpus_path, ckpt_path, loss_csv, split = "train", wav_path;
  std::optional<std::size_t> steps;

  auto* tr = app.add_subcommand("train", "Train a model; writes a checkpoint to --out");
  add_common(tr, common);
  tr->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  tr->add_option("--steps", steps, "Optimizer steps");
  tr->add_option("--loss-csv", loss_csv, "Per-step loss CSV");

  auto* dec = app.add_subcommand("decode", "Decode prompts from a corpus; writes outcome records");
  add_common(dec, common);
  dec->add_option("--checkpoint", ckpt_path, "Checkpoint JSON")->required();
  dec->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  dec->add_option("--split", split, "train, heldout or all")->check(CLI::IsMember({"train", "heldout", "all"}));

  auto* ev = app.add_subcommand("eval", "Decode and report CER and failure rate");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt_path, "Checkpoint JSON")->required();
  ev->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  ev->add_option("--split", split, "train, heldout or all")->check(CLI::IsMember({"train", "heldout", "all"}));

  auto* lat = app.add_subcommand("latency", "Median latency per method (CSV)");
  add_common(lat, common);
  lat->add_option("--corpus", corpus_path, "Corpus JSONL supplying lengths (default: generated)");

  std::size_t max_ta = 140, n_tq = 15;
  auto* curve = app.add_subcommand("latency-curve", "Latency versus TA length (CSV)");
  add_common(curve, common);
  curve->add_option("--max-ta", max_ta, "Largest TA length");
  curve->add_option("--n-tq", n_tq, "TQ length for the speech-only baseline");

  std::size_t coords = 240;
  double gc_epsilon = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the training gradient");
  add_common(gc, common);
  gc->add_option("--coords", coords, "Coordinates to check");
  gc->add_option("--epsilon", gc_epsilon, "Central-difference step");
  gc->add_option("--corpus", corpus_path, "Corpus JSONL (default: generated)");

  std::size_t capacity = 8;
  auto* demo = app.add_subcommand("stream-demo", "Streaming detokenizer timeline (CSV)");
  add_common(demo, common);
  demo->add_option("--corpus", corpus_path, "Corpus JSONL (default: generated)");
  demo->add_option("--wav", wav_path, "Write the synthesized audio");
  demo->add_option("--capacity", capacity, "Token channel capacity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(common, n_pairs, max_len);
    if (tr->parsed()) return cmd_train(common, corpus_path, steps, loss_csv);
    if (dec->parsed()) return cmd_decode(common, ckpt_path, corpus_path, split, false);
    if (ev->parsed()) return cmd_decode(common, ckpt_path, corpus_path, split, true);
    if (lat->parsed()) return cmd_latency(common, corpus_path);
    if (curve->parsed()) return cmd_latency_curve(common, max_ta, n_tq);
    if (gc->parsed()) return cmd_gradcheck(common, coords, gc_epsilon, corpus_path);
    if (demo->parsed()) return cmd_stream_demo(common, corpus_path, wav_path, capacity);
  } catch (const MissingFile& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingFile;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingFile;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::length_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}
