#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace pslm;

namespace {

// Exhaustive recursion over edit scripts; fine for short inputs.
std::size_t brute_edit(const std::string& a, const std::string& b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::string ra = a.substr(1), rb = b.substr(1);
  const std::size_t sub = brute_edit(ra, rb) + (a[0] == b[0] ? 0 : 1);
  return std::min({sub, brute_edit(ra, b) + 1, brute_edit(a, rb) + 1});
}

std::size_t dist(const std::string& a, const std::string& b) {
  return edit_distance(std::span<const char>(a), std::span<const char>(b));
}

DecodeOutcome outcome(Failure f) {
  DecodeOutcome o;
  o.failure = f;
  return o;
}

}  // namespace

TEST(Cer, Examples) {
  EXPECT_DOUBLE_EQ(cer("abc", "abc"), 0.0);
  EXPECT_DOUBLE_EQ(cer("abcd", "abed"), 25.0);
  EXPECT_EQ(brute_edit("abcd", "abed"), 1u);
  EXPECT_DOUBLE_EQ(cer("ab", ""), 100.0);
  EXPECT_DOUBLE_EQ(cer("a", "bcd"), 300.0);
  EXPECT_THROW(cer("", "a"), InvalidArgument);
}

TEST(EditDistance, MatchesBruteForceAndIsMetric) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> len(0, 6);
  std::uniform_int_distribution<int> ch(0, 2);
  auto rnd = [&] {
    std::string s(len(rng), 'a');
    for (auto& c : s) c = static_cast<char>('a' + ch(rng));
    return s;
  };
  for (int i = 0; i < 400; ++i) {
    const std::string x = rnd(), y = rnd(), z = rnd();
    ASSERT_EQ(dist(x, y), brute_edit(x, y));
    ASSERT_EQ(dist(x, x), 0u);
    ASSERT_EQ(dist(x, y), dist(y, x));
    ASSERT_LE(dist(x, z), dist(x, y) + dist(y, z));
  }
}

TEST(FailureRate, Counts) {
  std::vector<DecodeOutcome> clean(8, outcome(Failure::kNone));
  EXPECT_DOUBLE_EQ(failure_rate(clean).failure_rate, 0.0);
  clean[3].failure = Failure::kNoEos;
  const auto r = failure_rate(clean);
  EXPECT_DOUBLE_EQ(r.failure_rate, 12.5);
  EXPECT_EQ(r.n_no_eos, 1u);
  EXPECT_EQ(r.n_samples, 8u);

  std::vector<DecodeOutcome> mixed{outcome(Failure::kNoEos), outcome(Failure::kWrongModality),
                                   outcome(Failure::kWrongModality), outcome(Failure::kNone)};
  const auto m = failure_rate(mixed);
  EXPECT_EQ(m.n_no_eos, 1u);
  EXPECT_EQ(m.n_wrong_modality, 2u);
  EXPECT_EQ(m.n_failed, m.n_no_eos + m.n_wrong_modality);
  EXPECT_DOUBLE_EQ(m.failure_rate, 75.0);
  std::reverse(mixed.begin(), mixed.end());
  EXPECT_DOUBLE_EQ(failure_rate(mixed).failure_rate, 75.0);
  EXPECT_THROW(failure_rate({}), InvalidArgument);
}

TEST(AlignmentCer, UsesToyTranscription) {
  const auto v = fixtures::tiny_vocab();
  const ToyTTS tts(v, 4.0, 2);
  DecodeOutcome good;
  good.text_answer = {4, 5, 6, 7};
  good.speech_answer = tts.synthesize(good.text_answer);
  DecodeOutcome off = good;
  off.speech_answer = tts.synthesize(TokenList{4, 5, 9, 7});
  DecodeOutcome failed = outcome(Failure::kNoEos);
  failed.text_answer = {4};
  const std::vector<DecodeOutcome> outs{good, off, failed};
  auto r = failure_rate(outs);
  add_alignment_cer(r, outs, tts);
  EXPECT_EQ(r.cer_samples, 2u);
  EXPECT_EQ(r.cer_edits, 1u);
  EXPECT_EQ(r.cer_ref_len, 8u);
  EXPECT_DOUBLE_EQ(r.cer, 12.5);
}

TEST(AlignmentCer, EmptyReferenceIsNotFree) {
  const auto v = fixtures::tiny_vocab();
  const ToyTTS tts(v, 4.0, 2);
  DecodeOutcome o;
  o.speech_answer = tts.synthesize(TokenList{4, 5});
  const std::vector<DecodeOutcome> outs{o};
  auto r = failure_rate(outs);
  add_alignment_cer(r, outs, tts);
  EXPECT_EQ(r.cer_ref_len, 0u);
  EXPECT_EQ(r.cer_edits, 2u);
  EXPECT_DOUBLE_EQ(r.cer, 200.0);

  DecodeOutcome silent;
  const std::vector<DecodeOutcome> quiet{silent};
  auto q = failure_rate(quiet);
  add_alignment_cer(q, quiet, tts);
  EXPECT_DOUBLE_EQ(q.cer, 0.0);
}

TEST(Evaluate, UntrainedModelMostlyFails) {
  const auto v = fixtures::tiny_vocab();
  CorpusConfig cc;
  cc.vocab = v;
  cc.n_pairs = 12;
  cc.n_heldout = 0;
  cc.max_text_len = 3;
  cc.expansion_mean = 4.0;
  const auto pairs = generate_corpus(cc);
  const ToyTTS tts(v, cc.expansion_mean, cc.tts_seed);
  auto mc = fixtures::tiny_config(1);
  auto m = Model<float>::init(mc);
  for (auto& b : m.tensor("speech_head.0.b")) b = 0.0f;
  m.tensor("speech_head.0.b")[static_cast<std::size_t>(v.speech_eos_id)] = -5.0f;
  EvalOptions opt;
  opt.sampling.max_total_len = 64;
  const auto res = evaluate(m, std::span<const QAPair>(pairs), tts, opt);
  EXPECT_GT(res.report.failure_rate, 50.0);
  EXPECT_EQ(res.report.n_samples, pairs.size());
  EXPECT_EQ(res.report.n_failed, res.report.n_no_eos + res.report.n_wrong_modality);
  EXPECT_EQ(res.report.n_wrong_modality, 0u);
  // Deterministic per seed.
  const auto again = evaluate(m, std::span<const QAPair>(pairs), tts, opt);
  EXPECT_EQ(again.outcomes, res.outcomes);
}

TEST(Evaluate, MemorizedPairScoresPerfectly) {
  const auto v = fixtures::tiny_vocab();
  const ToyTTS tts(v, 4.0, 8);
  QAPair p;
  p.tq = {5, 6};
  p.ta = {8, 10, 4};
  p.sq = tts.synthesize(p.tq);
  p.sa = tts.synthesize(p.ta);
  auto m = Model<float>::init(fixtures::tiny_config(1, 13));
  const std::vector<MultiStreamSequence> corpus{build_pslm_example(p.tq, p.ta, p.sq, p.sa, 1, v)};
  TrainConfig tc;
  tc.steps = 300;
  tc.learning_rate = 1e-2;
  train<float, MultiStreamSequence>(m, corpus, tc);
  EvalOptions opt;
  opt.sampling.temperature = 1e-7;
  const std::vector<QAPair> pairs{p};
  const auto res = evaluate(m, std::span<const QAPair>(pairs), tts, opt);
  EXPECT_DOUBLE_EQ(res.report.failure_rate, 0.0);
  EXPECT_DOUBLE_EQ(res.report.cer, 0.0);
  std::ostringstream os;
  write_report_csv(os, res.report);
  EXPECT_NE(os.str().find("n_samples,cer,failure_rate"), std::string::npos);
}
