#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "test_support.hpp"

using namespace pslm;
using pslm::fixtures::tiny_config;
using pslm::fixtures::tiny_vocab;

namespace {

SamplingParams greedy(std::size_t cap = 2048) {
  SamplingParams p;
  p.temperature = 1e-7;
  p.max_total_len = cap;
  return p;
}

struct Pair {
  TokenList tq, ta, sq, sa;
};

Pair fixed_pair() {
  const auto v = tiny_vocab();
  const ToyTTS tts(v, 4.0, 3);
  Pair p;
  p.tq = {5, 9};
  p.ta = {7, 4, 11};
  p.sq = tts.synthesize(p.tq);
  p.sa = tts.synthesize(p.ta);
  return p;
}

Model<float> memorize_pslm(const Pair& p, std::size_t S) {
  auto m = Model<float>::init(tiny_config(S, 21));
  const std::vector<MultiStreamSequence> corpus{build_pslm_example(p.tq, p.ta, p.sq, p.sa, S, tiny_vocab())};
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.learning_rate = 1e-2;
  train<float, MultiStreamSequence>(m, corpus, cfg);
  return m;
}

}  // namespace

TEST(Sampling, OneHotLogits) {
  std::vector<double> logits(30, 0.0);
  logits[17] = 60.0;
  TokenRng rng(1);
  SamplingParams p;
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(sample_token<double>(logits, p, rng), 17);
}

TEST(Sampling, GreedyBelowThreshold) {
  std::vector<double> logits{0.1, 0.3, 2.0, 1.9, -5.0};
  TokenRng rng(2);
  SamplingParams p;
  p.temperature = 1e-7;
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_token<double>(logits, p, rng), 2);
  EXPECT_EQ(argmax_token<double>(std::vector<double>{1.0, 3.0, 3.0}), 1);
}

TEST(Sampling, TopTwoOfUniformIsFair) {
  const std::vector<double> logits(10, 0.0);
  SamplingParams p;
  p.temperature = 1.0;
  p.top_k = 2;
  p.top_p = 1.0;
  const auto dist = filter_distribution<double>(logits, p);
  ASSERT_EQ(dist.ids, (std::vector<TokenId>{0, 1}));
  TokenRng rng(3);
  std::array<int, 2> counts{0, 0};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const TokenId t = sample_token<double>(logits, p, rng);
    ASSERT_TRUE(t == 0 || t == 1);
    ++counts[static_cast<std::size_t>(t)];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - n / 2.0) * (c - n / 2.0) / (n / 2.0);
  EXPECT_LT(chi2, 10.83);  // 1 dof, p = 0.001
}

TEST(Sampling, FilterIsSubsetOfTopKAndNormalized) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_int_distribution<std::size_t> k(1, 40);
  std::uniform_real_distribution<double> pp(0.05, 1.0), temp(0.1, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(32);
    for (auto& x : logits) x = n(rng);
    SamplingParams p;
    p.top_k = k(rng);
    p.top_p = pp(rng);
    p.temperature = temp(rng);
    auto filtered = filter_distribution<double>(logits, p);
    SamplingParams k_only = p;
    k_only.top_p = 1.0;
    const auto topk = filter_distribution<double>(logits, k_only);
    const std::set<TokenId> support(topk.ids.begin(), topk.ids.end());
    ASSERT_EQ(topk.ids.size(), std::min<std::size_t>(p.top_k, 32));
    double sum = 0.0;
    for (std::size_t i = 0; i < filtered.ids.size(); ++i) {
      ASSERT_TRUE(support.count(filtered.ids[i]));
      sum += filtered.probs[i];
    }
    ASSERT_NEAR(sum, 1.0, 1e-9);
    ASSERT_FALSE(filtered.ids.empty());
  }
}

TEST(Sampling, InvalidInputs) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> logits{-inf, -inf};
  TokenRng rng(5);
  EXPECT_THROW(sample_token<double>(logits, SamplingParams{}, rng), InvalidArgument);
  SamplingParams bad;
  bad.top_p = 0.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = {};
  bad.top_k = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(DecodePslm, NoEosAtCap) {
  const auto cfg = tiny_config(2);
  auto m = Model<float>::init(cfg);
  for (std::size_t s = 0; s < 2; ++s)
    m.tensor("speech_head." + std::to_string(s) + ".b")[static_cast<std::size_t>(cfg.vocab.speech_eos_id)] = -1e4f;
  const auto prompt = build_pslm_prompt(TokenList{4}, TokenList{0, 1, 2, 3}, 2, cfg.vocab);
  SamplingParams p;
  p.max_total_len = 8;
  const auto out = decode_pslm(m, prompt, p);
  EXPECT_EQ(out.failure, Failure::kNoEos);
  EXPECT_EQ(out.frames_generated, 8 - prompt.length());
}

TEST(DecodePslm, EmptyBudget) {
  const auto cfg = tiny_config(1);
  const auto m = Model<float>::init(cfg);
  const auto prompt = build_pslm_prompt(TokenList{4}, TokenList{0, 1, 2, 3}, 1, cfg.vocab);
  SamplingParams p;
  p.max_total_len = 4;
  const auto out = decode_pslm(m, prompt, p);
  EXPECT_EQ(out.failure, Failure::kNoEos);
  EXPECT_EQ(out.frames_generated, 0u);
}

TEST(DecodePslm, SeededDeterminism) {
  const auto cfg = tiny_config(2);
  const auto m = Model<float>::init(cfg);
  const auto prompt = build_pslm_prompt(TokenList{4}, TokenList{0, 1, 2, 3}, 2, cfg.vocab);
  SamplingParams p;
  p.max_total_len = 40;
  p.seed = 9;
  EXPECT_EQ(decode_pslm(m, prompt, p), decode_pslm(m, prompt, p));
}

TEST(DecodePslm, SpeechDrawIndependentOfTextHead) {
  const auto cfg = tiny_config(2);
  const auto a = Model<float>::init(cfg);
  auto b = a;
  for (auto& v : b.tensor("text_head.b")) v += 3.0f;
  const auto prompt = build_pslm_prompt(TokenList{4}, TokenList{0, 1, 2, 3}, 2, cfg.vocab);
  SamplingParams p;
  p.temperature = 1.0;
  p.top_k = 20;
  p.top_p = 1.0;
  p.max_total_len = prompt.length() + 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    p.seed = seed;
    EXPECT_EQ(decode_pslm(a, prompt, p).speech_answer, decode_pslm(b, prompt, p).speech_answer);
  }
}

TEST(DecodePslm, NeverWrongModality) {
  std::mt19937_64 rng(6);
  for (std::size_t S : {1u, 2u, 3u}) {
    const auto m = Model<float>::init(tiny_config(S, 30 + S));
    SamplingParams p;
    p.temperature = 1.5;
    p.max_total_len = 24;
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      p.seed = seed;
      const auto prompt = build_pslm_prompt(fixtures::random_text(rng, tiny_vocab(), 2),
                                            fixtures::random_speech(rng, tiny_vocab(), 6), S, tiny_vocab());
      const auto out = decode_pslm(m, prompt, p);
      ASSERT_NE(out.failure, Failure::kWrongModality);
      for (TokenId t : out.text_answer) ASSERT_TRUE(tiny_vocab().is_text_content(t));
      for (TokenId t : out.speech_answer) ASSERT_TRUE(tiny_vocab().is_speech_content(t));
    }
  }
}

TEST(DecodePslm, MemorizesOnePair) {
  const auto pair = fixed_pair();
  for (std::size_t S : {1u, 2u}) {
    const auto m = memorize_pslm(pair, S);
    const auto out = decode_pslm(m, build_pslm_prompt(pair.tq, pair.sq, S, tiny_vocab()), greedy());
    EXPECT_EQ(out.failure, Failure::kNone) << "S=" << S;
    EXPECT_EQ(out.text_answer, pair.ta) << "S=" << S;
    EXPECT_EQ(out.speech_answer, pair.sa) << "S=" << S;
  }
}

TEST(ComSegments, WrongModalityFixtures) {
  const auto v = tiny_vocab();
  const auto u = [&](TokenId s) { return v.speech_to_union(s); };
  // Speech id inside TA.
  EXPECT_EQ(segment_com_generation(TokenList{5, u(3), 6}, v, true).failure, Failure::kWrongModality);
  // Text id inside SA.
  EXPECT_EQ(segment_com_generation(TokenList{5, v.com_speech_marker_id, u(3), 7, u(v.speech_eos_id)}, v, true).failure,
            Failure::kWrongModality);
  // Speech id inside TQ.
  EXPECT_EQ(segment_com_generation(TokenList{u(2)}, v, false).failure, Failure::kWrongModality);
  // Clean sequence from the question onwards.
  const auto ok = segment_com_generation(
      TokenList{8, v.text_eos_id, 5, 6, v.com_speech_marker_id, u(3), u(4), u(v.speech_eos_id)}, v, false);
  EXPECT_EQ(ok.failure, Failure::kNone);
  EXPECT_EQ(ok.text_question, (TokenList{8}));
  EXPECT_EQ(ok.text_answer, (TokenList{5, 6}));
  EXPECT_EQ(ok.speech_answer, (TokenList{3, 4}));
  EXPECT_EQ(segment_com_generation(TokenList{5, 6}, v, true).failure, Failure::kNoEos);
}

TEST(DecodeCom, EmptyBudgetAndMemorization) {
  const auto v = tiny_vocab();
  const auto pair = fixed_pair();
  auto m = Model<float>::init(tiny_config(0, 22));
  const auto prompt = build_com_prompt_with_tq(pair.sq, pair.tq, v);
  EXPECT_EQ(decode_com(m, prompt, greedy(prompt.size()), true).failure, Failure::kNoEos);

  const std::vector<TokenList> corpus{build_com_example(pair.tq, pair.ta, pair.sq, pair.sa, v)};
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.learning_rate = 1e-2;
  train<float, TokenList>(m, corpus, cfg);
  const auto gold = decode_com(m, prompt, greedy(), true);
  EXPECT_EQ(gold.failure, Failure::kNone);
  EXPECT_EQ(gold.text_answer, pair.ta);
  EXPECT_EQ(gold.speech_answer, pair.sa);
  const auto sq_only = decode_com(m, build_com_prompt_sq_only(pair.sq, v), greedy(), false);
  EXPECT_EQ(sq_only.failure, Failure::kNone);
  EXPECT_EQ(sq_only.text_question, pair.tq);
  EXPECT_EQ(sq_only.text_answer, pair.ta);
}

TEST(Failure, StringRoundTrip) {
  for (auto f : {Failure::kNone, Failure::kNoEos, Failure::kWrongModality})
    EXPECT_EQ(failure_from_string(to_string(f)), f);
  EXPECT_THROW(failure_from_string("bogus"), FormatError);
}
