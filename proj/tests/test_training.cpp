#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace pslm;
using pslm::fixtures::tiny_config;
using pslm::fixtures::tiny_vocab;

namespace {

// Logit row whose cross-entropy against `target` is exactly `loss`.
std::vector<double> row_with_loss(std::size_t V, TokenId target, double loss) {
  const double c = std::log((std::exp(loss) - 1.0) / static_cast<double>(V - 1));
  std::vector<double> r(V, c);
  r[static_cast<std::size_t>(target)] = 0.0;
  return r;
}

std::vector<MultiStreamSequence> random_corpus(std::size_t n, std::size_t S, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<MultiStreamSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(fixtures::random_example(rng, tiny_vocab(), S));
  return out;
}

}  // namespace

TEST(WeightedLoss, FormulaExample) {
  const auto v = tiny_vocab();
  const MultiStreamSequence seq(TokenList{4, 5}, {TokenList{0, 3}, TokenList{0, 7}}, 0);
  std::vector<FrameLogits<double>> logits(2);
  logits[0].text = row_with_loss(12, 5, 2.0);
  logits[0].speech = {row_with_loss(20, 3, 1.0), row_with_loss(20, 7, 3.0)};
  logits[1].text.assign(12, 0.0);
  logits[1].speech = {std::vector<double>(20, 0.0), std::vector<double>(20, 0.0)};
  const auto w = weighted_loss<double>(logits, seq, true);
  EXPECT_NEAR(w.text_loss, 2.0, 1e-12);
  EXPECT_NEAR(w.speech_losses[0], 1.0, 1e-12);
  EXPECT_NEAR(w.speech_losses[1], 3.0, 1e-12);
  EXPECT_NEAR(w.total, 4.0, 1e-12);
  EXPECT_DOUBLE_EQ(w.speech_weight, 0.5);
  const auto u = weighted_loss<double>(logits, seq, false);
  EXPECT_NEAR(u.total, 6.0, 1e-12);
  (void)v;
}

TEST(WeightedLoss, SingleStreamWeightingIsNeutral) {
  std::mt19937_64 rng(1);
  const auto m = Model<double>::init(tiny_config(1));
  const auto ex = fixtures::random_example(rng, tiny_vocab(), 1);
  EXPECT_EQ(example_loss(m, ex, true).total, example_loss(m, ex, false).total);
}

TEST(WeightedLoss, UniformLogitsGiveLogV) {
  const MultiStreamSequence seq(TokenList{4, 5, 6}, {TokenList{0, 3, 1}}, 0);
  std::vector<FrameLogits<double>> logits(3);
  for (auto& fl : logits) {
    fl.text.assign(12, 0.25);
    fl.speech = {std::vector<double>(20, -1.0)};
  }
  const auto lb = weighted_loss<double>(logits, seq, true);
  EXPECT_NEAR(lb.text_loss, std::log(12.0), 1e-12);
  EXPECT_NEAR(lb.speech_losses[0], std::log(20.0), 1e-12);
}

TEST(WeightedLoss, IdentityForRandomLogits) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 3.0);
  for (std::size_t S = 1; S <= 4; ++S) {
    const auto ex = fixtures::random_example(rng, tiny_vocab(), S);
    std::vector<FrameLogits<double>> logits(ex.length());
    for (auto& fl : logits) {
      fl.text.resize(12);
      for (auto& x : fl.text) x = n(rng);
      fl.speech.assign(S, std::vector<double>(20));
      for (auto& sp : fl.speech)
        for (auto& x : sp) x = n(rng);
    }
    const auto lb = weighted_loss<double>(logits, ex, true);
    double sum = 0.0;
    for (double v : lb.speech_losses) sum += v;
    EXPECT_NEAR(lb.total, lb.text_loss + sum / static_cast<double>(S), 1e-12);
    EXPECT_GE(lb.text_loss, 0.0);
  }
}

TEST(WeightedLoss, PermutationEquivariance) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  const auto ex = fixtures::random_example(rng, tiny_vocab(), 3);
  std::vector<FrameLogits<double>> logits(ex.length());
  for (auto& fl : logits) {
    fl.text.resize(12);
    for (auto& x : fl.text) x = n(rng);
    fl.speech.assign(3, std::vector<double>(20));
    for (auto& sp : fl.speech)
      for (auto& x : sp) x = n(rng);
  }
  auto streams = ex.speech_streams();
  std::swap(streams[0], streams[2]);
  const MultiStreamSequence swapped(ex.text(), streams, ex.prompt_len());
  auto swapped_logits = logits;
  for (auto& fl : swapped_logits) std::swap(fl.speech[0], fl.speech[2]);
  const auto a = weighted_loss<double>(logits, ex, true);
  const auto b = weighted_loss<double>(swapped_logits, swapped, true);
  EXPECT_DOUBLE_EQ(a.speech_losses[0], b.speech_losses[2]);
  EXPECT_DOUBLE_EQ(a.speech_losses[2], b.speech_losses[0]);
  EXPECT_DOUBLE_EQ(a.speech_losses[1], b.speech_losses[1]);
  EXPECT_NEAR(a.total, b.total, 1e-12);
}

TEST(WeightedLoss, LengthMismatch) {
  const MultiStreamSequence seq(TokenList{4, 5, 6}, {TokenList{0, 3, 1}}, 0);
  std::vector<FrameLogits<double>> logits(2);
  EXPECT_THROW(weighted_loss<double>(logits, seq, true), InvalidArgument);
}

TEST(Gradcheck, PassesForEachStreamCount) {
  std::mt19937_64 rng(4);
  for (std::size_t S : {1u, 2u, 3u}) {
    auto m = Model<double>::init(tiny_config(S));
    const auto ex = fixtures::random_example(rng, tiny_vocab(), S);
    GradcheckOptions opt;
    opt.num_coords = 200;
    const auto rep = gradcheck(m, ex, opt);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "S=" << S;
    EXPECT_GE(rep.coords_checked, 200u);
    EXPECT_EQ(rep.groups_covered.size(), 2 + 2 * S + 1);
  }
}

TEST(Gradcheck, UnweightedLossAlsoPasses) {
  std::mt19937_64 rng(5);
  auto m = Model<double>::init(tiny_config(2));
  GradcheckOptions opt;
  opt.weighted = false;
  EXPECT_LT(gradcheck(m, fixtures::random_example(rng, tiny_vocab(), 2), opt).max_rel_error, 1e-4);
}

TEST(Gradcheck, CorruptedSpeechHeadIsCaught) {
  std::mt19937_64 rng(6);
  auto m = Model<double>::init(tiny_config(2));
  GradcheckOptions opt;
  opt.corrupt = [](const ParamLayout& layout, std::span<double> g) {
    const auto& t = layout.find("speech_head.1.w");
    for (std::size_t i = 0; i < t.size(); ++i) g[t.offset + i] *= 1.05;
  };
  EXPECT_GT(gradcheck(m, fixtures::random_example(rng, tiny_vocab(), 2), opt).max_rel_error, 1e-2);
}

TEST(Gradcheck, ZeroPerturbationLeavesLossUnchanged) {
  std::mt19937_64 rng(7);
  const auto m = Model<double>::init(tiny_config(2));
  const auto ex = fixtures::random_example(rng, tiny_vocab(), 2);
  auto copy = m;
  for (auto& p : copy.params()) p += 0.0;
  EXPECT_EQ(example_loss(m, ex, true).total, example_loss(copy, ex, true).total);
}

TEST(Train, ZeroStepsLeaveParametersUnchanged) {
  auto m = Model<float>::init(tiny_config(1));
  const auto before = m.raw();
  const auto corpus = random_corpus(4, 1, 8);
  TrainConfig cfg;
  cfg.steps = 0;
  const auto res = train<float, MultiStreamSequence>(m, corpus, cfg);
  EXPECT_TRUE(res.history.empty());
  EXPECT_EQ(m.raw(), before);
}

TEST(Train, LossDecreases) {
  auto m = Model<float>::init(tiny_config(2));
  const auto corpus = random_corpus(8, 2, 9);
  const double initial = mean_loss<float, MultiStreamSequence>(m, corpus, true).total;
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  const auto res = train<float, MultiStreamSequence>(m, corpus, cfg);
  ASSERT_EQ(res.history.size(), 200u);
  for (const auto& h : res.history) ASSERT_TRUE(std::isfinite(h.total));
  EXPECT_LT((mean_loss<float, MultiStreamSequence>(m, corpus, true).total), initial);
}

TEST(Train, DeterministicHistories) {
  const auto corpus = random_corpus(6, 2, 10);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.seed = 3;
  auto a = Model<float>::init(tiny_config(2));
  auto b = Model<float>::init(tiny_config(2));
  const auto ha = train<float, MultiStreamSequence>(a, corpus, cfg).history;
  const auto hb = train<float, MultiStreamSequence>(b, corpus, cfg).history;
  ASSERT_EQ(ha.size(), hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].total, hb[i].total);
    EXPECT_EQ(ha[i].speech_losses, hb[i].speech_losses);
  }
  EXPECT_EQ(a.raw(), b.raw());
}

TEST(Train, ComExamplesTrain) {
  std::mt19937_64 rng(11);
  const auto v = tiny_vocab();
  std::vector<TokenList> corpus;
  for (int i = 0; i < 4; ++i)
    corpus.push_back(build_com_example(fixtures::random_text(rng, v, 2), fixtures::random_text(rng, v, 2),
                                       fixtures::random_speech(rng, v, 5), fixtures::random_speech(rng, v, 5), v));
  auto m = Model<float>::init(tiny_config(0));
  const double initial = mean_loss<float, TokenList>(m, corpus, true).total;
  TrainConfig cfg;
  cfg.steps = 100;
  train<float, TokenList>(m, corpus, cfg);
  EXPECT_LT((mean_loss<float, TokenList>(m, corpus, true).total), initial);
}

TEST(Train, DivergenceReportsStep) {
  auto m = Model<float>::init(tiny_config(1));
  m.tensor("text_head.b")[0] = std::numeric_limits<float>::quiet_NaN();
  const auto corpus = random_corpus(2, 1, 12);
  TrainConfig cfg;
  cfg.steps = 5;
  try {
    train<float, MultiStreamSequence>(m, corpus, cfg);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(Train, LossCsvHeader) {
  LossBreakdown lb;
  lb.text_loss = 1.5;
  lb.speech_losses = {2.0, 3.0};
  lb.total = 4.0;
  std::ostringstream os;
  write_loss_csv(os, {lb});
  EXPECT_EQ(os.str(), "step,text_loss,speech_loss_1,speech_loss_2,total\n0,1.5,2,3,4\n");
}
