#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "styemp/grad_check.hpp"
#include "styemp/reinforce.hpp"

using namespace styemp;

namespace {

double brute_force_loss(const std::vector<double>& lp, double alpha) {
  double total = 0;
  for (std::size_t i = 0; i < lp.size(); ++i)
    for (std::size_t j = i + 1; j < lp.size(); ++j) {
      const double h = lp[j] - lp[i] + alpha * static_cast<double>(j - i);
      total += h > 0 ? h : 0.0;
    }
  return total;
}

std::vector<Tensor<double>> leaves(const std::vector<double>& v) {
  std::vector<Tensor<double>> out;
  for (double x : v) out.push_back(Tensor<double>::scalar(x, true));
  return out;
}

double grad_of(const Tensor<double>& t) { return t.has_grad() ? t.grad()[0] : 0.0; }

struct Fixture {
  Tokenizer tok;
  Dataset train;
  std::vector<PreparedExample> data;
  StyEmpModel<double> model;
  PredictorSuite<double> predictors;

  explicit Fixture(std::uint64_t seed) {
    CorpusConfig cc;
    cc.n_listeners = 4;
    cc.convs_per_listener = 3;
    cc.seed = seed;
    train = generate_synthetic_corpus(cc).all();
    train.resize(8);
    data = prepare_training(train, tok, 3, seed);
    MgpeConfig mc;
    mc.encoder = {tok.size(), 8, 2, 1, 16, 64};
    mc.n1 = mc.n2 = 2;
    DecoderConfig dc;
    dc.vocab = tok.size();
    dc.d = 8;
    dc.heads = 2;
    dc.layers = 1;
    dc.ff = 16;
    Rng rng(seed);
    model = StyEmpModel<double>(mc, dc, rng);
    PredictorConfig pc;
    pc.encoder = {tok.size(), 8, 2, 1, 16, 40};
    predictors = make_predictor_suite<double>(pc, seed);
  }
};

DecodeParams small_decode() {
  DecodeParams p;
  p.max_new_tokens = 6;
  return p;
}

}  // namespace

TEST(Reinforce, MarginHandValues) {
  EXPECT_NEAR(personality_margin({0.6, 0.3, 0.5}, {0.5, 0.5, 0.5}), 0.05, 1e-12);
  EXPECT_EQ(personality_margin({0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}), 0.0);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const PersonalityProfile a{rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    const PersonalityProfile b{rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    EXPECT_EQ(personality_margin(a, b), personality_margin(b, a));
    const double de = a.extraversion - b.extraversion, di = a.introverted - b.introverted,
                 dt = a.thinking - b.thinking;
    EXPECT_NEAR(personality_margin(a, b), de * de + di * di + dt * dt, 1e-12);
  }
}

TEST(Reinforce, ScalingTraitErrorsKeepsRankOrder) {
  Rng rng(2);
  const PersonalityProfile target{0.0, 0.5, 0.5};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Candidate> base, scaled;
    const double c = rng.uniform(0.1, 0.9);
    for (std::size_t k = 0; k < 5; ++k) {
      const double de = rng.uniform(-0.5, 0.5), di = rng.uniform(-0.4, 0.4), dt = rng.uniform(-0.4, 0.4);
      Candidate a, b;
      a.profile = {de, 0.5 + di, 0.5 + dt};
      b.profile = {c * de, 0.5 + c * di, 0.5 + c * dt};
      a.margin = personality_margin(a.profile, target);
      b.margin = personality_margin(b.profile, target);
      EXPECT_NEAR(b.margin, c * c * a.margin, 1e-12);
      a.generation_index = b.generation_index = k;
      base.push_back(a);
      scaled.push_back(b);
    }
    const auto r1 = rank_by_margin(base), r2 = rank_by_margin(scaled);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r1[k].generation_index, r2[k].generation_index);
  }
}

TEST(Reinforce, RankingMatchesInsertionSortOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Candidate> cands(1 + rng.index(6));
    for (std::size_t k = 0; k < cands.size(); ++k) {
      cands[k].margin = static_cast<double>(rng.index(4)) * 0.25;  // frequent ties
      cands[k].generation_index = k;
    }
    std::vector<Candidate> oracle;
    for (const auto& c : cands) {
      auto pos = oracle.end();
      while (pos != oracle.begin() && std::prev(pos)->margin > c.margin) --pos;
      oracle.insert(pos, c);
    }
    const auto ranked = rank_by_margin(cands);
    ASSERT_EQ(ranked.size(), oracle.size());
    for (std::size_t k = 0; k < ranked.size(); ++k) EXPECT_EQ(ranked[k].generation_index, oracle[k].generation_index);
  }
  std::vector<Candidate> same(5);
  for (std::size_t k = 0; k < 5; ++k) same[k].generation_index = k;
  const auto ranked = rank_by_margin(same);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(ranked[k].generation_index, k);
}

TEST(Reinforce, PairwiseLossHandValues) {
  EXPECT_EQ(pairwise_margin_loss(leaves({-1.0, -1.2}), 0.001).item(), 0.0);
  EXPECT_NEAR(pairwise_margin_loss(leaves({-1.2, -1.0}), 0.001).item(), 0.201, 1e-12);
  EXPECT_EQ(pairwise_margin_loss(leaves({-0.5, -1.0, -3.0}), 0.0).item(), 0.0);
  EXPECT_THROW(pairwise_margin_loss(leaves({-1.0}), 0.001), ContractError);
}

TEST(Reinforce, PairwiseLossEqualsBruteForceExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> lp(2 + rng.index(5));
    for (auto& x : lp) x = -rng.uniform(0.0, 3.0);
    const double alpha = trial % 3 == 0 ? 0.0 : rng.uniform(0.0, 0.5);
    const double got = pairwise_margin_loss(leaves(lp), alpha).item();
    EXPECT_EQ(got, brute_force_loss(lp, alpha));
    EXPECT_GE(got, 0.0);
  }
}

TEST(Reinforce, PairwiseLossGradientCountsActiveHinges) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> lp(2 + rng.index(5));
    for (auto& x : lp) x = -rng.uniform(0.0, 3.0);
    const double alpha = 0.05;
    auto xs = leaves(lp);
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(pairwise_margin_loss(xs, alpha));
    }
    for (std::size_t k = 0; k < lp.size(); ++k) {
      double expected = 0;
      for (std::size_t i = 0; i < lp.size(); ++i)
        for (std::size_t j = i + 1; j < lp.size(); ++j)
          if (lp[j] - lp[i] + alpha * static_cast<double>(j - i) > 0) {
            if (k == j) expected += 1;
            if (k == i) expected -= 1;
          }
      EXPECT_EQ(grad_of(xs[k]), expected);
      const double h = 1e-7;
      auto up = lp, down = lp;
      up[k] += h;
      down[k] -= h;
      const double fd = (brute_force_loss(up, alpha) - brute_force_loss(down, alpha)) / (2 * h);
      EXPECT_NEAR(grad_of(xs[k]), fd, 1e-6);
    }
  }
}

TEST(Reinforce, CombinedLossReductions) {
  const auto nll = Tensor<double>::scalar(2.0), lp = Tensor<double>::scalar(0.2);
  EXPECT_EQ(combined_loss(nll, lp, 0.0).item(), 2.0);
  EXPECT_NEAR(combined_loss(nll, lp, 1.0).item(), 2.2, 1e-15);
  EXPECT_EQ(combined_loss(nll, Tensor<double>::scalar(0.0), 1.0).item(), 2.0);
  EXPECT_THROW(combined_loss(Tensor<double>::scalar(std::nan("")), lp, 1.0), ContractError);
}

TEST(Reinforce, GenerateAndRankProducesSortedPermutation) {
  Fixture f(6);
  const PersonalityProfile target{0.3, 0.4, 0.6};
  const auto set = generate_and_rank(f.model, f.predictors, f.tok, f.data[0].inputs, target, small_decode(), 0.001);
  ASSERT_GE(set.candidates.size(), 1u);
  EXPECT_LE(set.candidates.size(), 5u);
  std::vector<std::size_t> seen;
  for (std::size_t k = 0; k < set.candidates.size(); ++k) {
    const auto& c = set.candidates[k];
    if (k) {
      EXPECT_LE(set.candidates[k - 1].margin, c.margin);
    }
    EXPECT_EQ(c.margin, personality_margin(c.profile, target));
    EXPECT_LE(c.logprob, 0.0);
    seen.push_back(c.generation_index);
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(std::adjacent_find(seen.begin(), seen.end()), seen.end());
}

TEST(Reinforce, BetaZeroFollowsPlainNllTrajectory) {
  Fixture a(7), b(7);
  TrainConfig tc;
  tc.optim.lr = 1e-3;
  tc.epochs = 2;
  tc.batch = 3;
  tc.seed = 11;
  const auto plain = train_generator(a.model, a.data, tc);
  CalibrationConfig cc;
  cc.optim = tc.optim;
  cc.epochs = 2;
  cc.batch = 3;
  cc.seed = 11;
  cc.beta = 0.0;
  cc.decode = small_decode();
  const auto targets = listener_targets(b.predictors, b.train, b.tok);
  const auto cal = calibrate(b.model, b.predictors, b.tok, b.data, targets, cc);
  ASSERT_EQ(plain.step_loss.size(), cal.step_nll.size());
  for (std::size_t s = 0; s < plain.step_loss.size(); ++s) EXPECT_EQ(plain.step_loss[s], cal.step_nll[s]) << s;
  EXPECT_EQ(cal.step_nll, cal.step_combined);
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()))
        << pa[i].name;
}

TEST(Reinforce, CalibrationReportsEpochRecords) {
  Fixture f(8);
  CalibrationConfig cc;
  cc.epochs = 2;
  cc.batch = 4;
  cc.decode = small_decode();
  cc.optim.lr = 1e-3;
  cc.refresh_candidates = false;
  const auto targets = listener_targets(f.predictors, f.train, f.tok);
  const auto report = calibrate(f.model, f.predictors, f.tok, f.data, targets, cc, [](std::size_t e) {
    return nlohmann::json{{"eval_pearson_EI", 0.5 + static_cast<double>(e)}};
  });
  const auto j = report.to_json();
  ASSERT_EQ(j.size(), 2u);
  for (const char* key : {"epoch", "nll", "l_p", "combined", "eval_pearson_EI", "eval_pearson_T", "distinct1",
                          "distinct2"})
    EXPECT_TRUE(j[1].contains(key)) << key;
  EXPECT_EQ(j[1]["eval_pearson_EI"], 1.5);
  EXPECT_TRUE(j[1]["distinct1"].is_null());
  EXPECT_GE(j[0]["l_p"].get<double>(), 0.0);
  EXPECT_NEAR(j[0]["combined"].get<double>(), j[0]["nll"].get<double>() + j[0]["l_p"].get<double>(), 1e-9);
  std::map<std::string, PersonalityProfile> none;
  EXPECT_THROW(calibrate(f.model, f.predictors, f.tok, f.data, none, cc), DependencyError);
}
