#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "styemp/grad_check.hpp"
#include "styemp/nnet.hpp"
#include "styemp/optim.hpp"

using namespace styemp;

namespace {

Tensor<double> randn(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return normal_tensor<double>(std::move(shape), sd, rng).detach();
}

// Unbatched reference: loops over heads, rows and keys with plain arrays.
std::vector<double> naive_attention(const MultiHeadAttention<double>& mha, const Tensor<double>& q,
                                    const Tensor<double>& kv, const AttentionMask& mask) {
  const std::size_t d = mha.dim(), H = mha.heads(), dh = d / H, nq = q.shape()[0], nk = kv.shape()[0];
  auto project = [](const LinearLayer<double>& L, const Tensor<double>& x, std::size_t r) {
    std::vector<double> out(L.out_features());
    for (std::size_t o = 0; o < out.size(); ++o) {
      double s = L.bias[o];
      for (std::size_t i = 0; i < L.in_features(); ++i) s += x.at(r, i) * L.weight.at(i, o);
      out[o] = s;
    }
    return out;
  };
  std::vector<double> concat(nq * d, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      const auto qi = project(mha.query[h], q, i);
      std::vector<double> logits(nk, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!mask.visible(i, j)) continue;
        const auto kj = project(mha.key[h], kv, j);
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < nk; ++j) z += std::isinf(logits[j]) ? 0.0 : std::exp(logits[j] - mx);
      for (std::size_t j = 0; j < nk; ++j) {
        if (std::isinf(logits[j])) continue;
        const double w = std::exp(logits[j] - mx) / z;
        const auto vj = project(mha.value[h], kv, j);
        for (std::size_t c = 0; c < dh; ++c) concat[i * d + h * dh + c] += w * vj[c];
      }
    }
  }
  Tensor<double> cat(Shape{nq, d}, concat);
  std::vector<double> out;
  for (std::size_t i = 0; i < nq; ++i) {
    const auto o = project(mha.output, cat, i);
    out.insert(out.end(), o.begin(), o.end());
  }
  return out;
}

EncoderConfig tiny_encoder(std::size_t vocab = 20) {
  EncoderConfig cfg;
  cfg.vocab = vocab;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.ff = 16;
  cfg.max_len = 12;
  return cfg;
}

}  // namespace

TEST(Linear, InitBoundsAndShapes) {
  Rng rng(1);
  LinearLayer<float> L(16, 4, rng);
  EXPECT_EQ(L.weight.shape(), (Shape{16, 4}));
  EXPECT_EQ(L.bias.shape(), (Shape{4}));
  for (float w : L.weight.data()) EXPECT_LE(std::abs(w), 0.25f);
  for (float b : L.bias.data()) EXPECT_LE(std::abs(b), 0.25f);
}

TEST(Attention, SingleSlotReturnsProjectedValue) {
  Rng rng(2);
  MultiHeadAttention<double> mha(8, 2, rng);
  const auto q = randn({5, 8}, 3), kv = randn({1, 8}, 4);
  const auto out = mha.forward(q, kv, kv);
  std::vector<Tensor<double>> heads;
  for (std::size_t h = 0; h < 2; ++h) heads.push_back(mha.value[h].forward(kv));
  const auto expected = mha.output.forward(concat(heads, 1));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(i, c), expected.at(0, c), 1e-12);
}

TEST(Attention, IdenticalKeysSplitWeightEvenly) {
  Rng rng(5);
  MultiHeadAttention<double> mha(8, 2, rng);
  auto k = randn({1, 8}, 6);
  const auto keys = concat({k, k}, 0);
  const auto values = randn({2, 8}, 7);
  std::vector<Tensor<double>> weights;
  mha.forward(randn({3, 8}, 8), keys, values, {}, &weights);
  ASSERT_EQ(weights.size(), 2u);
  for (const auto& w : weights)
    for (double x : w.data()) EXPECT_NEAR(x, 0.5, 1e-12);
}

TEST(Attention, MatchesNaiveReferenceUnderAllMasks) {
  Rng rng(9);
  MultiHeadAttention<double> mha(8, 4, rng);
  const auto q = randn({3, 8}, 10), kv = randn({5, 8}, 11);
  for (const auto& mask : {AttentionMask::none(), AttentionMask::causal(2),
                           AttentionMask::padding({true, false, true, true, false})}) {
    const auto out = mha.forward(q, kv, kv, mask);
    const auto ref = naive_attention(mha, q, kv, mask);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5);
  }
}

TEST(Attention, WeightRowsAreDistributions) {
  Rng rng(12);
  MultiHeadAttention<double> mha(8, 2, rng);
  std::vector<Tensor<double>> weights;
  mha.forward(randn({4, 8}, 13), randn({6, 8}, 14), randn({6, 8}, 15), AttentionMask::causal(), &weights);
  for (const auto& w : weights)
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += w.at(i, j);
        if (j > i) {
          EXPECT_EQ(w.at(i, j), 0.0);
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Attention, FullyMaskedRowIsContractError) {
  Rng rng(16);
  MultiHeadAttention<double> mha(8, 2, rng);
  EXPECT_THROW(mha.forward(randn({2, 8}, 1), randn({3, 8}, 2), randn({3, 8}, 3),
                           AttentionMask::padding({false, false, false})),
               ContractError);
  EXPECT_THROW(MultiHeadAttention<double>(10, 4, rng), ContractError);
  EXPECT_THROW(mha.forward(randn({2, 6}, 1), randn({3, 8}, 2), randn({3, 8}, 3)), ShapeError);
}

TEST(Attention, CachedEqualsCausalForward) {
  Rng rng(17);
  MultiHeadAttention<double> mha(8, 2, rng);
  const auto x = randn({6, 8}, 18);
  const auto full = mha.forward(x, x, x, AttentionMask::causal());
  KvCache<double> cache;
  const auto first = mha.forward_cached(slice(x, 0, 0, 4), cache);
  const auto rest = mha.forward_cached(slice(x, 0, 4, 6), cache);
  const auto joined = concat({first, rest}, 0);
  for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(joined[i], full[i], 1e-12);
}

TEST(Attention, CausalLogitsIgnoreFutureRows) {
  Rng rng(19);
  TransformerBlock<double> block(8, 2, 16, rng);
  const auto x = randn({5, 8}, 20);
  const auto base = block.forward(x, AttentionMask::causal());
  auto y = x.detach();
  for (std::size_t c = 0; c < 8; ++c) y.mutable_data()[3 * 8 + c] += 1.0;
  const auto changed = block.forward(y, AttentionMask::causal());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base.at(i, c), changed.at(i, c));
}

TEST(Blocks, GradCheckEveryBlock) {
  Rng rng(21);
  const auto x = randn({4, 8}, 22), kv = randn({3, 8}, 23);
  auto weigh = [](const Tensor<double>& t) {
    std::vector<double> w(t.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    return sum(mul(t, Tensor<double>(t.shape(), w)));
  };
  {
    LinearLayer<double> L(8, 5, rng);
    ParamList<double> p;
    L.collect(p, "l");
    EXPECT_LT(grad_check([&] { return weigh(L.forward(x)); }, p), 1e-5);
  }
  {
    LayerNorm<double> ln(8);
    ParamList<double> p;
    ln.collect(p, "ln");
    EXPECT_LT(grad_check([&] { return weigh(ln.forward(x)); }, p), 1e-5);
  }
  {
    MultiHeadAttention<double> mha(8, 2, rng);
    ParamList<double> p;
    mha.collect(p, "mha");
    EXPECT_LT(grad_check([&] { return weigh(mha.forward(x, kv, kv)); }, p), 1e-5);
    EXPECT_LT(grad_check([&] { return weigh(mha.forward(x, x, x, AttentionMask::causal())); }, p), 1e-5);
  }
  {
    TransformerBlock<double> block(8, 2, 16, rng);
    ParamList<double> p;
    block.collect(p, "blk");
    EXPECT_LT(grad_check([&] { return weigh(block.forward(x, AttentionMask::causal())); }, p), 1e-5);
  }
  {
    TextEncoder<double> enc(tiny_encoder(), rng);
    ParamList<double> p;
    enc.collect(p, "enc");
    const std::vector<int> ids = {3, 7, 1, 9};
    EXPECT_LT(grad_check([&] { return weigh(mean_pool(enc.encode(ids).states)); }, p), 1e-5);
  }
}

TEST(Encoder, ShapeDeterminismAndErrors) {
  Rng rng(24);
  TextEncoder<float> enc(tiny_encoder(), rng);
  const std::vector<int> ids = {1, 2, 3};
  const auto a = enc.encode(ids), b = enc.encode(ids);
  EXPECT_EQ(a.states.shape(), (Shape{3, 8}));
  for (std::size_t i = 0; i < a.states.numel(); ++i) EXPECT_EQ(a.states[i], b.states[i]);
  EXPECT_THROW(enc.encode(std::vector<int>{}), ContractError);
  EXPECT_THROW(enc.encode(std::vector<int>{20}), ContractError);
  std::vector<int> long_ids(15);
  for (std::size_t i = 0; i < 15; ++i) long_ids[i] = static_cast<int>(i);
  const auto t = enc.encode(long_ids);
  EXPECT_TRUE(t.truncated);
  EXPECT_EQ(t.dropped, 3u);
  EXPECT_EQ(t.states.shape(), (Shape{12, 8}));
  const std::vector<int> tail(long_ids.begin() + 3, long_ids.end());
  const auto direct = enc.encode(tail);
  for (std::size_t i = 0; i < direct.states.numel(); ++i) EXPECT_EQ(direct.states[i], t.states[i]);
}

TEST(Encoder, DistinguishesTokenOrderAfterTraining) {
  Rng rng(25);
  TextEncoder<double> enc(tiny_encoder(), rng);
  LinearLayer<double> head(8, 1, rng);
  ParamList<double> params;
  enc.collect(params, "enc");
  head.collect(params, "head");
  Adam<double> opt(params, {.lr = 3e-3});
  const std::vector<int> ab = {4, 5, 6}, ba = {5, 4, 6};
  for (int step = 0; step < 60; ++step) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto ya = head.forward(mean_pool(enc.encode(ab).states));
    const auto yb = head.forward(mean_pool(enc.encode(ba).states));
    const auto loss = add(mul(add_scalar(ya, -1.0), add_scalar(ya, -1.0)), mul(add_scalar(yb, 1.0), add_scalar(yb, 1.0)));
    tape.backward(sum(loss));
    opt.step();
  }
  const auto ya = mean_pool(enc.encode(ab).states), yb = mean_pool(enc.encode(ba).states);
  double diff = 0;
  for (std::size_t i = 0; i < 8; ++i) diff += std::abs(ya[i] - yb[i]);
  EXPECT_GT(diff, 1e-3);
}

TEST(CrossEntropy, AnalyticCases) {
  const std::vector<int> targets = {2, 0};
  Tensor<double> forced(Shape{2, 3}, std::vector<double>{-1e4, -1e4, 0.0, 0.0, -1e4, -1e4});
  EXPECT_NEAR(cross_entropy(forced, targets).item(), 0.0, 1e-12);
  Tensor<double> uniform(Shape{2, 7}, 0.3);
  const std::vector<int> t2 = {1, 6};
  EXPECT_NEAR(cross_entropy(uniform, t2).item(), std::log(7.0), 1e-12);
  EXPECT_THROW(cross_entropy(uniform, t2, {true, true}), ContractError);
}

TEST(CrossEntropy, MatchesExtendedPrecisionOracle) {
  const auto logits = randn({5, 9}, 26, 3.0);
  const std::vector<int> targets = {0, 8, 3, 3, 5};
  const std::vector<bool> ignore = {false, true, false, false, false};
  long double total = 0;
  int n = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    if (ignore[i]) continue;
    long double z = 0;
    for (std::size_t v = 0; v < 9; ++v) z += std::exp(static_cast<long double>(logits.at(i, v)));
    total += std::log(z) - logits.at(i, static_cast<std::size_t>(targets[i]));
    ++n;
  }
  EXPECT_NEAR(cross_entropy(logits, targets, ignore).item(), static_cast<double>(total / n), 1e-6);
  Rng rng(27);
  auto p = normal_tensor<double>({5, 9}, 1.0, rng);
  EXPECT_LT(grad_check([&] { return cross_entropy(p, targets, ignore); }, std::vector<Tensor<double>>{p}), 1e-6);
}

TEST(Optimizer, MinimizesQuadraticAndClips) {
  Tensor<double> w(Shape{3}, std::vector<double>{2.0, -1.0, 0.5}, true);
  Adam<double> opt({{"w", w}}, {.lr = 0.05, .clip_norm = 0.0});
  for (int i = 0; i < 400; ++i) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(w, w)));
    opt.step();
  }
  for (double v : w.data()) EXPECT_NEAR(v, 0.0, 0.06);
  EXPECT_EQ(opt.steps(), 400u);

  Tensor<double> u(Shape{1}, 1.0, true);
  Adam<double> clipped({{"u", u}}, {.lr = 0.1, .clip_norm = 1.0});
  u.mutable_grad()[0] = 100.0;
  EXPECT_DOUBLE_EQ(clipped.step(), 100.0);
  EXPECT_NEAR(u[0], 0.9, 1e-6);  // first adaptive step has magnitude lr
  EXPECT_FALSE(u.has_grad() && u.grad()[0] != 0.0);
}
