#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "geniedrive/core/errors.hpp"
#include "geniedrive/nn/checkpoint.hpp"
#include "geniedrive/nn/layers.hpp"
#include "geniedrive/nn/ops.hpp"

using namespace geniedrive;
using namespace geniedrive::nn;
using geniedrive::testing::gradcheck;
using geniedrive::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

// Weighted sum with fixed random weights, so every output entry matters.
Tensor probe(const Tensor& y, uint64_t seed = 99) {
  Rng rng(seed);
  auto w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

}  // namespace

TEST(Tensor, BackwardAccumulatesThroughSharedInputs) {
  auto x = Tensor::from({2}, {1.5, -2.0}, true);
  auto y = sum(add(mul(x, x), x));
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 1);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2 * -2.0 + 1);
}

TEST(Tensor, NoGradGuardDropsGraph) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  NoGradGuard g;
  auto y = mul(x, x);
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 1}, rng);
  auto pos = Tensor::from({5}, {0.5, 1.2, 2.0, 0.3, 4.0});
  EXPECT_LT(gradcheck({a, b, c}, [&] { return probe(div(mul(add(a, b), sub(a, c)), add_scalar(square(c), 1.0))); }),
            kTol);
  EXPECT_LT(gradcheck({a}, [&] { return probe(tanh(a)) + probe(silu(a), 3) + probe(gelu(a), 4) + probe(exp(a), 5); }),
            kTol);
  EXPECT_LT(gradcheck({pos}, [&] { return probe(log(pos)) + probe(sqrt(pos), 7); }), kTol);
  EXPECT_LT(gradcheck({a}, [&] { return probe(clamp(a, -0.5, 0.5)) + probe(relu(a), 8) + probe(abs(a), 9); }),
            kTol);
}

TEST(Ops, ShapeOpGradients) {
  Rng rng(2);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 2, 4}, rng);
  EXPECT_LT(gradcheck({a}, [&] { return probe(permute(a, {2, 0, 1})); }), kTol);
  EXPECT_LT(gradcheck({a, b}, [&] { return probe(concat({a, b, a}, 1)); }), kTol);
  EXPECT_LT(gradcheck({a}, [&] { return probe(slice(a, 2, 1, 2)); }), kTol);
  EXPECT_LT(gradcheck({a}, [&] { return probe(reshape(a, {6, -1})); }), kTol);
  EXPECT_LT(gradcheck({a}, [&] { return probe(repeat_leading(a, 3)); }), kTol);
  auto table = random_tensor({5, 3}, rng);
  std::vector<int64_t> idx{4, 0, 4, 2};
  EXPECT_LT(gradcheck({table}, [&] { return probe(gather_rows(table, idx)); }), kTol);
}

TEST(Ops, PermuteMovesEntries) {
  auto a = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  auto t = permute(a, {1, 0});
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), (std::vector<double>{0, 3, 1, 4, 2, 5}));
}

TEST(Ops, ReductionAndLinearGradients) {
  Rng rng(3);
  auto x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), bias = random_tensor({5}, rng);
  EXPECT_LT(gradcheck({x}, [&] { return probe(sum_axis(x, 1, false)) + probe(mean_axis(x, 2, true), 4) + mean(x); }),
            kTol);
  EXPECT_LT(gradcheck({x, w, bias}, [&] { return probe(linear(x, w, bias)); }), kTol);
  auto m1 = random_tensor({3, 4}, rng);
  EXPECT_LT(gradcheck({m1, w}, [&] { return probe(matmul(m1, w)); }), kTol);
}

TEST(Ops, NormalizationGradients) {
  Rng rng(4);
  auto x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  EXPECT_LT(gradcheck({x}, [&] { return probe(softmax(x)) + probe(log_softmax(x), 5); }), kTol);
  EXPECT_LT(gradcheck({x, g, b}, [&] { return probe(layer_norm(x, g, b)); }), kTol);
}

TEST(Ops, AttentionGradients) {
  Rng rng(5);
  auto q = random_tensor({2, 3, 8}, rng), k = random_tensor({2, 5, 8}, rng), v = random_tensor({2, 5, 8}, rng);
  EXPECT_LT(gradcheck({q, k, v}, [&] { return probe(attention(q, k, v, 4)); }), kTol);
}

TEST(Ops, SingleKeyAttentionReturnsValue) {
  // One key: softmax over a single logit is 1, so the output is V for every query.
  auto q = Tensor::from({1, 2, 2}, {0.3, -1.0, 5.0, 2.0});
  auto k = Tensor::from({1, 1, 2}, {1.0, 1.0});
  auto v = Tensor::from({1, 1, 2}, {0.25, -4.0});
  auto o = attention(q, k, v, 1);
  EXPECT_EQ(std::vector<double>(o.data().begin(), o.data().end()), (std::vector<double>{0.25, -4.0, 0.25, -4.0}));
}

TEST(Ops, TwoKeyAttentionMatchesHandComputation) {
  auto q = Tensor::from({1, 1, 2}, {1.0, 0.0});
  auto k = Tensor::from({1, 2, 2}, {2.0, 0.0, 0.0, 0.0});
  auto v = Tensor::from({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto o = attention(q, k, v, 1);
  const double s = 2.0 / std::sqrt(2.0);
  const double p0 = std::exp(s) / (std::exp(s) + 1.0);
  EXPECT_NEAR(o.at(0), p0, 1e-12);
  EXPECT_NEAR(o.at(1), 1.0 - p0, 1e-12);
}

TEST(Ops, ConvolutionGradients) {
  Rng rng(6);
  auto x = random_tensor({4, 4, 2, 3}, rng), w = random_tensor({27 * 3, 2}, rng), b = random_tensor({2}, rng);
  EXPECT_LT(gradcheck({x, w, b}, [&] { return probe(conv3d(x, w, b, 3, 1, 1)); }), kTol);
  auto w2 = random_tensor({27 * 3, 2}, rng);
  EXPECT_LT(gradcheck({x, w2}, [&] { return probe(conv3d(x, w2, Tensor(), 3, 2, 1)); }), kTol);
  auto up = random_tensor({3, 8 * 2}, rng);
  EXPECT_LT(gradcheck({x, up, b}, [&] { return probe(upconv3d_2x(x, up, b)); }), kTol);
}

TEST(Ops, ConvolutionMatchesDirectSum) {
  Rng rng(7);
  auto x = random_tensor({3, 4, 2, 2}, rng), w = random_tensor({27 * 2, 3}, rng);
  auto y = conv3d(x, w, Tensor(), 3, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 4, 2, 3}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 2; ++k)
        for (int o = 0; o < 3; ++o) {
          double s = 0;
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
              for (int c = 0; c < 3; ++c) {
                const int xi = i + a - 1, yj = j + b - 1, zk = k + c - 1;
                if (xi < 0 || yj < 0 || zk < 0 || xi >= 3 || yj >= 4 || zk >= 2) continue;
                for (int ci = 0; ci < 2; ++ci)
                  s += x.at(((xi * 4 + yj) * 2 + zk) * 2 + ci) * w.at((((a * 3 + b) * 3 + c) * 2 + ci) * 3 + o);
              }
          EXPECT_NEAR(y.at(((i * 4 + j) * 2 + k) * 3 + o), s, 1e-12);
        }
}

TEST(Ops, TriplaneProductMatchesLoops) {
  Rng rng(8);
  auto xy = random_tensor({3, 2, 2}, rng), yz = random_tensor({2, 4, 2}, rng), xz = random_tensor({3, 4, 2}, rng);
  auto v = triplane_product(xy, yz, xz);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 4; ++k)
        for (int c = 0; c < 2; ++c)
          EXPECT_DOUBLE_EQ(v.at(((i * 2 + j) * 4 + k) * 2 + c),
                           xy.at((i * 2 + j) * 2 + c) * yz.at((j * 4 + k) * 2 + c) * xz.at((i * 4 + k) * 2 + c));
  EXPECT_LT(gradcheck({xy, yz, xz}, [&] { return probe(triplane_product(xy, yz, xz)); }), kTol);
}

TEST(Losses, CrossEntropyGradientAndPerfectCase) {
  Rng rng(9);
  auto logits = random_tensor({5, 3}, rng);
  std::vector<int> lab{0, 2, 1, 1, 0};
  EXPECT_LT(gradcheck({logits}, [&] { return cross_entropy(logits, lab); }), kTol);
  std::vector<double> big(15, -50.0);
  for (int n = 0; n < 5; ++n) big[n * 3 + lab[n]] = 50.0;
  EXPECT_LT(cross_entropy(Tensor::from({5, 3}, big), lab).item(), 1e-12);
}

namespace {

// Jaccard loss of a mispredicted set against the foreground set.
double jaccard_loss(const std::vector<int>& fg, const std::vector<int>& mispred) {
  int inter = 0, uni = 0;
  for (size_t i = 0; i < fg.size(); ++i) {
    inter += fg[i] && !mispred[i];
    uni += fg[i] || mispred[i];
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / uni;
}

// Lovasz extension as an integral over thresholds of the set function.
double lovasz_by_thresholds(const std::vector<int>& fg, const std::vector<double>& err) {
  std::vector<double> levels(err);
  levels.push_back(0.0);
  std::sort(levels.begin(), levels.end());
  double total = 0.0;
  for (size_t l = 1; l < levels.size(); ++l) {
    const double lo = levels[l - 1], hi = levels[l];
    if (hi <= lo) continue;
    std::vector<int> above(err.size());
    for (size_t i = 0; i < err.size(); ++i) above[i] = err[i] > lo;
    total += (hi - lo) * jaccard_loss(fg, above);
  }
  return total;
}

}  // namespace

TEST(Losses, LovaszMatchesExtensionOnFourElements) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> lab(4);
    for (auto& l : lab) l = static_cast<int>(rng.uniform_int(0, 1));
    std::vector<double> p(8);
    for (int i = 0; i < 4; ++i) {
      p[i * 2] = rng.uniform();
      p[i * 2 + 1] = 1.0 - p[i * 2];
    }
    const double got = lovasz_softmax(Tensor::from({1, 4, 2}, p), lab).item();
    double expect = 0.0;
    int present = 0;
    for (int c = 0; c < 2; ++c) {
      std::vector<int> fg(4);
      std::vector<double> err(4);
      bool any = false;
      for (int i = 0; i < 4; ++i) {
        fg[i] = lab[i] == c;
        any |= fg[i];
        err[i] = std::abs(fg[i] - p[i * 2 + c]);
      }
      if (!any) continue;
      ++present;
      expect += lovasz_by_thresholds(fg, err);
    }
    EXPECT_NEAR(got, expect / present, 1e-12) << "trial " << trial;
  }
}

TEST(Losses, LovaszGradientAndPerfectCase) {
  Rng rng(11);
  auto logits = random_tensor({2, 6, 3}, rng);
  std::vector<int> lab{0, 1, 2, 2, 1, 0, 1, 1, 1, 0, 2, 2};
  EXPECT_LT(gradcheck({logits}, [&] { return lovasz_softmax(softmax(logits), lab); }), kTol);
  std::vector<double> onehot(36, 0.0);
  for (int i = 0; i < 12; ++i) onehot[i * 3 + lab[i]] = 1.0;
  EXPECT_DOUBLE_EQ(lovasz_softmax(Tensor::from({2, 6, 3}, onehot), lab).item(), 0.0);
}

TEST(Losses, MseGradient) {
  Rng rng(12);
  auto a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  EXPECT_LT(gradcheck({a, b}, [&] { return mse(a, b); }), kTol);
}

TEST(Layers, DropoutIsInvertedAndSeeded) {
  Rng r1(3), r2(3);
  auto x = Tensor::full({1000}, 1.0);
  auto a = dropout(x, 0.5, r1), b = dropout(x, 0.5, r2);
  EXPECT_EQ(std::vector<double>(a.data().begin(), a.data().end()), std::vector<double>(b.data().begin(), b.data().end()));
  double s = 0;
  for (double v : a.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    s += v;
  }
  EXPECT_NEAR(s / 1000.0, 1.0, 0.1);
}

TEST(Layers, AdamReducesQuadratic) {
  Rng rng(13);
  ParamStore ps;
  auto w = ps.create("w", {4}, Init::Normal, rng);
  Adam opt(parameters_of(ps));
  auto target = Tensor::from({4}, {1, -2, 3, 0.5});
  double first = 0, last = 0;
  for (int step = 0; step < 300; ++step) {
    opt.zero_grad();
    auto l = mse(w, target);
    l.backward();
    opt.step(0.05);
    if (step == 0) first = l.item();
    last = l.item();
  }
  EXPECT_LT(last, 1e-3 * first);
}

TEST(Layers, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 100, 10), 0.1);
  EXPECT_NEAR(cosine_lr(1.0, 10, 100, 10), 1.0, 1e-12);
  EXPECT_NEAR(cosine_lr(1.0, 100, 100, 10), 0.05, 1e-12);
}

TEST(Checkpoint, RoundTripAndValidation) {
  Rng rng(14);
  ParamStore a, b;
  a.create("x.weight", {3, 4}, Init::Normal, rng);
  a.create("x.bias", {4}, Init::Normal, rng);
  b.create("x.weight", {3, 4}, Init::Zeros, rng);
  b.create("x.bias", {4}, Init::Zeros, rng);
  auto dir = std::filesystem::temp_directory_path() / "gd_nn_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(a, dir, {{"kind", "test"}});
  auto meta = load_checkpoint(b, dir);
  EXPECT_EQ(meta["kind"], "test");
  for (size_t i = 0; i < a.entries().size(); ++i) {
    auto va = a.entries()[i].second.data(), vb = b.entries()[i].second.data();
    for (size_t j = 0; j < va.size(); ++j) EXPECT_EQ(static_cast<float>(va[j]), vb[j]);
  }

  ParamStore wrong;
  wrong.create("x.weight", {4, 3}, Init::Zeros, rng);
  wrong.create("x.bias", {4}, Init::Zeros, rng);
  EXPECT_THROW(load_checkpoint(wrong, dir), ShapeError);

  ParamStore extra;
  extra.create("x.weight", {3, 4}, Init::Zeros, rng);
  extra.create("x.bias", {4}, Init::Zeros, rng);
  extra.create("y", {1}, Init::Zeros, rng);
  EXPECT_THROW(load_checkpoint(extra, dir), ConsistencyError);

  std::filesystem::resize_file(dir / "weights.bin", 8);
  EXPECT_THROW(load_checkpoint(b, dir), TruncatedError);
}
