#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "priorseg/adam.hpp"
#include "priorseg/segnet.hpp"
#include "test_util.hpp"

using namespace priorseg;
using priorseg::testing::TempDir;

namespace {

template <class T>
BatchTensor<T> random_batch(std::size_t n, std::size_t rows, std::size_t cols, std::size_t ch,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BatchTensor<T> b(n, rows, cols, ch);
  for (auto& v : b.values) v = static_cast<T>(u(rng));
  return b;
}

template <class T>
BatchTensor<T> random_targets(std::size_t n, std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LabelMap> maps;
  for (std::size_t i = 0; i < n; ++i) maps.push_back(priorseg::testing::random_labels(rows, cols, rng));
  return onehot_batch<T>(maps);
}

NetworkConfig tiny_config(int in_channels, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.depth = 2;
  cfg.base_filters = 2;
  cfg.in_channels = in_channels;
  cfg.seed = seed;
  return cfg;
}

double worst_relative_error(int in_channels, std::uint64_t seed) {
  auto state = build_network<double>(tiny_config(in_channels, seed));
  const auto x = random_batch<double>(2, 8, 8, static_cast<std::size_t>(in_channels), seed + 1);
  const auto y = random_targets<double>(2, 8, 8, seed + 2);
  const auto g = backward(state, x, y);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t p = 0; p < state.params.size(); ++p)
    for (std::size_t i = 0; i < state.params[p].values.size(); ++i) {
      auto& v = state.params[p].values[i];
      const double saved = v;
      v = saved + h;
      const double lp = mse_loss(forward(state, x, Mode::Train), y);
      v = saved - h;
      const double lm = mse_loss(forward(state, x, Mode::Train), y);
      v = saved;
      const double fd = (lp - lm) / (2 * h);
      const double an = g.values[p][i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
      EXPECT_LT(rel, 1e-4) << state.params[p].name << "[" << i << "] analytic " << an << " fd " << fd;
      worst = std::max(worst, rel);
    }
  return worst;
}

}  // namespace

TEST(SegNetGradient, MatchesCentralDifferencesFourChannels) {
  EXPECT_LT(worst_relative_error(4, 11), 1e-4);
}

TEST(SegNetGradient, MatchesCentralDifferencesThreeChannels) {
  EXPECT_LT(worst_relative_error(3, 23), 1e-4);
}

TEST(SegNetGradient, LossEqualsForwardLoss) {
  const auto state = build_network<double>(tiny_config(4, 3));
  const auto x = random_batch<double>(3, 8, 8, 4, 4);
  const auto y = random_targets<double>(3, 8, 8, 5);
  EXPECT_NEAR(backward(state, x, y).loss, mse_loss(forward(state, x, Mode::Train), y), 1e-12);
}

TEST(SegNetGradient, Deterministic) {
  const auto state = build_network<float>(tiny_config(4, 3));
  const auto x = random_batch<float>(2, 8, 8, 4, 4);
  const auto y = random_targets<float>(2, 8, 8, 5);
  EXPECT_EQ(backward(state, x, y).values, backward(state, x, y).values);
}

// A 1x1 convolution is a per-pixel linear model; for L = (1/N) sum ||Wx + b - y||^2
// the gradient is dW = (2/N) sum (Wx + b - y) x^T and vanishes at an exact fit.
TEST(LinearLayer, AnalyticGradientAndStationarity) {
  using namespace priorseg::layers;
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(0.0, 1.0);
  const std::size_t cin = 3, cout = 2, n = 2, h = 3, w = 4;
  Tensor<double> x(cin, n, h, w);
  for (auto& v : x.data) v = d(rng);
  std::vector<double> W(cout * cin), b(cout);
  for (auto& v : W) v = d(rng);
  for (auto& v : b) v = d(rng);
  Tensor<double> y(cout, n, h, w);
  for (auto& v : y.data) v = d(rng);

  const auto out = conv_forward(x, W, b.data(), cout, 1);
  Tensor<double> dy(cout, n, h, w);
  for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] = 2.0 * (out.data[i] - y.data[i]) / n;
  std::vector<double> dW(W.size(), 0.0), db(cout, 0.0);
  conv_backward(x, W, dy, 1, dW, db.data(), false);
  for (std::size_t o = 0; o < cout; ++o) {
    double gb = 0;
    for (std::size_t i = 0; i < cin; ++i) {
      double g = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c) {
            double pred = b[o];
            for (std::size_t j = 0; j < cin; ++j) pred += W[o * cin + j] * x.at(j, s, r, c);
            g += 2.0 * (pred - y.at(o, s, r, c)) * x.at(i, s, r, c) / n;
            if (i == 0) gb += 2.0 * (pred - y.at(o, s, r, c)) / n;
          }
      EXPECT_NEAR(dW[o * cin + i], g, 1e-12);
    }
    EXPECT_NEAR(db[o], gb, 1e-12);
  }

  const auto fit = conv_forward(x, W, b.data(), cout, 1);
  Tensor<double> zero_dy(cout, n, h, w);
  for (std::size_t i = 0; i < zero_dy.data.size(); ++i) zero_dy.data[i] = 2.0 * (fit.data[i] - fit.data[i]) / n;
  std::fill(dW.begin(), dW.end(), 0.0);
  std::fill(db.begin(), db.end(), 0.0);
  conv_backward(x, W, zero_dy, 1, dW, db.data(), false);
  for (double g : dW) EXPECT_EQ(g, 0.0);
  for (double g : db) EXPECT_EQ(g, 0.0);
}

TEST(BuildNetwork, SameSeedIsBitIdentical) {
  NetworkConfig cfg;
  cfg.seed = 5;
  const auto a = build_network<float>(cfg), b = build_network<float>(cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.buffers, b.buffers);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  cfg.seed = 6;
  EXPECT_NE(build_network<float>(cfg).params, a.params);
}

TEST(BuildNetwork, ParameterCountMatchesClosedForm) {
  for (int depth : {2, 3, 4})
    for (int base : {2, 8, 32})
      for (int in : {3, 4}) {
        NetworkConfig cfg;
        cfg.depth = depth;
        cfg.base_filters = base;
        cfg.in_channels = in;
        std::size_t expected = 0, prev = static_cast<std::size_t>(in);
        for (int l = 0; l < depth; ++l) {
          const std::size_t ch = static_cast<std::size_t>(base) << l;
          expected += ch * prev * 9 + 2 * ch + ch * ch * 9 + 2 * ch;
          prev = ch;
        }
        for (int l = 0; l < depth - 1; ++l) {
          const std::size_t ch = static_cast<std::size_t>(base) << l;
          expected += 2 * ch * ch * 4 + ch;
          expected += 2 * ch * ch * 9 + 2 * ch + ch * ch * 9 + 2 * ch;
        }
        expected += 6 * static_cast<std::size_t>(base) + 6;
        EXPECT_EQ(build_network<float>(cfg).parameter_count(), expected) << depth << " " << base << " " << in;
      }
}

TEST(BuildNetwork, DepthOneRejected) {
  NetworkConfig cfg;
  cfg.depth = 1;
  EXPECT_THROW(build_network<float>(cfg), Error);
}

TEST(BuildNetwork, InputChannelsOnlyChangeFirstConvolution) {
  NetworkConfig c3, c4;
  c3.in_channels = 3;
  c4.in_channels = 4;
  const auto a = build_network<float>(c3), b = build_network<float>(c4);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params[i].name, b.params[i].name);
    if (a.params[i].name == "enc0.conv1.weight") {
      EXPECT_EQ(a.params[i].shape, (std::vector<std::size_t>{32, 3, 3, 3}));
      EXPECT_EQ(b.params[i].shape, (std::vector<std::size_t>{32, 4, 3, 3}));
    } else {
      EXPECT_EQ(a.params[i].shape, b.params[i].shape) << a.params[i].name;
    }
  }
}

TEST(Forward, FullSizeShapeAndSoftmax) {
  NetworkConfig cfg;
  const auto state = build_network<float>(cfg);
  const auto x = random_batch<float>(16, 64, 64, 4, 1);
  const auto y = forward(state, x, Mode::Eval);
  EXPECT_EQ(y.shape_string(), "16x64x64x6");
  for (std::size_t p = 0; p < 16 * 64 * 64; ++p) {
    double s = 0;
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_GE(y.values[p * 6 + k], 0.0f);
      s += y.values[p * 6 + k];
    }
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Forward, OutputMatchesInputSpatialShape) {
  NetworkConfig cfg;
  cfg.depth = 3;
  cfg.base_filters = 4;
  const auto state = build_network<float>(cfg);
  for (auto [r, c] : {std::pair<std::size_t, std::size_t>{8, 8}, {16, 24}, {64, 32}}) {
    const auto y = forward(state, random_batch<float>(2, r, c, 4, 2), Mode::Eval);
    EXPECT_EQ(y.rows, r);
    EXPECT_EQ(y.cols, c);
  }
}

TEST(Forward, IndivisibleInputRejected) {
  NetworkConfig cfg;
  cfg.depth = 4;
  cfg.base_filters = 2;
  const auto state = build_network<float>(cfg);
  EXPECT_THROW(forward(state, random_batch<float>(1, 60, 64, 4, 3), Mode::Eval), Error);
  EXPECT_THROW(forward(state, random_batch<float>(1, 64, 64, 3, 3), Mode::Eval), Error);
  cfg.depth = 8;
  EXPECT_THROW(forward(build_network<float>(cfg), random_batch<float>(1, 64, 64, 4, 3), Mode::Eval), Error);
}

TEST(Forward, EvalModeIsPure) {
  const auto state = build_network<float>(tiny_config(4, 8));
  const auto x = random_batch<float>(3, 16, 16, 4, 9);
  EXPECT_EQ(forward(state, x, Mode::Eval).values, forward(state, x, Mode::Eval).values);
}

TEST(MseLoss, Examples) {
  const auto t = random_targets<double>(2, 4, 4, 1);
  EXPECT_EQ(mse_loss(t, t), 0.0);

  BatchTensor<double> x(1, 1, 1, 6), y(1, 1, 1, 6);
  x(0, 0, 0, 0) = 1.0;
  y(0, 0, 0, 1) = 1.0;
  EXPECT_DOUBLE_EQ(mse_loss(x, y), 2.0);

  const auto a = random_batch<double>(2, 3, 3, 6, 2);
  const auto b = random_batch<double>(2, 3, 3, 6, 3);
  BatchTensor<double> a2(4, 3, 3, 6), b2(4, 3, 3, 6);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    a2.values[i] = a2.values[i + a.values.size()] = a.values[i];
    b2.values[i] = b2.values[i + b.values.size()] = b.values[i];
  }
  EXPECT_NEAR(mse_loss(a, b), mse_loss(a2, b2), 1e-12);
  EXPECT_THROW(mse_loss(a, a2), Error);
}

TEST(RunningStatistics, MomentumUpdateWithUnbiasedVariance) {
  auto state = build_network<double>(tiny_config(4, 2));
  const auto x = random_batch<double>(2, 8, 8, 4, 3);
  const auto g = backward(state, x, random_targets<double>(2, 8, 8, 4));
  const auto before = state.buffers;
  update_running_statistics(state, g);
  for (std::size_t i = 0; i < state.buffers.size(); ++i) {
    const bool is_var = state.buffers[i].name.ends_with("running_var");
    const auto& stat = is_var ? g.batch_var[i] : g.batch_mean[i];
    const double n = static_cast<double>(g.batch_count[i]);
    for (std::size_t c = 0; c < stat.size(); ++c) {
      const double batch = is_var ? stat[c] * n / (n - 1) : stat[c];
      EXPECT_NEAR(state.buffers[i].values[c], 0.9 * before[i].values[c] + 0.1 * batch, 1e-12);
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  NetworkConfig cfg;
  cfg.depth = 3;
  cfg.base_filters = 4;
  cfg.seed = 77;
  auto state = build_network<float>(cfg);
  const auto x = random_batch<float>(2, 16, 16, 4, 1);
  update_running_statistics(state, backward(state, x, random_targets<float>(2, 16, 16, 2)));
  save_checkpoint(state, dir / "a.ckpt");
  const auto back = load_checkpoint<float>(dir / "a.ckpt");
  EXPECT_EQ(back.config, state.config);
  EXPECT_EQ(back.params, state.params);
  EXPECT_EQ(back.buffers, state.buffers);
  EXPECT_EQ(forward(back, x, Mode::Eval).values, forward(state, x, Mode::Eval).values);
  EXPECT_THROW(load_checkpoint<double>(dir / "a.ckpt"), Error);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.ckpt"), Error);
}

TEST(AdamOptimizer, FirstStepMovesByLearningRate) {
  auto state = build_network<double>(tiny_config(4, 1));
  const auto before = state.params;
  Gradients<double> g;
  for (const auto& p : state.params) g.values.emplace_back(p.values.size(), 0.5);
  Adam<double> adam(state, {0.01, 0.9, 0.999, 1e-8});
  adam.step(state, g);
  for (std::size_t p = 0; p < state.params.size(); ++p)
    for (std::size_t i = 0; i < state.params[p].values.size(); ++i)
      EXPECT_NEAR(before[p].values[i] - state.params[p].values[i], 0.01, 1e-9);
  EXPECT_EQ(adam.steps(), 1);
}
