// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/nn_optim.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

namespace skelsplat {
namespace {

TEST(PositionalEncoding, ZeroInput) {
  const std::vector<double> p = {0.0, 0.0, 0.0};
  const VecX e = positional_encoding(p, 4);
  ASSERT_EQ(e.size(), 30);
  for (Eigen::Index k = 0; k < e.size(); k += 2) {
    EXPECT_EQ(e[k], 0.0);
    EXPECT_EQ(e[k + 1], 1.0);
  }
}

TEST(PositionalEncoding, OutputLengths) {
  const std::vector<double> x = {0.1, 0.2, 0.3};
  const std::vector<double> t = {0.5};
  EXPECT_EQ(positional_encoding(x, 10).size(), 66);
  EXPECT_EQ(positional_encoding(t, 6).size(), 14);
  EXPECT_EQ(encoded_size(3, 10), 66);
}

TEST(PositionalEncoding, BackwardMatchesFiniteDifferences) {
  std::vector<double> p = {0.31, -0.7};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  VecX g(encoded_size(2, 5));
  for (auto& v : g) v = n(rng);
  const VecX analytic = positional_encoding_backward(p, 5, {g.data(), static_cast<std::size_t>(g.size())});
  for (int c = 0; c < 2; ++c) {
    auto plus = p, minus = p;
    plus[c] += 1e-6;
    minus[c] -= 1e-6;
    const double fd = (positional_encoding(plus, 5).dot(g) - positional_encoding(minus, 5).dot(g)) / 2e-6;
    EXPECT_NEAR(analytic[c], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Mlp, ZeroWeightsOutputBias) {
  Mlp net({3, 2, 8, 2}, 1, true);
  for (auto& l : net.layers()) l.weight.setZero();
  net.layers().back().bias << 0.25, -1.5;
  const VecX out = net.forward_one(VecX::Constant(3, 7.0));
  EXPECT_EQ(out[0], 0.25);
  EXPECT_EQ(out[1], -1.5);
}

TEST(Mlp, ZeroHeadStartsAtZero) {
  Mlp net({5, 7, 16, 3}, 9, true);
  EXPECT_EQ(net.forward_one(VecX::Random(5)), VecX::Zero(7));
}

TEST(Mlp, LinearNetDerivativeIsInput) {
  std::vector<Linear> layers(1);
  layers[0].weight = MatX::Constant(1, 1, 0.3);
  layers[0].bias = VecX::Zero(1);
  Mlp net(layers);
  MlpCache cache;
  MatX in(1, 1);
  in << 2.5;
  net.forward(in, &cache);
  const auto g = net.backward(cache, MatX::Ones(1, 1));
  EXPECT_DOUBLE_EQ(g.layers[0].weight(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(g.input(0, 0), 0.3);
}

TEST(Mlp, ShapeMismatchThrows) {
  Mlp net({3, 2, 4, 1}, 1);
  EXPECT_THROW(net.forward_one(VecX::Zero(4)), Error);
  std::vector<Linear> bad(2);
  bad[0] = {MatX::Zero(4, 3), VecX::Zero(4)};
  bad[1] = {MatX::Zero(2, 5), VecX::Zero(2)};
  EXPECT_THROW(Mlp{bad}, Error);
}

// Central-difference check of every parameter and input of a random net.
double max_relative_gradient_error(std::uint64_t seed, int batch) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Mlp net({4, 3, 6, 2}, seed, false);
  MatX in(4, batch), w(3, batch);
  for (auto& v : in.reshaped()) v = n(rng);
  for (auto& v : w.reshaped()) v = n(rng);
  auto loss = [&](const Mlp& m, const MatX& x) { return (m.forward(x).cwiseProduct(w)).sum(); };
  MlpCache cache;
  net.forward(in, &cache);
  const auto grads = net.backward(cache, w);
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-6, std::max(std::abs(a), std::abs(b))); };
  double worst = 0.0;
  const double h = 1e-4;
  auto blocks = net.parameter_blocks();
  const auto gblocks = Mlp::gradient_blocks(grads);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < blocks[b].size(); ++i) {
      const double orig = blocks[b][i];
      blocks[b][i] = orig + h;
      const double lp = loss(net, in);
      blocks[b][i] = orig - h;
      const double lm = loss(net, in);
      blocks[b][i] = orig;
      const double fd = (lp - lm) / (2 * h);
      if (std::abs(fd) > 1e-7 || std::abs(gblocks[b][i]) > 1e-7) worst = std::max(worst, rel(gblocks[b][i], fd));
    }
  }
  for (Eigen::Index i = 0; i < in.size(); ++i) {
    MatX p = in, m = in;
    p.reshaped()[i] += h;
    m.reshaped()[i] -= h;
    const double fd = (loss(net, p) - loss(net, m)) / (2 * h);
    worst = std::max(worst, rel(grads.input.reshaped()[i], fd));
  }
  return worst;
}

TEST(Mlp, BackwardMatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) EXPECT_LT(max_relative_gradient_error(seed, 3), 1e-4);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> x = {1.0, -2.0, 3.0};
  const std::vector<double> g(3, 0.0);
  Adam adam({0.9, 0.999, 1e-8, LrSchedule::constant(0.1)}, {3});
  for (int i = 0; i < 100; ++i) {
    std::span<double> p[] = {x};
    std::span<const double> gr[] = {g};
    adam.step(p, gr);
  }
  EXPECT_EQ(x, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, MinimizesParabola) {
  std::vector<double> x = {1.0};
  Adam adam({0.9, 0.999, 1e-8, LrSchedule::constant(1e-2)}, {1});
  int steps = 0;
  for (; steps < 2000; ++steps) {
    std::vector<double> g = {2.0 * x[0]};
    std::span<double> p[] = {x};
    std::span<const double> gr[] = {g};
    adam.step(p, gr);
  }
  EXPECT_LT(std::abs(x[0]), 1e-3);
}

TEST(LrSchedule, ExponentialDecayEndpoints) {
  const LrSchedule s{1e-3, 1e-5, 5000};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-3);
  EXPECT_NEAR(s.at(5000), 1e-5, 1e-18);
  EXPECT_NEAR(s.at(2500), 1e-4, 1e-16);
  EXPECT_NEAR(s.at(99999), 1e-5, 1e-18);
}

TEST(Mlp, SeededInitIsDeterministic) {
  Mlp a({10, 4, 32, 3}, 77, false), b({10, 4, 32, 3}, 77, false), c({10, 4, 32, 3}, 78, false);
  for (std::size_t l = 0; l < a.num_layers(); ++l) EXPECT_EQ(a.layers()[l].weight, b.layers()[l].weight);
  EXPECT_NE(a.layers()[0].weight, c.layers()[0].weight);
}

TEST(Checkpoint, NetworkAndAdamRoundTrip) {
  Mlp net({6, 7, 16, 2}, 5, false);
  auto blocks = net.parameter_blocks();
  Adam adam({0.9, 0.999, 1e-8, {1e-3, 1e-5, 100}}, block_sizes(blocks));
  std::vector<std::vector<double>> grads;
  for (auto& b : blocks) grads.emplace_back(b.size(), 0.01);
  std::vector<std::span<const double>> gs(grads.begin(), grads.end());
  adam.step(blocks, gs);

  const auto path = std::filesystem::temp_directory_path() / "skelsplat_ckpt_test.bin";
  save_checkpoint(path, net, &adam);
  Mlp net2;
  Adam adam2;
  load_checkpoint(path, net2, &adam2);
  ASSERT_EQ(net2.num_layers(), net.num_layers());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    EXPECT_EQ(net2.layers()[l].weight, net.layers()[l].weight);
    EXPECT_EQ(net2.layers()[l].bias, net.layers()[l].bias);
  }
  EXPECT_EQ(adam2.steps_taken(), 1);
  // Continuing both optimizers gives identical parameters.
  auto b1 = net.parameter_blocks();
  auto b2 = net2.parameter_blocks();
  adam.step(b1, gs);
  adam2.step(b2, gs);
  for (std::size_t l = 0; l < net.num_layers(); ++l) EXPECT_EQ(net2.layers()[l].weight, net.layers()[l].weight);
  std::filesystem::remove(path);

  std::istringstream garbage("not a checkpoint at all");
  EXPECT_THROW(read_mlp(garbage), Error);
}

}  // namespace
}  // namespace skelsplat
