// SPDX-License-Identifier: Apache-2.0
//
// Small dense MLP with hand-written backprop, NeRF-style positional
// encoding, and Adam with an exponential learning-rate schedule.
#pragma once

#include "skelsplat/geom.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace skelsplat {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

/// (sin(2^k p), cos(2^k p)) for k = 0..num_freqs, per component of p.
/// Output length is 2 (num_freqs + 1) p.size(); component c occupies a
/// contiguous block, ordered sin_0, cos_0, sin_1, cos_1, ...
VecX positional_encoding(std::span<const double> p, int num_freqs);
inline int encoded_size(int dims, int num_freqs) { return 2 * (num_freqs + 1) * dims; }
/// Gradient w.r.t. p given the gradient w.r.t. the encoding.
VecX positional_encoding_backward(std::span<const double> p, int num_freqs,
                                  std::span<const double> grad_encoding);

struct MlpShape {
  int input = 1;
  int output = 1;
  int width = 256;
  int depth = 8;  // hidden layers (Linear + ReLU), followed by a linear head
};

struct Linear {
  MatX weight;  // out x in
  VecX bias;
};

/// Activations kept by forward() for backward().
struct MlpCache {
  std::vector<MatX> inputs;  // input to each layer (post-activation of the previous one)
};

class Mlp {
 public:
  Mlp() = default;
  /// Hidden layers get uniform fan-in init, U(±sqrt(6 / fan_in)); biases 0.
  /// With `zero_output` the head starts at exactly zero.
  Mlp(const MlpShape& shape, std::uint64_t seed, bool zero_output = true);
  /// Explicit layers (e.g. loaded from a checkpoint). Throws Error when the
  /// shapes do not chain.
  explicit Mlp(std::vector<Linear> layers);

  int input_dim() const;
  int output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t parameter_count() const;

  /// Batched forward: columns of `input` are samples.
  MatX forward(const MatX& input, MlpCache* cache = nullptr) const;
  VecX forward_one(const VecX& input) const;

  struct Gradients {
    std::vector<Linear> layers;
    MatX input;  // dL/d(input), same shape as the forward input
  };
  Gradients backward(const MlpCache& cache, const MatX& grad_output) const;

  /// Every parameter array (weights then biases, per layer) as flat spans.
  std::vector<std::span<double>> parameter_blocks();
  std::vector<std::span<const double>> parameter_blocks() const;
  static std::vector<std::span<const double>> gradient_blocks(const Gradients& g);
  /// into += g, layer by layer (an empty `into` takes a copy). Input
  /// gradients are dropped since batches differ in width.
  static void accumulate(Gradients& into, const Gradients& g);

  const std::vector<Linear>& layers() const { return layers_; }
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::vector<Linear> layers_;
};

/// lr(τ) = initial · (final / initial)^(τ / total_steps), τ clamped to total_steps.
struct LrSchedule {
  double initial = 1e-3;
  double final = 1e-5;
  std::int64_t total_steps = 1;

  static LrSchedule constant(double lr) { return {lr, lr, 1}; }
  double at(std::int64_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LrSchedule schedule;
};

/// Adam over a fixed list of parameter blocks. Block sizes are fixed at
/// construction; call resize() after a topology change (moments reset).
class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& config, const std::vector<std::size_t>& block_sizes);

  void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads);
  double current_lr() const { return config_.schedule.at(step_); }
  std::int64_t steps_taken() const { return step_; }
  void set_steps_taken(std::int64_t s) { step_ = s; }
  void resize(const std::vector<std::size_t>& block_sizes);
  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }

  void write(std::ostream& out) const;
  static Adam read(std::istream& in);

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
std::vector<std::size_t> block_sizes(const std::vector<std::span<T>>& blocks) {
  std::vector<std::size_t> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back(b.size());
  return out;
}

// Binary stream helpers shared by checkpoint writers (little-endian host).
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_f64s(std::ostream& out, std::span<const double> v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
void read_f64s(std::istream& in, std::span<double> v);

/// Network checkpoint layout (all little-endian):
///   magic "SKMLP\0\0\1" (8 bytes), u32 version = 1, u32 layer count,
///   per layer: u32 rows, u32 cols, rows*cols f64 weights (column-major),
///   rows f64 biases.
void write_mlp(std::ostream& out, const Mlp& net);
Mlp read_mlp(std::istream& in);

/// Network + optimizer file: the network block above, then
///   u8 has_adam, and if set: f64 beta1, beta2, eps, lr initial, lr final,
///   i64 total steps, i64 steps taken, u32 block count, per block u64 size
///   followed by size f64 first moments and size f64 second moments.
void save_checkpoint(const std::filesystem::path& path, const Mlp& net, const Adam* adam);
void load_checkpoint(const std::filesystem::path& path, Mlp& net, Adam* adam);

}  // namespace skelsplat
