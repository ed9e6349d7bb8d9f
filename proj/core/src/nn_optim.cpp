// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/nn_optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace skelsplat {

VecX positional_encoding(std::span<const double> p, int num_freqs) {
  if (num_freqs < 0) throw Error("positional_encoding: num_freqs must be >= 0");
  VecX out(encoded_size(static_cast<int>(p.size()), num_freqs));
  Eigen::Index k = 0;
  for (const double v : p) {
    double scale = 1.0;
    for (int f = 0; f <= num_freqs; ++f, scale *= 2.0) {
      out[k++] = std::sin(scale * v);
      out[k++] = std::cos(scale * v);
    }
  }
  return out;
}

VecX positional_encoding_backward(std::span<const double> p, int num_freqs,
                                  std::span<const double> grad) {
  if (grad.size() != static_cast<std::size_t>(encoded_size(static_cast<int>(p.size()), num_freqs))) {
    throw Error("positional_encoding_backward: gradient size mismatch");
  }
  VecX out = VecX::Zero(static_cast<Eigen::Index>(p.size()));
  std::size_t k = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    double scale = 1.0;
    for (int f = 0; f <= num_freqs; ++f, scale *= 2.0) {
      out[static_cast<Eigen::Index>(c)] += scale * (std::cos(scale * p[c]) * grad[k] - std::sin(scale * p[c]) * grad[k + 1]);
      k += 2;
    }
  }
  return out;
}

Mlp::Mlp(const MlpShape& shape, std::uint64_t seed, bool zero_output) {
  if (shape.input < 1 || shape.output < 1 || shape.width < 1 || shape.depth < 0) {
    throw Error("Mlp: invalid shape");
  }
  std::mt19937_64 rng(seed);
  int fan_in = shape.input;
  for (int l = 0; l <= shape.depth; ++l) {
    const bool head = l == shape.depth;
    const int fan_out = head ? shape.output : shape.width;
    Linear layer{MatX::Zero(fan_out, fan_in), VecX::Zero(fan_out)};
    if (!(head && zero_output)) {
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = dist(rng);
    }
    layers_.push_back(std::move(layer));
    fan_in = fan_out;
  }
}

Mlp::Mlp(std::vector<Linear> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw Error("Mlp: no layers");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].bias.size() != layers_[l].weight.rows()) throw Error("Mlp: bias/weight row mismatch");
    if (l > 0 && layers_[l].weight.cols() != layers_[l - 1].weight.rows()) {
      throw Error("Mlp: layer " + std::to_string(l) + " does not chain with its predecessor");
    }
  }
}

int Mlp::input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
int Mlp::output_dim() const { return static_cast<int>(layers_.back().weight.rows()); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

MatX Mlp::forward(const MatX& input, MlpCache* cache) const {
  if (input.rows() != input_dim()) {
    throw Error("Mlp::forward: input has " + std::to_string(input.rows()) + " rows, expected " +
                std::to_string(input_dim()));
  }
  if (cache) cache->inputs.clear();
  MatX x = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (cache) cache->inputs.push_back(x);
    MatX z = layers_[l].weight * x;
    z.colwise() += layers_[l].bias;
    if (l + 1 < layers_.size()) z = z.cwiseMax(0.0);
    x = std::move(z);
  }
  return x;
}

VecX Mlp::forward_one(const VecX& input) const {
  const MatX in = input;
  return forward(in, nullptr).col(0);
}

Mlp::Gradients Mlp::backward(const MlpCache& cache, const MatX& grad_output) const {
  if (cache.inputs.size() != layers_.size()) throw Error("Mlp::backward: cache does not match network");
  if (grad_output.rows() != output_dim() || grad_output.cols() != cache.inputs.front().cols()) {
    throw Error("Mlp::backward: gradient shape mismatch");
  }
  Gradients out;
  out.layers.resize(layers_.size());
  MatX g = grad_output;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const MatX& x = cache.inputs[l];
    out.layers[l].weight = g * x.transpose();
    out.layers[l].bias = g.rowwise().sum();
    MatX gx = layers_[l].weight.transpose() * g;
    if (l > 0) {
      // x = relu(z) of the previous layer, so relu'(z) = [x > 0].
      g = (x.array() > 0.0).select(gx, 0.0);
    } else {
      out.input = std::move(gx);
    }
  }
  return out;
}

std::vector<std::span<double>> Mlp::parameter_blocks() {
  std::vector<std::span<double>> out;
  for (auto& l : layers_) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

std::vector<std::span<const double>> Mlp::parameter_blocks() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers_) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

std::vector<std::span<const double>> Mlp::gradient_blocks(const Gradients& g) {
  std::vector<std::span<const double>> out;
  for (const auto& l : g.layers) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

void Mlp::accumulate(Gradients& into, const Gradients& g) {
  if (g.layers.empty()) return;
  if (into.layers.empty()) {
    into.layers = g.layers;
  } else {
    if (into.layers.size() != g.layers.size()) throw Error("Mlp::accumulate: layer count mismatch");
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      into.layers[l].weight += g.layers[l].weight;
      into.layers[l].bias += g.layers[l].bias;
    }
  }
  into.input.resize(0, 0);
}

double LrSchedule::at(std::int64_t step) const {
  if (initial == final || total_steps <= 0) return initial;
  const double u = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return initial * std::pow(final / initial, u);
}

Adam::Adam(const AdamConfig& config, const std::vector<std::size_t>& sizes) : config_(config) {
  resize(sizes);
}

void Adam::resize(const std::vector<std::size_t>& sizes) {
  m_.assign(sizes.size(), {});
  v_.assign(sizes.size(), {});
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    m_[b].assign(sizes[b], 0.0);
    v_[b].assign(sizes[b], 0.0);
  }
}

void Adam::step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw Error("Adam::step: block count mismatch");
  const double lr = config_.schedule.at(step_);
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t b = 0; b < m_.size(); ++b) {
    if (params[b].size() != m_[b].size() || grads[b].size() != m_[b].size()) {
      throw Error("Adam::step: block " + std::to_string(b) + " size mismatch");
    }
    auto& m = m_[b];
    auto& v = v_[b];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = grads[b][i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      params[b][i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

// --- binary I/O -------------------------------------------------------------

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64s(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

namespace {
void read_exact(std::istream& in, void* dst, std::size_t n) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw Error("checkpoint: unexpected end of stream");
}
constexpr char kMlpMagic[8] = {'S', 'K', 'M', 'L', 'P', 0, 0, 1};
}  // namespace

std::uint32_t read_u32(std::istream& in) { std::uint32_t v; read_exact(in, &v, 4); return v; }
std::uint64_t read_u64(std::istream& in) { std::uint64_t v; read_exact(in, &v, 8); return v; }
double read_f64(std::istream& in) { double v; read_exact(in, &v, 8); return v; }
void read_f64s(std::istream& in, std::span<double> v) { read_exact(in, v.data(), v.size() * 8); }

void write_mlp(std::ostream& out, const Mlp& net) {
  out.write(kMlpMagic, 8);
  write_u32(out, 1);
  write_u32(out, static_cast<std::uint32_t>(net.num_layers()));
  for (const auto& l : net.layers()) {
    write_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
    write_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
    write_f64s(out, {l.weight.data(), static_cast<std::size_t>(l.weight.size())});
    write_f64s(out, {l.bias.data(), static_cast<std::size_t>(l.bias.size())});
  }
}

Mlp read_mlp(std::istream& in) {
  char magic[8];
  read_exact(in, magic, 8);
  if (std::memcmp(magic, kMlpMagic, 8) != 0) throw Error("checkpoint: bad network magic");
  const auto version = read_u32(in);
  if (version != 1) throw Error("checkpoint: unsupported network version " + std::to_string(version));
  const auto count = read_u32(in);
  std::vector<Linear> layers(count);
  for (auto& l : layers) {
    const auto rows = read_u32(in);
    const auto cols = read_u32(in);
    l.weight.resize(rows, cols);
    l.bias.resize(rows);
    read_f64s(in, {l.weight.data(), static_cast<std::size_t>(l.weight.size())});
    read_f64s(in, {l.bias.data(), static_cast<std::size_t>(l.bias.size())});
  }
  return Mlp(std::move(layers));
}

void Adam::write(std::ostream& out) const {
  write_f64(out, config_.beta1);
  write_f64(out, config_.beta2);
  write_f64(out, config_.eps);
  write_f64(out, config_.schedule.initial);
  write_f64(out, config_.schedule.final);
  write_u64(out, static_cast<std::uint64_t>(config_.schedule.total_steps));
  write_u64(out, static_cast<std::uint64_t>(step_));
  write_u32(out, static_cast<std::uint32_t>(m_.size()));
  for (std::size_t b = 0; b < m_.size(); ++b) {
    write_u64(out, m_[b].size());
    write_f64s(out, m_[b]);
    write_f64s(out, v_[b]);
  }
}

Adam Adam::read(std::istream& in) {
  Adam a;
  a.config_.beta1 = read_f64(in);
  a.config_.beta2 = read_f64(in);
  a.config_.eps = read_f64(in);
  a.config_.schedule.initial = read_f64(in);
  a.config_.schedule.final = read_f64(in);
  a.config_.schedule.total_steps = static_cast<std::int64_t>(read_u64(in));
  a.step_ = static_cast<std::int64_t>(read_u64(in));
  const auto blocks = read_u32(in);
  a.m_.resize(blocks);
  a.v_.resize(blocks);
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const auto n = read_u64(in);
    a.m_[b].resize(n);
    a.v_[b].resize(n);
    read_f64s(in, a.m_[b]);
    read_f64s(in, a.v_[b]);
  }
  return a;
}

void save_checkpoint(const std::filesystem::path& path, const Mlp& net, const Adam* adam) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_checkpoint: cannot open " + path.string());
  write_mlp(out, net);
  const char has = adam ? 1 : 0;
  out.write(&has, 1);
  if (adam) adam->write(out);
  if (!out) throw Error("save_checkpoint: write failed");
}

void load_checkpoint(const std::filesystem::path& path, Mlp& net, Adam* adam) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_checkpoint: cannot open " + path.string());
  net = read_mlp(in);
  char has = 0;
  read_exact(in, &has, 1);
  if (has && adam) *adam = Adam::read(in);
}

}  // namespace skelsplat
