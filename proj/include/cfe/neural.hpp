#pragma once

// Dense multilayer perceptron over flat parameter vectors, exact reverse-mode
// gradients and an Adam optimizer. Everything is 64-bit and value-typed; a
// forward pass returns its own tape so concurrent callers never share state.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cfe/error.hpp"
#include "cfe/random.hpp"

namespace cfe::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { ReLU, Tanh, Identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "?";
}

// One weight or bias block inside a flat parameter vector. Weights are stored
// column-major (Eigen default): element (r, c) lives at offset + c * rows + r.
struct BlockInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const BlockInfo&) const = default;
};

using Manifest = std::vector<BlockInfo>;

inline std::size_t manifest_size(const Manifest& m) {
  std::size_t n = 0;
  for (const auto& b : m) n += b.size();
  return n;
}

struct MLPSpec {
  std::vector<std::size_t> layer_sizes;
  // One activation per weight layer (hidden layers then the output layer).
  std::vector<Activation> activations;

  std::size_t n_layers() const { return layer_sizes.empty() ? 0 : layer_sizes.size() - 1; }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t output_size() const { return layer_sizes.back(); }

  void validate() const {
    if (layer_sizes.size() < 2) throw InvalidSpec("MLPSpec needs at least input and output widths");
    for (auto w : layer_sizes)
      if (w == 0) throw InvalidSpec("MLPSpec has a zero-width layer");
    if (activations.size() != n_layers())
      throw InvalidSpec("MLPSpec activations must have one entry per weight layer");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < n_layers(); ++l)
      n += layer_sizes[l + 1] * layer_sizes[l] + layer_sizes[l + 1];
    return n;
  }

  // Block order per layer: weight then bias.
  Manifest manifest(std::string_view prefix = "", std::size_t base_offset = 0) const {
    Manifest m;
    std::size_t off = base_offset;
    for (std::size_t l = 0; l < n_layers(); ++l) {
      const auto in = layer_sizes[l], out = layer_sizes[l + 1];
      m.push_back({std::string(prefix) + "W" + std::to_string(l), out, in, off});
      off += out * in;
      m.push_back({std::string(prefix) + "b" + std::to_string(l), out, 1, off});
      off += out;
    }
    return m;
  }

  bool operator==(const MLPSpec&) const = default;
};

struct ParamVector {
  std::vector<double> values;
  Manifest manifest;

  std::size_t size() const { return values.size(); }
  std::span<double> span() { return values; }
  std::span<const double> span() const { return values; }

  static ParamVector zeros(const Manifest& m) {
    ParamVector p;
    p.manifest = m;
    p.values.assign(manifest_size(m), 0.0);
    return p;
  }

  void validate() const {
    if (manifest_size(manifest) != values.size())
      throw DimensionMismatch("ParamVector length does not match its manifest");
    for (double v : values)
      if (!std::isfinite(v)) throw NonFiniteError("ParamVector holds a non-finite value");
  }

  Eigen::Map<Matrix> block(std::size_t i) {
    const auto& b = manifest[i];
    return {values.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }
  Eigen::Map<const Matrix> block(std::size_t i) const {
    const auto& b = manifest[i];
    return {values.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }

  bool operator==(const ParamVector&) const = default;
};

// Bitwise comparison, distinguishes -0.0 from 0.0.
inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Fan-in scaled uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.
inline ParamVector mlp_init(const MLPSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector p = ParamVector::zeros(spec.manifest());
  Rng rng(seed);
  for (std::size_t l = 0; l < spec.n_layers(); ++l) {
    const auto& w = p.manifest[2 * l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols));
    for (std::size_t i = 0; i < w.size(); ++i) p.values[w.offset + i] = uniform(rng, -bound, bound);
  }
  return p;
}

// Cached activations of one forward pass; acts[0] is the input batch and
// acts[l + 1] the post-activation output of layer l. Columns are samples.
struct Tape {
  std::vector<std::size_t> layer_sizes;
  std::size_t param_count = 0;
  std::vector<Matrix> acts;

  Eigen::Index batch() const { return acts.empty() ? 0 : acts.front().cols(); }
};

struct ForwardResult {
  Matrix output;
  Tape tape;
};

namespace detail {

inline void apply_activation(Activation a, Matrix& z) {
  switch (a) {
    case Activation::ReLU: z = z.cwiseMax(0.0); break;
    // Exp form vectorizes for double; saturates to +-1 without overflow.
    case Activation::Tanh: z = (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix(); break;
    case Activation::Identity: break;
  }
}

// Multiplies the upstream gradient by the activation derivative, expressed in
// terms of the post-activation value.
inline void apply_activation_grad(Activation a, const Matrix& post, Matrix& grad) {
  switch (a) {
    case Activation::ReLU: grad = (post.array() > 0.0).select(grad, 0.0); break;
    case Activation::Tanh: grad.array() *= 1.0 - post.array().square(); break;
    case Activation::Identity: break;
  }
}

inline void check_params(const ParamVector& params, const MLPSpec& spec) {
  if (params.size() != spec.param_count())
    throw DimensionMismatch("parameter vector length " + std::to_string(params.size()) +
                            " does not match spec (" + std::to_string(spec.param_count()) + ")");
}

}  // namespace detail

// Per-layer weights copied out of a ParamVector into aligned storage. Eigen's
// kernel choice on a Map depends on its address, so evaluating through Layers
// keeps results independent of where the flat vector happens to live. Build
// once per parameter set and reuse across calls.
struct Layers {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Manifest manifest;

  static Layers from(const ParamVector& params, const MLPSpec& spec) {
    spec.validate();
    detail::check_params(params, spec);
    Layers L;
    L.manifest = params.manifest;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
      L.weights.emplace_back(params.block(2 * l));
      L.biases.emplace_back(params.block(2 * l + 1).col(0));
    }
    return L;
  }

  std::size_t param_count() const { return manifest_size(manifest); }
};

inline ForwardResult forward(const Layers& net, const MLPSpec& spec, const Matrix& input) {
  if (net.weights.size() != spec.n_layers()) throw DimensionMismatch("layer count does not match spec");
  if (static_cast<std::size_t>(input.rows()) != spec.input_size())
    throw DimensionMismatch("input has " + std::to_string(input.rows()) + " rows, spec expects " +
                            std::to_string(spec.input_size()));
  ForwardResult r;
  r.tape.layer_sizes = spec.layer_sizes;
  r.tape.param_count = net.param_count();
  r.tape.acts.reserve(spec.n_layers() + 1);
  r.tape.acts.push_back(input);
  for (std::size_t l = 0; l < spec.n_layers(); ++l) {
    Matrix z = net.weights[l] * r.tape.acts.back();
    z.colwise() += net.biases[l];
    detail::apply_activation(spec.activations[l], z);
    r.tape.acts.push_back(std::move(z));
  }
  r.output = r.tape.acts.back();
  return r;
}

inline ForwardResult forward(const ParamVector& params, const MLPSpec& spec, const Matrix& input) {
  return forward(Layers::from(params, spec), spec, input);
}

inline ForwardResult forward(const ParamVector& params, const MLPSpec& spec, std::span<const double> input) {
  return forward(params, spec, Matrix(Eigen::Map<const Matrix>(input.data(), static_cast<Eigen::Index>(input.size()), 1)));
}

struct Gradient {
  ParamVector params;
  Matrix input;
};

// Gradient of sum(output .* output_grad) with respect to every parameter and
// the input, summed over the batch.
inline Gradient backward(const Layers& net, const MLPSpec& spec, const Tape& tape, const Matrix& output_grad) {
  if (net.weights.size() != spec.n_layers()) throw DimensionMismatch("layer count does not match spec");
  if (tape.layer_sizes != spec.layer_sizes || tape.param_count != net.param_count() ||
      tape.acts.size() != spec.n_layers() + 1)
    throw DimensionMismatch("tape does not belong to this network");
  if (static_cast<std::size_t>(output_grad.rows()) != spec.output_size() || output_grad.cols() != tape.batch())
    throw DimensionMismatch("output gradient shape does not match the tape");

  Gradient g;
  g.params = ParamVector::zeros(net.manifest);
  Matrix delta = output_grad;
  for (std::size_t l = spec.n_layers(); l-- > 0;) {
    detail::apply_activation_grad(spec.activations[l], tape.acts[l + 1], delta);
    const Matrix gw = delta * tape.acts[l].transpose();
    const Vector gb = delta.rowwise().sum();
    g.params.block(2 * l) = gw;
    g.params.block(2 * l + 1) = gb;
    Matrix next = net.weights[l].transpose() * delta;
    delta = std::move(next);
  }
  g.input = std::move(delta);
  return g;
}

inline Gradient backward(const ParamVector& params, const MLPSpec& spec, const Tape& tape, const Matrix& output_grad) {
  return backward(Layers::from(params, spec), spec, tape, output_grad);
}

inline Gradient backward(const ParamVector& params, const MLPSpec& spec, const Tape& tape, std::span<const double> output_grad) {
  return backward(params, spec, tape,
                  Matrix(Eigen::Map<const Matrix>(output_grad.data(), static_cast<Eigen::Index>(output_grad.size()), 1)));
}

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  AdamHyper hyper;

  static AdamState zeros(std::size_t n, AdamHyper h = {}) {
    return AdamState{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0, h};
  }
};

// Bias-corrected Adam, in place. A non-finite gradient throws before any
// state is touched so the caller can skip the step.
inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& s) {
  if (params.size() != grad.size() || s.m.size() != params.size() || s.v.size() != params.size())
    throw DimensionMismatch("adam_step: parameter, gradient and moment lengths differ");
  for (double g : grad)
    if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient");
  const auto& h = s.hyper;
  s.t += 1;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * grad[i];
    s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

// Max relative error |analytic - central difference| / max(1, |analytic|)
// over all parameters, for the scalar loss sum(output .* output_grad).
inline double gradient_error(const ParamVector& params, const MLPSpec& spec, std::span<const double> input,
                             std::span<const double> output_grad, std::span<const double> analytic, double h) {
  if (analytic.size() != params.size()) throw DimensionMismatch("analytic gradient length mismatch");
  const Eigen::Map<const Vector> w(output_grad.data(), static_cast<Eigen::Index>(output_grad.size()));
  ParamVector probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + h;
    const double up = forward(probe, spec, input).output.col(0).dot(w);
    probe.values[i] = orig - h;
    const double down = forward(probe, spec, input).output.col(0).dot(w);
    probe.values[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

inline double finite_difference_check(const ParamVector& params, const MLPSpec& spec, std::span<const double> input,
                                      std::span<const double> output_grad, double h) {
  const auto fwd = forward(params, spec, input);
  const auto g = backward(params, spec, fwd.tape, output_grad);
  return gradient_error(params, spec, input, output_grad, g.params.values, h);
}

// Convenience overload probing the loss sum(output) (all-ones output gradient).
inline double finite_difference_check(const ParamVector& params, const MLPSpec& spec, std::span<const double> input,
                                      double h) {
  const std::vector<double> ones(spec.output_size(), 1.0);
  return finite_difference_check(params, spec, input, ones, h);
}

}  // namespace cfe::nn
