#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "amber/autodiff.hpp"
#include "amber/encoder.hpp"

namespace amber::testing {

inline constexpr double kStep = 1e-5;
inline constexpr double kFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFloor});
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) v = u(rng);
  return t;
}

using Build = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Max element-wise relative error between tape gradients of the inputs and
// central differences.
inline double input_gradient_error(std::vector<Tensor<double>> inputs, const Build& build) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    auto loss = build(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.has_grad(v.id) ? v.grad() : Tensor<double>(v.shape()));
  }
  auto evaluate = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    return build(tape, vars).value().data[0];
  };
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
      const double keep = inputs[k].data[i];
      inputs[k].data[i] = keep + kStep;
      const double up = evaluate();
      inputs[k].data[i] = keep - kStep;
      const double down = evaluate();
      inputs[k].data[i] = keep;
      worst = std::max(worst, relative_error(analytic[k].data[i], (up - down) / (2 * kStep)));
    }
  }
  return worst;
}

inline bool shift_invariant(const std::string& name) {
  return name.size() >= 8 && name.compare(name.size() - 8, 8, ".attn.bk") == 0;
}

// Same check for model parameters; `per_tensor` coordinates are sampled from
// each parameter (all of them when the tensor is smaller).
inline double parameter_gradient_error(Encoder<double>& model, const std::function<Var<double>(Tape<double>&)>& build,
                                       std::size_t per_tensor, std::uint64_t seed) {
  auto& params = model.parameters();
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    tape.backward(build(tape));
  }
  std::vector<Tensor<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad);
  auto evaluate = [&]() {
    Tape<double> tape;
    return build(tape).value().data[0];
  };
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<std::size_t> coords(params[k].value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_tensor);
    }
    for (std::size_t i : coords) {
      double& slot = params[k].value.data[i];
      const double keep = slot;
      slot = keep + kStep;
      const double up = evaluate();
      slot = keep - kStep;
      const double down = evaluate();
      slot = keep;
      // Key biases shift every score of a row equally, so softmax makes their
      // gradient exactly zero; the difference quotient there is pure roundoff.
      const double numeric = shift_invariant(params[k].name) ? 0.0 : (up - down) / (2 * kStep);
      worst = std::max(worst, relative_error(analytic[k].data[i], numeric));
    }
  }
  return worst;
}

inline ModelConfig toy_config(int vocab = 24) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 32;
  c.ffn_dim = 64;
  c.max_positions = 32;
  c.precision = Precision::kTest64;
  // Larger than the training default so attention is far from uniform and
  // every gradient path carries signal.
  c.init_std = 0.3;
  return c;
}

}  // namespace amber::testing
