// SPDX-License-Identifier: Apache-2.0
// Central finite differences (eps 1e-5) against the tape's analytic double
// gradients for every differentiable primitive and the whole network.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "speechface/autograd.hpp"
#include "speechface/net.hpp"

namespace gradient_suite {

using namespace speechface;
using testing_oracles::random_tensor;

using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct Report {
  std::string worst_name;
  double worst = 0;
};

inline constexpr double kTol = 1e-4;

/// Checks d(loss)/d(every param and every input) and returns the worst
/// element-wise relative error.
inline Report gradcheck(const std::vector<ParamTensor<double>*>& params, std::vector<Tensor<double>>& inputs,
                        const Build& build) {
  for (auto* p : params) p->zero_grad();
  std::vector<std::vector<double>> input_grads;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (auto& in : inputs) vars.push_back(tape.input(in, true));
    const Var loss = build(tape, vars);
    tape.backward(loss);
    for (auto v : vars) input_grads.push_back(tape.grad(v).storage());
  }
  const std::function<double()> eval = [&] {
    Tape<double> tape(false);
    std::vector<Var> vars;
    for (auto& in : inputs) vars.push_back(tape.input(in, false));
    return tape.value(build(tape, vars))[0];
  };
  Report r;
  auto consider = [&](const std::string& name, double e) {
    if (e > r.worst) {
      r.worst = e;
      r.worst_name = name;
    }
  };
  for (auto* p : params) {
    const auto analytic = p->grad.storage();
    consider(p->name, testing_oracles::fd_check(p->value.storage(), analytic, eval));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i)
    consider("input" + std::to_string(i), testing_oracles::fd_check(inputs[i].storage(), input_grads[i], eval));
  return r;
}

inline Tensor<double> loss_weights(const Dims& d, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor<double>(d, rng);
}

inline Report conv2d() {
  Rng rng(100);
  ParamTensor<double> w("w", random_tensor<double>({3, 2, 3, 2}, rng));
  ParamTensor<double> b("b", random_tensor<double>({3}, rng));
  std::vector<Tensor<double>> in{random_tensor<double>({2, 2, 6, 5}, rng)};
  const ops::Conv2dGeometry g{3, 2, 2, 1, 1, 1};
  const auto lw = loss_weights({2, 3, 3, 6}, 1);
  return gradcheck({&w, &b}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::conv2d(t, v[0], w, &b, g), lw);
  });
}

inline Report max_pool() {
  Rng rng(101);
  std::vector<Tensor<double>> in{random_tensor<double>({2, 3, 8, 8}, rng)};
  const auto lw = loss_weights({2, 3, 4, 4}, 2);
  return gradcheck({}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::max_pool2d(t, v[0], {2, 2, 2, 2}), lw);
  });
}

inline Report batch_norm_training() {
  Rng rng(102);
  ops::BatchNormState<double> s("bn", 3);
  for (auto& v : s.gamma.value.data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : s.beta.value.data()) v = rng.uniform(-0.5, 0.5);
  std::vector<Tensor<double>> in{random_tensor<double>({4, 3, 2, 3}, rng)};
  const auto lw = loss_weights({4, 3, 2, 3}, 3);
  return gradcheck({&s.gamma, &s.beta}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::batch_norm(t, v[0], s, true), lw);
  });
}

inline Report batch_norm_inference() {
  Rng rng(103);
  ops::BatchNormState<double> s("bn", 2);
  for (auto& v : s.running_mean) v = rng.uniform(-1, 1);
  for (auto& v : s.running_var) v = rng.uniform(0.5, 2);
  for (auto& v : s.gamma.value.data()) v = rng.uniform(0.5, 1.5);
  std::vector<Tensor<double>> in{random_tensor<double>({3, 2, 4}, rng)};
  const auto lw = loss_weights({3, 2, 4}, 4);
  return gradcheck({&s.gamma, &s.beta}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::batch_norm(t, v[0], s, false), lw);
  });
}

inline Report dense() {
  Rng rng(104);
  ParamTensor<double> w("w", random_tensor<double>({5, 4}, rng));
  ParamTensor<double> b("b", random_tensor<double>({5}, rng));
  std::vector<Tensor<double>> in{random_tensor<double>({3, 4}, rng)};
  const auto lw = loss_weights({3, 5}, 5);
  return gradcheck({&w, &b}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::dense(t, v[0], w, &b), lw);
  });
}

inline Report activation(ops::Activation kind) {
  Rng rng(105);
  std::vector<Tensor<double>> in{random_tensor<double>({4, 6}, rng, -2.0, 2.0)};
  const auto lw = loss_weights({4, 6}, 6);
  return gradcheck({}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::weighted_sum(t, ag::activation(t, v[0], kind), lw);
  });
}

inline Report structural() {
  Rng rng(106);
  std::vector<Tensor<double>> in{random_tensor<double>({4, 3}, rng), random_tensor<double>({2, 3}, rng)};
  const auto lw = loss_weights({5, 5}, 7);
  return gradcheck({}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    const Var parts[] = {ag::gather_rows(t, v[0], {3, 1, 1}), v[1]};
    const Var rows = ag::concat_rows<double>(t, parts);                      // [5 x 3]
    const Var wide = ag::concat_cols(t, rows, ag::slice_cols(t, rows, 1, 2));  // [5 x 5]
    return ag::weighted_sum(t, ag::reshape(t, wide, {25}), lw.reshaped({25}));
  });
}

inline Report sum_squared_error() {
  Rng rng(107);
  const auto target = random_tensor<double>({3, 4}, rng);
  std::vector<Tensor<double>> in{random_tensor<double>({3, 4}, rng)};
  return gradcheck({}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    return ag::sum_squared_error(t, v[0], target);
  });
}

inline ops::RecurrentCellParams<double> random_cell(std::size_t gates, std::size_t in, std::size_t hid, Rng& rng) {
  return {ParamTensor<double>("weight_ih", random_tensor<double>({gates * hid, in}, rng, -0.6, 0.6)),
          ParamTensor<double>("weight_hh", random_tensor<double>({gates * hid, hid}, rng, -0.6, 0.6)),
          ParamTensor<double>("bias", random_tensor<double>({gates * hid}, rng, -0.3, 0.3))};
}

inline Report lstm_two_steps() {
  Rng rng(108);
  auto p = random_cell(4, 3, 2, rng);
  std::vector<Tensor<double>> in{random_tensor<double>({2, 3}, rng), random_tensor<double>({2, 3}, rng),
                                 random_tensor<double>({2, 4}, rng)};
  const auto lw = loss_weights({2, 4}, 8);
  return gradcheck({&p.weight_ih, &p.weight_hh, &p.bias}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    Var s = ag::lstm_step(t, v[0], v[2], p);
    s = ag::lstm_step(t, v[1], s, p);
    return ag::weighted_sum(t, s, lw);
  });
}

inline Report gru_two_steps() {
  Rng rng(109);
  auto p = random_cell(3, 3, 2, rng);
  std::vector<Tensor<double>> in{random_tensor<double>({2, 3}, rng), random_tensor<double>({2, 3}, rng),
                                 random_tensor<double>({2, 2}, rng)};
  const auto lw = loss_weights({2, 2}, 9);
  return gradcheck({&p.weight_ih, &p.weight_hh, &p.bias}, in, [&](Tape<double>& t, const std::vector<Var>& v) {
    Var h = ag::gru_step(t, v[0], v[2], p);
    h = ag::gru_step(t, v[1], h, p);
    return ag::weighted_sum(t, h, lw);
  });
}

template <typename To, typename From>
Tensor<To> converted(const Tensor<From>& t) {
  Tensor<To> out(t.dims());
  for (std::size_t i = 0; i < t.size(); ++i) out.storage()[i] = static_cast<To>(t.storage()[i]);
  return out;
}

/// Whole tiny network in train mode, every parameter and input entry. The
/// analytic pass runs in double. Over 10^4 entries have |g| ~ 1e-7, below
/// what double central differences of an O(1) loss resolve, so the numeric
/// side replays an identical long double network.
inline Report tiny_network(net::Variant variant) {
  using Wide = long double;
  auto model = net::build_model<double>(variant, 42, net::Architecture::tiny());
  Rng rng(110);
  // Non-zero biases and batch norm affine terms so every path is exercised.
  for (auto* p : model->parameters()) {
    if (p->value.rank() == 1)
      for (auto& v : p->value.data()) v += rng.uniform(-0.2, 0.2);
  }
  const auto input = random_tensor<double>({3, 1, 128, 32}, rng);
  const net::SequenceLayout layout{{2, 1}};
  const auto lw = loss_weights({3, net::kOutputWidth}, 10);

  const auto params = model->parameters();
  for (auto* p : params) p->zero_grad();
  std::vector<double> input_grad;
  {
    Tape<double> tape;
    const Var x = tape.input(input, true);
    tape.backward(ag::weighted_sum(tape, net::forward_graph(tape, *model, x, layout, net::Mode::train), lw));
    input_grad = tape.grad(x).storage();
  }

  auto wide = net::build_model<Wide>(variant, 42, net::Architecture::tiny());
  const auto wide_params = wide->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) wide_params[i]->value = converted<Wide>(params[i]->value);
  auto wide_input = converted<Wide>(input);
  const auto wide_lw = converted<Wide>(lw);
  const std::function<Wide()> eval = [&] {
    Tape<Wide> tape(false);
    const Var x = tape.input(wide_input, false);
    return tape.value(ag::weighted_sum(tape, net::forward_graph(tape, *wide, x, layout, net::Mode::train), wide_lw))[0];
  };

  Report r;
  auto consider = [&](const std::string& name, double e) {
    if (e > r.worst) {
      r.worst = e;
      r.worst_name = name;
    }
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::string at;
    const double e = testing_oracles::fd_check<Wide>(wide_params[i]->value.storage(), params[i]->grad.storage(), eval,
                                                     Wide(1e-5), &at);
    consider(params[i]->name + at, e);
  }
  std::string at;
  const double e = testing_oracles::fd_check<Wide>(wide_input.storage(), input_grad, eval, Wide(1e-5), &at);
  consider("input" + at, e);
  return r;
}

struct Case {
  std::string name;
  std::function<Report()> run;
};

inline std::vector<Case> all_cases() {
  std::vector<Case> c{{"conv2d", conv2d},
                      {"max_pool", max_pool},
                      {"batch_norm_training", batch_norm_training},
                      {"batch_norm_inference", batch_norm_inference},
                      {"dense", dense},
                      {"relu", [] { return activation(ops::Activation::relu); }},
                      {"tanh", [] { return activation(ops::Activation::tanh); }},
                      {"sigmoid", [] { return activation(ops::Activation::sigmoid); }},
                      {"structural", structural},
                      {"sum_squared_error", sum_squared_error},
                      {"lstm_two_steps", lstm_two_steps},
                      {"gru_two_steps", gru_two_steps}};
  for (auto v : {net::Variant::cnn_static, net::Variant::cnn_lstm, net::Variant::cnn_gru})
    c.push_back({std::string("network_") + net::variant_name(v), [v] { return tiny_network(v); }});
  return c;
}

inline bool passes(const Report& r) { return r.worst < kTol; }

}  // namespace gradient_suite
