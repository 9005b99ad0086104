#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "effir/ops.hpp"
#include "effir/rng.hpp"
#include "effir/tensor.hpp"

namespace effir {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t points = 0;  // coordinates compared
};

// Central finite differences against reverse-mode gradients. Double precision
// only: float32 rounding drowns the h=1e-5 stencil.
//
// f must be scalar-valued and rebuild its graph on every call, reading the
// inputs' current data. rel err = |a - n| / (|a| + |n| + 1e-12).
template <typename F>
GradCheckResult grad_check(F&& f, std::vector<TensorT<double>>& inputs, double h = 1e-5) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  TapeT<double> tape;
  TensorT<double> loss = f(inputs, &tape);
  if (!loss.is_scalar()) throw ContractError("grad_check expects a scalar-valued function");
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs)
    analytic.emplace_back(in.grad(), in.grad() + in.numel());

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& in = inputs[i];
    for (std::size_t j = 0; j < in.numel(); ++j) {
      const double orig = in.at(j);
      in.at(j) = orig + h;
      const double lp = f(inputs, nullptr).item();
      in.at(j) = orig - h;
      const double lm = f(inputs, nullptr).item();
      in.at(j) = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[i][j];
      const double rel = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.points;
    }
  }
  return res;
}

// One named check per differentiable op. make_inputs draws fresh random
// inputs (kept away from kinks where the op has one); apply routes the op's
// output through a fixed weighting to a scalar.
struct OpCheck {
  std::string name;
  std::function<std::vector<TensorT<double>>(Rng&)> make_inputs;
  std::function<TensorT<double>(std::vector<TensorT<double>>&, TapeT<double>*)> apply;
};

const std::vector<OpCheck>& standard_op_checks();

// Repeats the check with fresh inputs until at least min_points coordinates
// have been compared; returns the worst relative error seen.
GradCheckResult run_op_check(const OpCheck& check, std::size_t min_points, std::uint64_t seed);

}  // namespace effir
