#include "effir/gradcheck.hpp"

namespace effir {

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;
using Inputs = std::vector<DTensor>;

DTensor randn(Rng& rng, Shape shape, double stddev = 1.0) {
  return DTensor::randn(std::move(shape), rng, stddev);
}

// gaussian pushed at least `margin` away from zero, for kinked ops
DTensor randn_off_zero(Rng& rng, Shape shape, double margin) {
  DTensor t = randn(rng, std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = t.at(i);
    t.at(i) = (v >= 0.0 ? 1.0 : -1.0) * (margin + std::fabs(v));
  }
  return t;
}

// fixed mixing weights so the upstream gradient is non-uniform
DTensor mix_weights(const Shape& shape) {
  DTensor w(shape, false);
  for (std::size_t i = 0; i < w.numel(); ++i)
    w.at(i) = 0.25 + 0.5 * static_cast<double>((i * 7 + 3) % 11);
  return w;
}

DTensor to_scalar(const DTensor& y, DTape* tape) {
  return sum_all(mul(y, mix_weights(y.shape()), tape), tape);
}

std::vector<OpCheck> build_checks() {
  std::vector<OpCheck> checks;
  auto add_check = [&](std::string name, std::function<Inputs(Rng&)> mk,
                       std::function<DTensor(Inputs&, DTape*)> ap) {
    checks.push_back(OpCheck{std::move(name), std::move(mk), std::move(ap)});
  };

  add_check(
      "matmul", [](Rng& r) { return Inputs{randn(r, {3, 4}), randn(r, {4, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(matmul(in[0], in[1], t), t); });
  add_check(
      "matmul_nt", [](Rng& r) { return Inputs{randn(r, {3, 4}), randn(r, {5, 4})}; },
      [](Inputs& in, DTape* t) { return to_scalar(matmul_nt(in[0], in[1], t), t); });
  add_check(
      "transpose", [](Rng& r) { return Inputs{randn(r, {3, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(transpose(in[0], t), t); });
  add_check(
      "add", [](Rng& r) { return Inputs{randn(r, {4, 5}), randn(r, {4, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(add(in[0], in[1], t), t); });
  add_check(
      "mul", [](Rng& r) { return Inputs{randn(r, {4, 5}), randn(r, {4, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(mul(in[0], in[1], t), t); });
  add_check(
      "scale", [](Rng& r) { return Inputs{randn(r, {4, 6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(scale(in[0], 1.7, t), t); });
  add_check(
      "add_scalar", [](Rng& r) { return Inputs{randn(r, {4, 6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(add_scalar(in[0], -0.3, t), t); });
  add_check(
      "mul_rowvec", [](Rng& r) { return Inputs{randn(r, {4, 6}), randn(r, {6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(mul_rowvec(in[0], in[1], t), t); });
  add_check(
      "relu", [](Rng& r) { return Inputs{randn_off_zero(r, {5, 5}, 0.05)}; },
      [](Inputs& in, DTape* t) { return to_scalar(relu(in[0], t), t); });
  add_check(
      "sigmoid", [](Rng& r) { return Inputs{randn(r, {5, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(sigmoid(in[0], t), t); });
  add_check(
      "silu", [](Rng& r) { return Inputs{randn(r, {5, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(silu(in[0], t), t); });
  add_check(
      "gelu", [](Rng& r) { return Inputs{randn(r, {5, 5})}; },
      [](Inputs& in, DTape* t) { return to_scalar(gelu(in[0], t), t); });
  add_check(
      "abs", [](Rng& r) { return Inputs{randn_off_zero(r, {5, 5}, 0.05)}; },
      [](Inputs& in, DTape* t) { return to_scalar(abs(in[0], t), t); });
  add_check(
      "softmax", [](Rng& r) { return Inputs{randn(r, {4, 7})}; },
      [](Inputs& in, DTape* t) { return to_scalar(softmax(in[0], 1, t), t); });
  add_check(
      "softmax_axis0", [](Rng& r) { return Inputs{randn(r, {4, 7})}; },
      [](Inputs& in, DTape* t) { return to_scalar(softmax(in[0], 0, t), t); });
  add_check(
      "log_softmax", [](Rng& r) { return Inputs{randn(r, {4, 7})}; },
      [](Inputs& in, DTape* t) { return to_scalar(log_softmax(in[0], 1, t), t); });
  add_check(
      "rms_norm", [](Rng& r) { return Inputs{randn(r, {4, 6}), randn(r, {6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(rms_norm(in[0], in[1], 1e-6, t), t); });
  add_check(
      "l2_normalize", [](Rng& r) { return Inputs{randn_off_zero(r, {9}, 0.1)}; },
      [](Inputs& in, DTape* t) { return to_scalar(l2_normalize(in[0], t), t); });
  add_check(
      "gather_rows", [](Rng& r) { return Inputs{randn(r, {6, 4})}; },
      [](Inputs& in, DTape* t) {
        return to_scalar(gather_rows(in[0], {1, 3, 3, 0, 5}, t), t);
      });
  add_check(
      "take_row", [](Rng& r) { return Inputs{randn(r, {5, 6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(take_row(in[0], 2, t), t); });
  add_check(
      "mean_rows", [](Rng& r) { return Inputs{randn(r, {5, 6})}; },
      [](Inputs& in, DTape* t) { return to_scalar(mean_rows(in[0], t), t); });
  add_check(
      "slice_cols", [](Rng& r) { return Inputs{randn(r, {4, 8})}; },
      [](Inputs& in, DTape* t) { return to_scalar(slice_cols(in[0], 2, 6, t), t); });
  add_check(
      "concat_cols", [](Rng& r) { return Inputs{randn(r, {4, 3}), randn(r, {4, 5})}; },
      [](Inputs& in, DTape* t) {
        return to_scalar(concat_cols(std::vector<DTensor>{in[0], in[1]}, t), t);
      });
  add_check(
      "stack_rows", [](Rng& r) { return Inputs{randn(r, {5}), randn(r, {5}), randn(r, {5})}; },
      [](Inputs& in, DTape* t) {
        return to_scalar(stack_rows(std::vector<DTensor>{in[0], in[1], in[2]}, t), t);
      });
  add_check(
      "sum_all", [](Rng& r) { return Inputs{randn(r, {5, 5})}; },
      [](Inputs& in, DTape* t) { return sum_all(in[0], t); });
  add_check(
      "mean_all", [](Rng& r) { return Inputs{randn(r, {5, 5})}; },
      [](Inputs& in, DTape* t) { return mean_all(in[0], t); });
  add_check(
      "dot", [](Rng& r) { return Inputs{randn(r, {12}), randn(r, {12})}; },
      [](Inputs& in, DTape* t) { return dot(in[0], in[1], t); });
  add_check(
      "stack_scalars",
      [](Rng& r) { return Inputs{randn(r, {1}), randn(r, {1}), randn(r, {1}), randn(r, {1})}; },
      [](Inputs& in, DTape* t) {
        return to_scalar(stack_scalars(std::vector<DTensor>{in[0], in[1], in[2], in[3]}, t), t);
      });
  add_check(
      "take", [](Rng& r) { return Inputs{randn(r, {4, 5})}; },
      [](Inputs& in, DTape* t) { return take(in[0], 7, t); });

  return checks;
}

}  // namespace

const std::vector<OpCheck>& standard_op_checks() {
  static const std::vector<OpCheck> checks = build_checks();
  return checks;
}

GradCheckResult run_op_check(const OpCheck& check, std::size_t min_points, std::uint64_t seed) {
  GradCheckResult total;
  std::size_t trial = 0;
  while (total.points < min_points) {
    Rng rng(split_seed(seed, "gradcheck/" + check.name + "/" + std::to_string(trial)));
    Inputs inputs = check.make_inputs(rng);
    const GradCheckResult one = grad_check(check.apply, inputs);
    total.max_rel_err = std::max(total.max_rel_err, one.max_rel_err);
    total.points += one.points;
    ++trial;
  }
  return total;
}

}  // namespace effir
