#include <doctest.h>

#include <cmath>

#include "effir/gradcheck.hpp"
#include "effir/losses.hpp"
#include "effir/optimizer.hpp"

using namespace effir;

namespace {

Tensor unit(std::size_t d, std::size_t axis) {
  Tensor t = Tensor::zeros({d});
  t.at(axis) = 1.0f;
  return t;
}

}  // namespace

TEST_CASE("uniform similarities give ln(candidate count)") {
  const std::size_t k = 7;
  std::vector<Tensor> q{unit(4, 0)}, pos{unit(4, 0)};
  std::vector<std::vector<Tensor>> negs{std::vector<Tensor>(k, unit(4, 0))};
  Tensor loss = infonce_loss(q, pos, negs, false, 1.0f, nullptr);
  CHECK(loss.item() == doctest::Approx(std::log(8.0)).epsilon(1e-6));
}

TEST_CASE("separated pair drives the loss to zero") {
  std::vector<Tensor> q{unit(4, 0)}, pos{unit(4, 0)};
  std::vector<std::vector<Tensor>> negs{{unit(4, 1)}};
  Tensor loss = infonce_loss(q, pos, negs, false, 0.02f, nullptr);
  CHECK(loss.item() >= 0.0f);
  CHECK(loss.item() < 1e-15f);
}

TEST_CASE("infonce is a proper negative log probability") {
  Rng rng(split_seed(5, "nce"));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TensorT<double>> q, pos;
    std::vector<std::vector<TensorT<double>>> negs;
    for (int i = 0; i < 3; ++i) {
      q.push_back(l2_normalize(TensorT<double>::randn({6}, rng, 1.0), nullptr));
      pos.push_back(l2_normalize(TensorT<double>::randn({6}, rng, 1.0), nullptr));
      negs.push_back({l2_normalize(TensorT<double>::randn({6}, rng, 1.0), nullptr),
                      l2_normalize(TensorT<double>::randn({6}, rng, 1.0), nullptr)});
    }
    CHECK(infonce_loss(q, pos, negs, true, 0.05, nullptr).item() >= 0.0);
  }
}

TEST_CASE("batch of one makes the in-batch pool a no-op") {
  Rng rng(split_seed(6, "b1"));
  std::vector<Tensor> q{Tensor::randn({5}, rng, 1.0)}, pos{Tensor::randn({5}, rng, 1.0)};
  std::vector<std::vector<Tensor>> negs{{Tensor::randn({5}, rng, 1.0), Tensor::randn({5}, rng, 1.0)}};
  Tensor with_pool = infonce_loss(q, pos, negs, true, 0.02f, nullptr);
  Tensor without = infonce_loss(q, pos, negs, false, 0.02f, nullptr);
  CHECK(with_pool.item() == without.item());
}

TEST_CASE("a competitive new negative strictly raises the loss") {
  std::vector<Tensor> q{unit(4, 0)}, pos{unit(4, 0)};
  std::vector<std::vector<Tensor>> weak{{unit(4, 1)}};
  std::vector<std::vector<Tensor>> strong{{unit(4, 1), unit(4, 0)}};  // sim 1, positive-level
  float weak_loss = infonce_loss(q, pos, weak, false, 0.5f, nullptr).item();
  float strong_loss = infonce_loss(q, pos, strong, false, 0.5f, nullptr).item();
  CHECK(strong_loss > weak_loss);
}

TEST_CASE("temperature prescaling identity") {
  Rng rng(split_seed(7, "tau"));
  TensorT<double> logits = TensorT<double>::randn({4, 6}, rng, 1.0);
  const std::vector<std::size_t> targets{0, 2, 5, 1};
  const double tau = 0.02;
  double a = infonce_from_logits(logits, targets, tau, nullptr).item();
  double b = infonce_from_logits(scale(logits, 1.0 / tau, nullptr), targets, 1.0, nullptr).item();
  CHECK(std::fabs(a - b) < 1e-9);
}

TEST_CASE("infonce gradients agree with finite differences") {
  // tau chosen so the softmax is not saturated: near-zero true gradients
  // would otherwise sit below what central differences can resolve
  Rng rng(split_seed(8, "ncegrad"));
  std::vector<TensorT<double>> inputs;
  for (int i = 0; i < 8; ++i) inputs.push_back(TensorT<double>::randn({6}, rng, 0.5));
  // layout: q0 q1 pos0 pos1 n00 n01 n10 n11
  auto f = [](std::vector<TensorT<double>>& in, TapeT<double>* tape) {
    std::vector<TensorT<double>> q{in[0], in[1]}, pos{in[2], in[3]};
    std::vector<std::vector<TensorT<double>>> negs{{in[4], in[5]}, {in[6], in[7]}};
    return infonce_loss(q, pos, negs, true, 0.5, tape);
  };
  const GradCheckResult res = grad_check(f, inputs);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("distillation matches closed forms") {
  TensorT<double> same = TensorT<double>::from({2, 3}, {0.2, -0.4, 1.0, 0.0, 0.5, -1.0});
  CHECK(std::fabs(distill_kl(same, same, 0.5, nullptr).item()) < 1e-9);

  // one-hot teacher against a uniform student: KL = ln(m)
  const std::size_t m = 5;
  Tensor teacher = Tensor::zeros({1, m});
  teacher.at(0) = 1e4f;
  Tensor student = Tensor::zeros({1, m});
  CHECK(distill_kl(student, teacher, 0.02f, nullptr).item() ==
        doctest::Approx(std::log(double(m))).epsilon(1e-6));

  CHECK_THROWS_AS(distill_kl(student, Tensor::zeros({1, 3}), 0.02f, nullptr), ContractError);
}

TEST_CASE("distillation is nonnegative and differentiable") {
  Rng rng(split_seed(9, "kl"));
  for (int trial = 0; trial < 20; ++trial) {
    TensorT<double> s = TensorT<double>::randn({3, 5}, rng, 1.0);
    TensorT<double> t = TensorT<double>::randn({3, 5}, rng, 1.0);
    CHECK(distill_kl(s, t, 0.5, nullptr).item() >= -1e-12);
  }

  TensorT<double> teacher = TensorT<double>::randn({2, 4}, rng, 1.0);
  std::vector<TensorT<double>> inputs{TensorT<double>::randn({2, 4}, rng, 1.0)};
  auto f = [teacher](std::vector<TensorT<double>>& in, TapeT<double>* tape) mutable {
    return distill_kl(in[0], teacher, 0.3, tape);
  };
  CHECK(grad_check(f, inputs).max_rel_err < 1e-4);
}

TEST_CASE("l0 surrogate values and bounds") {
  CHECK(l0_surrogate(Tensor::zeros({4}), 5.0f, nullptr).item() == 2.0f);
  CHECK(l0_surrogate(Tensor::ones({2}), 5.0f, nullptr).item() ==
        doctest::Approx(1.9866143).epsilon(1e-6));

  Rng rng(split_seed(10, "l0"));
  TensorT<double> z = TensorT<double>::randn({32}, rng, 2.0);
  const double r = l0_surrogate(z, 5.0, nullptr).item();
  CHECK(r >= 32 * 0.5);
  CHECK(r < 32.0);

  // strictly increasing in any |z_i|
  TensorT<double> z2 = z.clone();
  z2.at(3) = z2.at(3) >= 0 ? z2.at(3) + 0.5 : z2.at(3) - 0.5;
  CHECK(l0_surrogate(z2, 5.0, nullptr).item() > r);

  std::vector<TensorT<double>> inputs{TensorT<double>::randn({12}, rng, 1.0)};
  for (std::size_t i = 0; i < inputs[0].numel(); ++i)
    inputs[0].at(i) += inputs[0].at(i) >= 0 ? 0.1 : -0.1;  // keep |z| off the kink
  auto f = [](std::vector<TensorT<double>>& in, TapeT<double>* tape) {
    return l0_surrogate(in[0], 5.0, tape);
  };
  CHECK(grad_check(f, inputs).max_rel_err < 1e-4);
}

TEST_CASE("adam first step moves by roughly the learning rate") {
  Tensor p = Tensor::from({2}, {1.0f, 1.0f}, true);
  AdamConfig<float> cfg;
  cfg.lr = 0.01f;
  Adam opt({p}, cfg);
  p.grad()[0] = 0.5f;
  p.grad()[1] = -2.0f;
  opt.step();
  CHECK(p.at(0) == doctest::Approx(1.0f - 0.01f).epsilon(1e-3));
  CHECK(p.at(1) == doctest::Approx(1.0f + 0.01f).epsilon(1e-3));
  // grads cleared after the step
  CHECK(p.grad()[0] == 0.0f);
}

TEST_CASE("adam warmup ramps linearly") {
  Tensor p = Tensor::from({1}, {1.0f}, true);
  AdamConfig<float> cfg;
  cfg.lr = 0.1f;
  cfg.warmup_steps = 10;
  Adam opt({p}, cfg);
  p.grad()[0] = 1.0f;
  opt.step();  // t=1: lr/10
  CHECK(p.at(0) == doctest::Approx(1.0f - 0.01f).epsilon(1e-3));
}
