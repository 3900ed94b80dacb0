#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "wsl/nn.hpp"
#include "wsl/tape.hpp"

using wsl::Tape;
using wsl::Tensor;
using wsl::Var;

namespace {

Tensor<double> randt(std::vector<int64_t> shape, wsl::Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> g(0.0, scale);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = g(rng);
  return t;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite differences vs tape gradients. `build` must construct the
// scalar loss from leaves registered for the given input tensors.
void check_grads(std::vector<Tensor<double>*> inputs,
                 const std::function<Var(Tape<double>&, std::vector<Var>&)>& build,
                 double tol = 2e-6, double h = 1e-4) {
  auto eval = [&]() {
    Tape<double> tp;
    std::vector<Var> leaves;
    for (auto* t : inputs) leaves.push_back(tp.leaf(*t, true));
    Var loss = build(tp, leaves);
    return tp.val(loss)[0];
  };

  Tape<double> tp;
  std::vector<Var> leaves;
  for (auto* t : inputs) leaves.push_back(tp.leaf(*t, true));
  Var loss = build(tp, leaves);
  tp.backward(loss);

  for (size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double>& g = tp.grad(leaves[k]);
    for (int64_t i = 0; i < inputs[k]->numel(); ++i) {
      double saved = (*inputs[k])[i];
      (*inputs[k])[i] = saved + h;
      double fp = eval();
      (*inputs[k])[i] = saved - h;
      double fm = eval();
      (*inputs[k])[i] = saved;
      double num = (fp - fm) / (2 * h);
      INFO("input " << k << " element " << i << " analytic " << g[i] << " numeric " << num);
      REQUIRE(rel_err(g[i], num) < tol);
    }
  }
}

// Scalarizes a tensor output with fixed random weights so every element
// contributes a distinct coefficient.
Var weighted_sum(Tape<double>& tp, Var y, wsl::Rng& rng) {
  Tensor<double> w(tp.val(y).shape());
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = u(rng);
  return tp.sum_all(tp.mul(y, tp.constant(w)));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  wsl::Rng rng = wsl::make_rng(7, 0);
  auto a = randt({3, 4}, rng);
  auto b = randt({3, 4}, rng);

  check_grads({&a, &b}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 1);
    return weighted_sum(tp, tp.add(v[0], v[1]), r2);
  });
  check_grads({&a, &b}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 2);
    return weighted_sum(tp, tp.mul(v[0], v[1]), r2);
  });
  check_grads({&a, &b}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 3);
    return weighted_sum(tp, tp.lincomb(0.3, v[0], -1.7, v[1]), r2);
  });
  check_grads({&a}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 4);
    return weighted_sum(tp, tp.scale(v[0], -2.5), r2);
  });
  check_grads({&a}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 5);
    return weighted_sum(tp, tp.reshape(v[0], {2, 6}), r2);
  });
  check_grads({&a}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(7, 6);
    return weighted_sum(tp, tp.slice_flat(v[0], 3, 7), r2);
  });
  check_grads({&a}, [&](Tape<double>& tp, std::vector<Var>& v) { return tp.mean_all(v[0]); });
}

TEST_CASE("linear and conv2d match finite differences") {
  wsl::Rng rng = wsl::make_rng(11, 0);
  auto x = randt({3, 5}, rng);
  auto w = randt({4, 5}, rng);
  auto b = randt({4}, rng);
  check_grads({&x, &w, &b}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(11, 1);
    return weighted_sum(tp, wsl::linear(tp, v[0], v[1], v[2]), r2);
  });

  struct Cfg {
    int64_t kh, kw, sh, sw, ph, pw;
  };
  std::vector<Cfg> cfgs = {{3, 3, 1, 1, 1, 1}, {5, 5, 1, 1, 0, 0}, {3, 3, 2, 2, 1, 1},
                           {1, 1, 2, 2, 0, 0}, {1, 5, 1, 1, 0, 2}, {5, 1, 1, 1, 2, 0}};
  int stream = 2;
  for (const auto& c : cfgs) {
    auto xi = randt({2, 2, 6, 7}, rng);
    auto wi = randt({3, 2, c.kh, c.kw}, rng);
    auto bi = randt({3}, rng);
    check_grads(
        {&xi, &wi, &bi},
        [&](Tape<double>& tp, std::vector<Var>& v) {
          wsl::Rng r2 = wsl::make_rng(11, static_cast<uint64_t>(stream));
          return weighted_sum(tp, wsl::conv2d(tp, v[0], v[1], v[2], c.sh, c.sw, c.ph, c.pw), r2);
        },
        5e-6);
    ++stream;
  }

  // bias-free path
  auto xi = randt({1, 2, 4, 4}, rng);
  auto wi = randt({2, 2, 3, 3}, rng);
  check_grads({&xi, &wi}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(11, 99);
    return weighted_sum(tp, wsl::conv2d(tp, v[0], v[1], Var{}, 1, 1, 1, 1), r2);
  });
}

TEST_CASE("conv2d known value") {
  Tape<double> tp;
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 1, 1}, {2});
  Var y = wsl::conv2d(tp, tp.constant(x), tp.constant(w), Var{});
  REQUIRE(tp.val(y).vec() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("activations and pools match finite differences") {
  wsl::Rng rng = wsl::make_rng(13, 0);
  auto x = randt({2, 3, 4, 6}, rng);
  // keep relu inputs away from the kink
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.05) x[i] += 0.2;

  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 1);
    return weighted_sum(tp, wsl::relu(tp, v[0]), r2);
  });
  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 2);
    return weighted_sum(tp, wsl::sin_act(tp, v[0], 3.0), r2);
  });
  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 3);
    return weighted_sum(tp, wsl::maxpool2d(tp, v[0], 2, 2), r2);
  });
  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 4);
    return weighted_sum(tp, wsl::maxpool2d(tp, v[0], 1, 2), r2);
  });
  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 5);
    return weighted_sum(tp, wsl::maxpool2d(tp, v[0], 2, 1), r2);
  });
  check_grads({&x}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 6);
    return weighted_sum(tp, wsl::adaptive_avg_pool2d(tp, v[0], 3, 4), r2);
  });

  auto xs = randt({2, 8, 3, 2}, rng);
  check_grads({&xs}, [&](Tape<double>& tp, std::vector<Var>& v) {
    wsl::Rng r2 = wsl::make_rng(13, 7);
    return weighted_sum(tp, wsl::pixel_shuffle(tp, v[0], 2), r2);
  });
}

TEST_CASE("pixel shuffle layout") {
  // x[0,c*4+dh*2+dw,0,0] must land at y[0,c,dh,dw]
  Tensor<double> x({1, 4, 1, 1}, {10, 11, 12, 13});
  Tape<double> tp;
  Var y = wsl::pixel_shuffle(tp, tp.constant(x), 2);
  REQUIRE(tp.val(y).shape() == std::vector<int64_t>{1, 1, 2, 2});
  REQUIRE(tp.val(y).vec() == std::vector<double>{10, 11, 12, 13});
}

TEST_CASE("adaptive pool averages whole input to 1x1") {
  Tensor<double> x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tape<double> tp;
  Var y = wsl::adaptive_avg_pool2d(tp, tp.constant(x), 1, 1);
  REQUIRE(tp.val(y)[0] == Catch::Approx(3.5));
}

TEST_CASE("batchnorm train and eval match finite differences") {
  wsl::Rng rng = wsl::make_rng(17, 0);
  auto x = randt({3, 2, 3, 3}, rng);
  auto gamma = randt({2}, rng, 0.5);
  auto beta = randt({2}, rng, 0.5);
  gamma[0] += 1.2;
  gamma[1] += 1.2;

  check_grads(
      {&x, &gamma, &beta},
      [&](Tape<double>& tp, std::vector<Var>& v) {
        wsl::Rng r2 = wsl::make_rng(17, 1);
        return weighted_sum(tp, wsl::batchnorm_train(tp, v[0], v[1], v[2],
                                                     static_cast<Tensor<double>*>(nullptr),
                                                     static_cast<Tensor<double>*>(nullptr)),
                            r2);
      },
      1e-5);

  auto mean = randt({2}, rng, 0.3);
  auto var = Tensor<double>({2}, {0.9, 1.4});
  check_grads(
      {&x, &gamma, &beta, &mean, &var},
      [&](Tape<double>& tp, std::vector<Var>& v) {
        wsl::Rng r2 = wsl::make_rng(17, 2);
        return weighted_sum(tp, wsl::batchnorm_eval(tp, v[0], v[1], v[2], v[3], v[4]), r2);
      },
      1e-5);
}

TEST_CASE("batchnorm eval clamps negative variance without NaN") {
  Tape<double> tp;
  Tensor<double> x({1, 1, 1, 2}, {1.0, -1.0});
  auto one = Tensor<double>({1}, {1.0});
  auto zero = Tensor<double>({1}, {0.0});
  auto negvar = Tensor<double>({1}, {-3.0});
  Var y = wsl::batchnorm_eval(tp, tp.leaf(x), tp.constant(one), tp.constant(zero),
                              tp.constant(zero), tp.constant(negvar));
  REQUIRE(std::isfinite(tp.val(y)[0]));
  REQUIRE(std::isfinite(tp.val(y)[1]));
}

TEST_CASE("batchnorm train updates running statistics") {
  Tape<double> tp;
  Tensor<double> x({2, 1, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor<double> rm({1}, {0.0});
  Tensor<double> rv({1}, {1.0});
  auto one = Tensor<double>({1}, {1.0});
  auto zero = Tensor<double>({1}, {0.0});
  wsl::batchnorm_train(tp, tp.leaf(x), tp.constant(one), tp.constant(zero), &rm, &rv, 0.1);
  // batch mean 2.5, unbiased var of {1,2,3,4} = 5/3
  REQUIRE(rm[0] == Catch::Approx(0.25));
  REQUIRE(rv[0] == Catch::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("loss primitives match finite differences") {
  wsl::Rng rng = wsl::make_rng(19, 0);
  auto p = randt({4, 5}, rng);
  auto t = randt({4, 5}, rng);
  std::vector<int> labels = {0, 3, 2, 4};

  check_grads({&p}, [&](Tape<double>& tp, std::vector<Var>& v) {
    return wsl::softmax_ce(tp, v[0], labels);
  });

  Tensor<double> q({4, 5});
  {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int64_t n = 0; n < 4; ++n) {
      double s = 0;
      for (int64_t c = 0; c < 5; ++c) {
        q.at2(n, c) = u(rng);
        s += q.at2(n, c);
      }
      for (int64_t c = 0; c < 5; ++c) q.at2(n, c) /= s;
    }
  }
  check_grads({&p}, [&](Tape<double>& tp, std::vector<Var>& v) { return wsl::soft_ce(tp, v[0], q); });

  check_grads({&p}, [&](Tape<double>& tp, std::vector<Var>& v) {
    return wsl::kl_distill(tp, v[0], t, 3.0, false);
  });
  check_grads({&p}, [&](Tape<double>& tp, std::vector<Var>& v) {
    return wsl::kl_distill(tp, v[0], t, 2.0, true);
  });
  check_grads({&p}, [&](Tape<double>& tp, std::vector<Var>& v) {
    return wsl::mse_vs_const(tp, v[0], t);
  });
}

TEST_CASE("external scalar bridges worker-tape gradients") {
  Tape<double> tp;
  Tensor<double> x({3}, {1.0, 2.0, 3.0});
  Var vx = tp.leaf(x);
  Tensor<double> gx({3}, {0.5, -1.0, 2.0});
  Var loss = tp.external_scalar(vx, gx, 7.0);
  Var total = tp.scale(loss, 2.0);
  tp.backward(total);
  REQUIRE(tp.val(loss)[0] == 7.0);
  REQUIRE(tp.grad(vx).vec() == std::vector<double>{1.0, -2.0, 4.0});
}

TEST_CASE("frozen inputs record no backward work") {
  Tape<double> tp;
  wsl::Rng rng = wsl::make_rng(23, 0);
  auto x = randt({2, 2, 4, 4}, rng);
  auto w = randt({2, 2, 3, 3}, rng);
  Var y = wsl::conv2d(tp, tp.constant(x), tp.constant(w), Var{}, 1, 1, 1, 1);
  REQUIRE_FALSE(tp.requires_grad(y));
}
