#pragma once

// Test-only helpers: random tensors, a central-difference gradient oracle and
// the list of differentiable operations it is applied to.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dphdun/hyperprior.hpp"
#include "dphdun/ops.hpp"

namespace dphdun::testing {

using Rng = std::mt19937_64;

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
/// element of every input. The scalar objective is sum(f(inputs) * R) with a
/// fixed random R, so every output element contributes.
inline double gradcheck(std::vector<Tensor<double>> inputs,
                        const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f, Rng& rng,
                        double h = 1e-4, double floor = 1e-2) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor<double> weights;
  auto objective = [&](const std::vector<Tensor<double>>& in) {
    auto out = f(in);
    if (!weights.defined()) weights = random_tensor<double>(out.shape(), rng, 0.5, 1.5);
    return ops::sum(ops::mul(out, weights));
  };
  auto loss = objective(inputs);
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
    t.clear_grad();
  }
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    auto data = inputs[a].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = objective(inputs).item();
      data[i] = saved - h;
      const double down = objective(inputs).item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double an = analytic[a][i];
      const double denom = std::max({std::abs(an), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(an - numeric) / denom);
    }
  }
  return worst;
}

/// Values in [-1,-0.1] U [0.1,1] so kinked ops (relu, clamp) are never probed
/// at the kink, and pairwise distinct enough that max picks are stable.
inline Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  auto t = random_tensor<double>(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.mutable_data())
    if (sign(rng)) v = -v;
  return t;
}

/// One differentiable operation under test; `run` draws a random small shape
/// (at most 64 input elements), checks it and returns the worst relative error.
struct OpCase {
  std::string name;
  std::function<double(Rng&)> run;
};

inline std::vector<OpCase> op_cases() {
  using T = Tensor<double>;
  using In = std::vector<T>;
  std::vector<OpCase> cases;
  auto shape4 = [](Rng& r, std::size_t max_c = 2) {
    return Shape{pick(r, 1, 2), pick(r, 1, max_c), pick(r, 2, 4), pick(r, 2, 4)};
  };
  cases.push_back({"add_broadcast", [=](Rng& r) {
                     const Shape s = shape4(r);
                     return gradcheck({random_tensor(s, r), random_tensor({1, s[1], 1, 1}, r)},
                                      [](const In& x) { return ops::add(x[0], x[1]); }, r);
                   }});
  cases.push_back({"sub", [=](Rng& r) {
                     const Shape s = shape4(r);
                     return gradcheck({random_tensor(s, r), random_tensor(s, r)},
                                      [](const In& x) { return ops::sub(x[0], x[1]); }, r);
                   }});
  cases.push_back({"mul_broadcast", [=](Rng& r) {
                     const Shape s = shape4(r);
                     return gradcheck({random_tensor(s, r), random_tensor({s[0], 1, s[2], s[3]}, r)},
                                      [](const In& x) { return ops::mul(x[0], x[1]); }, r);
                   }});
  cases.push_back({"scale_add_scalar", [=](Rng& r) {
                     return gradcheck({random_tensor(shape4(r), r)},
                                      [](const In& x) { return ops::add_scalar(ops::scale(x[0], 1.7), -0.3); }, r);
                   }});
  cases.push_back({"relu", [=](Rng& r) {
                     return gradcheck({away_from_zero(shape4(r), r)}, [](const In& x) { return ops::relu(x[0]); }, r);
                   }});
  cases.push_back({"sigmoid", [=](Rng& r) {
                     return gradcheck({random_tensor(shape4(r), r, -3, 3)},
                                      [](const In& x) { return ops::sigmoid(x[0]); }, r);
                   }});
  cases.push_back({"gelu", [=](Rng& r) {
                     return gradcheck({random_tensor(shape4(r), r, -3, 3)}, [](const In& x) { return ops::gelu(x[0]); },
                                      r);
                   }});
  cases.push_back({"sum_mean", [=](Rng& r) {
                     return gradcheck({random_tensor(shape4(r), r)},
                                      [](const In& x) { return ops::add(ops::sum(x[0]), ops::mean(x[0])); }, r);
                   }});
  cases.push_back({"mse", [=](Rng& r) {
                     const Shape s = shape4(r);
                     return gradcheck({random_tensor(s, r), random_tensor(s, r)},
                                      [](const In& x) { return ops::mse(x[0], x[1]); }, r);
                   }});
  cases.push_back({"reduce_mean", [=](Rng& r) {
                     const Shape s = shape4(r, 3);
                     const std::size_t axis = pick(r, 0, 3);
                     return gradcheck({random_tensor(s, r)}, [axis](const In& x) { return ops::reduce_mean(x[0], axis); },
                                      r);
                   }});
  cases.push_back({"reduce_max", [=](Rng& r) {
                     const Shape s = shape4(r, 3);
                     // distinct values spaced well beyond the difference step
                     std::vector<double> v(numel_of(s));
                     for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
                     std::shuffle(v.begin(), v.end(), r);
                     return gradcheck({T::from_data(s, v)}, [](const In& x) { return ops::reduce_max(x[0], 1); }, r);
                   }});
  cases.push_back({"global_avg_pool", [=](Rng& r) {
                     return gradcheck({random_tensor(shape4(r, 3), r)},
                                      [](const In& x) { return ops::global_avg_pool(x[0]); }, r);
                   }});
  cases.push_back({"reshape_gather", [=](Rng& r) {
                     const Shape s = shape4(r);
                     const std::size_t n = numel_of(s);
                     auto idx = std::make_shared<std::vector<std::size_t>>(n);
                     for (std::size_t i = 0; i < n; ++i) (*idx)[i] = (i * 7 + 3) % n;
                     return gradcheck({random_tensor(s, r)},
                                      [n, idx](const In& x) {
                                        return ops::gather(ops::reshape(x[0], {n}), {n}, idx);
                                      },
                                      r);
                   }});
  cases.push_back({"concat", [=](Rng& r) {
                     Shape a = shape4(r), b = a;
                     b[1] = pick(r, 1, 3);
                     return gradcheck({random_tensor(a, r), random_tensor(b, r)},
                                      [](const In& x) { return ops::concat<double>({x[0], x[1]}, 1); }, r);
                   }});
  cases.push_back({"matmul", [=](Rng& r) {
                     const std::size_t m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
                     const bool ta = pick(r, 0, 1), tb = pick(r, 0, 1);
                     return gradcheck({random_tensor(ta ? Shape{k, m} : Shape{m, k}, r),
                                       random_tensor(tb ? Shape{n, k} : Shape{k, n}, r)},
                                      [ta, tb](const In& x) { return ops::matmul(x[0], x[1], ta, tb); }, r);
                   }});
  cases.push_back({"matmul_batched", [=](Rng& r) {
                     const std::size_t b = pick(r, 1, 3), m = pick(r, 1, 3), k = pick(r, 1, 3), n = pick(r, 1, 3);
                     const bool shared = pick(r, 0, 1);
                     return gradcheck({random_tensor({b, m, k}, r),
                                       random_tensor(shared ? Shape{k, n} : Shape{b, k, n}, r)},
                                      [](const In& x) { return ops::matmul(x[0], x[1]); }, r);
                   }});
  cases.push_back({"softmax", [=](Rng& r) {
                     const Shape s = shape4(r, 3);
                     const std::size_t axis = pick(r, 1, 3);
                     return gradcheck({random_tensor(s, r, -2, 2)},
                                      [axis](const In& x) { return ops::softmax(x[0], axis); }, r);
                   }});
  cases.push_back({"layer_norm", [=](Rng& r) {
                     const Shape s{pick(r, 1, 2), pick(r, 2, 4), pick(r, 1, 3), pick(r, 1, 3)};
                     return gradcheck({random_tensor(s, r), random_tensor({s[1]}, r, 0.5, 1.5), random_tensor({s[1]}, r)},
                                      [](const In& x) { return ops::layer_norm(x[0], 1, x[1], x[2]); }, r);
                   }});
  cases.push_back({"conv2d", [=](Rng& r) {
                     const std::size_t cin = pick(r, 1, 2), cout = pick(r, 1, 2), k = 2 * pick(r, 0, 1) + 1;
                     const std::size_t stride = pick(r, 1, 2), pad = pick(r, 0, k / 2 + 1);
                     const Shape s{pick(r, 1, 2), cin, pick(r, 3, 5), pick(r, 3, 5)};
                     return gradcheck({random_tensor(s, r), random_tensor({cout, cin, k, k}, r), random_tensor({cout}, r)},
                                      [stride, pad](const In& x) { return ops::conv2d(x[0], x[1], x[2], stride, pad); },
                                      r);
                   }});
  cases.push_back({"conv_transpose2d", [=](Rng& r) {
                     const std::size_t cin = pick(r, 1, 2), cout = pick(r, 1, 2), k = pick(r, 2, 3);
                     const Shape s{pick(r, 1, 2), cin, pick(r, 2, 3), pick(r, 2, 3)};
                     return gradcheck({random_tensor(s, r), random_tensor({cin, cout, k, k}, r), random_tensor({cout}, r)},
                                      [](const In& x) { return ops::conv_transpose2d(x[0], x[1], x[2], 2, 0); }, r);
                   }});
  cases.push_back({"bilinear_resize", [=](Rng& r) {
                     const Shape s{1, pick(r, 1, 2), 2 * pick(r, 1, 3), 2 * pick(r, 1, 3)};
                     const bool down = pick(r, 0, 1);
                     return gradcheck({random_tensor(s, r)},
                                      [down](const In& x) {
                                        return down ? ops::downsample_half(x[0]) : ops::upsample_double(x[0]);
                                      },
                                      r);
                   }});
  cases.push_back({"attention", [=](Rng& r) {
                     const std::size_t b = pick(r, 1, 2), t = pick(r, 2, 4), d = pick(r, 1, 3);
                     return gradcheck({random_tensor({b, t, d}, r), random_tensor({b, t, d}, r), random_tensor({b, t, d}, r)},
                                      [](const In& x) { return ops::scaled_dot_attention(x[0], x[1], x[2]); }, r);
                   }});
  cases.push_back({"soft_map_clamp", [=](Rng& r) {
                     auto x = random_tensor(shape4(r), r, -20, 20);
                     for (auto& v : x.mutable_data())
                       if (std::abs(std::abs(v) - 15.0) < 0.1) v += 0.5;
                     return gradcheck({x}, [](const In& in) { return hyperprior::SoftMapNet<double>::clamp_logit(in[0]); },
                                      r);
                   }});
  return cases;
}

}  // namespace dphdun::testing
