#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "support.hpp"
#include "whisq/autodiff.hpp"
#include "whisq/errors.hpp"

using namespace whisq;
using whisq::testing::random_tensor;

namespace {

double max_rel_err(const Tensor& a, const Tensor& n) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::max({std::abs(a[i]), std::abs(n[i]), 1e-12});
    worst = std::max(worst, std::abs(a[i] - n[i]) / d);
  }
  return worst;
}

// Reduces an op output to a scalar through fixed random weights so that
// every output element carries a distinct, generic upstream gradient.
ad::Var weighted_sum(ad::Tape& t, ad::Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, y.value().shape());
  return ad::sum(ad::mul(y, t.constant(std::move(w))));
}

struct OpCase {
  std::string name;
  std::vector<Tensor> params;
  ad::LossFn fn;
};

const std::vector<unsigned char> kMask = {1, 0, 1, 1};

std::vector<OpCase> op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  auto m = [&](std::size_t r, std::size_t c) { return random_tensor(rng, {r, c}); };
  auto positive = [&](std::size_t r, std::size_t c) {
    Tensor t = m(r, c);
    for (double& v : t.storage()) v = 0.5 + std::abs(v);
    return t;
  };
  auto away_from_zero = [&](std::size_t r, std::size_t c) {
    Tensor t = m(r, c);
    for (double& v : t.storage()) v = (v < 0 ? -1.0 : 1.0) * (1e-2 + std::abs(v));
    return t;
  };
  cases.push_back({"add", {m(3, 4), m(3, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::add(p[0], p[1]), 1);
                   }});
  cases.push_back({"sub", {m(3, 4), m(3, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::sub(p[0], p[1]), 2);
                   }});
  cases.push_back({"mul", {m(3, 4), m(3, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::mul(p[0], p[1]), 3);
                   }});
  cases.push_back({"scale", {m(2, 5)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::scale(p[0], -1.7), 4);
                   }});
  cases.push_back({"relu", {away_from_zero(4, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::relu(p[0]), 5);
                   }});
  cases.push_back({"exp", {m(3, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::exp(p[0]), 6);
                   }});
  cases.push_back({"log", {positive(3, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::log(p[0]), 7);
                   }});
  cases.push_back({"sum", {m(3, 2)}, [](ad::Tape&, std::span<const ad::Var> p) {
                     return ad::sum(ad::mul(p[0], p[0]));
                   }});
  cases.push_back({"mean", {m(3, 2)}, [](ad::Tape&, std::span<const ad::Var> p) {
                     return ad::mean(ad::mul(p[0], p[0]));
                   }});
  cases.push_back({"add_row_bias", {m(4, 3), random_tensor(rng, {3})}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::add_row_bias(p[0], p[1]), 8);
                   }});
  cases.push_back({"matmul", {m(3, 4), m(4, 2)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::matmul(p[0], p[1]), 9);
                   }});
  cases.push_back({"matmul_nt", {m(3, 4), m(5, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::matmul_nt(p[0], p[1]), 10);
                   }});
  cases.push_back({"transpose", {m(2, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::transpose(p[0]), 11);
                   }});
  cases.push_back({"masked_softmax_rows", {m(3, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::masked_softmax_rows(p[0], kMask), 12);
                   }});
  cases.push_back({"mean_pool_masked", {m(4, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::mean_pool_masked(p[0], kMask), 13);
                   }});
  cases.push_back({"mask_rows", {m(4, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::mask_rows(p[0], kMask), 14);
                   }});
  cases.push_back({"select_rows", {m(4, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     const std::vector<std::size_t> rows = {3, 0, 3};
                     return weighted_sum(t, ad::select_rows(p[0], rows), 15);
                   }});
  cases.push_back({"slice_cols", {m(3, 5)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     return weighted_sum(t, ad::slice_cols(p[0], 1, 3), 16);
                   }});
  cases.push_back({"concat_cols", {m(3, 2), m(3, 4)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     const ad::Var parts[] = {p[0], p[1], p[0]};
                     return weighted_sum(t, ad::concat_cols(parts), 17);
                   }});
  cases.push_back({"concat_rows", {m(2, 3), m(1, 3)}, [](ad::Tape& t, std::span<const ad::Var> p) {
                     const ad::Var parts[] = {p[1], p[0]};
                     return weighted_sum(t, ad::concat_rows(parts), 18);
                   }});
  {
    // Residuals kept at least 0.05 away from the branch boundary |r| = delta.
    Tensor pred = m(6, 1);
    Tensor target(pred.shape());
    Rng trng(99);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = (i % 2 ? 1.0 : -1.0) * (i < 3 ? trng.uniform(0.05, 0.45) : trng.uniform(0.55, 2.0));
      target[i] = pred[i] - r;
    }
    cases.push_back({"huber", {pred}, [target](ad::Tape&, std::span<const ad::Var> p) {
                       return ad::huber(p[0], target, 0.5);
                     }});
  }
  return cases;
}

}  // namespace

TEST_CASE("quadratic: value 9 and gradient 6 at w = 3") {
  const std::vector<Tensor> params = {Tensor::scalar(3.0)};
  const auto r = ad::value_and_grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::mul(p[0], p[0]); }, params);
  CHECK(r.value == 9.0);
  CHECK(r.grads[0].item() == 6.0);
}

TEST_CASE("sum of relu at [-1, 2]: value 2 and gradient [0, 1]") {
  const std::vector<Tensor> params = {Tensor::vector({-1.0, 2.0})};
  const auto r =
      ad::value_and_grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::sum(ad::relu(p[0])); }, params);
  CHECK(r.value == 2.0);
  CHECK(r.grads[0][0] == 0.0);
  CHECK(r.grads[0][1] == 1.0);
}

TEST_CASE("relu gradient at exactly zero is zero") {
  const std::vector<Tensor> params = {Tensor::vector({0.0})};
  const auto r =
      ad::value_and_grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::sum(ad::relu(p[0])); }, params);
  CHECK(r.grads[0][0] == 0.0);
}

TEST_CASE("huber gradient at the branch boundary is delta * sign(r)") {
  const Tensor target = Tensor::vector({0.0, 0.0});
  const std::vector<Tensor> params = {Tensor::vector({0.5, -0.5})};
  const auto r = ad::value_and_grad(
      [&](ad::Tape&, std::span<const ad::Var> p) { return ad::huber(p[0], target, 0.5); }, params);
  // Mean over 2 items, so each slope is halved.
  CHECK(r.grads[0][0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.grads[0][1] == doctest::Approx(-0.25).epsilon(1e-15));
}

TEST_CASE("finite differences of w^2 at 3 and exp at 0") {
  const std::vector<Tensor> three = {Tensor::scalar(3.0)};
  const auto sq = ad::finite_difference_grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::mul(p[0], p[0]); },
                                             three, 1e-5);
  CHECK(std::abs(sq[0].item() - 6.0) < 1e-9);

  const std::vector<Tensor> zero = {Tensor::scalar(0.0)};
  const auto ex = ad::finite_difference_grad([](ad::Tape&, std::span<const ad::Var> p) { return ad::sum(ad::exp(p[0])); },
                                             zero, 1e-5);
  CHECK(std::abs(ex[0].item() - 1.0) < 1e-9);
}

TEST_CASE("finite differences reject a non-deterministic computation") {
  int calls = 0;
  const std::vector<Tensor> params = {Tensor::scalar(1.0)};
  auto fn = [&](ad::Tape& t, std::span<const ad::Var> p) {
    ++calls;
    return ad::add(p[0], t.constant(Tensor::scalar(1e-3 * calls)));
  };
  CHECK_THROWS_AS(ad::finite_difference_grad(fn, params, 1e-5), NumericError);
  CHECK_THROWS_AS(ad::finite_difference_grad(fn, params, 0.0), std::invalid_argument);
}

TEST_CASE("backward requires a scalar loss") {
  ad::Tape t;
  const ad::Var x = t.parameter(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
  const std::vector<Tensor> params = {Tensor::vector({1.0, 2.0})};
  CHECK_THROWS_AS(ad::value_and_grad([](ad::Tape&, std::span<const ad::Var> p) { return p[0]; }, params),
                  std::invalid_argument);
}

TEST_CASE("non-finite values are rejected at op boundaries") {
  ad::Tape t;
  const ad::Var x = t.parameter(Tensor::vector({-1.0}));
  CHECK_THROWS_AS(ad::log(x), NumericError);
  CHECK_THROWS_AS(t.parameter(Tensor::vector({std::numeric_limits<double>::quiet_NaN()})), NumericError);
  CHECK_THROWS_AS(t.constant(Tensor::vector({std::numeric_limits<double>::infinity()})), NumericError);
  const ad::Var big = t.parameter(Tensor::vector({800.0}));
  CHECK_THROWS_AS(ad::exp(big), NumericError);
}

TEST_CASE("constants receive no gradient") {
  ad::Tape t;
  const ad::Var c = t.constant(Tensor::vector({2.0, 3.0}));
  const ad::Var w = t.parameter(Tensor::vector({1.0, 1.0}));
  t.backward(ad::sum(ad::mul(c, w)));
  CHECK_FALSE(c.requires_grad());
  CHECK(c.grad().empty());
  CHECK(w.grad() == Tensor::vector({2.0, 3.0}));
}

TEST_CASE("borrowed constants read the referenced tensor") {
  const Tensor v = Tensor::vector({1.5, -2.0});
  ad::Tape t;
  const ad::Var b = t.borrowed_constant(v);
  CHECK(&b.value() == &v);
  const ad::Var w = t.parameter(Tensor::vector({2.0, 2.0}));
  const ad::Var y = ad::sum(ad::mul(b, w));
  CHECK(y.value().item() == -1.0);
  t.backward(y);
  CHECK(w.grad() == v);
}

TEST_CASE("masked softmax: rows sum to one and masked entries are exactly zero") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rows = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const auto cols = static_cast<std::size_t>(rng.uniform_int(1, 7));
    std::vector<unsigned char> mask(cols);
    for (auto& b : mask) b = rng.uniform() < 0.6 ? 1 : 0;
    mask[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cols) - 1))] = 1;

    Tensor logits = random_tensor(rng, {rows, cols}, 10.0);
    Tensor other = logits;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask[c]) {
        for (std::size_t r = 0; r < rows; ++r) other.at(r, c) = 1e6 * rng.normal();
      }
    }
    ad::Tape t;
    const Tensor p = ad::masked_softmax_rows(t.constant(logits), mask).value();
    const Tensor q = ad::masked_softmax_rows(t.constant(other), mask).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!mask[c]) CHECK(p.at(r, c) == 0.0);
        s += p.at(r, c);
      }
      CHECK(std::abs(s - 1.0) < 1e-14);
    }
    CHECK(p == q);  // masked logits do not take part in the max or the sum
  }
}

TEST_CASE("masked softmax rejects a row with no valid keys") {
  ad::Tape t;
  const std::vector<unsigned char> none = {0, 0};
  CHECK_THROWS_AS(ad::masked_softmax_rows(t.constant(Tensor({1, 2})), none), DataError);
}

TEST_CASE("mean pool over valid rows") {
  ad::Tape t;
  const std::vector<unsigned char> both = {1, 1};
  CHECK(ad::mean_pool_masked(t.constant(Tensor::matrix({{1, 0}, {3, 0}})), both).value() == Tensor::matrix({{2, 0}}));
  const std::vector<unsigned char> first_two = {1, 1, 0};
  CHECK(ad::mean_pool_masked(t.constant(Tensor::matrix({{1}, {5}, {9}})), first_two).value() ==
        Tensor::matrix({{3}}));
  const std::vector<unsigned char> none = {0, 0};
  CHECK_THROWS_AS(ad::mean_pool_masked(t.constant(Tensor({2, 1})), none), DataError);
}

TEST_CASE("shape mismatches are rejected") {
  ad::Tape t;
  const ad::Var a = t.constant(Tensor({2, 3}));
  const ad::Var b = t.constant(Tensor({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul_nt(a, b), std::invalid_argument);
}

TEST_CASE("property: every op matches central differences away from kinks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(mix_seed(31, seed));
    for (const auto& c : op_cases(rng)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      const auto analytic = ad::value_and_grad(c.fn, c.params);
      const auto numeric = ad::finite_difference_grad(c.fn, c.params, 1e-5);
      for (std::size_t k = 0; k < c.params.size(); ++k) CHECK(max_rel_err(analytic.grads[k], numeric[k]) < 1e-4);
    }
  }
}

TEST_CASE("forward evaluation is bit-deterministic") {
  Rng rng(5);
  for (const auto& c : op_cases(rng)) {
    CAPTURE(c.name);
    CHECK(ad::evaluate(c.fn, c.params) == ad::evaluate(c.fn, c.params));
  }
}

TEST_CASE("relative error definition") {
  const std::vector<std::string> names = {"w"};
  const std::vector<Tensor> a = {Tensor::vector({1.0, 0.0, 2e-13, -1.0})};
  const std::vector<Tensor> n = {Tensor::vector({1.1, 0.0, 0.0, 1.0})};
  const auto rep = ad::compare_gradients(names, a, n);
  // Entries: 0.1/1.1, 0, 2e-13/1e-12, 2/1.
  CHECK(rep.entries[0].max_rel_err == doctest::Approx(2.0));
  const std::vector<Tensor> a2 = {Tensor::vector({1.0, 0.0, 2e-13})};
  const std::vector<Tensor> n2 = {Tensor::vector({1.1, 0.0, 0.0})};
  CHECK(ad::compare_gradients(names, a2, n2).max_rel_err() == doctest::Approx(0.2));
  const std::vector<Tensor> a3 = {Tensor::vector({1.0})};
  const std::vector<Tensor> n3 = {Tensor::vector({1.1})};
  CHECK(ad::compare_gradients(names, a3, n3).max_rel_err() == doctest::Approx(0.1 / 1.1).epsilon(1e-12));
}

TEST_CASE("term-wise differences shrink the step across a relu kink") {
  // relu(w) at w = 5e-5: with h = 1e-4 the point w - h lies on the other branch.
  const std::vector<Tensor> params = {Tensor::vector({5e-5, 0.3})};
  ad::LossTermsFn fn = [](ad::Tape&, std::span<const ad::Var> p) {
    const ad::Var r = ad::relu(p[0]);
    return std::vector<ad::Var>{ad::sum(r), ad::sum(ad::mul(p[0], p[0]))};
  };
  const auto num = ad::finite_difference_grad_terms(fn, params, 1e-4);
  CHECK(num.steps[0][0] < 1e-4);
  CHECK(num.steps[0][0] > 0.0);
  CHECK(num.steps[0][1] == 1e-4);
  CHECK(std::abs(num.grads[0][0] - (1.0 + 1e-4)) < 1e-9);
  CHECK(std::abs(num.grads[0][1] - (1.0 + 0.6)) < 1e-9);

  const auto analytic = ad::value_and_grad(
      [&](ad::Tape& t, std::span<const ad::Var> p) {
        const auto terms = fn(t, p);
        return ad::add(terms[0], terms[1]);
      },
      params);
  const std::vector<std::string> names = {"w"};
  const auto rep = ad::compare_gradients(names, analytic.grads, num, 1e-4);
  CHECK(rep.entries[0].reduced_steps == 1);
  CHECK(rep.entries[0].skipped == 0);
  CHECK(rep.max_rel_err() < 1e-9);
}

TEST_CASE("corrupted backward is detected by the finite-difference oracle") {
  Rng rng(8);
  const std::vector<Tensor> params = {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})};
  auto clean = [](ad::Tape& t, std::span<const ad::Var> p) { return weighted_sum(t, ad::matmul(p[0], p[1]), 1); };
  auto corrupt = [&](ad::Tape& t, std::span<const ad::Var> p) {
    t.corrupt_backward("matmul", 1.5);
    return clean(t, p);
  };
  const auto good = ad::value_and_grad(clean, params);
  const auto bad = ad::value_and_grad(corrupt, params);
  const auto num = ad::finite_difference_grad(clean, params, 1e-5);
  CHECK(max_rel_err(good.grads[0], num[0]) < 1e-8);
  CHECK(max_rel_err(bad.grads[0], num[0]) > 0.3);
}
