#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "nsbert/errors.hpp"
#include "nsbert/gradients.hpp"
#include "test_util.hpp"

using namespace nsbert;

namespace {

using V = Var<double>;

// Loss sum(op(x, y) * r) with a fixed random weighting r so that no
// gradient entry is trivially zero.
struct Primitive {
  std::string name;
  Shape x_shape;
  Shape y_shape;  // empty for unary ops
  std::function<V(V, V)> op;
  double lo = -1.0, hi = 1.0;  // input range
};

std::vector<Primitive> primitives() {
  const std::size_t pick[] = {2, 0, 1};
  std::vector<Primitive> ps = {
      {"add", {2, 3, 4}, {4}, [](V a, V b) { return add(a, b); }},
      {"sub", {2, 3, 4}, {2, 1, 4}, [](V a, V b) { return sub(a, b); }},
      {"mul", {2, 3, 4}, {2, 3, 1}, [](V a, V b) { return mul(a, b); }},
      {"div", {3, 4}, {4}, [](V a, V b) { return div(a, add_scalar(square(b), 0.5)); }},
      {"scale", {3, 4}, {}, [](V a, V) { return scale(a, -1.7); }},
      {"add_scalar", {3, 4}, {}, [](V a, V) { return square(add_scalar(a, 0.3)); }},
      {"neg", {3, 4}, {}, [](V a, V) { return neg(a); }},
      {"exp", {3, 4}, {}, [](V a, V) { return exp(a); }},
      {"log", {3, 4}, {}, [](V a, V) { return log(a); }, 0.2, 3.0},
      {"tanh", {3, 4}, {}, [](V a, V) { return tanh(a); }, -2.0, 2.0},
      {"sigmoid", {3, 4}, {}, [](V a, V) { return sigmoid(a); }, -3.0, 3.0},
      {"sqrt", {3, 4}, {}, [](V a, V) { return sqrt(a); }, 0.2, 3.0},
      {"square", {3, 4}, {}, [](V a, V) { return square(a); }},
      {"gelu", {3, 4}, {}, [](V a, V) { return gelu(a); }, -3.0, 3.0},
      {"matmul_shared", {2, 3, 4}, {4, 5}, [](V a, V b) { return matmul(a, b); }},
      {"matmul_batched", {2, 3, 4}, {2, 4, 5}, [](V a, V b) { return matmul(a, b); }},
      {"matmul_transposed", {2, 3, 4}, {2, 5, 4}, [](V a, V b) { return matmul(a, b, true); }},
      {"transpose_last", {2, 3, 4}, {}, [](V a, V) { return transpose_last(a); }},
      {"softmax", {2, 5}, {}, [](V a, V) { return softmax(a); }, -2.0, 2.0},
      {"log_softmax", {2, 5}, {}, [](V a, V) { return log_softmax(a); }, -2.0, 2.0},
      {"attention_softmax", {2, 3, 5}, {2, 1, 6},
       [](V a, V b) {
         V gain = exp(slice(b, 2, 0, 1));
         return attention_softmax(a, 0.6, std::optional(gain), std::optional(slice(b, 2, 1, 5)));
       }},
      {"attention_softmax_plain", {2, 3, 5}, {}, [](V a, V) { return attention_softmax(a, 0.6); }},
      {"mean", {3, 4}, {}, [](V a, V) { return mean(a, 1); }},
      {"variance", {3, 4}, {}, [](V a, V) { return variance(a, 0); }},
      {"sum", {3, 4}, {}, [](V a, V) { return reshape(sum(a), {1}); }},
      {"slice", {3, 6}, {}, [](V a, V) { return slice(a, 1, 2, 3); }},
      {"concat", {3, 2}, {3, 4},
       [](V a, V b) {
         const V parts[] = {a, b, a};
         return concat<double>(parts, 1);
       }},
      {"reshape", {3, 4}, {}, [](V a, V) { return reshape(a, {2, 6}); }},
      {"gather", {3, 4}, {}, [pick](V a, V) { return gather(a, std::span<const std::size_t>(pick)); }},
  };
  return ps;
}

GradCheckReport check_primitive(const Primitive& p, std::uint64_t seed) {
  ParamSet<double> params{{"x", test::random_array<double>(p.x_shape, seed, p.lo, p.hi)}};
  if (!p.y_shape.empty()) params.emplace("y", test::random_array<double>(p.y_shape, seed + 1000));
  // The weighting must match the output shape, so probe it once.
  Array<double> r;
  {
    Tape<double> tape;
    ParamBinder<double> b(tape, params);
    const V y = p.y_shape.empty() ? V{} : b("y");
    r = test::random_array<double>(p.op(b("x"), y).shape(), seed + 2000, 0.5, 1.5);
  }
  LossFn<double> fn = [&](Tape<double>& tape, const ParamSet<double>& ps) {
    ParamBinder<double> b(tape, ps);
    const V y = p.y_shape.empty() ? V{} : b("y");
    return sum(mul(p.op(b("x"), y), tape.constant(r)));
  };
  return grad_check(fn, params, {.step = 1e-5, .max_elements = 256, .seed = seed});
}

}  // namespace

TEST_CASE("every primitive passes a 64-bit gradient check over 20 seeds") {
  for (const auto& p : primitives()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) worst = std::max(worst, check_primitive(p, seed).worst());
    INFO(p.name << " worst relative error " << worst);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("fused attention softmax backward equals the unfused graph") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = test::random_array<double>({2, 3, 5}, seed, -2.0, 2.0);
    const auto g = test::random_array<double>({2, 1, 1}, seed + 1, 0.3, 2.0);
    const auto d = test::random_array<double>({2, 1, 5}, seed + 2);
    const auto r = test::random_array<double>({2, 3, 5}, seed + 3);
    std::vector<Array<double>> grads[2];
    for (int fused = 0; fused < 2; ++fused) {
      Tape<double> tape;
      V x = tape.variable(s), gain = tape.variable(g), shift = tape.variable(d);
      V p = fused ? attention_softmax(x, 0.6, std::optional(gain), std::optional(shift))
                  : softmax(scale(add(mul(x, gain), shift), 0.6));
      tape.backward(sum(mul(p, tape.constant(r))));
      grads[fused] = {tape.grad(x), tape.grad(gain), tape.grad(shift)};
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(grads[0][i], grads[1][i]) < 1e-12);
  }
}

TEST_CASE("linear layer with squared loss") {
  ParamSet<double> params{{"w", test::random_array<double>({4, 3}, 1)}, {"b", test::random_array<double>({3}, 2)}};
  const auto x = test::random_array<double>({5, 4}, 3);
  LossFn<double> fn = [&](Tape<double>& tape, const ParamSet<double>& ps) {
    ParamBinder<double> p(tape, ps);
    return sum(square(add(matmul(tape.constant(x), p("w")), p("b"))));
  };
  const auto report = grad_check(fn, params);
  CHECK(report.max_relative_error.size() == 2);
  CHECK(report.worst() < 1e-6);
}

TEST_CASE("a graph without parameters gives an empty report") {
  LossFn<double> fn = [](Tape<double>& tape, const ParamSet<double>&) {
    return sum(tape.constant(Array<double>({2}, 1.0)));
  };
  const auto report = grad_check(fn, {});
  CHECK(report.max_relative_error.empty());
  CHECK(report.worst() == 0.0);
}

TEST_CASE("value_and_gradients reports zeros for untouched parameters") {
  ParamSet<double> params{{"used", Array<double>({2}, 3.0)}, {"unused", Array<double>({3}, 1.0)}};
  LossFn<double> fn = [](Tape<double>& tape, const ParamSet<double>& ps) {
    ParamBinder<double> p(tape, ps);
    return sum(square(p("used")));
  };
  const auto vg = value_and_gradients(fn, params);
  CHECK(vg.value == 18.0);
  CHECK(vg.grads.at("used") == Array<double>({2}, 6.0));
  CHECK(vg.grads.at("unused") == Array<double>({3}));
}

TEST_CASE("a wrong analytic gradient is caught") {
  // Routing x through a constant hides half of d(x*x)/dx from backward().
  ParamSet<double> params{{"x", test::random_array<double>({3}, 4, 0.5, 1.5)}};
  LossFn<double> fn = [](Tape<double>& tape, const ParamSet<double>& ps) {
    ParamBinder<double> p(tape, ps);
    Var<double> x = p("x");
    Var<double> frozen = tape.constant(x.value());
    return sum(mul(x, frozen));
  };
  CHECK(grad_check(fn, params).worst() > 0.1);
}

TEST_CASE("grad_check validates the step") {
  LossFn<double> fn = [](Tape<double>& tape, const ParamSet<double>& ps) {
    ParamBinder<double> p(tape, ps);
    return sum(p("x"));
  };
  ParamSet<double> params{{"x", Array<double>({1}, 1.0)}};
  CHECK_THROWS(grad_check(fn, params, {.step = 0.1}));
  CHECK_THROWS(grad_check(fn, params, {.step = 1e-9}));
}

TEST_CASE("relative error") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 1e-10) == doctest::Approx(1e-2));
}
