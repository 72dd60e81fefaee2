#include <doctest.h>

#include <set>

#include "dseg/graph.hpp"
#include "dseg/ops.hpp"
#include "dseg/rng.hpp"
#include "dseg/tensor.hpp"

using namespace dseg;

TEST_CASE("rng streams are deterministic and bounded") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("tensor shape/data consistency is enforced") {
  CHECK_NOTHROW(Tensor(Shape{2, 3}, std::vector<float>(6, 1.f)));
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<float>(5, 1.f)), DimensionError);
  Tensor s = Tensor::scalar(3.f);
  CHECK(s.is_scalar());
  CHECK(s.numel() == 1);
  Tensor t(Shape{2, 2, 2, 2});
  CHECK(t.numel() == 16);
  CHECK(t.rank() == 4);
}

TEST_CASE("sum backward gives all-ones") {
  Rng rng(7);
  Tensor x = uniform_tensor<float>(Shape{4, 5}, rng, -1.f, 1.f);
  Graph g;
  Var xv = g.param(&x);
  g.backward(sum_all(g, xv));
  REQUIRE(x.grad.size() == 20);
  for (float v : x.grad) CHECK(v == 1.0f);
}

TEST_CASE("sum of squares backward gives 2x") {
  Tensor x(Shape{3}, {1.f, -2.f, 3.f});
  Graph g;
  Var xv = g.param(&x);
  g.backward(sum_all(g, mul(g, xv, xv)));
  REQUIRE(x.grad.size() == 3);
  CHECK(x.grad[0] == doctest::Approx(2.f));
  CHECK(x.grad[1] == doctest::Approx(-4.f));
  CHECK(x.grad[2] == doctest::Approx(6.f));
}

TEST_CASE("backward validates loss rank and single use") {
  Tensor x(Shape{3}, {1.f, 2.f, 3.f});
  {
    Graph g;
    Var xv = g.param(&x);
    CHECK_THROWS_AS(g.backward(xv), RankError);
  }
  {
    Graph g;
    Var loss = sum_all(g, g.param(&x));
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), StateError);
  }
}

TEST_CASE("parameters unused by the loss receive zero gradients") {
  Tensor used(Shape{2}, {1.f, 2.f});
  Tensor unused(Shape{2}, {3.f, 4.f});
  Graph g;
  Var uv = g.param(&used);
  g.param(&unused);
  g.backward(sum_all(g, uv));
  REQUIRE(unused.grad.size() == 2);
  CHECK(unused.grad[0] == 0.f);
  CHECK(unused.grad[1] == 0.f);
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng r1(9), r2(9);
  auto a = v, b = v;
  r1.shuffle(a);
  r2.shuffle(b);
  CHECK(a == b);
  CHECK(std::set<int>(a.begin(), a.end()) == std::set<int>(v.begin(), v.end()));
}
