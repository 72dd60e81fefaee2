// The finite-difference harness itself: every registered target must pass,
// and a sabotaged backward must be caught.

#include <doctest.h>

#include <set>
#include <string>

#include "dseg/gradcheck.hpp"

using namespace dseg;

TEST_CASE("every gradient target beats the tolerance") {
  auto results = run_gradcheck(7);
  const std::set<std::string> expected = {
      "conv2d",          "conv2d_stride2",
      "transposed_conv2d", "max_pool_concat",
      "deform_conv2d",   "deform_conv2d_modulated",
      "block_plain",     "block_residual",
      "block_deformable", "block_deformable_residual_mod",
      "loss_ce",         "loss_focal",
      "loss_weighted_focal"};
  std::set<std::string> seen;
  for (const GradCheckResult& r : results) {
    INFO(r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.passed());
    seen.insert(r.name);
  }
  CHECK(seen == expected);
}

namespace {

// y = sum(x*x) with a deliberately broken backward (gradient 3x instead of
// 2x). The harness must flag the analytic/numeric mismatch.
template <class T>
VarT<T> buggy_square_sum(GraphT<T>& g, ParamStoreT<T>& store) {
  VarT<T> x = g.param(&store.at("x"));
  const TensorT<T>& xv = g.val(x);
  TensorT<T> out = TensorT<T>::scalar(T(0));
  for (T v : xv.data) out.data[0] += v * v;
  int xid = x.id;
  return g.make_node(std::move(out), {xid}, [xid](GraphT<T>& gr, int self) {
    T go = gr.grad_buf(self)[0];
    auto& gx = gr.grad_buf(xid);
    const TensorT<T>& xin = gr.val(xid);
    for (size_t i = 0; i < gx.size(); ++i)
      gx[i] += go * T(3) * xin.data[i];  // wrong: d/dx of x^2 is 2x
  });
}

}  // namespace

TEST_CASE("the harness flags an incorrect backward implementation") {
  ParamStore init;
  Tensor x(Shape{4});
  x.data = {0.5f, -1.25f, 2.0f, 0.75f};
  init.add("x", x);

  double err = gradcheck_max_rel_err(
      init, [](Graph& g, ParamStore& s) { return buggy_square_sum(g, s); },
      [](GraphT<double>& g, ParamStoreT<double>& s) {
        return buggy_square_sum(g, s);
      });
  // Analytic says 3x, finite differences say 2x: relative error ~1/3.
  CHECK(err > 1e-2);
}

TEST_CASE("a correct hand-rolled op passes the same harness") {
  ParamStore init;
  Tensor x(Shape{4});
  x.data = {0.5f, -1.25f, 2.0f, 0.75f};
  init.add("x", x);

  auto good = [](auto& g, auto& store) {
    using T = typename std::decay_t<decltype(g)>::value_type;
    VarT<T> xv = g.param(&store.at("x"));
    const TensorT<T>& xt = g.val(xv);
    TensorT<T> out = TensorT<T>::scalar(T(0));
    for (T v : xt.data) out.data[0] += v * v;
    int xid = xv.id;
    return g.make_node(std::move(out), {xid}, [xid](GraphT<T>& gr, int self) {
      T go = gr.grad_buf(self)[0];
      auto& gx = gr.grad_buf(xid);
      const TensorT<T>& xin = gr.val(xid);
      for (size_t i = 0; i < gx.size(); ++i)
        gx[i] += go * T(2) * xin.data[i];
    });
  };
  double err = gradcheck_max_rel_err(init, good, good);
  CHECK(err < kGradTolerance);
}
