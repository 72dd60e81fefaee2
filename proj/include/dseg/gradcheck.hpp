#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dseg/graph.hpp"
#include "dseg/params.hpp"

namespace dseg {

constexpr double kGradTolerance = 1e-4;
constexpr double kFdStep = 1e-3;

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  bool passed() const { return max_rel_err < kGradTolerance; }
};

using BuilderF32 = std::function<Var(Graph&, ParamStore&)>;
using BuilderF64 = std::function<VarT<double>(GraphT<double>&, ParamStoreT<double>&)>;

// Max relative error between f32 reverse-mode gradients and f64 central
// finite differences (step h), taken over every trainable scalar in `init`
// with the denominator floored at 1 (sub-unit gradients compare absolutely).
// Each finite-difference evaluation runs on a fresh f64 copy of the store,
// so stateful pieces (batch-norm running stats) cannot leak between probes.
double gradcheck_max_rel_err(const ParamStore& init, const BuilderF32& f32,
                             const BuilderF64& f64, double h = kFdStep);

// Wraps one generic builder lambda into both precision signatures.
template <class F>
std::pair<BuilderF32, BuilderF64> both_precisions(F f) {
  return {BuilderF32(f), BuilderF64(f)};
}

// The full suite: convolutions (standard, strided, transposed, deformable
// with and without modulation), every block family, and all three losses.
std::vector<GradCheckResult> run_gradcheck(uint64_t seed);

}  // namespace dseg
