#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uvz/params.hpp"
#include "uvz/tensor.hpp"

namespace uvz {

struct GradCheckReport {
  std::string name;
  bool pass = true;
  std::int64_t checked = 0;  // elements compared
  std::int64_t flagged = 0;  // elements outside the allowance
  double worst = 0.0;        // worst |a-n| / allowance ratio seen
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // |a-n| / max(|a|, |n|, 1e-6)
  std::string detail;  // first failure, for diagnostics
};

// Central-difference comparison settings.
//
// Each probed element is nudged by +-h and the numeric slope
// (f(x+h) - f(x-h)) / (2h) is compared against the analytic gradient a:
//
//   pass  <=>  |a - n| <= tol * max(|a|, |n|, 1e-6) + noise + kink
//   noise  =   32 * eps_Real * max|f| / h
//   kink   =   0.75 * |(f(x+h) - f(x))/h - (f(x) - f(x-h))/h|
//
// The noise term is the resolution limit of the difference quotient:
// every evaluation of f carries rounding error of order eps * |f|, so
// slopes below noise are not measurable at step h no matter how exact the
// analytic value is. With Real = double the floor sits near 1e-10 and the
// relative term dominates; with Real = float it keeps correct gradients
// from being flagged purely because the forward pass rounds.
//
// The kink term handles piecewise-linear activations: when the probe
// interval straddles a slope change (any pre-activation within h of zero
// somewhere downstream), the central difference is biased by exactly half
// the gap between the two one-sided slopes, so that measured gap widens
// the allowance. On smooth stretches the gap is O(h * f'') and the term is
// negligible. Structural mistakes (wrong factor, wrong sign, missing term)
// still land far outside the allowance in either precision.
struct FdOpts {
  double h = sizeof(Real) == 8 ? 1e-5 : 1e-3;
  double tol = 1e-3;
  std::int64_t max_probes = 400;  // per tensor; extra elements subsampled
  std::uint64_t seed = 0;
};

// Checks d(f)/d(inputs) for a scalar-valued f built from tape ops. The
// driver registers every input as a differentiable leaf, runs backward once
// for the analytic gradients, then probes elements with central
// differences. f must be deterministic in its inputs.
GradCheckReport check_gradients(
    const std::string& name,
    const std::function<Tensor(Tape&, std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, const FdOpts& opts = {});

// Same comparison for every parameter of a store; f reads parameters via
// tape.param internally and must be deterministic in their values.
GradCheckReport check_param_gradients(
    const std::string& name,
    const std::function<Tensor(Tape&, ParamStore&)>& f, ParamStore& ps,
    const FdOpts& opts = {});

// Full finite-difference sweep: every tensor op plus the composite blocks,
// losses and networks, across `rounds` seeded input draws. Composite cases
// use tol 1e-2, single ops 1e-3. Used by the command-line `gradcheck`
// action and the acceptance suite.
std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed, int rounds);

}  // namespace uvz
