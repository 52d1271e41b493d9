#include "uvz/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uvz {

namespace {

constexpr double kEps = double(std::numeric_limits<Real>::epsilon());
constexpr double kNoiseFactor = 32.0;

std::vector<std::int64_t> probe_indices(std::int64_t numel,
                                        std::int64_t max_probes, Rng& rng) {
  std::vector<std::int64_t> idx;
  if (numel <= max_probes) {
    idx.resize(std::size_t(numel));
    for (std::int64_t i = 0; i < numel; ++i) idx[std::size_t(i)] = i;
    return idx;
  }
  idx.reserve(std::size_t(max_probes));
  for (std::int64_t i = 0; i < max_probes; ++i)
    idx.push_back(std::int64_t(rng.uniform_int(std::uint64_t(numel))));
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

struct Probe {
  double analytic = 0.0;
  double numeric = 0.0;
  double allowance = 0.0;
  double floor = 0.0;  // noise + kink share of the allowance
};

void record(GradCheckReport& rep, const std::string& where,
            std::int64_t flat, const Probe& p) {
  ++rep.checked;
  const double err = std::abs(p.analytic - p.numeric);
  rep.max_abs_err = std::max(rep.max_abs_err, err);
  // The relative error is only a meaningful reading where the relative
  // term of the allowance dominates the noise-plus-kink floor; a probe of
  // a near-zero gradient reads pure difference-quotient noise and says
  // nothing about the backward pass.
  const double den =
      std::max({std::abs(p.analytic), std::abs(p.numeric), 1e-6});
  if (p.allowance - p.floor > p.floor)
    rep.max_rel_err = std::max(rep.max_rel_err, err / den);
  const double ratio = err / p.allowance;
  rep.worst = std::max(rep.worst, ratio);
  if (err > p.allowance) {
    ++rep.flagged;
    rep.pass = false;
    if (rep.detail.empty())
      rep.detail = where + "[" + std::to_string(flat) +
                   "]: analytic=" + std::to_string(p.analytic) +
                   " numeric=" + std::to_string(p.numeric) +
                   " allowance=" + std::to_string(p.allowance);
  }
}

// Central difference on one storage element. `value` is the element to
// nudge; eval() recomputes the scalar objective from current storage and
// f0 is that objective at the unperturbed point. When the probe interval
// straddles a kink (piecewise-linear activations), the central estimate is
// biased by exactly half the gap between the two one-sided slopes, so that
// gap widens the allowance instead of failing the probe.
Probe central_diff(Real& value, double h, double tol, double analytic,
                   double f0, const std::function<double()>& eval) {
  const Real orig = value;
  value = Real(double(orig) + h);
  const double step_up = double(value) - double(orig);
  const double f_plus = eval();
  value = Real(double(orig) - h);
  const double step_dn = double(orig) - double(value);
  const double f_minus = eval();
  value = orig;

  Probe p;
  p.analytic = analytic;
  p.numeric = (f_plus - f_minus) / (step_up + step_dn);
  const double fmag = std::max(std::abs(f_plus), std::abs(f_minus));
  const double noise =
      kNoiseFactor * kEps * fmag / (0.5 * (step_up + step_dn));
  const double slope_gap = std::abs((f_plus - f0) / step_up -
                                    (f0 - f_minus) / step_dn);
  p.floor = noise + 0.75 * slope_gap;
  p.allowance =
      tol * std::max({std::abs(p.analytic), std::abs(p.numeric), 1e-6}) +
      p.floor;
  return p;
}

}  // namespace

GradCheckReport check_gradients(
    const std::string& name,
    const std::function<Tensor(Tape&, std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, const FdOpts& opts) {
  GradCheckReport rep;
  rep.name = name;

  // analytic pass
  std::vector<std::shared_ptr<std::vector<Real>>> analytic;
  {
    Tape tape;
    std::vector<Tensor> regs;
    regs.reserve(inputs.size());
    for (Tensor& t : inputs) regs.push_back(tape.leaf(t, true));
    Tensor loss = f(tape, regs);
    tape.backward(loss);
    for (Tensor& t : regs)
      analytic.push_back(
          std::make_shared<std::vector<Real>>(*t.grad));
  }

  auto eval = [&]() {
    Tape tape;
    std::vector<Tensor> regs;
    regs.reserve(inputs.size());
    for (Tensor& t : inputs) regs.push_back(tape.leaf(t, false));
    return double(f(tape, regs).item());
  };

  const double f0 = eval();
  Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    for (std::int64_t flat :
         probe_indices(t.numel(), opts.max_probes, rng)) {
      Probe p = central_diff(
          t.data()[flat], opts.h, opts.tol,
          double((*analytic[k])[std::size_t(flat)]), f0, eval);
      record(rep, name + ":input" + std::to_string(k), flat, p);
    }
  }
  return rep;
}

GradCheckReport check_param_gradients(
    const std::string& name,
    const std::function<Tensor(Tape&, ParamStore&)>& f, ParamStore& ps,
    const FdOpts& opts) {
  GradCheckReport rep;
  rep.name = name;

  std::vector<std::vector<Real>> analytic(std::size_t(ps.size()));
  {
    Tape tape;
    Tensor loss = f(tape, ps);
    tape.backward(loss);
    for (int h = 0; h < ps.size(); ++h) {
      const auto& slot = ps.grad_slot(h);
      if (slot) analytic[std::size_t(h)] = *slot;
    }
  }

  auto eval = [&]() {
    Tape tape;
    return double(f(tape, ps).item());
  };

  const double f0 = eval();
  Rng rng(opts.seed ^ 0x46b91c3a5f2d7e19ull);
  for (int h = 0; h < ps.size(); ++h) {
    if (analytic[std::size_t(h)].empty()) continue;  // unused by f
    Tensor& value = ps.value(h);
    for (std::int64_t flat :
         probe_indices(value.numel(), opts.max_probes, rng)) {
      Probe p = central_diff(
          value.data()[flat], opts.h, opts.tol,
          double(analytic[std::size_t(h)][std::size_t(flat)]), f0, eval);
      record(rep, name + ":" + ps.name(h), flat, p);
    }
  }
  return rep;
}

}  // namespace uvz
