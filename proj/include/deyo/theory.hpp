#pragma once

// Linear classifier on disentangled factors. Checks that the sign of
//   yhat * v(x) . (E+[v] - E-[v])
// predicts whether an entropy-minimization step on x widens (> 0) or narrows
// (< 0) the gap between the class-mean logits.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deyo/errors.hpp"
#include "deyo/numerics.hpp"

namespace deyo::theory {

/// Factor layout: [pp | pn | np | nn]. pp factors correlate with the label at
/// train and test time, pn factors only at train time.
struct FactorWorld {
  std::size_t d_pp = 0, d_pn = 0, d_np = 0, d_nn = 0;
  std::vector<double> mu_plus;   // E[v | y = +1] on the test distribution
  std::vector<double> mu_minus;  // E[v | y = -1]
  std::vector<double> theta;
  double eta = 1.0;

  std::size_t dim() const noexcept { return d_pp + d_pn + d_np + d_nn; }
  std::size_t pn_begin() const noexcept { return d_pp; }
  std::size_t np_begin() const noexcept { return d_pp + d_pn; }
  std::size_t nn_begin() const noexcept { return d_pp + d_pn + d_np; }

  /// Throws ConfigError when sizes, ranges, sign structure or the mean
  /// ordering (mu+ >= mu- on pp, mu+ <= mu- on pn) are violated.
  void validate() const {
    const std::size_t d = dim();
    if (mu_plus.size() != d || mu_minus.size() != d || theta.size() != d)
      throw ConfigError("FactorWorld: vector lengths do not match partition sizes");
    if (!(eta > 0.0)) throw ConfigError("FactorWorld: eta must be > 0");
    for (std::size_t i = 0; i < d; ++i) {
      if (mu_plus[i] < 0.0 || mu_plus[i] > 1.0 || mu_minus[i] < 0.0 || mu_minus[i] > 1.0)
        throw ConfigError("FactorWorld: factor means must lie in [0, 1]");
      const bool positive_block = i < np_begin();
      if (positive_block && !(theta[i] > 0.0)) throw ConfigError("FactorWorld: theta_pp, theta_pn must be > 0");
      if (!positive_block && theta[i] > 0.0) throw ConfigError("FactorWorld: theta_np, theta_nn must be <= 0");
      if (i < d_pp && mu_plus[i] < mu_minus[i]) throw ConfigError("FactorWorld: pp means must satisfy mu+ >= mu-");
      if (i >= d_pp && i < np_begin() && mu_plus[i] > mu_minus[i])
        throw ConfigError("FactorWorld: pn means must satisfy mu+ <= mu-");
    }
  }
};

struct FactorSample {
  std::vector<double> v;
  int pseudo_label = 1;  // +1 or -1
};

inline double logit(const FactorWorld& w, std::span<const double> v) { return dot(w.theta, v); }

/// +1 when theta . v > 0, else -1.
inline int pseudo_label(const FactorWorld& w, std::span<const double> v) {
  return logit(w, v) > 0.0 ? 1 : -1;
}

inline FactorSample make_sample(const FactorWorld& w, std::vector<double> v) {
  if (v.size() != w.dim()) throw DimensionError("factor vector length does not match world");
  const int y = pseudo_label(w, v);
  return {std::move(v), y};
}

inline std::vector<double> mean_gap(const FactorWorld& w) {
  std::vector<double> g(w.dim());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = w.mu_plus[i] - w.mu_minus[i];
  return g;
}

/// yhat * v . (E+[v] - E-[v]); negative marks a harmful sample.
inline double harmful_condition(const FactorWorld& w, const FactorSample& s) {
  return s.pseudo_label * dot(s.v, mean_gap(w));
}

struct EntropyStep {
  std::vector<double> delta_theta;
  double step_scale = 0.0;  // C' = eta * |log((1-p)/p) * p(1-p)|
  bool stationary = false;  // p = 1/2, the log term vanishes
};

/// Closed-form gradient-descent step on the binary entropy of sigmoid(theta . v):
///   delta_theta = yhat * C' * v.
/// Uses log((1-p)/p) = -a for a = theta . v.
inline EntropyStep entropy_grad_step(const FactorWorld& w, const FactorSample& s) {
  const double a = logit(w, s.v);
  const double p = sigmoid(a);
  EntropyStep step;
  step.step_scale = w.eta * std::abs(a * p * (1.0 - p));
  step.stationary = step.step_scale == 0.0;
  step.delta_theta.assign(s.v.size(), 0.0);
  if (step.stationary) return step;
  for (std::size_t i = 0; i < s.v.size(); ++i)
    step.delta_theta[i] = s.pseudo_label * step.step_scale * s.v[i];
  return step;
}

/// Binary entropy of sigmoid(theta . v), written directly in p.
inline double binary_entropy(std::span<const double> theta, std::span<const double> v) {
  const double p = sigmoid(dot(theta, v));
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log(1.0 - p);
  return h;
}

/// Closed-form change of the class-mean logit gap: C' * yhat * v . (E+ - E-).
inline double gap_change_closed_form(const FactorWorld& w, const FactorSample& s) {
  const auto step = entropy_grad_step(w, s);
  return step.step_scale * harmful_condition(w, s);
}

/// Brute-force gap change: evaluates E+[theta . v] - E-[theta . v] before and
/// after applying the step, in extended precision.
inline double gap_change_oracle(const FactorWorld& w, const FactorSample& s) {
  const auto step = entropy_grad_step(w, s);
  auto gap = [&](bool after) {
    long double plus = 0.0L, minus = 0.0L;
    for (std::size_t i = 0; i < w.dim(); ++i) {
      const long double th = static_cast<long double>(w.theta[i]) +
                             (after ? static_cast<long double>(step.delta_theta[i]) : 0.0L);
      plus += th * w.mu_plus[i];
      minus += th * w.mu_minus[i];
    }
    return plus - minus;
  };
  return static_cast<double>(gap(true) - gap(false));
}

struct CprTrapTerms {
  double cpr = 0.0;       // v_pp . (E+ - E-)_pp, >= 0 under the mean ordering
  double trap = 0.0;      // v_pn . (E+ - E-)_pn, <= 0 under the mean ordering
  double residual = 0.0;  // condition(yhat = +1) - cpr - trap, from the np/nn blocks
};

inline CprTrapTerms decompose_terms(const FactorWorld& w, const FactorSample& s) {
  const auto gap = mean_gap(w);
  CprTrapTerms t;
  for (std::size_t i = 0; i < w.d_pp; ++i) t.cpr += s.v[i] * gap[i];
  for (std::size_t i = w.pn_begin(); i < w.np_begin(); ++i) t.trap += s.v[i] * gap[i];
  t.residual = dot(s.v, gap) - t.cpr - t.trap;
  return t;
}

// ---------------------------------------------------------------------------
// Random worlds and the sign-agreement suite

struct WorldSampler {
  std::size_t max_per_partition = 4;
  double eta = 1.0;
  double theta_scale = 1.0;
};

/// Partition sizes uniform in [0, max] (at least one pp or pn factor),
/// |theta| uniform in (0, scale], means drawn uniformly then ordered per block.
inline FactorWorld random_world(Rng& rng, const WorldSampler& opt = {}) {
  FactorWorld w;
  do {
    w.d_pp = rng.index(opt.max_per_partition + 1);
    w.d_pn = rng.index(opt.max_per_partition + 1);
  } while (w.d_pp + w.d_pn == 0);
  w.d_np = rng.index(opt.max_per_partition + 1);
  w.d_nn = rng.index(opt.max_per_partition + 1);
  w.eta = opt.eta;
  const std::size_t d = w.dim();
  w.mu_plus.resize(d);
  w.mu_minus.resize(d);
  w.theta.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    double a = rng.uniform(), b = rng.uniform();
    const bool pp = i < w.d_pp;
    const bool pn = i >= w.d_pp && i < w.np_begin();
    if ((pp && a < b) || (pn && a > b)) std::swap(a, b);
    w.mu_plus[i] = a;
    w.mu_minus[i] = b;
    const double mag = opt.theta_scale * (1.0 - rng.uniform());  // (0, scale]
    w.theta[i] = i < w.np_begin() ? mag : -mag;
  }
  return w;
}

inline FactorSample random_sample(const FactorWorld& w, Rng& rng) {
  std::vector<double> v(w.dim());
  for (double& x : v) x = rng.uniform();
  return make_sample(w, std::move(v));
}

struct Counterexample {
  std::size_t trial = 0;
  double condition = 0.0;
  double gap_change = 0.0;
};

struct TheoryReport {
  std::uint64_t seed = 0;
  std::size_t trials = 0;       // qualifying trials evaluated
  std::size_t agreements = 0;
  std::size_t skipped = 0;      // |condition| <= threshold or stationary
  std::size_t harmful = 0;
  double max_closed_form_error = 0.0;
  std::vector<Counterexample> counterexamples;
};

/// Draws random (world, sample) pairs until `trials` of them have
/// |condition| > min_abs_condition and a non-stationary step, and checks
/// sign(condition) == sign(brute-force gap change) for each.
inline TheoryReport verify_sign_agreement(std::size_t trials, std::uint64_t seed,
                                          double min_abs_condition = 1e-9,
                                          const WorldSampler& sampler = {}) {
  if (trials == 0) throw ConfigError("verify_theory: trials must be >= 1");
  Rng rng(seed);
  TheoryReport rep;
  rep.seed = seed;
  while (rep.trials < trials) {
    const auto world = random_world(rng, sampler);
    const auto sample = random_sample(world, rng);
    const double cond = harmful_condition(world, sample);
    const auto step = entropy_grad_step(world, sample);
    if (std::abs(cond) <= min_abs_condition || step.stationary) {
      ++rep.skipped;
      continue;
    }
    const double oracle = gap_change_oracle(world, sample);
    const double closed = step.step_scale * cond;
    rep.max_closed_form_error = std::max(rep.max_closed_form_error, std::abs(oracle - closed));
    if (cond < 0) ++rep.harmful;
    if ((cond > 0) == (oracle > 0) && oracle != 0.0) {
      ++rep.agreements;
    } else {
      rep.counterexamples.push_back({rep.trials, cond, oracle});
    }
    ++rep.trials;
  }
  return rep;
}

}  // namespace deyo::theory
