#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "watervib/info.hpp"
#include "watervib/rng.hpp"

namespace watervib {

// Information Bottleneck on discrete channels: maximize I(Z;M) - beta * I(Z;X)
// over the encoder p(z|x) with the canonical self-consistent alternating
// updates, and trace the rate-relevance curve. Larger beta compresses harder.

inline constexpr double kRowStochasticTol = 1e-10;

struct StochasticEncoder {
  int x_size = 0;
  int z_size = 0;
  std::vector<double> p;  // row-stochastic, x_size rows of z_size entries

  double at(int x, int z) const { return p[static_cast<std::size_t>(x) * z_size + z]; }
  double& at(int x, int z) { return p[static_cast<std::size_t>(x) * z_size + z]; }
};

inline void validate(const StochasticEncoder& e) {
  if (e.x_size < 1 || e.z_size < 1) throw std::invalid_argument("encoder: empty alphabet");
  if (e.p.size() != static_cast<std::size_t>(e.x_size) * e.z_size)
    throw std::invalid_argument("encoder: size mismatch");
  for (int x = 0; x < e.x_size; ++x) {
    double row = 0.0;
    for (int z = 0; z < e.z_size; ++z) {
      if (!(e.at(x, z) >= 0.0)) throw std::invalid_argument("encoder: negative entry");
      row += e.at(x, z);
    }
    if (std::abs(row - 1.0) > kRowStochasticTol)
      throw std::invalid_argument("encoder: row does not sum to 1");
  }
}

struct IBCurvePoint {
  double beta = 0.0;
  double rate = 0.0;       // I(Z;X), nats
  double relevance = 0.0;  // I(Z;M), nats
  double epsilon = 0.0;    // I(X;M) - relevance, nats
  double objective = 0.0;  // relevance - beta * rate
  bool converged = true;
  int iters = 0;
};

struct IBSolveResult {
  StochasticEncoder encoder;
  IBCurvePoint point;
  bool converged = false;
  int iters = 0;
  std::vector<double> objective_history;  // one value per full update round
};

struct CurveGeometryReport {
  bool monotone = false;
  bool convex = false;
  std::vector<double> slope_errors;  // relative error of dR/di vs 1/beta, interior active points
  std::vector<int> excluded_points;  // merged-point indices skipped as trivial or saturated
};

namespace detail {

struct IBChannel {
  int m_size, x_size;
  std::vector<double> px;                  // p(x)
  std::vector<std::vector<double>> pm_x;   // posteriors p(m|x) for px > 0
  std::vector<double> pm;                  // prior p(m)
  double i_xm;                             // I(X;M)
  double h_x;                              // H(X)
};

inline IBChannel make_channel(const JointPMF& j) {
  IBChannel c;
  c.m_size = j.m_size;
  c.x_size = j.x_size;
  c.px = j.marginal_x().p;
  c.pm = j.marginal_m().p;
  c.pm_x.assign(j.x_size, std::vector<double>(j.m_size, 0.0));
  for (int x = 0; x < j.x_size; ++x) {
    if (c.px[x] > 0.0)
      for (int m = 0; m < j.m_size; ++m) c.pm_x[x][m] = j.at(m, x) / c.px[x];
    else
      c.pm_x[x] = c.pm;  // irrelevant almost surely
  }
  c.i_xm = mutual_information(j).value;
  MarginalPMF mx;
  mx.p = c.px;
  c.h_x = entropy(mx).value;
  return c;
}

struct IBState {
  std::vector<double> p_zx;  // encoder rows, x_size * z_size
  std::vector<double> pz;    // z marginal
  std::vector<double> pm_z;  // decoder p(m|z), z_size * m_size
};

inline void update_marginals(const IBChannel& c, int z_size, IBState& s) {
  s.pz.assign(z_size, 0.0);
  s.pm_z.assign(static_cast<std::size_t>(z_size) * c.m_size, 0.0);
  for (int x = 0; x < c.x_size; ++x) {
    if (c.px[x] <= 0.0) continue;
    for (int z = 0; z < z_size; ++z) {
      const double w = c.px[x] * s.p_zx[static_cast<std::size_t>(x) * z_size + z];
      if (w <= 0.0) continue;
      s.pz[z] += w;
      for (int m = 0; m < c.m_size; ++m)
        s.pm_z[static_cast<std::size_t>(z) * c.m_size + m] += w * c.pm_x[x][m];
    }
  }
  for (int z = 0; z < z_size; ++z) {
    if (s.pz[z] > 0.0) {
      for (int m = 0; m < c.m_size; ++m)
        s.pm_z[static_cast<std::size_t>(z) * c.m_size + m] /= s.pz[z];
    } else {
      for (int m = 0; m < c.m_size; ++m)
        s.pm_z[static_cast<std::size_t>(z) * c.m_size + m] = c.pm[m];
    }
  }
}

inline void update_encoder(const IBChannel& c, int z_size, double beta, IBState& s) {
  std::vector<double> logw(z_size);
  for (int x = 0; x < c.x_size; ++x) {
    if (c.px[x] <= 0.0) {
      for (int z = 0; z < z_size; ++z)
        s.p_zx[static_cast<std::size_t>(x) * z_size + z] = 1.0 / z_size;
      continue;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (int z = 0; z < z_size; ++z) {
      double lw;
      if (s.pz[z] <= 0.0) {
        lw = -std::numeric_limits<double>::infinity();  // dead cluster stays dead
      } else {
        double kl = 0.0;
        for (int m = 0; m < c.m_size; ++m) {
          const double pmx = c.pm_x[x][m];
          if (pmx > 0.0) {
            const double pmz = s.pm_z[static_cast<std::size_t>(z) * c.m_size + m];
            if (pmz <= 0.0) {
              kl = std::numeric_limits<double>::infinity();
              break;
            }
            kl += pmx * std::log(pmx / pmz);
          }
        }
        lw = std::isinf(kl) ? -std::numeric_limits<double>::infinity()
                            : std::log(s.pz[z]) - kl / beta;
      }
      logw[z] = lw;
      best = std::max(best, lw);
    }
    double norm = 0.0;
    for (int z = 0; z < z_size; ++z) {
      const double w = std::isinf(best) ? 1.0 : std::exp(logw[z] - best);
      logw[z] = std::isfinite(w) ? w : 0.0;
      norm += logw[z];
    }
    for (int z = 0; z < z_size; ++z)
      s.p_zx[static_cast<std::size_t>(x) * z_size + z] = logw[z] / norm;
  }
}

/// Rate I(Z;X) and relevance I(Z;M) of the current encoder, exact.
inline void encoder_information(const IBChannel& c, int z_size, const IBState& s,
                                double& rate, double& relevance) {
  rate = 0.0;
  for (int x = 0; x < c.x_size; ++x) {
    if (c.px[x] <= 0.0) continue;
    for (int z = 0; z < z_size; ++z) {
      const double pzx = s.p_zx[static_cast<std::size_t>(x) * z_size + z];
      if (pzx > 0.0 && s.pz[z] > 0.0) rate += c.px[x] * pzx * std::log(pzx / s.pz[z]);
    }
  }
  rate = std::max(rate, 0.0);
  // p(m,z) = sum_x p(x) p(z|x) p(m|x); relevance from it and the marginals.
  relevance = 0.0;
  std::vector<double> pmz(static_cast<std::size_t>(z_size) * c.m_size, 0.0);
  for (int x = 0; x < c.x_size; ++x) {
    if (c.px[x] <= 0.0) continue;
    for (int z = 0; z < z_size; ++z) {
      const double w = c.px[x] * s.p_zx[static_cast<std::size_t>(x) * z_size + z];
      if (w <= 0.0) continue;
      for (int m = 0; m < c.m_size; ++m)
        pmz[static_cast<std::size_t>(z) * c.m_size + m] += w * c.pm_x[x][m];
    }
  }
  for (int z = 0; z < z_size; ++z)
    for (int m = 0; m < c.m_size; ++m) {
      const double v = pmz[static_cast<std::size_t>(z) * c.m_size + m];
      if (v > 0.0 && s.pz[z] > 0.0 && c.pm[m] > 0.0)
        relevance += v * std::log(v / (s.pz[z] * c.pm[m]));
    }
  relevance = std::max(relevance, 0.0);
}

inline void dirichlet_rows(std::vector<double>& p, int rows, int cols, Rng& rng) {
  p.resize(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int cidx = 0; cidx < cols; ++cidx) {
      const double g = -std::log(rng.uniform01_open());  // Exp(1) = Dirichlet(1,..,1) gammas
      p[static_cast<std::size_t>(r) * cols + cidx] = g;
      sum += g;
    }
    for (int cidx = 0; cidx < cols; ++cidx)
      p[static_cast<std::size_t>(r) * cols + cidx] /= sum;
  }
}

struct IBRunOutcome {
  IBState state;
  double rate = 0.0, relevance = 0.0, objective = 0.0;
  bool converged = false;
  int iters = 0;
  std::vector<double> history;
};

inline IBRunOutcome run_ib(const IBChannel& c, int z_size, double beta,
                           std::vector<double> init_rows, double tol, int max_iters) {
  IBRunOutcome out;
  out.state.p_zx = std::move(init_rows);
  update_marginals(c, z_size, out.state);
  encoder_information(c, z_size, out.state, out.rate, out.relevance);
  double prev = out.relevance - beta * out.rate;
  out.history.push_back(prev);
  for (int it = 1; it <= max_iters; ++it) {
    update_encoder(c, z_size, beta, out.state);
    update_marginals(c, z_size, out.state);
    encoder_information(c, z_size, out.state, out.rate, out.relevance);
    const double obj = out.relevance - beta * out.rate;
    out.history.push_back(obj);
    out.iters = it;
    if (std::abs(obj - prev) < tol) {
      out.converged = true;
      out.objective = obj;
      return out;
    }
    prev = obj;
  }
  out.objective = prev;
  return out;
}

/// Best-of tie-breaking: objectives within tol are considered equal, and the
/// higher-relevance solution is preferred (annealing convention).
inline bool better_outcome(const IBRunOutcome& a, const IBRunOutcome& b, double tol) {
  if (a.objective > b.objective + tol) return true;
  if (b.objective > a.objective + tol) return false;
  return a.relevance > b.relevance;
}

}  // namespace detail

inline constexpr double kIBDefaultTol = 1e-9;
inline constexpr int kIBDefaultMaxIters = 10000;

/// Solves the IB objective at one beta. Restarts from fresh Dirichlet rows
/// n_restarts times and keeps the best objective. Non-convergence is reported
/// through the flags, never thrown.
inline IBSolveResult solve_ib(const JointPMF& j, double beta, int z_size,
                              std::uint64_t seed, double tol = kIBDefaultTol,
                              int max_iters = kIBDefaultMaxIters, int n_restarts = 1) {
  validate(j);
  if (!(beta > 0.0)) throw std::invalid_argument("solve_ib: beta must be positive");
  if (z_size < 1 || z_size > j.x_size)
    throw std::invalid_argument("solve_ib: z_size must be in [1, x_size]");
  if (n_restarts < 1) throw std::invalid_argument("solve_ib: n_restarts must be >= 1");

  const detail::IBChannel c = detail::make_channel(j);
  detail::IBRunOutcome best;
  bool have = false;
  for (int r = 0; r < n_restarts; ++r) {
    Rng rng(stream_seed(seed, "ib-init") + static_cast<std::uint64_t>(r));
    std::vector<double> rows;
    detail::dirichlet_rows(rows, j.x_size, z_size, rng);
    detail::IBRunOutcome out = detail::run_ib(c, z_size, beta, std::move(rows), tol, max_iters);
    if (!have || detail::better_outcome(out, best, tol)) {
      best = std::move(out);
      have = true;
    }
  }

  IBSolveResult res;
  res.encoder.x_size = j.x_size;
  res.encoder.z_size = z_size;
  res.encoder.p = best.state.p_zx;
  res.converged = best.converged;
  res.iters = best.iters;
  res.objective_history = best.history;
  res.point.beta = beta;
  res.point.rate = best.rate;
  res.point.relevance = best.relevance;
  res.point.epsilon = c.i_xm - best.relevance;
  res.point.objective = best.relevance - beta * best.rate;
  res.point.converged = best.converged;
  res.point.iters = best.iters;
  return res;
}

/// Traces the curve along a strictly descending beta schedule, warm-starting
/// each point from the previous solution with a small symmetry-breaking
/// perturbation, plus n_restarts fresh initializations; best objective kept.
inline std::vector<IBCurvePoint> trace_curve(const JointPMF& j,
                                             const std::vector<double>& beta_schedule,
                                             int z_size, std::uint64_t seed,
                                             int n_restarts = 1,
                                             double tol = kIBDefaultTol,
                                             int max_iters = kIBDefaultMaxIters) {
  validate(j);
  if (beta_schedule.empty()) throw std::invalid_argument("trace_curve: empty schedule");
  for (std::size_t k = 0; k < beta_schedule.size(); ++k) {
    if (!(beta_schedule[k] > 0.0))
      throw std::invalid_argument("trace_curve: betas must be positive");
    if (k > 0 && !(beta_schedule[k] < beta_schedule[k - 1]))
      throw std::invalid_argument("trace_curve: schedule must be strictly descending");
  }
  if (z_size < 1 || z_size > j.x_size)
    throw std::invalid_argument("trace_curve: z_size must be in [1, x_size]");

  const detail::IBChannel c = detail::make_channel(j);
  std::vector<IBCurvePoint> points;
  std::vector<double> warm;
  Rng perturb_rng(stream_seed(seed, "ib-warm"));
  for (std::size_t k = 0; k < beta_schedule.size(); ++k) {
    const double beta = beta_schedule[k];
    detail::IBRunOutcome best;
    bool have = false;
    if (!warm.empty()) {
      // mix 1e-3 of fresh Dirichlet mass into the previous solution
      std::vector<double> rows(warm.size());
      std::vector<double> noise;
      detail::dirichlet_rows(noise, j.x_size, z_size, perturb_rng);
      for (std::size_t i = 0; i < rows.size(); ++i)
        rows[i] = 0.999 * warm[i] + 0.001 * noise[i];
      best = detail::run_ib(c, z_size, beta, std::move(rows), tol, max_iters);
      have = true;
    }
    for (int r = 0; r < n_restarts; ++r) {
      Rng rng(stream_seed(seed, "ib-init") + 1000003ULL * k + static_cast<std::uint64_t>(r));
      std::vector<double> rows;
      detail::dirichlet_rows(rows, j.x_size, z_size, rng);
      detail::IBRunOutcome out = detail::run_ib(c, z_size, beta, std::move(rows), tol, max_iters);
      if (!have || detail::better_outcome(out, best, tol)) {
        best = std::move(out);
        have = true;
      }
    }
    warm = best.state.p_zx;
    IBCurvePoint pt;
    pt.beta = beta;
    pt.rate = best.rate;
    pt.relevance = best.relevance;
    pt.epsilon = c.i_xm - best.relevance;
    pt.objective = best.relevance - beta * best.rate;
    pt.converged = best.converged;
    pt.iters = best.iters;
    points.push_back(pt);
  }
  std::sort(points.begin(), points.end(),
            [](const IBCurvePoint& a, const IBCurvePoint& b) { return a.relevance < b.relevance; });
  return points;
}

inline constexpr double kCurveMergeTol = 1e-6;   // relevance merge distance
inline constexpr double kCurveConvexTol = 1e-6;  // second-divided-difference slack

/// Checks monotonicity, convexity and the slope identity dR/di = 1/beta of a
/// traced curve. Points closer than 1e-6 nats in relevance are merged first
/// (lowest rate kept); trivial (rate ~ 0) and saturated (epsilon ~ 0) points
/// are excluded from the slope comparison, since the constraint is inactive
/// there.
inline CurveGeometryReport check_curve_geometry(const std::vector<IBCurvePoint>& points,
                                                double slope_tol = 0.15) {
  (void)slope_tol;  // tolerance is applied by the caller; kept for signature clarity
  std::vector<IBCurvePoint> pts = points;
  std::sort(pts.begin(), pts.end(),
            [](const IBCurvePoint& a, const IBCurvePoint& b) { return a.relevance < b.relevance; });
  std::vector<IBCurvePoint> merged;
  for (const IBCurvePoint& p : pts) {
    if (!merged.empty() && p.relevance - merged.back().relevance < kCurveMergeTol) {
      if (p.rate < merged.back().rate) merged.back() = p;  // keep the Pareto representative
    } else {
      merged.push_back(p);
    }
  }
  if (merged.size() < 3)
    throw std::invalid_argument("check_curve_geometry: fewer than 3 distinct relevance values");

  CurveGeometryReport rep;
  rep.monotone = true;
  for (std::size_t k = 1; k < merged.size(); ++k)
    if (merged[k].rate < merged[k - 1].rate - 1e-9) rep.monotone = false;

  rep.convex = true;
  for (std::size_t k = 1; k + 1 < merged.size(); ++k) {
    const double s01 = (merged[k].rate - merged[k - 1].rate) /
                       (merged[k].relevance - merged[k - 1].relevance);
    const double s12 = (merged[k + 1].rate - merged[k].rate) /
                       (merged[k + 1].relevance - merged[k].relevance);
    const double d2 = (s12 - s01) / (merged[k + 1].relevance - merged[k - 1].relevance);
    if (d2 < -kCurveConvexTol) rep.convex = false;
  }

  for (std::size_t k = 1; k + 1 < merged.size(); ++k) {
    const bool trivial = merged[k].rate <= 1e-9;
    const bool saturated = merged[k].epsilon <= kCurveMergeTol;
    if (trivial || saturated) {
      rep.excluded_points.push_back(static_cast<int>(k));
      continue;
    }
    const double fd = (merged[k + 1].rate - merged[k - 1].rate) /
                      (merged[k + 1].relevance - merged[k - 1].relevance);
    const double target = 1.0 / merged[k].beta;
    rep.slope_errors.push_back(std::abs(fd - target) / target);
  }
  return rep;
}

}  // namespace watervib
