#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "watervib/info.hpp"
#include "watervib/partition.hpp"

namespace watervib {

// Brute-force construction and verification of Minimal Sufficient Statistics
// on small alphabets. Sufficiency of a deterministic statistic T is the
// information criterion I(M;T) = I(M;X); minimality is the smallest rate
// I(T;X) among sufficient statistics.

inline constexpr double kMssTol = 1e-9;

struct SufficiencyReport {
  bool sufficient = false;
  Nats i_mt{};
  Nats i_mx{};
  Nats i_xt{};
  Nats gap{};  // i_mx - i_mt, >= -1e-12 by the data processing inequality
};

struct MSSReport {
  Partition mss;
  Nats rate{};  // I(T*;X)
  std::vector<std::pair<Partition, double>> all_sufficient_rates;
  bool theorem2_holds = false;  // MSS attains the minimal rate among sufficient statistics
  bool theorem3_holds = false;  // every rate-minimal sufficient statistic equals the MSS
  bool flagged = false;         // near-degenerate rate ties within 10x tolerance
  double tol = kMssTol;
};

/// I(X;T) for a deterministic statistic equals H(T); computed from the pushed
/// X marginal.
inline Nats statistic_rate(const JointPMF& j, const Partition& t) {
  const MarginalPMF px = j.marginal_x();
  MarginalPMF pt;
  pt.p.assign(t.n_blocks, 0.0);
  for (int x = 0; x < j.x_size; ++x) pt.p[t.block_of[x]] += px.p[x];
  return entropy(pt);
}

inline SufficiencyReport is_sufficient(const JointPMF& j, const Partition& t,
                                       double tol = kMssTol) {
  validate(j);
  validate(t);
  if (t.size() != j.x_size)
    throw std::invalid_argument("is_sufficient: partition does not match the X alphabet");
  SufficiencyReport r;
  r.i_mx = mutual_information(j);
  r.i_mt = mutual_information(apply_statistic(j, t));
  r.i_xt = statistic_rate(j, t);
  const double gap = r.i_mx.value - r.i_mt.value;
  if (gap < -kInfoClampTol)
    throw std::runtime_error("is_sufficient: negative sufficiency gap (DPI violated)");
  r.gap = Nats{gap < 0.0 ? 0.0 : gap};
  r.sufficient = gap <= tol;
  return r;
}

/// Groups x ~ x' iff their posteriors p(.|x), p(.|x') agree within tol
/// componentwise. Symbols with zero marginal form one designated block; their
/// statistic value is irrelevant almost surely.
inline Partition construct_mss(const JointPMF& j, double tol = kMssTol) {
  validate(j);
  const MarginalPMF px = j.marginal_x();
  std::vector<int> raw(j.x_size, -1);
  std::vector<std::vector<double>> reps;  // posterior of the first member of each block
  std::vector<int> rep_label;
  int zero_label = -1;
  int next = 0;
  for (int x = 0; x < j.x_size; ++x) {
    if (px.p[x] <= 0.0) {
      if (zero_label < 0) zero_label = next++;
      raw[x] = zero_label;
      continue;
    }
    std::vector<double> post(j.m_size);
    for (int m = 0; m < j.m_size; ++m) post[m] = j.at(m, x) / px.p[x];
    int found = -1;
    for (std::size_t k = 0; k < reps.size(); ++k) {
      bool close = true;
      for (int m = 0; m < j.m_size; ++m)
        if (std::abs(reps[k][m] - post[m]) > tol) {
          close = false;
          break;
        }
      if (close) {
        found = rep_label[k];
        break;
      }
    }
    if (found < 0) {
      found = next++;
      reps.push_back(std::move(post));
      rep_label.push_back(found);
    }
    raw[x] = found;
  }
  return canonicalized(raw);
}

/// Exhaustively checks Theorems 2 and 3 (classical MSS <=> information
/// minimality) over all Bell(x_size) partitions. Guarded at x_size <= 12.
inline MSSReport verify_theorems(const JointPMF& j, double tol = kMssTol) {
  validate(j);
  if (j.x_size > kMaxEnumerationAlphabet)
    throw std::invalid_argument("verify_theorems: x alphabet larger than 12 symbols");

  MSSReport report;
  report.tol = tol;
  report.mss = construct_mss(j, tol);
  report.rate = statistic_rate(j, report.mss);

  const MarginalPMF px = j.marginal_x();
  std::vector<bool> support(j.x_size);
  for (int x = 0; x < j.x_size; ++x) support[x] = px.p[x] > 0.0;

  const double i_mx = mutual_information(j).value;
  double min_rate = std::numeric_limits<double>::infinity();
  for_each_partition(j.x_size, [&](const Partition& t) {
    const double i_mt = mutual_information(apply_statistic(j, t)).value;
    if (i_mx - i_mt <= tol) {
      const double rate = statistic_rate(j, t).value;
      report.all_sufficient_rates.emplace_back(t, rate);
      min_rate = std::min(min_rate, rate);
    }
  });

  report.theorem2_holds = report.rate.value <= min_rate + tol;

  // Theorem 3: all rate-minimal sufficient statistics must coincide with the
  // MSS, compared on the support only (Definition 2 is "almost surely").
  const Partition mss_on_support = restricted_to(report.mss, support);
  bool all_equal = true;
  bool near_tie = false;
  for (const auto& [t, rate] : report.all_sufficient_rates) {
    if (rate <= min_rate + tol) {
      if (!(restricted_to(t, support) == mss_on_support)) all_equal = false;
    } else if (rate <= min_rate + 10.0 * tol) {
      near_tie = true;  // borderline tie: flag rather than fail
    }
  }
  report.theorem3_holds = all_equal;
  report.flagged = near_tie;
  return report;
}

}  // namespace watervib
