#pragma once

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "watervib/partition.hpp"

namespace watervib {

// Exact information quantities over small discrete alphabets. Everything is
// in nats. Convention: 0 * ln 0 := 0, so sparse joints are safe.

inline constexpr double kPmfTol = 1e-12;        // mass-sum validation
inline constexpr double kInfoClampTol = 1e-12;  // negative-roundoff clamp

/// An information value in nats.
struct Nats {
  double value = 0.0;
};

/// Clamps tiny negative roundoff to zero; anything more negative is a bug.
inline Nats as_nats(double v) {
  if (v < -kInfoClampTol)
    throw std::runtime_error("information quantity below -1e-12: " + std::to_string(v));
  return Nats{v < 0.0 ? 0.0 : v};
}

struct MarginalPMF {
  std::vector<double> p;

  int size() const { return static_cast<int>(p.size()); }
};

inline void validate(const MarginalPMF& m) {
  if (m.p.empty()) throw std::invalid_argument("pmf: empty support");
  double sum = 0.0;
  for (double v : m.p) {
    if (!(v >= 0.0)) throw std::invalid_argument("pmf: negative or NaN mass");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kPmfTol)
    throw std::invalid_argument("pmf: mass sums to " + std::to_string(sum));
}

/// Joint distribution p(m, x) over message symbols m and observation symbols x,
/// stored dense row-major (m_size x x_size).
struct JointPMF {
  int m_size = 0;
  int x_size = 0;
  std::vector<double> p;

  double at(int m, int x) const { return p[static_cast<std::size_t>(m) * x_size + x]; }
  double& at(int m, int x) { return p[static_cast<std::size_t>(m) * x_size + x]; }

  MarginalPMF marginal_m() const {
    MarginalPMF out;
    out.p.assign(m_size, 0.0);
    for (int m = 0; m < m_size; ++m)
      for (int x = 0; x < x_size; ++x) out.p[m] += at(m, x);
    return out;
  }

  MarginalPMF marginal_x() const {
    MarginalPMF out;
    out.p.assign(x_size, 0.0);
    for (int m = 0; m < m_size; ++m)
      for (int x = 0; x < x_size; ++x) out.p[x] += at(m, x);
    return out;
  }
};

inline constexpr int kMaxAlphabet = 64;

inline void validate(const JointPMF& j) {
  if (j.m_size < 1 || j.x_size < 1) throw std::invalid_argument("joint: empty alphabet");
  if (j.m_size > kMaxAlphabet || j.x_size > kMaxAlphabet)
    throw std::invalid_argument("joint: alphabet larger than 64 symbols");
  if (j.p.size() != static_cast<std::size_t>(j.m_size) * j.x_size)
    throw std::invalid_argument("joint: size mismatch");
  double sum = 0.0;
  for (double v : j.p) {
    if (!(v >= 0.0)) throw std::invalid_argument("joint: negative or NaN mass");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kPmfTol)
    throw std::invalid_argument("joint: mass sums to " + std::to_string(sum));
}

/// Three-way joint p(m, x, t), used for conditional mutual information.
struct Joint3PMF {
  int m_size = 0;
  int x_size = 0;
  int t_size = 0;
  std::vector<double> p;

  double at(int m, int x, int t) const {
    return p[(static_cast<std::size_t>(m) * x_size + x) * t_size + t];
  }
  double& at(int m, int x, int t) {
    return p[(static_cast<std::size_t>(m) * x_size + x) * t_size + t];
  }
};

inline void validate(const Joint3PMF& j) {
  if (j.m_size < 1 || j.x_size < 1 || j.t_size < 1)
    throw std::invalid_argument("joint3: empty alphabet");
  if (j.p.size() != static_cast<std::size_t>(j.m_size) * j.x_size * j.t_size)
    throw std::invalid_argument("joint3: size mismatch");
  double sum = 0.0;
  for (double v : j.p) {
    if (!(v >= 0.0)) throw std::invalid_argument("joint3: negative or NaN mass");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kPmfTol)
    throw std::invalid_argument("joint3: mass sums to " + std::to_string(sum));
}

namespace detail {
inline double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }
}  // namespace detail

/// H(p) = -sum p ln p, in nats.
inline Nats entropy(const MarginalPMF& m) {
  validate(m);
  double h = 0.0;
  for (double v : m.p) h -= detail::plogp(v);
  return as_nats(h);
}

/// I(M;X) = sum p(m,x) ln [ p(m,x) / (p(m) p(x)) ].
inline Nats mutual_information(const JointPMF& j) {
  validate(j);
  const MarginalPMF pm = j.marginal_m();
  const MarginalPMF px = j.marginal_x();
  double i = 0.0;
  for (int m = 0; m < j.m_size; ++m)
    for (int x = 0; x < j.x_size; ++x) {
      const double pmx = j.at(m, x);
      if (pmx > 0.0) i += pmx * std::log(pmx / (pm.p[m] * px.p[x]));
    }
  return as_nats(i);
}

/// I(M;X|T) = E_t[ D_KL( p(m,x|t) || p(m|t) p(x|t) ) ].
inline Nats conditional_mutual_information(const Joint3PMF& j) {
  validate(j);
  std::vector<double> pt(j.t_size, 0.0);
  std::vector<double> pmt(static_cast<std::size_t>(j.m_size) * j.t_size, 0.0);
  std::vector<double> pxt(static_cast<std::size_t>(j.x_size) * j.t_size, 0.0);
  for (int m = 0; m < j.m_size; ++m)
    for (int x = 0; x < j.x_size; ++x)
      for (int t = 0; t < j.t_size; ++t) {
        const double v = j.at(m, x, t);
        pt[t] += v;
        pmt[static_cast<std::size_t>(m) * j.t_size + t] += v;
        pxt[static_cast<std::size_t>(x) * j.t_size + t] += v;
      }
  double i = 0.0;
  for (int m = 0; m < j.m_size; ++m)
    for (int x = 0; x < j.x_size; ++x)
      for (int t = 0; t < j.t_size; ++t) {
        const double v = j.at(m, x, t);
        if (v > 0.0) {
          const double a = pmt[static_cast<std::size_t>(m) * j.t_size + t];
          const double b = pxt[static_cast<std::size_t>(x) * j.t_size + t];
          i += v * std::log(v * pt[t] / (a * b));
        }
      }
  return as_nats(i);
}

/// D_KL(p || q). Requires q(i) > 0 wherever p(i) > 0.
inline Nats kl_divergence(const MarginalPMF& p, const MarginalPMF& q) {
  validate(p);
  validate(q);
  if (p.size() != q.size()) throw std::invalid_argument("kl: support size mismatch");
  double d = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    if (p.p[i] > 0.0) {
      if (q.p[i] <= 0.0)
        throw std::invalid_argument("kl: q has zero mass on the support of p");
      d += p.p[i] * std::log(p.p[i] / q.p[i]);
    }
  }
  return as_nats(d);
}

/// Push-forward of the joint through a deterministic statistic:
/// p(m, t) = sum over the x-block of t of p(m, x).
inline JointPMF apply_statistic(const JointPMF& j, const Partition& t) {
  validate(j);
  validate(t);
  if (t.size() != j.x_size)
    throw std::invalid_argument("apply_statistic: partition does not cover the X alphabet");
  JointPMF out;
  out.m_size = j.m_size;
  out.x_size = t.n_blocks;
  out.p.assign(static_cast<std::size_t>(out.m_size) * out.x_size, 0.0);
  for (int m = 0; m < j.m_size; ++m)
    for (int x = 0; x < j.x_size; ++x) out.at(m, t.block_of[x]) += j.at(m, x);
  return out;
}

/// The joint p(m, x, t) with t = T(x) deterministic; substrate for the chain
/// identity I(M;X) = I(M;T) + I(M;X|T).
inline Joint3PMF joint_with_statistic(const JointPMF& j, const Partition& t) {
  validate(j);
  validate(t);
  if (t.size() != j.x_size)
    throw std::invalid_argument("joint_with_statistic: partition does not cover the X alphabet");
  Joint3PMF out;
  out.m_size = j.m_size;
  out.x_size = j.x_size;
  out.t_size = t.n_blocks;
  out.p.assign(static_cast<std::size_t>(j.m_size) * j.x_size * t.n_blocks, 0.0);
  for (int m = 0; m < j.m_size; ++m)
    for (int x = 0; x < j.x_size; ++x) out.at(m, x, t.block_of[x]) = j.at(m, x);
  return out;
}

// --- plain-text serialization -------------------------------------------
// First line "m_size x_size", then m_size rows of x_size decimal
// probabilities. Used by the mss-verify and ib-curve subcommands.

inline void write_joint(std::ostream& os, const JointPMF& j) {
  validate(j);
  os << j.m_size << ' ' << j.x_size << '\n';
  os.precision(17);
  for (int m = 0; m < j.m_size; ++m) {
    for (int x = 0; x < j.x_size; ++x) {
      if (x) os << ' ';
      os << j.at(m, x);
    }
    os << '\n';
  }
}

inline JointPMF read_joint(std::istream& is) {
  JointPMF j;
  if (!(is >> j.m_size >> j.x_size))
    throw std::runtime_error("joint file: missing 'm_size x_size' header");
  if (j.m_size < 1 || j.x_size < 1)
    throw std::runtime_error("joint file: header sizes must be positive");
  j.p.resize(static_cast<std::size_t>(j.m_size) * j.x_size);
  for (double& v : j.p)
    if (!(is >> v)) throw std::runtime_error("joint file: truncated probability matrix");
  validate(j);
  return j;
}

inline JointPMF parse_joint(const std::string& text) {
  std::istringstream is(text);
  return read_joint(is);
}

}  // namespace watervib
