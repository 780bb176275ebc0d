#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace watervib {

/// A partition of the alphabet {0..n-1}, i.e. a deterministic statistic
/// T(x) = block_of[x]. Block labels are canonical: contiguous from 0 in order
/// of first appearance, which makes partition equality a plain vector compare.
struct Partition {
  std::vector<int> block_of;
  int n_blocks = 0;

  int size() const { return static_cast<int>(block_of.size()); }

  bool operator==(const Partition& o) const {
    return n_blocks == o.n_blocks && block_of == o.block_of;
  }

  static Partition identity(int n) {
    Partition p;
    p.block_of.resize(n);
    for (int i = 0; i < n; ++i) p.block_of[i] = i;
    p.n_blocks = n;
    return p;
  }

  static Partition single_block(int n) {
    Partition p;
    p.block_of.assign(n, 0);
    p.n_blocks = n > 0 ? 1 : 0;
    return p;
  }
};

/// Relabels arbitrary block ids into canonical form (first appearance order).
inline Partition canonicalized(const std::vector<int>& raw) {
  Partition p;
  p.block_of.resize(raw.size());
  std::vector<int> remap;  // old label -> new label, discovered lazily
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const int old_label = raw[i];
    if (old_label < 0) throw std::invalid_argument("partition: negative block label");
    int found = -1;
    for (std::size_t k = 0; k < remap.size(); ++k) {
      if (remap[k] == old_label) {
        found = static_cast<int>(k);
        break;
      }
    }
    if (found < 0) {
      found = static_cast<int>(remap.size());
      remap.push_back(old_label);
    }
    p.block_of[i] = found;
  }
  p.n_blocks = static_cast<int>(remap.size());
  return p;
}

inline void validate(const Partition& p) {
  int seen = 0;
  for (int b : p.block_of) {
    if (b < 0 || b >= p.n_blocks) throw std::invalid_argument("partition: block index out of range");
    if (b > seen) throw std::invalid_argument("partition: labels not canonical");
    if (b == seen) ++seen;
  }
  if (seen != p.n_blocks)
    throw std::invalid_argument("partition: n_blocks does not match labels");
}

/// The partition induced on the sub-alphabet where keep[x] is true,
/// canonically relabeled. Used to compare statistics "almost surely",
/// ignoring zero-probability symbols.
inline Partition restricted_to(const Partition& p, const std::vector<bool>& keep) {
  std::vector<int> raw;
  raw.reserve(p.block_of.size());
  for (std::size_t i = 0; i < p.block_of.size(); ++i)
    if (keep[i]) raw.push_back(p.block_of[i]);
  return canonicalized(raw);
}

inline constexpr int kMaxEnumerationAlphabet = 12;

inline std::uint64_t bell_number(int n) {
  // Bell triangle; n <= 25 fits in 64 bits, far beyond the n <= 12 guard.
  std::vector<std::uint64_t> row{1};
  for (int i = 1; i <= n; ++i) {
    std::vector<std::uint64_t> next(i + 1);
    next[0] = row.back();
    for (int j = 1; j <= i; ++j) next[j] = next[j - 1] + row[j - 1];
    row.swap(next);
  }
  return row[0];
}

/// Visits every canonical partition of {0..n-1} exactly once, as restricted
/// growth strings: a[0] = 0 and a[i] <= 1 + max(a[0..i-1]).
inline void for_each_partition(int n, const std::function<void(const Partition&)>& fn) {
  if (n < 1 || n > kMaxEnumerationAlphabet)
    throw std::invalid_argument("for_each_partition: alphabet size must be in [1, 12]");
  Partition p;
  p.block_of.assign(n, 0);
  std::vector<int> maxima(n, 0);  // maxima[i] = max(a[0..i])
  int i = n - 1;
  while (true) {
    p.n_blocks = maxima[n - 1] + 1;
    fn(p);
    // advance the restricted growth string
    i = n - 1;
    while (i > 0 && p.block_of[i] == maxima[i - 1] + 1) --i;
    if (i == 0) break;
    ++p.block_of[i];
    maxima[i] = std::max(maxima[i - 1], p.block_of[i]);
    for (int k = i + 1; k < n; ++k) {
      p.block_of[k] = 0;
      maxima[k] = maxima[i];
    }
  }
}

/// Materializes all Bell(n) canonical partitions. Guarded at n <= 12.
inline std::vector<Partition> enumerate_partitions(int n) {
  std::vector<Partition> out;
  out.reserve(static_cast<std::size_t>(bell_number(n)));
  for_each_partition(n, [&](const Partition& p) { out.push_back(p); });
  return out;
}

}  // namespace watervib
