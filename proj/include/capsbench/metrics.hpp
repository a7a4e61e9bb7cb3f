#pragma once

#include <cstddef>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace capsbench {

// SA / TA / TCA counting. All ties break toward the lower index so runs are
// reproducible bit for bit.

// Indices of the two largest entries, p[first] >= p[second].
template <typename T>
std::pair<int, int> top2(const T* p, int m) {
  if (m < 2) throw std::invalid_argument("top2: need at least 2 probabilities");
  int a = 0, b = 1;
  if (p[1] > p[0]) { a = 1; b = 0; }
  for (int i = 2; i < m; ++i) {
    if (p[i] > p[a]) {
      b = a;
      a = i;
    } else if (p[i] > p[b]) {
      b = i;
    }
  }
  return {a, b};
}

template <typename T>
std::pair<int, int> top2(const std::vector<T>& p) {
  return top2(p.data(), static_cast<int>(p.size()));
}

// argmax == label, argmax ties to the lower index.
template <typename T>
bool score_single(const T* p, int m, int label) {
  if (label < 0 || label >= m)
    throw std::invalid_argument("score_single: label " + std::to_string(label) + " out of range");
  int a = 0;
  for (int i = 1; i < m; ++i)
    if (p[i] > p[a]) a = i;
  return a == label;
}

struct PairScore {
  bool ta = false;   // top-2 index set equals the truth set
  bool tca = false;  // ta and both predicted probabilities >= 0.5
};

template <typename T>
PairScore score_pair(const T* p, int m, int label_a, int label_b) {
  if (label_a == label_b) throw std::invalid_argument("score_pair: labels must differ");
  const auto [x, y] = top2(p, m);
  PairScore s;
  s.ta = (x == label_a && y == label_b) || (x == label_b && y == label_a);
  s.tca = s.ta && p[x] >= T(0.5) && p[y] >= T(0.5);
  return s;
}

struct MetricsRecord {
  size_t sa_correct = 0, sa_total = 0;
  size_t ta_correct = 0, ta_total = 0;
  size_t tca_correct = 0;  // tca_total == ta_total

  void add_single(bool hit) {
    ++sa_total;
    sa_correct += hit ? 1 : 0;
  }
  void add_pair(const PairScore& s) {
    ++ta_total;
    ta_correct += s.ta ? 1 : 0;
    tca_correct += s.tca ? 1 : 0;
  }
  void merge(const MetricsRecord& o) {
    sa_correct += o.sa_correct;
    sa_total += o.sa_total;
    ta_correct += o.ta_correct;
    ta_total += o.ta_total;
    tca_correct += o.tca_correct;
  }

  // Rates are absent when nothing was counted.
  std::optional<double> sa() const {
    if (sa_total == 0) return std::nullopt;
    return 100.0 * static_cast<double>(sa_correct) / static_cast<double>(sa_total);
  }
  std::optional<double> ta() const {
    if (ta_total == 0) return std::nullopt;
    return 100.0 * static_cast<double>(ta_correct) / static_cast<double>(ta_total);
  }
  std::optional<double> tca() const {
    if (ta_total == 0) return std::nullopt;
    return 100.0 * static_cast<double>(tca_correct) / static_cast<double>(ta_total);
  }
};

inline std::string format_rate(const std::optional<double>& r) {
  if (!r) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *r);
  return buf;
}

}  // namespace capsbench
