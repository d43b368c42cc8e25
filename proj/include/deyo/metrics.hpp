#pragma once

// Evaluation summaries: group accuracies, risk-coverage curves with AURC,
// accuracy by entropy quartile, and the entropy x PLPD area partition.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deyo/errors.hpp"

namespace deyo {

struct EvalRecord {
  double confidence = 0.0;  // higher = more confident
  bool correct = false;
  double entropy = 0.0;
  double plpd = 0.0;
  int group_id = 0;
};

struct GroupAccuracy {
  int group_id = 0;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct GroupReport {
  std::vector<GroupAccuracy> groups;  // nonempty groups, ascending id
  double average = 0.0;               // overall sample accuracy
  double worst_group = 0.0;
  int worst_group_id = -1;
  std::vector<std::string> warnings;
};

/// Per-group accuracy, overall accuracy, and the minimum over nonempty groups.
/// Groups in `expected_groups` that received no records are reported in `warnings`.
inline GroupReport group_accuracies(std::span<const EvalRecord> records,
                                    std::span<const int> expected_groups = {}) {
  GroupReport rep;
  std::map<int, GroupAccuracy> by_group;
  std::size_t correct = 0;
  for (const auto& r : records) {
    auto& g = by_group[r.group_id];
    g.group_id = r.group_id;
    ++g.count;
    if (r.correct) {
      ++g.correct;
      ++correct;
    }
  }
  for (int id : expected_groups)
    if (!by_group.contains(id))
      rep.warnings.push_back("group " + std::to_string(id) + " is empty and was excluded");
  rep.average = records.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(records.size());
  rep.worst_group = records.empty() ? 0.0 : std::numeric_limits<double>::infinity();
  for (auto& [id, g] : by_group) {
    g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.count);
    if (g.accuracy < rep.worst_group) {
      rep.worst_group = g.accuracy;
      rep.worst_group_id = id;
    }
    rep.groups.push_back(g);
  }
  return rep;
}

enum class ConfidenceKey { stored, negative_entropy, plpd };

inline double confidence_of(const EvalRecord& r, ConfidenceKey key) noexcept {
  switch (key) {
    case ConfidenceKey::negative_entropy: return -r.entropy;
    case ConfidenceKey::plpd: return r.plpd;
    case ConfidenceKey::stored: break;
  }
  return r.confidence;
}

struct RCCurve {
  std::vector<double> coverage;  // k / N, k = 1..N
  std::vector<double> risk;      // error rate among the k most confident
  double aurc = 0.0;             // mean of risk over k
};

/// Risk-coverage curve. Records are ranked by confidence, highest first, ties
/// kept in input order; AURC is the unweighted mean of the N prefix risks.
inline RCCurve rc_curve(std::span<const EvalRecord> records,
                        ConfidenceKey key = ConfidenceKey::stored) {
  if (records.empty()) throw ConfigError("rc_curve: no records");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return confidence_of(records[a], key) > confidence_of(records[b], key);
  });
  RCCurve c;
  const std::size_t n = records.size();
  c.coverage.reserve(n);
  c.risk.reserve(n);
  std::size_t errors = 0;
  double sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (!records[order[k - 1]].correct) ++errors;
    const double risk = static_cast<double>(errors) / static_cast<double>(k);
    c.coverage.push_back(static_cast<double>(k) / static_cast<double>(n));
    c.risk.push_back(risk);
    sum += risk;
  }
  c.aurc = sum / static_cast<double>(n);
  return c;
}

/// Quantile with linear interpolation between order statistics (position q*(N-1)).
inline double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile: no values");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(values.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct QuartileBin {
  double lower = 0.0;
  double upper = 0.0;  // exclusive; +inf for the last bin
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // NaN when empty
};

struct QuartileReport {
  double q1 = 0.0, q2 = 0.0, q3 = 0.0;
  std::array<QuartileBin, 4> bins{};
  /// All entropies equal: every record lands in the last bin.
  bool degenerate = false;
};

/// Accuracy over the entropy intervals [0,Q1), [Q1,Q2), [Q2,Q3), [Q3,inf).
inline QuartileReport entropy_quartile_accuracy(std::span<const EvalRecord> records) {
  if (records.size() < 4) throw ConfigError("entropy_quartile_accuracy: need at least 4 records");
  std::vector<double> ent;
  ent.reserve(records.size());
  for (const auto& r : records) ent.push_back(r.entropy);
  QuartileReport rep;
  rep.q1 = quantile_linear(ent, 0.25);
  rep.q2 = quantile_linear(ent, 0.50);
  rep.q3 = quantile_linear(ent, 0.75);
  const auto [mn, mx] = std::minmax_element(ent.begin(), ent.end());
  rep.degenerate = *mn == *mx;
  const std::array<double, 5> edges{0.0, rep.q1, rep.q2, rep.q3,
                                    std::numeric_limits<double>::infinity()};
  for (std::size_t b = 0; b < 4; ++b) {
    rep.bins[b].lower = edges[b];
    rep.bins[b].upper = edges[b + 1];
  }
  for (const auto& r : records) {
    std::size_t b = 3;
    for (std::size_t k = 0; k < 3; ++k) {
      if (r.entropy < edges[k + 1]) {
        b = k;
        break;
      }
    }
    ++rep.bins[b].count;
    if (r.correct) ++rep.bins[b].correct;
  }
  for (auto& bin : rep.bins)
    bin.accuracy = bin.count == 0 ? std::numeric_limits<double>::quiet_NaN()
                                  : static_cast<double>(bin.correct) / static_cast<double>(bin.count);
  return rep;
}

/// Entropy x PLPD quadrant:
///   1 = high entropy / low PLPD,  2 = high entropy / high PLPD,
///   3 = low entropy / low PLPD,   4 = low entropy / high PLPD.
/// Low entropy means entropy < tau_ent; high PLPD means plpd > tau_plpd.
/// Returns 0 when PLPD was not measured (NaN).
inline int area_of(double entropy, double plpd, double tau_ent, double tau_plpd) noexcept {
  if (std::isnan(plpd)) return 0;
  const bool low_ent = entropy < tau_ent;
  const bool high_plpd = plpd > tau_plpd;
  if (!low_ent) return high_plpd ? 2 : 1;
  return high_plpd ? 4 : 3;
}

struct AreaStats {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;  // NaN when empty
  double share = 0.0;
};

struct AreaReport {
  std::array<AreaStats, 4> areas{};  // index 0 is Area 1
};

inline AreaReport area_partition(std::span<const EvalRecord> records, double tau_ent,
                                  double tau_plpd) {
  AreaReport rep;
  for (const auto& r : records) {
    const int a = area_of(r.entropy, r.plpd, tau_ent, tau_plpd);
    if (a == 0) throw NumericInputError("area_partition: record without a PLPD value");
    auto& s = rep.areas[static_cast<std::size_t>(a - 1)];
    ++s.count;
    if (r.correct) ++s.correct;
  }
  for (auto& s : rep.areas) {
    s.accuracy = s.count == 0 ? std::numeric_limits<double>::quiet_NaN()
                              : static_cast<double>(s.correct) / static_cast<double>(s.count);
    s.share = records.empty() ? 0.0 : static_cast<double>(s.count) / static_cast<double>(records.size());
  }
  return rep;
}

}  // namespace deyo
