#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace cctr::metrics {

// Pairs tied in both vectors are counted nowhere.
struct TauComponents {
  std::uint64_t concordant = 0;  // P
  std::uint64_t discordant = 0;  // Q
  std::uint64_t ties_s = 0;      // T: tied only in s
  std::uint64_t ties_y = 0;      // U: tied only in y

  TauComponents& operator+=(const TauComponents& o);
};

struct TauResult {
  double tau = 0.0;
  TauComponents components;
};

// Exact O(n^2) pair count; tau = (P - Q) / sqrt((P+Q+T)(P+Q+U)).
TauComponents count_pairs(std::span<const double> s, std::span<const double> y);
// Throws UndefinedTauError when the denominator is zero.
TauResult kendall_tau(std::span<const double> s, std::span<const double> y);

// Average precision of one ranked list: descending score, ties in original
// order. nullopt when the list has no positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels);

struct MapResult {
  std::optional<double> map;   // nullopt when no group had a positive
  std::size_t groups = 0;      // groups that contributed
  std::size_t skipped = 0;     // groups without positives
};

// groups[k] names the group of element k.
MapResult mean_average_precision(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels,
                                 std::span<const std::size_t> groups);

// Evaluation summary: per-window tau averaged over windows with a defined
// tau, pooled P/Q/T/U over those windows, and mAP.
struct MetricsReport {
  double tau = 0.0;
  TauComponents components;
  std::optional<double> map;
  std::size_t windows = 0;
  std::size_t skipped_windows = 0;
  double avg_s_over_y = 0.0;

  // {"tau", "P", "Q", "T", "U", "map", ...} with map null when undefined.
  std::string to_json() const;
};

}  // namespace cctr::metrics
