#include "cctr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "json.hpp"

#include "cctr/error.hpp"

namespace cctr::metrics {

TauComponents& TauComponents::operator+=(const TauComponents& o) {
  concordant += o.concordant;
  discordant += o.discordant;
  ties_s += o.ties_s;
  ties_y += o.ties_y;
  return *this;
}

TauComponents count_pairs(std::span<const double> s, std::span<const double> y) {
  if (s.size() != y.size()) {
    throw DimensionError("kendall_tau: " + std::to_string(s.size()) + " scores vs " +
                         std::to_string(y.size()) + " labels");
  }
  TauComponents c;
  const std::size_t n = s.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double ds = s[i] - s[j];
      const double dy = y[i] - y[j];
      if (ds == 0.0 && dy == 0.0) continue;
      if (ds == 0.0) {
        ++c.ties_s;
      } else if (dy == 0.0) {
        ++c.ties_y;
      } else if ((ds > 0.0) == (dy > 0.0)) {
        ++c.concordant;
      } else {
        ++c.discordant;
      }
    }
  return c;
}

TauResult kendall_tau(std::span<const double> s, std::span<const double> y) {
  TauResult r;
  r.components = count_pairs(s, y);
  const auto& c = r.components;
  const double pq = static_cast<double>(c.concordant + c.discordant);
  const double denom = std::sqrt((pq + static_cast<double>(c.ties_s)) *
                                 (pq + static_cast<double>(c.ties_y)));
  if (denom == 0.0) {
    throw UndefinedTauError("kendall_tau: zero denominator (n=" + std::to_string(s.size()) + ")");
  }
  r.tau = (static_cast<double>(c.concordant) - static_cast<double>(c.discordant)) / denom;
  return r;
}

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) +
                         " scores vs " + std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!labels[order[k]]) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) return std::nullopt;
  return acc / static_cast<double>(hits);
}

MapResult mean_average_precision(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels,
                                 std::span<const std::size_t> groups) {
  if (scores.size() != labels.size() || scores.size() != groups.size()) {
    throw DimensionError("mean_average_precision: scores, labels and groups differ in length");
  }
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<std::uint8_t>>> by_group;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    auto& [s, l] = by_group[groups[k]];
    s.push_back(scores[k]);
    l.push_back(labels[k]);
  }
  MapResult r;
  double total = 0.0;
  for (const auto& [g, sl] : by_group) {
    const auto ap = average_precision(sl.first, sl.second);
    if (!ap) {
      ++r.skipped;
      continue;
    }
    total += *ap;
    ++r.groups;
  }
  if (r.groups > 0) r.map = total / static_cast<double>(r.groups);
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["tau"] = tau;
  j["P"] = components.concordant;
  j["Q"] = components.discordant;
  j["T"] = components.ties_s;
  j["U"] = components.ties_y;
  j["map"] = map ? nlohmann::ordered_json(*map) : nlohmann::ordered_json(nullptr);
  j["windows"] = windows;
  j["skipped_windows"] = skipped_windows;
  j["avg_s_over_y"] = avg_s_over_y;
  return j.dump(2);
}

}  // namespace cctr::metrics
