#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pmmrec/data.hpp"
#include "pmmrec/random.hpp"
#include "pmmrec/transfer.hpp"

namespace pmmrec {

inline constexpr std::array<std::size_t, 3> kMetricCutoffs = {10, 20, 50};

/// 1 + number of other items scoring at least as high as the target, so a
/// tie always ranks the target below its equals.
inline std::size_t rank_of_target(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) {
    throw std::out_of_range("rank_of_target: target " + std::to_string(target) +
                            " outside a catalog of " + std::to_string(scores.size()));
  }
  const double s = scores[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != target && scores[j] >= s) ++rank;
  return rank;
}

struct RankingMetrics {
  double hr = 0.0;    // fraction in [0, 1]
  double ndcg = 0.0;  // fraction in [0, 1]
};

inline RankingMetrics ranking_metrics(const std::vector<std::size_t>& ranks, std::size_t k) {
  if (k < 1) throw std::invalid_argument("ranking_metrics: k must be >= 1");
  RankingMetrics m;
  if (ranks.empty()) return m;
  for (std::size_t r : ranks) {
    if (r < 1) throw std::invalid_argument("ranking_metrics: ranks are 1-based");
    if (r <= k) {
      m.hr += 1.0;
      m.ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
  }
  m.hr /= static_cast<double>(ranks.size());
  m.ndcg /= static_cast<double>(ranks.size());
  return m;
}

/// HR@k and NDCG@k in percent for k in {10, 20, 50}.
struct MetricsReport {
  std::string dataset;
  std::string mode;
  std::string phase;
  std::size_t users = 0;
  std::array<double, 3> hr{};
  std::array<double, 3> ndcg{};

  double hr_at(std::size_t k) const { return hr[cutoff_slot(k)]; }
  double ndcg_at(std::size_t k) const { return ndcg[cutoff_slot(k)]; }

  static std::size_t cutoff_slot(std::size_t k) {
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i)
      if (kMetricCutoffs[i] == k) return i;
    throw std::invalid_argument("no metric reported at k=" + std::to_string(k));
  }

  static MetricsReport from_ranks(const std::vector<std::size_t>& ranks) {
    MetricsReport r;
    r.users = ranks.size();
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i) {
      const auto m = ranking_metrics(ranks, kMetricCutoffs[i]);
      r.hr[i] = 100.0 * m.hr;
      r.ndcg[i] = 100.0 * m.ndcg;
    }
    return r;
  }

  std::string table() const {
    std::ostringstream os;
    os << "dataset=" << dataset << " mode=" << mode << " phase=" << phase << " users=" << users
       << '\n';
    os << std::left << std::setw(8) << "k" << std::right << std::setw(10) << "HR@k"
       << std::setw(10) << "NDCG@k" << '\n';
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i) {
      os << std::left << std::setw(8) << kMetricCutoffs[i] << std::right << std::fixed
         << std::setprecision(2) << std::setw(10) << hr[i] << std::setw(10) << ndcg[i] << '\n';
    }
    return os.str();
  }

  nlohmann::json json() const {
    nlohmann::json j;
    j["dataset"] = dataset;
    j["mode"] = mode;
    j["phase"] = phase;
    j["users"] = users;
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i) {
      j["HR@" + std::to_string(kMetricCutoffs[i])] = hr[i];
      j["NDCG@" + std::to_string(kMetricCutoffs[i])] = ndcg[i];
    }
    return j;
  }
};

/// Maps a batch of prefixes to a [U, N] score matrix in catalog order.
using Scorer = std::function<Tensor(const std::vector<std::vector<ItemId>>&)>;

struct EvalOptions {
  std::size_t batch = 64;
  std::size_t threads = 1;
  /// Drop items of the user's own prefix from the candidates (off: the whole
  /// catalog is ranked).
  bool exclude_history = false;
};

/// Rank of each target given its prefix. Users are split into fixed chunks;
/// each rank lands in its own slot, so the thread count never changes results.
inline std::vector<std::size_t> rank_targets(const Scorer& scorer, const Catalog& catalog,
                                             const std::vector<std::vector<ItemId>>& prefixes,
                                             const std::vector<ItemId>& targets,
                                             const EvalOptions& opt = {}) {
  if (prefixes.size() != targets.size()) {
    throw std::invalid_argument("rank_targets: one target per prefix required");
  }
  if (catalog.empty()) throw std::invalid_argument("rank_targets: empty catalog");
  const std::size_t batch = std::max<std::size_t>(1, opt.batch);
  std::vector<std::size_t> ranks(prefixes.size(), 0);
  auto run_chunk = [&](std::size_t start) {
    const std::size_t end = std::min(prefixes.size(), start + batch);
    std::vector<std::vector<ItemId>> part(prefixes.begin() + static_cast<std::ptrdiff_t>(start),
                                          prefixes.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor scores = scorer(part);
    if (scores.rank() != 2 || scores.dim(0) != part.size() || scores.dim(1) != catalog.size()) {
      throw ShapeError("scorer returned " + shape_string(scores.shape()) + ", expected [" +
                       std::to_string(part.size()) + ", " + std::to_string(catalog.size()) + "]");
    }
    const std::size_t n = catalog.size();
    for (std::size_t u = 0; u < part.size(); ++u) {
      std::span<double> row(scores.data() + u * n, n);
      const std::size_t t = catalog.slot(targets[start + u]);
      if (opt.exclude_history) {
        for (ItemId id : part[u]) {
          const std::size_t s = catalog.slot(id);
          if (s != t) row[s] = -std::numeric_limits<double>::infinity();
        }
      }
      ranks[start + u] = rank_of_target(row, t);
    }
  };
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < prefixes.size(); s += batch) starts.push_back(s);
  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, starts.size()));
  if (threads == 1) {
    for (std::size_t s : starts) run_chunk(s);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < starts.size(); i += threads) run_chunk(starts[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return ranks;
}

/// Scores from a model through a prebuilt item index.
inline Scorer model_scorer(Model& model, const ItemIndex& index) {
  return [&model, &index](const std::vector<std::vector<ItemId>>& prefixes) {
    return score_prefixes(model, index, prefixes);
  };
}

/// Content-blind baseline: uniform scores seeded by the prefix itself, so
/// results do not depend on batching or threads.
inline Scorer random_scorer(std::size_t catalog_size, std::uint64_t seed) {
  return [catalog_size, seed](const std::vector<std::vector<ItemId>>& prefixes) {
    Tensor s(Shape{prefixes.size(), catalog_size});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t r = 0; r < prefixes.size(); ++r) {
      const auto& p = prefixes[r];
      const auto h = crc32(0L, reinterpret_cast<const Bytef*>(p.data()),
                           static_cast<uInt>(p.size() * sizeof(ItemId)));
      Rng rng(derive_seed(seed, "random_scorer", h));
      for (std::size_t c = 0; c < catalog_size; ++c) s.at(r, c) = u(rng);
    }
    return s;
  };
}

enum class EvalPhase { valid, test };

inline std::string_view to_string(EvalPhase p) { return p == EvalPhase::valid ? "valid" : "test"; }

/// Leave-one-out prefixes: train items for validation, train + validation
/// item for test.
inline void leave_one_out(const SplitDataset& split, EvalPhase phase,
                          std::vector<std::vector<ItemId>>& prefixes, std::vector<ItemId>& targets) {
  prefixes.clear();
  targets.clear();
  for (const auto& u : split.users) {
    std::vector<ItemId> p = u.train;
    if (phase == EvalPhase::test) p.push_back(u.valid);
    prefixes.push_back(std::move(p));
    targets.push_back(phase == EvalPhase::valid ? u.valid : u.test);
  }
}

inline MetricsReport evaluate(const Scorer& scorer, const SplitDataset& split, EvalPhase phase,
                              const EvalOptions& opt = {}) {
  std::vector<std::vector<ItemId>> prefixes;
  std::vector<ItemId> targets;
  leave_one_out(split, phase, prefixes, targets);
  auto r = MetricsReport::from_ranks(rank_targets(scorer, split.catalog, prefixes, targets, opt));
  r.phase = std::string(to_string(phase));
  return r;
}

/// Full-catalog leave-one-out evaluation of a model.
inline MetricsReport evaluate(Model& model, const SplitDataset& split, EvalPhase phase,
                              const EvalOptions& opt = {}) {
  const ItemIndex index = build_item_index(model, split.catalog);
  return evaluate(model_scorer(model, index), split, phase, opt);
}

inline MetricsReport evaluate_cold_start(const Scorer& scorer, const SplitDataset& split,
                                         std::size_t threshold = 10, const EvalOptions& opt = {}) {
  const auto samples = cold_item_subsequences(split, threshold);
  MetricsReport r;
  r.phase = "cold";
  if (samples.empty()) return r;
  std::vector<std::vector<ItemId>> prefixes;
  std::vector<ItemId> targets;
  for (const auto& s : samples) {
    prefixes.push_back(s.prefix);
    targets.push_back(s.target);
  }
  r = MetricsReport::from_ranks(rank_targets(scorer, split.catalog, prefixes, targets, opt));
  r.phase = "cold";
  return r;
}

inline MetricsReport evaluate_cold_start(Model& model, const SplitDataset& split,
                                         std::size_t threshold = 10, const EvalOptions& opt = {}) {
  const ItemIndex index = build_item_index(model, split.catalog);
  return evaluate_cold_start(model_scorer(model, index), split, threshold, opt);
}

/// Next-item metrics over every transition inside the training sequences
/// (prefix train[0..l) predicts train[l], l ≥ 1).
inline MetricsReport evaluate_training_fit(Model& model, const SplitDataset& split,
                                           const EvalOptions& opt = {}) {
  std::vector<std::vector<ItemId>> prefixes;
  std::vector<ItemId> targets;
  for (const auto& u : split.users) {
    for (std::size_t l = 1; l < u.train.size(); ++l) {
      prefixes.emplace_back(u.train.begin(), u.train.begin() + static_cast<std::ptrdiff_t>(l));
      targets.push_back(u.train[l]);
    }
  }
  const ItemIndex index = build_item_index(model, split.catalog);
  auto r = MetricsReport::from_ranks(
      rank_targets(model_scorer(model, index), split.catalog, prefixes, targets, opt));
  r.phase = "train";
  return r;
}

}  // namespace pmmrec
