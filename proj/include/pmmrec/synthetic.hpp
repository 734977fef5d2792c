#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmmrec/data.hpp"
#include "pmmrec/random.hpp"

namespace pmmrec {

/// Source and target share styles, vocabulary bands, patch means and the
/// style chain; only their items differ.
struct SyntheticConfig {
  std::size_t n_users = 200;
  std::size_t n_items = 50;
  std::size_t target_users = 50;
  std::size_t target_items = 50;
  std::size_t L_min = 5;
  std::size_t L_max = 20;
  std::size_t vocab_size = 1000;
  std::size_t tokens_per_item = 8;
  std::size_t q = 4;
  std::size_t patch_dim = 12;
  std::size_t n_latent_styles = 4;
  double transition_noise = 0.0;
  /// Zipf exponent for item popularity within a style (0 = uniform).
  double popularity_skew = 1.0;
  /// Successor styles per style; 1 makes the chain deterministic.
  std::size_t branching = 1;
  /// Spread of per-item patch offsets around the style mean.
  double item_spread = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw std::invalid_argument("synthetic config: " + what);
    };
    need(n_latent_styles >= 2, "n_latent_styles must be >= 2");
    need(transition_noise >= 0.0 && transition_noise <= 1.0, "transition_noise must lie in [0, 1]");
    need(n_users > 0 && n_items > 0, "n_users and n_items must be positive");
    need(n_items >= n_latent_styles && target_items >= n_latent_styles,
         "every style needs at least one item");
    need(L_min >= 1 && L_min <= L_max, "need 1 <= L_min <= L_max");
    need(vocab_size >= n_latent_styles + 1, "vocab_size too small for one band per style");
    need(tokens_per_item >= 1 && q >= 1 && patch_dim >= 1, "item content sizes must be positive");
    need(branching >= 1 && branching <= n_latent_styles, "branching must lie in [1, n_latent_styles]");
    need(popularity_skew >= 0.0, "popularity_skew must be >= 0");
    need(item_spread >= 0.0, "item_spread must be >= 0");
  }
};

struct SyntheticData {
  Dataset source;
  Dataset target;
  std::vector<std::vector<double>> style_transitions;  // row-stochastic
  std::vector<std::size_t> source_styles;              // per source item, catalog order
  std::vector<std::size_t> target_styles;
};

namespace detail {

struct StyleWorld {
  std::size_t styles = 0;
  std::vector<std::vector<double>> transitions;
  std::vector<std::vector<double>> patch_means;
  std::vector<std::pair<std::int32_t, std::int32_t>> bands;  // [lo, hi] token ids
};

inline StyleWorld make_world(const SyntheticConfig& cfg) {
  StyleWorld w;
  w.styles = cfg.n_latent_styles;
  Rng rng(derive_seed(cfg.seed, "synthetic.world"));
  // Token ids 1..vocab_size-1 split into contiguous bands (0 is padding).
  const std::size_t usable = cfg.vocab_size - 1;
  for (std::size_t s = 0; s < w.styles; ++s) {
    const auto lo = static_cast<std::int32_t>(1 + s * usable / w.styles);
    const auto hi = static_cast<std::int32_t>((s + 1) * usable / w.styles);
    w.bands.emplace_back(lo, hi);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  w.patch_means.assign(w.styles, std::vector<double>(cfg.patch_dim));
  for (auto& m : w.patch_means)
    for (double& v : m) v = normal(rng);
  // A cyclic successor ordering guarantees every style is reachable.
  std::vector<std::size_t> cycle(w.styles);
  std::iota(cycle.begin(), cycle.end(), 0);
  std::shuffle(cycle.begin(), cycle.end(), rng);
  std::vector<std::size_t> next(w.styles);
  for (std::size_t i = 0; i < w.styles; ++i) next[cycle[i]] = cycle[(i + 1) % w.styles];
  std::uniform_real_distribution<double> unit(0.5, 1.5);
  w.transitions.assign(w.styles, std::vector<double>(w.styles, 0.0));
  for (std::size_t s = 0; s < w.styles; ++s) {
    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < w.styles; ++o)
      if (o != next[s]) others.push_back(o);
    std::shuffle(others.begin(), others.end(), rng);
    std::vector<std::size_t> succ{next[s]};
    for (std::size_t i = 0; succ.size() < cfg.branching; ++i) succ.push_back(others[i]);
    double total = 0.0;
    for (std::size_t o : succ) total += (w.transitions[s][o] = unit(rng));
    for (double& p : w.transitions[s]) p /= total;
  }
  return w;
}

struct ItemSide {
  std::vector<ItemRecord> items;
  std::vector<std::size_t> style;                    // per item
  std::vector<std::vector<std::size_t>> by_style;    // item positions
  std::vector<std::discrete_distribution<std::size_t>> popularity;  // per style
};

inline ItemSide make_items(const SyntheticConfig& cfg, const StyleWorld& w, std::size_t n_items,
                           ItemId first_index, const std::string& tag) {
  Rng rng(derive_seed(cfg.seed, tag + ".items"));
  ItemSide side;
  std::vector<std::size_t> styles(n_items);
  for (std::size_t i = 0; i < n_items; ++i) styles[i] = i % w.styles;
  std::shuffle(styles.begin(), styles.end(), rng);
  side.by_style.resize(w.styles);
  std::normal_distribution<double> item_offset(0.0, cfg.item_spread), patch_noise(0.0, 0.1);
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t s = styles[i];
    ItemRecord rec;
    rec.catalog_index = first_index + static_cast<ItemId>(i);
    std::uniform_int_distribution<std::int32_t> tok(w.bands[s].first, w.bands[s].second);
    for (std::size_t k = 0; k < cfg.tokens_per_item; ++k) rec.tokens.push_back(tok(rng));
    std::vector<double> offset(cfg.patch_dim);
    for (double& v : offset) v = item_offset(rng);
    for (std::size_t p = 0; p < cfg.q; ++p)
      for (std::size_t j = 0; j < cfg.patch_dim; ++j)
        rec.patches.push_back(w.patch_means[s][j] + offset[j] + patch_noise(rng));
    side.items.push_back(std::move(rec));
    side.style.push_back(s);
    side.by_style[s].push_back(i);
  }
  for (std::size_t s = 0; s < w.styles; ++s) {
    std::vector<double> weights;
    for (std::size_t k = 0; k < side.by_style[s].size(); ++k)
      weights.push_back(1.0 / std::pow(static_cast<double>(k + 1), cfg.popularity_skew));
    side.popularity.emplace_back(weights.begin(), weights.end());
  }
  return side;
}

inline std::vector<UserSequence> make_users(const SyntheticConfig& cfg, const StyleWorld& w,
                                            ItemSide& side, std::size_t n_users,
                                            const std::string& tag) {
  Rng rng(derive_seed(cfg.seed, tag + ".users"));
  std::uniform_int_distribution<std::size_t> length(cfg.L_min, cfg.L_max);
  std::uniform_int_distribution<std::size_t> any_style(0, w.styles - 1);
  std::uniform_int_distribution<std::size_t> any_item(0, side.items.size() - 1);
  std::bernoulli_distribution noisy(cfg.transition_noise);
  std::vector<std::discrete_distribution<std::size_t>> chain;
  for (const auto& row : w.transitions) chain.emplace_back(row.begin(), row.end());
  auto draw_in_style = [&](std::size_t s) { return side.by_style[s][side.popularity[s](rng)]; };

  std::vector<UserSequence> users;
  for (std::size_t u = 0; u < n_users; ++u) {
    UserSequence seq{tag + std::to_string(u), {}};
    const std::size_t len = length(rng);
    std::size_t item = draw_in_style(any_style(rng));
    seq.items.push_back(side.items[item].catalog_index);
    while (seq.items.size() < len) {
      if (noisy(rng)) {
        item = any_item(rng);
      } else {
        item = draw_in_style(chain[side.style[item]](rng));
      }
      seq.items.push_back(side.items[item].catalog_index);
    }
    users.push_back(std::move(seq));
  }
  return users;
}

}  // namespace detail

/// Source and target datasets with planted style-level transitions. Target
/// catalog indices start after the source's, so the item sets are disjoint.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const detail::StyleWorld world = detail::make_world(cfg);
  auto src = detail::make_items(cfg, world, cfg.n_items, 0, "source");
  auto tgt = detail::make_items(cfg, world, cfg.target_items, static_cast<ItemId>(cfg.n_items),
                                "target");
  SyntheticData out;
  out.source.users = detail::make_users(cfg, world, src, cfg.n_users, "s");
  out.target.users = detail::make_users(cfg, world, tgt, cfg.target_users, "t");
  out.source_styles = src.style;
  out.target_styles = tgt.style;
  out.source.catalog = Catalog(std::move(src.items));
  out.target.catalog = Catalog(std::move(tgt.items));
  out.style_transitions = world.transitions;
  return out;
}

}  // namespace pmmrec
