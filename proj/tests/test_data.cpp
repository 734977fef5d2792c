#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "pmmrec/data.hpp"
#include "pmmrec/synthetic.hpp"
#include "test_support.hpp"

using namespace pmmrec;
using pmmrec::testing::TempDir;

namespace {

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

Catalog numbered_catalog(std::size_t n) {
  std::vector<ItemRecord> items;
  for (std::size_t i = 0; i < n; ++i)
    items.push_back({static_cast<ItemId>(i), {1, 2}, {0.5, 0.25}});
  return Catalog(std::move(items));
}

// Independent filter: recount from scratch each round until stable.
std::pair<std::set<ItemId>, std::set<std::string>> brute_force_filter(const Dataset& ds,
                                                                      std::size_t k) {
  std::set<ItemId> items;
  for (const auto& it : ds.catalog.items()) items.insert(it.catalog_index);
  std::set<std::string> users;
  for (const auto& u : ds.users) users.insert(u.user_id);
  while (true) {
    std::map<ItemId, std::size_t> ic;
    std::map<std::string, std::size_t> uc;
    for (const auto& u : ds.users) {
      if (!users.count(u.user_id)) continue;
      for (ItemId id : u.items) {
        if (!items.count(id)) continue;
        ++ic[id];
        ++uc[u.user_id];
      }
    }
    std::set<ItemId> ni;
    for (ItemId id : items)
      if (ic[id] >= k) ni.insert(id);
    std::set<std::string> nu;
    for (const auto& u : users)
      if (uc[u] >= k) nu.insert(u);
    if (ni == items && nu == users) return {items, users};
    items = ni;
    users = nu;
  }
}

Dataset random_dataset(std::uint64_t seed, std::size_t n_users, std::size_t n_items,
                       std::size_t max_len) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<ItemId> item(0, static_cast<ItemId>(n_items - 1));
  Dataset ds{numbered_catalog(n_items), {}};
  for (std::size_t u = 0; u < n_users; ++u) {
    UserSequence s{"u" + std::to_string(u), {}};
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) s.items.push_back(item(rng));
    ds.users.push_back(s);
  }
  return ds;
}

}  // namespace

TEST(LoadDataset, SmallFixture) {
  TempDir dir("data");
  write_text(dir.file("items.tsv"), "0\t5 6\t0.1 0.2\n1\t7\t0.3 0.4\n2\t8 9 10\t0.5 0.6\n");
  write_text(dir.file("inter.tsv"), "alice\t0 1 2\nbob\t2 1\n");
  const Dataset ds = load_dataset(dir.file("items.tsv"), dir.file("inter.tsv"));
  EXPECT_EQ(ds.catalog.size(), 3u);
  EXPECT_EQ(ds.users.size(), 2u);
  EXPECT_EQ(ds.actions(), 5u);
  EXPECT_EQ(ds.catalog.at(2).tokens, (std::vector<std::int32_t>{8, 9, 10}));
}

TEST(LoadDataset, UnknownItemIsNamed) {
  TempDir dir("data");
  write_text(dir.file("items.tsv"), "0\t5\t0.1\n");
  write_text(dir.file("inter.tsv"), "alice\t0 42\n");
  try {
    load_dataset(dir.file("items.tsv"), dir.file("inter.tsv"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("42"), std::string::npos);
    EXPECT_NE(msg.find("inter.tsv:1"), std::string::npos);
  }
}

TEST(LoadDataset, MalformedLinesAndMissingFiles) {
  TempDir dir("data");
  write_text(dir.file("items.tsv"), "0\t5\n");
  write_text(dir.file("inter.tsv"), "");
  EXPECT_THROW(load_dataset(dir.file("items.tsv"), dir.file("inter.tsv")), DataError);
  write_text(dir.file("items.tsv"), "0\tx\t0.1\n");
  EXPECT_THROW(load_dataset(dir.file("items.tsv"), dir.file("inter.tsv")), DataError);
  write_text(dir.file("items.tsv"), "0\t1\t0.1\n1\t1\t0.1 0.2\n");
  EXPECT_THROW(load_dataset(dir.file("items.tsv"), dir.file("inter.tsv")), DataError);
  EXPECT_THROW(load_dataset(dir.file("nope.tsv"), dir.file("inter.tsv")), std::exception);
}

TEST(LoadDataset, WriteReadRoundTrip) {
  TempDir dir("data");
  const auto data = generate_synthetic(pmmrec::testing::tiny_world(4));
  write_dataset(data.source, dir.file("i.tsv"), dir.file("u.tsv"));
  EXPECT_EQ(load_dataset(dir.file("i.tsv"), dir.file("u.tsv")), data.source);
}

TEST(Split, LeaveOneOutConvention) {
  Dataset ds{numbered_catalog(5), {{"u", {0, 1, 2, 3, 4}}}};
  const auto s = filter_and_split(ds, 1);
  ASSERT_EQ(s.users.size(), 1u);
  EXPECT_EQ(s.users[0].train, (std::vector<ItemId>{0, 1, 2}));
  EXPECT_EQ(s.users[0].valid, 3);
  EXPECT_EQ(s.users[0].test, 4);
}

TEST(Split, ShortUsersAreRemoved) {
  Dataset ds{numbered_catalog(5), {}};
  for (int u = 0; u < 6; ++u) ds.users.push_back({"a" + std::to_string(u), {0, 1, 2, 3, 4}});
  ds.users.push_back({"short", {0, 1, 2, 3}});
  const auto s = filter_and_split(ds, 5);
  EXPECT_EQ(s.users.size(), 6u);
  for (const auto& u : s.users) EXPECT_NE(u.user_id, "short");
}

TEST(Split, FilterReachesBruteForceFixedPoint) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const Dataset ds = random_dataset(seed, 40, 25, 12);
    for (std::size_t k : {2u, 3u, 5u}) {
      const Dataset f = filter_interactions(ds, k);
      const auto [items, users] = brute_force_filter(ds, k);
      std::set<ItemId> got_items;
      for (const auto& it : f.catalog.items()) got_items.insert(it.catalog_index);
      std::set<std::string> got_users;
      for (const auto& u : f.users) got_users.insert(u.user_id);
      EXPECT_EQ(got_items, items) << seed << " " << k;
      EXPECT_EQ(got_users, users) << seed << " " << k;
    }
  }
}

TEST(Batches, SizesTruncationAndDeterminism) {
  std::vector<std::vector<ItemId>> seqs(5, std::vector<ItemId>{1, 2, 3});
  const auto b = make_batches(seqs, 2, 20, 1);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
  EXPECT_EQ(b[2].size(), 1u);

  std::vector<ItemId> long_seq(30);
  std::iota(long_seq.begin(), long_seq.end(), 0);
  const auto t = make_batches({long_seq, long_seq}, 2, 20, 1);
  EXPECT_EQ(t[0].sequences[0], std::vector<ItemId>(long_seq.begin() + 10, long_seq.end()));

  std::vector<std::vector<ItemId>> many;
  for (ItemId i = 0; i < 50; ++i) many.push_back({i, i + 1});
  const auto x = make_batches(many, 4, 20, 9), y = make_batches(many, 4, 20, 9);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].sequences, y[i].sequences);
    EXPECT_EQ(x[i].rng_seed, y[i].rng_seed);
  }
  EXPECT_NE(make_batches(many, 4, 20, 10)[0].sequences, x[0].sequences);
  EXPECT_THROW(make_batches(many, 1, 20, 1, true), std::invalid_argument);
  EXPECT_NO_THROW(make_batches(many, 1, 20, 1, false));
}

TEST(Synthetic, NoiseFreeSequencesFollowTheChain) {
  SyntheticConfig cfg = pmmrec::testing::tiny_world();
  cfg.n_latent_styles = 4;
  cfg.transition_noise = 0.0;
  const auto data = generate_synthetic(cfg);
  for (const auto& u : data.source.users) {
    for (std::size_t i = 0; i + 1 < u.items.size(); ++i) {
      const std::size_t a = data.source_styles[static_cast<std::size_t>(u.items[i])];
      const std::size_t b = data.source_styles[static_cast<std::size_t>(u.items[i + 1])];
      EXPECT_GT(data.style_transitions[a][b], 0.0);
    }
  }
}

TEST(Synthetic, SourceAndTargetItemsAreDisjoint) {
  const auto data = generate_synthetic(pmmrec::testing::tiny_world());
  std::set<ItemId> src;
  for (const auto& it : data.source.catalog.items()) src.insert(it.catalog_index);
  for (const auto& it : data.target.catalog.items()) EXPECT_FALSE(src.count(it.catalog_index));
  EXPECT_EQ(data.source.users.size(), 40u);
  EXPECT_EQ(data.target.users.size(), 30u);
}

TEST(Synthetic, EmpiricalTransitionsMatchPlantedMatrix) {
  SyntheticConfig cfg;
  cfg.n_users = 5000;
  cfg.n_items = 40;
  cfg.n_latent_styles = 4;
  cfg.branching = 3;
  cfg.transition_noise = 0.0;
  cfg.L_min = 5;
  cfg.L_max = 12;
  cfg.vocab_size = 100;
  cfg.seed = 21;
  const auto data = generate_synthetic(cfg);
  std::vector<std::vector<double>> counts(4, std::vector<double>(4, 0.0));
  for (const auto& u : data.source.users) {
    for (std::size_t i = 0; i + 1 < u.items.size(); ++i) {
      counts[data.source_styles[static_cast<std::size_t>(u.items[i])]]
            [data.source_styles[static_cast<std::size_t>(u.items[i + 1])]] += 1.0;
    }
  }
  for (std::size_t a = 0; a < 4; ++a) {
    double row = 0.0;
    for (double c : counts[a]) row += c;
    ASSERT_GT(row, 0.0);
    for (std::size_t b = 0; b < 4; ++b)
      EXPECT_NEAR(counts[a][b] / row, data.style_transitions[a][b], 0.02) << a << "->" << b;
  }
}

TEST(Synthetic, IsSeededAndValidated) {
  const auto a = generate_synthetic(pmmrec::testing::tiny_world(5));
  const auto b = generate_synthetic(pmmrec::testing::tiny_world(5));
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.target, b.target);
  SyntheticConfig bad = pmmrec::testing::tiny_world();
  bad.n_latent_styles = 1;
  EXPECT_THROW(generate_synthetic(bad), std::invalid_argument);
  bad = pmmrec::testing::tiny_world();
  bad.transition_noise = 1.5;
  EXPECT_THROW(generate_synthetic(bad), std::invalid_argument);
}

TEST(ColdStart, StrictThresholdAndUnseenItems) {
  // Item 7 appears in train 10 times, item 8 only as a test target.
  SplitDataset split{numbered_catalog(10), {}};
  for (int u = 0; u < 10; ++u) split.users.push_back({"u" + std::to_string(u), {1, 7}, 2, 3});
  split.users.push_back({"x", {1, 2}, 3, 8});
  const auto samples = cold_item_subsequences(split, 10);
  for (const auto& s : samples) EXPECT_NE(s.target, 7);
  ASSERT_FALSE(samples.empty());
  EXPECT_EQ(samples.back().target, 8);
  EXPECT_EQ(samples.back().prefix, (std::vector<ItemId>{1, 2, 3}));
  EXPECT_TRUE(cold_item_subsequences(split, 0).empty());
}

TEST(ColdStart, MatchesBruteForceScan) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Dataset ds = random_dataset(seed, 30, 20, 10);
    const SplitDataset split = filter_and_split(ds, 1);
    for (std::size_t threshold : {1u, 3u, 10u, 1000u}) {
      std::map<ItemId, std::size_t> count;
      for (const auto& u : split.users)
        for (ItemId id : u.train) ++count[id];
      std::vector<ColdSample> expected;
      for (std::size_t u = 0; u < split.users.size(); ++u) {
        const auto seq = split.users[u].full();
        for (std::size_t p = 1; p < seq.size(); ++p) {
          if (count[seq[p]] < threshold) {
            expected.push_back({u, std::vector<ItemId>(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p)), seq[p]});
          }
        }
      }
      EXPECT_EQ(cold_item_subsequences(split, threshold), expected) << seed << " " << threshold;
      if (threshold == 1000) {
        std::size_t all = 0;
        for (const auto& u : split.users) all += u.full().size() - 1;
        EXPECT_EQ(expected.size(), all);
      }
    }
  }
}

TEST(Stats, CountsAndSparsity) {
  Dataset ds{numbered_catalog(4), {{"a", {0, 1}}, {"b", {2, 3, 0, 1}}}};
  const auto s = dataset_stats(ds);
  EXPECT_EQ(s.users, 2u);
  EXPECT_EQ(s.items, 4u);
  EXPECT_EQ(s.actions, 6u);
  EXPECT_DOUBLE_EQ(s.avg_length, 3.0);
  EXPECT_DOUBLE_EQ(s.sparsity, 25.0);
  EXPECT_NE(format_stats({{"toy", s}}).find("toy"), std::string::npos);
}
