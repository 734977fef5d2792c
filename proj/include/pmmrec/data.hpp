#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pmmrec/objectives.hpp"
#include "pmmrec/random.hpp"
#include "pmmrec/types.hpp"

namespace pmmrec {

/// Malformed or inconsistent dataset input.
class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct UserSequence {
  std::string user_id;
  std::vector<ItemId> items;  // chronological

  friend bool operator==(const UserSequence&, const UserSequence&) = default;
};

struct Dataset {
  Catalog catalog;
  std::vector<UserSequence> users;

  std::size_t actions() const {
    std::size_t n = 0;
    for (const auto& u : users) n += u.items.size();
    return n;
  }

  /// Every interaction must reference a catalog item; all items share one
  /// patch layout.
  void validate() const {
    std::size_t patch_values = 0;
    for (const auto& item : catalog.items()) {
      if (item.tokens.empty()) {
        throw DataError("item " + std::to_string(item.catalog_index) + " has no tokens");
      }
      if (patch_values == 0) patch_values = item.patches.size();
      if (item.patches.size() != patch_values) {
        throw DataError("item " + std::to_string(item.catalog_index) + " has " +
                        std::to_string(item.patches.size()) + " patch values, expected " +
                        std::to_string(patch_values));
      }
    }
    for (const auto& u : users) {
      for (ItemId id : u.items) {
        if (!catalog.contains(id)) {
          throw DataError("user " + u.user_id + " references unknown catalog index " +
                          std::to_string(id));
        }
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

template <class T>
std::vector<T> parse_numbers(std::string_view field, const std::string& where) {
  std::vector<T> out;
  std::size_t i = 0;
  while (i < field.size()) {
    while (i < field.size() && field[i] == ' ') ++i;
    if (i >= field.size()) break;
    std::size_t j = i;
    while (j < field.size() && field[j] != ' ') ++j;
    T v{};
    auto [ptr, ec] = std::from_chars(field.data() + i, field.data() + j, v);
    if (ec != std::errc() || ptr != field.data() + j) {
      throw DataError(where + ": cannot parse '" + std::string(field.substr(i, j - i)) + "'");
    }
    out.push_back(v);
    i = j;
  }
  return out;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

}  // namespace detail

/// Items: `index <TAB> token ids <TAB> patch values`; interactions:
/// `user_id <TAB> catalog indices`. Blank lines are skipped.
inline Dataset load_dataset(const std::string& items_path, const std::string& interactions_path) {
  std::vector<ItemRecord> items;
  {
    auto in = detail::open_input(items_path);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = items_path + ":" + std::to_string(no);
      auto fields = detail::split_tabs(line);
      if (fields.size() != 3) {
        throw DataError(where + ": expected 3 tab-separated fields, found " +
                        std::to_string(fields.size()));
      }
      auto index = detail::parse_numbers<ItemId>(fields[0], where);
      if (index.size() != 1) throw DataError(where + ": expected one catalog index");
      ItemRecord rec;
      rec.catalog_index = index[0];
      rec.tokens = detail::parse_numbers<std::int32_t>(fields[1], where);
      rec.patches = detail::parse_numbers<double>(fields[2], where);
      if (rec.tokens.empty()) throw DataError(where + ": item has no tokens");
      items.push_back(std::move(rec));
    }
  }
  Dataset ds;
  try {
    ds.catalog = Catalog(std::move(items));
  } catch (const std::invalid_argument& e) {
    throw DataError(items_path + ": " + e.what());
  }
  {
    auto in = detail::open_input(interactions_path);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = interactions_path + ":" + std::to_string(no);
      auto fields = detail::split_tabs(line);
      if (fields.size() != 2 || fields[0].empty()) {
        throw DataError(where + ": expected 'user_id <TAB> catalog indices'");
      }
      UserSequence u{std::string(fields[0]), detail::parse_numbers<ItemId>(fields[1], where)};
      for (ItemId id : u.items) {
        if (!ds.catalog.contains(id)) {
          throw DataError(where + ": unknown catalog index " + std::to_string(id));
        }
      }
      ds.users.push_back(std::move(u));
    }
  }
  ds.validate();
  return ds;
}

/// Writes both files; doubles use 17 significant digits so reloading is exact.
inline void write_dataset(const Dataset& ds, const std::string& items_path,
                          const std::string& interactions_path) {
  std::ofstream items(items_path);
  if (!items) throw std::runtime_error("cannot write " + items_path);
  items << std::setprecision(17);
  for (const auto& it : ds.catalog.items()) {
    items << it.catalog_index << '\t';
    for (std::size_t i = 0; i < it.tokens.size(); ++i) items << (i ? " " : "") << it.tokens[i];
    items << '\t';
    for (std::size_t i = 0; i < it.patches.size(); ++i) items << (i ? " " : "") << it.patches[i];
    items << '\n';
  }
  std::ofstream inter(interactions_path);
  if (!inter) throw std::runtime_error("cannot write " + interactions_path);
  for (const auto& u : ds.users) {
    inter << u.user_id << '\t';
    for (std::size_t i = 0; i < u.items.size(); ++i) inter << (i ? " " : "") << u.items[i];
    inter << '\n';
  }
  if (!items || !inter) throw std::runtime_error("write failed for " + items_path);
}

// ---------------------------------------------------------------------------
// Filtering and leave-one-out split

struct SplitUser {
  std::string user_id;
  std::vector<ItemId> train;
  ItemId valid = 0;
  ItemId test = 0;

  std::vector<ItemId> full() const {
    std::vector<ItemId> s = train;
    s.push_back(valid);
    s.push_back(test);
    return s;
  }
  friend bool operator==(const SplitUser&, const SplitUser&) = default;
};

struct SplitDataset {
  Catalog catalog;  // items surviving the filter
  std::vector<SplitUser> users;

  Dataset merged() const {
    Dataset ds{catalog, {}};
    for (const auto& u : users) ds.users.push_back({u.user_id, u.full()});
    return ds;
  }
  friend bool operator==(const SplitDataset&, const SplitDataset&) = default;
};

/// Alternately drops users and items with fewer than `min_interactions`
/// interactions until nothing changes.
inline Dataset filter_interactions(const Dataset& ds, std::size_t min_interactions) {
  std::vector<UserSequence> users = ds.users;
  std::unordered_set<ItemId> alive;
  for (const auto& it : ds.catalog.items()) alive.insert(it.catalog_index);
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<ItemId, std::size_t> count;
    for (const auto& u : users)
      for (ItemId id : u.items) ++count[id];
    for (auto it = alive.begin(); it != alive.end();) {
      if (count[*it] < min_interactions) {
        it = alive.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
    std::vector<UserSequence> kept;
    for (auto& u : users) {
      std::vector<ItemId> items;
      for (ItemId id : u.items)
        if (alive.count(id)) items.push_back(id);
      if (items.size() != u.items.size()) changed = true;
      if (items.size() >= min_interactions) {
        kept.push_back({u.user_id, std::move(items)});
      } else {
        changed = true;
      }
    }
    users = std::move(kept);
  }
  std::vector<ItemRecord> items;
  for (const auto& it : ds.catalog.items())
    if (alive.count(it.catalog_index)) items.push_back(it);
  return Dataset{Catalog(std::move(items)), std::move(users)};
}

/// Filters, then gives each user's last item to test, the one before to
/// validation, and the rest to train. Users left with fewer than 3 items are
/// dropped.
inline SplitDataset filter_and_split(const Dataset& ds, std::size_t min_interactions = 5) {
  ds.validate();
  Dataset f = filter_interactions(ds, min_interactions);
  SplitDataset out{f.catalog, {}};
  for (const auto& u : f.users) {
    if (u.items.size() < 3) continue;
    const std::size_t n = u.items.size();
    out.users.push_back({u.user_id, {u.items.begin(), u.items.end() - 2}, u.items[n - 2],
                         u.items[n - 1]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Keeps the most recent `max_len` items.
inline std::vector<ItemId> truncate_recent(const std::vector<ItemId>& seq, std::size_t max_len) {
  if (seq.size() <= max_len) return seq;
  return {seq.end() - static_cast<std::ptrdiff_t>(max_len), seq.end()};
}

/// Shuffles sequences by `seed`, truncates each to the last `max_len` items
/// and groups them into batches of at most `batch_size`. Batch `i` carries
/// the corruption seed derive_seed(seed, "batch", i).
inline std::vector<Batch> make_batches(const std::vector<std::vector<ItemId>>& sequences,
                                       std::size_t batch_size, std::size_t max_len,
                                       std::uint64_t seed, bool contrastive = true) {
  if (sequences.empty()) throw std::invalid_argument("make_batches: no sequences");
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be >= 1");
  if (contrastive && batch_size < 2) {
    throw std::invalid_argument("make_batches: batch size " + std::to_string(batch_size) +
                                " leaves in-batch negative sets empty; use B >= 2");
  }
  if (max_len == 0) throw std::invalid_argument("make_batches: max_len must be >= 1");
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "shuffle"));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    b.rng_seed = derive_seed(seed, "batch", out.size());
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      b.sequences.push_back(truncate_recent(sequences[order[i]], max_len));
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<std::vector<ItemId>> train_sequences(const SplitDataset& split) {
  std::vector<std::vector<ItemId>> out;
  out.reserve(split.users.size());
  for (const auto& u : split.users) out.push_back(u.train);
  return out;
}

inline std::vector<Batch> make_batches(const SplitDataset& split, std::size_t batch_size,
                                       std::size_t max_len, std::uint64_t seed,
                                       bool contrastive = true) {
  if (split.users.empty()) throw std::invalid_argument("make_batches: split has no users");
  return make_batches(train_sequences(split), batch_size, max_len, seed, contrastive);
}

// ---------------------------------------------------------------------------
// Cold-start sub-sequences

struct ColdSample {
  std::size_t user = 0;  // index into split.users
  std::vector<ItemId> prefix;
  ItemId target = 0;

  friend bool operator==(const ColdSample&, const ColdSample&) = default;
};

inline std::unordered_map<ItemId, std::size_t> train_counts(const SplitDataset& split) {
  std::unordered_map<ItemId, std::size_t> count;
  for (const auto& u : split.users)
    for (ItemId id : u.train) ++count[id];
  return count;
}

/// Every occurrence of an item seen fewer than `threshold` times in training,
/// at a (1-based) position ≥ 2 of a user's full sequence, yields the prefix
/// before it and the item as target.
inline std::vector<ColdSample> cold_item_subsequences(const SplitDataset& split,
                                                      std::size_t threshold = 10) {
  const auto count = train_counts(split);
  auto is_cold = [&](ItemId id) {
    auto it = count.find(id);
    return (it == count.end() ? 0 : it->second) < threshold;
  };
  std::vector<ColdSample> out;
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    const auto seq = split.users[u].full();
    for (std::size_t p = 1; p < seq.size(); ++p) {
      if (is_cold(seq[p])) out.push_back({u, {seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p)}, seq[p]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stats

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double avg_length = 0.0;
  double sparsity = 0.0;  // percent of the user-item matrix left empty
};

inline DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats s;
  s.users = ds.users.size();
  s.items = ds.catalog.size();
  s.actions = ds.actions();
  if (s.users > 0) s.avg_length = static_cast<double>(s.actions) / static_cast<double>(s.users);
  if (s.users > 0 && s.items > 0) {
    s.sparsity = 100.0 * (1.0 - static_cast<double>(s.actions) /
                                    (static_cast<double>(s.users) * static_cast<double>(s.items)));
  }
  return s;
}

inline std::string format_stats(const std::vector<std::pair<std::string, DatasetStats>>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "dataset" << std::right << std::setw(10) << "users"
     << std::setw(10) << "items" << std::setw(12) << "actions" << std::setw(10) << "avg_len"
     << std::setw(11) << "sparsity" << '\n';
  for (const auto& [name, s] : rows) {
    os << std::left << std::setw(12) << name << std::right << std::setw(10) << s.users
       << std::setw(10) << s.items << std::setw(12) << s.actions << std::setw(10) << std::fixed
       << std::setprecision(2) << s.avg_length << std::setw(10) << std::setprecision(2)
       << s.sparsity << "%\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

}  // namespace pmmrec
