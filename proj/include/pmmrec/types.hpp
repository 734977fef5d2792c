#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pmmrec {

using ItemId = std::int64_t;

inline constexpr std::int32_t kPadToken = 0;

/// Fixed-width token ids plus a validity mask (true = real token).
struct TokenSequence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> pad_mask;
};

/// q patch vectors of `patch_dim` values each, row-major.
struct PatchSequence {
  std::vector<double> values;
  std::size_t count = 0;
  std::size_t dim = 0;
};

/// An item is known only by its catalog index and its content.
struct ItemRecord {
  ItemId catalog_index = 0;
  std::vector<std::int32_t> tokens;  // real tokens only, unpadded
  std::vector<double> patches;       // q * patch_dim values

  friend bool operator==(const ItemRecord&, const ItemRecord&) = default;
};

/// Pads (or truncates) an item's tokens to `p_max` positions.
inline TokenSequence pad_tokens(const std::vector<std::int32_t>& tokens, std::size_t p_max) {
  if (tokens.empty()) throw std::invalid_argument("item has no real tokens");
  TokenSequence seq;
  seq.token_ids.assign(p_max, kPadToken);
  seq.pad_mask.assign(p_max, 0);
  const std::size_t n = std::min(tokens.size(), p_max);
  for (std::size_t i = 0; i < n; ++i) {
    seq.token_ids[i] = tokens[i];
    seq.pad_mask[i] = 1;
  }
  return seq;
}

/// Item records addressable by catalog index.
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<ItemRecord> items) : items_(std::move(items)) { reindex(); }

  const std::vector<ItemRecord>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }

  bool contains(ItemId id) const { return slot_.count(id) != 0; }

  std::size_t slot(ItemId id) const {
    auto it = slot_.find(id);
    if (it == slot_.end()) {
      throw std::out_of_range("unknown catalog index " + std::to_string(id));
    }
    return it->second;
  }

  const ItemRecord& at(ItemId id) const { return items_[slot(id)]; }

  friend bool operator==(const Catalog& a, const Catalog& b) { return a.items_ == b.items_; }

 private:
  void reindex() {
    slot_.clear();
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (!slot_.emplace(items_[i].catalog_index, i).second) {
        throw std::invalid_argument("duplicate catalog index " +
                                    std::to_string(items_[i].catalog_index));
      }
    }
  }

  std::vector<ItemRecord> items_;
  std::unordered_map<ItemId, std::size_t> slot_;
};

}  // namespace pmmrec
