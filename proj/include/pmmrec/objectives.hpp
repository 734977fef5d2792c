#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pmmrec/model.hpp"
#include "pmmrec/ops.hpp"
#include "pmmrec/random.hpp"
#include "pmmrec/types.hpp"

namespace pmmrec {

/// B user sequences (real items only, chronological) plus the corruption seed.
struct Batch {
  std::vector<std::vector<ItemId>> sequences;
  std::uint64_t rng_seed = 0;

  std::size_t size() const noexcept { return sequences.size(); }
  std::size_t length() const noexcept {
    std::size_t l = 0;
    for (const auto& s : sequences) l = std::max(l, s.size());
    return l;
  }
};

/// Flattened view of a batch: unique items, real occurrences (user-major)
/// and the in-batch negative sets.
struct BatchLayout {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> lengths;
  std::vector<ItemId> unique_items;
  std::unordered_map<ItemId, std::size_t> slot_of;
  std::vector<std::size_t> occ_slot;   // occurrence → unique slot
  std::vector<std::size_t> occ_flat;   // occurrence → u * length + l
  std::vector<std::size_t> occ_user;   // occurrence → u
  std::vector<ItemId> occ_item;        // occurrence → catalog index
  std::vector<std::size_t> occ_start;  // u → first occurrence
  /// u → occurrences of users k ≠ u whose item is absent from u's sequence.
  /// Multiplicity among negatives is kept.
  std::vector<std::vector<std::size_t>> negatives;

  static BatchLayout build(const std::vector<std::vector<ItemId>>& seqs) {
    BatchLayout lay;
    lay.batch = seqs.size();
    if (lay.batch == 0) throw std::invalid_argument("batch has no sequences");
    for (const auto& s : seqs) {
      if (s.empty()) throw std::invalid_argument("batch contains an empty sequence");
      lay.length = std::max(lay.length, s.size());
      lay.lengths.push_back(s.size());
    }
    std::set<ItemId> uniq;
    for (const auto& s : seqs) uniq.insert(s.begin(), s.end());
    lay.unique_items.assign(uniq.begin(), uniq.end());
    for (std::size_t i = 0; i < lay.unique_items.size(); ++i) lay.slot_of[lay.unique_items[i]] = i;
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      lay.occ_start.push_back(lay.occ_slot.size());
      for (std::size_t l = 0; l < seqs[u].size(); ++l) {
        lay.occ_slot.push_back(lay.slot_of.at(seqs[u][l]));
        lay.occ_flat.push_back(u * lay.length + l);
        lay.occ_user.push_back(u);
        lay.occ_item.push_back(seqs[u][l]);
      }
    }
    lay.negatives.resize(lay.batch);
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      const std::unordered_set<ItemId> own(seqs[u].begin(), seqs[u].end());
      for (std::size_t o = 0; o < lay.occ_item.size(); ++o) {
        if (lay.occ_user[o] != u && !own.count(lay.occ_item[o])) lay.negatives[u].push_back(o);
      }
    }
    return lay;
  }

  std::size_t occurrences() const noexcept { return occ_slot.size(); }
  std::size_t occurrence(std::size_t u, std::size_t l) const { return occ_start[u] + l; }

  /// B * length unique-slot indices for `seqs` (same shape as this batch);
  /// padded positions point at slot 0 and are masked downstream.
  std::vector<std::size_t> padded_slots(const std::vector<std::vector<ItemId>>& seqs) const {
    std::vector<std::size_t> out(batch * length, 0);
    for (std::size_t u = 0; u < seqs.size(); ++u)
      for (std::size_t l = 0; l < seqs[u].size(); ++l) out[u * length + l] = slot_of.at(seqs[u][l]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Dense auto-regressive prediction

/// Next-item cross-entropy against in-batch negatives, averaged over all
/// real transitions. `hiddens` is [B*L, d]; `occ_reps` holds one row per real
/// occurrence.
inline Var dap_loss(Var hiddens, Var occ_reps, const BatchLayout& lay, double temperature = 1.0) {
  std::vector<std::size_t> rows, targets;
  for (std::size_t u = 0; u < lay.batch; ++u) {
    for (std::size_t l = 0; l + 1 < lay.lengths[u]; ++l) {
      rows.push_back(u * lay.length + l);
      targets.push_back(lay.occurrence(u, l + 1));
    }
  }
  if (rows.empty()) throw std::invalid_argument("dap_loss: batch has no transitions");
  const std::size_t n_occ = lay.occurrences();
  Mask den(rows.size() * n_occ, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t u = rows[r] / lay.length;
    den[r * n_occ + targets[r]] = 1;
    for (std::size_t o : lay.negatives[u]) den[r * n_occ + o] = 1;
  }
  Var scores = matmul(gather_rows(hiddens, rows), occ_reps, /*transpose_w=*/true);
  if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
  const std::size_t n = rows.size();
  Var per_row = sub(masked_logsumexp(scores, den), pick(scores, std::move(targets)));
  return weighted_sum(per_row, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Cross-modal contrastive family

enum class ContrastiveVariant { none, vcl, icl, nicl };

inline std::string_view to_string(ContrastiveVariant v) {
  switch (v) {
    case ContrastiveVariant::none: return "none";
    case ContrastiveVariant::vcl: return "vcl";
    case ContrastiveVariant::icl: return "icl";
    case ContrastiveVariant::nicl: return "nicl";
  }
  return "?";
}

namespace detail {

/// One direction (anchor modality A against other modality B) of the
/// contrastive loss. Score columns: [0, n) = A·B, [n, 2n) = A·A.
inline Var contrastive_direction(Var anchor_all, Var other_all, ContrastiveVariant variant,
                                 const BatchLayout& lay, const std::vector<std::size_t>& anchors,
                                 double temperature) {
  const std::size_t n = lay.occurrences();
  const bool next_item = variant == ContrastiveVariant::nicl;
  const bool intra_negatives = variant != ContrastiveVariant::vcl;
  Var cols = concat_rows({other_all, anchor_all});
  Var scores = matmul(gather_rows(anchor_all, anchors), cols, /*transpose_w=*/true);
  if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
  const std::size_t width = 2 * n;
  Mask num(anchors.size() * width, 0), den(anchors.size() * width, 0);
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    const std::size_t a = anchors[r];
    const std::size_t u = lay.occ_user[a];
    num[r * width + a] = 1;
    den[r * width + a] = 1;
    if (next_item) {
      num[r * width + a + 1] = 1;      // other modality of the next item
      num[r * width + n + a + 1] = 1;  // same modality of the next item
    }
    for (std::size_t o : lay.negatives[u]) {
      den[r * width + o] = 1;
      if (intra_negatives) den[r * width + n + o] = 1;
    }
  }
  return sub(masked_logsumexp(scores, den), masked_logsumexp(scores, num));
}

}  // namespace detail

/// VCL / ICL / NICL over ℓ2-normalized per-occurrence text and vision cls
/// vectors. NICL anchors every position with a successor; VCL and ICL anchor
/// every real position. The two directions are averaged.
inline Var contrastive_loss(ContrastiveVariant variant, Var text_occ, Var vision_occ,
                            const BatchLayout& lay, double temperature = 1.0) {
  if (variant == ContrastiveVariant::none) {
    throw std::invalid_argument("contrastive_loss: no variant selected");
  }
  std::vector<std::size_t> anchors;
  for (std::size_t u = 0; u < lay.batch; ++u) {
    if (variant == ContrastiveVariant::nicl && lay.lengths[u] < 2) {
      throw std::invalid_argument("contrastive_loss: NICL needs sequences of length >= 2");
    }
    const std::size_t last = variant == ContrastiveVariant::nicl ? lay.lengths[u] - 1 : lay.lengths[u];
    for (std::size_t l = 0; l < last; ++l) anchors.push_back(lay.occurrence(u, l));
  }
  Var tv = detail::contrastive_direction(text_occ, vision_occ, variant, lay, anchors, temperature);
  Var vt = detail::contrastive_direction(vision_occ, text_occ, variant, lay, anchors, temperature);
  const double w = 0.5 / static_cast<double>(anchors.size());
  return weighted_sum(add(tv, vt), std::vector<double>(anchors.size(), w));
}

// ---------------------------------------------------------------------------
// Corruption and noised item detection

enum CorruptionLabel : int { kUnchanged = 0, kShuffled = 1, kReplaced = 2, kPadLabel = -1 };

struct CorruptionCounts {
  std::size_t shuffled = 0;
  std::size_t replaced = 0;
};

/// Shuffle/replace counts for a sequence of real length `len`. A shuffle of
/// a single position cannot move any item, so one becomes two. When the two
/// sets cannot be disjoint, replacements give way first.
inline CorruptionCounts corruption_counts(std::size_t len, double shuffle_rate,
                                          double replace_rate, bool can_replace = true) {
  if (shuffle_rate < 0.0 || shuffle_rate > 1.0 || replace_rate < 0.0 || replace_rate > 1.0) {
    throw std::invalid_argument("corruption rates must lie in [0, 1]");
  }
  // The small offset keeps 0.15 * 20 = 3.0000000000000004 at 3.
  auto ceil_count = [len](double rate) {
    return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(len) - 1e-9));
  };
  CorruptionCounts c{ceil_count(shuffle_rate), can_replace ? ceil_count(replace_rate) : 0};
  if (c.shuffled == 1) c.shuffled = 2;
  if (c.shuffled + c.replaced > len) {
    c.replaced = len > c.shuffled ? len - c.shuffled : 0;
  }
  if (c.shuffled > len) c.shuffled = len;
  if (c.shuffled < 2) c.shuffled = 0;
  return c;
}

struct CorruptionResult {
  std::vector<ItemId> sequence;
  std::vector<int> labels;  // one per real position
};

/// Shuffles a derangement of ⌈shuffle_rate·L⌉ positions (every shuffled
/// position ends up holding a different item) and replaces ⌈replace_rate·L⌉
/// further positions with draws from `pool`.
inline CorruptionResult corrupt_sequence(const std::vector<ItemId>& seq,
                                         const std::vector<ItemId>& pool, double shuffle_rate,
                                         double replace_rate, Rng& rng) {
  const std::size_t len = seq.size();
  if (len < 2) throw std::invalid_argument("corrupt_sequence: need at least 2 items");
  CorruptionCounts counts = corruption_counts(len, shuffle_rate, replace_rate, !pool.empty());
  CorruptionResult out{seq, std::vector<int>(len, kUnchanged)};
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), 0);

  std::vector<std::size_t> chosen;
  while (counts.shuffled >= 2) {
    bool found = false;
    for (int attempt = 0; attempt < 32 && !found; ++attempt) {
      std::shuffle(positions.begin(), positions.end(), rng);
      chosen.assign(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(counts.shuffled));
      std::vector<std::size_t> perm = chosen;
      for (int tries = 0; tries < 64; ++tries) {
        std::shuffle(perm.begin(), perm.end(), rng);
        bool ok = true;
        for (std::size_t i = 0; i < chosen.size() && ok; ++i) ok = seq[perm[i]] != seq[chosen[i]];
        if (ok) {
          for (std::size_t i = 0; i < chosen.size(); ++i) {
            out.sequence[chosen[i]] = seq[perm[i]];
            out.labels[chosen[i]] = kShuffled;
          }
          found = true;
          break;
        }
      }
    }
    if (found) break;
    // Not enough distinct items to move; try a smaller shuffle.
    counts.shuffled = counts.shuffled > 2 ? counts.shuffled - 1 : 0;
  }
  if (counts.shuffled < 2) chosen.clear();

  if (counts.replaced > 0) {
    std::vector<std::size_t> free_positions;
    for (std::size_t p = 0; p < len; ++p)
      if (out.labels[p] == kUnchanged) free_positions.push_back(p);
    std::shuffle(free_positions.begin(), free_positions.end(), rng);
    std::uniform_int_distribution<std::size_t> pick_item(0, pool.size() - 1);
    const std::size_t r = std::min(counts.replaced, free_positions.size());
    for (std::size_t i = 0; i < r; ++i) {
      out.sequence[free_positions[i]] = pool[pick_item(rng)];
      out.labels[free_positions[i]] = kReplaced;
    }
  }
  return out;
}

/// Corrupts every sequence of a batch (single-item sequences stay
/// unchanged). Each user's draw depends only on the
/// batch seed, its own sequence and the (sorted) pool of other users' items,
/// so results do not depend on user order.
inline std::vector<CorruptionResult> corrupt_batch(const Batch& batch, double shuffle_rate,
                                                   double replace_rate) {
  std::vector<CorruptionResult> out;
  out.reserve(batch.size());
  for (std::size_t u = 0; u < batch.size(); ++u) {
    const auto& seq = batch.sequences[u];
    if (seq.size() < 2) {
      out.push_back({seq, std::vector<int>(seq.size(), kUnchanged)});
      continue;
    }
    const std::unordered_set<ItemId> own(seq.begin(), seq.end());
    std::vector<ItemId> pool;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      if (k == u) continue;
      for (ItemId id : batch.sequences[k])
        if (!own.count(id)) pool.push_back(id);
    }
    std::sort(pool.begin(), pool.end());
    const auto seq_hash = crc32(0L, reinterpret_cast<const Bytef*>(seq.data()),
                                static_cast<uInt>(seq.size() * sizeof(ItemId)));
    Rng rng(derive_seed(batch.rng_seed, "corrupt", seq_hash));
    out.push_back(corrupt_sequence(seq, pool, shuffle_rate, replace_rate, rng));
  }
  return out;
}

/// Per real position: softmax over ReLU(h̃W + b), cross-entropy against the
/// corruption label; averaged over real positions.
inline Var nid_loss(Var corrupted_hiddens, const std::vector<int>& labels,
                    const std::vector<std::size_t>& lengths, std::size_t length, Var weight,
                    Var bias) {
  std::vector<std::size_t> rows, cls;
  for (std::size_t u = 0; u < lengths.size(); ++u) {
    for (std::size_t l = 0; l < lengths[u]; ++l) {
      const int y = labels.at(u * length + l);
      if (y < 0 || y > 2) {
        throw std::invalid_argument("nid_loss: invalid label at real position " +
                                    std::to_string(l) + " of sequence " + std::to_string(u));
      }
      rows.push_back(u * length + l);
      cls.push_back(static_cast<std::size_t>(y));
    }
  }
  if (rows.empty()) throw std::invalid_argument("nid_loss: no real positions");
  Var logits = relu(add_bias(matmul(gather_rows(corrupted_hiddens, rows), weight), bias));
  const std::size_t n = rows.size();
  Var per_row = sub(masked_logsumexp(logits, Mask(n * 3, 1)), pick(logits, std::move(cls)));
  return weighted_sum(per_row, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Robustness-aware contrastive learning

enum class Pooling { mean, last };

/// Constant [B, B*L] matrix that pools real positions of each sequence.
inline Tensor pooling_matrix(const std::vector<std::size_t>& lengths, std::size_t length,
                             Pooling pooling) {
  const std::size_t b = lengths.size();
  Tensor p(Shape{b, b * length});
  for (std::size_t u = 0; u < b; ++u) {
    if (pooling == Pooling::mean) {
      for (std::size_t l = 0; l < lengths[u]; ++l)
        p.at(u, u * length + l) = 1.0 / static_cast<double>(lengths[u]);
    } else {
      p.at(u, u * length + lengths[u] - 1) = 1.0;
    }
  }
  return p;
}

/// Original vs corrupted pooled representation as positives, other users'
/// corrupted representations as negatives; averaged over the batch.
inline Var rcl_loss(Var original_hiddens, Var corrupted_hiddens,
                    const std::vector<std::size_t>& lengths, std::size_t length,
                    Pooling pooling = Pooling::mean, double temperature = 1.0) {
  const std::size_t b = lengths.size();
  if (b < 1) throw std::invalid_argument("rcl_loss: batch size must be >= 1");
  Tape& t = original_hiddens.tape();
  Var pool = t.constant(pooling_matrix(lengths, length, pooling));
  Var h = matmul(pool, original_hiddens);
  Var h_tilde = matmul(pool, corrupted_hiddens);
  Var scores = matmul(h, h_tilde, /*transpose_w=*/true);
  if (temperature != 1.0) scores = scale(scores, 1.0 / temperature);
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  Var per_row = sub(masked_logsumexp(scores, Mask(b * b, 1)), pick(scores, std::move(diag)));
  return weighted_sum(per_row, std::vector<double>(b, 1.0 / static_cast<double>(b)));
}

// ---------------------------------------------------------------------------
// Multi-task total

struct ObjectiveConfig {
  bool dap = true;
  ContrastiveVariant contrastive = ContrastiveVariant::nicl;
  bool nid = true;
  bool rcl = true;
  double dap_weight = 1.0;
  double contrastive_weight = 1.0;
  double nid_weight = 1.0;
  double rcl_weight = 1.0;
  double temperature = 1.0;
  Pooling pooling = Pooling::mean;
  double shuffle_rate = 0.15;
  double replace_rate = 0.05;

  static ObjectiveConfig dap_only() {
    ObjectiveConfig c;
    c.contrastive = ContrastiveVariant::none;
    c.nid = false;
    c.rcl = false;
    return c;
  }
};

struct LossBreakdown {
  Var total;
  double dap = 0.0;
  double contrastive = 0.0;
  double nid = 0.0;
  double rcl = 0.0;
};

/// Full pipeline for one batch: encode items, fuse, run the user encoder on
/// original and corrupted sequences, and sum the enabled objectives.
inline LossBreakdown total_loss(Tape& t, Model& model, const Catalog& catalog, const Batch& batch,
                                const ObjectiveConfig& cfg, Rng* dropout_rng = nullptr) {
  if (!cfg.dap && cfg.contrastive == ContrastiveVariant::none && !cfg.nid && !cfg.rcl) {
    throw std::invalid_argument("total_loss: no objective enabled");
  }
  if (!model.user) throw std::invalid_argument("total_loss: model has no user encoder");
  const BatchLayout lay = BatchLayout::build(batch.sequences);
  ItemEncoding enc = encode_items(t, model, catalog, lay.unique_items);

  auto run_user = [&](const std::vector<std::vector<ItemId>>& seqs) {
    SequenceInput in{gather_rows(enc.rep, lay.padded_slots(seqs)), lay.batch, lay.length,
                     lay.lengths};
    return model.user->encode(t, in, dropout_rng);
  };

  LossBreakdown out;
  std::vector<Var> terms;
  Var hiddens;
  if (cfg.dap || cfg.rcl) hiddens = run_user(batch.sequences);
  if (cfg.dap) {
    Var occ = gather_rows(enc.rep, lay.occ_slot);
    Var l = dap_loss(hiddens, occ, lay, cfg.temperature);
    out.dap = l.value().item();
    terms.push_back(scale(l, cfg.dap_weight));
  }
  if (cfg.contrastive != ContrastiveVariant::none) {
    if (!enc.t_cls.valid() || !enc.v_cls.valid()) {
      throw std::invalid_argument("total_loss: contrastive objectives need both modalities");
    }
    Var tn = l2_normalize(gather_rows(enc.t_cls, lay.occ_slot));
    Var vn = l2_normalize(gather_rows(enc.v_cls, lay.occ_slot));
    Var l = contrastive_loss(cfg.contrastive, tn, vn, lay, cfg.temperature);
    out.contrastive = l.value().item();
    terms.push_back(scale(l, cfg.contrastive_weight));
  }
  if (cfg.nid || cfg.rcl) {
    const auto corrupted = corrupt_batch(batch, cfg.shuffle_rate, cfg.replace_rate);
    std::vector<std::vector<ItemId>> seqs;
    std::vector<int> labels(lay.batch * lay.length, kPadLabel);
    for (std::size_t u = 0; u < corrupted.size(); ++u) {
      seqs.push_back(corrupted[u].sequence);
      for (std::size_t l = 0; l < corrupted[u].labels.size(); ++l)
        labels[u * lay.length + l] = corrupted[u].labels[l];
    }
    Var corrupted_hiddens = run_user(seqs);
    if (cfg.nid) {
      if (!model.nid) throw std::invalid_argument("total_loss: model has no NID head");
      Var l = nid_loss(corrupted_hiddens, labels, lay.lengths, lay.length,
                       t.parameter(model.nid->weight), t.parameter(model.nid->bias));
      out.nid = l.value().item();
      terms.push_back(scale(l, cfg.nid_weight));
    }
    if (cfg.rcl) {
      Var l = rcl_loss(hiddens, corrupted_hiddens, lay.lengths, lay.length, cfg.pooling,
                       cfg.temperature);
      out.rcl = l.value().item();
      terms.push_back(scale(l, cfg.rcl_weight));
    }
  }
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  return out;
}

}  // namespace pmmrec
