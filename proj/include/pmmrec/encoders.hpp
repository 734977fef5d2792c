#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmmrec/nn.hpp"
#include "pmmrec/types.hpp"

namespace pmmrec {

/// Architecture hyper-parameters shared by every component of the model.
struct ModelConfig {
  std::size_t d = 32;
  std::size_t n_heads = 4;
  std::size_t encoder_blocks = 2;  // per item encoder (text and vision)
  std::size_t user_blocks = 2;
  std::size_t vocab_size = 1000;
  std::size_t p_max = 16;
  std::size_t q = 16;
  std::size_t patch_dim = 12;
  std::size_t max_len = 20;
  std::size_t trainable_top_blocks = 0;  // 0 = all blocks trainable
  bool vision_positions = true;
  double dropout = 0.0;

  void validate() const {
    if (d == 0 || n_heads == 0 || d % n_heads != 0) {
      throw std::invalid_argument("d must be a positive multiple of n_heads");
    }
    if (encoder_blocks == 0 || user_blocks == 0) {
      throw std::invalid_argument("block counts must be >= 1");
    }
    if (trainable_top_blocks > encoder_blocks) {
      throw std::invalid_argument("trainable_top_blocks must be in [1, encoder_blocks] or 0 (all)");
    }
    if (vocab_size < 2 || p_max == 0 || q == 0 || patch_dim == 0 || max_len < 2) {
      throw std::invalid_argument("vocab_size, p_max, q, patch_dim and max_len must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// cls vector + per-position hiddens emitted by an item encoder.
struct ModalityOutput {
  Var cls;      // [N, d]
  Var hiddens;  // [N * length, d], zero at masked positions
  std::size_t length = 0;
  Mask mask;    // N * length, 1 = real position
};

namespace detail {

inline Var run_blocks(Tape& t, std::vector<TransformerBlock>& blocks, Var x,
                      const AttentionSpec& spec) {
  for (auto& b : blocks) x = b.forward(t, x, spec);
  return x;
}

/// Splits [N, 1 + len, d] encoder output into cls rows and position rows.
inline ModalityOutput split_cls(Var out, std::size_t n, std::size_t len, Mask mask) {
  std::vector<std::size_t> cls_rows(n), body_rows;
  body_rows.reserve(n * len);
  for (std::size_t i = 0; i < n; ++i) {
    cls_rows[i] = i * (len + 1);
    for (std::size_t j = 0; j < len; ++j) body_rows.push_back(i * (len + 1) + 1 + j);
  }
  Var body = gather_rows(out, std::move(body_rows));
  bool any_masked = false;
  for (auto m : mask) any_masked = any_masked || !m;
  if (any_masked) {
    Mask wide(mask.size() * out.value().cols());
    const std::size_t d = out.value().cols();
    for (std::size_t r = 0; r < mask.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) wide[r * d + c] = mask[r];
    body = apply_mask(body, wide);
  }
  return {gather_rows(out, std::move(cls_rows)), body, len, std::move(mask)};
}

inline void freeze_below_top(std::vector<TransformerBlock>& blocks, std::size_t top,
                             std::vector<Parameter*> always_frozen) {
  for (Parameter* p : always_frozen) p->trainable = (top == 0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::vector<Parameter*> ps;
    blocks[b].collect(ps);
    const bool trainable = top == 0 || b + top >= blocks.size();
    for (Parameter* p : ps) p->trainable = trainable;
  }
}

}  // namespace detail

/// Bidirectional transformer over [cls; tokens] with learned positions.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg) {
    Rng rng(seed);
    token_embedding_ = make_param("token_embedding", gaussian({cfg.vocab_size, cfg.d}, kInitStd, rng));
    cls_ = make_param("cls", gaussian({1, cfg.d}, kInitStd, rng));
    positions_ = make_param("positions", gaussian({cfg.p_max + 1, cfg.d}, kInitStd, rng));
    for (std::size_t b = 0; b < cfg.encoder_blocks; ++b) {
      blocks_.emplace_back("blocks." + std::to_string(b), cfg.d, cfg.n_heads, rng);
    }
    final_ln_ = LayerNorm("final_ln", cfg.d);
  }

  /// Encodes N padded token sequences. Ids stored at padded positions are
  /// ignored (the reserved pad id is used instead).
  ModalityOutput encode(Tape& t, const std::vector<TokenSequence>& items) {
    const std::size_t n = items.size(), len = cfg_.p_max;
    if (n == 0) throw std::invalid_argument("encode_text: no items");
    std::vector<std::size_t> rows;
    rows.reserve(n * (len + 1));
    AttentionSpec spec{n, len + 1, {}, false};
    spec.key_mask.reserve(n * (len + 1));
    Mask mask;
    mask.reserve(n * len);
    for (const TokenSequence& s : items) {
      if (s.token_ids.size() != len || s.pad_mask.size() != len) {
        throw std::invalid_argument("encode_text: expected " + std::to_string(len) +
                                    " token positions, got " + std::to_string(s.token_ids.size()));
      }
      bool any_real = false;
      rows.push_back(0);  // cls row of the combined table
      spec.key_mask.push_back(1);
      for (std::size_t j = 0; j < len; ++j) {
        const bool real = s.pad_mask[j] != 0;
        const std::int32_t id = real ? s.token_ids[j] : kPadToken;
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
          throw std::invalid_argument("encode_text: token id " + std::to_string(id) +
                                      " outside vocabulary of size " +
                                      std::to_string(cfg_.vocab_size));
        }
        any_real = any_real || real;
        rows.push_back(1 + static_cast<std::size_t>(id));
        spec.key_mask.push_back(real);
        mask.push_back(real);
      }
      if (!any_real) throw std::invalid_argument("encode_text: item without real tokens");
    }
    Var table = concat_rows({t.parameter(cls_), t.parameter(token_embedding_)});
    Var x = gather_rows(table, std::move(rows));
    std::vector<std::size_t> pos(n * (len + 1));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % (len + 1);
    x = add(x, gather_rows(t.parameter(positions_), std::move(pos)));
    x = reshape(x, {n, len + 1, cfg_.d});
    x = detail::run_blocks(t, blocks_, x, spec);
    x = final_ln_(t, x);
    return detail::split_cls(x, n, len, std::move(mask));
  }

  void set_trainable_top_blocks(std::size_t top) {
    detail::freeze_below_top(blocks_, top,
                             {&token_embedding_, &cls_, &positions_});
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&token_embedding_, &cls_, &positions_};
    for (auto& b : blocks_) b.collect(out);
    final_ln_.collect(out);
    return out;
  }

  /// Parameters of block `b` only (for freezing tests).
  std::vector<Parameter*> block_parameters(std::size_t b) {
    std::vector<Parameter*> out;
    blocks_.at(b).collect(out);
    return out;
  }

 private:
  ModelConfig cfg_;
  Parameter token_embedding_, cls_, positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
};

/// Transformer over [cls; projected patches].
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    projection_ = Linear("patch_projection", cfg.patch_dim, cfg.d, rng);
    cls_ = make_param("cls", gaussian({1, cfg.d}, kInitStd, rng));
    positions_ = make_param("positions", gaussian({cfg.q + 1, cfg.d}, kInitStd, rng));
    for (std::size_t b = 0; b < cfg.encoder_blocks; ++b) {
      blocks_.emplace_back("blocks." + std::to_string(b), cfg.d, cfg.n_heads, rng);
    }
    final_ln_ = LayerNorm("final_ln", cfg.d);
  }

  ModalityOutput encode(Tape& t, const std::vector<PatchSequence>& items) {
    const std::size_t n = items.size(), len = cfg_.q, pd = cfg_.patch_dim;
    if (n == 0) throw std::invalid_argument("encode_vision: no items");
    Tensor raw(Shape{n * len, pd});
    for (std::size_t i = 0; i < n; ++i) {
      const PatchSequence& p = items[i];
      if (p.count != len || p.dim != pd || p.values.size() != len * pd) {
        throw std::invalid_argument("encode_vision: expected " + std::to_string(len) +
                                    " patches of dimension " + std::to_string(pd) + ", got " +
                                    std::to_string(p.count) + " of dimension " +
                                    std::to_string(p.dim));
      }
      std::copy(p.values.begin(), p.values.end(), raw.data() + i * len * pd);
    }
    Var projected = projection_(t, t.constant(std::move(raw)));
    Var table = concat_rows({t.parameter(cls_), projected});
    std::vector<std::size_t> rows;
    rows.reserve(n * (len + 1));
    for (std::size_t i = 0; i < n; ++i) {
      rows.push_back(0);
      for (std::size_t j = 0; j < len; ++j) rows.push_back(1 + i * len + j);
    }
    Var x = gather_rows(table, std::move(rows));
    if (cfg_.vision_positions) {
      std::vector<std::size_t> pos(n * (len + 1));
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % (len + 1);
      x = add(x, gather_rows(t.parameter(positions_), std::move(pos)));
    }
    x = reshape(x, {n, len + 1, cfg_.d});
    x = detail::run_blocks(t, blocks_, x, AttentionSpec::all_visible(n, len + 1));
    x = final_ln_(t, x);
    return detail::split_cls(x, n, len, Mask(n * len, 1));
  }

  void set_trainable_top_blocks(std::size_t top) {
    detail::freeze_below_top(blocks_, top,
                             {&projection_.weight, &projection_.bias, &cls_, &positions_});
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    projection_.collect(out);
    out.push_back(&cls_);
    out.push_back(&positions_);
    for (auto& b : blocks_) b.collect(out);
    final_ln_.collect(out);
    return out;
  }

  std::vector<Parameter*> block_parameters(std::size_t b) {
    std::vector<Parameter*> out;
    blocks_.at(b).collect(out);
    return out;
  }

 private:
  ModelConfig cfg_;
  Linear projection_;
  Parameter cls_, positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
};

/// Merge-attention fusion: one transformer layer over
/// [mm_cls; text hiddens; patch hiddens], read out at mm_cls.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    mm_cls_ = make_param("mm_cls", gaussian({1, cfg.d}, kInitStd, rng));
    block_ = TransformerBlock("block", cfg.d, cfg.n_heads, rng);
    final_ln_ = LayerNorm("final_ln", cfg.d);
  }

  /// Returns e_cls as [N, d]. Text positions with mask 0 are not attended.
  Var fuse(Tape& t, const ModalityOutput& text, const ModalityOutput& vision) {
    const std::size_t d = cfg_.d;
    if (text.hiddens.value().cols() != d || vision.hiddens.value().cols() != d) {
      throw ShapeError("fuse: modality dimension differs from d=" + std::to_string(d));
    }
    const std::size_t p = text.length, q = vision.length;
    const std::size_t n = text.hiddens.value().rows() / p;
    if (vision.hiddens.value().rows() != n * q || text.mask.size() != n * p) {
      throw ShapeError("fuse: text and vision batches differ");
    }
    const std::size_t len = 1 + p + q;
    Var table = concat_rows({t.parameter(mm_cls_), text.hiddens, vision.hiddens});
    std::vector<std::size_t> rows;
    rows.reserve(n * len);
    AttentionSpec spec{n, len, {}, false};
    spec.key_mask.reserve(n * len);
    for (std::size_t i = 0; i < n; ++i) {
      rows.push_back(0);
      spec.key_mask.push_back(1);
      for (std::size_t j = 0; j < p; ++j) {
        rows.push_back(1 + i * p + j);
        spec.key_mask.push_back(text.mask[i * p + j]);
      }
      for (std::size_t j = 0; j < q; ++j) {
        rows.push_back(1 + n * p + i * q + j);
        spec.key_mask.push_back(1);
      }
    }
    Var x = reshape(gather_rows(table, std::move(rows)), {n, len, d});
    Var out = block_.forward_first(t, x, spec);
    return reshape(final_ln_(t, out), {n, d});
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&mm_cls_};
    block_.collect(out);
    final_ln_.collect(out);
    return out;
  }

 private:
  ModelConfig cfg_;
  Parameter mm_cls_;
  TransformerBlock block_;
  LayerNorm final_ln_;
};

}  // namespace pmmrec
