#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmmrec/encoders.hpp"
#include "pmmrec/nn.hpp"

namespace pmmrec {

/// B right-padded sequences of item representations.
struct SequenceInput {
  Var item_reps;  // [B * L, d]; rows at padded positions are ignored
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> real_lengths;  // per sequence, contiguous prefix
};

/// SASRec-style causal transformer with a learned position table.
class UserEncoder {
 public:
  UserEncoder() = default;
  UserEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    positions_ = make_param("positions", gaussian({cfg.max_len, cfg.d}, kInitStd, rng));
    for (std::size_t b = 0; b < cfg.user_blocks; ++b) {
      blocks_.emplace_back("blocks." + std::to_string(b), cfg.d, cfg.n_heads, rng);
    }
    final_ln_ = LayerNorm("final_ln", cfg.d);
  }

  /// Returns h for every position as [B * L, d]. Position l attends to
  /// real positions <= l only. `dropout_rng` enables input dropout.
  Var encode(Tape& t, const SequenceInput& in, Rng* dropout_rng = nullptr) {
    const std::size_t b = in.batch, len = in.length, d = cfg_.d;
    const Tensor& reps = in.item_reps.value();
    if (reps.cols() != d || reps.rows() != b * len) {
      throw ShapeError("encode_sequence: item representations " + shape_string(reps.shape()) +
                       " do not match [" + std::to_string(b * len) + ", " + std::to_string(d) +
                       "]");
    }
    if (len > cfg_.max_len) {
      throw std::invalid_argument("encode_sequence: length " + std::to_string(len) +
                                  " exceeds position table size " +
                                  std::to_string(cfg_.max_len));
    }
    if (in.real_lengths.size() != b) {
      throw std::invalid_argument("encode_sequence: one real length per sequence required");
    }
    AttentionSpec spec{b, len, Mask(b * len, 0), true};
    for (std::size_t u = 0; u < b; ++u) {
      if (in.real_lengths[u] == 0 || in.real_lengths[u] > len) {
        throw std::invalid_argument("encode_sequence: sequence without real items");
      }
      for (std::size_t l = 0; l < in.real_lengths[u]; ++l) spec.key_mask[u * len + l] = 1;
    }
    std::vector<std::size_t> pos(b * len);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % len;
    Var x = add(in.item_reps, gather_rows(t.parameter(positions_), std::move(pos)));
    if (dropout_rng != nullptr && cfg_.dropout > 0.0) x = dropout(x, cfg_.dropout, *dropout_rng);
    x = reshape(x, {b, len, d});
    for (auto& blk : blocks_) x = blk.forward(t, x, spec);
    x = final_ln_(t, x);
    return reshape(x, {b * len, d});
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&positions_};
    for (auto& blk : blocks_) blk.collect(out);
    final_ln_.collect(out);
    return out;
  }

 private:
  ModelConfig cfg_;
  Parameter positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
};

/// Linear 3-way classifier used by noised item detection.
struct NidHead {
  Parameter weight;  // [d, 3]
  Parameter bias;    // [3]

  NidHead() = default;
  NidHead(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    weight = make_param("weight", gaussian({cfg.d, 3}, kInitStd, rng));
    bias = make_param("bias", Tensor(Shape{3}));
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

}  // namespace pmmrec
