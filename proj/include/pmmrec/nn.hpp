#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pmmrec/ops.hpp"
#include "pmmrec/random.hpp"
#include "pmmrec/tape.hpp"

namespace pmmrec {

inline constexpr double kInitStd = 0.02;

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Parameter make_param(std::string name, Tensor value) {
  return Parameter(std::move(name), std::move(value));
}

/// y = x·W + b with W of shape [in, out].
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(make_param(name + ".weight", gaussian({in, out}, kInitStd, rng))),
        bias(make_param(name + ".bias", Tensor(Shape{out}))) {}

  Var operator()(Tape& t, Var x) {
    return add_bias(matmul(x, t.parameter(weight)), t.parameter(bias));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t d)
      : gain(make_param(name + ".gain", Tensor(Shape{d}, 1.0))),
        bias(make_param(name + ".bias", Tensor(Shape{d}))) {}

  Var operator()(Tape& t, Var x) {
    return layer_norm(x, t.parameter(gain), t.parameter(bias));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

/// Which keys each query may attend to, for a batch of N sequences.
struct AttentionSpec {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> key_mask;  // batch * length, 1 = attendable
  bool causal = false;

  static AttentionSpec all_visible(std::size_t batch, std::size_t length) {
    return {batch, length, std::vector<std::uint8_t>(batch * length, 1), false};
  }

  /// Full score mask for [batch * heads, queries, length] scores. With
  /// `first_only`, the single query is position 0.
  Mask score_mask(std::size_t heads, bool first_only) const {
    const std::size_t nq = first_only ? 1 : length;
    Mask m(batch * heads * nq * length);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t q = 0; q < nq; ++q)
          for (std::size_t k = 0; k < length; ++k)
            m[o++] = key_mask[b * length + k] && (!causal || k <= q);
    return m;
  }
};

/// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : d_(d),
        heads_(heads),
        ln1_(name + ".ln1", d),
        query_(name + ".attn.query", d, d, rng),
        key_(name + ".attn.key", d, d, rng),
        value_(name + ".attn.value", d, d, rng),
        out_(name + ".attn.out", d, d, rng),
        ln2_(name + ".ln2", d),
        ff1_(name + ".ffn.in", d, 4 * d, rng),
        ff2_(name + ".ffn.out", 4 * d, d, rng) {
    if (heads == 0 || d % heads != 0) {
      throw std::invalid_argument("hidden size " + std::to_string(d) +
                                  " is not divisible by head count " + std::to_string(heads));
    }
  }

  /// x: [N, n, d] → [N, n, d].
  Var forward(Tape& t, Var x, const AttentionSpec& spec) { return run(t, x, spec, false); }

  /// Only position 0 issues a query: x [N, n, d] → [N, 1, d]. The result
  /// equals row 0 of `forward`.
  Var forward_first(Tape& t, Var x, const AttentionSpec& spec) { return run(t, x, spec, true); }

  void collect(std::vector<Parameter*>& out) {
    ln1_.collect(out);
    query_.collect(out);
    key_.collect(out);
    value_.collect(out);
    out_.collect(out);
    ln2_.collect(out);
    ff1_.collect(out);
    ff2_.collect(out);
  }

 private:
  Var split_heads(Var x, std::size_t n, std::size_t len) const {
    const std::size_t dh = d_ / heads_;
    Var r = reshape(x, {n, len, heads_, dh});
    r = permute4(r, {0, 2, 1, 3});
    return reshape(r, {n * heads_, len, dh});
  }

  Var merge_heads(Var x, std::size_t n, std::size_t len) const {
    const std::size_t dh = d_ / heads_;
    Var r = reshape(x, {n, heads_, len, dh});
    r = permute4(r, {0, 2, 1, 3});
    return reshape(r, {n, len, d_});
  }

  Var run(Tape& t, Var x, const AttentionSpec& spec, bool first_only) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != d_ || s[0] != spec.batch || s[1] != spec.length) {
      throw ShapeError("transformer block: input " + shape_string(s) + " does not match [" +
                       std::to_string(spec.batch) + ", " + std::to_string(spec.length) +
                       ", " + std::to_string(d_) + "]");
    }
    const std::size_t n = s[0], len = s[1];
    const std::size_t nq = first_only ? 1 : len;

    Var normed = ln1_(t, x);
    Var residual = x;
    Var q_in = normed;
    if (first_only) {
      std::vector<std::size_t> firsts(n);
      for (std::size_t i = 0; i < n; ++i) firsts[i] = i * len;
      q_in = reshape(gather_rows(normed, firsts), {n, 1, d_});
      residual = reshape(gather_rows(x, firsts), {n, 1, d_});
    }
    Var q = split_heads(query_(t, q_in), n, nq);
    Var k = split_heads(key_(t, normed), n, len);
    Var v = split_heads(value_(t, normed), n, len);

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_ / heads_));
    Var scores = scale(bmm(q, k, /*transpose_b=*/true), inv_sqrt);
    const Mask mask = spec.score_mask(heads_, first_only);
    Var probs = softmax(scores, &mask);
    Var ctx = merge_heads(bmm(probs, v), n, nq);
    Var h = add(residual, out_(t, ctx));

    Var f = ff2_(t, gelu(ff1_(t, ln2_(t, h))));
    return add(h, f);
  }

  std::size_t d_ = 0;
  std::size_t heads_ = 1;
  LayerNorm ln1_;
  Linear query_, key_, value_, out_;
  LayerNorm ln2_;
  Linear ff1_, ff2_;
};

}  // namespace pmmrec
