#pragma once

#include <array>
#include <vector>

#include "mrh/tape.hpp"
#include "mrh/tensor.hpp"

namespace mrh {

class Rng;

// Per-contrast fusion weights. Entries for unavailable contrasts are
// exactly zero; the rest are a softmax, so they are nonnegative and sum
// to one.
using AttentionWeights = std::array<double, 4>;

// Which of the four source contrasts are present. At least one must be.
using AvailabilityMask = std::array<bool, 4>;

// Softmax over the entries of `logits` selected by `mask`; deselected
// entries come back exactly zero. Masking excludes a logit from the
// softmax, which gives the same weights as renormalizing a full softmax
// afterwards (asserted in tests).
AttentionWeights softmax_masked(const std::array<double, 4>& logits, const AvailabilityMask& mask);

// alpha_i = softmax over available i of (k_i . q) / sqrt(d). Keys of
// unavailable contrasts may be empty; available keys must share q's size.
// Throws if no contrast is available.
AttentionWeights compute_attention(const std::vector<std::vector<double>>& keys,
                                   const std::vector<double>& query,
                                   const AvailabilityMask& mask);

// Zero the dropped entries and renormalize the survivors to sum one.
// Throws if the drop would zero everything that was nonzero.
AttentionWeights attention_dropout(const AttentionWeights& alpha, const AvailabilityMask& drop);

// Training-time dropout draw: with probability p, pick a drop set
// uniformly over the nonempty proper subsets of the available contrasts,
// so even a full quartet can lose sources but never all of them. With
// fewer than two available, or with probability 1-p, nothing is dropped.
AvailabilityMask sample_attention_dropout(const AvailabilityMask& available, Rng& rng,
                                          double p = 0.2);

// beta* = sum_i alpha_i beta_i over available contrasts. `betas` holds one
// rep per available contrast in contrast-index order; alpha entries at
// unavailable slots must be exactly zero. A convex combination of points
// on the channel simplex stays on it.
Tensor fuse_anatomy(const std::vector<Tensor>& betas, const AttentionWeights& alpha,
                    const AvailabilityMask& mask);

// Differentiable path used in training, over the available contrasts only
// (compact lists, aligned with each other): weights = softmax of scaled
// key-query dots, fused = weighted sum of the betas under those weights.
// Unavailable contrasts never enter the graph, so their gradient is
// structurally zero.
ad::Var attention_weights_compact(ad::Tape& t, const std::vector<ad::Var>& keys, ad::Var query);
ad::Var fuse_anatomy_compact(ad::Tape& t, const std::vector<ad::Var>& betas, ad::Var weights);

}  // namespace mrh
