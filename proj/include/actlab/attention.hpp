#pragma once

// Causal multi-head attention with the five bias formulations, plus the
// probability/logit extraction and the output decomposition used by the
// concentration analyses. Everything here is per-head; the model stitches
// heads together.

#include <string>
#include <vector>

#include "actlab/tensor.hpp"

namespace actlab {

enum class AttentionVariant : int {
    standard = 0,
    explicit_kv_bias = 1,
    off_by_one = 2,
    extra_qk_feature = 3,
    value_bias = 4,
};

const char* variant_name(AttentionVariant v);
AttentionVariant variant_from_name(const std::string& name);

// Per-head variant parameters; only the fields the active variant demands may
// be set. k_bias/v_bias are rows [1 x d_head]; q_col/k_col are columns
// [T_max x 1] tied to absolute positions (shorter sequences use a prefix).
struct AttentionVariantParams {
    AttentionVariant variant = AttentionVariant::standard;
    Tensor k_bias;
    Tensor v_bias;
    Tensor q_col;
    Tensor k_col;
};

// Graph-carrying result of one head. logits are the softmax input (scaled,
// causally masked with the -1e9 sentinel, bias column last when present).
struct HeadAttention {
    Tensor output;  // [T x d_head]
    Tensor probs;   // [T x C], C = T or T+1
    Tensor logits;  // [T x C]
    bool has_bias_column = false;
};

HeadAttention causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionVariantParams& params);

// Plain-data snapshot of a layer's attention maps, [heads x T x C].
struct AttentionProbs {
    std::int64_t heads = 0;
    std::int64_t t = 0;
    std::int64_t cols = 0;
    bool has_bias_column = false;
    std::vector<double> probs;
    std::vector<double> logits;

    double prob(std::int64_t h, std::int64_t q, std::int64_t j) const {
        return probs[(h * t + q) * cols + j];
    }
    double logit(std::int64_t h, std::int64_t q, std::int64_t j) const {
        return logits[(h * t + q) * cols + j];
    }
};

AttentionProbs snapshot_heads(const std::vector<HeadAttention>& heads);

// One head's maps as a standalone heads==1 snapshot.
AttentionProbs single_head(const AttentionProbs& probs, std::int64_t head);

struct ConcentrationSet {
    std::vector<std::int64_t> token_indices;  // kept sorted ascending, unique
};

enum class ProbsReduce { logits, probs };

// Elementwise mean over heads of the stored maps (causality is already baked
// into the maps: zero probability / sentinel logits above the diagonal).
// Returns a plain [T x C] tensor.
Tensor attention_probs_avg(const AttentionProbs& probs, ProbsReduce reduce);

// Additive split of one head's output row k: bias_part sums the concentration
// set C, rest_part sums the remaining causal tokens; the bias slot (when
// present) and an optional extra additive bias (value_bias v') land in
// rest_part. Ascending token order throughout, so the two parts re-add to the
// attention output row.
void decompose_output(const AttentionProbs& probs, const Tensor& v, const ConcentrationSet& c,
                      std::int64_t k, std::vector<double>& bias_part,
                      std::vector<double>& rest_part,
                      const std::vector<double>* extra_value_bias = nullptr);

// Mean over heads and query positions k >= max(C) of the probability mass on
// C. Empty C ->  0.
double concentration_score(const AttentionProbs& probs, const ConcentrationSet& c);

}  // namespace actlab
