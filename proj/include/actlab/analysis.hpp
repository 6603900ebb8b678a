#pragma once

// Attention-side analyses: averaged attention maps with concentration scores,
// value-update similarity across query tokens and across prompts, and the
// normalization trajectory through one block (input -> normalized -> rescaled
// -> per-head Q/K/V).

#include <cstdint>
#include <string>
#include <vector>

#include "actlab/instrument.hpp"
#include "actlab/model.hpp"

namespace actlab {

enum class TrajectoryStage { input, normalized, rescaled, query, key, value };

const char* stage_name(TrajectoryStage s);

struct TrajectorySnapshot {
    TrajectoryStage stage = TrajectoryStage::input;
    std::int64_t head = -1;  // >= 0 for the per-head query/key/value stages
    Tensor state;            // [T x d] or [T x d_head]
    // token indices carrying massive activations in the block's input state
    std::vector<std::int64_t> highlighted;
};

// Stages of block `layer`, captured from the live forward pass (never
// recomputed). Order: input, normalized, rescaled, then query/key/value with
// heads ascending inside each stage.
std::vector<TrajectorySnapshot> norm_trajectory(const Model& model,
                                                const std::vector<std::int32_t>& tokens,
                                                std::int64_t layer,
                                                double abs_threshold = kAbsThresholdDefault,
                                                double ratio_threshold = kRatioThresholdDefault);

// How the concentration set C is chosen for a prompt: detect runs the massive
// -activation detector on the block's input state; explicit_indices takes the
// token indices as given.
struct ConcentrationSelector {
    enum class Kind { detect, explicit_indices };
    Kind kind = Kind::detect;
    std::vector<std::int64_t> indices;
    double abs_threshold = kAbsThresholdDefault;
    double ratio_threshold = kRatioThresholdDefault;

    static ConcentrationSelector detect(double abs_thr = kAbsThresholdDefault,
                                        double ratio_thr = kRatioThresholdDefault) {
        ConcentrationSelector s;
        s.abs_threshold = abs_thr;
        s.ratio_threshold = ratio_thr;
        return s;
    }
    static ConcentrationSelector explicit_set(std::vector<std::int64_t> idx) {
        ConcentrationSelector s;
        s.kind = Kind::explicit_indices;
        s.indices = std::move(idx);
        return s;
    }
};

struct SimilarityMatrix {
    std::int64_t n = 0;
    std::vector<std::string> labels;  // row/column labels
    std::vector<double> cosine;       // [n x n], NaN where undefined
    std::vector<double> l2;           // [n x n]

    double cos(std::int64_t i, std::int64_t j) const { return cosine[i * n + j]; }
    double dist(std::int64_t i, std::int64_t j) const { return l2[i * n + j]; }
};

struct ValueUpdateReport {
    std::int64_t layer = 0;
    // per prompt: the resolved concentration set, the query token indices
    // past max(C), and the aggregate value update b_k (heads concatenated,
    // length d_model) at each of those query tokens
    std::vector<std::vector<std::int64_t>> c_sets;
    std::vector<std::vector<std::int64_t>> query_tokens;
    std::vector<std::vector<std::vector<double>>> updates;
    std::vector<SimilarityMatrix> within;  // per prompt, across its query tokens
    SimilarityMatrix cross;                // across prompts, matched offsets from max(C)
};

ValueUpdateReport value_update_similarity(const Model& model,
                                          const std::vector<std::vector<std::int32_t>>& prompts,
                                          std::int64_t layer, const ConcentrationSelector& sel);

struct AttentionLayerReport {
    std::int64_t layer = 0;  // block index
    std::int64_t t = 0;
    std::int64_t cols = 0;  // t, or t+1 with a trailing bias column
    bool has_bias_column = false;
    std::vector<double> avg_probs;   // [t x cols], mean over heads
    std::vector<double> avg_logits;  // [t x cols], softmax inputs (post-scaling)
    ConcentrationSet massive_tokens;  // detector hits on the block's input
    double concentration = 0.0;       // mass on massive_tokens; 0 when the set is empty
};

struct AttentionReport {
    std::vector<std::string> token_strings;
    std::vector<AttentionLayerReport> layers;
};

AttentionReport attention_report(const Model& model, const std::vector<std::int32_t>& tokens,
                                 const std::vector<std::int64_t>& layers,
                                 double abs_threshold = kAbsThresholdDefault,
                                 double ratio_threshold = kRatioThresholdDefault);

// dot(a,b) / sqrt(|a||b|), clamped to [-1, 1]; NaN when either norm is zero.
// Bit-identical inputs give exactly 1.
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
double l2_distance(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace actlab
