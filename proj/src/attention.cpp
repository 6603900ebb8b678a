#include "actlab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace actlab {

namespace {

constexpr double kMaskSentinel = -1e9;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require_row(const Tensor& t, std::int64_t d, const char* variant, const char* field) {
    if (!t.valid()) fail(std::string(variant) + ": missing " + field);
    if (t.rows() != 1 || t.cols() != d)
        fail(std::string(variant) + ": " + field + " must be [1 x " + std::to_string(d) +
             "], got " + shape_str(t.shape()));
}

void require_absent(const Tensor& t, const char* variant, const char* field) {
    if (t.valid()) fail(std::string(variant) + ": unexpected " + field);
}

// Additive causal mask, 0 on allowed entries, -1e9 sentinel elsewhere. The
// bias column (when present) is appended last and visible to every query.
Tensor causal_mask(std::int64_t t, bool bias_column) {
    const std::int64_t c = t + (bias_column ? 1 : 0);
    Tensor m = Tensor::zeros({t, c});
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = i + 1; j < t; ++j) m.data()[i * c + j] = kMaskSentinel;
    return m;
}

HeadAttention attend(const Tensor& q, const Tensor& k_aug, const Tensor& v_aug, double scale_by,
                     std::int64_t t, bool bias_column) {
    HeadAttention out;
    out.has_bias_column = bias_column;
    Tensor logits = scale(matmul_nt(q, k_aug), scale_by);
    out.logits = add(logits, causal_mask(t, bias_column));
    out.probs = softmax_rows(out.logits);
    out.output = matmul(out.probs, v_aug);
    return out;
}

}  // namespace

const char* variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::standard: return "standard";
        case AttentionVariant::explicit_kv_bias: return "explicit_kv_bias";
        case AttentionVariant::off_by_one: return "off_by_one";
        case AttentionVariant::extra_qk_feature: return "extra_qk_feature";
        case AttentionVariant::value_bias: return "value_bias";
    }
    fail("unknown attention variant tag");
}

AttentionVariant variant_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(AttentionVariant::value_bias); ++i)
        if (name == variant_name(static_cast<AttentionVariant>(i)))
            return static_cast<AttentionVariant>(i);
    fail("unknown attention variant '" + name + "'");
}

HeadAttention causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionVariantParams& params) {
    if (!q.valid() || !k.valid() || !v.valid()) fail("causal_attention: uninitialized input");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        fail("causal_attention: Q/K/V shape mismatch " + shape_str(q.shape()) + " vs " +
             shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    const std::int64_t t = q.rows(), dh = q.cols();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    switch (params.variant) {
        case AttentionVariant::standard: {
            require_absent(params.k_bias, "standard", "k_bias");
            require_absent(params.v_bias, "standard", "v_bias");
            require_absent(params.q_col, "standard", "q_col");
            require_absent(params.k_col, "standard", "k_col");
            return attend(q, k, v, inv_sqrt, t, false);
        }
        case AttentionVariant::explicit_kv_bias: {
            require_row(params.k_bias, dh, "explicit_kv_bias", "k_bias");
            require_row(params.v_bias, dh, "explicit_kv_bias", "v_bias");
            require_absent(params.q_col, "explicit_kv_bias", "q_col");
            require_absent(params.k_col, "explicit_kv_bias", "k_col");
            return attend(q, vconcat(k, params.k_bias), vconcat(v, params.v_bias), inv_sqrt, t,
                          true);
        }
        case AttentionVariant::off_by_one: {
            // softmax-plus-one is the explicit form with k' = v' = 0;
            // literally the same code path.
            require_absent(params.k_bias, "off_by_one", "k_bias");
            require_absent(params.v_bias, "off_by_one", "v_bias");
            require_absent(params.q_col, "off_by_one", "q_col");
            require_absent(params.k_col, "off_by_one", "k_col");
            AttentionVariantParams zero;
            zero.variant = AttentionVariant::explicit_kv_bias;
            zero.k_bias = Tensor::zeros({1, dh});
            zero.v_bias = Tensor::zeros({1, dh});
            HeadAttention h = causal_attention(q, k, v, zero);
            return h;
        }
        case AttentionVariant::extra_qk_feature: {
            require_absent(params.k_bias, "extra_qk_feature", "k_bias");
            require_absent(params.v_bias, "extra_qk_feature", "v_bias");
            if (!params.q_col.valid() || !params.k_col.valid())
                fail("extra_qk_feature: missing q_col/k_col");
            if (params.q_col.cols() != 1 || params.k_col.cols() != 1)
                fail("extra_qk_feature: q_col/k_col must be column vectors");
            if (params.q_col.rows() < t || params.k_col.rows() < t)
                fail("extra_qk_feature: q_col/k_col cover " +
                     std::to_string(params.q_col.rows()) + " positions, sequence has " +
                     std::to_string(t));
            Tensor qa = hconcat(q, slice_rows(params.q_col, 0, t));
            Tensor ka = hconcat(k, slice_rows(params.k_col, 0, t));
            // the widened head keeps the 1/sqrt(d_head) of the base model
            return attend(qa, ka, v, inv_sqrt, t, false);
        }
        case AttentionVariant::value_bias: {
            require_row(params.v_bias, dh, "value_bias", "v_bias");
            require_absent(params.k_bias, "value_bias", "k_bias");
            require_absent(params.q_col, "value_bias", "q_col");
            require_absent(params.k_col, "value_bias", "k_col");
            HeadAttention h = attend(q, k, v, inv_sqrt, t, false);
            h.output = add_row_broadcast(h.output, params.v_bias);
            return h;
        }
    }
    fail("causal_attention: unknown variant");
}

AttentionProbs snapshot_heads(const std::vector<HeadAttention>& heads) {
    if (heads.empty()) fail("snapshot_heads: no heads");
    AttentionProbs snap;
    snap.heads = static_cast<std::int64_t>(heads.size());
    snap.t = heads[0].probs.rows();
    snap.cols = heads[0].probs.cols();
    snap.has_bias_column = heads[0].has_bias_column;
    snap.probs.reserve(snap.heads * snap.t * snap.cols);
    snap.logits.reserve(snap.heads * snap.t * snap.cols);
    for (const auto& h : heads) {
        if (h.probs.rows() != snap.t || h.probs.cols() != snap.cols ||
            h.has_bias_column != snap.has_bias_column)
            fail("snapshot_heads: inconsistent head shapes");
        snap.probs.insert(snap.probs.end(), h.probs.data(), h.probs.data() + h.probs.numel());
        snap.logits.insert(snap.logits.end(), h.logits.data(), h.logits.data() + h.logits.numel());
    }
    return snap;
}

AttentionProbs single_head(const AttentionProbs& probs, std::int64_t head) {
    if (head < 0 || head >= probs.heads)
        fail("single_head: head " + std::to_string(head) + " out of range [0, " +
             std::to_string(probs.heads) + ")");
    AttentionProbs one;
    one.heads = 1;
    one.t = probs.t;
    one.cols = probs.cols;
    one.has_bias_column = probs.has_bias_column;
    const std::int64_t plane = probs.t * probs.cols;
    one.probs.assign(probs.probs.begin() + head * plane, probs.probs.begin() + (head + 1) * plane);
    one.logits.assign(probs.logits.begin() + head * plane,
                      probs.logits.begin() + (head + 1) * plane);
    return one;
}

Tensor attention_probs_avg(const AttentionProbs& probs, ProbsReduce reduce) {
    if (probs.heads < 1) fail("attention_probs_avg: need at least one head");
    const std::vector<double>& src = reduce == ProbsReduce::probs ? probs.probs : probs.logits;
    Tensor out = Tensor::zeros({probs.t, probs.cols});
    const std::int64_t plane = probs.t * probs.cols;
    for (std::int64_t h = 0; h < probs.heads; ++h)
        for (std::int64_t i = 0; i < plane; ++i) out.data()[i] += src[h * plane + i];
    const double inv = 1.0 / static_cast<double>(probs.heads);
    for (std::int64_t i = 0; i < plane; ++i) out.data()[i] *= inv;
    return out;
}

void decompose_output(const AttentionProbs& probs, const Tensor& v, const ConcentrationSet& c,
                      std::int64_t k, std::vector<double>& bias_part,
                      std::vector<double>& rest_part,
                      const std::vector<double>* extra_value_bias) {
    if (probs.heads != 1) fail("decompose_output: expects a single head");
    if (k < 0 || k >= probs.t) fail("decompose_output: query index out of range");
    if (v.rows() != probs.cols)
        fail("decompose_output: value rows " + std::to_string(v.rows()) +
             " do not match probability columns " + std::to_string(probs.cols));
    const std::int64_t d = v.cols();
    std::vector<bool> in_c(static_cast<size_t>(probs.t), false);
    for (std::int64_t idx : c.token_indices) {
        if (idx < 0 || idx >= probs.t) fail("decompose_output: C index out of range");
        if (idx > k)
            fail("decompose_output: C contains future token " + std::to_string(idx) +
                 " past query " + std::to_string(k));
        in_c[idx] = true;
    }
    bias_part.assign(static_cast<size_t>(d), 0.0);
    rest_part.assign(static_cast<size_t>(d), 0.0);
    for (std::int64_t i = 0; i <= k; ++i) {
        const double p = probs.prob(0, k, i);
        double* acc = in_c[i] ? bias_part.data() : rest_part.data();
        const double* vr = v.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) acc[j] += p * vr[j];
    }
    if (probs.has_bias_column) {
        const double p = probs.prob(0, k, probs.t);
        const double* vr = v.data() + probs.t * d;
        for (std::int64_t j = 0; j < d; ++j) rest_part[j] += p * vr[j];
    }
    if (extra_value_bias) {
        if (static_cast<std::int64_t>(extra_value_bias->size()) != d)
            fail("decompose_output: extra bias length mismatch");
        for (std::int64_t j = 0; j < d; ++j) rest_part[j] += (*extra_value_bias)[j];
    }
}

double concentration_score(const AttentionProbs& probs, const ConcentrationSet& c) {
    if (probs.heads < 1 || probs.t < 1) fail("concentration_score: empty probs");
    if (c.token_indices.empty()) return 0.0;
    std::int64_t cmax = 0;
    std::vector<bool> in_c(static_cast<size_t>(probs.t), false);
    for (std::int64_t idx : c.token_indices) {
        if (idx < 0 || idx >= probs.t) fail("concentration_score: C index out of range");
        in_c[idx] = true;
        cmax = std::max(cmax, idx);
    }
    double total = 0.0;
    std::int64_t rows = 0;
    for (std::int64_t h = 0; h < probs.heads; ++h)
        for (std::int64_t q = cmax; q < probs.t; ++q) {
            double mass = 0.0;
            for (std::int64_t idx = 0; idx <= q; ++idx)
                if (in_c[idx]) mass += probs.prob(h, q, idx);
            total += mass;
            ++rows;
        }
    return total / static_cast<double>(rows);
}

}  // namespace actlab
