#include "actlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace actlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Unique sorted token indices the detector flags in trace state `layer`.
std::vector<std::int64_t> massive_tokens_at(const HiddenStateTrace& trace, std::int64_t layer,
                                            double abs_thr, double ratio_thr) {
    std::vector<std::int64_t> toks;
    for (const auto& r : detect_massive(trace, abs_thr, ratio_thr))
        if (r.layer == layer) toks.push_back(r.token_index);
    std::sort(toks.begin(), toks.end());
    toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
    return toks;
}

}  // namespace

const char* stage_name(TrajectoryStage s) {
    switch (s) {
        case TrajectoryStage::input: return "input";
        case TrajectoryStage::normalized: return "normalized";
        case TrajectoryStage::rescaled: return "rescaled";
        case TrajectoryStage::query: return "query";
        case TrajectoryStage::key: return "key";
        case TrajectoryStage::value: return "value";
    }
    fail("unknown trajectory stage");
}

std::vector<TrajectorySnapshot> norm_trajectory(const Model& model,
                                                const std::vector<std::int32_t>& tokens,
                                                std::int64_t layer, double abs_threshold,
                                                double ratio_threshold) {
    StageCapture cap;
    cap.layer = layer;
    ForwardOptions opt;
    opt.want_attn = false;
    opt.capture = &cap;
    ForwardResult res = model.forward(model.bind(false), tokens, opt);

    const std::vector<std::int64_t> hits =
        massive_tokens_at(res.trace, layer, abs_threshold, ratio_threshold);

    std::vector<TrajectorySnapshot> out;
    auto push = [&](TrajectoryStage stage, std::int64_t head, Tensor state) {
        TrajectorySnapshot s;
        s.stage = stage;
        s.head = head;
        s.state = std::move(state);
        s.highlighted = hits;
        out.push_back(std::move(s));
    };
    push(TrajectoryStage::input, -1, cap.input);
    push(TrajectoryStage::normalized, -1, cap.normalized);
    push(TrajectoryStage::rescaled, -1, cap.rescaled);
    const std::int64_t nh = static_cast<std::int64_t>(cap.query.size());
    for (std::int64_t h = 0; h < nh; ++h) push(TrajectoryStage::query, h, cap.query[h]);
    for (std::int64_t h = 0; h < nh; ++h) push(TrajectoryStage::key, h, cap.key[h]);
    for (std::int64_t h = 0; h < nh; ++h) push(TrajectoryStage::value, h, cap.value[h]);
    return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("cosine: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na * nb);
    if (denom == 0.0) return kNaN;
    return std::clamp(dot / denom, -1.0, 1.0);
}

double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("l2: length mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        sum += diff * diff;
    }
    return std::sqrt(sum);
}

namespace {

SimilarityMatrix pairwise(const std::vector<std::vector<double>>& vecs,
                          std::vector<std::string> labels) {
    SimilarityMatrix m;
    m.n = static_cast<std::int64_t>(vecs.size());
    m.labels = std::move(labels);
    m.cosine.assign(static_cast<size_t>(m.n * m.n), 0.0);
    m.l2.assign(static_cast<size_t>(m.n * m.n), 0.0);
    for (std::int64_t i = 0; i < m.n; ++i)
        for (std::int64_t j = 0; j < m.n; ++j) {
            m.cosine[i * m.n + j] = cosine_similarity(vecs[i], vecs[j]);
            m.l2[i * m.n + j] = l2_distance(vecs[i], vecs[j]);
        }
    return m;
}

}  // namespace

ValueUpdateReport value_update_similarity(const Model& model,
                                          const std::vector<std::vector<std::int32_t>>& prompts,
                                          std::int64_t layer, const ConcentrationSelector& sel) {
    if (prompts.empty()) fail("value updates: no prompts");
    if (layer < 0 || layer >= model.config.n_layers)
        fail("value updates: layer " + std::to_string(layer) + " out of range [0, " +
             std::to_string(model.config.n_layers) + ")");
    const std::int64_t nh = model.config.n_heads, dh = model.config.d_head();

    ValueUpdateReport rep;
    rep.layer = layer;

    const std::int64_t vp_idx =
        model.params.index_of("layer" + std::to_string(layer) + ".attn.v_prime");
    const bool bias_col = model.config.variant == AttentionVariant::explicit_kv_bias ||
                          model.config.variant == AttentionVariant::off_by_one;

    for (size_t p = 0; p < prompts.size(); ++p) {
        StageCapture cap;
        cap.layer = layer;
        ForwardOptions opt;
        opt.capture = &cap;
        ForwardResult res = model.forward(model.bind(false), prompts[p], opt);
        const AttentionProbs& attn = res.attn.at(static_cast<size_t>(layer));
        const std::int64_t t = attn.t;

        ConcentrationSet c;
        if (sel.kind == ConcentrationSelector::Kind::detect) {
            c.token_indices =
                massive_tokens_at(res.trace, layer, sel.abs_threshold, sel.ratio_threshold);
        } else {
            c.token_indices = sel.indices;
            std::sort(c.token_indices.begin(), c.token_indices.end());
            c.token_indices.erase(std::unique(c.token_indices.begin(), c.token_indices.end()),
                                  c.token_indices.end());
            for (std::int64_t idx : c.token_indices)
                if (idx < 0 || idx >= t)
                    fail("value updates: C index " + std::to_string(idx) +
                         " unresolvable in prompt " + std::to_string(p));
        }
        const std::int64_t cmax = c.token_indices.empty() ? -1 : c.token_indices.back();
        if (t - 1 - cmax < 2)
            fail("value updates: prompt " + std::to_string(p) + " has " +
                 std::to_string(t - 1 - cmax) + " query positions past the concentration set; " +
                 "need at least 2");

        // per head: the exact value rows attention consumed (token states,
        // plus the bias row when the variant appends one)
        std::vector<Tensor> v_full(static_cast<size_t>(nh));
        std::vector<std::vector<double>> extra(static_cast<size_t>(nh));
        for (std::int64_t h = 0; h < nh; ++h) {
            const Tensor& v_tok = cap.value.at(static_cast<size_t>(h));
            std::vector<double> rows(v_tok.data(), v_tok.data() + v_tok.numel());
            if (bias_col) {
                std::vector<double> brow(static_cast<size_t>(dh), 0.0);
                if (model.config.variant == AttentionVariant::explicit_kv_bias) {
                    const auto& vp = model.params.values[static_cast<size_t>(vp_idx)];
                    std::copy(vp.begin() + h * dh, vp.begin() + (h + 1) * dh, brow.begin());
                }
                rows.insert(rows.end(), brow.begin(), brow.end());
            }
            v_full[h] = Tensor::from_vector({attn.cols, dh}, rows);
            if (model.config.variant == AttentionVariant::value_bias) {
                const auto& vp = model.params.values[static_cast<size_t>(vp_idx)];
                extra[h].assign(vp.begin() + h * dh, vp.begin() + (h + 1) * dh);
            }
        }

        std::vector<std::int64_t> queries;
        std::vector<std::vector<double>> updates;
        std::vector<std::string> labels;
        for (std::int64_t k = cmax + 1; k < t; ++k) {
            std::vector<double> bk;
            bk.reserve(static_cast<size_t>(nh * dh));
            std::vector<double> bias_part, rest_part;
            for (std::int64_t h = 0; h < nh; ++h) {
                decompose_output(single_head(attn, h), v_full[h], c, k, bias_part, rest_part,
                                 extra[h].empty() ? nullptr : &extra[h]);
                bk.insert(bk.end(), bias_part.begin(), bias_part.end());
            }
            queries.push_back(k);
            updates.push_back(std::move(bk));
            labels.push_back(std::to_string(k));
        }

        rep.within.push_back(pairwise(updates, labels));
        rep.c_sets.push_back(std::move(c.token_indices));
        rep.query_tokens.push_back(std::move(queries));
        rep.updates.push_back(std::move(updates));
    }

    // cross-prompt: average similarity over offsets from max(C) shared by
    // every prompt
    const size_t np = prompts.size();
    size_t shared = rep.updates[0].size();
    for (const auto& u : rep.updates) shared = std::min(shared, u.size());
    rep.cross.n = static_cast<std::int64_t>(np);
    for (size_t p = 0; p < np; ++p) rep.cross.labels.push_back("prompt" + std::to_string(p));
    rep.cross.cosine.assign(np * np, 0.0);
    rep.cross.l2.assign(np * np, 0.0);
    for (size_t i = 0; i < np; ++i)
        for (size_t j = 0; j < np; ++j) {
            double csum = 0.0, lsum = 0.0;
            for (size_t o = 0; o < shared; ++o) {
                csum += cosine_similarity(rep.updates[i][o], rep.updates[j][o]);
                lsum += l2_distance(rep.updates[i][o], rep.updates[j][o]);
            }
            rep.cross.cosine[i * np + j] = csum / static_cast<double>(shared);
            rep.cross.l2[i * np + j] = lsum / static_cast<double>(shared);
        }
    return rep;
}

AttentionReport attention_report(const Model& model, const std::vector<std::int32_t>& tokens,
                                 const std::vector<std::int64_t>& layers, double abs_threshold,
                                 double ratio_threshold) {
    for (std::int64_t l : layers)
        if (l < 0 || l >= model.config.n_layers)
            fail("attention report: layer " + std::to_string(l) + " out of range [0, " +
                 std::to_string(model.config.n_layers) + ")");
    ForwardResult res = model.forward(model.bind(false), tokens, ForwardOptions{});

    AttentionReport rep;
    rep.token_strings = res.trace.token_strings;
    for (std::int64_t l : layers) {
        const AttentionProbs& attn = res.attn.at(static_cast<size_t>(l));
        AttentionLayerReport lr;
        lr.layer = l;
        lr.t = attn.t;
        lr.cols = attn.cols;
        lr.has_bias_column = attn.has_bias_column;
        Tensor p = attention_probs_avg(attn, ProbsReduce::probs);
        Tensor z = attention_probs_avg(attn, ProbsReduce::logits);
        lr.avg_probs.assign(p.data(), p.data() + p.numel());
        lr.avg_logits.assign(z.data(), z.data() + z.numel());
        lr.massive_tokens.token_indices =
            massive_tokens_at(res.trace, l, abs_threshold, ratio_threshold);
        lr.concentration = concentration_score(attn, lr.massive_tokens);
        rep.layers.push_back(std::move(lr));
    }
    return rep;
}

}  // namespace actlab
