// End-to-end acceptance gate. Runs every acceptance criterion with its pinned
// tolerance and prints exactly one PASS/FAIL line per criterion; exit code is
// nonzero when anything fails.
//
// Usage: acceptance <path-to-actlab-cli> [scratch-dir]
//
// The CLI path feeds the reproducibility criterion (11); everything else runs
// in-process against the library. The training criterion (9) dominates the
// runtime (three 2000-iteration runs on one core).

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "actlab/analysis.hpp"
#include "actlab/intervene.hpp"
#include "actlab/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace actlab;
using nlohmann::json;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (!a.valid() || !b.valid() || a.numel() != b.numel()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

// ---- criterion 1: published magnitude profiles ------------------------------

HiddenStateTrace profile_trace(const std::vector<double>& specials, double median, int filler) {
    std::vector<double> row = specials;
    row.insert(row.end(), filler, median);  // odd total count pins the median
    const std::int64_t n = static_cast<std::int64_t>(row.size());
    HiddenStateTrace tr;
    tr.states.push_back(Tensor::from_vector({1, n}, std::move(row)));
    tr.token_ids = {0};
    tr.token_strings = {"t0"};
    return tr;
}

Outcome criterion1() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    struct Profile {
        const char* name;
        std::vector<double> specials;
        double median;
        int filler;
        int massive;  // leading entries that must be flagged
    };
    const std::vector<Profile> profiles = {
        {"7B", {2622.0, 1547.0, 802.0, 477.3, 156.9}, 0.2, 24, 4},
        {"13B", {1264.0, 781.0, 51.0, 50.5, 47.1}, 0.4, 24, 2},
        {"mixtral", {7100.0, 5296.0, 1014.5, 467.8, 302.8, 182.8}, 0.3, 25, 5},
    };
    for (const auto& p : profiles) {
        const auto recs = detect_massive(profile_trace(p.specials, p.median, p.filler));
        std::set<std::int64_t> got, want;
        for (const auto& r : recs) {
            got.insert(r.feature_index);
            o.expect(r.token_index == 0,
                     fmt("%s: hit on token %lld", p.name, static_cast<long long>(r.token_index)));
        }
        for (int f = 0; f < p.massive; ++f) want.insert(f);
        o.expect(got == want, fmt("%s: flagged %zu features, want exactly the first %d", p.name,
                                  got.size(), p.massive));
    }
    const double secs = elapsed_s(t0);
    o.expect(secs < 1.0, fmt("took %.2f s, bound 1 s", secs));
    if (o.ok) o.detail = "4/2/5 flags, set-exact";
    return o;
}

// ---- criterion 2: decomposition identity ------------------------------------

Outcome criterion2() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20240202);
    const AttentionVariant variants[] = {
        AttentionVariant::standard, AttentionVariant::explicit_kv_bias,
        AttentionVariant::off_by_one, AttentionVariant::extra_qk_feature,
        AttentionVariant::value_bias};
    double worst = 0.0;
    for (int it = 0; it < 1000; ++it) {
        const AttentionVariant var = variants[rng.below(5)];
        const std::int64_t t = 2 + static_cast<std::int64_t>(rng.below(8));
        const std::int64_t dh = 1 + static_cast<std::int64_t>(rng.below(5));
        const Tensor q = Tensor::randn({t, dh}, rng);
        const Tensor k = Tensor::randn({t, dh}, rng);
        const Tensor v = Tensor::randn({t, dh}, rng);
        AttentionVariantParams p;
        p.variant = var;
        if (var == AttentionVariant::explicit_kv_bias) {
            p.k_bias = Tensor::randn({1, dh}, rng);
            p.v_bias = Tensor::randn({1, dh}, rng);
        } else if (var == AttentionVariant::extra_qk_feature) {
            p.q_col = Tensor::randn({t, 1}, rng);
            p.k_col = Tensor::randn({t, 1}, rng);
        } else if (var == AttentionVariant::value_bias) {
            p.v_bias = Tensor::randn({1, dh}, rng);
        }
        const HeadAttention h = causal_attention(q, k, v, p);
        const AttentionProbs snap = snapshot_heads({h});

        std::vector<double> rows(v.data(), v.data() + v.numel());
        if (snap.has_bias_column) {
            std::vector<double> brow(static_cast<size_t>(dh), 0.0);
            if (var == AttentionVariant::explicit_kv_bias)
                brow.assign(p.v_bias.data(), p.v_bias.data() + dh);
            rows.insert(rows.end(), brow.begin(), brow.end());
        }
        const Tensor v_full = Tensor::from_vector({snap.cols, dh}, std::move(rows));
        std::vector<double> extra;
        if (var == AttentionVariant::value_bias)
            extra.assign(p.v_bias.data(), p.v_bias.data() + dh);

        ConcentrationSet c;
        for (std::int64_t j = 0; j < t; ++j)
            if (rng.uniform() < 0.3) c.token_indices.push_back(j);
        // the query must not precede any member of C
        const std::int64_t cmax = c.token_indices.empty() ? 0 : c.token_indices.back();
        const std::int64_t kq =
            cmax + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t - cmax)));

        std::vector<double> bias_part, rest_part;
        decompose_output(snap, v_full, c, kq, bias_part, rest_part,
                         extra.empty() ? nullptr : &extra);
        for (std::int64_t j = 0; j < dh; ++j) {
            const double err = std::abs(bias_part[j] + rest_part[j] - h.output.at(kq, j));
            worst = std::max(worst, err);
        }
    }
    o.expect(worst <= 1e-12, fmt("worst |bias+rest-out| = %.3e > 1e-12", worst));
    const double secs = elapsed_s(t0);
    o.expect(secs < 10.0, fmt("took %.2f s, bound 10 s", secs));
    if (o.ok) o.detail = fmt("1000 cases, worst residual %.2e", worst);
    return o;
}

// ---- criterion 3: variant reductions ----------------------------------------

Outcome criterion3() {
    Outcome o;
    Rng rng(30303);
    double worst_masked = 0.0;
    for (int it = 0; it < 100; ++it) {
        const std::int64_t t = 2 + static_cast<std::int64_t>(rng.below(7));
        const std::int64_t dh = 1 + static_cast<std::int64_t>(rng.below(5));
        const Tensor q = Tensor::randn({t, dh}, rng);
        const Tensor k = Tensor::randn({t, dh}, rng);
        const Tensor v = Tensor::randn({t, dh}, rng);

        AttentionVariantParams po;
        po.variant = AttentionVariant::off_by_one;
        AttentionVariantParams pe;
        pe.variant = AttentionVariant::explicit_kv_bias;
        pe.k_bias = Tensor::zeros({1, dh});
        pe.v_bias = Tensor::zeros({1, dh});
        const HeadAttention off = causal_attention(q, k, v, po);
        const HeadAttention exz = causal_attention(q, k, v, pe);
        o.expect(same_bits(off.output, exz.output) && same_bits(off.probs, exz.probs) &&
                     same_bits(off.logits, exz.logits),
                 fmt("case %d: off_by_one != explicit(k'=v'=0) bitwise", it));

        // forcing the bias logit to the mask sentinel recovers standard
        const Tensor q1 = Tensor::full({t, 1}, 1.0);
        const Tensor k1 = Tensor::randn({t, 1}, rng);
        const Tensor v1 = Tensor::randn({t, 1}, rng);
        AttentionVariantParams pm;
        pm.variant = AttentionVariant::explicit_kv_bias;
        pm.k_bias = Tensor::from_vector({1, 1}, {-1e9});
        pm.v_bias = Tensor::randn({1, 1}, rng);
        const HeadAttention masked = causal_attention(q1, k1, v1, pm);
        const HeadAttention std_h = causal_attention(q1, k1, v1, AttentionVariantParams{});
        for (std::int64_t i = 0; i < t; ++i)
            worst_masked =
                std::max(worst_masked, std::abs(masked.output.at(i, 0) - std_h.output.at(i, 0)));
    }
    o.expect(worst_masked <= 1e-9, fmt("masked-bias vs standard drift %.3e > 1e-9", worst_masked));
    if (o.ok) o.detail = fmt("100 bit-exact reductions, masked drift %.2e", worst_masked);
    return o;
}

// ---- criterion 4: register equivalence --------------------------------------

Outcome criterion4() {
    Outcome o;
    Rng rng(40404);
    double worst = 0.0;
    for (int it = 0; it < 100; ++it) {
        const std::int64_t t = 2 + static_cast<std::int64_t>(rng.below(7));
        const std::int64_t dh = 1 + static_cast<std::int64_t>(rng.below(5));
        const Tensor q = Tensor::randn({t, dh}, rng);
        const Tensor k = Tensor::randn({t, dh}, rng);
        const Tensor v = Tensor::randn({t, dh}, rng);
        const Tensor kappa = Tensor::randn({1, dh}, rng);
        const Tensor nu = Tensor::randn({1, dh}, rng);

        AttentionVariantParams pe;
        pe.variant = AttentionVariant::explicit_kv_bias;
        pe.k_bias = kappa;
        pe.v_bias = nu;
        const HeadAttention ex = causal_attention(q, k, v, pe);

        // same attention with the bias realized as a prepended pseudo-token
        std::vector<double> qd(static_cast<size_t>(dh), 0.0), kd, vd;
        qd.insert(qd.end(), q.data(), q.data() + q.numel());
        kd.assign(kappa.data(), kappa.data() + dh);
        kd.insert(kd.end(), k.data(), k.data() + k.numel());
        vd.assign(nu.data(), nu.data() + dh);
        vd.insert(vd.end(), v.data(), v.data() + v.numel());
        const HeadAttention ps = causal_attention(
            Tensor::from_vector({t + 1, dh}, std::move(qd)),
            Tensor::from_vector({t + 1, dh}, std::move(kd)),
            Tensor::from_vector({t + 1, dh}, std::move(vd)), AttentionVariantParams{});

        for (std::int64_t i = 0; i < t; ++i)
            for (std::int64_t j = 0; j < dh; ++j)
                worst = std::max(worst, std::abs(ps.output.at(i + 1, j) - ex.output.at(i, j)));
    }
    o.expect(worst <= 1e-9, fmt("real-token output drift %.3e > 1e-9", worst));
    if (o.ok) o.detail = fmt("100 cases, worst drift %.2e", worst);
    return o;
}

// ---- criterion 5: gradient validation ---------------------------------------

Outcome criterion5() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const double h = 1e-5, tol = 1e-3;
    double worst_op = 0.0, worst_model = 0.0;
    const AttentionVariant variants[] = {
        AttentionVariant::standard, AttentionVariant::explicit_kv_bias,
        AttentionVariant::off_by_one, AttentionVariant::extra_qk_feature,
        AttentionVariant::value_bias};

    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 7919);
        const auto probe = [](const Tensor& y) {
            std::vector<double> w(static_cast<size_t>(y.numel()));
            for (size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.05 * static_cast<double>(i % 7);
            return weighted_sum(y, w);
        };
        auto leaf = [&](std::int64_t r, std::int64_t c) {
            return Tensor::randn({r, c}, rng, 1.0, true);
        };
        const Tensor b34 = Tensor::randn({3, 4}, rng);
        const Tensor b43 = Tensor::randn({4, 3}, rng);
        const Tensor row4 = Tensor::randn({1, 4}, rng);

        std::vector<double> checks;
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(matmul(x, b34)); }, leaf(4, 3), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(matmul(b43, x)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(matmul_nt(x, b34)); }, leaf(2, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(matmul_tn(x, b34)); }, leaf(3, 2), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(add(x, b34)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(sub(b34, x)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(mul(x, b34)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(scale(x, -1.7)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(add_row_broadcast(x, row4)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(add_row_broadcast(b34, x)); }, leaf(1, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(mul_row_broadcast(x, row4)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(mul_row_broadcast(b34, x)); }, leaf(1, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(hconcat(x, b34)); }, leaf(3, 2), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(vconcat(b34, x)); }, leaf(2, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(slice_rows(x, 1, 3)); }, leaf(4, 3), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(slice_cols(x, 0, 2)); }, leaf(3, 4), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(softmax_rows(x)); }, leaf(3, 5), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(gelu(x)); }, leaf(3, 4), h));
        {
            const Tensor g = Tensor::randn({4}, rng);
            const Tensor bb = Tensor::randn({4}, rng);
            const auto vleaf = [&] { return Tensor::randn({4}, rng, 1.0, true); };
            checks.push_back(grad_check(
                [&](const Tensor& x) {
                    return probe(layer_norm(x, NormParams{g, bb, 1e-5}));
                },
                leaf(3, 4), h));
            checks.push_back(grad_check(
                [&](const Tensor& x) {
                    return probe(layer_norm(b34, NormParams{x, bb, 1e-5}));
                },
                vleaf(), h));
            checks.push_back(grad_check(
                [&](const Tensor& x) {
                    return probe(layer_norm(b34, NormParams{g, x, 1e-5}));
                },
                vleaf(), h));
            checks.push_back(grad_check(
                [&](const Tensor& x) {
                    return probe(rms_norm(x, NormParams{g, Tensor(), 1e-5}));
                },
                leaf(3, 4), h));
            checks.push_back(grad_check(
                [&](const Tensor& x) {
                    return probe(rms_norm(b34, NormParams{x, Tensor(), 1e-5}));
                },
                vleaf(), h));
        }
        checks.push_back(grad_check(
            [&](const Tensor& x) { return probe(embedding_rows(x, {0, 2, 2, 4, 1})); },
            leaf(5, 3), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return cross_entropy(x, {1, 4, 0}, {}); }, leaf(3, 5), h));
        checks.push_back(grad_check(
            [&](const Tensor& x) { return cross_entropy(x, {1, 0, 3, 2}, {0, 1, 0, 0}); },
            leaf(4, 5), h));
        for (double c : checks) worst_op = std::max(worst_op, c);

        // full 2-layer model: analytic backward vs central differences on
        // sampled parameter coordinates
        ModelConfig mc;
        mc.n_layers = 2;
        mc.d_model = 16;
        mc.n_heads = 2;
        mc.context_len = 12;
        mc.vocab_size = 7;
        mc.variant = variants[seed % 5];
        mc.norm_kind = (seed % 2) ? NormKind::layernorm : NormKind::rmsnorm;
        Model m = Model::init(mc, seed);
        std::vector<std::int32_t> toks(9);
        for (auto& id : toks) id = static_cast<std::int32_t>(rng.below(7));
        const std::vector<std::int32_t> inputs(toks.begin(), toks.end() - 1);
        const std::vector<std::int32_t> targets(toks.begin() + 1, toks.end());

        BoundParams bound = m.bind(true);
        ForwardOptions fo;
        fo.grad = true;
        fo.want_trace = false;
        fo.want_attn = false;
        cross_entropy(m.forward(bound, inputs, fo).logits, targets, {}).backward();

        const auto loss_value = [&]() {
            ForwardOptions go;
            go.want_trace = false;
            go.want_attn = false;
            return cross_entropy(m.forward(m.bind(false), inputs, go).logits, targets, {}).item();
        };
        for (std::int64_t p = 0; p < m.params.count(); ++p) {
            const auto& g = bound.leaves[p].grad();
            if (g.empty()) continue;
            auto& vals = m.params.values[static_cast<size_t>(p)];
            const std::int64_t n = static_cast<std::int64_t>(vals.size());
            const std::int64_t samples = std::min<std::int64_t>(n, 3);
            for (std::int64_t s = 0; s < samples; ++s) {
                const std::int64_t i = static_cast<std::int64_t>(rng.below(n));
                const double theta = vals[i];
                vals[i] = theta + h;
                const double lp = loss_value();
                vals[i] = theta - h;
                const double lm = loss_value();
                vals[i] = theta;
                const double central = (lp - lm) / (2.0 * h);
                const double rel =
                    std::abs(g[i] - central) / (std::abs(g[i]) + std::abs(central) + 1e-8);
                worst_model = std::max(worst_model, rel);
            }
        }
    }
    o.expect(worst_op <= tol, fmt("op gradient rel err %.3e > 1e-3", worst_op));
    o.expect(worst_model <= tol, fmt("model gradient rel err %.3e > 1e-3", worst_model));
    const double secs = elapsed_s(t0);
    o.expect(secs < 60.0, fmt("took %.2f s, bound 60 s", secs));
    if (o.ok) o.detail = fmt("10 seeds; worst op %.2e, worst model %.2e", worst_op, worst_model);
    return o;
}

// ---- criterion 6: normalization outlier preservation -------------------------

Outcome criterion6() {
    Outcome o;
    const std::int64_t d = 64;
    Rng rng(606060);
    std::vector<double> vals(static_cast<size_t>(d));
    for (auto& v : vals) v = rng.normal();
    vals[17] = 1e4;
    NormParams p;
    p.gain = Tensor::full({d}, 1.0);
    const Tensor out = rms_norm(Tensor::from_vector({1, d}, vals), p);
    const double planted = out.data()[17];
    const double want = std::sqrt(64.0);
    o.expect(std::abs(planted - want) <= 0.01 * want,
             fmt("planted output %.6f not within 1%% of sqrt(64)", planted));
    double worst_other = 0.0;
    for (std::int64_t j = 0; j < d; ++j)
        if (j != 17) worst_other = std::max(worst_other, std::abs(out.data()[j]));
    o.expect(worst_other <= 0.02, fmt("non-planted magnitude %.4f > 0.02", worst_other));
    if (o.ok) o.detail = fmt("planted %.4f ~ sqrt(64), others <= %.4f", planted, worst_other);
    return o;
}

// ---- criterion 7: intervention oracle ----------------------------------------

Outcome criterion7() {
    Outcome o;
    Rng rng(70707);
    const InterventionMode modes[] = {InterventionMode::zero, InterventionMode::mean,
                                      InterventionMode::value};
    for (int it = 0; it < 50 && o.ok; ++it) {
        ModelConfig mc;
        mc.n_layers = 2 + static_cast<std::int64_t>(rng.below(2));
        mc.d_model = 16;
        mc.n_heads = 2;
        mc.context_len = 12;
        mc.vocab_size = 9;
        mc.variant = static_cast<AttentionVariant>(rng.below(5));
        mc.norm_kind = rng.below(2) ? NormKind::rmsnorm : NormKind::layernorm;
        mc.sink_token = rng.below(2) == 1;
        const Model m = Model::init(mc, 9000 + static_cast<std::uint64_t>(it));

        const std::int64_t t = 5 + static_cast<std::int64_t>(rng.below(5));
        std::vector<std::int32_t> toks(static_cast<size_t>(t));
        for (auto& id : toks) id = static_cast<std::int32_t>(rng.below(9));
        const std::int64_t rows = t + (mc.sink_token ? 1 : 0);

        InterventionSpec spec;
        spec.layer = static_cast<std::int64_t>(rng.below(mc.n_layers));
        spec.mode = modes[rng.below(3)];
        const int ntarget = 1 + static_cast<int>(rng.below(3));
        for (int n = 0; n < ntarget; ++n) {
            InterventionTarget tg;
            switch (rng.below(3)) {
                case 0: tg.token = TokenSelector::index(static_cast<std::int64_t>(rng.below(rows))); break;
                case 1: tg.token = TokenSelector::first_id(toks[rng.below(toks.size())]); break;
                default: tg.token = TokenSelector::rank(1 + static_cast<std::int64_t>(rng.below(rows)));
            }
            tg.feature = static_cast<std::int64_t>(rng.below(mc.d_model));
            tg.value = rng.normal();
            spec.targets.push_back(tg);
        }

        CalibrationStats calib;
        const CalibrationStats* cp = nullptr;
        if (spec.mode == InterventionMode::mean) {
            std::vector<std::int32_t> shuffled = toks;  // permutation keeps ids resolvable
            for (size_t i = shuffled.size(); i > 1; --i)
                std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
            calib = calibrate_means(m, {toks, shuffled}, spec, 42);
            cp = &calib;
        }

        const ForwardResult got = run_with_intervention(m, toks, spec, cp);

        // phase 1: plain forward, resolve the targets externally, edit a copy
        const ForwardResult plain = m.forward_with_trace(toks);
        const Tensor& pre = plain.trace.states[static_cast<size_t>(spec.layer)];
        std::vector<double> buf(pre.data(), pre.data() + pre.numel());
        for (size_t i = 0; i < spec.targets.size(); ++i) {
            const auto& tg = spec.targets[i];
            const std::int64_t row = resolve_token(plain.trace, spec.layer, tg.token, "oracle");
            double nv = 0.0;
            if (spec.mode == InterventionMode::value) nv = tg.value;
            if (spec.mode == InterventionMode::mean) nv = calib.means[i];
            buf[static_cast<size_t>(row * mc.d_model + tg.feature)] = nv;
        }
        const Tensor edited = Tensor::from_vector(pre.shape(), std::move(buf));

        // phase 2: resume from the edited state via the forward hook
        ForwardOptions opt;
        opt.edit_state = [&](std::int64_t idx, Tensor& hstate) {
            if (idx == spec.layer) hstate = edited;
        };
        const ForwardResult want = m.forward(m.bind(false), toks, opt);

        o.expect(same_bits(got.logits, want.logits), fmt("case %d: logits differ", it));
        for (size_t l = 0; l < want.trace.states.size(); ++l)
            o.expect(same_bits(got.trace.states[l], want.trace.states[l]),
                     fmt("case %d: state %zu differs", it, l));

        // empty spec: bit-exact no-op
        InterventionSpec empty;
        empty.layer = spec.layer;
        const ForwardResult noop = run_with_intervention(m, toks, empty);
        o.expect(same_bits(noop.logits, plain.logits), fmt("case %d: empty spec changed logits", it));
    }
    if (o.ok) o.detail = "50 random specs bit-exact, empty spec is a no-op";
    return o;
}

// ---- criterion 8: perplexity closed forms ------------------------------------

Model uniform_model(std::int64_t vocab) {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 1;
    c.context_len = 8;
    c.vocab_size = vocab;
    Model m = Model::init(c, 3);
    for (auto& v : m.params.values) std::fill(v.begin(), v.end(), 0.0);
    return m;
}

Model flipflop_model() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 2;
    c.n_heads = 1;
    c.context_len = 10;
    c.vocab_size = 2;
    Model m = Model::init(c, 5);
    for (auto& v : m.params.values) std::fill(v.begin(), v.end(), 0.0);
    // h = wte[token]; the sign-flipping final layernorm routes a->b and b->a
    // with a saturating logit gap, so every prediction is exact
    m.params.values[static_cast<size_t>(m.params.index_of("wte"))] = {1000.0, -1000.0, -1000.0,
                                                                      1000.0};
    m.params.values[static_cast<size_t>(m.params.index_of("lnf.g"))] = {-1.0, -1.0};
    m.vocab = {"a", "b"};
    return m;
}

Outcome criterion8() {
    Outcome o;
    {
        const Model m = uniform_model(27);
        const double p = perplexity(m, {{0, 1, 0, 1, 0, 1}, {1, 0, 1, 0}});
        o.expect(p == 27.0, fmt("uniform V=27 perplexity %.17g != 27 exactly", p));
    }
    {
        const Model m = uniform_model(65);
        const double p = perplexity(m, {{0, 1, 2, 3, 4, 5}, {6, 7, 8, 9}});
        o.expect(std::abs(p - 65.0) <= 65.0 * 1e-12,
                 fmt("uniform V=65 perplexity %.17g off by > 1e-12 rel", p));
    }
    {
        const Model m = flipflop_model();
        const double p = perplexity(m, {{0, 1, 0, 1, 0, 1}, {1, 0, 1, 0}});
        o.expect(p == 1.0, fmt("perfect predictor perplexity %.17g != 1 exactly", p));
    }
    {
        ModelConfig c;
        c.n_layers = 2;
        c.d_model = 16;
        c.n_heads = 2;
        c.context_len = 12;
        c.vocab_size = 9;
        const Model m = Model::init(c, 88);
        Rng rng(808);
        std::vector<std::vector<std::int32_t>> windows(3, std::vector<std::int32_t>(8));
        for (auto& w : windows)
            for (auto& id : w) id = static_cast<std::int32_t>(rng.below(9));
        const double drift = std::abs(eval_loss(m, windows) - std::log(perplexity(m, windows)));
        o.expect(drift <= 1e-12, fmt("eval_loss vs ln(perplexity) drift %.3e > 1e-12", drift));
    }
    if (o.ok) o.detail = "uniform V exact, perfect predictor exactly 1, eval==ln(ppl)";
    return o;
}

// ---- criterion 9: training smoke ---------------------------------------------

Outcome criterion9() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const std::string text = generate_corpus(424242, 1 << 21);  // 2 MiB >= 1 MB
    const Corpus corpus = corpus_from_text(text, 0.1);
    const double ln_v = std::log(static_cast<double>(corpus.vocab_size()));

    struct RunSpec {
        const char* name;
        AttentionVariant variant;
        bool sink;
        double val = 0.0;
    };
    std::vector<RunSpec> runs = {
        {"standard", AttentionVariant::standard, false},
        {"sink", AttentionVariant::standard, true},
        {"explicit_bias", AttentionVariant::explicit_kv_bias, false},
    };

    for (auto& r : runs) {
        TrainConfig tc;
        tc.model.n_layers = 4;
        tc.model.d_model = 128;
        tc.model.n_heads = 4;
        tc.model.context_len = 64;
        tc.model.vocab_size = corpus.vocab_size();
        tc.model.variant = r.variant;
        tc.model.sink_token = r.sink;
        tc.iterations = 2000;
        tc.batch_size = 8;
        tc.warmup = 100;
        tc.eval_interval = 500;
        tc.eval_windows = 16;
        tc.seed = 1234;

        const TrainResult res = train(corpus, tc);
        r.val = res.final_val_loss;
        std::printf("  [train] %-13s final val loss %.4f (%.1f s elapsed)\n", r.name, r.val,
                    elapsed_s(t0));
        std::fflush(stdout);

        // reports, not assertions: layerwise top-3 profile and (for the
        // explicit variant) the attention mass on the bias slot
        const Model m = res.checkpoint.to_model();
        auto windows = eval_windows(corpus, tc);
        windows.resize(4);
        const std::int64_t n_states = tc.model.n_layers + 1;
        std::vector<std::array<double, 3>> top(static_cast<size_t>(n_states), {0, 0, 0});
        std::vector<double> med(static_cast<size_t>(n_states), 0.0);
        std::vector<double> bias_mass(static_cast<size_t>(tc.model.n_layers), 0.0);
        std::vector<double> first_mass(static_cast<size_t>(tc.model.n_layers), 0.0);
        for (const auto& w : windows) {
            const std::vector<std::int32_t> ids(w.begin(), w.end() - 1);
            const ForwardResult fr = m.forward_with_trace(ids);
            const auto stats = layer_stats(fr.trace, 3);
            for (std::int64_t l = 0; l < n_states; ++l) {
                for (int j = 0; j < 3; ++j)
                    top[l][j] += stats[l].top[j].magnitude / static_cast<double>(windows.size());
                med[l] += stats[l].median_magnitude / static_cast<double>(windows.size());
            }
            for (std::int64_t l = 0; l < tc.model.n_layers; ++l) {
                const AttentionProbs& ap = fr.attn[static_cast<size_t>(l)];
                double bm = 0.0, fm = 0.0;
                for (std::int64_t hh = 0; hh < ap.heads; ++hh)
                    for (std::int64_t qq = 0; qq < ap.t; ++qq) {
                        if (ap.has_bias_column) bm += ap.prob(hh, qq, ap.cols - 1);
                        fm += ap.prob(hh, qq, 0);
                    }
                const double denom = static_cast<double>(ap.heads * ap.t * windows.size());
                bias_mass[l] += bm / denom;
                first_mass[l] += fm / denom;
            }
        }
        for (std::int64_t l = 0; l < n_states; ++l)
            std::printf("  [report] %-13s state %lld top3 %9.3f %9.3f %9.3f median %.4f\n", r.name,
                        static_cast<long long>(l), top[l][0], top[l][1], top[l][2], med[l]);
        for (std::int64_t l = 0; l < tc.model.n_layers; ++l) {
            if (r.variant == AttentionVariant::explicit_kv_bias)
                std::printf("  [report] %-13s layer %lld bias-slot attention mass %.4f\n", r.name,
                            static_cast<long long>(l), bias_mass[l]);
            std::printf("  [report] %-13s layer %lld first-position attention mass %.4f\n", r.name,
                        static_cast<long long>(l), first_mass[l]);
        }
        std::fflush(stdout);
    }

    double lo = runs[0].val, hi = runs[0].val;
    for (const auto& r : runs) {
        o.expect(std::isfinite(r.val) && r.val < 0.8 * ln_v,
                 fmt("%s val loss %.4f !< 0.8*ln(V)=%.4f", r.name, r.val, 0.8 * ln_v));
        lo = std::min(lo, r.val);
        hi = std::max(hi, r.val);
    }
    o.expect(hi <= 1.1 * lo, fmt("val losses spread %.4f..%.4f exceeds 10%%", lo, hi));
    const double secs = elapsed_s(t0);
    o.expect(secs <= 1800.0, fmt("took %.0f s, bound 1800 s", secs));
    if (o.ok)
        o.detail = fmt("val %.3f/%.3f/%.3f < %.3f, spread %.1f%%, %.0f s", runs[0].val,
                       runs[1].val, runs[2].val, 0.8 * ln_v, 100.0 * (hi / lo - 1.0), secs);
    return o;
}

// ---- criterion 10: outlier-feature detector equivalence ----------------------

std::vector<std::int64_t> brute_force_outliers(const std::vector<HiddenStateTrace>& traces,
                                               double mag, double layer_frac, double token_frac,
                                               double seq_frac) {
    std::vector<std::int64_t> out;
    const std::int64_t d = traces.front().states.front().cols();
    for (std::int64_t f = 0; f < d; ++f) {
        std::int64_t seq_hits = 0;
        for (const auto& tr : traces) {
            std::int64_t layer_hits = 0;
            for (const auto& st : tr.states) {
                std::int64_t hot = 0;
                for (std::int64_t t = 0; t < st.rows(); ++t)
                    if (std::abs(st.at(t, f)) > mag) ++hot;
                if (static_cast<double>(hot) / static_cast<double>(st.rows()) > token_frac)
                    ++layer_hits;
            }
            if (static_cast<double>(layer_hits) / static_cast<double>(tr.states.size()) >
                layer_frac)
                ++seq_hits;
        }
        if (static_cast<double>(seq_hits) / static_cast<double>(traces.size()) > seq_frac)
            out.push_back(f);
    }
    return out;
}

HiddenStateTrace noise_trace(std::int64_t layers, std::int64_t t, std::int64_t d, Rng& rng) {
    HiddenStateTrace tr;
    for (std::int64_t l = 0; l < layers; ++l) {
        std::vector<double> vals(static_cast<size_t>(t * d));
        for (auto& v : vals) v = 0.3 * rng.normal();
        tr.states.push_back(Tensor::from_vector({t, d}, std::move(vals)));
    }
    tr.token_ids.assign(static_cast<size_t>(t), 0);
    tr.token_strings.assign(static_cast<size_t>(t), "t");
    return tr;
}

void spike(HiddenStateTrace& tr, std::int64_t layer, std::int64_t token, std::int64_t feature,
           double value) {
    Tensor& st = tr.states[static_cast<size_t>(layer)];
    std::vector<double> vals(st.data(), st.data() + st.numel());
    vals[static_cast<size_t>(token * st.cols() + feature)] = value;
    st = Tensor::from_vector(st.shape(), std::move(vals));
}

Outcome criterion10() {
    Outcome o;
    Rng rng(101010);
    int corpora = 0;

    auto check = [&](const std::vector<HiddenStateTrace>& traces, const char* label) {
        const auto got = detect_outlier_features(traces);
        const auto want = brute_force_outliers(traces, 6.0, 0.25, 0.06, 0.90);
        o.expect(got == want, fmt("%s: detector and brute force disagree", label));
        ++corpora;
        return want;
    };

    // 17 random corpora with planted hot features
    for (int c = 0; c < 17; ++c) {
        const std::int64_t n_seq = 3 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t layers = 3 + static_cast<std::int64_t>(rng.below(3));
        const std::int64_t t = 6 + static_cast<std::int64_t>(rng.below(5));
        const std::int64_t d = 6 + static_cast<std::int64_t>(rng.below(5));
        std::vector<HiddenStateTrace> traces;
        for (std::int64_t s = 0; s < n_seq; ++s) traces.push_back(noise_trace(layers, t, d, rng));
        const std::int64_t hot_features = static_cast<std::int64_t>(rng.below(3));
        for (std::int64_t hf = 0; hf < hot_features; ++hf) {
            const std::int64_t f = static_cast<std::int64_t>(rng.below(d));
            for (auto& tr : traces)
                for (std::int64_t l = 0; l < layers; ++l) {
                    if (rng.uniform() < 0.4) continue;
                    const std::int64_t hot = 1 + static_cast<std::int64_t>(rng.below(t));
                    for (std::int64_t k = 0; k < hot; ++k)
                        spike(tr, l, static_cast<std::int64_t>(rng.below(t)), f,
                              (rng.below(2) ? 1.0 : -1.0) * (7.0 + rng.uniform() * 5.0));
                }
        }
        check(traces, fmt("random corpus %d", c).c_str());
    }

    // boundary: layer fraction exactly 0.25 must NOT flag (strict inequality)
    {
        std::vector<HiddenStateTrace> traces;
        for (int s = 0; s < 3; ++s) {
            HiddenStateTrace tr = noise_trace(4, 8, 6, rng);
            for (std::int64_t t = 0; t < 8; ++t) {
                spike(tr, 0, t, 2, 9.0);                       // 1 of 4 layers = 0.25, not >
                for (std::int64_t l = 0; l < 2; ++l) spike(tr, l, t, 3, 9.0);  // 0.5 > 0.25
            }
            traces.push_back(std::move(tr));
        }
        const auto want = check(traces, "layer-fraction boundary");
        o.expect(want == std::vector<std::int64_t>{3},
                 "layer-fraction boundary: expected exactly feature 3");
    }
    // boundary: token fraction exactly 0.06 must NOT count the layer
    {
        std::vector<HiddenStateTrace> traces;
        for (int s = 0; s < 3; ++s) {
            HiddenStateTrace tr = noise_trace(4, 50, 6, rng);
            for (std::int64_t l = 0; l < 2; ++l)
                for (std::int64_t k = 0; k < 3; ++k) spike(tr, l, k, 1, 9.0);  // 3/50 == 0.06
            for (std::int64_t l = 0; l < 2; ++l)
                for (std::int64_t k = 0; k < 4; ++k) spike(tr, l, k, 4, 9.0);  // 4/50 > 0.06
            traces.push_back(std::move(tr));
        }
        const auto want = check(traces, "token-fraction boundary");
        o.expect(want == std::vector<std::int64_t>{4},
                 "token-fraction boundary: expected exactly feature 4");
    }
    // boundary: sequence fraction exactly 0.90 must NOT flag
    {
        std::vector<HiddenStateTrace> traces;
        for (int s = 0; s < 10; ++s) {
            HiddenStateTrace tr = noise_trace(4, 8, 6, rng);
            for (std::int64_t l = 0; l < 2; ++l)
                for (std::int64_t t = 0; t < 8; ++t) {
                    if (s < 9) spike(tr, l, t, 0, 9.0);  // 9/10 == 0.90, not >
                    spike(tr, l, t, 5, 9.0);             // 10/10 > 0.90
                }
            traces.push_back(std::move(tr));
        }
        const auto want = check(traces, "sequence-fraction boundary");
        o.expect(want == std::vector<std::int64_t>{5},
                 "sequence-fraction boundary: expected exactly feature 5");
    }

    if (o.ok) o.detail = fmt("%d corpora set-exact, boundaries strict", corpora);
    return o;
}

// ---- criterion 11: CLI determinism -------------------------------------------

std::map<std::string, std::string> snapshot_dir(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        files[e.path().filename().string()] = ss.str();
    }
    return files;
}

Outcome criterion11(const std::string& cli, const fs::path& scratch) {
    Outcome o;
    o.expect(!cli.empty(), "no CLI path given (argv[1])");
    if (!o.ok) return o;
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    const auto shell_quote = [](const std::string& s) { return "'" + s + "'"; };
    const auto run = [&](const std::string& cmd) {
        return std::system((cmd + " > /dev/null 2>&1").c_str()) == 0;
    };

    const fs::path cfg_path = scratch / "train_config.json";
    {
        std::ofstream cfg(cfg_path);
        cfg << R"({"model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "context_len": 32},)"
            << R"( "iterations": 60, "batch_size": 4, "warmup": 10,)"
            << R"( "eval_interval": 20, "eval_windows": 4})";
    }
    const fs::path spec_path = scratch / "spec.json";
    {
        std::ofstream spec(spec_path);
        spec << R"({"layer": 1, "mode": "zero", "targets": [)"
             << R"({"token": {"index": 0}, "feature": 3},)"
             << R"({"token": {"rank": 1}, "feature": 7}]})";
    }

    const std::string corpus = (scratch / "corpus" / "corpus.txt").string();
    const std::string ckpt = (scratch / "train" / "checkpoint.bin").string();

    struct Step {
        std::string name;
        std::string args;  // appended after the CLI path
    };
    std::vector<Step> steps;
    steps.push_back({"gen-corpus", "gen-corpus --out " + shell_quote((scratch / "corpus").string()) +
                                       " --seed 21 --min-bytes 300000"});
    steps.push_back({"train", "train --corpus " + shell_quote(corpus) + " --config " +
                                  shell_quote(cfg_path.string()) + " --out " +
                                  shell_quote((scratch / "train").string()) + " --seed 21"});

    // first run of the prerequisites so the prompt text and checkpoint exist
    for (size_t i = 0; i < 2; ++i)
        o.expect(run(shell_quote(cli) + " " + steps[i].args), steps[i].name + ": nonzero exit");
    if (!o.ok) return o;

    std::string prompt;
    {
        std::ifstream in(corpus);
        std::getline(in, prompt);
        prompt = prompt.substr(0, 24);
    }
    o.expect(prompt.size() >= 8, "corpus first line too short for a prompt");

    const std::string common = " --seed 5 --out ";
    steps.push_back({"stats", "stats --ckpt " + shell_quote(ckpt) + " --corpus " +
                                  shell_quote(corpus) + common +
                                  shell_quote((scratch / "stats").string())});
    steps.push_back({"detect", "detect --ckpt " + shell_quote(ckpt) + " --corpus " +
                                   shell_quote(corpus) + " --windows 4" + common +
                                   shell_quote((scratch / "detect").string())});
    // explicit positions: a 60-iteration toy model has no detector hits at the
    // default profile, and index/rank selectors always resolve
    steps.push_back({"posstats", "posstats --ckpt " + shell_quote(ckpt) + " --corpus " +
                                     shell_quote(corpus) + " --windows 4" +
                                     " --position 1:index=0:3 --position 2:rank=1:7" + common +
                                     shell_quote((scratch / "posstats").string())});
    steps.push_back({"intervene", "intervene --ckpt " + shell_quote(ckpt) + " --corpus " +
                                      shell_quote(corpus) + " --spec " +
                                      shell_quote(spec_path.string()) +
                                      " --windows 4 --calib-windows 4 --control" + common +
                                      shell_quote((scratch / "intervene").string())});
    steps.push_back({"attnmap", "attnmap --ckpt " + shell_quote(ckpt) + " --prompt " +
                                    shell_quote(prompt) + common +
                                    shell_quote((scratch / "attnmap").string())});
    steps.push_back({"decompose", "decompose --ckpt " + shell_quote(ckpt) + " --corpus " +
                                      shell_quote(corpus) + " --windows 3 --layer 1 --c-indices 0" +
                                      common + shell_quote((scratch / "decompose").string())});
    steps.push_back({"trajectory", "trajectory --ckpt " + shell_quote(ckpt) + " --prompt " +
                                       shell_quote(prompt) + " --layer 1" + common +
                                       shell_quote((scratch / "trajectory").string())});

    for (size_t i = 0; i < steps.size() && o.ok; ++i) {
        const auto& s = steps[i];
        const fs::path out_dir =
            scratch / (s.name == "gen-corpus" ? "corpus" : s.name == "train" ? "train" : s.name);
        if (i >= 2)  // prerequisites already ran once
            o.expect(run(shell_quote(cli) + " " + s.args), s.name + ": nonzero exit");
        if (!o.ok) break;
        const auto first = snapshot_dir(out_dir);
        o.expect(first.count("manifest.json") == 1, s.name + ": no manifest.json");
        if (!o.ok) break;

        // re-run exactly the argv the manifest recorded
        const json manifest = json::parse(first.at("manifest.json"));
        std::string cmd;
        for (const auto& arg : manifest.at("argv"))
            cmd += (cmd.empty() ? "" : " ") + shell_quote(arg.get<std::string>());
        o.expect(run(cmd), s.name + ": manifest re-run nonzero exit");
        if (!o.ok) break;

        const auto second = snapshot_dir(out_dir);
        o.expect(first.size() == second.size(),
                 fmt("%s: file count changed %zu -> %zu", s.name.c_str(), first.size(),
                     second.size()));
        for (const auto& [name, bytes] : first) {
            const auto it = second.find(name);
            o.expect(it != second.end() && it->second == bytes,
                     s.name + ": " + name + " not byte-identical on re-run");
        }
    }
    if (o.ok) o.detail = fmt("%zu commands byte-identical on manifest re-run", steps.size());
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    const fs::path scratch =
        argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "actlab_acceptance";
    // --only=2,7 narrows the run while debugging a single criterion
    std::set<int> only;
    for (int i = 3; i < argc; ++i) {
        const std::string a = argv[i];
        if (a.rfind("--only=", 0) == 0) {
            std::stringstream ss(a.substr(7));
            for (std::string part; std::getline(ss, part, ',');) only.insert(std::stoi(part));
        }
    }

    struct Entry {
        int idx;
        const char* title;
        std::function<Outcome()> fn;
    };
    const std::vector<Entry> entries = {
        {1, "published magnitude profiles flag exactly the massive entries", criterion1},
        {2, "decomposition identity over random variants/QKV/C", criterion2},
        {3, "variant reductions (off-by-one bitwise, masked bias vs standard)", criterion3},
        {4, "register equivalence via prepended pseudo-token", criterion4},
        {5, "gradient checks for every op and the full model", criterion5},
        {6, "rmsnorm preserves a planted outlier as a sqrt(d) spike", criterion6},
        {7, "intervention equals truncate-edit-resume bitwise", criterion7},
        {8, "perplexity closed forms", criterion8},
        {9, "training smoke: three variants learn comparably", criterion9},
        {10, "outlier-feature detector matches brute force", criterion10},
        {11, "CLI runs are byte-identical when re-run from their manifests",
         [&] { return criterion11(cli, scratch); }},
    };

    int failures = 0;
    int ran = 0;
    for (const auto& e : entries) {
        if (!only.empty() && only.count(e.idx) == 0) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = e.fn();
        } catch (const std::exception& ex) {
            o.ok = false;
            o.detail = std::string("exception: ") + ex.what();
        }
        std::printf("criterion %2d: %s  %s%s%s (%.2f s)\n", e.idx, o.ok ? "PASS" : "FAIL", e.title,
                    o.detail.empty() ? "" : " -- ", o.detail.c_str(), elapsed_s(t0));
        std::fflush(stdout);
        if (!o.ok) ++failures;
    }
    std::printf("acceptance: %d/%d criteria passed\n", ran - failures, ran);
    return failures == 0 ? 0 : 1;
}
