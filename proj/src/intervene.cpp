#include "actlab/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "actlab/train.hpp"
#include "json.hpp"

namespace actlab {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<std::int32_t> effective_ids(const Model& model,
                                        const std::vector<std::int32_t>& tokens) {
    std::vector<std::int32_t> ids;
    if (model.config.sink_token) ids.push_back(model.config.sink_id());
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    return ids;
}

}  // namespace

const char* mode_name(InterventionMode m) {
    switch (m) {
        case InterventionMode::zero: return "zero";
        case InterventionMode::mean: return "mean";
        case InterventionMode::value: return "value";
    }
    fail("unknown intervention mode");
}

InterventionMode mode_from_name(const std::string& name) {
    if (name == "zero") return InterventionMode::zero;
    if (name == "mean") return InterventionMode::mean;
    if (name == "value") return InterventionMode::value;
    fail("unknown intervention mode '" + name + "'");
}

void validate_spec(const InterventionSpec& spec, const ModelConfig& config) {
    if (spec.layer < 0 || spec.layer >= config.n_layers)
        fail("intervention: layer " + std::to_string(spec.layer) + " out of range [0, " +
             std::to_string(config.n_layers) + ") -- at least one block must consume the edit");
    for (const auto& t : spec.targets) {
        if (t.feature < 0 || t.feature >= config.d_model)
            fail("intervention: feature " + std::to_string(t.feature) + " out of range [0, " +
                 std::to_string(config.d_model) + ")");
        if (t.token.kind == TokenSelector::Kind::rank && t.token.value < 1)
            fail("intervention: rank selector must be >= 1");
    }
}

InterventionSpec parse_intervention_spec(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        fail(std::string("intervention spec: ") + e.what());
    }
    InterventionSpec spec;
    spec.layer = j.at("layer").get<std::int64_t>();
    spec.mode = mode_from_name(j.at("mode").get<std::string>());
    for (const auto& jt : j.at("targets")) {
        InterventionTarget t;
        const json& tok = jt.at("token");
        if (tok.contains("index"))
            t.token = TokenSelector::index(tok.at("index").get<std::int64_t>());
        else if (tok.contains("first_id"))
            t.token = TokenSelector::first_id(tok.at("first_id").get<std::int64_t>());
        else if (tok.contains("rank"))
            t.token = TokenSelector::rank(tok.at("rank").get<std::int64_t>());
        else
            fail("intervention spec: token selector needs \"index\", \"first_id\", or \"rank\"");
        t.feature = jt.at("feature").get<std::int64_t>();
        if (spec.mode == InterventionMode::value) {
            if (!jt.contains("value")) fail("intervention spec: mode=value target missing value");
            t.value = jt.at("value").get<double>();
        }
        spec.targets.push_back(t);
    }
    return spec;
}

std::string intervention_spec_json(const InterventionSpec& spec) {
    json targets = json::array();
    for (const auto& t : spec.targets) {
        json tok;
        switch (t.token.kind) {
            case TokenSelector::Kind::index: tok["index"] = t.token.value; break;
            case TokenSelector::Kind::first_id: tok["first_id"] = t.token.value; break;
            case TokenSelector::Kind::rank: tok["rank"] = t.token.value; break;
        }
        json jt{{"token", tok}, {"feature", t.feature}};
        if (spec.mode == InterventionMode::value) jt["value"] = t.value;
        targets.push_back(jt);
    }
    return json{{"layer", spec.layer}, {"mode", mode_name(spec.mode)}, {"targets", targets}}
        .dump();
}

CalibrationStats calibrate_means(const Model& model,
                                 const std::vector<std::vector<std::int32_t>>& sequences,
                                 const InterventionSpec& spec, std::uint64_t seed) {
    validate_spec(spec, model.config);
    if (sequences.empty()) fail("calibration: need at least one sequence");
    CalibrationStats stats;
    stats.means.assign(spec.targets.size(), 0.0);
    stats.corpus_size = static_cast<std::int64_t>(sequences.size());
    stats.seed = seed;
    for (size_t s = 0; s < sequences.size(); ++s) {
        ForwardResult res = model.forward_with_trace(sequences[s]);
        const Tensor& state = res.trace.states.at(static_cast<size_t>(spec.layer));
        for (size_t i = 0; i < spec.targets.size(); ++i) {
            const auto& t = spec.targets[i];
            const std::int64_t tok =
                resolve_token(res.trace, spec.layer, t.token, std::to_string(s));
            stats.means[i] += state.at(tok, t.feature);
        }
    }
    for (double& m : stats.means) m /= static_cast<double>(stats.corpus_size);
    return stats;
}

std::function<void(std::int64_t, Tensor&)> make_edit_hook(const Model& model,
                                                          const std::vector<std::int32_t>& tokens,
                                                          const InterventionSpec& spec,
                                                          const CalibrationStats* calib) {
    validate_spec(spec, model.config);
    if (spec.mode == InterventionMode::mean) {
        if (!calib) fail("intervention: mode=mean requires calibration");
        if (calib->means.size() != spec.targets.size())
            fail("intervention: calibration covers " + std::to_string(calib->means.size()) +
                 " targets, spec has " + std::to_string(spec.targets.size()));
    }
    std::vector<double> means;
    if (calib) means = calib->means;
    const std::vector<std::int32_t> ids = effective_ids(model, tokens);
    const InterventionSpec sp = spec;
    return [sp, means, ids](std::int64_t state_index, Tensor& h) {
        if (state_index != sp.layer) return;
        // resolve everything against the pre-edit state, then write
        std::vector<std::int64_t> rows(sp.targets.size());
        for (size_t i = 0; i < sp.targets.size(); ++i)
            rows[i] = resolve_token(ids, h, sp.targets[i].token, "(intervention input)");
        double* data = h.data();
        const std::int64_t d = h.cols();
        for (size_t i = 0; i < sp.targets.size(); ++i) {
            double v = 0.0;
            if (sp.mode == InterventionMode::mean) v = means[i];
            if (sp.mode == InterventionMode::value) v = sp.targets[i].value;
            data[rows[i] * d + sp.targets[i].feature] = v;
        }
    };
}

ForwardResult run_with_intervention(const Model& model, const std::vector<std::int32_t>& tokens,
                                    const InterventionSpec& spec,
                                    const CalibrationStats* calib) {
    ForwardOptions opt;
    opt.want_attn = false;
    opt.edit_state = make_edit_hook(model, tokens, spec, calib);
    return model.forward(model.bind(false), tokens, opt);
}

double perplexity(const Model& model, const std::vector<std::vector<std::int32_t>>& windows,
                  const InterventionSpec* spec, const CalibrationStats* calib) {
    if (windows.empty()) fail("perplexity: no windows");
    double nll = 0.0;
    std::int64_t count = 0;
    for (const auto& w : windows) {
        if (spec) {
            const std::vector<std::int32_t> inputs(w.begin(), w.end() - 1);
            window_nll(model, w, nll, count, make_edit_hook(model, inputs, *spec, calib));
        } else {
            window_nll(model, w, nll, count);
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

InterventionSpec control_spec(const Model& model,
                              const std::vector<std::vector<std::int32_t>>& windows,
                              const InterventionSpec& spec) {
    validate_spec(spec, model.config);
    if (windows.empty()) fail("control: no windows");
    // matching an empty target list means editing nothing
    if (spec.targets.empty()) return {spec.layer, InterventionMode::zero, {}};

    const std::int64_t d = model.config.d_model;
    std::vector<double> avg;  // [t x d] average magnitude at spec.layer
    std::int64_t t = -1;
    std::set<std::pair<std::int64_t, std::int64_t>> excluded;
    for (size_t s = 0; s < windows.size(); ++s) {
        const std::vector<std::int32_t> inputs(windows[s].begin(), windows[s].end() - 1);
        ForwardResult res = model.forward_with_trace(inputs);
        const Tensor& state = res.trace.states.at(static_cast<size_t>(spec.layer));
        if (t < 0) {
            t = state.rows();
            avg.assign(static_cast<size_t>(t * d), 0.0);
        } else if (state.rows() != t) {
            fail("control: windows must share one length");
        }
        for (std::int64_t i = 0; i < t * d; ++i) avg[i] += std::abs(state.data()[i]);
        for (const auto& target : spec.targets)
            excluded.emplace(resolve_token(res.trace, spec.layer, target.token, std::to_string(s)),
                             target.feature);
    }
    for (double& a : avg) a /= static_cast<double>(windows.size());

    const double med = median_magnitude(avg);
    struct Cand {
        double dist;
        std::int64_t tok, feat;
    };
    std::vector<Cand> cands;
    cands.reserve(avg.size());
    for (std::int64_t ti = 0; ti < t; ++ti)
        for (std::int64_t f = 0; f < d; ++f) {
            if (excluded.count({ti, f})) continue;
            cands.push_back({std::abs(avg[ti * d + f] - med), ti, f});
        }
    const size_t n = spec.targets.size();
    if (cands.size() < n) fail("control: not enough coordinates outside the target set");
    std::partial_sort(cands.begin(), cands.begin() + n, cands.end(),
                      [](const Cand& a, const Cand& b) {
                          if (a.dist != b.dist) return a.dist < b.dist;
                          if (a.tok != b.tok) return a.tok < b.tok;
                          return a.feat < b.feat;
                      });
    InterventionSpec out;
    out.layer = spec.layer;
    out.mode = InterventionMode::zero;
    for (size_t i = 0; i < n; ++i) {
        InterventionTarget target;
        target.token = TokenSelector::index(cands[i].tok);
        target.feature = cands[i].feat;
        out.targets.push_back(target);
    }
    return out;
}

std::vector<PerplexityRow> intervention_report(
    const Model& model, const std::vector<std::vector<std::int32_t>>& windows,
    const std::vector<std::vector<std::int32_t>>& calib_sequences, const InterventionSpec& spec,
    bool with_control, std::uint64_t calib_seed) {
    std::vector<PerplexityRow> rows;
    rows.push_back({"original", perplexity(model, windows)});

    InterventionSpec zero = spec;
    zero.mode = InterventionMode::zero;
    rows.push_back({"set_to_zero", perplexity(model, windows, &zero)});

    InterventionSpec mean = spec;
    mean.mode = InterventionMode::mean;
    const CalibrationStats calib = calibrate_means(model, calib_sequences, mean, calib_seed);
    rows.push_back({"set_to_mean", perplexity(model, windows, &mean, &calib)});

    if (spec.mode == InterventionMode::value)
        rows.push_back({"set_to_value", perplexity(model, windows, &spec)});

    if (with_control) {
        const InterventionSpec control = control_spec(model, windows, spec);
        rows.push_back({"control_zero", perplexity(model, windows, &control)});
    }
    return rows;
}

}  // namespace actlab
