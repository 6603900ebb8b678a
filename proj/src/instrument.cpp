#include "actlab/instrument.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace actlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<double> state_magnitudes(const Tensor& state) {
    std::vector<double> mags(static_cast<size_t>(state.numel()));
    for (std::int64_t i = 0; i < state.numel(); ++i) mags[i] = std::abs(state.data()[i]);
    return mags;
}

// Descending |value|; ties broken by lower token index, then lower feature.
void order_entries(std::vector<LayerStats::Entry>& entries, size_t keep) {
    const auto cmp = [](const LayerStats::Entry& a, const LayerStats::Entry& b) {
        if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
        if (a.token != b.token) return a.token < b.token;
        return a.feature < b.feature;
    };
    std::partial_sort(entries.begin(), entries.begin() + keep, entries.end(), cmp);
}

std::vector<LayerStats::Entry> all_entries(const Tensor& state) {
    const std::int64_t t = state.rows(), d = state.cols();
    std::vector<LayerStats::Entry> entries;
    entries.reserve(static_cast<size_t>(t * d));
    for (std::int64_t ti = 0; ti < t; ++ti)
        for (std::int64_t f = 0; f < d; ++f)
            entries.push_back({std::abs(state.at(ti, f)), ti, f});
    return entries;
}

}  // namespace

double median_magnitude(std::vector<double> mags) {
    const size_t n = mags.size();
    if (n == 0) fail("median: empty input");
    std::sort(mags.begin(), mags.end());
    if (n % 2 == 1) return mags[n / 2];
    return 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
}

std::vector<LayerStats> layer_stats(const HiddenStateTrace& trace, std::int64_t k) {
    if (k < 1) fail("layer_stats: k must be >= 1");
    std::vector<LayerStats> out;
    out.reserve(trace.states.size());
    for (size_t l = 0; l < trace.states.size(); ++l) {
        const Tensor& state = trace.states[l];
        LayerStats ls;
        ls.layer = static_cast<std::int64_t>(l);
        std::vector<LayerStats::Entry> entries = all_entries(state);
        const size_t keep = std::min<size_t>(static_cast<size_t>(k), entries.size());
        order_entries(entries, keep);
        ls.top.assign(entries.begin(), entries.begin() + keep);
        ls.median_magnitude = median_magnitude(state_magnitudes(state));
        out.push_back(std::move(ls));
    }
    return out;
}

std::vector<MassiveActivationRecord> detect_massive(const HiddenStateTrace& trace,
                                                    double abs_threshold,
                                                    double ratio_threshold) {
    if (abs_threshold <= 0.0 || ratio_threshold <= 0.0)
        fail("detect_massive: thresholds must be positive");
    std::vector<MassiveActivationRecord> records;
    for (size_t l = 0; l < trace.states.size(); ++l) {
        const Tensor& state = trace.states[l];
        const double median = median_magnitude(state_magnitudes(state));
        const std::int64_t t = state.rows(), d = state.cols();
        for (std::int64_t ti = 0; ti < t; ++ti)
            for (std::int64_t f = 0; f < d; ++f) {
                const double v = state.at(ti, f);
                const double mag = std::abs(v);
                if (!(mag > abs_threshold)) continue;
                // zero median: ratio is +inf, the abs test alone decides
                const double ratio = median > 0.0
                                         ? mag / median
                                         : std::numeric_limits<double>::infinity();
                if (median > 0.0 && !(mag >= ratio_threshold * median)) continue;
                MassiveActivationRecord r;
                r.layer = static_cast<std::int64_t>(l);
                r.token_index = ti;
                r.feature_index = f;
                r.value = v;
                r.magnitude = mag;
                r.median_magnitude = median;
                r.ratio = ratio;
                if (ti < static_cast<std::int64_t>(trace.token_strings.size()))
                    r.token_string = trace.token_strings[ti];
                records.push_back(std::move(r));
            }
    }
    std::sort(records.begin(), records.end(),
              [](const MassiveActivationRecord& a, const MassiveActivationRecord& b) {
                  if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
                  if (a.layer != b.layer) return a.layer < b.layer;
                  if (a.token_index != b.token_index) return a.token_index < b.token_index;
                  return a.feature_index < b.feature_index;
              });
    return records;
}

std::vector<std::int64_t> detect_outlier_features(const std::vector<HiddenStateTrace>& traces,
                                                  double mag, double layer_frac,
                                                  double token_frac, double seq_frac) {
    if (traces.empty()) fail("detect_outlier_features: need at least one sequence");
    const std::int64_t d = traces[0].states.at(0).cols();
    std::vector<std::int64_t> seq_hits(static_cast<size_t>(d), 0);
    for (const auto& trace : traces) {
        const std::int64_t layers = static_cast<std::int64_t>(trace.states.size());
        std::vector<std::int64_t> layer_hits(static_cast<size_t>(d), 0);
        for (const Tensor& state : trace.states) {
            if (state.cols() != d) fail("detect_outlier_features: inconsistent feature width");
            const std::int64_t t = state.rows();
            for (std::int64_t f = 0; f < d; ++f) {
                std::int64_t token_hits = 0;
                for (std::int64_t ti = 0; ti < t; ++ti)
                    if (std::abs(state.at(ti, f)) > mag) ++token_hits;
                if (static_cast<double>(token_hits) > token_frac * static_cast<double>(t))
                    ++layer_hits[f];
            }
        }
        for (std::int64_t f = 0; f < d; ++f)
            if (static_cast<double>(layer_hits[f]) > layer_frac * static_cast<double>(layers))
                ++seq_hits[f];
    }
    std::vector<std::int64_t> flagged;
    const double n_seq = static_cast<double>(traces.size());
    for (std::int64_t f = 0; f < d; ++f)
        if (static_cast<double>(seq_hits[f]) > seq_frac * n_seq) flagged.push_back(f);
    return flagged;
}

std::int64_t resolve_token(const std::vector<std::int32_t>& token_ids, const Tensor& state,
                           const TokenSelector& sel, const std::string& seq_label) {
    const std::int64_t t = state.rows();
    switch (sel.kind) {
        case TokenSelector::Kind::index:
            if (sel.value < 0 || sel.value >= t)
                fail("token selector index " + std::to_string(sel.value) +
                     " out of range in sequence " + seq_label);
            return sel.value;
        case TokenSelector::Kind::first_id: {
            for (size_t i = 0; i < token_ids.size(); ++i)
                if (token_ids[i] == static_cast<std::int32_t>(sel.value))
                    return static_cast<std::int64_t>(i);
            fail("token selector first_id=" + std::to_string(sel.value) +
                 " unresolvable in sequence " + seq_label);
        }
        case TokenSelector::Kind::rank: {
            if (sel.value < 1)
                fail("token selector rank must be >= 1 in sequence " + seq_label);
            if (sel.value > state.numel())
                fail("token selector rank=" + std::to_string(sel.value) +
                     " unresolvable in sequence " + seq_label);
            std::vector<LayerStats::Entry> entries = all_entries(state);
            order_entries(entries, static_cast<size_t>(sel.value));
            return entries[static_cast<size_t>(sel.value - 1)].token;
        }
    }
    fail("token selector: unknown kind");
}

std::int64_t resolve_token(const HiddenStateTrace& trace, std::int64_t layer,
                           const TokenSelector& sel, const std::string& seq_label) {
    if (layer < 0 || layer >= static_cast<std::int64_t>(trace.states.size()))
        fail("token selector: layer " + std::to_string(layer) + " out of range in sequence " +
             seq_label);
    return resolve_token(trace.token_ids, trace.states[static_cast<size_t>(layer)], sel, seq_label);
}

std::vector<PositionStats> position_stats(const std::vector<HiddenStateTrace>& traces,
                                          const std::vector<PositionKey>& positions) {
    if (traces.empty()) fail("position_stats: need at least one sequence");
    std::vector<PositionStats> out;
    out.reserve(positions.size());
    for (const PositionKey& key : positions) {
        std::vector<double> samples;
        samples.reserve(traces.size());
        for (size_t s = 0; s < traces.size(); ++s) {
            const auto& trace = traces[s];
            if (key.layer < 0 || key.layer >= static_cast<std::int64_t>(trace.states.size()))
                fail("position_stats: layer " + std::to_string(key.layer) +
                     " out of range in sequence " + std::to_string(s));
            const Tensor& state = trace.states[static_cast<size_t>(key.layer)];
            if (key.feature < 0 || key.feature >= state.cols())
                fail("position_stats: feature " + std::to_string(key.feature) +
                     " out of range in sequence " + std::to_string(s));
            const std::int64_t tok = resolve_token(trace, key.layer, key.token, std::to_string(s));
            samples.push_back(state.at(tok, key.feature));
        }
        PositionStats ps;
        ps.key = key;
        ps.count = static_cast<std::int64_t>(samples.size());
        double mean = 0.0;
        for (double v : samples) mean += v;
        mean /= static_cast<double>(samples.size());
        double var = 0.0;
        for (double v : samples) var += (v - mean) * (v - mean);
        ps.mean = mean;
        ps.stddev = samples.size() > 1
                        ? std::sqrt(var / static_cast<double>(samples.size() - 1))
                        : 0.0;
        out.push_back(ps);
    }
    return out;
}

}  // namespace actlab
