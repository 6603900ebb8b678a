#pragma once

// Detectors and statistics over residual-stream traces: massive-activation
// detection, layerwise top-k/median profiles, corpus-level outlier-feature
// detection, and position-wise mean/std aggregation.

#include <cstdint>
#include <string>
#include <vector>

#include "actlab/model.hpp"

namespace actlab {

// Default detection profile (full-scale). Toy models shrink absolute scales
// with d, so the CLI documents a relaxed profile (abs 10, ratio 100); the
// active profile is echoed in every output.
inline constexpr double kAbsThresholdDefault = 100.0;
inline constexpr double kRatioThresholdDefault = 1000.0;

struct MassiveActivationRecord {
    std::int64_t layer = 0;  // trace state index; 0 is the embedding output
    std::int64_t token_index = 0;
    std::int64_t feature_index = 0;
    double value = 0.0;
    double magnitude = 0.0;
    double median_magnitude = 0.0;
    double ratio = 0.0;  // +inf when the median is zero
    std::string token_string;
};

struct LayerStats {
    struct Entry {
        double magnitude = 0.0;
        std::int64_t token = 0;
        std::int64_t feature = 0;
    };
    std::int64_t layer = 0;
    std::vector<Entry> top;  // descending; ties by lower token then feature
    double median_magnitude = 0.0;
};

// Token selectors shared by position stats and interventions.
struct TokenSelector {
    enum class Kind { index, first_id, rank };
    Kind kind = Kind::index;
    std::int64_t value = 0;

    static TokenSelector index(std::int64_t i) { return {Kind::index, i}; }
    static TokenSelector first_id(std::int64_t id) { return {Kind::first_id, id}; }
    static TokenSelector rank(std::int64_t r) { return {Kind::rank, r}; }
};

// Resolves a selector to a token index within one trace. rank r picks the
// token holding the r-th largest |activation| (r = 1 is the largest) in the
// given layer's state. seq_label names the sequence in error messages.
std::int64_t resolve_token(const HiddenStateTrace& trace, std::int64_t layer,
                           const TokenSelector& sel, const std::string& seq_label);

// Same resolution against a single state (the intervention hook path, where
// only the layer being edited exists).
std::int64_t resolve_token(const std::vector<std::int32_t>& token_ids, const Tensor& state,
                           const TokenSelector& sel, const std::string& seq_label);

// Median of a magnitude vector; even count averages the two central values.
double median_magnitude(std::vector<double> magnitudes);

struct PositionKey {
    std::int64_t layer = 0;
    TokenSelector token;
    std::int64_t feature = 0;
};

struct PositionStats {
    PositionKey key;
    double mean = 0.0;
    double stddev = 0.0;  // sample std; 0 when count == 1
    std::int64_t count = 0;
};

std::vector<LayerStats> layer_stats(const HiddenStateTrace& trace, std::int64_t k);

std::vector<MassiveActivationRecord> detect_massive(const HiddenStateTrace& trace,
                                                    double abs_threshold = kAbsThresholdDefault,
                                                    double ratio_threshold = kRatioThresholdDefault);

// Feature f is flagged iff on strictly more than seq_frac of sequences, the
// fraction of layers where the fraction of tokens with |h[t,f]| > mag
// strictly exceeds token_frac is strictly greater than layer_frac.
std::vector<std::int64_t> detect_outlier_features(const std::vector<HiddenStateTrace>& traces,
                                                  double mag = 6.0, double layer_frac = 0.25,
                                                  double token_frac = 0.06,
                                                  double seq_frac = 0.90);

std::vector<PositionStats> position_stats(const std::vector<HiddenStateTrace>& traces,
                                          const std::vector<PositionKey>& positions);

}  // namespace actlab
