#pragma once

// Mid-forward activation surgery: overwrite chosen entries of one
// residual-stream state with zero, calibrated means, or explicit values, and
// let the remaining layers consume the edited state. Includes the perplexity
// harness comparing the unmodified model against its intervened variants and
// against a median-magnitude control.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "actlab/instrument.hpp"
#include "actlab/model.hpp"

namespace actlab {

enum class InterventionMode { zero, mean, value };

const char* mode_name(InterventionMode m);
InterventionMode mode_from_name(const std::string& name);

struct InterventionTarget {
    TokenSelector token;
    std::int64_t feature = 0;
    double value = 0.0;  // used when mode == value
};

struct InterventionSpec {
    // Residual-stream state index to edit: 0 is the embedding output, l+1 the
    // output of block l. Must leave at least one block downstream.
    std::int64_t layer = 0;
    InterventionMode mode = InterventionMode::zero;
    std::vector<InterventionTarget> targets;
};

void validate_spec(const InterventionSpec& spec, const ModelConfig& config);

// Spec file: {"layer": int, "mode": "zero"|"mean"|"value",
//   "targets": [{"token": {"index": int} | {"first_id": int},
//                "feature": int, "value"?: number}]}
InterventionSpec parse_intervention_spec(const std::string& json_text);
std::string intervention_spec_json(const InterventionSpec& spec);

struct CalibrationStats {
    std::vector<double> means;  // one per spec target, same order
    std::int64_t corpus_size = 0;
    std::uint64_t seed = 0;
};

// Mean signed activation at each target over the given sequences, reduced in
// sequence order. Every target must resolve in every sequence.
CalibrationStats calibrate_means(const Model& model,
                                 const std::vector<std::vector<std::int32_t>>& sequences,
                                 const InterventionSpec& spec, std::uint64_t seed = 0);

// The edit_state hook for one input sequence: resolves every target against
// the pre-edit state, then overwrites. `tokens` are the real input ids (the
// model prepends its sink itself, and so does the hook's resolution).
std::function<void(std::int64_t, Tensor&)> make_edit_hook(const Model& model,
                                                          const std::vector<std::int32_t>& tokens,
                                                          const InterventionSpec& spec,
                                                          const CalibrationStats* calib);

ForwardResult run_with_intervention(const Model& model, const std::vector<std::int32_t>& tokens,
                                    const InterventionSpec& spec,
                                    const CalibrationStats* calib = nullptr);

// exp(mean next-token NLL) over the windows (each seq_len+1 ids), the spec
// applied per window when given. Overflow surfaces as +inf.
double perplexity(const Model& model, const std::vector<std::vector<std::int32_t>>& windows,
                  const InterventionSpec* spec = nullptr,
                  const CalibrationStats* calib = nullptr);

// Same target count retargeted at the coordinates whose average magnitude
// (over the windows' states at spec.layer) sits closest to the median, mode
// zero; the original targets are excluded from the candidate pool.
InterventionSpec control_spec(const Model& model,
                              const std::vector<std::vector<std::int32_t>>& windows,
                              const InterventionSpec& spec);

struct PerplexityRow {
    std::string label;
    double perplexity = 0.0;
};

// The full protocol over one window set: original, targets zeroed, targets
// set to their calibrated means (calibrated on calib_sequences), an explicit
// value row when the spec carries values, and optionally the zeroed control.
std::vector<PerplexityRow> intervention_report(
    const Model& model, const std::vector<std::vector<std::int32_t>>& windows,
    const std::vector<std::vector<std::int32_t>>& calib_sequences, const InterventionSpec& spec,
    bool with_control, std::uint64_t calib_seed = 0);

}  // namespace actlab
