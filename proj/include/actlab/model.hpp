#pragma once

// Decoder-only transformer: learned token + position embeddings, pre-norm
// blocks (norm -> attention -> residual; norm -> MLP -> residual), GELU MLP of
// width 4d, tied output head. The forward pass exposes the residual stream
// (the post-residual hidden state after every block) for the detectors.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "actlab/attention.hpp"
#include "actlab/tensor.hpp"

namespace actlab {

struct ModelConfig {
    std::int64_t n_layers = 4;
    std::int64_t d_model = 128;
    std::int64_t n_heads = 4;
    std::int64_t context_len = 256;
    std::int64_t vocab_size = 0;
    NormKind norm_kind = NormKind::layernorm;
    AttentionVariant variant = AttentionVariant::standard;
    bool sink_token = false;
    double norm_eps = 1e-5;

    std::int64_t d_head() const { return d_model / n_heads; }
    // The sink reserves one extra embedding row with id == vocab_size.
    std::int64_t embedding_rows() const { return vocab_size + (sink_token ? 1 : 0); }
    std::int32_t sink_id() const { return static_cast<std::int32_t>(vocab_size); }
    void validate() const;
};

struct HiddenStateTrace {
    std::vector<Tensor> states;  // L+1 snapshots [T_eff x d]; embedding output, then h_1..h_L
    std::vector<std::int32_t> token_ids;
    std::vector<std::string> token_strings;
};

struct ForwardResult {
    Tensor logits;  // [T_eff x embedding_rows]
    HiddenStateTrace trace;
    std::vector<AttentionProbs> attn;  // per layer, when requested
};

// Leaf views over a ParamSet, shared across the forward passes of a batch so
// backward accumulates all sequence gradients in one place.
struct BoundParams {
    std::vector<Tensor> leaves;  // parallel to ParamSet entries
    const Tensor& operator[](std::int64_t i) const { return leaves[static_cast<size_t>(i)]; }
};

// Live captures of one block's pipeline stages, filled during forward so the
// trajectory analysis sees the exact states the model computed. `normalized`
// is the pre-gain (x-mu)/(sigma+eps) or x/(rms+eps) state, `rescaled` is after
// the gain (and bias); query/key/value are the per-head projection slices.
struct StageCapture {
    std::int64_t layer = 0;  // block index to capture
    Tensor input;            // [T x d]
    Tensor normalized;       // [T x d]
    Tensor rescaled;         // [T x d]
    std::vector<Tensor> query, key, value;  // per head, [T x d_head]
};

struct ForwardOptions {
    bool grad = false;
    bool want_trace = true;
    bool want_attn = true;
    // Applied to each residual-stream state (index 0 = embedding output,
    // index l+1 = after block l) before anything downstream consumes it; the
    // intervention module's surgery hook. Evaluation-only (grad=false).
    std::function<void(std::int64_t state_index, Tensor& h)> edit_state;
    StageCapture* capture = nullptr;
};

struct Model {
    ModelConfig config;
    ParamSet params;
    std::vector<std::string> vocab;  // id -> display string; optional

    static Model init(const ModelConfig& config, std::uint64_t seed);

    BoundParams bind(bool grad) const;

    // tokens are real vocabulary ids; the sink (when configured) is prepended
    // here, at train and analysis time alike.
    ForwardResult forward(const BoundParams& bound, const std::vector<std::int32_t>& tokens,
                          const ForwardOptions& opt) const;
    ForwardResult forward_with_trace(const std::vector<std::int32_t>& tokens) const;

    std::string token_string(std::int32_t id) const;
};

// ---- checkpointing ---------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> vocab;
    ParamSet params;
    AdamState opt;
    std::int64_t step = 0;
    std::uint64_t seed = 0;

    Model to_model() const;
};

// Binary format: magic, format version, JSON header (config, vocab, seed,
// step, parameter name/shape/offset table), then raw little-endian f64 blocks
// for parameters and optimizer moments. Roundtrip is bit-identical.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// JSON round-trip for the config (checkpoint headers, config files, run
// manifests). Parsing fills absent keys with defaults.
std::string model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace actlab
