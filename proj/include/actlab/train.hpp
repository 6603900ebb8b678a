#pragma once

// Corpus ingestion (character-level), batching, the training loop, and the
// shared window/NLL accounting that keeps eval_loss and perplexity consistent
// to the last bit.

#include <cstdint>
#include <string>
#include <vector>

#include "actlab/model.hpp"

namespace actlab {

struct Corpus {
    std::vector<std::int32_t> ids;
    std::vector<std::uint32_t> vocab;  // codepoints sorted ascending; id = rank
    std::int64_t split_boundary = 0;   // first validation token

    std::int64_t vocab_size() const { return static_cast<std::int64_t>(vocab.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
    std::vector<std::string> vocab_strings() const;

    // Encodes text against this vocabulary; unknown characters are an error.
    std::vector<std::int32_t> encode(const std::string& text) const;
};

Corpus corpus_from_text(const std::string& text, double val_fraction);
Corpus ingest_text(const std::string& path, double val_fraction);

// Encode a prompt against a model's saved vocabulary (checkpoint vocab).
std::vector<std::int32_t> encode_with_vocab(const std::vector<std::string>& vocab,
                                            const std::string& text);

struct TrainConfig {
    ModelConfig model;
    std::int64_t iterations = 2000;
    std::int64_t batch_size = 16;
    std::int64_t seq_len = 0;  // 0 = context_len minus the sink slot
    double lr_max = 1e-3;
    double lr_min = 1e-4;
    std::int64_t warmup = 100;
    std::int64_t eval_interval = 100;
    std::int64_t eval_windows = 16;
    std::uint64_t seed = 1337;

    std::int64_t effective_seq_len() const {
        return seq_len > 0 ? seq_len : model.context_len - (model.sink_token ? 1 : 0);
    }
    void validate() const;
};

// lr(0) = 0, linear ramp over `warmup`, cosine decay hitting lr_min exactly at
// the final step.
double lr_at(std::int64_t step, const TrainConfig& cfg);

// JSON round-trip; parsing fills absent keys (and absent "model" subkeys)
// with defaults.
std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

// Deterministic synthetic English-like text (word-bank sentences grouped into
// paragraphs), at least min_bytes long.
std::string generate_corpus(std::uint64_t seed, std::int64_t min_bytes);

struct LossPoint {
    std::int64_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossPoint> history;
    double final_val_loss = 0.0;
};

TrainResult train(const Corpus& corpus, const TrainConfig& cfg);

// The deterministic validation windows (count/seed from the config); each
// window is seq_len+1 real token ids.
std::vector<std::vector<std::int32_t>> eval_windows(const Corpus& corpus, const TrainConfig& cfg);

// Sum of next-token NLLs and the prediction count for one window, sink
// position excluded. Shared by eval_loss and the perplexity module.
void window_nll(const Model& model, const std::vector<std::int32_t>& window, double& nll_sum,
                std::int64_t& count,
                const std::function<void(std::int64_t, Tensor&)>& edit_state = nullptr);

double eval_loss(const Model& model, const std::vector<std::vector<std::int32_t>>& windows);

}  // namespace actlab
