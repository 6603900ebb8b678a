// actlab: train small decoder-only models with pluggable attention biases and
// run the massive-activation analyses over their residual streams.
//
// Every command writes its artifacts plus a manifest.json into --out; numeric
// outputs carry the manifest digest and the active detection profile in a '#'
// comment header, and re-running the argv recorded in a manifest reproduces
// every file byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "actlab/analysis.hpp"
#include "actlab/instrument.hpp"
#include "actlab/intervene.hpp"
#include "actlab/io.hpp"
#include "actlab/model.hpp"
#include "actlab/rng.hpp"
#include "actlab/train.hpp"
#include "json.hpp"

namespace {

using actlab::double_str;
using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// ---- run context ------------------------------------------------------------

struct RunContext {
    std::string command;
    std::vector<std::string> argv;
    std::string out_dir;
    double abs_threshold = actlab::kAbsThresholdDefault;
    double ratio_threshold = actlab::kRatioThresholdDefault;
    std::uint64_t seed = 0;
    json config = json::object();
    json options = json::object();
    std::map<std::string, std::string> inputs;
    std::vector<std::pair<std::string, std::string>> csv_files;  // name -> body (no header yet)
    std::vector<std::pair<std::string, json>> json_files;
    std::vector<std::string> raw_files_listed;  // written by the command itself

    void add_input(const std::string& path) {
        const std::string bytes = actlab::read_file(path);
        inputs[path] = actlab::hex64(actlab::fnv1a64(bytes.data(), bytes.size()));
    }

    void add_csv(const std::string& name, std::string body) {
        csv_files.emplace_back(name, std::move(body));
    }
    void add_json(const std::string& name, json j) { json_files.emplace_back(name, std::move(j)); }

    // Builds the manifest, stamps every numeric output with its digest, and
    // writes the lot atomically.
    void finish() {
        json manifest;
        manifest["argv"] = argv;
        manifest["command"] = command;
        manifest["config"] = config;
        manifest["detection_profile"] = {{"abs_threshold", abs_threshold},
                                         {"ratio_threshold", ratio_threshold}};
        manifest["inputs"] = inputs;
        manifest["options"] = options;
        std::vector<std::string> outs = raw_files_listed;
        for (const auto& [name, _] : csv_files) outs.push_back(name);
        for (const auto& [name, _] : json_files) outs.push_back(name);
        std::sort(outs.begin(), outs.end());
        manifest["outputs"] = outs;
        manifest["seed"] = seed;
        manifest["tool_version"] = actlab::kToolVersion;

        const std::string manifest_str = manifest.dump(2) + "\n";
        const std::string digest =
            actlab::hex64(actlab::fnv1a64(manifest_str.data(), manifest_str.size()));
        const std::string header = "# manifest_digest=" + digest +
                                   "\n# detection_profile: abs_threshold=" +
                                   double_str(abs_threshold) +
                                   " ratio_threshold=" + double_str(ratio_threshold) + "\n";

        const std::filesystem::path dir(out_dir);
        actlab::write_file_atomic((dir / "manifest.json").string(), manifest_str);
        for (const auto& [name, body] : csv_files)
            actlab::write_file_atomic((dir / name).string(), header + body);
        for (auto& [name, j] : json_files) {
            j["manifest_digest"] = digest;
            j["detection_profile"] = manifest["detection_profile"];
            actlab::write_file_atomic((dir / name).string(), j.dump(2) + "\n");
        }
        std::cout << command << ": wrote " << outs.size() + 1 << " files to " << out_dir << "\n";
    }
};

// ---- shared plumbing ----------------------------------------------------------

actlab::Model load_model(const std::string& ckpt_path) {
    return actlab::load_checkpoint(ckpt_path).to_model();
}

std::vector<std::int32_t> encode_prompt(const actlab::Model& model, const std::string& prompt) {
    if (prompt.empty()) fail("empty prompt");
    return actlab::encode_with_vocab(model.vocab, prompt);
}

// Deterministic analysis windows: uniform starts over the encoded text.
std::vector<std::vector<std::int32_t>> sample_windows(const std::vector<std::int32_t>& ids,
                                                      std::int64_t len, std::int64_t count,
                                                      std::uint64_t seed) {
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    if (len < 1 || count < 1) fail("windows: need positive length and count");
    if (n < len)
        fail("corpus has " + std::to_string(n) + " tokens, window needs " + std::to_string(len));
    actlab::Rng rng(actlab::derive_seed(seed, 2));
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(count);
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t start = static_cast<std::int64_t>(rng.below(n - len + 1));
        out.emplace_back(ids.begin() + start, ids.begin() + start + len);
    }
    return out;
}

std::int64_t analysis_len(const actlab::Model& model, std::int64_t seq_len) {
    const std::int64_t full = model.config.context_len - (model.config.sink_token ? 1 : 0);
    if (seq_len == 0) return full;
    if (seq_len < 1 || seq_len > full)
        fail("seq-len " + std::to_string(seq_len) + " out of range [1, " + std::to_string(full) +
             "]");
    return seq_len;
}

std::string join_int(const std::vector<std::int64_t>& v, char sep = ';') {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(v[i]);
    }
    return s;
}

json ratio_json(double r) {
    if (std::isinf(r)) return json("inf");
    return json(r);
}

// ---- commands -------------------------------------------------------------------

struct CommonArgs {
    std::string out;
    std::uint64_t seed = 1337;
    double abs_threshold = actlab::kAbsThresholdDefault;
    double ratio_threshold = actlab::kRatioThresholdDefault;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool thresholds = true) {
    cmd->add_option("--out", a.out, "output directory")->required();
    cmd->add_option("--seed", a.seed, "RNG seed");
    if (thresholds) {
        cmd->add_option("--abs-threshold", a.abs_threshold,
                        "massive-activation absolute threshold");
        cmd->add_option("--ratio-threshold", a.ratio_threshold,
                        "massive-activation ratio-to-median threshold");
    }
}

RunContext make_ctx(const std::string& command, const std::vector<std::string>& argv,
                    const CommonArgs& a) {
    RunContext ctx;
    ctx.command = command;
    ctx.argv = argv;
    ctx.out_dir = a.out;
    ctx.seed = a.seed;
    ctx.abs_threshold = a.abs_threshold;
    ctx.ratio_threshold = a.ratio_threshold;
    return ctx;
}

// gen-corpus ------------------------------------------------------------------

struct GenCorpusArgs {
    CommonArgs common;
    std::int64_t min_bytes = 1200000;
};

int cmd_gen_corpus(const GenCorpusArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("gen-corpus", argv, a.common);
    const std::string text = actlab::generate_corpus(a.common.seed, a.min_bytes);
    actlab::write_file_atomic((std::filesystem::path(a.common.out) / "corpus.txt").string(), text);
    ctx.raw_files_listed.push_back("corpus.txt");
    ctx.options["min_bytes"] = a.min_bytes;
    ctx.options["bytes_written"] = text.size();
    ctx.finish();
    return 0;
}

// train ---------------------------------------------------------------------------

struct TrainArgs {
    CommonArgs common;
    std::string corpus;
    std::string config_path;
    std::string variant;
    std::string norm;
    bool sink = false;
    std::int64_t iterations = -1;
    double val_fraction = 0.1;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, bool seed_given) {
    RunContext ctx = make_ctx("train", argv, a.common);
    ctx.add_input(a.corpus);

    actlab::TrainConfig cfg;
    if (!a.config_path.empty()) {
        ctx.add_input(a.config_path);
        cfg = actlab::train_config_from_json(actlab::read_file(a.config_path));
    }
    if (!a.variant.empty()) cfg.model.variant = actlab::variant_from_name(a.variant);
    if (!a.norm.empty()) {
        if (a.norm != "layernorm" && a.norm != "rmsnorm") fail("unknown norm '" + a.norm + "'");
        cfg.model.norm_kind =
            a.norm == "layernorm" ? actlab::NormKind::layernorm : actlab::NormKind::rmsnorm;
    }
    if (a.sink) cfg.model.sink_token = true;
    if (a.iterations >= 0) cfg.iterations = a.iterations;
    if (seed_given) cfg.seed = a.common.seed;
    ctx.seed = cfg.seed;

    const actlab::Corpus corpus =
        actlab::corpus_from_text(actlab::read_file(a.corpus), a.val_fraction);
    actlab::TrainResult result = actlab::train(corpus, cfg);

    ctx.config = json::parse(actlab::train_config_json(cfg));
    ctx.config["model"]["vocab_size"] = result.checkpoint.config.vocab_size;
    ctx.options["val_fraction"] = a.val_fraction;
    ctx.options["corpus_tokens"] = corpus.size();
    ctx.options["final_val_loss"] = result.final_val_loss;

    actlab::save_checkpoint(result.checkpoint,
                            (std::filesystem::path(a.common.out) / "checkpoint.bin").string());
    ctx.raw_files_listed.push_back("checkpoint.bin");

    std::string csv = "step,train_loss,val_loss,lr\n";
    for (const auto& p : result.history)
        csv += std::to_string(p.step) + "," + double_str(p.train_loss) + "," +
               double_str(p.val_loss) + "," + double_str(p.lr) + "\n";
    ctx.add_csv("loss_history.csv", std::move(csv));
    ctx.finish();
    std::cout << "final val loss " << double_str(result.final_val_loss) << "\n";
    return 0;
}

// stats ----------------------------------------------------------------------------

struct StatsArgs {
    CommonArgs common;
    std::string ckpt;
    std::string prompt;
    std::string corpus;
    std::int64_t topk = 3;
    std::int64_t seq_len = 0;
};

int cmd_stats(const StatsArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("stats", argv, a.common);
    ctx.add_input(a.ckpt);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));

    std::vector<std::int32_t> toks;
    if (!a.prompt.empty()) {
        toks = encode_prompt(model, a.prompt);
        ctx.options["prompt"] = a.prompt;
    } else if (!a.corpus.empty()) {
        ctx.add_input(a.corpus);
        const auto ids = actlab::encode_with_vocab(model.vocab, actlab::read_file(a.corpus));
        toks = sample_windows(ids, analysis_len(model, a.seq_len), 1, a.common.seed)[0];
    } else {
        fail("stats: need --prompt or --corpus");
    }
    ctx.options["topk"] = a.topk;

    const auto stats = actlab::layer_stats(model.forward_with_trace(toks).trace, a.topk);
    std::string csv = "layer";
    for (std::int64_t i = 1; i <= a.topk; ++i) csv += ",top" + std::to_string(i);
    csv += ",median\n";
    for (const auto& ls : stats) {
        csv += std::to_string(ls.layer);
        for (std::int64_t i = 0; i < a.topk; ++i)
            csv += "," + (i < static_cast<std::int64_t>(ls.top.size())
                              ? double_str(ls.top[i].magnitude)
                              : std::string());
        csv += "," + double_str(ls.median_magnitude) + "\n";
    }
    ctx.add_csv("stats.csv", std::move(csv));
    ctx.finish();
    return 0;
}

// detect ------------------------------------------------------------------------

struct DetectArgs {
    CommonArgs common;
    std::string ckpt;
    std::string prompt;
    std::string corpus;
    std::int64_t windows = 8;
    std::int64_t seq_len = 0;
};

int cmd_detect(const DetectArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("detect", argv, a.common);
    ctx.add_input(a.ckpt);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));

    std::vector<std::vector<std::int32_t>> windows;
    if (!a.prompt.empty()) {
        windows.push_back(encode_prompt(model, a.prompt));
        ctx.options["prompt"] = a.prompt;
    } else if (!a.corpus.empty()) {
        ctx.add_input(a.corpus);
        const auto ids = actlab::encode_with_vocab(model.vocab, actlab::read_file(a.corpus));
        windows = sample_windows(ids, analysis_len(model, a.seq_len), a.windows, a.common.seed);
        ctx.options["windows"] = a.windows;
    } else {
        fail("detect: need --prompt or --corpus");
    }

    json records = json::array();
    std::vector<actlab::HiddenStateTrace> traces;
    std::vector<std::set<std::int64_t>> feature_sets;
    for (size_t s = 0; s < windows.size(); ++s) {
        actlab::ForwardResult res = model.forward_with_trace(windows[s]);
        std::set<std::int64_t> feats;
        for (const auto& r : actlab::detect_massive(res.trace, a.common.abs_threshold,
                                                    a.common.ratio_threshold)) {
            records.push_back({{"sequence", s},
                               {"layer", r.layer},
                               {"token_index", r.token_index},
                               {"feature_index", r.feature_index},
                               {"value", r.value},
                               {"magnitude", r.magnitude},
                               {"median_magnitude", r.median_magnitude},
                               {"ratio", ratio_json(r.ratio)},
                               {"token", r.token_string}});
            feats.insert(r.feature_index);
        }
        feature_sets.push_back(std::move(feats));
        traces.push_back(std::move(res.trace));
    }

    // feature dimensions shared by every sequence's massive activations
    std::set<std::int64_t> inter = feature_sets.empty() ? std::set<std::int64_t>{}
                                                        : feature_sets[0];
    for (size_t s = 1; s < feature_sets.size(); ++s) {
        std::set<std::int64_t> next;
        std::set_intersection(inter.begin(), inter.end(), feature_sets[s].begin(),
                              feature_sets[s].end(), std::inserter(next, next.begin()));
        inter = std::move(next);
    }

    json out;
    out["records"] = records;
    out["sequences"] = windows.size();
    json per_seq = json::array();
    for (const auto& fs : feature_sets)
        per_seq.push_back(std::vector<std::int64_t>(fs.begin(), fs.end()));
    out["massive_features_per_sequence"] = per_seq;
    out["massive_feature_intersection"] = std::vector<std::int64_t>(inter.begin(), inter.end());
    out["outlier_features"] = actlab::detect_outlier_features(traces);
    ctx.add_json("detect.json", std::move(out));
    ctx.finish();
    return 0;
}

// posstats -----------------------------------------------------------------------

struct PosStatsArgs {
    CommonArgs common;
    std::string ckpt;
    std::string corpus;
    std::vector<std::string> positions;
    std::int64_t windows = 8;
    std::int64_t topk = 3;
    std::int64_t seq_len = 0;
};

actlab::TokenSelector parse_selector(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail("token selector '" + s + "' needs kind=value");
    const std::string kind = s.substr(0, eq);
    const std::int64_t value = std::stoll(s.substr(eq + 1));
    if (kind == "index") return actlab::TokenSelector::index(value);
    if (kind == "first_id") return actlab::TokenSelector::first_id(value);
    if (kind == "rank") return actlab::TokenSelector::rank(value);
    fail("unknown token selector kind '" + kind + "'");
}

std::string selector_str(const actlab::TokenSelector& sel) {
    switch (sel.kind) {
        case actlab::TokenSelector::Kind::index: return "index=" + std::to_string(sel.value);
        case actlab::TokenSelector::Kind::first_id: return "first_id=" + std::to_string(sel.value);
        case actlab::TokenSelector::Kind::rank: return "rank=" + std::to_string(sel.value);
    }
    fail("unknown token selector kind");
}

int cmd_posstats(const PosStatsArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("posstats", argv, a.common);
    ctx.add_input(a.ckpt);
    ctx.add_input(a.corpus);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));

    const auto ids = actlab::encode_with_vocab(model.vocab, actlab::read_file(a.corpus));
    const auto windows =
        sample_windows(ids, analysis_len(model, a.seq_len), a.windows, a.common.seed);
    std::vector<actlab::HiddenStateTrace> traces;
    for (const auto& w : windows) traces.push_back(model.forward_with_trace(w).trace);

    std::vector<actlab::PositionKey> keys;
    if (!a.positions.empty()) {
        for (const std::string& p : a.positions) {
            // LAYER:SELECTOR:FEATURE, e.g. 2:first_id=5:37 or 1:rank=1:7
            const auto c1 = p.find(':');
            const auto c2 = p.rfind(':');
            if (c1 == std::string::npos || c2 == c1)
                fail("position '" + p + "' must be layer:selector:feature");
            actlab::PositionKey key;
            key.layer = std::stoll(p.substr(0, c1));
            key.token = parse_selector(p.substr(c1 + 1, c2 - c1 - 1));
            key.feature = std::stoll(p.substr(c2 + 1));
            keys.push_back(key);
        }
    } else {
        // default: follow the strongest detector hits of the first window
        const auto recs = actlab::detect_massive(traces[0], a.common.abs_threshold,
                                                 a.common.ratio_threshold);
        std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> seen;
        for (const auto& r : recs) {
            if (static_cast<std::int64_t>(keys.size()) >= a.topk) break;
            if (!seen.insert({r.layer, r.token_index, r.feature_index}).second) continue;
            actlab::PositionKey key;
            key.layer = r.layer;
            key.token = actlab::TokenSelector::index(r.token_index);
            key.feature = r.feature_index;
            keys.push_back(key);
        }
        if (keys.empty()) fail("posstats: no detector hits to follow; pass --position");
    }

    ctx.options["windows"] = a.windows;
    json jkeys = json::array();
    for (const auto& k : keys)
        jkeys.push_back({{"layer", k.layer}, {"token", selector_str(k.token)},
                         {"feature", k.feature}});
    ctx.options["positions"] = jkeys;

    std::string csv = "layer,token,feature,mean,stddev,count\n";
    for (const auto& ps : actlab::position_stats(traces, keys))
        csv += std::to_string(ps.key.layer) + "," + selector_str(ps.key.token) + "," +
               std::to_string(ps.key.feature) + "," + double_str(ps.mean) + "," +
               double_str(ps.stddev) + "," + std::to_string(ps.count) + "\n";
    ctx.add_csv("posstats.csv", std::move(csv));
    ctx.finish();
    return 0;
}

// intervene ----------------------------------------------------------------------

struct InterveneArgs {
    CommonArgs common;
    std::string ckpt;
    std::string corpus;
    std::string spec_path;
    std::int64_t windows = 16;
    std::int64_t calib_windows = 16;
    std::int64_t seq_len = 0;
    bool control = false;
};

int cmd_intervene(const InterveneArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("intervene", argv, a.common);
    ctx.add_input(a.ckpt);
    ctx.add_input(a.corpus);
    ctx.add_input(a.spec_path);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));

    const actlab::InterventionSpec spec =
        actlab::parse_intervention_spec(actlab::read_file(a.spec_path));
    actlab::validate_spec(spec, model.config);

    const auto ids = actlab::encode_with_vocab(model.vocab, actlab::read_file(a.corpus));
    const std::int64_t len = analysis_len(model, a.seq_len) + 1;  // inputs + next-token targets
    const auto windows = sample_windows(ids, len, a.windows, a.common.seed);
    // calibration sequences from an independent stream, inputs-only
    actlab::Rng calib_rng(actlab::derive_seed(a.common.seed, 3));
    std::vector<std::vector<std::int32_t>> calib;
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    for (std::int64_t i = 0; i < a.calib_windows; ++i) {
        const std::int64_t start = static_cast<std::int64_t>(calib_rng.below(n - (len - 1) + 1));
        calib.emplace_back(ids.begin() + start, ids.begin() + start + (len - 1));
    }

    ctx.options["windows"] = a.windows;
    ctx.options["calib_windows"] = a.calib_windows;
    ctx.options["control"] = a.control;
    ctx.options["spec"] = json::parse(actlab::intervention_spec_json(spec));

    const auto rows =
        actlab::intervention_report(model, windows, calib, spec, a.control, a.common.seed);
    std::string csv = "label,perplexity\n";
    for (const auto& r : rows) csv += r.label + "," + double_str(r.perplexity) + "\n";
    ctx.add_csv("intervene.csv", std::move(csv));
    ctx.finish();
    return 0;
}

// attnmap -----------------------------------------------------------------------

struct AttnMapArgs {
    CommonArgs common;
    std::string ckpt;
    std::string prompt;
    std::vector<std::int64_t> layers;
};

std::string matrix_csv(const std::vector<std::string>& col_labels,
                       const std::vector<std::string>& row_labels, const double* data,
                       std::int64_t rows, std::int64_t cols, const char* corner) {
    std::string csv(corner);
    for (const auto& c : col_labels) csv += "," + actlab::csv_quote(c);
    csv += "\n";
    for (std::int64_t i = 0; i < rows; ++i) {
        csv += actlab::csv_quote(row_labels[i]);
        for (std::int64_t j = 0; j < cols; ++j) csv += "," + double_str(data[i * cols + j]);
        csv += "\n";
    }
    return csv;
}

int cmd_attnmap(const AttnMapArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("attnmap", argv, a.common);
    ctx.add_input(a.ckpt);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));
    ctx.options["prompt"] = a.prompt;

    std::vector<std::int64_t> layers = a.layers;
    if (layers.empty())
        for (std::int64_t l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
    ctx.options["layers"] = layers;

    const auto toks = encode_prompt(model, a.prompt);
    const actlab::AttentionReport rep = actlab::attention_report(
        model, toks, layers, a.common.abs_threshold, a.common.ratio_threshold);

    std::string summary = "layer,concentration,massive_token_indices\n";
    for (const auto& lr : rep.layers) {
        std::vector<std::string> cols(rep.token_strings.begin(),
                                      rep.token_strings.begin() + lr.t);
        if (lr.has_bias_column) cols.push_back("BIAS");
        std::vector<std::string> rows(rep.token_strings.begin(),
                                      rep.token_strings.begin() + lr.t);
        const std::string tag = "attnmap_layer" + std::to_string(lr.layer);
        // logits are the softmax inputs: scaled by 1/sqrt(d_head), causal
        // sentinel above the diagonal
        ctx.add_csv(tag + "_probs.csv",
                    matrix_csv(cols, rows, lr.avg_probs.data(), lr.t, lr.cols, "query"));
        ctx.add_csv(tag + "_logits.csv",
                    matrix_csv(cols, rows, lr.avg_logits.data(), lr.t, lr.cols, "query"));
        summary += std::to_string(lr.layer) + "," + double_str(lr.concentration) + "," +
                   join_int(lr.massive_tokens.token_indices) + "\n";
    }
    ctx.add_csv("attnmap_summary.csv", std::move(summary));
    ctx.finish();
    return 0;
}

// decompose ----------------------------------------------------------------------

struct DecomposeArgs {
    CommonArgs common;
    std::string ckpt;
    std::vector<std::string> prompts;
    std::string corpus;
    std::int64_t windows = 4;
    std::int64_t layer = 0;
    std::string c_indices;
    std::int64_t seq_len = 0;
};

std::string sim_csv(const actlab::SimilarityMatrix& m, const std::vector<double>& vals) {
    std::string csv = "label";
    for (const auto& l : m.labels) csv += "," + actlab::csv_quote(l);
    csv += "\n";
    for (std::int64_t i = 0; i < m.n; ++i) {
        csv += actlab::csv_quote(m.labels[i]);
        for (std::int64_t j = 0; j < m.n; ++j) csv += "," + double_str(vals[i * m.n + j]);
        csv += "\n";
    }
    return csv;
}

int cmd_decompose(const DecomposeArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("decompose", argv, a.common);
    ctx.add_input(a.ckpt);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));

    std::vector<std::vector<std::int32_t>> prompts;
    if (!a.prompts.empty()) {
        for (const auto& p : a.prompts) prompts.push_back(encode_prompt(model, p));
        ctx.options["prompts"] = a.prompts;
    } else if (!a.corpus.empty()) {
        ctx.add_input(a.corpus);
        const auto ids = actlab::encode_with_vocab(model.vocab, actlab::read_file(a.corpus));
        prompts = sample_windows(ids, analysis_len(model, a.seq_len), a.windows, a.common.seed);
        ctx.options["windows"] = a.windows;
    } else {
        fail("decompose: need --prompt or --corpus");
    }
    ctx.options["layer"] = a.layer;

    actlab::ConcentrationSelector sel =
        actlab::ConcentrationSelector::detect(a.common.abs_threshold, a.common.ratio_threshold);
    if (!a.c_indices.empty()) {
        std::vector<std::int64_t> idx;
        std::string cur;
        for (char ch : a.c_indices + ",") {
            if (ch == ',') {
                if (!cur.empty()) idx.push_back(std::stoll(cur));
                cur.clear();
            } else {
                cur += ch;
            }
        }
        sel = actlab::ConcentrationSelector::explicit_set(idx);
        ctx.options["c_indices"] = idx;
    }

    const actlab::ValueUpdateReport rep =
        actlab::value_update_similarity(model, prompts, a.layer, sel);

    std::string summary = "prompt,c_set,query_tokens\n";
    for (size_t p = 0; p < prompts.size(); ++p) {
        summary += std::to_string(p) + "," + join_int(rep.c_sets[p]) + "," +
                   join_int(rep.query_tokens[p]) + "\n";
        ctx.add_csv("decompose_within" + std::to_string(p) + "_cosine.csv",
                    sim_csv(rep.within[p], rep.within[p].cosine));
        ctx.add_csv("decompose_within" + std::to_string(p) + "_l2.csv",
                    sim_csv(rep.within[p], rep.within[p].l2));
    }
    ctx.add_csv("decompose_cross_cosine.csv", sim_csv(rep.cross, rep.cross.cosine));
    ctx.add_csv("decompose_cross_l2.csv", sim_csv(rep.cross, rep.cross.l2));

    std::string upd = "prompt,query_token,offset";
    const std::int64_t d = model.config.d_model;
    for (std::int64_t j = 0; j < d; ++j) upd += ",b" + std::to_string(j);
    upd += "\n";
    for (size_t p = 0; p < rep.updates.size(); ++p)
        for (size_t o = 0; o < rep.updates[p].size(); ++o) {
            upd += std::to_string(p) + "," + std::to_string(rep.query_tokens[p][o]) + "," +
                   std::to_string(o + 1);
            for (double v : rep.updates[p][o]) upd += "," + double_str(v);
            upd += "\n";
        }
    ctx.add_csv("decompose_updates.csv", std::move(upd));
    ctx.add_csv("decompose_summary.csv", std::move(summary));
    ctx.finish();
    return 0;
}

// trajectory --------------------------------------------------------------------

struct TrajectoryArgs {
    CommonArgs common;
    std::string ckpt;
    std::string prompt;
    std::int64_t layer = 0;
};

int cmd_trajectory(const TrajectoryArgs& a, const std::vector<std::string>& argv) {
    RunContext ctx = make_ctx("trajectory", argv, a.common);
    ctx.add_input(a.ckpt);
    const actlab::Model model = load_model(a.ckpt);
    ctx.config = json::parse(actlab::model_config_json(model.config));
    ctx.options["prompt"] = a.prompt;
    ctx.options["layer"] = a.layer;

    const auto toks = encode_prompt(model, a.prompt);
    const auto snaps = actlab::norm_trajectory(model, toks, a.layer, a.common.abs_threshold,
                                               a.common.ratio_threshold);
    const auto trace = model.forward_with_trace(toks).trace;

    for (const auto& s : snaps) {
        std::string name = std::string("trajectory_") + actlab::stage_name(s.stage);
        if (s.head >= 0) name += "_head" + std::to_string(s.head);
        std::set<std::int64_t> hot(s.highlighted.begin(), s.highlighted.end());
        std::string csv = "token_index,token,massive";
        for (std::int64_t j = 0; j < s.state.cols(); ++j) csv += ",x" + std::to_string(j);
        csv += "\n";
        for (std::int64_t i = 0; i < s.state.rows(); ++i) {
            csv += std::to_string(i) + "," + actlab::csv_quote(trace.token_strings[i]) + "," +
                   (hot.count(i) ? "1" : "0");
            for (std::int64_t j = 0; j < s.state.cols(); ++j)
                csv += "," + double_str(s.state.at(i, j));
            csv += "\n";
        }
        ctx.add_csv(name + ".csv", std::move(csv));
    }
    ctx.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> raw_argv(argv, argv + argc);

    CLI::App app{"activation laboratory for small decoder-only transformers"};
    app.require_subcommand(1);

    GenCorpusArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-corpus", "write a deterministic synthetic corpus");
    add_common(gen_cmd, gen.common, false);
    gen_cmd->add_option("--min-bytes", gen.min_bytes, "minimum corpus size");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a model and save a checkpoint");
    add_common(train_cmd, tr.common, false);
    train_cmd->add_option("--corpus", tr.corpus, "UTF-8 text file")->required();
    train_cmd->add_option("--config", tr.config_path, "JSON train config");
    train_cmd->add_option("--variant", tr.variant,
                          "standard|explicit_kv_bias|off_by_one|extra_qk_feature|value_bias");
    train_cmd->add_option("--norm", tr.norm, "layernorm|rmsnorm");
    train_cmd->add_flag("--sink", tr.sink, "prepend a learnable sink token");
    train_cmd->add_option("--iterations", tr.iterations, "training steps");
    train_cmd->add_option("--val-fraction", tr.val_fraction, "validation split fraction");

    StatsArgs st;
    auto* stats_cmd = app.add_subcommand("stats", "layerwise top-k magnitudes and medians");
    add_common(stats_cmd, st.common);
    stats_cmd->add_option("--ckpt", st.ckpt, "checkpoint")->required();
    stats_cmd->add_option("--prompt", st.prompt, "prompt text");
    stats_cmd->add_option("--corpus", st.corpus, "corpus to sample a window from");
    stats_cmd->add_option("--topk", st.topk, "top-k entries per layer");
    stats_cmd->add_option("--seq-len", st.seq_len, "window length (0 = full context)");

    DetectArgs de;
    auto* detect_cmd =
        app.add_subcommand("detect", "massive activations and outlier feature dimensions");
    add_common(detect_cmd, de.common);
    detect_cmd->add_option("--ckpt", de.ckpt, "checkpoint")->required();
    detect_cmd->add_option("--prompt", de.prompt, "prompt text");
    detect_cmd->add_option("--corpus", de.corpus, "corpus to sample windows from");
    detect_cmd->add_option("--windows", de.windows, "number of windows");
    detect_cmd->add_option("--seq-len", de.seq_len, "window length (0 = full context)");

    PosStatsArgs po;
    auto* pos_cmd = app.add_subcommand("posstats", "mean/std of chosen activations over windows");
    add_common(pos_cmd, po.common);
    pos_cmd->add_option("--ckpt", po.ckpt, "checkpoint")->required();
    pos_cmd->add_option("--corpus", po.corpus, "corpus to sample windows from")->required();
    pos_cmd->add_option("--position", po.positions,
                        "layer:selector:feature (selector: index=N|first_id=N|rank=N)");
    pos_cmd->add_option("--windows", po.windows, "number of windows");
    pos_cmd->add_option("--topk", po.topk, "detector hits to follow when no --position given");
    pos_cmd->add_option("--seq-len", po.seq_len, "window length (0 = full context)");

    InterveneArgs iv;
    auto* int_cmd = app.add_subcommand("intervene", "activation surgery perplexity protocol");
    add_common(int_cmd, iv.common);
    int_cmd->add_option("--ckpt", iv.ckpt, "checkpoint")->required();
    int_cmd->add_option("--corpus", iv.corpus, "corpus for eval/calibration windows")->required();
    int_cmd->add_option("--spec", iv.spec_path, "intervention spec JSON")->required();
    int_cmd->add_option("--windows", iv.windows, "eval windows");
    int_cmd->add_option("--calib-windows", iv.calib_windows, "calibration sequences");
    int_cmd->add_option("--seq-len", iv.seq_len, "window length (0 = full context)");
    int_cmd->add_flag("--control", iv.control, "add a median-magnitude control row");

    AttnMapArgs am;
    auto* attn_cmd = app.add_subcommand("attnmap", "head-averaged attention maps per layer");
    add_common(attn_cmd, am.common);
    attn_cmd->add_option("--ckpt", am.ckpt, "checkpoint")->required();
    attn_cmd->add_option("--prompt", am.prompt, "prompt text")->required();
    attn_cmd->add_option("--layer", am.layers, "layers (default: all)");

    DecomposeArgs dc;
    auto* dec_cmd = app.add_subcommand("decompose", "value-update similarity across queries and prompts");
    add_common(dec_cmd, dc.common);
    dec_cmd->add_option("--ckpt", dc.ckpt, "checkpoint")->required();
    dec_cmd->add_option("--prompt", dc.prompts, "prompt text (repeatable)");
    dec_cmd->add_option("--corpus", dc.corpus, "corpus to sample prompts from");
    dec_cmd->add_option("--windows", dc.windows, "prompts to sample from the corpus");
    dec_cmd->add_option("--layer", dc.layer, "block index")->required();
    dec_cmd->add_option("--c-indices", dc.c_indices, "explicit concentration set, e.g. 0,3");
    dec_cmd->add_option("--seq-len", dc.seq_len, "window length (0 = full context)");

    TrajectoryArgs tj;
    auto* trj_cmd = app.add_subcommand("trajectory", "normalization trajectory through one block");
    add_common(trj_cmd, tj.common);
    trj_cmd->add_option("--ckpt", tj.ckpt, "checkpoint")->required();
    trj_cmd->add_option("--prompt", tj.prompt, "prompt text")->required();
    trj_cmd->add_option("--layer", tj.layer, "block index")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(gen_cmd)) return cmd_gen_corpus(gen, raw_argv);
        if (app.got_subcommand(train_cmd))
            return cmd_train(tr, raw_argv, train_cmd->count("--seed") > 0);
        if (app.got_subcommand(stats_cmd)) return cmd_stats(st, raw_argv);
        if (app.got_subcommand(detect_cmd)) return cmd_detect(de, raw_argv);
        if (app.got_subcommand(pos_cmd)) return cmd_posstats(po, raw_argv);
        if (app.got_subcommand(int_cmd)) return cmd_intervene(iv, raw_argv);
        if (app.got_subcommand(attn_cmd)) return cmd_attnmap(am, raw_argv);
        if (app.got_subcommand(dec_cmd)) return cmd_decompose(dc, raw_argv);
        if (app.got_subcommand(trj_cmd)) return cmd_trajectory(tj, raw_argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
