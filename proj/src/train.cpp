#include "actlab/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "actlab/io.hpp"
#include "json.hpp"

namespace actlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }
}  // namespace

// ---- corpus -----------------------------------------------------------------

std::vector<std::string> Corpus::vocab_strings() const {
    std::vector<std::string> out;
    out.reserve(vocab.size());
    for (std::uint32_t cp : vocab) out.push_back(utf8_encode(cp));
    return out;
}

std::vector<std::int32_t> Corpus::encode(const std::string& text) const {
    std::vector<std::int32_t> out;
    for (std::uint32_t cp : utf8_decode(text)) {
        const auto it = std::lower_bound(vocab.begin(), vocab.end(), cp);
        if (it == vocab.end() || *it != cp)
            fail("encode: character U+" + hex64(cp).substr(12) + " not in vocabulary");
        out.push_back(static_cast<std::int32_t>(it - vocab.begin()));
    }
    return out;
}

Corpus corpus_from_text(const std::string& text, double val_fraction) {
    if (text.empty()) fail("corpus: empty text");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        fail("corpus: val_fraction must be in (0, 1)");
    Corpus c;
    const std::vector<std::uint32_t> cps = utf8_decode(text);
    c.vocab = cps;
    std::sort(c.vocab.begin(), c.vocab.end());
    c.vocab.erase(std::unique(c.vocab.begin(), c.vocab.end()), c.vocab.end());
    c.ids.reserve(cps.size());
    for (std::uint32_t cp : cps) {
        const auto it = std::lower_bound(c.vocab.begin(), c.vocab.end(), cp);
        c.ids.push_back(static_cast<std::int32_t>(it - c.vocab.begin()));
    }
    c.split_boundary = static_cast<std::int64_t>(
        std::floor(static_cast<double>(c.ids.size()) * (1.0 - val_fraction)));
    return c;
}

Corpus ingest_text(const std::string& path, double val_fraction) {
    return corpus_from_text(read_file(path), val_fraction);
}

std::vector<std::int32_t> encode_with_vocab(const std::vector<std::string>& vocab,
                                            const std::string& text) {
    Corpus c;
    c.vocab.reserve(vocab.size());
    for (const std::string& s : vocab) {
        const auto cps = utf8_decode(s);
        if (cps.size() != 1) fail("encode: vocabulary entry is not a single character");
        c.vocab.push_back(cps[0]);
    }
    return c.encode(text);
}

// ---- config / schedule --------------------------------------------------------

void TrainConfig::validate() const {
    model.validate();
    if (iterations < 0) fail("train config: iterations must be >= 0");
    if (batch_size < 1) fail("train config: batch_size must be >= 1");
    const std::int64_t limit = model.context_len - (model.sink_token ? 1 : 0);
    if (effective_seq_len() < 1 || effective_seq_len() > limit)
        fail("train config: sequence length " + std::to_string(effective_seq_len()) +
             " must be in [1, " + std::to_string(limit) + "]");
    if (warmup < 0) fail("train config: warmup must be >= 0");
    if (eval_interval < 1) fail("train config: eval_interval must be >= 1");
    if (eval_windows < 1) fail("train config: eval_windows must be >= 1");
    if (lr_max <= 0.0 || lr_min < 0.0 || lr_min > lr_max) fail("train config: bad lr range");
}

std::string train_config_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["model"] = nlohmann::json::parse(model_config_json(cfg.model));
    j["iterations"] = cfg.iterations;
    j["batch_size"] = cfg.batch_size;
    j["seq_len"] = cfg.seq_len;
    j["lr_max"] = cfg.lr_max;
    j["lr_min"] = cfg.lr_min;
    j["warmup"] = cfg.warmup;
    j["eval_interval"] = cfg.eval_interval;
    j["eval_windows"] = cfg.eval_windows;
    j["seed"] = cfg.seed;
    return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(std::string("train config: ") + e.what());
    }
    TrainConfig cfg;
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model").dump());
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seq_len = j.value("seq_len", cfg.seq_len);
    cfg.lr_max = j.value("lr_max", cfg.lr_max);
    cfg.lr_min = j.value("lr_min", cfg.lr_min);
    cfg.warmup = j.value("warmup", cfg.warmup);
    cfg.eval_interval = j.value("eval_interval", cfg.eval_interval);
    cfg.eval_windows = j.value("eval_windows", cfg.eval_windows);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

std::string generate_corpus(std::uint64_t seed, std::int64_t min_bytes) {
    if (min_bytes < 1) fail("generate_corpus: min_bytes must be >= 1");
    static const char* kWords[] = {
        "the",    "a",      "quick",  "brown",   "fox",    "jumps",  "over",    "lazy",
        "dog",    "river",  "flows",  "past",    "old",    "mill",   "where",   "children",
        "play",   "under",  "tall",   "oak",     "trees",  "and",    "wind",    "carries",
        "voices", "across", "valley", "morning", "light",  "falls",  "on",      "quiet",
        "fields", "while",  "birds",  "sing",    "their",  "songs",  "from",    "every",
        "branch", "people", "walk",   "along",   "narrow", "paths",  "that",    "wander",
        "between", "stone", "walls",  "toward",  "small",  "houses", "with",    "bright",
        "gardens", "full",  "of",     "flowers", "bees",   "hum",    "softly",  "as",
        "clouds", "drift",  "slowly", "by",      "in",     "summer", "sky",     "evening",
        "brings", "cool",   "air",    "down",    "hills",  "lamps",  "glow",    "warm",
        "inside", "kitchens", "bread", "bakes",  "ovens",  "stories", "pass",   "around",
        "tables", "night",  "settles", "gently", "world",  "sleeps", "stars",   "watch"};
    constexpr std::uint64_t kWordCount = sizeof(kWords) / sizeof(kWords[0]);

    Rng rng(seed);
    std::string out;
    out.reserve(static_cast<size_t>(min_bytes) + 256);
    while (static_cast<std::int64_t>(out.size()) < min_bytes) {
        const std::uint64_t sentences = 3 + rng.below(5);
        for (std::uint64_t s = 0; s < sentences; ++s) {
            const std::uint64_t words = 4 + rng.below(8);
            for (std::uint64_t w = 0; w < words; ++w) {
                std::string word = kWords[rng.below(kWordCount)];
                if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
                out += word;
                if (w + 1 < words) {
                    if (w > 0 && rng.below(10) == 0) out += ',';
                    out += ' ';
                }
            }
            const std::uint64_t punct = rng.below(10);
            out += punct < 8 ? '.' : (punct == 8 ? '?' : '!');
            if (s + 1 < sentences) out += ' ';
        }
        out += "\n\n";
    }
    out += '\n';
    return out;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (step < cfg.warmup)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup);
    const std::int64_t last = cfg.iterations - 1;
    if (step >= last || last <= cfg.warmup) return step >= last ? cfg.lr_min : cfg.lr_max;
    const double progress =
        static_cast<double>(step - cfg.warmup) / static_cast<double>(last - cfg.warmup);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- windows / losses ----------------------------------------------------------

namespace {

std::vector<std::int32_t> window_at(const Corpus& corpus, std::int64_t start, std::int64_t len) {
    return std::vector<std::int32_t>(corpus.ids.begin() + start, corpus.ids.begin() + start + len);
}

// Builds CE targets/mask for a window of seq_len+1 ids. Inputs are the first
// seq_len tokens; with a sink the model's logits gain a leading row whose
// prediction is masked out of the loss.
struct CeBatch {
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> mask;
};

CeBatch make_ce(const std::vector<std::int32_t>& window, bool sink) {
    CeBatch b;
    const size_t n = window.size();
    b.inputs.assign(window.begin(), window.end() - 1);
    if (sink) {
        b.targets.reserve(n);
        b.mask.assign(n, 0);
        b.targets.push_back(window[0]);  // the sink row predicts w0: excluded
        b.mask[0] = 1;
        for (size_t i = 1; i < n; ++i) b.targets.push_back(window[i]);
    } else {
        b.targets.assign(window.begin() + 1, window.end());
        b.mask.assign(n - 1, 0);
    }
    return b;
}

}  // namespace

std::vector<std::vector<std::int32_t>> eval_windows(const Corpus& corpus, const TrainConfig& cfg) {
    const std::int64_t len = cfg.effective_seq_len() + 1;
    const std::int64_t lo = corpus.split_boundary;
    const std::int64_t hi = corpus.size() - len;
    if (hi < lo)
        fail("eval windows: validation split too small for sequence length " +
             std::to_string(cfg.effective_seq_len()));
    Rng rng(derive_seed(cfg.seed, 2));
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(cfg.eval_windows);
    for (std::int64_t i = 0; i < cfg.eval_windows; ++i) {
        const std::int64_t start = lo + static_cast<std::int64_t>(rng.below(hi - lo + 1));
        out.push_back(window_at(corpus, start, len));
    }
    return out;
}

void window_nll(const Model& model, const std::vector<std::int32_t>& window, double& nll_sum,
                std::int64_t& count,
                const std::function<void(std::int64_t, Tensor&)>& edit_state) {
    if (window.size() < 2) fail("window_nll: window needs at least two tokens");
    const CeBatch b = make_ce(window, model.config.sink_token);
    ForwardOptions opt;
    opt.grad = false;
    opt.want_trace = false;
    opt.want_attn = false;
    opt.edit_state = edit_state;
    ForwardResult res = model.forward(model.bind(false), b.inputs, opt);
    const Tensor& logits = res.logits;
    const std::int64_t v = logits.cols();
    for (std::int64_t i = 0; i < logits.rows(); ++i) {
        if (b.mask[i]) continue;
        const double* zr = logits.data() + i * v;
        double mx = zr[0];
        for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, zr[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < v; ++j) sum += std::exp(zr[j] - mx);
        nll_sum += mx + std::log(sum) - zr[b.targets[i]];
        count += 1;
    }
}

double eval_loss(const Model& model, const std::vector<std::vector<std::int32_t>>& windows) {
    if (windows.empty()) fail("eval_loss: no windows");
    double nll = 0.0;
    std::int64_t count = 0;
    for (const auto& w : windows) window_nll(model, w, nll, count);
    return nll / static_cast<double>(count);
}

// ---- training loop --------------------------------------------------------------

TrainResult train(const Corpus& corpus, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.model.vocab_size = corpus.vocab_size();
    cfg.validate();
    if (corpus.vocab_size() < 2) fail("train: corpus vocabulary too small");

    const std::int64_t len = cfg.effective_seq_len() + 1;
    if (corpus.split_boundary < len)
        fail("train: training split too small for sequence length " +
             std::to_string(cfg.effective_seq_len()));

    Model model = Model::init(cfg.model, cfg.seed);
    model.vocab = corpus.vocab_strings();
    Rng batch_rng(derive_seed(cfg.seed, 1));
    const auto val_windows = eval_windows(corpus, cfg);

    AdamState opt_state;
    AdamHyper hyper;  // beta/decay/eps defaults; lr set per step
    TrainResult result;
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);

    for (std::int64_t step = 0; step < cfg.iterations; ++step) {
        BoundParams bound = model.bind(true);
        double train_loss = 0.0;
        for (std::int64_t bi = 0; bi < cfg.batch_size; ++bi) {
            const std::int64_t start =
                static_cast<std::int64_t>(batch_rng.below(corpus.split_boundary - len + 1));
            const CeBatch b = make_ce(window_at(corpus, start, len), cfg.model.sink_token);
            ForwardOptions fopt;
            fopt.grad = true;
            fopt.want_trace = false;
            fopt.want_attn = false;
            ForwardResult res = model.forward(bound, b.inputs, fopt);
            Tensor loss = cross_entropy(res.logits, b.targets, b.mask);
            if (!std::isfinite(loss.item()))
                fail("training diverged at step " + std::to_string(step) + " (seed " +
                     std::to_string(cfg.seed) + "): non-finite loss");
            train_loss += loss.item() * inv_b;
            scale(loss, inv_b).backward();
        }
        std::vector<std::vector<double>> grads = model.params.zeros_like();
        for (std::int64_t i = 0; i < model.params.count(); ++i) {
            const auto& g = bound.leaves[i].grad();
            if (!g.empty()) grads[i] = g;
        }
        clip_global_norm(grads, 1.0);
        hyper.lr = lr_at(step, cfg);
        adamw_step(model.params, grads, opt_state, hyper);

        if (step % cfg.eval_interval == 0 || step == cfg.iterations - 1) {
            LossPoint p;
            p.step = step;
            p.train_loss = train_loss;
            p.val_loss = eval_loss(model, val_windows);
            p.lr = hyper.lr;
            result.history.push_back(p);
            result.final_val_loss = p.val_loss;
        }
    }
    if (cfg.iterations == 0) result.final_val_loss = eval_loss(model, val_windows);

    result.checkpoint.config = cfg.model;
    result.checkpoint.vocab = model.vocab;
    result.checkpoint.params = model.params;
    result.checkpoint.opt = opt_state;
    result.checkpoint.step = cfg.iterations;
    result.checkpoint.seed = cfg.seed;
    return result;
}

}  // namespace actlab
