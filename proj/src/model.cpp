#include "actlab/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "actlab/io.hpp"
#include "json.hpp"

namespace actlab {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string layer_key(std::int64_t layer, const char* suffix) {
    return "layer" + std::to_string(layer) + "." + suffix;
}

Tensor snapshot(const Tensor& t) {
    return Tensor::from_vector(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()));
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) fail("model config: n_layers must be >= 1");
    if (vocab_size < 2) fail("model config: vocab_size must be >= 2");
    if (n_heads < 1 || d_model % n_heads != 0)
        fail("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
             std::to_string(n_heads));
    if (context_len < 1) fail("model config: context_len must be >= 1");
    if (norm_eps <= 0.0) fail("model config: norm_eps must be positive");
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    ParamSet& ps = m.params;
    const std::int64_t d = config.d_model, h = config.n_heads, dh = config.d_head();

    ps.add("wte", {config.embedding_rows(), d});
    ps.add("wpe", {config.context_len, d});
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        ps.add(layer_key(l, "ln1.g"), {d});
        if (config.norm_kind == NormKind::layernorm) ps.add(layer_key(l, "ln1.b"), {d});
        ps.add(layer_key(l, "attn.w_qkv"), {d, 3 * d});
        ps.add(layer_key(l, "attn.b_qkv"), {3 * d});
        ps.add(layer_key(l, "attn.w_proj"), {d, d});
        ps.add(layer_key(l, "attn.b_proj"), {d});
        switch (config.variant) {
            case AttentionVariant::explicit_kv_bias:
                ps.add(layer_key(l, "attn.k_prime"), {h, dh});
                ps.add(layer_key(l, "attn.v_prime"), {h, dh});
                break;
            case AttentionVariant::value_bias:
                ps.add(layer_key(l, "attn.v_prime"), {h, dh});
                break;
            case AttentionVariant::extra_qk_feature:
                // one column per head so a per-head column slices out directly
                ps.add(layer_key(l, "attn.q_col"), {config.context_len, h});
                ps.add(layer_key(l, "attn.k_col"), {config.context_len, h});
                break;
            default: break;
        }
        ps.add(layer_key(l, "ln2.g"), {d});
        if (config.norm_kind == NormKind::layernorm) ps.add(layer_key(l, "ln2.b"), {d});
        ps.add(layer_key(l, "mlp.w_fc"), {d, 4 * d});
        ps.add(layer_key(l, "mlp.b_fc"), {4 * d});
        ps.add(layer_key(l, "mlp.w_proj"), {4 * d, d});
        ps.add(layer_key(l, "mlp.b_proj"), {d});
    }
    ps.add("lnf.g", {d});
    if (config.norm_kind == NormKind::layernorm) ps.add("lnf.b", {d});

    // Gaussian(0, 0.02) for weight matrices and the k'/v'/q' bias parameters,
    // zeros for additive biases, ones for norm gains. One stream, fixed
    // parameter order.
    Rng rng(derive_seed(seed, 0));
    for (std::int64_t i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.names[i];
        auto& buf = ps.values[i];
        const bool is_gain = name.ends_with(".g") || name == "lnf.g";
        const bool is_add_bias = name.ends_with("ln1.b") || name.ends_with("ln2.b") ||
                                 name == "lnf.b" || name.ends_with("b_qkv") ||
                                 name.ends_with("b_proj") || name.ends_with("b_fc");
        if (is_gain) {
            std::fill(buf.begin(), buf.end(), 1.0);
        } else if (is_add_bias) {
            std::fill(buf.begin(), buf.end(), 0.0);
        } else {
            for (double& v : buf) v = rng.normal(0.0, 0.02);
        }
    }
    return m;
}

BoundParams Model::bind(bool grad) const {
    BoundParams b;
    b.leaves.reserve(params.values.size());
    for (std::int64_t i = 0; i < params.count(); ++i) {
        // Leaf views never write through data; grads live on the nodes.
        auto* data = const_cast<double*>(params.values[i].data());
        b.leaves.push_back(Tensor::view(params.shapes[i], data, grad));
    }
    return b;
}

std::string Model::token_string(std::int32_t id) const {
    if (config.sink_token && id == config.sink_id()) return "[SINK]";
    if (id >= 0 && id < static_cast<std::int32_t>(vocab.size())) return vocab[id];
    return "#" + std::to_string(id);
}

ForwardResult Model::forward(const BoundParams& bound, const std::vector<std::int32_t>& tokens,
                             const ForwardOptions& opt) const {
    if (opt.grad && opt.edit_state) fail("forward: state edits are evaluation-only");
    if (tokens.empty()) fail("forward: empty input");
    for (std::int32_t id : tokens)
        if (id < 0 || id >= config.vocab_size)
            fail("forward: token id " + std::to_string(id) + " out of range [0, " +
                 std::to_string(config.vocab_size) + ")");

    std::vector<std::int32_t> ids;
    if (config.sink_token) {
        ids.reserve(tokens.size() + 1);
        ids.push_back(config.sink_id());
    }
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    if (t > config.context_len)
        fail("forward: input length " + std::to_string(t) + " exceeds context " +
             std::to_string(config.context_len));

    const std::int64_t d = config.d_model, nh = config.n_heads, dh = config.d_head();
    if (opt.capture && (opt.capture->layer < 0 || opt.capture->layer >= config.n_layers))
        fail("forward: capture layer " + std::to_string(opt.capture->layer) +
             " out of range [0, " + std::to_string(config.n_layers) + ")");

    const auto& ps = params;
    auto leaf = [&](const std::string& name) -> const Tensor& {
        const std::int64_t i = ps.index_of(name);
        if (i < 0) fail("forward: missing parameter '" + name + "'");
        return bound[i];
    };
    // Same op sequence as layer_norm / rms_norm, spelled out so the capture
    // can snapshot the pre-gain stage.
    auto block_norm = [&](const Tensor& x, const std::string& prefix, StageCapture* cap) {
        Tensor raw = norm_raw(x, config.norm_kind, config.norm_eps);
        if (cap) cap->normalized = snapshot(raw);
        Tensor out = mul_row_broadcast(raw, leaf(prefix + ".g"));
        if (config.norm_kind == NormKind::layernorm)
            out = add_row_broadcast(out, leaf(prefix + ".b"));
        if (cap) cap->rescaled = snapshot(out);
        return out;
    };

    ForwardResult res;
    if (opt.want_trace) {
        res.trace.token_ids = ids;
        res.trace.token_strings.reserve(ids.size());
        for (std::int32_t id : ids) res.trace.token_strings.push_back(token_string(id));
    }

    Tensor x = add(embedding_rows(leaf("wte"), ids), slice_rows(leaf("wpe"), 0, t));
    if (opt.edit_state) opt.edit_state(0, x);
    if (opt.want_trace) res.trace.states.push_back(snapshot(x));

    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        StageCapture* cap = opt.capture && opt.capture->layer == l ? opt.capture : nullptr;
        if (cap) cap->input = snapshot(x);
        Tensor n1 = block_norm(x, layer_key(l, "ln1"), cap);
        Tensor qkv = add_row_broadcast(matmul(n1, leaf(layer_key(l, "attn.w_qkv"))),
                                       leaf(layer_key(l, "attn.b_qkv")));
        Tensor q = slice_cols(qkv, 0, d);
        Tensor k = slice_cols(qkv, d, 2 * d);
        Tensor v = slice_cols(qkv, 2 * d, 3 * d);
        if (cap) {
            cap->query.clear();
            cap->key.clear();
            cap->value.clear();
            for (std::int64_t hh = 0; hh < nh; ++hh) {
                cap->query.push_back(snapshot(slice_cols(q, hh * dh, (hh + 1) * dh)));
                cap->key.push_back(snapshot(slice_cols(k, hh * dh, (hh + 1) * dh)));
                cap->value.push_back(snapshot(slice_cols(v, hh * dh, (hh + 1) * dh)));
            }
        }

        std::vector<HeadAttention> heads;
        heads.reserve(nh);
        Tensor merged;
        for (std::int64_t hh = 0; hh < nh; ++hh) {
            AttentionVariantParams vp;
            vp.variant = config.variant;
            switch (config.variant) {
                case AttentionVariant::explicit_kv_bias:
                    vp.k_bias = slice_rows(leaf(layer_key(l, "attn.k_prime")), hh, hh + 1);
                    vp.v_bias = slice_rows(leaf(layer_key(l, "attn.v_prime")), hh, hh + 1);
                    break;
                case AttentionVariant::value_bias:
                    vp.v_bias = slice_rows(leaf(layer_key(l, "attn.v_prime")), hh, hh + 1);
                    break;
                case AttentionVariant::extra_qk_feature:
                    vp.q_col = slice_cols(leaf(layer_key(l, "attn.q_col")), hh, hh + 1);
                    vp.k_col = slice_cols(leaf(layer_key(l, "attn.k_col")), hh, hh + 1);
                    break;
                default: break;
            }
            HeadAttention ha =
                causal_attention(slice_cols(q, hh * dh, (hh + 1) * dh),
                                 slice_cols(k, hh * dh, (hh + 1) * dh),
                                 slice_cols(v, hh * dh, (hh + 1) * dh), vp);
            merged = hh == 0 ? ha.output : hconcat(merged, ha.output);
            if (opt.want_attn) heads.push_back(std::move(ha));
        }
        Tensor a = add_row_broadcast(matmul(merged, leaf(layer_key(l, "attn.w_proj"))),
                                     leaf(layer_key(l, "attn.b_proj")));
        Tensor mid = add(x, a);
        Tensor n2 = block_norm(mid, layer_key(l, "ln2"), nullptr);
        Tensor up = gelu(add_row_broadcast(matmul(n2, leaf(layer_key(l, "mlp.w_fc"))),
                                           leaf(layer_key(l, "mlp.b_fc"))));
        Tensor m = add_row_broadcast(matmul(up, leaf(layer_key(l, "mlp.w_proj"))),
                                     leaf(layer_key(l, "mlp.b_proj")));
        // h_l = h_{l-1} + F_l with F_l formed first, so the residual identity
        // states[l] == states[l-1] + F_l holds exactly in floating point.
        Tensor f = add(a, m);
        x = add(x, f);
        if (opt.edit_state) opt.edit_state(l + 1, x);
        if (opt.want_trace) res.trace.states.push_back(snapshot(x));
        if (opt.want_attn) res.attn.push_back(snapshot_heads(heads));
    }

    NormParams npf;
    npf.gain = leaf("lnf.g");
    npf.epsilon = config.norm_eps;
    Tensor y;
    if (config.norm_kind == NormKind::layernorm) {
        npf.bias = leaf("lnf.b");
        y = layer_norm(x, npf);
    } else {
        y = rms_norm(x, npf);
    }
    res.logits = matmul_nt(y, leaf("wte"));  // tied output head
    return res;
}

ForwardResult Model::forward_with_trace(const std::vector<std::int32_t>& tokens) const {
    ForwardOptions opt;
    return forward(bind(false), tokens, opt);
}

// ---- checkpoint ---------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes little-endian floats");

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"context_len", c.context_len},
                {"vocab_size", c.vocab_size},
                {"norm_kind", c.norm_kind == NormKind::layernorm ? "layernorm" : "rmsnorm"},
                {"variant", variant_name(c.variant)},
                {"sink_token", c.sink_token},
                {"norm_eps", c.norm_eps}};
}

// Absent keys keep their defaults, so partial config files work.
ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_len = j.value("context_len", c.context_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    const std::string nk = j.value("norm_kind", std::string("layernorm"));
    if (nk != "layernorm" && nk != "rmsnorm") fail("config: unknown norm_kind '" + nk + "'");
    c.norm_kind = nk == "layernorm" ? NormKind::layernorm : NormKind::rmsnorm;
    c.variant = variant_from_name(j.value("variant", std::string("standard")));
    c.sink_token = j.value("sink_token", c.sink_token);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    return c;
}

constexpr char kMagic[8] = {'A', 'C', 'T', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

void append_raw(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}

}  // namespace

Model Checkpoint::to_model() const {
    Model m;
    m.config = config;
    m.params = params;
    m.vocab = vocab;
    return m;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    json header;
    header["format_version"] = kFormatVersion;
    header["config"] = config_to_json(ck.config);
    json vocab_cp = json::array();
    for (const std::string& s : ck.vocab) vocab_cp.push_back(s);
    header["vocab"] = vocab_cp;
    header["seed"] = ck.seed;
    header["step"] = ck.step;
    header["adam_step"] = ck.opt.step;
    header["has_opt"] = !ck.opt.m.empty();
    json ptab = json::array();
    std::int64_t offset = 0;
    for (std::int64_t i = 0; i < ck.params.count(); ++i) {
        ptab.push_back(json{{"name", ck.params.names[i]},
                            {"shape", ck.params.shapes[i]},
                            {"offset", offset}});
        offset += static_cast<std::int64_t>(ck.params.values[i].size());
    }
    header["params"] = ptab;
    const std::string htext = header.dump();

    std::string blob;
    append_raw(blob, kMagic, sizeof(kMagic));
    append_raw(blob, &kFormatVersion, sizeof(kFormatVersion));
    const std::uint64_t hlen = htext.size();
    append_raw(blob, &hlen, sizeof(hlen));
    blob += htext;
    for (const auto& v : ck.params.values)
        append_raw(blob, v.data(), v.size() * sizeof(double));
    if (!ck.opt.m.empty()) {
        if (ck.opt.m.size() != ck.params.values.size() ||
            ck.opt.v.size() != ck.params.values.size())
            fail("checkpoint: optimizer state does not match parameters");
        for (const auto& v : ck.opt.m) append_raw(blob, v.data(), v.size() * sizeof(double));
        for (const auto& v : ck.opt.v) append_raw(blob, v.data(), v.size() * sizeof(double));
    }
    write_file_atomic(path, blob);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string blob = read_file(path);
    size_t pos = 0;
    auto need = [&](size_t n, const char* what) {
        if (pos + n > blob.size())
            fail("checkpoint '" + path + "': truncated " + what);
    };
    need(sizeof(kMagic), "magic");
    if (std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
        fail("checkpoint '" + path + "': bad magic");
    pos += sizeof(kMagic);
    std::uint32_t version = 0;
    need(sizeof(version), "version");
    std::memcpy(&version, blob.data() + pos, sizeof(version));
    pos += sizeof(version);
    if (version != kFormatVersion)
        fail("checkpoint '" + path + "': unsupported format version " + std::to_string(version));
    std::uint64_t hlen = 0;
    need(sizeof(hlen), "header length");
    std::memcpy(&hlen, blob.data() + pos, sizeof(hlen));
    pos += sizeof(hlen);
    need(hlen, "header");
    json header = json::parse(blob.substr(pos, hlen));
    pos += hlen;

    Checkpoint ck;
    ck.config = config_from_json(header.at("config"));
    for (const auto& s : header.at("vocab")) ck.vocab.push_back(s.get<std::string>());
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.step = header.at("step").get<std::int64_t>();
    ck.opt.step = header.at("adam_step").get<std::int64_t>();
    const bool has_opt = header.at("has_opt").get<bool>();

    for (const auto& entry : header.at("params")) {
        Shape shape = entry.at("shape").get<Shape>();
        ck.params.add(entry.at("name").get<std::string>(), shape);
    }
    auto read_blocks = [&](std::vector<std::vector<double>>& dst) {
        for (std::int64_t i = 0; i < ck.params.count(); ++i) {
            auto& v = dst[i];
            const size_t bytes = v.size() * sizeof(double);
            need(bytes, ("block '" + ck.params.names[i] + "'").c_str());
            std::memcpy(v.data(), blob.data() + pos, bytes);
            pos += bytes;
        }
    };
    read_blocks(ck.params.values);
    if (has_opt) {
        ck.opt.m = ck.params.zeros_like();
        ck.opt.v = ck.params.zeros_like();
        read_blocks(ck.opt.m);
        read_blocks(ck.opt.v);
    }
    if (pos != blob.size())
        fail("checkpoint '" + path + "': trailing bytes (" + std::to_string(blob.size() - pos) +
             ")");
    return ck;
}

std::string model_config_json(const ModelConfig& c) { return config_to_json(c).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    try {
        return config_from_json(json::parse(text));
    } catch (const json::exception& e) {
        fail(std::string("model config: ") + e.what());
    }
}

}  // namespace actlab
