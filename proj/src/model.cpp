#include "permweave/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "encoder_tape.hpp"

namespace permweave {

void TransformerConfig::validate() const {
    if (num_layers < 1 || d_model < 1 || num_heads < 1 || d_ff < 1 || vocab_size < 1 || max_positions < 1)
        throw ConfigError("transformer config counts must all be >= 1");
    if (d_model % num_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
    if (vocab_size <= static_cast<std::size_t>(special::first_word))
        throw ConfigError("vocab_size must exceed the reserved special tokens");
    if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps must be positive");
    if (num_labels == 1) throw ConfigError("a classifier needs at least 2 labels");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers},   {"d_model", c.d_model},
                       {"num_heads", c.num_heads},     {"d_ff", c.d_ff},
                       {"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
                       {"activation", to_string(c.activation)}, {"ln_eps", c.ln_eps},
                       {"num_labels", c.num_labels}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
    try {
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_positions = j.at("max_positions").get<std::size_t>();
        c.activation = parse_activation(j.value("activation", std::string("gelu")));
        c.ln_eps = j.value("ln_eps", 1e-12f);
        c.num_labels = j.value("num_labels", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid transformer config: ") + e.what());
    }
}

std::string names::layer(std::size_t l, const std::string& suffix) {
    return "L" + std::to_string(l) + "." + suffix;
}

std::vector<ParamSpec> parameter_layout(const TransformerConfig& c) {
    c.validate();
    const std::size_t d = c.d_model;
    std::vector<ParamSpec> out = {
        {names::tok_emb, {c.vocab_size, d}}, {names::pos_emb, {c.max_positions, d}},
        {names::type_emb, {2, d}},           {names::emb_ln_g, {d}},
        {names::emb_ln_b, {d}},
    };
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        for (const char* w : {"attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"})
            out.push_back({names::layer(l, w), {d, d}});
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo", "attn.ln.g", "attn.ln.b"})
            out.push_back({names::layer(l, b), {d}});
        out.push_back({names::layer(l, "ff.W1"), {c.d_ff, d}});
        out.push_back({names::layer(l, "ff.b1"), {c.d_ff}});
        out.push_back({names::layer(l, "ff.W2"), {d, c.d_ff}});
        for (const char* b : {"ff.b2", "ff.ln.g", "ff.ln.b"}) out.push_back({names::layer(l, b), {d}});
    }
    out.push_back({names::mlm_dense, {d, d}});
    out.push_back({names::mlm_dense_b, {d}});
    out.push_back({names::mlm_ln_g, {d}});
    out.push_back({names::mlm_ln_b, {d}});
    out.push_back({names::mlm_decoder, {c.vocab_size, d}});
    out.push_back({names::mlm_decoder_b, {c.vocab_size}});
    if (c.num_labels > 0) {
        out.push_back({names::cls_pool, {d, d}});
        out.push_back({names::cls_pool_b, {d}});
        out.push_back({names::cls_out, {c.num_labels, d}});
        out.push_back({names::cls_out_b, {c.num_labels}});
    }
    return out;
}

const Matrix& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return it->second;
}

Matrix& Checkpoint::tensor(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return it->second;
}

namespace {

std::pair<std::size_t, std::size_t> storage_shape(const std::vector<std::size_t>& shape) {
    return shape.size() == 1 ? std::pair{std::size_t{1}, shape[0]} : std::pair{shape[0], shape[1]};
}

bool is_gain(const std::string& name) { return name.ends_with(".ln.g"); }

bool is_bias_like(const std::string& name, const std::vector<std::size_t>& shape) {
    return shape.size() == 1 && !is_gain(name);
}

void fill_param(Matrix& m, const std::string& name, const std::vector<std::size_t>& shape,
                std::mt19937_64& rng) {
    if (is_gain(name)) {
        std::fill(m.values().begin(), m.values().end(), 1.0f);
    } else if (!is_bias_like(name, shape)) {
        std::normal_distribution<float> normal(0.0f, 0.02f);
        for (float& v : m.values()) {
            float x;
            do x = normal(rng);
            while (std::abs(x) > 0.04f);
            v = x;
        }
    }
}

}  // namespace

void validate_checkpoint(const Checkpoint& ckpt) {
    const auto layout = parameter_layout(ckpt.config);
    for (const auto& spec : layout) {
        auto it = ckpt.tensors.find(spec.name);
        if (it == ckpt.tensors.end()) throw FormatError("checkpoint is missing tensor '" + spec.name + "'");
        const auto [r, c] = storage_shape(spec.shape);
        if (it->second.rows() != r || it->second.cols() != c)
            throw FormatError("tensor '" + spec.name + "' has shape " + std::to_string(it->second.rows()) +
                              "x" + std::to_string(it->second.cols()) + ", config requires " +
                              std::to_string(r) + "x" + std::to_string(c));
    }
    if (ckpt.tensors.size() != layout.size()) {
        for (const auto& [name, _] : ckpt.tensors) {
            if (std::none_of(layout.begin(), layout.end(), [&](const ParamSpec& s) { return s.name == name; }))
                throw FormatError("checkpoint has unexpected tensor '" + name + "'");
        }
    }
}

Checkpoint init_model(const TransformerConfig& config, std::uint64_t seed) {
    TransformerConfig base = config;
    base.num_labels = 0;
    Checkpoint ckpt{base, {}};
    std::mt19937_64 rng(seed);
    for (const auto& spec : parameter_layout(base)) {
        const auto [r, c] = storage_shape(spec.shape);
        Matrix m(r, c);
        fill_param(m, spec.name, spec.shape, rng);
        ckpt.tensors.emplace(spec.name, std::move(m));
    }
    if (config.num_labels > 0) init_classifier_head(ckpt, config.num_labels, seed);
    return ckpt;
}

void init_classifier_head(Checkpoint& ckpt, std::size_t num_labels, std::uint64_t head_seed) {
    if (num_labels < 2) throw ConfigError("a classifier needs at least 2 labels");
    ckpt.config.num_labels = num_labels;
    std::mt19937_64 rng(head_seed ^ 0x9e3779b97f4a7c15ULL);
    for (const auto& spec : parameter_layout(ckpt.config)) {
        if (!spec.name.starts_with("cls.")) continue;
        const auto [r, c] = storage_shape(spec.shape);
        Matrix m(r, c);
        fill_param(m, spec.name, spec.shape, rng);
        ckpt.tensors.insert_or_assign(spec.name, std::move(m));
    }
}

std::string CapturePoint::name() const {
    switch (kind) {
        case CaptureKind::post_embedding: return "post_embedding";
        case CaptureKind::final_ln: return "final_ln";
        case CaptureKind::mha_preproj: return "mha_preproj." + std::to_string(layer);
        case CaptureKind::ff_hidden: return "ff_hidden." + std::to_string(layer);
        case CaptureKind::ff_preact: return "ff_preact." + std::to_string(layer);
        case CaptureKind::res_after_attn: return "res_after_attn." + std::to_string(layer);
        case CaptureKind::res_after_ff: return "res_after_ff." + std::to_string(layer);
    }
    return {};
}

bool CapturePoint::is_layered() const {
    return kind != CaptureKind::post_embedding && kind != CaptureKind::final_ln;
}

CapturePoint CapturePoint::parse(const std::string& name) {
    if (name == "post_embedding") return {CaptureKind::post_embedding, 0};
    if (name == "final_ln") return {CaptureKind::final_ln, 0};
    const auto dot = name.rfind('.');
    if (dot != std::string::npos) {
        const std::string base = name.substr(0, dot);
        const std::string idx = name.substr(dot + 1);
        if (!idx.empty() && std::all_of(idx.begin(), idx.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
            const std::size_t l = std::stoul(idx);
            if (base == "mha_preproj") return {CaptureKind::mha_preproj, l};
            if (base == "ff_hidden") return {CaptureKind::ff_hidden, l};
            if (base == "ff_preact") return {CaptureKind::ff_preact, l};
            if (base == "res_after_attn") return {CaptureKind::res_after_attn, l};
            if (base == "res_after_ff") return {CaptureKind::res_after_ff, l};
        }
    }
    throw ConfigError("unknown capture point '" + name + "'");
}

std::size_t capture_width(const TransformerConfig& config, const CapturePoint& point) {
    return point.kind == CaptureKind::ff_hidden || point.kind == CaptureKind::ff_preact ? config.d_ff : config.d_model;
}

CaptureSpec all_capture_points(const TransformerConfig& config) {
    CaptureSpec spec{{CaptureKind::post_embedding, 0}, {CaptureKind::final_ln, 0}};
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        for (auto k : {CaptureKind::mha_preproj, CaptureKind::ff_preact, CaptureKind::ff_hidden,
                       CaptureKind::res_after_attn, CaptureKind::res_after_ff})
            spec.insert({k, l});
    }
    return spec;
}

void validate_capture_spec(const TransformerConfig& config, const CaptureSpec& spec) {
    for (const auto& p : spec) {
        if (p.is_layered() && p.layer >= config.num_layers)
            throw ConfigError("capture point " + p.name() + " is beyond the model's " +
                              std::to_string(config.num_layers) + " layers");
    }
}

namespace detail {

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul_bt(x, w);
    const auto bias = b.values();
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
    return y;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma, const Matrix& beta, float eps,
                       LayerNormTape* tape) {
    const std::size_t n = x.rows(), d = x.cols();
    require_finite(x, "layer_norm input");
    Matrix y(n, d);
    if (tape) {
        tape->xhat = Matrix(n, d);
        tape->inv_std.assign(n, 0.0f);
    }
    const auto g = gamma.values();
    const auto b = beta.values();
    for (std::size_t r = 0; r < n; ++r) {
        const auto in = x.row(r);
        double mean = 0.0;
        for (float v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        auto out = y.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (in[c] - mean) * inv;
            out[c] = static_cast<float>(xh * g[c] + b[c]);
            if (tape) tape->xhat(r, c) = static_cast<float>(xh);
        }
        if (tape) tape->inv_std[r] = static_cast<float>(inv);
    }
    return y;
}

Matrix layer_norm_rows_backward(const Matrix& dy, const LayerNormTape& tape, const Matrix& gamma,
                                Matrix& d_gamma, Matrix& d_beta) {
    const std::size_t n = dy.rows(), d = dy.cols();
    Matrix dx(n, d);
    const auto g = gamma.values();
    auto dg = d_gamma.values();
    auto db = d_beta.values();
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto dyr = dy.row(r);
        const auto xh = tape.xhat.row(r);
        double sum = 0.0, sum_xh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = static_cast<double>(dyr[c]) * g[c];
            sum += dxhat[c];
            sum_xh += dxhat[c] * xh[c];
        }
        const double inv = tape.inv_std[r];
        const double dd = static_cast<double>(d);
        auto out = dx.row(r);
        for (std::size_t c = 0; c < d; ++c)
            out[c] = static_cast<float>(inv * (dxhat[c] - sum / dd - xh[c] * sum_xh / dd));
    }
    return dx;
}

EncoderTape run_encoder(const Checkpoint& ckpt, std::span<const TokenId> tokens) {
    const auto& cfg = ckpt.config;
    const std::size_t n = tokens.size(), d = cfg.d_model;
    if (n == 0) throw ConfigError("empty token sequence");
    if (n > cfg.max_positions)
        throw ConfigError("sequence length " + std::to_string(n) + " exceeds max_positions " +
                          std::to_string(cfg.max_positions));
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw ConfigError("token id " + std::to_string(t) + " out of range for vocabulary of " +
                              std::to_string(cfg.vocab_size));
    }

    EncoderTape tape;
    tape.tokens.assign(tokens.begin(), tokens.end());

    const Matrix& tok = ckpt.tensor(names::tok_emb);
    const Matrix& pos = ckpt.tensor(names::pos_emb);
    const Matrix& type = ckpt.tensor(names::type_emb);
    Matrix x0(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto t = tok.row(static_cast<std::size_t>(tokens[i]));
        const auto p = pos.row(i);
        const auto ty = type.row(0);
        auto out = x0.row(i);
        for (std::size_t c = 0; c < d; ++c) out[c] = t[c] + p[c] + ty[c];
    }
    tape.embedded = layer_norm_rows(x0, ckpt.tensor(names::emb_ln_g), ckpt.tensor(names::emb_ln_b),
                                    cfg.ln_eps, &tape.emb_ln);

    // Keys that are PAD are excluded from every attention row (unless the whole input is PAD).
    std::vector<bool> key_masked(n, false);
    const bool all_pad = std::all_of(tokens.begin(), tokens.end(), [](TokenId t) { return t == special::pad; });
    if (!all_pad)
        for (std::size_t j = 0; j < n; ++j) key_masked[j] = tokens[j] == special::pad;

    const std::size_t h = cfg.num_heads, dk = cfg.d_k();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    tape.layers.resize(cfg.num_layers);
    const Matrix* x = &tape.embedded;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        LayerTape& lt = tape.layers[l];
        auto W = [&](const char* s) -> const Matrix& { return ckpt.tensor(names::layer(l, s)); };
        lt.input = *x;
        lt.q = linear(lt.input, W("attn.Wq"), W("attn.bq"));
        lt.k = linear(lt.input, W("attn.Wk"), W("attn.bk"));
        lt.v = linear(lt.input, W("attn.Wv"), W("attn.bv"));
        lt.context = Matrix(n, d);
        lt.probs.resize(h);
        for (std::size_t head = 0; head < h; ++head) {
            const std::size_t off = head * dk;
            Matrix scores(n, n);
            for (std::size_t i = 0; i < n; ++i) {
                const float* qi = lt.q.row(i).data() + off;
                for (std::size_t j = 0; j < n; ++j) {
                    if (key_masked[j]) {
                        scores(i, j) = -1e30f;
                        continue;
                    }
                    const float* kj = lt.k.row(j).data() + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dk; ++c) s += static_cast<double>(qi[c]) * kj[c];
                    scores(i, j) = static_cast<float>(s * scale);
                }
            }
            lt.probs[head] = softmax_rows(scores);
            const Matrix& a = lt.probs[head];
            std::vector<double> acc(dk);
            for (std::size_t i = 0; i < n; ++i) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t j = 0; j < n; ++j) {
                    const double aij = a(i, j);
                    const float* vj = lt.v.row(j).data() + off;
                    for (std::size_t c = 0; c < dk; ++c) acc[c] += aij * vj[c];
                }
                float* out = lt.context.row(i).data() + off;
                for (std::size_t c = 0; c < dk; ++c) out[c] = static_cast<float>(acc[c]);
            }
        }
        Matrix attn_out = linear(lt.context, W("attn.Wo"), W("attn.bo"));
        for (std::size_t i = 0; i < attn_out.size(); ++i) attn_out.values()[i] += lt.input.values()[i];
        lt.res_attn = layer_norm_rows(attn_out, W("attn.ln.g"), W("attn.ln.b"), cfg.ln_eps, &lt.ln_attn);

        lt.pre_act = linear(lt.res_attn, W("ff.W1"), W("ff.b1"));
        lt.hidden = Matrix(n, cfg.d_ff);
        for (std::size_t i = 0; i < lt.pre_act.size(); ++i)
            lt.hidden.values()[i] = activate(lt.pre_act.values()[i], cfg.activation);
        Matrix ff_out = linear(lt.hidden, W("ff.W2"), W("ff.b2"));
        for (std::size_t i = 0; i < ff_out.size(); ++i) ff_out.values()[i] += lt.res_attn.values()[i];
        lt.res_ff = layer_norm_rows(ff_out, W("ff.ln.g"), W("ff.ln.b"), cfg.ln_eps, &lt.ln_ff);
        x = &lt.res_ff;
    }
    return tape;
}

}  // namespace detail

Matrix encode(const Checkpoint& ckpt, std::span<const TokenId> tokens, const CaptureSpec& capture,
              std::map<CapturePoint, Matrix>* captures) {
    validate_capture_spec(ckpt.config, capture);
    auto tape = detail::run_encoder(ckpt, tokens);
    if (captures) {
        for (const auto& p : capture) {
            const Matrix* src = nullptr;
            switch (p.kind) {
                case CaptureKind::post_embedding: src = &tape.embedded; break;
                case CaptureKind::final_ln: src = &tape.output(); break;
                case CaptureKind::mha_preproj: src = &tape.layers[p.layer].context; break;
                case CaptureKind::ff_hidden: src = &tape.layers[p.layer].hidden; break;
                case CaptureKind::ff_preact: src = &tape.layers[p.layer].pre_act; break;
                case CaptureKind::res_after_attn: src = &tape.layers[p.layer].res_attn; break;
                case CaptureKind::res_after_ff: src = &tape.layers[p.layer].res_ff; break;
            }
            (*captures)[p] = *src;
        }
    }
    Matrix out = tape.output();
    return out;
}

Matrix mlm_head(const Checkpoint& ckpt, const Matrix& hidden) {
    Matrix t = detail::linear(hidden, ckpt.tensor(names::mlm_dense), ckpt.tensor(names::mlm_dense_b));
    for (float& v : t.values()) v = activate(v, ckpt.config.activation);
    Matrix z = detail::layer_norm_rows(t, ckpt.tensor(names::mlm_ln_g), ckpt.tensor(names::mlm_ln_b),
                                       ckpt.config.ln_eps);
    Matrix logits = detail::linear(z, ckpt.tensor(names::mlm_decoder), ckpt.tensor(names::mlm_decoder_b));
    require_finite(logits, "mlm logits");
    return logits;
}

std::vector<float> classifier_head(const Checkpoint& ckpt, const Matrix& hidden) {
    if (ckpt.config.num_labels == 0) throw ConfigError("checkpoint has no classification head");
    Matrix cls_row(1, hidden.cols(), std::vector<float>(hidden.row(0).begin(), hidden.row(0).end()));
    Matrix pooled = detail::linear(cls_row, ckpt.tensor(names::cls_pool), ckpt.tensor(names::cls_pool_b));
    for (float& v : pooled.values()) v = std::tanh(v);
    Matrix logits = detail::linear(pooled, ckpt.tensor(names::cls_out), ckpt.tensor(names::cls_out_b));
    return {logits.values().begin(), logits.values().end()};
}

ForwardResult forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, const CaptureSpec& capture) {
    ForwardResult result;
    Matrix hidden = encode(ckpt, tokens, capture, &result.captures);
    result.logits = mlm_head(ckpt, hidden);
    return result;
}

double masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                            std::span<const std::size_t> positions) {
    if (positions.empty()) throw ConfigError("no masked positions");
    double total = 0.0;
    for (std::size_t p : positions) {
        if (p >= logits.rows() || p >= targets.size()) throw ConfigError("mask position out of range");
        const auto row = logits.row(p);
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        const auto t = static_cast<std::size_t>(targets[p]);
        total += std::log(sum) - (static_cast<double>(row[t]) - mx);
    }
    return total / static_cast<double>(positions.size());
}

double mlm_loss(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                std::span<const std::size_t> mask_positions) {
    if (mask_positions.empty()) throw ConfigError("mlm_loss needs at least one masked position");
    std::vector<TokenId> input(tokens.begin(), tokens.end());
    for (std::size_t p : mask_positions) {
        if (p >= input.size()) throw ConfigError("mask position out of range");
        input[p] = special::mask;
    }
    const Matrix logits = forward(ckpt, input).logits;
    return masked_cross_entropy(logits, tokens, mask_positions);
}

}  // namespace permweave
