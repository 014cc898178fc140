#include "permweave/gradients.hpp"

#include <algorithm>
#include <cmath>

#include "encoder_tape.hpp"

namespace permweave {

using detail::EncoderTape;
using detail::LayerNormTape;

Gradients zero_gradients(const Checkpoint& ckpt) {
    Gradients g;
    for (const auto& [name, m] : ckpt.tensors) g.emplace(name, Matrix(m.rows(), m.cols()));
    return g;
}

void accumulate(Gradients& into, const Gradients& from) {
    for (const auto& [name, m] : from) {
        auto dst = into.at(name).values();
        const auto src = m.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
}

namespace {

// dW += dy^T x
void add_weight_grad(Matrix& dw, const Matrix& dy, const Matrix& x) {
    const Matrix g = matmul_at(dy, x);
    auto out = dw.values();
    const auto in = g.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
}

void add_bias_grad(Matrix& db, const Matrix& dy) {
    auto out = db.values();
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const auto row = dy.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
    }
}

void add_in_place(Matrix& a, const Matrix& b) {
    auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

// Softmax cross-entropy on each row; writes (p - onehot) into the row and returns the summed loss.
double softmax_xent_backward(Matrix& logits, std::span<const std::size_t> targets) {
    double loss = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        loss += std::log(sum) - (static_cast<double>(row[targets[r]]) - mx);
        for (std::size_t c = 0; c < row.size(); ++c)
            row[c] = static_cast<float>(std::exp(static_cast<double>(row[c]) - mx) / sum);
        row[targets[r]] -= 1.0f;
    }
    return loss;
}

void backprop_encoder(const Checkpoint& ckpt, const EncoderTape& tape, Matrix d_out, Gradients& grads) {
    const auto& cfg = ckpt.config;
    const std::size_t n = tape.tokens.size(), dk = cfg.d_k();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix dx = std::move(d_out);
    for (std::size_t li = cfg.num_layers; li-- > 0;) {
        const auto& lt = tape.layers[li];
        auto W = [&](const char* s) -> const Matrix& { return ckpt.tensor(names::layer(li, s)); };
        auto G = [&](const char* s) -> Matrix& { return grads.at(names::layer(li, s)); };

        Matrix d_ff_sum = detail::layer_norm_rows_backward(dx, lt.ln_ff, W("ff.ln.g"), G("ff.ln.g"), G("ff.ln.b"));
        add_weight_grad(G("ff.W2"), d_ff_sum, lt.hidden);
        add_bias_grad(G("ff.b2"), d_ff_sum);
        Matrix d_hidden = matmul(d_ff_sum, W("ff.W2"));
        for (std::size_t i = 0; i < d_hidden.size(); ++i)
            d_hidden.values()[i] *= activate_grad(lt.pre_act.values()[i], cfg.activation);
        add_weight_grad(G("ff.W1"), d_hidden, lt.res_attn);
        add_bias_grad(G("ff.b1"), d_hidden);
        Matrix d_res_attn = matmul(d_hidden, W("ff.W1"));
        add_in_place(d_res_attn, d_ff_sum);

        Matrix d_attn_sum = detail::layer_norm_rows_backward(d_res_attn, lt.ln_attn, W("attn.ln.g"),
                                                             G("attn.ln.g"), G("attn.ln.b"));
        add_weight_grad(G("attn.Wo"), d_attn_sum, lt.context);
        add_bias_grad(G("attn.bo"), d_attn_sum);
        const Matrix d_context = matmul(d_attn_sum, W("attn.Wo"));

        Matrix dq(n, cfg.d_model), dkm(n, cfg.d_model), dv(n, cfg.d_model);
        for (std::size_t head = 0; head < cfg.num_heads; ++head) {
            const std::size_t off = head * dk;
            const Matrix& a = lt.probs[head];
            Matrix ds(n, n);
            for (std::size_t i = 0; i < n; ++i) {
                const float* dc = d_context.row(i).data() + off;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const float* vj = lt.v.row(j).data() + off;
                    double da = 0.0;
                    for (std::size_t c = 0; c < dk; ++c) da += static_cast<double>(dc[c]) * vj[c];
                    ds(i, j) = static_cast<float>(da);
                    dot += da * a(i, j);
                    // dV_j += a_ij * dC_i
                    float* dvj = dv.row(j).data() + off;
                    const float aij = a(i, j);
                    for (std::size_t c = 0; c < dk; ++c) dvj[c] += aij * dc[c];
                }
                for (std::size_t j = 0; j < n; ++j)
                    ds(i, j) = static_cast<float>(a(i, j) * (ds(i, j) - dot) * scale);
            }
            for (std::size_t i = 0; i < n; ++i) {
                float* dqi = dq.row(i).data() + off;
                const float* qi = lt.q.row(i).data() + off;
                for (std::size_t j = 0; j < n; ++j) {
                    const float s = ds(i, j);
                    if (s == 0.0f) continue;
                    const float* kj = lt.k.row(j).data() + off;
                    float* dkj = dkm.row(j).data() + off;
                    for (std::size_t c = 0; c < dk; ++c) {
                        dqi[c] += s * kj[c];
                        dkj[c] += s * qi[c];
                    }
                }
            }
        }
        Matrix d_input = d_attn_sum;  // residual branch of LN(attn + x)
        const std::pair<const Matrix*, const char*> projections[] = {
            {&dq, "attn.Wq"}, {&dkm, "attn.Wk"}, {&dv, "attn.Wv"}};
        const char* biases[] = {"attn.bq", "attn.bk", "attn.bv"};
        for (std::size_t p = 0; p < 3; ++p) {
            const Matrix& dy = *projections[p].first;
            add_weight_grad(G(projections[p].second), dy, lt.input);
            add_bias_grad(G(biases[p]), dy);
            add_in_place(d_input, matmul(dy, W(projections[p].second)));
        }
        dx = std::move(d_input);
    }

    Matrix d_x0 = detail::layer_norm_rows_backward(dx, tape.emb_ln, ckpt.tensor(names::emb_ln_g),
                                                   grads.at(names::emb_ln_g), grads.at(names::emb_ln_b));
    Matrix& d_tok = grads.at(names::tok_emb);
    Matrix& d_pos = grads.at(names::pos_emb);
    Matrix& d_type = grads.at(names::type_emb);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = d_x0.row(i);
        auto t = d_tok.row(static_cast<std::size_t>(tape.tokens[i]));
        auto p = d_pos.row(i);
        auto ty = d_type.row(0);
        for (std::size_t c = 0; c < src.size(); ++c) {
            t[c] += src[c];
            p[c] += src[c];
            ty[c] += src[c];
        }
    }
}

}  // namespace

double mlm_loss_sum_and_grad(const Checkpoint& ckpt, std::span<const TokenId> input,
                             std::span<const TokenId> targets, std::span<const std::size_t> positions,
                             Gradients& grads) {
    if (positions.empty()) return 0.0;
    const auto& cfg = ckpt.config;
    const EncoderTape tape = detail::run_encoder(ckpt, input);
    const Matrix& hidden = tape.output();

    const std::size_t m = positions.size(), d = cfg.d_model;
    Matrix selected(m, d);
    std::vector<std::size_t> target_ids(m);
    for (std::size_t r = 0; r < m; ++r) {
        const auto src = hidden.row(positions[r]);
        std::copy(src.begin(), src.end(), selected.row(r).begin());
        target_ids[r] = static_cast<std::size_t>(targets[positions[r]]);
    }

    const Matrix pre = detail::linear(selected, ckpt.tensor(names::mlm_dense), ckpt.tensor(names::mlm_dense_b));
    Matrix act(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.size(); ++i) act.values()[i] = activate(pre.values()[i], cfg.activation);
    LayerNormTape ln;
    const Matrix z = detail::layer_norm_rows(act, ckpt.tensor(names::mlm_ln_g), ckpt.tensor(names::mlm_ln_b),
                                             cfg.ln_eps, &ln);
    Matrix dlogits = detail::linear(z, ckpt.tensor(names::mlm_decoder), ckpt.tensor(names::mlm_decoder_b));
    require_finite(dlogits, "mlm logits");
    const double loss = softmax_xent_backward(dlogits, target_ids);

    add_weight_grad(grads.at(names::mlm_decoder), dlogits, z);
    add_bias_grad(grads.at(names::mlm_decoder_b), dlogits);
    const Matrix dz = matmul(dlogits, ckpt.tensor(names::mlm_decoder));
    Matrix dpre = detail::layer_norm_rows_backward(dz, ln, ckpt.tensor(names::mlm_ln_g),
                                                   grads.at(names::mlm_ln_g), grads.at(names::mlm_ln_b));
    for (std::size_t i = 0; i < dpre.size(); ++i)
        dpre.values()[i] *= activate_grad(pre.values()[i], cfg.activation);
    add_weight_grad(grads.at(names::mlm_dense), dpre, selected);
    add_bias_grad(grads.at(names::mlm_dense_b), dpre);
    const Matrix dsel = matmul(dpre, ckpt.tensor(names::mlm_dense));

    Matrix d_hidden(hidden.rows(), d);
    for (std::size_t r = 0; r < m; ++r) {
        auto dst = d_hidden.row(positions[r]);
        const auto src = dsel.row(r);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    backprop_encoder(ckpt, tape, std::move(d_hidden), grads);
    return loss;
}

double classification_loss_and_grad(const Checkpoint& ckpt, std::span<const TokenId> input,
                                    std::size_t label, Gradients& grads) {
    const auto& cfg = ckpt.config;
    if (cfg.num_labels == 0) throw ConfigError("checkpoint has no classification head");
    if (label >= cfg.num_labels)
        throw ConfigError("label " + std::to_string(label) + " out of range for " +
                          std::to_string(cfg.num_labels) + " classes");
    const EncoderTape tape = detail::run_encoder(ckpt, input);
    const Matrix& hidden = tape.output();
    const std::size_t d = cfg.d_model;

    Matrix h0(1, d, std::vector<float>(hidden.row(0).begin(), hidden.row(0).end()));
    Matrix pooled = detail::linear(h0, ckpt.tensor(names::cls_pool), ckpt.tensor(names::cls_pool_b));
    for (float& v : pooled.values()) v = std::tanh(v);
    Matrix dlogits = detail::linear(pooled, ckpt.tensor(names::cls_out), ckpt.tensor(names::cls_out_b));
    const std::size_t target[] = {label};
    const double loss = softmax_xent_backward(dlogits, target);

    add_weight_grad(grads.at(names::cls_out), dlogits, pooled);
    add_bias_grad(grads.at(names::cls_out_b), dlogits);
    Matrix dpool = matmul(dlogits, ckpt.tensor(names::cls_out));
    for (std::size_t i = 0; i < dpool.size(); ++i) {
        const float p = pooled.values()[i];
        dpool.values()[i] *= 1.0f - p * p;
    }
    add_weight_grad(grads.at(names::cls_pool), dpool, h0);
    add_bias_grad(grads.at(names::cls_pool_b), dpool);
    const Matrix dh0 = matmul(dpool, ckpt.tensor(names::cls_pool));

    Matrix d_hidden(hidden.rows(), d);
    std::copy(dh0.values().begin(), dh0.values().end(), d_hidden.row(0).begin());
    backprop_encoder(ckpt, tape, std::move(d_hidden), grads);
    return loss;
}

}  // namespace permweave
