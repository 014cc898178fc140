#pragma once

#include <span>
#include <vector>

#include "permweave/model.hpp"

namespace permweave::detail {

struct LayerNormTape {
    Matrix xhat;
    std::vector<float> inv_std;
};

struct LayerTape {
    Matrix input;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // one n x n attention matrix per head
    Matrix context;             // concatenated heads, before W_O
    LayerNormTape ln_attn;
    Matrix res_attn;
    Matrix pre_act;
    Matrix hidden;
    LayerNormTape ln_ff;
    Matrix res_ff;
};

/// Intermediates of one encoder pass, kept for captures and backprop.
struct EncoderTape {
    std::vector<TokenId> tokens;
    LayerNormTape emb_ln;
    Matrix embedded;
    std::vector<LayerTape> layers;

    const Matrix& output() const { return layers.empty() ? embedded : layers.back().res_ff; }
};

EncoderTape run_encoder(const Checkpoint& ckpt, std::span<const TokenId> tokens);

/// y = x W^T + b
Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b);
Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma, const Matrix& beta, float eps,
                       LayerNormTape* tape = nullptr);
/// Gradient w.r.t. the LayerNorm input; accumulates into d_gamma / d_beta.
Matrix layer_norm_rows_backward(const Matrix& dy, const LayerNormTape& tape, const Matrix& gamma,
                                Matrix& d_gamma, Matrix& d_beta);

}  // namespace permweave::detail
