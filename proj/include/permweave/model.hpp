#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "permweave/numerics.hpp"

namespace permweave {

using TokenId = std::int32_t;

/// Reserved ids at the bottom of every vocabulary.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId cls = 1;
inline constexpr TokenId sep = 2;
inline constexpr TokenId mask = 3;
inline constexpr TokenId first_word = 4;
}  // namespace special

/// Invalid configuration or arguments supplied by the caller.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent file contents.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TransformerConfig {
    std::size_t num_layers = 2;
    std::size_t d_model = 16;
    std::size_t num_heads = 2;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 64;
    std::size_t max_positions = 64;
    Activation activation = Activation::gelu;
    float ln_eps = 1e-12f;
    /// Number of classifier outputs; 0 means the checkpoint carries no classification head.
    std::size_t num_labels = 0;

    std::size_t d_k() const { return d_model / num_heads; }
    void validate() const;

    bool operator==(const TransformerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;  // one entry for vectors, two for matrices (d_out, d_in)
};

/// Every tensor a checkpoint with this config must hold, in canonical order.
std::vector<ParamSpec> parameter_layout(const TransformerConfig& config);

/// Canonical tensor names. Weights are (d_out x d_in) and act as y = W x + b.
namespace names {
std::string layer(std::size_t l, const std::string& suffix);
inline const std::string tok_emb = "emb.tok";
inline const std::string pos_emb = "emb.pos";
inline const std::string type_emb = "emb.type";
inline const std::string emb_ln_g = "emb.ln.g";
inline const std::string emb_ln_b = "emb.ln.b";
inline const std::string mlm_dense = "mlm.dense";
inline const std::string mlm_dense_b = "mlm.dense.bias";
inline const std::string mlm_ln_g = "mlm.ln.g";
inline const std::string mlm_ln_b = "mlm.ln.b";
inline const std::string mlm_decoder = "mlm.decoder";
inline const std::string mlm_decoder_b = "mlm.decoder.bias";
inline const std::string cls_pool = "cls.pool";
inline const std::string cls_pool_b = "cls.pool.bias";
inline const std::string cls_out = "cls.out";
inline const std::string cls_out_b = "cls.out.bias";
}  // namespace names

/// Named weights plus the architecture that fixes their shapes. Vectors are stored as 1 x d.
struct Checkpoint {
    TransformerConfig config;
    std::map<std::string, Matrix> tensors;

    const Matrix& tensor(const std::string& name) const;
    Matrix& tensor(const std::string& name);

    bool operator==(const Checkpoint&) const = default;
};

/// Throws FormatError unless the tensor set and every shape match the config exactly.
void validate_checkpoint(const Checkpoint& ckpt);

/// Normal(0, 0.02) truncated at two standard deviations; LayerNorm gains 1, biases and betas 0.
Checkpoint init_model(const TransformerConfig& config, std::uint64_t seed);

/// Adds (or replaces) cls.pool / cls.out drawn only from `head_seed`.
void init_classifier_head(Checkpoint& ckpt, std::size_t num_labels, std::uint64_t head_seed);

/// ff_hidden is after the nonlinearity, ff_preact before it.
enum class CaptureKind { post_embedding, mha_preproj, ff_hidden, res_after_attn, res_after_ff, final_ln, ff_preact };

struct CapturePoint {
    CaptureKind kind = CaptureKind::post_embedding;
    std::size_t layer = 0;  // ignored for post_embedding and final_ln

    std::string name() const;
    static CapturePoint parse(const std::string& name);
    bool is_layered() const;

    auto operator<=>(const CapturePoint&) const = default;
};

using CaptureSpec = std::set<CapturePoint>;

/// Feature width at a capture point (d_ff for the two FF points, d_model otherwise).
std::size_t capture_width(const TransformerConfig& config, const CapturePoint& point);
CaptureSpec all_capture_points(const TransformerConfig& config);
void validate_capture_spec(const TransformerConfig& config, const CaptureSpec& spec);

struct ForwardResult {
    Matrix logits;                                // n x V
    std::map<CapturePoint, Matrix> captures;      // n x width
};

/// Full MLM forward pass. Attention never attends to PAD keys.
ForwardResult forward(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                      const CaptureSpec& capture = {});

/// Final encoder hidden states (n x d), optionally filling captures.
Matrix encode(const Checkpoint& ckpt, std::span<const TokenId> tokens, const CaptureSpec& capture = {},
              std::map<CapturePoint, Matrix>* captures = nullptr);

Matrix mlm_head(const Checkpoint& ckpt, const Matrix& hidden);
/// Classifier logits computed from the CLS (first) position.
std::vector<float> classifier_head(const Checkpoint& ckpt, const Matrix& hidden);

/// Mean natural-log cross-entropy of `targets[p]` under `logits` row p, over `positions`.
double masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                            std::span<const std::size_t> positions);

/// Replaces every masked position by the MASK id, runs the model, and averages the
/// cross-entropy of the original tokens at those positions.
double mlm_loss(const Checkpoint& ckpt, std::span<const TokenId> tokens,
                std::span<const std::size_t> mask_positions);

/// PWC1 container: magic, u64 LE header length, JSON header, raw LE float32 payload.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace permweave
