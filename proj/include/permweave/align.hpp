#pragma once

#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "permweave/activations.hpp"
#include "permweave/assignment.hpp"
#include "permweave/model.hpp"

namespace permweave {

enum class MhaMode { head_perm, monotonic, ignore_heads };
enum class ResidualMode { identity, first, last, all, separate };
enum class Component { ff, mha, residual };

std::string to_string(MhaMode m);
std::string to_string(ResidualMode m);
std::string to_string(Component c);
MhaMode parse_mha_mode(const std::string& s);
ResidualMode parse_residual_mode(const std::string& s);
Component parse_component(const std::string& s);

/// Head-structured permutation of a d_model feature axis: new head j is old head outer[j],
/// reordered within the head by inner[j].
struct HeadPermutation {
    std::size_t num_heads = 0;
    std::size_t d_k = 0;
    Permutation outer;
    std::vector<Permutation> inner;

    static HeadPermutation identity(std::size_t num_heads, std::size_t d_k);
    /// Index map over d_model: j * d_k + i -> outer[j] * d_k + inner[j][i].
    Permutation expand() const;
    HeadPermutation inverse() const;

    bool operator==(const HeadPermutation&) const = default;
};

/// Attention permutation for one layer. `heads` is empty for ignore_heads plans.
struct MhaPermutation {
    std::optional<HeadPermutation> heads;
    Permutation full;

    static MhaPermutation from_heads(HeadPermutation h);
    bool operator==(const MhaPermutation&) const = default;
};

/// Every permutation applied to model B. Residual-coupled weights share one permutation
/// unless the (invalid) separate strategy is used.
struct PermutationPlan {
    MhaMode mha_mode = MhaMode::head_perm;
    ResidualMode residual_mode = ResidualMode::identity;
    std::set<Component> components;
    std::vector<Permutation> ff;
    std::vector<MhaPermutation> mha;
    std::optional<Permutation> residual;
    /// separate strategy only: (after attention LN, after feed-forward LN) per layer
    std::vector<std::pair<Permutation, Permutation>> residual_per_layer;

    bool valid() const { return mha_mode != MhaMode::ignore_heads && residual_mode != ResidualMode::separate; }

    static PermutationPlan identity(const TransformerConfig& config);
    /// Plan whose application undoes this one.
    PermutationPlan inverse() const;

    bool operator==(const PermutationPlan&) const = default;
};

void to_json(nlohmann::json& j, const PermutationPlan& plan);
void from_json(const nlohmann::json& j, PermutationPlan& plan);

Permutation ff_align(const CorrelationMatrix& c);

/// Two-stage attention alignment: an inner assignment for every (A head, B head) block gives
/// a cost; an outer assignment over those costs picks the head correspondence.
HeadPermutation mha_align_headperm(const CorrelationMatrix& c, std::size_t num_heads);
/// Head j of A is matched to head j of B; only the within-head order is solved.
HeadPermutation mha_align_monotonic(const CorrelationMatrix& c, std::size_t num_heads);
/// One assignment over all d_model features; may move features across heads.
Permutation mha_align_ignore(const CorrelationMatrix& c);

/// Sum of C(i, p[i]); the correlation a permutation captures.
double captured_correlation(const CorrelationMatrix& c, const Permutation& p);

struct ResidualAlignment {
    std::optional<Permutation> shared;
    std::vector<std::pair<Permutation, Permutation>> per_layer;
};

/// Required points: first -> post_embedding, last -> final_ln, all / separate -> every
/// res_after_attn and res_after_ff point. Throws ConfigError naming a missing point.
ResidualAlignment residual_align(const StatsMap& stats, ResidualMode mode, std::size_t num_layers);

/// Capture points needed to build a plan with these settings. `ff_point` selects the FF
/// features: ff_hidden (after the nonlinearity) or ff_preact.
CaptureSpec required_capture_points(const TransformerConfig& config, ResidualMode residual_mode,
                                    const std::set<Component>& components,
                                    CaptureKind ff_point = CaptureKind::ff_hidden);

/// Identity for every component outside `components`.
PermutationPlan build_plan(const StatsMap& stats, const TransformerConfig& config, MhaMode mha_mode,
                           ResidualMode residual_mode, const std::set<Component>& components,
                           CaptureKind ff_point = CaptureKind::ff_hidden);

/// Permutes model B's weights. Invalid plans require allow_invalid.
Checkpoint apply_plan(const Checkpoint& ckpt_b, const PermutationPlan& plan, bool allow_invalid = false);

/// Max absolute logit difference over all probe sequences.
double check_equivalence(const Checkpoint& a, const Checkpoint& b, std::span<const std::vector<TokenId>> probes);

/// Uniformly random plan of the requested structure (all three components).
PermutationPlan random_plan(const TransformerConfig& config, MhaMode mha_mode, ResidualMode residual_mode,
                            std::mt19937_64& rng);

}  // namespace permweave
