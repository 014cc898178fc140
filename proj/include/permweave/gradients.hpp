#pragma once

#include <map>
#include <span>
#include <string>

#include "permweave/model.hpp"

namespace permweave {

/// Gradient tensors keyed like Checkpoint::tensors.
using Gradients = std::map<std::string, Matrix>;

Gradients zero_gradients(const Checkpoint& ckpt);
void accumulate(Gradients& into, const Gradients& from);

/// Summed (not averaged) cross-entropy of `targets` at `positions` for one sequence whose
/// masked input is `input`. Adds the gradient of that sum to `grads`.
double mlm_loss_sum_and_grad(const Checkpoint& ckpt, std::span<const TokenId> input,
                             std::span<const TokenId> targets, std::span<const std::size_t> positions,
                             Gradients& grads);

/// Cross-entropy of `label` under the classification head for one sequence; adds its gradient.
double classification_loss_and_grad(const Checkpoint& ckpt, std::span<const TokenId> input,
                                    std::size_t label, Gradients& grads);

}  // namespace permweave
