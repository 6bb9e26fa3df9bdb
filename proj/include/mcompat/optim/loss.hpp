#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "mcompat/tensor/ops.hpp"

namespace mcompat::optim {

// Class index of the compatible class in every 2-way head; label 1 = compatible.
inline constexpr int kCompatible = 1;
inline constexpr int kIncompatible = 0;

/// Mean binary cross-entropy from N x 2 logits: -log softmax(z)[y].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (labels.empty()) throw UsageError("cross_entropy: empty batch");
  for (int y : labels)
    if (y != 0 && y != 1) throw UsageError("cross_entropy: labels must be 0 or 1");
  return nll_loss(log_softmax(logits), labels);
}

inline constexpr double kProbClamp = 1e-12;

/// Same loss from already-computed probabilities p_i = P(compatible).
inline double cross_entropy(std::span<const int> labels, std::span<const double> probs) {
  if (labels.empty()) throw UsageError("cross_entropy: empty batch");
  if (labels.size() != probs.size()) throw UsageError("cross_entropy: label and probability counts differ");
  double acc = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("cross_entropy: labels must be 0 or 1");
    const double p = std::clamp(probs[i], kProbClamp, 1 - kProbClamp);
    acc -= labels[i] == 1 ? std::log(p) : std::log1p(-p);
  }
  return acc / double(labels.size());
}

}  // namespace mcompat::optim
