#pragma once

// Latest-weight averaging over a rolling window, and weighted model soups.

#include <cstddef>
#include <deque>
#include <span>

#include "qlab/model.hpp"

namespace qlab::avg {

/// Weighted per-tensor sum Σ wᵢ·ckptᵢ accumulated in 64-bit. Contributions are
/// summed in a canonical order, so the result does not depend on how the
/// (checkpoint, weight) pairs are permuted. Throws ContractViolation when the
/// weights do not sum to 1 within 1e-9 or configs/tensor keys differ.
/// Step and token count are taken from the checkpoint with the largest step.
model::Checkpoint soup(std::span<const model::Checkpoint> checkpoints,
                       std::span<const double> weights);

/// Rolling window of the k most recent checkpoints (weights only).
class AveragingWindow {
 public:
  explicit AveragingWindow(std::size_t capacity);

  /// Appends `ckpt`, evicting the oldest entry when full, and returns the
  /// uniform mean of the entries. The average carries the newest entry's step.
  const model::Checkpoint& push(model::Checkpoint ckpt);

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::deque<model::Checkpoint>& entries() const noexcept { return entries_; }
  /// Mean of the current entries; empty checkpoint before the first push.
  const model::Checkpoint& average() const noexcept { return average_; }

 private:
  std::size_t capacity_;
  std::deque<model::Checkpoint> entries_;
  model::Checkpoint average_;
};

/// Free-function form of AveragingWindow::push.
const model::Checkpoint& lawa_push(AveragingWindow& window, model::Checkpoint ckpt);

}  // namespace qlab::avg
