#include "qlab/averaging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qlab/error.hpp"
#include "qlab/fnv.hpp"

namespace qlab::avg {

namespace {

std::uint64_t tensor_digest(const model::Checkpoint& c) {
  Fnv1a h;
  for (const auto& [name, m] : c.tensors) {
    h.update(name);
    h.update({reinterpret_cast<const std::uint8_t*>(m.data().data()), m.size() * sizeof(float)});
  }
  return h.digest();
}

}  // namespace

model::Checkpoint soup(std::span<const model::Checkpoint> checkpoints,
                       std::span<const double> weights) {
  if (checkpoints.empty() || checkpoints.size() != weights.size()) {
    throw ContractViolation("soup: need one weight per checkpoint and at least one checkpoint");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractViolation("soup: weights sum to " + std::to_string(total) + ", expected 1");
  }
  const model::Checkpoint& first = checkpoints.front();
  for (const auto& c : checkpoints) {
    if (!(c.config == first.config) || c.tensors.size() != first.tensors.size()) {
      throw ContractViolation("soup: checkpoints have different configurations");
    }
    for (const auto& [name, m] : first.tensors) {
      auto it = c.tensors.find(name);
      if (it == c.tensors.end() || !it->second.same_shape(m)) {
        throw ContractViolation("soup: tensor " + name + " missing or misshapen");
      }
    }
  }

  // Canonical summation order: by weight, then by content.
  std::vector<std::size_t> order(checkpoints.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> digests(checkpoints.size());
  for (std::size_t i = 0; i < checkpoints.size(); ++i) digests[i] = tensor_digest(checkpoints[i]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (weights[a] != weights[b]) return weights[a] < weights[b];
    return digests[a] < digests[b];
  });

  model::Checkpoint out;
  out.config = first.config;
  const auto newest = std::max_element(checkpoints.begin(), checkpoints.end(),
                                       [](const auto& a, const auto& b) { return a.step < b.step; });
  out.step = newest->step;
  out.tokens_seen = newest->tokens_seen;
  std::vector<double> acc;
  for (const auto& [name, m] : first.tensors) {
    acc.assign(m.size(), 0.0);
    for (std::size_t idx : order) {
      const double wgt = weights[idx];
      const auto src = checkpoints[idx].tensors.at(name).data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += wgt * static_cast<double>(src[i]);
    }
    nd::MatrixF t(m.rows(), m.cols());
    for (std::size_t i = 0; i < acc.size(); ++i) t.data()[i] = static_cast<float>(acc[i]);
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

AveragingWindow::AveragingWindow(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ContractViolation("AveragingWindow: capacity must be >= 1");
}

const model::Checkpoint& AveragingWindow::push(model::Checkpoint ckpt) {
  if (!entries_.empty() && !(entries_.front().config == ckpt.config)) {
    throw ContractViolation("AveragingWindow: checkpoint config differs from window entries");
  }
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(ckpt));
  const std::vector<model::Checkpoint> members(entries_.begin(), entries_.end());
  const std::vector<double> weights(members.size(), 1.0 / static_cast<double>(members.size()));
  average_ = soup(members, weights);
  average_.step = entries_.back().step;
  average_.tokens_seen = entries_.back().tokens_seen;
  return average_;
}

const model::Checkpoint& lawa_push(AveragingWindow& window, model::Checkpoint ckpt) {
  return window.push(std::move(ckpt));
}

}  // namespace qlab::avg
