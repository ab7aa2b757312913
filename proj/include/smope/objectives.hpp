#pragma once

#include <span>
#include <vector>

#include "smope/autodiff.hpp"
#include "smope/prefix_moe.hpp"
#include "smope/routing.hpp"
#include "smope/types.hpp"

namespace smope {

struct LossWeights {
  double alpha_router = 0.0;
  double alpha_proto = 0.0;
};

// Retained prefix keys from the previous task, one matrix per prompted layer
// (rows are keys whose head-averaged lifetime frequency reached the layer
// mean at snapshot time).
struct PrototypeSet {
  std::vector<Matrix> keys_per_layer;
  std::vector<std::vector<int>> source_experts;  // originating expert indices

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& m : keys_per_layer) {
      n += static_cast<std::size_t>(m.rows());
    }
    return n;
  }
  bool empty() const { return total() == 0; }
};

// Mean over (sample, layer, head) of minus the selected experts' share of the
// full softmax over all raw proxy scores. Always in [-1, 0); exactly -1 only
// under full selection.
double router_loss(std::span<const RoutingDecision> decisions);

// Same quantity from graph-side records, so gradients reach the prefix keys.
ag::Var router_loss_graph(ag::Graph& g, std::span<const RoutedProxy> routed);

// Keys of experts whose head-averaged frequency is at or above the layer
// mean. `mean_frequencies[l]` holds the head-averaged F per expert of layer l.
PrototypeSet build_prototype_set(std::span<const Matrix> old_keys_per_layer,
                                 std::span<const Vector> mean_frequencies);

// Mean over all prototypes of minus the mass that the prototype's current
// top-K keys take in a softmax over all key dot products. The top-K set is
// recomputed from the current keys on every call. Empty prototype sets
// contribute zero.
double prototype_loss(const PrototypeSet& protos, std::span<const Matrix> current_keys, int k);

// Per-layer, per-prototype pinned selections for derivative checks.
using ProtoSelections = std::vector<std::vector<std::vector<int>>>;

ag::Var prototype_loss_graph(ag::Graph& g, const PrototypeSet& protos,
                             std::span<const ag::Var> current_keys, int k,
                             const ProtoSelections* forced = nullptr);

// L = ce + alpha_router * router + alpha_proto * proto.
double total_loss(double ce, double router, double proto, const LossWeights& w);

}  // namespace smope
