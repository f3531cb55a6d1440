#pragma once

#include "gcp/model.hpp"
#include "gcp/oracle.hpp"

#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gcp {

// do(S): nodes whose emitted representations are pinned to the one-hot of
// their ground-truth values. Non-root nodes only; the output node is legal
// for diagnostics.
struct InterventionSet {
    std::vector<std::size_t> nodes;          // dense indices, sorted unique
    std::unordered_map<std::size_t, int> truth;
};

InterventionSet make_intervention(const ConceptGraph& graph,
                                  const AnnotatedSample& annotated,
                                  std::span<const NodeId> nodes);

struct CounterfactualResult {
    NodeOutputs outputs;
    double final_loss = 0.0; // cross-entropy at the output node
};

// Pins S to ground truth and recomputes all descendants in topological order;
// nodes outside S and its descendants keep their plain forward values
// exactly. do(empty) reproduces forward() bitwise.
CounterfactualResult rerun(const GcpModel& model,
                           const AnnotatedSample& annotated,
                           const InterventionSet& intervention);

// Same, reusing a cached plain forward pass of the sample.
CounterfactualResult rerun_with_base(const GcpModel& model,
                                     const AnnotatedSample& annotated,
                                     const InterventionSet& intervention,
                                     const NodeOutputs& base);

// (parent-corrected loss, parent+node-corrected loss). Root parents are not
// interveneable; with no interveneable parent the first loss is the plain
// forward loss.
std::pair<double, double> parent_corrected_losses(
    const GcpModel& model, const AnnotatedSample& annotated,
    const NodeId& node);

struct DeltaReport {
    std::vector<double> delta;    // by node index; root entry stays 0
    std::size_t dataset_size = 0;
    std::vector<NodeId> retrain_set;
    // per sample, by node index: (parent-corrected, parent+node-corrected)
    std::optional<std::vector<std::vector<std::pair<double, double>>>> trace;
};

// Mean counterfactual loss reduction per node over the dataset.
DeltaReport delta_scores(const GcpModel& model,
                         std::span<const AnnotatedSample> data,
                         bool keep_trace = false);

// Largest-delta nodes (ties toward the smaller node id). Nodes with
// nonpositive delta are never selected; the output node only participates
// when include_output is set. The returned total matches the exhaustive
// optimum over subsets of at most b nodes.
std::vector<NodeId> select_retrain_set(const ConceptGraph& graph,
                                       std::span<const double> delta,
                                       std::size_t b,
                                       bool include_output = false);

// Requests `count` validated pairs from the oracle, re-requesting rejected
// ones up to a retry cap. Values out of range raise MalformedOracleOutput.
std::vector<ConceptPair> augment_node_data(Oracle& oracle,
                                           const ConceptGraph& graph,
                                           const NodeId& node,
                                           std::size_t count,
                                           std::size_t retry_cap = 2);

// Retrains exactly the listed predictors on teacher-forced parent-child
// supervision pooled from the annotated data and the per-node augmented
// pairs (50/50 when both exist); every other block stays bit-identical.
// Augmented pairs are usable only for nodes without a root parent.
void retrain_submodules(
    GcpModel& model, std::span<const NodeId> retrain_set,
    std::span<const AnnotatedSample> data,
    const std::map<NodeId, std::vector<ConceptPair>>& augmented,
    const TrainConfig& config);

} // namespace gcp
