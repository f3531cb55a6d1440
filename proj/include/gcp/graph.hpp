#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace gcp {

using NodeId = std::string;

struct NodeSpec {
    NodeId id;
    std::string name;
    std::size_t cardinality = 0; // 0 for the root, >= 2 elsewhere
    std::string description;
};

struct GraphDescription {
    std::vector<NodeSpec> nodes;
    std::vector<std::pair<NodeId, NodeId>> edges; // (parent, child)
};

// Validated concept DAG. Nodes are addressed by dense index internally; ids
// are stable external names. Exactly one root (no parents, carries raw
// features) and one output node (no children, carries the task label); every
// node lies on a root-to-output path.
struct ConceptGraph {
    std::vector<NodeSpec> nodes;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::vector<std::vector<std::size_t>> parents;
    std::vector<std::vector<std::size_t>> children;
    std::vector<std::size_t> topo_order; // every parent precedes its children
    std::size_t root = 0;
    std::size_t output = 0;

    std::size_t size() const { return nodes.size(); }
    bool is_root(std::size_t i) const { return i == root; }
    bool is_output(std::size_t i) const { return i == output; }
    const NodeSpec& spec(std::size_t i) const { return nodes[i]; }

    // throws InvalidNode for unknown ids
    std::size_t index_of(const NodeId& id) const;
    bool has_node(const NodeId& id) const;

    // nodes reachable from any member of `from` by directed edges, excluding
    // the members themselves, in topological order
    std::vector<std::size_t> descendants(const std::vector<std::size_t>& from) const;

private:
    friend ConceptGraph build_graph(const GraphDescription& desc);
    std::unordered_map<NodeId, std::size_t> index_;
};

// Validates and finalizes a graph description.
// Throws DuplicateId, CycleDetected, MultipleRoots, MultipleOutputs,
// UnreachableNode or InvalidCardinality.
ConceptGraph build_graph(const GraphDescription& desc);

// w_i = deg(i) / sum_j deg(j) with deg = in-degree + out-degree.
std::vector<double> degree_weights(const ConceptGraph& graph);

// JSON round trip for graph spec files:
//   {"nodes":[{"id","name","cardinality","description"}], "edges":[[p,c],..]}
GraphDescription parse_graph_description(const std::string& json_text);
ConceptGraph load_graph(const std::string& path);
std::string graph_description_json(const ConceptGraph& graph);

} // namespace gcp
