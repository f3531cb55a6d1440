#pragma once

#include "gcp/graph.hpp"
#include "gcp/model.hpp"
#include "gcp/rng.hpp"

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gcp {

// One supervision pair for retraining a single predictor: values of the
// node's non-root parents (ascending node index) and the node's own value.
struct ConceptPair {
    std::vector<int> parent_values;
    int value = 0;
};

// Annotator contract. Implementations must return full annotations (every
// non-root node covered, values in range) and keep the cost counter
// monotone: +1 per annotated sample, +1 per generated pair.
class Oracle {
public:
    virtual ~Oracle() = default;

    virtual std::vector<AnnotatedSample> annotate(std::span<const Sample> batch,
                                                  const ConceptGraph& graph) = 0;

    // Valid parent-child value pairs for the node, distributed like the
    // teacher's conditional of the node given its graph parents.
    virtual std::vector<ConceptPair> generate_pairs(const ConceptGraph& graph,
                                                    const NodeId& node,
                                                    std::size_t count) = 0;

    virtual std::uint64_t cost() const = 0;
};

// --- synthetic ground-truth teacher ---

// Conditional table for one variable of the generative process. Row index is
// (region * u_states + u) * parent_combos + combo, where combo ranges over
// the listed parents' values in mixed radix (last parent fastest).
struct NodeTable {
    NodeId id;
    std::size_t cardinality = 2;
    std::vector<NodeId> parents;  // truth-process parents (concept nodes)
    bool region_dependent = false;
    bool confounded = false; // rows also indexed by the hidden cause u
    std::vector<std::vector<double>> rows;
};

// A fully specified generative process: x uniform on [-1,1]^d, a region id
// from the sign pattern of the leading coordinates, an optional shared hidden
// cause u, then concepts and label drawn from conditional tables.
struct SyntheticTask {
    std::string name;
    std::size_t feature_dim = 6;
    std::size_t region_coords = 0; // leading coords whose signs form regions
    bool latent_confounder = false;
    double confounder_prior = 0.5;
    std::uint64_t seed = 0;
    std::vector<NodeTable> tables; // parents listed before children
    GraphDescription student_graph; // the DAG mirrored by the student model

    std::size_t region_count() const { return std::size_t{1} << region_coords; }
};

// Row-stochastic checks; throws InvalidTable.
void validate_task(const SyntheticTask& task);

// The fixed dependence-bearing example: u ~ Bern(0.5); c1 = u flipped w.p.
// 0.1; c2 = u flipped w.p. 0.1; y = 1[c1 = c2]. With the confounder disabled
// both concepts become independent fair coins.
SyntheticTask confounder_minimal_task(bool latent_on = true);

// The pinned task for the risk-ordering and loop benchmarks (region-dependent
// tables, confounded c1/c2, versioned here).
SyntheticTask theorem1_task();

struct DatasetBundle {
    std::vector<Sample> pool;
    std::vector<AnnotatedSample> labeled;
    std::vector<AnnotatedSample> test;
};

class SyntheticTeacher final : public Oracle {
public:
    explicit SyntheticTeacher(SyntheticTask task);

    // Draws the pool (unlabeled; truths retained privately for annotate) and
    // a fully annotated test set. Deterministic given the task seed.
    DatasetBundle generate(std::size_t n_pool, std::size_t n_test);

    std::vector<AnnotatedSample> annotate(std::span<const Sample> batch,
                                          const ConceptGraph& graph) override;
    std::vector<ConceptPair> generate_pairs(const ConceptGraph& graph,
                                            const NodeId& node,
                                            std::size_t count) override;
    std::uint64_t cost() const override { return cost_.load(); }

    const SyntheticTask& task() const { return task_; }

private:
    struct Draw {
        std::vector<double> features;
        std::unordered_map<NodeId, int> values; // concepts and label
    };
    Draw draw_joint(Rng& rng) const;

    SyntheticTask task_;
    std::unordered_map<std::string, AnnotatedSample> truths_;
    Rng pair_rng_;
    std::atomic<std::uint64_t> cost_{0};
};

// --- remote annotator client ---

// POST {endpoint}/annotate with
//   {"graph":{"nodes":[{name,cardinality,description}]},
//    "samples":[{"id","text"}]}
// expecting {"annotations":[{"id","concepts":{name:int},"label":int}]}.
// Pair generation uses POST {endpoint}/generate_pairs with
//   {"node":{...},"parents":[{...}],"count":K} -> {"pairs":[{"parents":
//   {name:int},"value":int}]}.
struct RemoteOracleConfig {
    std::string endpoint; // env GCP_ORACLE_ENDPOINT when empty
    std::string api_key;  // env GCP_ORACLE_KEY when empty; never logged
    double timeout_seconds = 30.0;
    std::size_t retry_cap = 2;       // re-requests per malformed sample
    std::uint64_t max_cost = 0;      // 0 = unlimited; else BudgetExhausted
    std::size_t max_inflight = 4;    // request concurrency ceiling
};

class RemoteOracle final : public Oracle {
public:
    explicit RemoteOracle(RemoteOracleConfig config);

    std::vector<AnnotatedSample> annotate(std::span<const Sample> batch,
                                          const ConceptGraph& graph) override;
    std::vector<ConceptPair> generate_pairs(const ConceptGraph& graph,
                                            const NodeId& node,
                                            std::size_t count) override;
    std::uint64_t cost() const override { return cost_.load(); }

    // texts must be registered before annotate() so the wire payload can
    // carry them (features alone are not meaningful to a text annotator)
    void register_text(const std::string& sample_id, const std::string& text);

private:
    std::string post_json(const std::string& path, const std::string& body);

    RemoteOracleConfig config_;
    std::unordered_map<std::string, std::string> texts_;
    std::atomic<std::uint64_t> cost_{0};
};

// --- dataset ingestion ---

struct FeaturizerConfig {
    std::size_t feature_dim = 256;
    std::size_t ngram = 3; // hashed character n-gram width
};

// Deterministic hashed character n-gram counts, L2-normalized; empty text
// maps to the zero vector.
std::vector<double> featurize_text(const std::string& text,
                                   const FeaturizerConfig& config);

// JSON-lines reader: fields `id`, `text` or `features`, optional `label`,
// optional `concepts` {node-name: int}. Records carrying a label and, when a
// graph is supplied, every concept, land in `labeled`; everything else goes
// to the pool. Throws ParseError / MixedDimensions.
DatasetBundle ingest_text(const std::string& path,
                          const FeaturizerConfig& config,
                          const ConceptGraph* graph = nullptr);

} // namespace gcp
