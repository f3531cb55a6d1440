#pragma once

#include "gcp/graph.hpp"
#include "gcp/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gcp {

struct AcquisitionConfig {
    std::size_t budget = 1;      // B: samples sent to the oracle per round
    std::size_t candidate_k = 0; // k: per-criterion candidate set size; 0 = 3B
    double p_norm = 2.0;
    std::size_t medoid_iters = 20;
    std::uint64_t seed = 0;
    // pools up to this size get a materialized pairwise distance matrix
    std::size_t dense_matrix_limit = 5000;

    std::size_t effective_k() const {
        return candidate_k == 0 ? 3 * budget : candidate_k;
    }
};

// Everything acquisition needs about one sample, computed against a fixed
// model snapshot: outputs, the structure-weighted uncertainty score, per-node
// gradient embeddings and cached terms for fast pairwise divergences.
struct SampleScore {
    std::string id;
    NodeOutputs outputs;
    double e_unc = 0.0;
    // by dense node index; root slots stay empty
    std::vector<std::vector<double>> embeddings;
    // weight-scaled clamped distributions / their logs, flattened over the
    // scored nodes (pairwise-divergence fast path)
    std::vector<double> weighted_probs;
    std::vector<double> log_probs;
    double self_term = 0.0; // dot(weighted_probs, log_probs)
    // embeddings scaled by sqrt(w_i), flattened (p = 2 distance fast path)
    std::vector<double> scaled_embedding;
};

struct PoolScores {
    std::vector<SampleScore> entries;
    std::vector<double> weights;      // degree weights renormalized, by node
    std::vector<std::size_t> nodes;   // scored (non-root) nodes, topo order
    double p_norm = 2.0;

    std::size_t size() const { return entries.size(); }
};

// H(p) = -sum p_k ln p_k with 0 ln 0 = 0. Throws InvalidDistribution.
double node_entropy(std::span<const double> dist);

// (sum_i w_i h_i^p)^(1/p); the raw formula over aligned vectors.
double structure_weighted_uncertainty(std::span<const double> entropies,
                                      std::span<const double> weights,
                                      double p_norm);

// (sum_i w_i ||zx_i - zy_i||_2^p)^(1/p) over aligned per-node vectors.
double gradient_distance(const std::vector<std::vector<double>>& zx,
                         const std::vector<std::vector<double>>& zy,
                         std::span<const double> weights, double p_norm);

// sum_i w_i KL(a_i || b_i) over non-root nodes, distributions clamped to
// [1e-12, 1] before logs. Asymmetric.
double kl_distance(const ConceptGraph& graph, const NodeOutputs& a,
                   const NodeOutputs& b, std::span<const double> weights);

// Degree weights with the root's mass redistributed across scoring nodes.
std::vector<double> scoring_weights(const ConceptGraph& graph);

// Scores a set of samples against one model snapshot.
PoolScores score_pool(const GcpModel& model, std::span<const Sample> samples,
                      double p_norm = 2.0);

std::vector<std::string> select_swu(const PoolScores& pool, std::size_t k);
std::vector<std::string> select_gradient_medoids(const PoolScores& pool,
                                                 std::size_t k,
                                                 const AcquisitionConfig& config);
// labeled entries seed the traversal; the pool's 1-medoid seeds it when the
// labeled set is empty
std::vector<std::string> select_coverage(const PoolScores& pool,
                                         std::span<const SampleScore> labeled,
                                         std::size_t k,
                                         const AcquisitionConfig& config);

struct FillEntry {
    std::string id;
    bool from_intersection = false;
};

struct SelectionResult {
    std::vector<std::string> swu_set, grad_set, cover_set;
    std::vector<std::string> consensus; // ordered, intersection first
    std::vector<FillEntry> fill_trace;
};

// Intersection of the three candidate sets, ranked by descending e_unc
// (ties: ascending id), padded from the union the same way until
// min(B, |pool|) ids are selected.
SelectionResult consensus_select(const std::vector<std::string>& swu_set,
                                 const std::vector<std::string>& grad_set,
                                 const std::vector<std::string>& cover_set,
                                 const PoolScores& pool, std::size_t budget);

// Full per-round acquisition: score, run the three criteria, take consensus.
SelectionResult acquire(const GcpModel& model, std::span<const Sample> pool,
                        std::span<const AnnotatedSample> labeled,
                        const AcquisitionConfig& config,
                        PoolScores* scores_out = nullptr);

// --- generic selection cores (exposed for the geometry tests) ---

using DistanceFn = std::function<double(std::size_t, std::size_t)>;

// Greedy BUILD then alternating assignment / medoid update. Deterministic;
// ties break toward the lowest index. Returns sorted medoid indices.
std::vector<std::size_t> k_medoids(std::size_t n, std::size_t k,
                                   std::size_t max_iters, const DistanceFn& dist,
                                   std::size_t dense_limit = 5000);

// Greedy farthest-first. `initial_dmin` holds each point's distance to the
// anchor set (infinity everywhere = no anchors; the first pick is then the
// 1-medoid). Returns selected indices in pick order.
std::vector<std::size_t> farthest_first(std::vector<double> initial_dmin,
                                        std::size_t k, const DistanceFn& dist);

} // namespace gcp
