#pragma once

#include "gcp/acquisition.hpp"
#include "gcp/counterfactual.hpp"
#include "gcp/model.hpp"
#include "gcp/oracle.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gcp {

struct EvalResult {
    double accuracy = 0.0;
    double label_nll = 0.0;           // mean -log p(y|x) under propagation
    std::vector<double> per_node_nll; // teacher-forced mean NLL, by node index
};

// Exact-match accuracy of the argmax prediction plus per-node diagnostics.
EvalResult evaluate(const GcpModel& model,
                    std::span<const AnnotatedSample> test);

enum class AcquisitionMode { Consensus, Random };

struct LoopConfig {
    std::size_t rounds = 10;
    AcquisitionConfig acquisition;
    std::size_t retrain_budget = 1; // b; 0 disables sub-module retraining
    std::size_t retrain_epochs = 0; // epochs for the retraining passes;
                                    // 0 = train.max_epochs
    double retrain_learning_rate = 0.0; // 0 = train.learning_rate
    std::size_t augment_pairs = 0;  // K oracle pairs per retrained node
    bool retrain_output_head = true;
    bool reinit_each_round = false; // refit from fresh parameters each round
    // stop when accuracy improves less than this over plateau_window rounds;
    // 0 disables the plateau stop
    double plateau_epsilon = 0.001;
    std::size_t plateau_window = 3;
    double delta_holdout_fraction = 0.0; // tail share of labeled data used
                                         // for delta estimation (0 = all)
    AcquisitionMode mode = AcquisitionMode::Consensus;
    TrainConfig train;
    std::uint64_t seed = 0;
    std::string out_dir; // empty: keep everything in memory
};

struct RoundRecord {
    std::size_t round = 0;
    std::size_t annotated_count = 0;
    double annotated_fraction = 0.0;
    double accuracy = 0.0;
    double label_nll = 0.0;
    std::vector<double> per_node_nll; // by node index
    std::vector<double> delta;        // by node index; empty if disabled
    std::vector<NodeId> retrain_set;
    std::uint64_t oracle_cost = 0;
    double wall_clock_ms = 0.0; // reported separately; not part of the
                                // deterministic artifact set
};

struct LoopResult {
    std::vector<RoundRecord> records;
    GcpModel model;
};

// The closed loop: score the pool, select a batch, annotate, fit on all
// annotated data, estimate per-node deltas, retrain the top modules, then
// evaluate against the fixed test set. Round 1 starts from a uniformly
// random warm-start batch. With a synthetic oracle the whole run is a pure
// function of (config, data, seed). Writes per-round artifacts and metrics
// under out_dir when set; a failed round leaves earlier checkpoints intact.
LoopResult run_active_loop(const ConceptGraph& graph, const DatasetBundle& data,
                           Oracle& oracle, const LoopConfig& config);

// metrics.csv + metrics.json (deterministic payload, 17-significant-digit
// decimals) and timings.csv (wall clock, volatile by nature).
void emit_metrics(std::span<const RoundRecord> records,
                  const ConceptGraph& graph, const std::string& out_dir);

// --- architecture baselines ---

// Same nodes with every concept predicted from the root alone and the head
// consuming all concept distributions.
ConceptGraph flatten_to_cbm(const ConceptGraph& graph);

// Root and output only: a plain end-to-end classifier.
ConceptGraph label_only_graph(const ConceptGraph& graph);

// Hidden width for a label-only model whose parameter count best matches
// `target_params`.
std::size_t matched_hidden_dim(std::size_t target_params, std::size_t input_dim,
                               std::size_t latent_dim, std::size_t n_labels);

// --- theorem benchmarks ---

struct BenchConfig {
    std::uint64_t base_seed = 1;
    std::size_t seeds = 5;
    std::size_t n_train = 2000;
    std::size_t n_test = 2000;
    // desk-scale training shared by the three architectures
    TrainConfig train{.learning_rate = 1e-3,
                      .hidden_dim = 64,
                      .max_epochs = 100,
                      .latent_dim = 32};
    bool run_risk_ordering = true;
    bool run_top_b = true;
    bool run_scaling = true;
};

struct RiskOrderingRow {
    double gcp_nll = 0, cbm_nll = 0, mlp_nll = 0;
    double gcp_acc = 0, cbm_acc = 0, mlp_acc = 0;
};

struct TheoremReport {
    // risk ordering on the pinned task
    std::vector<RiskOrderingRow> per_seed;
    RiskOrderingRow mean;
    bool nll_ordered = false;      // gcp < cbm < mlp
    bool acc_ordered = false;      // gcp >= cbm >= mlp
    double acc_margin = 0.0;       // gcp - mlp, accuracy points

    // top-b selection vs exhaustive subset search
    std::size_t top_b_trials = 0;
    std::size_t top_b_agreements = 0;

    // delta_scores runtime scaling
    std::vector<std::pair<std::size_t, double>> n_timing; // (N, seconds)
    std::vector<std::pair<std::size_t, double>> v_timing; // (|V|, seconds)
    double n_slope = 0.0;
    double v_slope = 0.0;
};

TheoremReport bench_theorems(const BenchConfig& config);
std::string theorem_report_json(const TheoremReport& report);

} // namespace gcp
