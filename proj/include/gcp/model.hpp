#pragma once

#include "gcp/graph.hpp"
#include "gcp/rng.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gcp {

// Probabilities are clamped to this floor before any log.
inline constexpr double kProbFloor = 1e-12;

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 8;
    std::size_t hidden_dim = 256;
    double dropout_rate = 0.1;
    std::size_t max_epochs = 30;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    std::size_t latent_dim = 64; // width of the root representation
};

struct Sample {
    std::string id;
    std::vector<double> features;
};

// Ground truth for every non-root node: discrete concept values keyed by node
// id for the concept nodes, plus the final label (the output node's value).
struct AnnotatedSample {
    Sample sample;
    std::map<NodeId, int> concepts;
    int label = 0;
};

// Result of one forward pass: the root latent vector plus one probability
// vector per non-root node (indexed by dense node index; the root slot stays
// empty).
struct NodeOutputs {
    std::vector<double> root_latent;
    std::vector<std::vector<double>> distributions;
};

// Two-layer feed-forward module: in -> hidden (tanh, dropout) -> out.
// Weights are row-major flat arrays.
struct MlpBlock {
    std::size_t in_dim = 0, hidden_dim = 0, out_dim = 0;
    std::vector<double> w1, b1; // hidden x in, hidden
    std::vector<double> w2, b2; // out x hidden, out

    void resize(std::size_t in, std::size_t hidden, std::size_t out);
    void zero();
    std::size_t param_count() const {
        return w1.size() + b1.size() + w2.size() + b2.size();
    }
};

// The concept graph plus one predictor per node. The root block encodes raw
// features into a latent vector; every other block maps concatenated parent
// representations (ascending node index) to concept logits. The output node's
// block is the prediction head.
//
// A model is safe for concurrent read-only use (forward, embeddings, loss);
// fit() and retraining require exclusive access.
struct GcpModel {
    ConceptGraph graph;
    std::size_t input_dim = 0;
    TrainConfig config;
    std::vector<MlpBlock> blocks;      // by node index
    std::vector<double> loss_weights;  // by node index; root entry unused (0)

    std::size_t param_count() const;
    // latent width for the root, cardinality elsewhere
    std::size_t representation_width(std::size_t node) const;
    std::size_t block_input_width(std::size_t node) const;
};

// Seeds all parameters from config.seed. loss weights default to uniform over
// the non-root nodes.
GcpModel make_model(const ConceptGraph& graph, std::size_t input_dim,
                    const TrainConfig& config);

// Deterministic evaluation-mode pass (dropout disabled).
NodeOutputs forward(const GcpModel& model, std::span<const double> features);

// Final-label distribution; argmax (lowest index on ties) is the prediction.
std::vector<double> predict_label(const GcpModel& model,
                                  std::span<const double> features);
int argmax_lowest(std::span<const double> dist);

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> per_node; // unweighted NLL by node index
};

// total = sum_v lambda_v * nll_v over non-root nodes, output included.
LossBreakdown loss(const GcpModel& model, const NodeOutputs& outputs,
                   const AnnotatedSample& annotation);

enum class PropagationMode {
    // children consume one-hot ground-truth parent values (training objective)
    TeacherForced,
    // children consume predicted parent distributions (inference graph)
    Propagated,
};

struct ModelGrads {
    std::vector<MlpBlock> blocks; // same shapes as the model's blocks
    LossBreakdown loss;           // batch-mean loss the gradients belong to
};

// Mean-reduced analytic gradients of the weighted per-node objective over the
// batch, evaluation mode (no dropout). Frozen modules are not special-cased
// here; fit() decides what gets applied.
ModelGrads backward(const GcpModel& model,
                    std::span<const AnnotatedSample> batch,
                    PropagationMode mode = PropagationMode::TeacherForced);

// Batch-mean loss matching backward()'s objective; finite-difference oracle
// hook for the gradient tests.
LossBreakdown batch_loss(const GcpModel& model,
                         std::span<const AnnotatedSample> batch,
                         PropagationMode mode);

struct FitHistory {
    std::vector<double> total;                 // per epoch
    std::vector<std::vector<double>> per_node; // per epoch, by node index
};

// Teacher-forced minibatch training with decoupled weight decay (moment
// coefficients 0.9/0.999, epsilon 1e-8). Modules listed in `frozen` are left
// bit-identical. Deterministic given (seed, config, data order).
FitHistory fit(GcpModel& model, std::span<const AnnotatedSample> data,
               const TrainConfig& config, const std::vector<NodeId>& frozen = {});

// Flattened gradient of the node's pseudo-label cross-entropy with respect to
// the node's final linear layer only, under a propagated evaluation pass.
// Layout: [d x hidden weight block row-major, d bias entries].
std::vector<double> node_gradient_embedding(const GcpModel& model,
                                            const Sample& sample,
                                            const NodeId& node);
std::size_t gradient_embedding_width(const GcpModel& model, std::size_t node);

// Dense per-node annotation view: values[node index] with -1 at the root.
// Validates coverage and ranges (throws MissingAnnotation).
std::vector<int> annotation_values(const ConceptGraph& graph,
                                   const AnnotatedSample& annotated);

// Flat iteration over a block's four tensors, used by the optimizer,
// checkpointing and tests.
template <typename Fn>
void for_each_tensor(MlpBlock& b, Fn&& fn) {
    fn(b.w1);
    fn(b.b1);
    fn(b.w2);
    fn(b.b2);
}
template <typename Fn>
void for_each_tensor(const MlpBlock& b, Fn&& fn) {
    fn(b.w1);
    fn(b.b1);
    fn(b.w2);
    fn(b.b2);
}

} // namespace gcp
