#include "gcp/counterfactual.hpp"

#include "gcp/errors.hpp"
#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace gcp {

namespace {

namespace k = gcp::kernels;

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0); }

// Mirrors the evaluation-mode forward of one node (same kernel sequence), so
// recomputed descendants are indistinguishable from a full forward pass.
void recompute_node(const GcpModel& model, std::size_t j, NodeOutputs& out) {
    const auto& g = model.graph;
    const MlpBlock& b = model.blocks[j];

    std::vector<double> input;
    input.reserve(b.in_dim);
    for (std::size_t p : g.parents[j]) {
        if (g.is_root(p)) {
            input.insert(input.end(), out.root_latent.begin(),
                         out.root_latent.end());
        } else {
            input.insert(input.end(), out.distributions[p].begin(),
                         out.distributions[p].end());
        }
    }

    std::vector<double> hidden(b.hidden_dim);
    k::affine(b.w1.data(), b.b1.data(), input.data(), hidden.data(),
              b.hidden_dim, b.in_dim);
    for (double& v : hidden) v = std::tanh(v);
    std::vector<double> logits(b.out_dim);
    k::affine(b.w2.data(), b.b2.data(), hidden.data(), logits.data(), b.out_dim,
              b.hidden_dim);

    auto& dist = out.distributions[j];
    dist.resize(b.out_dim);
    const double m = k::reduce_max(logits.data(), logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        dist[i] = std::exp(logits[i] - m);
    }
    const double s = k::reduce_sum(dist.data(), dist.size());
    k::scale(1.0 / s, dist.data(), dist.size());
}

int validated_label(const GcpModel& model, const AnnotatedSample& annotated) {
    const int label = annotated.label;
    const std::size_t card = model.graph.spec(model.graph.output).cardinality;
    if (label < 0 || std::size_t(label) >= card) {
        throw MissingAnnotation("label out of range on '" + annotated.sample.id +
                                "'");
    }
    return label;
}

double output_loss(const GcpModel& model, const NodeOutputs& out, int label) {
    return -std::log(clamp_prob(
        out.distributions[model.graph.output][static_cast<std::size_t>(label)]));
}

// interveneable (non-root) parents of a node
std::vector<std::size_t> concept_parents(const ConceptGraph& g, std::size_t j) {
    std::vector<std::size_t> out;
    for (std::size_t p : g.parents[j]) {
        if (!g.is_root(p)) out.push_back(p);
    }
    return out;
}

InterventionSet intervention_from_indices(const ConceptGraph& graph,
                                          const std::vector<int>& values,
                                          std::vector<std::size_t> nodes) {
    InterventionSet s;
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    for (std::size_t i : nodes) s.truth[i] = values[i];
    s.nodes = std::move(nodes);
    (void)graph;
    return s;
}

} // namespace

InterventionSet make_intervention(const ConceptGraph& graph,
                                  const AnnotatedSample& annotated,
                                  std::span<const NodeId> nodes) {
    InterventionSet s;
    for (const auto& id : nodes) {
        const std::size_t j = graph.index_of(id);
        if (graph.is_root(j)) {
            throw InvalidNode("root cannot be intervened on");
        }
        int value;
        if (graph.is_output(j)) {
            value = annotated.label;
        } else {
            auto it = annotated.concepts.find(id);
            if (it == annotated.concepts.end()) {
                throw MissingTruth("no ground truth for '" + id + "'");
            }
            value = it->second;
        }
        if (value < 0 || std::size_t(value) >= graph.spec(j).cardinality) {
            throw MissingTruth("ground truth out of range at '" + id + "'");
        }
        s.nodes.push_back(j);
        s.truth[j] = value;
    }
    std::sort(s.nodes.begin(), s.nodes.end());
    s.nodes.erase(std::unique(s.nodes.begin(), s.nodes.end()), s.nodes.end());
    return s;
}

CounterfactualResult rerun_with_base(const GcpModel& model,
                                     const AnnotatedSample& annotated,
                                     const InterventionSet& intervention,
                                     const NodeOutputs& base) {
    const auto& g = model.graph;
    CounterfactualResult result;
    result.outputs = base;

    for (std::size_t j : intervention.nodes) {
        if (j >= g.size() || g.is_root(j)) {
            throw InvalidNode("intervention on node index " + std::to_string(j));
        }
        auto it = intervention.truth.find(j);
        if (it == intervention.truth.end()) {
            throw MissingTruth("no value for '" + g.spec(j).id + "'");
        }
        const int v = it->second;
        if (v < 0 || std::size_t(v) >= g.spec(j).cardinality) {
            throw MissingTruth("value out of range at '" + g.spec(j).id + "'");
        }
        auto& dist = result.outputs.distributions[j];
        dist.assign(g.spec(j).cardinality, 0.0);
        dist[static_cast<std::size_t>(v)] = 1.0;
    }

    for (std::size_t j : g.descendants(intervention.nodes)) {
        recompute_node(model, j, result.outputs);
    }
    result.final_loss =
        output_loss(model, result.outputs, validated_label(model, annotated));
    return result;
}

CounterfactualResult rerun(const GcpModel& model,
                           const AnnotatedSample& annotated,
                           const InterventionSet& intervention) {
    const NodeOutputs base = forward(model, annotated.sample.features);
    return rerun_with_base(model, annotated, intervention, base);
}

std::pair<double, double> parent_corrected_losses(
    const GcpModel& model, const AnnotatedSample& annotated,
    const NodeId& node) {
    const auto& g = model.graph;
    const std::size_t j = g.index_of(node);
    if (g.is_root(j)) throw InvalidNode("root has no correction");

    const auto values = annotation_values(g, annotated);
    const NodeOutputs base = forward(model, annotated.sample.features);

    const auto parents = concept_parents(g, j);
    double parent_loss;
    if (parents.empty()) {
        parent_loss = output_loss(model, base, values[g.output]);
    } else {
        parent_loss = rerun_with_base(model, annotated,
                                      intervention_from_indices(g, values, parents),
                                      base)
                          .final_loss;
    }
    auto with_node = parents;
    with_node.push_back(j);
    const double corrected =
        rerun_with_base(model, annotated,
                        intervention_from_indices(g, values, with_node), base)
            .final_loss;
    return {parent_loss, corrected};
}

DeltaReport delta_scores(const GcpModel& model,
                         std::span<const AnnotatedSample> data,
                         bool keep_trace) {
    if (data.empty()) throw EmptyDataset("delta_scores requires data");
    const auto& g = model.graph;

    DeltaReport report;
    report.delta.assign(g.size(), 0.0);
    report.dataset_size = data.size();
    if (keep_trace) report.trace.emplace();

    for (const auto& annotated : data) {
        const auto values = annotation_values(g, annotated);
        const NodeOutputs base = forward(model, annotated.sample.features);
        const double base_loss = output_loss(model, base, values[g.output]);

        std::vector<std::pair<double, double>> row(g.size(), {0.0, 0.0});
        for (std::size_t j : g.topo_order) {
            if (g.is_root(j)) continue;
            const auto parents = concept_parents(g, j);
            const double parent_loss =
                parents.empty()
                    ? base_loss
                    : rerun_with_base(model, annotated,
                                      intervention_from_indices(g, values, parents),
                                      base)
                          .final_loss;
            auto with_node = parents;
            with_node.push_back(j);
            const double corrected =
                rerun_with_base(model, annotated,
                                intervention_from_indices(g, values, with_node),
                                base)
                    .final_loss;
            report.delta[j] += parent_loss - corrected;
            if (keep_trace) row[j] = {parent_loss, corrected};
        }
        if (keep_trace) report.trace->push_back(std::move(row));
    }
    k::scale(1.0 / double(data.size()), report.delta.data(), report.delta.size());
    return report;
}

std::vector<NodeId> select_retrain_set(const ConceptGraph& graph,
                                       std::span<const double> delta,
                                       std::size_t b, bool include_output) {
    if (delta.size() != graph.size()) {
        throw LengthMismatch("delta vector width");
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < graph.size(); ++i) {
        if (graph.is_root(i)) continue;
        if (graph.is_output(i) && !include_output) continue;
        if (delta[i] > 0.0) candidates.push_back(i);
    }
    std::sort(candidates.begin(), candidates.end(),
              [&](std::size_t a, std::size_t c) {
                  if (delta[a] != delta[c]) return delta[a] > delta[c];
                  return graph.spec(a).id < graph.spec(c).id;
              });
    if (candidates.size() > b) candidates.resize(b);

    std::vector<NodeId> out;
    out.reserve(candidates.size());
    for (std::size_t i : candidates) out.push_back(graph.spec(i).id);
    return out;
}

std::vector<ConceptPair> augment_node_data(Oracle& oracle,
                                           const ConceptGraph& graph,
                                           const NodeId& node, std::size_t count,
                                           std::size_t retry_cap) {
    if (count == 0) return {};
    const std::size_t j = graph.index_of(node);
    if (graph.is_root(j)) throw InvalidNode("root takes no supervision pairs");

    std::vector<std::size_t> parent_cards;
    for (std::size_t p : graph.parents[j]) {
        if (!graph.is_root(p)) parent_cards.push_back(graph.spec(p).cardinality);
    }
    auto valid = [&](const ConceptPair& pair) {
        if (pair.parent_values.size() != parent_cards.size()) return false;
        for (std::size_t i = 0; i < parent_cards.size(); ++i) {
            if (pair.parent_values[i] < 0 ||
                std::size_t(pair.parent_values[i]) >= parent_cards[i]) {
                return false;
            }
        }
        return pair.value >= 0 && std::size_t(pair.value) < graph.spec(j).cardinality;
    };

    std::vector<ConceptPair> accepted;
    std::size_t attempts = 0;
    std::size_t want = count;
    while (accepted.size() < count) {
        const auto batch = oracle.generate_pairs(graph, node, want);
        for (const auto& pair : batch) {
            if (valid(pair) && accepted.size() < count) accepted.push_back(pair);
        }
        if (accepted.size() >= count) break;
        if (attempts++ >= retry_cap) {
            throw MalformedOracleOutput("node '" + node + "': " +
                                        std::to_string(count - accepted.size()) +
                                        " pairs still invalid after retries");
        }
        want = count - accepted.size();
    }
    return accepted;
}

namespace {

struct TrainRow {
    std::vector<double> input;
    int target = 0;
};

// Minibatch cross-entropy training of a single block on fixed input rows.
void train_block(MlpBlock& block, const std::vector<TrainRow>& primary,
                 const std::vector<TrainRow>& augmented,
                 const TrainConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    MlpBlock mom = block, vel = block, grads = block;
    mom.zero();
    vel.zero();
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;

    std::vector<std::size_t> order_a(primary.size()), order_g(augmented.size());
    for (std::size_t i = 0; i < order_a.size(); ++i) order_a[i] = i;
    for (std::size_t i = 0; i < order_g.size(); ++i) order_g[i] = i;

    std::vector<double> hidden(block.hidden_dim), mask(block.hidden_dim);
    std::vector<double> tanh_out(block.hidden_dim), logits(block.out_dim);
    std::vector<double> dlogits(block.out_dim), dhidden(block.hidden_dim);

    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        rng.shuffle(order_a);
        rng.shuffle(order_g);
        // alternate the two sources when both exist (cycling the shorter)
        std::vector<const TrainRow*> rows;
        if (augmented.empty() || primary.empty()) {
            const auto& only = primary.empty() ? augmented : primary;
            const auto& ord = primary.empty() ? order_g : order_a;
            for (std::size_t i : ord) rows.push_back(&only[i]);
        } else {
            const std::size_t half = std::max(primary.size(), augmented.size());
            for (std::size_t i = 0; i < half; ++i) {
                rows.push_back(&primary[order_a[i % order_a.size()]]);
                rows.push_back(&augmented[order_g[i % order_g.size()]]);
            }
        }

        for (std::size_t start = 0; start < rows.size();
             start += config.batch_size) {
            const std::size_t stop =
                std::min(rows.size(), start + config.batch_size);
            grads.zero();
            for (std::size_t r = start; r < stop; ++r) {
                const TrainRow& row = *rows[r];
                k::affine(block.w1.data(), block.b1.data(), row.input.data(),
                          tanh_out.data(), block.hidden_dim, block.in_dim);
                for (double& v : tanh_out) v = std::tanh(v);
                const bool use_dropout = config.dropout_rate > 0.0;
                const double keep = 1.0 - config.dropout_rate;
                for (std::size_t i = 0; i < block.hidden_dim; ++i) {
                    mask[i] = use_dropout
                                  ? (rng.bernoulli(keep) ? 1.0 / keep : 0.0)
                                  : 1.0;
                    hidden[i] = tanh_out[i] * mask[i];
                }
                k::affine(block.w2.data(), block.b2.data(), hidden.data(),
                          logits.data(), block.out_dim, block.hidden_dim);
                const double m = k::reduce_max(logits.data(), logits.size());
                for (std::size_t i = 0; i < logits.size(); ++i) {
                    dlogits[i] = std::exp(logits[i] - m);
                }
                const double s = k::reduce_sum(dlogits.data(), dlogits.size());
                k::scale(1.0 / s, dlogits.data(), dlogits.size());
                dlogits[static_cast<std::size_t>(row.target)] -= 1.0;

                k::rank1_bias_accum(grads.w2.data(), grads.b2.data(),
                                    dlogits.data(), hidden.data(), block.out_dim,
                                    block.hidden_dim);
                std::fill(dhidden.begin(), dhidden.end(), 0.0);
                k::matvec_t_accum(block.w2.data(), dlogits.data(), dhidden.data(),
                                  block.out_dim, block.hidden_dim);
                for (std::size_t i = 0; i < block.hidden_dim; ++i) {
                    dhidden[i] *= mask[i] * (1.0 - tanh_out[i] * tanh_out[i]);
                }
                k::rank1_bias_accum(grads.w1.data(), grads.b1.data(),
                                    dhidden.data(), row.input.data(),
                                    block.hidden_dim, block.in_dim);
            }
            const double inv_n = 1.0 / double(stop - start);
            for_each_tensor(grads, [&](std::vector<double>& t) {
                k::scale(inv_n, t.data(), t.size());
            });

            ++step;
            const double bc1 = 1.0 - std::pow(beta1, double(step));
            const double bc2 = 1.0 - std::pow(beta2, double(step));
            auto update = [&](std::vector<double>& w, std::vector<double>& m2,
                              std::vector<double>& v2,
                              const std::vector<double>& g2) {
                k::adamw_update(w.data(), m2.data(), v2.data(), g2.data(),
                                w.size(), config.learning_rate, beta1, beta2,
                                eps, config.weight_decay, bc1, bc2);
            };
            update(block.w1, mom.w1, vel.w1, grads.w1);
            update(block.b1, mom.b1, vel.b1, grads.b1);
            update(block.w2, mom.w2, vel.w2, grads.w2);
            update(block.b2, mom.b2, vel.b2, grads.b2);
        }
    }
}

} // namespace

void retrain_submodules(
    GcpModel& model, std::span<const NodeId> retrain_set,
    std::span<const AnnotatedSample> data,
    const std::map<NodeId, std::vector<ConceptPair>>& augmented,
    const TrainConfig& config) {
    if (retrain_set.empty()) return;
    if (data.empty()) throw EmptyDataset("retraining requires annotated data");
    const auto& g = model.graph;

    // dense annotations and, for root-adjacent nodes, cached root latents
    std::vector<std::vector<int>> values;
    values.reserve(data.size());
    for (const auto& s : data) values.push_back(annotation_values(g, s));

    std::vector<std::vector<double>> latents;
    bool need_latents = false;
    for (const auto& id : retrain_set) {
        const std::size_t j = g.index_of(id);
        for (std::size_t p : g.parents[j]) need_latents |= g.is_root(p);
    }
    if (need_latents) {
        latents.reserve(data.size());
        for (const auto& s : data) {
            latents.push_back(forward(model, s.sample.features).root_latent);
        }
    }

    for (const auto& id : retrain_set) {
        const std::size_t j = g.index_of(id);
        if (g.is_root(j)) throw InvalidNode("cannot retrain the root encoder");

        const bool has_root_parent =
            std::any_of(g.parents[j].begin(), g.parents[j].end(),
                        [&](std::size_t p) { return g.is_root(p); });

        std::vector<TrainRow> primary;
        primary.reserve(data.size());
        for (std::size_t s = 0; s < data.size(); ++s) {
            TrainRow row;
            row.target = values[s][j];
            for (std::size_t p : g.parents[j]) {
                if (g.is_root(p)) {
                    row.input.insert(row.input.end(), latents[s].begin(),
                                     latents[s].end());
                } else {
                    const std::size_t base = row.input.size();
                    row.input.resize(base + g.spec(p).cardinality, 0.0);
                    row.input[base + std::size_t(values[s][p])] = 1.0;
                }
            }
            primary.push_back(std::move(row));
        }

        std::vector<TrainRow> extra;
        auto it = augmented.find(id);
        if (it != augmented.end() && !has_root_parent) {
            extra.reserve(it->second.size());
            for (const auto& pair : it->second) {
                TrainRow row;
                row.target = pair.value;
                std::size_t pi = 0;
                for (std::size_t p : g.parents[j]) {
                    const std::size_t base = row.input.size();
                    row.input.resize(base + g.spec(p).cardinality, 0.0);
                    row.input[base + std::size_t(pair.parent_values[pi++])] = 1.0;
                }
                extra.push_back(std::move(row));
            }
        }
        train_block(model.blocks[j], primary, extra, config,
                    config.seed ^ (0x5151u + j));
    }
}

} // namespace gcp
