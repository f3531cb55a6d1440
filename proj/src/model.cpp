#include "gcp/model.hpp"

#include "gcp/errors.hpp"
#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace gcp {

namespace {

namespace k = gcp::kernels;

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0); }

void softmax(std::span<const double> logits, std::vector<double>& p) {
    p.resize(logits.size());
    const double m = k::reduce_max(logits.data(), logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - m);
    const double s = k::reduce_sum(p.data(), p.size());
    k::scale(1.0 / s, p.data(), p.size());
}

struct BlockTrace {
    std::vector<double> input;
    std::vector<double> tanh_out; // pre-dropout activation
    std::vector<double> hidden;   // post-dropout, feeds the second layer
    std::vector<double> mask;     // empty in evaluation mode
    std::vector<double> logits;   // raw second-layer output
    std::vector<double> dist;     // softmax(logits); empty for the root block
};

void block_forward(const MlpBlock& b, BlockTrace& t, Rng* rng,
                   double dropout_rate) {
    t.tanh_out.resize(b.hidden_dim);
    k::affine(b.w1.data(), b.b1.data(), t.input.data(), t.tanh_out.data(),
              b.hidden_dim, b.in_dim);
    for (double& v : t.tanh_out) v = std::tanh(v);
    if (rng != nullptr && dropout_rate > 0.0) {
        const double keep = 1.0 - dropout_rate;
        t.mask.resize(b.hidden_dim);
        t.hidden.resize(b.hidden_dim);
        for (std::size_t i = 0; i < b.hidden_dim; ++i) {
            t.mask[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
            t.hidden[i] = t.tanh_out[i] * t.mask[i];
        }
    } else {
        t.mask.clear();
        t.hidden = t.tanh_out;
    }
    t.logits.resize(b.out_dim);
    k::affine(b.w2.data(), b.b2.data(), t.hidden.data(), t.logits.data(),
              b.out_dim, b.hidden_dim);
}

// Backpropagates d(loss)/d(logits) through one block, accumulating parameter
// gradients; optionally produces d(loss)/d(input).
void block_backward(const MlpBlock& b, const BlockTrace& t,
                    std::span<const double> dout, MlpBlock& grads,
                    std::vector<double>* din, std::vector<double>& scratch) {
    k::rank1_bias_accum(grads.w2.data(), grads.b2.data(), dout.data(),
                        t.hidden.data(), b.out_dim, b.hidden_dim);
    scratch.assign(b.hidden_dim, 0.0);
    k::matvec_t_accum(b.w2.data(), dout.data(), scratch.data(), b.out_dim,
                      b.hidden_dim);
    for (std::size_t i = 0; i < b.hidden_dim; ++i) {
        const double m = t.mask.empty() ? 1.0 : t.mask[i];
        const double tv = t.tanh_out[i];
        scratch[i] *= m * (1.0 - tv * tv);
    }
    k::rank1_bias_accum(grads.w1.data(), grads.b1.data(), scratch.data(),
                        t.input.data(), b.hidden_dim, b.in_dim);
    if (din != nullptr) {
        din->assign(b.in_dim, 0.0);
        k::matvec_t_accum(b.w1.data(), scratch.data(), din->data(),
                          b.hidden_dim, b.in_dim);
    }
}

struct Workspace {
    std::vector<BlockTrace> traces; // by node index
    std::vector<double> scratch;
    std::vector<double> din;
};

// One traced pass. `values` must be non-null in teacher-forced mode; `rng`
// non-null enables dropout.
void forward_traced(const GcpModel& model, std::span<const double> features,
                    PropagationMode mode, const std::vector<int>* values,
                    Rng* rng, double dropout_rate, Workspace& ws) {
    const auto& g = model.graph;
    if (features.size() != model.input_dim) {
        std::ostringstream os;
        os << "feature width " << features.size() << ", expected "
           << model.input_dim;
        throw DimensionMismatch(os.str());
    }
    ws.traces.resize(g.size());

    BlockTrace& root_trace = ws.traces[g.root];
    root_trace.input.assign(features.begin(), features.end());
    block_forward(model.blocks[g.root], root_trace, rng, dropout_rate);
    root_trace.dist.clear();

    for (std::size_t j : g.topo_order) {
        if (g.is_root(j)) continue;
        BlockTrace& t = ws.traces[j];
        t.input.clear();
        t.input.reserve(model.block_input_width(j));
        for (std::size_t p : g.parents[j]) {
            if (g.is_root(p)) {
                const auto& h0 = ws.traces[p].logits;
                t.input.insert(t.input.end(), h0.begin(), h0.end());
            } else if (mode == PropagationMode::TeacherForced) {
                const std::size_t d = g.spec(p).cardinality;
                const std::size_t base = t.input.size();
                t.input.resize(base + d, 0.0);
                t.input[base + static_cast<std::size_t>((*values)[p])] = 1.0;
            } else {
                const auto& dist = ws.traces[p].dist;
                t.input.insert(t.input.end(), dist.begin(), dist.end());
            }
        }
        block_forward(model.blocks[j], t, rng, dropout_rate);
        softmax(t.logits, t.dist);
    }
}

NodeOutputs outputs_from_traces(const GcpModel& model, const Workspace& ws) {
    NodeOutputs out;
    out.root_latent = ws.traces[model.graph.root].logits;
    out.distributions.resize(model.graph.size());
    for (std::size_t i = 0; i < model.graph.size(); ++i) {
        if (!model.graph.is_root(i)) out.distributions[i] = ws.traces[i].dist;
    }
    return out;
}

ModelGrads zero_grads(const GcpModel& model) {
    ModelGrads grads;
    grads.blocks = model.blocks;
    for (auto& b : grads.blocks) b.zero();
    grads.loss.per_node.assign(model.graph.size(), 0.0);
    return grads;
}

// Accumulates one teacher-forced sample into `grads` (unscaled).
void accumulate_teacher_forced(const GcpModel& model,
                               const std::vector<int>& values, Workspace& ws,
                               ModelGrads& grads) {
    const auto& g = model.graph;
    std::vector<double> dh0(model.config.latent_dim, 0.0);
    std::vector<double> dlogits;
    bool root_touched = false;

    for (std::size_t j : g.topo_order) {
        if (g.is_root(j)) continue;
        const BlockTrace& t = ws.traces[j];
        const int y = values[j];
        const double nll = -std::log(clamp_prob(t.dist[static_cast<std::size_t>(y)]));
        grads.loss.per_node[j] += nll;
        const double lambda = model.loss_weights[j];
        if (lambda == 0.0) continue; // no loss term: exactly zero gradient
        grads.loss.total += lambda * nll;

        dlogits = t.dist;
        dlogits[static_cast<std::size_t>(y)] -= 1.0;
        k::scale(lambda, dlogits.data(), dlogits.size());

        const bool needs_din =
            std::find(g.parents[j].begin(), g.parents[j].end(), g.root) !=
            g.parents[j].end();
        block_backward(model.blocks[j], t, dlogits, grads.blocks[j],
                       needs_din ? &ws.din : nullptr, ws.scratch);
        if (needs_din) {
            // pick the root slice out of the concatenated input gradient
            std::size_t offset = 0;
            for (std::size_t p : g.parents[j]) {
                const std::size_t w = model.representation_width(p);
                if (g.is_root(p)) {
                    k::axpy(1.0, ws.din.data() + offset, dh0.data(), w);
                    root_touched = true;
                }
                offset += w;
            }
        }
    }
    if (root_touched) {
        block_backward(model.blocks[g.root], ws.traces[g.root], dh0,
                       grads.blocks[g.root], nullptr, ws.scratch);
    }
}

// Accumulates one propagated-mode sample into `grads` (unscaled).
void accumulate_propagated(const GcpModel& model, const std::vector<int>& values,
                           Workspace& ws, ModelGrads& grads) {
    const auto& g = model.graph;
    std::vector<std::vector<double>> drep(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        drep[i].assign(model.representation_width(i), 0.0);
    }
    std::vector<double> dlogits;

    for (std::size_t i : g.topo_order) {
        if (g.is_root(i)) continue;
        const int y = values[i];
        const double nll =
            -std::log(clamp_prob(ws.traces[i].dist[static_cast<std::size_t>(y)]));
        grads.loss.per_node[i] += nll;
        grads.loss.total += model.loss_weights[i] * nll;
    }

    for (auto it = g.topo_order.rbegin(); it != g.topo_order.rend(); ++it) {
        const std::size_t j = *it;
        if (g.is_root(j)) continue;
        const BlockTrace& t = ws.traces[j];
        auto& dp = drep[j];
        const double lambda = model.loss_weights[j];
        if (lambda != 0.0) {
            const std::size_t y = static_cast<std::size_t>(values[j]);
            dp[y] += lambda * (-1.0 / clamp_prob(t.dist[y]));
        }
        // softmax vjp: dl_k = p_k (dp_k - <dp, p>)
        dlogits.resize(dp.size());
        const double inner = k::dot(dp.data(), t.dist.data(), dp.size());
        for (std::size_t a = 0; a < dp.size(); ++a) {
            dlogits[a] = t.dist[a] * (dp[a] - inner);
        }
        block_backward(model.blocks[j], t, dlogits, grads.blocks[j], &ws.din,
                       ws.scratch);
        std::size_t offset = 0;
        for (std::size_t p : g.parents[j]) {
            const std::size_t w = model.representation_width(p);
            k::axpy(1.0, ws.din.data() + offset, drep[p].data(), w);
            offset += w;
        }
    }
    block_backward(model.blocks[g.root], ws.traces[g.root], drep[g.root],
                   grads.blocks[g.root], nullptr, ws.scratch);
}

void scale_grads(ModelGrads& grads, double factor) {
    for (auto& b : grads.blocks) {
        for_each_tensor(b, [&](std::vector<double>& tns) {
            k::scale(factor, tns.data(), tns.size());
        });
    }
    grads.loss.total *= factor;
    k::scale(factor, grads.loss.per_node.data(), grads.loss.per_node.size());
}

void check_finite(const GcpModel& model) {
    for (const auto& b : model.blocks) {
        bool ok = true;
        for_each_tensor(b, [&](const std::vector<double>& tns) {
            for (double v : tns) ok = ok && std::isfinite(v);
        });
        if (!ok) throw Error("non-finite parameter after update");
    }
}

} // namespace

void MlpBlock::resize(std::size_t in, std::size_t hidden, std::size_t out) {
    in_dim = in;
    hidden_dim = hidden;
    out_dim = out;
    w1.assign(hidden * in, 0.0);
    b1.assign(hidden, 0.0);
    w2.assign(out * hidden, 0.0);
    b2.assign(out, 0.0);
}

void MlpBlock::zero() {
    std::fill(w1.begin(), w1.end(), 0.0);
    std::fill(b1.begin(), b1.end(), 0.0);
    std::fill(w2.begin(), w2.end(), 0.0);
    std::fill(b2.begin(), b2.end(), 0.0);
}

std::size_t GcpModel::param_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.param_count();
    return n;
}

std::size_t GcpModel::representation_width(std::size_t node) const {
    return graph.is_root(node) ? config.latent_dim : graph.spec(node).cardinality;
}

std::size_t GcpModel::block_input_width(std::size_t node) const {
    if (graph.is_root(node)) return input_dim;
    std::size_t w = 0;
    for (std::size_t p : graph.parents[node]) w += representation_width(p);
    return w;
}

GcpModel make_model(const ConceptGraph& graph, std::size_t input_dim,
                    const TrainConfig& config) {
    if (input_dim == 0) throw DimensionMismatch("input_dim must be positive");
    GcpModel m;
    m.graph = graph;
    m.input_dim = input_dim;
    m.config = config;
    m.blocks.resize(graph.size());
    m.loss_weights.assign(graph.size(), 1.0 / double(graph.size() - 1));
    m.loss_weights[graph.root] = 0.0;

    Rng rng(config.seed);
    auto glorot = [&](std::vector<double>& w, std::size_t fan_in,
                      std::size_t fan_out) {
        const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
        for (double& v : w) v = rng.uniform(-limit, limit);
    };
    for (std::size_t i = 0; i < graph.size(); ++i) {
        const std::size_t out =
            graph.is_root(i) ? config.latent_dim : graph.spec(i).cardinality;
        m.blocks[i].resize(m.block_input_width(i), config.hidden_dim, out);
        glorot(m.blocks[i].w1, m.blocks[i].in_dim, m.blocks[i].hidden_dim);
        glorot(m.blocks[i].w2, m.blocks[i].hidden_dim, m.blocks[i].out_dim);
    }
    return m;
}

NodeOutputs forward(const GcpModel& model, std::span<const double> features) {
    Workspace ws;
    forward_traced(model, features, PropagationMode::Propagated, nullptr,
                   nullptr, 0.0, ws);
    return outputs_from_traces(model, ws);
}

int argmax_lowest(std::span<const double> dist) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.size(); ++i) {
        if (dist[i] > dist[best]) best = i;
    }
    return static_cast<int>(best);
}

std::vector<double> predict_label(const GcpModel& model,
                                  std::span<const double> features) {
    return forward(model, features).distributions[model.graph.output];
}

std::vector<int> annotation_values(const ConceptGraph& graph,
                                   const AnnotatedSample& annotated) {
    std::vector<int> values(graph.size(), -1);
    for (std::size_t i = 0; i < graph.size(); ++i) {
        if (graph.is_root(i)) continue;
        int v;
        if (graph.is_output(i)) {
            v = annotated.label;
        } else {
            auto it = annotated.concepts.find(graph.spec(i).id);
            if (it == annotated.concepts.end()) {
                throw MissingAnnotation("sample '" + annotated.sample.id +
                                        "' lacks node '" + graph.spec(i).id + "'");
            }
            v = it->second;
        }
        if (v < 0 || static_cast<std::size_t>(v) >= graph.spec(i).cardinality) {
            throw MissingAnnotation("sample '" + annotated.sample.id +
                                    "' value out of range at '" +
                                    graph.spec(i).id + "'");
        }
        values[i] = v;
    }
    return values;
}

LossBreakdown loss(const GcpModel& model, const NodeOutputs& outputs,
                   const AnnotatedSample& annotation) {
    const auto values = annotation_values(model.graph, annotation);
    LossBreakdown out;
    out.per_node.assign(model.graph.size(), 0.0);
    for (std::size_t i = 0; i < model.graph.size(); ++i) {
        if (model.graph.is_root(i)) continue;
        const auto& dist = outputs.distributions[i];
        if (dist.size() != model.graph.spec(i).cardinality) {
            throw DimensionMismatch("distribution width at '" +
                                    model.graph.spec(i).id + "'");
        }
        const double nll =
            -std::log(clamp_prob(dist[static_cast<std::size_t>(values[i])]));
        out.per_node[i] = nll;
        out.total += model.loss_weights[i] * nll;
    }
    return out;
}

ModelGrads backward(const GcpModel& model,
                    std::span<const AnnotatedSample> batch,
                    PropagationMode mode) {
    if (batch.empty()) throw EmptyDataset("backward over empty batch");
    ModelGrads grads = zero_grads(model);
    Workspace ws;
    for (const auto& annotated : batch) {
        const auto values = annotation_values(model.graph, annotated);
        forward_traced(model, annotated.sample.features, mode, &values, nullptr,
                       0.0, ws);
        if (mode == PropagationMode::TeacherForced) {
            accumulate_teacher_forced(model, values, ws, grads);
        } else {
            accumulate_propagated(model, values, ws, grads);
        }
    }
    scale_grads(grads, 1.0 / double(batch.size()));
    return grads;
}

LossBreakdown batch_loss(const GcpModel& model,
                         std::span<const AnnotatedSample> batch,
                         PropagationMode mode) {
    if (batch.empty()) throw EmptyDataset("loss over empty batch");
    LossBreakdown out;
    out.per_node.assign(model.graph.size(), 0.0);
    Workspace ws;
    for (const auto& annotated : batch) {
        const auto values = annotation_values(model.graph, annotated);
        forward_traced(model, annotated.sample.features, mode, &values, nullptr,
                       0.0, ws);
        for (std::size_t i = 0; i < model.graph.size(); ++i) {
            if (model.graph.is_root(i)) continue;
            const double nll = -std::log(clamp_prob(
                ws.traces[i].dist[static_cast<std::size_t>(values[i])]));
            out.per_node[i] += nll;
            out.total += model.loss_weights[i] * nll;
        }
    }
    out.total /= double(batch.size());
    k::scale(1.0 / double(batch.size()), out.per_node.data(),
             out.per_node.size());
    return out;
}

FitHistory fit(GcpModel& model, std::span<const AnnotatedSample> data,
               const TrainConfig& config, const std::vector<NodeId>& frozen) {
    if (data.empty()) throw EmptyDataset("fit requires data");
    for (double lw : model.loss_weights) {
        if (lw < 0.0) throw Error("negative loss weight");
    }
    std::set<std::size_t> frozen_idx;
    for (const auto& id : frozen) frozen_idx.insert(model.graph.index_of(id));

    std::vector<std::vector<int>> values;
    values.reserve(data.size());
    for (const auto& s : data) values.push_back(annotation_values(model.graph, s));

    Rng rng(config.seed);
    std::vector<MlpBlock> mom = model.blocks, vel = model.blocks;
    for (auto& b : mom) b.zero();
    for (auto& b : vel) b.zero();

    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;

    FitHistory history;
    Workspace ws;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_total = 0.0;
        std::vector<double> epoch_node(model.graph.size(), 0.0);

        for (std::size_t start = 0; start < order.size();
             start += config.batch_size) {
            const std::size_t stop =
                std::min(order.size(), start + config.batch_size);
            ModelGrads grads = zero_grads(model);
            for (std::size_t b = start; b < stop; ++b) {
                const auto& annotated = data[order[b]];
                forward_traced(model, annotated.sample.features,
                               PropagationMode::TeacherForced, &values[order[b]],
                               &rng, config.dropout_rate, ws);
                accumulate_teacher_forced(model, values[order[b]], ws, grads);
            }
            const double n = double(stop - start);
            epoch_total += grads.loss.total;
            k::axpy(1.0, grads.loss.per_node.data(), epoch_node.data(),
                    epoch_node.size());
            scale_grads(grads, 1.0 / n);

            ++step;
            const double bc1 = 1.0 - std::pow(beta1, double(step));
            const double bc2 = 1.0 - std::pow(beta2, double(step));
            for (std::size_t i = 0; i < model.blocks.size(); ++i) {
                if (frozen_idx.count(i)) continue;
                auto update = [&](std::vector<double>& w, std::vector<double>& m,
                                  std::vector<double>& v,
                                  const std::vector<double>& g) {
                    k::adamw_update(w.data(), m.data(), v.data(), g.data(),
                                    w.size(), config.learning_rate, beta1, beta2,
                                    eps, config.weight_decay, bc1, bc2);
                };
                update(model.blocks[i].w1, mom[i].w1, vel[i].w1, grads.blocks[i].w1);
                update(model.blocks[i].b1, mom[i].b1, vel[i].b1, grads.blocks[i].b1);
                update(model.blocks[i].w2, mom[i].w2, vel[i].w2, grads.blocks[i].w2);
                update(model.blocks[i].b2, mom[i].b2, vel[i].b2, grads.blocks[i].b2);
            }
        }
        check_finite(model);
        history.total.push_back(epoch_total / double(data.size()));
        k::scale(1.0 / double(data.size()), epoch_node.data(), epoch_node.size());
        history.per_node.push_back(std::move(epoch_node));
    }
    return history;
}

std::size_t gradient_embedding_width(const GcpModel& model, std::size_t node) {
    const auto& b = model.blocks[node];
    return b.out_dim * b.hidden_dim + b.out_dim;
}

std::vector<double> node_gradient_embedding(const GcpModel& model,
                                            const Sample& sample,
                                            const NodeId& node) {
    const std::size_t j = model.graph.index_of(node);
    if (model.graph.is_root(j)) {
        throw RootNodeHasNoDistribution("node '" + node + "'");
    }
    Workspace ws;
    forward_traced(model, sample.features, PropagationMode::Propagated, nullptr,
                   nullptr, 0.0, ws);
    const BlockTrace& t = ws.traces[j];
    std::vector<double> residual = t.dist;
    residual[static_cast<std::size_t>(argmax_lowest(t.dist))] -= 1.0;

    const auto& b = model.blocks[j];
    std::vector<double> z(gradient_embedding_width(model, j), 0.0);
    k::rank1_bias_accum(z.data(), z.data() + b.out_dim * b.hidden_dim,
                        residual.data(), t.hidden.data(), b.out_dim,
                        b.hidden_dim);
    return z;
}

} // namespace gcp
