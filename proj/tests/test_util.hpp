#pragma once

// Shared helpers for the unit and acceptance suites: random model/data
// construction and the central-finite-difference gradient oracle.

#include "gcp/graph.hpp"
#include "gcp/model.hpp"
#include "gcp/rng.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace gcp::testutil {

// Random DAG with a guaranteed chain backbone: single root, single sink and
// every node on a root-to-sink path. Extra forward edges are added with
// probability `extra_edge_prob`.
inline ConceptGraph random_graph(Rng& rng, std::size_t n_nodes,
                                 double extra_edge_prob = 0.4,
                                 std::size_t max_cardinality = 4) {
    GraphDescription d;
    for (std::size_t i = 0; i < n_nodes; ++i) {
        NodeSpec s;
        s.id = "n" + std::to_string(i);
        s.name = s.id;
        s.cardinality =
            (i == 0) ? 0 : 2 + rng.next_below(max_cardinality - 1);
        d.nodes.push_back(std::move(s));
    }
    for (std::size_t i = 0; i + 1 < n_nodes; ++i) {
        d.edges.emplace_back("n" + std::to_string(i), "n" + std::to_string(i + 1));
    }
    for (std::size_t i = 0; i + 2 < n_nodes; ++i) {
        for (std::size_t j = i + 2; j < n_nodes; ++j) {
            if (rng.bernoulli(extra_edge_prob)) {
                d.edges.emplace_back("n" + std::to_string(i),
                                     "n" + std::to_string(j));
            }
        }
    }
    return build_graph(d);
}

inline std::vector<double> random_features(Rng& rng, std::size_t dim) {
    std::vector<double> x(dim);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    return x;
}

inline AnnotatedSample random_annotated(Rng& rng, const ConceptGraph& g,
                                        std::size_t input_dim,
                                        const std::string& id) {
    AnnotatedSample s;
    s.sample.id = id;
    s.sample.features = random_features(rng, input_dim);
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g.is_root(i)) continue;
        const int v = static_cast<int>(rng.next_below(g.spec(i).cardinality));
        if (g.is_output(i)) {
            s.label = v;
        } else {
            s.concepts[g.spec(i).id] = v;
        }
    }
    return s;
}

inline std::vector<AnnotatedSample> random_batch(Rng& rng,
                                                 const ConceptGraph& g,
                                                 std::size_t input_dim,
                                                 std::size_t n) {
    std::vector<AnnotatedSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(random_annotated(rng, g, input_dim, "s" + std::to_string(i)));
    }
    return out;
}

// Max relative error between analytic gradients and a central finite
// difference of batch_loss, over every parameter of every block. The
// denominator is floored at 1e-5 so near-zero entries are judged absolutely.
inline double fd_gradient_max_rel_error(GcpModel& model,
                                        std::span<const AnnotatedSample> batch,
                                        PropagationMode mode,
                                        double eps = 1e-5) {
    const ModelGrads grads = backward(model, batch, mode);
    double worst = 0.0;
    for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
        std::vector<std::vector<double>*> tensors = {
            &model.blocks[bi].w1, &model.blocks[bi].b1, &model.blocks[bi].w2,
            &model.blocks[bi].b2};
        std::vector<const std::vector<double>*> gt = {
            &grads.blocks[bi].w1, &grads.blocks[bi].b1, &grads.blocks[bi].w2,
            &grads.blocks[bi].b2};
        for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
            auto& tensor = *tensors[ti];
            for (std::size_t p = 0; p < tensor.size(); ++p) {
                const double saved = tensor[p];
                tensor[p] = saved + eps;
                const double up = batch_loss(model, batch, mode).total;
                tensor[p] = saved - eps;
                const double down = batch_loss(model, batch, mode).total;
                tensor[p] = saved;
                const double fd = (up - down) / (2.0 * eps);
                const double analytic = (*gt[ti])[p];
                const double denom =
                    std::max({std::fabs(fd), std::fabs(analytic), 1e-5});
                worst = std::max(worst, std::fabs(fd - analytic) / denom);
            }
        }
    }
    return worst;
}

} // namespace gcp::testutil
