#include <doctest.h>

#include "gcp/counterfactual.hpp"
#include "gcp/errors.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace gcp;
using namespace gcp::testutil;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 5) {
    TrainConfig c;
    c.hidden_dim = 8;
    c.latent_dim = 5;
    c.dropout_rate = 0.0;
    c.seed = seed;
    return c;
}

ConceptGraph chain_graph() {
    GraphDescription d;
    d.nodes = {{"x", "x", 0, ""}, {"c", "c", 3, ""}, {"y", "y", 2, ""}};
    d.edges = {{"x", "c"}, {"c", "y"}};
    return build_graph(d);
}

ConceptGraph diamond_graph() {
    GraphDescription d;
    d.nodes = {{"x", "x", 0, ""}, {"c1", "c1", 2, ""}, {"c2", "c2", 2, ""},
               {"y", "y", 2, ""}};
    d.edges = {{"x", "c1"}, {"x", "c2"}, {"c1", "y"}, {"c2", "y"}};
    return build_graph(d);
}

// Independent re-implementation of the intervened pass: plain loops, no
// shared kernels, substituting one-hots for the pinned nodes.
struct NaiveRerun {
    std::vector<std::vector<double>> dists; // by node index
    double final_loss = 0.0;
};

NaiveRerun naive_rerun(const GcpModel& model, const AnnotatedSample& annotated,
                       const std::map<NodeId, int>& pinned) {
    const auto& g = model.graph;
    NaiveRerun out;
    out.dists.resize(g.size());
    std::vector<double> latent;

    auto block_eval = [&](const MlpBlock& b, const std::vector<double>& input) {
        std::vector<double> hidden(b.hidden_dim, 0.0);
        for (std::size_t r = 0; r < b.hidden_dim; ++r) {
            double acc = b.b1[r];
            for (std::size_t c = 0; c < b.in_dim; ++c) {
                acc += b.w1[r * b.in_dim + c] * input[c];
            }
            hidden[r] = std::tanh(acc);
        }
        std::vector<double> logits(b.out_dim, 0.0);
        for (std::size_t r = 0; r < b.out_dim; ++r) {
            double acc = b.b2[r];
            for (std::size_t c = 0; c < b.hidden_dim; ++c) {
                acc += b.w2[r * b.hidden_dim + c] * hidden[c];
            }
            logits[r] = acc;
        }
        double m = logits[0];
        for (double v : logits) m = std::max(m, v);
        double total = 0.0;
        std::vector<double> p(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) {
            p[i] = std::exp(logits[i] - m);
            total += p[i];
        }
        for (double& v : p) v /= total;
        return p;
    };

    for (std::size_t j : g.topo_order) {
        if (g.is_root(j)) {
            const auto& b = model.blocks[j];
            latent.assign(b.out_dim, 0.0);
            std::vector<double> hidden(b.hidden_dim, 0.0);
            for (std::size_t r = 0; r < b.hidden_dim; ++r) {
                double acc = b.b1[r];
                for (std::size_t c = 0; c < b.in_dim; ++c) {
                    acc += b.w1[r * b.in_dim + c] * annotated.sample.features[c];
                }
                hidden[r] = std::tanh(acc);
            }
            for (std::size_t r = 0; r < b.out_dim; ++r) {
                double acc = b.b2[r];
                for (std::size_t c = 0; c < b.hidden_dim; ++c) {
                    acc += b.w2[r * b.hidden_dim + c] * hidden[c];
                }
                latent[r] = acc;
            }
            continue;
        }
        auto it = pinned.find(g.spec(j).id);
        if (it != pinned.end()) {
            out.dists[j].assign(g.spec(j).cardinality, 0.0);
            out.dists[j][std::size_t(it->second)] = 1.0;
            continue;
        }
        std::vector<double> input;
        for (std::size_t p : g.parents[j]) {
            if (g.is_root(p)) {
                input.insert(input.end(), latent.begin(), latent.end());
            } else {
                input.insert(input.end(), out.dists[p].begin(), out.dists[p].end());
            }
        }
        out.dists[j] = block_eval(model.blocks[j], input);
    }
    const double p =
        std::clamp(out.dists[g.output][std::size_t(annotated.label)], 1e-12, 1.0);
    out.final_loss = -std::log(p);
    return out;
}

} // namespace

TEST_CASE("empty intervention reproduces forward bitwise") {
    Rng rng(3);
    const ConceptGraph g = chain_graph();
    const GcpModel m = make_model(g, 4, tiny_config());
    const auto annotated = random_annotated(rng, g, 4, "s0");

    const auto base = forward(m, annotated.sample.features);
    const auto result =
        rerun(m, annotated, make_intervention(g, annotated, {}));
    CHECK(result.outputs.root_latent == base.root_latent);
    CHECK(result.outputs.distributions == base.distributions);

    const auto lb = loss(m, base, annotated);
    CHECK(result.final_loss == lb.per_node[g.output]);
}

TEST_CASE("full intervention feeds the head exact one-hot truths") {
    Rng rng(5);
    const ConceptGraph g = diamond_graph();
    const GcpModel m = make_model(g, 4, tiny_config());
    const auto annotated = random_annotated(rng, g, 4, "s0");

    const std::vector<NodeId> all_concepts{"c1", "c2"};
    const auto result =
        rerun(m, annotated, make_intervention(g, annotated, all_concepts));

    for (const auto& id : all_concepts) {
        const auto& dist = result.outputs.distributions[g.index_of(id)];
        for (std::size_t v = 0; v < dist.size(); ++v) {
            const double want =
                int(v) == annotated.concepts.at(id) ? 1.0 : 0.0;
            CHECK(dist[v] == want);
        }
    }
    // the recomputed head equals an independent evaluation on those one-hots
    std::map<NodeId, int> pinned{{"c1", annotated.concepts.at("c1")},
                                 {"c2", annotated.concepts.at("c2")}};
    const auto naive = naive_rerun(m, annotated, pinned);
    for (std::size_t v = 0; v < 2; ++v) {
        CHECK(result.outputs.distributions[g.output][v] ==
              doctest::Approx(naive.dists[g.output][v]).epsilon(1e-12));
    }
}

TEST_CASE("chain middle intervention matches a hand substitution") {
    Rng rng(7);
    const ConceptGraph g = chain_graph();
    const GcpModel m = make_model(g, 4, tiny_config(9));
    const auto annotated = random_annotated(rng, g, 4, "s0");
    const auto base = forward(m, annotated.sample.features);

    const auto result =
        rerun(m, annotated, make_intervention(g, annotated, {{"c"}}));

    // root latent untouched
    CHECK(result.outputs.root_latent == base.root_latent);

    const auto naive =
        naive_rerun(m, annotated, {{"c", annotated.concepts.at("c")}});
    CHECK(std::fabs(result.final_loss - naive.final_loss) < 1e-12);
    for (std::size_t v = 0; v < 2; ++v) {
        CHECK(result.outputs.distributions[g.output][v] ==
              doctest::Approx(naive.dists[g.output][v]).epsilon(1e-12));
    }
}

TEST_CASE("non-descendants of the intervened set are untouched") {
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t n = 4 + rng.next_below(3);
        const ConceptGraph g = random_graph(rng, n);
        const GcpModel m = make_model(g, 4, tiny_config(50 + trial));
        const auto annotated = random_annotated(rng, g, 4, "s0");
        const auto base = forward(m, annotated.sample.features);

        // random nonempty set of non-root nodes
        std::vector<NodeId> chosen;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!g.is_root(i) && rng.bernoulli(0.4)) chosen.push_back(g.spec(i).id);
        }
        if (chosen.empty()) chosen.push_back(g.spec(g.output).id);

        const auto intervention = make_intervention(g, annotated, chosen);
        const auto result = rerun_with_base(m, annotated, intervention, base);

        const auto desc = g.descendants(intervention.nodes);
        std::set<std::size_t> touched(intervention.nodes.begin(),
                                      intervention.nodes.end());
        touched.insert(desc.begin(), desc.end());
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g.is_root(i) || touched.count(i)) continue;
            CHECK(result.outputs.distributions[i] == base.distributions[i]);
        }
        CHECK(result.outputs.root_latent == base.root_latent);
    }
}

TEST_CASE("intervention validation errors") {
    Rng rng(13);
    const ConceptGraph g = chain_graph();
    const GcpModel m = make_model(g, 4, tiny_config());
    auto annotated = random_annotated(rng, g, 4, "s0");

    CHECK_THROWS_AS(make_intervention(g, annotated, {{"x"}}), InvalidNode);
    CHECK_THROWS_AS(make_intervention(g, annotated, {{"zz"}}), InvalidNode);

    auto missing = annotated;
    missing.concepts.erase("c");
    CHECK_THROWS_AS(make_intervention(g, missing, {{"c"}}), MissingTruth);
}

TEST_CASE("parent corrected losses") {
    Rng rng(17);
    const ConceptGraph g = chain_graph();

    SUBCASE("both losses are nonnegative; root child degenerates to forward") {
        const GcpModel m = make_model(g, 4, tiny_config());
        const auto annotated = random_annotated(rng, g, 4, "s0");
        const auto [l_pa, l_corr] = parent_corrected_losses(m, annotated, "c");
        CHECK(l_pa >= 0.0);
        CHECK(l_corr >= 0.0);
        // c's only parent is the root: parent-corrected equals plain forward
        const auto base = forward(m, annotated.sample.features);
        CHECK(l_pa == loss(m, base, annotated).per_node[g.output]);
    }
    SUBCASE("already-correct node gains nothing from its own correction") {
        GcpModel m = make_model(g, 4, tiny_config());
        auto annotated = random_annotated(rng, g, 4, "s0");
        annotated.concepts["c"] = 1;
        // saturate c toward value 1 so its prediction is exactly that one-hot
        auto& b = m.blocks[g.index_of("c")];
        std::fill(b.w2.begin(), b.w2.end(), 0.0);
        b.b2 = {0.0, 2000.0, -2000.0};
        const auto [l_pa, l_corr] = parent_corrected_losses(m, annotated, "c");
        CHECK(l_pa == l_corr);
    }
}

TEST_CASE("delta scores") {
    Rng rng(19);
    const ConceptGraph g = chain_graph();

    SUBCASE("exact model has zero deltas everywhere") {
        GcpModel m = make_model(g, 4, tiny_config());
        auto annotated = random_annotated(rng, g, 4, "s0");
        annotated.concepts["c"] = 2;
        annotated.label = 1;
        // c predicts 2, the head predicts 1, both saturated
        auto& bc = m.blocks[g.index_of("c")];
        std::fill(bc.w2.begin(), bc.w2.end(), 0.0);
        bc.b2 = {-2000.0, -2000.0, 2000.0};
        auto& by = m.blocks[g.index_of("y")];
        std::fill(by.w2.begin(), by.w2.end(), 0.0);
        by.b2 = {-2000.0, 2000.0};

        const auto report = delta_scores(m, {&annotated, 1});
        for (double d : report.delta) CHECK(d == 0.0);
    }
    SUBCASE("single sample: delta equals that sample's loss difference") {
        const GcpModel m = make_model(g, 4, tiny_config());
        const auto annotated = random_annotated(rng, g, 4, "s0");
        const auto report = delta_scores(m, {&annotated, 1}, true);
        const auto [l_pa, l_corr] = parent_corrected_losses(m, annotated, "c");
        CHECK(report.delta[g.index_of("c")] ==
              doctest::Approx(l_pa - l_corr).epsilon(1e-15));
        REQUIRE(report.trace.has_value());
        CHECK((*report.trace)[0][g.index_of("c")].first == l_pa);
    }
    SUBCASE("matches the independent rerun oracle on random instances") {
        for (int trial = 0; trial < 6; ++trial) {
            const std::size_t n = 3 + rng.next_below(4);
            const ConceptGraph rg = random_graph(rng, n);
            const GcpModel m = make_model(rg, 4, tiny_config(80 + trial));
            const auto data = random_batch(rng, rg, 4, 3);
            const auto report = delta_scores(m, data);

            for (std::size_t j = 0; j < rg.size(); ++j) {
                if (rg.is_root(j)) continue;
                double acc = 0.0;
                for (const auto& s : data) {
                    std::map<NodeId, int> pa_pin, both_pin;
                    for (std::size_t p : rg.parents[j]) {
                        if (rg.is_root(p)) continue;
                        const NodeId pid = rg.spec(p).id;
                        const int v = rg.is_output(p) ? s.label
                                                      : s.concepts.at(pid);
                        pa_pin[pid] = v;
                        both_pin[pid] = v;
                    }
                    const NodeId jid = rg.spec(j).id;
                    both_pin[jid] =
                        rg.is_output(j) ? s.label : s.concepts.at(jid);
                    acc += naive_rerun(m, s, pa_pin).final_loss -
                           naive_rerun(m, s, both_pin).final_loss;
                }
                acc /= double(data.size());
                CHECK(std::fabs(report.delta[j] - acc) <= 1e-12);
            }
        }
    }
    SUBCASE("empty dataset rejected") {
        const GcpModel m = make_model(g, 4, tiny_config());
        CHECK_THROWS_AS(delta_scores(m, {}), EmptyDataset);
    }
}

TEST_CASE("retrain set selection") {
    GraphDescription d;
    d.nodes = {{"x", "x", 0, ""}, {"a", "a", 2, ""}, {"b", "b", 2, ""},
               {"c", "c", 2, ""}, {"y", "y", 2, ""}};
    d.edges = {{"x", "a"}, {"x", "b"}, {"x", "c"},
               {"a", "y"}, {"b", "y"}, {"c", "y"}};
    const ConceptGraph g = build_graph(d);

    auto delta_of = [&](std::map<NodeId, double> values) {
        std::vector<double> delta(g.size(), 0.0);
        for (const auto& [id, v] : values) delta[g.index_of(id)] = v;
        return delta;
    };

    SUBCASE("top-b with exhaustive total") {
        const auto delta = delta_of({{"a", 0.3}, {"b", 0.1}, {"c", 0.5}});
        const auto chosen = select_retrain_set(g, delta, 2);
        CHECK(chosen == std::vector<NodeId>{"c", "a"});
        // exhaustive over all pairs of the three concept nodes
        double best = 0.0;
        const std::vector<NodeId> ids{"a", "b", "c"};
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t j = i + 1; j < ids.size(); ++j) {
                best = std::max(best, delta[g.index_of(ids[i])] +
                                          delta[g.index_of(ids[j])]);
            }
        }
        CHECK(delta[g.index_of("c")] + delta[g.index_of("a")] ==
              doctest::Approx(best));
    }
    SUBCASE("b beyond the node count keeps all positive nodes") {
        const auto delta = delta_of({{"a", 0.3}, {"b", 0.1}, {"c", 0.5}});
        const auto chosen = select_retrain_set(g, delta, 10);
        CHECK(chosen.size() == 3);
    }
    SUBCASE("equal deltas break toward smaller ids") {
        const auto delta = delta_of({{"a", 0.2}, {"b", 0.2}, {"c", 0.2}});
        const auto chosen = select_retrain_set(g, delta, 2);
        CHECK(chosen == std::vector<NodeId>{"a", "b"});
    }
    SUBCASE("nonpositive deltas are never selected") {
        const auto delta = delta_of({{"a", -0.2}, {"b", 0.0}, {"c", 0.1}});
        const auto chosen = select_retrain_set(g, delta, 3);
        CHECK(chosen == std::vector<NodeId>{"c"});
    }
    SUBCASE("output node only with the flag") {
        auto delta = delta_of({{"a", 0.1}});
        delta[g.output] = 5.0;
        CHECK(select_retrain_set(g, delta, 2) == std::vector<NodeId>{"a"});
        CHECK(select_retrain_set(g, delta, 2, true) ==
              std::vector<NodeId>{"y", "a"});
    }
}

namespace {

// oracle returning some malformed pairs, for the retry contract
class FlakyOracle final : public Oracle {
public:
    explicit FlakyOracle(bool always_bad) : always_bad_(always_bad) {}

    std::vector<AnnotatedSample> annotate(std::span<const Sample>,
                                          const ConceptGraph&) override {
        return {};
    }
    std::vector<ConceptPair> generate_pairs(const ConceptGraph& graph,
                                            const NodeId& node,
                                            std::size_t count) override {
        cost_ += count;
        std::vector<ConceptPair> out;
        const std::size_t j = graph.index_of(node);
        std::size_t parents = 0;
        for (std::size_t p : graph.parents[j]) parents += !graph.is_root(p);
        for (std::size_t i = 0; i < count; ++i) {
            ConceptPair pair;
            pair.parent_values.assign(parents, 0);
            pair.value = (always_bad_ || served_++ % 2 == 0)
                             ? int(graph.spec(j).cardinality) + 5
                             : 0;
            out.push_back(std::move(pair));
        }
        return out;
    }
    std::uint64_t cost() const override { return cost_; }

private:
    bool always_bad_;
    std::uint64_t cost_ = 0;
    std::uint64_t served_ = 0;
};

} // namespace

TEST_CASE("augment_node_data contracts") {
    const ConceptGraph g = diamond_graph();

    SUBCASE("zero pairs requested") {
        FlakyOracle oracle(false);
        CHECK(augment_node_data(oracle, g, "y", 0).empty());
    }
    SUBCASE("rejected pairs are re-requested") {
        FlakyOracle oracle(false); // half the pairs are valid
        const auto pairs = augment_node_data(oracle, g, "y", 10, 10);
        CHECK(pairs.size() == 10);
        for (const auto& p : pairs) {
            CHECK(p.value >= 0);
            CHECK(p.value < 2);
            CHECK(p.parent_values.size() == 2);
        }
    }
    SUBCASE("persistent garbage raises after the retry cap") {
        FlakyOracle oracle(true);
        CHECK_THROWS_AS(augment_node_data(oracle, g, "y", 4),
                        MalformedOracleOutput);
    }
}

TEST_CASE("submodule retraining repairs a corrupted predictor") {
    // deterministic diamond task: c1 = sign(x1), c2 = sign(x2), y = xor
    const ConceptGraph g = diamond_graph();
    Rng rng(101);
    auto make_data = [&](std::size_t n, const char* prefix) {
        std::vector<AnnotatedSample> data;
        for (std::size_t i = 0; i < n; ++i) {
            AnnotatedSample a;
            a.sample.id = std::string(prefix) + std::to_string(i);
            a.sample.features = random_features(rng, 4);
            const int c1 = a.sample.features[0] > 0 ? 1 : 0;
            const int c2 = a.sample.features[1] > 0 ? 1 : 0;
            a.concepts["c1"] = c1;
            a.concepts["c2"] = c2;
            a.label = c1 ^ c2;
            data.push_back(std::move(a));
        }
        return data;
    };
    const auto train = make_data(150, "tr");
    const auto held_out = make_data(150, "ho");

    TrainConfig c;
    c.hidden_dim = 16;
    c.latent_dim = 8;
    c.learning_rate = 5e-3;
    c.dropout_rate = 0.0;
    c.max_epochs = 60;
    c.seed = 3;
    GcpModel m = make_model(g, 4, c);
    fit(m, train, c);

    // corrupt c1 by swapping its two logit rows
    {
        auto& b = m.blocks[g.index_of("c1")];
        for (std::size_t col = 0; col < b.hidden_dim; ++col) {
            std::swap(b.w2[0 * b.hidden_dim + col], b.w2[1 * b.hidden_dim + col]);
        }
        std::swap(b.b2[0], b.b2[1]);
    }

    auto mean_loss = [&](const GcpModel& model) {
        double acc = 0.0;
        for (const auto& s : held_out) {
            const auto out = forward(model, s.sample.features);
            acc += loss(model, out, s).per_node[g.output];
        }
        return acc / double(held_out.size());
    };
    const double before = mean_loss(m);

    const auto report = delta_scores(m, train);
    CHECK(report.delta[g.index_of("c1")] > 0.0);
    CHECK(report.delta[g.index_of("c1")] > report.delta[g.index_of("c2")]);

    const auto chosen = select_retrain_set(g, report.delta, 1);
    REQUIRE(chosen == std::vector<NodeId>{"c1"});

    const GcpModel snapshot = m;
    TrainConfig rc = c;
    rc.max_epochs = 40;
    retrain_submodules(m, chosen, train, {}, rc);

    // only c1 changed
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const bool same = m.blocks[i].w1 == snapshot.blocks[i].w1 &&
                          m.blocks[i].w2 == snapshot.blocks[i].w2 &&
                          m.blocks[i].b1 == snapshot.blocks[i].b1 &&
                          m.blocks[i].b2 == snapshot.blocks[i].b2;
        if (i == g.index_of("c1")) {
            CHECK_FALSE(same);
        } else {
            CHECK(same);
        }
    }
    const double after = mean_loss(m);
    CHECK(after < before);

    // determinism of the retraining path
    GcpModel again = snapshot;
    retrain_submodules(again, chosen, train, {}, rc);
    CHECK(again.blocks[g.index_of("c1")].w1 == m.blocks[g.index_of("c1")].w1);
    CHECK(again.blocks[g.index_of("c1")].w2 == m.blocks[g.index_of("c1")].w2);
}

TEST_CASE("empty retrain set leaves the model untouched") {
    Rng rng(23);
    const ConceptGraph g = chain_graph();
    GcpModel m = make_model(g, 4, tiny_config());
    const GcpModel snapshot = m;
    const auto data = random_batch(rng, g, 4, 4);
    retrain_submodules(m, {}, data, {}, tiny_config());
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        CHECK(m.blocks[i].w1 == snapshot.blocks[i].w1);
        CHECK(m.blocks[i].w2 == snapshot.blocks[i].w2);
    }
}
