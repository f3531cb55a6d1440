#include "gcp/graph.hpp"

#include "gcp/errors.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gcp {

std::size_t ConceptGraph::index_of(const NodeId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InvalidNode("unknown node id '" + id + "'");
    return it->second;
}

bool ConceptGraph::has_node(const NodeId& id) const {
    return index_.count(id) != 0;
}

std::vector<std::size_t> ConceptGraph::descendants(
    const std::vector<std::size_t>& from) const {
    std::vector<char> seed(size(), 0), reach(size(), 0);
    for (std::size_t i : from) {
        if (i >= size()) throw InvalidNode("node index out of range");
        seed[i] = 1;
    }
    for (std::size_t i : topo_order) {
        if (reach[i]) continue;
        for (std::size_t p : parents[i]) {
            if (seed[p] || reach[p]) {
                reach[i] = 1;
                break;
            }
        }
    }
    std::vector<std::size_t> out;
    for (std::size_t i : topo_order) {
        if (reach[i] && !seed[i]) out.push_back(i);
    }
    return out;
}

ConceptGraph build_graph(const GraphDescription& desc) {
    ConceptGraph g;
    g.nodes = desc.nodes;
    const std::size_t n = g.nodes.size();
    if (n == 0) throw UnreachableNode("graph has no nodes");

    for (std::size_t i = 0; i < n; ++i) {
        if (!g.index_.emplace(g.nodes[i].id, i).second) {
            throw DuplicateId("node id '" + g.nodes[i].id + "'");
        }
    }

    g.parents.assign(n, {});
    g.children.assign(n, {});
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& [pid, cid] : desc.edges) {
        auto pit = g.index_.find(pid);
        auto cit = g.index_.find(cid);
        if (pit == g.index_.end() || cit == g.index_.end()) {
            throw InvalidNode("edge references unknown node '" +
                              (pit == g.index_.end() ? pid : cid) + "'");
        }
        const std::size_t p = pit->second, c = cit->second;
        if (p == c) throw CycleDetected("self edge on '" + pid + "'");
        if (!seen.emplace(p, c).second) {
            throw DuplicateId("duplicate edge " + pid + " -> " + cid);
        }
        g.edges.emplace_back(p, c);
        g.parents[c].push_back(p);
        g.children[p].push_back(c);
    }
    for (auto& v : g.parents) std::sort(v.begin(), v.end());
    for (auto& v : g.children) std::sort(v.begin(), v.end());

    // roots and sinks
    std::vector<std::size_t> roots, sinks;
    for (std::size_t i = 0; i < n; ++i) {
        if (g.parents[i].empty()) roots.push_back(i);
        if (g.children[i].empty()) sinks.push_back(i);
    }
    if (roots.size() > 1) {
        std::ostringstream os;
        os << roots.size() << " parentless nodes";
        throw MultipleRoots(os.str());
    }
    if (roots.empty()) throw CycleDetected("no parentless node exists");
    g.root = roots.front();

    // Kahn with smallest-id tie-break for a canonical order
    std::vector<std::size_t> indeg(n);
    for (std::size_t i = 0; i < n; ++i) indeg[i] = g.parents[i].size();
    auto id_greater = [&](std::size_t a, std::size_t b) {
        return g.nodes[a].id > g.nodes[b].id;
    };
    std::priority_queue<std::size_t, std::vector<std::size_t>,
                        decltype(id_greater)>
        ready(id_greater);
    for (std::size_t i = 0; i < n; ++i) {
        if (indeg[i] == 0) ready.push(i);
    }
    g.topo_order.clear();
    while (!ready.empty()) {
        const std::size_t i = ready.top();
        ready.pop();
        g.topo_order.push_back(i);
        for (std::size_t c : g.children[i]) {
            if (--indeg[c] == 0) ready.push(c);
        }
    }
    if (g.topo_order.size() != n) throw CycleDetected("edge relation is cyclic");

    if (sinks.size() > 1) {
        std::ostringstream os;
        os << sinks.size() << " childless nodes";
        throw MultipleOutputs(os.str());
    }
    g.output = sinks.front();
    if (g.output == g.root && n > 1) throw UnreachableNode("root equals output");

    // every node must lie on some root->output path: reachable from the root
    // and able to reach the output
    {
        std::vector<char> from_root(n, 0), to_out(n, 0);
        from_root[g.root] = 1;
        for (std::size_t i : g.topo_order) {
            for (std::size_t p : g.parents[i]) {
                if (from_root[p]) from_root[i] = 1;
            }
        }
        to_out[g.output] = 1;
        for (auto it = g.topo_order.rbegin(); it != g.topo_order.rend(); ++it) {
            for (std::size_t c : g.children[*it]) {
                if (to_out[c]) to_out[*it] = 1;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!from_root[i] || !to_out[i]) {
                throw UnreachableNode("node '" + g.nodes[i].id +
                                      "' is not on a root-output path");
            }
        }
    }

    if (g.nodes[g.root].cardinality != 0) {
        throw InvalidCardinality("root '" + g.nodes[g.root].id +
                                 "' must have cardinality 0");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (i != g.root && g.nodes[i].cardinality < 2) {
            throw InvalidCardinality("node '" + g.nodes[i].id +
                                     "' needs cardinality >= 2");
        }
    }
    return g;
}

std::vector<double> degree_weights(const ConceptGraph& graph) {
    const std::size_t n = graph.size();
    std::vector<double> w(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = static_cast<double>(graph.parents[i].size() +
                                   graph.children[i].size());
        total += w[i];
    }
    for (double& x : w) x /= total;
    return w;
}

GraphDescription parse_graph_description(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("graph spec: ") + e.what());
    }
    GraphDescription desc;
    try {
        for (const auto& jn : j.at("nodes")) {
            NodeSpec s;
            s.id = jn.at("id").get<std::string>();
            s.name = jn.value("name", s.id);
            s.cardinality = jn.value("cardinality", std::size_t{0});
            s.description = jn.value("description", std::string{});
            desc.nodes.push_back(std::move(s));
        }
        for (const auto& je : j.at("edges")) {
            desc.edges.emplace_back(je.at(0).get<std::string>(),
                                    je.at(1).get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("graph spec: ") + e.what());
    }
    return desc;
}

ConceptGraph load_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open graph spec '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return build_graph(parse_graph_description(buf.str()));
}

std::string graph_description_json(const ConceptGraph& graph) {
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    for (const auto& s : graph.nodes) {
        j["nodes"].push_back({{"id", s.id},
                              {"name", s.name},
                              {"cardinality", s.cardinality},
                              {"description", s.description}});
    }
    j["edges"] = nlohmann::json::array();
    for (const auto& [p, c] : graph.edges) {
        j["edges"].push_back({graph.nodes[p].id, graph.nodes[c].id});
    }
    return j.dump(2);
}

} // namespace gcp
