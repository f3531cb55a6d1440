#include "gcp/oracle.hpp"

#include "gcp/errors.hpp"
#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace gcp {

namespace {

using nlohmann::json;

std::size_t table_parent_combos(const NodeTable& t,
                                const std::vector<NodeTable>& all) {
    std::size_t combos = 1;
    for (const auto& pid : t.parents) {
        auto it = std::find_if(all.begin(), all.end(),
                               [&](const NodeTable& x) { return x.id == pid; });
        if (it == all.end()) {
            throw InvalidTable("table '" + t.id + "' references unknown parent '" +
                               pid + "'");
        }
        combos *= it->cardinality;
    }
    return combos;
}

std::size_t table_row_count(const SyntheticTask& task, const NodeTable& t) {
    const std::size_t regions = t.region_dependent ? task.region_count() : 1;
    const std::size_t u_states = t.confounded ? 2 : 1;
    return regions * u_states * table_parent_combos(t, task.tables);
}

std::size_t region_of(const SyntheticTask& task,
                      std::span<const double> features) {
    std::size_t r = 0;
    for (std::size_t i = 0; i < task.region_coords; ++i) {
        if (features[i] > 0.0) r |= std::size_t{1} << i;
    }
    return r;
}

// mixed-radix parent combination, last listed parent fastest
std::size_t combo_index(const NodeTable& t, const std::vector<NodeTable>& all,
                        const std::unordered_map<NodeId, int>& values) {
    std::size_t combo = 0;
    for (const auto& pid : t.parents) {
        auto it = std::find_if(all.begin(), all.end(),
                               [&](const NodeTable& x) { return x.id == pid; });
        combo = combo * it->cardinality +
                static_cast<std::size_t>(values.at(pid));
    }
    return combo;
}

const std::vector<double>& table_row(const SyntheticTask& task,
                                     const NodeTable& t, std::size_t region,
                                     int u,
                                     const std::unordered_map<NodeId, int>& values) {
    const std::size_t u_states = t.confounded ? 2 : 1;
    const std::size_t r = t.region_dependent ? region : 0;
    const std::size_t uu = t.confounded ? static_cast<std::size_t>(u) : 0;
    const std::size_t combos = table_parent_combos(t, task.tables);
    const std::size_t idx =
        (r * u_states + uu) * combos + combo_index(t, task.tables, values);
    return t.rows[idx];
}

std::string padded_id(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, i);
    return buf;
}

} // namespace

void validate_task(const SyntheticTask& task) {
    if (task.feature_dim == 0) throw InvalidTable("feature_dim must be positive");
    if (task.region_coords > task.feature_dim) {
        throw InvalidTable("region coordinates exceed feature_dim");
    }
    if (task.tables.empty()) throw InvalidTable("task has no tables");
    for (const auto& t : task.tables) {
        if (t.cardinality < 2) throw InvalidTable("cardinality at '" + t.id + "'");
        const std::size_t want = table_row_count(task, t);
        if (t.rows.size() != want) {
            std::ostringstream os;
            os << "table '" << t.id << "' has " << t.rows.size()
               << " rows, expected " << want;
            throw InvalidTable(os.str());
        }
        for (const auto& row : t.rows) {
            if (row.size() != t.cardinality) {
                throw InvalidTable("row width at '" + t.id + "'");
            }
            double total = 0.0;
            for (double p : row) {
                if (p < 0.0 || !std::isfinite(p)) {
                    throw InvalidTable("negative entry at '" + t.id + "'");
                }
                total += p;
            }
            if (std::fabs(total - 1.0) > 1e-9) {
                throw InvalidTable("row of '" + t.id + "' is not stochastic");
            }
        }
    }
}

SyntheticTask confounder_minimal_task(bool latent_on) {
    SyntheticTask task;
    task.name = latent_on ? "confounder-minimal" : "confounder-minimal-independent";
    task.feature_dim = 4;
    task.region_coords = 0;
    task.latent_confounder = latent_on;
    task.confounder_prior = 0.5;
    task.seed = 1234;

    NodeTable c1{"c1", 2, {}, false, latent_on, {}};
    NodeTable c2{"c2", 2, {}, false, latent_on, {}};
    if (latent_on) {
        // value = u flipped with probability 0.1
        c1.rows = {{0.9, 0.1}, {0.1, 0.9}};
        c2.rows = {{0.9, 0.1}, {0.1, 0.9}};
    } else {
        c1.rows = {{0.5, 0.5}};
        c2.rows = {{0.5, 0.5}};
    }
    NodeTable y{"y", 2, {"c1", "c2"}, false, false, {}};
    y.rows = {{0.0, 1.0}, {1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}; // y = 1[c1=c2]
    task.tables = {c1, c2, y};

    task.student_graph.nodes = {{"x", "input", 0, "raw features"},
                                {"c1", "c1", 2, "first latent concept"},
                                {"c2", "c2", 2, "second latent concept"},
                                {"y", "y", 2, "agreement label"}};
    task.student_graph.edges = {
        {"x", "c1"}, {"x", "c2"}, {"c1", "c2"}, {"c1", "y"}, {"c2", "y"}};
    validate_task(task);
    return task;
}

SyntheticTask theorem1_task() {
    SyntheticTask task;
    task.name = "theorem1-pinned";
    task.feature_dim = 6;
    task.region_coords = 5; // signs of x1..x5
    task.latent_confounder = true;
    task.confounder_prior = 0.25;
    task.seed = 7;

    auto biased = [](int hot, double eps) {
        return hot ? std::vector<double>{eps, 1.0 - eps}
                   : std::vector<double>{1.0 - eps, eps};
    };

    // The x1 > 0 half is deliberately easy: three concepts pinned near zero
    // and the label driven by a single sign bit. The x1 < 0 half carries the
    // structure: c1/c2 track sign(x2)/sign(x3) xor the shared hidden cause u
    // (dependent given x), c4 is a conjunction, and the label composes all
    // four concepts. The asymmetry concentrates model uncertainty in one
    // half-space, which is what graph-aware acquisition exploits.
    NodeTable c1{"c1", 2, {}, true, true, {}};
    NodeTable c2{"c2", 2, {}, true, true, {}};
    NodeTable c3{"c3", 2, {}, true, false, {}};
    NodeTable c4{"c4", 2, {}, true, false, {}};
    for (std::size_t r = 0; r < task.region_count(); ++r) {
        const bool easy = (r & 1) != 0; // sign of x1
        const int b2 = int((r >> 1) & 1);
        const int b3 = int((r >> 2) & 1);
        const int b4 = int((r >> 3) & 1);
        const int b5 = int((r >> 4) & 1);
        for (int u = 0; u <= 1; ++u) {
            c1.rows.push_back(easy ? biased(0, 0.01) : biased(b2 ^ u, 0.03));
            c2.rows.push_back(easy ? biased(0, 0.01) : biased(b3 ^ u, 0.03));
        }
        c3.rows.push_back(biased(b4, easy ? 0.01 : 0.03));
        c4.rows.push_back(easy ? biased(0, 0.01) : biased(b5, 0.03));
    }

    // y = 1[c1 = c2] xor c3 xor c4, softened by a 0.05 flip
    NodeTable y{"y", 2, {"c1", "c2", "c3", "c4"}, false, false, {}};
    for (int v1 = 0; v1 <= 1; ++v1) {
        for (int v2 = 0; v2 <= 1; ++v2) {
            for (int v3 = 0; v3 <= 1; ++v3) {
                for (int v4 = 0; v4 <= 1; ++v4) {
                    const int core = int(v1 == v2) ^ v3 ^ v4;
                    y.rows.push_back(core ? std::vector<double>{0.05, 0.95}
                                          : std::vector<double>{0.95, 0.05});
                }
            }
        }
    }
    task.tables = {c1, c2, c3, c4, y};

    task.student_graph.nodes = {
        {"x", "input", 0, "raw features"},
        {"c1", "c1", 2, "confounded concept tracking the second coordinate"},
        {"c2", "c2", 2, "confounded concept tracking the third coordinate"},
        {"c3", "c3", 2, "clean concept tracking the fourth coordinate"},
        {"c4", "c4", 2, "clean concept tracking the fifth coordinate"},
        {"y", "y", 2, "equality-parity label over the four concepts"}};
    task.student_graph.edges = {{"x", "c1"}, {"x", "c2"}, {"x", "c3"},
                                {"x", "c4"}, {"c1", "c2"}, {"c1", "y"},
                                {"c2", "y"}, {"c3", "y"}, {"c4", "y"}};
    validate_task(task);
    return task;
}

SyntheticTeacher::SyntheticTeacher(SyntheticTask task)
    : task_(std::move(task)), pair_rng_(task_.seed ^ 0xABCD1234u) {
    validate_task(task_);
}

SyntheticTeacher::Draw SyntheticTeacher::draw_joint(Rng& rng) const {
    Draw d;
    d.features.resize(task_.feature_dim);
    for (double& v : d.features) v = rng.uniform(-1.0, 1.0);
    const std::size_t region = region_of(task_, d.features);
    const int u = task_.latent_confounder
                      ? int(rng.bernoulli(task_.confounder_prior))
                      : 0;
    for (const auto& t : task_.tables) {
        const auto& row = table_row(task_, t, region, u, d.values);
        d.values[t.id] = static_cast<int>(rng.categorical(row));
    }
    return d;
}

DatasetBundle SyntheticTeacher::generate(std::size_t n_pool,
                                         std::size_t n_test) {
    Rng rng(task_.seed);
    DatasetBundle bundle;
    const NodeId label_id = task_.tables.back().id;

    auto to_annotated = [&](const Draw& d, const std::string& id) {
        AnnotatedSample a;
        a.sample.id = id;
        a.sample.features = d.features;
        for (const auto& t : task_.tables) {
            if (t.id == label_id) continue;
            a.concepts[t.id] = d.values.at(t.id);
        }
        a.label = d.values.at(label_id);
        return a;
    };

    for (std::size_t i = 0; i < n_pool; ++i) {
        const Draw d = draw_joint(rng);
        const std::string id = padded_id("p", i);
        bundle.pool.push_back({id, d.features});
        truths_[id] = to_annotated(d, id);
    }
    for (std::size_t i = 0; i < n_test; ++i) {
        const Draw d = draw_joint(rng);
        const std::string id = padded_id("t", i);
        AnnotatedSample a = to_annotated(d, id);
        truths_[id] = a;
        bundle.test.push_back(std::move(a));
    }
    return bundle;
}

std::vector<AnnotatedSample> SyntheticTeacher::annotate(
    std::span<const Sample> batch, const ConceptGraph& graph) {
    std::vector<AnnotatedSample> out;
    out.reserve(batch.size());
    for (const auto& s : batch) {
        auto it = truths_.find(s.id);
        if (it == truths_.end()) {
            throw UnknownSample("'" + s.id + "' was not generated by this task");
        }
        // coverage check against the graph being trained
        for (std::size_t i = 0; i < graph.size(); ++i) {
            if (graph.is_root(i) || graph.is_output(i)) continue;
            if (!it->second.concepts.count(graph.spec(i).id)) {
                throw MissingAnnotation("task lacks concept '" +
                                        graph.spec(i).id + "'");
            }
        }
        out.push_back(it->second);
    }
    cost_ += batch.size();
    return out;
}

std::vector<ConceptPair> SyntheticTeacher::generate_pairs(
    const ConceptGraph& graph, const NodeId& node, std::size_t count) {
    const std::size_t j = graph.index_of(node);
    if (graph.is_root(j)) throw InvalidNode("cannot generate pairs for the root");
    const NodeId label_id = task_.tables.back().id;

    std::vector<ConceptPair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Draw d = draw_joint(pair_rng_);
        ConceptPair pair;
        for (std::size_t p : graph.parents[j]) {
            if (graph.is_root(p)) continue;
            auto it = d.values.find(graph.spec(p).id);
            if (it == d.values.end()) {
                throw InvalidNode("parent '" + graph.spec(p).id +
                                  "' unknown to the task");
            }
            pair.parent_values.push_back(it->second);
        }
        const NodeId& want = graph.is_output(j) ? label_id : graph.spec(j).id;
        auto it = d.values.find(want);
        if (it == d.values.end()) {
            throw InvalidNode("node '" + want + "' unknown to the task");
        }
        pair.value = it->second;
        pairs.push_back(std::move(pair));
    }
    cost_ += count;
    return pairs;
}

// --- remote client ---

RemoteOracle::RemoteOracle(RemoteOracleConfig config)
    : config_(std::move(config)) {
    if (config_.endpoint.empty()) {
        if (const char* env = std::getenv("GCP_ORACLE_ENDPOINT")) {
            config_.endpoint = env;
        }
    }
    if (config_.api_key.empty()) {
        if (const char* env = std::getenv("GCP_ORACLE_KEY")) {
            config_.api_key = env;
        }
    }
}

void RemoteOracle::register_text(const std::string& sample_id,
                                 const std::string& text) {
    texts_[sample_id] = text;
}

std::string RemoteOracle::post_json(const std::string& path,
                                    const std::string& body) {
    if (config_.endpoint.empty()) {
        throw OracleUnavailable("no endpoint configured");
    }
    httplib::Client client(config_.endpoint);
    client.set_connection_timeout(std::chrono::milliseconds(
        static_cast<int>(config_.timeout_seconds * 1000)));
    client.set_read_timeout(std::chrono::milliseconds(
        static_cast<int>(config_.timeout_seconds * 1000)));
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
    }
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::ConnectionTimeout ||
            err == httplib::Error::Read || err == httplib::Error::Write) {
            throw Timeout("no response from " + path);
        }
        throw OracleUnavailable("transport failure on " + path);
    }
    if (res->status != 200) {
        throw OracleUnavailable("HTTP " + std::to_string(res->status) + " on " +
                                path);
    }
    return res->body;
}

std::vector<AnnotatedSample> RemoteOracle::annotate(
    std::span<const Sample> batch, const ConceptGraph& graph) {
    if (config_.max_cost != 0 && cost_.load() + batch.size() > config_.max_cost) {
        throw BudgetExhausted("annotation budget reached");
    }

    json graph_payload = json::array();
    std::unordered_map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < graph.size(); ++i) {
        if (graph.is_root(i)) continue;
        const auto& s = graph.spec(i);
        graph_payload.push_back({{"name", s.name},
                                 {"cardinality", s.cardinality},
                                 {"description", s.description}});
        by_name[s.name] = i;
    }

    auto request_ids = [&](std::span<const Sample> part) {
        json body;
        body["graph"] = {{"nodes", graph_payload}};
        body["samples"] = json::array();
        for (const auto& s : part) {
            auto it = texts_.find(s.id);
            body["samples"].push_back(
                {{"id", s.id}, {"text", it == texts_.end() ? "" : it->second}});
        }
        return post_json("/annotate", body.dump());
    };

    // parses and validates one annotation; nullopt marks a malformed entry
    auto parse_one = [&](const json& ann,
                         const Sample& s) -> std::optional<AnnotatedSample> {
        AnnotatedSample out;
        out.sample = s;
        try {
            if (ann.at("id").get<std::string>() != s.id) return std::nullopt;
            out.label = ann.at("label").get<int>();
            for (const auto& [name, value] : ann.at("concepts").items()) {
                auto it = by_name.find(name);
                if (it == by_name.end()) return std::nullopt;
                out.concepts[graph.spec(it->second).id] = value.get<int>();
            }
            annotation_values(graph, out); // coverage and range validation
        } catch (const json::exception&) {
            return std::nullopt;
        } catch (const MissingAnnotation&) {
            return std::nullopt;
        }
        return out;
    };

    auto fetch = [&](std::span<const Sample> part)
        -> std::vector<std::optional<AnnotatedSample>> {
        json parsed;
        try {
            parsed = json::parse(request_ids(part));
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("bad JSON: ") + e.what());
        }
        std::vector<std::optional<AnnotatedSample>> out(part.size());
        if (!parsed.contains("annotations") || !parsed["annotations"].is_array()) {
            return out;
        }
        std::unordered_map<std::string, const json*> by_id;
        for (const auto& ann : parsed["annotations"]) {
            if (ann.contains("id") && ann["id"].is_string()) {
                by_id[ann["id"].get<std::string>()] = &ann;
            }
        }
        for (std::size_t i = 0; i < part.size(); ++i) {
            auto it = by_id.find(part[i].id);
            if (it != by_id.end()) out[i] = parse_one(*it->second, part[i]);
        }
        return out;
    };

    auto results = fetch(batch);
    // re-request malformed samples one at a time up to the retry cap
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t attempt = 0;
             !results[i] && attempt < config_.retry_cap; ++attempt) {
            auto retry = fetch({&batch[i], 1});
            results[i] = retry[0];
        }
        if (!results[i]) {
            throw MalformedResponse("sample '" + batch[i].id +
                                    "' unusable after retries");
        }
    }

    std::vector<AnnotatedSample> out;
    out.reserve(batch.size());
    for (auto& r : results) out.push_back(std::move(*r));
    cost_ += batch.size();
    return out;
}

std::vector<ConceptPair> RemoteOracle::generate_pairs(const ConceptGraph& graph,
                                                      const NodeId& node,
                                                      std::size_t count) {
    if (count == 0) return {};
    if (config_.max_cost != 0 && cost_.load() + count > config_.max_cost) {
        throw BudgetExhausted("pair budget reached");
    }
    const std::size_t j = graph.index_of(node);
    if (graph.is_root(j)) throw InvalidNode("cannot generate pairs for the root");

    std::vector<std::size_t> parent_nodes;
    json parents = json::array();
    for (std::size_t p : graph.parents[j]) {
        if (graph.is_root(p)) continue;
        parent_nodes.push_back(p);
        const auto& s = graph.spec(p);
        parents.push_back({{"name", s.name},
                           {"cardinality", s.cardinality},
                           {"description", s.description}});
    }

    auto fetch = [&](std::size_t n) {
        json body;
        const auto& s = graph.spec(j);
        body["node"] = {{"name", s.name},
                        {"cardinality", s.cardinality},
                        {"description", s.description}};
        body["parents"] = parents;
        body["count"] = n;
        json parsed;
        try {
            parsed = json::parse(post_json("/generate_pairs", body.dump()));
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("bad JSON: ") + e.what());
        }
        std::vector<ConceptPair> good;
        if (!parsed.contains("pairs") || !parsed["pairs"].is_array()) return good;
        for (const auto& jp : parsed["pairs"]) {
            ConceptPair pair;
            try {
                pair.value = jp.at("value").get<int>();
                if (pair.value < 0 ||
                    std::size_t(pair.value) >= graph.spec(j).cardinality) {
                    continue;
                }
                bool ok = true;
                for (std::size_t p : parent_nodes) {
                    const int v = jp.at("parents").at(graph.spec(p).name).get<int>();
                    ok = ok && v >= 0 &&
                         std::size_t(v) < graph.spec(p).cardinality;
                    pair.parent_values.push_back(v);
                }
                if (!ok) continue;
            } catch (const json::exception&) {
                continue;
            }
            good.push_back(std::move(pair));
        }
        return good;
    };

    std::vector<ConceptPair> pairs = fetch(count);
    for (std::size_t attempt = 0;
         pairs.size() < count && attempt < config_.retry_cap; ++attempt) {
        auto more = fetch(count - pairs.size());
        pairs.insert(pairs.end(), more.begin(), more.end());
    }
    if (pairs.size() < count) {
        throw MalformedResponse("pair generation short after retries");
    }
    pairs.resize(count);
    cost_ += count;
    return pairs;
}

// --- ingestion ---

std::vector<double> featurize_text(const std::string& text,
                                   const FeaturizerConfig& config) {
    std::vector<double> v(config.feature_dim, 0.0);
    if (text.empty()) return v;

    const std::size_t n = std::max<std::size_t>(1, config.ngram);
    const std::size_t grams = text.size() >= n ? text.size() - n + 1 : 1;
    for (std::size_t i = 0; i < grams; ++i) {
        const std::size_t len = std::min(n, text.size() - i);
        std::uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
        for (std::size_t c = 0; c < len; ++c) {
            h ^= static_cast<unsigned char>(text[i + c]);
            h *= 0x100000001b3ull;
        }
        v[h % config.feature_dim] += 1.0;
    }
    const double norm = std::sqrt(kernels::dot(v.data(), v.data(), v.size()));
    if (norm > 0.0) kernels::scale(1.0 / norm, v.data(), v.size());
    return v;
}

DatasetBundle ingest_text(const std::string& path,
                          const FeaturizerConfig& config,
                          const ConceptGraph* graph) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path + "'");

    DatasetBundle bundle;
    std::size_t explicit_dim = 0;
    bool saw_hashed = false;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!rec.contains("id") || !rec["id"].is_string()) {
            throw ParseError("line " + std::to_string(line_no) + ": missing id");
        }

        Sample s;
        s.id = rec["id"].get<std::string>();
        if (rec.contains("features")) {
            try {
                s.features = rec["features"].get<std::vector<double>>();
            } catch (const json::exception&) {
                throw ParseError("line " + std::to_string(line_no) +
                                 ": bad features array");
            }
            if (explicit_dim == 0) explicit_dim = s.features.size();
            if (s.features.size() != explicit_dim) {
                throw MixedDimensions("line " + std::to_string(line_no));
            }
            if (saw_hashed && explicit_dim != config.feature_dim) {
                throw MixedDimensions("explicit width " +
                                      std::to_string(explicit_dim) +
                                      " vs hashed " +
                                      std::to_string(config.feature_dim));
            }
        } else {
            const std::string text = rec.value("text", std::string{});
            s.features = featurize_text(text, config);
            saw_hashed = true;
            if (explicit_dim != 0 && explicit_dim != config.feature_dim) {
                throw MixedDimensions("hashed width " +
                                      std::to_string(config.feature_dim) +
                                      " vs explicit " +
                                      std::to_string(explicit_dim));
            }
        }

        const bool has_label = rec.contains("label") && rec["label"].is_number_integer();
        AnnotatedSample a;
        a.sample = s;
        bool concepts_ok = true;
        if (rec.contains("concepts") && rec["concepts"].is_object()) {
            for (const auto& [key, value] : rec["concepts"].items()) {
                if (!value.is_number_integer()) {
                    throw ParseError("line " + std::to_string(line_no) +
                                     ": concept '" + key + "' not an integer");
                }
                NodeId id = key;
                if (graph != nullptr && !graph->has_node(key)) {
                    // accept node names as keys too
                    for (const auto& spec : graph->nodes) {
                        if (spec.name == key) {
                            id = spec.id;
                            break;
                        }
                    }
                }
                a.concepts[id] = value.get<int>();
            }
        }
        if (graph != nullptr) {
            for (std::size_t i = 0; i < graph->size() && concepts_ok; ++i) {
                if (graph->is_root(i) || graph->is_output(i)) continue;
                concepts_ok = a.concepts.count(graph->spec(i).id) != 0;
            }
        }

        if (has_label && concepts_ok) {
            a.label = rec["label"].get<int>();
            bundle.labeled.push_back(std::move(a));
        } else {
            bundle.pool.push_back(std::move(s));
        }
    }
    return bundle;
}

} // namespace gcp
