#include "gcp/pipeline.hpp"

#include "gcp/checkpoint.hpp"
#include "gcp/errors.hpp"
#include "gcp/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gcp {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0); }

// shortest exact decimal for CSV cells
std::string decimal17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write failure on '" + path.string() + "'");
}

json selection_json(const SelectionResult& sel, const PoolScores& scores,
                    std::size_t round, const char* mode) {
    json j;
    j["round"] = round;
    j["mode"] = mode;
    j["swu_set"] = sel.swu_set;
    j["grad_set"] = sel.grad_set;
    j["cover_set"] = sel.cover_set;
    j["consensus"] = sel.consensus;
    j["fill_trace"] = json::array();
    for (const auto& f : sel.fill_trace) {
        j["fill_trace"].push_back(
            {{"id", f.id},
             {"source", f.from_intersection ? "intersection" : "union_fill"}});
    }
    std::set<std::string> wanted;
    wanted.insert(sel.swu_set.begin(), sel.swu_set.end());
    wanted.insert(sel.grad_set.begin(), sel.grad_set.end());
    wanted.insert(sel.cover_set.begin(), sel.cover_set.end());
    json e_unc = json::object();
    for (const auto& e : scores.entries) {
        if (wanted.count(e.id)) e_unc[e.id] = e.e_unc;
    }
    j["e_unc"] = std::move(e_unc);
    return j;
}

} // namespace

EvalResult evaluate(const GcpModel& model,
                    std::span<const AnnotatedSample> test) {
    if (test.empty()) throw EmptyTestSet("evaluation needs samples");
    EvalResult result;
    std::size_t hits = 0;
    double nll = 0.0;
    for (const auto& s : test) {
        const auto p = predict_label(model, s.sample.features);
        if (argmax_lowest(p) == s.label) ++hits;
        nll += -std::log(clamp_prob(p[static_cast<std::size_t>(s.label)]));
    }
    result.accuracy = double(hits) / double(test.size());
    result.label_nll = nll / double(test.size());
    result.per_node_nll =
        batch_loss(model, test, PropagationMode::TeacherForced).per_node;
    return result;
}

ConceptGraph flatten_to_cbm(const ConceptGraph& graph) {
    GraphDescription d;
    d.nodes = graph.nodes;
    const NodeId root_id = graph.spec(graph.root).id;
    const NodeId out_id = graph.spec(graph.output).id;
    for (const auto& n : graph.nodes) {
        if (n.id == root_id) continue;
        if (n.id == out_id) continue;
        d.edges.emplace_back(root_id, n.id);
        d.edges.emplace_back(n.id, out_id);
    }
    return build_graph(d);
}

ConceptGraph label_only_graph(const ConceptGraph& graph) {
    GraphDescription d;
    d.nodes = {graph.spec(graph.root), graph.spec(graph.output)};
    d.edges = {{graph.spec(graph.root).id, graph.spec(graph.output).id}};
    return build_graph(d);
}

std::size_t matched_hidden_dim(std::size_t target_params, std::size_t input_dim,
                               std::size_t latent_dim, std::size_t n_labels) {
    // label-only model: f0 = (H x d + H) + (latent x H + latent),
    // head = (H x latent + H) + (labels x H + labels)
    const double per_h = double(input_dim + 1 + 2 * latent_dim + 1 + n_labels);
    const double fixed = double(latent_dim + n_labels);
    const double raw = (double(target_params) - fixed) / per_h;
    return std::max<std::size_t>(4, std::size_t(std::llround(raw)));
}

LoopResult run_active_loop(const ConceptGraph& graph, const DatasetBundle& data,
                           Oracle& oracle, const LoopConfig& config) {
    if (config.rounds == 0) throw Error("rounds must be >= 1");
    if (config.acquisition.budget == 0) throw Error("budget must be >= 1");
    if (data.pool.empty()) throw EmptyDataset("loop needs an unlabeled pool");
    if (config.acquisition.budget > data.pool.size()) {
        throw BudgetExceedsPool(std::to_string(config.acquisition.budget) +
                                " vs pool of " +
                                std::to_string(data.pool.size()));
    }
    const std::size_t input_dim = data.pool.front().features.size();

    const bool emit = !config.out_dir.empty();
    if (emit) fs::create_directories(config.out_dir);

    GcpModel model = make_model(graph, input_dim, config.train);
    std::vector<AnnotatedSample> labeled = data.labeled;
    std::vector<Sample> pool = data.pool;
    const double total_samples = double(data.pool.size() + data.labeled.size());

    Rng warm_rng(config.seed ^ 0x77aa11ull);
    LoopResult result;

    for (std::size_t round = 1; round <= config.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        if (pool.empty()) break;
        const std::size_t budget =
            std::min(config.acquisition.budget, pool.size());

        // --- select ---
        std::vector<std::string> chosen;
        const bool random_pick = (round == 1 && labeled.empty()) ||
                                 config.mode == AcquisitionMode::Random;
        if (random_pick) {
            std::vector<std::size_t> order(pool.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            warm_rng.shuffle(order);
            for (std::size_t i = 0; i < budget; ++i) {
                chosen.push_back(pool[order[i]].id);
            }
            if (emit) {
                json j;
                j["round"] = round;
                j["mode"] = (round == 1 && config.mode ==
                                               AcquisitionMode::Consensus)
                                ? "warm_start"
                                : "random";
                j["consensus"] = chosen;
                write_file(fs::path(config.out_dir) /
                               ("acquisition_round_" + std::to_string(round) +
                                ".json"),
                           j.dump(2));
            }
        } else {
            AcquisitionConfig acq = config.acquisition;
            acq.budget = budget;
            PoolScores scores;
            const SelectionResult sel =
                acquire(model, pool, labeled, acq, &scores);
            chosen = sel.consensus;
            if (emit) {
                write_file(fs::path(config.out_dir) /
                               ("acquisition_round_" + std::to_string(round) +
                                ".json"),
                           selection_json(sel, scores, round, "consensus").dump(2));
            }
        }

        // --- annotate and move out of the pool ---
        std::vector<Sample> batch;
        {
            std::set<std::string> chosen_set(chosen.begin(), chosen.end());
            for (const auto& s : pool) {
                if (chosen_set.count(s.id)) batch.push_back(s);
            }
            std::vector<Sample> rest;
            rest.reserve(pool.size() - batch.size());
            for (auto& s : pool) {
                if (!chosen_set.count(s.id)) rest.push_back(std::move(s));
            }
            pool = std::move(rest);
        }
        const auto annotated = oracle.annotate(batch, graph);
        labeled.insert(labeled.end(), annotated.begin(), annotated.end());

        // --- fit on everything annotated so far ---
        if (config.reinit_each_round) {
            model = make_model(graph, input_dim, config.train);
        }
        fit(model, labeled, config.train);

        // --- counterfactual sub-module retraining ---
        RoundRecord record;
        if (config.retrain_budget > 0) {
            std::span<const AnnotatedSample> delta_data(labeled);
            if (config.delta_holdout_fraction > 0.0 && labeled.size() > 1) {
                const auto keep = std::max<std::size_t>(
                    1, std::size_t(std::ceil(config.delta_holdout_fraction *
                                             double(labeled.size()))));
                delta_data = delta_data.subspan(labeled.size() - keep);
            }
            const DeltaReport report = delta_scores(model, delta_data);
            record.delta = report.delta;
            record.retrain_set =
                select_retrain_set(graph, report.delta, config.retrain_budget);

            std::vector<double> before_nll;
            if (emit && !data.test.empty()) {
                before_nll = evaluate(model, data.test).per_node_nll;
            }

            std::map<NodeId, std::vector<ConceptPair>> augmented;
            if (config.augment_pairs > 0) {
                for (const auto& id : record.retrain_set) {
                    const std::size_t j = graph.index_of(id);
                    const bool concept_parents_only = std::none_of(
                        graph.parents[j].begin(), graph.parents[j].end(),
                        [&](std::size_t p) { return graph.is_root(p); });
                    if (concept_parents_only) {
                        augmented[id] = augment_node_data(oracle, graph, id,
                                                          config.augment_pairs);
                    }
                }
            }
            TrainConfig rt = config.train;
            if (config.retrain_epochs > 0) rt.max_epochs = config.retrain_epochs;
            if (config.retrain_learning_rate > 0.0) {
                rt.learning_rate = config.retrain_learning_rate;
            }
            retrain_submodules(model, record.retrain_set, labeled, augmented, rt);
            if (config.retrain_output_head) {
                const NodeId head = graph.spec(graph.output).id;
                retrain_submodules(model, {&head, 1}, labeled, augmented, rt);
            }

            if (emit) {
                json j;
                j["round"] = round;
                json delta = json::object();
                for (std::size_t i = 0; i < graph.size(); ++i) {
                    if (!graph.is_root(i)) {
                        delta[graph.spec(i).id] = report.delta[i];
                    }
                }
                j["delta"] = std::move(delta);
                j["retrain_set"] = record.retrain_set;
                j["head_retrained"] = config.retrain_output_head;
                j["augment_pairs"] = config.augment_pairs;
                if (!before_nll.empty()) {
                    const auto after_nll =
                        evaluate(model, data.test).per_node_nll;
                    json mods = json::object();
                    for (const auto& id : record.retrain_set) {
                        const std::size_t i = graph.index_of(id);
                        mods[id] = {{"held_out_nll_before", before_nll[i]},
                                    {"held_out_nll_after", after_nll[i]}};
                    }
                    j["retrained_modules"] = std::move(mods);
                }
                write_file(fs::path(config.out_dir) /
                               ("delta_round_" + std::to_string(round) + ".json"),
                           j.dump(2));
            }
        }

        // --- evaluate against the fixed test set ---
        record.round = round;
        record.annotated_count = labeled.size();
        record.annotated_fraction = double(labeled.size()) / total_samples;
        record.oracle_cost = oracle.cost();
        if (!data.test.empty()) {
            const EvalResult eval = evaluate(model, data.test);
            record.accuracy = eval.accuracy;
            record.label_nll = eval.label_nll;
            record.per_node_nll = eval.per_node_nll;
        }
        record.wall_clock_ms =
            std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - t0)
                .count();
        result.records.push_back(std::move(record));

        if (emit) {
            checkpoint_save(model,
                            (fs::path(config.out_dir) /
                             ("checkpoint_round_" + std::to_string(round) +
                              ".bin"))
                                .string());
        }

        // --- stop criteria ---
        if (config.plateau_epsilon > 0.0 &&
            result.records.size() > config.plateau_window) {
            const double now = result.records.back().accuracy;
            const double past =
                result.records[result.records.size() - 1 - config.plateau_window]
                    .accuracy;
            if (now - past < config.plateau_epsilon) break;
        }
    }

    if (emit) emit_metrics(result.records, graph, config.out_dir);
    result.model = std::move(model);
    return result;
}

void emit_metrics(std::span<const RoundRecord> records,
                  const ConceptGraph& graph, const std::string& out_dir) {
    fs::create_directories(out_dir);

    std::vector<std::size_t> scored;
    for (std::size_t i : graph.topo_order) {
        if (!graph.is_root(i)) scored.push_back(i);
    }

    std::ostringstream csv;
    csv << "round,annotated_count,annotated_fraction,accuracy,label_nll,"
           "oracle_cost";
    for (std::size_t i : scored) csv << ",nll_" << graph.spec(i).id;
    for (std::size_t i : scored) csv << ",delta_" << graph.spec(i).id;
    csv << ",retrain_set\n";
    for (const auto& r : records) {
        csv << r.round << "," << r.annotated_count << ","
            << decimal17(r.annotated_fraction) << "," << decimal17(r.accuracy)
            << "," << decimal17(r.label_nll) << "," << r.oracle_cost;
        for (std::size_t i : scored) {
            csv << ","
                << (r.per_node_nll.empty() ? "" : decimal17(r.per_node_nll[i]));
        }
        for (std::size_t i : scored) {
            csv << "," << (r.delta.empty() ? "" : decimal17(r.delta[i]));
        }
        csv << ",";
        for (std::size_t k = 0; k < r.retrain_set.size(); ++k) {
            if (k) csv << ";";
            csv << r.retrain_set[k];
        }
        csv << "\n";
    }
    write_file(fs::path(out_dir) / "metrics.csv", csv.str());

    json mirror = json::array();
    for (const auto& r : records) {
        json row;
        row["round"] = r.round;
        row["annotated_count"] = r.annotated_count;
        row["annotated_fraction"] = r.annotated_fraction;
        row["accuracy"] = r.accuracy;
        row["label_nll"] = r.label_nll;
        row["oracle_cost"] = r.oracle_cost;
        json nll = json::object(), delta = json::object();
        for (std::size_t i : scored) {
            if (!r.per_node_nll.empty()) {
                nll[graph.spec(i).id] = r.per_node_nll[i];
            }
            if (!r.delta.empty()) delta[graph.spec(i).id] = r.delta[i];
        }
        row["per_node_nll"] = std::move(nll);
        row["delta"] = std::move(delta);
        row["retrain_set"] = r.retrain_set;
        mirror.push_back(std::move(row));
    }
    write_file(fs::path(out_dir) / "metrics.json", mirror.dump(2));

    std::ostringstream timings;
    timings << "round,wall_clock_ms\n";
    for (const auto& r : records) {
        timings << r.round << "," << decimal17(r.wall_clock_ms) << "\n";
    }
    write_file(fs::path(out_dir) / "timings.csv", timings.str());
}

// --- theorem benchmarks ---

namespace {

ConceptGraph chain_graph_of(std::size_t total_nodes) {
    GraphDescription d;
    for (std::size_t i = 0; i < total_nodes; ++i) {
        NodeSpec s;
        s.id = i == 0 ? "x" : (i + 1 == total_nodes ? "y" : "c" + std::to_string(i));
        s.name = s.id;
        s.cardinality = i == 0 ? 0 : 2;
        d.nodes.push_back(std::move(s));
    }
    for (std::size_t i = 0; i + 1 < total_nodes; ++i) {
        d.edges.emplace_back(d.nodes[i].id, d.nodes[i + 1].id);
    }
    return build_graph(d);
}

std::vector<AnnotatedSample> random_annotated_set(Rng& rng,
                                                  const ConceptGraph& g,
                                                  std::size_t input_dim,
                                                  std::size_t n) {
    std::vector<AnnotatedSample> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        AnnotatedSample a;
        a.sample.id = "b" + std::to_string(s);
        a.sample.features.resize(input_dim);
        for (double& v : a.sample.features) v = rng.uniform(-1.0, 1.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g.is_root(i)) continue;
            const int v = int(rng.next_below(g.spec(i).cardinality));
            if (g.is_output(i)) {
                a.label = v;
            } else {
                a.concepts[g.spec(i).id] = v;
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

double time_delta_scores(const GcpModel& model,
                         const std::vector<AnnotatedSample>& data) {
    using clock = std::chrono::steady_clock;
    delta_scores(model, data); // warm up
    const auto once = [&] {
        const auto t0 = clock::now();
        delta_scores(model, data);
        return std::chrono::duration<double>(clock::now() - t0).count();
    };
    const double first = once();
    const std::size_t reps = std::clamp<std::size_t>(
        std::size_t(0.1 / std::max(first, 1e-6)), 1, 40);
    double total = first;
    for (std::size_t r = 1; r < reps; ++r) total += once();
    return total / double(reps);
}

double loglog_slope(const std::vector<std::pair<std::size_t, double>>& pts) {
    const double n = double(pts.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : pts) {
        const double lx = std::log(double(x)), ly = std::log(y);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace

TheoremReport bench_theorems(const BenchConfig& config) {
    TheoremReport report;

    if (config.run_risk_ordering) {
        for (std::size_t s = 0; s < config.seeds; ++s) {
            SyntheticTask task = theorem1_task();
            task.seed = config.base_seed + 1000 * s;
            SyntheticTeacher teacher(task);
            const DatasetBundle bundle =
                teacher.generate(config.n_train, config.n_test);

            const ConceptGraph gcp_graph = build_graph(task.student_graph);
            const auto train_data = teacher.annotate(bundle.pool, gcp_graph);

            TrainConfig tc = config.train;
            tc.seed = config.base_seed + 1000 * s;

            GcpModel gcp = make_model(gcp_graph, task.feature_dim, tc);
            fit(gcp, train_data, tc);

            const ConceptGraph cbm_graph = flatten_to_cbm(gcp_graph);
            GcpModel cbm = make_model(cbm_graph, task.feature_dim, tc);
            fit(cbm, train_data, tc);

            const ConceptGraph mlp_graph = label_only_graph(gcp_graph);
            TrainConfig mc = tc;
            mc.hidden_dim = matched_hidden_dim(
                gcp.param_count(), task.feature_dim, tc.latent_dim,
                gcp_graph.spec(gcp_graph.output).cardinality);
            GcpModel mlp = make_model(mlp_graph, task.feature_dim, mc);
            fit(mlp, train_data, mc);

            const EvalResult eg = evaluate(gcp, bundle.test);
            const EvalResult ec = evaluate(cbm, bundle.test);
            const EvalResult em = evaluate(mlp, bundle.test);
            report.per_seed.push_back({eg.label_nll, ec.label_nll, em.label_nll,
                                       eg.accuracy, ec.accuracy, em.accuracy});
        }
        auto& m = report.mean;
        for (const auto& row : report.per_seed) {
            m.gcp_nll += row.gcp_nll;
            m.cbm_nll += row.cbm_nll;
            m.mlp_nll += row.mlp_nll;
            m.gcp_acc += row.gcp_acc;
            m.cbm_acc += row.cbm_acc;
            m.mlp_acc += row.mlp_acc;
        }
        const double n = double(report.per_seed.size());
        m.gcp_nll /= n;
        m.cbm_nll /= n;
        m.mlp_nll /= n;
        m.gcp_acc /= n;
        m.cbm_acc /= n;
        m.mlp_acc /= n;
        report.nll_ordered = m.gcp_nll < m.cbm_nll && m.cbm_nll < m.mlp_nll;
        report.acc_ordered = m.gcp_acc >= m.cbm_acc && m.cbm_acc >= m.mlp_acc;
        report.acc_margin = 100.0 * (m.gcp_acc - m.mlp_acc);
    }

    if (config.run_top_b) {
        Rng rng(config.base_seed * 77 + 5);
        report.top_b_trials = 100;
        for (std::size_t trial = 0; trial < report.top_b_trials; ++trial) {
            const std::size_t concepts = 1 + rng.next_below(8); // |V| <= 10
            GraphDescription d;
            d.nodes.push_back({"x", "x", 0, ""});
            for (std::size_t c = 0; c < concepts; ++c) {
                const NodeId id = "c" + std::to_string(c);
                d.nodes.push_back({id, id, 2, ""});
                d.edges.emplace_back("x", id);
                d.edges.emplace_back(id, "y");
            }
            d.nodes.push_back({"y", "y", 2, ""});
            const ConceptGraph g = build_graph(d);

            std::vector<double> delta(g.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!g.is_root(i)) delta[i] = rng.uniform(-0.5, 1.0);
            }
            const std::size_t b = 1 + rng.next_below(4);

            const auto chosen = select_retrain_set(g, delta, b);
            double total = 0.0;
            for (const auto& id : chosen) total += delta[g.index_of(id)];

            // exhaustive search over concept subsets of size at most b
            std::vector<std::size_t> candidates;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!g.is_root(i) && !g.is_output(i)) candidates.push_back(i);
            }
            double best = 0.0;
            const std::size_t masks = std::size_t{1} << candidates.size();
            for (std::size_t mask = 0; mask < masks; ++mask) {
                if (std::size_t(std::popcount(mask)) > b) continue;
                double sum = 0.0;
                for (std::size_t i = 0; i < candidates.size(); ++i) {
                    if (mask & (std::size_t{1} << i)) sum += delta[candidates[i]];
                }
                best = std::max(best, sum);
            }
            if (std::fabs(total - best) <= 1e-12) ++report.top_b_agreements;
        }
    }

    if (config.run_scaling) {
        TrainConfig tc;
        tc.hidden_dim = 16;
        tc.latent_dim = 8;
        tc.seed = 11;
        Rng rng(config.base_seed * 31 + 9);

        const ConceptGraph g8 = chain_graph_of(8);
        const GcpModel m8 = make_model(g8, 6, tc);
        for (std::size_t n : {100u, 200u, 400u, 800u}) {
            const auto data = random_annotated_set(rng, g8, 6, n);
            report.n_timing.emplace_back(n, time_delta_scores(m8, data));
        }
        report.n_slope = loglog_slope(report.n_timing);

        for (std::size_t v : {4u, 8u, 16u}) {
            const ConceptGraph g = chain_graph_of(v);
            const GcpModel m = make_model(g, 6, tc);
            const auto data = random_annotated_set(rng, g, 6, 400);
            report.v_timing.emplace_back(v, time_delta_scores(m, data));
        }
        report.v_slope = loglog_slope(report.v_timing);
    }
    return report;
}

std::string theorem_report_json(const TheoremReport& report) {
    json j;
    json rows = json::array();
    for (const auto& r : report.per_seed) {
        rows.push_back({{"gcp_nll", r.gcp_nll},
                        {"cbm_nll", r.cbm_nll},
                        {"mlp_nll", r.mlp_nll},
                        {"gcp_acc", r.gcp_acc},
                        {"cbm_acc", r.cbm_acc},
                        {"mlp_acc", r.mlp_acc}});
    }
    j["risk_ordering"] = {{"per_seed", rows},
                          {"mean",
                           {{"gcp_nll", report.mean.gcp_nll},
                            {"cbm_nll", report.mean.cbm_nll},
                            {"mlp_nll", report.mean.mlp_nll},
                            {"gcp_acc", report.mean.gcp_acc},
                            {"cbm_acc", report.mean.cbm_acc},
                            {"mlp_acc", report.mean.mlp_acc}}},
                          {"nll_ordered", report.nll_ordered},
                          {"acc_ordered", report.acc_ordered},
                          {"acc_margin_points", report.acc_margin}};
    j["top_b"] = {{"trials", report.top_b_trials},
                  {"agreements", report.top_b_agreements}};
    json nt = json::array(), vt = json::array();
    for (const auto& [n, t] : report.n_timing) {
        nt.push_back({{"n", n}, {"seconds", t}});
    }
    for (const auto& [v, t] : report.v_timing) {
        vt.push_back({{"nodes", v}, {"seconds", t}});
    }
    j["scaling"] = {{"n_timing", nt},
                    {"v_timing", vt},
                    {"n_slope", report.n_slope},
                    {"v_slope", report.v_slope}};
    return j.dump(2);
}

} // namespace gcp
