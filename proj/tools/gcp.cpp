// Command-line front end: synthetic data generation, training, acquisition,
// counterfactual retraining, evaluation, the closed active-distillation loop
// and the benchmark suite.

#include "gcp/checkpoint.hpp"
#include "gcp/counterfactual.hpp"
#include "gcp/errors.hpp"
#include "gcp/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gcp;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.seed = j.value("seed", c.seed);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    return c;
}

SyntheticTask task_by_name(const std::string& name) {
    if (name == "theorem1") return theorem1_task();
    if (name == "confounder-minimal") return confounder_minimal_task(true);
    if (name == "confounder-independent") return confounder_minimal_task(false);
    throw Error("unknown task '" + name +
                "' (expected theorem1, confounder-minimal or "
                "confounder-independent)");
}

json sample_to_json(const Sample& s) {
    return {{"id", s.id}, {"features", s.features}};
}

json annotated_to_json(const AnnotatedSample& a) {
    json j = sample_to_json(a.sample);
    j["label"] = a.label;
    j["concepts"] = json::object();
    for (const auto& [id, v] : a.concepts) j["concepts"][id] = v;
    return j;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    for (const auto& row : rows) out << row.dump() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
}

// --- synth ---

int cmd_synth(const std::string& task_name, std::size_t n_pool,
              std::size_t n_test, std::optional<std::uint64_t> seed,
              const std::string& out_dir) {
    SyntheticTask task = task_by_name(task_name);
    if (seed) task.seed = *seed;
    SyntheticTeacher teacher(task);
    const DatasetBundle bundle = teacher.generate(n_pool, n_test);
    const ConceptGraph graph = build_graph(task.student_graph);

    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "graph.json", graph_description_json(graph));

    std::vector<json> pool_rows, test_rows, truth_rows;
    for (const auto& s : bundle.pool) pool_rows.push_back(sample_to_json(s));
    for (const auto& a : bundle.test) test_rows.push_back(annotated_to_json(a));
    // the pool's hidden annotations, for offline experiments with a replayed
    // oracle
    const auto annotated_pool = teacher.annotate(bundle.pool, graph);
    for (const auto& a : annotated_pool) truth_rows.push_back(annotated_to_json(a));

    write_jsonl(fs::path(out_dir) / "pool.jsonl", pool_rows);
    write_jsonl(fs::path(out_dir) / "test.jsonl", test_rows);
    write_jsonl(fs::path(out_dir) / "pool_truth.jsonl", truth_rows);

    std::cout << "task " << task.name << ": wrote " << bundle.pool.size()
              << " pool and " << bundle.test.size() << " test samples to "
              << out_dir << "\n";
    return 0;
}

// --- train ---

int cmd_train(const std::string& graph_path, const std::string& data_path,
              const std::string& out_dir, const json& train_json) {
    const ConceptGraph graph = load_graph(graph_path);
    const TrainConfig tc = train_config_from_json(train_json);

    FeaturizerConfig fz;
    fz.feature_dim = train_json.value("feature_dim", fz.feature_dim);
    const DatasetBundle bundle = ingest_text(data_path, fz, &graph);
    if (bundle.labeled.empty()) {
        throw EmptyDataset("no fully annotated records in '" + data_path + "'");
    }

    GcpModel model =
        make_model(graph, bundle.labeled.front().sample.features.size(), tc);
    const FitHistory history = fit(model, bundle.labeled, tc);

    fs::create_directories(out_dir);
    checkpoint_save(model, (fs::path(out_dir) / "checkpoint.bin").string());

    json h;
    h["total"] = history.total;
    h["per_node"] = json::array();
    for (const auto& epoch : history.per_node) h["per_node"].push_back(epoch);
    write_text(fs::path(out_dir) / "history.json", h.dump(2));

    std::cout << "trained on " << bundle.labeled.size() << " samples for "
              << history.total.size() << " epochs; final loss "
              << (history.total.empty() ? 0.0 : history.total.back()) << "\n";
    return 0;
}

// --- eval ---

int cmd_eval(const std::string& ckpt_path, const std::string& test_path,
             const std::string& out_dir, std::size_t feature_dim) {
    const GcpModel model = checkpoint_load(ckpt_path);
    FeaturizerConfig fz;
    fz.feature_dim = feature_dim ? feature_dim : model.input_dim;
    const DatasetBundle bundle = ingest_text(test_path, fz, &model.graph);
    if (bundle.labeled.empty()) throw EmptyTestSet("'" + test_path + "'");

    const EvalResult result = evaluate(model, bundle.labeled);
    json j;
    j["accuracy"] = result.accuracy;
    j["label_nll"] = result.label_nll;
    j["per_node_nll"] = json::object();
    for (std::size_t i = 0; i < model.graph.size(); ++i) {
        if (!model.graph.is_root(i)) {
            j["per_node_nll"][model.graph.spec(i).id] = result.per_node_nll[i];
        }
    }
    std::cout << j.dump(2) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "eval.json", j.dump(2));
    }
    return 0;
}

// --- acquire ---

int cmd_acquire(const std::string& ckpt_path, const std::string& pool_path,
                const std::string& labeled_path, const AcquisitionConfig& acq,
                const std::string& out_dir) {
    const GcpModel model = checkpoint_load(ckpt_path);
    FeaturizerConfig fz;
    fz.feature_dim = model.input_dim;
    DatasetBundle pool_bundle = ingest_text(pool_path, fz, &model.graph);
    std::vector<Sample> pool = std::move(pool_bundle.pool);
    for (const auto& a : pool_bundle.labeled) pool.push_back(a.sample);

    std::vector<AnnotatedSample> labeled;
    if (!labeled_path.empty()) {
        labeled = ingest_text(labeled_path, fz, &model.graph).labeled;
    }

    PoolScores scores;
    const SelectionResult sel = acquire(model, pool, labeled, acq, &scores);

    json j;
    j["budget"] = acq.budget;
    j["candidate_k"] = acq.effective_k();
    j["p_norm"] = acq.p_norm;
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
    json e_unc = json::object();
    for (const auto& e : scores.entries) e_unc[e.id] = e.e_unc;
    j["e_unc"] = std::move(e_unc);

    std::cout << j.dump(2) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "acquisition.json", j.dump(2));
    }
    return 0;
}

// --- retrain ---

int cmd_retrain(const std::string& ckpt_path, const std::string& data_path,
                std::size_t retrain_budget, std::size_t augment_pairs,
                const std::string& oracle_kind, const std::string& out_dir,
                const json& train_json) {
    GcpModel model = checkpoint_load(ckpt_path);
    FeaturizerConfig fz;
    fz.feature_dim = model.input_dim;
    const DatasetBundle bundle = ingest_text(data_path, fz, &model.graph);
    if (bundle.labeled.empty()) {
        throw EmptyDataset("no fully annotated records in '" + data_path + "'");
    }

    const DeltaReport report = delta_scores(model, bundle.labeled);
    const auto retrain_set =
        select_retrain_set(model.graph, report.delta, retrain_budget);

    std::unique_ptr<Oracle> oracle;
    if (oracle_kind == "remote") {
        oracle = std::make_unique<RemoteOracle>(RemoteOracleConfig{});
    } else if (oracle_kind.rfind("synthetic:", 0) == 0) {
        auto teacher = std::make_unique<SyntheticTeacher>(
            task_by_name(oracle_kind.substr(10)));
        oracle = std::move(teacher);
    }

    std::map<NodeId, std::vector<ConceptPair>> augmented;
    if (augment_pairs > 0 && oracle) {
        for (const auto& id : retrain_set) {
            const std::size_t j = model.graph.index_of(id);
            const bool concept_only = std::none_of(
                model.graph.parents[j].begin(), model.graph.parents[j].end(),
                [&](std::size_t p) { return model.graph.is_root(p); });
            if (concept_only) {
                augmented[id] =
                    augment_node_data(*oracle, model.graph, id, augment_pairs);
            }
        }
    }

    const TrainConfig tc = train_config_from_json(train_json);
    retrain_submodules(model, retrain_set, bundle.labeled, augmented, tc);

    json j;
    j["delta"] = json::object();
    for (std::size_t i = 0; i < model.graph.size(); ++i) {
        if (!model.graph.is_root(i)) {
            j["delta"][model.graph.spec(i).id] = report.delta[i];
        }
    }
    j["retrain_set"] = retrain_set;
    j["augment_pairs"] = augment_pairs;
    std::cout << j.dump(2) << "\n";

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "delta_report.json", j.dump(2));
        checkpoint_save(model,
                        (fs::path(out_dir) / "checkpoint_retrained.bin").string());
    }
    return 0;
}

// --- loop ---

int cmd_loop(const json& cfg, const std::string& out_dir) {
    LoopConfig loop;
    loop.rounds = cfg.value("rounds", loop.rounds);
    loop.acquisition.budget = cfg.value("budget", loop.acquisition.budget);
    loop.acquisition.candidate_k =
        cfg.value("candidate_k", loop.acquisition.candidate_k);
    loop.acquisition.p_norm = cfg.value("p_norm", loop.acquisition.p_norm);
    loop.acquisition.medoid_iters =
        cfg.value("medoid_iters", loop.acquisition.medoid_iters);
    loop.retrain_budget = cfg.value("retrain_budget", loop.retrain_budget);
    loop.retrain_epochs = cfg.value("retrain_epochs", loop.retrain_epochs);
    loop.retrain_learning_rate =
        cfg.value("retrain_learning_rate", loop.retrain_learning_rate);
    loop.augment_pairs = cfg.value("augment_pairs", loop.augment_pairs);
    loop.retrain_output_head =
        cfg.value("retrain_output_head", loop.retrain_output_head);
    loop.reinit_each_round = cfg.value("reinit", loop.reinit_each_round);
    loop.plateau_epsilon = cfg.value("plateau_epsilon", loop.plateau_epsilon);
    loop.plateau_window = cfg.value("plateau_window", loop.plateau_window);
    loop.delta_holdout_fraction =
        cfg.value("delta_holdout_fraction", loop.delta_holdout_fraction);
    loop.seed = cfg.value("seed", loop.seed);
    loop.train = train_config_from_json(cfg.value("train", json::object()));
    loop.acquisition.seed = loop.seed;
    loop.out_dir = out_dir;
    const std::string mode = cfg.value("mode", std::string("consensus"));
    if (mode == "random") {
        loop.mode = AcquisitionMode::Random;
    } else if (mode != "consensus") {
        throw Error("unknown acquisition mode '" + mode + "'");
    }

    if (cfg.contains("task")) {
        SyntheticTask task = task_by_name(cfg["task"].get<std::string>());
        task.seed = cfg.value("task_seed", task.seed);
        SyntheticTeacher teacher(task);
        const DatasetBundle bundle =
            teacher.generate(cfg.value("pool", std::size_t{1000}),
                             cfg.value("test", std::size_t{1000}));
        const ConceptGraph graph = build_graph(task.student_graph);
        const LoopResult result = run_active_loop(graph, bundle, teacher, loop);
        std::cout << "ran " << result.records.size() << " rounds; final accuracy "
                  << (result.records.empty() ? 0.0
                                             : result.records.back().accuracy)
                  << "; oracle cost " << teacher.cost() << "\n";
        return 0;
    }

    // file-backed datasets with a remote annotator
    const ConceptGraph graph = load_graph(cfg.at("graph").get<std::string>());
    FeaturizerConfig fz;
    fz.feature_dim = cfg.value("feature_dim", fz.feature_dim);
    DatasetBundle bundle =
        ingest_text(cfg.at("pool_data").get<std::string>(), fz, &graph);
    const DatasetBundle test_bundle =
        ingest_text(cfg.at("test_data").get<std::string>(), fz, &graph);
    bundle.test = test_bundle.labeled;

    RemoteOracleConfig rc;
    if (cfg.contains("oracle")) {
        const auto& oc = cfg["oracle"];
        rc.endpoint = oc.value("endpoint", rc.endpoint);
        rc.timeout_seconds = oc.value("timeout_seconds", rc.timeout_seconds);
        rc.retry_cap = oc.value("retry_cap", rc.retry_cap);
        rc.max_cost = oc.value("max_cost", rc.max_cost);
        rc.max_inflight = oc.value("max_inflight", rc.max_inflight);
    }
    RemoteOracle oracle(rc);
    // the annotator needs the raw text of each pool sample
    {
        std::ifstream in(cfg.at("pool_data").get<std::string>());
        std::string line;
        while (std::getline(in, line)) {
            if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
            const json rec = json::parse(line);
            if (rec.contains("id") && rec.contains("text")) {
                oracle.register_text(rec["id"].get<std::string>(),
                                     rec["text"].get<std::string>());
            }
        }
    }
    const LoopResult result = run_active_loop(graph, bundle, oracle, loop);
    std::cout << "ran " << result.records.size() << " rounds; final accuracy "
              << (result.records.empty() ? 0.0 : result.records.back().accuracy)
              << "; oracle cost " << oracle.cost() << "\n";
    return 0;
}

// --- bench ---

int cmd_bench(const BenchConfig& cfg, const std::string& out_dir) {
    const TheoremReport report = bench_theorems(cfg);
    const std::string text = theorem_report_json(report);
    std::cout << text << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "theorem_report.json", text);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-of-concept-predictors active distillation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed, "seed override");
    app.add_option("--out", out_dir, "output directory");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string task_name = "theorem1";
    std::size_t n_pool = 1000, n_test = 1000;
    synth->add_option("--task", task_name, "theorem1 | confounder-minimal | "
                                           "confounder-independent");
    synth->add_option("--pool", n_pool, "pool size");
    synth->add_option("--test", n_test, "test size");

    // train
    auto* train = app.add_subcommand("train", "fit a model on annotated data");
    std::string graph_path, data_path;
    train->add_option("--graph", graph_path, "graph spec JSON")->required();
    train->add_option("--data", data_path, "annotated JSONL")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt_path, test_path;
    std::size_t feature_dim = 0;
    eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    eval->add_option("--test", test_path, "annotated JSONL")->required();
    eval->add_option("--feature-dim", feature_dim, "featurizer width override");

    // acquire
    auto* acq_cmd = app.add_subcommand("acquire", "score a pool and select a batch");
    std::string pool_path, labeled_path;
    AcquisitionConfig acq;
    acq_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    acq_cmd->add_option("--pool", pool_path, "unlabeled JSONL")->required();
    acq_cmd->add_option("--labeled", labeled_path, "annotated JSONL");
    acq_cmd->add_option("--budget", acq.budget, "batch size B")->required();
    acq_cmd->add_option("--candidate-k", acq.candidate_k,
                        "per-criterion candidate size (default 3B)");
    acq_cmd->add_option("--p-norm", acq.p_norm, "p of the weighted norms");
    acq_cmd->add_option("--medoid-iters", acq.medoid_iters,
                        "medoid refinement iterations");

    // retrain
    auto* retrain = app.add_subcommand("retrain",
                                       "counterfactual sub-module retraining");
    std::size_t retrain_budget = 1, augment_pairs = 0;
    std::string oracle_kind;
    retrain->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    retrain->add_option("--data", data_path, "annotated JSONL")->required();
    retrain->add_option("--retrain-budget", retrain_budget, "modules to retrain");
    retrain->add_option("--augment-pairs", augment_pairs,
                        "oracle pairs per retrained node");
    retrain->add_option("--oracle", oracle_kind,
                        "remote | synthetic:<task> (for augmentation)");

    // loop
    auto* loop = app.add_subcommand("loop", "run the closed active loop");

    // bench
    auto* bench = app.add_subcommand("bench", "theorem benchmark suite");
    BenchConfig bench_cfg;
    bool skip_risk = false, skip_topb = false, skip_scaling = false;
    bench->add_option("--seeds", bench_cfg.seeds, "seeds for the risk ordering");
    bench->add_option("--train-samples", bench_cfg.n_train, "training samples");
    bench->add_option("--test-samples", bench_cfg.n_test, "test samples");
    bench->add_flag("--skip-risk", skip_risk, "skip the risk-ordering run");
    bench->add_flag("--skip-topb", skip_topb, "skip the top-b check");
    bench->add_flag("--skip-scaling", skip_scaling, "skip the timing grid");

    CLI11_PARSE(app, argc, argv);

    try {
        json cfg = json::object();
        if (!config_path.empty()) cfg = load_json_file(config_path);
        if (seed) cfg["seed"] = *seed;

        if (synth->parsed()) {
            return cmd_synth(task_name, n_pool, n_test, seed,
                             out_dir.empty() ? "synth_out" : out_dir);
        }
        if (train->parsed()) {
            json tc = cfg.value("train", json::object());
            if (seed) tc["seed"] = *seed;
            if (cfg.contains("feature_dim")) {
                tc["feature_dim"] = cfg["feature_dim"];
            }
            return cmd_train(graph_path, data_path,
                             out_dir.empty() ? "train_out" : out_dir, tc);
        }
        if (eval->parsed()) {
            return cmd_eval(ckpt_path, test_path, out_dir, feature_dim);
        }
        if (acq_cmd->parsed()) {
            if (seed) acq.seed = *seed;
            return cmd_acquire(ckpt_path, pool_path, labeled_path, acq, out_dir);
        }
        if (retrain->parsed()) {
            json tc = cfg.value("train", json::object());
            if (seed) tc["seed"] = *seed;
            return cmd_retrain(ckpt_path, data_path, retrain_budget,
                               augment_pairs, oracle_kind, out_dir, tc);
        }
        if (loop->parsed()) {
            if (config_path.empty()) throw Error("loop requires --config");
            return cmd_loop(cfg, out_dir.empty() ? "loop_out" : out_dir);
        }
        if (bench->parsed()) {
            if (seed) bench_cfg.base_seed = *seed;
            bench_cfg.run_risk_ordering = !skip_risk;
            bench_cfg.run_top_b = !skip_topb;
            bench_cfg.run_scaling = !skip_scaling;
            if (cfg.contains("train")) {
                bench_cfg.train = train_config_from_json(cfg["train"]);
            }
            return cmd_bench(bench_cfg, out_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
