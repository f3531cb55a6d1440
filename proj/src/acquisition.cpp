#include "gcp/acquisition.hpp"

#include "gcp/errors.hpp"
#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

namespace gcp {

namespace {

namespace k = gcp::kernels;

constexpr double kInf = std::numeric_limits<double>::infinity();

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0); }

void validate_distribution(std::span<const double> dist) {
    if (dist.empty()) throw InvalidDistribution("empty distribution");
    double total = 0.0;
    for (double v : dist) {
        if (!(v >= -1e-12) || !std::isfinite(v)) {
            throw InvalidDistribution("negative or non-finite entry");
        }
        total += v;
    }
    if (std::fabs(total - 1.0) > 1e-6) {
        std::ostringstream os;
        os << "sums to " << total;
        throw InvalidDistribution(os.str());
    }
}

// ranks ids by descending score, ascending id on ties
std::vector<std::string> ranked_ids(
    const std::vector<std::pair<std::string, double>>& scored) {
    auto sorted = scored;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> ids;
    ids.reserve(sorted.size());
    for (auto& [id, s] : sorted) ids.push_back(std::move(id));
    return ids;
}

} // namespace

double node_entropy(std::span<const double> dist) {
    validate_distribution(dist);
    double h = 0.0;
    for (double p : dist) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::max(0.0, h);
}

double structure_weighted_uncertainty(std::span<const double> entropies,
                                      std::span<const double> weights,
                                      double p_norm) {
    if (entropies.size() != weights.size()) {
        throw LengthMismatch("entropy/weight vectors");
    }
    if (p_norm < 1.0) throw Error("p_norm must be >= 1");
    double acc = 0.0;
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        acc += weights[i] * std::pow(entropies[i], p_norm);
    }
    return std::pow(acc, 1.0 / p_norm);
}

double gradient_distance(const std::vector<std::vector<double>>& zx,
                         const std::vector<std::vector<double>>& zy,
                         std::span<const double> weights, double p_norm) {
    if (zx.size() != zy.size() || zx.size() != weights.size()) {
        throw LengthMismatch("per-node vector counts");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < zx.size(); ++i) {
        if (zx[i].size() != zy[i].size()) {
            throw LengthMismatch("embedding widths at node position " +
                                 std::to_string(i));
        }
        const double sq =
            k::squared_distance(zx[i].data(), zy[i].data(), zx[i].size());
        acc += weights[i] * std::pow(std::sqrt(sq), p_norm);
    }
    return std::pow(acc, 1.0 / p_norm);
}

double kl_distance(const ConceptGraph& graph, const NodeOutputs& a,
                   const NodeOutputs& b, std::span<const double> weights) {
    double acc = 0.0;
    for (std::size_t i = 0; i < graph.size(); ++i) {
        if (graph.is_root(i)) continue;
        const auto& pa = a.distributions[i];
        const auto& pb = b.distributions[i];
        if (pa.size() != pb.size() || pa.size() != graph.spec(i).cardinality) {
            throw NodeSetMismatch("distribution widths at '" + graph.spec(i).id +
                                  "'");
        }
        double klv = 0.0;
        for (std::size_t c = 0; c < pa.size(); ++c) {
            const double p = clamp_prob(pa[c]);
            const double q = clamp_prob(pb[c]);
            klv += p * (std::log(p) - std::log(q));
        }
        acc += weights[i] * klv;
    }
    return acc;
}

std::vector<double> scoring_weights(const ConceptGraph& graph) {
    std::vector<double> w = degree_weights(graph);
    double mass = 0.0;
    for (std::size_t i = 0; i < graph.size(); ++i) {
        if (!graph.is_root(i)) mass += w[i];
    }
    for (std::size_t i = 0; i < graph.size(); ++i) {
        w[i] = graph.is_root(i) ? 0.0 : w[i] / mass;
    }
    return w;
}

PoolScores score_pool(const GcpModel& model, std::span<const Sample> samples,
                      double p_norm) {
    const auto& g = model.graph;
    PoolScores pool;
    pool.p_norm = p_norm;
    pool.weights = scoring_weights(g);
    for (std::size_t i : g.topo_order) {
        if (!g.is_root(i)) pool.nodes.push_back(i);
    }

    pool.entries.reserve(samples.size());
    for (const auto& s : samples) {
        SampleScore e;
        e.id = s.id;
        e.outputs = forward(model, s.features);

        std::vector<double> entropies;
        std::vector<double> node_weights;
        e.embeddings.resize(g.size());
        for (std::size_t i : pool.nodes) {
            entropies.push_back(node_entropy(e.outputs.distributions[i]));
            node_weights.push_back(pool.weights[i]);
            e.embeddings[i] =
                node_gradient_embedding(model, s, g.spec(i).id);

            const double sw = std::sqrt(pool.weights[i]);
            for (double v : e.embeddings[i]) {
                e.scaled_embedding.push_back(sw * v);
            }
            for (double p : e.outputs.distributions[i]) {
                const double cp = clamp_prob(p);
                e.weighted_probs.push_back(pool.weights[i] * cp);
                e.log_probs.push_back(std::log(cp));
            }
        }
        e.e_unc = structure_weighted_uncertainty(entropies, node_weights, p_norm);
        e.self_term = k::dot(e.weighted_probs.data(), e.log_probs.data(),
                             e.log_probs.size());
        pool.entries.push_back(std::move(e));
    }
    return pool;
}

std::vector<std::string> select_swu(const PoolScores& pool, std::size_t k) {
    if (pool.size() < k) throw PoolTooSmall("swu candidates");
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(pool.size());
    for (const auto& e : pool.entries) scored.emplace_back(e.id, e.e_unc);
    auto ids = ranked_ids(scored);
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

// Pairwise gradient distance between two pool entries.
double pool_gradient_distance(const PoolScores& pool, std::size_t a,
                              std::size_t b) {
    const auto& ea = pool.entries[a];
    const auto& eb = pool.entries[b];
    if (pool.p_norm == 2.0) {
        // weights folded into the flattened embeddings as sqrt(w)
        return std::sqrt(k::squared_distance(ea.scaled_embedding.data(),
                                             eb.scaled_embedding.data(),
                                             ea.scaled_embedding.size()));
    }
    double acc = 0.0;
    for (std::size_t i : pool.nodes) {
        const double sq = k::squared_distance(ea.embeddings[i].data(),
                                              eb.embeddings[i].data(),
                                              ea.embeddings[i].size());
        acc += pool.weights[i] * std::pow(std::sqrt(sq), pool.p_norm);
    }
    return std::pow(acc, 1.0 / pool.p_norm);
}

// 0.5 * (KL(a||b) + KL(b||a)) from the cached flattened terms.
double pool_symmetric_kl(const PoolScores& pool, std::size_t a, std::size_t b) {
    const auto& ea = pool.entries[a];
    const auto& eb = pool.entries[b];
    const std::size_t n = ea.log_probs.size();
    const double cross_ab = k::dot(ea.weighted_probs.data(), eb.log_probs.data(), n);
    const double cross_ba = k::dot(eb.weighted_probs.data(), ea.log_probs.data(), n);
    return 0.5 * (ea.self_term - cross_ab + eb.self_term - cross_ba);
}

double symmetric_kl_between(const SampleScore& ea, const SampleScore& eb) {
    const std::size_t n = ea.log_probs.size();
    if (n != eb.log_probs.size()) throw NodeSetMismatch("cached score widths");
    const double cross_ab = k::dot(ea.weighted_probs.data(), eb.log_probs.data(), n);
    const double cross_ba = k::dot(eb.weighted_probs.data(), ea.log_probs.data(), n);
    return 0.5 * (ea.self_term - cross_ab + eb.self_term - cross_ba);
}

} // namespace

std::vector<std::size_t> farthest_first(std::vector<double> dmin, std::size_t k,
                                        const DistanceFn& dist) {
    const std::size_t n = dmin.size();
    std::vector<std::size_t> picked;
    std::vector<char> taken(n, 0);

    const bool no_anchors =
        std::all_of(dmin.begin(), dmin.end(), [](double d) { return d == kInf; });
    if (no_anchors && k > 0 && n > 0) {
        // no labeled anchors: seed with the 1-medoid
        std::size_t best = 0;
        double best_total = kInf;
        for (std::size_t c = 0; c < n; ++c) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += dist(c, j);
            if (total < best_total) {
                best_total = total;
                best = c;
            }
        }
        picked.push_back(best);
        taken[best] = 1;
        for (std::size_t j = 0; j < n; ++j) dmin[j] = std::min(dmin[j], dist(best, j));
    }

    while (picked.size() < k) {
        std::size_t best = n;
        double best_d = -kInf;
        for (std::size_t j = 0; j < n; ++j) {
            if (!taken[j] && dmin[j] > best_d) {
                best_d = dmin[j];
                best = j;
            }
        }
        if (best == n) break;
        picked.push_back(best);
        taken[best] = 1;
        for (std::size_t j = 0; j < n; ++j) dmin[j] = std::min(dmin[j], dist(best, j));
    }
    return picked;
}

std::vector<std::size_t> k_medoids(std::size_t n, std::size_t k,
                                   std::size_t max_iters, const DistanceFn& dist,
                                   std::size_t dense_limit) {
    if (k > n) throw PoolTooSmall("k exceeds point count");
    if (k == n) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        return all;
    }

    // materialize the pairwise matrix when the pool is small enough;
    // otherwise fall back to direct distance calls
    const bool dense = n <= dense_limit;
    std::vector<float> matrix;
    if (dense) {
        matrix.assign(n * n, 0.0f);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const float d = static_cast<float>(dist(i, j));
                matrix[i * n + j] = d;
                matrix[j * n + i] = d;
            }
        }
    }
    auto d_at = [&](std::size_t i, std::size_t j) -> double {
        return dense ? double(matrix[i * n + j]) : dist(i, j);
    };

    // greedy BUILD: first the 1-medoid, then the point with the largest
    // reduction of the assignment cost
    std::vector<std::size_t> medoids;
    std::vector<char> is_medoid(n, 0);
    {
        std::size_t best = 0;
        double best_total = kInf;
        for (std::size_t c = 0; c < n; ++c) {
            double total = 0.0;
            if (dense) {
                const float* row = &matrix[c * n];
                for (std::size_t j = 0; j < n; ++j) total += row[j];
            } else {
                for (std::size_t j = 0; j < n; ++j) total += d_at(c, j);
            }
            if (total < best_total) {
                best_total = total;
                best = c;
            }
        }
        medoids.push_back(best);
        is_medoid[best] = 1;
    }

    std::vector<float> dmin_f;
    std::vector<double> dmin_d;
    if (dense) {
        dmin_f.assign(&matrix[medoids[0] * n], &matrix[medoids[0] * n] + n);
    } else {
        dmin_d.resize(n);
        for (std::size_t j = 0; j < n; ++j) dmin_d[j] = d_at(medoids[0], j);
    }

    while (medoids.size() < k) {
        std::size_t best = n;
        double best_gain = -1.0;
        for (std::size_t c = 0; c < n; ++c) {
            if (is_medoid[c]) continue;
            double gain;
            if (dense) {
                gain = double(k::relief_gain_f(&matrix[c * n], dmin_f.data(), n));
            } else {
                gain = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    gain += std::max(0.0, dmin_d[j] - d_at(c, j));
                }
            }
            if (gain > best_gain) {
                best_gain = gain;
                best = c;
            }
        }
        medoids.push_back(best);
        is_medoid[best] = 1;
        if (dense) {
            k::min_inplace_f(dmin_f.data(), &matrix[best * n], n);
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                dmin_d[j] = std::min(dmin_d[j], d_at(best, j));
            }
        }
    }

    // alternate assignment and medoid update until stable
    std::vector<std::size_t> assign(n, 0);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t best = 0;
            double best_d = kInf;
            for (std::size_t mi = 0; mi < medoids.size(); ++mi) {
                const double d = d_at(medoids[mi], j);
                if (d < best_d) {
                    best_d = d;
                    best = mi;
                }
            }
            assign[j] = best;
        }
        bool changed = false;
        std::vector<std::vector<std::size_t>> clusters(medoids.size());
        for (std::size_t j = 0; j < n; ++j) clusters[assign[j]].push_back(j);
        for (std::size_t mi = 0; mi < medoids.size(); ++mi) {
            const auto& members = clusters[mi];
            if (members.empty()) continue;
            std::size_t best = medoids[mi];
            double best_total = kInf;
            for (std::size_t c : members) {
                double total = 0.0;
                for (std::size_t j : members) total += d_at(c, j);
                if (total < best_total) {
                    best_total = total;
                    best = c;
                }
            }
            if (best != medoids[mi]) {
                medoids[mi] = best;
                changed = true;
            }
        }
        if (!changed) break;
    }
    std::sort(medoids.begin(), medoids.end());
    return medoids;
}

std::vector<std::string> select_gradient_medoids(const PoolScores& pool,
                                                 std::size_t k,
                                                 const AcquisitionConfig& config) {
    if (pool.size() < k) throw PoolTooSmall("gradient medoid candidates");
    const auto medoids = k_medoids(
        pool.size(), k, config.medoid_iters,
        [&](std::size_t a, std::size_t b) {
            return pool_gradient_distance(pool, a, b);
        },
        config.dense_matrix_limit);
    std::vector<std::string> ids;
    ids.reserve(medoids.size());
    for (std::size_t m : medoids) ids.push_back(pool.entries[m].id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<std::string> select_coverage(const PoolScores& pool,
                                         std::span<const SampleScore> labeled,
                                         std::size_t k,
                                         const AcquisitionConfig&) {
    if (pool.size() < k) throw PoolTooSmall("coverage candidates");
    std::vector<double> dmin(pool.size(), kInf);
    for (const auto& anchor : labeled) {
        for (std::size_t j = 0; j < pool.size(); ++j) {
            dmin[j] = std::min(
                dmin[j], symmetric_kl_between(anchor, pool.entries[j]));
        }
    }
    const auto picked = farthest_first(std::move(dmin), k,
                                       [&](std::size_t a, std::size_t b) {
                                           return pool_symmetric_kl(pool, a, b);
                                       });
    std::vector<std::string> ids;
    ids.reserve(picked.size());
    for (std::size_t p : picked) ids.push_back(pool.entries[p].id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

SelectionResult consensus_select(const std::vector<std::string>& swu_set,
                                 const std::vector<std::string>& grad_set,
                                 const std::vector<std::string>& cover_set,
                                 const PoolScores& pool, std::size_t budget) {
    SelectionResult result;
    result.swu_set = swu_set;
    result.grad_set = grad_set;
    result.cover_set = cover_set;

    std::unordered_map<std::string, double> e_unc;
    for (const auto& e : pool.entries) e_unc[e.id] = e.e_unc;

    const std::set<std::string> a(swu_set.begin(), swu_set.end());
    const std::set<std::string> b(grad_set.begin(), grad_set.end());
    const std::set<std::string> c(cover_set.begin(), cover_set.end());

    std::set<std::string> uni;
    uni.insert(a.begin(), a.end());
    uni.insert(b.begin(), b.end());
    uni.insert(c.begin(), c.end());

    std::vector<std::pair<std::string, double>> inter_scored, fill_scored;
    for (const auto& id : uni) {
        auto it = e_unc.find(id);
        if (it == e_unc.end()) {
            throw InvalidNode("candidate id '" + id + "' is not in the pool");
        }
        if (a.count(id) && b.count(id) && c.count(id)) {
            inter_scored.emplace_back(id, it->second);
        } else {
            fill_scored.emplace_back(id, it->second);
        }
    }

    const std::size_t want = std::min(budget, pool.size());
    for (const auto& id : ranked_ids(inter_scored)) {
        if (result.consensus.size() >= want) break;
        result.consensus.push_back(id);
        result.fill_trace.push_back({id, true});
    }
    for (const auto& id : ranked_ids(fill_scored)) {
        if (result.consensus.size() >= want) break;
        result.consensus.push_back(id);
        result.fill_trace.push_back({id, false});
    }
    return result;
}

SelectionResult acquire(const GcpModel& model, std::span<const Sample> pool,
                        std::span<const AnnotatedSample> labeled,
                        const AcquisitionConfig& config,
                        PoolScores* scores_out) {
    if (config.budget == 0) throw Error("budget must be >= 1");
    if (config.p_norm < 1.0) throw Error("p_norm must be >= 1");

    PoolScores scores = score_pool(model, pool, config.p_norm);
    const std::size_t k =
        std::min(config.effective_k(), scores.size());
    const std::size_t budget = std::min(config.budget, scores.size());

    std::vector<Sample> labeled_samples;
    labeled_samples.reserve(labeled.size());
    for (const auto& s : labeled) labeled_samples.push_back(s.sample);
    const PoolScores labeled_scores =
        score_pool(model, labeled_samples, config.p_norm);

    const auto swu = select_swu(scores, k);
    const auto med = select_gradient_medoids(scores, k, config);
    const auto cov = select_coverage(scores, labeled_scores.entries, k, config);
    SelectionResult result = consensus_select(swu, med, cov, scores, budget);
    if (scores_out != nullptr) *scores_out = std::move(scores);
    return result;
}

} // namespace gcp
