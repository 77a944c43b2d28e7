#pragma once

// Global circuit machinery: cross-sublayer direction similarity, the late-layer
// reference basis, causal sublayer influence, and budgeted circuit assembly.
// Sublayers are indexed attn0, mlp0, attn1, mlp1, ... so a model with L layers
// has 2L sublayer slots.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribution.hpp"
#include "directions.hpp"
#include "interventions.hpp"
#include "model.hpp"
#include "runtime.hpp"
#include "store.hpp"
#include "threading.hpp"

namespace emocirc {

inline std::size_t sublayer_index(std::size_t layer, Stream p) {
    return 2 * layer + (p == Stream::Mlp ? 1 : 0);
}
inline std::size_t sublayer_layer(std::size_t sub) { return sub / 2; }
inline Stream sublayer_stream(std::size_t sub) {
    return (sub % 2) ? Stream::Mlp : Stream::Attn;
}
inline std::string sublayer_name(std::size_t sub) {
    return std::string(sublayer_stream(sub) == Stream::Attn ? "attn" : "mlp") +
           std::to_string(sublayer_layer(sub));
}

// ---- similarity ---------------------------------------------------------------

struct SimilarityMatrix {
    std::size_t n = 0;  // 2L
    Mat values;

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(10);
        os << "sublayer";
        for (std::size_t j = 0; j < n; ++j) os << "," << sublayer_name(j);
        os << "\n";
        for (std::size_t i = 0; i < n; ++i) {
            os << sublayer_name(i);
            for (std::size_t j = 0; j < n; ++j) os << "," << values.at(i, j);
            os << "\n";
        }
        return os.str();
    }
};

inline SimilarityMatrix similarity_matrix(const DirectionSet& directions, std::size_t emotion) {
    SimilarityMatrix m;
    m.n = 2 * directions.n_layers;
    m.values = Mat(m.n, m.n);
    for (std::size_t a = 0; a < m.n; ++a)
        for (std::size_t b = 0; b < m.n; ++b)
            m.values.at(a, b) =
                cosine(directions.at(emotion, sublayer_layer(a), sublayer_stream(a)),
                       directions.at(emotion, sublayer_layer(b), sublayer_stream(b)));
    return m;
}

// ---- reference basis ----------------------------------------------------------

// Sign-align both streams' directions inside [window_begin, window_end) to the
// window's first direction, average, normalize.
inline Vec reference_basis(const DirectionSet& directions, std::size_t emotion,
                           std::size_t window_begin, std::size_t window_end) {
    EMOCIRC_CHECK(window_begin < window_end && window_end <= directions.n_layers,
                  "reference_basis: empty or out-of-range layer window");
    std::vector<const Vec*> window;
    for (std::size_t l = window_begin; l < window_end; ++l) {
        window.push_back(&directions.attn[emotion][l]);
        window.push_back(&directions.mlp[emotion][l]);
    }
    const Vec& anchor = *window.front();
    Vec acc(anchor.size(), 0.0);
    for (const Vec* v : window) axpy(dot(*v, anchor) < 0.0 ? -1.0 : 1.0, *v, acc);
    for (double& x : acc) x /= static_cast<double>(window.size());
    try {
        return l2_normalize(acc);
    } catch (const DegenerateDirection&) {
        throw DegenerateDirection("reference_basis: window directions cancel for " +
                                  kEmotions[emotion]);
    }
}

// Default window mirroring layers 21-25 of a 28-layer model.
inline std::pair<std::size_t, std::size_t> default_reference_window(std::size_t n_layers) {
    auto r = [n_layers](double frac) {
        return static_cast<std::size_t>(frac * static_cast<double>(n_layers) + 0.5);
    };
    std::size_t begin = r(21.0 / 28.0);
    std::size_t end = r(26.0 / 28.0);
    if (end > n_layers) end = n_layers;
    if (end == 0) end = n_layers;
    if (begin >= end) begin = end > 0 ? end - 1 : 0;
    return {begin, end};
}

// ---- sublayer influence ---------------------------------------------------------

struct InfluenceProfile {
    std::vector<double> alphas;
    std::vector<std::vector<double>> mean_influence;            // [emotion][sublayer]
    std::vector<std::vector<std::vector<double>>> per_alpha;    // [emotion][sublayer][alpha]
    std::vector<double> sigma;                                  // [sublayer]
    std::vector<bool> inert;                                    // sigma == 0
    std::vector<std::string> warnings;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["alphas"] = alphas;
        j["sigma"] = sigma;
        j["inert"] = inert;
        j["warnings"] = warnings;
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            j["mean_influence"][kEmotions[e]] = mean_influence[e];
            j["per_alpha"][kEmotions[e]] = per_alpha[e];
        }
        return j;
    }

    static InfluenceProfile from_json(const nlohmann::json& j) {
        InfluenceProfile p;
        p.alphas = j.at("alphas").get<std::vector<double>>();
        p.sigma = j.at("sigma").get<std::vector<double>>();
        p.inert = j.at("inert").get<std::vector<bool>>();
        p.warnings = j.at("warnings").get<std::vector<std::string>>();
        p.mean_influence.resize(kEmotionCount);
        p.per_alpha.resize(kEmotionCount);
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            p.mean_influence[e] =
                j.at("mean_influence").at(kEmotions[e]).get<std::vector<double>>();
            p.per_alpha[e] =
                j.at("per_alpha").at(kEmotions[e]).get<std::vector<std::vector<double>>>();
        }
        return p;
    }
};

// Perturb one sublayer at a time by alpha * sigma along its own direction and
// measure the final-state shift along the reference basis; the final state is
// the last residual before the final norm, so perturbing the last sublayer has
// no downstream transformation at all.
inline InfluenceProfile sublayer_importance(const Model& model,
                                            const std::vector<PromptGroup>& corpus,
                                            const DirectionSet& directions,
                                            const std::vector<Vec>& v_ref,
                                            const std::vector<double>& alphas = {0.5, 1.0, 2.0}) {
    EMOCIRC_CHECK(v_ref.size() == kEmotionCount, "sublayer_importance: need one v_ref per emotion");
    EMOCIRC_CHECK(!alphas.empty(), "sublayer_importance: empty alpha set");
    const ModelConfig& cfg = model.config;
    const std::size_t n_sub = 2 * cfg.n_layers;
    EMOCIRC_CHECK(directions.n_layers == cfg.n_layers,
                  "sublayer_importance: directions and model depth mismatch");

    struct Sample {
        std::vector<TokenId> prompt;
        std::size_t emotion;
    };
    std::vector<Sample> samples;
    for (const auto& g : corpus)
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            if (!g.variants[e].empty()) samples.push_back({g.variants[e], e});
    EMOCIRC_CHECK(!samples.empty(), "sublayer_importance: empty corpus");

    // baseline pass: final states plus the per-sublayer update RMS
    std::vector<Vec> h_final(samples.size());
    Mat update_rms(samples.size(), n_sub);
    parallel_for(samples.size(), [&](std::size_t si) {
        const Trace tr = run_trace(model, samples[si].prompt, {});
        const std::size_t last = samples[si].prompt.size() - 1;
        h_final[si] = tr.final_hidden(last);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            update_rms.at(si, sublayer_index(l, Stream::Attn)) = rms(
                sub(tr.resid_after_attn[l].row_vec(last), tr.resid_in[l].row_vec(last)));
            update_rms.at(si, sublayer_index(l, Stream::Mlp)) = rms(
                sub(tr.resid_after_mlp[l].row_vec(last), tr.resid_after_attn[l].row_vec(last)));
        }
    });

    InfluenceProfile prof;
    prof.alphas = alphas;
    prof.sigma.assign(n_sub, 0.0);
    prof.inert.assign(n_sub, false);
    for (std::size_t sub = 0; sub < n_sub; ++sub) {
        for (std::size_t si = 0; si < samples.size(); ++si)
            prof.sigma[sub] += update_rms.at(si, sub);
        prof.sigma[sub] /= static_cast<double>(samples.size());
        if (prof.sigma[sub] <= 0.0) {
            prof.inert[sub] = true;
            prof.warnings.push_back("sublayer " + sublayer_name(sub) +
                                    " is inert (zero update RMS); influence reported as zero");
        }
    }

    prof.per_alpha.assign(kEmotionCount,
                          std::vector<std::vector<double>>(n_sub,
                                                           std::vector<double>(alphas.size(),
                                                                               0.0)));
    prof.mean_influence.assign(kEmotionCount, std::vector<double>(n_sub, 0.0));

    // accumulate per (emotion, sublayer, alpha) over samples
    Mat counts(kEmotionCount, 1);
    for (const auto& s : samples) counts.at(s.emotion, 0) += 1.0;

    struct Cell {
        std::size_t si, sub, ai;
    };
    std::vector<Cell> cells;
    for (std::size_t si = 0; si < samples.size(); ++si)
        for (std::size_t sub = 0; sub < n_sub; ++sub)
            for (std::size_t ai = 0; ai < alphas.size(); ++ai)
                if (!prof.inert[sub]) cells.push_back({si, sub, ai});

    std::vector<double> cell_influence(cells.size(), 0.0);
    parallel_for(cells.size(), [&](std::size_t ci) {
        const auto [si, sub_i, ai] = cells[ci];
        const Sample& sample = samples[si];
        const std::size_t l = sublayer_layer(sub_i);
        const Stream p = sublayer_stream(sub_i);
        const double scale = alphas[ai] * prof.sigma[sub_i];
        const EditAction inject{l,
                                p == Stream::Attn ? Site::ResidAfterAttn : Site::ResidAfterMlp,
                                EditKind::AddScaledVector,
                                {},
                                directions.at(sample.emotion, l, p),
                                scale,
                                false,
                                PositionPolicy::LastPromptToken};
        const Trace tr = run_trace(model, sample.prompt, {inject});
        const Vec shifted = tr.final_hidden(sample.prompt.size() - 1);
        const double ds = dot(sub(shifted, h_final[si]), v_ref[sample.emotion]);
        cell_influence[ci] = ds / scale;
    });

    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        const auto [si, sub_i, ai] = cells[ci];
        prof.per_alpha[samples[si].emotion][sub_i][ai] +=
            cell_influence[ci] / counts.at(samples[si].emotion, 0);
    }
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t sub = 0; sub < n_sub; ++sub) {
            for (std::size_t ai = 0; ai < alphas.size(); ++ai)
                prof.mean_influence[e][sub] += prof.per_alpha[e][sub][ai];
            prof.mean_influence[e][sub] /= static_cast<double>(alphas.size());
        }
    return prof;
}

// ---- circuit assembly ------------------------------------------------------------

struct CircuitEntry {
    std::size_t layer = 0;
    Stream stream = Stream::Mlp;               // mlp entries hold neurons, attn entries heads
    std::vector<std::size_t> indices;          // ranking prefix, most important first
};

struct EmotionCircuit {
    std::size_t emotion = 0;
    std::size_t budget = 0;
    std::size_t quota = 0;
    std::vector<CircuitEntry> entries;         // one per sublayer, attn0, mlp0, ...
    std::vector<double> influence;             // the profile used for allocation

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.indices.size();
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["emotion"] = kEmotions[emotion];
        j["budget"] = budget;
        j["quota"] = quota;
        j["influence"] = influence;
        j["entries"] = nlohmann::json::array();
        for (const auto& e : entries)
            j["entries"].push_back({{"layer", e.layer},
                                    {"site", e.stream == Stream::Mlp ? "gated_mlp"
                                                                     : "head_concat"},
                                    {"kind", e.stream == Stream::Mlp ? "neurons" : "heads"},
                                    {"indices", e.indices}});
        return j;
    }

    static EmotionCircuit from_json(const nlohmann::json& j) {
        EmotionCircuit c;
        c.emotion = emotion_index(j.at("emotion").get<std::string>());
        c.budget = j.at("budget").get<std::size_t>();
        c.quota = j.at("quota").get<std::size_t>();
        c.influence = j.at("influence").get<std::vector<double>>();
        for (const auto& e : j.at("entries")) {
            CircuitEntry entry;
            entry.layer = e.at("layer").get<std::size_t>();
            entry.stream =
                e.at("kind").get<std::string>() == "neurons" ? Stream::Mlp : Stream::Attn;
            entry.indices = e.at("indices").get<std::vector<std::size_t>>();
            c.entries.push_back(std::move(entry));
        }
        return c;
    }
};

struct BudgetPolicy {
    std::size_t budget_per_sublayer = 10;  // budget = 10 * 2L
    // quota reserves half of the uniform share for every sublayer
    std::size_t quota_divisor = 2;
};

namespace detail {

// Largest-remainder split of `extra` units proportional to non-negative
// weights over the unclamped slots; ties go to the lower index.
inline void largest_remainder_distribute(std::vector<std::size_t>& alloc,
                                         const std::vector<double>& weights,
                                         const std::vector<std::size_t>& capacity,
                                         std::size_t extra) {
    const std::size_t n = alloc.size();
    while (extra > 0) {
        std::vector<std::size_t> open;
        double weight_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (alloc[i] < capacity[i]) {
                open.push_back(i);
                weight_sum += weights[i];
            }
        if (open.empty()) break;  // every sublayer saturated

        std::vector<double> share(open.size(), 0.0);
        if (weight_sum > 0.0) {
            for (std::size_t oi = 0; oi < open.size(); ++oi)
                share[oi] = static_cast<double>(extra) * weights[open[oi]] / weight_sum;
        } else {
            for (std::size_t oi = 0; oi < open.size(); ++oi)
                share[oi] = static_cast<double>(extra) / static_cast<double>(open.size());
        }

        std::vector<std::size_t> grant(open.size(), 0);
        std::size_t granted = 0;
        for (std::size_t oi = 0; oi < open.size(); ++oi) {
            grant[oi] = std::min(static_cast<std::size_t>(std::floor(share[oi])),
                                 capacity[open[oi]] - alloc[open[oi]]);
            granted += grant[oi];
        }
        // hand out the remainder seats by descending fractional part
        std::vector<std::size_t> order(open.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double fa = share[a] - std::floor(share[a]);
            const double fb = share[b] - std::floor(share[b]);
            if (fa != fb) return fa > fb;
            return open[a] < open[b];
        });
        std::size_t remainder = extra - granted;
        for (std::size_t oi : order) {
            if (remainder == 0) break;
            if (alloc[open[oi]] + grant[oi] < capacity[open[oi]]) {
                ++grant[oi];
                --remainder;
            }
        }
        std::size_t used = 0;
        for (std::size_t oi = 0; oi < open.size(); ++oi) {
            alloc[open[oi]] += grant[oi];
            used += grant[oi];
        }
        if (used == 0) break;  // capacities exhausted
        extra -= used;
    }
}

}  // namespace detail

// Two-stage allocation: a minimum quota per sublayer, then the remaining
// budget proportional to positive influence, clamped to sublayer width with
// any leftover redistributed.
inline EmotionCircuit assemble_circuit(const ModelConfig& cfg, std::size_t emotion,
                                       const NeuronRanking& neurons, const HeadRanking& heads,
                                       const std::vector<double>& influence,
                                       const BudgetPolicy& policy = {}) {
    const std::size_t n_sub = 2 * cfg.n_layers;
    EMOCIRC_CHECK(influence.size() == n_sub, "assemble: influence profile size mismatch");
    const std::size_t budget = policy.budget_per_sublayer * n_sub;
    const std::size_t quota =
        std::max<std::size_t>(1, policy.budget_per_sublayer / policy.quota_divisor);
    EMOCIRC_CHECK(budget >= quota * n_sub, "assemble: infeasible quota");

    std::vector<std::size_t> capacity(n_sub);
    for (std::size_t sub = 0; sub < n_sub; ++sub)
        capacity[sub] = sublayer_stream(sub) == Stream::Mlp ? cfg.d_ff : cfg.n_heads;

    std::size_t total_capacity = 0;
    for (std::size_t c : capacity) total_capacity += c;
    EMOCIRC_CHECK(budget <= total_capacity, "assemble: budget exceeds total component count");

    // stage 1: quota, clamped to width
    std::vector<std::size_t> alloc(n_sub);
    std::size_t used = 0;
    for (std::size_t sub = 0; sub < n_sub; ++sub) {
        alloc[sub] = std::min(quota, capacity[sub]);
        used += alloc[sub];
    }
    // stage 2: proportional to clipped influence
    std::vector<double> weights(n_sub);
    for (std::size_t sub = 0; sub < n_sub; ++sub) weights[sub] = std::max(influence[sub], 0.0);
    detail::largest_remainder_distribute(alloc, weights, capacity, budget - used);

    EmotionCircuit circuit;
    circuit.emotion = emotion;
    circuit.budget = budget;
    circuit.quota = quota;
    circuit.influence = influence;
    for (std::size_t sub = 0; sub < n_sub; ++sub) {
        CircuitEntry entry;
        entry.layer = sublayer_layer(sub);
        entry.stream = sublayer_stream(sub);
        entry.indices = entry.stream == Stream::Mlp
                            ? neurons.top_k(emotion, entry.layer, alloc[sub])
                            : heads.top_k(emotion, entry.layer, alloc[sub]);
        EMOCIRC_CHECK(entry.indices.size() == alloc[sub],
                      "assemble: ranking shorter than allocation");
        circuit.entries.push_back(std::move(entry));
    }
    return circuit;
}

// Control circuit: same per-sublayer sizes, uniformly random indices.
inline EmotionCircuit random_circuit_like(const EmotionCircuit& circuit, const ModelConfig& cfg,
                                          std::uint64_t seed) {
    EmotionCircuit out = circuit;
    for (std::size_t sub = 0; sub < out.entries.size(); ++sub) {
        CircuitEntry& e = out.entries[sub];
        const std::size_t width = e.stream == Stream::Mlp ? cfg.d_ff : cfg.n_heads;
        Rng rng(derive_seed(seed, "random-circuit-" + std::to_string(sub)));
        e.indices = rng.sample_without_replacement(width, e.indices.size());
    }
    return out;
}

// ---- overlap statistics -----------------------------------------------------------

struct OverlapStats {
    double neuron_mean = 0.0, neuron_std = 0.0;
    double head_mean = 0.0, head_std = 0.0;
    std::size_t pairs = 0;

    nlohmann::json to_json() const {
        return {{"neuron_jaccard_mean", neuron_mean},
                {"neuron_jaccard_std", neuron_std},
                {"head_jaccard_mean", head_mean},
                {"head_jaccard_std", head_std},
                {"pairs", pairs}};
    }
};

inline OverlapStats circuit_overlap(const std::vector<EmotionCircuit>& circuits) {
    EMOCIRC_CHECK(circuits.size() >= 2, "overlap: need at least two circuits");
    auto ids = [](const EmotionCircuit& c, Stream stream) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (const auto& e : c.entries)
            if (e.stream == stream)
                for (std::size_t idx : e.indices) out.push_back({e.layer, idx});
        std::sort(out.begin(), out.end());
        return out;
    };
    auto jaccard = [](const std::vector<std::pair<std::size_t, std::size_t>>& a,
                      const std::vector<std::pair<std::size_t, std::size_t>>& b) {
        std::vector<std::pair<std::size_t, std::size_t>> inter, uni;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
        std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
        return uni.empty() ? 0.0
                           : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    };

    std::vector<double> neuron_j, head_j;
    for (std::size_t a = 0; a < circuits.size(); ++a)
        for (std::size_t b = a + 1; b < circuits.size(); ++b) {
            neuron_j.push_back(
                jaccard(ids(circuits[a], Stream::Mlp), ids(circuits[b], Stream::Mlp)));
            head_j.push_back(
                jaccard(ids(circuits[a], Stream::Attn), ids(circuits[b], Stream::Attn)));
        }

    OverlapStats s;
    s.pairs = neuron_j.size();
    s.neuron_mean = mean(neuron_j);
    s.head_mean = mean(head_j);
    auto pop_std = [](const std::vector<double>& xs, double m) {
        double acc = 0.0;
        for (double x : xs) acc += (x - m) * (x - m);
        return std::sqrt(acc / static_cast<double>(xs.size()));
    };
    s.neuron_std = pop_std(neuron_j, s.neuron_mean);
    s.head_std = pop_std(head_j, s.head_mean);
    return s;
}

}  // namespace emocirc
