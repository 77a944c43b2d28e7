#pragma once

// Component attribution against the per-layer emotion directions: MLP neurons
// are scored analytically (the gated activation times the alignment of their
// write column with the direction gives a lossless additive decomposition of
// the MLP write), attention heads causally (re-run with one head's concat
// slice zeroed and measure the projection drop).

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "directions.hpp"
#include "model.hpp"
#include "runtime.hpp"
#include "store.hpp"
#include "threading.hpp"

namespace emocirc {

// beta = W_d^T v: how strongly each neuron's write column pushes along v.
inline Vec neuron_alignment(const Mat& w_d, const Vec& v) {
    EMOCIRC_CHECK(w_d.rows == v.size(), "neuron_alignment: W_d is d x d_ff and v has length d");
    return matvec_T(w_d, v);
}

struct NeuronRanking {
    // [emotion][layer]: (neuron index, mean contribution), non-increasing,
    // ties broken by lower index
    std::vector<std::vector<std::vector<std::pair<std::size_t, double>>>> ranked;
    std::vector<std::vector<Vec>> beta;  // [emotion][layer], width d_ff

    std::vector<std::size_t> top_k(std::size_t emotion, std::size_t layer,
                                   std::size_t k) const {
        const auto& r = ranked[emotion][layer];
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < std::min(k, r.size()); ++i) out.push_back(r[i].first);
        return out;
    }
};

struct HeadScore {
    std::size_t head = 0;
    double mean_ds_local = 0.0;  // at the intervened layer's own stream
    double mean_ds_total = 0.0;  // summed over all layers and both streams
};

struct HeadRanking {
    // [emotion][layer], most negative layer-local delta-s first
    std::vector<std::vector<std::vector<HeadScore>>> ranked;

    std::vector<std::size_t> top_k(std::size_t emotion, std::size_t layer,
                                   std::size_t k) const {
        const auto& r = ranked[emotion][layer];
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < std::min(k, r.size()); ++i) out.push_back(r[i].head);
        return out;
    }
};

namespace detail {

inline std::vector<const RunRecord*> successful_records(const std::vector<RunRecord>& records,
                                                        std::size_t emotion) {
    std::vector<const RunRecord*> out;
    for (const RunRecord& r : records)
        if (emotion_index(r.emotion) == emotion && r.success != SuccessFlag::No)
            out.push_back(&r);
    return out;
}

}  // namespace detail

inline NeuronRanking rank_neurons(const Model& model, const std::vector<RunRecord>& records,
                                  const DirectionSet& directions) {
    const std::size_t L = model.config.n_layers, ff = model.config.d_ff;
    NeuronRanking nr;
    nr.ranked.assign(kEmotionCount, std::vector<std::vector<std::pair<std::size_t, double>>>(L));
    nr.beta.assign(kEmotionCount, std::vector<Vec>(L));

    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        const auto samples = detail::successful_records(records, e);
        if (samples.empty())
            throw NoSamples("rank_neurons: no successful samples for " + kEmotions[e]);
        for (std::size_t l = 0; l < L; ++l) {
            const Vec beta = neuron_alignment(model.layers[l].w_d, directions.mlp[e][l]);
            Vec mean_c(ff, 0.0);
            for (const RunRecord* r : samples) {
                const Vec& g = r->taps.at(l, Site::GatedMlp);
                EMOCIRC_CHECK(g.size() == ff, "rank_neurons: gated tap width mismatch");
                for (std::size_t j = 0; j < ff; ++j) mean_c[j] += g[j] * beta[j];
            }
            for (double& x : mean_c) x /= static_cast<double>(samples.size());

            auto& out = nr.ranked[e][l];
            out.resize(ff);
            for (std::size_t j = 0; j < ff; ++j) out[j] = {j, mean_c[j]};
            std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
                if (a.second != b.second) return a.second > b.second;
                return a.first < b.first;
            });
            nr.beta[e][l] = beta;
        }
    }
    return nr;
}

// Per-sample head zeroing. Baseline projections come from the stored taps; the
// re-run uses the record's original prompt with one head slice zeroed at the
// last prompt token.
inline HeadRanking rank_heads(const Model& model, const std::vector<RunRecord>& records,
                              const DirectionSet& directions) {
    const std::size_t L = model.config.n_layers, h = model.config.n_heads,
                      dh = model.config.d_head;
    EMOCIRC_CHECK(directions.d_model == model.config.d_model,
                  "rank_heads: directions and model width mismatch");

    HeadRanking hr;
    hr.ranked.assign(kEmotionCount, std::vector<std::vector<HeadScore>>(L));

    const auto taps = all_site_taps(model.config);
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        const auto samples = detail::successful_records(records, e);
        if (samples.empty())
            throw NoSamples("rank_heads: no successful samples for " + kEmotions[e]);

        // [sample][layer][head] -> (local, total)
        std::vector<std::vector<std::vector<std::pair<double, double>>>> ds(samples.size());
        parallel_for(samples.size(), [&](std::size_t si) {
            const RunRecord& rec = *samples[si];
            EMOCIRC_CHECK(rec.taps.at(0, Site::ResidAfterAttn).size() == model.config.d_model,
                          "rank_heads: record width mismatch");
            std::vector<double> base_attn(L);
            double base_total = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                base_attn[l] = dot(rec.taps.at(l, Site::ResidAfterAttn), directions.attn[e][l]);
                base_total += base_attn[l] +
                              dot(rec.taps.at(l, Site::ResidAfterMlp), directions.mlp[e][l]);
            }
            ds[si].assign(L, std::vector<std::pair<double, double>>(h));
            for (std::size_t l = 0; l < L; ++l) {
                for (std::size_t i = 0; i < h; ++i) {
                    std::vector<std::size_t> slice(dh);
                    for (std::size_t c = 0; c < dh; ++c) slice[c] = i * dh + c;
                    const EditAction zero{l, Site::HeadConcat, EditKind::ZeroIndices, slice, {},
                                          1.0, false, PositionPolicy::LastPromptToken};
                    const ForwardResult fr = forward(model, rec.prompt, taps, {zero});
                    const double local =
                        dot(fr.tap_log.at(l, Site::ResidAfterAttn), directions.attn[e][l]) -
                        base_attn[l];
                    double total = 0.0;
                    for (std::size_t l2 = 0; l2 < L; ++l2)
                        total += dot(fr.tap_log.at(l2, Site::ResidAfterAttn),
                                     directions.attn[e][l2]) +
                                 dot(fr.tap_log.at(l2, Site::ResidAfterMlp),
                                     directions.mlp[e][l2]);
                    ds[si][l][i] = {local, total - base_total};
                }
            }
        });

        for (std::size_t l = 0; l < L; ++l) {
            std::vector<HeadScore> scores(h);
            for (std::size_t i = 0; i < h; ++i) {
                scores[i].head = i;
                for (std::size_t si = 0; si < samples.size(); ++si) {
                    scores[i].mean_ds_local += ds[si][l][i].first;
                    scores[i].mean_ds_total += ds[si][l][i].second;
                }
                scores[i].mean_ds_local /= static_cast<double>(samples.size());
                scores[i].mean_ds_total /= static_cast<double>(samples.size());
            }
            std::stable_sort(scores.begin(), scores.end(),
                             [](const HeadScore& a, const HeadScore& b) {
                                 if (a.mean_ds_local != b.mean_ds_local)
                                     return a.mean_ds_local < b.mean_ds_local;
                                 return a.head < b.head;
                             });
            hr.ranked[e][l] = std::move(scores);
        }
    }
    return hr;
}

// ---- JSON export --------------------------------------------------------------

inline nlohmann::json rankings_to_json(const NeuronRanking& nr, const HeadRanking& hr) {
    nlohmann::json j;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        nlohmann::json neurons, heads;
        for (std::size_t l = 0; l < nr.ranked[e].size(); ++l) {
            nlohmann::json layer = nlohmann::json::array();
            for (const auto& [idx, score] : nr.ranked[e][l])
                layer.push_back({{"index", idx}, {"score", score}});
            neurons[std::to_string(l)] = std::move(layer);
        }
        for (std::size_t l = 0; l < hr.ranked[e].size(); ++l) {
            nlohmann::json layer = nlohmann::json::array();
            for (const HeadScore& s : hr.ranked[e][l])
                layer.push_back({{"index", s.head},
                                 {"score", s.mean_ds_local},
                                 {"score_total", s.mean_ds_total}});
            heads[std::to_string(l)] = std::move(layer);
        }
        j[kEmotions[e]] = {{"neurons", std::move(neurons)}, {"heads", std::move(heads)}};
    }
    return j;
}

inline std::pair<NeuronRanking, HeadRanking> rankings_from_json(const nlohmann::json& j) {
    NeuronRanking nr;
    HeadRanking hr;
    nr.ranked.resize(kEmotionCount);
    nr.beta.resize(kEmotionCount);
    hr.ranked.resize(kEmotionCount);
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        const auto& je = j.at(kEmotions[e]);
        const auto& jn = je.at("neurons");
        const auto& jh = je.at("heads");
        nr.ranked[e].resize(jn.size());
        hr.ranked[e].resize(jh.size());
        for (auto it = jn.begin(); it != jn.end(); ++it) {
            const std::size_t l = std::stoul(it.key());
            for (const auto& p : it.value())
                nr.ranked[e][l].push_back(
                    {p.at("index").get<std::size_t>(), p.at("score").get<double>()});
        }
        for (auto it = jh.begin(); it != jh.end(); ++it) {
            const std::size_t l = std::stoul(it.key());
            for (const auto& p : it.value())
                hr.ranked[e][l].push_back(HeadScore{p.at("index").get<std::size_t>(),
                                                    p.at("score").get<double>(),
                                                    p.at("score_total").get<double>()});
        }
    }
    return {std::move(nr), std::move(hr)};
}

}  // namespace emocirc
