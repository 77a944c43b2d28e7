#pragma once

// Context-agnostic emotion directions and emotion difference vectors, both
// built from the same within-group contrast: subtract the six-emotion mean of
// a group so shared scenario content cancels, then aggregate across groups.
// Directions come from the residual-stream sites and are unit-normalized;
// difference vectors come from the gated-MLP and head-concat sites and stay
// unnormalized, since they are used as additive signals.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "container.hpp"
#include "emotions.hpp"
#include "model.hpp"
#include "store.hpp"

namespace emocirc {

enum class Stream { Attn, Mlp };

inline const char* stream_name(Stream s) { return s == Stream::Attn ? "attn" : "mlp"; }

inline Site stream_resid_site(Stream s) {
    return s == Stream::Attn ? Site::ResidAfterAttn : Site::ResidAfterMlp;
}

struct DirectionSet {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    // [emotion][layer], unit vectors in residual space
    std::vector<std::vector<Vec>> attn;
    std::vector<std::vector<Vec>> mlp;
    // all-sample mean activation per layer, the centering used by the
    // nearest-centroid classifier
    std::vector<Vec> attn_sample_mean;
    std::vector<Vec> mlp_sample_mean;

    const Vec& at(std::size_t emotion, std::size_t layer, Stream s) const {
        return s == Stream::Attn ? attn[emotion][layer] : mlp[emotion][layer];
    }
    const Vec& sample_mean(std::size_t layer, Stream s) const {
        return s == Stream::Attn ? attn_sample_mean[layer] : mlp_sample_mean[layer];
    }
};

struct DifferenceVectorSet {
    std::size_t n_layers = 0;
    std::size_t d_ff = 0;     // gated-activation space width
    std::size_t d_concat = 0; // head-concat space width
    std::vector<std::vector<Vec>> mlp;   // [emotion][layer], width d_ff
    std::vector<std::vector<Vec>> attn;  // [emotion][layer], width d_concat

    const Vec& at(std::size_t emotion, std::size_t layer, Stream s) const {
        return s == Stream::Attn ? attn[emotion][layer] : mlp[emotion][layer];
    }
};

namespace detail {

// Groups usable for extraction: exactly one record per emotion, none failed.
inline std::vector<std::array<const RunRecord*, kEmotionCount>> usable_groups(
    const std::vector<RunRecord>& records) {
    std::map<std::size_t, std::array<const RunRecord*, kEmotionCount>> by_group;
    std::map<std::size_t, bool> spoiled;
    for (const RunRecord& r : records) {
        auto& slots = by_group[r.group_id];
        const std::size_t e = emotion_index(r.emotion);
        if (slots[e] != nullptr) spoiled[r.group_id] = true;  // duplicate variant
        slots[e] = &r;
        if (r.success == SuccessFlag::No) spoiled[r.group_id] = true;
    }
    std::vector<std::array<const RunRecord*, kEmotionCount>> out;
    for (const auto& [gid, slots] : by_group) {
        if (spoiled.count(gid)) continue;
        bool complete = true;
        for (const auto* p : slots)
            if (p == nullptr) complete = false;
        if (complete) out.push_back(slots);
    }
    return out;
}

}  // namespace detail

inline DirectionSet extract_directions(const std::vector<RunRecord>& records) {
    const auto groups = detail::usable_groups(records);
    if (groups.empty()) throw NoGroups("extract_directions: no complete successful group");

    std::size_t n_layers = 0;
    for (const TapRecord& t : groups[0][0]->taps.taps)
        n_layers = std::max(n_layers, t.point.layer + 1);
    const std::size_t d = groups[0][0]->taps.at(0, Site::ResidAfterMlp).size();

    DirectionSet ds;
    ds.n_layers = n_layers;
    ds.d_model = d;
    ds.attn.assign(kEmotionCount, std::vector<Vec>(n_layers));
    ds.mlp.assign(kEmotionCount, std::vector<Vec>(n_layers));
    ds.attn_sample_mean.assign(n_layers, Vec(d, 0.0));
    ds.mlp_sample_mean.assign(n_layers, Vec(d, 0.0));

    for (Stream stream : {Stream::Attn, Stream::Mlp}) {
        const Site site = stream_resid_site(stream);
        for (std::size_t l = 0; l < n_layers; ++l) {
            std::array<Vec, kEmotionCount> centroid;
            centroid.fill(Vec(d, 0.0));
            Vec sample_mean(d, 0.0);

            for (const auto& g : groups) {
                std::array<const Vec*, kEmotionCount> act;
                for (std::size_t e = 0; e < kEmotionCount; ++e) act[e] = &g[e]->taps.at(l, site);
                // within-group mean is the neutral baseline; subtracting it
                // cancels shared scenario semantics
                Vec group_mean(d, 0.0);
                for (std::size_t e = 0; e < kEmotionCount; ++e) axpy(1.0, *act[e], group_mean);
                for (double& x : group_mean) x /= static_cast<double>(kEmotionCount);
                for (std::size_t e = 0; e < kEmotionCount; ++e) {
                    axpy(1.0, *act[e], centroid[e]);
                    axpy(-1.0, group_mean, centroid[e]);
                    axpy(1.0, *act[e], sample_mean);
                }
            }
            const double inv_groups = 1.0 / static_cast<double>(groups.size());
            for (std::size_t e = 0; e < kEmotionCount; ++e)
                for (double& x : centroid[e]) x *= inv_groups;
            for (double& x : sample_mean)
                x *= inv_groups / static_cast<double>(kEmotionCount);

            // the global mean here is the mean of the six centroids; with
            // complete groups it is already near zero, but remove it literally
            Vec global_mean(d, 0.0);
            for (std::size_t e = 0; e < kEmotionCount; ++e) axpy(1.0, centroid[e], global_mean);
            for (double& x : global_mean) x /= static_cast<double>(kEmotionCount);

            for (std::size_t e = 0; e < kEmotionCount; ++e) {
                Vec v = sub(centroid[e], global_mean);
                try {
                    v = l2_normalize(v);
                } catch (const DegenerateDirection&) {
                    throw DegenerateDirection("direction for (" + kEmotions[e] + ", layer " +
                                              std::to_string(l) + ", " + stream_name(stream) +
                                              ") collapsed");
                }
                (stream == Stream::Attn ? ds.attn : ds.mlp)[e][l] = std::move(v);
            }
            (stream == Stream::Attn ? ds.attn_sample_mean : ds.mlp_sample_mean)[l] =
                std::move(sample_mean);
        }
    }
    return ds;
}

inline DifferenceVectorSet extract_difference_vectors(const std::vector<RunRecord>& records) {
    const auto groups = detail::usable_groups(records);
    if (groups.empty()) throw NoGroups("extract_difference_vectors: no complete group");

    std::size_t n_layers = 0;
    for (const TapRecord& t : groups[0][0]->taps.taps)
        n_layers = std::max(n_layers, t.point.layer + 1);
    if (!groups[0][0]->taps.has(0, Site::GatedMlp))
        throw MissingSite("difference vectors need gated_mlp taps");
    if (!groups[0][0]->taps.has(0, Site::HeadConcat))
        throw MissingSite("difference vectors need head_concat taps");

    DifferenceVectorSet dv;
    dv.n_layers = n_layers;
    dv.d_ff = groups[0][0]->taps.at(0, Site::GatedMlp).size();
    dv.d_concat = groups[0][0]->taps.at(0, Site::HeadConcat).size();
    dv.mlp.assign(kEmotionCount, std::vector<Vec>(n_layers));
    dv.attn.assign(kEmotionCount, std::vector<Vec>(n_layers));

    for (Stream stream : {Stream::Attn, Stream::Mlp}) {
        const Site site = stream == Stream::Attn ? Site::HeadConcat : Site::GatedMlp;
        const std::size_t width = stream == Stream::Attn ? dv.d_concat : dv.d_ff;
        for (std::size_t l = 0; l < n_layers; ++l) {
            std::array<Vec, kEmotionCount> acc;
            acc.fill(Vec(width, 0.0));
            for (const auto& g : groups) {
                Vec group_mean(width, 0.0);
                for (std::size_t e = 0; e < kEmotionCount; ++e)
                    axpy(1.0, g[e]->taps.at(l, site), group_mean);
                for (double& x : group_mean) x /= static_cast<double>(kEmotionCount);
                for (std::size_t e = 0; e < kEmotionCount; ++e) {
                    axpy(1.0, g[e]->taps.at(l, site), acc[e]);
                    axpy(-1.0, group_mean, acc[e]);
                }
            }
            const double inv_groups = 1.0 / static_cast<double>(groups.size());
            for (std::size_t e = 0; e < kEmotionCount; ++e) {
                for (double& x : acc[e]) x *= inv_groups;
                (stream == Stream::Attn ? dv.attn : dv.mlp)[e][l] = std::move(acc[e]);
            }
        }
    }
    return dv;
}

// ---- nearest-centroid classification -----------------------------------------

struct Classification {
    std::size_t emotion = 0;
    double margin = 0.0;     // best score minus runner-up
    bool low_margin = false;
};

inline Classification centroid_classify(const Vec& hidden, const DirectionSet& directions,
                                        std::size_t layer, Stream stream) {
    EMOCIRC_CHECK(layer < directions.n_layers, "classify: layer out of range");
    const Vec centered = sub(hidden, directions.sample_mean(layer, stream));
    std::array<double, kEmotionCount> scores{};
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        scores[e] = dot(centered, directions.at(e, layer, stream));

    Classification c;
    for (std::size_t e = 1; e < kEmotionCount; ++e)
        if (scores[e] > scores[c.emotion]) c.emotion = e;  // ties keep the fixed order
    double runner_up = -1e300;
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        if (e != c.emotion) runner_up = std::max(runner_up, scores[e]);
    c.margin = scores[c.emotion] - runner_up;
    c.low_margin = c.margin <= 1e-9 * std::max(1.0, std::abs(scores[c.emotion]));
    return c;
}

// ---- serialization ------------------------------------------------------------

inline void save_directions(const DirectionSet& ds, const DifferenceVectorSet& dv,
                            const std::string& path) {
    Container c;
    c.meta = {{"kind", "directions"},
              {"n_layers", ds.n_layers},
              {"d_model", ds.d_model},
              {"d_ff", dv.d_ff},
              {"d_concat", dv.d_concat},
              {"emotions", kEmotions}};
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < ds.n_layers; ++l) {
            const std::string suffix = kEmotions[e] + "." + std::to_string(l);
            c.add_vec("dir.attn." + suffix, ds.attn[e][l], "f64");
            c.add_vec("dir.mlp." + suffix, ds.mlp[e][l], "f64");
            c.add_vec("diff.attn." + suffix, dv.attn[e][l], "f64");
            c.add_vec("diff.mlp." + suffix, dv.mlp[e][l], "f64");
        }
    for (std::size_t l = 0; l < ds.n_layers; ++l) {
        c.add_vec("mean.attn." + std::to_string(l), ds.attn_sample_mean[l], "f64");
        c.add_vec("mean.mlp." + std::to_string(l), ds.mlp_sample_mean[l], "f64");
    }
    c.save(path);
}

inline std::pair<DirectionSet, DifferenceVectorSet> load_directions(const std::string& path) {
    const Container c = Container::load(path);
    if (c.meta.value("kind", "") != "directions")
        throw FormatError("'" + path + "' is not a directions container");
    DirectionSet ds;
    DifferenceVectorSet dv;
    ds.n_layers = dv.n_layers = c.meta.at("n_layers").get<std::size_t>();
    ds.d_model = c.meta.at("d_model").get<std::size_t>();
    dv.d_ff = c.meta.at("d_ff").get<std::size_t>();
    dv.d_concat = c.meta.at("d_concat").get<std::size_t>();
    ds.attn.assign(kEmotionCount, std::vector<Vec>(ds.n_layers));
    ds.mlp.assign(kEmotionCount, std::vector<Vec>(ds.n_layers));
    dv.attn.assign(kEmotionCount, std::vector<Vec>(ds.n_layers));
    dv.mlp.assign(kEmotionCount, std::vector<Vec>(ds.n_layers));
    ds.attn_sample_mean.resize(ds.n_layers);
    ds.mlp_sample_mean.resize(ds.n_layers);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < ds.n_layers; ++l) {
            const std::string suffix = kEmotions[e] + "." + std::to_string(l);
            ds.attn[e][l] = c.get_vec("dir.attn." + suffix);
            ds.mlp[e][l] = c.get_vec("dir.mlp." + suffix);
            dv.attn[e][l] = c.get_vec("diff.attn." + suffix);
            dv.mlp[e][l] = c.get_vec("diff.mlp." + suffix);
        }
    for (std::size_t l = 0; l < ds.n_layers; ++l) {
        ds.attn_sample_mean[l] = c.get_vec("mean.attn." + std::to_string(l));
        ds.mlp_sample_mean[l] = c.get_vec("mean.mlp." + std::to_string(l));
    }
    return {std::move(ds), std::move(dv)};
}

}  // namespace emocirc
