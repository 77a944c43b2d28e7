#pragma once

// Steering, ablation, enhancement and random-control experiments. A sweep
// applies edits to the top-k ranked units per layer (or random units for the
// control), recomputes the forward pass, and aggregates the change of the
// summed projection score over the corpus.

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribution.hpp"
#include "directions.hpp"
#include "model.hpp"
#include "runtime.hpp"
#include "store.hpp"
#include "threading.hpp"

namespace emocirc {

// s = sum over layers of the two residual projections.
inline double emotion_score(const TapLog& tap_log, const DirectionSet& directions,
                            std::size_t emotion) {
    double s = 0.0;
    for (std::size_t l = 0; l < directions.n_layers; ++l) {
        s += dot(tap_log.at(l, Site::ResidAfterAttn), directions.attn[emotion][l]);
        s += dot(tap_log.at(l, Site::ResidAfterMlp), directions.mlp[emotion][l]);
    }
    return s;
}

// Fractional band generalizing the reference model's layers 11-20 of 28.
inline std::pair<std::size_t, std::size_t> default_steering_band(std::size_t n_layers) {
    auto r = [n_layers](double frac) {
        return static_cast<std::size_t>(frac * static_cast<double>(n_layers) + 0.5);
    };
    std::size_t begin = r(11.0 / 28.0);
    std::size_t end = r(21.0 / 28.0);  // exclusive
    if (end <= begin) end = begin + 1;
    if (end > n_layers) end = n_layers;
    if (begin >= end) begin = end - 1;
    return {begin, end};
}

inline std::vector<EditAction> steering_edits(const DirectionSet& directions,
                                              std::size_t emotion, double alpha,
                                              std::size_t layer_begin, std::size_t layer_end,
                                              PositionPolicy policy) {
    EMOCIRC_CHECK(layer_begin < layer_end && layer_end <= directions.n_layers,
                  "steer: empty or out-of-range layer band");
    std::vector<EditAction> edits;
    for (std::size_t l = layer_begin; l < layer_end; ++l)
        edits.push_back({l, Site::ResidAfterMlp, EditKind::AddScaledVector, {},
                         directions.mlp[emotion][l], alpha, true, policy});
    return edits;
}

struct SteerResult {
    std::vector<TokenId> tokens;
    TapLog final_taps;  // all sites at the last generated position
};

// h <- h + alpha * RMS(h) * v over the layer band, under greedy decoding.
inline SteerResult steer(const Model& model, const std::vector<TokenId>& tokens,
                         const DirectionSet& directions, std::size_t emotion,
                         double alpha = 8.0,
                         std::optional<std::pair<std::size_t, std::size_t>> band = std::nullopt,
                         std::size_t max_new = 2,
                         PositionPolicy policy = PositionPolicy::CurrentToken) {
    const auto [lo, hi] = band ? *band : default_steering_band(model.config.n_layers);
    const auto edits = steering_edits(directions, emotion, alpha, lo, hi, policy);
    SteerResult r;
    r.tokens = greedy_generate(model, tokens, max_new, edits);
    const Trace tr = run_trace(model, r.tokens, edits, tokens.size());
    r.final_taps = collect_taps(tr, all_site_taps(model.config, PositionPolicy::CurrentToken));
    return r;
}

// ---- sweeps -------------------------------------------------------------------

enum class SweepTarget { Neurons, Heads };
enum class SweepMode { Ablate, Enhance };

struct SweepSpec {
    SweepTarget target = SweepTarget::Neurons;
    SweepMode mode = SweepMode::Ablate;
    std::vector<std::size_t> k_values = {0, 2, 4, 8, 16, 32, 64, 128};
    double lambda = 1.0;
    std::size_t layer_begin = 0;
    std::size_t layer_end = SIZE_MAX;  // clamped to n_layers
    std::size_t seeds = 10;            // random controls only
    std::uint64_t seed = 1;

    void validate() const {
        EMOCIRC_CHECK(!k_values.empty() && k_values.front() == 0,
                      "sweep: k values must start at 0");
        for (std::size_t i = 1; i < k_values.size(); ++i)
            EMOCIRC_CHECK(k_values[i] > k_values[i - 1], "sweep: k values must ascend");
        EMOCIRC_CHECK(seeds >= 1, "sweep: seeds must be >= 1");
    }
};

struct SweepPoint {
    std::size_t k = 0;
    double mean_ds = 0.0;
    double ci_half = 0.0;
    std::vector<double> per_sample;  // pooled over seeds for random controls
};

struct SweepResult {
    SweepTarget target = SweepTarget::Neurons;
    SweepMode mode = SweepMode::Ablate;
    std::vector<SweepPoint> points;
    std::vector<std::size_t> sample_emotion;  // emotion index per sample slot
    std::vector<std::string> warnings;

    double mean_abs_ds(std::size_t k) const {
        for (const auto& p : points)
            if (p.k == k) return std::abs(p.mean_ds);
        throw ContractViolation("sweep: no point for k=" + std::to_string(k));
    }
};

namespace detail {

// Unit indices for one (emotion, layer, k) cell of a sweep.
struct UnitSource {
    const NeuronRanking* neurons = nullptr;
    const HeadRanking* heads = nullptr;
    // fixed random sets per layer (random controls); outer index = layer
    const std::vector<std::vector<std::size_t>>* random_units = nullptr;
};

inline std::vector<std::size_t> sweep_unit_indices(const UnitSource& src, SweepTarget target,
                                                   std::size_t emotion, std::size_t layer,
                                                   std::size_t k) {
    if (src.random_units) {
        const auto& pool = (*src.random_units)[layer];
        return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(k, pool.size()))};
    }
    if (target == SweepTarget::Neurons) return src.neurons->top_k(emotion, layer, k);
    return src.heads->top_k(emotion, layer, k);
}

inline std::vector<EditAction> build_sweep_edits(const ModelConfig& cfg, const SweepSpec& spec,
                                                 const DifferenceVectorSet& diffs,
                                                 const UnitSource& src, std::size_t emotion,
                                                 std::size_t k, std::size_t layer_begin,
                                                 std::size_t layer_end,
                                                 std::vector<std::string>* warnings) {
    std::vector<EditAction> edits;
    if (k == 0) return edits;
    const std::size_t width =
        spec.target == SweepTarget::Neurons ? cfg.d_ff : cfg.n_heads;
    std::size_t k_eff = k;
    if (k_eff > width) {
        if (warnings)
            warnings->push_back("k=" + std::to_string(k) + " exceeds layer width " +
                                std::to_string(width) + "; clamped");
        k_eff = width;
    }
    for (std::size_t l = layer_begin; l < layer_end; ++l) {
        const auto units = sweep_unit_indices(src, spec.target, emotion, l, k_eff);
        if (units.empty()) continue;
        if (spec.target == SweepTarget::Neurons) {
            if (spec.mode == SweepMode::Ablate) {
                edits.push_back({l, Site::GatedMlp, EditKind::ZeroIndices, units, {}, 1.0,
                                 false, PositionPolicy::LastPromptToken});
            } else {
                edits.push_back({l, Site::GatedMlp, EditKind::AddVectorAtIndices, units,
                                 diffs.mlp[emotion][l], spec.lambda, false,
                                 PositionPolicy::LastPromptToken});
            }
        } else {
            std::vector<std::size_t> slice;
            for (std::size_t head : units)
                for (std::size_t c = 0; c < cfg.d_head; ++c)
                    slice.push_back(head * cfg.d_head + c);
            if (spec.mode == SweepMode::Ablate) {
                edits.push_back({l, Site::HeadConcat, EditKind::ZeroIndices, slice, {}, 1.0,
                                 false, PositionPolicy::LastPromptToken});
            } else {
                edits.push_back({l, Site::HeadConcat, EditKind::AddVectorAtIndices, slice,
                                 diffs.attn[emotion][l], spec.lambda, false,
                                 PositionPolicy::LastPromptToken});
            }
        }
    }
    return edits;
}

struct SweepSample {
    std::vector<TokenId> prompt;
    std::size_t emotion = 0;
};

// Ablation probes the emotion variants; enhancement probes the neutral prompts
// (no emotion instruction), asking whether internal modulation alone moves the
// score toward the target emotion.
inline std::vector<SweepSample> sweep_samples(const std::vector<PromptGroup>& corpus,
                                              SweepMode mode) {
    std::vector<SweepSample> out;
    for (const PromptGroup& g : corpus)
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            SweepSample s;
            s.prompt = mode == SweepMode::Ablate ? g.variants[e] : g.neutral;
            s.emotion = e;
            if (!s.prompt.empty()) out.push_back(std::move(s));
        }
    return out;
}

inline SweepResult run_sweep_impl(const Model& model, const std::vector<PromptGroup>& corpus,
                                  const DirectionSet& directions,
                                  const DifferenceVectorSet& diffs, const UnitSource& src,
                                  const SweepSpec& spec) {
    spec.validate();
    const ModelConfig& cfg = model.config;
    const std::size_t layer_begin = std::min(spec.layer_begin, cfg.n_layers);
    const std::size_t layer_end = std::min(spec.layer_end, cfg.n_layers);
    const auto samples = detail::sweep_samples(corpus, spec.mode);
    EMOCIRC_CHECK(!samples.empty(), "sweep: empty corpus");

    SweepResult result;
    result.target = spec.target;
    result.mode = spec.mode;
    result.sample_emotion.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        result.sample_emotion[i] = samples[i].emotion;

    // one edit plan per (emotion, k); warnings deduplicate naturally per k
    std::vector<std::vector<std::vector<EditAction>>> plans(spec.k_values.size());
    for (std::size_t ki = 0; ki < spec.k_values.size(); ++ki) {
        plans[ki].resize(kEmotionCount);
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            plans[ki][e] = build_sweep_edits(cfg, spec, diffs, src, e, spec.k_values[ki],
                                             layer_begin, layer_end,
                                             e == 0 ? &result.warnings : nullptr);
    }

    const auto taps = all_site_taps(cfg);
    result.points.resize(spec.k_values.size());
    for (std::size_t ki = 0; ki < spec.k_values.size(); ++ki) {
        result.points[ki].k = spec.k_values[ki];
        result.points[ki].per_sample.resize(samples.size());
    }

    parallel_for(samples.size(), [&](std::size_t si) {
        const auto& sample = samples[si];
        const ForwardResult base = forward(model, sample.prompt, taps);
        const double s_base = emotion_score(base.tap_log, directions, sample.emotion);
        for (std::size_t ki = 0; ki < spec.k_values.size(); ++ki) {
            const ForwardResult edited =
                forward(model, sample.prompt, taps, plans[ki][sample.emotion]);
            const double s_edited = emotion_score(edited.tap_log, directions, sample.emotion);
            result.points[ki].per_sample[si] = s_edited - s_base;
        }
    });

    for (auto& p : result.points) {
        p.mean_ds = mean(p.per_sample);
        p.ci_half = ci95_half_width(p.per_sample);
    }
    return result;
}

}  // namespace detail

inline SweepResult run_sweep(const Model& model, const std::vector<PromptGroup>& corpus,
                             const DirectionSet& directions, const DifferenceVectorSet& diffs,
                             const NeuronRanking& neurons, const HeadRanking& heads,
                             const SweepSpec& spec) {
    detail::UnitSource src;
    src.neurons = &neurons;
    src.heads = &heads;
    return detail::run_sweep_impl(model, corpus, directions, diffs, src, spec);
}

// Same protocol with uniformly random unit sets per layer, averaged over
// spec.seeds seeds.
inline SweepResult random_control(const Model& model, const std::vector<PromptGroup>& corpus,
                                  const DirectionSet& directions,
                                  const DifferenceVectorSet& diffs, const SweepSpec& spec) {
    spec.validate();
    const ModelConfig& cfg = model.config;
    const std::size_t width = spec.target == SweepTarget::Neurons ? cfg.d_ff : cfg.n_heads;
    const std::size_t max_k = std::min(spec.k_values.back(), width);

    SweepResult pooled;
    pooled.target = spec.target;
    pooled.mode = spec.mode;
    for (std::uint64_t s = 0; s < spec.seeds; ++s) {
        // a fixed random prefix per layer: the size-k set is its prefix, so
        // containment across k holds for the control too
        std::vector<std::vector<std::size_t>> units(cfg.n_layers);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            Rng rng(derive_seed(spec.seed + s, "random-units-" + std::to_string(l)));
            units[l] = rng.sample_without_replacement(width, max_k);
        }
        detail::UnitSource src;
        src.random_units = &units;
        const SweepResult one = detail::run_sweep_impl(model, corpus, directions, diffs, src,
                                                       spec);
        if (pooled.points.empty()) {
            pooled.points.resize(one.points.size());
            for (std::size_t ki = 0; ki < one.points.size(); ++ki)
                pooled.points[ki].k = one.points[ki].k;
            pooled.sample_emotion = one.sample_emotion;
            pooled.warnings = one.warnings;
        }
        for (std::size_t ki = 0; ki < one.points.size(); ++ki) {
            auto& dst = pooled.points[ki].per_sample;
            dst.insert(dst.end(), one.points[ki].per_sample.begin(),
                       one.points[ki].per_sample.end());
        }
    }
    for (auto& p : pooled.points) {
        p.mean_ds = mean(p.per_sample);
        p.ci_half = ci95_half_width(p.per_sample);
    }
    return pooled;
}

// ---- export -------------------------------------------------------------------

inline std::string sweep_to_csv(const SweepResult& r) {
    std::ostringstream os;
    os << "k,mean_ds,ci_low,ci_high\n";
    os.precision(12);
    for (const auto& p : r.points)
        os << p.k << "," << p.mean_ds << "," << (p.mean_ds - p.ci_half) << ","
           << (p.mean_ds + p.ci_half) << "\n";
    return os.str();
}

inline nlohmann::json sweep_to_json(const SweepResult& r) {
    nlohmann::json j;
    j["target"] = r.target == SweepTarget::Neurons ? "neurons" : "heads";
    j["mode"] = r.mode == SweepMode::Ablate ? "ablate" : "enhance";
    j["warnings"] = r.warnings;
    nlohmann::json emotions = nlohmann::json::array();
    for (std::size_t e : r.sample_emotion) emotions.push_back(kEmotions[e]);
    j["sample_emotions"] = std::move(emotions);
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : r.points)
        points.push_back({{"k", p.k},
                          {"mean_ds", p.mean_ds},
                          {"ci_half", p.ci_half},
                          {"per_sample", p.per_sample}});
    j["points"] = std::move(points);
    return j;
}

}  // namespace emocirc
