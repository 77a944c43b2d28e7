#pragma once

// Toy models with planted emotion structure, and matched synthetic corpora.
// These provide exact ground truth for attribution and intervention tests.
//
// Construction sketch. An orthonormal family holds one direction d_e per
// emotion, one trigger direction rho_e per emotion, and a shared bias
// direction b present in every embedding. A variant's trigger token carries
// rho_e; planted heads key on (rho_e + d_e) content, attend to the trigger
// position and write d_e into the residual stream; planted MLP neurons detect
// (rho_e + d_e) in the normed residual, fire above the gate floor, and their
// down-projection columns write d_e; the unembedding row of the emotion's
// readout token is d_e. Because detectors read d_e as well as rho_e, the
// signal regenerates layer to layer and injections at any planted site cascade
// forward. All weights are cast through f32 so containers round-trip bitwise.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emotions.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "runtime.hpp"

namespace emocirc {

struct PlantedSpec {
    std::vector<Vec> directions;  // [emotion] planted residual direction d_e, unit norm
    // [emotion][layer] -> component indices
    std::vector<std::vector<std::vector<std::size_t>>> neurons;
    std::vector<std::vector<std::vector<std::size_t>>> heads;
    std::vector<TokenId> trigger_tokens;   // [emotion]
    std::vector<TokenId> readout_tokens;   // [emotion]
    TokenId neutral_token = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["directions"] = directions;
        j["neurons"] = neurons;
        j["heads"] = heads;
        j["trigger_tokens"] = trigger_tokens;
        j["readout_tokens"] = readout_tokens;
        j["neutral_token"] = neutral_token;
        return j;
    }

    static PlantedSpec from_json(const nlohmann::json& j) {
        PlantedSpec s;
        s.directions = j.at("directions").get<std::vector<Vec>>();
        s.neurons = j.at("neurons").get<std::vector<std::vector<std::vector<std::size_t>>>>();
        s.heads = j.at("heads").get<std::vector<std::vector<std::vector<std::size_t>>>>();
        s.trigger_tokens = j.at("trigger_tokens").get<std::vector<TokenId>>();
        s.readout_tokens = j.at("readout_tokens").get<std::vector<TokenId>>();
        s.neutral_token = j.at("neutral_token").get<TokenId>();
        return s;
    }
};

struct ToyKnobs {
    std::size_t neurons_per_layer = 3;  // planted neurons per layer per emotion
    std::size_t heads_per_layer = 1;    // planted heads per layer per emotion

    // Magnitudes. Targets: gate activation of planted neurons around 2 (floor
    // gamma = 1), per-layer attention write about 1 and MLP write about 2.5
    // along d_e, so ablating planted neurons removes well over half the final
    // projection.
    double gate_floor = 1.0;
    double bias_mag = 1.0;
    double trigger_mag = 1.0;
    double rho_weight = 2.0;  // detector weighting of trigger vs emotion direction
    // Pairwise cosine of the planted directions. Slightly negative correlation
    // offsets the six-mean subtraction in extraction while staying inside the
    // |cos| < 0.1 quasi-orthogonality contract.
    double direction_correlation = -0.08;
    double emb_noise = 0.005;
    double q_scale = 3.0;
    double k_scale = 3.0;
    double v_scale = 0.5;
    double attn_out_col = 0.5;
    double gate_row = 0.8;
    double main_row = 0.2;
    double mlp_col = 0.45;
    double readout_row = 1.0;
    double bg_attn = 0.001;
    double bg_mlp = 0.01;
    double bg_unembed = 0.05;

    // Calibrated per-layer targets. Equalizing realized gate and write
    // magnitudes across emotions keeps the extracted directions and
    // difference vectors symmetric.
    double gate_target = 2.0;
    double attn_write_target = 0.15;
    double mlp_write_target = 4.0;
    std::size_t calibration_rounds = 2;
};

namespace detail {

// Orthonormal basis vectors from seeded Gaussians (Gram-Schmidt).
inline std::vector<Vec> orthonormal_family(Rng& rng, std::size_t count, std::size_t dim) {
    EMOCIRC_CHECK(count <= dim, "orthonormal_family: more vectors than dimensions");
    std::vector<Vec> basis;
    while (basis.size() < count) {
        Vec v = rng.gaussian_vec(dim);
        for (const Vec& u : basis) axpy(-dot(v, u), u, v);
        const double n = norm2(v);
        if (n < 1e-6) continue;  // essentially impossible, but re-draw if collinear
        basis.push_back(scaled(v, 1.0 / n));
    }
    return basis;
}

}  // namespace detail

// Number of filler tokens available after the reserved ids.
inline TokenId first_filler_token(const ModelConfig& cfg) {
    (void)cfg;
    return static_cast<TokenId>(1 + 2 * kEmotionCount);
}

namespace detail {

// Rescales the planted output columns so every (emotion, layer) pair realizes
// the same write magnitude along its direction on a fixed probe prompt. The
// cascade otherwise amplifies small construction asymmetries into a several
// percent spread across emotions.
inline void calibrate_planted_writes(Model& m, const PlantedSpec& spec, const ToyKnobs& knobs);

}  // namespace detail

// Builds a model whose emotion circuitry is known by construction.
inline std::pair<Model, PlantedSpec> make_toy_model(const ModelConfig& cfg, const ToyKnobs& knobs,
                                                    std::uint64_t seed) {
    cfg.validate();
    const std::size_t d = cfg.d_model, h = cfg.n_heads, dh = cfg.d_head, ff = cfg.d_ff,
                      L = cfg.n_layers;
    const std::size_t npl = knobs.neurons_per_layer, hpl = knobs.heads_per_layer;
    const bool planted = npl > 0 || hpl > 0;

    if (d < 2 * kEmotionCount + 2)
        throw ContractViolation("infeasible knobs: d_model too small to host the direction family");
    if (ff < kEmotionCount * npl)
        throw ContractViolation("infeasible knobs: d_ff cannot host disjoint planted neuron sets");
    if (cfg.vocab_size < static_cast<std::size_t>(first_filler_token(cfg)) + 4)
        throw ContractViolation("infeasible knobs: vocab too small for trigger/readout/filler ids");
    if (hpl > h) throw ContractViolation("infeasible knobs: more planted heads than heads");

    Rng rng(derive_seed(seed, "toy-model"));

    // 6 emotion directions, 6 trigger directions, 1 bias direction.
    const auto family = detail::orthonormal_family(rng, 2 * kEmotionCount + 1, d);
    std::vector<Vec> dirs(family.begin(), family.begin() + kEmotionCount);
    std::vector<Vec> trig(family.begin() + kEmotionCount, family.begin() + 2 * kEmotionCount);
    const Vec bias = family[2 * kEmotionCount];

    // blend toward the shared mean for the requested pairwise correlation:
    // d_e = normalize(f_e - t*mean(f)), <d_e, d_e'> = -c with t solving
    // (t^2 - 2t)/6 = -c/(1+c)
    if (knobs.direction_correlation != 0.0) {
        const double c = -knobs.direction_correlation;
        EMOCIRC_CHECK(c > 0.0 && c < 0.1 + 1e-12,
                      "direction_correlation must lie in (-0.1, 0)");
        const double t = 1.0 - std::sqrt(1.0 - 6.0 * c / (1.0 + c));
        Vec fbar(d, 0.0);
        for (std::size_t e = 0; e < kEmotionCount; ++e) axpy(1.0, dirs[e], fbar);
        for (double& x : fbar) x /= static_cast<double>(kEmotionCount);
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            axpy(-t, fbar, dirs[e]);
            dirs[e] = l2_normalize(dirs[e]);
        }
    }

    PlantedSpec spec;
    spec.directions = dirs;
    spec.neutral_token = 0;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        spec.trigger_tokens.push_back(static_cast<TokenId>(1 + e));
        spec.readout_tokens.push_back(static_cast<TokenId>(1 + kEmotionCount + e));
    }
    spec.neurons.assign(kEmotionCount, std::vector<std::vector<std::size_t>>(L));
    spec.heads.assign(kEmotionCount, std::vector<std::vector<std::size_t>>(L));

    Model m;
    m.config = cfg;

    auto f32 = [](double x) { return static_cast<double>(static_cast<float>(x)); };
    auto noise_mat = [&](std::size_t r, std::size_t c, double sigma) {
        Mat mat(r, c);
        for (double& x : mat.a) x = f32(sigma * rng.gaussian());
        return mat;
    };
    auto set_row = [&](Mat& mat, std::size_t r, const Vec& v, double scale) {
        for (std::size_t c = 0; c < mat.cols; ++c) mat.at(r, c) = f32(mat.at(r, c) + scale * v[c]);
    };
    auto set_col = [&](Mat& mat, std::size_t c, const Vec& v, double scale) {
        for (std::size_t r = 0; r < mat.rows; ++r) mat.at(r, c) = f32(mat.at(r, c) + scale * v[r]);
    };
    // Embedding noise lives in the orthogonal complement of the direction
    // family. Detector responses below the gate floor are quadratic, so with
    // no layer-0 seed the background never self-amplifies direction content
    // at non-trigger positions.
    auto complement_noise = [&](double sigma) {
        Vec v = rng.gaussian_vec(d, sigma);
        for (const Vec& u : family) axpy(-dot(v, u), u, v);
        return v;
    };

    // --- embeddings ---
    // Non-trigger tokens carry a unit-scale bias direction; that keeps their
    // norm large enough that background writes stay a small fraction of the
    // residual after norming. Trigger tokens carry only the trigger direction,
    // so at their own position the trigger content dominates the normed state.
    m.token_embedding = Mat(cfg.vocab_size, d);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
        const Vec noise = complement_noise(knobs.emb_noise);
        for (std::size_t c = 0; c < d; ++c)
            m.token_embedding.at(t, c) = f32(noise[c] + knobs.bias_mag * bias[c]);
    }
    if (planted) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const auto row = static_cast<std::size_t>(spec.trigger_tokens[e]);
            const Vec noise = complement_noise(knobs.emb_noise);
            for (std::size_t c = 0; c < d; ++c)
                m.token_embedding.at(row, c) = f32(noise[c] + knobs.trigger_mag * trig[e][c]);
        }
    } else {
        // no emotion signal: all trigger embeddings identical to the neutral one
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            for (std::size_t c = 0; c < d; ++c)
                m.token_embedding.at(static_cast<std::size_t>(spec.trigger_tokens[e]), c) =
                    m.token_embedding.at(static_cast<std::size_t>(spec.neutral_token), c);
    }

    // --- unembedding: readout rows along d_e ---
    m.unembedding = noise_mat(cfg.vocab_size, d, knobs.bg_unembed);
    if (planted)
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            set_row(m.unembedding, static_cast<std::size_t>(spec.readout_tokens[e]), dirs[e],
                    knobs.readout_row);

    m.final_norm_scale = Vec(d, 1.0);

    // detector for emotion e: keys, values and MLP rows read a weighted blend
    // of the trigger and emotion directions. The trigger side is up-weighted
    // so layer 0 fires off the trigger token alone; the direction side keeps
    // detectors firing at depth, where accumulated d_e dominates the stream.
    std::vector<Vec> attn_det(kEmotionCount);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        attn_det[e] = l2_normalize(add(scaled(trig[e], knobs.rho_weight), dirs[e]));
    // query detector: fires on the bias carried by ordinary tokens, on trigger
    // content at the trigger position itself, and on accumulated emotion
    // content at later layers
    Vec q_det = bias;
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        q_det = add(q_det, add(dirs[e], scaled(trig[e], knobs.rho_weight)));
    q_det = l2_normalize(q_det);

    m.layers.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        LayerWeights& lw = m.layers[l];
        lw.norm1_scale = Vec(d, 1.0);
        lw.norm2_scale = Vec(d, 1.0);
        for (std::size_t i = 0; i < h; ++i) {
            lw.w_q.push_back(noise_mat(dh, d, knobs.bg_attn));
            lw.w_k.push_back(noise_mat(dh, d, knobs.bg_attn));
            lw.w_v.push_back(noise_mat(dh, d, knobs.bg_attn));
        }
        lw.w_o = noise_mat(d, h * dh, knobs.bg_attn);
        lw.w_u1 = noise_mat(ff, d, knobs.bg_mlp);
        lw.w_u2 = noise_mat(ff, d, knobs.bg_mlp);
        lw.w_d = noise_mat(d, ff, knobs.bg_mlp);

        if (!planted) continue;

        // planted heads; several emotions may share one head (distinct
        // channels) when h < 6 * heads_per_layer
        std::vector<std::size_t> channels_used(h, 0);
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            for (std::size_t s = 0; s < hpl; ++s) {
                const std::size_t head = (e + l + s * kEmotionCount) % h;
                const std::size_t ch = channels_used[head]++;
                if (ch >= dh)
                    throw ContractViolation(
                        "infeasible knobs: head hosts more emotions than d_head channels");
                set_row(lw.w_k[head], ch, attn_det[e], knobs.k_scale);
                set_row(lw.w_v[head], ch, attn_det[e], knobs.v_scale);
                set_row(lw.w_q[head], ch, q_det, knobs.q_scale);
                set_col(lw.w_o, head * dh + ch, dirs[e], knobs.attn_out_col);
                auto& hs = spec.heads[e][l];
                if (std::find(hs.begin(), hs.end(), head) == hs.end()) hs.push_back(head);
            }
        }

        // planted neurons: disjoint across emotions within the layer
        Rng layer_rng(derive_seed(seed, "neuron-slots-" + std::to_string(l)));
        const auto slots = layer_rng.sample_without_replacement(ff, kEmotionCount * npl);
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            for (std::size_t k = 0; k < npl; ++k) {
                const std::size_t j = slots[e * npl + k];
                Vec det = scaled(attn_det[e], 1.0);
                set_row(lw.w_u1, j, det, knobs.gate_row);
                set_row(lw.w_u2, j, det, knobs.main_row);
                set_col(lw.w_d, j, dirs[e], knobs.mlp_col);
                spec.neurons[e][l].push_back(j);
            }
            std::sort(spec.neurons[e][l].begin(), spec.neurons[e][l].end());
        }
    }

    m.validate();
    if (planted) detail::calibrate_planted_writes(m, spec, knobs);
    return {std::move(m), std::move(spec)};
}

// Every sublayer writes a nonzero update, yet the map from any injected
// perturbation to the final hidden state is affine: attention patterns are
// frozen (w_q = w_k = 0 gives uniform weights), the gate is frozen open and
// norms are identities.
inline Model make_linear_toy_model(const ModelConfig& base_cfg, std::uint64_t seed,
                                   double sigma = 0.05) {
    ModelConfig cfg = base_cfg;
    cfg.identity_norms = true;
    cfg.gate_frozen_open = true;
    cfg.rope_enabled = false;
    cfg.validate();

    Rng rng(derive_seed(seed, "linear-toy"));
    auto mat = [&](std::size_t r, std::size_t c, double s) {
        Mat m(r, c);
        for (double& x : m.a) x = static_cast<double>(static_cast<float>(s * rng.gaussian()));
        return m;
    };

    Model m;
    m.config = cfg;
    m.token_embedding = mat(cfg.vocab_size, cfg.d_model, 0.5);
    m.unembedding = mat(cfg.vocab_size, cfg.d_model, 0.5);
    m.final_norm_scale = Vec(cfg.d_model, 1.0);
    m.layers.resize(cfg.n_layers);
    for (auto& lw : m.layers) {
        lw.norm1_scale = Vec(cfg.d_model, 1.0);
        lw.norm2_scale = Vec(cfg.d_model, 1.0);
        for (std::size_t i = 0; i < cfg.n_heads; ++i) {
            lw.w_q.push_back(Mat(cfg.d_head, cfg.d_model));
            lw.w_k.push_back(Mat(cfg.d_head, cfg.d_model));
            lw.w_v.push_back(mat(cfg.d_head, cfg.d_model, sigma));
        }
        lw.w_o = mat(cfg.d_model, cfg.n_heads * cfg.d_head, sigma);
        lw.w_u1 = Mat(cfg.d_ff, cfg.d_model);  // unused behind the frozen gate
        lw.w_u2 = mat(cfg.d_ff, cfg.d_model, sigma);
        lw.w_d = mat(cfg.d_model, cfg.d_ff, sigma);
    }
    m.validate();
    return m;
}

// --- synthetic corpus --------------------------------------------------------

struct SyntheticGroup {
    std::size_t id = 0;
    std::string valence;             // cycles positive / neutral / negative
    std::vector<TokenId> scenario;   // shared block
    std::array<TokenId, kEmotionCount> trigger{};  // per-emotion final token
    TokenId neutral_terminal = 0;

    std::vector<TokenId> variant(std::size_t e) const {
        std::vector<TokenId> t = scenario;
        t.push_back(trigger[e]);
        return t;
    }
    std::vector<TokenId> neutral_prompt() const {
        std::vector<TokenId> t = scenario;
        t.push_back(neutral_terminal);
        return t;
    }
};

namespace detail {

inline void calibrate_planted_writes(Model& m, const PlantedSpec& spec, const ToyKnobs& knobs) {
    const ModelConfig& cfg = m.config;
    const TokenId filler0 = first_filler_token(cfg);
    auto f32 = [](double x) { return static_cast<double>(static_cast<float>(x)); };

    for (std::size_t round = 0; round < knobs.calibration_rounds; ++round) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            std::vector<TokenId> probe;
            for (int t = 0; t < 6; ++t) probe.push_back(filler0 + t);
            probe.push_back(spec.trigger_tokens[e]);
            // layers calibrated front to back; each adjustment shifts what
            // deeper layers see, so re-run the trace after every layer
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                {
                    const Trace tg = run_trace(m, probe, {});
                    const std::size_t last = probe.size() - 1;
                    double mean_g = 0.0;
                    for (std::size_t j : spec.neurons[e][l]) mean_g += tg.gated[l].at(last, j);
                    if (!spec.neurons[e][l].empty())
                        mean_g /= static_cast<double>(spec.neurons[e][l].size());
                    if (mean_g > 0.05 * knobs.gate_target) {
                        const double factor = knobs.gate_target / mean_g;
                        for (std::size_t j : spec.neurons[e][l])
                            for (std::size_t col = 0; col < cfg.d_model; ++col)
                                m.layers[l].w_u2.at(j, col) =
                                    f32(m.layers[l].w_u2.at(j, col) * factor);
                    }
                }
                const Trace tr = run_trace(m, probe, {});
                const std::size_t last = probe.size() - 1;
                const double attn_write =
                    dot(sub(tr.resid_after_attn[l].row_vec(last), tr.resid_in[l].row_vec(last)),
                        spec.directions[e]);
                const double mlp_write =
                    dot(sub(tr.resid_after_mlp[l].row_vec(last),
                            tr.resid_after_attn[l].row_vec(last)),
                        spec.directions[e]);

                if (attn_write > 0.05 * knobs.attn_write_target) {
                    const double factor = knobs.attn_write_target / attn_write;
                    for (std::size_t head : spec.heads[e][l]) {
                        // only this emotion's channel: the one whose w_o
                        // column aligns with d_e
                        for (std::size_t ch = 0; ch < cfg.d_head; ++ch) {
                            const std::size_t col = head * cfg.d_head + ch;
                            if (std::abs(dot(m.layers[l].w_o.col_vec(col), spec.directions[e])) <
                                0.25 * knobs.attn_out_col)
                                continue;
                            for (std::size_t r = 0; r < cfg.d_model; ++r)
                                m.layers[l].w_o.at(r, col) = f32(m.layers[l].w_o.at(r, col) *
                                                                 factor);
                        }
                    }
                }
                if (mlp_write > 0.05 * knobs.mlp_write_target) {
                    const double factor = knobs.mlp_write_target / mlp_write;
                    for (std::size_t j : spec.neurons[e][l])
                        for (std::size_t r = 0; r < cfg.d_model; ++r)
                            m.layers[l].w_d.at(r, j) = f32(m.layers[l].w_d.at(r, j) * factor);
                }
            }
        }
    }
}

}  // namespace detail

// Six emotion variants per group over one shared scenario block; the analog of
// one scenario-event text prompted with each emotion.
inline std::vector<SyntheticGroup> make_elicitation_corpus(std::size_t n_groups,
                                                           const ModelConfig& cfg,
                                                           std::uint64_t seed) {
    EMOCIRC_CHECK(n_groups >= 1, "corpus: n_groups must be >= 1");
    Rng rng(derive_seed(seed, "corpus"));
    const TokenId filler0 = first_filler_token(cfg);
    const std::size_t n_filler = cfg.vocab_size - static_cast<std::size_t>(filler0);
    EMOCIRC_CHECK(n_filler >= 2, "corpus: vocab has no filler range");

    std::vector<SyntheticGroup> groups(n_groups);
    for (std::size_t gi = 0; gi < n_groups; ++gi) {
        SyntheticGroup& g = groups[gi];
        g.id = gi;
        g.valence = kValences[gi % 3];
        const std::size_t len = 5 + rng.uniform_index(4);
        for (std::size_t t = 0; t < len; ++t)
            g.scenario.push_back(filler0 + static_cast<TokenId>(rng.uniform_index(n_filler)));
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            g.trigger[e] = static_cast<TokenId>(1 + e);
        g.neutral_terminal = 0;
        EMOCIRC_CHECK(g.scenario.size() + 1 + 4 <= cfg.max_seq,
                      "corpus: prompts would overflow max_seq");
    }
    return groups;
}

}  // namespace emocirc
