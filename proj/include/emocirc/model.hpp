#pragma once

// Pre-norm decoder model description plus the declarative tap (read) and edit
// (write) points the analysis code attaches to a forward pass.
//
// Weight orientation: every projection is stored out_dim x in_dim and applied
// with matvec, so the MLP write is w_d * g and the neuron-space alignment of a
// residual direction v is matvec_T(w_d, v).

#include <cstdint>
#include <string>
#include <vector>

#include "container.hpp"
#include "errors.hpp"
#include "numerics.hpp"

namespace emocirc {

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_head = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    std::size_t max_seq = 0;
    double norm_epsilon = 1e-5;
    bool rope_enabled = true;
    // Analysis constructions: identity norms plus an always-open gate make the
    // block affine in its input, which some closed-form tests rely on.
    bool identity_norms = false;
    bool gate_frozen_open = false;

    void validate() const {
        EMOCIRC_CHECK(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_head >= 1 &&
                          d_ff >= 1 && vocab_size >= 1 && max_seq >= 1,
                      "config: all counts must be >= 1");
        EMOCIRC_CHECK(d_model == n_heads * d_head, "config: d_model != n_heads * d_head");
        EMOCIRC_CHECK(norm_epsilon > 0.0, "config: norm_epsilon must be positive");
    }
};

struct LayerWeights {
    Vec norm1_scale;            // d
    std::vector<Mat> w_q;       // per head: d_head x d
    std::vector<Mat> w_k;       // per head: d_head x d
    std::vector<Mat> w_v;       // per head: d_head x d
    Mat w_o;                    // d x (h * d_head)
    Vec norm2_scale;            // d
    Mat w_u1;                   // d_ff x d (gate branch)
    Mat w_u2;                   // d_ff x d (main branch)
    Mat w_d;                    // d x d_ff
};

struct Model {
    ModelConfig config;
    Mat token_embedding;        // vocab x d, row per token
    std::vector<LayerWeights> layers;
    Vec final_norm_scale;       // d
    Mat unembedding;            // vocab x d

    void validate() const;
};

// ---- tap and edit points ----------------------------------------------------

enum class Site { ResidAfterAttn, ResidAfterMlp, GatedMlp, HeadConcat };
enum class PositionPolicy { LastPromptToken, CurrentToken };
enum class EditKind { ZeroIndices, AddVectorAtIndices, AddScaledVector };

inline const char* site_name(Site s) {
    switch (s) {
        case Site::ResidAfterAttn: return "resid_after_attn";
        case Site::ResidAfterMlp: return "resid_after_mlp";
        case Site::GatedMlp: return "gated_mlp";
        case Site::HeadConcat: return "head_concat";
    }
    return "?";
}

inline Site site_from_name(const std::string& s) {
    if (s == "resid_after_attn") return Site::ResidAfterAttn;
    if (s == "resid_after_mlp") return Site::ResidAfterMlp;
    if (s == "gated_mlp") return Site::GatedMlp;
    if (s == "head_concat") return Site::HeadConcat;
    throw FormatError("unknown site '" + s + "'");
}

inline std::size_t site_width(const ModelConfig& cfg, Site s) {
    switch (s) {
        case Site::ResidAfterAttn:
        case Site::ResidAfterMlp: return cfg.d_model;
        case Site::GatedMlp: return cfg.d_ff;
        case Site::HeadConcat: return cfg.n_heads * cfg.d_head;
    }
    return 0;
}

struct TapPoint {
    std::size_t layer = 0;
    Site site = Site::ResidAfterMlp;
    PositionPolicy position = PositionPolicy::LastPromptToken;

    bool operator==(const TapPoint& o) const {
        return layer == o.layer && site == o.site && position == o.position;
    }
};

struct EditAction {
    std::size_t layer = 0;
    Site site = Site::ResidAfterMlp;
    EditKind kind = EditKind::AddScaledVector;
    std::vector<std::size_t> indices;  // ZeroIndices / AddVectorAtIndices targets
    Vec vector;                        // site width, or |indices| for AddVectorAtIndices
    double scale = 1.0;                // lambda / alpha
    bool rms_relative = false;         // scale by local RMS of the pre-edit site value
    PositionPolicy position = PositionPolicy::LastPromptToken;
};

struct TapRecord {
    TapPoint point;
    Vec value;
};

struct TapLog {
    std::vector<TapRecord> taps;
    std::string sample_id;
    std::string emotion;
    std::uint64_t edit_plan_hash = 0;

    bool has(std::size_t layer, Site site) const {
        for (const auto& t : taps)
            if (t.point.layer == layer && t.point.site == site) return true;
        return false;
    }

    const Vec& at(std::size_t layer, Site site) const {
        for (const auto& t : taps)
            if (t.point.layer == layer && t.point.site == site) return t.value;
        throw MissingSite(std::string(site_name(site)) + " at layer " + std::to_string(layer));
    }
};

// Taps for all four sites at every layer (what elicitation records).
inline std::vector<TapPoint> all_site_taps(const ModelConfig& cfg,
                                           PositionPolicy pos = PositionPolicy::LastPromptToken) {
    std::vector<TapPoint> taps;
    taps.reserve(cfg.n_layers * 4);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        taps.push_back({l, Site::ResidAfterAttn, pos});
        taps.push_back({l, Site::ResidAfterMlp, pos});
        taps.push_back({l, Site::GatedMlp, pos});
        taps.push_back({l, Site::HeadConcat, pos});
    }
    return taps;
}

inline std::uint64_t edit_plan_hash(const std::vector<EditAction>& edits) {
    std::uint64_t h = kFnvOffsetBasis;
    auto mix = [&h](const void* p, std::size_t n) { h = fnv1a64(p, n, h); };
    for (const EditAction& e : edits) {
        mix(&e.layer, sizeof(e.layer));
        const int site = static_cast<int>(e.site), kind = static_cast<int>(e.kind),
                  pos = static_cast<int>(e.position);
        mix(&site, sizeof(site));
        mix(&kind, sizeof(kind));
        mix(&pos, sizeof(pos));
        mix(e.indices.data(), e.indices.size() * sizeof(std::size_t));
        mix(e.vector.data(), e.vector.size() * sizeof(double));
        mix(&e.scale, sizeof(e.scale));
        const int rr = e.rms_relative ? 1 : 0;
        mix(&rr, sizeof(rr));
    }
    return h;
}

// ---- validation -------------------------------------------------------------

inline void Model::validate() const {
    config.validate();
    const std::size_t d = config.d_model, dh = config.d_head, h = config.n_heads,
                      ff = config.d_ff, v = config.vocab_size;
    auto check_mat = [](const Mat& m, std::size_t r, std::size_t c, const std::string& what) {
        if (m.rows != r || m.cols != c)
            throw FormatError("shape mismatch for " + what + ": got " + std::to_string(m.rows) +
                              "x" + std::to_string(m.cols) + ", want " + std::to_string(r) + "x" +
                              std::to_string(c));
    };
    auto check_vec = [](const Vec& x, std::size_t n, const std::string& what) {
        if (x.size() != n)
            throw FormatError("shape mismatch for " + what + ": got " + std::to_string(x.size()) +
                              ", want " + std::to_string(n));
    };
    check_mat(token_embedding, v, d, "token_embedding");
    check_mat(unembedding, v, d, "unembedding");
    check_vec(final_norm_scale, d, "final_norm_scale");
    EMOCIRC_CHECK(layers.size() == config.n_layers, "layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerWeights& lw = layers[l];
        const std::string p = "layer " + std::to_string(l) + " ";
        check_vec(lw.norm1_scale, d, p + "norm1_scale");
        check_vec(lw.norm2_scale, d, p + "norm2_scale");
        EMOCIRC_CHECK(lw.w_q.size() == h && lw.w_k.size() == h && lw.w_v.size() == h,
                      p + "per-head projection count");
        for (std::size_t i = 0; i < h; ++i) {
            check_mat(lw.w_q[i], dh, d, p + "w_q");
            check_mat(lw.w_k[i], dh, d, p + "w_k");
            check_mat(lw.w_v[i], dh, d, p + "w_v");
        }
        check_mat(lw.w_o, d, h * dh, p + "w_o");
        check_mat(lw.w_u1, ff, d, p + "w_u1");
        check_mat(lw.w_u2, ff, d, p + "w_u2");
        check_mat(lw.w_d, d, ff, p + "w_d");
    }
}

// ---- container round trip ---------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_head", c.d_head},
            {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},
            {"max_seq", c.max_seq},     {"norm_epsilon", c.norm_epsilon},
            {"rope_enabled", c.rope_enabled}, {"identity_norms", c.identity_norms},
            {"gate_frozen_open", c.gate_frozen_open}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.norm_epsilon = j.at("norm_epsilon").get<double>();
    c.rope_enabled = j.value("rope_enabled", true);
    c.identity_norms = j.value("identity_norms", false);
    c.gate_frozen_open = j.value("gate_frozen_open", false);
    return c;
}

inline void save_model(const Model& m, const std::string& path) {
    m.validate();
    Container c;
    c.meta = {{"kind", "model"}, {"config", config_to_json(m.config)}};
    c.add_mat("token_embedding", m.token_embedding);
    c.add_mat("unembedding", m.unembedding);
    c.add_vec("final_norm_scale", m.final_norm_scale);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const LayerWeights& lw = m.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        c.add_vec(p + "norm1_scale", lw.norm1_scale);
        c.add_vec(p + "norm2_scale", lw.norm2_scale);
        for (std::size_t i = 0; i < lw.w_q.size(); ++i) {
            const std::string hp = p + "heads." + std::to_string(i) + ".";
            c.add_mat(hp + "w_q", lw.w_q[i]);
            c.add_mat(hp + "w_k", lw.w_k[i]);
            c.add_mat(hp + "w_v", lw.w_v[i]);
        }
        c.add_mat(p + "w_o", lw.w_o);
        c.add_mat(p + "w_u1", lw.w_u1);
        c.add_mat(p + "w_u2", lw.w_u2);
        c.add_mat(p + "w_d", lw.w_d);
    }
    c.save(path);
}

inline Model load_model(const std::string& path) {
    const Container c = Container::load(path);
    if (c.meta.value("kind", "") != "model")
        throw FormatError("'" + path + "' is not a model container");
    Model m;
    m.config = config_from_json(c.meta.at("config"));
    m.config.validate();
    m.token_embedding = c.get_mat("token_embedding");
    m.unembedding = c.get_mat("unembedding");
    m.final_norm_scale = c.get_vec("final_norm_scale");
    m.layers.resize(m.config.n_layers);
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        LayerWeights& lw = m.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        lw.norm1_scale = c.get_vec(p + "norm1_scale");
        lw.norm2_scale = c.get_vec(p + "norm2_scale");
        lw.w_q.resize(m.config.n_heads);
        lw.w_k.resize(m.config.n_heads);
        lw.w_v.resize(m.config.n_heads);
        for (std::size_t i = 0; i < m.config.n_heads; ++i) {
            const std::string hp = p + "heads." + std::to_string(i) + ".";
            lw.w_q[i] = c.get_mat(hp + "w_q");
            lw.w_k[i] = c.get_mat(hp + "w_k");
            lw.w_v[i] = c.get_mat(hp + "w_v");
        }
        lw.w_o = c.get_mat(p + "w_o");
        lw.w_u1 = c.get_mat(p + "w_u1");
        lw.w_u2 = c.get_mat(p + "w_u2");
        lw.w_d = c.get_mat(p + "w_d");
    }
    m.validate();
    return m;
}

}  // namespace emocirc
