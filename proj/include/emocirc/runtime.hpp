#pragma once

// Forward computation for the pre-norm decoder stack, with edits applied at
// their site before the downstream projection consumes it and taps capturing
// post-edit values. The trace keeps every sublayer activation at every
// position; at analysis scale that is cheap and it is what makes attribution
// re-runs and the causality tests honest.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "model.hpp"
#include "numerics.hpp"

namespace emocirc {

using TokenId = int;

namespace detail {

// out = M x, raw-pointer form used in the hot loop.
inline void mv(const Mat& m, const double* x, double* out) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += mr[c] * x[c];
        out[r] = s;
    }
}

inline double rms_raw(const double* x, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
    return std::sqrt(s / static_cast<double>(n));
}

// RMS norm with learned scale; identity when the config says so.
inline void apply_norm(const ModelConfig& cfg, const Vec& scale, const double* x, double* out) {
    const std::size_t d = cfg.d_model;
    if (cfg.identity_norms) {
        for (std::size_t i = 0; i < d; ++i) out[i] = x[i];
        return;
    }
    double ms = 0.0;
    for (std::size_t i = 0; i < d; ++i) ms += x[i] * x[i];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + cfg.norm_epsilon);
    for (std::size_t i = 0; i < d; ++i) out[i] = x[i] * inv * scale[i];
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

// In-place rotary rotation of a head vector at a given position.
inline void apply_rope(double* v, std::size_t d_head, std::size_t pos) {
    const double p = static_cast<double>(pos);
    for (std::size_t i = 0; 2 * i + 1 < d_head; ++i) {
        const double theta =
            p * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

inline void apply_edit(const EditAction& e, double* value, std::size_t width) {
    switch (e.kind) {
        case EditKind::ZeroIndices:
            for (std::size_t idx : e.indices) {
                EMOCIRC_CHECK(idx < width, "edit index out of range");
                value[idx] = 0.0;
            }
            break;
        case EditKind::AddVectorAtIndices:
            if (e.vector.size() == width) {
                for (std::size_t idx : e.indices) {
                    EMOCIRC_CHECK(idx < width, "edit index out of range");
                    value[idx] += e.scale * e.vector[idx];
                }
            } else if (e.vector.size() == e.indices.size()) {
                for (std::size_t i = 0; i < e.indices.size(); ++i) {
                    EMOCIRC_CHECK(e.indices[i] < width, "edit index out of range");
                    value[e.indices[i]] += e.scale * e.vector[i];
                }
            } else {
                throw ContractViolation("AddVectorAtIndices: vector length matches neither site "
                                        "width nor index count");
            }
            break;
        case EditKind::AddScaledVector: {
            EMOCIRC_CHECK(e.vector.size() == width,
                          "AddScaledVector: vector length must match site width");
            const double factor =
                e.scale * (e.rms_relative ? rms_raw(value, width) : 1.0);
            for (std::size_t i = 0; i < width; ++i) value[i] += factor * e.vector[i];
            break;
        }
    }
}

}  // namespace detail

struct Trace {
    std::size_t n_tokens = 0;
    std::size_t prompt_len = 0;
    // Per layer, rows are positions. All values are post-edit.
    std::vector<Mat> resid_in;          // x_l          T x d
    std::vector<Mat> head_concat;       // [H_1||..]    T x (h*d_head)
    std::vector<Mat> resid_after_attn;  // x~_l         T x d
    std::vector<Mat> gated;             // g_l          T x d_ff
    std::vector<Mat> resid_after_mlp;   // x_{l+1}      T x d

    const Mat& site(std::size_t layer, Site s) const {
        switch (s) {
            case Site::ResidAfterAttn: return resid_after_attn[layer];
            case Site::ResidAfterMlp: return resid_after_mlp[layer];
            case Site::GatedMlp: return gated[layer];
            case Site::HeadConcat: return head_concat[layer];
        }
        throw ContractViolation("bad site");
    }

    Vec final_hidden(std::size_t pos) const { return resid_after_mlp.back().row_vec(pos); }
};

struct ForwardResult {
    Vec logits;  // last position, after the final norm and unembedding
    TapLog tap_log;
};

inline std::size_t resolve_position(PositionPolicy p, std::size_t prompt_len,
                                    std::size_t n_tokens) {
    return p == PositionPolicy::LastPromptToken ? prompt_len - 1 : n_tokens - 1;
}

// Full-sequence forward pass. prompt_len marks where the prompt ends for the
// LastPromptToken policy; it defaults to the whole sequence.
inline Trace run_trace(const Model& model, const std::vector<TokenId>& tokens,
                       const std::vector<EditAction>& edits, std::size_t prompt_len = 0) {
    const ModelConfig& cfg = model.config;
    const std::size_t T = tokens.size();
    EMOCIRC_CHECK(T >= 1, "forward: empty token sequence");
    EMOCIRC_CHECK(T <= cfg.max_seq, "forward: context overflow (" + std::to_string(T) + " > " +
                                        std::to_string(cfg.max_seq) + ")");
    if (prompt_len == 0) prompt_len = T;
    EMOCIRC_CHECK(prompt_len >= 1 && prompt_len <= T, "forward: bad prompt length");
    for (TokenId t : tokens)
        EMOCIRC_CHECK(t >= 0 && static_cast<std::size_t>(t) < cfg.vocab_size,
                      "forward: token id " + std::to_string(t) + " out of vocab");
    for (const EditAction& e : edits) {
        EMOCIRC_CHECK(e.layer < cfg.n_layers, "edit: layer out of range");
        if (e.kind == EditKind::ZeroIndices)
            EMOCIRC_CHECK(!e.indices.empty(), "edit: ZeroIndices needs indices");
    }

    const std::size_t d = cfg.d_model, h = cfg.n_heads, dh = cfg.d_head, ff = cfg.d_ff;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Trace tr;
    tr.n_tokens = T;
    tr.prompt_len = prompt_len;
    tr.resid_in.assign(cfg.n_layers, Mat(T, d));
    tr.head_concat.assign(cfg.n_layers, Mat(T, h * dh));
    tr.resid_after_attn.assign(cfg.n_layers, Mat(T, d));
    tr.gated.assign(cfg.n_layers, Mat(T, ff));
    tr.resid_after_mlp.assign(cfg.n_layers, Mat(T, d));

    auto edits_at = [&](std::size_t layer, Site site, double* value, std::size_t width,
                        std::size_t pos) {
        for (const EditAction& e : edits) {
            if (e.layer != layer || e.site != site) continue;
            if (resolve_position(e.position, prompt_len, T) != pos) continue;
            detail::apply_edit(e, value, width);
        }
    };

    Mat x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* emb = model.token_embedding.row(static_cast<std::size_t>(tokens[t]));
        for (std::size_t i = 0; i < d; ++i) x.at(t, i) = emb[i];
    }

    Mat u(T, d);          // normed input, reused per sublayer
    Mat qh(T, dh), kh(T, dh);
    std::vector<double> vh(T * dh);
    std::vector<double> scores;
    Vec tmp_d(d), tmp_ff(ff);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        tr.resid_in[l] = x;

        // -- attention sublayer --
        for (std::size_t t = 0; t < T; ++t)
            detail::apply_norm(cfg, lw.norm1_scale, x.row(t), u.row(t));

        Mat& concat = tr.head_concat[l];
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t t = 0; t < T; ++t) {
                detail::mv(lw.w_q[i], u.row(t), qh.row(t));
                detail::mv(lw.w_k[i], u.row(t), kh.row(t));
                detail::mv(lw.w_v[i], u.row(t), &vh[t * dh]);
                if (cfg.rope_enabled) {
                    detail::apply_rope(qh.row(t), dh, t);
                    detail::apply_rope(kh.row(t), dh, t);
                }
            }
            for (std::size_t t = 0; t < T; ++t) {
                scores.assign(t + 1, 0.0);
                double max_s = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    const double* qr = qh.row(t);
                    const double* kr = kh.row(s);
                    for (std::size_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                    scores[s] = acc * inv_sqrt_dh;
                    if (scores[s] > max_s) max_s = scores[s];
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = std::exp(scores[s] - max_s);
                    z += scores[s];
                }
                double* out = concat.row(t) + i * dh;
                for (std::size_t c = 0; c < dh; ++c) out[c] = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double w = scores[s] / z;
                    const double* vr = &vh[s * dh];
                    for (std::size_t c = 0; c < dh; ++c) out[c] += w * vr[c];
                }
            }
        }
        for (std::size_t t = 0; t < T; ++t)
            edits_at(l, Site::HeadConcat, concat.row(t), h * dh, t);

        Mat& after_attn = tr.resid_after_attn[l];
        for (std::size_t t = 0; t < T; ++t) {
            detail::mv(lw.w_o, concat.row(t), tmp_d.data());
            double* row = after_attn.row(t);
            const double* xr = x.row(t);
            for (std::size_t i = 0; i < d; ++i) row[i] = xr[i] + tmp_d[i];
            edits_at(l, Site::ResidAfterAttn, row, d, t);
        }

        // -- MLP sublayer --
        Mat& g = tr.gated[l];
        for (std::size_t t = 0; t < T; ++t)
            detail::apply_norm(cfg, lw.norm2_scale, after_attn.row(t), u.row(t));
        for (std::size_t t = 0; t < T; ++t) {
            double* gr = g.row(t);
            detail::mv(lw.w_u2, u.row(t), gr);
            if (!cfg.gate_frozen_open) {
                detail::mv(lw.w_u1, u.row(t), tmp_ff.data());
                for (std::size_t j = 0; j < ff; ++j) gr[j] *= detail::silu(tmp_ff[j]);
            }
            edits_at(l, Site::GatedMlp, gr, ff, t);
        }

        Mat& after_mlp = tr.resid_after_mlp[l];
        for (std::size_t t = 0; t < T; ++t) {
            detail::mv(lw.w_d, g.row(t), tmp_d.data());
            double* row = after_mlp.row(t);
            const double* ar = after_attn.row(t);
            for (std::size_t i = 0; i < d; ++i) row[i] = ar[i] + tmp_d[i];
            edits_at(l, Site::ResidAfterMlp, row, d, t);
        }
        x = after_mlp;
    }
    return tr;
}

inline Vec logits_at(const Model& model, const Trace& tr, std::size_t pos) {
    const ModelConfig& cfg = model.config;
    Vec normed(cfg.d_model);
    detail::apply_norm(cfg, model.final_norm_scale, tr.resid_after_mlp.back().row(pos),
                       normed.data());
    return matvec(model.unembedding, normed);
}

inline TapLog collect_taps(const Trace& tr, const std::vector<TapPoint>& taps) {
    TapLog log;
    log.taps.reserve(taps.size());
    for (const TapPoint& tp : taps) {
        EMOCIRC_CHECK(tp.layer < tr.resid_in.size(), "tap: layer out of range");
        const std::size_t pos = resolve_position(tp.position, tr.prompt_len, tr.n_tokens);
        log.taps.push_back({tp, tr.site(tp.layer, tp.site).row_vec(pos)});
    }
    return log;
}

inline ForwardResult forward(const Model& model, const std::vector<TokenId>& tokens,
                             const std::vector<TapPoint>& taps = {},
                             const std::vector<EditAction>& edits = {},
                             std::size_t prompt_len = 0) {
    const Trace tr = run_trace(model, tokens, edits, prompt_len);
    ForwardResult r;
    r.logits = logits_at(model, tr, tr.n_tokens - 1);
    r.tap_log = collect_taps(tr, taps);
    r.tap_log.edit_plan_hash = edit_plan_hash(edits);
    return r;
}

// Lowest token id wins ties.
inline TokenId argmax_token(const Vec& logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
}

// Deterministic argmax decoding. CurrentToken edits re-apply at the newest
// position each step; LastPromptToken edits stay pinned to the prompt.
inline std::vector<TokenId> greedy_generate(const Model& model,
                                            const std::vector<TokenId>& prompt,
                                            std::size_t max_new,
                                            const std::vector<EditAction>& edits = {}) {
    EMOCIRC_CHECK(!prompt.empty(), "generate: empty prompt");
    EMOCIRC_CHECK(prompt.size() + max_new <= model.config.max_seq,
                  "generate: context overflow (" + std::to_string(prompt.size() + max_new) +
                      " > " + std::to_string(model.config.max_seq) + ")");
    std::vector<TokenId> tokens = prompt;
    for (std::size_t step = 0; step < max_new; ++step) {
        const Trace tr = run_trace(model, tokens, edits, prompt.size());
        tokens.push_back(argmax_token(logits_at(model, tr, tokens.size() - 1)));
    }
    return tokens;
}

}  // namespace emocirc
