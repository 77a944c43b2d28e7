#pragma once

// Circuit-modulated generation: inject the emotion difference vectors into the
// circuit's neuron indices and head channel slices at every decode step, under
// otherwise unchanged greedy decoding, so the target emotion arises without
// any emotion cue in the prompt.

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuit.hpp"
#include "directions.hpp"
#include "interventions.hpp"
#include "model.hpp"
#include "runtime.hpp"
#include "store.hpp"
#include "threading.hpp"

namespace emocirc {

struct ModulationSpec {
    EmotionCircuit circuit;
    double lambda = 1.0;
    PositionPolicy position = PositionPolicy::CurrentToken;
};

inline std::vector<EditAction> modulation_edits(const ModelConfig& cfg,
                                                const ModulationSpec& spec,
                                                const DifferenceVectorSet& diffs) {
    EMOCIRC_CHECK(diffs.n_layers == cfg.n_layers && diffs.d_ff == cfg.d_ff &&
                      diffs.d_concat == cfg.n_heads * cfg.d_head,
                  "modulation: difference vectors do not match the model geometry");
    std::vector<EditAction> edits;
    for (const CircuitEntry& entry : spec.circuit.entries) {
        EMOCIRC_CHECK(entry.layer < cfg.n_layers, "modulation: circuit layer out of range");
        if (entry.indices.empty()) continue;
        if (entry.stream == Stream::Mlp) {
            for (std::size_t j : entry.indices)
                EMOCIRC_CHECK(j < cfg.d_ff, "modulation: circuit neuron index out of range");
            edits.push_back({entry.layer, Site::GatedMlp, EditKind::AddVectorAtIndices,
                             entry.indices, diffs.mlp[spec.circuit.emotion][entry.layer],
                             spec.lambda, false, spec.position});
        } else {
            std::vector<std::size_t> slice;
            for (std::size_t head : entry.indices) {
                EMOCIRC_CHECK(head < cfg.n_heads, "modulation: circuit head index out of range");
                for (std::size_t c = 0; c < cfg.d_head; ++c)
                    slice.push_back(head * cfg.d_head + c);
            }
            edits.push_back({entry.layer, Site::HeadConcat, EditKind::AddVectorAtIndices, slice,
                             diffs.attn[spec.circuit.emotion][entry.layer], spec.lambda, false,
                             spec.position});
        }
    }
    return edits;
}

struct ModulatedGeneration {
    std::vector<TokenId> tokens;
    std::vector<TapLog> per_step;  // all sites at the current position, one per decode step
};

inline ModulatedGeneration modulate_generate(const Model& model,
                                             const std::vector<TokenId>& prompt,
                                             const ModulationSpec& spec,
                                             const DifferenceVectorSet& diffs,
                                             std::size_t max_new) {
    EMOCIRC_CHECK(!prompt.empty(), "modulation: empty prompt");
    EMOCIRC_CHECK(prompt.size() + max_new <= model.config.max_seq,
                  "modulation: context overflow");
    const auto edits = modulation_edits(model.config, spec, diffs);
    const auto step_taps = all_site_taps(model.config, PositionPolicy::CurrentToken);

    ModulatedGeneration out;
    out.tokens = prompt;
    for (std::size_t step = 0; step < max_new; ++step) {
        const Trace tr = run_trace(model, out.tokens, edits, prompt.size());
        out.per_step.push_back(collect_taps(tr, step_taps));
        out.per_step.back().edit_plan_hash = edit_plan_hash(edits);
        out.tokens.push_back(argmax_token(logits_at(model, tr, out.tokens.size() - 1)));
    }
    return out;
}

// ---- evaluation -----------------------------------------------------------------

struct AccuracyTable {
    // [valence][emotion]
    std::array<std::array<std::size_t, kEmotionCount>, 3> matches{};
    std::array<std::array<std::size_t, kEmotionCount>, 3> counts{};
    std::array<std::array<std::size_t, kEmotionCount>, 3> labeled{};
    // oracle-free proxy: mean last-prompt-token score shift under the circuit
    std::array<double, kEmotionCount> proxy_score_shift{};
    bool has_oracle = false;

    std::optional<double> accuracy(std::size_t valence, std::size_t emotion) const {
        if (labeled[valence][emotion] == 0) return std::nullopt;
        return static_cast<double>(matches[valence][emotion]) /
               static_cast<double>(labeled[valence][emotion]);
    }

    std::optional<double> emotion_accuracy(std::size_t emotion) const {
        std::size_t m = 0, n = 0;
        for (std::size_t v = 0; v < 3; ++v) {
            m += matches[v][emotion];
            n += labeled[v][emotion];
        }
        if (n == 0) return std::nullopt;
        return static_cast<double>(m) / static_cast<double>(n);
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "valence";
        for (std::size_t e = 0; e < kEmotionCount; ++e) os << "," << kEmotions[e];
        os << "\n";
        os.precision(6);
        for (std::size_t v = 0; v < 3; ++v) {
            os << kValences[v];
            for (std::size_t e = 0; e < kEmotionCount; ++e) {
                os << ",";
                if (const auto acc = accuracy(v, e)) os << 100.0 * *acc;
            }
            os << "\n";
        }
        os << "proxy_score_shift";
        for (std::size_t e = 0; e < kEmotionCount; ++e) os << "," << proxy_score_shift[e];
        os << "\n";
        return os.str();
    }
};

// Modulates every group's neutral prompt toward every target emotion. With an
// oracle the table mirrors the accuracy-by-valence layout; without one only
// the score-shift proxy is filled.
inline AccuracyTable evaluate_modulation(const Model& model,
                                         const std::vector<PromptGroup>& corpus,
                                         const std::vector<ModulationSpec>& specs,
                                         const DifferenceVectorSet& diffs,
                                         const DirectionSet& directions,
                                         const LabelOracle& oracle = nullptr,
                                         std::size_t max_new = 2) {
    EMOCIRC_CHECK(specs.size() == kEmotionCount, "evaluate: need one spec per emotion");
    AccuracyTable table;
    table.has_oracle = static_cast<bool>(oracle);

    struct Cell {
        std::size_t group, emotion;
    };
    std::vector<Cell> cells;
    for (std::size_t g = 0; g < corpus.size(); ++g)
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            if (!corpus[g].neutral.empty()) cells.push_back({g, e});

    struct CellResult {
        std::size_t valence = 0, emotion = 0;
        std::optional<bool> match;
        double shift = 0.0;
    };
    std::vector<CellResult> results(cells.size());
    const auto taps = all_site_taps(model.config);

    parallel_for(cells.size(), [&](std::size_t ci) {
        const auto [g, e] = cells[ci];
        const PromptGroup& group = corpus[g];
        CellResult& r = results[ci];
        r.emotion = e;
        for (std::size_t v = 0; v < 3; ++v)
            if (kValences[v] == group.valence) r.valence = v;

        const auto gen = modulate_generate(model, group.neutral, specs[e], diffs, max_new);
        if (oracle) {
            RunRecord rec;
            rec.group_id = group.id;
            rec.emotion = kEmotions[e];
            rec.valence = group.valence;
            rec.prompt = group.neutral;
            rec.generated.assign(gen.tokens.begin() +
                                     static_cast<std::ptrdiff_t>(group.neutral.size()),
                                 gen.tokens.end());
            r.match = oracle(rec);
        }

        // proxy: score shift on the prompt pass with the same injections
        ModulationSpec prompt_spec = specs[e];
        prompt_spec.position = PositionPolicy::LastPromptToken;
        const auto prompt_edits = modulation_edits(model.config, prompt_spec, diffs);
        const double s_base =
            emotion_score(forward(model, group.neutral, taps).tap_log, directions, e);
        const double s_mod = emotion_score(
            forward(model, group.neutral, taps, prompt_edits).tap_log, directions, e);
        r.shift = s_mod - s_base;
    });

    std::array<double, kEmotionCount> shift_sum{};
    std::array<std::size_t, kEmotionCount> shift_n{};
    for (const CellResult& r : results) {
        ++table.counts[r.valence][r.emotion];
        if (r.match.has_value()) {
            ++table.labeled[r.valence][r.emotion];
            if (*r.match) ++table.matches[r.valence][r.emotion];
        }
        shift_sum[r.emotion] += r.shift;
        ++shift_n[r.emotion];
    }
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        table.proxy_score_shift[e] =
            shift_n[e] ? shift_sum[e] / static_cast<double>(shift_n[e]) : 0.0;
    return table;
}

}  // namespace emocirc
