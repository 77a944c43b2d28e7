#include <gtest/gtest.h>

#include <emocirc/runtime.hpp>
#include <emocirc/synthetic.hpp>

#include "test_util.hpp"

using namespace emocirc;
using namespace emocirc::testutil;

namespace {

ModelConfig planted_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 64;
    c.n_heads = 4;
    c.d_head = 16;
    c.d_ff = 256;
    c.vocab_size = 64;
    c.max_seq = 64;
    c.rope_enabled = false;
    return c;
}

double final_projection(const Model& m, const std::vector<TokenId>& tokens, const Vec& dir) {
    const Trace tr = run_trace(m, tokens, {});
    return dot(tr.final_hidden(tokens.size() - 1), dir);
}

}  // namespace

TEST(ToyModel, EmotionVariantProjectsOntoItsDirection) {
    const auto [model, spec] = make_toy_model(planted_config(), {}, 7);
    const auto corpus = make_elicitation_corpus(6, planted_config(), 7);
    for (const auto& g : corpus) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const auto tokens = g.variant(e);
            const double own = final_projection(model, tokens, spec.directions[e]);
            for (std::size_t o = 0; o < kEmotionCount; ++o) {
                if (o == e) continue;
                const double other = final_projection(model, tokens, spec.directions[o]);
                EXPECT_GT(own, other) << "group " << g.id << " emotion " << e << " vs " << o;
                EXPECT_GT(own, 5.0 * std::abs(other));
            }
        }
    }
}

TEST(ToyModel, GreedyDecodeEmitsReadoutToken) {
    const auto [model, spec] = make_toy_model(planted_config(), {}, 3);
    const auto corpus = make_elicitation_corpus(10, planted_config(), 3);
    for (const auto& g : corpus) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const auto out = greedy_generate(model, g.variant(e), 2);
            EXPECT_EQ(out[out.size() - 2], spec.readout_tokens[e]);
            EXPECT_EQ(out.back(), spec.readout_tokens[e]);
        }
    }
}

TEST(ToyModel, PlantedNeuronsFireAboveFloor) {
    const ToyKnobs knobs;
    const auto [model, spec] = make_toy_model(planted_config(), knobs, 11);
    const auto corpus = make_elicitation_corpus(4, planted_config(), 11);
    for (const auto& g : corpus) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const Trace tr = run_trace(model, g.variant(e), {});
            const std::size_t last = g.variant(e).size() - 1;
            for (std::size_t l = 0; l < model.config.n_layers; ++l)
                for (std::size_t j : spec.neurons[e][l])
                    EXPECT_GT(tr.gated[l].at(last, j), knobs.gate_floor)
                        << "layer " << l << " neuron " << j;
        }
    }
}

TEST(ToyModel, PlantedWriteColumnsAlignWithDirection) {
    const auto [model, spec] = make_toy_model(planted_config(), {}, 5);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < model.config.n_layers; ++l)
            for (std::size_t j : spec.neurons[e][l])
                EXPECT_GT(cosine(model.layers[l].w_d.col_vec(j), spec.directions[e]), 0.9);
}

TEST(ToyModel, DirectionsQuasiOrthogonal) {
    const auto [model, spec] = make_toy_model(planted_config(), {}, 9);
    for (std::size_t a = 0; a < kEmotionCount; ++a) {
        EXPECT_NEAR(norm2(spec.directions[a]), 1.0, 1e-6);
        for (std::size_t b = a + 1; b < kEmotionCount; ++b)
            EXPECT_LT(std::abs(cosine(spec.directions[a], spec.directions[b])), 0.1);
    }
}

TEST(ToyModel, PlantedSetsDisjointWithinLayer) {
    const auto [model, spec] = make_toy_model(planted_config(), {}, 13);
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        std::vector<std::size_t> seen;
        for (std::size_t e = 0; e < kEmotionCount; ++e)
            for (std::size_t j : spec.neurons[e][l]) {
                EXPECT_EQ(std::count(seen.begin(), seen.end(), j), 0);
                seen.push_back(j);
            }
    }
}

// Ablating the planted set cuts the final projection by at least half, while
// a random disjoint set of equal size barely moves it (10-seed average).
TEST(ToyModel, AblationSeparation) {
    const auto cfg = planted_config();
    const auto [model, spec] = make_toy_model(cfg, {}, 17);
    const auto corpus = make_elicitation_corpus(6, cfg, 17);

    double drop_ratio_sum = 0.0, random_ratio_sum = 0.0;
    std::size_t n_cases = 0;
    for (const auto& g : corpus) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const auto tokens = g.variant(e);
            const double base = final_projection(model, tokens, spec.directions[e]);
            ASSERT_GT(base, 1.0);

            std::vector<EditAction> ablate;
            std::size_t planted_total = 0;
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                ablate.push_back({l, Site::GatedMlp, EditKind::ZeroIndices, spec.neurons[e][l],
                                  {}, 1.0, false, PositionPolicy::LastPromptToken});
                planted_total += spec.neurons[e][l].size();
            }
            const Trace ab = run_trace(model, tokens, ablate);
            const double ablated = dot(ab.final_hidden(tokens.size() - 1), spec.directions[e]);
            drop_ratio_sum += (base - ablated) / base;

            // random disjoint sets, averaged over 10 seeds
            double rnd_change = 0.0;
            for (std::uint64_t s = 0; s < 10; ++s) {
                Rng rng(derive_seed(1000 + s, "random-ablate"));
                std::vector<EditAction> rand_edits;
                for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                    std::vector<std::size_t> pick;
                    while (pick.size() < spec.neurons[e][l].size()) {
                        const std::size_t j = rng.uniform_index(cfg.d_ff);
                        bool clash = std::find(pick.begin(), pick.end(), j) != pick.end();
                        for (std::size_t ee = 0; ee < kEmotionCount && !clash; ++ee)
                            clash = std::find(spec.neurons[ee][l].begin(),
                                              spec.neurons[ee][l].end(),
                                              j) != spec.neurons[ee][l].end();
                        if (!clash) pick.push_back(j);
                    }
                    rand_edits.push_back({l, Site::GatedMlp, EditKind::ZeroIndices, pick, {}, 1.0,
                                          false, PositionPolicy::LastPromptToken});
                }
                const Trace rnd = run_trace(model, tokens, rand_edits);
                rnd_change +=
                    std::abs(dot(rnd.final_hidden(tokens.size() - 1), spec.directions[e]) - base);
            }
            random_ratio_sum += rnd_change / 10.0 / base;
            ++n_cases;
        }
    }
    EXPECT_GE(drop_ratio_sum / n_cases, 0.5);
    EXPECT_LT(random_ratio_sum / n_cases, 0.05);
}

TEST(ToyModel, SameSeedBitwiseIdenticalContainer) {
    TempDir tmp;
    const auto cfg = planted_config();
    const auto [m1, s1] = make_toy_model(cfg, {}, 21);
    const auto [m2, s2] = make_toy_model(cfg, {}, 21);
    save_model(m1, tmp.file("a.ec"));
    save_model(m2, tmp.file("b.ec"));
    std::ifstream fa(tmp.file("a.ec"), std::ios::binary), fb(tmp.file("b.ec"), std::ios::binary);
    const std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    EXPECT_EQ(da, db);
    EXPECT_EQ(s1.to_json().dump(), s2.to_json().dump());
}

TEST(ToyModel, SaveLoadKeepsForwardLogitsBitwise) {
    TempDir tmp;
    const auto cfg = planted_config();
    const auto [m1, s1] = make_toy_model(cfg, {}, 23);
    save_model(m1, tmp.file("m.ec"));
    const Model m2 = load_model(tmp.file("m.ec"));
    const auto corpus = make_elicitation_corpus(2, cfg, 23);
    const Vec la = forward(m1, corpus[0].variant(2)).logits;
    const Vec lb = forward(m2, corpus[0].variant(2)).logits;
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_DOUBLE_EQ(la[i], lb[i]);
}

TEST(ToyModel, ZeroPlantHasNoEmotionSignal) {
    ToyKnobs knobs;
    knobs.neurons_per_layer = 0;
    knobs.heads_per_layer = 0;
    const auto cfg = planted_config();
    const auto [model, spec] = make_toy_model(cfg, knobs, 25);
    const auto corpus = make_elicitation_corpus(2, cfg, 25);
    const Trace a = run_trace(model, corpus[0].variant(0), {});
    const Trace b = run_trace(model, corpus[0].variant(4), {});
    const std::size_t last = corpus[0].variant(0).size() - 1;
    for (std::size_t i = 0; i < cfg.d_model; ++i)
        EXPECT_DOUBLE_EQ(a.final_hidden(last)[i], b.final_hidden(last)[i]);
}

TEST(ToyModel, InfeasibleKnobsRejected) {
    ModelConfig small = planted_config();
    small.d_ff = 8;  // cannot host 6 * 3 disjoint planted neurons
    EXPECT_THROW(make_toy_model(small, {}, 1), ContractViolation);
}

TEST(Corpus, StructureAndDeterminism) {
    const auto cfg = planted_config();
    const auto corpus = make_elicitation_corpus(80, cfg, 31);
    ASSERT_EQ(corpus.size(), 80u);
    std::size_t runs = 0;
    for (const auto& g : corpus) {
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            const auto v = g.variant(e);
            ++runs;
            // shared block is identical across the six variants
            for (std::size_t t = 0; t + 1 < v.size(); ++t) EXPECT_EQ(v[t], g.variant(0)[t]);
        }
    }
    EXPECT_EQ(runs, 480u);

    const auto again = make_elicitation_corpus(80, cfg, 31);
    EXPECT_EQ(corpus[7].scenario, again[7].scenario);
    const auto other_seed = make_elicitation_corpus(80, cfg, 32);
    bool any_diff = false;
    for (std::size_t i = 0; i < corpus.size() && !any_diff; ++i)
        any_diff = corpus[i].scenario != other_seed[i].scenario;
    EXPECT_TRUE(any_diff);
}

TEST(Corpus, SingleGroup) {
    const auto corpus = make_elicitation_corpus(1, planted_config(), 1);
    ASSERT_EQ(corpus.size(), 1u);
    EXPECT_EQ(corpus[0].valence, "positive");
}

TEST(LinearToy, SublayerUpdatesAreNonZero) {
    ModelConfig cfg = tiny_config(2, 16, 2, 24, 24);
    const Model m = make_linear_toy_model(cfg, 41);
    const Trace tr = run_trace(m, {1, 2, 3}, {});
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        const Vec attn_delta =
            sub(tr.resid_after_attn[l].row_vec(2), tr.resid_in[l].row_vec(2));
        const Vec mlp_delta =
            sub(tr.resid_after_mlp[l].row_vec(2), tr.resid_after_attn[l].row_vec(2));
        EXPECT_GT(norm2(attn_delta), 1e-6);
        EXPECT_GT(norm2(mlp_delta), 1e-6);
    }
}

// The response to an injected perturbation must be exactly proportional to it.
TEST(LinearToy, DownstreamIsAffine) {
    ModelConfig cfg = tiny_config(3, 16, 2, 24, 24);
    const Model m = make_linear_toy_model(cfg, 43);
    const std::vector<TokenId> tokens = {1, 2, 3, 4};
    const Trace base = run_trace(m, tokens, {});
    Rng rng(5);
    const Vec v = l2_normalize(rng.gaussian_vec(cfg.d_model));

    auto shifted_final = [&](double scale) {
        EditAction e{0, Site::ResidAfterAttn, EditKind::AddScaledVector, {}, v, scale, false,
                     PositionPolicy::LastPromptToken};
        const Trace tr = run_trace(m, tokens, {e});
        return sub(tr.final_hidden(3), base.final_hidden(3));
    };
    const Vec d1 = shifted_final(0.5);
    const Vec d2 = shifted_final(2.0);
    for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_NEAR(4.0 * d1[i], d2[i], 1e-9);
}
