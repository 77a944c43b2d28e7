#include <gtest/gtest.h>

#include <emocirc/directions.hpp>

#include "test_util.hpp"

using namespace emocirc;
using namespace emocirc::testutil;

namespace {

// Hand-built record whose site values come from a generator.
template <typename Gen>
RunRecord make_record(std::size_t group, std::size_t emotion, std::size_t n_layers, Gen gen) {
    RunRecord r;
    r.group_id = group;
    r.emotion = kEmotions[emotion];
    r.valence = kValences[group % 3];
    r.success = SuccessFlag::Yes;
    for (std::size_t l = 0; l < n_layers; ++l)
        for (Site s : {Site::ResidAfterAttn, Site::ResidAfterMlp, Site::GatedMlp,
                       Site::HeadConcat})
            r.taps.taps.push_back({{l, s, PositionPolicy::LastPromptToken}, gen(l, s, emotion)});
    return r;
}

ModelConfig planted_cfg() {
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

}  // namespace

// With a_e = m + u_e and the u_e summing to zero, the shared part cancels
// exactly and each direction is the normalized u_e.
TEST(ExtractDirections, SharedComponentCancels) {
    const std::size_t d = 6, n_layers = 1;
    Rng rng(3);
    std::vector<Vec> u(kEmotionCount, Vec(d, 0.0));
    for (std::size_t e = 0; e + 1 < kEmotionCount; ++e) {
        u[e] = rng.gaussian_vec(d);
        axpy(-1.0, u[e], u[kEmotionCount - 1]);
    }
    const Vec m = rng.gaussian_vec(d, 10.0);  // large shared component

    std::vector<RunRecord> records;
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        records.push_back(make_record(0, e, n_layers, [&](std::size_t, Site, std::size_t em) {
            return add(m, u[em]);
        }));

    const DirectionSet ds = extract_directions(records);
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        const Vec expect = l2_normalize(u[e]);
        for (std::size_t i = 0; i < d; ++i) {
            EXPECT_NEAR(ds.mlp[e][0][i], expect[i], 1e-9);
            EXPECT_NEAR(ds.attn[e][0][i], expect[i], 1e-9);
        }
    }
}

TEST(ExtractDirections, IdenticalActivationsAreDegenerate) {
    const Vec same{1.0, 2.0, 3.0};
    std::vector<RunRecord> records;
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        records.push_back(
            make_record(0, e, 1, [&](std::size_t, Site, std::size_t) { return same; }));
    EXPECT_THROW(extract_directions(records), DegenerateDirection);
}

TEST(ExtractDirections, NoUsableGroupThrows) {
    std::vector<RunRecord> records;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        auto r = make_record(0, e, 1, [&](std::size_t, Site, std::size_t em) {
            Vec v(3, 0.0);
            v[0] = static_cast<double>(em);
            return v;
        });
        r.success = SuccessFlag::No;
        records.push_back(r);
    }
    EXPECT_THROW(extract_directions(records), NoGroups);
}

TEST(ExtractDirections, FailedVariantDropsWholeGroup) {
    Rng rng(5);
    std::vector<Vec> u(kEmotionCount);
    for (auto& v : u) v = rng.gaussian_vec(4);

    auto gen_good = [&](std::size_t, Site, std::size_t em) { return u[em]; };
    auto gen_poison = [&](std::size_t, Site, std::size_t em) { return scaled(u[em], -3.0); };

    std::vector<RunRecord> clean, with_poison;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        clean.push_back(make_record(0, e, 1, gen_good));
        with_poison.push_back(make_record(0, e, 1, gen_good));
        auto bad = make_record(1, e, 1, gen_poison);
        if (e == 2) bad.success = SuccessFlag::No;
        with_poison.push_back(bad);
    }
    const DirectionSet a = extract_directions(clean);
    const DirectionSet b = extract_directions(with_poison);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(a.mlp[e][0][i], b.mlp[e][0][i]);
}

// Integer activations whose sums divide evenly: the shifted and unshifted
// extractions agree bit for bit.
TEST(ExtractDirections, TranslationInvarianceExactOnIntegerData) {
    std::vector<Vec> base(kEmotionCount);
    base[0] = {6, 0, 0, 2};
    base[1] = {0, 6, 0, 2};
    base[2] = {0, 0, 6, 2};
    base[3] = {-6, 0, 0, 2};
    base[4] = {0, -6, 0, 2};
    base[5] = {0, 0, -6, 2};  // per-coordinate sums: 0,0,0,12 -> mean exact

    const Vec offset{5, -3, 7, 11};
    std::vector<RunRecord> plain, shifted;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        plain.push_back(
            make_record(0, e, 1, [&](std::size_t, Site, std::size_t em) { return base[em]; }));
        shifted.push_back(make_record(
            0, e, 1, [&](std::size_t, Site, std::size_t em) { return add(base[em], offset); }));
    }
    const DirectionSet a = extract_directions(plain);
    const DirectionSet b = extract_directions(shifted);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_EQ(a.mlp[e][0][i], b.mlp[e][0][i]);
            EXPECT_EQ(a.attn[e][0][i], b.attn[e][0][i]);
        }
}

TEST(ExtractDirections, TranslationInvarianceOnFloatData) {
    Rng rng(11);
    std::vector<Vec> base(kEmotionCount);
    for (auto& v : base) v = rng.gaussian_vec(8);
    const Vec offset = rng.gaussian_vec(8, 50.0);

    std::vector<RunRecord> plain, shifted;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        plain.push_back(
            make_record(0, e, 1, [&](std::size_t, Site, std::size_t em) { return base[em]; }));
        shifted.push_back(make_record(
            0, e, 1, [&](std::size_t, Site, std::size_t em) { return add(base[em], offset); }));
    }
    const DirectionSet a = extract_directions(plain);
    const DirectionSet b = extract_directions(shifted);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        EXPECT_LT(max_abs_diff(a.mlp[e][0], b.mlp[e][0]), 1e-12);
}

TEST(ExtractDirections, EmotionPermutationEquivariance) {
    Rng rng(13);
    std::vector<Vec> base(kEmotionCount);
    for (auto& v : base) v = rng.gaussian_vec(5);
    const std::array<std::size_t, kEmotionCount> perm{3, 0, 4, 5, 1, 2};

    std::vector<RunRecord> plain, relabeled;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        plain.push_back(
            make_record(0, e, 1, [&](std::size_t, Site, std::size_t em) { return base[em]; }));
        // same activation payload now labeled perm[e]
        auto r = make_record(0, perm[e], 1,
                             [&](std::size_t, Site, std::size_t) { return base[e]; });
        relabeled.push_back(r);
    }
    const DirectionSet a = extract_directions(plain);
    const DirectionSet b = extract_directions(relabeled);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t i = 0; i < 5; ++i)
            EXPECT_DOUBLE_EQ(a.mlp[e][0][i], b.mlp[perm[e]][0][i]);
}

TEST(ExtractDirections, DeterministicBitwise) {
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 31);
    const auto groups = to_prompt_groups(make_elicitation_corpus(4, cfg, 31));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DirectionSet a = extract_directions(res.records);
    const DirectionSet b = extract_directions(res.records);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < a.n_layers; ++l)
            for (std::size_t i = 0; i < a.d_model; ++i)
                EXPECT_EQ(a.mlp[e][l][i], b.mlp[e][l][i]);
}

TEST(ExtractDirections, PlantedModelRecoversPlantedDirections) {
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 37);
    const auto groups = to_prompt_groups(make_elicitation_corpus(12, cfg, 37));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DirectionSet ds = extract_directions(res.records);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            EXPECT_NEAR(norm2(ds.mlp[e][l]), 1.0, 1e-6);
            EXPECT_GT(cosine(ds.mlp[e][l], spec.directions[e]), 0.9)
                << "emotion " << e << " layer " << l;
        }
}

TEST(DifferenceVectors, WithinGroupContrastsSumToZero) {
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 41);
    const auto groups = to_prompt_groups(make_elicitation_corpus(5, cfg, 41));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DifferenceVectorSet dv = extract_difference_vectors(res.records);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Vec sum_mlp(dv.d_ff, 0.0), sum_attn(dv.d_concat, 0.0);
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            axpy(1.0, dv.mlp[e][l], sum_mlp);
            axpy(1.0, dv.attn[e][l], sum_attn);
        }
        for (double x : sum_mlp) EXPECT_NEAR(x, 0.0, 1e-6);
        for (double x : sum_attn) EXPECT_NEAR(x, 0.0, 1e-6);
    }
}

TEST(DifferenceVectors, ConcentratedOnPlantedNeurons) {
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 43);
    const auto groups = to_prompt_groups(make_elicitation_corpus(8, cfg, 43));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DifferenceVectorSet dv = extract_difference_vectors(res.records);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            double planted_mass = 0.0, total_mass = 0.0;
            for (std::size_t j = 0; j < dv.d_ff; ++j) {
                const double m = dv.mlp[e][l][j] * dv.mlp[e][l][j];
                total_mass += m;
                if (std::find(spec.neurons[e][l].begin(), spec.neurons[e][l].end(), j) !=
                    spec.neurons[e][l].end())
                    planted_mass += m;
            }
            EXPECT_GE(planted_mass / total_mass, 0.8) << "emotion " << e << " layer " << l;
        }
}

TEST(DifferenceVectors, IdenticalActivationsGiveZero) {
    const Vec same{2.0, 4.0};
    std::vector<RunRecord> records;
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        records.push_back(
            make_record(0, e, 1, [&](std::size_t, Site, std::size_t) { return same; }));
    const DifferenceVectorSet dv = extract_difference_vectors(records);
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (double x : dv.mlp[e][0]) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(DifferenceVectors, MissingTapsThrow) {
    std::vector<RunRecord> records;
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        RunRecord r;
        r.group_id = 0;
        r.emotion = kEmotions[e];
        r.success = SuccessFlag::Yes;
        Vec v(3, static_cast<double>(e));
        r.taps.taps.push_back({{0, Site::ResidAfterAttn, PositionPolicy::LastPromptToken}, v});
        r.taps.taps.push_back({{0, Site::ResidAfterMlp, PositionPolicy::LastPromptToken}, v});
        records.push_back(r);
    }
    EXPECT_THROW(extract_difference_vectors(records), MissingSite);
}

TEST(Classify, SelfMatchAndTieBreak) {
    DirectionSet ds;
    ds.n_layers = 1;
    ds.d_model = 6;
    ds.attn.assign(kEmotionCount, std::vector<Vec>(1));
    ds.mlp.assign(kEmotionCount, std::vector<Vec>(1));
    ds.attn_sample_mean.assign(1, Vec(6, 0.0));
    ds.mlp_sample_mean.assign(1, Vec(6, 0.0));
    for (std::size_t e = 0; e < kEmotionCount; ++e) {
        Vec v(6, 0.0);
        v[e] = 1.0;
        ds.attn[e][0] = v;
        ds.mlp[e][0] = v;
    }

    const auto hit = centroid_classify(ds.mlp[0][0], ds, 0, Stream::Mlp);
    EXPECT_EQ(hit.emotion, 0u);
    EXPECT_FALSE(hit.low_margin);

    // orthogonal to all six: fixed-order tie-break lands on the first emotion
    Vec ortho(6, 0.0);
    const auto tie = centroid_classify(ortho, ds, 0, Stream::Mlp);
    EXPECT_EQ(tie.emotion, 0u);
    EXPECT_TRUE(tie.low_margin);
}

TEST(Classify, PlantedCorpusPerfectF1) {
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 47);
    const auto groups = to_prompt_groups(make_elicitation_corpus(10, cfg, 47));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DirectionSet ds = extract_directions(res.records);
    for (const auto& r : res.records)
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const auto c =
                centroid_classify(r.taps.at(l, Site::ResidAfterMlp), ds, l, Stream::Mlp);
            EXPECT_EQ(kEmotions[c.emotion], r.emotion) << "layer " << l;
        }
}

TEST(DirectionsIo, RoundTripBitwise) {
    TempDir tmp;
    const auto cfg = planted_cfg();
    const auto [model, spec] = make_toy_model(cfg, {}, 53);
    const auto groups = to_prompt_groups(make_elicitation_corpus(3, cfg, 53));
    const auto res = run_elicitation(model, groups, planted_readout_oracle(spec));
    const DirectionSet ds = extract_directions(res.records);
    const DifferenceVectorSet dv = extract_difference_vectors(res.records);
    save_directions(ds, dv, tmp.file("dirs.ec"));
    const auto [ds2, dv2] = load_directions(tmp.file("dirs.ec"));
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        for (std::size_t l = 0; l < ds.n_layers; ++l) {
            EXPECT_EQ(ds.mlp[e][l], ds2.mlp[e][l]);
            EXPECT_EQ(ds.attn[e][l], ds2.attn[e][l]);
            EXPECT_EQ(dv.mlp[e][l], dv2.mlp[e][l]);
            EXPECT_EQ(dv.attn[e][l], dv2.attn[e][l]);
        }
}
