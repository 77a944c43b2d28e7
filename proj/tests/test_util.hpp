#pragma once

// Helpers shared by the test binaries only: small random models, temp dirs,
// and explicit re-computations used as oracles against the runtime.

#include <filesystem>
#include <string>
#include <unistd.h>

#include <emocirc/model.hpp>
#include <emocirc/numerics.hpp>
#include <emocirc/rng.hpp>

namespace emocirc::testutil {

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t d = 8, std::size_t heads = 2,
                               std::size_t ff = 16, std::size_t vocab = 24,
                               std::size_t max_seq = 32) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.d_head = d / heads;
    c.d_ff = ff;
    c.vocab_size = vocab;
    c.max_seq = max_seq;
    c.rope_enabled = false;
    return c;
}

// Unstructured random weights, f32-exact so container round trips are bitwise.
inline Model random_model(const ModelConfig& cfg, std::uint64_t seed, double sigma = 0.25) {
    cfg.validate();
    Rng rng(seed);
    auto mat = [&](std::size_t r, std::size_t c) {
        Mat m(r, c);
        for (double& x : m.a) x = static_cast<float>(sigma * rng.gaussian());
        return m;
    };
    auto ones = [&](std::size_t n) { return Vec(n, 1.0); };

    Model m;
    m.config = cfg;
    m.token_embedding = mat(cfg.vocab_size, cfg.d_model);
    m.unembedding = mat(cfg.vocab_size, cfg.d_model);
    m.final_norm_scale = ones(cfg.d_model);
    m.layers.resize(cfg.n_layers);
    for (auto& lw : m.layers) {
        lw.norm1_scale = ones(cfg.d_model);
        lw.norm2_scale = ones(cfg.d_model);
        for (std::size_t i = 0; i < cfg.n_heads; ++i) {
            lw.w_q.push_back(mat(cfg.d_head, cfg.d_model));
            lw.w_k.push_back(mat(cfg.d_head, cfg.d_model));
            lw.w_v.push_back(mat(cfg.d_head, cfg.d_model));
        }
        lw.w_o = mat(cfg.d_model, cfg.n_heads * cfg.d_head);
        lw.w_u1 = mat(cfg.d_ff, cfg.d_model);
        lw.w_u2 = mat(cfg.d_ff, cfg.d_model);
        lw.w_d = mat(cfg.d_model, cfg.d_ff);
    }
    return m;
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng.uniform_index(vocab));
    return t;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("emocirc_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline double max_abs_diff(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return 1e300;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace emocirc::testutil
