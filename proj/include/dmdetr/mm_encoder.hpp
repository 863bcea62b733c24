#pragma once

#include <vector>

#include <cmath>

#include "dmdetr/attention.hpp"

namespace dmdetr {

// Sinusoidal position codes, used as the *initial values* of the learnable
// embeddings. Random near-zero init leaves attention with no usable position
// signal at small scale; seeding with sinusoids removes that cold start while
// keeping every embedding trainable.
inline void fill_sinusoidal_1d(double* row, int c, double pos, double span) {
    int half = c / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -2.0 * i / half) * span;
        row[2 * i] = std::sin(pos * freq);
        row[2 * i + 1] = std::cos(pos * freq);
    }
    if (c % 2) row[c - 1] = 0.0;
}

// Grid cell (y, x): first half of the channels encodes x, second half y.
inline void fill_sinusoidal_grid(Tensor& t, int g) {
    int c = t.dim(1);
    int cx = c / 2;
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
            double* row = t.values().data() + static_cast<std::size_t>(y * g + x) * c;
            fill_sinusoidal_1d(row, cx, x, 6.28318530717958648 / g);
            fill_sinusoidal_1d(row + cx, c - cx, y, 6.28318530717958648 / g);
        }
}

inline void fill_sinusoidal_rows(Tensor& t, int offset_row = 0) {
    int c = t.dim(1);
    for (int i = offset_row; i < t.dim(0); ++i)
        fill_sinusoidal_1d(t.values().data() + static_cast<std::size_t>(i) * c, c,
                           i - offset_row, 1.0);
}

// M-layer multimodal encoder over the concatenated [F_v; F_l] sequence.
// One learnable positional embedding is shared by all layers, DETR-style.
struct MultimodalEncoderParams {
    std::vector<EncoderLayerParams> layers;
    Tensor p_pos;  // (N_v+N_l) x C
    int n_v = 0;
    int grid_size = 0;
};

inline MultimodalEncoderParams init_mm_encoder(int m, int n_v, int n_l, int g, int c, int c_ffn,
                                               int heads, SeededRng& rng) {
    if (g * g != n_v)
        throw ConfigError("mm encoder: N_v " + std::to_string(n_v) + " is not G^2 for G=" +
                          std::to_string(g));
    MultimodalEncoderParams p;
    p.n_v = n_v;
    p.grid_size = g;
    p.layers.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) p.layers.push_back(init_encoder_layer(c, c_ffn, heads, rng));
    p.p_pos = Tensor::zeros({n_v + n_l, c}, true);
    for (auto& v : p.p_pos.values()) v = rng.normal(0.0, 0.02);
    Tensor vis_part = Tensor::zeros({n_v, c});
    fill_sinusoidal_grid(vis_part, g);
    for (int i = 0; i < n_v * c; ++i)
        p.p_pos.values()[static_cast<std::size_t>(i)] += vis_part.values()[static_cast<std::size_t>(i)];
    fill_sinusoidal_rows(p.p_pos, n_v);
    return p;
}

inline Tensor mm_encode(const Tensor& f, const Mask& key_mask, const MultimodalEncoderParams& p,
                        double dropout_rate = 0.0, SeededRng* rng = nullptr,
                        bool training = false) {
    if (f.dim(0) != p.p_pos.dim(0))
        throw ShapeError("mm_encode: sequence has " + std::to_string(f.dim(0)) +
                         " rows, positional embedding has " + std::to_string(p.p_pos.dim(0)));
    Tensor x = f;
    for (const auto& layer : p.layers)
        x = encoder_layer(x, p.p_pos, layer, key_mask, dropout_rate, rng, training);
    return x;
}

struct MmSplit {
    Tensor f_v, p_v;  // N_v x C; p_v doubles as the G x G x C grid in row-major order
    Tensor f_l, p_l;  // N_l x C
};

// Splits features and the positional embedding back into modalities. The
// visual positional part is the sampling grid: row y*G + x is grid cell (y, x).
inline MmSplit mm_split(const Tensor& f_e, const MultimodalEncoderParams& p) {
    int total = p.p_pos.dim(0);
    if (f_e.dim(0) != total)
        throw ShapeError("mm_split: " + std::to_string(f_e.dim(0)) + " rows vs " +
                         std::to_string(total));
    int n_l = total - p.n_v;
    MmSplit s;
    auto fparts = split(f_e, 0, {p.n_v, n_l});
    auto pparts = split(p.p_pos, 0, {p.n_v, n_l});
    s.f_v = fparts[0];
    s.f_l = fparts[1];
    s.p_v = pparts[0];
    s.p_l = pparts[1];
    return s;
}

}  // namespace dmdetr
