#pragma once

#include <optional>
#include <vector>

#include "dmdetr/attention.hpp"
#include "dmdetr/mm_encoder.hpp"
#include "dmdetr/ops.hpp"

namespace dmdetr {

// G x G x C feature grid, flattened row-major: grid cell (y, x) is row y*G + x.
// That order is the single convention used everywhere, including positional
// embedding sampling.
struct FeatureMap {
    Tensor features;  // N_v x C, N_v = G*G
    int grid_size = 0;
};

struct TokenSequence {
    std::vector<int> ids;
    Mask mask;        // 1 = real token
    Tensor embedded;  // N_l x C
};

// Patch-embedding stand-in for a visual backbone.
struct VisualEncoderParams {
    int patch = 4;
    int side = 64;
    Tensor patch_w, patch_b;  // (3*patch^2) -> C_v
    std::optional<EncoderLayerParams> context;  // optional single layer over C_v tokens
    Tensor ctx_pos;                             // N_v x C_v positional embedding for it
    Tensor proj_w, proj_b;                      // C_v -> C
};

// Token-embedding stand-in for a language backbone.
struct TextEncoderParams {
    Tensor table;  // vocab x C_l
    std::optional<EncoderLayerParams> context;
    Tensor ctx_pos;  // N_l x C_l
    Tensor proj_w, proj_b;  // C_l -> C
};

inline VisualEncoderParams init_visual_encoder(int side, int patch, int c_v, int c, int heads,
                                               bool context, SeededRng& rng) {
    if (patch <= 0 || side % patch != 0)
        throw ConfigError("visual encoder: side " + std::to_string(side) +
                          " not divisible by patch " + std::to_string(patch));
    VisualEncoderParams p;
    p.patch = patch;
    p.side = side;
    int g = side / patch;
    p.patch_w = init_weight(3 * patch * patch, c_v, rng);
    p.patch_b = init_bias(c_v);
    if (context) {
        p.context = init_encoder_layer(c_v, 4 * c_v, heads, rng);
        p.ctx_pos = Tensor::zeros({g * g, c_v}, true);
        fill_sinusoidal_grid(p.ctx_pos, g);
    }
    p.proj_w = init_weight(c_v, c, rng);
    p.proj_b = init_bias(c);
    return p;
}

inline TextEncoderParams init_text_encoder(int vocab, int n_l, int c_l, int c, int heads,
                                           bool context, SeededRng& rng) {
    TextEncoderParams p;
    p.table = Tensor::zeros({vocab, c_l}, true);
    for (auto& v : p.table.values()) v = rng.normal(0.0, 0.02);
    if (context) {
        p.context = init_encoder_layer(c_l, 4 * c_l, heads, rng);
        p.ctx_pos = Tensor::zeros({n_l, c_l}, true);
        fill_sinusoidal_rows(p.ctx_pos);
    }
    p.proj_w = init_weight(c_l, c, rng);
    p.proj_b = init_bias(c);
    return p;
}

// Cuts the raster into non-overlapping patches, embeds them linearly and
// projects into the shared C-dim space. Raster layout: side x side x 3,
// row-major, values in [0, 1].
inline FeatureMap encode_image(const std::vector<double>& raster,
                               const VisualEncoderParams& p) {
    int side = p.side, patch = p.patch;
    if (raster.size() != static_cast<std::size_t>(side) * side * 3)
        throw ShapeError("encode_image: raster has " + std::to_string(raster.size()) +
                         " values, expected " + std::to_string(side * side * 3));
    int g = side / patch;
    int n_v = g * g;
    int pv = 3 * patch * patch;
    std::vector<double> patches(static_cast<std::size_t>(n_v) * pv);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            double* row = patches.data() + static_cast<std::size_t>(gy * g + gx) * pv;
            int idx = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int ch = 0; ch < 3; ++ch)
                        row[idx++] = raster[(static_cast<std::size_t>(gy * patch + py) * side +
                                             (gx * patch + px)) * 3 + ch];
        }
    Tensor x = Tensor::from({n_v, pv}, std::move(patches));
    Tensor feat = linear(x, p.patch_w, p.patch_b);
    if (p.context) feat = encoder_layer(feat, p.ctx_pos, *p.context);
    FeatureMap fm;
    fm.features = linear(feat, p.proj_w, p.proj_b);
    fm.grid_size = g;
    return fm;
}

// Patch rows before the optional context layer; exposed for locality tests.
inline Tensor patch_rows(const std::vector<double>& raster, const VisualEncoderParams& p) {
    VisualEncoderParams flat = p;
    flat.context.reset();
    // patch embedding only, no projection
    int side = p.side, patch = p.patch, g = side / patch;
    int pv = 3 * patch * patch;
    std::vector<double> patches(static_cast<std::size_t>(g * g) * pv);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            double* row = patches.data() + static_cast<std::size_t>(gy * g + gx) * pv;
            int idx = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int ch = 0; ch < 3; ++ch)
                        row[idx++] = raster[(static_cast<std::size_t>(gy * patch + py) * side +
                                             (gx * patch + px)) * 3 + ch];
        }
    return linear(Tensor::from({g * g, pv}, std::move(patches)), p.patch_w, p.patch_b);
}

inline TokenSequence encode_text(const std::vector<int>& ids, const Mask& mask,
                                 const TextEncoderParams& p) {
    if (ids.size() != mask.size())
        throw ShapeError("encode_text: " + std::to_string(ids.size()) + " ids vs " +
                         std::to_string(mask.size()) + " mask bits");
    Tensor emb = embedding(p.table, ids);  // throws DataError for out-of-vocab ids
    if (p.context) emb = encoder_layer(emb, p.ctx_pos, *p.context, mask);
    TokenSequence seq;
    seq.ids = ids;
    seq.mask = mask;
    seq.embedded = linear(emb, p.proj_w, p.proj_b);
    return seq;
}

// F = [F_v; F_l], visual rows first; combined key mask is all-ones over the
// visual part followed by m_l.
inline std::pair<Tensor, Mask> concat_sequence(const Tensor& f_v, const Tensor& f_l,
                                               const Mask& m_l) {
    if (f_v.dim(1) != f_l.dim(1))
        throw ShapeError("concat_sequence: widths differ, " + shape_str(f_v.shape()) + " vs " +
                         shape_str(f_l.shape()));
    Mask m(static_cast<std::size_t>(f_v.dim(0)), 1);
    m.insert(m.end(), m_l.begin(), m_l.end());
    return {concat({f_v, f_l}, 0), std::move(m)};
}

}  // namespace dmdetr
