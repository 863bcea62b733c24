#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmdetr/attention.hpp"
#include "dmdetr/ops.hpp"

namespace dmdetr {

enum class InitSampling { grid, uniform, learnable };

inline InitSampling parse_init_sampling(const std::string& s) {
    if (s == "grid") return InitSampling::grid;
    if (s == "uniform") return InitSampling::uniform;
    if (s == "learnable") return InitSampling::learnable;
    throw ConfigError("unknown init-sampling mode '" + s + "' (grid|uniform|learnable)");
}

struct DecoderLayerParams {
    Tensor qg_w1, qg_b1, qg_w2, qg_b2;  // sampling-query MLP, 2C -> C -> C with ReLU
    Tensor off_w, off_b;                // offset generator, C -> 2*P_pts
    EncoderLayerParams inner;           // over the P_pts sampled tokens
    MhaParams cross;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ref_w1, ref_b1, ref_w2, ref_b2;  // reference FFN, C -> C -> 2
};

struct DecoderParams {
    std::vector<DecoderLayerParams> layers;
    Tensor f_s0;  // learnable initial sampling query, 1 x C
    int p_pts = 0;
    int grid_size = 0;
    bool static_sampling = false;        // bypass offset generators entirely
    std::vector<double> static_coords;   // P_pts x 2, used when static_sampling
};

// Centered lattice: ceil(sqrt(P)) points per axis at (j+0.5)/k, row-major in
// (x fastest), truncated to P. "uniform" draws each coordinate offset from
// U(-0.5, 0.5) around the image center once.
inline std::vector<double> static_sampling_coords(const std::string& mode, int p_pts,
                                                  SeededRng& rng) {
    std::vector<double> coords;
    coords.reserve(static_cast<std::size_t>(p_pts) * 2);
    if (mode == "grid") {
        int k = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p_pts))));
        for (int i = 0; i < k && static_cast<int>(coords.size()) < 2 * p_pts; ++i)
            for (int j = 0; j < k && static_cast<int>(coords.size()) < 2 * p_pts; ++j) {
                coords.push_back((j + 0.5) / k);  // x
                coords.push_back((i + 0.5) / k);  // y
            }
    } else if (mode == "uniform-fixed") {
        for (int j = 0; j < p_pts; ++j) {
            coords.push_back(0.5 + rng.uniform(-0.5, 0.5));
            coords.push_back(0.5 + rng.uniform(-0.5, 0.5));
        }
    } else {
        throw ConfigError("unknown static sampling mode '" + mode + "' (grid|uniform-fixed)");
    }
    return coords;
}

// Layer-1 offset init follows the chosen mode; deeper layers always use the
// zeroed-weight / uniform-bias rule so early training stays near the
// reference point. "uniform" freezes the layer-1 generator; "grid" seeds its
// bias with the lattice; "learnable" is the trained random-bias default.
inline DecoderLayerParams init_decoder_layer(int c, int c_ffn, int heads, int p_pts,
                                             int layer_index, InitSampling mode,
                                             SeededRng& rng) {
    DecoderLayerParams p;
    p.qg_w1 = init_weight(2 * c, c, rng);
    p.qg_b1 = init_bias(c);
    p.qg_w2 = init_weight(c, c, rng);
    p.qg_b2 = init_bias(c);
    p.off_w = Tensor::zeros({c, 2 * p_pts}, true);
    p.off_b = Tensor::zeros({2 * p_pts}, true);
    if (layer_index == 0 && mode == InitSampling::grid) {
        std::vector<double> lattice = static_sampling_coords("grid", p_pts, rng);
        for (int j = 0; j < 2 * p_pts; ++j) p.off_b.values()[j] = lattice[j] - 0.5;
    } else {
        for (auto& v : p.off_b.values()) v = rng.uniform(-0.5, 0.5);
    }
    if (layer_index == 0 && mode == InitSampling::uniform) {
        p.off_w = Tensor::from({c, 2 * p_pts}, p.off_w.values());
        p.off_b = Tensor::from({2 * p_pts}, p.off_b.values());
    }
    p.inner = init_encoder_layer(c, c_ffn, heads, rng);
    p.cross = init_mha(c, heads, rng);
    p.ffn_w1 = init_weight(c, c_ffn, rng);
    p.ffn_b1 = init_bias(c_ffn);
    p.ffn_w2 = init_weight(c_ffn, c, rng);
    p.ffn_b2 = init_bias(c);
    p.ln1_g = Tensor::full({c}, 1.0, true);
    p.ln1_b = init_bias(c);
    p.ln2_g = Tensor::full({c}, 1.0, true);
    p.ln2_b = init_bias(c);
    p.ref_w1 = init_weight(c, c, rng);
    p.ref_b1 = init_bias(c);
    p.ref_w2 = init_weight(c, 2, rng);
    p.ref_b2 = init_bias(2);
    return p;
}

inline DecoderParams init_decoder(int n, int c, int c_ffn, int heads, int p_pts, int g,
                                  InitSampling mode, SeededRng& rng) {
    DecoderParams p;
    p.p_pts = p_pts;
    p.grid_size = g;
    p.layers.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        p.layers.push_back(init_decoder_layer(c, c_ffn, heads, p_pts, i, mode, rng));
    p.f_s0 = Tensor::zeros({1, c}, true);
    for (auto& v : p.f_s0.values()) v = rng.normal(0.0, 0.02);
    return p;
}

inline Tensor pool_language(const Tensor& f_l, const Mask& mask) {
    return reshape(masked_mean(f_l, mask), {1, f_l.dim(1)});
}

// First layer passes the learnable initial query through unfused, making
// layer-1 sampling independent of the input image and text.
inline Tensor sampling_query_generator(const Tensor& f_s_prev, const Tensor& f_l_pooled,
                                       const DecoderLayerParams& p, bool is_first_layer) {
    if (is_first_layer) return f_s_prev;
    Tensor x = concat({f_s_prev, f_l_pooled}, 1);
    return linear(relu(linear(x, p.qg_w1, p.qg_b1)), p.qg_w2, p.qg_b2);
}

inline Tensor generate_offsets(const Tensor& f_s, const DecoderLayerParams& p, int p_pts) {
    return reshape(linear(f_s, p.off_w, p.off_b), {p_pts, 2});
}

// Raw sample locations; may leave [0,1], clamping happens at interpolation.
inline Tensor compute_sample_coords(const Tensor& ref, const Tensor& offsets) {
    return add_rowvec(offsets, ref);
}

inline Tensor text_guided_decode(const Tensor& f_s, const Tensor& p_s, const Tensor& f_l,
                                 const Tensor& p_l, const DecoderLayerParams& p,
                                 double dropout_rate = 0.0, SeededRng* rng = nullptr,
                                 bool training = false) {
    Tensor fs_hat = encoder_layer(f_s, p_s, p.inner, {}, dropout_rate, rng, training);
    Tensor attn = mha(add(f_l, p_l), add(fs_hat, p_s), fs_hat, p.cross);
    attn = dropout(attn, dropout_rate, rng, training);
    Tensor f1 = layer_norm(add(f_l, attn), p.ln1_g, p.ln1_b);
    Tensor h = dropout(relu(linear(f1, p.ffn_w1, p.ffn_b1)), dropout_rate, rng, training);
    Tensor ffn = linear(h, p.ffn_w2, p.ffn_b2);
    return layer_norm(add(f1, ffn), p.ln2_g, p.ln2_b);
}

// Absolute reference prediction: pooled queries -> FFN -> sigmoid, (x, y).
inline Tensor update_reference_point(const Tensor& f_l_next, const Mask& mask,
                                     const DecoderLayerParams& p) {
    Tensor pooled = pool_language(f_l_next, mask);
    Tensor h = relu(linear(pooled, p.ref_w1, p.ref_b1));
    return reshape(sigmoid(linear(h, p.ref_w2, p.ref_b2)), {2});
}

struct LayerTrace {
    int layer = 0;                       // 1-based
    double ref_x = 0.0, ref_y = 0.0;     // reference point used for sampling
    std::vector<double> coords;          // raw (pre-clamp) P_pts x 2
};

struct DecoderOutput {
    Tensor f_d;                    // final language queries, N_l x C
    Tensor ref;                    // final reference point, shape {2}
    std::vector<LayerTrace> trace;
};

inline DecoderOutput decoder_forward(const Tensor& f_v, const Tensor& p_v, const Tensor& f_l_in,
                                     const Tensor& p_l, const Mask& mask,
                                     const DecoderParams& params, double dropout_rate = 0.0,
                                     SeededRng* rng = nullptr, bool training = false) {
    if (params.layers.empty()) throw ConfigError("decoder: needs at least one layer");
    int g = params.grid_size, p_pts = params.p_pts;
    Tensor ref = Tensor::from({2}, {0.5, 0.5});
    Tensor f_s_prev = params.f_s0;
    Tensor f_l = f_l_in;
    DecoderOutput out;
    out.trace.reserve(params.layers.size());
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const DecoderLayerParams& lp = params.layers[i];
        Tensor f_l_pooled = pool_language(f_l, mask);
        Tensor f_s_query = sampling_query_generator(f_s_prev, f_l_pooled, lp, i == 0);
        Tensor coords;
        if (params.static_sampling) {
            coords = Tensor::from({p_pts, 2}, params.static_coords);
        } else {
            coords = compute_sample_coords(ref, generate_offsets(f_s_query, lp, p_pts));
        }
        LayerTrace tr;
        tr.layer = static_cast<int>(i) + 1;
        tr.ref_x = ref(0);
        tr.ref_y = ref(1);
        tr.coords = coords.values();
        out.trace.push_back(std::move(tr));
        Tensor f_s = bilinear_sample(f_v, coords, g);
        Tensor p_s = bilinear_sample(p_v, coords, g);
        f_l = text_guided_decode(f_s, p_s, f_l, p_l, lp, dropout_rate, rng, training);
        ref = update_reference_point(f_l, mask, lp);
        f_s_prev = f_s_query;
    }
    out.f_d = f_l;
    out.ref = ref;
    return out;
}

}  // namespace dmdetr
