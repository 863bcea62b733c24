#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dmdetr/data.hpp"
#include "dmdetr/decoder.hpp"
#include "dmdetr/encoders.hpp"
#include "dmdetr/head.hpp"
#include "dmdetr/mm_encoder.hpp"

namespace dmdetr {

struct ModelConfig {
    int side = 64;
    int patch = 4;
    int c = 64;
    int c_v = 64;  // stand-in backbone widths before the shared projection
    int c_l = 64;
    int heads = 4;
    int c_ffn = 256;
    int m = 3;
    int n = 3;
    int p_pts = 16;
    int vocab = vocab::size;
    int n_l = 8;
    double dropout = 0.1;
    std::string init_sampling = "learnable";  // grid | uniform | learnable
    std::string static_sampling;              // "" | grid | uniform-fixed
    bool encoder_context = true;              // per-modality context layer

    int grid() const { return side / patch; }
    int n_v() const { return grid() * grid(); }
};

struct Model {
    ModelConfig cfg;
    VisualEncoderParams vis;
    TextEncoderParams txt;
    MultimodalEncoderParams enc;
    DecoderParams dec;
    PredictionHeadParams head;
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    SeededRng rng(seed);
    Model m;
    m.cfg = cfg;
    m.vis = init_visual_encoder(cfg.side, cfg.patch, cfg.c_v, cfg.c, cfg.heads,
                                cfg.encoder_context, rng);
    m.txt = init_text_encoder(cfg.vocab, cfg.n_l, cfg.c_l, cfg.c, cfg.heads,
                              cfg.encoder_context, rng);
    m.enc = init_mm_encoder(cfg.m, cfg.n_v(), cfg.n_l, cfg.grid(), cfg.c, cfg.c_ffn, cfg.heads,
                            rng);
    m.dec = init_decoder(cfg.n, cfg.c, cfg.c_ffn, cfg.heads, cfg.p_pts, cfg.grid(),
                         parse_init_sampling(cfg.init_sampling), rng);
    if (!cfg.static_sampling.empty()) {
        m.dec.static_sampling = true;
        SeededRng srng = rng.fork(0x57A71Cull);
        m.dec.static_coords = static_sampling_coords(cfg.static_sampling, cfg.p_pts, srng);
    }
    m.head = init_prediction_head(cfg.c, rng);
    return m;
}

struct ModelOutput {
    Tensor box;  // predicted (cx, cy, w, h), shape {4}
    std::vector<LayerTrace> trace;
};

inline ModelOutput model_forward(const Model& m, const std::vector<double>& raster,
                                 const std::vector<int>& tokens, const Mask& mask,
                                 SeededRng* rng = nullptr, bool training = false) {
    double dr = training ? m.cfg.dropout : 0.0;
    FeatureMap fm = encode_image(raster, m.vis);
    TokenSequence seq = encode_text(tokens, mask, m.txt);
    auto [f, key_mask] = concat_sequence(fm.features, seq.embedded, mask);
    Tensor f_e = mm_encode(f, key_mask, m.enc, dr, rng, training);
    MmSplit s = mm_split(f_e, m.enc);
    DecoderOutput dec = decoder_forward(s.f_v, s.p_v, s.f_l, s.p_l, mask, m.dec, dr, rng,
                                        training);
    ModelOutput out;
    out.box = predict_box(pool_reg(dec.f_d, mask), m.head);
    out.trace = std::move(dec.trace);
    return out;
}

inline ModelOutput model_forward(const Model& m, const Example& ex, SeededRng* rng = nullptr,
                                 bool training = false) {
    return model_forward(m, ex.raster, ex.expr.tokens, ex.expr.mask, rng, training);
}

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {
inline void collect_mha(NamedParams& out, const std::string& p, const MhaParams& m) {
    out.emplace_back(p + ".wq", m.wq);
    out.emplace_back(p + ".bq", m.bq);
    out.emplace_back(p + ".wk", m.wk);
    out.emplace_back(p + ".bk", m.bk);
    out.emplace_back(p + ".wv", m.wv);
    out.emplace_back(p + ".bv", m.bv);
    out.emplace_back(p + ".wo", m.wo);
    out.emplace_back(p + ".bo", m.bo);
}

inline void collect_enc_layer(NamedParams& out, const std::string& p,
                              const EncoderLayerParams& e) {
    collect_mha(out, p + ".mha", e.mha);
    out.emplace_back(p + ".w1", e.w1);
    out.emplace_back(p + ".b1", e.b1);
    out.emplace_back(p + ".w2", e.w2);
    out.emplace_back(p + ".b2", e.b2);
    out.emplace_back(p + ".ln1_g", e.ln1_g);
    out.emplace_back(p + ".ln1_b", e.ln1_b);
    out.emplace_back(p + ".ln2_g", e.ln2_g);
    out.emplace_back(p + ".ln2_b", e.ln2_b);
}
}  // namespace detail

// Stand-in backbone parameters: the paper trains these with a smaller lr.
inline NamedParams encoder_parameters(const Model& m) {
    NamedParams out;
    out.emplace_back("vis.patch_w", m.vis.patch_w);
    out.emplace_back("vis.patch_b", m.vis.patch_b);
    if (m.vis.context) {
        detail::collect_enc_layer(out, "vis.context", *m.vis.context);
        out.emplace_back("vis.ctx_pos", m.vis.ctx_pos);
    }
    out.emplace_back("txt.table", m.txt.table);
    if (m.txt.context) {
        detail::collect_enc_layer(out, "txt.context", *m.txt.context);
        out.emplace_back("txt.ctx_pos", m.txt.ctx_pos);
    }
    return out;
}

inline NamedParams main_parameters(const Model& m) {
    NamedParams out;
    out.emplace_back("vis.proj_w", m.vis.proj_w);
    out.emplace_back("vis.proj_b", m.vis.proj_b);
    out.emplace_back("txt.proj_w", m.txt.proj_w);
    out.emplace_back("txt.proj_b", m.txt.proj_b);
    for (std::size_t i = 0; i < m.enc.layers.size(); ++i)
        detail::collect_enc_layer(out, "enc." + std::to_string(i), m.enc.layers[i]);
    out.emplace_back("enc.p_pos", m.enc.p_pos);
    for (std::size_t i = 0; i < m.dec.layers.size(); ++i) {
        const DecoderLayerParams& d = m.dec.layers[i];
        std::string p = "dec." + std::to_string(i);
        out.emplace_back(p + ".qg_w1", d.qg_w1);
        out.emplace_back(p + ".qg_b1", d.qg_b1);
        out.emplace_back(p + ".qg_w2", d.qg_w2);
        out.emplace_back(p + ".qg_b2", d.qg_b2);
        out.emplace_back(p + ".off_w", d.off_w);
        out.emplace_back(p + ".off_b", d.off_b);
        detail::collect_enc_layer(out, p + ".inner", d.inner);
        detail::collect_mha(out, p + ".cross", d.cross);
        out.emplace_back(p + ".ffn_w1", d.ffn_w1);
        out.emplace_back(p + ".ffn_b1", d.ffn_b1);
        out.emplace_back(p + ".ffn_w2", d.ffn_w2);
        out.emplace_back(p + ".ffn_b2", d.ffn_b2);
        out.emplace_back(p + ".ln1_g", d.ln1_g);
        out.emplace_back(p + ".ln1_b", d.ln1_b);
        out.emplace_back(p + ".ln2_g", d.ln2_g);
        out.emplace_back(p + ".ln2_b", d.ln2_b);
        out.emplace_back(p + ".ref_w1", d.ref_w1);
        out.emplace_back(p + ".ref_b1", d.ref_b1);
        out.emplace_back(p + ".ref_w2", d.ref_w2);
        out.emplace_back(p + ".ref_b2", d.ref_b2);
    }
    out.emplace_back("dec.f_s0", m.dec.f_s0);
    out.emplace_back("head.w1", m.head.w1);
    out.emplace_back("head.b1", m.head.b1);
    out.emplace_back("head.w2", m.head.w2);
    out.emplace_back("head.b2", m.head.b2);
    out.emplace_back("head.w3", m.head.w3);
    out.emplace_back("head.b3", m.head.b3);
    return out;
}

inline NamedParams all_parameters(const Model& m) {
    NamedParams out = encoder_parameters(m);
    NamedParams rest = main_parameters(m);
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

// Rounds every parameter through f32. Running this before saving makes the
// in-memory model and a reloaded checkpoint evaluate bit-identically.
inline void snap_to_f32(const Model& m) {
    for (auto& [name, t] : all_parameters(m))
        for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace dmdetr
