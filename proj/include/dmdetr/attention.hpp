#pragma once

#include <cmath>
#include <vector>

#include "dmdetr/ops.hpp"
#include "dmdetr/rng.hpp"
#include "dmdetr/tensor.hpp"

namespace dmdetr {

// Fan-in uniform init for a weight matrix, zero for biases.
inline Tensor init_weight(int fan_in, int fan_out, SeededRng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_in, fan_out}, true);
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
    return w;
}

inline Tensor init_bias(int n) { return Tensor::zeros({n}, true); }

// Scaled dot-product attention. Masked keys receive exactly zero weight, so
// appending masked rows to K/V cannot perturb the output at the bit level.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const Mask& key_mask = {}) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw ShapeError("attention: operands must be 2-d");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("attention: query width " + std::to_string(q.dim(1)) +
                         " vs key width " + std::to_string(k.dim(1)));
    if (k.dim(0) != v.dim(0))
        throw ShapeError("attention: key count " + std::to_string(k.dim(0)) + " vs value count " +
                         std::to_string(v.dim(0)));
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(k.dim(1)));
    Tensor scores = scale(matmul(q, k, false, true), inv_sqrt_dk);
    Tensor weights = key_mask.empty() ? softmax(scores, 1) : masked_softmax_rows(scores, key_mask);
    return matmul(weights, v);
}

struct MhaParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;
};

inline MhaParams init_mha(int c, int heads, SeededRng& rng) {
    if (c % heads != 0)
        throw ConfigError("mha: width " + std::to_string(c) + " not divisible by " +
                          std::to_string(heads) + " heads");
    MhaParams p;
    p.heads = heads;
    p.wq = init_weight(c, c, rng);
    p.bq = init_bias(c);
    p.wk = init_weight(c, c, rng);
    p.bk = init_bias(c);
    p.wv = init_weight(c, c, rng);
    p.bv = init_bias(c);
    p.wo = init_weight(c, c, rng);
    p.bo = init_bias(c);
    return p;
}

// Multi-head attention: project, run attention per head, concatenate, project.
inline Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const MhaParams& p,
                  const Mask& key_mask = {}) {
    int c = p.wq.dim(0);
    if (q.dim(1) != c || k.dim(1) != c || v.dim(1) != c)
        throw ShapeError("mha: operand width does not match projection width " +
                         std::to_string(c));
    Tensor qp = linear(q, p.wq, p.bq);
    Tensor kp = linear(k, p.wk, p.bk);
    Tensor vp = linear(v, p.wv, p.bv);
    int h = p.heads, dk = c / h;
    std::vector<int> sizes(h, dk);
    if (h == 1) {
        Tensor out = attention(qp, kp, vp, key_mask);
        return linear(out, p.wo, p.bo);
    }
    std::vector<Tensor> qh = split(qp, 1, sizes);
    std::vector<Tensor> kh = split(kp, 1, sizes);
    std::vector<Tensor> vh = split(vp, 1, sizes);
    std::vector<Tensor> heads;
    heads.reserve(h);
    for (int i = 0; i < h; ++i) heads.push_back(attention(qh[i], kh[i], vh[i], key_mask));
    return linear(concat(heads, 1), p.wo, p.bo);
}

struct EncoderLayerParams {
    MhaParams mha;
    Tensor w1, b1, w2, b2;           // FFN: C -> C_ffn -> C with ReLU
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

inline EncoderLayerParams init_encoder_layer(int c, int c_ffn, int heads, SeededRng& rng) {
    EncoderLayerParams p;
    p.mha = init_mha(c, heads, rng);
    p.w1 = init_weight(c, c_ffn, rng);
    p.b1 = init_bias(c_ffn);
    p.w2 = init_weight(c_ffn, c, rng);
    p.b2 = init_bias(c);
    p.ln1_g = Tensor::full({c}, 1.0, true);
    p.ln1_b = init_bias(c);
    p.ln2_g = Tensor::full({c}, 1.0, true);
    p.ln2_b = init_bias(c);
    return p;
}

// Post-norm encoder layer. The positional embedding enters queries and keys
// only; values and the residual use the un-positioned input.
inline Tensor encoder_layer(const Tensor& f, const Tensor& pos, const EncoderLayerParams& p,
                            const Mask& key_mask = {}, double dropout_rate = 0.0,
                            SeededRng* rng = nullptr, bool training = false) {
    check_same_shape(f, pos, "encoder_layer: F vs P");
    Tensor qk = add(f, pos);
    Tensor attn = mha(qk, qk, f, p.mha, key_mask);
    attn = dropout(attn, dropout_rate, rng, training);
    Tensor f1 = layer_norm(add(f, attn), p.ln1_g, p.ln1_b);
    Tensor h = dropout(relu(linear(f1, p.w1, p.b1)), dropout_rate, rng, training);
    Tensor ffn = linear(h, p.w2, p.b2);
    return layer_norm(add(f1, ffn), p.ln2_g, p.ln2_b);
}

}  // namespace dmdetr
