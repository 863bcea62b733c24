#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "dmdetr/attention.hpp"
#include "dmdetr/ops.hpp"

namespace dmdetr {

// Normalized center/size box, all components as fractions of the image side.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
};

struct Corners {
    double x1, y1, x2, y2;
};

inline Corners corners(const Box& b) {
    return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline double box_iou(const Box& a, const Box& b) {
    Corners ca = corners(a), cb = corners(b);
    double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    if (uni <= 0.0) return 0.0;  // both boxes degenerate
    return inter / uni;
}

// GIoU = IoU - (hull - union)/hull on corner form. A zero-area hull (both
// boxes collapsed to the same point) is defined as 0.
inline double box_giou(const Box& a, const Box& b) {
    Corners ca = corners(a), cb = corners(b);
    double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    double hw = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
    double hh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
    double hull = hw * hh;
    if (hull <= 0.0) return 0.0;
    double iou = uni > 0.0 ? inter / uni : 0.0;
    return iou - (hull - uni) / hull;
}

struct PredictionHeadParams {
    Tensor w1, b1, w2, b2, w3, b3;  // C -> C -> C -> 4 with ReLU between
};

inline PredictionHeadParams init_prediction_head(int c, SeededRng& rng) {
    PredictionHeadParams p;
    p.w1 = init_weight(c, c, rng);
    p.b1 = init_bias(c);
    p.w2 = init_weight(c, c, rng);
    p.b2 = init_bias(c);
    p.w3 = init_weight(c, 4, rng);
    p.b3 = init_bias(4);
    return p;
}

inline Tensor pool_reg(const Tensor& f_d, const Mask& mask) { return masked_mean(f_d, mask); }

// Sigmoid keeps every component in (0,1) so GIoU stays well defined.
inline Tensor predict_box(const Tensor& f_reg, const PredictionHeadParams& p) {
    Tensor x = reshape(f_reg, {1, f_reg.dim(0)});
    x = relu(linear(x, p.w1, p.b1));
    x = relu(linear(x, p.w2, p.b2));
    return reshape(sigmoid(linear(x, p.w3, p.b3)), {4});
}

inline Box to_box(const Tensor& t) {
    if (t.size() != 4) throw ShapeError("to_box: expected 4 values, got " + shape_str(t.shape()));
    return {t(0), t(1), t(2), t(3)};
}

// Differentiable GIoU on a predicted (cx, cy, w, h) tensor against a fixed
// ground-truth box. Built from elementwise ops so gradients flow to all four
// components.
inline Tensor giou_t(const Tensor& pred, const Box& gt) {
    auto parts = split(pred, 0, {1, 1, 1, 1});
    Tensor cx = parts[0], cy = parts[1], w = parts[2], h = parts[3];
    Tensor x1 = add(cx, scale(w, -0.5)), x2 = add(cx, scale(w, 0.5));
    Tensor y1 = add(cy, scale(h, -0.5)), y2 = add(cy, scale(h, 0.5));
    Corners g = corners(gt);
    Tensor gx1 = Tensor::scalar(g.x1), gx2 = Tensor::scalar(g.x2);
    Tensor gy1 = Tensor::scalar(g.y1), gy2 = Tensor::scalar(g.y2);
    Tensor zero = Tensor::scalar(0.0);
    Tensor iw = emax(zero, sub(emin(x2, gx2), emax(x1, gx1)));
    Tensor ih = emax(zero, sub(emin(y2, gy2), emax(y1, gy1)));
    Tensor inter = mul(iw, ih);
    Tensor uni = sub(add(mul(w, h), Tensor::scalar(gt.w * gt.h)), inter);
    Tensor hull = mul(sub(emax(x2, gx2), emin(x1, gx1)), sub(emax(y2, gy2), emin(y1, gy1)));
    Tensor iou = divide(inter, uni);
    return sub(iou, divide(sub(hull, uni), hull));
}

// L = sum_i |b_i - b̂_i| + (1 - GIoU); no coefficients.
struct LossParts {
    Tensor total, l1, giou_loss;
};

inline LossParts grounding_loss(const Tensor& pred, const Box& gt) {
    Tensor gt_t = Tensor::from({4}, {gt.cx, gt.cy, gt.w, gt.h});
    LossParts out;
    out.l1 = sum(abs_t(sub(pred, gt_t)));
    out.giou_loss = sub(Tensor::scalar(1.0), giou_t(pred, gt));
    out.total = add(out.l1, out.giou_loss);
    return out;
}

// Fraction with IoU strictly above 0.5.
inline double acc_at_50(const std::vector<Box>& predictions, const std::vector<Box>& truths) {
    if (predictions.size() != truths.size())
        throw ContractError("acc_at_50: " + std::to_string(predictions.size()) +
                            " predictions vs " + std::to_string(truths.size()) + " truths");
    if (predictions.empty()) throw ContractError("acc_at_50: empty prediction list");
    int hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        hits += box_iou(predictions[i], truths[i]) > 0.5;
    return static_cast<double>(hits) / predictions.size();
}

}  // namespace dmdetr
