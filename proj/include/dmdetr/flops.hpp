#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmdetr/tensor.hpp"
#include "json.hpp"

namespace dmdetr {

// Analytic operation counts. Only matmul-shaped work is counted; softmax,
// layer norm, residuals and bias adds are lower-order and excluded unless
// include_lower_order is set.
struct ArchConfig {
    int c = 256;
    int heads = 8;
    int c_ffn = 2048;
    int n_v = 400;
    int n_l = 40;
    int m = 3;       // encoder layers
    int n = 3;       // decoder layers
    int p_pts = 36;
    bool include_reg_token = false;
    bool use_sampling = true;      // false: decoder attends over all N_v tokens
    bool use_text_guided = true;   // false: sampling machinery only, no decoding
    double flops_per_mac = 1.0;    // set to 2 to count multiply and add separately
    bool include_lower_order = false;

    void validate() const {
        if (c <= 0 || heads <= 0 || c_ffn <= 0 || n_v <= 0 || n_l <= 0 || m < 0 || n < 0 ||
            p_pts <= 0)
            throw ConfigError("flops: all extents must be positive");
        if (p_pts > 4 * n_v)
            throw ConfigError("flops: P_pts " + std::to_string(p_pts) + " exceeds 4*N_v");
    }
};

struct FlopsReport {
    std::vector<std::pair<std::string, double>> parts;  // FLOPs per component
    double total = 0.0;

    void add(const std::string& name, double flops) {
        if (flops == 0.0) return;
        parts.emplace_back(name, flops);
        total += flops;
    }

    nlohmann::json to_json() const {
        nlohmann::json breakdown = nlohmann::json::object();
        for (const auto& [name, v] : parts) breakdown[name] = v;
        return {{"breakdown", breakdown},
                {"total_flops", total},
                {"total_gflops", total / 1e9}};
    }

    std::string to_table() const {
        std::size_t width = 12;
        for (const auto& [name, v] : parts) width = std::max(width, name.size());
        std::ostringstream os;
        os << std::fixed << std::setprecision(4);
        for (const auto& [name, v] : parts)
            os << std::left << std::setw(static_cast<int>(width) + 2) << name << std::right
               << std::setw(10) << v / 1e9 << " GFLOPS\n";
        os << std::left << std::setw(static_cast<int>(width) + 2) << "total" << std::right
           << std::setw(10) << total / 1e9 << " GFLOPS\n";
        return os.str();
    }
};

// Self-attention encoder layer over n tokens:
// projections 4nC^2, scores + context 2n^2C, FFN 2nC*C_ffn (MACs).
inline double encoder_layer_flops(int n_tokens, const ArchConfig& cfg) {
    double nd = n_tokens, c = cfg.c, cf = cfg.c_ffn;
    double macs = 4.0 * nd * c * c + 2.0 * nd * nd * c + 2.0 * nd * c * cf;
    if (cfg.include_lower_order) macs += nd * c * 2.0 + nd * nd;  // LN + softmax, rough
    return macs * cfg.flops_per_mac;
}

// Sampling machinery of one decoder layer: query-generator MLP, offset
// linear, and the 4-neighbor gathers for features and positional embeddings.
// No term depends on N_v.
inline double sampling_flops(const ArchConfig& cfg) {
    double c = cfg.c, p = cfg.p_pts;
    double macs = (2.0 * c * c + c * c)  // MLP 2C->C->C
                  + c * 2.0 * p          // offset linear
                  + 2.0 * 4.0 * p * c;   // bilinear gathers, two maps
    return macs * cfg.flops_per_mac;
}

// Text-guided decoding over k key tokens: inner encoder layer over the keys,
// cross attention with N_l queries, FFN over N_l, reference FFN.
inline double text_guided_flops(int keys, const ArchConfig& cfg) {
    double c = cfg.c, cf = cfg.c_ffn, nl = cfg.n_l, k = keys;
    double cross = 2.0 * nl * c * c   // Q and output projections
                   + 2.0 * k * c * c  // K and V projections
                   + 2.0 * nl * k * c;  // scores + context
    double ffn = 2.0 * nl * c * cf;
    double ref = c * c + c * 2.0;
    return encoder_layer_flops(keys, cfg) + (cross + ffn + ref) * cfg.flops_per_mac;
}

inline double decoder_layer_flops(const ArchConfig& cfg) {
    double total = 0.0;
    if (cfg.use_sampling) {
        total += sampling_flops(cfg);
        if (cfg.use_text_guided) total += text_guided_flops(cfg.p_pts, cfg);
    } else {
        // static decoder: every visual token is a key
        total += text_guided_flops(cfg.n_v, cfg);
    }
    return total;
}

inline FlopsReport model_flops(const ArchConfig& cfg) {
    cfg.validate();
    int n_tokens = cfg.n_v + cfg.n_l + (cfg.include_reg_token ? 1 : 0);
    FlopsReport r;
    r.add("encoder (" + std::to_string(cfg.m) + " layers, " + std::to_string(n_tokens) +
              " tokens)",
          cfg.m * encoder_layer_flops(n_tokens, cfg));
    r.add("decoder (" + std::to_string(cfg.n) + " layers)", cfg.n * decoder_layer_flops(cfg));
    return r;
}

inline ArchConfig flops_preset(const std::string& name) {
    ArchConfig cfg;  // paper dimensions are the defaults
    if (name == "paper-transvg") {
        cfg.m = 6;
        cfg.n = 0;
        cfg.include_reg_token = true;
    } else if (name == "paper-dynamic") {
        // defaults: M=3, N=3, 36 points
    } else if (name == "paper-static-decoder") {
        cfg.use_sampling = false;
    } else if (name == "paper-sampling-only") {
        cfg.use_text_guided = false;
    } else {
        throw ConfigError("unknown flops preset '" + name +
                          "' (paper-transvg|paper-dynamic|paper-static-decoder|"
                          "paper-sampling-only)");
    }
    return cfg;
}

}  // namespace dmdetr
