#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include "dmdetr/data.hpp"
#include "dmdetr/model.hpp"
#include "json.hpp"

namespace dmdetr {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double lr_main = 1e-4;
    double lr_encoders = 1e-4;  // stand-in backbones share the main lr by default
    double weight_decay = 1e-4;
    int lr_drop_epoch = 20;
    double lr_drop_factor = 10.0;
    int warmup_steps = 0;  // linear lr ramp over the first optimizer steps
    std::uint64_t seed = 42;
};

struct SplitCounts {
    int train = 8000;
    int val = 1000;
    int test = 1000;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    SplitCounts counts;
};

namespace detail {
// Fail-closed: any key outside the schema is an error naming the key.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& section) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + section);
    }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"model", "train", "data"}, "top level");
    RunConfig cfg;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m,
                           {"side", "patch", "c", "c_v", "c_l", "heads", "c_ffn", "m", "n",
                            "p_pts", "vocab", "n_l", "dropout", "init_sampling",
                            "static_sampling", "encoder_context"},
                           "model");
        detail::get_if(m, "side", cfg.model.side);
        detail::get_if(m, "patch", cfg.model.patch);
        detail::get_if(m, "c", cfg.model.c);
        detail::get_if(m, "c_v", cfg.model.c_v);
        detail::get_if(m, "c_l", cfg.model.c_l);
        detail::get_if(m, "heads", cfg.model.heads);
        detail::get_if(m, "c_ffn", cfg.model.c_ffn);
        detail::get_if(m, "m", cfg.model.m);
        detail::get_if(m, "n", cfg.model.n);
        detail::get_if(m, "p_pts", cfg.model.p_pts);
        detail::get_if(m, "vocab", cfg.model.vocab);
        detail::get_if(m, "n_l", cfg.model.n_l);
        detail::get_if(m, "dropout", cfg.model.dropout);
        detail::get_if(m, "init_sampling", cfg.model.init_sampling);
        detail::get_if(m, "static_sampling", cfg.model.static_sampling);
        detail::get_if(m, "encoder_context", cfg.model.encoder_context);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t,
                           {"epochs", "batch_size", "lr_main", "lr_encoders", "weight_decay",
                            "lr_drop_epoch", "lr_drop_factor", "warmup_steps", "seed"},
                           "train");
        detail::get_if(t, "epochs", cfg.train.epochs);
        detail::get_if(t, "batch_size", cfg.train.batch_size);
        detail::get_if(t, "lr_main", cfg.train.lr_main);
        detail::get_if(t, "lr_encoders", cfg.train.lr_encoders);
        detail::get_if(t, "weight_decay", cfg.train.weight_decay);
        detail::get_if(t, "lr_drop_epoch", cfg.train.lr_drop_epoch);
        detail::get_if(t, "lr_drop_factor", cfg.train.lr_drop_factor);
        detail::get_if(t, "warmup_steps", cfg.train.warmup_steps);
        detail::get_if(t, "seed", cfg.train.seed);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d,
                           {"train_count", "val_count", "test_count", "min_objects",
                            "max_objects", "relation_prob", "min_size", "max_size", "min_center_dist"},
                           "data");
        detail::get_if(d, "train_count", cfg.counts.train);
        detail::get_if(d, "val_count", cfg.counts.val);
        detail::get_if(d, "test_count", cfg.counts.test);
        detail::get_if(d, "min_objects", cfg.data.min_objects);
        detail::get_if(d, "max_objects", cfg.data.max_objects);
        detail::get_if(d, "relation_prob", cfg.data.relation_prob);
        detail::get_if(d, "min_size", cfg.data.min_size);
        detail::get_if(d, "max_size", cfg.data.max_size);
        detail::get_if(d, "min_center_dist", cfg.data.min_center_dist);
    }
    // the data generator always mirrors the model's raster and padding sizes
    cfg.data.side = cfg.model.side;
    cfg.data.n_l = cfg.model.n_l;
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace dmdetr
