#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "dmdetr/checkpoint.hpp"
#include "dmdetr/config.hpp"
#include "dmdetr/model.hpp"
#include "dmdetr/optim.hpp"
#include "json.hpp"

namespace dmdetr {

inline int worker_count() {
    const char* env = std::getenv("DMDT_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

struct EvalResult {
    double acc50 = 0.0;
    double mean_iou = 0.0;
    int count = 0;
};

// Read-only parallel evaluation; DMDT_THREADS caps the worker count.
inline EvalResult evaluate(const Model& m, const std::vector<Example>& examples) {
    if (examples.empty()) throw ContractError("evaluate: empty example list");
    std::vector<Box> preds(examples.size());
    int threads = std::min<int>(worker_count(), static_cast<int>(examples.size()));
    auto run = [&](int worker) {
        NoGrad ng;
        for (std::size_t i = worker; i < examples.size(); i += threads)
            preds[i] = to_box(model_forward(m, examples[i]).box);
    };
    if (threads == 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; ++w) pool.emplace_back(run, w);
        for (auto& t : pool) t.join();
    }
    EvalResult r;
    r.count = static_cast<int>(examples.size());
    std::vector<Box> truths;
    truths.reserve(examples.size());
    for (const Example& ex : examples) truths.push_back(ex.box);
    for (std::size_t i = 0; i < examples.size(); ++i) r.mean_iou += box_iou(preds[i], truths[i]);
    r.mean_iou /= r.count;
    r.acc50 = acc_at_50(preds, truths);
    return r;
}

struct TrainResult {
    Model model;
    std::vector<nlohmann::json> metrics;
    double best_val_acc = 0.0;
};

// Single-worker training loop; every random draw comes from streams derived
// from the run seed, so reruns are bit-identical.
inline TrainResult train(const RunConfig& cfg, const std::string& out_dir,
                         std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream metrics_out(out_dir + "/metrics.jsonl");
    if (!metrics_out) throw ContractError("train: cannot write to " + out_dir);

    std::vector<Example> train_set =
        generate(split_seed(cfg.train.seed, "train"), cfg.counts.train, cfg.data);
    std::vector<Example> val_set =
        generate(split_seed(cfg.train.seed, "val"), cfg.counts.val, cfg.data);

    TrainResult result;
    result.model = init_model(cfg.model, cfg.train.seed);
    Model& model = result.model;

    // Skip frozen tensors and parameters no forward pass can reach: the
    // first layer's query-generator MLP (the initial query bypasses it) and
    // all offset generators under static sampling.
    auto trainable = [&model](const NamedParams& named) {
        std::vector<Tensor> out;
        for (const auto& [name, t] : named) {
            if (!t.requires_grad()) continue;
            if (name.rfind("dec.0.qg_", 0) == 0) continue;
            // the last reference update feeds nothing downstream of the loss
            std::string last_ref = "dec." + std::to_string(model.cfg.n - 1) + ".ref_";
            if (name.rfind(last_ref, 0) == 0) continue;
            // static sampling kills the query/offset/reference pathway
            if (model.dec.static_sampling &&
                (name.find(".off_") != std::string::npos ||
                 name.find(".qg_") != std::string::npos ||
                 name.find(".ref_") != std::string::npos || name == "dec.f_s0"))
                continue;
            out.push_back(t);
        }
        return out;
    };
    AdamW opt({{trainable(encoder_parameters(model)), cfg.train.lr_encoders},
               {trainable(main_parameters(model)), cfg.train.lr_main}},
              0.9, 0.999, 1e-8, cfg.train.weight_decay);

    SeededRng run_rng(cfg.train.seed);
    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    // Linear warmup over the first steps, then flat until the drop epoch.
    auto lr_factor = [&cfg](long long step, int epoch) {
        double f = epoch > cfg.train.lr_drop_epoch ? 1.0 / cfg.train.lr_drop_factor : 1.0;
        if (cfg.train.warmup_steps > 0 && step < cfg.train.warmup_steps)
            f *= static_cast<double>(step + 1) / cfg.train.warmup_steps;
        return f;
    };

    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        double lr_now = cfg.train.lr_main * lr_factor(opt.step_count(), epoch);
        // Fisher-Yates with an epoch-specific stream
        SeededRng shuffle_rng = run_rng.fork(1000u + static_cast<std::uint64_t>(epoch));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

        double loss_sum = 0, l1_sum = 0, giou_sum = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.train.batch_size)) {
            std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.train.batch_size));
            double inv = 1.0 / static_cast<double>(stop - start);
            opt.zero_grad();
            for (std::size_t k = start; k < stop; ++k) {
                const Example& ex = train_set[static_cast<std::size_t>(order[k])];
                SeededRng drop_rng = run_rng.fork(
                    (static_cast<std::uint64_t>(epoch) << 32) ^
                    static_cast<std::uint64_t>(order[k]));
                ModelOutput out = model_forward(model, ex, &drop_rng, true);
                LossParts loss = grounding_loss(out.box, ex.box);
                backward(scale(loss.total, inv));
                loss_sum += loss.total.item();
                l1_sum += loss.l1.item();
                giou_sum += loss.giou_loss.item();
                ++seen;
            }
            double f = lr_factor(opt.step_count(), epoch);
            opt.set_lr(0, cfg.train.lr_encoders * f);
            opt.set_lr(1, cfg.train.lr_main * f);
            opt.step();
        }
        EvalResult val = evaluate(model, val_set);
        nlohmann::json line = {{"epoch", epoch},
                               {"train_loss", loss_sum / seen},
                               {"l1", l1_sum / seen},
                               {"giou_loss", giou_sum / seen},
                               {"val_acc50", val.acc50},
                               {"val_mean_iou", val.mean_iou},
                               {"lr", lr_now}};
        metrics_out << line.dump() << "\n";
        metrics_out.flush();
        if (log) (*log) << line.dump() << std::endl;
        result.metrics.push_back(line);
        if (val.acc50 >= result.best_val_acc) {
            result.best_val_acc = val.acc50;
            save_checkpoint(model, out_dir + "/best.ckpt");
        }
    }
    // f32 rounding before the final save: evaluating the in-memory model and
    // the reloaded checkpoint then agree bit-for-bit.
    snap_to_f32(model);
    save_checkpoint(model, out_dir + "/last.ckpt");
    return result;
}

}  // namespace dmdetr
