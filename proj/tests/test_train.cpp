#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "catch2/catch_amalgamated.hpp"
#include "dmdetr/train.hpp"

using namespace dmdetr;

namespace {

// Tiny model and run so a full training loop finishes in well under a second.
RunConfig tiny_run() {
    RunConfig cfg;
    cfg.model.side = 8;
    cfg.model.patch = 4;
    cfg.model.c = 8;
    cfg.model.c_v = 8;
    cfg.model.c_l = 8;
    cfg.model.heads = 2;
    cfg.model.c_ffn = 16;
    cfg.model.m = 1;
    cfg.model.n = 2;
    cfg.model.p_pts = 4;
    cfg.model.n_l = 8;
    cfg.model.dropout = 0.1;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.seed = 5;
    cfg.counts.train = 8;
    cfg.counts.val = 4;
    cfg.counts.test = 4;
    cfg.data.side = cfg.model.side;
    cfg.data.n_l = cfg.model.n_l;
    return cfg;
}

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& p) : path(p) { std::filesystem::create_directories(p); }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("unknown config keys are rejected by name") {
    nlohmann::json j = {{"model", {{"side", 32}, {"paches", 4}}}};
    try {
        run_config_from_json(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("paches") != std::string::npos);
    }
    nlohmann::json top = {{"training", nlohmann::json::object()}};
    REQUIRE_THROWS_AS(run_config_from_json(top), ConfigError);
}

TEST_CASE("config values land in the right fields and data mirrors the model") {
    nlohmann::json j = {{"model", {{"side", 16}, {"patch", 4}, {"n_l", 6}}},
                        {"train", {{"epochs", 3}, {"warmup_steps", 7}}},
                        {"data", {{"train_count", 12}, {"min_size", 0.2}}}};
    RunConfig cfg = run_config_from_json(j);
    REQUIRE(cfg.model.side == 16);
    REQUIRE(cfg.train.epochs == 3);
    REQUIRE(cfg.train.warmup_steps == 7);
    REQUIRE(cfg.counts.train == 12);
    REQUIRE(cfg.data.min_size == 0.2);
    REQUIRE(cfg.data.side == 16);
    REQUIRE(cfg.data.n_l == 6);
    REQUIRE_THROWS_AS(load_run_config("no_such_config.json"), ConfigError);
}

TEST_CASE("checkpoints round trip every parameter and the config") {
    RunConfig cfg = tiny_run();
    Model m = init_model(cfg.model, 11);
    snap_to_f32(m);
    TempDir dir("test_train_ckpt");
    std::string path = dir.path + "/m.ckpt";
    save_checkpoint(m, path);
    Model back = load_checkpoint(path);
    NamedParams a = all_parameters(m), b = all_parameters(back);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        REQUIRE(a[i].second.values() == b[i].second.values());
    }
    REQUIRE(back.cfg.side == m.cfg.side);
    REQUIRE(back.dec.static_coords == m.dec.static_coords);
}

TEST_CASE("corrupted checkpoints are detected") {
    RunConfig cfg = tiny_run();
    Model m = init_model(cfg.model, 11);
    TempDir dir("test_train_corrupt");
    std::string path = dir.path + "/m.ckpt";
    save_checkpoint(m, path);
    REQUIRE_THROWS_AS(load_checkpoint(dir.path + "/missing.ckpt"), CheckpointError);

    // flip one payload byte: checksum must catch it
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char c;
        f.seekg(200);
        f.get(c);
        f.seekp(200);
        f.put(static_cast<char>(c ^ 0x40));
    }
    REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);

    // truncate
    save_checkpoint(m, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);

    // wrong magic
    std::ofstream(path, std::ios::binary) << "NOPE garbage";
    REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("two identical runs produce identical metrics and checkpoints") {
    RunConfig cfg = tiny_run();
    TempDir d1("test_train_run1"), d2("test_train_run2");
    TrainResult r1 = train(cfg, d1.path);
    TrainResult r2 = train(cfg, d2.path);
    REQUIRE(r1.metrics.size() == 2);
    REQUIRE(r1.metrics == r2.metrics);
    for (const char* name : {"/metrics.jsonl", "/best.ckpt", "/last.ckpt"}) {
        std::ifstream a(d1.path + name, std::ios::binary), b(d2.path + name, std::ios::binary);
        REQUIRE(a.good());
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        REQUIRE(sa == sb);
    }
    for (const auto& line : r1.metrics) {
        for (const char* key : {"epoch", "train_loss", "l1", "giou_loss", "val_acc50",
                                "val_mean_iou", "lr"})
            REQUIRE(line.contains(key));
    }
}

TEST_CASE("the saved model evaluates exactly like the in-memory one") {
    RunConfig cfg = tiny_run();
    TempDir dir("test_train_eval");
    TrainResult r = train(cfg, dir.path);
    std::vector<Example> test_set =
        generate(split_seed(cfg.train.seed, "test"), cfg.counts.test, cfg.data);
    EvalResult mem = evaluate(r.model, test_set);
    Model loaded = load_checkpoint(dir.path + "/last.ckpt");
    EvalResult disk = evaluate(loaded, test_set);
    REQUIRE(mem.acc50 == disk.acc50);
    REQUIRE(mem.mean_iou == disk.mean_iou);
    REQUIRE(mem.count == cfg.counts.test);
}

TEST_CASE("evaluation is invariant to the worker count") {
    RunConfig cfg = tiny_run();
    Model m = init_model(cfg.model, 3);
    std::vector<Example> set = generate(split_seed(3, "val"), 6, cfg.data);
    setenv("DMDT_THREADS", "1", 1);
    EvalResult one = evaluate(m, set);
    setenv("DMDT_THREADS", "3", 1);
    EvalResult three = evaluate(m, set);
    unsetenv("DMDT_THREADS");
    REQUIRE(one.acc50 == three.acc50);
    REQUIRE(one.mean_iou == three.mean_iou);
    REQUIRE(worker_count() == 1);  // unset falls back to a single worker
}

TEST_CASE("the forward pass records one trace entry per decoder layer") {
    RunConfig cfg = tiny_run();
    Model m = init_model(cfg.model, 3);
    Example ex = generate(split_seed(3, "val"), 1, cfg.data)[0];
    NoGrad ng;
    ModelOutput out = model_forward(m, ex);
    REQUIRE(out.trace.size() == static_cast<std::size_t>(cfg.model.n));
    for (std::size_t i = 0; i < out.trace.size(); ++i) {
        REQUIRE(out.trace[i].layer == static_cast<int>(i) + 1);
        REQUIRE(out.trace[i].coords.size() == static_cast<std::size_t>(2 * cfg.model.p_pts));
    }
    Box b = to_box(out.box);
    REQUIRE(b.w > 0.0);
    REQUIRE(b.w < 1.0);
}

TEST_CASE("static sampling and init modes flow through training") {
    RunConfig cfg = tiny_run();
    cfg.model.init_sampling = "uniform";
    TempDir d1("test_train_uniform");
    TrainResult r = train(cfg, d1.path);  // must not touch frozen parameters
    REQUIRE(r.metrics.size() == 2);
    cfg.model.init_sampling = "learnable";
    cfg.model.static_sampling = "grid";
    TempDir d2("test_train_static");
    TrainResult s = train(cfg, d2.path);
    REQUIRE(s.metrics.size() == 2);
    // static grid coordinates survive the checkpoint round trip
    Model loaded = load_checkpoint(d2.path + "/last.ckpt");
    REQUIRE(loaded.dec.static_sampling);
    REQUIRE(loaded.dec.static_coords == s.model.dec.static_coords);
}
