#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmdetr/checkpoint.hpp"
#include "dmdetr/config.hpp"
#include "dmdetr/flops.hpp"
#include "dmdetr/model.hpp"
#include "dmdetr/train.hpp"
#include "json.hpp"

namespace {

dmdetr::RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return dmdetr::RunConfig{};
    return dmdetr::load_run_config(path);
}

std::vector<dmdetr::Example> load_split(const dmdetr::RunConfig& cfg, const std::string& split) {
    int count = 0;
    if (split == "train")
        count = cfg.counts.train;
    else if (split == "val")
        count = cfg.counts.val;
    else if (split == "test")
        count = cfg.counts.test;
    else
        throw dmdetr::ConfigError("unknown split '" + split + "' (train|val|test)");
    return dmdetr::generate(dmdetr::split_seed(cfg.train.seed, split), count, cfg.data);
}

dmdetr::ArchConfig arch_from_model(const dmdetr::ModelConfig& m) {
    dmdetr::ArchConfig a;
    a.c = m.c;
    a.heads = m.heads;
    a.c_ffn = m.c_ffn;
    a.n_v = m.n_v();
    a.n_l = m.n_l;
    a.m = m.m;
    a.n = m.n;
    a.p_pts = m.p_pts;
    a.use_sampling = m.static_sampling.empty();
    return a;
}

int cmd_train(const std::string& config_path, long long seed, const std::string& out_dir,
              const std::string& init_sampling) {
    dmdetr::RunConfig cfg = load_config_or_default(config_path);
    if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
    if (!init_sampling.empty()) cfg.model.init_sampling = init_sampling;
    dmdetr::TrainResult result = dmdetr::train(cfg, out_dir, &std::cout);
    std::cout << "best val acc50: " << result.best_val_acc << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::string& split) {
    dmdetr::Model model = dmdetr::load_checkpoint(checkpoint);
    dmdetr::RunConfig cfg = load_config_or_default(config_path);
    cfg.model = model.cfg;
    cfg.data.side = model.cfg.side;
    cfg.data.n_l = model.cfg.n_l;
    dmdetr::EvalResult r = dmdetr::evaluate(model, load_split(cfg, split));
    nlohmann::json out = {{"acc50", r.acc50}, {"count", r.count}, {"mean_iou", r.mean_iou}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_flops(const std::string& config_path, const std::string& preset, double mac_flops) {
    dmdetr::ArchConfig cfg;
    if (!preset.empty())
        cfg = dmdetr::flops_preset(preset);
    else
        cfg = arch_from_model(load_config_or_default(config_path).model);
    cfg.flops_per_mac = mac_flops;
    dmdetr::FlopsReport report = dmdetr::model_flops(cfg);
    std::cout << report.to_json().dump(2) << "\n" << report.to_table();
    return 0;
}

int cmd_trace(const std::string& checkpoint, const std::string& config_path, int example_index,
              const std::string& split, const std::string& out_csv) {
    dmdetr::Model model = dmdetr::load_checkpoint(checkpoint);
    dmdetr::RunConfig cfg = load_config_or_default(config_path);
    cfg.model = model.cfg;
    cfg.data.side = model.cfg.side;
    cfg.data.n_l = model.cfg.n_l;
    std::vector<dmdetr::Example> examples = load_split(cfg, split);
    if (example_index < 0 || example_index >= static_cast<int>(examples.size()))
        throw dmdetr::DataError("example index " + std::to_string(example_index) +
                                " out of range [0, " + std::to_string(examples.size()) + ")");
    dmdetr::NoGrad ng;
    dmdetr::ModelOutput out =
        dmdetr::model_forward(model, examples[static_cast<std::size_t>(example_index)]);
    std::ofstream csv(out_csv);
    if (!csv) throw dmdetr::DataError("cannot open " + out_csv);
    csv << "layer,kind,idx,x,y,x_clamped,y_clamped\n";
    auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
    char buf[160];
    for (const dmdetr::LayerTrace& tr : out.trace) {
        std::snprintf(buf, sizeof buf, "%d,ref,0,%.17g,%.17g,%.17g,%.17g\n", tr.layer, tr.ref_x,
                      tr.ref_y, clamp01(tr.ref_x), clamp01(tr.ref_y));
        csv << buf;
        for (std::size_t j = 0; j * 2 < tr.coords.size(); ++j) {
            double x = tr.coords[j * 2], y = tr.coords[j * 2 + 1];
            std::snprintf(buf, sizeof buf, "%d,sample,%zu,%.17g,%.17g,%.17g,%.17g\n", tr.layer,
                          j, x, y, clamp01(x), clamp01(y));
            csv << buf;
        }
    }
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic multimodal transformer visual grounding toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/default", checkpoint, split = "test";
    std::string preset, init_sampling, out_csv = "trace.csv";
    long long seed = -1;
    int example_index = 0;
    double mac_flops = 1.0;

    CLI::App* train = app.add_subcommand("train", "train a model");
    train->add_option("--config", config_path, "JSON run config");
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--init-sampling", init_sampling,
                      "override init sampling mode (grid|uniform|learnable)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_option("--config", config_path, "JSON run config (for data settings)");
    eval->add_option("--split", split, "train|val|test");

    CLI::App* flops = app.add_subcommand("flops", "analytic FLOPs report");
    flops->add_option("--config", config_path, "JSON run config");
    flops->add_option("--preset", preset,
                      "paper-transvg|paper-dynamic|paper-static-decoder|paper-sampling-only");
    flops->add_option("--mac-flops", mac_flops, "FLOPs counted per multiply-add (default 1)");

    CLI::App* trace = app.add_subcommand("trace", "dump per-layer sampling locations");
    trace->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    trace->add_option("--config", config_path, "JSON run config (for data settings)");
    trace->add_option("--example", example_index, "example index within the split");
    trace->add_option("--split", split, "train|val|test");
    trace->add_option("--out", out_csv, "output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, seed, out_dir, init_sampling);
        if (eval->parsed()) return cmd_eval(checkpoint, config_path, split);
        if (flops->parsed()) return cmd_flops(config_path, preset, mac_flops);
        if (trace->parsed()) return cmd_trace(checkpoint, config_path, example_index, split,
                                              out_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
