#include "eamnet/errors.hpp"
#include "eamnet/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace eamnet;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::string> dataset;
    std::optional<std::string> data_root;
    std::optional<int64_t> synthetic_count;
    std::optional<int64_t> epochs;
    std::optional<int64_t> batch_size;
    std::optional<uint64_t> seed;
    std::optional<std::string> output;
    std::optional<int64_t> k_sel;
    std::optional<int64_t> k_mem;
    bool no_mrcf = false;
    bool no_cmam = false;
    bool no_eab = false;
    bool augment = false;

    void add_data_flags(CLI::App* app) {
        app->add_option("--dataset", dataset, "isic2018, ph2 or synthetic")
            ->check(CLI::IsMember({"isic2018", "ph2", "synthetic"}));
        app->add_option("--data-root", data_root, "Dataset root directory");
    }

    void add_training_flags(CLI::App* app) {
        app->add_option("--config", config, "JSON experiment config");
        add_data_flags(app);
        app->add_option("--synthetic-count", synthetic_count, "Images in the synthetic dataset");
        app->add_option("--epochs", epochs, "Training epochs")->check(CLI::NonNegativeNumber);
        app->add_option("--batch-size", batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
        app->add_option("--seed", seed, "Split, initialisation and shuffle seed");
        app->add_option("--output", output, "Output directory");
        add_model_flags(app);
        app->add_flag("--augment", augment, "Enable random flips during training");
    }

    void add_model_flags(CLI::App* app) {
        app->add_option("--k-sel", k_sel, "Channels kept by each bridge (0 = half)");
        app->add_option("--k-mem", k_mem, "External memory slots");
        app->add_flag("--no-mrcf", no_mrcf, "Plain double-conv encoder");
        app->add_flag("--no-cmam", no_cmam, "Disable bottleneck attention");
        app->add_flag("--no-eab", no_eab, "Plain skip connections");
    }

    void apply_model(ModelConfig& m) const {
        if (k_sel) m.k_sel = *k_sel;
        if (k_mem) m.k_mem = *k_mem;
        if (no_mrcf) m.use_mrcf = false;
        if (no_cmam) m.use_cmam = false;
        if (no_eab) m.use_eab = false;
    }

    ExperimentConfig resolve() const {
        auto cfg = config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config);
        if (dataset) cfg.dataset = *dataset;
        if (data_root) cfg.data_root = *data_root;
        if (synthetic_count) cfg.synthetic_count = *synthetic_count;
        if (epochs) cfg.epochs = *epochs;
        if (batch_size) cfg.batch_size = *batch_size;
        if (seed) cfg.seed = *seed;
        if (output) cfg.output_dir = *output;
        if (augment) cfg.augment = true;
        apply_model(cfg.model);
        cfg.model.seed = cfg.seed;
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Skin lesion segmentation experiments"};
    app.require_subcommand(1);

    Overrides train_o, ablate_o, eval_o;
    auto* train = app.add_subcommand("train", "Train a model and write checkpoints and logs");
    train_o.add_training_flags(train);

    auto* ablate = app.add_subcommand("ablate", "Train and test all eight module combinations");
    ablate_o.add_training_flags(ablate);

    EvalRequest eval_req;
    std::string eval_output = ".";
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    eval->add_option("--checkpoint", eval_req.checkpoint, "Checkpoint file")->required();
    eval->add_option("--config", eval_o.config, "Config whose model must match the checkpoint");
    eval_o.add_data_flags(eval);
    eval_o.add_model_flags(eval);
    eval->add_option("--split", eval_req.split, "train, val or test");
    eval->add_option("--output", eval_output, "Output directory");
    eval->add_flag("--save-predictions", eval_req.save_predictions, "Write predictions/<id>.png");

    VisualizeRequest vis_req;
    std::string vis_output = ".";
    auto* vis = app.add_subcommand("visualize", "Write attention, bridge and overlay figures");
    vis->add_option("--checkpoint", vis_req.checkpoint, "Checkpoint file")->required();
    vis->add_option("--output", vis_output, "Output directory");
    vis->add_option("--ids", vis_req.ids, "Sample ids")->required()->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalidConfig;
    }

    try {
        if (*train) return cmd_train(train_o.resolve(), std::cout);
        if (*ablate) return cmd_ablate(ablate_o.resolve(), std::cout);
        if (*eval) {
            eval_req.output_dir = eval_output;
            if (eval_o.dataset) eval_req.dataset = *eval_o.dataset;
            if (eval_o.data_root) eval_req.data_root = *eval_o.data_root;
            if (!eval_o.config.empty()) {
                auto cfg = ExperimentConfig::load(eval_o.config);
                eval_o.apply_model(cfg.model);
                eval_req.config = cfg;
            }
            return cmd_eval(eval_req, std::cout);
        }
        if (*vis) {
            vis_req.output_dir = vis_output;
            return cmd_visualize(vis_req, std::cout);
        }
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return kExitInvalidConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}
