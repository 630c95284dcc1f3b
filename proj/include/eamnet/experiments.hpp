#pragma once

#include "eamnet/data_pipeline.hpp"
#include "eamnet/network.hpp"
#include "eamnet/training_metrics.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace eamnet {

/// Process exit codes of the command-line entry points.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitInvalidConfig = 2, kExitDiverged = 3 };

struct ExperimentConfig {
    std::string dataset = "synthetic";  // isic2018 | ph2 | synthetic
    std::filesystem::path data_root;
    int64_t synthetic_count = 10;
    ModelConfig model;
    ScheduleConfig schedule;
    LossConfig loss;
    int64_t epochs = 0;
    int64_t batch_size = 8;
    bool augment = false;
    /// Drives the split shuffle, weight initialisation and batch order.
    uint64_t seed = 42;
    Pooling pooling = Pooling::PerImage;
    std::filesystem::path output_dir = "runs/default";

    /// Throws ConfigError on any invalid field or a missing dataset root.
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// Reads a JSON config file. Throws ConfigError when unreadable or malformed.
    static ExperimentConfig load(const std::filesystem::path& path);
};

/// Loads (or generates) the dataset an experiment refers to.
Dataset load_dataset(const ExperimentConfig& cfg);

/// Trains per `cfg`; writes model.ckpt, best.ckpt, train_log.jsonl and
/// split.txt into cfg.output_dir.
int cmd_train(const ExperimentConfig& cfg, std::ostream& out);

struct EvalRequest {
    std::filesystem::path checkpoint;
    std::filesystem::path output_dir;
    std::string split = "test";
    /// When set, its model section must match the checkpoint.
    std::optional<ExperimentConfig> config;
    std::optional<std::string> dataset;
    std::optional<std::filesystem::path> data_root;
    bool save_predictions = false;
};

/// Evaluates a checkpoint on one split; prints the aggregate table and writes
/// metrics_<split>.csv (plus predictions/<id>.png when requested).
int cmd_eval(const EvalRequest& req, std::ostream& out);

/// The eight (MRCF, CMAM, EAB) flag combinations in ablation-table row order.
std::vector<std::array<bool, 3>> ablation_grid();

/// Trains and tests every combination under output_dir/ablation/<name>/ and
/// writes output_dir/ablation.csv. A failing run is recorded and skipped.
int cmd_ablate(const ExperimentConfig& base, std::ostream& out);

struct VisualizeRequest {
    std::filesystem::path checkpoint;
    std::filesystem::path output_dir;
    std::vector<std::string> ids;
};

/// Writes <id>_cmam_heatmap.png, <id>_eab_pre.png, <id>_eab_post.png and
/// <id>_overlay.png for every known id; unknown ids are skipped with a warning.
int cmd_visualize(const VisualizeRequest& req, std::ostream& out);

/// Attention mass received by every bottleneck token (column sums of the SA
/// softmax), min-max normalised and upsampled to 224×320.
torch::Tensor attention_heatmap(const CmamTrace& trace);

struct EnergyMaps {
    torch::Tensor before;  // Σ_c |external attention output|, 224×320 in [0,1]
    torch::Tensor after;   // Σ_c |bridge output|, same scale as `before`
};

/// Feature energy of the finest bridge before and after channel filtering,
/// min-max normalised with one shared range.
EnergyMaps bridge_energy_maps(const EabTrace& trace);

/// Writes a 224×320 map in [0,1] as a colour-mapped PNG.
void write_heatmap(const std::filesystem::path& path, const torch::Tensor& map);

}  // namespace eamnet
