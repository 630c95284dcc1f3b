#pragma once

#include "eamnet/network.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace eamnet {

class SegmentationSet;

struct LossConfig {
    double dice_weight = 1.0;
    double bce_weight = 1.0;
    double dice_smooth = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static LossConfig from_json(const nlohmann::json& j);
};

struct ScheduleConfig {
    double lr0 = 0.001;
    double weight_decay = 0.00005;
    int64_t t0 = 10;
    int64_t t_mult = 2;
    double eta_min = 0.0;

    void validate() const;
    nlohmann::json to_json() const;
    static ScheduleConfig from_json(const nlohmann::json& j);
};

/// 1 − (2·Σp·t + s)/(Σp + Σt + s), summed over every element of the tensors.
torch::Tensor soft_dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth);

/// Mean per-element binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7].
torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// dice_weight·soft_dice + bce_weight·bce.
torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg);

/// Cosine annealing with warm restarts; cycles of length t0, t0·t_mult, ...
double lr_at(int64_t epoch, const ScheduleConfig& cfg);

struct MetricValues {
    double iou = 0.0;
    double dice = 0.0;
    double acc = 0.0;
    double precision = 0.0;
};

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    Confusion& operator+=(const Confusion& o);
};

/// Counts over binary masks of equal shape. Throws InvalidInput on values
/// other than 0 and 1, ShapeError on mismatched shapes.
Confusion confusion(const torch::Tensor& pred_mask, const torch::Tensor& target);

/// IoU, Dice, ACC and Precision from counts. With no predicted and no true
/// positives every metric is 1; precision is 0 when nothing is predicted but
/// the target is non-empty.
MetricValues metrics_from(const Confusion& c);

MetricValues compute_metrics(const torch::Tensor& pred_mask, const torch::Tensor& target);

enum class Pooling { PerImage, Global };

struct ImageMetrics {
    std::string id;
    MetricValues values;
    Confusion counts;
};

struct MetricsReport {
    MetricValues mean;
    std::vector<ImageMetrics> per_image;
    int64_t n_images = 0;
};

/// Means of per-image values (PerImage) or metrics of the summed counts (Global).
MetricsReport aggregate(std::vector<ImageMetrics> rows, Pooling pooling);

/// Thresholds probabilities at 0.5.
torch::Tensor binarize(const torch::Tensor& probs);

struct EvalOptions {
    int64_t batch_size = 8;
    Pooling pooling = Pooling::PerImage;
    /// Called with each sample id and its binary prediction (1×H×W uint8).
    std::function<void(const std::string&, const torch::Tensor&)> on_prediction;
};

/// Runs the model in eval mode without gradients over every sample.
MetricsReport evaluate(EamNet& model, const SegmentationSet& data, const EvalOptions& opts = {});

struct EpochRecord {
    int64_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_dice = 0.0;  // per-image Dice of the training forward passes
    MetricValues val;

    nlohmann::json to_json() const;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    int64_t best_epoch = -1;
    double best_val_dice = -1.0;
};

struct FitOptions {
    int64_t epochs = 0;
    int64_t batch_size = 8;
    ScheduleConfig schedule;
    LossConfig loss;
    bool augment = false;
    uint64_t seed = 42;
    Pooling pooling = Pooling::PerImage;
    std::function<void(const EpochRecord&)> on_epoch;
    /// Invoked whenever validation Dice improves on the best seen so far.
    std::function<void(const EamNet&, const EpochRecord&)> on_best;
};

/// Adam (weight decay from the schedule) over shuffled mini-batches, one
/// learning rate per epoch from lr_at, validation after every epoch. Throws
/// InvalidInput for empty sets and TrainingDiverged on a non-finite loss.
TrainingLog fit(EamNet& model, const SegmentationSet& train, const SegmentationSet& val,
                const FitOptions& opts);

}  // namespace eamnet
