#include "eamnet/training_metrics.hpp"

#include "eamnet/data_pipeline.hpp"
#include "eamnet/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace eamnet {

void LossConfig::validate() const {
    if (dice_weight < 0 || bce_weight < 0) throw ConfigError("loss: weights must be non-negative");
    if (dice_weight == 0 && bce_weight == 0) throw ConfigError("loss: at least one weight must be positive");
    if (dice_smooth < 0) throw ConfigError("loss: dice_smooth must be non-negative");
}

nlohmann::json LossConfig::to_json() const {
    return {{"dice_weight", dice_weight}, {"bce_weight", bce_weight}, {"dice_smooth", dice_smooth}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
    LossConfig c;
    c.dice_weight = j.value("dice_weight", c.dice_weight);
    c.bce_weight = j.value("bce_weight", c.bce_weight);
    c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
    return c;
}

void ScheduleConfig::validate() const {
    if (!(lr0 > 0)) throw ConfigError("schedule: lr0 must be positive");
    if (t0 < 1 || t_mult < 1) throw ConfigError("schedule: T0 and Tmult must be at least 1");
    if (weight_decay < 0) throw ConfigError("schedule: weight_decay must be non-negative");
    if (eta_min < 0 || eta_min > lr0) throw ConfigError("schedule: eta_min must lie in [0, lr0]");
}

nlohmann::json ScheduleConfig::to_json() const {
    return {{"lr0", lr0}, {"weight_decay", weight_decay}, {"t0", t0}, {"t_mult", t_mult}, {"eta_min", eta_min}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
    ScheduleConfig c;
    c.lr0 = j.value("lr0", c.lr0);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.t0 = j.value("t0", c.t0);
    c.t_mult = j.value("t_mult", c.t_mult);
    c.eta_min = j.value("eta_min", c.eta_min);
    return c;
}

// ---------------------------------------------------------------------------

namespace {

void check_pair(const torch::Tensor& pred, const torch::Tensor& target, const char* where) {
    if (!pred.defined() || !target.defined() || pred.sizes() != target.sizes()) {
        throw ShapeError(std::string(where) + ": prediction and target shapes differ");
    }
}

}  // namespace

torch::Tensor soft_dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth) {
    check_pair(pred, target, "soft_dice_loss");
    auto inter = (pred * target).sum();
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth);
}

torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    check_pair(pred, target, "bce_loss");
    auto p = pred.clamp(1e-7, 1.0 - 1e-7);
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean();
}

torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossConfig& cfg) {
    cfg.validate();
    check_pair(pred, target, "combined_loss");
    torch::Tensor total = torch::zeros({}, pred.options());
    if (cfg.dice_weight != 0) total = total + cfg.dice_weight * soft_dice_loss(pred, target, cfg.dice_smooth);
    if (cfg.bce_weight != 0) total = total + cfg.bce_weight * bce_loss(pred, target);
    return total;
}

double lr_at(int64_t epoch, const ScheduleConfig& cfg) {
    cfg.validate();
    if (epoch < 0) throw InvalidInput("lr_at: epoch must be non-negative");
    int64_t t = epoch;
    int64_t cycle = cfg.t0;
    while (t >= cycle) {
        t -= cycle;
        cycle *= cfg.t_mult;
    }
    const double phase = static_cast<double>(t) / static_cast<double>(cycle);
    return cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + std::cos(std::numbers::pi * phase));
}

// ---------------------------------------------------------------------------

Confusion& Confusion::operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

Confusion confusion(const torch::Tensor& pred_mask, const torch::Tensor& target) {
    check_pair(pred_mask, target, "compute_metrics");
    auto is_binary = [](const torch::Tensor& t) { return ((t == 0) | (t == 1)).all().item<bool>(); };
    if (!is_binary(pred_mask) || !is_binary(target)) {
        throw InvalidInput("compute_metrics: masks must contain only 0 and 1");
    }
    auto p = pred_mask.to(torch::kBool);
    auto t = target.to(torch::kBool);
    Confusion c;
    c.tp = (p & t).sum().item<int64_t>();
    c.fp = (p & ~t).sum().item<int64_t>();
    c.fn = (~p & t).sum().item<int64_t>();
    c.tn = p.numel() - c.tp - c.fp - c.fn;
    return c;
}

MetricValues metrics_from(const Confusion& c) {
    auto ratio = [](int64_t num, int64_t den, double if_empty) {
        return den == 0 ? if_empty : static_cast<double>(num) / static_cast<double>(den);
    };
    MetricValues m;
    m.iou = ratio(c.tp, c.tp + c.fp + c.fn, 1.0);
    m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0);
    m.acc = ratio(c.tp + c.tn, c.tp + c.fp + c.fn + c.tn, 1.0);
    m.precision = ratio(c.tp, c.tp + c.fp, c.fn == 0 ? 1.0 : 0.0);
    return m;
}

MetricValues compute_metrics(const torch::Tensor& pred_mask, const torch::Tensor& target) {
    return metrics_from(confusion(pred_mask, target));
}

MetricsReport aggregate(std::vector<ImageMetrics> rows, Pooling pooling) {
    MetricsReport r;
    r.n_images = static_cast<int64_t>(rows.size());
    if (!rows.empty()) {
        if (pooling == Pooling::Global) {
            Confusion total;
            for (const auto& row : rows) total += row.counts;
            r.mean = metrics_from(total);
        } else {
            for (const auto& row : rows) {
                r.mean.iou += row.values.iou;
                r.mean.dice += row.values.dice;
                r.mean.acc += row.values.acc;
                r.mean.precision += row.values.precision;
            }
            const auto n = static_cast<double>(rows.size());
            r.mean.iou /= n;
            r.mean.dice /= n;
            r.mean.acc /= n;
            r.mean.precision /= n;
        }
    }
    r.per_image = std::move(rows);
    return r;
}

torch::Tensor binarize(const torch::Tensor& probs) {
    return (probs >= 0.5).to(torch::kUInt8);
}

// ---------------------------------------------------------------------------

namespace {

struct Batch {
    torch::Tensor images, masks;
    std::vector<std::string> ids;
};

Batch collate(const std::vector<Sample>& samples) {
    Batch b;
    std::vector<torch::Tensor> images, masks;
    for (const auto& s : samples) {
        images.push_back(s.image);
        masks.push_back(s.mask);
        b.ids.push_back(s.id);
    }
    b.images = torch::stack(images);
    b.masks = torch::stack(masks);
    return b;
}

class ModeGuard {
public:
    explicit ModeGuard(torch::nn::Module& m) : module_(m), was_training_(m.is_training()) {}
    ~ModeGuard() { module_.train(was_training_); }
    ModeGuard(const ModeGuard&) = delete;
    ModeGuard& operator=(const ModeGuard&) = delete;

private:
    torch::nn::Module& module_;
    bool was_training_;
};

}  // namespace

MetricsReport evaluate(EamNet& model, const SegmentationSet& data, const EvalOptions& opts) {
    if (opts.batch_size < 1) throw ConfigError("evaluate: batch size must be positive");
    ModeGuard mode(*model);
    model->eval();
    torch::NoGradGuard no_grad;

    std::vector<ImageMetrics> rows;
    rows.reserve(data.size());
    for (size_t start = 0; start < data.size(); start += static_cast<size_t>(opts.batch_size)) {
        std::vector<Sample> samples;
        for (size_t i = start; i < std::min(data.size(), start + static_cast<size_t>(opts.batch_size)); ++i) {
            samples.push_back(data.sample(i));
        }
        auto batch = collate(samples);
        auto pred = binarize(model->forward(batch.images));
        for (size_t k = 0; k < samples.size(); ++k) {
            const auto idx = static_cast<int64_t>(k);
            auto counts = confusion(pred[idx], batch.masks[idx]);
            rows.push_back({batch.ids[k], metrics_from(counts), counts});
            if (opts.on_prediction) opts.on_prediction(batch.ids[k], pred[idx]);
        }
    }
    return aggregate(std::move(rows), opts.pooling);
}

nlohmann::json EpochRecord::to_json() const {
    return {{"epoch", epoch},           {"lr", lr},           {"train_loss", train_loss},
            {"train_dice", train_dice}, {"val_iou", val.iou}, {"val_dice", val.dice},
            {"val_acc", val.acc},       {"val_precision", val.precision}};
}

TrainingLog fit(EamNet& model, const SegmentationSet& train, const SegmentationSet& val, const FitOptions& opts) {
    if (train.empty() || val.empty()) throw InvalidInput("fit: training and validation sets must be non-empty");
    if (opts.epochs < 0) throw ConfigError("fit: epochs must be non-negative");
    if (opts.batch_size < 1) throw ConfigError("fit: batch size must be positive");
    opts.schedule.validate();
    opts.loss.validate();

    TrainingLog log;
    if (opts.epochs == 0) return log;

    torch::optim::Adam optimizer(
        model->parameters(),
        torch::optim::AdamOptions(opts.schedule.lr0).weight_decay(opts.schedule.weight_decay));
    std::mt19937_64 rng(opts.seed);
    std::vector<size_t> order(train.size());

    for (int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at(epoch, opts.schedule);
        for (auto& group : optimizer.param_groups()) {
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(rec.lr);
        }

        model->train();
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        double loss_sum = 0.0, dice_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch_size)) {
            std::vector<Sample> samples;
            for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(opts.batch_size)); ++i) {
                samples.push_back(augment(train.sample(order[i]), rng(), opts.augment));
            }
            auto batch = collate(samples);
            auto probs = model->forward(batch.images);
            auto loss = combined_loss(probs, batch.masks, opts.loss);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingDiverged("fit: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                       std::to_string(start));
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();

            loss_sum += value * static_cast<double>(samples.size());
            auto pred = binarize(probs.detach());
            for (size_t k = 0; k < samples.size(); ++k) {
                const auto idx = static_cast<int64_t>(k);
                dice_sum += compute_metrics(pred[idx], batch.masks[idx]).dice;
            }
        }
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.train_dice = dice_sum / static_cast<double>(train.size());
        rec.val = evaluate(model, val, {opts.batch_size, opts.pooling, nullptr}).mean;
        log.epochs.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);
        if (rec.val.dice > log.best_val_dice) {
            log.best_val_dice = rec.val.dice;
            log.best_epoch = epoch;
            if (opts.on_best) opts.on_best(model, rec);
        }
    }
    return log;
}

}  // namespace eamnet
