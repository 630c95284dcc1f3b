#include "eamnet/experiments.hpp"

#include "eamnet/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace eamnet {

namespace {

const std::set<std::string> kDatasets{"isic2018", "ph2", "synthetic"};

std::string pooling_name(Pooling p) { return p == Pooling::Global ? "global" : "per_image"; }

Pooling parse_pooling(const std::string& s) {
    if (s == "per_image") return Pooling::PerImage;
    if (s == "global") return Pooling::Global;
    throw ConfigError("unknown pooling '" + s + "' (expected per_image or global)");
}

ModelConfig architecture_of(ModelConfig c) {
    c.seed = 0;
    return c;
}

std::string fixed(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(8) << v;
    return os.str();
}

nlohmann::json metrics_json(const MetricValues& m) {
    return {{"iou", m.iou}, {"dice", m.dice}, {"acc", m.acc}, {"precision", m.precision}};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
}

void write_gray_png(const fs::path& path, const torch::Tensor& mask01) {
    auto m = (mask01.squeeze().to(torch::kUInt8) * 255).contiguous();
    cv::Mat img(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<uint8_t>());
    if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
}

torch::Tensor minmax(const torch::Tensor& x, double lo, double hi) {
    if (hi - lo <= 0.0) return torch::zeros_like(x);
    return ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
}

torch::Tensor to_canvas(const torch::Tensor& hw) {
    auto x = hw.to(torch::kFloat).unsqueeze(0).unsqueeze(0);
    return resize_bilinear(x, kCanonicalSize[0], kCanonicalSize[1]).squeeze(0).squeeze(0);
}

struct TrainResult {
    EamNet model{nullptr};
    TrainingLog log;
    MetricValues final_train;
};

TrainResult train_on(const ExperimentConfig& cfg, const Dataset& data, std::ostream& out) {
    fs::create_directories(cfg.output_dir);
    data.split.write(cfg.output_dir / "split.txt");

    const auto norm = data.train_normalization();
    const auto train = data.part("train");
    const auto val = data.part("val");

    auto mc = cfg.model;
    mc.seed = cfg.seed;
    TrainResult r;
    r.model = build_model(mc);

    const nlohmann::json extra{{"experiment", cfg.to_json()}, {"normalization", norm.to_json()}};

    std::ofstream log_file(cfg.output_dir / "train_log.jsonl", std::ios::binary);
    if (!log_file) throw DataError("cannot write " + (cfg.output_dir / "train_log.jsonl").string());

    FitOptions fo;
    fo.epochs = cfg.epochs;
    fo.batch_size = cfg.batch_size;
    fo.schedule = cfg.schedule;
    fo.loss = cfg.loss;
    fo.augment = cfg.augment;
    fo.seed = cfg.seed;
    fo.pooling = cfg.pooling;
    fo.on_epoch = [&](const EpochRecord& rec) {
        const auto line = rec.to_json().dump();
        log_file << line << '\n';
        log_file.flush();
        out << line << '\n';
    };
    fo.on_best = [&](const EamNet& m, const EpochRecord& rec) {
        auto meta = extra;
        meta["epoch"] = rec.epoch;
        save_checkpoint(cfg.output_dir / "best.ckpt", m, meta);
    };
    r.log = fit(r.model, train, val, fo);

    auto meta = extra;
    meta["epoch"] = cfg.epochs - 1;
    save_checkpoint(cfg.output_dir / "model.ckpt", r.model, meta);
    if (cfg.epochs > 0) {
        EvalOptions eo;
        eo.batch_size = cfg.batch_size;
        eo.pooling = cfg.pooling;
        r.final_train = evaluate(r.model, train, eo).mean;
        nlohmann::json line = metrics_json(r.final_train);
        line["final"] = true;
        line["split"] = "train";
        log_file << line.dump() << '\n';
        out << line.dump() << '\n';
    }
    return r;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (!kDatasets.count(dataset)) throw ConfigError("unknown dataset '" + dataset + "'");
    if (dataset == "synthetic") {
        if (synthetic_count < 10) throw ConfigError("synthetic_count must be at least 10");
    } else {
        if (data_root.empty()) throw ConfigError("data_root is required for dataset " + dataset);
        if (!fs::is_directory(data_root)) throw ConfigError("data root does not exist: " + data_root.string());
    }
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    model.validate();
    schedule.validate();
    loss.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"dataset", dataset},
            {"data_root", data_root.string()},
            {"synthetic_count", synthetic_count},
            {"model", model.to_json()},
            {"schedule", schedule.to_json()},
            {"loss", loss.to_json()},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"augment", augment},
            {"seed", seed},
            {"pooling", pooling_name(pooling)},
            {"output_dir", output_dir.string()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"dataset", "data_root", "synthetic_count", "model",
                                             "schedule", "loss", "epochs", "batch_size",
                                             "augment", "seed", "pooling", "output_dir"};
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    ExperimentConfig c;
    try {
        c.dataset = j.value("dataset", c.dataset);
        c.data_root = j.value("data_root", std::string{});
        c.synthetic_count = j.value("synthetic_count", c.synthetic_count);
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j.at("schedule"));
        if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.augment = j.value("augment", c.augment);
        c.seed = j.value("seed", c.seed);
        c.pooling = parse_pooling(j.value("pooling", pooling_name(c.pooling)));
        c.output_dir = j.value("output_dir", c.output_dir.string());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad experiment config: ") + e.what());
    }
    c.model.seed = c.seed;
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

Dataset load_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "isic2018") return load_isic2018(cfg.data_root, cfg.seed);
    if (cfg.dataset == "ph2") return load_ph2(cfg.data_root, cfg.seed);
    if (cfg.dataset == "synthetic") return make_synthetic(cfg.synthetic_count, cfg.seed);
    throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& out) {
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return kExitInvalidConfig;
    }
    try {
        const auto data = load_dataset(cfg);
        const auto r = train_on(cfg, data, out);
        out << "trained " << r.log.epochs.size() << " epochs; best val dice " << fixed(r.log.best_val_dice)
            << " at epoch " << r.log.best_epoch << '\n';
        return kExitOk;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return kExitInvalidConfig;
    } catch (const std::exception& e) {
        std::cerr << "train failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

namespace {

struct LoadedRun {
    Checkpoint ckpt;
    ExperimentConfig cfg;
    Normalization norm;
};

LoadedRun load_run(const fs::path& checkpoint) {
    LoadedRun r;
    r.ckpt = load_checkpoint(checkpoint);
    const auto& meta = r.ckpt.metadata;
    if (!meta.contains("experiment") || !meta.contains("normalization")) {
        throw DataError("checkpoint has no experiment metadata: " + checkpoint.string());
    }
    try {
        r.cfg = ExperimentConfig::from_json(meta.at("experiment"));
        r.norm = Normalization::from_json(meta.at("normalization"));
    } catch (const std::exception& e) {
        throw DataError(std::string("checkpoint metadata: ") + e.what());
    }
    return r;
}

std::string metrics_csv(const MetricsReport& rep) {
    std::ostringstream os;
    os << "id,iou,dice,acc,precision,tp,fp,fn,tn\n";
    for (const auto& row : rep.per_image) {
        const auto& v = row.values;
        const auto& c = row.counts;
        os << row.id << ',' << fixed(v.iou) << ',' << fixed(v.dice) << ',' << fixed(v.acc) << ','
           << fixed(v.precision) << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',' << c.tn << '\n';
    }
    const auto& m = rep.mean;
    os << "mean," << fixed(m.iou) << ',' << fixed(m.dice) << ',' << fixed(m.acc) << ',' << fixed(m.precision)
       << ",,,,\n";
    return os.str();
}

void print_table(std::ostream& out, const std::string& title, const MetricValues& m, int64_t n) {
    out << title << " (" << n << " images)\n";
    out << std::left << std::setw(10) << "IoU" << std::setw(10) << "Dice" << std::setw(10) << "ACC"
        << std::setw(10) << "Pre" << '\n';
    out << std::fixed << std::setprecision(2) << std::setw(10) << 100.0 * m.iou << std::setw(10)
        << 100.0 * m.dice << std::setw(10) << 100.0 * m.acc << std::setw(10) << 100.0 * m.precision << '\n';
    out.unsetf(std::ios::floatfield);
    out << std::right;
}

}  // namespace

int cmd_eval(const EvalRequest& req, std::ostream& out) {
    LoadedRun run;
    try {
        run = load_run(req.checkpoint);
    } catch (const std::exception& e) {
        std::cerr << "cannot load checkpoint: " << e.what() << '\n';
        return kExitInvalidConfig;
    }
    if (req.config && architecture_of(req.config->model) != architecture_of(run.ckpt.config)) {
        std::cerr << "config does not match checkpoint: expected model " << run.ckpt.config.to_json().dump()
                  << ", got " << req.config->model.to_json().dump() << '\n';
        return kExitInvalidConfig;
    }
    if (req.split != "train" && req.split != "val" && req.split != "test") {
        std::cerr << "unknown split '" << req.split << "'\n";
        return kExitInvalidConfig;
    }
    auto cfg = run.cfg;
    if (req.dataset) cfg.dataset = *req.dataset;
    if (req.data_root) cfg.data_root = *req.data_root;
    try {
        cfg.output_dir = req.output_dir;
        cfg.validate();
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return kExitInvalidConfig;
    }

    try {
        const auto data = load_dataset(cfg);
        const auto set = data.subset(data.split.ids(req.split), run.norm);
        fs::create_directories(req.output_dir);
        const auto pred_dir = req.output_dir / "predictions";
        if (req.save_predictions) fs::create_directories(pred_dir);

        EvalOptions eo;
        eo.batch_size = cfg.batch_size;
        eo.pooling = cfg.pooling;
        if (req.save_predictions) {
            eo.on_prediction = [&](const std::string& id, const torch::Tensor& pred) {
                write_gray_png(pred_dir / (id + ".png"), pred);
            };
        }
        const auto rep = evaluate(run.ckpt.model, set, eo);
        write_text(req.output_dir / ("metrics_" + req.split + ".csv"), metrics_csv(rep));
        print_table(out, cfg.dataset + " " + req.split, rep.mean, rep.n_images);
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "eval failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

std::vector<std::array<bool, 3>> ablation_grid() {
    return {{false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
            {false, true, true},   {true, false, true},  {true, true, false},  {true, true, true}};
}

int cmd_ablate(const ExperimentConfig& base, std::ostream& out) {
    try {
        base.validate();
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return kExitInvalidConfig;
    }
    Dataset data;
    try {
        data = load_dataset(base);
    } catch (const std::exception& e) {
        std::cerr << "cannot load dataset: " << e.what() << '\n';
        return kExitFailure;
    }
    fs::create_directories(base.output_dir);

    std::ostringstream csv;
    csv << "mrcf,cmam,eab,iou,dice,acc,precision,status\n";
    int failures = 0;
    for (const auto& flags : ablation_grid()) {
        std::string name;
        const char* parts[] = {"mrcf", "cmam", "eab"};
        for (size_t k = 0; k < 3; ++k) {
            if (!flags[k]) continue;
            if (!name.empty()) name += '_';
            name += parts[k];
        }
        if (name.empty()) name = "baseline";

        auto cfg = base;
        cfg.model.use_mrcf = flags[0];
        cfg.model.use_cmam = flags[1];
        cfg.model.use_eab = flags[2];
        cfg.output_dir = base.output_dir / "ablation" / name;
        csv << flags[0] << ',' << flags[1] << ',' << flags[2] << ',';
        out << "== " << name << '\n';
        try {
            cfg.model.validate();
            auto r = train_on(cfg, data, out);
            EvalOptions eo;
            eo.batch_size = cfg.batch_size;
            eo.pooling = cfg.pooling;
            const auto rep = evaluate(r.model, data.part("test"), eo);
            write_text(cfg.output_dir / "metrics_test.csv", metrics_csv(rep));
            const auto& m = rep.mean;
            csv << fixed(m.iou) << ',' << fixed(m.dice) << ',' << fixed(m.acc) << ',' << fixed(m.precision)
                << ",ok\n";
        } catch (const std::exception& e) {
            ++failures;
            std::string msg = e.what();
            for (auto& ch : msg) {
                if (ch == ',' || ch == '\n') ch = ' ';
            }
            csv << ",,,,failed: " << msg << '\n';
            std::cerr << "ablation run " << name << " failed: " << e.what() << '\n';
        }
    }
    write_text(base.output_dir / "ablation.csv", csv.str());
    out << csv.str();
    return failures == 0 ? kExitOk : kExitFailure;
}

torch::Tensor attention_heatmap(const CmamTrace& trace) {
    if (!trace.spatial_weights.defined() || trace.spatial_weights.dim() != 3) {
        throw InvalidInput("attention_heatmap: trace holds no attention weights");
    }
    const auto w = trace.spatial_weights[0].to(torch::kFloat);
    if (w.size(1) != trace.height * trace.width) throw ShapeError("attention_heatmap: token count mismatch");
    auto mass = w.sum(0).reshape({trace.height, trace.width});
    mass = minmax(mass, mass.min().item<double>(), mass.max().item<double>());
    return to_canvas(mass).clamp(0.0, 1.0);
}

EnergyMaps bridge_energy_maps(const EabTrace& trace) {
    if (!trace.attended.defined() || !trace.output.defined()) {
        throw InvalidInput("bridge_energy_maps: trace holds no bridge tensors");
    }
    auto before = trace.attended[0].abs().sum(0).to(torch::kFloat);
    auto after = trace.output[0].abs().sum(0).to(torch::kFloat);
    const double lo = std::min(before.min().item<double>(), after.min().item<double>());
    const double hi = std::max(before.max().item<double>(), after.max().item<double>());
    return {to_canvas(minmax(before, lo, hi)).clamp(0.0, 1.0), to_canvas(minmax(after, lo, hi)).clamp(0.0, 1.0)};
}

void write_heatmap(const fs::path& path, const torch::Tensor& map) {
    if (map.dim() != 2) throw ShapeError("write_heatmap: expected an H×W map");
    auto u8 = (map.to(torch::kFloat).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
    cv::Mat gray(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr<uint8_t>());
    cv::Mat color;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    if (!cv::imwrite(path.string(), color)) throw DataError("cannot write " + path.string());
}

namespace {

void write_overlay(const fs::path& path, const CanonicalSample& s, const torch::Tensor& pred) {
    auto rgb = s.image.permute({1, 2, 0}).contiguous();
    cv::Mat img(static_cast<int>(rgb.size(0)), static_cast<int>(rgb.size(1)), CV_8UC3, rgb.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(img, bgr, cv::COLOR_RGB2BGR);

    auto outline = [&](const torch::Tensor& mask, const cv::Scalar& color) {
        auto m = (mask.squeeze().to(torch::kUInt8) * 255).contiguous();
        cv::Mat bin(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<uint8_t>());
        std::vector<std::vector<cv::Point>> contours;
        cv::findContours(bin.clone(), contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
        cv::drawContours(bgr, contours, -1, color, 2);
    };
    outline(s.mask, cv::Scalar(0, 255, 0));
    outline(pred, cv::Scalar(0, 0, 255));
    if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write " + path.string());
}

}  // namespace

int cmd_visualize(const VisualizeRequest& req, std::ostream& out) {
    LoadedRun run;
    try {
        run = load_run(req.checkpoint);
        run.cfg.output_dir = req.output_dir;
        run.cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "cannot load checkpoint: " << e.what() << '\n';
        return kExitInvalidConfig;
    }
    try {
        const auto data = load_dataset(run.cfg);
        std::map<std::string, size_t> index;
        for (size_t i = 0; i < data.samples.size(); ++i) index[data.samples[i].id] = i;

        fs::create_directories(req.output_dir);
        auto& model = run.ckpt.model;
        model->eval();
        torch::NoGradGuard no_grad;
        for (const auto& id : req.ids) {
            auto it = index.find(id);
            if (it == index.end()) {
                std::cerr << "warning: unknown id '" << id << "', skipped\n";
                continue;
            }
            const auto& raw = data.samples[it->second];
            NetworkTrace trace;
            auto logits = model->forward_traced(run.norm.apply(raw.image).unsqueeze(0), &trace);
            auto pred = binarize(torch::sigmoid(logits))[0];

            if (run.ckpt.config.use_cmam) {
                write_heatmap(req.output_dir / (id + "_cmam_heatmap.png"), attention_heatmap(trace.cmam));
            }
            if (run.ckpt.config.use_eab) {
                const auto e = bridge_energy_maps(trace.finest_bridge);
                write_heatmap(req.output_dir / (id + "_eab_pre.png"), e.before);
                write_heatmap(req.output_dir / (id + "_eab_post.png"), e.after);
            }
            write_overlay(req.output_dir / (id + "_overlay.png"), raw, pred);
            out << "wrote figures for " << id << '\n';
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "visualize failed: " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace eamnet
