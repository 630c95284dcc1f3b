#include "eamnet/data_pipeline.hpp"

#include "eamnet/errors.hpp"
#include "eamnet/multiscale_blocks.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace eamnet {

namespace {

constexpr int kHeight = static_cast<int>(kCanonicalSize[0]);
constexpr int kWidth = static_cast<int>(kCanonicalSize[1]);

torch::Tensor hwc_to_tensor(const cv::Mat& m) {
    cv::Mat c = m.isContinuous() ? m : m.clone();
    auto t = torch::from_blob(c.data, {c.rows, c.cols, c.channels()}, torch::kUInt8);
    return t.permute({2, 0, 1}).contiguous().clone();
}

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp";
}

fs::path first_existing(const fs::path& root, std::initializer_list<const char*> names) {
    for (const auto* n : names) {
        if (fs::is_directory(root / n)) return root / n;
    }
    return {};
}

}  // namespace

// ---------------------------------------------------------------------------

Normalization Normalization::fit(const std::vector<const CanonicalSample*>& samples) {
    Normalization n;
    if (samples.empty()) return n;
    std::array<double, 3> sum{}, sq{};
    double count = 0.0;
    for (const auto* s : samples) {
        auto img = s->image.to(torch::kDouble);
        for (int64_t c = 0; c < 3; ++c) {
            auto ch = img[c];
            sum[static_cast<size_t>(c)] += ch.sum().item<double>();
            sq[static_cast<size_t>(c)] += ch.square().sum().item<double>();
        }
        count += static_cast<double>(img.size(1) * img.size(2));
    }
    for (size_t c = 0; c < 3; ++c) {
        n.mean[c] = sum[c] / count;
        const double var = std::max(0.0, sq[c] / count - n.mean[c] * n.mean[c]);
        n.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return n;
}

torch::Tensor Normalization::apply(const torch::Tensor& image_u8) const {
    auto mean_t = torch::tensor({mean[0], mean[1], mean[2]}, torch::kFloat).view({3, 1, 1});
    auto std_t = torch::tensor({stddev[0], stddev[1], stddev[2]}, torch::kFloat).view({3, 1, 1});
    return (image_u8.to(torch::kFloat) - mean_t) / std_t;
}

nlohmann::json Normalization::to_json() const {
    return {{"mean", mean}, {"std", stddev}};
}

Normalization Normalization::from_json(const nlohmann::json& j) {
    Normalization n;
    n.mean = j.at("mean").get<std::array<double, 3>>();
    n.stddev = j.at("std").get<std::array<double, 3>>();
    return n;
}

SegmentationSet::SegmentationSet(std::vector<CanonicalSample> items, Normalization norm)
    : items_(std::move(items)), norm_(norm) {}

Sample SegmentationSet::sample(size_t i) const {
    const auto& raw = items_.at(i);
    return {raw.id, norm_.apply(raw.image), raw.mask.to(torch::kFloat)};
}

// ---------------------------------------------------------------------------

SplitSizes ratio_split_sizes(int64_t n) {
    if (n < 0) throw InvalidInput("split: negative dataset size");
    const int64_t train = 7 * n / 10;
    const int64_t val = n / 10;
    return {train, val, n - train - val};
}

SplitSizes ph2_split_sizes(int64_t n) {
    if (n < 0) throw InvalidInput("split: negative dataset size");
    if (n == 200) return {80, 20, 100};
    const int64_t train = 4 * n / 10;
    const int64_t val = n / 10;
    return {train, val, n - train - val};
}

const std::vector<std::string>& SplitSpec::ids(const std::string& part) const {
    if (part == "train") return train_ids;
    if (part == "val") return val_ids;
    if (part == "test") return test_ids;
    throw InvalidInput("split: unknown part '" + part + "' (expected train, val or test)");
}

void SplitSpec::validate(const std::vector<std::string>& all_ids) const {
    std::set<std::string> seen;
    for (const auto* list : {&train_ids, &val_ids, &test_ids}) {
        for (const auto& id : *list) {
            if (!seen.insert(id).second) throw DataError("split: id '" + id + "' appears twice");
        }
    }
    const std::set<std::string> expected(all_ids.begin(), all_ids.end());
    if (seen != expected) throw DataError("split: lists do not cover the dataset exactly");
}

std::string SplitSpec::to_manifest() const {
    std::ostringstream os;
    os << "dataset " << dataset << "\n" << "seed " << seed << "\n";
    for (const auto& id : train_ids) os << "train " << id << "\n";
    for (const auto& id : val_ids) os << "val " << id << "\n";
    for (const auto& id : test_ids) os << "test " << id << "\n";
    return os.str();
}

SplitSpec SplitSpec::from_manifest(const std::string& text) {
    SplitSpec s;
    std::istringstream is(text);
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto space = line.find(' ');
        if (space == std::string::npos) {
            throw DataError("split manifest: malformed line " + std::to_string(lineno));
        }
        const auto key = line.substr(0, space);
        const auto value = line.substr(space + 1);
        if (key == "dataset") {
            s.dataset = value;
        } else if (key == "seed") {
            s.seed = std::stoull(value);
        } else if (key == "train") {
            s.train_ids.push_back(value);
        } else if (key == "val") {
            s.val_ids.push_back(value);
        } else if (key == "test") {
            s.test_ids.push_back(value);
        } else {
            throw DataError("split manifest: unknown key '" + key + "' on line " + std::to_string(lineno));
        }
    }
    return s;
}

void SplitSpec::write(const fs::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("split manifest: cannot write " + path.string());
    os << to_manifest();
}

SplitSpec SplitSpec::read(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("split manifest: cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_manifest(ss.str());
}

SplitSpec make_split(const std::string& dataset, std::vector<std::string> ids, SplitSizes sizes,
                     uint64_t seed) {
    const auto n = static_cast<int64_t>(ids.size());
    if (sizes.train < 0 || sizes.val < 0 || sizes.test < 0 || sizes.train + sizes.val + sizes.test != n) {
        throw InvalidInput("split: sizes do not add up to the dataset size");
    }
    std::sort(ids.begin(), ids.end());
    // Fisher-Yates with raw mt19937_64 draws, identical on every platform.
    std::mt19937_64 rng(seed);
    for (size_t i = ids.size(); i > 1; --i) {
        std::swap(ids[i - 1], ids[rng() % i]);
    }
    SplitSpec s;
    s.dataset = dataset;
    s.seed = seed;
    auto it = ids.begin();
    s.train_ids.assign(it, it + sizes.train);
    it += sizes.train;
    s.val_ids.assign(it, it + sizes.val);
    it += sizes.val;
    s.test_ids.assign(it, ids.end());
    return s;
}

Normalization Dataset::train_normalization() const {
    const std::set<std::string> train(split.train_ids.begin(), split.train_ids.end());
    std::vector<const CanonicalSample*> picked;
    for (const auto& s : samples) {
        if (train.count(s.id) != 0) picked.push_back(&s);
    }
    return Normalization::fit(picked);
}

SegmentationSet Dataset::subset(const std::vector<std::string>& ids, const Normalization& norm) const {
    std::vector<CanonicalSample> items;
    items.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = std::find_if(samples.begin(), samples.end(), [&](const auto& s) { return s.id == id; });
        if (it == samples.end()) throw DataError("dataset: unknown id '" + id + "'");
        items.push_back(*it);
    }
    return SegmentationSet(std::move(items), norm);
}

SegmentationSet Dataset::part(const std::string& name) const {
    return subset(split.ids(name), train_normalization());
}

std::vector<std::string> Dataset::all_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.id);
    return ids;
}

// ---------------------------------------------------------------------------

CanonicalSample resample(const cv::Mat& rgb_image, const cv::Mat& mask, const std::string& id) {
    if (rgb_image.empty() || mask.empty()) throw InvalidInput("resample: empty image or mask for " + id);
    if (rgb_image.type() != CV_8UC3) throw InvalidInput("resample: image " + id + " is not 8-bit RGB");
    if (mask.channels() != 1) throw InvalidInput("resample: mask " + id + " must have one channel");

    cv::Mat img;
    cv::resize(rgb_image, img, cv::Size(kWidth, kHeight), 0, 0, cv::INTER_LINEAR);

    cv::Mat m;
    mask.convertTo(m, CV_32F);
    double lo = 0.0, hi = 0.0;
    cv::minMaxLoc(m, &lo, &hi);
    const double scale = hi > 1.0 ? 255.0 : 1.0;
    cv::resize(m, m, cv::Size(kWidth, kHeight), 0, 0, cv::INTER_NEAREST);
    cv::Mat bin = (m / scale) >= 0.5;  // 0 / 255
    bin = bin / 255;

    return {id, hwc_to_tensor(img), hwc_to_tensor(bin)};
}

CanonicalSample load_pair(const fs::path& image, const fs::path& mask, const std::string& id) {
    cv::Mat bgr = cv::imread(image.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot read image for '" + id + "': " + image.string());
    cv::Mat m = cv::imread(mask.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("cannot read mask for '" + id + "': " + mask.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return resample(rgb, m, id);
}

Dataset load_isic2018(const fs::path& root, uint64_t seed) {
    if (!fs::is_directory(root)) throw DataError("isic2018: root " + root.string() + " does not exist");
    auto image_dir = first_existing(root, {"images", "ISIC2018_Task1-2_Training_Input"});
    auto mask_dir = first_existing(root, {"masks", "ISIC2018_Task1_Training_GroundTruth"});
    if (image_dir.empty() || mask_dir.empty()) {
        throw DataError("isic2018: " + root.string() + " has no image/mask folders");
    }
    std::vector<std::pair<std::string, fs::path>> images;
    for (const auto& e : fs::directory_iterator(image_dir)) {
        if (e.is_regular_file() && is_image_file(e.path())) images.emplace_back(e.path().stem().string(), e.path());
    }
    if (images.empty()) throw DataError("isic2018: no images under " + image_dir.string());
    std::sort(images.begin(), images.end());

    std::vector<std::string> missing;
    for (const auto& [stem, path] : images) {
        if (!fs::exists(mask_dir / (stem + "_segmentation.png"))) missing.push_back(stem);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw DataError("isic2018: missing masks for " + std::to_string(missing.size()) + " image(s): " + list);
    }

    Dataset d;
    for (const auto& [stem, path] : images) {
        d.samples.push_back(load_pair(path, mask_dir / (stem + "_segmentation.png"), stem));
    }
    auto ids = d.all_ids();
    d.split = make_split("isic2018", ids, ratio_split_sizes(static_cast<int64_t>(ids.size())), seed);
    return d;
}

Dataset load_ph2(const fs::path& root, uint64_t seed) {
    if (!fs::is_directory(root)) throw DataError("ph2: root " + root.string() + " does not exist");
    auto base = fs::is_directory(root / "PH2 Dataset images") ? root / "PH2 Dataset images" : root;
    std::vector<std::string> cases;
    for (const auto& e : fs::directory_iterator(base)) {
        if (e.is_directory()) cases.push_back(e.path().filename().string());
    }
    std::sort(cases.begin(), cases.end());
    if (cases.empty()) throw DataError("ph2: no case folders under " + base.string());

    Dataset d;
    std::vector<std::string> missing;
    for (const auto& c : cases) {
        auto image = base / c / (c + "_Dermoscopic_Image") / (c + ".bmp");
        auto mask = base / c / (c + "_lesion") / (c + "_lesion.bmp");
        if (!fs::exists(image) || !fs::exists(mask)) {
            missing.push_back(c);
            continue;
        }
        d.samples.push_back(load_pair(image, mask, c));
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw DataError("ph2: incomplete case folders: " + list);
    }
    const auto n = static_cast<int64_t>(d.samples.size());
    if (n != 200) {
        std::cerr << "warning: ph2 has " << n << " cases instead of 200; using a 0.4/0.1/0.5 split\n";
    }
    d.split = make_split("ph2", d.all_ids(), ph2_split_sizes(n), seed);
    return d;
}

CanonicalSample synthetic_sample(const std::string& id, uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](double lo, double hi) {
        return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
    };

    const cv::Scalar skin(200 + uniform(-20, 20), 160 + uniform(-20, 20), 140 + uniform(-20, 20));
    const cv::Scalar lesion(110 + uniform(-25, 25), 70 + uniform(-20, 20), 55 + uniform(-15, 15));
    const cv::Point center(static_cast<int>(uniform(90, 230)), static_cast<int>(uniform(70, 154)));
    const cv::Size axes(static_cast<int>(uniform(25, 70)), static_cast<int>(uniform(20, 55)));
    const double angle = uniform(0, 180);

    cv::Mat mask = cv::Mat::zeros(kHeight, kWidth, CV_8UC1);
    cv::ellipse(mask, center, axes, angle, 0, 360, cv::Scalar(1), cv::FILLED);

    cv::Mat img(kHeight, kWidth, CV_32FC3, skin);
    img.setTo(lesion, mask);
    const double gx = uniform(-0.05, 0.05), gy = uniform(-0.05, 0.05);
    std::normal_distribution<double> noise(0.0, 10.0);
    for (int y = 0; y < kHeight; ++y) {
        auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < kWidth; ++x) {
            const double shade = gx * (x - kWidth / 2) + gy * (y - kHeight / 2);
            for (int c = 0; c < 3; ++c) row[x][c] += static_cast<float>(shade + noise(rng));
        }
    }
    cv::GaussianBlur(img, img, cv::Size(3, 3), 0.8);
    cv::Mat img8;
    img.convertTo(img8, CV_8UC3);  // saturating
    return {id, hwc_to_tensor(img8), hwc_to_tensor(mask)};
}

Dataset make_synthetic(int64_t count, uint64_t seed) {
    if (count < 1) throw InvalidInput("synthetic: count must be positive");
    Dataset d;
    std::mt19937_64 seeds(seed);
    for (int64_t i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "synthetic_%04lld", static_cast<long long>(i));
        d.samples.push_back(synthetic_sample(id, seeds()));
    }
    d.split = make_split("synthetic", d.all_ids(), ratio_split_sizes(count), seed);
    return d;
}

// ---------------------------------------------------------------------------

Sample apply_geometry(const Sample& s, Geometry g) {
    std::vector<int64_t> dims;
    if (g.vflip) dims.push_back(1);
    if (g.hflip) dims.push_back(2);
    if (dims.empty()) return s;
    return {s.id, torch::flip(s.image, dims), torch::flip(s.mask, dims)};
}

Sample augment(const Sample& s, uint64_t seed, bool enabled) {
    if (!enabled) return s;
    std::mt19937_64 rng(seed);
    const auto bits = rng();
    return apply_geometry(s, Geometry{(bits & 1u) != 0, (bits & 2u) != 0});
}

}  // namespace eamnet
