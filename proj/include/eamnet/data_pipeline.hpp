#pragma once

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace eamnet {

/// Image/mask pair at 224×320, as stored in memory.
struct CanonicalSample {
    std::string id;
    torch::Tensor image;  // 3×224×320 uint8, RGB
    torch::Tensor mask;   // 1×224×320 uint8, values in {0, 1}
};

/// Network-ready pair.
struct Sample {
    std::string id;
    torch::Tensor image;  // 3×224×320 float, channel-normalised
    torch::Tensor mask;   // 1×224×320 float, values in {0, 1}
};

/// Per-channel mean/std in 0..255 pixel units.
struct Normalization {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};

    /// Statistics over the listed samples only.
    static Normalization fit(const std::vector<const CanonicalSample*>& samples);
    torch::Tensor apply(const torch::Tensor& image_u8) const;

    nlohmann::json to_json() const;
    static Normalization from_json(const nlohmann::json& j);
};

/// Ordered collection of canonical samples sharing one normalisation.
class SegmentationSet {
public:
    SegmentationSet() = default;
    SegmentationSet(std::vector<CanonicalSample> items, Normalization norm);

    size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const std::string& id(size_t i) const { return items_.at(i).id; }
    const CanonicalSample& raw(size_t i) const { return items_.at(i); }
    Sample sample(size_t i) const;
    const Normalization& normalization() const { return norm_; }

private:
    std::vector<CanonicalSample> items_;
    Normalization norm_;
};

struct SplitSizes {
    int64_t train = 0, val = 0, test = 0;
    bool operator==(const SplitSizes&) const = default;
};

/// 7:1:2 with floor(0.7N), floor(0.1N) and the remainder for test.
SplitSizes ratio_split_sizes(int64_t n);
/// 80/20/100 for the canonical 200 cases, otherwise floor(0.4N), floor(0.1N), remainder.
SplitSizes ph2_split_sizes(int64_t n);

struct SplitSpec {
    std::string dataset;
    uint64_t seed = 42;
    std::vector<std::string> train_ids, val_ids, test_ids;

    SplitSizes sizes() const {
        return {static_cast<int64_t>(train_ids.size()), static_cast<int64_t>(val_ids.size()),
                static_cast<int64_t>(test_ids.size())};
    }
    const std::vector<std::string>& ids(const std::string& part) const;

    /// Throws DataError unless the three lists partition `all_ids`.
    void validate(const std::vector<std::string>& all_ids) const;

    /// Line-delimited manifest: "dataset <name>", "seed <n>", then one
    /// "<train|val|test> <id>" line per sample.
    std::string to_manifest() const;
    static SplitSpec from_manifest(const std::string& text);
    void write(const std::filesystem::path& path) const;
    static SplitSpec read(const std::filesystem::path& path);
};

/// Sorts the ids, shuffles them with a seeded permutation and cuts them by `sizes`.
SplitSpec make_split(const std::string& dataset, std::vector<std::string> ids, SplitSizes sizes,
                     uint64_t seed);

struct Dataset {
    SplitSpec split;
    std::vector<CanonicalSample> samples;

    /// Statistics over the training ids only.
    Normalization train_normalization() const;
    SegmentationSet subset(const std::vector<std::string>& ids, const Normalization& norm) const;
    /// Subset for "train", "val" or "test" normalised by the training statistics.
    SegmentationSet part(const std::string& name) const;
    std::vector<std::string> all_ids() const;
};

/// Bilinear resize of the image and nearest-neighbour resize of the mask to
/// 224×320, then mask re-binarisation at half of the mask's value range.
CanonicalSample resample(const cv::Mat& rgb_image, const cv::Mat& mask, const std::string& id);

/// Reads an image/mask file pair and resamples it. Throws DataError naming the id.
CanonicalSample load_pair(const std::filesystem::path& image, const std::filesystem::path& mask,
                          const std::string& id);

/// ISIC2018 task-1 layout: an image folder (images/ or ISIC2018_Task1-2_Training_Input/)
/// and a mask folder (masks/ or ISIC2018_Task1_Training_GroundTruth/) holding
/// "<stem>_segmentation.png" for every image stem.
Dataset load_isic2018(const std::filesystem::path& root, uint64_t seed);

/// PH2 layout: per-case folders <case>/<case>_Dermoscopic_Image/<case>.bmp and
/// <case>/<case>_lesion/<case>_lesion.bmp, either directly under `root` or under
/// "root/PH2 Dataset images".
Dataset load_ph2(const std::filesystem::path& root, uint64_t seed);

/// Seeded dermoscopy-like images: noisy skin background with one dark
/// elliptical lesion; the mask is the ellipse. Split 7:1:2.
Dataset make_synthetic(int64_t count, uint64_t seed);

/// Renders one synthetic pair (used by make_synthetic).
CanonicalSample synthetic_sample(const std::string& id, uint64_t seed);

struct Geometry {
    bool hflip = false;
    bool vflip = false;
};

/// Applies the same flips to image and mask.
Sample apply_geometry(const Sample& s, Geometry g);

/// Random horizontal/vertical flips (a double flip is the 180° rotation)
/// drawn from `seed`; identity when `enabled` is false.
Sample augment(const Sample& s, uint64_t seed, bool enabled = true);

}  // namespace eamnet
