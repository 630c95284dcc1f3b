#pragma once

#include "eamnet/attention_blocks.hpp"
#include "eamnet/external_bridge.hpp"
#include "eamnet/multiscale_blocks.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace eamnet {

struct ModelConfig {
    std::array<int64_t, 4> stage_channels{16, 32, 64, 128};
    /// Width of the stage below the deepest encoder level, where CMAM runs.
    int64_t bottleneck_channels = 560;
    std::array<int64_t, 2> input_size = kCanonicalSize;
    bool use_mrcf = true;
    bool use_cmam = true;
    bool use_eab = true;
    int64_t k_mem = 64;
    /// Channels kept by every bridge; 0 keeps half of each level.
    int64_t k_sel = 0;
    /// CMAM projection width D; 0 uses D = bottleneck_channels.
    int64_t attention_dim = 0;
    /// n of the MRCF n×1 / 1×n branch.
    int64_t factorized_kernel = 7;
    std::vector<int64_t> dilation_rates{1, 2, 3};
    uint64_t seed = 42;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    bool operator==(const ModelConfig&) const = default;
};

/// Intermediate tensors exposed for visualisation.
struct NetworkTrace {
    CmamTrace cmam;          // bottleneck attention (empty when CMAM is off)
    EabTrace finest_bridge;  // bridge at full resolution (empty when EAB is off)
    MsdfTrace msdf;
    torch::Tensor logits;
};

/// conv3×3 → BN → ReLU, twice.
torch::nn::Sequential double_conv(int64_t in, int64_t out);

/// Encoder (MRCF or double-conv stages) → bottleneck (+CMAM) → MSEF over the
/// encoder pyramid → EAB bridges (or plain skips) → decoder → MSDF head.
class EamNetImpl : public torch::nn::Module {
public:
    explicit EamNetImpl(ModelConfig cfg);

    /// B×3×224×320 images -> B×1×224×320 lesion probabilities.
    torch::Tensor forward(const torch::Tensor& images);
    torch::Tensor forward_logits(const torch::Tensor& images);
    torch::Tensor forward_traced(const torch::Tensor& images, NetworkTrace* trace);

    const ModelConfig& config() const { return cfg_; }

    std::vector<torch::nn::Sequential> encoder;
    torch::nn::Sequential bottleneck{nullptr};
    CrossMixAttention cmam{nullptr};
    Msef msef{nullptr};
    std::vector<ExternalAttentionBridge> bridges;
    std::vector<torch::nn::Conv2d> up_projections;
    std::vector<torch::nn::Sequential> decoder;
    Msdf msdf{nullptr};

private:
    ModelConfig cfg_;
};
TORCH_MODULE(EamNet);

/// Seeds the global generator with cfg.seed and builds an initialised model.
EamNet build_model(const ModelConfig& cfg);

/// Number of trainable scalars.
int64_t count_parameters(const torch::nn::Module& module);

/// Single-file checkpoint: "EAMNET1" magic, JSON metadata (model config,
/// seed and caller-supplied fields), then every parameter and buffer.
void save_checkpoint(const std::filesystem::path& path, const EamNet& model,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
    ModelConfig config;
    nlohmann::json metadata;
    EamNet model{nullptr};
};

/// Throws DataError for unreadable, truncated or mismatched files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Order-sensitive FNV-1a digest of every parameter and buffer byte.
uint64_t weights_digest(const torch::nn::Module& module);

}  // namespace eamnet
