#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <vector>

namespace eamnet {

/// Height × width of the network's canonical input and of the MSDF output.
inline constexpr std::array<int64_t, 2> kCanonicalSize{224, 320};

/// Bilinear (align_corners = false) rescale of a B×C×H×W map.
torch::Tensor resize_bilinear(const torch::Tensor& x, int64_t height, int64_t width);

struct MrcfConfig {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    /// Width of each of the four parallel branches; 0 selects out_channels / 4.
    int64_t branch_channels = 0;
    /// {square kernel, n of the n×1 / 1×n pair}.
    std::vector<int64_t> branch_kernel_sizes{3, 7};
    /// One rate per transformed ghost group.
    std::vector<int64_t> dilation_rates{1, 2, 3};

    int64_t branch_width() const { return branch_channels > 0 ? branch_channels : out_channels / 4; }

    /// Spatial extent k + (k-1)(d-1) of each dilated 3×3 ghost convolution.
    std::vector<int64_t> effective_extents() const;

    /// Throws ConfigError on any broken invariant.
    void validate() const;
};

/// Splits channels into four equal groups; group 0 passes through untouched and
/// groups 1..3 each get a dilated 3×3 convolution at their own rate.
class GhostSplitImpl : public torch::nn::Module {
public:
    GhostSplitImpl(int64_t channels, std::vector<int64_t> dilation_rates);

    torch::Tensor forward(const torch::Tensor& x);

    int64_t channels() const { return channels_; }

    std::vector<torch::nn::Conv2d> convs;

private:
    int64_t channels_;
};
TORCH_MODULE(GhostSplit);

/// Multi-Resolution multi-Channel Fusion block.
///
/// Four parallel branches, each opened by a 1×1 bottleneck:
///   b0: 1×1
///   b1: 1×1 → 3×3
///   b2: 1×1 → 3×3 → 3×3       (5×5 receptive field)
///   b3: 1×1 → 1×n → n×1
/// Every branch ends in a GhostSplit. The four outputs are concatenated, fused
/// by a 1×1 convolution with batch norm, added to a (projected) shortcut and
/// passed through ReLU. H×W is preserved.
class MrcfImpl : public torch::nn::Module {
public:
    explicit MrcfImpl(MrcfConfig cfg);

    torch::Tensor forward(const torch::Tensor& x);

    const MrcfConfig& config() const { return cfg_; }

    std::vector<torch::nn::Sequential> branches;
    std::vector<GhostSplit> ghosts;
    torch::nn::Conv2d fuse{nullptr};
    torch::nn::BatchNorm2d norm{nullptr};
    torch::nn::Conv2d shortcut{nullptr};  // null when in == out

private:
    MrcfConfig cfg_;
};
TORCH_MODULE(Mrcf);

/// Four encoder (or decoder) levels, finest first.
struct PyramidFeatures {
    std::array<torch::Tensor, 4> levels;

    /// Batch consistency and non-increasing spatial size. With
    /// `require_canonical`, level 0 must be exactly 224×320.
    void validate(bool require_canonical) const;
};

/// Multi-scale encoding fusion. Level i becomes Σ_j w_ij · T_ij(G_j) where
/// T_ii is the identity, T_ij (j ≠ i) is a 1×1 projection to level i's width
/// followed by a bilinear rescale, and w_i = softmax(mlp_i(gap(G_i))) over the
/// four source levels.
class MsefImpl : public torch::nn::Module {
public:
    explicit MsefImpl(std::array<int64_t, 4> channels);

    PyramidFeatures forward(const PyramidFeatures& p);
    /// Same as forward; `weights` receives one B×4 tensor per target level.
    PyramidFeatures forward_with_weights(const PyramidFeatures& p,
                                         std::array<torch::Tensor, 4>* weights);

    std::array<int64_t, 4> channels;
    std::vector<torch::nn::Sequential> level_mlps;
    /// projections[i * 4 + j] maps level j to level i; null on the diagonal.
    std::vector<torch::nn::Conv2d> projections;
};
TORCH_MODULE(Msef);

/// Y_out = F_c·α·β + F_c·α + F_c with α of shape B×G×1×1 broadcast over
/// groups of F_c.size(1)/G channels and β of shape B×1×H×W.
torch::Tensor msdf_combine(const torch::Tensor& fc, const torch::Tensor& alpha,
                           const torch::Tensor& beta);

struct MsdfTrace {
    torch::Tensor fc;     // B×16×H×W
    torch::Tensor alpha;  // B×4×1×1
    torch::Tensor beta;   // B×1×H×W
    torch::Tensor fused;  // Y_out before the output projection
};

/// Multi-scale decoding fusion head producing one logit channel.
class MsdfImpl : public torch::nn::Module {
public:
    explicit MsdfImpl(std::array<int64_t, 4> channels,
                      std::array<int64_t, 2> output_size = kCanonicalSize);

    torch::Tensor forward(const PyramidFeatures& p);
    torch::Tensor forward_traced(const PyramidFeatures& p, MsdfTrace* trace);

    /// Concat of the four 4-channel compressions at output resolution.
    torch::Tensor compress(const PyramidFeatures& p);
    /// Per-level coefficients, B×4×1×1 in [0,1].
    torch::Tensor alpha(const torch::Tensor& fc);
    /// Pixel coefficients computed from F_c·α, B×1×H×W in [0,1].
    torch::Tensor beta(const torch::Tensor& gated);

    std::array<int64_t, 2> output_size;
    std::vector<torch::nn::Conv2d> compressors;
    torch::nn::Linear alpha_fc1{nullptr};
    torch::nn::Linear alpha_fc2{nullptr};
    torch::nn::Conv2d beta_conv{nullptr};
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(Msdf);

}  // namespace eamnet
