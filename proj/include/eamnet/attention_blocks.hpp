#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace eamnet {

/// Activation volume laid out as batch × channels × height × width.
using FeatureMap = torch::Tensor;

/// Throws InvalidInput unless `x` is a 4-D map with non-zero extents.
void check_feature_map(const torch::Tensor& x, const char* where);

/// B×C×H×W -> B×n×C with n = H·W (row-major over H, W).
torch::Tensor to_tokens(const torch::Tensor& x);
/// Inverse of to_tokens.
torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width);

/// Softmax along the last axis with the row maximum subtracted first.
torch::Tensor row_softmax(const torch::Tensor& logits);

struct AttentionResult {
    torch::Tensor output;   // (..., n, D)
    torch::Tensor weights;  // (..., n, n), rows sum to one
};

/// SoftMax(Q·Kᵀ/√D)·V over the trailing two axes. Leading axes are batch axes.
AttentionResult scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                     const torch::Tensor& v);

/// CBAM-style spatial gate: sigmoid(conv7x7([mean_c(x), max_c(x)])).
class SpatialAttentionImpl : public torch::nn::Module {
public:
    explicit SpatialAttentionImpl(int64_t kernel_size = 7);

    /// Per-pixel gate, B×1×H×W in [0,1].
    torch::Tensor gate(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(SpatialAttention);

/// CBAM-style channel gate: sigmoid(mlp(avgpool(x)) + mlp(maxpool(x))) with a
/// shared bottleneck MLP.
class ChannelAttentionImpl : public torch::nn::Module {
public:
    explicit ChannelAttentionImpl(int64_t channels, int64_t reduction = 4);

    /// Per-channel gate, B×C×1×1 in [0,1].
    torch::Tensor gate(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t channels() const { return channels_; }

    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};

private:
    int64_t channels_;
};
TORCH_MODULE(ChannelAttention);

/// Projection matrices of the cross-mix attention. Tensors alias the owning
/// module's parameters, so gradients flow through them.
struct CmamWeights {
    torch::Tensor w1_q, w1_k, w1_v;  // C×D, anchor = spatially gated map
    torch::Tensor w2_q, w2_k, w2_v;  // C×D, anchor = channel gated map
    torch::Tensor output_proj;       // D×C

    int64_t channels() const { return w1_q.size(0); }
    int64_t dim() const { return w1_q.size(1); }

    /// Throws ShapeError if the six projections disagree or D < 1.
    void validate() const;
};

/// The two summands of the cross-mix, both in token space (B×n×D).
struct CrossMixTerms {
    torch::Tensor spatial_anchor;      // SA(Q^s, K^c, V^s)
    torch::Tensor channel_anchor;      // CA(Q^c, K^s, V^c)
    torch::Tensor spatial_weights;     // B×n×n softmax of the SA term
    torch::Tensor channel_weights;     // B×n×n softmax of the CA term
};

/// Evaluates both mixed attentions from the gated maps `xs` (anchor) and `xc`
/// (complement), each B×C×H×W.
CrossMixTerms cross_mix_terms(const torch::Tensor& xs, const torch::Tensor& xc,
                              const CmamWeights& w);

/// (SA + CA)·output_proj reshaped back to B×C×H×W. No residual.
torch::Tensor cross_mix(const torch::Tensor& xs, const torch::Tensor& xc, const CmamWeights& w);

struct CmamTrace {
    torch::Tensor spatial_weights;  // B×n×n
    int64_t height = 0;
    int64_t width = 0;
};

/// Cross-Mix Attention Module. forward(x) = x + cross_mix(spatial(x), channel(x), w).
class CrossMixAttentionImpl : public torch::nn::Module {
public:
    /// `dim` <= 0 selects D = channels.
    explicit CrossMixAttentionImpl(int64_t channels, int64_t dim = 0);

    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor forward_traced(const torch::Tensor& x, CmamTrace* trace);

    CmamWeights weights() const;
    int64_t channels() const { return channels_; }

    SpatialAttention spatial{nullptr};
    ChannelAttention channel{nullptr};
    torch::Tensor w1_q, w1_k, w1_v, w2_q, w2_k, w2_v, output_proj;

private:
    int64_t channels_;
};
TORCH_MODULE(CrossMixAttention);

}  // namespace eamnet
