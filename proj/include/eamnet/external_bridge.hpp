#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace eamnet {

/// Learned, input-independent key/value memory, each k_mem × C.
struct ExternalMemory {
    torch::Tensor keys;    // M_k
    torch::Tensor values;  // M_v

    int64_t slots() const { return keys.size(0); }
    int64_t channels() const { return keys.size(1); }
    void validate() const;
};

struct ExternalAttentionResult {
    torch::Tensor output;    // B×C×H×W
    torch::Tensor affinity;  // A, B×n×k_mem, each row sums to one
};

/// A = Norm(F·M_kᵀ), F_out = A·M_v. Norm is a softmax over the token axis
/// followed by an L1 normalisation over the memory axis.
ExternalAttentionResult external_attention(const torch::Tensor& f, const ExternalMemory& mem);

/// Per-sample channel ranking used by the bridge's filter.
struct ChannelSelection {
    torch::Tensor scores;   // B×C, non-negative L1 norms
    torch::Tensor indices;  // B×k_sel int64, descending score, ties by ascending channel

    int64_t k() const { return indices.size(1); }
};

/// p_c = Σ_{i,j} |response_{b,c,i,j}| for every sample b and channel c.
torch::Tensor channel_l1_scores(const torch::Tensor& response);

/// Ranks channels of each row of `scores` and keeps the first `k_sel`.
/// Throws ConfigError when k_sel is 0 or exceeds C.
ChannelSelection select_top_channels(const torch::Tensor& scores, int64_t k_sel);

/// Gathers the selected channels of `x` in selection order: B×k_sel×H×W.
torch::Tensor topk_channel_select(const torch::Tensor& x, const ChannelSelection& sel);

struct EabTrace {
    torch::Tensor attended;  // external attention output, B×C×H×W
    torch::Tensor selected;  // B×k_sel×H×W
    torch::Tensor indices;   // B×k_sel
    torch::Tensor affinity;  // B×n×k_mem
    torch::Tensor output;    // restored B×C×H×W
};

/// External Attention Bridge: external attention, fixed depthwise 3×3 scoring
/// convolution, |·|, per-sample L1 top-k channel filter, and a learned 1×1
/// projection back to C channels.
class ExternalAttentionBridgeImpl : public torch::nn::Module {
public:
    /// `k_sel` <= 0 selects C / 2 (at least 1).
    ExternalAttentionBridgeImpl(int64_t channels, int64_t k_mem = 64, int64_t k_sel = 0);

    torch::Tensor forward(const torch::Tensor& f);
    torch::Tensor forward_traced(const torch::Tensor& f, EabTrace* trace);

    /// Selection scores for an external attention output (Eqs. 7-8 path).
    torch::Tensor score(const torch::Tensor& attended);

    ExternalMemory memory() const { return {mem_keys, mem_values}; }
    int64_t channels() const { return channels_; }
    int64_t k_sel() const { return k_sel_; }

    torch::Tensor mem_keys, mem_values;
    /// Scoring convolution. Registered as buffers: top-k indices carry no
    /// gradient, so these weights are fixed at initialisation.
    torch::Tensor score_weight, score_bias;
    torch::nn::Conv2d restore{nullptr};

private:
    int64_t channels_;
    int64_t k_sel_;
};
TORCH_MODULE(ExternalAttentionBridge);

}  // namespace eamnet
