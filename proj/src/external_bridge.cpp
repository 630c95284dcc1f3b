#include "eamnet/external_bridge.hpp"

#include "eamnet/attention_blocks.hpp"
#include "eamnet/errors.hpp"

#include <cmath>
#include <limits>

namespace eamnet {

void ExternalMemory::validate() const {
    if (!keys.defined() || !values.defined() || keys.dim() != 2 || keys.sizes() != values.sizes()) {
        throw ShapeError("ExternalMemory: M_k and M_v must share one k_mem×C shape");
    }
    if (slots() < 1 || channels() < 1) throw ShapeError("ExternalMemory: empty memory");
}

ExternalAttentionResult external_attention(const torch::Tensor& f, const ExternalMemory& mem) {
    mem.validate();
    check_feature_map(f, "external_attention");
    if (f.size(1) != mem.channels()) {
        throw ShapeError("external_attention: map has " + std::to_string(f.size(1)) +
                         " channels, memory has " + std::to_string(mem.channels()));
    }
    auto tokens = to_tokens(f);                                       // B×n×C
    auto logits = torch::matmul(tokens, mem.keys.t());                // B×n×k
    auto a = torch::softmax(logits, 1);                               // over tokens
    auto denom = a.sum(-1, /*keepdim=*/true).clamp_min(std::numeric_limits<float>::min());
    a = a / denom;                                                    // L1 over memory
    auto out = torch::matmul(a, mem.values);                          // B×n×C
    return {from_tokens(out, f.size(2), f.size(3)), a};
}

torch::Tensor channel_l1_scores(const torch::Tensor& response) {
    check_feature_map(response, "channel_l1_scores");
    return response.abs().sum({2, 3});
}

ChannelSelection select_top_channels(const torch::Tensor& scores, int64_t k_sel) {
    if (scores.dim() != 2) throw ShapeError("select_top_channels: scores must be B×C");
    const auto c = scores.size(1);
    if (k_sel < 1 || k_sel > c) {
        throw ConfigError("topk_channel_select: k_sel must lie in [1, " + std::to_string(c) +
                          "], got " + std::to_string(k_sel));
    }
    // A stable descending sort keeps equal scores in ascending channel order.
    auto order = std::get<1>(torch::sort(scores.detach(), /*stable=*/true, /*dim=*/1, /*descending=*/true));
    return {scores, order.narrow(1, 0, k_sel).contiguous()};
}

torch::Tensor topk_channel_select(const torch::Tensor& x, const ChannelSelection& sel) {
    check_feature_map(x, "topk_channel_select");
    if (sel.indices.dim() != 2 || sel.indices.size(0) != x.size(0)) {
        throw ShapeError("topk_channel_select: selection does not match the batch");
    }
    if (sel.k() < 1 || sel.k() > x.size(1)) {
        throw ConfigError("topk_channel_select: k_sel must lie in [1, C]");
    }
    auto idx = sel.indices.view({x.size(0), sel.k(), 1, 1}).expand({-1, -1, x.size(2), x.size(3)});
    return x.gather(1, idx);
}

ExternalAttentionBridgeImpl::ExternalAttentionBridgeImpl(int64_t channels, int64_t k_mem, int64_t k_sel)
    : channels_(channels), k_sel_(k_sel > 0 ? k_sel : std::max<int64_t>(1, channels / 2)) {
    if (channels < 1 || k_mem < 1) throw ConfigError("EAB: channels and k_mem must be positive");
    if (k_sel_ > channels) {
        throw ConfigError("EAB: k_sel " + std::to_string(k_sel_) + " exceeds " + std::to_string(channels) +
                          " channels");
    }
    // Memory units behave like bias-free linear layers C -> k_mem -> C.
    const double key_bound = 1.0 / std::sqrt(static_cast<double>(channels));
    const double value_bound = 1.0 / std::sqrt(static_cast<double>(k_mem));
    mem_keys = register_parameter("mem_keys", torch::empty({k_mem, channels}).uniform_(-key_bound, key_bound));
    mem_values =
        register_parameter("mem_values", torch::empty({k_mem, channels}).uniform_(-value_bound, value_bound));

    const double score_bound = 1.0 / 3.0;  // 1/sqrt(fan_in = 9)
    score_weight = register_buffer("score_weight",
                                   torch::empty({channels, 1, 3, 3}).uniform_(-score_bound, score_bound));
    score_bias = register_buffer("score_bias", torch::empty({channels}).uniform_(-score_bound, score_bound));
    restore = register_module("restore", torch::nn::Conv2d(torch::nn::Conv2dOptions(k_sel_, channels, 1)));
}

torch::Tensor ExternalAttentionBridgeImpl::score(const torch::Tensor& attended) {
    torch::NoGradGuard no_grad;
    auto response = torch::conv2d(attended, score_weight, score_bias, /*stride=*/1, /*padding=*/1,
                                  /*dilation=*/1, /*groups=*/channels_);
    return channel_l1_scores(response.abs());
}

torch::Tensor ExternalAttentionBridgeImpl::forward(const torch::Tensor& f) {
    return forward_traced(f, nullptr);
}

torch::Tensor ExternalAttentionBridgeImpl::forward_traced(const torch::Tensor& f, EabTrace* trace) {
    auto ea = external_attention(f, memory());
    auto sel = select_top_channels(score(ea.output), k_sel_);
    auto selected = topk_channel_select(ea.output, sel);
    auto out = restore->forward(selected);
    if (trace != nullptr) *trace = {ea.output, selected, sel.indices, ea.affinity, out};
    return out;
}

}  // namespace eamnet
