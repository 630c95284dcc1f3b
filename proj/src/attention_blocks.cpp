#include "eamnet/attention_blocks.hpp"

#include "eamnet/errors.hpp"

#include <cmath>
#include <sstream>

namespace eamnet {

namespace {

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

torch::Tensor xavier(int64_t rows, int64_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    return torch::empty({rows, cols}).uniform_(-bound, bound);
}

}  // namespace

void check_feature_map(const torch::Tensor& x, const char* where) {
    if (!x.defined() || x.dim() != 4) {
        throw InvalidInput(std::string(where) + ": expected a B×C×H×W feature map");
    }
    for (int64_t d = 0; d < 4; ++d) {
        if (x.size(d) == 0) {
            throw InvalidInput(std::string(where) + ": degenerate feature map " + shape_string(x));
        }
    }
}

torch::Tensor to_tokens(const torch::Tensor& x) {
    return x.flatten(2).transpose(1, 2);
}

torch::Tensor from_tokens(const torch::Tensor& tokens, int64_t height, int64_t width) {
    const auto b = tokens.size(0);
    const auto c = tokens.size(2);
    return tokens.transpose(1, 2).reshape({b, c, height, width});
}

torch::Tensor row_softmax(const torch::Tensor& logits) {
    // torch's kernel subtracts the row maximum before exponentiating
    return torch::softmax(logits, -1);
}

AttentionResult scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                     const torch::Tensor& v) {
    if (q.dim() < 2 || q.sizes() != k.sizes() || q.sizes() != v.sizes()) {
        throw ShapeError("scaled_dot_attention: Q, K, V must share an n×D shape, got " +
                         shape_string(q) + ", " + shape_string(k) + ", " + shape_string(v));
    }
    const auto d = q.size(-1);
    if (d < 1 || q.size(-2) < 1) {
        throw ShapeError("scaled_dot_attention: empty token matrix " + shape_string(q));
    }
    auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
    auto weights = row_softmax(logits);
    return {torch::matmul(weights, v), weights};
}

// ---------------------------------------------------------------------------

SpatialAttentionImpl::SpatialAttentionImpl(int64_t kernel_size) {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ConfigError("SpatialAttention: kernel size must be odd and positive");
    }
    conv = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, kernel_size).padding(kernel_size / 2)));
}

torch::Tensor SpatialAttentionImpl::gate(const torch::Tensor& x) {
    check_feature_map(x, "spatial_attention_map");
    auto pooled = torch::cat({x.mean(1, true), std::get<0>(x.max(1, true))}, 1);
    return torch::sigmoid(conv->forward(pooled));
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& x) {
    return x * gate(x);
}

ChannelAttentionImpl::ChannelAttentionImpl(int64_t channels, int64_t reduction)
    : channels_(channels) {
    if (channels < 1 || reduction < 1) {
        throw ConfigError("ChannelAttention: channels and reduction must be positive");
    }
    const auto hidden = std::max<int64_t>(1, channels / reduction);
    fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
}

torch::Tensor ChannelAttentionImpl::gate(const torch::Tensor& x) {
    check_feature_map(x, "channel_attention_map");
    if (x.size(1) != channels_) {
        throw ShapeError("channel_attention_map: expected " + std::to_string(channels_) +
                         " channels, got " + shape_string(x));
    }
    auto mlp = [this](const torch::Tensor& v) { return fc2->forward(torch::relu(fc1->forward(v))); };
    auto avg = x.mean({2, 3});
    auto mx = x.amax({2, 3});
    auto g = torch::sigmoid(mlp(avg) + mlp(mx));
    return g.unsqueeze(-1).unsqueeze(-1);
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) {
    return x * gate(x);
}

// ---------------------------------------------------------------------------

void CmamWeights::validate() const {
    for (const auto* t : {&w1_q, &w1_k, &w1_v, &w2_q, &w2_k, &w2_v}) {
        if (!t->defined() || t->dim() != 2 || t->sizes() != w1_q.sizes()) {
            throw ShapeError("CmamWeights: all six projections must share one C×D shape");
        }
    }
    if (dim() < 1) throw ShapeError("CmamWeights: D must be at least 1");
    if (!output_proj.defined() || output_proj.dim() != 2 || output_proj.size(0) != dim() ||
        output_proj.size(1) != channels()) {
        throw ShapeError("CmamWeights: output projection must be D×C");
    }
}

CrossMixTerms cross_mix_terms(const torch::Tensor& xs, const torch::Tensor& xc,
                              const CmamWeights& w) {
    w.validate();
    check_feature_map(xs, "cmam_forward");
    if (xs.sizes() != xc.sizes()) {
        throw ShapeError("cmam_forward: anchor and complement maps differ in shape");
    }
    if (xs.size(1) != w.channels()) {
        throw ShapeError("cmam_forward: map has " + std::to_string(xs.size(1)) +
                         " channels, weights expect " + std::to_string(w.channels()));
    }
    auto ts = to_tokens(xs);
    auto tc = to_tokens(xc);

    auto sa = scaled_dot_attention(torch::matmul(ts, w.w1_q), torch::matmul(tc, w.w1_k),
                                   torch::matmul(ts, w.w1_v));
    auto ca = scaled_dot_attention(torch::matmul(tc, w.w2_q), torch::matmul(ts, w.w2_k),
                                   torch::matmul(tc, w.w2_v));
    return {sa.output, ca.output, sa.weights, ca.weights};
}

torch::Tensor cross_mix(const torch::Tensor& xs, const torch::Tensor& xc, const CmamWeights& w) {
    auto terms = cross_mix_terms(xs, xc, w);
    auto mixed = torch::matmul(terms.spatial_anchor + terms.channel_anchor, w.output_proj);
    return from_tokens(mixed, xs.size(2), xs.size(3));
}

CrossMixAttentionImpl::CrossMixAttentionImpl(int64_t channels, int64_t dim) : channels_(channels) {
    if (channels < 1) throw ConfigError("CrossMixAttention: channels must be positive");
    const auto d = dim > 0 ? dim : channels;
    spatial = register_module("spatial", SpatialAttention(7));
    channel = register_module("channel", ChannelAttention(channels, 4));
    w1_q = register_parameter("w1_q", xavier(channels, d));
    w1_k = register_parameter("w1_k", xavier(channels, d));
    w1_v = register_parameter("w1_v", xavier(channels, d));
    w2_q = register_parameter("w2_q", xavier(channels, d));
    w2_k = register_parameter("w2_k", xavier(channels, d));
    w2_v = register_parameter("w2_v", xavier(channels, d));
    output_proj = register_parameter("output_proj", xavier(d, channels));
}

CmamWeights CrossMixAttentionImpl::weights() const {
    return {w1_q, w1_k, w1_v, w2_q, w2_k, w2_v, output_proj};
}

torch::Tensor CrossMixAttentionImpl::forward(const torch::Tensor& x) {
    return forward_traced(x, nullptr);
}

torch::Tensor CrossMixAttentionImpl::forward_traced(const torch::Tensor& x, CmamTrace* trace) {
    check_feature_map(x, "cmam_forward");
    if (x.size(1) != channels_) {
        throw ShapeError("cmam_forward: map has " + std::to_string(x.size(1)) +
                         " channels, module expects " + std::to_string(channels_));
    }
    auto xs = spatial->forward(x);
    auto xc = channel->forward(x);
    auto w = weights();
    auto terms = cross_mix_terms(xs, xc, w);
    if (trace != nullptr) {
        trace->spatial_weights = terms.spatial_weights.detach();
        trace->height = x.size(2);
        trace->width = x.size(3);
    }
    auto mixed = torch::matmul(terms.spatial_anchor + terms.channel_anchor, w.output_proj);
    return x + from_tokens(mixed, x.size(2), x.size(3));
}

}  // namespace eamnet
