#include "eamnet/multiscale_blocks.hpp"

#include "eamnet/attention_blocks.hpp"
#include "eamnet/errors.hpp"

#include <sstream>

namespace eamnet {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, std::array<int64_t, 2> kernel, int64_t dilation = 1) {
    // "same" padding for odd kernels
    auto opts = torch::nn::Conv2dOptions(in, out, {kernel[0], kernel[1]})
                    .padding({dilation * (kernel[0] / 2), dilation * (kernel[1] / 2)})
                    .dilation(dilation);
    return torch::nn::Conv2d(opts);
}

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

}  // namespace

torch::Tensor resize_bilinear(const torch::Tensor& x, int64_t height, int64_t width) {
    if (x.size(2) == height && x.size(3) == width) return x;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

// ---------------------------------------------------------------------------

std::vector<int64_t> MrcfConfig::effective_extents() const {
    std::vector<int64_t> extents;
    for (auto d : dilation_rates) extents.push_back(3 + 2 * (d - 1));
    return extents;
}

void MrcfConfig::validate() const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError("MRCF: channel counts must be positive");
    if (out_channels % 4 != 0) {
        throw ConfigError("MRCF: out_channels must be divisible by 4, got " + std::to_string(out_channels));
    }
    const auto b = branch_width();
    if (b < 4 || b % 4 != 0) {
        throw ConfigError("MRCF: branch width must be a positive multiple of 4, got " + std::to_string(b));
    }
    if (branch_kernel_sizes.size() != 2) {
        throw ConfigError("MRCF: branch_kernel_sizes must be {square, factorized}");
    }
    for (auto k : branch_kernel_sizes) {
        if (k < 1 || k % 2 == 0) throw ConfigError("MRCF: branch kernels must be odd");
    }
    if (dilation_rates.size() != 3) throw ConfigError("MRCF: exactly three dilation rates are required");
    for (auto d : dilation_rates) {
        if (d < 1) throw ConfigError("MRCF: dilation rates must be positive");
    }
    auto ext = effective_extents();
    for (size_t i = 1; i < ext.size(); ++i) {
        if (ext[i] <= ext[i - 1]) throw ConfigError("MRCF: dilation rates must give growing receptive fields");
    }
}

GhostSplitImpl::GhostSplitImpl(int64_t channels, std::vector<int64_t> dilation_rates)
    : channels_(channels) {
    if (channels < 4 || channels % 4 != 0) {
        throw ConfigError("ghost_split_transform: channels must be divisible by 4, got " +
                          std::to_string(channels));
    }
    if (dilation_rates.size() != 3) throw ConfigError("ghost_split_transform: three dilation rates required");
    const auto g = channels / 4;
    for (size_t i = 0; i < 3; ++i) {
        convs.push_back(register_module("conv" + std::to_string(i + 1),
                                        conv(g, g, {3, 3}, dilation_rates[i])));
    }
}

torch::Tensor GhostSplitImpl::forward(const torch::Tensor& x) {
    check_feature_map(x, "ghost_split_transform");
    if (x.size(1) != channels_) {
        throw ConfigError("ghost_split_transform: expected " + std::to_string(channels_) +
                          " channels, got " + std::to_string(x.size(1)));
    }
    auto groups = x.chunk(4, 1);
    std::vector<torch::Tensor> out{groups[0]};
    for (size_t i = 0; i < 3; ++i) out.push_back(convs[i]->forward(groups[i + 1]));
    return torch::cat(out, 1);
}

MrcfImpl::MrcfImpl(MrcfConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto in = cfg_.in_channels;
    const auto b = cfg_.branch_width();
    const auto k = cfg_.branch_kernel_sizes[0];
    const auto n = cfg_.branch_kernel_sizes[1];
    torch::nn::ReLU relu;

    torch::nn::Sequential b0(conv(in, b, {1, 1}), relu);
    torch::nn::Sequential b1(conv(in, b, {1, 1}), relu, conv(b, b, {k, k}), relu);
    torch::nn::Sequential b2(conv(in, b, {1, 1}), relu, conv(b, b, {k, k}), relu, conv(b, b, {k, k}), relu);
    torch::nn::Sequential b3(conv(in, b, {1, 1}), relu, conv(b, b, {1, n}), relu, conv(b, b, {n, 1}), relu);
    for (auto& seq : {b0, b1, b2, b3}) {
        branches.push_back(register_module("branch" + std::to_string(branches.size()), seq));
        ghosts.push_back(register_module("ghost" + std::to_string(ghosts.size()),
                                         GhostSplit(b, cfg_.dilation_rates)));
    }
    fuse = register_module("fuse", conv(4 * b, cfg_.out_channels, {1, 1}));
    norm = register_module("norm", torch::nn::BatchNorm2d(cfg_.out_channels));
    if (in != cfg_.out_channels) shortcut = register_module("shortcut", conv(in, cfg_.out_channels, {1, 1}));
}

torch::Tensor MrcfImpl::forward(const torch::Tensor& x) {
    check_feature_map(x, "mrcf_forward");
    if (x.size(1) != cfg_.in_channels) {
        throw ShapeError("mrcf_forward: expected " + std::to_string(cfg_.in_channels) +
                         " input channels, got " + shape_string(x));
    }
    std::vector<torch::Tensor> outs;
    outs.reserve(4);
    for (size_t i = 0; i < 4; ++i) outs.push_back(ghosts[i]->forward(branches[i]->forward(x)));
    auto y = norm->forward(fuse->forward(torch::cat(outs, 1)));
    auto skip = shortcut ? shortcut->forward(x) : x;
    return torch::relu(y + skip);
}

// ---------------------------------------------------------------------------

void PyramidFeatures::validate(bool require_canonical) const {
    for (size_t i = 0; i < 4; ++i) check_feature_map(levels[i], "pyramid");
    const auto batch = levels[0].size(0);
    for (size_t i = 1; i < 4; ++i) {
        if (levels[i].size(0) != batch) throw ShapeError("pyramid: levels disagree on batch size");
        if (levels[i].size(2) > levels[i - 1].size(2) || levels[i].size(3) > levels[i - 1].size(3)) {
            throw ShapeError("pyramid: level " + std::to_string(i) + " is larger than level " +
                             std::to_string(i - 1));
        }
    }
    if (require_canonical &&
        (levels[0].size(2) != kCanonicalSize[0] || levels[0].size(3) != kCanonicalSize[1])) {
        throw ShapeError("pyramid: finest level must be 224×320, got " + shape_string(levels[0]));
    }
}

MsefImpl::MsefImpl(std::array<int64_t, 4> ch) : channels(ch) {
    for (size_t i = 0; i < 4; ++i) {
        const auto hidden = std::max<int64_t>(4, ch[i] / 4);
        level_mlps.push_back(register_module(
            "mlp" + std::to_string(i),
            torch::nn::Sequential(torch::nn::Linear(ch[i], hidden), torch::nn::ReLU(),
                                  torch::nn::Linear(hidden, 4))));
    }
    for (size_t i = 0; i < 4; ++i) {
        for (size_t j = 0; j < 4; ++j) {
            if (i == j) {
                projections.emplace_back(nullptr);
                continue;
            }
            projections.push_back(register_module("proj" + std::to_string(j) + "to" + std::to_string(i),
                                                  conv(ch[j], ch[i], {1, 1})));
        }
    }
}

PyramidFeatures MsefImpl::forward(const PyramidFeatures& p) {
    return forward_with_weights(p, nullptr);
}

PyramidFeatures MsefImpl::forward_with_weights(const PyramidFeatures& p,
                                               std::array<torch::Tensor, 4>* weights) {
    p.validate(false);
    for (size_t i = 0; i < 4; ++i) {
        if (p.levels[i].size(1) != channels[i]) throw ShapeError("msef_fuse: level width mismatch");
    }
    PyramidFeatures out;
    for (size_t i = 0; i < 4; ++i) {
        const auto& target = p.levels[i];
        auto w = row_softmax(level_mlps[i]->forward(target.mean({2, 3})));  // B×4
        if (weights != nullptr) (*weights)[i] = w;
        torch::Tensor acc;
        for (size_t j = 0; j < 4; ++j) {
            auto wj = w.select(1, static_cast<int64_t>(j)).view({-1, 1, 1, 1});
            torch::Tensor term;
            if (i == j) {
                term = wj * target;
            } else if (j > i) {
                // 1×1 projection and per-sample scaling commute with bilinear
                // resampling, so both run at the coarser source resolution.
                term = resize_bilinear(wj * projections[i * 4 + j]->forward(p.levels[j]), target.size(2),
                                       target.size(3));
            } else {
                term = wj * projections[i * 4 + j]->forward(
                                resize_bilinear(p.levels[j], target.size(2), target.size(3)));
            }
            acc = acc.defined() ? acc + term : term;
        }
        out.levels[i] = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------

torch::Tensor msdf_combine(const torch::Tensor& fc, const torch::Tensor& alpha,
                           const torch::Tensor& beta) {
    const auto groups = alpha.size(1);
    if (groups < 1 || fc.size(1) % groups != 0) {
        throw ShapeError("msdf_combine: F_c channels not divisible by the number of α groups");
    }
    auto a = alpha.repeat_interleave(fc.size(1) / groups, 1);
    auto fa = fc * a;
    return fa * beta + fa + fc;
}

MsdfImpl::MsdfImpl(std::array<int64_t, 4> channels, std::array<int64_t, 2> size) : output_size(size) {
    for (size_t i = 0; i < 4; ++i) {
        compressors.push_back(
            register_module("compress" + std::to_string(i), conv(channels[i], 4, {1, 1})));
    }
    alpha_fc1 = register_module("alpha_fc1", torch::nn::Linear(32, 16));
    alpha_fc2 = register_module("alpha_fc2", torch::nn::Linear(16, 4));
    beta_conv = register_module("beta_conv", conv(2, 1, {7, 7}));
    head = register_module("head", conv(16, 1, {1, 1}));
}

torch::Tensor MsdfImpl::compress(const PyramidFeatures& p) {
    std::vector<torch::Tensor> parts;
    for (size_t i = 0; i < 4; ++i) {
        // compress first: the 1×1 map commutes with bilinear upsampling
        parts.push_back(resize_bilinear(compressors[i]->forward(p.levels[i]), output_size[0],
                                        output_size[1]));
    }
    return torch::cat(parts, 1);
}

torch::Tensor MsdfImpl::alpha(const torch::Tensor& fc) {
    auto pooled = torch::cat({fc.mean({2, 3}), fc.amax({2, 3})}, 1);
    auto a = torch::sigmoid(alpha_fc2->forward(torch::relu(alpha_fc1->forward(pooled))));
    return a.unsqueeze(-1).unsqueeze(-1);
}

torch::Tensor MsdfImpl::beta(const torch::Tensor& gated) {
    auto pooled = torch::cat({gated.mean(1, true), std::get<0>(gated.max(1, true))}, 1);
    return torch::sigmoid(beta_conv->forward(pooled));
}

torch::Tensor MsdfImpl::forward(const PyramidFeatures& p) {
    return forward_traced(p, nullptr);
}

torch::Tensor MsdfImpl::forward_traced(const PyramidFeatures& p, MsdfTrace* trace) {
    p.validate(false);
    if (p.levels[0].size(2) != output_size[0] || p.levels[0].size(3) != output_size[1]) {
        throw ShapeError("msdf_fuse: finest level must be " + std::to_string(output_size[0]) + "×" +
                         std::to_string(output_size[1]) + ", got " + shape_string(p.levels[0]));
    }
    auto fc = compress(p);
    auto a = alpha(fc);
    auto b = beta(fc * a.repeat_interleave(4, 1));
    auto y = msdf_combine(fc, a, b);
    if (trace != nullptr) *trace = {fc, a, b, y};
    return head->forward(y);
}

}  // namespace eamnet
