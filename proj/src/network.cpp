#include "eamnet/network.hpp"

#include "eamnet/errors.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace eamnet {

namespace {

constexpr char kMagic[] = "EAMNET1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;

torch::Tensor max_pool2(const torch::Tensor& x) {
    return torch::max_pool2d(x, {2, 2}, {2, 2});
}

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

}  // namespace

void ModelConfig::validate() const {
    for (size_t i = 0; i < 4; ++i) {
        if (stage_channels[i] < 1) throw ConfigError("ModelConfig: stage widths must be positive");
        if (i > 0 && stage_channels[i] <= stage_channels[i - 1]) {
            throw ConfigError("ModelConfig: stage widths must be strictly increasing");
        }
    }
    if (bottleneck_channels < 1) throw ConfigError("ModelConfig: bottleneck width must be positive");
    if (input_size != kCanonicalSize) throw ConfigError("ModelConfig: input size is fixed at 224×320");
    if (k_mem < 1) throw ConfigError("ModelConfig: k_mem must be positive");
    if (k_sel < 0 || k_sel > stage_channels[0]) {
        throw ConfigError("ModelConfig: k_sel must lie in [0, " + std::to_string(stage_channels[0]) + "]");
    }
    if (attention_dim < 0) throw ConfigError("ModelConfig: attention_dim must be non-negative");
    if (use_mrcf) {
        for (size_t i = 0; i < 4; ++i) {
            MrcfConfig{i == 0 ? 3 : stage_channels[i - 1], stage_channels[i], 0, {3, factorized_kernel},
                       dilation_rates}
                .validate();
        }
        MrcfConfig{stage_channels[3], bottleneck_channels, 0, {3, factorized_kernel}, dilation_rates}.validate();
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"stage_channels", stage_channels},
            {"bottleneck_channels", bottleneck_channels},
            {"input_size", input_size},
            {"use_mrcf", use_mrcf},
            {"use_cmam", use_cmam},
            {"use_eab", use_eab},
            {"k_mem", k_mem},
            {"k_sel", k_sel},
            {"attention_dim", attention_dim},
            {"factorized_kernel", factorized_kernel},
            {"dilation_rates", dilation_rates},
            {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.stage_channels = j.value("stage_channels", c.stage_channels);
        c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
        c.input_size = j.value("input_size", c.input_size);
        c.use_mrcf = j.value("use_mrcf", c.use_mrcf);
        c.use_cmam = j.value("use_cmam", c.use_cmam);
        c.use_eab = j.value("use_eab", c.use_eab);
        c.k_mem = j.value("k_mem", c.k_mem);
        c.k_sel = j.value("k_sel", c.k_sel);
        c.attention_dim = j.value("attention_dim", c.attention_dim);
        c.factorized_kernel = j.value("factorized_kernel", c.factorized_kernel);
        c.dilation_rates = j.value("dilation_rates", c.dilation_rates);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ModelConfig: ") + e.what());
    }
    return c;
}

torch::nn::Sequential double_conv(int64_t in, int64_t out) {
    using namespace torch::nn;
    return Sequential(Conv2d(Conv2dOptions(in, out, 3).padding(1).bias(false)), BatchNorm2d(out), ReLU(),
                      Conv2d(Conv2dOptions(out, out, 3).padding(1).bias(false)), BatchNorm2d(out), ReLU());
}

EamNetImpl::EamNetImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& ch = cfg_.stage_channels;
    auto stage = [this](int64_t in, int64_t out) {
        if (!cfg_.use_mrcf) return double_conv(in, out);
        return torch::nn::Sequential(
            Mrcf(MrcfConfig{in, out, 0, {3, cfg_.factorized_kernel}, cfg_.dilation_rates}));
    };
    for (size_t i = 0; i < 4; ++i) {
        encoder.push_back(register_module("enc" + std::to_string(i), stage(i == 0 ? 3 : ch[i - 1], ch[i])));
    }
    bottleneck = register_module("bottleneck", stage(ch[3], cfg_.bottleneck_channels));
    if (cfg_.use_cmam) {
        cmam = register_module("cmam", CrossMixAttention(cfg_.bottleneck_channels, cfg_.attention_dim));
    }
    msef = register_module("msef", Msef(ch));
    if (cfg_.use_eab) {
        for (size_t i = 0; i < 4; ++i) {
            bridges.push_back(register_module("eab" + std::to_string(i),
                                              ExternalAttentionBridge(ch[i], cfg_.k_mem, cfg_.k_sel)));
        }
    }
    for (size_t i = 0; i < 4; ++i) {
        const auto below = i == 3 ? cfg_.bottleneck_channels : ch[i + 1];
        up_projections.push_back(register_module(
            "up" + std::to_string(i), torch::nn::Conv2d(torch::nn::Conv2dOptions(below, ch[i], 1))));
        decoder.push_back(register_module("dec" + std::to_string(i), double_conv(2 * ch[i], ch[i])));
    }
    msdf = register_module("msdf", Msdf(ch, cfg_.input_size));
}

torch::Tensor EamNetImpl::forward(const torch::Tensor& images) {
    return torch::sigmoid(forward_traced(images, nullptr));
}

torch::Tensor EamNetImpl::forward_logits(const torch::Tensor& images) {
    return forward_traced(images, nullptr);
}

torch::Tensor EamNetImpl::forward_traced(const torch::Tensor& images, NetworkTrace* trace) {
    check_feature_map(images, "forward");
    if (images.size(1) != 3 || images.size(2) != cfg_.input_size[0] || images.size(3) != cfg_.input_size[1]) {
        throw ShapeError("forward: expected B×3×224×320 images, got " + shape_string(images));
    }
    PyramidFeatures enc;
    auto x = images;
    for (size_t i = 0; i < 4; ++i) {
        x = encoder[i]->forward(i == 0 ? x : max_pool2(x));
        enc.levels[i] = x;
    }
    auto deep = bottleneck->forward(max_pool2(x));
    if (cmam) deep = cmam->forward_traced(deep, trace ? &trace->cmam : nullptr);

    auto fused = msef->forward(enc);
    std::array<torch::Tensor, 4> skips;
    for (size_t i = 0; i < 4; ++i) {
        skips[i] = bridges.empty()
                       ? fused.levels[i]
                       : bridges[i]->forward_traced(fused.levels[i],
                                                    trace != nullptr && i == 0 ? &trace->finest_bridge : nullptr);
    }

    PyramidFeatures dec;
    auto prev = deep;
    for (int i = 3; i >= 0; --i) {
        const auto& skip = skips[static_cast<size_t>(i)];
        auto up = resize_bilinear(up_projections[static_cast<size_t>(i)]->forward(prev), skip.size(2),
                                  skip.size(3));
        prev = decoder[static_cast<size_t>(i)]->forward(torch::cat({up, skip}, 1));
        dec.levels[static_cast<size_t>(i)] = prev;
    }
    auto logits = msdf->forward_traced(dec, trace ? &trace->msdf : nullptr);
    if (trace != nullptr) trace->logits = logits;
    return logits;
}

EamNet build_model(const ModelConfig& cfg) {
    cfg.validate();
    torch::manual_seed(cfg.seed);
    return EamNet(cfg);
}

int64_t count_parameters(const torch::nn::Module& module) {
    int64_t total = 0;
    for (const auto& p : module.parameters()) {
        if (p.requires_grad()) total += p.numel();
    }
    return total;
}

// ---------------------------------------------------------------------------
// checkpoint I/O

namespace {

enum class DType : uint8_t { Float32 = 0, Float64 = 1, Int64 = 2 };

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("checkpoint: truncated file");
    return v;
}

std::map<std::string, torch::Tensor> named_state(const torch::nn::Module& m) {
    std::map<std::string, torch::Tensor> state;
    for (const auto& item : m.named_parameters()) state.emplace("p:" + item.key(), item.value());
    for (const auto& item : m.named_buffers()) state.emplace("b:" + item.key(), item.value());
    return state;
}

DType dtype_code(const torch::Tensor& t) {
    if (t.scalar_type() == torch::kFloat) return DType::Float32;
    if (t.scalar_type() == torch::kDouble) return DType::Float64;
    if (t.scalar_type() == torch::kLong) return DType::Int64;
    throw DataError("checkpoint: unsupported tensor type");
}

torch::ScalarType scalar_type(DType d) {
    switch (d) {
        case DType::Float32: return torch::kFloat;
        case DType::Float64: return torch::kDouble;
        case DType::Int64: return torch::kLong;
    }
    throw DataError("checkpoint: unknown dtype code");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EamNet& model, const nlohmann::json& extra) {
    nlohmann::json meta = extra;
    meta["model"] = model->config().to_json();
    meta["seed"] = model->config().seed;
    const auto meta_text = meta.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot write " + path.string());
    os.write(kMagic, kMagicLen);
    put<uint64_t>(os, meta_text.size());
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    const auto state = named_state(*model);
    put<uint64_t>(os, state.size());
    for (const auto& [name, tensor] : state) {
        auto t = tensor.detach().contiguous().cpu();
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint8_t>(os, static_cast<uint8_t>(dtype_code(t)));
        put<uint32_t>(os, static_cast<uint32_t>(t.dim()));
        for (auto s : t.sizes()) put<int64_t>(os, s);
        os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    }
    if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path.string());
    char magic[kMagicLen];
    if (!is.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
        throw DataError("checkpoint: " + path.string() + " is not an EAMNET1 file");
    }
    const auto meta_len = get<uint64_t>(is);
    if (meta_len > (1u << 24)) throw DataError("checkpoint: implausible metadata length");
    std::string meta_text(meta_len, '\0');
    if (!is.read(meta_text.data(), static_cast<std::streamsize>(meta_len))) {
        throw DataError("checkpoint: truncated metadata");
    }
    Checkpoint ck;
    try {
        ck.metadata = nlohmann::json::parse(meta_text);
        ck.config = ModelConfig::from_json(ck.metadata.at("model"));
    } catch (const std::exception& e) {
        throw DataError(std::string("checkpoint: bad metadata: ") + e.what());
    }
    try {
        ck.model = EamNet(ck.config);
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: stored config is invalid: ") + e.what());
    }

    auto state = named_state(*ck.model);
    const auto count = get<uint64_t>(is);
    if (count != state.size()) throw DataError("checkpoint: tensor count does not match the stored config");
    torch::NoGradGuard no_grad;
    for (uint64_t i = 0; i < count; ++i) {
        const auto name_len = get<uint32_t>(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw DataError("checkpoint: truncated tensor name");
        const auto dtype = scalar_type(static_cast<DType>(get<uint8_t>(is)));
        const auto ndim = get<uint32_t>(is);
        std::vector<int64_t> sizes(ndim);
        for (auto& s : sizes) s = get<int64_t>(is);
        auto it = state.find(name);
        if (it == state.end() || it->second.sizes() != torch::IntArrayRef(sizes) ||
            it->second.scalar_type() != dtype) {
            throw DataError("checkpoint: tensor '" + name + "' does not match the stored config");
        }
        auto buf = torch::empty(sizes, torch::TensorOptions().dtype(dtype));
        if (!is.read(static_cast<char*>(buf.data_ptr()), static_cast<std::streamsize>(buf.nbytes()))) {
            throw DataError("checkpoint: truncated tensor '" + name + "'");
        }
        it->second.copy_(buf);
    }
    return ck;
}

uint64_t weights_digest(const torch::nn::Module& module) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, tensor] : named_state(module)) {
        for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
        auto t = tensor.detach().contiguous().cpu();
        const auto* bytes = static_cast<const uint8_t*>(t.data_ptr());
        for (size_t i = 0; i < t.nbytes(); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
    }
    return h;
}

}  // namespace eamnet
