#include "eamnet/errors.hpp"
#include "eamnet/experiments.hpp"
#include "eamnet/network.hpp"
#include "eamnet/training_metrics.hpp"

#include "testing.hpp"

#include <filesystem>
#include <fstream>

using namespace eamnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / "eamnet_test_network" / name;
    fs::create_directories(p.parent_path());
    return p;
}

ModelConfig with_flags(bool mrcf, bool cmam, bool eab) {
    ModelConfig c;
    c.use_mrcf = mrcf;
    c.use_cmam = cmam;
    c.use_eab = eab;
    return c;
}

}  // namespace

TEST_CASE("count_parameters closed forms") {
    torch::nn::Sequential empty;
    CHECK(count_parameters(*empty) == 0);
    torch::nn::Conv2d conv(torch::nn::Conv2dOptions(2, 4, 3));
    CHECK(count_parameters(*conv) == 76);
}

TEST_CASE("default model lands within the parameter budget") {
    auto m = build_model(ModelConfig{});
    const auto n = count_parameters(*m);
    MESSAGE("parameters: " << n);
    CHECK(n >= 4'140'000);
    CHECK(n <= 5'060'000);
}

TEST_CASE("model config validation") {
    ModelConfig c;
    c.stage_channels = {16, 16, 64, 128};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.input_size = {256, 256};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.k_sel = 17;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("same seed gives bit-identical initial weights") {
    ModelConfig c;
    auto a = build_model(c), b = build_model(c);
    CHECK(weights_digest(*a) == weights_digest(*b));
    c.seed = 43;
    CHECK(weights_digest(*build_model(c)) != weights_digest(*a));
}

TEST_CASE("every ablation configuration runs forward and one backward step") {
    torch::manual_seed(1);
    auto x = torch::randn({1, 3, 224, 320});
    auto y = (torch::rand({1, 1, 224, 320}) > 0.5).to(torch::kFloat);
    for (const auto& f : ablation_grid()) {
        INFO("mrcf=" << f[0] << " cmam=" << f[1] << " eab=" << f[2]);
        auto m = build_model(with_flags(f[0], f[1], f[2]));
        torch::optim::Adam opt(m->parameters(), torch::optim::AdamOptions(1e-3));
        auto p = m->forward(x);
        CHECK(p.sizes() == torch::IntArrayRef{1, 1, 224, 320});
        auto loss = combined_loss(p, y, LossConfig{});
        opt.zero_grad();
        loss.backward();
        opt.step();
        CHECK(std::isfinite(loss.item<double>()));
    }
}

TEST_CASE("forward returns probabilities and rejects other resolutions") {
    auto m = build_model(ModelConfig{});
    m->eval();
    torch::NoGradGuard ng;
    auto p = m->forward(torch::randn({1, 3, 224, 320}));
    CHECK(p.sizes() == torch::IntArrayRef{1, 1, 224, 320});
    CHECK(p.min().item<double>() >= 0.0);
    CHECK(p.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(m->forward(torch::randn({1, 3, 256, 256})), ShapeError);
    CHECK_THROWS_AS(m->forward(torch::randn({1, 1, 224, 320})), ShapeError);
}

TEST_CASE("evaluation is deterministic and batch independent") {
    auto m = build_model(ModelConfig{});
    m->eval();
    torch::NoGradGuard ng;
    torch::manual_seed(2);
    auto x = torch::randn({2, 3, 224, 320});
    auto a = m->forward(x), b = m->forward(x);
    CHECK(torch::equal(a, b));
    auto singles = torch::cat({m->forward(x.narrow(0, 0, 1)), m->forward(x.narrow(0, 1, 1))});
    CHECK((a - singles).abs().max().item<double>() <= 1e-5);
}

TEST_CASE("every parameter of the full model receives gradient") {
    auto m = build_model(ModelConfig{});
    torch::manual_seed(3);
    auto x = torch::randn({2, 3, 224, 320});
    auto y = (torch::rand({2, 1, 224, 320}) > 0.5).to(torch::kFloat);
    combined_loss(m->forward(x), y, LossConfig{}).backward();
    for (const auto& p : m->named_parameters()) {
        INFO(p.key());
        REQUIRE(p.value().grad().defined());
        CHECK(p.value().grad().abs().sum().item<double>() > 0.0);
    }
}

TEST_CASE("no NaN over 100 random batches") {
    auto m = build_model(ModelConfig{});
    m->eval();
    torch::NoGradGuard ng;
    torch::manual_seed(4);
    bool ok = true;
    for (int i = 0; i < 100; ++i) {
        auto p = m->forward(torch::randn({1, 3, 224, 320}) * (1 + i % 5));
        ok = ok && torch::isfinite(p).all().item<bool>() && p.min().item<double>() >= 0.0 &&
             p.max().item<double>() <= 1.0;
    }
    CHECK(ok);
}

TEST_CASE("checkpoints round-trip and reject damaged files") {
    ModelConfig c;
    c.use_cmam = false;
    c.k_sel = 4;
    auto m = build_model(c);
    const auto path = scratch("model.ckpt");
    save_checkpoint(path, m, {{"note", "hello"}});

    auto ck = load_checkpoint(path);
    CHECK(ck.config == c);
    CHECK(ck.metadata.at("note") == "hello");
    CHECK(weights_digest(*ck.model) == weights_digest(*m));
    m->eval();
    ck.model->eval();
    torch::NoGradGuard ng;
    auto x = torch::randn({1, 3, 224, 320});
    CHECK(torch::equal(m->forward(x), ck.model->forward(x)));

    const auto size = fs::file_size(path);
    const auto cut = scratch("truncated.ckpt");
    fs::copy_file(path, cut, fs::copy_options::overwrite_existing);
    fs::resize_file(cut, size / 2);
    CHECK_THROWS_AS(load_checkpoint(cut), DataError);

    const auto bad = scratch("bad.ckpt");
    std::ofstream(bad) << "NOTACKPT";
    CHECK_THROWS_AS(load_checkpoint(bad), DataError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt")), DataError);
}

TEST_CASE("50 optimisation steps overfit one circle image") {
    // light background, dark disc; the mask is the disc
    auto yy = torch::arange(224).view({224, 1}).to(torch::kFloat);
    auto xx = torch::arange(320).view({1, 320}).to(torch::kFloat);
    auto disc = ((yy - 100).square() + (xx - 170).square() < 60.0 * 60.0).to(torch::kFloat);
    torch::manual_seed(5);
    auto image = (1.0 - 1.5 * disc).unsqueeze(0).expand({3, 224, 320}) + 0.1 * torch::randn({3, 224, 320});
    auto x = image.unsqueeze(0);
    auto target = disc.view({1, 1, 224, 320});

    auto m = build_model(ModelConfig{});
    m->train();
    torch::optim::Adam opt(m->parameters(), torch::optim::AdamOptions(1e-3).weight_decay(5e-5));
    double dice = 0.0;
    for (int step = 0; step < 50; ++step) {
        auto p = m->forward(x);
        auto loss = combined_loss(p, target, LossConfig{});
        opt.zero_grad();
        loss.backward();
        opt.step();
        dice = compute_metrics(binarize(p.detach())[0], target[0].to(torch::kUInt8)).dice;
    }
    MESSAGE("final training Dice " << dice);
    CHECK(dice > 0.95);
}
