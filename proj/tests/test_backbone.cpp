#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "rpnet/checkpoint.hpp"
#include "rpnet/model.hpp"

using namespace rpnet;

namespace {

Tensor random_image(int n, int c, int h, int w, unsigned seed) {
    Tensor t({n, c, h, w});
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    for (auto& v : t.data) v = u(rng);
    return t;
}

/// Two stacked regular bottlenecks with the post-add activation disabled, so
/// the residual algebra res == sum of branch outputs holds exactly.
struct MicroStack {
    Bottleneck b1, b2;
    MicroStack(unsigned seed, int channels = 4) {
        std::mt19937 rng(seed);
        BottleneckSpec spec{BottleneckKind::Regular, channels, channels, 0.f, false};
        b1 = Bottleneck("micro.b1", spec, rng);
        b2 = Bottleneck("micro.b2", spec, rng);
    }
};

float bilinear_oracle_at(const Tensor& src, int c, int Hout, int Wout, int y, int x) {
    int H = src.dim(2), W = src.dim(3);
    auto coord = [](int o, int n_out, int n_in) {
        double s = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
        return std::min(std::max(s, 0.0), static_cast<double>(n_in - 1));
    };
    double sy = coord(y, Hout, H), sx = coord(x, Wout, W);
    int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
    int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    double fy = sy - y0, fx = sx - x0;
    double top = (1 - fx) * src.at(0, c, y0, x0) + fx * src.at(0, c, y0, x1);
    double bot = (1 - fx) * src.at(0, c, y1, x0) + fx * src.at(0, c, y1, x1);
    return static_cast<float>((1 - fy) * top + fy * bot);
}

}  // namespace

TEST_CASE("encoder parameter count is within 5% of the reported 0.3507M") {
    ModelConfig cfg;
    cfg.num_classes = 12;
    RPNet model(cfg);
    auto params = static_cast<double>(model.encoder_param_count());
    CHECK(params > 0.3507e6 * 0.95);
    CHECK(params < 0.3507e6 * 1.05);
}

TEST_CASE("forward at 3x360x480 produces the documented tap shapes") {
    ModelConfig cfg;
    cfg.num_classes = 12;
    RPNet model(cfg);
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    auto out = model.backbone.forward(make_var(random_image(1, 3, 360, 480, 1)), ctx);
    CHECK(out.main_feature->value.shape == std::vector<int>{1, 128, 45, 60});
    CHECK(out.level2.residual->value.shape == std::vector<int>{1, 64, 90, 120});
    CHECK(out.level3.residual->value.shape == std::vector<int>{1, 16, 180, 240});
}

TEST_CASE("tap residual equals exit minus entry exactly") {
    ModelConfig cfg;
    cfg.num_classes = 4;
    RPNet model(cfg);
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    auto out = model.backbone.forward(make_var(random_image(1, 3, 32, 32, 2)), ctx);
    for (const LevelTap* tap : {&out.level2, &out.level3}) {
        const Tensor &r = tap->residual->value, &en = tap->entry_feature->value,
                     &ex = tap->exit_feature->value;
        REQUIRE(r.same_shape(en));
        for (std::size_t i = 0; i < r.size(); ++i)
            REQUIRE(r.data[i] == ex.data[i] - en.data[i]);
    }
}

TEST_CASE("zeroed branches make the residual exactly zero and exit equal entry") {
    MicroStack m(3);
    // zeroing the last BN's affine pair kills the whole branch output
    for (Bottleneck* b : {&m.b1, &m.b2}) {
        b->bn3.gamma.value.fill(0.f);
        b->bn3.beta.value.fill(0.f);
    }
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    Var x = make_var(random_image(1, 4, 8, 8, 4));
    Var y = m.b2.forward(m.b1.forward(x, ctx), ctx);
    for (std::size_t i = 0; i < y->value.size(); ++i)
        CHECK(y->value.data[i] == x->value.data[i]);
}

TEST_CASE("two-block residual equals the brute-force branch sum") {
    MicroStack m(5);
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    Var x0 = make_var(random_image(1, 4, 4, 4, 6));
    Var x1 = m.b1.forward(x0, ctx);
    Var x2 = m.b2.forward(x1, ctx);
    // oracle: run each branch alone and sum (Eq. 5 with identity main paths)
    Var f1 = m.b1.forward_branch(x0, ctx);
    Var f2 = m.b2.forward_branch(x1, ctx);
    for (std::size_t i = 0; i < x2->value.size(); ++i) {
        float res = x2->value.data[i] - x0->value.data[i];
        float oracle = f1->value.data[i] + f2->value.data[i];
        CHECK(std::abs(res - oracle) < 1e-6f);
    }
}

TEST_CASE("residual gradient matches central finite differences") {
    MicroStack m(7);
    ForwardCtx ctx{false, nullptr};
    Tensor img = random_image(1, 4, 8, 8, 8);

    auto scalar_of_residual = [&]() {
        NoGradGuard ng;
        Var x0 = make_var(img);
        Var x2 = m.b2.forward(m.b1.forward(x0, ctx), ctx);
        double s = 0;
        for (std::size_t i = 0; i < x2->value.size(); ++i)
            s += x2->value.data[i] - x0->value.data[i];
        return s;
    };

    // analytic gradient of sum(residual) w.r.t. every parameter
    for (auto* p : m.b1.parameters()) p->zero_grad();
    for (auto* p : m.b2.parameters()) p->zero_grad();
    {
        Var x0 = make_var(img);
        Var x2 = m.b2.forward(m.b1.forward(x0, ctx), ctx);
        backward(sum_all(sub(x2, x0)));
    }

    Param& w = m.b1.conv.weight;
    const float h = 1e-3f;
    for (std::size_t i : {std::size_t(0), w.value.size() / 2, w.value.size() - 1}) {
        float keep = w.value.data[i];
        w.value.data[i] = keep + h;
        double up = scalar_of_residual();
        w.value.data[i] = keep - h;
        double down = scalar_of_residual();
        w.value.data[i] = keep;
        double fd = (up - down) / (2 * h);
        double an = w.grad.data[i];
        if (std::abs(fd) > 1e-4)
            CHECK(std::abs(an - fd) / std::abs(fd) < 1e-4 * 10 + 1e-3);
        else
            CHECK(std::abs(an - fd) < 1e-3);
    }
}

TEST_CASE("indivisible input sizes are rejected with a padding hint") {
    ModelConfig cfg;
    cfg.num_classes = 2;
    RPNet model(cfg);
    ForwardCtx ctx{false, nullptr};
    try {
        model.backbone.forward(make_var(Tensor({1, 3, 30, 32})), ctx);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("pad") != std::string::npos);
    }
}

TEST_CASE("eval-mode forward is bit-identical across runs") {
    ModelConfig cfg;
    cfg.num_classes = 3;
    RPNet model(cfg);
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    Tensor img = random_image(1, 3, 16, 16, 9);
    auto a = model.forward(make_var(img), ctx);
    auto b = model.forward(make_var(img), ctx);
    CHECK(a.targets.back()->value.data == b.targets.back()->value.data);
}

TEST_CASE("er mode adds exactly the projection parameters") {
    std::mt19937 rng1(0), rng2(0);
    Backbone sr(ResidualMode::Standard, 0.01f, 0.1f, rng1);
    Backbone er(ResidualMode::Expanded, 0.01f, 0.1f, rng2);
    std::size_t proj_params = (64 * 16 + 16) + (128 * 64 + 64);
    CHECK(er.param_count() - sr.param_count() == proj_params);
}

TEST_CASE("expanded residual with zero post_pool equals pre_pool") {
    std::mt19937 rng(11);
    Conv2d proj("t.proj", 8, 4, 1, 1, 1, 1, 0, 0, rng);
    NoGradGuard ng;
    Var pre = make_var(random_image(1, 4, 8, 8, 12));
    Var post = make_var(Tensor({1, 8, 4, 4}));
    proj.bias.value.fill(0.f);
    Var res = expanded_residual(pre, post, proj);
    for (std::size_t i = 0; i < res->value.size(); ++i)
        CHECK(res->value.data[i] == pre->value.data[i]);
}

TEST_CASE("expanded residual matches the elementwise oracle with identity projection") {
    std::mt19937 rng(13);
    Conv2d proj("t.proj", 4, 4, 1, 1, 1, 1, 0, 0, rng);
    proj.weight.value.fill(0.f);
    for (int c = 0; c < 4; ++c) proj.weight.value.at(c, c, 0, 0) = 1.f;
    proj.bias.value.fill(0.f);
    NoGradGuard ng;
    Var post = make_var(random_image(1, 4, 4, 4, 14));
    // pre_pool = exact 2x nearest upsampling of post
    Tensor pre_t({1, 4, 8, 8});
    for (int c = 0; c < 4; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                pre_t.at(0, c, y, x) = post->value.at(0, c, y / 2, x / 2);
    Var pre = make_var(pre_t);
    Var res = expanded_residual(pre, post, proj);
    // oracle: interpolation error pre - bilinear_up(post), evaluated directly
    for (int c = 0; c < 4; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                float expect =
                    pre->value.at(0, c, y, x) - bilinear_oracle_at(post->value, c, 8, 8, y, x);
                CHECK(res->value.at(0, c, y, x) == Catch::Approx(expect).margin(1e-5));
            }
}

TEST_CASE("expanded residual keeps the pre_pool spatial size") {
    std::mt19937 rng(15);
    Conv2d proj("t.proj", 8, 4, 1, 1, 1, 1, 0, 0, rng);
    Var pre = make_var(Tensor({1, 4, 12, 16}));
    Var post = make_var(Tensor({1, 8, 6, 8}));
    NoGradGuard ng;
    CHECK(expanded_residual(pre, post, proj)->value.shape == std::vector<int>{1, 4, 12, 16});
}

TEST_CASE("expanded residual rejects non-2x size ratios") {
    std::mt19937 rng(16);
    Conv2d proj("t.proj", 8, 4, 1, 1, 1, 1, 0, 0, rng);
    Var pre = make_var(Tensor({1, 4, 12, 12}));
    Var post = make_var(Tensor({1, 8, 4, 4}));
    NoGradGuard ng;
    CHECK_THROWS_AS(expanded_residual(pre, post, proj), ShapeError);
}

TEST_CASE("er forward augments the standard residual without changing shapes") {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.residual_mode = ResidualMode::Expanded;
    RPNet model(cfg);
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    auto out = model.forward(make_var(random_image(1, 3, 16, 16, 17)), ctx);
    CHECK(out.features.expanded_residual2->value.shape == std::vector<int>{1, 64, 4, 4});
    CHECK(out.features.expanded_residual3->value.shape == std::vector<int>{1, 16, 8, 8});
    CHECK(out.targets[2]->value.shape == std::vector<int>{1, 3, 8, 8});
}

TEST_CASE("checkpoint round-trips parameters, buffers and topology") {
    ModelConfig cfg;
    cfg.num_classes = 5;
    cfg.residual_mode = ResidualMode::Expanded;
    cfg.predictor = PredictorKind::Guided;
    cfg.init_seed = 21;
    RPNet model(cfg);
    // make running stats non-trivial so buffer restore is observable
    {
        std::mt19937 rng(22);
        ForwardCtx train_ctx{true, &rng};
        model.forward(make_var(random_image(2, 3, 16, 16, 23)), train_ctx);
    }
    std::string path = "checkpoint_roundtrip_test.ckpt";
    save_checkpoint(model, path);
    RPNet restored = load_checkpoint(path);
    CHECK(restored.cfg.num_classes == 5);
    CHECK(restored.cfg.residual_mode == ResidualMode::Expanded);
    CHECK(restored.cfg.predictor == PredictorKind::Guided);

    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    Tensor img = random_image(1, 3, 16, 16, 24);
    auto a = model.forward(make_var(img), ctx);
    auto b = restored.forward(make_var(img), ctx);
    CHECK(a.targets.back()->value.data == b.targets.back()->value.data);
    std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
    ModelConfig cfg;
    cfg.num_classes = 2;
    RPNet model(cfg);
    std::string path = "checkpoint_corrupt_test.ckpt";
    save_checkpoint(model, path);
    // truncate the archive
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    std::ofstream(path, std::ios::binary | std::ios::trunc) << "NOTACKPT";
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    std::remove(path.c_str());
}
