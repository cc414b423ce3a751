#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "flowlab/datasets.hpp"
#include "flowlab/editing.hpp"

using namespace flowlab;

namespace {

// small conditional tiny-image model (untrained: consistency and determinism
// do not depend on training quality)
struct EditFixture {
    TrainConfig cfg;
    Model model;
    EditFixture(int64_t channels = 1) : cfg(), model([&] {
        cfg.flow = "edm";
        cfg.t_min = 0.002;
        cfg.t_max = 80.0;
        cfg.parameterization = "denoiser_x0";
        cfg.weighting = "edm";
        cfg.image = true;
        cfg.img_c = channels;
        cfg.img_h = 8;
        cfg.img_w = 8;
        cfg.conv_channels = 26;
        cfg.enc_conv_channels = 2;
        cfg.codebook_levels = 2;
        cfg.codebook_channels = 4;
        cfg.seed = 7;
        Rng rng(cfg.seed);
        return build_model(cfg, rng);
    }()) {}
};

std::vector<double> times_for(int64_t n) {
    TimeSchedule s;
    s.kind = TimeSchedule::Kind::Polynomial;
    s.n = n;
    s.t_min = 0.08;
    s.t_max = 80.0;
    return s.times();
}

}  // namespace

TEST_CASE("degradation operators: hand cases") {
    // inpainting: A and A+ are the identity
    DegradationOp inp;
    inp.kind = DegradationKind::Inpaint;
    inp.in = {1, 2, 2};
    inp.omega = {0, 1, 0, 1};
    inp.validate();
    std::vector<double> x{1.0, 2.0, 3.0, 4.0};
    CHECK(inp.apply(x) == x);
    CHECK(inp.pseudo_invert(x) == x);

    // 2x2 block [[1,3],[5,7]] downsample-average -> 4; upsample -> 4s
    DegradationOp ds;
    ds.kind = DegradationKind::DownsampleAvg;
    ds.in = {1, 2, 2};
    ds.omega = {0};
    ds.validate();
    std::vector<double> img{1.0, 3.0, 5.0, 7.0};
    auto y = ds.apply(img);
    REQUIRE(y.size() == 1);
    CHECK(y[0] == 4.0);
    auto up = ds.pseudo_invert(y);
    CHECK(up == std::vector<double>{4.0, 4.0, 4.0, 4.0});
    CHECK(ds.apply(up)[0] == 4.0);  // A(A+(4)) = 4 exactly

    // channel average on c=2
    DegradationOp ca;
    ca.kind = DegradationKind::ChannelAvg;
    ca.in = {2, 1, 2};
    ca.omega = {0, 0};
    ca.validate();
    std::vector<double> two{1.0, 2.0, 3.0, 4.0};  // ch0 = [1,2], ch1 = [3,4]
    auto avg = ca.apply(two);
    CHECK(avg == std::vector<double>{2.0, 3.0});
    auto bc = ca.pseudo_invert(avg);
    CHECK(bc == std::vector<double>{2.0, 3.0, 2.0, 3.0});
}

TEST_CASE("A o A+ o A = A exactly on random inputs for all three operators") {
    Rng rng(3);
    for (auto kind : {DegradationKind::Inpaint, DegradationKind::DownsampleAvg, DegradationKind::ChannelAvg}) {
        DegradationOp op;
        op.kind = kind;
        op.in = {2, 8, 8};
        op.omega.assign(static_cast<size_t>(op.degraded_shape().numel()), 0.0);
        op.validate();
        std::vector<double> x(static_cast<size_t>(op.in.numel()));
        for (double& v : x) v = rng.normal();
        auto ax = op.apply(x);
        auto axax = op.apply(op.pseudo_invert(ax));
        REQUIRE(ax.size() == axax.size());
        for (size_t i = 0; i < ax.size(); ++i) CHECK(ax[i] == axax[i]);  // bitwise
    }
}

TEST_CASE("mask validation") {
    DegradationOp op;
    op.kind = DegradationKind::Inpaint;
    op.in = {1, 2, 2};
    op.omega = {0, 0.5, 0, 1};
    CHECK_THROWS_AS(op.validate(), ValidationError);
    op.omega = {0, 1};
    CHECK_THROWS_AS(op.validate(), ValidationError);
}

TEST_CASE("zero-shot edit: preserved region is bit-exact after every step") {
    EditFixture fx;
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 1;
    spec.seed = 11;
    FiniteDataset ds = generate(spec);

    EditTask task;
    task.reference.assign(ds.points.row(0).begin(), ds.points.row(0).end());
    task.shape = {1, 8, 8};
    task.op.kind = DegradationKind::Inpaint;
    task.op.in = task.shape;
    task.op.omega.assign(64, 0.0);
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 4; j < 8; ++j) task.op.omega[static_cast<size_t>(i * 8 + j)] = 1.0;  // right half
    task.times = times_for(12);
    task.seed = 21;

    EditResult res = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    REQUIRE(res.states.size() == task.times.size());
    auto az = task.op.apply(task.reference);
    for (const auto& state : res.states) {
        auto ax = task.op.apply(state);
        for (size_t i = 0; i < ax.size(); ++i)
            if (task.op.omega[i] == 0.0) CHECK(ax[i] == az[i]);  // bitwise preservation
    }
    CHECK(res.code_trace.size() == task.times.size());
}

TEST_CASE("zero-shot edit: omega all-zeros reproduces the reference view at every step") {
    EditFixture fx;
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 1;
    spec.seed = 13;
    FiniteDataset ds = generate(spec);

    EditTask task;
    task.reference.assign(ds.points.row(0).begin(), ds.points.row(0).end());
    task.shape = {1, 8, 8};
    task.op.kind = DegradationKind::DownsampleAvg;
    task.op.in = task.shape;
    task.op.omega.assign(16, 0.0);  // nothing to synthesize
    task.times = times_for(6);
    task.seed = 5;

    EditResult res = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    auto az = task.op.apply(task.reference);
    for (const auto& state : res.states) {
        auto ax = task.op.apply(state);
        for (size_t i = 0; i < ax.size(); ++i) CHECK(ax[i] == az[i]);
    }
}

TEST_CASE("zero-shot edit is deterministic given the seed") {
    EditFixture fx;
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 1;
    spec.seed = 17;
    FiniteDataset ds = generate(spec);

    EditTask task;
    task.reference.assign(ds.points.row(0).begin(), ds.points.row(0).end());
    task.shape = {1, 8, 8};
    task.op.kind = DegradationKind::Inpaint;
    task.op.in = task.shape;
    task.op.omega.assign(64, 1.0);  // pure re-synthesis
    task.times = times_for(8);
    task.seed = 99;

    EditResult a = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    EditResult b = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    CHECK(a.image == b.image);
    CHECK(a.code_trace == b.code_trace);

    task.seed = 100;
    EditResult c = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    bool differs = false;
    for (size_t i = 0; i < a.image.size(); ++i) differs |= a.image[i] != c.image[i];
    CHECK(differs);
}

TEST_CASE("colorization variant runs on the 2-channel shapes") {
    EditFixture fx(2);
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 1;
    spec.seed = 23;
    spec.img_channels = 2;
    FiniteDataset ds = generate(spec);

    EditTask task;
    task.reference.assign(ds.points.row(0).begin(), ds.points.row(0).end());
    task.shape = {2, 8, 8};
    task.op.kind = DegradationKind::ChannelAvg;
    task.op.in = task.shape;
    task.op.omega.assign(64, 0.0);
    task.times = times_for(4);
    task.seed = 3;

    EditResult res = zero_shot_edit(fx.model.denoiser, fx.model.encoder, fx.model.flow, task);
    auto az = task.op.apply(task.reference);
    auto ax = task.op.apply(res.image);
    for (size_t i = 0; i < ax.size(); ++i) CHECK(ax[i] == az[i]);
}

TEST_CASE("image grid text round trip") {
    ToySpec spec;
    spec.kind = "tiny-shapes";
    spec.count = 2;
    spec.seed = 31;
    spec.img_channels = 2;
    FiniteDataset ds = generate(spec);
    std::vector<double> img(ds.points.row(1).begin(), ds.points.row(1).end());
    save_image_txt("img_rt.txt", img, {2, 8, 8});
    auto [back, shape] = load_image_txt("img_rt.txt");
    CHECK(shape.c == 2);
    CHECK(shape.h == 8);
    CHECK(back == img);
    CHECK_THROWS_AS(load_image_txt("no_such_image.txt"), ValidationError);
}
