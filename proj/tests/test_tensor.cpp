#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "flowlab/checkpoint.hpp"
#include "flowlab/nn.hpp"
#include "flowlab/rng.hpp"
#include "flowlab/tensor.hpp"

using namespace flowlab;

namespace {

// independent triple-loop reference for matmul
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.cols);
    for (int64_t i = 0; i < a.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

Tensor random_tensor(const Shape& s, Rng& rng, bool rg = true, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(s)));
    for (double& x : v) x = scale * rng.normal();
    return Tensor::from_data(s, std::move(v), rg);
}

// relative error with a unit floor so near-zero gradients compare absolutely
double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

// central finite differences through an arbitrary scalar-valued forward pass
double fd_check_max_rel_err(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            std::vector<Tensor>& leaves, double h = 1e-5) {
    Tensor loss = f(leaves);
    backward(loss);
    double worst = 0.0;
    for (auto& leaf : leaves) {
        auto grads = leaf.grad();
        auto vals = leaf.raw_data();
        for (size_t i = 0; i < vals.size(); ++i) {
            double keep = vals[i];
            vals[i] = keep + h;
            double up = f(leaves).item();
            vals[i] = keep - h;
            double dn = f(leaves).item();
            vals[i] = keep;
            double fd = (up - dn) / (2.0 * h);
            worst = std::max(worst, rel_err(grads[i], fd));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("forward primitives match their definitions") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));

    Tensor fl = floor_op(Tensor::from_data({2}, {1.7, -0.2}));
    CHECK(fl.data()[0] == 1.0);
    CHECK(fl.data()[1] == -1.0);

    Rng rng(3);
    Tensor a = random_tensor({2, 3}, rng, false);
    Tensor b = random_tensor({3, 1}, rng, false);
    Matrix ref = matmul_oracle(a.to_matrix(), b.to_matrix());
    Matrix got = matmul(a, b).to_matrix();
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK(got.a[i] == ref.a[i]);
}

TEST_CASE("matmul against triple-loop oracle on larger blocks") {
    Rng rng(11);
    Tensor a = random_tensor({17, 23}, rng, false);
    Tensor b = random_tensor({23, 9}, rng, false);
    Matrix ref = matmul_oracle(a.to_matrix(), b.to_matrix());
    Matrix got = matmul(a, b).to_matrix();
    double m = 0.0;
    for (int64_t i = 0; i < ref.numel(); ++i) m = std::max(m, std::abs(got.a[i] - ref.a[i]));
    CHECK(m <= 1e-12);
}

TEST_CASE("shape mismatch diagnostics name both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2, 3]"), ValidationError);
    CHECK_THROWS_AS(matmul(a, a), ValidationError);
}

TEST_CASE("non-finite values are rejected at creation") {
    CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), NumericError);
    Tensor big = Tensor::from_data({1}, {1e308});
    CHECK_THROWS_AS(exp_op(big), NumericError);  // overflow caught at the op output
}

TEST_CASE("backward: sum of squares") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor loss = sum_all(square(x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar loss and repeated runs") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(square(x)), ValidationError);
    Tensor loss = sum_all(square(x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ValidationError);
}

TEST_CASE("3-layer MLP gradients vs central finite differences") {
    Rng rng(17);
    Mlp net({3, 8, 8, 2}, rng);
    Tensor x = random_tensor({4, 3}, rng, false);
    ParamList ps;
    net.collect("mlp", ps);
    std::vector<Tensor> leaves;
    for (auto& p : ps) leaves.push_back(p.t);
    auto f = [&](const std::vector<Tensor>&) { return mean_all(square(net.forward(x))); };
    CHECK(fd_check_max_rel_err(f, leaves) < 1e-4);
}

TEST_CASE("stop_gradient semantics") {
    Tensor x = Tensor::from_data({1}, {0.3}, true);
    CHECK(stop_gradient(x).data()[0] == 0.3);

    Tensor x2 = Tensor::from_data({1}, {2.0}, true);
    Tensor loss = sum_all(mul(stop_gradient(x2), x2));
    backward(loss);
    CHECK(x2.grad()[0] == doctest::Approx(2.0));  // only the tracked factor contributes

    Tensor x3 = Tensor::from_data({2}, {1.0, -1.0}, true);
    Tensor blocked = sum_all(stop_gradient(x3));
    CHECK(!blocked.requires_grad());
    // fully blocked graph: gradient of x3 stays zero
    CHECK(x3.grad()[0] == 0.0);
    CHECK(x3.grad()[1] == 0.0);
}

TEST_CASE("floor contributes exactly zero gradient") {
    Tensor x = Tensor::from_data({2}, {1.3, -0.4}, true);
    Tensor y = floor_op(x);
    CHECK(!y.requires_grad());
    Tensor loss = sum_all(mul(x, x)) ;
    backward(loss);  // unrelated path; floor leaves no trace on the tape
    CHECK(x.grad()[0] == doctest::Approx(2.6));
}

TEST_CASE("random composite graphs of depth <= 6: gradcheck (20 seeds, quick slice)") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed + 100);
        Tensor a = random_tensor({3, 4}, rng, true, 0.5);
        Tensor b = random_tensor({4, 3}, rng, true, 0.5);
        Tensor c = random_tensor({3, 3}, rng, true, 0.5);
        std::vector<Tensor> leaves{a, b, c};
        auto f = [&](const std::vector<Tensor>& ls) {
            Tensor h = matmul(ls[0], ls[1]);
            h = tanh_op(add(h, ls[2]));
            h = mul(h, sigmoid(ls[2]));
            Tensor g = concat_cols(h, square(ls[2]));
            g = slice_cols(g, 1, 5);
            return mean_all(square(g));
        };
        CHECK(fd_check_max_rel_err(f, leaves) < 1e-4);
    }
}

TEST_CASE("determinism: identical seeds give bitwise-identical outputs and gradients") {
    auto run = [] {
        Rng rng(42);
        Mlp net({2, 16, 2}, rng);
        Tensor x = random_tensor({8, 2}, rng, false);
        Tensor loss = mean_all(square(net.forward(x)));
        backward(loss);
        ParamList ps;
        net.collect("m", ps);
        std::vector<double> out{loss.item()};
        for (auto& p : ps)
            for (double g : p.t.grad()) out.push_back(g);
        return out;
    };
    auto r1 = run(), r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("SGD step") {
    Tensor th = Tensor::from_data({1}, {1.0}, true);
    th.grad_mut()[0] = 2.0;
    ParamList ps{{"th", th}};
    AdamState st;
    OptimConfig cfg;
    cfg.kind = OptimizerKind::Sgd;
    cfg.lr = 0.1;
    CHECK(optimizer_step(ps, st, cfg));
    CHECK(th.data()[0] == doctest::Approx(0.8));
}

TEST_CASE("Adam first step is a bias-corrected lr-sized move") {
    Tensor th = Tensor::from_data({1}, {0.5}, true);
    th.grad_mut()[0] = 1.0;
    ParamList ps{{"th", th}};
    AdamState st;
    OptimConfig cfg;
    cfg.kind = OptimizerKind::Adam;
    cfg.lr = 0.1;
    CHECK(optimizer_step(ps, st, cfg));
    // m_hat = 1, v_hat = 1 -> step of lr / (1 + eps)
    CHECK(th.data()[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-6));
}

TEST_CASE("zero gradient leaves parameters unchanged under SGD") {
    Tensor th = Tensor::from_data({2}, {1.0, -1.0}, true);
    ParamList ps{{"th", th}};
    AdamState st;
    OptimConfig cfg;
    cfg.kind = OptimizerKind::Sgd;
    cfg.lr = 0.5;
    CHECK(optimizer_step(ps, st, cfg));
    CHECK(th.data()[0] == 1.0);
    CHECK(th.data()[1] == -1.0);
}

TEST_CASE("non-finite gradient skips the step and reports") {
    Tensor th = Tensor::from_data({1}, {1.0}, true);
    th.grad_mut()[0] = std::numeric_limits<double>::infinity();
    ParamList ps{{"th", th}};
    AdamState st;
    OptimConfig cfg;
    CHECK_FALSE(optimizer_step(ps, st, cfg));
    CHECK(th.data()[0] == 1.0);
}

TEST_CASE("EMA update") {
    Tensor sh = Tensor::from_data({1}, {0.0}, true);
    Tensor lv = Tensor::from_data({1}, {1.0}, true);
    ParamList shadow{{"p", sh}}, live{{"p", lv}};
    ema_update(shadow, live, 0.9);
    CHECK(sh.data()[0] == doctest::Approx(0.1));

    // mu = 1 leaves the shadow untouched
    Tensor sh2 = Tensor::from_data({1}, {0.25}, true);
    ParamList shadow2{{"p", sh2}};
    ema_update(shadow2, live, 1.0);
    CHECK(sh2.data()[0] == 0.25);
}

TEST_CASE("EMA converges geometrically: gap after k steps is mu^k of the initial gap") {
    double mu = 0.9, v = 3.0;
    Tensor sh = Tensor::from_data({1}, {1.0}, true);
    Tensor lv = Tensor::from_data({1}, {v}, true);
    ParamList shadow{{"p", sh}}, live{{"p", lv}};
    double gap0 = std::abs(1.0 - v);
    for (int k = 1; k <= 20; ++k) {
        ema_update(shadow, live, mu);
        CHECK(std::abs(sh.data()[0] - v) == doctest::Approx(std::pow(mu, k) * gap0).epsilon(1e-12));
    }
}

TEST_CASE("EMA rejects layout mismatch") {
    Tensor sh = Tensor::zeros({2}, true);
    Tensor lv = Tensor::zeros({3}, true);
    ParamList shadow{{"p", sh}}, live{{"p", lv}};
    CHECK_THROWS_AS(ema_update(shadow, live, 0.9), ValidationError);
}

TEST_CASE("conv2d gradcheck and shape checks") {
    Rng rng(5);
    Conv2dLayer conv(2, 3, 3, rng);
    Tensor x = random_tensor({2, 2, 4, 4}, rng, true, 0.5);
    ParamList ps;
    conv.collect("conv", ps);
    std::vector<Tensor> leaves{x, ps[0].t, ps[1].t};
    auto f = [&](const std::vector<Tensor>&) { return mean_all(square(avg_pool2(conv.forward(x)))); };
    CHECK(fd_check_max_rel_err(f, leaves) < 1e-4);

    Tensor bad = Tensor::zeros({2, 3, 4, 4});
    CHECK_THROWS_AS(conv.forward(bad), ValidationError);
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
    Rng rng(9);
    Mlp net({2, 5, 3}, rng);
    ParamList ps;
    net.collect("net", ps);

    Checkpoint ck;
    ck.put_params("model", ps);
    ck.put_string("meta/config", "lr=0.001\nsteps=10\n");
    ck.put_i64("meta/step", 1234);
    ck.put_u64("meta/hash", 0xdeadbeefcafef00dULL);
    ck.put_scalar("meta/loss", 0.5);
    ck.save("ckpt_roundtrip.bin");

    Checkpoint lk = Checkpoint::load("ckpt_roundtrip.bin");
    CHECK(lk.get_string("meta/config") == "lr=0.001\nsteps=10\n");
    CHECK(lk.get_i64("meta/step") == 1234);
    CHECK(lk.get_u64("meta/hash") == 0xdeadbeefcafef00dULL);
    CHECK(lk.get_scalar("meta/loss") == 0.5);

    Rng rng2(1);
    Mlp net2({2, 5, 3}, rng2);
    ParamList ps2;
    net2.collect("net", ps2);
    lk.load_params("model", ps2);
    for (size_t k = 0; k < ps.size(); ++k) {
        auto a = ps[k].t.data(), b = ps2[k].t.data();
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }

    CHECK_THROWS_AS(Checkpoint::load("does_not_exist.bin"), ValidationError);
}

TEST_CASE("rng state serialization resumes the stream exactly") {
    Rng r(99);
    (void)r.normal();
    std::string s = r.state();
    double next = r.normal();
    Rng r2(1);
    r2.set_state(s);
    CHECK(r2.normal() == next);
}
