// Licensed under the Apache License, Version 2.0

#include <doctest.h>

#include <cmath>

#include "asvc/autograd.hpp"
#include "gradcheck.hpp"

using namespace asvc;
using namespace asvc::ag;

namespace {

Tensor rand_param(int r, int c, Rng& rng, double scale = 0.5) {
    return Tensor::param(r, c, test::random_values(static_cast<size_t>(r) * c, rng, scale));
}

}  // namespace

TEST_CASE("matmul forward matches a hand computation") {
    Tensor a = Tensor::constant(2, 2, {1, 2, 3, 4});
    Tensor b = Tensor::constant(2, 2, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.values() == std::vector<double>{19, 22, 43, 50});

    Tensor ct = matmul(a, b, false, true);  // a * b^T
    CHECK(ct.values() == std::vector<double>{17, 23, 39, 53});

    Tensor tt = matmul(a, b, true, false);  // a^T * b
    CHECK(tt.values() == std::vector<double>{26, 30, 38, 44});
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
    Rng rng(42);
    Tensor a = rand_param(3, 4, rng);
    Tensor b = rand_param(3, 4, rng);
    Tensor gamma = rand_param(1, 4, rng);
    Tensor beta = rand_param(1, 4, rng);
    std::vector<Tensor> params = {a, b, gamma, beta};

    auto forward = [&]() {
        Tensor t = mul(add(a, b), sigmoid(a));
        t = layer_norm(t, gamma, beta);
        t = swish(t);
        t = softmax_rows(t);
        t = add(t, exp(scale(b, 0.3)));
        return sum_all(mul(t, t)).item();
    };
    const double loss = forward();
    CHECK(std::isfinite(loss));
    {
        Tensor t = mul(add(a, b), sigmoid(a));
        t = layer_norm(t, gamma, beta);
        t = swish(t);
        t = softmax_rows(t);
        t = add(t, exp(scale(b, 0.3)));
        backward(sum_all(mul(t, t)));
    }
    auto res = test::finite_diff_check(forward, params);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("matmul, transpose, slicing, concat gradients") {
    Rng rng(7);
    Tensor a = rand_param(3, 5, rng);
    Tensor w = rand_param(5, 4, rng);
    Tensor s = rand_param(1, 1, rng);
    std::vector<Tensor> params = {a, w, s};

    auto forward = [&]() {
        Tensor h = matmul(a, w);
        Tensor left = slice_cols(h, 0, 2);
        Tensor right = slice_cols(h, 2, 4);
        Tensor j = concat_cols({mul(left, right), transpose(matmul(h, h, true, false))});
        j = scale_by(j, s);
        Tensor lse = log_sum_exp_rows(j);
        return sum_all(mul(lse, lse)).item();
    };
    {
        Tensor h = matmul(a, w);
        Tensor left = slice_cols(h, 0, 2);
        Tensor right = slice_cols(h, 2, 4);
        Tensor j = concat_cols({mul(left, right), transpose(matmul(h, h, true, false))});
        j = scale_by(j, s);
        Tensor lse = log_sum_exp_rows(j);
        backward(sum_all(mul(lse, lse)));
    }
    auto res = test::finite_diff_check(forward, params);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("conv2d and depthwise_conv1d gradients") {
    Rng rng(11);
    const int c_in = 2, freq = 7, t_in = 9, c_out = 3;
    Tensor x = rand_param(t_in, c_in * freq, rng);
    Tensor w = rand_param(c_out, c_in * 9, rng);
    Tensor b = rand_param(1, c_out, rng);
    Tensor dw = rand_param(3, c_out * 3, rng);
    Tensor db = rand_param(1, c_out * 3, rng);
    std::vector<Tensor> params = {x, w, b, dw, db};

    auto forward = [&]() {
        Tensor y = conv2d(x, w, b, c_in, freq, 3, 3, 2, 2);
        y = relu(y);
        y = depthwise_conv1d(y, dw, db);
        return sum_all(mul(y, y)).item();
    };
    {
        Tensor y = conv2d(x, w, b, c_in, freq, 3, 3, 2, 2);
        y = relu(y);
        y = depthwise_conv1d(y, dw, db);
        backward(sum_all(mul(y, y)));
    }
    auto res = test::finite_diff_check(forward, params);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("conv2d forward matches direct convolution on a known case") {
    // 1 input channel, 4x4 map, 1 output channel, stride 1: plain correlation.
    Tensor x = Tensor::constant(4, 4, {1, 2, 3, 4,
                                       5, 6, 7, 8,
                                       9, 10, 11, 12,
                                       13, 14, 15, 16});
    std::vector<double> kv(9, 0.0);
    kv[4] = 1.0;  // center tap only
    Tensor w = Tensor::constant(1, 9, kv);
    Tensor b = Tensor::constant(1, 1, {0.5});
    Tensor y = conv2d(x, w, b, 1, 4, 3, 3, 1, 1);
    REQUIRE(y.rows() == 2);
    REQUIRE(y.cols() == 2);
    CHECK(y.values() == std::vector<double>{6.5, 7.5, 10.5, 11.5});
}

TEST_CASE("backward accumulates into leaves and is linear in the upstream") {
    Rng rng(3);
    Tensor a = rand_param(2, 3, rng);
    Tensor w = rand_param(3, 3, rng);

    Tensor y = tanh(matmul(a, w));
    std::vector<double> g1(6), g2(6);
    for (int i = 0; i < 6; ++i) { g1[i] = rng.normal(); g2[i] = rng.normal(); }
    std::vector<double> gsum(6);
    for (int i = 0; i < 6; ++i) gsum[i] = g1[i] + g2[i];

    backward(y, g1);
    backward(y, g2);
    std::vector<double> acc = a.grad();

    a.grad().assign(a.size(), 0.0);
    w.grad().assign(w.size(), 0.0);
    backward(y, gsum);
    for (size_t i = 0; i < acc.size(); ++i)
        CHECK(std::abs(acc[i] - a.grad()[i]) < 1e-12);
}

TEST_CASE("NoGradGuard suppresses tape construction") {
    Tensor a = Tensor::param(2, 2, {1, 2, 3, 4});
    NoGradGuard guard;
    Tensor y = mul(a, a);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("rotary rotates pairs and preserves norms") {
    // Row 0 is unrotated, row 1 pair 0 is rotated by exactly 1 radian.
    Tensor x = Tensor::constant(2, 2, {1, 0, 1, 0});
    Tensor y = rotary(x, 10000.0);
    CHECK(y.values()[0] == doctest::Approx(1.0));
    CHECK(y.values()[1] == doctest::Approx(0.0));
    CHECK(y.values()[2] == doctest::Approx(std::cos(1.0)));
    CHECK(y.values()[3] == doctest::Approx(std::sin(1.0)));

    Rng rng(5);
    Tensor z = rand_param(4, 6, rng);
    Tensor r = rotary(z, 10000.0, 3);
    for (int t = 0; t < 4; ++t) {
        double n0 = 0, n1 = 0;
        for (int c = 0; c < 6; ++c) {
            n0 += z.values()[t * 6 + c] * z.values()[t * 6 + c];
            n1 += r.values()[t * 6 + c] * r.values()[t * 6 + c];
        }
        CHECK(n0 == doctest::Approx(n1));
    }
}

TEST_CASE("rotary gradient is exact") {
    Rng rng(9);
    Tensor x = rand_param(3, 4, rng);
    std::vector<Tensor> params = {x};
    auto forward = [&]() { return sum_all(mul(rotary(x, 50.0, 2), rotary(x, 50.0, 2))).item(); };
    backward(sum_all(mul(rotary(x, 50.0, 2), rotary(x, 50.0, 2))));
    auto res = test::finite_diff_check(forward, params);
    CHECK(res.max_rel_err < 1e-7);
}

TEST_CASE("max_const floors values exactly") {
    Tensor x = Tensor::constant(1, 4, {-1.0, 0.0, 1e-9, 2.0});
    Tensor y = max_const(x, 1e-8);
    CHECK(y.values()[0] == 1e-8);
    CHECK(y.values()[1] == 1e-8);
    CHECK(y.values()[2] == 1e-8);
    CHECK(y.values()[3] == 2.0);
}
