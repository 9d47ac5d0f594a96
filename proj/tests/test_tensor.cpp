#include <bridgediff/optim.hpp>
#include <bridgediff/tensor.hpp>

#include <doctest.h>

#include <cmath>

using namespace bridgediff;

TEST_CASE("matmul: identity matrix passes any 2xN through exactly") {
    RngStream rng(1, 0);
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    for (int n : {1, 3, 7}) {
        Tensor x = Tensor::randn({2, n}, rng);
        Tensor y = matmul(eye, x);
        CHECK(bitwise_equal(y, x));
    }
}

TEST_CASE("matmul: 2x2 hand-checked values") {
    Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_vector({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.at(0) == doctest::Approx(19));
    CHECK(c.at(1) == doctest::Approx(22));
    CHECK(c.at(2) == doctest::Approx(43));
    CHECK(c.at(3) == doctest::Approx(50));
}

TEST_CASE("matmul: shape mismatch names the op and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected an error");
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("softmax: all-equal inputs spread mass evenly") {
    Tensor x = Tensor::zeros({3});
    Tensor y = softmax_lastdim(x);
    for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to 1") {
    RngStream rng(2, 0);
    Tensor x = Tensor::randn({5, 9}, rng);
    Tensor y = softmax_lastdim(x);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int i = 0; i < 9; ++i) s += y.at(r * 9 + i);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("non-finite outputs are an error, not a value") {
    Tensor big = Tensor::full({4}, 1000.0);
    CHECK_THROWS_AS((void)exp(big), Error);
}

TEST_CASE("backward: sum gives exact all-ones gradient") {
    RngStream rng(3, 0);
    Tensor x = Tensor::randn({3, 4}, rng);
    x.set_requires_grad(true);
    Tensor loss = sum_all(x);
    backward(loss);
    Tensor g = x.grad();
    REQUIRE(g.defined());
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g.at(i) == 1.0f);
}

TEST_CASE("backward: mean of squares, hand-worked values") {
    Tensor x = Tensor::from_vector({3}, {1, 2, 3}, DType::F64);
    x.set_requires_grad(true);
    Tensor loss = mean_all(mul(x, x));
    backward(loss);
    Tensor g = x.grad();
    CHECK(g.at(0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(g.at(1) == doctest::Approx(4.0 / 3).epsilon(1e-12));
    CHECK(g.at(2) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("backward: unreachable parameters are absent from the map") {
    RngStream rng(4, 0);
    Tensor x = Tensor::randn({3}, rng);
    Tensor p = Tensor::randn({3}, rng);
    x.set_requires_grad(true);
    x.set_name("x");
    p.set_requires_grad(true);
    p.set_name("p");
    GradientMap grads = backward(sum_all(x));
    CHECK(grads.count("x") == 1);
    CHECK(grads.count("p") == 0);
}

TEST_CASE("backward: rejects non-scalar loss and double invocation") {
    RngStream rng(5, 0);
    Tensor x = Tensor::randn({3}, rng);
    x.set_requires_grad(true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), Error);
    Tensor loss = sum_all(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), Error);
}

TEST_CASE("backward: errors when nothing requires grad") {
    Tensor x = Tensor::zeros({2});
    Tensor loss = sum_all(x);
    CHECK_THROWS_AS(backward(loss), Error);
}

TEST_CASE("mask_embedding_gradient keeps exactly one row") {
    RngStream rng(6, 0);

    SUBCASE("toy vocabulary, keep the appended row") {
        Tensor g = Tensor::randn({257, 8}, rng);
        Tensor m = mask_embedding_gradient(g, 256);
        for (int64_t r = 0; r < 256; ++r)
            for (int64_t c = 0; c < 8; ++c) CHECK(m.at(r * 8 + c) == 0.0);
        Tensor row_in = narrow(g, 0, 256, 1);
        Tensor row_out = narrow(m, 0, 256, 1);
        CHECK(bitwise_equal(row_in, row_out));
    }

    SUBCASE("full-scale vocabulary row 49408") {
        Tensor g = Tensor::randn({49409, 4}, rng);
        Tensor m = mask_embedding_gradient(g, 49408);
        double off_mass = 0;
        for (int64_t i = 0; i < 49408 * 4; ++i) off_mass += std::abs(m.at(i));
        CHECK(off_mass == 0.0);
        for (int64_t c = 0; c < 4; ++c) CHECK(m.at(49408 * 4 + c) == g.at(49408 * 4 + c));
    }

    SUBCASE("zero gradient stays zero") {
        Tensor g = Tensor::zeros({5, 3});
        Tensor m = mask_embedding_gradient(g, 2);
        for (int64_t i = 0; i < m.numel(); ++i) CHECK(m.at(i) == 0.0);
    }

    SUBCASE("keep_row out of range") {
        Tensor g = Tensor::zeros({5, 3});
        CHECK_THROWS_AS((void)mask_embedding_gradient(g, 5), Error);
        CHECK_THROWS_AS((void)mask_embedding_gradient(g, -1), Error);
    }
}

TEST_CASE("adam: zero gradient is a bit-exact no-op") {
    RngStream rng(7, 0);
    ParamMap params;
    Tensor p = Tensor::randn({4, 4}, rng);
    params.emplace("p", p);
    Tensor before = p.clone();
    AdamState st;
    GradientMap grads;
    grads.emplace("p", Tensor::zeros({4, 4}));
    for (int i = 0; i < 3; ++i) adam_step(params, grads, st, {0.1, 0.9, 0.999, 1e-8});
    CHECK(bitwise_equal(params.at("p"), before));
    CHECK(st.step == 3);
}

TEST_CASE("adam: first-step update matches the hand-evaluated recurrence") {
    // m_hat = 1, v_hat = 1 after bias correction, so p <- 1 - lr/(1+eps)
    ParamMap params;
    params.emplace("p", Tensor::from_vector({1}, {1.0}, DType::F64));
    AdamState st;
    GradientMap grads;
    grads.emplace("p", Tensor::from_vector({1}, {1.0}, DType::F64));
    adam_step(params, grads, st, {0.1, 0.9, 0.999, 1e-8});
    CHECK(params.at("p").at(0) == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(st.step == 1);
}

TEST_CASE("adam: parameters absent from the gradient map are untouched") {
    RngStream rng(8, 0);
    ParamMap params;
    params.emplace("a", Tensor::randn({3}, rng));
    params.emplace("b", Tensor::randn({3}, rng));
    Tensor b_before = params.at("b").clone();
    AdamState st;
    GradientMap grads;
    grads.emplace("a", Tensor::full({3}, 0.5));
    adam_step(params, grads, st, {0.01, 0.9, 0.999, 1e-8});
    CHECK(bitwise_equal(params.at("b"), b_before));
    CHECK_FALSE(bitwise_equal(params.at("a"), params.at("b")));
}

TEST_CASE("adam: gradient for unknown parameter is an error") {
    ParamMap params;
    params.emplace("a", Tensor::zeros({2}));
    AdamState st;
    GradientMap grads;
    grads.emplace("ghost", Tensor::zeros({2}));
    CHECK_THROWS_AS(adam_step(params, grads, st, {}), Error);
}

TEST_CASE("broadcasting rejects incompatible shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 4});
    CHECK_THROWS_AS((void)add(a, b), Error);
}

TEST_CASE("mixed dtypes are rejected") {
    Tensor a = Tensor::zeros({2}, DType::F32);
    Tensor b = Tensor::zeros({2}, DType::F64);
    CHECK_THROWS_AS((void)add(a, b), Error);
}

TEST_CASE("grad buffers reset between backward passes") {
    Tensor x = Tensor::from_vector({2}, {1.0, 2.0}, DType::F64);
    x.set_requires_grad(true);
    backward(sum_all(x));
    CHECK(x.grad().at(0) == 1.0);
    backward(sum_all(mul_scalar(x, 3.0)));
    CHECK(x.grad().at(0) == 3.0);  // fresh, not accumulated to 4
}
