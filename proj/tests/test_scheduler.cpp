#include <bridgediff/scheduler.hpp>

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace bridgediff;

namespace {

// independent cumulative-product oracle
std::vector<double> cumprod_alpha_bars(const std::vector<double>& betas) {
    std::vector<double> out;
    double p = 1.0;
    for (double b : betas) {
        p *= (1.0 - b);
        out.push_back(p);
    }
    return out;
}

}  // namespace

TEST_CASE("build_schedule: zero betas give flat alpha_bars") {
    NoiseSchedule s = build_schedule(4, 0.0, 0.0);
    for (int t = 0; t < 4; ++t) CHECK(s.alpha_bars[t] == 1.0);
}

TEST_CASE("build_schedule: linear 0.1..0.4 matches the cumulative-product oracle") {
    NoiseSchedule s = build_schedule(4, 0.1, 0.4);
    REQUIRE(s.betas.size() == 4);
    CHECK(s.betas[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(s.betas[1] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(s.betas[2] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(s.betas[3] == doctest::Approx(0.4).epsilon(1e-12));
    std::vector<double> expect = {0.9, 0.72, 0.504, 0.3024};
    for (int t = 0; t < 4; ++t) CHECK(std::abs(s.alpha_bars[t] - expect[t]) < 1e-12);
    std::vector<double> oracle = cumprod_alpha_bars(s.betas);
    for (int t = 0; t < 4; ++t) CHECK(std::abs(s.alpha_bars[t] - oracle[t]) < 1e-15);
}

TEST_CASE("build_schedule: production-scale schedule") {
    NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
    std::vector<double> oracle = cumprod_alpha_bars(s.betas);
    double worst = 0;
    for (int t = 0; t < 1000; ++t) worst = std::max(worst, std::abs(s.alpha_bars[t] - oracle[t]));
    CHECK(worst < 1e-12);
    CHECK(s.alpha_bars[999] < 0.01);
    CHECK(s.latent_scale == 0.18215);
    // recurrence invariant
    CHECK(std::abs(s.alpha_bars[0] - s.alphas[0]) < 1e-12);
    for (int t = 1; t < 1000; ++t)
        CHECK(std::abs(s.alpha_bars[t] - s.alpha_bars[t - 1] * s.alphas[t]) < 1e-12);
    for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
}

TEST_CASE("build_schedule: violated bounds error") {
    CHECK_THROWS_AS(build_schedule(0, 0.1, 0.2), Error);
    CHECK_THROWS_AS(build_schedule(10, -0.1, 0.2), Error);
    CHECK_THROWS_AS(build_schedule(10, 0.3, 0.2), Error);
    CHECK_THROWS_AS(build_schedule(10, 0.1, 1.0), Error);
}

TEST_CASE("add_noise: zero noise scales by sqrt(alpha_bar)") {
    NoiseSchedule s = build_schedule(4, 0.1, 0.4);
    Tensor x0 = Tensor::full({2, 3}, 1.0, DType::F64);
    Tensor eps = Tensor::zeros({2, 3}, DType::F64);
    Tensor xt = add_noise(s, x0, eps, {0, 2});
    for (int i = 0; i < 3; ++i) CHECK(xt.at(i) == doctest::Approx(std::sqrt(0.9)).epsilon(1e-12));
    for (int i = 3; i < 6; ++i)
        CHECK(xt.at(i) == doctest::Approx(std::sqrt(0.504)).epsilon(1e-12));
}

TEST_CASE("add_noise: scalar hand evaluation at t=1") {
    NoiseSchedule s = build_schedule(4, 0.1, 0.4);
    Tensor x0 = Tensor::full({1, 1}, 1.0, DType::F64);
    Tensor eps = Tensor::full({1, 1}, 1.0, DType::F64);
    Tensor xt = add_noise(s, x0, eps, {1});
    CHECK(xt.at(0) == doctest::Approx(std::sqrt(0.72) + std::sqrt(0.28)).epsilon(1e-12));
    CHECK(xt.at(0) == doctest::Approx(1.3777).epsilon(1e-4));
}

TEST_CASE("add_noise: out-of-range timestep") {
    NoiseSchedule s = build_schedule(4, 0.1, 0.4);
    Tensor x0 = Tensor::zeros({1, 1});
    CHECK_THROWS_AS((void)add_noise(s, x0, x0, {4}), Error);
    CHECK_THROWS_AS((void)add_noise(s, x0, x0, {-1}), Error);
}

TEST_CASE("add_noise: linear in (x0, eps)") {
    RngStream rng(31, 0);
    NoiseSchedule s = build_schedule(50, 1e-3, 0.1);
    Tensor x0 = Tensor::randn({3, 4, 4, 2}, rng, DType::F64);
    Tensor eps = Tensor::randn({3, 4, 4, 2}, rng, DType::F64);
    std::vector<int> ts = {3, 17, 44};
    double a = 2.75;
    Tensor lhs = add_noise(s, mul_scalar(x0, a), mul_scalar(eps, a), ts);
    Tensor rhs = mul_scalar(add_noise(s, x0, eps, ts), a);
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("add_noise: variance preservation over Monte-Carlo draws") {
    RngStream rng(32, 0);
    NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
    const int n = 10000;
    for (int t : {10, 400, 900}) {
        double sq = 0, mu = 0;
        for (int i = 0; i < n; ++i) {
            double x0 = rng.normal(), e = rng.normal();
            double ab = s.alpha_bars[t];
            double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e;
            mu += xt;
            sq += xt * xt;
        }
        mu /= n;
        double var = sq / n - mu * mu;
        CHECK(var == doctest::Approx(1.0).epsilon(0.05));
    }
}

TEST_CASE("timestep_embedding: zero timestep and range") {
    Tensor e0 = timestep_embedding(0, 8, DType::F64);
    for (int i = 0; i < 4; ++i) CHECK(e0.at(i) == 0.0);
    for (int i = 4; i < 8; ++i) CHECK(e0.at(i) == 1.0);
    for (int t : {1, 13, 999}) {
        Tensor e = timestep_embedding(t, 32, DType::F64);
        for (int64_t i = 0; i < e.numel(); ++i) {
            CHECK(e.at(i) <= 1.0);
            CHECK(e.at(i) >= -1.0);
        }
    }
}

TEST_CASE("timestep_embedding: matches an independent sinusoid formula") {
    Tensor e = timestep_embedding(1, 4, DType::F64);
    CHECK(e.at(0) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    CHECK(e.at(1) == doctest::Approx(std::sin(std::pow(10000.0, -0.5))).epsilon(1e-12));
    CHECK(e.at(2) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(e.at(3) == doctest::Approx(std::cos(std::pow(10000.0, -0.5))).epsilon(1e-12));
    for (int t : {7, 250}) {
        int dim = 10, half = 5;
        Tensor emb = timestep_embedding(t, dim, DType::F64);
        for (int i = 0; i < half; ++i) {
            double f = std::exp(-std::log(10000.0) * i / half);
            CHECK(emb.at(i) == doctest::Approx(std::sin(t * f)).epsilon(1e-12));
            CHECK(emb.at(half + i) == doctest::Approx(std::cos(t * f)).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS((void)timestep_embedding(1, 5), Error);
    CHECK_THROWS_AS((void)timestep_embedding(-1, 4), Error);
}

TEST_CASE("guided_prediction: endpoint and arithmetic cases") {
    RngStream rng(33, 0);
    Tensor u = Tensor::randn({4, 4}, rng);
    Tensor c = Tensor::randn({4, 4}, rng);
    CHECK(bitwise_equal(guided_prediction(u, c, 1.0), c));
    CHECK(bitwise_equal(guided_prediction(u, c, 0.0), u));
    Tensor zero = Tensor::zeros({2});
    Tensor two = Tensor::full({2}, 2.0);
    Tensor g = guided_prediction(zero, two, 7.5);
    CHECK(g.at(0) == doctest::Approx(15.0));
    // same-input invariance for arbitrary w
    Tensor same = guided_prediction(c, c, 3.817);
    CHECK(max_abs_diff(same, c) == 0.0);
    CHECK_THROWS_AS((void)guided_prediction(Tensor::zeros({2}), Tensor::zeros({3}), 1.0), Error);
}

TEST_CASE("inference_timesteps: strictly decreasing subsequence, S=1 starts high") {
    auto ts = inference_timesteps(1000, 50);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 999);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    CHECK(ts.back() >= 0);
    auto one = inference_timesteps(1000, 1);
    CHECK(one == std::vector<int>{999});
    auto full = inference_timesteps(10, 10);
    for (int i = 0; i < 10; ++i) CHECK(full[i] == 9 - i);
    CHECK_THROWS_AS(inference_timesteps(10, 11), Error);
}
