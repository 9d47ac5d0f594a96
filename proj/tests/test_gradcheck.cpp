// Finite-difference checks for every differentiable op in the fixed set, on
// random small shapes, 64-bit mode.

#include "gradcheck.hpp"

#include <bridgediff/scheduler.hpp>
#include <bridgediff/tensor.hpp>

#include <doctest.h>

using namespace bridgediff;
using bdtest::gradcheck;
using bdtest::project_to_scalar;

namespace {

constexpr double kTol = 1e-4;

Tensor rnd(Shape s, RngStream& rng) { return Tensor::randn(s, rng, DType::F64); }

int64_t di(RngStream& rng, int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(hi - lo + 1)));
}

}  // namespace

TEST_CASE("gradcheck: matmul") {
    RngStream rng(11, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t m = di(rng, 1, 5), k = di(rng, 1, 5), n = di(rng, 1, 5);
        RngStream proj = rng.split(100 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(matmul(in[0], in[1]), proj);
        };
        auto r = gradcheck(fn, {rnd({m, k}, rng), rnd({k, n}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: bmm") {
    RngStream rng(12, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t b = di(rng, 1, 3), m = di(rng, 1, 4), k = di(rng, 1, 4), n = di(rng, 1, 4);
        RngStream proj = rng.split(100 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(bmm(in[0], in[1]), proj);
        };
        auto r = gradcheck(fn, {rnd({b, m, k}, rng), rnd({b, k, n}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: conv2d stride 1 and 2") {
    RngStream rng(13, 0);
    for (int stride : {1, 2}) {
        for (int rep = 0; rep < 5; ++rep) {
            int64_t b = di(rng, 1, 2), h = 2 * di(rng, 1, 3), cin = di(rng, 1, 3),
                    cout = di(rng, 1, 3);
            RngStream proj = rng.split(100 + rep + 10 * stride);
            auto fn = [&](const std::vector<Tensor>& in) {
                return project_to_scalar(conv2d(in[0], in[1], in[2], stride), proj);
            };
            auto r = gradcheck(fn, {rnd({b, h, h, cin}, rng), rnd({3, 3, cin, cout}, rng),
                                    rnd({cout}, rng)});
            CHECK(r.max_rel < kTol);
        }
    }
}

TEST_CASE("gradcheck: upsample_nearest2x") {
    RngStream rng(14, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t b = di(rng, 1, 2), h = di(rng, 1, 4), c = di(rng, 1, 3);
        RngStream proj = rng.split(100 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(upsample_nearest2x(in[0]), proj);
        };
        auto r = gradcheck(fn, {rnd({b, h, h, c}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: elementwise binary with broadcasting") {
    RngStream rng(15, 0);
    using BinFn = Tensor (*)(const Tensor&, const Tensor&);
    for (BinFn op : {static_cast<BinFn>(add), static_cast<BinFn>(sub), static_cast<BinFn>(mul),
                     static_cast<BinFn>(squared_error)}) {
        for (int rep = 0; rep < 5; ++rep) {
            int64_t b = di(rng, 1, 3), h = di(rng, 2, 4), c = di(rng, 1, 3);
            RngStream proj = rng.split(200 + rep);
            auto fn = [&](const std::vector<Tensor>& in) {
                return project_to_scalar(op(in[0], in[1]), proj);
            };
            // same-shape, suffix broadcast, and middle-1 broadcast
            auto r1 = gradcheck(fn, {rnd({b, h, c}, rng), rnd({b, h, c}, rng)});
            CHECK(r1.max_rel < kTol);
            auto r2 = gradcheck(fn, {rnd({b, h, c}, rng), rnd({c}, rng)});
            CHECK(r2.max_rel < kTol);
            auto r3 = gradcheck(fn, {rnd({b, h, c}, rng), rnd({b, 1, c}, rng)});
            CHECK(r3.max_rel < kTol);
        }
    }
}

TEST_CASE("gradcheck: scalar ops and unary activations") {
    RngStream rng(16, 0);
    std::vector<std::function<Tensor(const Tensor&)>> ops = {
        [](const Tensor& x) { return add_scalar(x, 0.7); },
        [](const Tensor& x) { return mul_scalar(x, -1.3); },
        [](const Tensor& x) { return exp(x); },
        [](const Tensor& x) { return sigmoid(x); },
        [](const Tensor& x) { return silu(x); },
        [](const Tensor& x) { return identity(x); },
    };
    for (size_t oi = 0; oi < ops.size(); ++oi) {
        for (int rep = 0; rep < 5; ++rep) {
            int64_t n = di(rng, 1, 6), m = di(rng, 1, 4);
            RngStream proj = rng.split(300 + 10 * oi + rep);
            auto fn = [&](const std::vector<Tensor>& in) {
                return project_to_scalar(ops[oi](in[0]), proj);
            };
            auto r = gradcheck(fn, {rnd({n, m}, rng)});
            CHECK(r.max_rel < kTol);
        }
    }
}

TEST_CASE("gradcheck: softmax over last axis") {
    RngStream rng(17, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t rows = di(rng, 1, 4), d = di(rng, 2, 6);
        RngStream proj = rng.split(400 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(softmax_lastdim(in[0]), proj);
        };
        auto r = gradcheck(fn, {rnd({rows, d}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: layer_norm") {
    RngStream rng(18, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t rows = di(rng, 1, 4), d = di(rng, 2, 6);
        RngStream proj = rng.split(500 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(layer_norm(in[0], in[1], in[2]), proj);
        };
        auto r = gradcheck(fn, {rnd({rows, d}, rng), rnd({d}, rng), rnd({d}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: group_norm") {
    RngStream rng(19, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t b = di(rng, 1, 2), h = di(rng, 1, 3);
        int groups = static_cast<int>(di(rng, 1, 2));
        int64_t c = groups * di(rng, 1, 3);
        RngStream proj = rng.split(600 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(group_norm(in[0], groups, in[1], in[2]), proj);
        };
        auto r = gradcheck(fn, {rnd({b, h, h, c}, rng), rnd({c}, rng), rnd({c}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: embedding_lookup") {
    RngStream rng(20, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t v = di(rng, 3, 8), d = di(rng, 1, 5);
        std::vector<int> ids;
        for (int i = 0; i < 6; ++i)
            ids.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(v))));
        RngStream proj = rng.split(700 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(embedding_lookup(in[0], ids), proj);
        };
        auto r = gradcheck(fn, {rnd({v, d}, rng)});
        CHECK(r.max_rel < kTol);
    }
}

TEST_CASE("gradcheck: reshape / permute / concat / narrow") {
    RngStream rng(21, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t a = di(rng, 2, 4), b = di(rng, 2, 4), c = di(rng, 1, 3);
        RngStream proj = rng.split(800 + rep);
        auto fn1 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(reshape(in[0], {b, a, c}), proj);
        };
        CHECK(gradcheck(fn1, {rnd({a, b, c}, rng)}).max_rel < kTol);

        auto fn2 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(permute(in[0], {2, 0, 1}), proj);
        };
        CHECK(gradcheck(fn2, {rnd({a, b, c}, rng)}).max_rel < kTol);

        auto fn3 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(concat({in[0], in[1]}, 1), proj);
        };
        CHECK(gradcheck(fn3, {rnd({a, b, c}, rng), rnd({a, b + 1, c}, rng)}).max_rel < kTol);

        auto fn4 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(narrow(in[0], 1, 1, b - 1), proj);
        };
        CHECK(gradcheck(fn4, {rnd({a, b, c}, rng)}).max_rel < kTol);
    }
}

TEST_CASE("gradcheck: reductions") {
    RngStream rng(22, 0);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t a = di(rng, 2, 4), b = di(rng, 2, 4), c = di(rng, 1, 3);
        RngStream proj = rng.split(900 + rep);
        auto fn1 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(mean(in[0], {1}), proj);
        };
        CHECK(gradcheck(fn1, {rnd({a, b, c}, rng)}).max_rel < kTol);

        auto fn2 = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(mean(in[0], {0, 2}), proj);
        };
        CHECK(gradcheck(fn2, {rnd({a, b, c}, rng)}).max_rel < kTol);

        auto fn3 = [&](const std::vector<Tensor>& in) { return mean_all(in[0]); };
        CHECK(gradcheck(fn3, {rnd({a, b, c}, rng)}).max_rel < kTol);

        auto fn4 = [&](const std::vector<Tensor>& in) { return sum_all(in[0]); };
        CHECK(gradcheck(fn4, {rnd({a, b, c}, rng)}).max_rel < kTol);
    }
}

TEST_CASE("gradcheck: add_noise is differentiable in x0 and eps") {
    RngStream rng(23, 0);
    NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t b = di(rng, 1, 3), h = di(rng, 1, 3);
        std::vector<int> ts;
        for (int64_t i = 0; i < b; ++i) ts.push_back(static_cast<int>(rng.uniform_int(10)));
        RngStream proj = rng.split(950 + rep);
        auto fn = [&](const std::vector<Tensor>& in) {
            return project_to_scalar(add_noise(sched, in[0], in[1], ts), proj);
        };
        auto r = gradcheck(fn, {rnd({b, h, h, 2}, rng), rnd({b, h, h, 2}, rng)});
        CHECK(r.max_rel < kTol);
    }
}
