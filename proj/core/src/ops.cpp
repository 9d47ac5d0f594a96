#include "op_support.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bridgediff {

namespace {

using detail::NodePtr;

// c[M,N] = a[M,K] . b[K,N]   (overwrite or accumulate)
template <class T>
void mm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
    if (!acc) std::fill(c, c + M * N, T(0));
    for (int64_t i = 0; i < M; ++i) {
        const T* ar = a + i * K;
        T* cr = c + i * N;
        for (int64_t k = 0; k < K; ++k) {
            T av = ar[k];
            const T* br = b + k * N;
            for (int64_t j = 0; j < N; ++j) cr[j] += av * br[j];
        }
    }
}

// c[M,K] += a[M,N] . b[K,N]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int64_t M, int64_t N, int64_t K) {
    for (int64_t i = 0; i < M; ++i) {
        const T* ar = a + i * N;
        T* cr = c + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T* br = b + k * N;
            T acc = 0;
            for (int64_t j = 0; j < N; ++j) acc += ar[j] * br[j];
            cr[k] += acc;
        }
    }
}

// c[K,N] += a[M,K]^T . b[M,N]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* ar = a + i * K;
        const T* br = b + i * N;
        for (int64_t k = 0; k < K; ++k) {
            T av = ar[k];
            T* cr = c + k * N;
            for (int64_t j = 0; j < N; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    auto na = a.node();
    auto nb = b.node();
    BD_CHECK(na->dtype == nb->dtype, "matmul: dtype mismatch");
    BD_CHECK(na->shape.size() == 2 && nb->shape.size() == 2,
             "matmul: expected rank-2 operands, got {} and {}", shape_str(na->shape),
             shape_str(nb->shape));
    int64_t M = na->shape[0], K = na->shape[1], K2 = nb->shape[0], N = nb->shape[1];
    BD_CHECK(K == K2, "matmul: inner extents differ, {} vs {}", shape_str(na->shape),
             shape_str(nb->shape));
    auto out = detail::make_node({M, N}, na->dtype);
    detail::dispatch(na->dtype, [&](auto tag) {
        using T = decltype(tag);
        mm_nn(na->data<T>(), nb->data<T>(), out->data<T>(), M, K, N, false);
    });
    detail::record(
        out, {na, nb},
        [na, nb, M, K, N](detail::Node& self) {
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                if (na->requires_grad) {
                    auto& g = *detail::ensure_grad(*na);
                    mm_nt(gy, nb->data<T>(), g.data<T>(), M, N, K);  // dA = dC . B^T
                }
                if (nb->requires_grad) {
                    auto& g = *detail::ensure_grad(*nb);
                    mm_tn(na->data<T>(), gy, g.data<T>(), M, K, N);  // dB = A^T . dC
                }
            });
        },
        "matmul");
    return Tensor(out);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    auto na = a.node();
    auto nb = b.node();
    BD_CHECK(na->dtype == nb->dtype, "bmm: dtype mismatch");
    BD_CHECK(na->shape.size() == 3 && nb->shape.size() == 3 && na->shape[0] == nb->shape[0] &&
                 na->shape[2] == nb->shape[1],
             "bmm: incompatible shapes {} and {}", shape_str(na->shape), shape_str(nb->shape));
    int64_t B = na->shape[0], M = na->shape[1], K = na->shape[2], N = nb->shape[2];
    auto out = detail::make_node({B, M, N}, na->dtype);
    detail::dispatch(na->dtype, [&](auto tag) {
        using T = decltype(tag);
        for (int64_t i = 0; i < B; ++i) {
            mm_nn(na->data<T>() + i * M * K, nb->data<T>() + i * K * N, out->data<T>() + i * M * N,
                  M, K, N, false);
        }
    });
    detail::record(
        out, {na, nb},
        [na, nb, B, M, K, N](detail::Node& self) {
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                if (na->requires_grad) {
                    auto& g = *detail::ensure_grad(*na);
                    for (int64_t i = 0; i < B; ++i)
                        mm_nt(gy + i * M * N, nb->data<T>() + i * K * N, g.data<T>() + i * M * K, M,
                              N, K);
                }
                if (nb->requires_grad) {
                    auto& g = *detail::ensure_grad(*nb);
                    for (int64_t i = 0; i < B; ++i)
                        mm_tn(na->data<T>() + i * M * K, gy + i * M * N, g.data<T>() + i * K * N, M,
                              K, N);
                }
            });
        },
        "bmm");
    return Tensor(out);
}

// ---------------- conv2d (3x3, pad 1, NHWC) ----------------

namespace {

template <class T>
void im2col(const T* x, T* col, int64_t B, int64_t H, int64_t W, int64_t C, int64_t OH, int64_t OW,
            int stride) {
    int64_t K = 9 * C;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t oy = 0; oy < OH; ++oy) {
            for (int64_t ox = 0; ox < OW; ++ox) {
                T* row = col + ((b * OH + oy) * OW + ox) * K;
                for (int64_t ky = 0; ky < 3; ++ky) {
                    int64_t iy = oy * stride + ky - 1;
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        int64_t ix = ox * stride + kx - 1;
                        T* dst = row + (ky * 3 + kx) * C;
                        if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                            std::fill(dst, dst + C, T(0));
                        } else {
                            const T* src = x + ((b * H + iy) * W + ix) * C;
                            std::copy(src, src + C, dst);
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, T* x, int64_t B, int64_t H, int64_t W, int64_t C, int64_t OH, int64_t OW,
            int stride) {
    int64_t K = 9 * C;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t oy = 0; oy < OH; ++oy) {
            for (int64_t ox = 0; ox < OW; ++ox) {
                const T* row = col + ((b * OH + oy) * OW + ox) * K;
                for (int64_t ky = 0; ky < 3; ++ky) {
                    int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        int64_t ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= W) continue;
                        const T* src = row + (ky * 3 + kx) * C;
                        T* dst = x + ((b * H + iy) * W + ix) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
    auto nx = x.node();
    auto nw = weight.node();
    auto nb = bias.node();
    BD_CHECK(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2, got {}", stride);
    BD_CHECK(nx->shape.size() == 4, "conv2d: input must be [B,H,W,C], got {}",
             shape_str(nx->shape));
    BD_CHECK(nw->shape.size() == 4 && nw->shape[0] == 3 && nw->shape[1] == 3,
             "conv2d: weight must be [3,3,Cin,Cout], got {}", shape_str(nw->shape));
    BD_CHECK(nx->dtype == nw->dtype && nx->dtype == nb->dtype, "conv2d: dtype mismatch");
    int64_t B = nx->shape[0], H = nx->shape[1], W = nx->shape[2], C = nx->shape[3];
    int64_t Cout = nw->shape[3];
    BD_CHECK(nw->shape[2] == C, "conv2d: weight expects {} input channels, input has {}",
             nw->shape[2], C);
    BD_CHECK(nb->shape == Shape{Cout}, "conv2d: bias shape {} does not match {} filters",
             shape_str(nb->shape), Cout);
    int64_t OH = (H - 1) / stride + 1, OW = (W - 1) / stride + 1;
    int64_t M = B * OH * OW, K = 9 * C;

    auto col = detail::make_node({M, K}, nx->dtype);
    auto out = detail::make_node({B, OH, OW, Cout}, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        im2col(nx->data<T>(), col->data<T>(), B, H, W, C, OH, OW, stride);
        mm_nn(col->data<T>(), nw->data<T>(), out->data<T>(), M, K, Cout, false);
        const T* bv = nb->data<T>();
        T* o = out->data<T>();
        for (int64_t i = 0; i < M; ++i)
            for (int64_t c = 0; c < Cout; ++c) o[i * Cout + c] += bv[c];
    });
    detail::record(
        out, {nx, nw, nb},
        [nx, nw, nb, col, B, H, W, C, OH, OW, Cout, M, K, stride](detail::Node& self) {
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                if (nb->requires_grad) {
                    auto& g = *detail::ensure_grad(*nb);
                    T* gb = g.data<T>();
                    for (int64_t i = 0; i < M; ++i)
                        for (int64_t c = 0; c < Cout; ++c) gb[c] += gy[i * Cout + c];
                }
                if (nw->requires_grad) {
                    auto& g = *detail::ensure_grad(*nw);
                    mm_tn(col->data<T>(), gy, g.data<T>(), M, K, Cout);
                }
                if (nx->requires_grad) {
                    std::vector<T> dcol(static_cast<size_t>(M * K), T(0));
                    mm_nt(gy, nw->data<T>(), dcol.data(), M, Cout, K);
                    auto& g = *detail::ensure_grad(*nx);
                    col2im(dcol.data(), g.data<T>(), B, H, W, C, OH, OW, stride);
                }
            });
        },
        "conv2d");
    return Tensor(out);
}

Tensor upsample_nearest2x(const Tensor& x) {
    auto nx = x.node();
    BD_CHECK(nx->shape.size() == 4, "upsample_nearest2x: input must be [B,H,W,C], got {}",
             shape_str(nx->shape));
    int64_t B = nx->shape[0], H = nx->shape[1], W = nx->shape[2], C = nx->shape[3];
    auto out = detail::make_node({B, 2 * H, 2 * W, C}, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        T* dst = out->data<T>();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t y = 0; y < 2 * H; ++y)
                for (int64_t xw = 0; xw < 2 * W; ++xw) {
                    const T* s = src + ((b * H + y / 2) * W + xw / 2) * C;
                    T* d = dst + ((b * 2 * H + y) * 2 * W + xw) * C;
                    std::copy(s, s + C, d);
                }
    });
    detail::record(
        out, {nx},
        [nx, B, H, W, C](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* gx = g.data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t y = 0; y < 2 * H; ++y)
                        for (int64_t xw = 0; xw < 2 * W; ++xw) {
                            const T* s = gy + ((b * 2 * H + y) * 2 * W + xw) * C;
                            T* d = gx + ((b * H + y / 2) * W + xw / 2) * C;
                            for (int64_t c = 0; c < C; ++c) d[c] += s[c];
                        }
            });
        },
        "upsample_nearest2x");
    return Tensor(out);
}

// ---------------- softmax / norms ----------------

Tensor softmax_lastdim(const Tensor& x) {
    auto nx = x.node();
    BD_CHECK(!nx->shape.empty(), "softmax: scalar input");
    int64_t D = nx->shape.back();
    int64_t rows = nx->numel() / D;
    auto out = detail::make_node(nx->shape, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        T* dst = out->data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = src + r * D;
            T* yr = dst + r * D;
            T mx = xr[0];
            for (int64_t i = 1; i < D; ++i) mx = std::max(mx, xr[i]);
            T sum = 0;
            for (int64_t i = 0; i < D; ++i) {
                yr[i] = std::exp(xr[i] - mx);
                sum += yr[i];
            }
            T inv = T(1) / sum;
            for (int64_t i = 0; i < D; ++i) yr[i] *= inv;
        }
    });
    NodePtr outp = out;
    detail::record(
        out, {nx},
        [nx, outp, D, rows](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* y = outp->data<T>();
                T* gx = g.data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gyr = gy + r * D;
                    const T* yr = y + r * D;
                    T dot = 0;
                    for (int64_t i = 0; i < D; ++i) dot += gyr[i] * yr[i];
                    T* gxr = gx + r * D;
                    for (int64_t i = 0; i < D; ++i) gxr[i] += yr[i] * (gyr[i] - dot);
                }
            });
        },
        "softmax");
    return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nbt = beta.node();
    BD_CHECK(!nx->shape.empty(), "layer_norm: scalar input");
    int64_t D = nx->shape.back();
    BD_CHECK(ng->shape == Shape{D} && nbt->shape == Shape{D},
             "layer_norm: affine params must be [{}], got {} and {}", D, shape_str(ng->shape),
             shape_str(nbt->shape));
    BD_CHECK(nx->dtype == ng->dtype && nx->dtype == nbt->dtype, "layer_norm: dtype mismatch");
    int64_t rows = nx->numel() / D;
    auto out = detail::make_node(nx->shape, nx->dtype);
    auto xhat = detail::make_node(nx->shape, nx->dtype);
    auto rstd = detail::make_node({rows}, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        const T* gv = ng->data<T>();
        const T* bv = nbt->data<T>();
        T* dst = out->data<T>();
        T* xh = xhat->data<T>();
        T* rs = rstd->data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = src + r * D;
            T mu = 0;
            for (int64_t i = 0; i < D; ++i) mu += xr[i];
            mu /= static_cast<T>(D);
            T var = 0;
            for (int64_t i = 0; i < D; ++i) {
                T d = xr[i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(D);
            T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
            rs[r] = inv;
            for (int64_t i = 0; i < D; ++i) {
                T h = (xr[i] - mu) * inv;
                xh[r * D + i] = h;
                dst[r * D + i] = gv[i] * h + bv[i];
            }
        }
    });
    detail::record(
        out, {nx, ng, nbt},
        [nx, ng, nbt, xhat, rstd, D, rows](detail::Node& self) {
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* xh = xhat->data<T>();
                const T* rs = rstd->data<T>();
                const T* gv = ng->data<T>();
                if (ng->requires_grad) {
                    auto& g = *detail::ensure_grad(*ng);
                    T* gg = g.data<T>();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t i = 0; i < D; ++i) gg[i] += gy[r * D + i] * xh[r * D + i];
                }
                if (nbt->requires_grad) {
                    auto& g = *detail::ensure_grad(*nbt);
                    T* gb = g.data<T>();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t i = 0; i < D; ++i) gb[i] += gy[r * D + i];
                }
                if (nx->requires_grad) {
                    auto& g = *detail::ensure_grad(*nx);
                    T* gx = g.data<T>();
                    for (int64_t r = 0; r < rows; ++r) {
                        T m1 = 0, m2 = 0;
                        for (int64_t i = 0; i < D; ++i) {
                            T dh = gy[r * D + i] * gv[i];
                            m1 += dh;
                            m2 += dh * xh[r * D + i];
                        }
                        m1 /= static_cast<T>(D);
                        m2 /= static_cast<T>(D);
                        for (int64_t i = 0; i < D; ++i) {
                            T dh = gy[r * D + i] * gv[i];
                            gx[r * D + i] += (dh - m1 - xh[r * D + i] * m2) * rs[r];
                        }
                    }
                }
            });
        },
        "layer_norm");
    return Tensor(out);
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nbt = beta.node();
    BD_CHECK(nx->shape.size() == 4, "group_norm: input must be [B,H,W,C], got {}",
             shape_str(nx->shape));
    int64_t B = nx->shape[0], H = nx->shape[1], W = nx->shape[2], C = nx->shape[3];
    BD_CHECK(groups >= 1 && C % groups == 0, "group_norm: {} channels not divisible by {} groups",
             C, groups);
    BD_CHECK(ng->shape == Shape{C} && nbt->shape == Shape{C},
             "group_norm: affine params must be [{}]", C);
    BD_CHECK(nx->dtype == ng->dtype && nx->dtype == nbt->dtype, "group_norm: dtype mismatch");
    int64_t Cg = C / groups;
    int64_t HW = H * W;
    int64_t cnt = HW * Cg;
    auto out = detail::make_node(nx->shape, nx->dtype);
    auto xhat = detail::make_node(nx->shape, nx->dtype);
    auto rstd = detail::make_node({B * groups}, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        const T* gv = ng->data<T>();
        const T* bv = nbt->data<T>();
        T* dst = out->data<T>();
        T* xh = xhat->data<T>();
        T* rs = rstd->data<T>();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t g = 0; g < groups; ++g) {
                T mu = 0;
                for (int64_t p = 0; p < HW; ++p) {
                    const T* row = src + (b * HW + p) * C + g * Cg;
                    for (int64_t c = 0; c < Cg; ++c) mu += row[c];
                }
                mu /= static_cast<T>(cnt);
                T var = 0;
                for (int64_t p = 0; p < HW; ++p) {
                    const T* row = src + (b * HW + p) * C + g * Cg;
                    for (int64_t c = 0; c < Cg; ++c) {
                        T d = row[c] - mu;
                        var += d * d;
                    }
                }
                var /= static_cast<T>(cnt);
                T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
                rs[b * groups + g] = inv;
                for (int64_t p = 0; p < HW; ++p) {
                    int64_t base = (b * HW + p) * C + g * Cg;
                    for (int64_t c = 0; c < Cg; ++c) {
                        T h = (src[base + c] - mu) * inv;
                        xh[base + c] = h;
                        dst[base + c] = gv[g * Cg + c] * h + bv[g * Cg + c];
                    }
                }
            }
        }
    });
    detail::record(
        out, {nx, ng, nbt},
        [nx, ng, nbt, xhat, rstd, B, HW, C, Cg, cnt, groups](detail::Node& self) {
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* xh = xhat->data<T>();
                const T* rs = rstd->data<T>();
                const T* gv = ng->data<T>();
                if (ng->requires_grad || nbt->requires_grad) {
                    T* gg = ng->requires_grad ? detail::ensure_grad(*ng)->data<T>() : nullptr;
                    T* gb = nbt->requires_grad ? detail::ensure_grad(*nbt)->data<T>() : nullptr;
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t p = 0; p < HW; ++p) {
                            int64_t base = (b * HW + p) * C;
                            for (int64_t c = 0; c < C; ++c) {
                                if (gg) gg[c] += gy[base + c] * xh[base + c];
                                if (gb) gb[c] += gy[base + c];
                            }
                        }
                }
                if (nx->requires_grad) {
                    auto& g = *detail::ensure_grad(*nx);
                    T* gx = g.data<T>();
                    for (int64_t b = 0; b < B; ++b) {
                        for (int64_t gr = 0; gr < groups; ++gr) {
                            T m1 = 0, m2 = 0;
                            for (int64_t p = 0; p < HW; ++p) {
                                int64_t base = (b * HW + p) * C + gr * Cg;
                                for (int64_t c = 0; c < Cg; ++c) {
                                    T dh = gy[base + c] * gv[gr * Cg + c];
                                    m1 += dh;
                                    m2 += dh * xh[base + c];
                                }
                            }
                            m1 /= static_cast<T>(cnt);
                            m2 /= static_cast<T>(cnt);
                            T inv = rs[b * groups + gr];
                            for (int64_t p = 0; p < HW; ++p) {
                                int64_t base = (b * HW + p) * C + gr * Cg;
                                for (int64_t c = 0; c < Cg; ++c) {
                                    T dh = gy[base + c] * gv[gr * Cg + c];
                                    gx[base + c] += (dh - m1 - xh[base + c] * m2) * inv;
                                }
                            }
                        }
                    }
                }
            });
        },
        "group_norm");
    return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    auto nt = table.node();
    BD_CHECK(nt->shape.size() == 2, "embedding_lookup: table must be [V,d], got {}",
             shape_str(nt->shape));
    int64_t V = nt->shape[0], D = nt->shape[1];
    for (int id : ids)
        BD_CHECK(id >= 0 && id < V, "embedding_lookup: id {} out of range for vocabulary of {}", id,
                 V);
    int64_t n = static_cast<int64_t>(ids.size());
    BD_CHECK(n > 0, "embedding_lookup: empty id list");
    auto out = detail::make_node({n, D}, nt->dtype);
    detail::dispatch(nt->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nt->data<T>();
        T* dst = out->data<T>();
        for (int64_t i = 0; i < n; ++i)
            std::copy(src + ids[static_cast<size_t>(i)] * D,
                      src + (ids[static_cast<size_t>(i)] + 1) * D, dst + i * D);
    });
    detail::record(
        out, {nt},
        [nt, ids, D, n](detail::Node& self) {
            if (!nt->requires_grad) return;
            auto& g = *detail::ensure_grad(*nt);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* gt = g.data<T>();
                for (int64_t i = 0; i < n; ++i) {
                    T* row = gt + ids[static_cast<size_t>(i)] * D;
                    const T* src = gy + i * D;
                    for (int64_t d = 0; d < D; ++d) row[d] += src[d];
                }
            });
        },
        "embedding_lookup");
    return Tensor(out);
}

}  // namespace bridgediff
