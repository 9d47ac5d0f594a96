#include "bridgediff/tensor.hpp"

#include "op_support.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace bridgediff {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

namespace detail {

NodePtr make_node(Shape shape, DType dt) {
    for (int64_t e : shape) BD_CHECK(e > 0, "tensor extents must be positive, got {}", shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->dtype = dt;
    if (dt == DType::F32) {
        n->f32.resize(static_cast<size_t>(n->numel()));
    } else {
        n->f64.resize(static_cast<size_t>(n->numel()));
    }
    return n;
}

void check_finite(const Node& n, const char* op) {
    bool ok = true;
    dispatch(n.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* p = n.data<T>();
        int64_t cnt = n.numel();
        for (int64_t i = 0; i < cnt; ++i) {
            if (!std::isfinite(p[i])) {
                ok = false;
                return;
            }
        }
    });
    BD_CHECK(ok, "{}: non-finite value in output of shape {}", op, shape_str(n.shape));
}

NodePtr ensure_grad(Node& n) {
    if (!n.grad) n.grad = make_node(n.shape, n.dtype);
    return n.grad;
}

void record(const NodePtr& out, std::vector<NodePtr> parents, std::function<void(Node&)> fn,
            const char* op) {
    out->op = op;
    check_finite(*out, op);
    if (!GradMode::enabled()) return;
    bool needs = false;
    for (const auto& p : parents)
        if (p->requires_grad) needs = true;
    if (!needs) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

void accumulate(Node& dst, const Node& src) {
    dispatch(dst.dtype, [&](auto tag) {
        using T = decltype(tag);
        T* d = dst.data<T>();
        const T* s = src.data<T>();
        int64_t n = dst.numel();
        for (int64_t i = 0; i < n; ++i) d[i] += s[i];
    });
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
        BD_CHECK(ea == eb || ea == 1 || eb == 1, "{}: shapes {} and {} not broadcastable", op,
                 shape_str(a), shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

namespace {

// Row-major strides with 0 on broadcast axes, right-aligned to rank r.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
    size_t r = out.size(), ri = in.size();
    std::vector<int64_t> strides(r, 0);
    int64_t acc = 1;
    for (size_t k = 0; k < ri; ++k) {
        size_t axis = ri - 1 - k;
        strides[r - 1 - k] = (in[axis] == 1 && out[r - 1 - k] != 1) ? 0 : acc;
        acc *= in[axis];
    }
    return strides;
}

}  // namespace

void reduce_into(Node& dst, const Node& src) {
    if (dst.shape == src.shape) {
        accumulate(dst, src);
        return;
    }
    auto strides = bcast_strides(dst.shape, src.shape);
    const Shape& os = src.shape;
    size_t r = os.size();
    dispatch(dst.dtype, [&](auto tag) {
        using T = decltype(tag);
        T* d = dst.data<T>();
        const T* s = src.data<T>();
        int64_t n = src.numel();
        std::vector<int64_t> idx(r, 0);
        int64_t off = 0;
        for (int64_t i = 0; i < n; ++i) {
            d[off] += s[i];
            for (size_t k = r; k-- > 0;) {
                idx[k]++;
                off += strides[k];
                if (idx[k] < os[k]) break;
                off -= strides[k] * os[k];
                idx[k] = 0;
            }
        }
    });
}

}  // namespace detail

// ---------------- Tensor ----------------

detail::Node& Tensor::n() {
    BD_CHECK(node_ != nullptr, "operation on undefined tensor");
    return *node_;
}
const detail::Node& Tensor::n() const {
    BD_CHECK(node_ != nullptr, "operation on undefined tensor");
    return *node_;
}

Tensor Tensor::zeros(Shape shape, DType dt, bool requires_grad) {
    auto n = detail::make_node(std::move(shape), dt);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
    auto n = detail::make_node(std::move(shape), dt);
    detail::dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        std::fill(n->data<T>(), n->data<T>() + n->numel(), static_cast<T>(value));
    });
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& values, DType dt) {
    auto n = detail::make_node(std::move(shape), dt);
    BD_CHECK(static_cast<int64_t>(values.size()) == n->numel(),
             "from_vector: {} values for shape {}", values.size(), shape_str(n->shape));
    detail::dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = n->data<T>();
        for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<T>(values[i]);
    });
    return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, RngStream& rng, DType dt, double stddev) {
    auto n = detail::make_node(std::move(shape), dt);
    detail::dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = n->data<T>();
        int64_t cnt = n->numel();
        for (int64_t i = 0; i < cnt; ++i) p[i] = static_cast<T>(rng.normal() * stddev);
    });
    return Tensor(std::move(n));
}

Tensor Tensor::randu(Shape shape, RngStream& rng, DType dt) {
    auto n = detail::make_node(std::move(shape), dt);
    detail::dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = n->data<T>();
        int64_t cnt = n->numel();
        for (int64_t i = 0; i < cnt; ++i) p[i] = static_cast<T>(rng.uniform());
    });
    return Tensor(std::move(n));
}

const Shape& Tensor::shape() const { return n().shape; }
int64_t Tensor::dim(int axis) const { return n().shape.at(static_cast<size_t>(axis)); }
int Tensor::rank() const { return static_cast<int>(n().shape.size()); }
int64_t Tensor::numel() const { return n().numel(); }
DType Tensor::dtype() const { return n().dtype; }

bool Tensor::requires_grad() const { return n().requires_grad; }
void Tensor::set_requires_grad(bool on) { n().requires_grad = on; }
const std::string& Tensor::name() const { return n().name; }
void Tensor::set_name(std::string name) { n().name = std::move(name); }

float* Tensor::data_f32() {
    BD_CHECK(dtype() == DType::F32, "data_f32 on f64 tensor");
    return n().f32.data();
}
const float* Tensor::data_f32() const {
    BD_CHECK(dtype() == DType::F32, "data_f32 on f64 tensor");
    return n().f32.data();
}
double* Tensor::data_f64() {
    BD_CHECK(dtype() == DType::F64, "data_f64 on f32 tensor");
    return n().f64.data();
}
const double* Tensor::data_f64() const {
    BD_CHECK(dtype() == DType::F64, "data_f64 on f32 tensor");
    return n().f64.data();
}

double Tensor::at(int64_t i) const {
    const auto& node = n();
    BD_CHECK(i >= 0 && i < node.numel(), "index {} out of range for {}", i, shape_str(node.shape));
    return node.dtype == DType::F32 ? static_cast<double>(node.f32[static_cast<size_t>(i)])
                                    : node.f64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
    auto& node = n();
    BD_CHECK(i >= 0 && i < node.numel(), "index {} out of range for {}", i, shape_str(node.shape));
    if (node.dtype == DType::F32) {
        node.f32[static_cast<size_t>(i)] = static_cast<float>(v);
    } else {
        node.f64[static_cast<size_t>(i)] = v;
    }
}

Tensor Tensor::grad() const { return n().grad ? Tensor(n().grad) : Tensor(); }
void Tensor::clear_grad() { n().grad = nullptr; }

Tensor Tensor::clone() const {
    const auto& node = n();
    auto out = detail::make_node(node.shape, node.dtype);
    out->f32 = node.f32;
    out->f64 = node.f64;
    return Tensor(std::move(out));
}

Tensor Tensor::detach() const { return clone(); }

Tensor Tensor::to_dtype(DType dt) const {
    const auto& node = n();
    if (node.dtype == dt) return clone();
    auto out = detail::make_node(node.shape, dt);
    int64_t cnt = node.numel();
    for (int64_t i = 0; i < cnt; ++i) {
        double v = at(i);
        if (dt == DType::F32) {
            out->f32[static_cast<size_t>(i)] = static_cast<float>(v);
        } else {
            out->f64[static_cast<size_t>(i)] = v;
        }
    }
    return Tensor(std::move(out));
}

std::vector<double> Tensor::to_vector() const {
    int64_t cnt = numel();
    std::vector<double> out(static_cast<size_t>(cnt));
    for (int64_t i = 0; i < cnt; ++i) out[static_cast<size_t>(i)] = at(i);
    return out;
}

// ---------------- elementwise ----------------

namespace {

using detail::NodePtr;

template <class T, class F>
void bcast_apply(const detail::Node& a, const detail::Node& b, detail::Node& out, F f) {
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    int64_t n = out.numel();
    if (a.shape == out.shape && b.shape == out.shape) {
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return;
    }
    auto bcast_strides = [](const Shape& in, const Shape& os) {
        size_t r = os.size(), ri = in.size();
        std::vector<int64_t> strides(r, 0);
        int64_t acc = 1;
        for (size_t k = 0; k < ri; ++k) {
            size_t axis = ri - 1 - k;
            strides[r - 1 - k] = (in[axis] == 1 && os[r - 1 - k] != 1) ? 0 : acc;
            acc *= in[axis];
        }
        return strides;
    };
    auto sa = bcast_strides(a.shape, out.shape);
    auto sb = bcast_strides(b.shape, out.shape);
    const Shape& os = out.shape;
    size_t r = os.size();
    std::vector<int64_t> idx(r, 0);
    int64_t offa = 0, offb = 0;
    for (int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[offa], pb[offb]);
        for (size_t k = r; k-- > 0;) {
            idx[k]++;
            offa += sa[k];
            offb += sb[k];
            if (idx[k] < os[k]) break;
            offa -= sa[k] * os[k];
            offb -= sb[k] * os[k];
            idx[k] = 0;
        }
    }
}

enum class BinKind { Add, Sub, Mul, SqErr };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* opname) {
    BD_CHECK(a.defined() && b.defined(), "{}: undefined operand", opname);
    BD_CHECK(a.dtype() == b.dtype(), "{}: dtype mismatch {} vs {}", opname, dtype_name(a.dtype()),
             dtype_name(b.dtype()));
    auto na = a.node();
    auto nb = b.node();
    Shape os = detail::broadcast_shape(na->shape, nb->shape, opname);
    auto out = detail::make_node(os, a.dtype());
    detail::dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        switch (kind) {
            case BinKind::Add:
                bcast_apply<T>(*na, *nb, *out, [](T x, T y) { return x + y; });
                break;
            case BinKind::Sub:
                bcast_apply<T>(*na, *nb, *out, [](T x, T y) { return x - y; });
                break;
            case BinKind::Mul:
                bcast_apply<T>(*na, *nb, *out, [](T x, T y) { return x * y; });
                break;
            case BinKind::SqErr:
                bcast_apply<T>(*na, *nb, *out, [](T x, T y) {
                    T d = x - y;
                    return d * d;
                });
                break;
        }
    });
    detail::record(
        out, {na, nb},
        [na, nb, kind](detail::Node& self) {
            // d/da and d/db, reduced over broadcast axes
            auto ga = detail::make_node(self.shape, self.dtype);
            auto gb = detail::make_node(self.shape, self.dtype);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* pga = ga->data<T>();
                T* pgb = gb->data<T>();
                int64_t n = self.numel();
                switch (kind) {
                    case BinKind::Add:
                        std::copy(gy, gy + n, pga);
                        std::copy(gy, gy + n, pgb);
                        break;
                    case BinKind::Sub:
                        std::copy(gy, gy + n, pga);
                        for (int64_t i = 0; i < n; ++i) pgb[i] = -gy[i];
                        break;
                    case BinKind::Mul:
                        bcast_apply<T>(*nb, self, *ga, [](T y, T) { return y; });
                        bcast_apply<T>(*na, self, *gb, [](T x, T) { return x; });
                        for (int64_t i = 0; i < n; ++i) {
                            pga[i] *= gy[i];
                            pgb[i] *= gy[i];
                        }
                        break;
                    case BinKind::SqErr:
                        bcast_apply<T>(*na, *nb, *ga, [](T x, T y) { return T(2) * (x - y); });
                        for (int64_t i = 0; i < n; ++i) {
                            pgb[i] = -pga[i] * gy[i];
                            pga[i] *= gy[i];
                        }
                        break;
                }
            });
            if (na->requires_grad) detail::reduce_into(*detail::ensure_grad(*na), *ga);
            if (nb->requires_grad) detail::reduce_into(*detail::ensure_grad(*nb), *gb);
        },
        opname);
    return Tensor(out);
}

template <class FwdF32, class FwdF64>
Tensor unary_op(const Tensor& a, FwdF32 f32fn, FwdF64 f64fn, const char* opname,
                std::function<void(detail::Node&, const NodePtr&, const NodePtr&)> bwd) {
    BD_CHECK(a.defined(), "{}: undefined operand", opname);
    auto na = a.node();
    auto out = detail::make_node(na->shape, na->dtype);
    if (na->dtype == DType::F32) {
        const float* p = na->data<float>();
        float* o = out->data<float>();
        int64_t n = na->numel();
        for (int64_t i = 0; i < n; ++i) o[i] = f32fn(p[i]);
    } else {
        const double* p = na->data<double>();
        double* o = out->data<double>();
        int64_t n = na->numel();
        for (int64_t i = 0; i < n; ++i) o[i] = f64fn(p[i]);
    }
    NodePtr outp = out;
    detail::record(
        out, {na}, [na, outp, bwd](detail::Node& self) { bwd(self, na, outp); }, opname);
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor squared_error(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, BinKind::SqErr, "squared_error");
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](float x) { return static_cast<float>(x + s); }, [s](double x) { return x + s; },
        "add_scalar", [](detail::Node& self, const NodePtr& na, const NodePtr&) {
            if (!na->requires_grad) return;
            detail::accumulate(*detail::ensure_grad(*na), *self.grad);
        });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](float x) { return static_cast<float>(x * s); }, [s](double x) { return x * s; },
        "mul_scalar", [s](detail::Node& self, const NodePtr& na, const NodePtr&) {
            if (!na->requires_grad) return;
            auto& g = *detail::ensure_grad(*na);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* gx = g.data<T>();
                int64_t n = self.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * static_cast<T>(s);
            });
        });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::exp(x); }, [](double x) { return std::exp(x); }, "exp",
        [](detail::Node& self, const NodePtr& na, const NodePtr& out) {
            if (!na->requires_grad) return;
            auto& g = *detail::ensure_grad(*na);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* y = out->data<T>();
                T* gx = g.data<T>();
                int64_t n = self.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i];
            });
        });
}

namespace {
template <class T>
T sigmoid_val(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](float x) { return sigmoid_val(x); }, [](double x) { return sigmoid_val(x); },
        "sigmoid", [](detail::Node& self, const NodePtr& na, const NodePtr& out) {
            if (!na->requires_grad) return;
            auto& g = *detail::ensure_grad(*na);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* y = out->data<T>();
                T* gx = g.data<T>();
                int64_t n = self.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
            });
        });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x * sigmoid_val(x); }, [](double x) { return x * sigmoid_val(x); },
        "silu", [](detail::Node& self, const NodePtr& na, const NodePtr&) {
            if (!na->requires_grad) return;
            auto& g = *detail::ensure_grad(*na);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* x = na->data<T>();
                T* gx = g.data<T>();
                int64_t n = self.numel();
                for (int64_t i = 0; i < n; ++i) {
                    T s = sigmoid_val(x[i]);
                    gx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
                }
            });
        });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x > 0.f ? x : 0.f; }, [](double x) { return x > 0. ? x : 0.; },
        "relu", [](detail::Node& self, const NodePtr& na, const NodePtr&) {
            if (!na->requires_grad) return;
            auto& g = *detail::ensure_grad(*na);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                const T* x = na->data<T>();
                T* gx = g.data<T>();
                int64_t n = self.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
            });
        });
}

Tensor identity(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x; }, [](double x) { return x; }, "identity",
        [](detail::Node& self, const NodePtr& na, const NodePtr&) {
            if (!na->requires_grad) return;
            detail::accumulate(*detail::ensure_grad(*na), *self.grad);
        });
}

Tensor constant_like(const Tensor& x, double value) {
    return Tensor::full(x.shape(), value, x.dtype());
}

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& x, Shape shape) {
    auto nx = x.node();
    int64_t n = shape_numel(shape);
    BD_CHECK(n == nx->numel(), "reshape: cannot view {} as {}", shape_str(nx->shape),
             shape_str(shape));
    auto out = detail::make_node(shape, nx->dtype);
    out->f32 = nx->f32;
    out->f64 = nx->f64;
    detail::record(
        out, {nx},
        [nx](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::accumulate(g, *self.grad);
        },
        "reshape");
    return Tensor(out);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    auto nx = x.node();
    size_t r = nx->shape.size();
    BD_CHECK(axes.size() == r, "permute: got {} axes for rank {}", axes.size(), r);
    std::vector<bool> seen(r, false);
    Shape os(r);
    for (size_t i = 0; i < r; ++i) {
        int a = axes[i];
        BD_CHECK(a >= 0 && static_cast<size_t>(a) < r && !seen[static_cast<size_t>(a)],
                 "permute: bad axis list");
        seen[static_cast<size_t>(a)] = true;
        os[i] = nx->shape[static_cast<size_t>(a)];
    }
    auto permute_copy = [](const detail::Node& in, detail::Node& out, const std::vector<int>& ax) {
        size_t rr = in.shape.size();
        std::vector<int64_t> in_strides(rr, 1);
        for (size_t k = rr - 1; k-- > 0;) in_strides[k] = in_strides[k + 1] * in.shape[k + 1];
        std::vector<int64_t> strides(rr);
        for (size_t i = 0; i < rr; ++i) strides[i] = in_strides[static_cast<size_t>(ax[i])];
        detail::dispatch(in.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* src = in.data<T>();
            T* dst = out.data<T>();
            std::vector<int64_t> idx(rr, 0);
            int64_t off = 0;
            int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) {
                dst[i] = src[off];
                for (size_t k = rr; k-- > 0;) {
                    idx[k]++;
                    off += strides[k];
                    if (idx[k] < out.shape[k]) break;
                    off -= strides[k] * out.shape[k];
                    idx[k] = 0;
                }
            }
        });
    };
    auto out = detail::make_node(os, nx->dtype);
    permute_copy(*nx, *out, axes);
    std::vector<int> inv(r);
    for (size_t i = 0; i < r; ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
    detail::record(
        out, {nx},
        [nx, inv, permute_copy](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto tmp = detail::make_node(nx->shape, nx->dtype);
            permute_copy(*self.grad, *tmp, inv);
            detail::accumulate(*detail::ensure_grad(*nx), *tmp);
        },
        "permute");
    return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    BD_CHECK(!xs.empty(), "concat: empty input list");
    auto first = xs[0].node();
    size_t r = first->shape.size();
    BD_CHECK(axis >= 0 && static_cast<size_t>(axis) < r, "concat: axis {} out of range", axis);
    Shape os = first->shape;
    int64_t total = 0;
    std::vector<detail::NodePtr> parents;
    for (const auto& x : xs) {
        auto nx = x.node();
        BD_CHECK(nx->dtype == first->dtype, "concat: dtype mismatch");
        BD_CHECK(nx->shape.size() == r, "concat: rank mismatch");
        for (size_t i = 0; i < r; ++i) {
            if (static_cast<int>(i) != axis)
                BD_CHECK(nx->shape[i] == first->shape[i], "concat: shape {} vs {} on axis {}",
                         shape_str(nx->shape), shape_str(first->shape), i);
        }
        total += nx->shape[static_cast<size_t>(axis)];
        parents.push_back(nx);
    }
    os[static_cast<size_t>(axis)] = total;
    auto out = detail::make_node(os, first->dtype);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= os[i];

    detail::dispatch(first->dtype, [&](auto tag) {
        using T = decltype(tag);
        T* dst = out->data<T>();
        int64_t row = total * inner;
        int64_t col0 = 0;
        for (const auto& p : parents) {
            int64_t e = p->shape[static_cast<size_t>(axis)];
            const T* src = p->data<T>();
            for (int64_t o = 0; o < outer; ++o) {
                std::memcpy(dst + o * row + col0, src + o * e * inner,
                            static_cast<size_t>(e * inner) * sizeof(T));
            }
            col0 += e * inner;
        }
    });
    detail::record(
        out, parents,
        [parents, axis, outer, inner, total](detail::Node& self) {
            int64_t row = total * inner;
            int64_t col0 = 0;
            for (const auto& p : parents) {
                int64_t e = p->shape[static_cast<size_t>(axis)];
                if (p->requires_grad) {
                    auto& g = *detail::ensure_grad(*p);
                    detail::dispatch(self.dtype, [&](auto tag) {
                        using T = decltype(tag);
                        const T* gy = self.grad->data<T>();
                        T* gp = g.data<T>();
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* src = gy + o * row + col0;
                            T* dst = gp + o * e * inner;
                            for (int64_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                        }
                    });
                }
                col0 += e * inner;
            }
        },
        "concat");
    return Tensor(out);
}

Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t length) {
    auto nx = x.node();
    size_t r = nx->shape.size();
    BD_CHECK(axis >= 0 && static_cast<size_t>(axis) < r, "narrow: axis {} out of range", axis);
    int64_t e = nx->shape[static_cast<size_t>(axis)];
    BD_CHECK(start >= 0 && length >= 1 && start + length <= e,
             "narrow: window [{}, {}) out of range for extent {}", start, start + length, e);
    Shape os = nx->shape;
    os[static_cast<size_t>(axis)] = length;
    auto out = detail::make_node(os, nx->dtype);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= nx->shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= nx->shape[i];
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        T* dst = out->data<T>();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(dst + o * length * inner, src + (o * e + start) * inner,
                        static_cast<size_t>(length * inner) * sizeof(T));
        }
    });
    detail::record(
        out, {nx},
        [nx, start, length, outer, inner, e](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* gx = g.data<T>();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = gy + o * length * inner;
                    T* dst = gx + (o * e + start) * inner;
                    for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                }
            });
        },
        "narrow");
    return Tensor(out);
}

// ---------------- reductions ----------------

Tensor mean(const Tensor& x, std::vector<int> axes) {
    auto nx = x.node();
    size_t r = nx->shape.size();
    std::sort(axes.begin(), axes.end());
    BD_CHECK(!axes.empty(), "mean: no axes given");
    std::vector<bool> reduce(r, false);
    for (size_t i = 0; i < axes.size(); ++i) {
        int a = axes[i];
        BD_CHECK(a >= 0 && static_cast<size_t>(a) < r, "mean: axis {} out of range for rank {}", a, r);
        BD_CHECK(i == 0 || axes[i] != axes[i - 1], "mean: duplicate axis {}", a);
        reduce[static_cast<size_t>(a)] = true;
    }
    Shape os;
    int64_t count = 1;
    for (size_t i = 0; i < r; ++i) {
        if (reduce[i]) {
            count *= nx->shape[i];
        } else {
            os.push_back(nx->shape[i]);
        }
    }
    if (os.empty()) os = {1};
    auto out = detail::make_node(os, nx->dtype);

    // keep-shape with 1s on reduced axes, for broadcast-style iteration
    Shape keep = nx->shape;
    for (size_t i = 0; i < r; ++i)
        if (reduce[i]) keep[i] = 1;
    auto strides = [&]() {
        std::vector<int64_t> st(r, 0);
        int64_t acc = 1;
        for (size_t k = r; k-- > 0;) {
            st[k] = keep[k] == 1 && nx->shape[k] != 1 ? 0 : acc;
            acc *= keep[k];
        }
        return st;
    }();
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* src = nx->data<T>();
        T* dst = out->data<T>();
        std::fill(dst, dst + out->numel(), T(0));
        std::vector<int64_t> idx(r, 0);
        int64_t off = 0;
        int64_t n = nx->numel();
        for (int64_t i = 0; i < n; ++i) {
            dst[off] += src[i];
            for (size_t k = r; k-- > 0;) {
                idx[k]++;
                off += strides[k];
                if (idx[k] < nx->shape[k]) break;
                off -= strides[k] * nx->shape[k];
                idx[k] = 0;
            }
        }
        T inv = T(1) / static_cast<T>(count);
        for (int64_t i = 0; i < out->numel(); ++i) dst[i] *= inv;
    });
    detail::record(
        out, {nx},
        [nx, strides, count, r](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* gy = self.grad->data<T>();
                T* gx = g.data<T>();
                T inv = T(1) / static_cast<T>(count);
                std::vector<int64_t> idx(r, 0);
                int64_t off = 0;
                int64_t n = nx->numel();
                for (int64_t i = 0; i < n; ++i) {
                    gx[i] += gy[off] * inv;
                    for (size_t k = r; k-- > 0;) {
                        idx[k]++;
                        off += strides[k];
                        if (idx[k] < nx->shape[k]) break;
                        off -= strides[k] * nx->shape[k];
                        idx[k] = 0;
                    }
                }
            });
        },
        "mean");
    return Tensor(out);
}

Tensor mean_all(const Tensor& x) {
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return mean(x, axes);
}

Tensor sum_all(const Tensor& x) {
    auto nx = x.node();
    auto out = detail::make_node({1}, nx->dtype);
    detail::dispatch(nx->dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* p = nx->data<T>();
        T acc = 0;
        int64_t n = nx->numel();
        for (int64_t i = 0; i < n; ++i) acc += p[i];
        out->data<T>()[0] = acc;
    });
    detail::record(
        out, {nx},
        [nx](detail::Node& self) {
            if (!nx->requires_grad) return;
            auto& g = *detail::ensure_grad(*nx);
            detail::dispatch(self.dtype, [&](auto tag) {
                using T = decltype(tag);
                T gy = self.grad->data<T>()[0];
                T* gx = g.data<T>();
                int64_t n = nx->numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += gy;
            });
        },
        "sum");
    return Tensor(out);
}

// ---------------- backward ----------------

GradientMap backward(const Tensor& loss) {
    BD_CHECK(loss.defined(), "backward: undefined loss");
    BD_CHECK(loss.numel() == 1, "backward: loss must be scalar, got shape {}",
             shape_str(loss.shape()));
    auto root = loss.node();
    BD_CHECK(!root->backward_done, "backward: called twice without a new forward pass");
    BD_CHECK(root->requires_grad,
             "backward: loss does not depend on any requires_grad parameter");

    // post-order topological sort over parents
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    {
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(root.get(), 0);
        visited.insert(root.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* p = node->parents[next].get();
                ++next;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    for (detail::Node* n : order) n->grad = nullptr;
    auto g0 = detail::ensure_grad(*root);
    detail::dispatch(root->dtype, [&](auto tag) {
        using T = decltype(tag);
        g0->data<T>()[0] = T(1);
    });

    // order is post-order, so reverse iteration visits each node before its
    // parents; a node's grad is complete when reached
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->grad) continue;  // not on an active grad path
        detail::check_finite(*n->grad, "backward");
        if (n->backward_fn) n->backward_fn(*n);
    }

    GradientMap grads;
    for (detail::Node* n : order) {
        if (!n->backward_fn && n->requires_grad && n->grad && !n->name.empty()) {
            grads.emplace(n->name, Tensor(n->grad));
        }
    }

    // consume the graph; interior activations free once handles drop
    for (detail::Node* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad = nullptr;
        }
    }
    root->backward_done = true;
    return grads;
}

Tensor mask_embedding_gradient(const Tensor& grad, int64_t keep_row) {
    BD_CHECK(grad.rank() == 2, "mask_embedding_gradient: expected [vocab, dim], got {}",
             shape_str(grad.shape()));
    int64_t v = grad.dim(0), d = grad.dim(1);
    BD_CHECK(keep_row >= 0 && keep_row < v,
             "mask_embedding_gradient: keep_row {} out of range for vocab {}", keep_row, v);
    Tensor out = Tensor::zeros(grad.shape(), grad.dtype());
    detail::dispatch(grad.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = grad.node()->data<T>();
        T* dst = out.node()->data<T>();
        std::memcpy(dst + keep_row * d, src + keep_row * d, static_cast<size_t>(d) * sizeof(T));
    });
    return out;
}

// ---------------- diagnostics ----------------

bool all_finite(const Tensor& t) {
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i)
        if (!std::isfinite(t.at(i))) return false;
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    BD_CHECK(a.shape() == b.shape(), "max_abs_diff: shape {} vs {}", shape_str(a.shape()),
             shape_str(b.shape()));
    double m = 0;
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    const auto& na = *a.node();
    const auto& nb = *b.node();
    if (a.dtype() == DType::F32) {
        return std::memcmp(na.f32.data(), nb.f32.data(), na.f32.size() * 4) == 0;
    }
    return std::memcmp(na.f64.data(), nb.f64.data(), na.f64.size() * 8) == 0;
}

uint64_t tensor_fingerprint(const Tensor& t) {
    const auto& n = *t.node();
    const unsigned char* p;
    size_t len;
    if (n.dtype == DType::F32) {
        p = reinterpret_cast<const unsigned char*>(n.f32.data());
        len = n.f32.size() * 4;
    } else {
        p = reinterpret_cast<const unsigned char*>(n.f64.data());
        len = n.f64.size() * 8;
    }
    uint64_t h = 0xCBF29CE484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace bridgediff
