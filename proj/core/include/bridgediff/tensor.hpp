#pragma once

#include "bridgediff/common.hpp"
#include "bridgediff/rng.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace bridgediff {

enum class DType { F32, F64 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    DType dtype = DType::F32;
    std::vector<float> f32;
    std::vector<double> f64;

    bool requires_grad = false;  // leaf: trainable; interior: on a grad path
    std::string name;            // set for registered parameters
    const char* op = "leaf";

    // Reverse-mode graph. backward_fn reads this node's grad and accumulates
    // into the parents' grads. Cleared once backward has consumed the graph.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    std::shared_ptr<Node> grad;
    bool backward_done = false;

    int64_t numel() const { return shape_numel(shape); }
    template <class T>
    T* data();
    template <class T>
    const T* data() const;
};

template <>
inline float* Node::data<float>() { return f32.data(); }
template <>
inline double* Node::data<double>() { return f64.data(); }
template <>
inline const float* Node::data<float>() const { return f32.data(); }
template <>
inline const double* Node::data<double>() const { return f64.data(); }

}  // namespace detail

// Scoped switch that disables graph recording (used for inference paths).
class NoNoGradGuard;
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// N-dimensional numeric array participating in a reverse-mode gradient graph.
// Value-semantic handle; copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dt = DType::F32, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dt = DType::F32);
    static Tensor scalar(double value, DType dt = DType::F32);
    static Tensor from_vector(Shape shape, const std::vector<double>& values, DType dt = DType::F32);
    static Tensor randn(Shape shape, RngStream& rng, DType dt = DType::F32, double stddev = 1.0);
    static Tensor randu(Shape shape, RngStream& rng, DType dt = DType::F32);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t dim(int axis) const;
    int rank() const;
    int64_t numel() const;
    DType dtype() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    const std::string& name() const;
    void set_name(std::string name);

    float* data_f32();
    const float* data_f32() const;
    double* data_f64();
    const double* data_f64() const;

    // dtype-agnostic element access by flat row-major index
    double at(int64_t i) const;
    void set(int64_t i, double v);

    Tensor grad() const;  // undefined tensor when absent
    void clear_grad();

    Tensor clone() const;           // deep copy, detached leaf
    Tensor detach() const;          // deep copy without grad tracking
    Tensor to_dtype(DType dt) const;
    std::vector<double> to_vector() const;

    // identity of the underlying storage (registry audits, aliasing checks)
    const void* node_id() const { return node_.get(); }

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    detail::Node& n();
    const detail::Node& n() const;
    std::shared_ptr<detail::Node> node_;
};

// parameter id -> gradient, for exactly the named requires_grad leaves
// reachable from the loss
using GradientMap = std::map<std::string, Tensor>;

// named-parameter registry (sorted for deterministic iteration)
using ParamMap = std::map<std::string, Tensor>;

// ---- forward op set ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [b,m,k]x[b,k,n]

// 3x3 convolution over NHWC input, zero padding 1, stride 1 or 2.
// weight layout [3,3,Cin,Cout], bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride);
Tensor upsample_nearest2x(const Tensor& x);  // [B,H,W,C] -> [B,2H,2W,C]

// Elementwise with numpy-style broadcasting (each axis equal or 1 after
// right-alignment).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor identity(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor squared_error(const Tensor& a, const Tensor& b);  // (a-b)^2 elementwise

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// [B,H,W,C] normalized per (sample, channel group); gamma/beta [C]
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);  // [V,d] -> [n,d]

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t length);

Tensor mean(const Tensor& x, std::vector<int> axes);  // reduced axes removed
Tensor mean_all(const Tensor& x);                     // scalar
Tensor sum_all(const Tensor& x);                      // scalar

// constants helper: stops gradient tracking regardless of inputs
Tensor constant_like(const Tensor& x, double value);

// ---- reverse mode ----
// loss must be a scalar produced by recorded ops; consumes the graph.
GradientMap backward(const Tensor& loss);

// Fig-style masked embedding update: keeps exactly one row of an embedding
// table gradient, zeroes the rest. Pure function, no graph participation.
Tensor mask_embedding_gradient(const Tensor& grad, int64_t keep_row);

// test/diagnostic helpers
bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);
uint64_t tensor_fingerprint(const Tensor& t);  // FNV-1a over raw bytes

}  // namespace bridgediff
