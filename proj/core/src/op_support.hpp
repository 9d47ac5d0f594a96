#pragma once

// Internal helpers shared by tensor.cpp and ops.cpp.

#include "bridgediff/tensor.hpp"

#include <cmath>

namespace bridgediff::detail {

using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Shape shape, DType dt);
void check_finite(const Node& n, const char* op);
NodePtr ensure_grad(Node& n);

// Marks `out` as produced by `op`; records parents + backward fn only when
// grad mode is on and some parent is on a grad path.
void record(const NodePtr& out, std::vector<NodePtr> parents, std::function<void(Node&)> fn,
            const char* op);

// dtype dispatch: F(float{}) or F(double{})
template <class F>
auto dispatch(DType dt, F&& f) {
    if (dt == DType::F32) return f(float{});
    return f(double{});
}

// y += x elementwise (same shape/dtype)
void accumulate(Node& dst, const Node& src);

// Sums `src` (shape src_shape) into `dst` (dst_shape broadcastable to
// src_shape); used to reduce broadcast gradients.
void reduce_into(Node& dst, const Node& src);

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

}  // namespace bridgediff::detail
