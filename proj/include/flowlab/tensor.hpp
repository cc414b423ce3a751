#pragma once

#include <functional>
#include <memory>

#include "flowlab/common.hpp"

namespace flowlab {

// Reverse-mode autodiff over dense 64-bit real tensors, tape-based and eager.
// Every op validates its output for finiteness at creation, so any op input
// is guaranteed finite (it was itself validated when created). Gradients are
// accumulated into `grad`; a node is immutable after creation except for that
// accumulation.

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool backward_ran = false;  // set on the root once backward consumed it
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    // Reads this->grad, accumulates into parents' grads. Captures parent
    // pointers only; `self` is passed by reference to avoid ownership cycles.
    std::function<void(TensorNode& self)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double v, bool requires_grad = false);
    static Tensor from_data(const Shape& s, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_matrix(const Matrix& m, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return {node_->value.data(), node_->value.size()}; }
    // Raw write access for leaves (parameter updates); never call on op outputs.
    std::span<double> raw_data() { return {node_->value.data(), node_->value.size()}; }

    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();

    double item() const;
    Matrix to_matrix() const;  // 2-D only

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

// Thread-local recording switch. Inside a NoGradGuard scope ops compute
// values only: no parents, no closures, outputs never require grad.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// ---- primitives ----
// add/sub/mul support identical shapes or scalar-with-tensor; anything else
// is rejected with both shapes in the message.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sum_all(const Tensor& x);   // -> scalar
Tensor mean_all(const Tensor& x);  // -> scalar
Tensor concat_cols(const Tensor& a, const Tensor& b);           // [B,p] ++ [B,q] -> [B,p+q]
Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);  // [B,n] -> [B,end-begin]
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
Tensor floor_op(const Tensor& x);  // non-differentiable: output never requires grad
Tensor stop_gradient(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& new_shape);  // same numel, identity data

// Elementwise forward f, identity Jacobian backward. The straight-through
// building block: forward is exactly f(x), upstream grads pass through
// unchanged (bitwise).
Tensor ste_unary(const Tensor& x, const std::function<double(double)>& f, const char* name);

Tensor broadcast_rows(const Tensor& x, int64_t rows);  // [1,n] -> [rows,n]

// Tiny-image ops. Layout [B,C,H,W]; stride 1, zero 'same' padding, odd kernels.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor avg_pool2(const Tensor& x);                                  // 2x2 mean, halves H and W
Tensor broadcast_spatial(const Tensor& x, int64_t h, int64_t w);    // [B,C] -> [B,C,h,w]

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Topologically ordered record of the reachable subgraph under a root:
// parents always precede consumers. backward() builds one and replays it in
// reverse, exactly once per forward graph.
class Tape {
public:
    static Tape build(const Tensor& root);
    const std::vector<TensorNode*>& order() const { return order_; }
    void run_backward(const Tensor& root);

private:
    std::vector<TensorNode*> order_;
    std::vector<NodePtr> keep_alive_;
};

// Seeds d(loss)/d(loss) = 1 and accumulates d(loss)/d(leaf) into every
// requires_grad leaf. Rejects non-scalar roots and repeated backward on the
// same graph.
void backward(const Tensor& loss);

}  // namespace flowlab
