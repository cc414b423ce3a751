#include "flowlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace flowlab {

namespace {

thread_local bool g_grad_enabled = true;

void validate_finite(const TensorNode& n) {
    for (double v : n.value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + n.op + "'");
        }
    }
}

NodePtr make_node(Shape shape, std::vector<double> value, const char* op) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    validate_finite(*n);
    return n;
}

// Wires parents/backprop only when recording is on and some input needs
// gradients; otherwise the node is a plain constant.
Tensor finish_op(NodePtr out, std::vector<NodePtr> parents, std::function<void(TensorNode&)> backprop) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
    }
    if (needs) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    return Tensor(std::move(out));
}

void check_same_or_scalar(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1) return;
    throw ValidationError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " are neither identical nor scalar-broadcastable");
}

void check_2d(const Tensor& x, const char* op) {
    if (x.shape().size() != 2)
        throw ValidationError(std::string(op) + ": expected a 2-D tensor, got shape " + shape_str(x.shape()));
}

void check_4d(const Tensor& x, const char* op) {
    if (x.shape().size() != 4)
        throw ValidationError(std::string(op) + ": expected a 4-D tensor, got shape " + shape_str(x.shape()));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    return from_data(s, std::vector<double>(static_cast<size_t>(shape_numel(s)), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
    return from_data(s, std::vector<double>(static_cast<size_t>(shape_numel(s)), v), requires_grad);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape_numel(s))
        throw ValidationError("from_data: shape " + shape_str(s) + " wants " + std::to_string(shape_numel(s)) +
                              " values, got " + std::to_string(data.size()));
    auto n = make_node(s, std::move(data), "leaf");
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({}, {v}, requires_grad); }

Tensor Tensor::from_matrix(const Matrix& m, bool requires_grad) {
    return from_data({m.rows, m.cols}, m.a, requires_grad);
}

std::span<const double> Tensor::grad() const {
    const_cast<TensorNode*>(node_.get())->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ValidationError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

Matrix Tensor::to_matrix() const {
    check_2d(*this, "to_matrix");
    Matrix m(shape()[0], shape()[1]);
    m.a = node_->value;
    return m;
}

// ---- elementwise binary ----

namespace {

template <typename Fwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 std::function<void(TensorNode&)> backprop) {
    check_same_or_scalar(a, b, name);
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const int64_t n = a_scalar ? b.numel() : a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (int64_t i = 0; i < n; ++i) {
        double x = a_scalar ? av[0] : av[static_cast<size_t>(i)];
        double y = b_scalar ? bv[0] : bv[static_cast<size_t>(i)];
        out[static_cast<size_t>(i)] = fwd(x, y);
    }
    return finish_op(make_node(out_shape, std::move(out), name), {a.node(), b.node()}, std::move(backprop));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; }, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            if (pa.numel() == self.numel()) {
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            } else {
                for (double g : self.grad) pa.grad[0] += g;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            if (pb.numel() == self.numel()) {
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
            } else {
                for (double g : self.grad) pb.grad[0] += g;
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; }, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            if (pa.numel() == self.numel()) {
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            } else {
                for (double g : self.grad) pa.grad[0] += g;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            if (pb.numel() == self.numel()) {
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
            } else {
                for (double g : self.grad) pb.grad[0] -= g;
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; }, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& av = pa.value;
        const auto& bv = pb.value;
        const bool a_scalar = pa.numel() == 1 && self.numel() != 1;
        const bool b_scalar = pb.numel() == 1 && self.numel() != 1;
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double y = b_scalar ? bv[0] : bv[i];
                if (a_scalar)
                    pa.grad[0] += self.grad[i] * y;
                else
                    pa.grad[i] += self.grad[i] * y;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double x = a_scalar ? av[0] : av[i];
                if (b_scalar)
                    pb.grad[0] += self.grad[i] * x;
                else
                    pb.grad[i] += self.grad[i] * x;
            }
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    if (!std::isfinite(c)) throw NumericError("scale: non-finite scalar");
    std::vector<double> out(x.node()->value);
    for (double& v : out) v *= c;
    return finish_op(make_node(x.shape(), std::move(out), "scale"), {x.node()}, [c](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
    });
}

// ---- matmul ----

namespace {

// C += A[m,k] * B[k,n], i-k-j loop order for contiguous inner access.
void gemm_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = arow[p];
            if (a == 0.0) continue;
            const double* brow = B + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C += A^T[m,k]^T=(k,m) variant: C[k,n] += A[m,k]^T * B[m,n]
void gemm_at_b(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        const double* brow = B + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = arow[p];
            if (a == 0.0) continue;
            double* crow = C + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_a_bt(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * n;
        double* crow = C + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double* brow = B + p * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ValidationError("matmul: inner extents disagree for shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    gemm_acc(a.node()->value.data(), b.node()->value.data(), out.data(), m, k, n);
    return finish_op(make_node({m, n}, std::move(out), "matmul"), {a.node(), b.node()},
                     [m, k, n](TensorNode& self) {
                         auto& pa = *self.parents[0];
                         auto& pb = *self.parents[1];
                         if (pa.requires_grad) {
                             pa.ensure_grad();
                             // dA = dC * B^T
                             gemm_a_bt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
                         }
                         if (pb.requires_grad) {
                             pb.ensure_grad();
                             // dB = A^T * dC
                             gemm_at_b(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
                         }
                     });
}

// ---- elementwise unary ----

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
    return finish_op(make_node(x.shape(), std::move(out), "sigmoid"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double y = self.value[i];
            p.grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor tanh_op(const Tensor& x) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = std::tanh(v);
    return finish_op(make_node(x.shape(), std::move(out), "tanh"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double y = self.value[i];
            p.grad[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

Tensor exp_op(const Tensor& x) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = std::exp(v);
    return finish_op(make_node(x.shape(), std::move(out), "exp"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
    });
}

Tensor square(const Tensor& x) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = v * v;
    return finish_op(make_node(x.shape(), std::move(out), "square"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * 2.0 * p.value[i];
    });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.node()->value) s += v;
    return finish_op(make_node({}, {s}, "sum"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
    });
}

Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw ValidationError("mean: empty tensor");
    double s = 0.0;
    for (double v : x.node()->value) s += v;
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    return finish_op(make_node({}, {s * inv_n}, "mean"), {x.node()}, [inv_n](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0] * inv_n;
    });
}

// ---- structure ops ----

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    check_2d(a, "concat_cols");
    check_2d(b, "concat_cols");
    if (a.shape()[0] != b.shape()[0])
        throw ValidationError("concat_cols: row counts disagree for shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    const int64_t rows = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(rows * (ca + cb)));
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(av.begin() + r * ca, ca, out.begin() + r * (ca + cb));
        std::copy_n(bv.begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
    }
    return finish_op(make_node({rows, ca + cb}, std::move(out), "concat_cols"), {a.node(), b.node()},
                     [rows, ca, cb](TensorNode& self) {
                         auto& pa = *self.parents[0];
                         auto& pb = *self.parents[1];
                         if (pa.requires_grad) {
                             pa.ensure_grad();
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int64_t c = 0; c < ca; ++c)
                                     pa.grad[static_cast<size_t>(r * ca + c)] +=
                                         self.grad[static_cast<size_t>(r * (ca + cb) + c)];
                         }
                         if (pb.requires_grad) {
                             pb.ensure_grad();
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int64_t c = 0; c < cb; ++c)
                                     pb.grad[static_cast<size_t>(r * cb + c)] +=
                                         self.grad[static_cast<size_t>(r * (ca + cb) + ca + c)];
                         }
                     });
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
    check_2d(x, "slice_cols");
    const int64_t rows = x.shape()[0], cols = x.shape()[1];
    if (begin < 0 || end > cols || begin >= end)
        throw ValidationError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") invalid for shape " + shape_str(x.shape()));
    const int64_t w = end - begin;
    std::vector<double> out(static_cast<size_t>(rows * w));
    const auto& xv = x.node()->value;
    for (int64_t r = 0; r < rows; ++r) std::copy_n(xv.begin() + r * cols + begin, w, out.begin() + r * w);
    return finish_op(make_node({rows, w}, std::move(out), "slice_cols"), {x.node()},
                     [rows, cols, begin, w](TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         for (int64_t r = 0; r < rows; ++r)
                             for (int64_t c = 0; c < w; ++c)
                                 p.grad[static_cast<size_t>(r * cols + begin + c)] +=
                                     self.grad[static_cast<size_t>(r * w + c)];
                     });
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
    check_2d(x, "slice_rows");
    const int64_t rows = x.shape()[0], cols = x.shape()[1];
    if (begin < 0 || end > rows || begin >= end)
        throw ValidationError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") invalid for shape " + shape_str(x.shape()));
    const int64_t h = end - begin;
    std::vector<double> out(x.node()->value.begin() + begin * cols, x.node()->value.begin() + end * cols);
    return finish_op(make_node({h, cols}, std::move(out), "slice_rows"), {x.node()},
                     [cols, begin, h](TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         for (int64_t i = 0; i < h * cols; ++i)
                             p.grad[static_cast<size_t>(begin * cols + i)] += self.grad[static_cast<size_t>(i)];
                     });
}

Tensor floor_op(const Tensor& x) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = std::floor(v);
    // Zero gradient everywhere: the output is a constant w.r.t. the graph.
    return Tensor(make_node(x.shape(), std::move(out), "floor"));
}

Tensor stop_gradient(const Tensor& x) {
    std::vector<double> out(x.node()->value);  // bitwise identity forward
    return Tensor(make_node(x.shape(), std::move(out), "stop_gradient"));
}

Tensor reshape(const Tensor& x, const Shape& new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ValidationError("reshape: " + shape_str(x.shape()) + " cannot view as " + shape_str(new_shape));
    std::vector<double> out(x.node()->value);
    return finish_op(make_node(new_shape, std::move(out), "reshape"), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

Tensor ste_unary(const Tensor& x, const std::function<double(double)>& f, const char* name) {
    std::vector<double> out(x.node()->value);
    for (double& v : out) v = f(v);
    return finish_op(make_node(x.shape(), std::move(out), name), {x.node()}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

Tensor broadcast_rows(const Tensor& x, int64_t rows) {
    check_2d(x, "broadcast_rows");
    if (x.shape()[0] != 1)
        throw ValidationError("broadcast_rows: expected one row, got shape " + shape_str(x.shape()));
    const int64_t n = x.shape()[1];
    std::vector<double> out(static_cast<size_t>(rows * n));
    const auto& xv = x.node()->value;
    for (int64_t r = 0; r < rows; ++r) std::copy_n(xv.begin(), n, out.begin() + r * n);
    return finish_op(make_node({rows, n}, std::move(out), "broadcast_rows"), {x.node()},
                     [rows, n](TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         for (int64_t r = 0; r < rows; ++r)
                             for (int64_t c = 0; c < n; ++c)
                                 p.grad[static_cast<size_t>(c)] += self.grad[static_cast<size_t>(r * n + c)];
                     });
}

// ---- tiny-image ops ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_4d(x, "conv2d");
    check_4d(w, "conv2d");
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t O = w.shape()[0], Cw = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (C != Cw)
        throw ValidationError("conv2d: channel mismatch between input " + shape_str(x.shape()) + " and kernel " +
                              shape_str(w.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw ValidationError("conv2d: kernel extents must be odd");
    if (bias.numel() != O)
        throw ValidationError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                              std::to_string(O) + " output channels");
    const int64_t ph = kh / 2, pw = kw / 2;
    std::vector<double> out(static_cast<size_t>(B * O * H * W), 0.0);
    const auto& xv = x.node()->value;
    const auto& wv = w.node()->value;
    const auto& bv = bias.node()->value;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    double acc = bv[static_cast<size_t>(o)];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t u = 0; u < kh; ++u) {
                            int64_t ii = i + u - ph;
                            if (ii < 0 || ii >= H) continue;
                            for (int64_t v = 0; v < kw; ++v) {
                                int64_t jj = j + v - pw;
                                if (jj < 0 || jj >= W) continue;
                                acc += xv[static_cast<size_t>(((b * C + c) * H + ii) * W + jj)] *
                                       wv[static_cast<size_t>(((o * C + c) * kh + u) * kw + v)];
                            }
                        }
                    out[static_cast<size_t>(((b * O + o) * H + i) * W + j)] = acc;
                }
    return finish_op(make_node({B, O, H, W}, std::move(out), "conv2d"), {x.node(), w.node(), bias.node()},
                     [B, C, H, W, O, kh, kw, ph, pw](TensorNode& self) {
                         auto& px = *self.parents[0];
                         auto& pw_ = *self.parents[1];
                         auto& pb = *self.parents[2];
                         if (px.requires_grad) px.ensure_grad();
                         if (pw_.requires_grad) pw_.ensure_grad();
                         if (pb.requires_grad) pb.ensure_grad();
                         for (int64_t b = 0; b < B; ++b)
                             for (int64_t o = 0; o < O; ++o)
                                 for (int64_t i = 0; i < H; ++i)
                                     for (int64_t j = 0; j < W; ++j) {
                                         double g = self.grad[static_cast<size_t>(((b * O + o) * H + i) * W + j)];
                                         if (g == 0.0) continue;
                                         if (pb.requires_grad) pb.grad[static_cast<size_t>(o)] += g;
                                         for (int64_t c = 0; c < C; ++c)
                                             for (int64_t u = 0; u < kh; ++u) {
                                                 int64_t ii = i + u - ph;
                                                 if (ii < 0 || ii >= H) continue;
                                                 for (int64_t v = 0; v < kw; ++v) {
                                                     int64_t jj = j + v - pw;
                                                     if (jj < 0 || jj >= W) continue;
                                                     size_t xi = static_cast<size_t>(((b * C + c) * H + ii) * W + jj);
                                                     size_t wi = static_cast<size_t>(((o * C + c) * kh + u) * kw + v);
                                                     if (px.requires_grad) px.grad[xi] += g * pw_.value[wi];
                                                     if (pw_.requires_grad) pw_.grad[wi] += g * px.value[xi];
                                                 }
                                             }
                                     }
                     });
}

Tensor avg_pool2(const Tensor& x) {
    check_4d(x, "avg_pool2");
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw ValidationError("avg_pool2: spatial extents must be even, got " + shape_str(x.shape()));
    const int64_t Ho = H / 2, Wo = W / 2;
    std::vector<double> out(static_cast<size_t>(B * C * Ho * Wo));
    const auto& xv = x.node()->value;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < Ho; ++i)
                for (int64_t j = 0; j < Wo; ++j) {
                    size_t base = static_cast<size_t>(((b * C + c) * H + 2 * i) * W + 2 * j);
                    // pairwise sum keeps equal inputs exact
                    double s = (xv[base] + xv[base + 1]) + (xv[base + W] + xv[base + W + 1]);
                    out[static_cast<size_t>(((b * C + c) * Ho + i) * Wo + j)] = s * 0.25;
                }
    return finish_op(make_node({B, C, Ho, Wo}, std::move(out), "avg_pool2"), {x.node()},
                     [B, C, H, W, Ho, Wo](TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         for (int64_t b = 0; b < B; ++b)
                             for (int64_t c = 0; c < C; ++c)
                                 for (int64_t i = 0; i < Ho; ++i)
                                     for (int64_t j = 0; j < Wo; ++j) {
                                         double g =
                                             0.25 * self.grad[static_cast<size_t>(((b * C + c) * Ho + i) * Wo + j)];
                                         size_t base = static_cast<size_t>(((b * C + c) * H + 2 * i) * W + 2 * j);
                                         p.grad[base] += g;
                                         p.grad[base + 1] += g;
                                         p.grad[base + W] += g;
                                         p.grad[base + W + 1] += g;
                                     }
                     });
}

Tensor broadcast_spatial(const Tensor& x, int64_t h, int64_t w) {
    check_2d(x, "broadcast_spatial");
    const int64_t B = x.shape()[0], C = x.shape()[1];
    std::vector<double> out(static_cast<size_t>(B * C * h * w));
    const auto& xv = x.node()->value;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double v = xv[static_cast<size_t>(b * C + c)];
            std::fill_n(out.begin() + ((b * C + c) * h * w), h * w, v);
        }
    return finish_op(make_node({B, C, h, w}, std::move(out), "broadcast_spatial"), {x.node()},
                     [B, C, h, w](TensorNode& self) {
                         auto& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         p.ensure_grad();
                         for (int64_t b = 0; b < B; ++b)
                             for (int64_t c = 0; c < C; ++c) {
                                 double acc = 0.0;
                                 size_t base = static_cast<size_t>((b * C + c) * h * w);
                                 for (int64_t k = 0; k < h * w; ++k) acc += self.grad[base + static_cast<size_t>(k)];
                                 p.grad[static_cast<size_t>(b * C + c)] += acc;
                             }
                     });
}

// ---- backward ----

Tape Tape::build(const Tensor& root) {
    Tape tape;
    std::unordered_set<TensorNode*> visited;
    // Iterative postorder DFS: parents enter the order before consumers.
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    tape.keep_alive_.push_back(root.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* parent = node->parents[idx].get();
            NodePtr keep = node->parents[idx];
            ++idx;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                tape.keep_alive_.push_back(keep);
                stack.emplace_back(parent, 0);
            }
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::run_backward(const Tensor& root) {
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ValidationError("backward: loss of shape " + shape_str(loss.shape()) + " is not scalar");
    if (!loss.requires_grad())
        throw ValidationError("backward: loss is not connected to any tracked input");
    if (loss.node()->backward_ran) throw ValidationError("backward: already run for this graph");
    loss.node()->backward_ran = true;
    Tape::build(loss).run_backward(loss);
}

}  // namespace flowlab
