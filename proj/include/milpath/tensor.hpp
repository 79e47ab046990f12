#pragma once

// Dense row-major f64 tensors and a define-by-run reverse-mode tape.
//
// A Graph records every op applied during one forward pass. Nodes are
// appended in creation order, which is a topological order, and backward()
// walks them in exact reverse. Parameters live outside the graph (in model
// parameter stores); Graph::parameter() registers a leaf that writes its
// gradient back into the owning Tensor's grad buffer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "milpath/error.hpp"

namespace milpath {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_numel(shape_) != values_.size()) {
            throw ShapeError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                             " values, got " + std::to_string(values_.size()));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return values_.size(); }
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<const double> grad() const { return grad_; }
    std::span<double> grad() { return grad_; }
    void zero_grad() { grad_.assign(values_.size(), 0.0); }
    void clear_grad() { grad_.clear(); }

    void accumulate_grad(std::span<const double> g) {
        if (grad_.empty()) grad_.assign(values_.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
    }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<double> values_;
    bool requires_grad_ = false;
    std::vector<double> grad_;
};

enum class OpKind {
    Constant,
    Parameter,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowBroadcast,
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxRows,
    CrossEntropy,
    Sum,
    LayerNorm,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    GatherRows,
    DepthwiseConv2d,
    Max,
    Reciprocal,
    ScaleBy,
};

class Graph;

// Handle to one node of a Graph. Becomes stale when the graph is reset.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Graph& graph() const;
    std::uint32_t id() const { return id_; }

private:
    friend class Graph;
    Var(Graph* g, std::uint32_t id, std::uint64_t generation) : graph_(g), id_(id), generation_(generation) {}

    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
    std::uint64_t generation_ = 0;
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value) {
        check_finite(value, "constant");
        return push(OpKind::Constant, {}, std::move(value), false, nullptr);
    }

    // Leaf bound to an externally owned parameter. The tensor must outlive backward().
    Var parameter(Tensor& param) {
        check_finite(param, "parameter");
        Var v = push(OpKind::Parameter, {}, param, param.requires_grad(), nullptr);
        nodes_[v.id_].param = &param;
        return v;
    }

    // Records a computed node. Used by the op functions below.
    Var record(OpKind op, std::vector<std::uint32_t> inputs, Tensor value, BackwardFn fn, const char* name) {
        check_finite(value, name);
        bool needs = false;
        for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
        return push(op, std::move(inputs), std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
    }

    void backward(const Var& loss) {
        check(loss);
        if (backward_done_) throw Error("backward() already ran on this graph; reset() before reusing it");
        const Node& root = nodes_[loss.id_];
        if (root.value.numel() != 1) {
            throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(root.value.shape()));
        }
        backward_done_ = true;
        grad_buffer(loss.id_)[0] = 1.0;
        for (std::uint32_t id = loss.id_ + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
            node.backward(*this, id);
        }
        for (auto& node : nodes_) {
            if (node.op != OpKind::Parameter || !node.requires_grad) continue;
            if (node.grad.empty()) {
                if (!node.param->has_grad()) node.param->zero_grad();
            } else {
                node.param->accumulate_grad(node.grad);
            }
        }
    }

    // Drops every node; outstanding Vars become stale.
    void reset() {
        nodes_.clear();
        backward_done_ = false;
        ++generation_;
    }

    std::size_t size() const { return nodes_.size(); }

    const Tensor& value(const Var& v) const {
        check(v);
        return nodes_[v.id_].value;
    }

    OpKind kind(const Var& v) const {
        check(v);
        return nodes_[v.id_].op;
    }

    std::span<const std::uint32_t> inputs(const Var& v) const {
        check(v);
        return nodes_[v.id_].inputs;
    }

    // Upstream gradient of a node after backward(); empty if none reached it.
    std::span<const double> grad(const Var& v) const {
        check(v);
        return nodes_[v.id_].grad;
    }

    // --- used by backward closures ---
    const Tensor& node_value(std::uint32_t id) const { return nodes_[id].value; }
    std::span<const double> node_grad(std::uint32_t id) const { return nodes_[id].grad; }
    std::uint32_t node_input(std::uint32_t id, std::size_t i) const { return nodes_[id].inputs[i]; }
    bool node_requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    std::span<double> grad_buffer(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
        return n.grad;
    }

    void check(const Var& v) const {
        if (v.graph_ != this) throw Error("Var belongs to a different graph");
        if (v.generation_ != generation_ || v.id_ >= nodes_.size()) {
            throw Error("stale Var: its graph was reset after it was created");
        }
    }

private:
    friend class Var;

    struct Node {
        OpKind op;
        std::vector<std::uint32_t> inputs;
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        Tensor* param = nullptr;
        BackwardFn backward;
    };

    static void check_finite(const Tensor& t, const char* name) {
        if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + name);
    }

    Var push(OpKind op, std::vector<std::uint32_t> inputs, Tensor value, bool requires_grad, BackwardFn fn) {
        if (backward_done_) throw Error("graph already consumed by backward(); reset() before recording");
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.value.clear_grad();
        n.requires_grad = requires_grad;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1), generation_);
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
    std::uint64_t generation_ = 0;
};

inline const Tensor& Var::value() const {
    if (!graph_) throw Error("uninitialised Var");
    return graph_->value(*this);
}

inline Graph& Var::graph() const {
    if (!graph_) throw Error("uninitialised Var");
    return *graph_;
}

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
    Graph& g = a.graph();
    if (&b.graph() != &g) throw Error("operands belong to different graphs");
    return g;
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Accumulates into the gradient buffer of input i, if that input wants one.
template <typename F>
void with_input_grad(Graph& g, std::uint32_t node, std::size_t i, F&& f) {
    const auto in = g.node_input(node, i);
    if (g.node_requires_grad(in)) f(g.grad_buffer(in), g.node_value(in));
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    detail::require_matrix(A, "matmul");
    detail::require_matrix(B, "matmul");
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (B.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Tensor out({m, n});
    auto C = out.values();
    auto av = A.values();
    auto bv = B.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = C.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return g.record(OpKind::MatMul, {a.id(), b.id()}, std::move(out),
                    [m, k, n](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        const Tensor& A = g.node_value(g.node_input(self, 0));
                        const Tensor& B = g.node_value(g.node_input(self, 1));
                        // dA = G * B^T
                        detail::with_input_grad(g, self, 0, [&](std::span<double> dA, const Tensor&) {
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    double s = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                                    dA[i * k + p] += s;
                                }
                            }
                        });
                        // dB = A^T * G
                        detail::with_input_grad(g, self, 1, [&](std::span<double> dB, const Tensor&) {
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    const double aip = A[i * k + p];
                                    for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
                                }
                            }
                        });
                    },
                    "matmul");
}

inline Var transpose(const Var& a) {
    const Tensor& A = a.value();
    detail::require_matrix(A, "transpose");
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = A(i, j);
    return a.graph().record(OpKind::Transpose, {a.id()}, std::move(out),
                            [m, n](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> dA, const Tensor&) {
                                    for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += G[j * m + i];
                                });
                            },
                            "transpose");
}

enum class ElementwiseKind { Add, Sub, Mul, Tanh, Sigmoid, Relu };

inline Var add(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return g.record(OpKind::Add, {a.id(), b.id()}, std::move(out),
                    [](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        for (std::size_t in = 0; in < 2; ++in) {
                            detail::with_input_grad(g, self, in, [&](std::span<double> d, const Tensor&) {
                                for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
                            });
                        }
                    },
                    "add");
}

inline Var sub(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return g.record(OpKind::Sub, {a.id(), b.id()}, std::move(out),
                    [](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
                        });
                        detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] -= G[i];
                        });
                    },
                    "sub");
}

inline Var mul(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return g.record(OpKind::Mul, {a.id(), b.id()}, std::move(out),
                    [](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        const Tensor& A = g.node_value(g.node_input(self, 0));
                        const Tensor& B = g.node_value(g.node_input(self, 1));
                        detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * B[i];
                        });
                        detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * A[i];
                        });
                    },
                    "mul");
}

inline Var scale(const Var& a, double factor) {
    Tensor out = a.value();
    for (auto& v : out.values()) v *= factor;
    return a.graph().record(OpKind::Scale, {a.id()}, std::move(out),
                            [factor](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (std::size_t i = 0; i < G.size(); ++i) d[i] += factor * G[i];
                                });
                            },
                            "scale");
}

// x[m x n] + b[1 x n] broadcast over rows.
inline Var add_row_broadcast(const Var& x, const Var& b) {
    Graph& g = detail::same_graph(x, b);
    const Tensor& X = x.value();
    const Tensor& B = b.value();
    detail::require_matrix(X, "add_row_broadcast");
    detail::require_matrix(B, "add_row_broadcast");
    const std::size_t m = X.rows(), n = X.cols();
    if (B.rows() != 1 || B.cols() != n) {
        throw ShapeError("add_row_broadcast: bias " + shape_str(B.shape()) + " does not fit rows of " +
                         shape_str(X.shape()));
    }
    Tensor out = X;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += B[j];
    return g.record(OpKind::AddRowBroadcast, {x.id(), b.id()}, std::move(out),
                    [m, n](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
                        });
                        detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j];
                        });
                    },
                    "add_row_broadcast");
}

namespace detail {

// Unary map whose derivative is expressed through the output value.
template <typename F, typename DF>
Var unary(const Var& a, OpKind kind, const char* name, F f, DF dfdy_from_xy) {
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = f(A[i]);
    return a.graph().record(kind, {a.id()}, std::move(out),
                            [dfdy_from_xy](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                const Tensor& Y = g.node_value(self);
                                with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor& X) {
                                    for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * dfdy_from_xy(X[i], Y[i]);
                                });
                            },
                            name);
}

}  // namespace detail

inline Var tanh(const Var& a) {
    return detail::unary(
        a, OpKind::Tanh, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a, OpKind::Sigmoid, "sigmoid",
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

// Subgradient 0 at x == 0.
inline Var relu(const Var& a) {
    return detail::unary(
        a, OpKind::Relu, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var elementwise(ElementwiseKind kind, const Var& a) {
    switch (kind) {
        case ElementwiseKind::Tanh: return tanh(a);
        case ElementwiseKind::Sigmoid: return sigmoid(a);
        case ElementwiseKind::Relu: return relu(a);
        default: throw Error("elementwise: binary kind needs two operands");
    }
}

inline Var elementwise(ElementwiseKind kind, const Var& a, const Var& b) {
    switch (kind) {
        case ElementwiseKind::Add: return add(a, b);
        case ElementwiseKind::Sub: return sub(a, b);
        case ElementwiseKind::Mul: return mul(a, b);
        default: throw Error("elementwise: unary kind takes one operand");
    }
}

// Row-wise softmax with per-row max subtraction.
inline Var softmax_rows(const Var& x) {
    const Tensor& X = x.value();
    detail::require_matrix(X, "softmax_rows");
    const std::size_t m = X.rows(), n = X.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = X(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, X(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = std::exp(X(i, j) - mx);
            total += out(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= total;
    }
    return x.graph().record(OpKind::SoftmaxRows, {x.id()}, std::move(out),
                            [m, n](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                const Tensor& Y = g.node_value(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (std::size_t i = 0; i < m; ++i) {
                                        double dot = 0.0;
                                        for (std::size_t j = 0; j < n; ++j) dot += G[i * n + j] * Y[i * n + j];
                                        for (std::size_t j = 0; j < n; ++j)
                                            d[i * n + j] += Y[i * n + j] * (G[i * n + j] - dot);
                                    }
                                });
                            },
                            "softmax_rows");
}

// Mean over the batch of -log softmax(logits)[label]. Returns a [1 x 1] tensor.
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
    const Tensor& L = logits.value();
    detail::require_matrix(L, "cross_entropy");
    const std::size_t b = L.rows(), c = L.cols();
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                         " rows");
    }
    if (b == 0) throw ShapeError("cross_entropy: empty batch");
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    for (auto y : lab) {
        if (y >= c) throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0, " + std::to_string(c) + ")");
    }
    std::vector<double> probs(b * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double mx = L(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, L(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += std::exp(L(i, j) - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(L(i, j) - lse);
        loss += lse - L(i, lab[i]);
    }
    Tensor out({1, 1}, loss / static_cast<double>(b));
    return logits.graph().record(OpKind::CrossEntropy, {logits.id()}, std::move(out),
                                 [probs = std::move(probs), lab = std::move(lab), b, c](Graph& g, std::uint32_t self) {
                                     const double up = g.node_grad(self)[0] / static_cast<double>(b);
                                     detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                         for (std::size_t i = 0; i < b; ++i) {
                                             for (std::size_t j = 0; j < c; ++j) {
                                                 const double onehot = (j == lab[i]) ? 1.0 : 0.0;
                                                 d[i * c + j] += up * (probs[i * c + j] - onehot);
                                             }
                                         }
                                     });
                                 },
                                 "cross_entropy");
}

inline Var cross_entropy(const Var& logits, std::initializer_list<std::size_t> labels) {
    return cross_entropy(logits, std::span<const std::size_t>(labels.begin(), labels.size()));
}

// Sum of all elements, as a [1 x 1] tensor.
inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return a.graph().record(OpKind::Sum, {a.id()}, Tensor({1, 1}, s),
                            [](Graph& g, std::uint32_t self) {
                                const double up = g.node_grad(self)[0];
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (auto& v : d) v += up;
                                });
                            },
                            "sum");
}

// Per-row normalisation to zero mean / unit (biased) variance, then gain and offset.
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    Graph& g = detail::same_graph(x, gain);
    detail::same_graph(x, bias);
    const Tensor& X = x.value();
    detail::require_matrix(X, "layer_norm_rows");
    const std::size_t m = X.rows(), n = X.cols();
    if (gain.value().numel() != n || bias.value().numel() != n) {
        throw ShapeError("layer_norm_rows: gain/bias must have " + std::to_string(n) + " entries");
    }
    const auto gv = gain.value().values();
    const auto bv = bias.value().values();
    std::vector<double> xhat(m * n), inv_std(m);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += X(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (X(i, j) - mean) * (X(i, j) - mean);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (X(i, j) - mean) * inv_std[i];
            out(i, j) = xhat[i * n + j] * gv[j] + bv[j];
        }
    }
    return g.record(
        OpKind::LayerNorm, {x.id(), gain.id(), bias.id()}, std::move(out),
        [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Graph& g, std::uint32_t self) {
            auto G = g.node_grad(self);
            const Tensor& gainv = g.node_value(g.node_input(self, 1));
            detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                std::vector<double> dxhat(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = G[i * n + j] * gainv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * n + j];
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        d[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                }
            });
            detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j] * xhat[i * n + j];
            });
            detail::with_input_grad(g, self, 2, [&](std::span<double> d, const Tensor&) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j];
            });
        },
        "layer_norm_rows");
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
    const Tensor& A = a.value();
    detail::require_matrix(A, "slice_rows");
    const std::size_t n = A.cols();
    if (begin + count > A.rows()) throw ShapeError("slice_rows: range exceeds " + shape_str(A.shape()));
    Tensor out({count, n});
    std::copy_n(A.values().begin() + static_cast<std::ptrdiff_t>(begin * n), count * n, out.values().begin());
    return a.graph().record(OpKind::SliceRows, {a.id()}, std::move(out),
                            [begin, count, n](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (std::size_t i = 0; i < count * n; ++i) d[begin * n + i] += G[i];
                                });
                            },
                            "slice_rows");
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    const Tensor& A = a.value();
    detail::require_matrix(A, "slice_cols");
    const std::size_t m = A.rows(), n = A.cols();
    if (begin + count > n) throw ShapeError("slice_cols: range exceeds " + shape_str(A.shape()));
    Tensor out({m, count});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = A(i, begin + j);
    return a.graph().record(OpKind::SliceCols, {a.id()}, std::move(out),
                            [begin, count, m, n](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < count; ++j) d[i * n + begin + j] += G[i * count + j];
                                });
                            },
                            "slice_cols");
}

inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    Graph& g = parts[0].graph();
    const std::size_t n = parts[0].value().cols();
    std::size_t m = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        detail::same_graph(parts[0], p);
        detail::require_matrix(p.value(), "concat_rows");
        if (p.value().cols() != n) throw ShapeError("concat_rows: column counts differ");
        ids.push_back(p.id());
        offsets.push_back(m * n);
        m += p.value().rows();
    }
    Tensor out({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto v = parts[k].value().values();
        std::copy(v.begin(), v.end(), out.values().begin() + static_cast<std::ptrdiff_t>(offsets[k]));
    }
    return g.record(OpKind::ConcatRows, std::move(ids), std::move(out),
                    [offsets](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        for (std::size_t k = 0; k < offsets.size(); ++k) {
                            detail::with_input_grad(g, self, k, [&](std::span<double> d, const Tensor&) {
                                for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[offsets[k] + i];
                            });
                        }
                    },
                    "concat_rows");
}

inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    Graph& g = parts[0].graph();
    const std::size_t m = parts[0].value().rows();
    std::size_t n = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> col_offsets, widths;
    for (const auto& p : parts) {
        detail::same_graph(parts[0], p);
        detail::require_matrix(p.value(), "concat_cols");
        if (p.value().rows() != m) throw ShapeError("concat_cols: row counts differ");
        ids.push_back(p.id());
        col_offsets.push_back(n);
        widths.push_back(p.value().cols());
        n += p.value().cols();
    }
    Tensor out({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& P = parts[k].value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out(i, col_offsets[k] + j) = P(i, j);
    }
    return g.record(OpKind::ConcatCols, std::move(ids), std::move(out),
                    [col_offsets, widths, m, n](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                            detail::with_input_grad(g, self, k, [&](std::span<double> d, const Tensor&) {
                                for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < widths[k]; ++j)
                                        d[i * widths[k] + j] += G[i * n + col_offsets[k] + j];
                            });
                        }
                    },
                    "concat_cols");
}

inline Var concat_rows(std::initializer_list<Var> parts) { return concat_rows(std::span<const Var>(parts.begin(), parts.size())); }
inline Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }

// out[i] = a[indices[i]]; repeated indices accumulate gradient.
inline Var gather_rows(const Var& a, std::vector<std::size_t> indices) {
    const Tensor& A = a.value();
    detail::require_matrix(A, "gather_rows");
    const std::size_t n = A.cols();
    Tensor out({indices.size(), n});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= A.rows()) throw ShapeError("gather_rows: index out of range");
        for (std::size_t j = 0; j < n; ++j) out(i, j) = A(indices[i], j);
    }
    return a.graph().record(OpKind::GatherRows, {a.id()}, std::move(out),
                            [indices = std::move(indices), n](Graph& g, std::uint32_t self) {
                                auto G = g.node_grad(self);
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                                    for (std::size_t i = 0; i < indices.size(); ++i)
                                        for (std::size_t j = 0; j < n; ++j) d[indices[i] * n + j] += G[i * n + j];
                                });
                            },
                            "gather_rows");
}

/// Depthwise 2-D convolution over tokens laid out on a side x side grid.
///
/// x is [side*side x C] with token t at (row t / side, col t % side);
/// kernel is [C x k*k] (one k x k filter per channel, row-major taps);
/// bias is [1 x C]. Zero padding of k/2 keeps the grid size; k must be odd.
inline Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t side, std::size_t k) {
    Graph& g = detail::same_graph(x, kernel);
    detail::same_graph(x, bias);
    const Tensor& X = x.value();
    const Tensor& K = kernel.value();
    const Tensor& B = bias.value();
    detail::require_matrix(X, "depthwise_conv2d");
    const std::size_t c = X.cols();
    if (k % 2 == 0) throw ShapeError("depthwise_conv2d: kernel size must be odd");
    if (X.rows() != side * side) throw ShapeError("depthwise_conv2d: token count is not side^2");
    if (K.rows() != c || K.cols() != k * k) throw ShapeError("depthwise_conv2d: kernel must be [C x k*k]");
    if (B.numel() != c) throw ShapeError("depthwise_conv2d: bias must have C entries");
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto s = static_cast<std::ptrdiff_t>(side);
    // Visits every (output token, input token, tap) triple inside the grid.
    auto for_each_tap = [s, pad, k](auto&& f) {
        for (std::ptrdiff_t r = 0; r < s; ++r)
            for (std::ptrdiff_t col = 0; col < s; ++col)
                for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(k); ++dy) {
                    const std::ptrdiff_t rr = r + dy - pad;
                    if (rr < 0 || rr >= s) continue;
                    for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(k); ++dx) {
                        const std::ptrdiff_t cc = col + dx - pad;
                        if (cc < 0 || cc >= s) continue;
                        f(static_cast<std::size_t>(r * s + col), static_cast<std::size_t>(rr * s + cc),
                          static_cast<std::size_t>(dy * static_cast<std::ptrdiff_t>(k) + dx));
                    }
                }
    };
    Tensor out({side * side, c});
    for (std::size_t t = 0; t < side * side; ++t)
        for (std::size_t ch = 0; ch < c; ++ch) out(t, ch) = B[ch];
    const std::size_t kk = k * k;
    for_each_tap([&](std::size_t t_out, std::size_t t_in, std::size_t tap) {
        for (std::size_t ch = 0; ch < c; ++ch) out(t_out, ch) += K[ch * kk + tap] * X(t_in, ch);
    });
    return g.record(OpKind::DepthwiseConv2d, {x.id(), kernel.id(), bias.id()}, std::move(out),
                    [for_each_tap, c, kk, side](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        const Tensor& X = g.node_value(g.node_input(self, 0));
                        const Tensor& K = g.node_value(g.node_input(self, 1));
                        detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                            for_each_tap([&](std::size_t t_out, std::size_t t_in, std::size_t tap) {
                                for (std::size_t ch = 0; ch < c; ++ch)
                                    d[t_in * c + ch] += K[ch * kk + tap] * G[t_out * c + ch];
                            });
                        });
                        detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                            for_each_tap([&](std::size_t t_out, std::size_t t_in, std::size_t tap) {
                                for (std::size_t ch = 0; ch < c; ++ch)
                                    d[ch * kk + tap] += X[t_in * c + ch] * G[t_out * c + ch];
                            });
                        });
                        detail::with_input_grad(g, self, 2, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t t = 0; t < side * side; ++t)
                                for (std::size_t ch = 0; ch < c; ++ch) d[ch] += G[t * c + ch];
                        });
                    },
                    "depthwise_conv2d");
}

// Largest element as [1 x 1]; the gradient goes to the first maximal entry.
inline Var max_all(const Var& a) {
    auto v = a.value().values();
    if (v.empty()) throw ShapeError("max_all: empty tensor");
    const std::size_t arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    return a.graph().record(OpKind::Max, {a.id()}, Tensor({1, 1}, v[arg]),
                            [arg](Graph& g, std::uint32_t self) {
                                const double up = g.node_grad(self)[0];
                                detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) { d[arg] += up; });
                            },
                            "max_all");
}

inline Var reciprocal(const Var& a) {
    return detail::unary(
        a, OpKind::Reciprocal, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

// x * s for a [1 x 1] s.
inline Var scale_by(const Var& x, const Var& s) {
    Graph& g = detail::same_graph(x, s);
    if (s.value().numel() != 1) throw ShapeError("scale_by: factor must be a single value");
    const double factor = s.value()[0];
    Tensor out = x.value();
    for (auto& v : out.values()) v *= factor;
    return g.record(OpKind::ScaleBy, {x.id(), s.id()}, std::move(out),
                    [](Graph& g, std::uint32_t self) {
                        auto G = g.node_grad(self);
                        const Tensor& X = g.node_value(g.node_input(self, 0));
                        const double factor = g.node_value(g.node_input(self, 1))[0];
                        detail::with_input_grad(g, self, 0, [&](std::span<double> d, const Tensor&) {
                            for (std::size_t i = 0; i < G.size(); ++i) d[i] += factor * G[i];
                        });
                        detail::with_input_grad(g, self, 1, [&](std::span<double> d, const Tensor&) {
                            double s = 0.0;
                            for (std::size_t i = 0; i < G.size(); ++i) s += G[i] * X[i];
                            d[0] += s;
                        });
                    },
                    "scale_by");
}

inline void backward(const Var& loss) { loss.graph().backward(loss); }

}  // namespace milpath
