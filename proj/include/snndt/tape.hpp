#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node id). Nodes are appended in creation order, so
// replaying the node list backwards visits every consumer before its producer.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "snndt/tensor.hpp"

namespace snndt {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    bool attached() const noexcept { return tape != nullptr; }
};

enum class OpKind : std::uint8_t {
    kConstant,
    kParameter,
    kAdd,
    kSub,
    kMul,
    kScale,
    kAddRow,
    kAddCol,
    kMulRow,
    kMulCol,
    kMatMul,
    kTranspose,
    kReshape,
    kTileRows,
    kConcatCols,
    kConcatRows,
    kSliceCols,
    kGatherRows,
    kAddN,
    kSigmoid,
    kTanh,
    kRelu,
    kSin,
    kSoftmaxRows,
    kLayerNorm,
    kMse,
    kCrossEntropy,
    kMaskedFill,
    kSum,
    kCustomGrad,
    kLifIntegrate,
    kLifReset,
};

/// Elementwise op whose backward pass uses a stand-in derivative. `relaxed` is
/// a smooth function whose true derivative is `backward`; gradient checks run
/// the tape in relaxed mode so finite differences see the surrogate path.
struct CustomGradSpec {
    std::function<double(double)> forward;
    std::function<double(double)> backward;
    std::function<double(double)> relaxed;
    /// Optional whole-tensor form of `backward` (grad_in = g * backward(x)); skips per-element dispatch.
    std::function<void(const Tensor& x, const Tensor& g, Tensor& grad_in)> backward_tensor;
};

/// Per-node gradients after a backward pass, indexed by node id.
class GradientMap {
public:
    GradientMap() = default;
    explicit GradientMap(std::vector<Tensor> grads, std::vector<Shape> shapes)
        : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

    /// Gradient of the loss with respect to `v`; zeros when `v` did not reach the loss.
    Tensor operator[](Var v) const {
        if (v.id >= grads_.size()) throw UsageError("GradientMap: unknown node id");
        if (grads_[v.id].empty()) return Tensor(shapes_[v.id]);
        return grads_[v.id];
    }
    bool touched(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

private:
    std::vector<Tensor> grads_;
    std::vector<Shape> shapes_;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    enum class ThresholdMode { kHard, kRelaxed };

    Tape() = default;
    explicit Tape(ThresholdMode mode) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ThresholdMode threshold_mode() const noexcept { return mode_; }

    /// Detached input: carries a node id for bookkeeping but never receives gradient.
    Var constant(Tensor value) { return push(OpKind::kConstant, std::move(value), {}, false); }

    /// Leaf that accumulates gradient (model parameters, differentiable inputs).
    Var parameter(Tensor value) { return push(OpKind::kParameter, std::move(value), {}, true); }

    /// Appends an op result. The result requires grad iff any input does; the
    /// adjoint rule is skipped entirely otherwise.
    Var record(OpKind kind, std::initializer_list<Var> inputs, Tensor result, Backward backward) {
        return record(kind, std::vector<Var>(inputs), std::move(result), std::move(backward));
    }

    Var record(OpKind kind, const std::vector<Var>& inputs, Tensor result, Backward backward) {
        bool needs = false;
        for (const Var& v : inputs) {
            check_owned(v);
            needs = needs || nodes_[v.id].requires_grad;
        }
        return push(kind, std::move(result), needs ? std::move(backward) : Backward{}, needs);
    }

    const Tensor& value(Var v) const {
        check_owned(v);
        return nodes_[v.id].value;
    }
    OpKind kind(Var v) const {
        check_owned(v);
        return nodes_[v.id].kind;
    }
    bool requires_grad(Var v) const {
        check_owned(v);
        return nodes_[v.id].requires_grad;
    }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adds `g` into the gradient accumulator of `v` (used by adjoint rules).
    void accumulate(Var v, const Tensor& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (g.shape() != n.value.shape()) {
            throw UsageError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                             shape_str(n.value.shape()));
        }
        if (n.grad.empty()) {
            n.grad = g;
        } else {
            kernels::axpy(1.0, g, n.grad);
        }
    }

    /// Mutable accumulator, allocated as zeros on first use.
    Tensor& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    GradientMap backward(Var loss) {
        check_owned(loss);
        if (nodes_[loss.id].value.size() != 1) {
            throw UsageError("backward: loss must be scalar, got shape " +
                             shape_str(nodes_[loss.id].value.shape()));
        }
        for (Node& n : nodes_) n.grad = Tensor();
        nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            // Adjoints only touch accumulators of earlier nodes; nothing is pushed here.
            n.backward(*this, n.grad);
        }
        std::vector<Tensor> grads;
        std::vector<Shape> shapes;
        grads.reserve(nodes_.size());
        shapes.reserve(nodes_.size());
        for (Node& n : nodes_) {
            grads.push_back(std::move(n.grad));
            shapes.push_back(n.value.shape());
            n.grad = Tensor();
        }
        return GradientMap(std::move(grads), std::move(shapes));
    }

private:
    struct Node {
        OpKind kind;
        Tensor value;
        Tensor grad;
        Backward backward;
        bool requires_grad;
    };

    Var push(OpKind kind, Tensor value, Backward backward, bool requires_grad) {
        nodes_.push_back(Node{kind, std::move(value), Tensor(), std::move(backward), requires_grad});
        return Var{this, nodes_.size() - 1};
    }

    void check_owned(Var v) const {
        if (v.tape != this) throw UsageError("tensor belongs to a different tape (or is detached)");
        if (v.id >= nodes_.size()) throw UsageError("invalid node id");
    }

    std::deque<Node> nodes_;  // stable addresses: value() references survive later records
    ThresholdMode mode_ = ThresholdMode::kHard;
};

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (!a.attached() || a.tape != b.tape) throw UsageError("operands belong to different tapes");
    return *a.tape;
}

inline Tape& tape_of(Var a) {
    if (!a.attached()) throw UsageError("operand is not attached to a tape");
    return *a.tape;
}

inline Tape& tape_of(const std::vector<Var>& vs) {
    if (vs.empty()) throw UsageError("empty operand list");
    Tape& t = tape_of(vs.front());
    for (const Var& v : vs) {
        if (v.tape != &t) throw UsageError("operands belong to different tapes");
    }
    return t;
}

template <class F, class D>
Var unary(OpKind kind, Var a, F&& f, D&& dfdx_from_xy) {
    Tape& t = tape_of(a);
    Tensor y = kernels::map(t.value(a), f);
    return t.record(kind, {a}, std::move(y),
                    [a, d = std::forward<D>(dfdx_from_xy)](Tape& tp, const Tensor& g) {
                        const Tensor& x = tp.value(a);
                        Tensor gx(x.shape());
                        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * d(x[i]);
                        tp.accumulate(a, gx);
                    });
}

}  // namespace detail

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    kernels::require_same_shape(t.value(a), t.value(b), "add");
    Tensor y = t.value(a);
    kernels::axpy(1.0, t.value(b), y);
    return t.record(OpKind::kAdd, {a, b}, std::move(y), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    kernels::require_same_shape(t.value(a), t.value(b), "sub");
    Tensor y = t.value(a);
    kernels::axpy(-1.0, t.value(b), y);
    return t.record(OpKind::kSub, {a, b}, std::move(y), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(b)) tp.accumulate(b, kernels::map(g, [](double v) { return -v; }));
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& x = t.value(a);
    const Tensor& z = t.value(b);
    kernels::require_same_shape(x, z, "mul");
    Tensor y(x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
    return t.record(OpKind::kMul, {a, b}, std::move(y), [a, b](Tape& tp, const Tensor& g) {
        const Tensor& xa = tp.value(a);
        const Tensor& xb = tp.value(b);
        if (tp.requires_grad(a)) {
            Tensor ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * xb[i];
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * xa[i];
            tp.accumulate(b, gb);
        }
    });
}

inline Var scale(Var a, double c) {
    Tape& t = detail::tape_of(a);
    Tensor y = kernels::map(t.value(a), [c](double v) { return c * v; });
    return t.record(OpKind::kScale, {a}, std::move(y), [a, c](Tape& tp, const Tensor& g) {
        tp.accumulate(a, kernels::map(g, [c](double v) { return c * v; }));
    });
}

/// X (n x m) + r (1 x m) broadcast over rows.
inline Var add_row(Var x, Var r) {
    Tape& t = detail::same_tape(x, r);
    const Tensor& xv = t.value(x);
    const Tensor& rv = t.value(r);
    if (rv.rows() != 1 || rv.cols() != xv.cols()) throw UsageError("add_row: row shape mismatch");
    Tensor y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += rv[j];
    return t.record(OpKind::kAddRow, {x, r}, std::move(y), [x, r](Tape& tp, const Tensor& g) {
        tp.accumulate(x, g);
        if (tp.requires_grad(r)) {
            Tensor gr = Tensor::matrix(1, g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
            tp.accumulate(r, gr);
        }
    });
}

/// X (n x m) + c (n x 1) broadcast over columns.
inline Var add_col(Var x, Var c) {
    Tape& t = detail::same_tape(x, c);
    const Tensor& xv = t.value(x);
    const Tensor& cv = t.value(c);
    if (cv.cols() != 1 || cv.rows() != xv.rows()) throw UsageError("add_col: column shape mismatch");
    Tensor y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += cv[i];
    return t.record(OpKind::kAddCol, {x, c}, std::move(y), [x, c](Tape& tp, const Tensor& g) {
        tp.accumulate(x, g);
        if (tp.requires_grad(c)) {
            Tensor gc = Tensor::matrix(g.rows(), 1);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gc[i] += g(i, j);
            tp.accumulate(c, gc);
        }
    });
}

/// X (n x m) * r (1 x m), scaling each column.
inline Var mul_row(Var x, Var r) {
    Tape& t = detail::same_tape(x, r);
    const Tensor& xv = t.value(x);
    const Tensor& rv = t.value(r);
    if (rv.rows() != 1 || rv.cols() != xv.cols()) throw UsageError("mul_row: row shape mismatch");
    Tensor y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) *= rv[j];
    return t.record(OpKind::kMulRow, {x, r}, std::move(y), [x, r](Tape& tp, const Tensor& g) {
        const Tensor& xv2 = tp.value(x);
        const Tensor& rv2 = tp.value(r);
        if (tp.requires_grad(x)) {
            Tensor gx = g;
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) *= rv2[j];
            tp.accumulate(x, gx);
        }
        if (tp.requires_grad(r)) {
            Tensor gr = Tensor::matrix(1, g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j) * xv2(i, j);
            tp.accumulate(r, gr);
        }
    });
}

/// X (n x m) * c (n x 1), scaling each row.
inline Var mul_col(Var x, Var c) {
    Tape& t = detail::same_tape(x, c);
    const Tensor& xv = t.value(x);
    const Tensor& cv = t.value(c);
    if (cv.cols() != 1 || cv.rows() != xv.rows()) throw UsageError("mul_col: column shape mismatch");
    Tensor y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) *= cv[i];
    return t.record(OpKind::kMulCol, {x, c}, std::move(y), [x, c](Tape& tp, const Tensor& g) {
        const Tensor& xv2 = tp.value(x);
        const Tensor& cv2 = tp.value(c);
        if (tp.requires_grad(x)) {
            Tensor gx = g;
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) *= cv2[i];
            tp.accumulate(x, gx);
        }
        if (tp.requires_grad(c)) {
            Tensor gc = Tensor::matrix(g.rows(), 1);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gc[i] += g(i, j) * xv2(i, j);
            tp.accumulate(c, gc);
        }
    });
}

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    Tensor y = kernels::matmul(t.value(a), t.value(b));
    return t.record(OpKind::kMatMul, {a, b}, std::move(y), [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, kernels::matmul_nt(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, kernels::matmul_tn(tp.value(a), g));
    });
}

inline Var transpose(Var a) {
    Tape& t = detail::tape_of(a);
    Tensor y = kernels::transpose(t.value(a));
    return t.record(OpKind::kTranspose, {a}, std::move(y),
                    [a](Tape& tp, const Tensor& g) { tp.accumulate(a, kernels::transpose(g)); });
}

inline Var reshape(Var a, Shape shape) {
    Tape& t = detail::tape_of(a);
    Tensor y = t.value(a).reshaped(std::move(shape));
    return t.record(OpKind::kReshape, {a}, std::move(y), [a](Tape& tp, const Tensor& g) {
        tp.accumulate(a, g.reshaped(tp.value(a).shape()));
    });
}

/// Repeats a 1 x m row `count` times into a count x m matrix.
inline Var tile_rows(Var r, std::size_t count) {
    Tape& t = detail::tape_of(r);
    const Tensor& rv = t.value(r);
    if (rv.rows() != 1) throw UsageError("tile_rows: expected a 1 x m row");
    Tensor y = Tensor::matrix(count, rv.cols());
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < rv.cols(); ++j) y(i, j) = rv[j];
    return t.record(OpKind::kTileRows, {r}, std::move(y), [r](Tape& tp, const Tensor& g) {
        Tensor gr = Tensor::matrix(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
        tp.accumulate(r, gr);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    Tape& t = detail::tape_of(parts);
    const std::size_t n = t.value(parts.front()).rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const Var& p : parts) {
        const Tensor& v = t.value(p);
        if (v.rows() != n) throw UsageError("concat_cols: row counts differ");
        widths.push_back(v.cols());
        total += v.cols();
    }
    Tensor y = Tensor::matrix(n, total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = t.value(parts[k]);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) y(i, off + j) = v(i, j);
        off += widths[k];
    }
    return t.record(OpKind::kConcatCols, parts, std::move(y), [parts, widths](Tape& tp, const Tensor& g) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (tp.requires_grad(parts[k])) {
                Tensor gk = Tensor::matrix(g.rows(), widths[k]);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gk(i, j) = g(i, o + j);
                tp.accumulate(parts[k], gk);
            }
            o += widths[k];
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    Tape& t = detail::tape_of(parts);
    const std::size_t m = t.value(parts.front()).cols();
    std::vector<double> data;
    std::vector<std::size_t> heights;
    for (const Var& p : parts) {
        const Tensor& v = t.value(p);
        if (v.cols() != m) throw UsageError("concat_rows: column counts differ");
        heights.push_back(v.rows());
        data.insert(data.end(), v.vec().begin(), v.vec().end());
    }
    const std::size_t n = data.size() / m;
    Tensor y({n, m}, std::move(data));
    return t.record(OpKind::kConcatRows, parts, std::move(y), [parts, heights](Tape& tp, const Tensor& g) {
        std::size_t r = 0;
        const std::size_t cols = g.cols();
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (tp.requires_grad(parts[k])) {
                std::vector<double> slice(g.vec().begin() + static_cast<std::ptrdiff_t>(r * cols),
                                          g.vec().begin() + static_cast<std::ptrdiff_t>((r + heights[k]) * cols));
                tp.accumulate(parts[k], Tensor({heights[k], cols}, std::move(slice)));
            }
            r += heights[k];
        }
    });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
    Tape& t = detail::tape_of(x);
    const Tensor& xv = t.value(x);
    if (count == 0 || start + count > xv.cols()) throw UsageError("slice_cols: range out of bounds");
    Tensor y = Tensor::matrix(xv.rows(), count);
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) y(i, j) = xv(i, start + j);
    return t.record(OpKind::kSliceCols, {x}, std::move(y), [x, start, count](Tape& tp, const Tensor& g) {
        Tensor& buf = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < count; ++j) buf(i, start + j) += g(i, j);
    });
}

/// Row gather: y[i] = x[index[i]]; the adjoint scatter-adds.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
    Tape& t = detail::tape_of(x);
    const Tensor& xv = t.value(x);
    Tensor y = Tensor::matrix(index.size(), xv.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= xv.rows()) throw UsageError("gather_rows: index out of range");
        for (std::size_t j = 0; j < xv.cols(); ++j) y(i, j) = xv(index[i], j);
    }
    return t.record(OpKind::kGatherRows, {x}, std::move(y),
                    [x, idx = std::move(index)](Tape& tp, const Tensor& g) {
                        Tensor& buf = tp.grad_buffer(x);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) buf(idx[i], j) += g(i, j);
                    });
}

inline Var add_n(const std::vector<Var>& terms) {
    Tape& t = detail::tape_of(terms);
    Tensor y = t.value(terms.front());
    for (std::size_t k = 1; k < terms.size(); ++k) kernels::axpy(1.0, t.value(terms[k]), y);
    return t.record(OpKind::kAddN, terms, std::move(y), [terms](Tape& tp, const Tensor& g) {
        for (const Var& v : terms) tp.accumulate(v, g);
    });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    return detail::unary(OpKind::kSigmoid, a, sigmoid_value, [](double x) {
        const double s = sigmoid_value(x);
        return s * (1.0 - s);
    });
}

inline Var tanh(Var a) {
    return detail::unary(OpKind::kTanh, a, [](double x) { return std::tanh(x); }, [](double x) {
        const double th = std::tanh(x);
        return 1.0 - th * th;
    });
}

inline Var relu(Var a) {
    return detail::unary(OpKind::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sin(Var a) {
    return detail::unary(OpKind::kSin, a, [](double x) { return std::sin(x); },
                         [](double x) { return std::cos(x); });
}

inline Tensor softmax_rows_value(const Tensor& z) {
    Tensor y(z.shape());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) {
            const double e = std::exp(z(i, j) - mx);
            y(i, j) = e;
            s += e;
        }
        for (std::size_t j = 0; j < z.cols(); ++j) y(i, j) /= s;
    }
    return y;
}

inline Var softmax_rows(Var a) {
    Tape& t = detail::tape_of(a);
    Tensor y = softmax_rows_value(t.value(a));
    Tensor keep = y;
    return t.record(OpKind::kSoftmaxRows, {a}, std::move(y), [a, p = std::move(keep)](Tape& tp, const Tensor& g) {
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * p(i, j);
            for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = p(i, j) * (g(i, j) - dot);
        }
        tp.accumulate(a, gx);
    });
}

/// Row-wise normalization to zero mean / unit variance (no affine terms).
inline Var layer_norm(Var a, double eps = 1e-5) {
    Tape& t = detail::tape_of(a);
    const Tensor& x = t.value(a);
    const std::size_t n = x.rows(), m = x.cols();
    Tensor y(x.shape());
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) mean += x(i, j);
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= static_cast<double>(m);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) y(i, j) = (x(i, j) - mean) * inv_std[i];
    }
    Tensor xhat = y;
    return t.record(OpKind::kLayerNorm, {a}, std::move(y),
                    [a, xh = std::move(xhat), is = std::move(inv_std)](Tape& tp, const Tensor& g) {
                        const std::size_t rows = g.rows(), cols = g.cols();
                        const double inv_m = 1.0 / static_cast<double>(cols);
                        Tensor gx(g.shape());
                        for (std::size_t i = 0; i < rows; ++i) {
                            double sg = 0.0, sgx = 0.0;
                            for (std::size_t j = 0; j < cols; ++j) {
                                sg += g(i, j);
                                sgx += g(i, j) * xh(i, j);
                            }
                            for (std::size_t j = 0; j < cols; ++j) {
                                gx(i, j) = is[i] * (g(i, j) - inv_m * sg - xh(i, j) * inv_m * sgx);
                            }
                        }
                        tp.accumulate(a, gx);
                    });
}

/// Weighted mean of squared row errors: sum_i w_i * ||x_i - y_i||^2 / sum_i w_i.
/// Rows with zero weight (padding) contribute nothing.
inline Var mse(Var pred, const Tensor& target, std::vector<double> row_weights) {
    Tape& t = detail::tape_of(pred);
    const Tensor& x = t.value(pred);
    kernels::require_same_shape(x, target, "mse");
    if (row_weights.size() != x.rows()) throw UsageError("mse: one weight per row required");
    double wsum = 0.0;
    for (double w : row_weights) wsum += w;
    if (!(wsum > 0.0)) throw UsageError("mse: weights sum to zero");
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (row_weights[i] == 0.0) continue;
        double r = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) r += (x(i, j) - target(i, j)) * (x(i, j) - target(i, j));
        loss += row_weights[i] * r;
    }
    loss /= wsum;
    return t.record(OpKind::kMse, {pred}, Tensor::scalar(loss),
                    [pred, target, w = std::move(row_weights), wsum](Tape& tp, const Tensor& g) {
                        const Tensor& xv = tp.value(pred);
                        Tensor gx(xv.shape());
                        for (std::size_t i = 0; i < xv.rows(); ++i) {
                            const double c = 2.0 * g[0] * w[i] / wsum;
                            for (std::size_t j = 0; j < xv.cols(); ++j) gx(i, j) = c * (xv(i, j) - target(i, j));
                        }
                        tp.accumulate(pred, gx);
                    });
}

/// Weighted mean over rows of -log softmax(z_i)[target_i].
inline Var cross_entropy_logits(Var logits, std::vector<std::size_t> targets, std::vector<double> row_weights) {
    Tape& t = detail::tape_of(logits);
    const Tensor& z = t.value(logits);
    if (targets.size() != z.rows() || row_weights.size() != z.rows()) {
        throw UsageError("cross_entropy_logits: one target and weight per row required");
    }
    double wsum = 0.0;
    for (double w : row_weights) wsum += w;
    if (!(wsum > 0.0)) throw UsageError("cross_entropy_logits: weights sum to zero");
    Tensor p = softmax_rows_value(z);
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        if (row_weights[i] == 0.0) continue;
        if (targets[i] >= z.cols()) throw UsageError("cross_entropy_logits: target out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) s += std::exp(z(i, j) - mx);
        loss += row_weights[i] * (std::log(s) + mx - z(i, targets[i]));
    }
    loss /= wsum;
    return t.record(OpKind::kCrossEntropy, {logits}, Tensor::scalar(loss),
                    [logits, probs = std::move(p), tg = std::move(targets), w = std::move(row_weights),
                     wsum](Tape& tp, const Tensor& g) {
                        Tensor gz(probs.shape());
                        for (std::size_t i = 0; i < probs.rows(); ++i) {
                            const double c = g[0] * w[i] / wsum;
                            if (c == 0.0) continue;
                            for (std::size_t j = 0; j < probs.cols(); ++j) {
                                gz(i, j) = c * (probs(i, j) - (j == tg[i] ? 1.0 : 0.0));
                            }
                        }
                        tp.accumulate(logits, gz);
                    });
}

/// Entries where mask != 0 are replaced by `fill`; they pass no gradient.
inline Var masked_fill(Var a, std::vector<std::uint8_t> mask, double fill) {
    Tape& t = detail::tape_of(a);
    Tensor y = t.value(a);
    if (mask.size() != y.size()) throw UsageError("masked_fill: mask size mismatch");
    for (std::size_t i = 0; i < y.size(); ++i)
        if (mask[i]) y[i] = fill;
    return t.record(OpKind::kMaskedFill, {a}, std::move(y), [a, m = std::move(mask)](Tape& tp, const Tensor& g) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (m[i]) gx[i] = 0.0;
        tp.accumulate(a, gx);
    });
}

/// Strict upper-triangle mask (j > i) for an n x n score matrix.
inline std::vector<std::uint8_t> causal_mask(std::size_t n) {
    std::vector<std::uint8_t> m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = 1;
    return m;
}

inline Var sum(Var a) {
    Tape& t = detail::tape_of(a);
    const double s = kernels::sum(t.value(a));
    return t.record(OpKind::kSum, {a}, Tensor::scalar(s), [a](Tape& tp, const Tensor& g) {
        tp.accumulate(a, Tensor(tp.value(a).shape(), g[0]));
    });
}

/// Elementwise custom-gradient op. Forward is `spec.forward` (or `spec.relaxed`
/// when the tape runs in relaxed mode); backward always uses `spec.backward`.
inline Var custom_grad(Var u, const CustomGradSpec& spec) {
    Tape& t = detail::tape_of(u);
    const bool relaxed = t.threshold_mode() == Tape::ThresholdMode::kRelaxed;
    if (relaxed && !spec.relaxed) throw UsageError("custom_grad: relaxed forward not provided");
    Tensor y = relaxed ? kernels::map(t.value(u), spec.relaxed) : kernels::map(t.value(u), spec.forward);
    return t.record(OpKind::kCustomGrad, {u}, std::move(y),
                    [u, d = spec.backward, dt = spec.backward_tensor](Tape& tp, const Tensor& g) {
                        const Tensor& x = tp.value(u);
                        Tensor gx(x.shape());
                        if (dt) {
                            dt(x, g, gx);
                        } else {
                            for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * d(x[i]);
                        }
                        tp.accumulate(u, gx);
                    });
}

}  // namespace snndt
