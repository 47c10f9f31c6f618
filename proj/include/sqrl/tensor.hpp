#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "sqrl/common.hpp"

namespace sqrl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

class Tape;

// Dense row-major f64 array. A Tensor is a cheap handle: the buffer is shared,
// and `node` ties an op output back to the tape that produced it. Leaf
// parameters keep node == -1; the tape tracks them by buffer identity.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;

    static Tensor zeros(Shape s, bool rg = false) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<double>>(numel(t.shape), 0.0);
        t.requires_grad = rg;
        return t;
    }

    static Tensor from(Shape s, std::vector<double> vals, bool rg = false) {
        if (numel(s) != vals.size())
            throw ShapeError("Tensor::from: " + shape_str(s) + " vs " +
                             std::to_string(vals.size()) + " values");
        Tensor t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<double>>(std::move(vals));
        t.requires_grad = rg;
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    std::size_t size() const { return data ? data->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? size() : shape[1]; }

    double& operator[](std::size_t i) { return (*data)[i]; }
    double operator[](std::size_t i) const { return (*data)[i]; }
    double& at(std::size_t r, std::size_t c) { return (*data)[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return (*data)[r * cols() + c]; }

    bool is_scalar() const { return size() == 1; }
    double value() const {
        if (!is_scalar()) throw ShapeError("Tensor::value: not a scalar, shape " + shape_str(shape));
        return (*data)[0];
    }

    // Deep copy detached from any tape.
    Tensor detached_clone() const {
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<double>>(*data);
        t.requires_grad = requires_grad;
        return t;
    }
};

namespace detail {

// C = A * B, (m,k)x(k,n); ikj order
inline void mm(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T, A (m,n), B (k,n) -> C (m,k)
inline void mm_nt_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[kk] += s;
        }
    }
}

// C += A^T * B, A (m,k), B (m,n) -> C (k,n)
inline void mm_tn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            double* crow = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Reverse-mode tape, define-by-run. Nodes are appended in execution order, so
// index order is already topological; backward walks them once in reverse.
class Tape {
public:
    struct Node {
        Shape shape;
        std::shared_ptr<std::vector<double>> value;
        std::vector<double> grad;  // sized lazily during backward
        std::function<void(Tape&, int)> back;  // null for leaves
    };

    // Find-or-create the leaf node for a requires_grad tensor. Keyed by buffer
    // identity so repeated uses of one parameter accumulate into one grad.
    int leaf_of(const Tensor& t) {
        auto it = leaf_ids_.find(t.data.get());
        if (it != leaf_ids_.end()) return it->second;
        Node n;
        n.shape = t.shape;
        n.value = t.data;
        int id = static_cast<int>(nodes_.size());
        nodes_.push_back(std::move(n));
        leaf_ids_.emplace(t.data.get(), id);
        return id;
    }

    // Node id of t along a differentiable path, or -1 for constants.
    int track(const Tensor& t) {
        if (t.tape == this && t.node >= 0) return t.node;
        if (t.requires_grad) return leaf_of(t);
        return -1;
    }

    bool tracks(const Tensor& t) const {
        if (t.tape == this && t.node >= 0) return true;
        return t.requires_grad && leaf_ids_.count(t.data.get()) > 0;
    }

    int record(Shape shape, std::shared_ptr<std::vector<double>> value,
               std::function<void(Tape&, int)> back) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size() - 1);
    }

    std::vector<double>& grad_buf(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
        return n.grad;
    }

    void backward(const Tensor& loss) {
        if (loss.tape != this || loss.node < 0)
            throw ShapeError("Tape::backward: loss is not an output of this tape");
        if (!loss.is_scalar())
            throw ShapeError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape));
        grad_buf(loss.node)[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && !n.grad.empty()) n.back(*this, i);
        }
    }

    // Accumulated gradient of t; zeros if t never reached the loss.
    std::vector<double> grad_of(const Tensor& t) const {
        int id = -1;
        if (t.tape == this && t.node >= 0) {
            id = t.node;
        } else {
            auto it = leaf_ids_.find(t.data.get());
            if (it != leaf_ids_.end()) id = it->second;
        }
        if (id < 0 || nodes_[static_cast<std::size_t>(id)].grad.empty())
            return std::vector<double>(t.size(), 0.0);
        return nodes_[static_cast<std::size_t>(id)].grad;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
};

// ---------------------------------------------------------------------------
// ops. Every op computes its value eagerly; with a non-null tape and at least
// one differentiable input it also records a backward closure.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor make_out(Tape* tp, Shape shape, std::shared_ptr<std::vector<double>> buf,
                       bool any_grad, std::function<void(Tape&, int)> back) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::move(buf);
    if (tp && any_grad) {
        out.tape = tp;
        out.node = tp->record(out.shape, out.data, std::move(back));
    }
    return out;
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

inline Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    auto buf = std::make_shared<std::vector<double>>(m * n);
    detail::mm(a.data->data(), b.data->data(), buf->data(), m, k, n);

    bool ag = tp && (tp->track(a) >= 0 || tp->track(b) >= 0);
    int pa = ag ? tp->track(a) : -1;
    int pb = ag ? tp->track(b) : -1;
    auto ad = a.data, bd = b.data;
    return detail::make_out(tp, {m, n}, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        if (pa >= 0) detail::mm_nt_acc(dy.data(), bd->data(), t.grad_buf(pa).data(), m, n, k);
        if (pb >= 0) detail::mm_tn_acc(ad->data(), dy.data(), t.grad_buf(pb).data(), m, k, n);
    });
}

inline Tensor transpose(Tape* tp, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(a.shape));
    std::size_t m = a.shape[0], n = a.shape[1];
    auto buf = std::make_shared<std::vector<double>>(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*buf)[j * m + i] = (*a.data)[i * n + j];
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, {n, m}, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dy[j * m + i];
    });
}

// add supports equal shapes, and (rows,cols) + (cols) row-broadcast.
inline Tensor add(Tape* tp, const Tensor& a, const Tensor& b) {
    bool rowvec = a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1];
    if (!rowvec && a.shape != b.shape)
        throw ShapeError("add: " + shape_str(a.shape) + " + " + shape_str(b.shape));
    auto buf = std::make_shared<std::vector<double>>(a.size());
    if (rowvec) {
        std::size_t r = a.shape[0], c = a.shape[1];
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*buf)[i * c + j] = (*a.data)[i * c + j] + (*b.data)[j];
    } else {
        for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = (*a.data)[i] + (*b.data)[i];
    }
    bool ag = tp && (tp->track(a) >= 0 || tp->track(b) >= 0);
    int pa = ag ? tp->track(a) : -1;
    int pb = ag ? tp->track(b) : -1;
    std::size_t r = a.rows(), c = a.rank() == 2 ? a.shape[1] : a.size();
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        if (pa >= 0) detail::add_into(t.grad_buf(pa), dy);
        if (pb >= 0) {
            auto& db = t.grad_buf(pb);
            if (rowvec) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
            } else {
                detail::add_into(db, dy);
            }
        }
    });
}

inline Tensor sub(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError("sub: " + shape_str(a.shape) + " - " + shape_str(b.shape));
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = (*a.data)[i] - (*b.data)[i];
    bool ag = tp && (tp->track(a) >= 0 || tp->track(b) >= 0);
    int pa = ag ? tp->track(a) : -1;
    int pb = ag ? tp->track(b) : -1;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        if (pa >= 0) detail::add_into(t.grad_buf(pa), dy);
        if (pb >= 0) {
            auto& db = t.grad_buf(pb);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
        }
    });
}

inline Tensor neg(Tape* tp, const Tensor& a) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = -(*a.data)[i];
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] -= dy[i];
    });
}

inline Tensor mul(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError("mul: " + shape_str(a.shape) + " * " + shape_str(b.shape));
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = (*a.data)[i] * (*b.data)[i];
    bool ag = tp && (tp->track(a) >= 0 || tp->track(b) >= 0);
    int pa = ag ? tp->track(a) : -1;
    int pb = ag ? tp->track(b) : -1;
    auto ad = a.data, bd = b.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        if (pa >= 0) {
            auto& da = t.grad_buf(pa);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * (*bd)[i];
        }
        if (pb >= 0) {
            auto& db = t.grad_buf(pb);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * (*ad)[i];
        }
    });
}

inline Tensor scalar_mul(Tape* tp, const Tensor& a, double c) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = (*a.data)[i] * c;
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * c;
    });
}

inline Tensor scalar_add(Tape* tp, const Tensor& a, double c) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = (*a.data)[i] + c;
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        detail::add_into(t.grad_buf(pa), t.grad_buf(self));
    });
}

inline Tensor relu(Tape* tp, const Tensor& a) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = std::max(0.0, (*a.data)[i]);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto ad = a.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i)
            if ((*ad)[i] > 0.0) da[i] += dy[i];
    });
}

inline Tensor exp_op(Tape* tp, const Tensor& a) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = std::exp((*a.data)[i]);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto out = buf;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * (*out)[i];
    });
}

inline Tensor log_op(Tape* tp, const Tensor& a) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = std::log((*a.data)[i]);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto ad = a.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] / (*ad)[i];
    });
}

inline Tensor clamp(Tape* tp, const Tensor& a, double lo, double hi) {
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = std::clamp((*a.data)[i], lo, hi);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto ad = a.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            double x = (*ad)[i];
            if (x >= lo && x <= hi) da[i] += dy[i];
        }
    });
}

// Elementwise min; ties route the gradient to the first argument.
inline Tensor minimum(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError("minimum: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*buf)[i] = std::min((*a.data)[i], (*b.data)[i]);
    bool ag = tp && (tp->track(a) >= 0 || tp->track(b) >= 0);
    int pa = ag ? tp->track(a) : -1;
    int pb = ag ? tp->track(b) : -1;
    auto ad = a.data, bd = b.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            bool first = (*ad)[i] <= (*bd)[i];
            if (first && pa >= 0) t.grad_buf(pa)[i] += dy[i];
            if (!first && pb >= 0) t.grad_buf(pb)[i] += dy[i];
        }
    });
}

namespace detail {
inline void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x + i * cols;
        double* yr = y + i * cols;
        double m = xr[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yr[j] /= s;
    }
}
}  // namespace detail

inline Tensor softmax_lastdim(Tape* tp, const Tensor& a) {
    if (a.rank() < 1 || a.rank() > 2)
        throw ShapeError("softmax: need rank 1 or 2, got " + shape_str(a.shape));
    std::size_t rows = a.rank() == 2 ? a.shape[0] : 1;
    std::size_t cols = a.rank() == 2 ? a.shape[1] : a.shape[0];
    auto buf = std::make_shared<std::vector<double>>(a.size());
    detail::softmax_rows(a.data->data(), buf->data(), rows, cols);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto yd = buf;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* yr = yd->data() + i * cols;
            const double* gr = dy.data() + i * cols;
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += gr[j] * yr[j];
            for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += yr[j] * (gr[j] - s);
        }
    });
}

inline Tensor log_softmax_lastdim(Tape* tp, const Tensor& a) {
    if (a.rank() < 1 || a.rank() > 2)
        throw ShapeError("log_softmax: need rank 1 or 2, got " + shape_str(a.shape));
    std::size_t rows = a.rank() == 2 ? a.shape[0] : 1;
    std::size_t cols = a.rank() == 2 ? a.shape[1] : a.shape[0];
    auto buf = std::make_shared<std::vector<double>>(a.size());
    auto probs = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = a.data->data() + i * cols;
        double m = xr[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += std::exp(xr[j] - m);
        double lse = m + std::log(s);
        for (std::size_t j = 0; j < cols; ++j) {
            (*buf)[i * cols + j] = xr[j] - lse;
            (*probs)[i * cols + j] = std::exp(xr[j] - lse);
        }
    }
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* gr = dy.data() + i * cols;
            const double* pr = probs->data() + i * cols;
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += gr[j];
            for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += gr[j] - pr[j] * s;
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

// LayerNorm over the last dim with learnable gain/bias; population variance.
inline Tensor layer_norm(Tape* tp, const Tensor& x, const Tensor& gain, const Tensor& bias) {
    std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
    std::size_t cols = x.rank() == 2 ? x.shape[1] : x.size();
    if (gain.size() != cols || bias.size() != cols)
        throw ShapeError("layer_norm: x " + shape_str(x.shape) + " gain " +
                         shape_str(gain.shape) + " bias " + shape_str(bias.shape));
    auto buf = std::make_shared<std::vector<double>>(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data->data() + i * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        (*inv_sd)[i] = inv;
        for (std::size_t j = 0; j < cols; ++j) {
            double xh = (xr[j] - mu) * inv;
            (*xhat)[i * cols + j] = xh;
            (*buf)[i * cols + j] = xh * (*gain.data)[j] + (*bias.data)[j];
        }
    }
    bool ag = tp && (tp->track(x) >= 0 || tp->track(gain) >= 0 || tp->track(bias) >= 0);
    int px = ag ? tp->track(x) : -1;
    int pg = ag ? tp->track(gain) : -1;
    int pb = ag ? tp->track(bias) : -1;
    auto gd = gain.data;
    return detail::make_out(tp, x.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* gr = dy.data() + i * cols;
            const double* xh = xhat->data() + i * cols;
            if (px >= 0) {
                auto& dx = t.grad_buf(px);
                double mean_gy = 0.0, mean_gyxh = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    double gy = gr[j] * (*gd)[j];
                    mean_gy += gy;
                    mean_gyxh += gy * xh[j];
                }
                mean_gy /= static_cast<double>(cols);
                mean_gyxh /= static_cast<double>(cols);
                double inv = (*inv_sd)[i];
                for (std::size_t j = 0; j < cols; ++j) {
                    double gy = gr[j] * (*gd)[j];
                    dx[i * cols + j] += (gy - mean_gy - xh[j] * mean_gyxh) * inv;
                }
            }
            if (pg >= 0) {
                auto& dg = t.grad_buf(pg);
                for (std::size_t j = 0; j < cols; ++j) dg[j] += gr[j] * xh[j];
            }
            if (pb >= 0) {
                auto& db = t.grad_buf(pb);
                for (std::size_t j = 0; j < cols; ++j) db[j] += gr[j];
            }
        }
    });
}

inline Tensor embedding_gather(Tape* tp, const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw ShapeError("embedding_gather: table must be rank 2, got " + shape_str(table.shape));
    std::size_t v = table.shape[0], d = table.shape[1];
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw ShapeError("embedding_gather: id " + std::to_string(id) +
                             " out of range for table " + shape_str(table.shape));
    std::size_t rows = ids.size();
    auto buf = std::make_shared<std::vector<double>>(rows * d);
    for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(buf->data() + i * d, table.data->data() + static_cast<std::size_t>(ids[i]) * d,
                    d * sizeof(double));
    bool ag = tp && tp->track(table) >= 0;
    int pt = ag ? tp->track(table) : -1;
    auto idc = ids;
    return detail::make_out(tp, {rows, d}, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& dt = t.grad_buf(pt);
        for (std::size_t i = 0; i < idc.size(); ++i) {
            double* row = dt.data() + static_cast<std::size_t>(idc[i]) * d;
            const double* g = dy.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
        }
    });
}

inline Tensor concat_lastdim(Tape* tp, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    std::size_t rows = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.shape[0] != rows)
            throw ShapeError("concat: row mismatch at " + shape_str(p.shape));
        total += p.shape[1];
    }
    auto buf = std::make_shared<std::vector<double>>(rows * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::size_t w = p.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
            std::memcpy(buf->data() + i * total + off, p.data->data() + i * w, w * sizeof(double));
        off += w;
    }
    bool ag = false;
    std::vector<int> pids(parts.size(), -1);
    std::vector<std::size_t> widths(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) widths[i] = parts[i].shape[1];
    if (tp) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
            pids[i] = tp->track(parts[i]);
            if (pids[i] >= 0) ag = true;
        }
    }
    return detail::make_out(tp, {rows, total}, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        std::size_t o = 0;
        for (std::size_t p = 0; p < pids.size(); ++p) {
            std::size_t w = widths[p];
            if (pids[p] >= 0) {
                auto& dp = t.grad_buf(pids[p]);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < w; ++j) dp[i * w + j] += dy[i * total + o + j];
            }
            o += w;
        }
    });
}

// out[i] = mask[i] != 0 ? value : a[i]; gradient is blocked where filled.
inline Tensor masked_fill(Tape* tp, const Tensor& a, const Tensor& mask, double value) {
    if (a.shape != mask.shape)
        throw ShapeError("masked_fill: " + shape_str(a.shape) + " vs mask " + shape_str(mask.shape));
    auto buf = std::make_shared<std::vector<double>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        (*buf)[i] = (*mask.data)[i] != 0.0 ? value : (*a.data)[i];
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto md = mask.data;
    return detail::make_out(tp, a.shape, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < dy.size(); ++i)
            if ((*md)[i] == 0.0) da[i] += dy[i];
    });
}

// Mean token-level NLL over rows where counted[i] != 0.
inline Tensor cross_entropy(Tape* tp, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<char>& counted) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape));
    std::size_t rows = logits.shape[0], v = logits.shape[1];
    if (targets.size() != rows || counted.size() != rows)
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape) + " vs " +
                         std::to_string(targets.size()) + " targets");
    std::size_t cnt = 0;
    for (char c : counted) cnt += c != 0;
    if (cnt == 0) throw ShapeError("cross_entropy: no counted positions");
    auto probs = std::make_shared<std::vector<double>>(rows * v);
    detail::softmax_rows(logits.data->data(), probs->data(), rows, v);
    double nll = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (!counted[i]) continue;
        int tgt = targets[i];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= v)
            throw ShapeError("cross_entropy: target " + std::to_string(tgt) + " out of range");
        nll -= std::log((*probs)[i * v + static_cast<std::size_t>(tgt)]);
    }
    auto buf = std::make_shared<std::vector<double>>(1, nll / static_cast<double>(cnt));
    bool ag = tp && tp->track(logits) >= 0;
    int pl = ag ? tp->track(logits) : -1;
    auto tgts = targets;
    auto cntd = counted;
    return detail::make_out(tp, {1}, buf, ag, [=](Tape& t, int self) {
        double g = t.grad_buf(self)[0] / static_cast<double>(cnt);
        auto& dl = t.grad_buf(pl);
        for (std::size_t i = 0; i < rows; ++i) {
            if (!cntd[i]) continue;
            const double* pr = probs->data() + i * v;
            double* dr = dl.data() + i * v;
            for (std::size_t j = 0; j < v; ++j) dr[j] += g * pr[j];
            dr[static_cast<std::size_t>(tgts[i])] -= g;
        }
    });
}

inline Tensor sum(Tape* tp, const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (*a.data)[i];
    auto buf = std::make_shared<std::vector<double>>(1, s);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, {1}, buf, ag, [=](Tape& t, int self) {
        double g = t.grad_buf(self)[0];
        auto& da = t.grad_buf(pa);
        for (double& d : da) d += g;
    });
}

inline Tensor mean(Tape* tp, const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (*a.data)[i];
    double n = static_cast<double>(a.size());
    auto buf = std::make_shared<std::vector<double>>(1, s / n);
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    return detail::make_out(tp, {1}, buf, ag, [=](Tape& t, int self) {
        double g = t.grad_buf(self)[0] / n;
        auto& da = t.grad_buf(pa);
        for (double& d : da) d += g;
    });
}

// out[i] = a[i, ids[i]] for a rank-2 a; the per-row gather used for sequence
// log-prob extraction.
inline Tensor pick(Tape* tp, const Tensor& a, const std::vector<int>& ids) {
    if (a.rank() != 2)
        throw ShapeError("pick: need rank 2, got " + shape_str(a.shape));
    std::size_t rows = a.shape[0], cols = a.shape[1];
    if (ids.size() != rows)
        throw ShapeError("pick: " + std::to_string(ids.size()) + " ids for " + shape_str(a.shape));
    auto buf = std::make_shared<std::vector<double>>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cols)
            throw ShapeError("pick: id " + std::to_string(id) + " out of range for " +
                             shape_str(a.shape));
        (*buf)[i] = (*a.data)[i * cols + static_cast<std::size_t>(id)];
    }
    bool ag = tp && tp->track(a) >= 0;
    int pa = ag ? tp->track(a) : -1;
    auto idc = ids;
    return detail::make_out(tp, {rows}, buf, ag, [=](Tape& t, int self) {
        const auto& dy = t.grad_buf(self);
        auto& da = t.grad_buf(pa);
        for (std::size_t i = 0; i < rows; ++i)
            da[i * cols + static_cast<std::size_t>(idc[i])] += dy[i];
    });
}

}  // namespace sqrl
