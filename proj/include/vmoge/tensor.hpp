#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vmoge/common.hpp"

namespace vmoge {

// Shapes are rank 0 (scalar), 1 (vector) or 2 (matrix).
struct Shape {
    int rank = 0;
    int d0 = 1;
    int d1 = 1;

    static Shape scalar() { return {0, 1, 1}; }
    static Shape vec(int n) { return {1, n, 1}; }
    static Shape mat(int r, int c) { return {2, r, c}; }

    size_t numel() const { return static_cast<size_t>(d0) * static_cast<size_t>(d1); }
    bool operator==(const Shape& o) const {
        return rank == o.rank && d0 == o.d0 && d1 == o.d1;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        if (rank == 0) os << "()";
        else if (rank == 1) os << "(" << d0 << ")";
        else os << "(" << d0 << "x" << d1 << ")";
        return os.str();
    }
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backprop;  // empty for leaves
    const char* op = "leaf";
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    void zero_grad_buffer() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using NodePtr = std::shared_ptr<Node>;

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shapes " + a.str() + " and " +
                                b.str() + " do not conform");
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const std::string& why) {
    throw std::invalid_argument(std::string(op) + ": shape " + a.str() + " " + why);
}

}  // namespace detail

// Handle to a tape node. Copy is cheap; the tape is the DAG of nodes
// reachable from a root through the inputs lists.
class Var {
public:
    Var() = default;
    explicit Var(detail::NodePtr n) : n_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    size_t numel() const { return n_->shape.numel(); }
    bool requires_grad() const { return n_->requires_grad; }
    const char* op() const { return n_->op; }

    const std::vector<double>& values() const { return n_->value; }
    std::vector<double>& mutable_values() { return n_->value; }
    const std::vector<double>& grads() const {
        n_->ensure_grad();
        return n_->grad;
    }

    double item() const {
        if (n_->shape.rank != 0) detail::shape_fail("item", n_->shape, "is not scalar");
        return n_->value[0];
    }

    detail::NodePtr node() const { return n_; }

private:
    detail::NodePtr n_;
};

inline Var make_leaf(const Shape& s, std::vector<double> data, bool requires_grad) {
    if (data.size() != s.numel())
        throw std::invalid_argument("leaf: data size " + std::to_string(data.size()) +
                                    " does not match shape " + s.str());
    auto n = std::make_shared<detail::Node>();
    n->shape = s;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Var(n);
}

inline Var constant(const Shape& s, std::vector<double> data) {
    return make_leaf(s, std::move(data), false);
}
inline Var constant_scalar(double v) { return constant(Shape::scalar(), {v}); }
inline Var constant_mat(const Mat& m) {
    return constant(Shape::mat(m.rows(), m.cols()),
                    std::vector<double>(m.data(), m.data() + m.size()));
}
inline Var parameter(const Shape& s, std::vector<double> data) {
    return make_leaf(s, std::move(data), true);
}

namespace detail {

inline NodePtr new_node(const char* op, const Shape& s,
                        std::vector<NodePtr> inputs) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = s;
    n->value.resize(s.numel());
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    return n;
}

}  // namespace detail

// ---- elementwise and broadcast arithmetic ----------------------------------

// add: identical shapes, or matrix + row vector broadcast over rows.
inline Var add(const Var& a, const Var& b) {
    using namespace detail;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool broadcast = (sa.rank == 2 && sb.rank == 1 && sb.d0 == sa.d1);
    if (!(sa == sb || broadcast)) shape_fail("add", sa, sb);
    auto n = new_node("add", sa, {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    if (broadcast) {
        for (int r = 0; r < sa.d0; ++r)
            for (int c = 0; c < sa.d1; ++c)
                n->value[static_cast<size_t>(r) * sa.d1 + c] =
                    av[static_cast<size_t>(r) * sa.d1 + c] + bv[static_cast<size_t>(c)];
    } else {
        for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
    }
    Node* out = n.get();
    Node* na = a.node().get();
    Node* nb = b.node().get();
    n->backprop = [out, na, nb, broadcast] {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            if (broadcast) {
                int rows = out->shape.d0, cols = out->shape.d1;
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        nb->grad[static_cast<size_t>(c)] +=
                            out->grad[static_cast<size_t>(r) * cols + c];
            } else {
                for (size_t i = 0; i < out->grad.size(); ++i) nb->grad[i] += out->grad[i];
            }
        }
    };
    return Var(n);
}

inline Var neg(const Var& a) {
    using namespace detail;
    auto n = new_node("neg", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = -av[i];
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) na->grad[i] -= out->grad[i];
    };
    return Var(n);
}

inline Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

// mul: elementwise, identical shapes.
inline Var mul(const Var& a, const Var& b) {
    using namespace detail;
    if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
    auto n = new_node("mul", a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
    Node* out = n.get();
    Node* na = a.node().get();
    Node* nb = b.node().get();
    n->backprop = [out, na, nb] {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i)
                na->grad[i] += out->grad[i] * nb->value[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i)
                nb->grad[i] += out->grad[i] * na->value[i];
        }
    };
    return Var(n);
}

inline Var scale(const Var& a, double c) {
    using namespace detail;
    auto n = new_node("scale", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * c;
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, c] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i] * c;
    };
    return Var(n);
}

inline Var add_const(const Var& a, double c) {
    using namespace detail;
    auto n = new_node("add_const", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + c;
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i];
    };
    return Var(n);
}

// ---- linear algebra --------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    using namespace detail;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank != 2 || sb.rank != 2 || sa.d1 != sb.d0) shape_fail("matmul", sa, sb);
    int m = sa.d0, k = sa.d1, p = sb.d1;
    auto n = new_node("matmul", Shape::mat(m, p), {a.node(), b.node()});
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = n->value.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += av[i * k + t] * bv[t * p + j];
            ov[i * p + j] = acc;
        }
    Node* out = n.get();
    Node* na = a.node().get();
    Node* nb = b.node().get();
    n->backprop = [out, na, nb, m, k, p] {
        const double* g = out->grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            const double* bv = nb->value.data();
            for (int i = 0; i < m; ++i)
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < p; ++j) acc += g[i * p + j] * bv[t * p + j];
                    na->grad[static_cast<size_t>(i) * k + t] += acc;
                }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            const double* av = na->value.data();
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < p; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += av[i * k + t] * g[i * p + j];
                    nb->grad[static_cast<size_t>(t) * p + j] += acc;
                }
        }
    };
    return Var(n);
}

inline Var transpose(const Var& a) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2) shape_fail("transpose", s, "is not rank 2");
    int r = s.d0, c = s.d1;
    auto n = new_node("transpose", Shape::mat(c, r), {a.node()});
    const auto& av = a.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            n->value[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, r, c] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                na->grad[static_cast<size_t>(i) * c + j] +=
                    out->grad[static_cast<size_t>(j) * r + i];
    };
    return Var(n);
}

inline Var trace(const Var& a) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2 || s.d0 != s.d1) shape_fail("trace", s, "is not square");
    int m = s.d0;
    auto n = new_node("trace", Shape::scalar(), {a.node()});
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += a.values()[static_cast<size_t>(i) * m + i];
    n->value[0] = acc;
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, m] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int i = 0; i < m; ++i) na->grad[static_cast<size_t>(i) * m + i] += out->grad[0];
    };
    return Var(n);
}

inline Var reshape(const Var& a, const Shape& s) {
    using namespace detail;
    if (s.numel() != a.numel()) shape_fail("reshape", a.shape(), s);
    auto n = new_node("reshape", s, {a.node()});
    n->value = a.values();
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) na->grad[i] += out->grad[i];
    };
    return Var(n);
}

inline Var as_row(const Var& v) {
    if (v.shape().rank != 1) detail::shape_fail("as_row", v.shape(), "is not rank 1");
    return reshape(v, Shape::mat(1, v.shape().d0));
}
inline Var as_vector(const Var& m) {
    return reshape(m, Shape::vec(static_cast<int>(m.numel())));
}
inline Var as_scalar(const Var& v) {
    if (v.numel() != 1) detail::shape_fail("as_scalar", v.shape(), "has more than one element");
    return reshape(v, Shape::scalar());
}

// ---- convolution and pooling ----------------------------------------------

// 1-D valid convolution of a signal (T) with kernel bank W (D x Phi) and
// bias b (D), stride s. Output is (L x D) with L = floor((T - Phi)/s) + 1.
inline Var conv1d(const Var& x, const Var& w, const Var& b, int stride) {
    using namespace detail;
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    const Shape& sb = b.shape();
    if (sx.rank != 1) shape_fail("conv1d", sx, "is not rank 1");
    if (sw.rank != 2) shape_fail("conv1d", sw, "is not rank 2");
    if (sb.rank != 1 || sb.d0 != sw.d0) shape_fail("conv1d", sw, sb);
    if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
    int T = sx.d0, D = sw.d0, phi = sw.d1;
    if (T < phi) shape_fail("conv1d", sx, "is shorter than the kernel " + sw.str());
    int L = (T - phi) / stride + 1;
    auto n = new_node("conv1d", Shape::mat(L, D), {x.node(), w.node(), b.node()});
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    const double* bv = b.values().data();
    for (int l = 0; l < L; ++l)
        for (int d = 0; d < D; ++d) {
            double acc = bv[d];
            const double* seg = xv + static_cast<size_t>(l) * stride;
            const double* ker = wv + static_cast<size_t>(d) * phi;
            for (int i = 0; i < phi; ++i) acc += ker[i] * seg[i];
            n->value[static_cast<size_t>(l) * D + d] = acc;
        }
    Node* out = n.get();
    Node* nx = x.node().get();
    Node* nw = w.node().get();
    Node* nb = b.node().get();
    n->backprop = [out, nx, nw, nb, L, D, phi, stride] {
        const double* g = out->grad.data();
        if (nx->requires_grad) {
            nx->ensure_grad();
            for (int l = 0; l < L; ++l)
                for (int d = 0; d < D; ++d) {
                    double gv = g[static_cast<size_t>(l) * D + d];
                    const double* ker = nw->value.data() + static_cast<size_t>(d) * phi;
                    double* seg = nx->grad.data() + static_cast<size_t>(l) * stride;
                    for (int i = 0; i < phi; ++i) seg[i] += gv * ker[i];
                }
        }
        if (nw->requires_grad) {
            nw->ensure_grad();
            for (int l = 0; l < L; ++l) {
                const double* seg = nx->value.data() + static_cast<size_t>(l) * stride;
                for (int d = 0; d < D; ++d) {
                    double gv = g[static_cast<size_t>(l) * D + d];
                    double* ker = nw->grad.data() + static_cast<size_t>(d) * phi;
                    for (int i = 0; i < phi; ++i) ker[i] += gv * seg[i];
                }
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (int l = 0; l < L; ++l)
                for (int d = 0; d < D; ++d)
                    nb->grad[static_cast<size_t>(d)] += g[static_cast<size_t>(l) * D + d];
        }
    };
    return Var(n);
}

// Non-overlapping max over pairs of consecutive rows; a trailing odd row is
// dropped. Ties resolve to the earlier row.
inline Var max_pool_rows2(const Var& a) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2) shape_fail("max_pool_rows2", s, "is not rank 2");
    int L = s.d0 / 2, D = s.d1;
    if (L < 1) shape_fail("max_pool_rows2", s, "has fewer than two rows");
    auto n = new_node("max_pool_rows2", Shape::mat(L, D), {a.node()});
    const auto& av = a.values();
    for (int l = 0; l < L; ++l)
        for (int d = 0; d < D; ++d) {
            double top = av[static_cast<size_t>(2 * l) * D + d];
            double bot = av[static_cast<size_t>(2 * l + 1) * D + d];
            n->value[static_cast<size_t>(l) * D + d] = bot > top ? bot : top;
        }
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, L, D] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d) {
                double top = na->value[static_cast<size_t>(2 * l) * D + d];
                double bot = na->value[static_cast<size_t>(2 * l + 1) * D + d];
                int row = bot > top ? 2 * l + 1 : 2 * l;
                na->grad[static_cast<size_t>(row) * D + d] +=
                    out->grad[static_cast<size_t>(l) * D + d];
            }
    };
    return Var(n);
}

// ---- nonlinearities --------------------------------------------------------

inline Var leaky_relu(const Var& a, double slope = 0.01) {
    using namespace detail;
    auto n = new_node("leaky_relu", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i)
        n->value[i] = av[i] > 0.0 ? av[i] : slope * av[i];
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, slope] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i)
            na->grad[i] += out->grad[i] * (na->value[i] > 0.0 ? 1.0 : slope);
    };
    return Var(n);
}

inline Var sigmoid(const Var& a) {
    using namespace detail;
    auto n = new_node("sigmoid", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) {
        double x = av[i];
        n->value[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                               : std::exp(x) / (1.0 + std::exp(x));
    }
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) {
            double s = out->value[i];
            na->grad[i] += out->grad[i] * s * (1.0 - s);
        }
    };
    return Var(n);
}

inline Var log_sigmoid(const Var& a) {
    using namespace detail;
    auto n = new_node("log_sigmoid", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) {
        double x = av[i];
        n->value[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    }
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) {
            double x = na->value[i];
            double sneg = x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x))
                                   : 1.0 / (1.0 + std::exp(x));
            na->grad[i] += out->grad[i] * sneg;
        }
    };
    return Var(n);
}

inline Var exp(const Var& a) {
    using namespace detail;
    auto n = new_node("exp", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = std::exp(av[i]);
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i)
            na->grad[i] += out->grad[i] * out->value[i];
    };
    return Var(n);
}

inline Var log(const Var& a) {
    using namespace detail;
    auto n = new_node("log", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = std::log(av[i]);
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i)
            na->grad[i] += out->grad[i] / na->value[i];
    };
    return Var(n);
}

// Pass-through subgradient inside [lo, hi] (inclusive), zero outside,
// judged on the input value.
inline Var clamp(const Var& a, double lo, double hi) {
    using namespace detail;
    auto n = new_node("clamp", a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i)
        n->value[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, lo, hi] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) {
            double x = na->value[i];
            if (x >= lo && x <= hi) na->grad[i] += out->grad[i];
        }
    };
    return Var(n);
}

// Softmax over the last axis: per row for matrices, over all entries for
// vectors. Max-subtracted for stability.
inline Var softmax_rows(const Var& a) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank == 0) shape_fail("softmax_rows", s, "is scalar");
    int rows = s.rank == 2 ? s.d0 : 1;
    int cols = s.rank == 2 ? s.d1 : s.d0;
    auto n = new_node("softmax_rows", s, {a.node()});
    const auto& av = a.values();
    for (int r = 0; r < rows; ++r) {
        const double* xi = av.data() + static_cast<size_t>(r) * cols;
        double* yi = n->value.data() + static_cast<size_t>(r) * cols;
        double mx = xi[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) {
            yi[c] = std::exp(xi[c] - mx);
            denom += yi[c];
        }
        for (int c = 0; c < cols; ++c) yi[c] /= denom;
    }
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, rows, cols] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const double* y = out->value.data() + static_cast<size_t>(r) * cols;
            const double* g = out->grad.data() + static_cast<size_t>(r) * cols;
            double dotgy = 0.0;
            for (int c = 0; c < cols; ++c) dotgy += g[c] * y[c];
            double* gi = na->grad.data() + static_cast<size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) gi[c] += y[c] * (g[c] - dotgy);
        }
    };
    return Var(n);
}

// ---- reductions ------------------------------------------------------------

inline Var sum(const Var& a) {
    using namespace detail;
    auto n = new_node("sum", Shape::scalar(), {a.node()});
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    n->value[0] = acc;
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += out->grad[0];
    };
    return Var(n);
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Sum of a matrix along one axis: axis 0 collapses rows (result has d1
// entries), axis 1 collapses columns (result has d0 entries).
inline Var sum_axis(const Var& a, int axis) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2) shape_fail("sum_axis", s, "is not rank 2");
    if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
    int rows = s.d0, cols = s.d1;
    int outn = axis == 0 ? cols : rows;
    auto n = new_node("sum_axis", Shape::vec(outn), {a.node()});
    const auto& av = a.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            n->value[static_cast<size_t>(axis == 0 ? c : r)] +=
                av[static_cast<size_t>(r) * cols + c];
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, rows, cols, axis] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                na->grad[static_cast<size_t>(r) * cols + c] +=
                    out->grad[static_cast<size_t>(axis == 0 ? c : r)];
    };
    return Var(n);
}

// Column-wise maximum over rows; ties route the gradient to the earliest row.
inline Var max_rows(const Var& a) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2) shape_fail("max_rows", s, "is not rank 2");
    int rows = s.d0, cols = s.d1;
    auto n = new_node("max_rows", Shape::vec(cols), {a.node()});
    const auto& av = a.values();
    for (int c = 0; c < cols; ++c) {
        double best = av[static_cast<size_t>(c)];
        for (int r = 1; r < rows; ++r)
            best = std::max(best, av[static_cast<size_t>(r) * cols + c]);
        n->value[static_cast<size_t>(c)] = best;
    }
    Node* out = n.get();
    Node* na = a.node().get();
    n->backprop = [out, na, rows, cols] {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (int c = 0; c < cols; ++c) {
            int arg = 0;
            double best = na->value[static_cast<size_t>(c)];
            for (int r = 1; r < rows; ++r)
                if (na->value[static_cast<size_t>(r) * cols + c] > best) {
                    best = na->value[static_cast<size_t>(r) * cols + c];
                    arg = r;
                }
            na->grad[static_cast<size_t>(arg) * cols + c] += out->grad[static_cast<size_t>(c)];
        }
    };
    return Var(n);
}

inline Var mean_axis(const Var& a, int axis) {
    const Shape& s = a.shape();
    if (s.rank != 2) detail::shape_fail("mean_axis", s, "is not rank 2");
    double denom = axis == 0 ? s.d0 : s.d1;
    return scale(sum_axis(a, axis), 1.0 / denom);
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

// ---- concatenation ---------------------------------------------------------

// Stacks rank-1 vectors of equal length into a matrix, one per row.
inline Var stack_rows(const std::vector<Var>& parts) {
    using namespace detail;
    if (parts.empty()) throw std::invalid_argument("stack_rows: no inputs");
    int d = parts[0].shape().d0;
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape().rank != 1 || p.shape().d0 != d)
            shape_fail("stack_rows", parts[0].shape(), p.shape());
        ins.push_back(p.node());
    }
    int rows = static_cast<int>(parts.size());
    auto n = new_node("stack_rows", Shape::mat(rows, d), std::move(ins));
    for (int r = 0; r < rows; ++r)
        std::memcpy(n->value.data() + static_cast<size_t>(r) * d,
                    parts[static_cast<size_t>(r)].values().data(), sizeof(double) * d);
    Node* out = n.get();
    n->backprop = [out, d] {
        for (size_t r = 0; r < out->inputs.size(); ++r) {
            Node* in = out->inputs[r].get();
            if (!in->requires_grad) continue;
            in->ensure_grad();
            const double* g = out->grad.data() + r * static_cast<size_t>(d);
            for (int c = 0; c < d; ++c) in->grad[static_cast<size_t>(c)] += g[c];
        }
    };
    return Var(n);
}

// Concatenates matrices along rows (axis 0, equal column counts).
inline Var concat_rows(const std::vector<Var>& parts) {
    using namespace detail;
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    int cols = parts[0].shape().d1;
    int rows = 0;
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape().rank != 2 || p.shape().d1 != cols)
            shape_fail("concat_rows", parts[0].shape(), p.shape());
        rows += p.shape().d0;
        ins.push_back(p.node());
    }
    auto n = new_node("concat_rows", Shape::mat(rows, cols), std::move(ins));
    size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(n->value.data() + off, p.values().data(),
                    sizeof(double) * p.numel());
        off += p.numel();
    }
    Node* out = n.get();
    n->backprop = [out] {
        size_t off = 0;
        for (const auto& inp : out->inputs) {
            Node* in = inp.get();
            size_t cnt = in->value.size();
            if (in->requires_grad) {
                in->ensure_grad();
                for (size_t i = 0; i < cnt; ++i) in->grad[i] += out->grad[off + i];
            }
            off += cnt;
        }
    };
    return Var(n);
}

// Concatenates matrices along columns (axis 1, equal row counts).
inline Var concat_cols(const std::vector<Var>& parts) {
    using namespace detail;
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int rows = parts[0].shape().d0;
    int cols = 0;
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape().rank != 2 || p.shape().d0 != rows)
            shape_fail("concat_cols", parts[0].shape(), p.shape());
        cols += p.shape().d1;
        ins.push_back(p.node());
    }
    auto n = new_node("concat_cols", Shape::mat(rows, cols), std::move(ins));
    size_t coloff = 0;
    for (const auto& p : parts) {
        int pc = p.shape().d1;
        for (int r = 0; r < rows; ++r)
            std::memcpy(n->value.data() + static_cast<size_t>(r) * cols + coloff,
                        p.values().data() + static_cast<size_t>(r) * pc,
                        sizeof(double) * pc);
        coloff += static_cast<size_t>(pc);
    }
    Node* out = n.get();
    n->backprop = [out, rows, cols] {
        size_t coloff = 0;
        for (const auto& inp : out->inputs) {
            Node* in = inp.get();
            int pc = in->shape.d1;
            if (in->requires_grad) {
                in->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < pc; ++c)
                        in->grad[static_cast<size_t>(r) * pc + c] +=
                            out->grad[static_cast<size_t>(r) * cols + coloff + c];
            }
            coloff += static_cast<size_t>(pc);
        }
    };
    return Var(n);
}

// ---- normalization ---------------------------------------------------------

// Per-row layer normalization of a matrix with learned gain and bias (d1).
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
    using namespace detail;
    const Shape& s = a.shape();
    if (s.rank != 2) shape_fail("layer_norm", s, "is not rank 2");
    if (gain.shape().rank != 1 || gain.shape().d0 != s.d1)
        shape_fail("layer_norm", s, gain.shape());
    if (bias.shape() != gain.shape()) shape_fail("layer_norm", gain.shape(), bias.shape());
    int rows = s.d0, cols = s.d1;
    auto n = new_node("layer_norm", s, {a.node(), gain.node(), bias.node()});
    const auto& av = a.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<double> inv_sd(static_cast<size_t>(rows));
    std::vector<double> xhat(av.size());
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += x[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= cols;
        double isd = 1.0 / std::sqrt(var + eps);
        inv_sd[static_cast<size_t>(r)] = isd;
        for (int c = 0; c < cols; ++c) {
            double xh = (x[c] - mu) * isd;
            xhat[static_cast<size_t>(r) * cols + c] = xh;
            n->value[static_cast<size_t>(r) * cols + c] = gv[static_cast<size_t>(c)] * xh +
                                                          bv[static_cast<size_t>(c)];
        }
    }
    Node* out = n.get();
    Node* na = a.node().get();
    Node* ng = gain.node().get();
    Node* nb = bias.node().get();
    n->backprop = [out, na, ng, nb, rows, cols, inv_sd = std::move(inv_sd),
                   xhat = std::move(xhat)] {
        const double* g = out->grad.data();
        if (ng->requires_grad) {
            ng->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    ng->grad[static_cast<size_t>(c)] +=
                        g[static_cast<size_t>(r) * cols + c] *
                        xhat[static_cast<size_t>(r) * cols + c];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    nb->grad[static_cast<size_t>(c)] += g[static_cast<size_t>(r) * cols + c];
        }
        if (na->requires_grad) {
            na->ensure_grad();
            const double* gv = ng->value.data();
            for (int r = 0; r < rows; ++r) {
                const double* gr = g + static_cast<size_t>(r) * cols;
                const double* xh = xhat.data() + static_cast<size_t>(r) * cols;
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int c = 0; c < cols; ++c) {
                    double dxh = gr[c] * gv[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[c];
                }
                mean_dxh /= cols;
                mean_dxh_xh /= cols;
                double isd = inv_sd[static_cast<size_t>(r)];
                for (int c = 0; c < cols; ++c) {
                    double dxh = gr[c] * gv[c];
                    na->grad[static_cast<size_t>(r) * cols + c] +=
                        isd * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                }
            }
        }
    };
    return Var(n);
}

// ---- backward pass ---------------------------------------------------------

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    if (!root->requires_grad) return order;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        bool descended = false;
        while (idx < node->inputs.size()) {
            Node* in = node->inputs[idx++].get();
            if (in->requires_grad && !seen.count(in)) {
                seen.insert(in);
                stack.emplace_back(in, 0);
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(node);
        stack.pop_back();
    }
    return order;  // inputs before consumers
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Adjoints of non-leaf nodes are
// rebuilt on every call; leaf adjoints accumulate until explicitly zeroed.
inline void backward(const Var& root) {
    if (root.shape().rank != 0)
        detail::shape_fail("backward", root.shape(), "is not scalar");
    detail::Node* r = root.node().get();
    if (!r->requires_grad) return;
    auto order = detail::topo_order(r);
    for (detail::Node* n : order) {
        if (n->backprop) {  // non-leaf
            n->ensure_grad();
            n->zero_grad_buffer();
        } else {
            n->ensure_grad();
        }
    }
    r->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

// ---- parameters ------------------------------------------------------------

inline std::vector<double> glorot_uniform(Rng& rng, int fan_in, int fan_out, size_t count) {
    double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> out(count);
    for (auto& v : out) v = rng.uniform(-bound, bound);
    return out;
}

// Named parameter collection with a stable iteration order.
class ParameterStore {
public:
    Var add(const std::string& name, const Shape& shape, std::vector<double> data) {
        if (index_.count(name))
            throw std::invalid_argument("parameter '" + name + "' already registered");
        Var v = parameter(shape, std::move(data));
        index_[name] = params_.size();
        params_.push_back({name, v});
        return v;
    }

    Var add_glorot(const std::string& name, int rows, int cols, Rng& rng) {
        return add(name, Shape::mat(rows, cols),
                   glorot_uniform(rng, rows, cols, static_cast<size_t>(rows) * cols));
    }
    Var add_zero_vec(const std::string& name, int n) {
        return add(name, Shape::vec(n), std::vector<double>(static_cast<size_t>(n), 0.0));
    }

    Var get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::invalid_argument("parameter '" + name + "' not registered");
        return params_[it->second].var;
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    size_t count() const { return params_.size(); }
    const std::string& name_at(size_t i) const { return params_[i].name; }
    Var var_at(size_t i) const { return params_[i].var; }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.var.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            auto n = p.var.node();
            n->ensure_grad();
            n->zero_grad_buffer();
        }
    }

private:
    struct Entry {
        std::string name;
        Var var;
    };
    std::vector<Entry> params_;
    std::map<std::string, size_t> index_;
};

// Max relative disagreement between analytic adjoints and central finite
// differences of f over every parameter scalar. f must rebuild its graph
// from the store's current values on each call.
inline double grad_check(const std::function<Var()>& f, ParameterStore& params,
                         double eps = 1e-5) {
    params.zero_grad();
    Var root = f();
    backward(root);
    std::vector<std::vector<double>> analytic(params.count());
    for (size_t p = 0; p < params.count(); ++p) analytic[p] = params.var_at(p).grads();

    double worst = 0.0;
    for (size_t p = 0; p < params.count(); ++p) {
        auto node = params.var_at(p).node();
        for (size_t i = 0; i < node->value.size(); ++i) {
            double keep = node->value[i];
            node->value[i] = keep + eps;
            double up = f().item();
            node->value[i] = keep - eps;
            double down = f().item();
            node->value[i] = keep;
            double central = (up - down) / (2.0 * eps);
            double a = analytic[p][i];
            if (!std::isfinite(a) || !std::isfinite(central))
                throw NumericalError("grad_check: non-finite value at parameter '" +
                                     params.name_at(p) + "' entry " + std::to_string(i));
            double rel = std::fabs(a - central) /
                         (std::fabs(a) + std::fabs(central) + 1e-12);
            if (rel > worst) worst = rel;
        }
    }
    return worst;
}

}  // namespace vmoge
