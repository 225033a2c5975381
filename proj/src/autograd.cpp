// Licensed under the Apache License, Version 2.0

#include "asvc/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace asvc::ag {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(int r, int c) {
    auto n = std::make_shared<Node>();
    n->rows = r;
    n->cols = c;
    n->val.assign(static_cast<size_t>(r) * c, 0.0);
    return n;
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
    auto n = make_node(rows, cols);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::constant(const Mat& m) {
    auto n = make_node(m.rows, m.cols);
    n->val = m.v;
    return Tensor(n);
}

Tensor Tensor::constant(int rows, int cols, const std::vector<double>& v) {
    auto n = make_node(rows, cols);
    assert(v.size() == n->val.size());
    n->val = v;
    return Tensor(n);
}

Tensor Tensor::scalar(double x) {
    auto n = make_node(1, 1);
    n->val[0] = x;
    return Tensor(n);
}

Tensor Tensor::param(int rows, int cols, const std::vector<double>& v) {
    auto n = make_node(rows, cols);
    assert(v.size() == n->val.size());
    n->val = v;
    n->requires_grad = true;
    return Tensor(n);
}

Mat Tensor::to_mat() const {
    Mat m(rows(), cols());
    m.v = values();
    return m;
}

// ---------------------------------------------------------------------------
// GEMM kernels
// ---------------------------------------------------------------------------

void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
    // c(n x m) += a(n x k) * b(m x k)^T
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
    // c(k x m) += a(n x k)^T * b(n x m)
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// Shared scaffolding for binary same-shape elementwise ops.
template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    auto out = make_node(a.rows(), a.cols());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = fwd(av[i], bv[i]);
    if (want_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        Node* pa = a.node().get();
        Node* pb = b.node().get();
        out->backfn = [pa, pb, bwd](Node& self) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i)
                bwd(self.grad[i], i, pa, pb);
        };
    }
    return Tensor(out);
}

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dxdy) {
    auto out = make_node(x.rows(), x.cols());
    const auto& xv = x.values();
    for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = fwd(xv[i]);
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        Node* self_raw = out.get();
        out->backfn = [px, self_raw, dxdy](Node& self) {
            px->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i)
                px->grad[i] += self.grad[i] * dxdy(px->val[i], self_raw->val[i]);
        };
    }
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add",
        [](double x, double y) { return x + y; },
        [](double g, size_t i, Node* pa, Node* pb) {
            if (pa->requires_grad) pa->grad[i] += g;
            if (pb->requires_grad) pb->grad[i] += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub",
        [](double x, double y) { return x - y; },
        [](double g, size_t i, Node* pa, Node* pb) {
            if (pa->requires_grad) pa->grad[i] += g;
            if (pb->requires_grad) pb->grad[i] -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul",
        [](double x, double y) { return x * y; },
        [](double g, size_t i, Node* pa, Node* pb) {
            if (pa->requires_grad) pa->grad[i] += g * pb->val[i];
            if (pb->requires_grad) pb->grad[i] += g * pa->val[i];
        });
}

Tensor scale(const Tensor& x, double c) {
    return unary_op(x, [c](double v) { return c * v; },
                    [c](double, double) { return c; });
}

Tensor add_const(const Tensor& x, double c) {
    return unary_op(x, [c](double v) { return v + c; },
                    [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
    return unary_op(x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(x, [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(x, [](double v) { return std::sqrt(v); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& x) {
    return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor reciprocal(const Tensor& x) {
    return unary_op(x, [](double v) { return 1.0 / v; },
                    [](double, double y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Broadcast
// ---------------------------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (b.rows() != 1 || b.cols() != x.cols())
        throw std::invalid_argument("add_rowvec: bias must be 1 x cols(x)");
    auto out = make_node(x.rows(), x.cols());
    const int d = x.cols();
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < d; ++c)
            out->val[static_cast<size_t>(r) * d + c] = x.values()[static_cast<size_t>(r) * d + c] + b.values()[c];
    if (want_grad({&x, &b})) {
        out->requires_grad = true;
        out->parents = {x.node(), b.node()};
        Node* px = x.node().get();
        Node* pb = b.node().get();
        out->backfn = [px, pb, d](Node& self) {
            if (px->requires_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < self.val.size(); ++i) px->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int r = 0; r < self.rows; ++r)
                    for (int c = 0; c < d; ++c)
                        pb->grad[c] += self.grad[static_cast<size_t>(r) * d + c];
            }
        };
    }
    return Tensor(out);
}

Tensor mul_rowvec(const Tensor& x, const Tensor& g) {
    if (g.rows() != 1 || g.cols() != x.cols())
        throw std::invalid_argument("mul_rowvec: scale must be 1 x cols(x)");
    auto out = make_node(x.rows(), x.cols());
    const int d = x.cols();
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < d; ++c)
            out->val[static_cast<size_t>(r) * d + c] = x.values()[static_cast<size_t>(r) * d + c] * g.values()[c];
    if (want_grad({&x, &g})) {
        out->requires_grad = true;
        out->parents = {x.node(), g.node()};
        Node* px = x.node().get();
        Node* pg = g.node().get();
        out->backfn = [px, pg, d](Node& self) {
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            for (int r = 0; r < self.rows; ++r)
                for (int c = 0; c < d; ++c) {
                    const size_t i = static_cast<size_t>(r) * d + c;
                    if (px->requires_grad) px->grad[i] += self.grad[i] * pg->val[c];
                    if (pg->requires_grad) pg->grad[c] += self.grad[i] * px->val[i];
                }
        };
    }
    return Tensor(out);
}

Tensor broadcast_col(const Tensor& x, int d) {
    if (x.cols() != 1) throw std::invalid_argument("broadcast_col: input must be n x 1");
    auto out = make_node(x.rows(), d);
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < d; ++c)
            out->val[static_cast<size_t>(r) * d + c] = x.values()[r];
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        out->backfn = [px, d](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r) {
                double acc = 0.0;
                for (int c = 0; c < d; ++c) acc += self.grad[static_cast<size_t>(r) * d + c];
                px->grad[r] += acc;
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (trans_a && trans_b) throw std::invalid_argument("matmul: double transpose unsupported");
    const int n = trans_a ? a.cols() : a.rows();
    const int k = trans_a ? a.rows() : a.cols();
    const int kb = trans_b ? b.cols() : b.rows();
    const int m = trans_b ? b.rows() : b.cols();
    if (k != kb) throw std::invalid_argument("matmul: inner dimensions disagree");

    auto out = make_node(n, m);
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    if (!trans_a && !trans_b) gemm_nn(ap, bp, out->val.data(), n, k, m);
    else if (!trans_a && trans_b) gemm_nt(ap, bp, out->val.data(), n, k, m);
    else gemm_tn(ap, bp, out->val.data(), k, n, m);  // out = a^T * b, a is k x n

    if (want_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        Node* pa = a.node().get();
        Node* pb = b.node().get();
        out->backfn = [pa, pb, trans_a, trans_b, n, k, m](Node& self) {
            const double* g = self.grad.data();
            if (!trans_a && !trans_b) {
                if (pa->requires_grad) { pa->ensure_grad(); gemm_nt(g, pb->val.data(), pa->grad.data(), n, m, k); }
                if (pb->requires_grad) { pb->ensure_grad(); gemm_tn(pa->val.data(), g, pb->grad.data(), n, k, m); }
            } else if (!trans_a && trans_b) {
                // self = a * b^T, a: n x k, b: m x k
                if (pa->requires_grad) { pa->ensure_grad(); gemm_nn(g, pb->val.data(), pa->grad.data(), n, m, k); }
                if (pb->requires_grad) { pb->ensure_grad(); gemm_tn(g, pa->val.data(), pb->grad.data(), n, m, k); }
            } else {
                // self = a^T * b, a: k x n, b: k x m
                if (pa->requires_grad) { pa->ensure_grad(); gemm_nt(pb->val.data(), g, pa->grad.data(), k, m, n); }
                if (pb->requires_grad) { pb->ensure_grad(); gemm_nn(pa->val.data(), g, pb->grad.data(), k, n, m); }
            }
        };
    }
    return Tensor(out);
}

Tensor transpose(const Tensor& x) {
    auto out = make_node(x.cols(), x.rows());
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < x.cols(); ++c)
            out->val[static_cast<size_t>(c) * x.rows() + r] = x.values()[static_cast<size_t>(r) * x.cols() + c];
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        out->backfn = [px](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r)
                for (int c = 0; c < self.cols; ++c)
                    px->grad[static_cast<size_t>(c) * self.rows + r] += self.grad[static_cast<size_t>(r) * self.cols + c];
        };
    }
    return Tensor(out);
}

Tensor row_sum(const Tensor& x) {
    auto out = make_node(x.rows(), 1);
    const int d = x.cols();
    for (int r = 0; r < x.rows(); ++r) {
        double acc = 0.0;
        const double* row = x.values().data() + static_cast<size_t>(r) * d;
        for (int c = 0; c < d; ++c) acc += row[c];
        out->val[r] = acc;
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        out->backfn = [px, d](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r)
                for (int c = 0; c < d; ++c)
                    px->grad[static_cast<size_t>(r) * d + c] += self.grad[r];
        };
    }
    return Tensor(out);
}

Tensor row_mean(const Tensor& x) { return scale(row_sum(x), 1.0 / x.cols()); }

Tensor sum_all(const Tensor& x) {
    auto out = make_node(1, 1);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    out->val[0] = acc;
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        out->backfn = [px](Node& self) {
            px->ensure_grad();
            for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
        };
    }
    return Tensor(out);
}

Tensor softmax_rows(const Tensor& x) {
    auto out = make_node(x.rows(), x.cols());
    const int d = x.cols();
    for (int r = 0; r < x.rows(); ++r) {
        const double* row = x.values().data() + static_cast<size_t>(r) * d;
        double* orow = out->val.data() + static_cast<size_t>(r) * d;
        double mx = row[0];
        for (int c = 1; c < d; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c = 0; c < d; ++c) { orow[c] = std::exp(row[c] - mx); z += orow[c]; }
        for (int c = 0; c < d; ++c) orow[c] /= z;
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        Node* self_raw = out.get();
        out->backfn = [px, self_raw, d](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r) {
                const double* y = self_raw->val.data() + static_cast<size_t>(r) * d;
                const double* g = self.grad.data() + static_cast<size_t>(r) * d;
                double dot = 0.0;
                for (int c = 0; c < d; ++c) dot += g[c] * y[c];
                double* gx = px->grad.data() + static_cast<size_t>(r) * d;
                for (int c = 0; c < d; ++c) gx[c] += (g[c] - dot) * y[c];
            }
        };
    }
    return Tensor(out);
}

Tensor log_sum_exp_rows(const Tensor& x) {
    auto out = make_node(x.rows(), 1);
    const int d = x.cols();
    for (int r = 0; r < x.rows(); ++r) {
        const double* row = x.values().data() + static_cast<size_t>(r) * d;
        double mx = row[0];
        for (int c = 1; c < d; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c = 0; c < d; ++c) z += std::exp(row[c] - mx);
        out->val[r] = mx + std::log(z);
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        Node* self_raw = out.get();
        out->backfn = [px, self_raw, d](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r) {
                const double lse = self_raw->val[r];
                const double g = self.grad[r];
                const double* row = px->val.data() + static_cast<size_t>(r) * d;
                double* gx = px->grad.data() + static_cast<size_t>(r) * d;
                for (int c = 0; c < d; ++c) gx[c] += g * std::exp(row[c] - lse);
            }
        };
    }
    return Tensor(out);
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scale must be 1 x 1");
    auto out = make_node(x.rows(), x.cols());
    const double sv = s.values()[0];
    for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = x.values()[i] * sv;
    if (want_grad({&x, &s})) {
        out->requires_grad = true;
        out->parents = {x.node(), s.node()};
        Node* px = x.node().get();
        Node* ps = s.node().get();
        out->backfn = [px, ps](Node& self) {
            const double sv2 = ps->val[0];
            if (px->requires_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < self.val.size(); ++i) px->grad[i] += self.grad[i] * sv2;
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                double acc = 0.0;
                for (size_t i = 0; i < self.val.size(); ++i) acc += self.grad[i] * px->val[i];
                ps->grad[0] += acc;
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (c0 < 0 || c1 > x.cols() || c0 > c1) throw std::invalid_argument("slice_cols: bad range");
    const int w = c1 - c0;
    auto out = make_node(x.rows(), w);
    for (int r = 0; r < x.rows(); ++r)
        std::copy_n(x.values().data() + static_cast<size_t>(r) * x.cols() + c0, w,
                    out->val.data() + static_cast<size_t>(r) * w);
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        const int xc = x.cols();
        out->backfn = [px, c0, w, xc](Node& self) {
            px->ensure_grad();
            for (int r = 0; r < self.rows; ++r)
                for (int c = 0; c < w; ++c)
                    px->grad[static_cast<size_t>(r) * xc + c0 + c] += self.grad[static_cast<size_t>(r) * w + c];
        };
    }
    return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const int n = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
    }
    auto out = make_node(n, total);
    int off = 0;
    for (const auto& p : parts) {
        for (int r = 0; r < n; ++r)
            std::copy_n(p.values().data() + static_cast<size_t>(r) * p.cols(), p.cols(),
                        out->val.data() + static_cast<size_t>(r) * total + off);
        off += p.cols();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g_grad_enabled && any) {
        out->requires_grad = true;
        std::vector<Node*> raw;
        for (const auto& p : parts) {
            out->parents.push_back(p.node());
            raw.push_back(p.node().get());
        }
        out->backfn = [raw, total](Node& self) {
            int off2 = 0;
            for (Node* p : raw) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int r = 0; r < self.rows; ++r)
                        for (int c = 0; c < p->cols; ++c)
                            p->grad[static_cast<size_t>(r) * p->cols + c] +=
                                self.grad[static_cast<size_t>(r) * total + off2 + c];
                }
                off2 += p->cols;
            }
        };
    }
    return Tensor(out);
}

Tensor select(const Tensor& x, int r, int c) {
    if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols())
        throw std::invalid_argument("select: index out of range");
    auto out = make_node(1, 1);
    out->val[0] = x.values()[static_cast<size_t>(r) * x.cols() + c];
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        const size_t idx = static_cast<size_t>(r) * x.cols() + c;
        out->backfn = [px, idx](Node& self) {
            px->ensure_grad();
            px->grad[idx] += self.grad[0];
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Structured ops
// ---------------------------------------------------------------------------

Tensor rotary(const Tensor& x, double base, int pos_offset) {
    if (x.cols() % 2 != 0) throw std::invalid_argument("rotary: dimension must be even");
    const int d = x.cols();
    const int half = d / 2;
    std::vector<double> theta(half);
    for (int k = 0; k < half; ++k) theta[k] = std::pow(base, -2.0 * k / d);

    auto out = make_node(x.rows(), d);
    for (int t = 0; t < x.rows(); ++t) {
        const double* row = x.values().data() + static_cast<size_t>(t) * d;
        double* orow = out->val.data() + static_cast<size_t>(t) * d;
        const double pos = t + pos_offset;
        for (int k = 0; k < half; ++k) {
            const double ang = pos * theta[k];
            const double cs = std::cos(ang), sn = std::sin(ang);
            const double a = row[2 * k], b = row[2 * k + 1];
            orow[2 * k] = cs * a - sn * b;
            orow[2 * k + 1] = sn * a + cs * b;
        }
    }
    if (want_grad({&x})) {
        out->requires_grad = true;
        out->parents = {x.node()};
        Node* px = x.node().get();
        out->backfn = [px, theta, pos_offset, d, half](Node& self) {
            px->ensure_grad();
            for (int t = 0; t < self.rows; ++t) {
                const double* g = self.grad.data() + static_cast<size_t>(t) * d;
                double* gx = px->grad.data() + static_cast<size_t>(t) * d;
                const double pos = t + pos_offset;
                for (int k = 0; k < half; ++k) {
                    const double ang = pos * theta[k];
                    const double cs = std::cos(ang), sn = std::sin(ang);
                    gx[2 * k] += cs * g[2 * k] + sn * g[2 * k + 1];
                    gx[2 * k + 1] += -sn * g[2 * k] + cs * g[2 * k + 1];
                }
            }
        };
    }
    return Tensor(out);
}

namespace {

struct ConvDims {
    int t_out, f_out, patch;  // patch = c_in * kh * kw
};

ConvDims conv_dims(int t_in, int freq, int c_in, int kh, int kw, int st, int sf) {
    if (t_in < kh || freq < kw) throw DataError("conv2d: input shorter than kernel");
    ConvDims d;
    d.t_out = (t_in - kh) / st + 1;
    d.f_out = (freq - kw) / sf + 1;
    d.patch = c_in * kh * kw;
    return d;
}

// cols: (t_out*f_out) x patch, patch index = (c*kh + dt)*kw + df
void im2col(const std::vector<double>& xv, int t_in, int freq, int c_in,
            int kh, int kw, int st, int sf, const ConvDims& d, std::vector<double>& cols) {
    cols.assign(static_cast<size_t>(d.t_out) * d.f_out * d.patch, 0.0);
    const int xcols = c_in * freq;
    for (int to = 0; to < d.t_out; ++to)
        for (int fo = 0; fo < d.f_out; ++fo) {
            double* dst = cols.data() + (static_cast<size_t>(to) * d.f_out + fo) * d.patch;
            for (int c = 0; c < c_in; ++c)
                for (int dt = 0; dt < kh; ++dt) {
                    const double* src = xv.data() + static_cast<size_t>(to * st + dt) * xcols + c * freq + fo * sf;
                    double* drow = dst + (c * kh + dt) * kw;
                    for (int df = 0; df < kw; ++df) drow[df] = src[df];
                }
        }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int c_in, int freq, int kh, int kw, int stride_t, int stride_f) {
    if (x.cols() != c_in * freq) throw std::invalid_argument("conv2d: x cols != c_in*freq");
    const int c_out = w.rows();
    if (w.cols() != c_in * kh * kw) throw std::invalid_argument("conv2d: kernel shape mismatch");
    if (b.rows() != 1 || b.cols() != c_out) throw std::invalid_argument("conv2d: bias shape mismatch");

    const int t_in = x.rows();
    const ConvDims dims = conv_dims(t_in, freq, c_in, kh, kw, stride_t, stride_f);
    std::vector<double> cols;
    im2col(x.values(), t_in, freq, c_in, kh, kw, stride_t, stride_f, dims, cols);

    const int npos = dims.t_out * dims.f_out;
    std::vector<double> pre(static_cast<size_t>(npos) * c_out, 0.0);
    gemm_nt(cols.data(), w.values().data(), pre.data(), npos, dims.patch, c_out);

    auto out = make_node(dims.t_out, c_out * dims.f_out);
    for (int to = 0; to < dims.t_out; ++to)
        for (int fo = 0; fo < dims.f_out; ++fo) {
            const double* prow = pre.data() + (static_cast<size_t>(to) * dims.f_out + fo) * c_out;
            for (int c = 0; c < c_out; ++c)
                out->val[static_cast<size_t>(to) * (c_out * dims.f_out) + c * dims.f_out + fo] =
                    prow[c] + b.values()[c];
        }

    if (want_grad({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x.node(), w.node(), b.node()};
        Node* px = x.node().get();
        Node* pw = w.node().get();
        Node* pb = b.node().get();
        out->backfn = [px, pw, pb, c_in, freq, kh, kw, stride_t, stride_f, dims, c_out, t_in](Node& self) {
            const int npos2 = dims.t_out * dims.f_out;
            // Regroup upstream grad to (npos x c_out).
            std::vector<double> gpre(static_cast<size_t>(npos2) * c_out);
            for (int to = 0; to < dims.t_out; ++to)
                for (int fo = 0; fo < dims.f_out; ++fo)
                    for (int c = 0; c < c_out; ++c)
                        gpre[(static_cast<size_t>(to) * dims.f_out + fo) * c_out + c] =
                            self.grad[static_cast<size_t>(to) * (c_out * dims.f_out) + c * dims.f_out + fo];

            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int p = 0; p < npos2; ++p)
                    for (int c = 0; c < c_out; ++c) pb->grad[c] += gpre[static_cast<size_t>(p) * c_out + c];
            }
            std::vector<double> cols2;
            if (pw->requires_grad || px->requires_grad)
                im2col(px->val, t_in, freq, c_in, kh, kw, stride_t, stride_f, dims, cols2);
            if (pw->requires_grad) {
                pw->ensure_grad();
                gemm_tn(gpre.data(), cols2.data(), pw->grad.data(), npos2, c_out, dims.patch);
            }
            if (px->requires_grad) {
                px->ensure_grad();
                std::vector<double> gcols(static_cast<size_t>(npos2) * dims.patch, 0.0);
                gemm_nn(gpre.data(), pw->val.data(), gcols.data(), npos2, c_out, dims.patch);
                const int xcols = c_in * freq;
                for (int to = 0; to < dims.t_out; ++to)
                    for (int fo = 0; fo < dims.f_out; ++fo) {
                        const double* src = gcols.data() + (static_cast<size_t>(to) * dims.f_out + fo) * dims.patch;
                        for (int c = 0; c < c_in; ++c)
                            for (int dt = 0; dt < kh; ++dt) {
                                double* drow = px->grad.data() +
                                               static_cast<size_t>(to * stride_t + dt) * xcols + c * freq + fo * stride_f;
                                const double* srow = src + (c * kh + dt) * kw;
                                for (int df = 0; df < kw; ++df) drow[df] += srow[df];
                            }
                    }
            }
        };
    }
    return Tensor(out);
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int n = x.rows();
    const int d = x.cols();
    const int k = w.rows();
    if (w.cols() != d) throw std::invalid_argument("depthwise_conv1d: kernel channel mismatch");
    if (b.rows() != 1 || b.cols() != d) throw std::invalid_argument("depthwise_conv1d: bias shape mismatch");
    if (k % 2 == 0) throw std::invalid_argument("depthwise_conv1d: kernel must be odd");
    const int pad = (k - 1) / 2;

    auto out = make_node(n, d);
    for (int t = 0; t < n; ++t) {
        double* orow = out->val.data() + static_cast<size_t>(t) * d;
        for (int c = 0; c < d; ++c) orow[c] = b.values()[c];
        for (int dt = 0; dt < k; ++dt) {
            const int src = t + dt - pad;
            if (src < 0 || src >= n) continue;
            const double* xrow = x.values().data() + static_cast<size_t>(src) * d;
            const double* wrow = w.values().data() + static_cast<size_t>(dt) * d;
            for (int c = 0; c < d; ++c) orow[c] += wrow[c] * xrow[c];
        }
    }
    if (want_grad({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x.node(), w.node(), b.node()};
        Node* px = x.node().get();
        Node* pw = w.node().get();
        Node* pb = b.node().get();
        out->backfn = [px, pw, pb, n, d, k, pad](Node& self) {
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int t = 0; t < n; ++t)
                    for (int c = 0; c < d; ++c) pb->grad[c] += self.grad[static_cast<size_t>(t) * d + c];
            }
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            for (int t = 0; t < n; ++t) {
                const double* g = self.grad.data() + static_cast<size_t>(t) * d;
                for (int dt = 0; dt < k; ++dt) {
                    const int src = t + dt - pad;
                    if (src < 0 || src >= n) continue;
                    const double* wrow = pw->val.data() + static_cast<size_t>(dt) * d;
                    const double* xrow = px->val.data() + static_cast<size_t>(src) * d;
                    if (px->requires_grad) {
                        double* gx = px->grad.data() + static_cast<size_t>(src) * d;
                        for (int c = 0; c < d; ++c) gx[c] += g[c] * wrow[c];
                    }
                    if (pw->requires_grad) {
                        double* gw = pw->grad.data() + static_cast<size_t>(dt) * d;
                        for (int c = 0; c < d; ++c) gw[c] += g[c] * xrow[c];
                    }
                }
            }
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w) { return matmul(x, w); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int d = x.cols();
    Tensor mean = row_mean(x);
    Tensor centered = sub(x, broadcast_col(mean, d));
    Tensor var = row_mean(mul(centered, centered));
    Tensor inv = reciprocal(sqrt(add_const(var, eps)));
    Tensor normed = mul(centered, broadcast_col(inv, d));
    return add_rowvec(mul_rowvec(normed, gamma), beta);
}

Tensor swish(const Tensor& x) { return mul(x, sigmoid(x)); }

Tensor max_const(const Tensor& x, double floor_val) {
    return add_const(relu(add_const(x, -floor_val)), floor_val);
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    Mat mask(x.rows(), x.cols());
    const double keep = 1.0 - p;
    for (auto& m : mask.v) m = rng.uniform() >= p ? 1.0 / keep : 0.0;
    return mul(x, Tensor::constant(mask));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

void topo_collect(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void backward(const Tensor& root, const std::vector<double>& upstream) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (upstream.size() != root.size()) throw std::invalid_argument("backward: upstream size mismatch");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    topo_collect(root.node().get(), order);

    // Interior gradients are scratch for this pass; leaf gradients accumulate.
    for (Node* n : order) {
        if (!n->parents.empty() || n == root.node().get()) n->grad.assign(n->val.size(), 0.0);
        else n->ensure_grad();
    }
    {
        auto& g = root.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += upstream[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn) n->backfn(*n);
    }
}

void backward(const Tensor& root) {
    if (root.rows() != 1 || root.cols() != 1)
        throw std::invalid_argument("backward: scalar root required (or pass an upstream gradient)");
    backward(root, std::vector<double>{1.0});
}

}  // namespace asvc::ag
