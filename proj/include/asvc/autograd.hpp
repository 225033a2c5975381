// Reverse-mode automatic differentiation over dense double matrices.
// Eager ops build a dynamic tape; backward() walks it in reverse topological
// order. Leaf gradients accumulate across calls (zero via zero_grad), while
// interior gradients are cleared at the start of every backward pass.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "asvc/common.hpp"
#include "asvc/rng.hpp"

namespace asvc::ag {

struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;

    size_t size() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(int rows, int cols, bool requires_grad = false);
    static Tensor constant(const Mat& m);
    static Tensor constant(int rows, int cols, const std::vector<double>& v);
    static Tensor scalar(double x);
    // Leaf parameter: participates in gradient accumulation.
    static Tensor param(int rows, int cols, const std::vector<double>& v);

    bool defined() const { return n_ != nullptr; }
    int rows() const { return n_->rows; }
    int cols() const { return n_->cols; }
    size_t size() const { return n_->size(); }

    std::vector<double>& values() { return n_->val; }
    const std::vector<double>& values() const { return n_->val; }
    std::vector<double>& grad() { n_->ensure_grad(); return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }

    double item() const { return n_->val[0]; }
    Mat to_mat() const;

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Scoped guard disabling tape recording (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& b);   // b: 1 x d
Tensor mul_rowvec(const Tensor& x, const Tensor& g);   // g: 1 x d
Tensor broadcast_col(const Tensor& x, int d);          // n x 1 -> n x d

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// ---------------------------------------------------------------------------
// Linear algebra and reductions
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor transpose(const Tensor& x);
Tensor row_sum(const Tensor& x);    // n x d -> n x 1
Tensor row_mean(const Tensor& x);   // n x d -> n x 1
Tensor sum_all(const Tensor& x);    // -> 1 x 1
Tensor softmax_rows(const Tensor& x);
Tensor log_sum_exp_rows(const Tensor& x);  // n x d -> n x 1

// Multiply by a 1x1 tensor (gradient flows into the scalar).
Tensor scale_by(const Tensor& x, const Tensor& s);

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor select(const Tensor& x, int r, int c);  // -> 1 x 1

// ---------------------------------------------------------------------------
// Speech-specific structured ops
// ---------------------------------------------------------------------------

// Rotate consecutive dim pairs (2k, 2k+1) of each row t by angle
// (t + pos_offset) * base^(-2k/d). Requires even column count.
Tensor rotary(const Tensor& x, double base = 10000.0, int pos_offset = 0);

// 2-D convolution over a (T x (c_in*F)) map, channel-major columns, kernel
// kh x kw, no padding. Output is T' x (c_out*F').
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int c_in, int freq, int kh, int kw, int stride_t, int stride_f);

// Depthwise 1-D convolution along time with same-padding; w is k x D.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b);

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------
Tensor linear(const Tensor& x, const Tensor& w);                    // x * w
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);   // x * w + b
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor swish(const Tensor& x);
Tensor max_const(const Tensor& x, double floor_val);  // elementwise max(x, c)
Tensor dropout(const Tensor& x, double p, Rng& rng);

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Seeds d(root)/d(root) = 1; root must be 1x1.
void backward(const Tensor& root);
// General vector-Jacobian product with an explicit upstream gradient.
void backward(const Tensor& root, const std::vector<double>& upstream);

// Raw GEMM kernels (double, accumulate into c). Exposed for reuse by
// inference-path helpers and tests.
void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m);

}  // namespace asvc::ag
