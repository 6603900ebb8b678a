#include "actlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "actlab/kernels.hpp"

namespace actlab {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

NodePtr make_node(const Shape& shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->numel = shape_numel(shape);
    n->storage.assign(static_cast<size_t>(n->numel), 0.0);
    n->data = n->storage.data();
    return n;
}

void ensure_grad(TensorNode& n) {
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel), 0.0);
}

bool any_grad(const std::initializer_list<const Tensor*>& ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void require_2d(const Tensor& t, const char* op) {
    if (t.shape().size() > 2) fail(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

// Shared shape plumbing for binary matmul-style ops.
void check_valid(const Tensor& t, const char* op) {
    if (!t.valid()) fail(std::string(op) + ": uninitialized tensor");
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (size_t i = 0; i < s.size(); ++i) out << (i ? " x " : "") << s[i];
    out << "]";
    return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    for (auto d : shape)
        if (d < 1) fail("tensor: shape dimensions must be >= 1, got " + shape_str(shape));
    auto n = make_node(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> data, bool requires_grad) {
    for (auto d : shape)
        if (d < 1) fail("tensor: shape dimensions must be >= 1, got " + shape_str(shape));
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        fail("tensor: " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
             " values");
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->numel = shape_numel(shape);
    n->storage = std::move(data);
    n->data = n->storage.data();
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::view(const Shape& shape, double* external, bool requires_grad) {
    for (auto d : shape)
        if (d < 1) fail("tensor: shape dimensions must be >= 1, got " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->numel = shape_numel(shape);
    n->data = external;
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
    return t;
}

std::int64_t Tensor::rows() const {
    const Shape& s = node_->shape;
    if (s.size() == 1) return 1;
    if (s.size() == 2) return s[0];
    fail("tensor: rows() on " + shape_str(s));
}

std::int64_t Tensor::cols() const {
    const Shape& s = node_->shape;
    if (s.size() == 1) return s[0];
    if (s.size() == 2) return s[1];
    fail("tensor: cols() on " + shape_str(s));
}

double Tensor::item() const {
    if (node_->numel != 1) fail("tensor: item() on " + shape_str(node_->shape));
    return node_->data[0];
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(static_cast<size_t>(node_->numel), 0.0);
}

void Tensor::backward() {
    if (!node_) fail("backward: uninitialized tensor");
    if (node_->numel != 1) fail("backward: root must be scalar, got " + shape_str(node_->shape));
    if (!node_->requires_grad) return;

    // Reverse post-order DFS = topological order (consumers before inputs).
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t next;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    ensure_grad(*node_);
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_valid(a, "matmul");
    check_valid(b, "matmul");
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        fail("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    auto out = make_node({m, n});
    kernels::gemm_nn(a.data(), b.data(), out->data, m, k, n);
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                kernels::gemm_nt(self.grad.data(), bn->data, an->grad.data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                kernels::gemm_tn(an->data, self.grad.data(), bn->grad.data(), k, m, n, true);
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_valid(a, "matmul_nt");
    check_valid(b, "matmul_nt");
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        fail("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
             "^T");
    auto out = make_node({m, n});
    kernels::gemm_nt(a.data(), b.data(), out->data, m, k, n);
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                kernels::gemm_nn(self.grad.data(), bn->data, an->grad.data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                kernels::gemm_tn(self.grad.data(), an->data, bn->grad.data(), n, m, k, true);
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    check_valid(a, "matmul_tn");
    check_valid(b, "matmul_tn");
    require_2d(a, "matmul_tn");
    require_2d(b, "matmul_tn");
    const std::int64_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k)
        fail("matmul_tn: shape mismatch " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
    auto out = make_node({m, n});
    kernels::gemm_tn(a.data(), b.data(), out->data, m, k, n);
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                kernels::gemm_nt(bn->data, self.grad.data(), an->grad.data(), k, n, m, true);
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                kernels::gemm_nn(an->data, self.grad.data(), bn->grad.data(), k, m, n, true);
            }
        };
    }
    return Tensor(std::move(out));
}

// ---- elementwise ------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_valid(a, "add");
    check_valid(b, "add");
    check_same_shape(a, b, "add");
    auto out = make_node(a.shape());
    const std::int64_t n = a.numel();
    const double* pa = a.data();
    const double* pb = b.data();
#pragma omp simd
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = pa[i] + pb[i];
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_valid(a, "sub");
    check_valid(b, "sub");
    check_same_shape(a, b, "sub");
    auto out = make_node(a.shape());
    const std::int64_t n = a.numel();
#pragma omp simd
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a.data()[i] - b.data()[i];
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] -= self.grad[i];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_valid(a, "mul");
    check_valid(b, "mul");
    check_same_shape(a, b, "mul");
    auto out = make_node(a.shape());
    const std::int64_t n = a.numel();
#pragma omp simd
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a.data()[i] * b.data()[i];
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i] * an->data[i];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor scale(const Tensor& a, double s) {
    check_valid(a, "scale");
    auto out = make_node(a.shape());
    const std::int64_t n = a.numel();
#pragma omp simd
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a.data()[i] * s;
    if (a.requires_grad()) {
        out->requires_grad = true;
        out->parents = {a.node()};
        auto an = a.node();
        out->backward_fn = [an, s, n](TensorNode& self) {
            ensure_grad(*an);
            for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i] * s;
        };
    }
    return Tensor(std::move(out));
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
    check_valid(x, "add_row_broadcast");
    check_valid(bias, "add_row_broadcast");
    require_2d(x, "add_row_broadcast");
    const std::int64_t m = x.rows(), n = x.cols();
    if (bias.numel() != n)
        fail("add_row_broadcast: bias " + shape_str(bias.shape()) + " does not match row width " +
             std::to_string(n));
    auto out = make_node(x.shape());
    for (std::int64_t i = 0; i < m; ++i)
#pragma omp simd
        for (std::int64_t j = 0; j < n; ++j)
            out->data[i * n + j] = x.data()[i * n + j] + bias.data()[j];
    if (any_grad({&x, &bias})) {
        out->requires_grad = true;
        out->parents = {x.node(), bias.node()};
        auto xn = x.node(), bn = bias.node();
        out->backward_fn = [xn, bn, m, n](TensorNode& self) {
            if (xn->requires_grad) {
                ensure_grad(*xn);
                for (std::int64_t i = 0; i < m * n; ++i) xn->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) bn->grad[j] += self.grad[i * n + j];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor mul_row_broadcast(const Tensor& x, const Tensor& gain) {
    check_valid(x, "mul_row_broadcast");
    check_valid(gain, "mul_row_broadcast");
    require_2d(x, "mul_row_broadcast");
    const std::int64_t m = x.rows(), n = x.cols();
    if (gain.numel() != n)
        fail("mul_row_broadcast: gain " + shape_str(gain.shape()) + " does not match row width " +
             std::to_string(n));
    auto out = make_node(x.shape());
    for (std::int64_t i = 0; i < m; ++i)
#pragma omp simd
        for (std::int64_t j = 0; j < n; ++j)
            out->data[i * n + j] = x.data()[i * n + j] * gain.data()[j];
    if (any_grad({&x, &gain})) {
        out->requires_grad = true;
        out->parents = {x.node(), gain.node()};
        auto xn = x.node(), gn = gain.node();
        out->backward_fn = [xn, gn, m, n](TensorNode& self) {
            if (xn->requires_grad) {
                ensure_grad(*xn);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        xn->grad[i * n + j] += self.grad[i * n + j] * gn->data[j];
            }
            if (gn->requires_grad) {
                ensure_grad(*gn);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        gn->grad[j] += self.grad[i * n + j] * xn->data[i * n + j];
            }
        };
    }
    return Tensor(std::move(out));
}

// ---- concat / slice ---------------------------------------------------------

Tensor hconcat(const Tensor& a, const Tensor& b) {
    check_valid(a, "hconcat");
    check_valid(b, "hconcat");
    require_2d(a, "hconcat");
    require_2d(b, "hconcat");
    const std::int64_t m = a.rows(), p = a.cols(), q = b.cols();
    if (b.rows() != m)
        fail("hconcat: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_node({m, p + q});
    for (std::int64_t i = 0; i < m; ++i) {
        std::copy(a.data() + i * p, a.data() + (i + 1) * p, out->data + i * (p + q));
        std::copy(b.data() + i * q, b.data() + (i + 1) * q, out->data + i * (p + q) + p);
    }
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, m, p, q](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < p; ++j)
                        an->grad[i * p + j] += self.grad[i * (p + q) + j];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < q; ++j)
                        bn->grad[i * q + j] += self.grad[i * (p + q) + p + j];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor vconcat(const Tensor& a, const Tensor& b) {
    check_valid(a, "vconcat");
    check_valid(b, "vconcat");
    require_2d(a, "vconcat");
    require_2d(b, "vconcat");
    const std::int64_t p = a.rows(), q = b.rows(), n = a.cols();
    if (b.cols() != n)
        fail("vconcat: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_node({p + q, n});
    std::copy(a.data(), a.data() + p * n, out->data);
    std::copy(b.data(), b.data() + q * n, out->data + p * n);
    if (any_grad({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        auto an = a.node(), bn = b.node();
        out->backward_fn = [an, bn, p, q, n](TensorNode& self) {
            if (an->requires_grad) {
                ensure_grad(*an);
                for (std::int64_t i = 0; i < p * n; ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(*bn);
                for (std::int64_t i = 0; i < q * n; ++i) bn->grad[i] += self.grad[p * n + i];
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
    check_valid(a, "slice_rows");
    require_2d(a, "slice_rows");
    const std::int64_t m = a.rows(), n = a.cols();
    if (r0 < 0 || r1 <= r0 || r1 > m)
        fail("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
             ") invalid for " + shape_str(a.shape()));
    auto out = make_node({r1 - r0, n});
    std::copy(a.data() + r0 * n, a.data() + r1 * n, out->data);
    if (a.requires_grad()) {
        out->requires_grad = true;
        out->parents = {a.node()};
        auto an = a.node();
        out->backward_fn = [an, r0, r1, n](TensorNode& self) {
            ensure_grad(*an);
            for (std::int64_t i = 0; i < (r1 - r0) * n; ++i) an->grad[r0 * n + i] += self.grad[i];
        };
    }
    return Tensor(std::move(out));
}

Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    check_valid(a, "slice_cols");
    require_2d(a, "slice_cols");
    const std::int64_t m = a.rows(), n = a.cols();
    if (c0 < 0 || c1 <= c0 || c1 > n)
        fail("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
             ") invalid for " + shape_str(a.shape()));
    const std::int64_t w = c1 - c0;
    auto out = make_node({m, w});
    for (std::int64_t i = 0; i < m; ++i)
        std::copy(a.data() + i * n + c0, a.data() + i * n + c1, out->data + i * w);
    if (a.requires_grad()) {
        out->requires_grad = true;
        out->parents = {a.node()};
        auto an = a.node();
        out->backward_fn = [an, c0, w, m, n](TensorNode& self) {
            ensure_grad(*an);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < w; ++j)
                    an->grad[i * n + c0 + j] += self.grad[i * w + j];
        };
    }
    return Tensor(std::move(out));
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    check_valid(x, "softmax_rows");
    require_2d(x, "softmax_rows");
    const std::int64_t m = x.rows(), n = x.cols();
    for (std::int64_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < n; ++j) {
            const double v = x.data()[i * n + j];
            if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
                fail("softmax_rows: non-finite entry in row " + std::to_string(i));
            mx = std::max(mx, v);
        }
        if (mx == -std::numeric_limits<double>::infinity())
            fail("softmax_rows: fully masked row " + std::to_string(i));
    }
    auto out = make_node(x.shape());
    kernels::softmax_rows(x.data(), out->data, m, n);
    if (x.requires_grad()) {
        out->requires_grad = true;
        out->parents = {x.node()};
        auto xn = x.node();
        out->backward_fn = [xn, m, n](TensorNode& self) {
            ensure_grad(*xn);
            for (std::int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j)
                    dot += self.grad[i * n + j] * self.data[i * n + j];
                for (std::int64_t j = 0; j < n; ++j)
                    xn->grad[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dot);
            }
        };
    }
    return Tensor(std::move(out));
}

// ---- normalization ----------------------------------------------------------

Tensor norm_raw(const Tensor& x, NormKind kind, double eps) {
    check_valid(x, "norm_raw");
    require_2d(x, "norm_raw");
    if (eps <= 0.0) fail("norm_raw: epsilon must be positive");
    const std::int64_t m = x.rows(), n = x.cols();
    auto out = make_node(x.shape());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double* yr = out->data + i * n;
        if (kind == NormKind::layernorm) {
            double mean = 0.0;
            for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= static_cast<double>(n);
            const double inv = 1.0 / (std::sqrt(var) + eps);
            for (std::int64_t j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * inv;
        } else {
            double ms = 0.0;
            for (std::int64_t j = 0; j < n; ++j) ms += xr[j] * xr[j];
            const double rms = std::sqrt(ms / static_cast<double>(n));
            const double inv = 1.0 / (rms + eps);
            for (std::int64_t j = 0; j < n; ++j) yr[j] = xr[j] * inv;
        }
    }
    if (x.requires_grad()) {
        out->requires_grad = true;
        out->parents = {x.node()};
        auto xn = x.node();
        out->backward_fn = [xn, kind, eps, m, n](TensorNode& self) {
            ensure_grad(*xn);
            const double dn = static_cast<double>(n);
            for (std::int64_t i = 0; i < m; ++i) {
                const double* xr = xn->data + i * n;
                const double* yr = self.data + i * n;
                const double* dy = self.grad.data() + i * n;
                double* dx = xn->grad.data() + i * n;
                if (kind == NormKind::layernorm) {
                    double mean = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
                    mean /= dn;
                    double var = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= dn;
                    const double sigma = std::sqrt(var);
                    const double s = sigma + eps;
                    double dysum = 0.0, dydot = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        dysum += dy[j];
                        dydot += dy[j] * yr[j];
                    }
                    // d/dx of (x-mu)/(sigma+eps); sigma=0 rows take the
                    // subgradient with d(sigma)/dx = 0.
                    const double c = sigma > 0.0 ? dydot / (dn * sigma) : 0.0;
                    for (std::int64_t j = 0; j < n; ++j)
                        dx[j] += (dy[j] - dysum / dn) / s - yr[j] * c;
                } else {
                    double ms = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) ms += xr[j] * xr[j];
                    const double rms = std::sqrt(ms / dn);
                    const double t = rms + eps;
                    double dxdot = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) dxdot += dy[j] * xr[j];
                    const double c = rms > 0.0 ? dxdot / (t * t * dn * rms) : 0.0;
                    for (std::int64_t j = 0; j < n; ++j) dx[j] += dy[j] / t - xr[j] * c;
                }
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
    if (!p.bias.valid()) fail("layer_norm: bias required (use rms_norm for the bias-free form)");
    if (p.gain.numel() != x.cols() || p.bias.numel() != x.cols())
        fail("layer_norm: gain/bias length does not match row width " + std::to_string(x.cols()));
    return add_row_broadcast(mul_row_broadcast(norm_raw(x, NormKind::layernorm, p.epsilon), p.gain),
                             p.bias);
}

Tensor rms_norm(const Tensor& x, const NormParams& p) {
    if (p.bias.valid()) fail("rms_norm: bias must be absent");
    if (p.gain.numel() != x.cols())
        fail("rms_norm: gain length does not match row width " + std::to_string(x.cols()));
    return mul_row_broadcast(norm_raw(x, NormKind::rmsnorm, p.epsilon), p.gain);
}

// ---- gelu ---------------------------------------------------------------------

Tensor gelu(const Tensor& x) {
    check_valid(x, "gelu");
    constexpr double kC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    auto out = make_node(x.shape());
    const std::int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out->data[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    if (x.requires_grad()) {
        out->requires_grad = true;
        out->parents = {x.node()};
        auto xn = x.node();
        out->backward_fn = [xn, n](TensorNode& self) {
            ensure_grad(*xn);
            for (std::int64_t i = 0; i < n; ++i) {
                const double v = xn->data[i];
                const double u = kC * (v + kA * v * v * v);
                const double th = std::tanh(u);
                const double d =
                    0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
                xn->grad[i] += self.grad[i] * d;
            }
        };
    }
    return Tensor(std::move(out));
}

// ---- embedding / losses --------------------------------------------------------

Tensor embedding_rows(const Tensor& table, const std::vector<std::int32_t>& ids) {
    check_valid(table, "embedding_rows");
    require_2d(table, "embedding_rows");
    if (ids.empty()) fail("embedding_rows: empty id list");
    const std::int64_t rows = table.rows(), d = table.cols();
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    for (std::int32_t id : ids)
        if (id < 0 || id >= rows)
            fail("embedding_rows: token id " + std::to_string(id) + " out of range [0, " +
                 std::to_string(rows) + ")");
    auto out = make_node({t, d});
    for (std::int64_t i = 0; i < t; ++i)
        std::copy(table.data() + ids[i] * d, table.data() + (ids[i] + 1) * d, out->data + i * d);
    if (table.requires_grad()) {
        out->requires_grad = true;
        out->parents = {table.node()};
        auto tn = table.node();
        auto ids_copy = ids;
        out->backward_fn = [tn, ids_copy, d](TensorNode& self) {
            ensure_grad(*tn);
            for (size_t i = 0; i < ids_copy.size(); ++i)
                for (std::int64_t j = 0; j < d; ++j)
                    tn->grad[ids_copy[i] * d + j] += self.grad[i * d + j];
        };
    }
    return Tensor(std::move(out));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                     const std::vector<std::uint8_t>& mask) {
    check_valid(logits, "cross_entropy");
    require_2d(logits, "cross_entropy");
    const std::int64_t t = logits.rows(), v = logits.cols();
    if (static_cast<std::int64_t>(targets.size()) != t)
        fail("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
             std::to_string(t) + " rows");
    if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != t)
        fail("cross_entropy: mask length mismatch");
    std::int64_t live = 0;
    for (std::int64_t i = 0; i < t; ++i) {
        if (targets[i] < 0 || targets[i] >= v)
            fail("cross_entropy: target " + std::to_string(targets[i]) + " out of range [0, " +
                 std::to_string(v) + ")");
        if (mask.empty() || !mask[i]) ++live;
    }
    if (live == 0) fail("cross_entropy: all positions masked");

    // Forward: stable log-sum-exp per row; keep the probabilities around for
    // the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(t * v));
    double loss = 0.0;
    for (std::int64_t i = 0; i < t; ++i) {
        const double* zr = logits.data() + i * v;
        double mx = zr[0];
        for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, zr[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            const double e = std::exp(zr[j] - mx);
            (*probs)[i * v + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < v; ++j) (*probs)[i * v + j] *= inv;
        if (mask.empty() || !mask[i]) loss += mx + std::log(sum) - zr[targets[i]];
    }
    loss /= static_cast<double>(live);

    auto out = make_node({1});
    out->data[0] = loss;
    if (logits.requires_grad()) {
        out->requires_grad = true;
        out->parents = {logits.node()};
        auto ln = logits.node();
        auto targets_copy = targets;
        auto mask_copy = mask;
        out->backward_fn = [ln, probs, targets_copy, mask_copy, t, v, live](TensorNode& self) {
            ensure_grad(*ln);
            const double g = self.grad[0] / static_cast<double>(live);
            for (std::int64_t i = 0; i < t; ++i) {
                if (!mask_copy.empty() && mask_copy[i]) continue;
                for (std::int64_t j = 0; j < v; ++j) ln->grad[i * v + j] += g * (*probs)[i * v + j];
                ln->grad[i * v + targets_copy[i]] -= g;
            }
        };
    }
    return Tensor(std::move(out));
}

Tensor weighted_sum(const Tensor& a, const std::vector<double>& w) {
    check_valid(a, "weighted_sum");
    if (static_cast<std::int64_t>(w.size()) != a.numel())
        fail("weighted_sum: weight count " + std::to_string(w.size()) + " vs " +
             std::to_string(a.numel()) + " elements");
    auto out = make_node({1});
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a.data()[i] * w[i];
    out->data[0] = s;
    if (a.requires_grad()) {
        out->requires_grad = true;
        out->parents = {a.node()};
        auto an = a.node();
        auto w_copy = w;
        out->backward_fn = [an, w_copy](TensorNode& self) {
            ensure_grad(*an);
            for (size_t i = 0; i < w_copy.size(); ++i) an->grad[i] += self.grad[0] * w_copy[i];
        };
    }
    return Tensor(std::move(out));
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) fail("grad_check: h must be positive");
    std::vector<double> base(x.data(), x.data() + x.numel());

    Tensor x0 = Tensor::from_vector(x.shape(), base, true);
    Tensor y = f(x0);
    if (y.numel() != 1) fail("grad_check: f must return a scalar");
    if (!std::isfinite(y.item())) fail("grad_check: non-finite f(x)");
    y.backward();
    std::vector<double> analytic = x0.grad();
    if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), 0.0);

    auto eval = [&](const std::vector<double>& data) {
        Tensor probe = Tensor::from_vector(x.shape(), data, false);
        Tensor out = f(probe);
        if (out.numel() != 1) fail("grad_check: f must return a scalar");
        return out.item();
    };

    double worst = 0.0;
    std::vector<double> bumped = base;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        bumped[i] = base[i] + h;
        const double fp = eval(bumped);
        bumped[i] = base[i] - h;
        const double fm = eval(bumped);
        bumped[i] = base[i];
        const double central = (fp - fm) / (2.0 * h);
        const double rel =
            std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

// ---- parameters / optimizer ----------------------------------------------------

std::int64_t ParamSet::add(const std::string& name, const Shape& shape) {
    if (index_of(name) >= 0) fail("param set: duplicate name '" + name + "'");
    names.push_back(name);
    shapes.push_back(shape);
    values.emplace_back(static_cast<size_t>(shape_numel(shape)), 0.0);
    return count() - 1;
}

std::int64_t ParamSet::index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<std::int64_t>(i);
    return -1;
}

std::int64_t ParamSet::total_size() const {
    std::int64_t n = 0;
    for (const auto& v : values) n += static_cast<std::int64_t>(v.size());
    return n;
}

std::vector<std::vector<double>> ParamSet::zeros_like() const {
    std::vector<std::vector<double>> g;
    g.reserve(values.size());
    for (const auto& v : values) g.emplace_back(v.size(), 0.0);
    return g;
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (double& v : g) v *= s;
    }
    return norm;
}

void adamw_step(ParamSet& params, const std::vector<std::vector<double>>& grads, AdamState& state,
                const AdamHyper& hyper) {
    if (grads.size() != params.values.size()) fail("adamw_step: gradient/parameter count mismatch");
    if (state.m.empty()) {
        state.m = params.zeros_like();
        state.v = params.zeros_like();
    }
    state.step += 1;
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.values.size(); ++p) {
        auto& w = params.values[p];
        const auto& g = grads[p];
        if (g.size() != w.size())
            fail("adamw_step: gradient shape mismatch for parameter '" + params.names[p] + "'");
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (size_t i = 0; i < w.size(); ++i) {
            if (!std::isfinite(g[i]))
                fail("adamw_step: non-finite gradient in parameter '" + params.names[p] + "'");
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] -= hyper.lr * (mhat / (std::sqrt(vhat) + hyper.eps) + hyper.weight_decay * w[i]);
        }
    }
}

}  // namespace actlab
