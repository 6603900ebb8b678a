#pragma once

// Minimal dense f64 tensor library with reverse-mode autodiff. Tensors are
// cheap handles onto shared graph nodes; ops build the tape, backward() walks
// it in reverse topological order. Everything is row-major, everything is
// double, and every reduction runs in a fixed order so results are
// reproducible bit for bit.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "actlab/rng.hpp"

namespace actlab {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::int64_t numel = 0;
    std::vector<double> storage;  // empty when viewing external memory
    double* data = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily during backward
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_vector(const Shape& shape, std::vector<double> data,
                              bool requires_grad = false);
    // Borrowed leaf over externally owned memory (model parameters).
    static Tensor view(const Shape& shape, double* external, bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel; }
    std::int64_t rows() const;  // 1-D counts as a single row
    std::int64_t cols() const;
    double* data() { return node_->data; }
    const double* data() const { return node_->data; }
    double item() const;
    double at(std::int64_t r, std::int64_t c) const { return node_->data[r * cols() + c]; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad();

    // Reverse-mode sweep from a scalar root; accumulates into leaf grads.
    void backward();

    std::shared_ptr<TensorNode> node() const { return node_; }

  private:
    std::shared_ptr<TensorNode> node_;
};

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // [k,m]^T x [k,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);  // x[m,n] + bias[n] per row
Tensor mul_row_broadcast(const Tensor& x, const Tensor& gain);  // x[m,n] * gain[n] per row
Tensor hconcat(const Tensor& a, const Tensor& b);
Tensor vconcat(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1);
Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1);

// Row softmax; -inf entries give exactly 0, an all--inf row is an error.
Tensor softmax_rows(const Tensor& x);

enum class NormKind { layernorm, rmsnorm };

struct NormParams {
    Tensor gain;            // g, length d
    Tensor bias;            // b, length d; invalid() for RMS mode
    double epsilon = 1e-5;  // guards sigma/RMS = 0
};

// Pre-gain normalization: (x-mu)/(sigma+eps) or x/(RMS+eps), per row.
// Population sigma. Kept separate from the affine so the trajectory capture
// can see the "normalized" stage.
Tensor norm_raw(const Tensor& x, NormKind kind, double eps);
Tensor layer_norm(const Tensor& x, const NormParams& p);
Tensor rms_norm(const Tensor& x, const NormParams& p);

Tensor gelu(const Tensor& x);  // tanh approximation (GPT-2)

// Gathers table rows by token id; gradient scatter-adds back.
Tensor embedding_rows(const Tensor& table, const std::vector<std::int32_t>& ids);

// Mean of -log softmax(logits)[target] over positions where mask is false.
// mask[i] = true excludes position i (sink-token exclusion).
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                     const std::vector<std::uint8_t>& mask);

// Scalar projection sum_i a[i]*w[i]; the probe used by gradient checks.
Tensor weighted_sum(const Tensor& a, const std::vector<double>& w);

// Max over coordinates of |analytic - central| / (|analytic|+|central|+1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

// ---- parameters and optimizer --------------------------------------------

// Ordered, named dense buffers. The order is fixed at construction and is the
// contract for gradient reduction, clipping, optimizer updates and
// checkpoint layout.
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;

    std::int64_t add(const std::string& name, const Shape& shape);
    std::int64_t index_of(const std::string& name) const;  // -1 when absent
    std::int64_t count() const { return static_cast<std::int64_t>(names.size()); }
    std::int64_t total_size() const;
    std::vector<std::vector<double>> zeros_like() const;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t step = 0;
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

// Returns the pre-clip global norm; scales grads in place when above max_norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

// Bias-corrected AdamW with decoupled weight decay.
void adamw_step(ParamSet& params, const std::vector<std::vector<double>>& grads,
                AdamState& state, const AdamHyper& hyper);

}  // namespace actlab
