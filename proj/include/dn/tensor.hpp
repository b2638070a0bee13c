#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dn/common.hpp"

namespace dn {

struct TensorImpl {
    std::vector<std::int64_t> shape;
    std::vector<real> data;
    std::vector<real> grad;  // empty until first accumulation
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void accum_grad(const real* g, std::int64_t n);
};

// Value-semantic handle over a shared buffer. Ops on tensors record backward
// closures on the active Tape (if any); without a tape they are pure eval.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::int64_t> shape, real value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<real> data,
                            bool requires_grad = false);
    static Tensor scalar(real value);
    static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, real stddev = 1.0,
                        bool requires_grad = false);
    static Tensor rand_uniform(std::vector<std::int64_t> shape, Rng& rng, real lo, real hi,
                               bool requires_grad = false);

    bool defined() const { return p_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return p_->shape; }
    std::int64_t numel() const { return p_->numel(); }
    std::int64_t rank() const { return static_cast<std::int64_t>(p_->shape.size()); }
    std::int64_t dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t rows() const { return rank() == 1 ? 1 : dim(0); }
    std::int64_t cols() const { return rank() == 1 ? dim(0) : dim(static_cast<int>(rank()) - 1); }

    real* data() { return p_->data.data(); }
    const real* data() const { return p_->data.data(); }
    std::vector<real>& vec() { return p_->data; }
    const std::vector<real>& vec() const { return p_->data; }
    real item() const;
    real at(std::int64_t r, std::int64_t c) const { return p_->data[static_cast<std::size_t>(r * cols() + c)]; }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        p_->requires_grad = b;
        return *this;
    }
    bool has_grad() const { return !p_->grad.empty(); }
    const std::vector<real>& grad() const { return p_->grad; }
    std::vector<real>& grad_mut() { return p_->grad; }
    void zero_grad() {
        if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
    }
    void clear_grad() { p_->grad.clear(); }

    Tensor detach() const;  // copy of data, no graph, requires_grad=false
    Tensor clone_leaf() const;

    void assert_finite(const std::string& what) const;

    TensorImpl* impl() const { return p_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return p_; }

private:
    std::shared_ptr<TensorImpl> p_;
};

// Reverse-mode record. Single-use: backward() consumes the tape. Nodes run in
// reverse push order, which is a valid reverse topological order because ops
// append at execution time.
class Tape {
public:
    void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = seed and propagates. loss must be scalar.
    void backward(const Tensor& loss, real seed = 1.0);

private:
    std::vector<std::function<void()>> nodes_;
};

Tape* active_tape();

class TapeScope {
public:
    explicit TapeScope(Tape& t);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Suspends recording (inference / target construction).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Forward-pass finite checks (on by default; every op output is scanned and a
// NaN/Inf raises).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor add_scalar(const Tensor& a, real c);
Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // [M×N] + [N]
Tensor mul_rowvec(const Tensor& x, const Tensor& s);     // [M×N] ⊙ [N] per row

Tensor exp_op(const Tensor& a);
Tensor clamp(const Tensor& a, real lo, real hi);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor softmax(const Tensor& x);      // over last axis
Tensor log_softmax(const Tensor& x);  // over last axis, max-subtracted

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5);

// Mean NLL over positions where include_mask is true (all positions when the
// mask is empty). Smoothed target q = (1-s)·onehot + s/V.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<bool>& include_mask, real label_smoothing);

Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// x: [M×Cin] (time-major rows), w: [Cout × Cin·k], bias: [Cout].
// Output frame m reads input frames m·stride + j·dilation - pad, j in [0,k).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int kernel, int stride = 1,
              int dilation = 1, int pad = 0);

Tensor mean_pool_rows(const Tensor& x);  // [M×N] -> [1×N]

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1);

Tensor dropout(const Tensor& x, real p, Rng& rng, bool training);

// Fixed sin/cos positional table, rows [offset, offset+m).
Tensor sinusoidal_positions(std::int64_t m, std::int64_t dim, std::int64_t offset = 0);

// ---- parameters and optimizer ----------------------------------------------

struct ParamStore {
    std::vector<Tensor> params;
    std::vector<std::string> names;

    Tensor add(const std::string& name, std::vector<std::int64_t> shape);
    Tensor* find(const std::string& name);
    void ensure_grads();
    void zero_grads();
    std::int64_t total_params() const;
    // Global L2 norm over all populated grads.
    real grad_norm() const;
};

struct AdamConfig {
    real lr = 1e-3;
    real beta1 = 0.9;
    real beta2 = 0.98;
    real eps = 1e-8;
    real clip_norm = 0.0;           // 0 disables clipping
    std::int64_t warmup_steps = 0;  // 0 disables the schedule
    bool inv_sqrt_decay = false;
};

// Adam with global-norm clipping applied before the moment update.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParamStore& params);
    std::int64_t steps() const { return step_; }
    real lr_at(std::int64_t step) const;  // step is 1-based

private:
    AdamConfig cfg_;
    std::vector<std::vector<real>> m_, v_;
    std::int64_t step_ = 0;
};

}  // namespace dn
