#include "dn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dn {

namespace {

thread_local Tape* g_tape = nullptr;
bool g_finite_checks = true;

bool recording() { return g_tape != nullptr; }

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void check_finite(const Tensor& t, const char* op) {
    if (!g_finite_checks) return;
    const real* p = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            fail(std::string(op) + ": non-finite value in forward output");
        }
    }
}

bool parallel_ok(std::int64_t work) {
#ifdef _OPENMP
    return work > 32768 && !omp_in_parallel();
#else
    (void)work;
    return false;
#endif
}

// C[M×N] = A[M×K]·B[K×N]. Row-partitioned: each output row is produced by one
// thread with a fixed accumulation order, so results do not depend on the
// thread count.
void mm(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    const bool par = parallel_ok(m * n * k);
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < m; ++i) {
        real* ci = c + i * n;
        std::fill(ci, ci + n, 0.0);
        const real* ai = a + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const real av = ai[kk];
            if (av == 0.0) continue;
            const real* bk = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// dA[M×K] += dC[M×N]·Bᵀ
void mm_grad_a(const real* dc, const real* b, real* da, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    const bool par = parallel_ok(m * n * k);
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < m; ++i) {
        const real* dci = dc + i * n;
        real* dai = da + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const real* bk = b + kk * n;
            real acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += dci[j] * bk[j];
            dai[kk] += acc;
        }
    }
}

// dB[K×N] += Aᵀ·dC
void mm_grad_b(const real* a, const real* dc, real* db, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    const bool par = parallel_ok(m * n * k);
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t kk = 0; kk < k; ++kk) {
        real* dbk = db + kk * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const real av = a[i * k + kk];
            if (av == 0.0) continue;
            const real* dci = dc + i * n;
            for (std::int64_t j = 0; j < n; ++j) dbk[j] += av * dci[j];
        }
    }
}

std::shared_ptr<TensorImpl> make_impl(std::vector<std::int64_t> shape) {
    auto p = std::make_shared<TensorImpl>();
    p->shape = std::move(shape);
    p->data.assign(static_cast<std::size_t>(numel_of(p->shape)), 0.0);
    return p;
}

}  // namespace

void TensorImpl::accum_grad(const real* g, std::int64_t n) {
    ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
}

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape& t) : prev_(g_tape) { g_tape = &t; }
TapeScope::~TapeScope() { g_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = prev_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

void Tape::backward(const Tensor& loss, real seed) {
    check(loss.numel() == 1, "backward: loss must be a scalar tensor");
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();  // single-use
}

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    auto p = make_impl(std::move(shape));
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, real value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<real> data,
                         bool requires_grad) {
    check(numel_of(shape) == static_cast<std::int64_t>(data.size()),
          "from_data: shape " + shape_str(shape) + " does not match data length");
    auto p = std::make_shared<TensorImpl>();
    p->shape = std::move(shape);
    p->data = std::move(data);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::scalar(real value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<std::int64_t> shape, Rng& rng, real stddev, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = rng.normal() * stddev;
    return t;
}

Tensor Tensor::rand_uniform(std::vector<std::int64_t> shape, Rng& rng, real lo, real hi,
                            bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

real Tensor::item() const {
    check(numel() == 1, "item: tensor is not scalar");
    return p_->data[0];
}

Tensor Tensor::detach() const {
    return from_data(p_->shape, p_->data, false);
}

Tensor Tensor::clone_leaf() const {
    auto t = from_data(p_->shape, p_->data, true);
    return t;
}

void Tensor::assert_finite(const std::string& what) const {
    for (real v : p_->data) {
        if (!std::isfinite(v)) fail(what + ": non-finite value");
    }
}

// ---- op helpers --------------------------------------------------------------

namespace {

Tensor finish(std::shared_ptr<TensorImpl> out, bool grad_needed, std::function<void()> bwd,
              const char* op) {
    Tensor t(std::move(out));
    check_finite(t, op);
    if (grad_needed && recording()) {
        t.set_requires_grad(true);
        g_tape->push(std::move(bwd));
    }
    return t;
}

bool needs_grad(const Tensor& a) { return recording() && a.requires_grad(); }
bool needs_grad(const Tensor& a, const Tensor& b) {
    return recording() && (a.requires_grad() || b.requires_grad());
}

}  // namespace

// ---- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank-2");
    check(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_impl({m, n});
    mm(a.data(), b.data(), out->data.data(), m, k, n);

    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a, b),
        [ai, bi, oi, m, k, n]() {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                mm_grad_a(oi->grad.data(), bi->data.data(), ai->grad.data(), m, k, n);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                mm_grad_b(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
            }
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose: rank-2 required");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    auto out = make_impl({n, m});
    const real* src = a.data();
    real* dst = out->data.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];

    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, m, n]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    ai->grad[static_cast<std::size_t>(i * n + j)] += oi->grad[static_cast<std::size_t>(j * m + i)];
        },
        "transpose");
}

namespace {

Tensor ew_binary(const Tensor& a, const Tensor& b, const char* op,
                 void (*fwd)(const real*, const real*, real*, std::int64_t),
                 void (*bwd_a)(const real*, const real*, const real*, real*, std::int64_t),
                 void (*bwd_b)(const real*, const real*, const real*, real*, std::int64_t)) {
    check(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    fwd(a.data(), b.data(), out->data.data(), n);
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a, b),
        [ai, bi, oi, n, bwd_a, bwd_b]() {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                bwd_a(oi->grad.data(), ai->data.data(), bi->data.data(), ai->grad.data(), n);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                bwd_b(oi->grad.data(), ai->data.data(), bi->data.data(), bi->grad.data(), n);
            }
        },
        op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "add",
        [](const real* x, const real* y, real* o, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
        },
        [](const real* g, const real*, const real*, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] += g[i];
        },
        [](const real* g, const real*, const real*, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] += g[i];
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "sub",
        [](const real* x, const real* y, real* o, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
        },
        [](const real* g, const real*, const real*, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] += g[i];
        },
        [](const real* g, const real*, const real*, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] -= g[i];
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, "mul",
        [](const real* x, const real* y, real* o, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
        },
        [](const real* g, const real*, const real* y, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] += g[i] * y[i];
        },
        [](const real* g, const real* x, const real*, real* d, std::int64_t n) {
            for (std::int64_t i = 0; i < n; ++i) d[i] += g[i] * x[i];
        });
}

Tensor scale(const Tensor& a, real c) {
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = x[i] * c;
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n, c]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) ai->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)] * c;
        },
        "scale");
}

Tensor add_scalar(const Tensor& a, real c) {
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = x[i] + c;
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->accum_grad(oi->grad.data(), n);
        },
        "add_scalar");
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    check(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
          "add_rowvec: want [MxN] + [N]");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    auto out = make_impl(x.shape());
    const real* xd = x.data();
    const real* bd = bias.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out->data[static_cast<std::size_t>(i * n + j)] = xd[i * n + j] + bd[j];
    auto xi = x.impl_ptr(), bi = bias.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x, bias),
        [xi, bi, oi, m, n]() {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) xi->accum_grad(oi->grad.data(), m * n);
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) bi->grad[static_cast<std::size_t>(j)] += oi->grad[static_cast<std::size_t>(i * n + j)];
            }
        },
        "add_rowvec");
}

Tensor mul_rowvec(const Tensor& x, const Tensor& s) {
    check(x.rank() == 2 && s.rank() == 1 && s.dim(0) == x.dim(1), "mul_rowvec: want [MxN] ⊙ [N]");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    auto out = make_impl(x.shape());
    const real* xd = x.data();
    const real* sd = s.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out->data[static_cast<std::size_t>(i * n + j)] = xd[i * n + j] * sd[j];
    auto xi = x.impl_ptr(), si = s.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x, s),
        [xi, si, oi, m, n]() {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        xi->grad[static_cast<std::size_t>(i * n + j)] += oi->grad[static_cast<std::size_t>(i * n + j)] * si->data[static_cast<std::size_t>(j)];
            }
            if (si->requires_grad) {
                si->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        si->grad[static_cast<std::size_t>(j)] += oi->grad[static_cast<std::size_t>(i * n + j)] * xi->data[static_cast<std::size_t>(i * n + j)];
            }
        },
        "mul_rowvec");
}

Tensor exp_op(const Tensor& a) {
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = std::exp(x[i]);
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) ai->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)] * oi->data[static_cast<std::size_t>(i)];
        },
        "exp");
}

Tensor clamp(const Tensor& a, real lo, real hi) {
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = std::min(hi, std::max(lo, x[i]));
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n, lo, hi]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const real v = ai->data[static_cast<std::size_t>(i)];
                if (v > lo && v < hi) ai->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)];
            }
        },
        "clamp");
}

Tensor relu(const Tensor& a) {
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = x[i] > 0 ? x[i] : 0;
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                if (ai->data[static_cast<std::size_t>(i)] > 0) ai->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)];
        },
        "relu");
}

Tensor gelu(const Tensor& a) {
    // Exact form: x·Φ(x).
    const std::int64_t n = a.numel();
    auto out = make_impl(a.shape());
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const real cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
        out->data[static_cast<std::size_t>(i)] = x[i] * cdf;
    }
    auto ai = a.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a),
        [ai, oi, n]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            constexpr real inv_sqrt_2pi = 0.3989422804014327;
            for (std::int64_t i = 0; i < n; ++i) {
                const real v = ai->data[static_cast<std::size_t>(i)];
                const real cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                const real pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                ai->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)] * (cdf + v * pdf);
            }
        },
        "gelu");
}

namespace {

void softmax_rows(const real* x, real* o, std::int64_t m, std::int64_t n, bool log_form) {
    for (std::int64_t i = 0; i < m; ++i) {
        const real* xi = x + i * n;
        real* oi = o + i * n;
        real mx = xi[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        real z = 0;
        for (std::int64_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
        if (log_form) {
            const real lz = std::log(z);
            for (std::int64_t j = 0; j < n; ++j) oi[j] = xi[j] - mx - lz;
        } else {
            for (std::int64_t j = 0; j < n; ++j) oi[j] = std::exp(xi[j] - mx) / z;
        }
    }
}

void rows_of(const Tensor& x, std::int64_t& m, std::int64_t& n) {
    check(x.rank() == 1 || x.rank() == 2, "softmax: rank-1 or rank-2 required");
    if (x.rank() == 1) {
        m = 1;
        n = x.dim(0);
    } else {
        m = x.dim(0);
        n = x.dim(1);
    }
}

}  // namespace

Tensor softmax(const Tensor& x) {
    std::int64_t m, n;
    rows_of(x, m, n);
    auto out = make_impl(x.shape());
    softmax_rows(x.data(), out->data.data(), m, n, false);
    auto xi = x.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x),
        [xi, oi, m, n]() {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const real* y = oi->data.data() + i * n;
                const real* gy = oi->grad.data() + i * n;
                real dot = 0;
                for (std::int64_t j = 0; j < n; ++j) dot += y[j] * gy[j];
                real* gx = xi->grad.data() + i * n;
                for (std::int64_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        },
        "softmax");
}

Tensor log_softmax(const Tensor& x) {
    std::int64_t m, n;
    rows_of(x, m, n);
    auto out = make_impl(x.shape());
    softmax_rows(x.data(), out->data.data(), m, n, true);
    auto xi = x.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x),
        [xi, oi, m, n]() {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const real* y = oi->data.data() + i * n;
                const real* gy = oi->grad.data() + i * n;
                real gsum = 0;
                for (std::int64_t j = 0; j < n; ++j) gsum += gy[j];
                real* gx = xi->grad.data() + i * n;
                for (std::int64_t j = 0; j < n; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
            }
        },
        "log_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
    check(x.rank() == 2, "layer_norm: rank-2 required");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    check(gamma.rank() == 1 && gamma.dim(0) == n && beta.rank() == 1 && beta.dim(0) == n,
          "layer_norm: gamma/beta must be [N]");
    auto out = make_impl(x.shape());
    std::vector<real> mu(static_cast<std::size_t>(m)), rstd(static_cast<std::size_t>(m));
    const real* xd = x.data();
    const real* g = gamma.data();
    const real* b = beta.data();
    for (std::int64_t i = 0; i < m; ++i) {
        const real* xi = xd + i * n;
        real s = 0;
        for (std::int64_t j = 0; j < n; ++j) s += xi[j];
        const real mean_i = s / static_cast<real>(n);
        real var = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            const real d = xi[j] - mean_i;
            var += d * d;
        }
        var /= static_cast<real>(n);
        const real r = 1.0 / std::sqrt(var + eps);
        mu[static_cast<std::size_t>(i)] = mean_i;
        rstd[static_cast<std::size_t>(i)] = r;
        real* oi = out->data.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) oi[j] = (xi[j] - mean_i) * r * g[j] + b[j];
    }
    auto xi_p = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), oi = out;
    const bool ng = recording() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    return finish(
        out, ng,
        [xi_p, gi, bi, oi, m, n, mu, rstd]() {
            if (oi->grad.empty()) return;
            for (std::int64_t i = 0; i < m; ++i) {
                const real* xrow = xi_p->data.data() + i * n;
                const real* grow = oi->grad.data() + i * n;
                const real r = rstd[static_cast<std::size_t>(i)];
                const real mean_i = mu[static_cast<std::size_t>(i)];
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (std::int64_t j = 0; j < n; ++j)
                        gi->grad[static_cast<std::size_t>(j)] += grow[j] * (xrow[j] - mean_i) * r;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (std::int64_t j = 0; j < n; ++j) bi->grad[static_cast<std::size_t>(j)] += grow[j];
                }
                if (xi_p->requires_grad) {
                    xi_p->ensure_grad();
                    // dx = r·(gy·γ − mean(gy·γ) − x̂·mean(gy·γ·x̂))
                    real s1 = 0, s2 = 0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const real gg = grow[j] * gi->data[static_cast<std::size_t>(j)];
                        const real xh = (xrow[j] - mean_i) * r;
                        s1 += gg;
                        s2 += gg * xh;
                    }
                    s1 /= static_cast<real>(n);
                    s2 /= static_cast<real>(n);
                    real* gx = xi_p->grad.data() + i * n;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const real gg = grow[j] * gi->data[static_cast<std::size_t>(j)];
                        const real xh = (xrow[j] - mean_i) * r;
                        gx[j] += r * (gg - s1 - xh * s2);
                    }
                }
            }
        },
        "layer_norm");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<bool>& include_mask, real label_smoothing) {
    check(logits.rank() == 2, "cross_entropy: logits must be [MxV]");
    const std::int64_t m = logits.dim(0), v = logits.dim(1);
    check(static_cast<std::int64_t>(targets.size()) == m,
          "cross_entropy: targets length does not match logits rows");
    check(label_smoothing >= 0.0 && label_smoothing < 1.0, "cross_entropy: smoothing must be in [0,1)");
    check(include_mask.empty() || static_cast<std::int64_t>(include_mask.size()) == m,
          "cross_entropy: mask length mismatch");
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < m; ++i) {
        if (!include_mask.empty() && !include_mask[static_cast<std::size_t>(i)]) continue;
        check(targets[static_cast<std::size_t>(i)] >= 0 && targets[static_cast<std::size_t>(i)] < v,
              "cross_entropy: target id out of range");
        ++count;
    }
    check(count > 0, "cross_entropy: mask selects no positions");

    // log-softmax rows, then mean smoothed NLL over selected rows
    std::vector<real> lsm(static_cast<std::size_t>(m * v));
    softmax_rows(logits.data(), lsm.data(), m, v, true);
    const real s = label_smoothing;
    const real w_target = 1.0 - s;
    const real w_all = s / static_cast<real>(v);
    real loss = 0;
    for (std::int64_t i = 0; i < m; ++i) {
        if (!include_mask.empty() && !include_mask[static_cast<std::size_t>(i)]) continue;
        const real* row = lsm.data() + i * v;
        real nll = -w_target * row[targets[static_cast<std::size_t>(i)]];
        if (s > 0) {
            real tot = 0;
            for (std::int64_t j = 0; j < v; ++j) tot += row[j];
            nll -= w_all * tot;
        }
        loss += nll;
    }
    loss /= static_cast<real>(count);

    auto out = make_impl({1});
    out->data[0] = loss;
    auto li = logits.impl_ptr(), oi = out;
    auto mask = include_mask;
    auto tg = targets;
    return finish(
        out, needs_grad(logits),
        [li, oi, m, v, mask, tg, lsm, w_target, w_all, count]() {
            if (oi->grad.empty() || !li->requires_grad) return;
            li->ensure_grad();
            const real g = oi->grad[0] / static_cast<real>(count);
            for (std::int64_t i = 0; i < m; ++i) {
                if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
                const real* row = lsm.data() + i * v;
                real* gx = li->grad.data() + i * v;
                const std::int64_t t = tg[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < v; ++j) {
                    const real q = (j == t ? w_target : 0.0) + w_all;
                    gx[j] += g * (std::exp(row[j]) - q);
                }
            }
        },
        "cross_entropy");
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t n = a.numel();
    real loss = 0;
    const real* x = a.data();
    const real* y = b.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const real d = x[i] - y[i];
        loss += d * d;
    }
    loss /= static_cast<real>(n);
    auto out = make_impl({1});
    out->data[0] = loss;
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(a, b),
        [ai, bi, oi, n]() {
            if (oi->grad.empty()) return;
            const real g = oi->grad[0] * 2.0 / static_cast<real>(n);
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    ai->grad[static_cast<std::size_t>(i)] += g * (ai->data[static_cast<std::size_t>(i)] - bi->data[static_cast<std::size_t>(i)]);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    bi->grad[static_cast<std::size_t>(i)] += g * (bi->data[static_cast<std::size_t>(i)] - ai->data[static_cast<std::size_t>(i)]);
            }
        },
        "mse");
}

namespace {

Tensor reduce(const Tensor& a, bool take_mean) {
    const std::int64_t n = a.numel();
    real s = 0;
    const real* x = a.data();
    for (std::int64_t i = 0; i < n; ++i) s += x[i];
    if (take_mean) s /= static_cast<real>(n);
    auto out = make_impl({1});
    out->data[0] = s;
    auto ai = a.impl_ptr(), oi = out;
    const real w = take_mean ? 1.0 / static_cast<real>(n) : 1.0;
    return finish(
        out, needs_grad(a),
        [ai, oi, n, w]() {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            const real g = oi->grad[0] * w;
            for (std::int64_t i = 0; i < n; ++i) ai->grad[static_cast<std::size_t>(i)] += g;
        },
        take_mean ? "mean" : "sum");
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce(a, false); }
Tensor mean(const Tensor& a) { return reduce(a, true); }

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    check(table.rank() == 2, "embedding: table must be [VxD]");
    const std::int64_t v = table.dim(0), d = table.dim(1);
    const std::int64_t m = static_cast<std::int64_t>(ids.size());
    auto out = make_impl({m, d});
    const real* td = table.data();
    for (std::int64_t i = 0; i < m; ++i) {
        check(ids[static_cast<std::size_t>(i)] >= 0 && ids[static_cast<std::size_t>(i)] < v, "embedding: id out of range");
        std::memcpy(out->data.data() + i * d, td + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * d,
                    sizeof(real) * static_cast<std::size_t>(d));
    }
    auto ti = table.impl_ptr(), oi = out;
    auto ids_copy = ids;
    return finish(
        out, needs_grad(table),
        [ti, oi, m, d, ids_copy]() {
            if (oi->grad.empty() || !ti->requires_grad) return;
            ti->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                real* dst = ti->grad.data() + static_cast<std::int64_t>(ids_copy[static_cast<std::size_t>(i)]) * d;
                const real* src = oi->grad.data() + i * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        },
        "embedding");
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int kernel, int stride,
              int dilation, int pad) {
    check(x.rank() == 2, "conv1d: input must be [MxCin]");
    check(w.rank() == 2, "conv1d: weight must be [Cout x Cin*k]");
    check(stride >= 1 && dilation >= 1 && pad >= 0 && kernel >= 1, "conv1d: bad hyperparameters");
    const std::int64_t m = x.dim(0), cin = x.dim(1);
    const std::int64_t cout = w.dim(0);
    check(w.dim(1) == cin * kernel, "conv1d: weight inner dim must be Cin*k");
    check(bias.rank() == 1 && bias.dim(0) == cout, "conv1d: bias must be [Cout]");
    const std::int64_t span = static_cast<std::int64_t>(dilation) * (kernel - 1) + 1;
    const std::int64_t mo = (m + 2 * static_cast<std::int64_t>(pad) - span) / stride + 1;
    check(mo >= 1, "conv1d: output would be empty");

    auto out = make_impl({mo, cout});
    const real* xd = x.data();
    const real* wd = w.data();
    const real* bd = bias.data();
    const bool par = parallel_ok(mo * cout * cin * kernel);
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t om = 0; om < mo; ++om) {
        real* orow = out->data.data() + om * cout;
        for (std::int64_t oc = 0; oc < cout; ++oc) orow[oc] = bd[oc];
        for (int j = 0; j < kernel; ++j) {
            const std::int64_t im = om * stride + static_cast<std::int64_t>(j) * dilation - pad;
            if (im < 0 || im >= m) continue;
            const real* xrow = xd + im * cin;
            for (std::int64_t oc = 0; oc < cout; ++oc) {
                const real* wrow = wd + oc * cin * kernel + static_cast<std::int64_t>(j) * cin;
                real acc = 0;
                for (std::int64_t ic = 0; ic < cin; ++ic) acc += wrow[ic] * xrow[ic];
                orow[oc] += acc;
            }
        }
    }

    auto xi = x.impl_ptr(), wi = w.impl_ptr(), bi = bias.impl_ptr(), oi = out;
    const bool ng = recording() && (x.requires_grad() || w.requires_grad() || bias.requires_grad());
    return finish(
        out, ng,
        [xi, wi, bi, oi, m, cin, cout, mo, kernel, stride, dilation, pad]() {
            if (oi->grad.empty()) return;
            const real* gy = oi->grad.data();
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::int64_t om = 0; om < mo; ++om)
                    for (std::int64_t oc = 0; oc < cout; ++oc) bi->grad[static_cast<std::size_t>(oc)] += gy[om * cout + oc];
            }
            if (wi->requires_grad) wi->ensure_grad();
            if (xi->requires_grad) xi->ensure_grad();
            for (std::int64_t om = 0; om < mo; ++om) {
                const real* grow = gy + om * cout;
                for (int j = 0; j < kernel; ++j) {
                    const std::int64_t im = om * stride + static_cast<std::int64_t>(j) * dilation - pad;
                    if (im < 0 || im >= m) continue;
                    const real* xrow = xi->data.data() + im * cin;
                    for (std::int64_t oc = 0; oc < cout; ++oc) {
                        const real g = grow[oc];
                        if (g == 0.0) continue;
                        const std::int64_t woff = oc * cin * kernel + static_cast<std::int64_t>(j) * cin;
                        if (wi->requires_grad) {
                            real* wg = wi->grad.data() + woff;
                            for (std::int64_t ic = 0; ic < cin; ++ic) wg[ic] += g * xrow[ic];
                        }
                        if (xi->requires_grad) {
                            const real* wrow = wi->data.data() + woff;
                            real* xg = xi->grad.data() + im * cin;
                            for (std::int64_t ic = 0; ic < cin; ++ic) xg[ic] += g * wrow[ic];
                        }
                    }
                }
            }
        },
        "conv1d");
}

Tensor mean_pool_rows(const Tensor& x) {
    check(x.rank() == 2, "mean_pool_rows: rank-2 required");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    auto out = make_impl({1, n});
    const real* xd = x.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out->data[static_cast<std::size_t>(j)] += xd[i * n + j];
    for (std::int64_t j = 0; j < n; ++j) out->data[static_cast<std::size_t>(j)] /= static_cast<real>(m);
    auto xi = x.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x),
        [xi, oi, m, n]() {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    xi->grad[static_cast<std::size_t>(i * n + j)] += oi->grad[static_cast<std::size_t>(j)] / static_cast<real>(m);
        },
        "mean_pool_rows");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols: no inputs");
    const std::int64_t m = parts[0].dim(0);
    std::int64_t total = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        check(p.rank() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
        total += p.dim(1);
        any_grad = any_grad || p.requires_grad();
    }
    auto out = make_impl({m, total});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t n = p.dim(1);
        for (std::int64_t i = 0; i < m; ++i)
            std::memcpy(out->data.data() + i * total + off, p.data() + i * n, sizeof(real) * static_cast<std::size_t>(n));
        off += n;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl_ptr());
    auto oi = out;
    return finish(
        out, recording() && any_grad,
        [impls, oi, m, total]() {
            if (oi->grad.empty()) return;
            std::int64_t off2 = 0;
            for (auto& pi : impls) {
                const std::int64_t n = pi->shape[1];
                if (pi->requires_grad) {
                    pi->ensure_grad();
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j)
                            pi->grad[static_cast<std::size_t>(i * n + j)] += oi->grad[static_cast<std::size_t>(i * total + off2 + j)];
                }
                off2 += n;
            }
        },
        "concat_cols");
}

Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    check(x.rank() == 2 && c0 >= 0 && c1 <= x.dim(1) && c0 < c1, "slice_cols: bad range");
    const std::int64_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    auto out = make_impl({m, w});
    const real* xd = x.data();
    for (std::int64_t i = 0; i < m; ++i)
        std::memcpy(out->data.data() + i * w, xd + i * n + c0, sizeof(real) * static_cast<std::size_t>(w));
    auto xi = x.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x),
        [xi, oi, m, n, w, c0]() {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < w; ++j)
                    xi->grad[static_cast<std::size_t>(i * n + c0 + j)] += oi->grad[static_cast<std::size_t>(i * w + j)];
        },
        "slice_cols");
}

Tensor dropout(const Tensor& x, real p, Rng& rng, bool training) {
    check(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    const std::int64_t n = x.numel();
    auto keep = std::make_shared<std::vector<real>>(static_cast<std::size_t>(n));
    const real inv = 1.0 / (1.0 - p);
    auto out = make_impl(x.shape());
    const real* xd = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const real k = rng.uniform() < p ? 0.0 : inv;
        (*keep)[static_cast<std::size_t>(i)] = k;
        out->data[static_cast<std::size_t>(i)] = xd[i] * k;
    }
    auto xi = x.impl_ptr(), oi = out;
    return finish(
        out, needs_grad(x),
        [xi, oi, keep, n]() {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                xi->grad[static_cast<std::size_t>(i)] += oi->grad[static_cast<std::size_t>(i)] * (*keep)[static_cast<std::size_t>(i)];
        },
        "dropout");
}

Tensor sinusoidal_positions(std::int64_t m, std::int64_t dim, std::int64_t offset) {
    check(dim % 2 == 0, "sinusoidal_positions: dim must be even");
    auto out = make_impl({m, dim});
    const std::int64_t half = dim / 2;
    for (std::int64_t pos = 0; pos < m; ++pos) {
        real* row = out->data.data() + pos * dim;
        for (std::int64_t i = 0; i < half; ++i) {
            const real freq = std::exp(-std::log(10000.0) * static_cast<real>(i) / static_cast<real>(half));
            const real angle = static_cast<real>(pos + offset) * freq;
            row[2 * i] = std::sin(angle);
            row[2 * i + 1] = std::cos(angle);
        }
    }
    return Tensor(out);
}

// ---- parameters and optimizer ------------------------------------------------

Tensor ParamStore::add(const std::string& name, std::vector<std::int64_t> shape) {
    for (const auto& n : names) check(n != name, "ParamStore: duplicate parameter name " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    params.push_back(t);
    names.push_back(name);
    return t;
}

Tensor* ParamStore::find(const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return &params[i];
    return nullptr;
}

void ParamStore::ensure_grads() {
    for (auto& p : params) p.impl()->ensure_grad();
}

void ParamStore::zero_grads() {
    for (auto& p : params) p.zero_grad();
}

std::int64_t ParamStore::total_params() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

real ParamStore::grad_norm() const {
    real s = 0;
    for (const auto& p : params)
        for (real g : p.grad()) s += g * g;
    return std::sqrt(s);
}

real Adam::lr_at(std::int64_t step) const {
    if (cfg_.warmup_steps <= 0) return cfg_.lr;
    const real t = static_cast<real>(step);
    const real w = static_cast<real>(cfg_.warmup_steps);
    if (cfg_.inv_sqrt_decay) return cfg_.lr * std::min(t / w, std::sqrt(w / t));
    return cfg_.lr * std::min(1.0, t / w);
}

void Adam::step(ParamStore& store) {
    auto& params = store.params;
    check(!params.empty(), "optimizer: no parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
        check(params[i].has_grad(), "optimizer: missing grads for parameter " + store.names[i]);
    if (m_.empty()) {
        for (auto& p : params) {
            m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        }
    }
    ++step_;

    // global-norm clip first
    if (cfg_.clip_norm > 0) {
        const real norm = store.grad_norm();
        if (norm > cfg_.clip_norm) {
            const real s = cfg_.clip_norm / norm;
            for (auto& p : params)
                for (auto& g : p.grad_mut()) g *= s;
        }
    }

    const real lr = lr_at(step_);
    const real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(step_));
    const real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(step_));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        real* w = p.data();
        const auto& g = p.grad();
        auto& m = m_[pi];
        auto& v = v_[pi];
        const std::int64_t n = p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const real gi = g[static_cast<std::size_t>(i)];
            m[static_cast<std::size_t>(i)] = cfg_.beta1 * m[static_cast<std::size_t>(i)] + (1 - cfg_.beta1) * gi;
            v[static_cast<std::size_t>(i)] = cfg_.beta2 * v[static_cast<std::size_t>(i)] + (1 - cfg_.beta2) * gi * gi;
            const real mh = m[static_cast<std::size_t>(i)] / bc1;
            const real vh = v[static_cast<std::size_t>(i)] / bc2;
            w[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
    store.zero_grads();
}

}  // namespace dn
