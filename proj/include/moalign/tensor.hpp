#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moalign/errors.hpp"
#include "moalign/rng.hpp"

namespace moalign {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t s : shape) n *= s;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying node, so a
/// Tensor behaves like a reference to one value in the computation graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("tensor: shape " + detail::shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        for (const std::size_t s : shape)
            if (s == 0) throw ShapeError("tensor: zero extent in shape " + detail::shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        const std::size_t n = detail::shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        const std::size_t n = detail::shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return from({1, 1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t ndim() const { return node_->shape.size(); }

    std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() == 1 ? node_->shape[0] : node_->shape[1]; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data_mut() { return node_->data; }

    double at(std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    /// Gradient view; zero-filled on first access so callers can read
    /// untouched leaves uniformly.
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of primitive applications. Constructing a Tape makes it the
/// active recorder on this thread; destruction restores the previous one.
/// Records are appended in execution order, so replaying them reversed visits
/// each node in reverse topological order exactly once.
class Tape {
public:
    Tape() : prev_(current_ref()) { current_ref() = this; }
    ~Tape() { current_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_ref(); }

    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }
    std::size_t count() const { return records_.size(); }

    /// Seeds d(output)/d(output) = 1 and replays the tape backwards.
    void backward(const Tensor& output) {
        if (output.size() != 1) throw ShapeError("backward: output must be scalar, got " + detail::shape_str(output.shape()));
        if (!std::isfinite(output.at(0))) throw NumericError("backward: non-finite output value");
        output.node()->ensure_grad();
        output.node()->grad[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        records_.clear();
    }

private:
    static Tape*& current_ref() {
        thread_local Tape* current = nullptr;
        return current;
    }

    std::vector<std::function<void()>> records_;
    Tape* prev_ = nullptr;
};

namespace detail {

inline Tensor op_result(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    t.set_requires_grad(requires_grad);
    return t;
}

inline void maybe_record(const Tensor& out, std::function<void()> fn) {
    if (out.requires_grad() && Tape::current()) Tape::current()->record(std::move(fn));
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each computes forward values eagerly and, when a Tape is active
// and the result requires grad, records a closure that accumulates input
// gradients from the output gradient.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw ShapeError("matmul: inner extents differ, " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &bd[p * n];
            double* crow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    Tensor c = detail::op_result({m, n}, std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node(), m, k, n] {
        if (cn->grad.empty()) return;
        const auto& g = cn->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            // dA = dC * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = &g[i * n];
                    const double* brow = &bn->data[p * n];
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB = A^T * dC
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = an->data[i * k + p];
                    if (av == 0.0) continue;
                    const double* grow = &g[i * n];
                    double* brow = &bn->grad[p * n];
                    for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
    return c;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
    Tensor c = detail::op_result({n, m}, std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node(), m, n] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += cn->grad[j * m + i];
    });
    return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node()] {
        if (cn->grad.empty()) return;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] += cn->grad[i];
        }
    });
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node()] {
        if (cn->grad.empty()) return;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] -= cn->grad[i];
        }
    });
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node()] {
        if (cn->grad.empty()) return;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] += cn->grad[i] * an->data[i];
        }
    });
    return c;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / b.at(i);
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node()] {
        if (cn->grad.empty()) return;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] / bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                bn->grad[i] -= cn->grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
        }
    });
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node(), s] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * s;
    });
    return c;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + s;
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node()] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
    });
    return c;
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node()] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
            if (an->data[i] > 0.0) an->grad[i] += cn->grad[i];
    });
    return c;
}

inline Tensor elem_sqrt(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.at(i));
    Tensor c = detail::op_result(a.shape(), std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node()] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * 0.5 / cn->data[i];
    });
    return c;
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    Tensor c = detail::op_result({1, 1}, {s}, a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node()] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += cn->grad[0];
    });
    return c;
}

/// Row-stabilized softmax over the last axis of a 2-D tensor.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_2d(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(x.at(i, j) - mx);
            out[i * n + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    Tensor y = detail::op_result({m, n}, std::move(out), x.requires_grad());
    detail::maybe_record(y, [xn = x.node(), yn = y.node(), m, n] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += yn->grad[i * n + j] * yn->data[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                xn->grad[i * n + j] += yn->data[i * n + j] * (yn->grad[i * n + j] - dot);
        }
    });
    return y;
}

/// Per-row normalization over the feature axis with population variance:
/// y = gain ⊙ (x − mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    detail::require_2d(x, "layer_norm");
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) throw ShapeError("layer_norm: feature axis must have extent >= 2");
    if (eps <= 0.0) throw ShapeError("layer_norm: eps must be positive");
    if (gain.size() != d || bias.size() != d)
        throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "," +
                         std::to_string(bias.size()) + " vs features " + std::to_string(d));
    std::vector<double> out(m * d), xhat(m * d), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x.at(i, j) - mean) * inv_std[i];
            out[i * d + j] = gain.at(j) * xhat[i * d + j] + bias.at(j);
        }
    }
    Tensor y = detail::op_result(x.shape(), std::move(out),
                                 x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    detail::maybe_record(y, [xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node(),
                             xhat = std::move(xhat), inv_std = std::move(inv_std), m, d] {
        if (yn->grad.empty()) return;
        const auto& g = yn->grad;
        for (std::size_t i = 0; i < m; ++i) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dxhat = g * gain; dx via the two row-wise reductions
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[i * d + j] * gn->data[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[i * d + j];
                }
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[i * d + j] * gn->data[j];
                    xn->grad[i * d + j] +=
                        inv_std[i] * (dxh - inv_d * sum_dxhat - inv_d * xhat[i * d + j] * sum_dxhat_xhat);
                }
            }
        }
        if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[i * d + j] * xhat[i * d + j];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[i * d + j];
        }
    });
    return y;
}

/// Per-row (x - mean) / max(std, 1e-6) * lambda with population std; the
/// tensor-graph form of the image-embedding standardization.
inline Tensor standardize_rows(const Tensor& x, double lambda) {
    detail::require_2d(x, "standardize_rows");
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) throw ShapeError("standardize_rows: feature axis must have extent >= 2");
    std::vector<double> out(m * d), xhat(m * d), inv_s(m);
    std::vector<std::uint8_t> floored(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double s = std::sqrt(var);
        floored[i] = s < 1e-6;
        inv_s[i] = 1.0 / std::max(s, 1e-6);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x.at(i, j) - mean) * inv_s[i];
            out[i * d + j] = xhat[i * d + j] * lambda;
        }
    }
    Tensor y = detail::op_result(x.shape(), std::move(out), x.requires_grad());
    detail::maybe_record(y, [xn = x.node(), yn = y.node(), xhat = std::move(xhat), inv_s = std::move(inv_s),
                             floored = std::move(floored), lambda, m, d] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        xn->ensure_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < m; ++i) {
            double sum_g = 0.0, sum_g_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                sum_g += yn->grad[i * d + j];
                sum_g_xhat += yn->grad[i * d + j] * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double g = yn->grad[i * d + j];
                // in the floor regime the denominator is the constant 1e-6
                const double dxhat = floored[i]
                                         ? (g - inv_d * sum_g)
                                         : (g - inv_d * sum_g - inv_d * xhat[i * d + j] * sum_g_xhat);
                xn->grad[i * d + j] += lambda * inv_s[i] * dxhat;
            }
        }
    });
    return y;
}

/// Affine map x·W + b with b broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_2d(x, "linear");
    detail::require_2d(w, "linear");
    if (x.cols() != w.rows())
        throw ShapeError("linear: input features " + detail::shape_str(x.shape()) + " vs weight " +
                         detail::shape_str(w.shape()));
    if (b.size() != w.cols())
        throw ShapeError("linear: bias length " + std::to_string(b.size()) + " vs output features " +
                         std::to_string(w.cols()));
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b.at(j);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x.at(i, p);
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * w.at(p, j);
        }
    Tensor y = detail::op_result({m, n}, std::move(out),
                                 x.requires_grad() || w.requires_grad() || b.requires_grad());
    detail::maybe_record(y, [xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node(), m, k, n] {
        if (yn->grad.empty()) return;
        const auto& g = yn->grad;
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * wn->data[p * n + j];
                    xn->grad[i * k + p] += acc;
                }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double xv = xn->data[i * k + p];
                    if (xv == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) wn->grad[p * n + j] += xv * g[i * n + j];
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[i * n + j];
        }
    });
    return y;
}

/// Inverted dropout. Training mode zeroes each element with probability p and
/// scales survivors by 1/(1-p); eval mode and p = 0 return the input handle
/// unchanged, which makes the identity exact.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ShapeError("dropout: p must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
        out[i] = x.at(i) * mask[i];
    }
    Tensor y = detail::op_result(x.shape(), std::move(out), x.requires_grad());
    detail::maybe_record(y, [xn = x.node(), yn = y.node(), mask = std::move(mask)] {
        if (yn->grad.empty() || !xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i] * mask[i];
    });
    return y;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "concat_cols");
    detail::require_2d(b, "concat_cols");
    if (a.rows() != b.rows())
        throw ShapeError("concat_cols: row mismatch " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
    std::vector<double> out(m * (na + nb));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < na; ++j) out[i * (na + nb) + j] = a.at(i, j);
        for (std::size_t j = 0; j < nb; ++j) out[i * (na + nb) + na + j] = b.at(i, j);
    }
    Tensor c = detail::op_result({m, na + nb}, std::move(out), a.requires_grad() || b.requires_grad());
    detail::maybe_record(c, [an = a.node(), bn = b.node(), cn = c.node(), m, na, nb] {
        if (cn->grad.empty()) return;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < na; ++j) an->grad[i * na + j] += cn->grad[i * (na + nb) + j];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nb; ++j) bn->grad[i * nb + j] += cn->grad[i * (na + nb) + na + j];
        }
    });
    return c;
}

/// Vertical stack; every piece must agree on column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    bool rg = false;
    for (const Tensor& t : parts) {
        detail::require_2d(t, "concat_rows");
        if (t.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += t.rows();
        rg = rg || t.requires_grad();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const Tensor& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());
    Tensor c = detail::op_result({m, n}, std::move(out), rg);
    std::vector<std::shared_ptr<detail::TensorNode>> part_nodes;
    part_nodes.reserve(parts.size());
    for (const Tensor& t : parts) part_nodes.push_back(t.node());
    detail::maybe_record(c, [part_nodes = std::move(part_nodes), cn = c.node()] {
        if (cn->grad.empty()) return;
        std::size_t off = 0;
        for (const auto& pn : part_nodes) {
            const std::size_t len = pn->data.size();
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::size_t i = 0; i < len; ++i) pn->grad[i] += cn->grad[off + i];
            }
            off += len;
        }
    });
    return c;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    detail::require_2d(a, "slice_rows");
    if (r0 >= r1 || r1 > a.rows()) throw ShapeError("slice_rows: bad range");
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(r1 * n));
    Tensor c = detail::op_result({r1 - r0, n}, std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node(), r0, n] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[r0 * n + i] += cn->grad[i];
    });
    return c;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    detail::require_2d(a, "slice_cols");
    if (c0 >= c1 || c1 > a.cols()) throw ShapeError("slice_cols: bad range");
    const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i, c0 + j);
    Tensor c = detail::op_result({m, w}, std::move(out), a.requires_grad());
    detail::maybe_record(c, [an = a.node(), cn = c.node(), m, n, c0, w] {
        if (cn->grad.empty() || !an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += cn->grad[i * w + j];
    });
    return c;
}

/// Gather table rows by index; the backward pass scatter-adds into the table,
/// which is what trains embedding tables.
inline Tensor rows_lookup(const Tensor& table, const std::vector<int>& indices) {
    detail::require_2d(table, "rows_lookup");
    if (indices.empty()) throw ShapeError("rows_lookup: empty index list");
    const std::size_t n = table.cols();
    std::vector<double> out;
    out.reserve(indices.size() * n);
    for (const int idx : indices) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= table.rows())
            throw ShapeError("rows_lookup: index " + std::to_string(idx) + " out of " + std::to_string(table.rows()));
        const auto* row = &table.data()[static_cast<std::size_t>(idx) * n];
        out.insert(out.end(), row, row + n);
    }
    Tensor c = detail::op_result({indices.size(), n}, std::move(out), table.requires_grad());
    detail::maybe_record(c, [tn = table.node(), cn = c.node(), indices, n] {
        if (cn->grad.empty() || !tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                tn->grad[static_cast<std::size_t>(indices[i]) * n + j] += cn->grad[i * n + j];
    });
    return c;
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences over x, coordinate by coordinate. Returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor()>& f, Tensor& x, double eps) {
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f();
        if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
        if (!std::isfinite(y.at(0))) throw NumericError("grad_check: non-finite f(x)");
        tape.backward(y);
        analytic = x.grad();
    }
    double max_rel = 0.0;
    auto& xs = x.data_mut();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double saved = xs[i];
        xs[i] = saved + eps;
        const double fp = f().at(0);
        xs[i] = saved - eps;
        const double fm = f().at(0);
        xs[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

}  // namespace moalign
