#pragma once

#include <cmath>

#include "moalign/config.hpp"
#include "moalign/tensor.hpp"

namespace moalign {

/// Plain-vector cosine distance 1 - u·v / (|u||v|), range [0, 2].
inline double cosine_distance_value(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size()) throw ShapeError("cosine_distance: length mismatch");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    if (nu < 1e-12 || nv < 1e-12) throw NumericError("cosine_distance: zero-norm vector");
    return 1.0 - dot / (nu * nv);
}

/// Graph version for training: 1 - u·v / (|u||v|) as a 1×1 tensor.
inline Tensor cosine_distance(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) throw ShapeError("cosine_distance: length mismatch");
    Tensor dot = sum_all(mul(u, v));
    Tensor nu = elem_sqrt(sum_all(mul(u, u)));
    Tensor nv = elem_sqrt(sum_all(mul(v, v)));
    if (nu.at(0) < 1e-12 || nv.at(0) < 1e-12) throw NumericError("cosine_distance: zero-norm vector");
    return add_scalar(scale(div(dot, mul(nu, nv)), -1.0), 1.0);
}

/// Aligned-entity similarity loss over one seed pair and its negatives:
/// sim(e, e') - sim(e, ē') - sim(ē, e') with sim = cosine distance.
inline Tensor loss_ea(const Tensor& e, const Tensor& e_prime, const Tensor& e_neg, const Tensor& e_prime_neg) {
    return sub(sub(cosine_distance(e, e_prime), cosine_distance(e, e_prime_neg)),
               cosine_distance(e_neg, e_prime));
}

/// Same three-term form over the CLS context representations.
inline Tensor loss_con(const Tensor& o, const Tensor& o_prime, const Tensor& o_neg, const Tensor& o_prime_neg) {
    return sub(sub(cosine_distance(o, o_prime), cosine_distance(o, o_prime_neg)),
               cosine_distance(o_neg, o_prime));
}

inline double total_loss(double l_ea, double l_con, const LossWeights& w) {
    if (!std::isfinite(l_ea) || !std::isfinite(l_con)) throw NumericError("total_loss: non-finite input");
    return w.alpha * l_ea + w.beta * l_con;
}

/// Graph form; alpha/beta may be trainable 1×1 tensors (--learn-loss-weights).
inline Tensor total_loss(const Tensor& l_ea, const Tensor& l_con, const Tensor& alpha, const Tensor& beta) {
    return add(mul(alpha, l_ea), mul(beta, l_con));
}

}  // namespace moalign
