#pragma once

#include "factorwm/tensor.hpp"

#include <cstdint>
#include <vector>

namespace fwm {

// Elementwise; operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

/// x [n,m] + bias [m], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x); // requires strictly positive input
Tensor square(const Tensor& x);
Tensor softplus(const Tensor& x);

/// Elementwise max(x, slope*x); slope must lie in (0,1).
Tensor leaky_relu(const Tensor& x, double slope);

/// a [m,k] @ b [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_cols(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor gather_rows(const Tensor& x, std::vector<std::int64_t> index);

Tensor row_sum(const Tensor& x);  // [n,m] -> [n]
Tensor sum_all(const Tensor& x);  // -> scalar
Tensor mean_all(const Tensor& x); // -> scalar

/// Max entry as a plain double (no gradient; used for log-sum-exp shifts).
double max_all(const Tensor& x);

/// Same values, no gradient flow into x.
Tensor stop_gradient(const Tensor& x);

Tensor log_softmax(const Tensor& logits); // rows of [n,k]
Tensor take_per_row(const Tensor& x, const std::vector<int>& index); // [n,k] -> [n]

/// log softmax(logits)[i, label[i]].
Tensor categorical_log_prob(const Tensor& logits, const std::vector<int>& labels);

/// Sum over the last dimension of the diagonal-Gaussian log density.
/// Shapes: [n,d] -> [n], or [d] -> scalar. sigma must be strictly positive.
Tensor gaussian_log_prob(const Tensor& x, const Tensor& mu, const Tensor& sigma);
Tensor gaussian_log_prob(const Tensor& x, const Tensor& mu, double sigma);

/// KL(N(mu_q, diag sigma_q^2) || N(mu_p, diag sigma_p^2)) summed over the
/// last dimension. Shapes as in gaussian_log_prob.
Tensor gaussian_diag_kl(const Tensor& mu_q, const Tensor& sigma_q,
                        const Tensor& mu_p, const Tensor& sigma_p);

// Raw kernels, shared by the op layer and non-differentiable callers.
// C (+)= A @ B with A [m,k], B [k,n].
void matmul_kernel(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate);
// C (+)= A^T @ B with A [k,m], B [k,n] -> C [m,n].
void matmul_tn_kernel(const double* a, const double* b, double* c,
                      std::int64_t k, std::int64_t m, std::int64_t n, bool accumulate);
// C (+)= A @ B^T with A [m,k], B [n,k] -> C [m,n].
void matmul_nt_kernel(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate);

} // namespace fwm
