#pragma once

#include <span>
#include <vector>

#include "statex/tensor.hpp"

// Differentiable primitives. Each forward has a matching backward that
// returns the input gradient and accumulates (+=) parameter gradients.
namespace statex::ops {

inline constexpr double kNormEps = 1e-5;

// C = A B for A: n x k, B: k x m.
Tensor matmul(const Tensor & a, const Tensor & b);
// Same product, but each output column depends only on its own column of B,
// never on the width of B. Zero-padding B leaves the existing columns bit-exact.
Tensor matmul_stable(const Tensor & a, const Tensor & b);
// Accumulates dA += dC B^T and dB += A^T dC. Either output may be null.
void matmul_backward(const Tensor & dc, const Tensor & a, const Tensor & b, Tensor * da, Tensor * db);

Tensor add(const Tensor & a, const Tensor & b);
Tensor mul(const Tensor & a, const Tensor & b);
// Adds a bias row to every row.
void add_row_bias(Tensor & x, const Tensor & bias);
// Accumulates column sums of dy into dbias.
void row_bias_backward(const Tensor & dy, Tensor & dbias);

double sigmoid(double x);
double silu(double x);
double silu_grad(double x);
double softplus(double x);
// Inverse of softplus for y > 0.
double softplus_inv(double y);

Tensor sigmoid(const Tensor & x);
Tensor silu(const Tensor & x);
Tensor silu_backward(const Tensor & x, const Tensor & dy);
Tensor softplus(const Tensor & x);
Tensor softplus_backward(const Tensor & x, const Tensor & dy);
Tensor exp(const Tensor & x);

// Scale-only RMS normalization over contiguous groups of `group` columns.
// `scale` has one entry per column. `inv_rms` receives rows x (cols/group).
Tensor rms_norm(const Tensor & x, const Tensor & scale, std::size_t group, Tensor * inv_rms = nullptr);
Tensor rms_norm_backward(const Tensor & dy, const Tensor & x, const Tensor & scale, std::size_t group,
                         const Tensor & inv_rms, Tensor * dscale);

// Mean next-token cross-entropy over rows; targets < 0 are ignored.
// Writes d(mean loss)/d(logits) when `dlogits` is non-null.
double cross_entropy(const Tensor & logits, std::span<const int> targets, Tensor * dlogits = nullptr);

} // namespace statex::ops
