#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "geniedrive/core/rng.hpp"
#include "geniedrive/nn/tensor.hpp"

// Differentiable tensor operations. All tensors are dense, row-major, double.
namespace geniedrive::nn {

// ---- shape manipulation ----------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
/// Rows of a 2-D table: out[i, :] = table[index[i], :].
Tensor gather_rows(const Tensor& table, std::span<const int64_t> index);
/// Repeat along a new leading axis: (s...) -> (count, s...).
Tensor repeat_leading(const Tensor& x, int64_t count);

// ---- elementwise (numpy broadcasting) --------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim);

// ---- linear algebra --------------------------------------------------------
/// (M, K) x (K, N) -> (M, N).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (..., in) * weight (in, out) + bias (out) -> (..., out). Bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- normalization / activation over the last axis -------------------------
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// Normalizes the last axis; gamma and beta (size = last dim) may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention.
/// q: (B, Lq, C), k and v: (B, Lk, C); C divisible by heads. Returns (B, Lq, C).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

// ---- volumetric ops (channel-last, single sample) --------------------------
/// x: (X, Y, Z, Cin); weight: (k*k*k*Cin, Cout); bias: (Cout) or undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride,
              int padding);
/// Transposed convolution with kernel 2, stride 2: (X, Y, Z, Cin) -> (2X, 2Y, 2Z, Cout).
/// weight: (Cin, 8*Cout), offsets ordered (dx, dy, dz) row-major; bias: (Cout) or undefined.
Tensor upconv3d_2x(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// out[i,j,k,c] = xy[i,j,c] * yz[j,k,c] * xz[i,k,c].
Tensor triplane_product(const Tensor& xy, const Tensor& yz, const Tensor& xz);

// ---- losses ----------------------------------------------------------------
/// Mean cross-entropy of logits (N, K) against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Lovasz-softmax over probabilities (G, P, K): per group, average over the
/// classes present in that group's labels; mean over groups.
Tensor lovasz_softmax(const Tensor& probs, std::span<const int> labels);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- stochastic ------------------------------------------------------------
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Gradient of the Lovasz extension of the Jaccard loss for sorted foreground
/// indicators (descending error order).
std::vector<double> lovasz_grad(std::span<const double> sorted_fg);

}  // namespace geniedrive::nn
