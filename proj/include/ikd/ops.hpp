#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Per-channel constant affine on NCHW input: x * scale[c] + shift[c].
Tensor channel_affine(const Tensor& x, std::span<const double> scale, std::span<const double> shift);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Max element; the gradient goes to the first maximal entry.
Tensor max_all(const Tensor& x);
// Euclidean norm of the flattened tensor; zero subgradient at the origin.
Tensor l2_norm(const Tensor& x);
// Flattened inner product.
Tensor dot(const Tensor& a, const Tensor& b);

// a[m,k] · b[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched a[B,m,k] · b[B,k,n]; with transpose_b, b is [B,n,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x[..., k] · w[k, n] (+ bias[n]); leading dims are flattened.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Replace entries where mask != 0 with `value`; those entries get no gradient.
Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value);

// Normalizes the last axis to zero mean / unit variance, then gain * x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-9);

// Cross-correlation over NCHW input with weight [O, C, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride = 1, std::size_t padding = 0);
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

// Non-overlapping factor x factor mean pooling on NCHW.
Tensor avg_pool2d(const Tensor& x, std::size_t factor);
// Replicates each cell into a factor x factor block; right inverse of avg_pool2d.
Tensor avg_unpool2d(const Tensor& x, std::size_t factor);
// Nearest-neighbour upsampling (same replication, index-free).
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

// Rows of table[V, d] selected by ids -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

enum class Reduction { Sum, Mean };

// Negative log-likelihood of targets under softmax(logits[N, V]). Rows whose
// target equals ignore_index are excluded; Mean divides by the kept count.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     Reduction reduction = Reduction::Mean, int ignore_index = -1);

}  // namespace ikd
