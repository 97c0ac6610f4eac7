#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>
#include <span>
#include <vector>

#include "vistok/autograd.hpp"

namespace vistok {

// Byte-per-element boolean mask (1 = selected/valid).
using Mask = std::vector<std::uint8_t>;

namespace ops {

// Elementwise, identical shapes.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
// y broadcast over the leading dims of x; y.shape must equal the trailing dims of x.
template <class T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& y);
template <class T> Var<T> scale(const Var<T>& x, T s);
template <class T> Var<T> add_scalar(const Var<T>& x, T s);
template <class T> Var<T> relu(const Var<T>& x);
template <class T> Var<T> sigmoid(const Var<T>& x);
template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> mean(const Var<T>& x);
template <class T> Var<T> reshape(const Var<T>& x, Shape shape);
template <class T> Var<T> detach(const Var<T>& x);

// a[M,K] @ b[K,N]
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x[..., in] @ weight[out, in]^T + bias[out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias);

template <class T> Var<T> softmax(const Var<T>& x, int axis = -1);
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
// x[N,C,H,W]; statistics per (sample, group of C/groups channels).
template <class T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5));

// table[V,D] gathered at ids -> [ids.size(), D]
template <class T> Var<T> embedding(const Var<T>& table, std::span<const int> ids);

// Multi-head scaled dot-product attention. q[B,Lq,E], k/v[B,Lk,E], E divisible by n_heads.
// causal requires Lq == Lk; position i attends to positions <= i.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t n_heads,
                 bool causal);

// input[N,C,H,W], weight[O,C,k,k], bias[O]
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias,
              std::size_t stride, std::size_t padding);
// input[N,C,H,W], weight[C,O,k,k], bias[O]; output side (H-1)*stride - 2*padding + k
template <class T>
Var<T> conv_transpose2d(const Var<T>& input, const Var<T>& weight,
                        const std::type_identity_t<std::optional<Var<T>>>& bias, std::size_t stride,
                        std::size_t padding);

// [N,C,H,W] -> [N*H*W, C] and back.
template <class T> Var<T> nchw_to_rows(const Var<T>& x);
template <class T> Var<T> rows_to_nchw(const Var<T>& x, std::size_t n, std::size_t h, std::size_t w);

// Columns [begin, end) of the last axis.
template <class T> Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t end);
// Rows of x[R,C] at idx -> [idx.size(), C]
template <class T> Var<T> select_rows(const Var<T>& x, std::span<const std::size_t> idx);

// Forward value z_q; backward routes the incoming gradient to z unchanged.
template <class T> Var<T> straight_through(const Var<T>& z, const Var<T>& z_q);

// Mean NLL over rows whose ignore flag is 0. All-ignored -> 0.
template <class T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> ignore);
// Mean squared error over valid entries. No valid entries -> 0.
template <class T>
Var<T> masked_mse(const Var<T>& pred, const Var<T>& target, std::span<const std::uint8_t> valid);
// Binary cross-entropy on logits against targets in [0,1], mean over valid entries.
template <class T>
Var<T> masked_bce_with_logits(const Var<T>& logits, const Var<T>& target,
                              std::span<const std::uint8_t> valid);

}  // namespace ops
}  // namespace vistok
