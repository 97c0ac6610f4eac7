#include "vistok/vq.hpp"

#include <cmath>
#include <limits>

namespace vistok {

template <class T>
Codebook<T>::Codebook(std::size_t size, std::size_t dim, Rng& rng, double d, double eps)
    : decay(d), epsilon(eps) {
    if (size < 2 || dim < 1) {
        throw ContractError("codebook needs K >= 2 and D >= 1, got K=" + std::to_string(size) +
                            " D=" + std::to_string(dim));
    }
    const T bound = T(1) / static_cast<T>(size);
    embeddings = Var<T>::leaf(uniform_tensor<T>({size, dim}, bound, rng), false);
    // Unit pseudo-counts make embeddings == sum / smoothed size from the start.
    ema_cluster_size = Tensor<T>::ones({size});
    ema_embed_sum = embeddings.value();
}

template <class T>
void Codebook<T>::refresh() {
    const std::size_t K = size(), D = dim();
    double total = 0;
    for (T c : ema_cluster_size.data()) total += c;
    auto& e = embeddings.mutable_value();
    for (std::size_t k = 0; k < K; ++k) {
        const double smoothed = (ema_cluster_size[k] + epsilon) / (total + K * epsilon) * total;
        for (std::size_t d = 0; d < D; ++d)
            e[k * D + d] = static_cast<T>(ema_embed_sum[k * D + d] / smoothed);
    }
}

template <class T>
void Codebook<T>::save(io::Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.put(prefix + ".embeddings", embeddings.value());
    ckpt.put(prefix + ".ema_size", ema_cluster_size);
    ckpt.put(prefix + ".ema_sum", ema_embed_sum);
}

template <class T>
Codebook<T> Codebook<T>::load(const io::Checkpoint& ckpt, const std::string& prefix, double d,
                              double eps) {
    Codebook cb;
    cb.decay = d;
    cb.epsilon = eps;
    cb.embeddings = Var<T>::leaf(ckpt.get<T>(prefix + ".embeddings"), false);
    cb.ema_cluster_size = ckpt.get<T>(prefix + ".ema_size");
    cb.ema_embed_sum = ckpt.get<T>(prefix + ".ema_sum");
    if (cb.embeddings.shape().size() != 2 || cb.ema_cluster_size.numel() != cb.size() ||
        cb.ema_embed_sum.shape() != cb.embeddings.shape()) {
        throw IoError("inconsistent codebook tensors under '" + prefix + "'");
    }
    return cb;
}

template <class T>
Quantized<T> quantize_hard(const Tensor<T>& z, const Codebook<T>& cb) {
    if (!cb.embeddings.defined() || cb.size() == 0) throw ContractError("quantize_hard: empty codebook");
    if (z.ndim() != 2 || z.dim(1) != cb.dim()) {
        throw ShapeError("quantize_hard: input " + shape_str(z.shape()) + " vs code dim " +
                         std::to_string(cb.dim()));
    }
    const std::size_t N = z.dim(0), K = cb.size(), D = cb.dim();
    const T* e = cb.embeddings.value().ptr();
    Quantized<T> q{std::vector<int>(N), Tensor<T>({N, D})};
    for (std::size_t i = 0; i < N; ++i) {
        const T* zi = z.ptr() + i * D;
        T best = std::numeric_limits<T>::infinity();
        std::size_t arg = 0;
        for (std::size_t k = 0; k < K; ++k) {
            T dist = 0;
            const T* ek = e + k * D;
            for (std::size_t d = 0; d < D; ++d) {
                const T diff = zi[d] - ek[d];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                arg = k;
            }
        }
        q.indices[i] = static_cast<int>(arg);
        std::copy_n(e + arg * D, D, q.z_q.ptr() + i * D);
    }
    return q;
}

template <class T>
Var<T> embed_soft(const Var<T>& probs, const Codebook<T>& cb) {
    if (probs.shape().size() != 2 || probs.dim(1) != cb.size()) {
        throw ShapeError("embed_soft: probabilities " + shape_str(probs.shape()) + " vs codebook of " +
                         std::to_string(cb.size()));
    }
    const std::size_t N = probs.dim(0), K = probs.dim(1);
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) {
            const T p = probs.value()[i * K + k];
            if (p < T(-1e-6)) {
                throw ContractError("embed_soft: negative probability at row " + std::to_string(i));
            }
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-4) {
            throw ContractError("embed_soft: row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }
    return ops::matmul(probs, cb.embeddings);
}

template <class T>
Tensor<T> embed_indices(std::span<const int> indices, const Codebook<T>& cb) {
    const std::size_t D = cb.dim();
    Tensor<T> out({indices.size(), D});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= cb.size()) {
            throw IndexError("code index " + std::to_string(indices[i]) + " outside codebook of " +
                             std::to_string(cb.size()));
        }
        std::copy_n(cb.embeddings.value().ptr() + indices[i] * D, D, out.ptr() + i * D);
    }
    return out;
}

template <class T>
void ema_update(Codebook<T>& cb, const Tensor<T>& z, std::span<const int> indices) {
    const std::size_t K = cb.size(), D = cb.dim();
    if (z.ndim() != 2 || z.dim(1) != D || z.dim(0) != indices.size()) {
        throw ShapeError("ema_update: z " + shape_str(z.shape()) + " with " +
                         std::to_string(indices.size()) + " indices");
    }
    std::vector<double> counts(K, 0.0), sums(K * D, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto k = static_cast<std::size_t>(indices[i]);
        if (k >= K) throw IndexError("ema_update: index " + std::to_string(k) + " >= " + std::to_string(K));
        counts[k] += 1.0;
        for (std::size_t d = 0; d < D; ++d) sums[k * D + d] += z[i * D + d];
    }
    const double a = cb.decay;
    for (std::size_t k = 0; k < K; ++k) {
        cb.ema_cluster_size[k] = static_cast<T>(a * cb.ema_cluster_size[k] + (1.0 - a) * counts[k]);
        for (std::size_t d = 0; d < D; ++d) {
            auto& s = cb.ema_embed_sum[k * D + d];
            s = static_cast<T>(a * s + (1.0 - a) * sums[k * D + d]);
        }
    }
    cb.refresh();
}

template <class T>
std::size_t reseed_dead_codes(Codebook<T>& cb, const Tensor<T>& z, double threshold, Rng& rng) {
    if (threshold <= 0 || z.dim(0) == 0) return 0;
    const std::size_t K = cb.size(), D = cb.dim(), N = z.dim(0);
    std::size_t reseeded = 0;
    for (std::size_t k = 0; k < K; ++k) {
        if (cb.ema_cluster_size[k] >= threshold) continue;
        const std::size_t row = rng() % N;
        cb.ema_cluster_size[k] = T(1);
        for (std::size_t d = 0; d < D; ++d) cb.ema_embed_sum[k * D + d] = z[row * D + d];
        ++reseeded;
    }
    if (reseeded) cb.refresh();
    return reseeded;
}

template <class T>
Var<T> commitment_loss(const Var<T>& z, const Tensor<T>& z_q, double beta) {
    if (z.shape() != z_q.shape()) {
        throw ShapeError("commitment_loss: " + shape_str(z.shape()) + " vs " + shape_str(z_q.shape()));
    }
    if (beta == 0.0) return Var<T>::constant(Tensor<T>::scalar(T(0)));
    const Mask all(z.numel(), 1);
    return ops::scale(ops::masked_mse(z, Var<T>::constant(z_q), all), static_cast<T>(beta));
}

template <class T>
Tensor<T> one_hot(std::span<const int> indices, std::size_t k) {
    Tensor<T> out({indices.size(), k});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= k) {
            throw IndexError("one_hot: index " + std::to_string(indices[i]) + " outside " + std::to_string(k));
        }
        out[i * k + indices[i]] = T(1);
    }
    return out;
}

#define VISTOK_INSTANTIATE_VQ(T)                                                             \
    template class Codebook<T>;                                                              \
    template Quantized<T> quantize_hard(const Tensor<T>&, const Codebook<T>&);               \
    template Var<T> embed_soft(const Var<T>&, const Codebook<T>&);                           \
    template Tensor<T> embed_indices(std::span<const int>, const Codebook<T>&);              \
    template void ema_update(Codebook<T>&, const Tensor<T>&, std::span<const int>);          \
    template std::size_t reseed_dead_codes(Codebook<T>&, const Tensor<T>&, double, Rng&);    \
    template Var<T> commitment_loss(const Var<T>&, const Tensor<T>&, double);                \
    template Tensor<T> one_hot(std::span<const int>, std::size_t);

VISTOK_INSTANTIATE_VQ(float)
VISTOK_INSTANTIATE_VQ(double)

#undef VISTOK_INSTANTIATE_VQ

}  // namespace vistok
