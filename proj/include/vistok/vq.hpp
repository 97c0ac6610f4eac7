#pragma once

#include <span>
#include <vector>

#include "vistok/io.hpp"
#include "vistok/nn.hpp"

namespace vistok {

struct VqConfig {
    std::size_t codebook_size = 128;
    std::size_t code_dim = 32;
    double decay = 0.99;
    double epsilon = 1e-5;   // Laplace smoothing of cluster sizes
    double beta = 0.25;      // commitment weight
    // Codes whose EMA cluster size falls below this are re-seeded from the batch.
    // 0 disables the hook.
    double dead_code_threshold = 0.0;
};

// K x D code table maintained by exponential moving averages rather than gradients.
template <class T>
class Codebook {
public:
    Codebook() = default;
    Codebook(std::size_t size, std::size_t dim, Rng& rng, double decay = 0.99, double epsilon = 1e-5);

    std::size_t size() const { return embeddings.dim(0); }
    std::size_t dim() const { return embeddings.dim(1); }

    // Recomputes embeddings from the EMA statistics.
    void refresh();

    void save(io::Checkpoint& ckpt, const std::string& prefix = "codebook") const;
    static Codebook load(const io::Checkpoint& ckpt, const std::string& prefix, double decay,
                         double epsilon);

    Var<T> embeddings;             // [K,D], never trained by gradient
    Tensor<T> ema_cluster_size;    // [K]
    Tensor<T> ema_embed_sum;       // [K,D]
    double decay = 0.99;
    double epsilon = 1e-5;
};

template <class T>
struct Quantized {
    std::vector<int> indices;
    Tensor<T> z_q;  // [N,D]
};

// Nearest code by squared Euclidean distance, lowest index on ties.
template <class T>
Quantized<T> quantize_hard(const Tensor<T>& z, const Codebook<T>& cb);

// Probability-weighted average of code rows; probs[N,K] rows must be distributions.
template <class T>
Var<T> embed_soft(const Var<T>& probs, const Codebook<T>& cb);
template <class T>
Tensor<T> embed_indices(std::span<const int> indices, const Codebook<T>& cb);

template <class T>
void ema_update(Codebook<T>& cb, const Tensor<T>& z, std::span<const int> indices);

// Re-seeds codes with ema_cluster_size < threshold from rows of z; returns how many.
template <class T>
std::size_t reseed_dead_codes(Codebook<T>& cb, const Tensor<T>& z, double threshold, Rng& rng);

// beta * mean((z - stopgrad(z_q))^2); gradient reaches z only.
template <class T>
Var<T> commitment_loss(const Var<T>& z, const Tensor<T>& z_q, double beta);

// One-hot rows [N,K] for the given indices.
template <class T>
Tensor<T> one_hot(std::span<const int> indices, std::size_t k);

}  // namespace vistok
