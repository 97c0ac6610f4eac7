#include "vistok/nn.hpp"

#include <cmath>

namespace vistok {

template <class T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

template <class T>
void set_trainable(const ParamList<T>& params, bool trainable) {
    for (const auto& p : params) {
        auto v = p.var;
        v.set_requires_grad(trainable);
    }
}

template <class T>
void zero_grads(const ParamList<T>& params) {
    for (const auto& p : params) {
        auto v = p.var;
        v.zero_grad();
    }
}

template <class T>
std::size_t count_parameters(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.numel();
    return n;
}

namespace nn {

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    weight = Var<T>::leaf(uniform_tensor<T>({out, in}, bound, rng));
    if (with_bias) bias = Var<T>::leaf(Tensor<T>::zeros({out}));
}

template <class T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
}

template <class T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t s,
                  std::size_t p, Rng& rng, bool with_bias)
    : stride(s), padding(p) {
    // He-uniform for ReLU stacks.
    const T bound = std::sqrt(T(6) / static_cast<T>(in * kernel * kernel));
    weight = Var<T>::leaf(uniform_tensor<T>({out, in, kernel, kernel}, bound, rng));
    if (with_bias) bias = Var<T>::leaf(Tensor<T>::zeros({out}));
}

template <class T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
}

template <class T>
ConvTranspose2d<T>::ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel,
                                    std::size_t s, std::size_t p, Rng& rng, bool with_bias)
    : stride(s), padding(p) {
    // Each output pixel sees roughly in * (kernel/stride)^2 taps.
    const std::size_t taps = std::max<std::size_t>(1, in * (kernel / s) * (kernel / s));
    const T bound = std::sqrt(T(6) / static_cast<T>(taps));
    weight = Var<T>::leaf(uniform_tensor<T>({in, out, kernel, kernel}, bound, rng));
    if (with_bias) bias = Var<T>::leaf(Tensor<T>::zeros({out}));
}

template <class T>
void ConvTranspose2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
}

template <class T>
GroupNorm<T>::GroupNorm(std::size_t g, std::size_t channels)
    : groups(g),
      gamma(Var<T>::leaf(Tensor<T>::ones({channels}))),
      beta(Var<T>::leaf(Tensor<T>::zeros({channels}))) {}

template <class T>
void GroupNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

template <class T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gamma(Var<T>::leaf(Tensor<T>::ones({dim}))), beta(Var<T>::leaf(Tensor<T>::zeros({dim}))) {}

template <class T>
void LayerNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

template <class T>
Embedding<T>::Embedding(std::size_t rows, std::size_t dim, Rng& rng, T stddev)
    : table(Var<T>::leaf(normal_tensor<T>({rows, dim}, stddev, rng))) {}

template <class T>
void Embedding<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".table", table});
}

template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class ConvTranspose2d<float>;
template class ConvTranspose2d<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Embedding<float>;
template class Embedding<double>;

}  // namespace nn

template Tensor<float> uniform_tensor(Shape, float, Rng&);
template Tensor<double> uniform_tensor(Shape, double, Rng&);
template Tensor<float> normal_tensor(Shape, float, Rng&);
template Tensor<double> normal_tensor(Shape, double, Rng&);
template void set_trainable(const ParamList<float>&, bool);
template void set_trainable(const ParamList<double>&, bool);
template void zero_grads(const ParamList<float>&);
template void zero_grads(const ParamList<double>&);
template std::size_t count_parameters(const ParamList<float>&);
template std::size_t count_parameters(const ParamList<double>&);

}  // namespace vistok
