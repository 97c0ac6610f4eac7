#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vistok/ops.hpp"

namespace vistok {

using Rng = std::mt19937_64;

template <class T>
struct NamedParam {
    std::string name;
    Var<T> var;
};
template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng);
template <class T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng);

// Marks every parameter as (non-)trainable; frozen modules still pass gradients through.
template <class T>
void set_trainable(const ParamList<T>& params, bool trainable);
template <class T>
void zero_grads(const ParamList<T>& params);
template <class T>
std::size_t count_parameters(const ParamList<T>& params);

namespace nn {

template <class T>
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);
    Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Var<T> weight;
    std::optional<Var<T>> bias;
};

template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
           std::size_t padding, Rng& rng, bool bias = true);
    Var<T> operator()(const Var<T>& x) const {
        return ops::conv2d(x, weight, bias, stride, padding);
    }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Var<T> weight;
    std::optional<Var<T>> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <class T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, Rng& rng, bool bias = true);
    Var<T> operator()(const Var<T>& x) const {
        return ops::conv_transpose2d(x, weight, bias, stride, padding);
    }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Var<T> weight;
    std::optional<Var<T>> bias;
    std::size_t stride = 2;
    std::size_t padding = 1;
};

template <class T>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(std::size_t groups, std::size_t channels);
    Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, groups, gamma, beta); }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    std::size_t groups = 1;
    Var<T> gamma, beta;
};

template <class T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);
    Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Var<T> gamma, beta;
};

template <class T>
class Embedding {
public:
    Embedding() = default;
    Embedding(std::size_t rows, std::size_t dim, Rng& rng, T stddev = T(0.02));
    Var<T> operator()(std::span<const int> ids) const { return ops::embedding(table, ids); }
    void collect(const std::string& prefix, ParamList<T>& out) const;

    Var<T> table;
};

}  // namespace nn
}  // namespace vistok
